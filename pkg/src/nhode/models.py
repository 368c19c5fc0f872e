"""Learned dynamics: NHODE variants, NODE baselines and the initial-state encoder.

State layout everywhere is ``x = (q, p)`` with ``q`` and ``p`` stored
particle-major, i.e. ``q = (q_1x, q_1y, q_2x, ...)`` for ``d = 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ad
from .nn import BoundMlp, MlpParams, mlp_forward, mlp_graph, mlp_input_gradient_graph, mlp_widths

KINDS = ("nhode-tot", "nhode-pot", "node-vanilla", "node-phys")
COORDS = ("abs", "rel")
# pairwise distances below this are clamped; the unit vector is then zero
DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class ObservationScheme:
    """Which of the ``dim`` scalar state components are observed."""

    observed: tuple[int, ...]
    dim: int

    def __post_init__(self):
        obs = tuple(int(i) for i in self.observed)
        if len(set(obs)) != len(obs) or any(not 0 <= i < self.dim for i in obs):
            raise ValueError(f"invalid observed index set {obs} for dim {self.dim}")
        object.__setattr__(self, "observed", tuple(sorted(obs)))

    @property
    def hidden(self) -> tuple[int, ...]:
        obs = set(self.observed)
        return tuple(i for i in range(self.dim) if i not in obs)

    @classmethod
    def full(cls, dim: int) -> ObservationScheme:
        return cls(tuple(range(dim)), dim)

    @classmethod
    def hide_particle(cls, n_particles: int, d: int, particle: int) -> ObservationScheme:
        """Hide position and momentum of ``particle`` (0-based)."""
        n = n_particles * d
        hidden = set()
        for k in range(d):
            hidden.add(particle * d + k)
            hidden.add(n + particle * d + k)
        return cls(tuple(i for i in range(2 * n) if i not in hidden), 2 * n)

    def observe(self, x):
        return np.take(np.asarray(x), self.observed, axis=-1)

    def assemble(self, obs, hid):
        """Inverse of splitting: put observed and hidden components back in canonical order."""
        obs = np.asarray(obs, dtype=np.float64)
        hid = np.asarray(hid, dtype=np.float64)
        out = np.empty(obs.shape[:-1] + (self.dim,))
        out[..., list(self.observed)] = obs
        out[..., list(self.hidden)] = hid
        return out

    def assembly_index(self) -> np.ndarray:
        """Index that reorders ``concat(obs, hid)`` into canonical order."""
        order = list(self.observed) + list(self.hidden)
        return np.argsort(order)


def n_pairs(n_particles: int) -> int:
    return n_particles * (n_particles - 1) // 2


def pairs(n_particles: int) -> list[tuple[int, int]]:
    return [(j, k) for j in range(n_particles) for k in range(j + 1, n_particles)]


@lru_cache(maxsize=None)
def _distance_operators(n_particles: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """``diff = q @ D`` stacks ``q_j - q_k`` per pair; ``s = diff**2 @ S`` sums over axes."""
    prs = pairs(n_particles)
    D = np.zeros((n_particles * d, len(prs) * d))
    S = np.zeros((len(prs) * d, len(prs)))
    for m, (j, k) in enumerate(prs):
        for a in range(d):
            D[j * d + a, m * d + a] = 1.0
            D[k * d + a, m * d + a] = -1.0
            S[m * d + a, m] = 1.0
    D.setflags(write=False)
    S.setflags(write=False)
    return D, S


def pairwise_distances(q, n_particles: int, d: int) -> np.ndarray:
    """Distances ``|q_j - q_k|`` for ``j < k`` in lexicographic pair order."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != n_particles * d:
        raise ValueError(f"expected {n_particles * d} position components, got {q.shape[-1]}")
    D, S = _distance_operators(n_particles, d)
    diff = q @ D
    return np.sqrt((diff * diff) @ S)


@dataclass
class DistanceGraph:
    diff: ad.Node
    r: ad.Node

    def pullback(self, g_r: ad.Node, n_particles: int, d: int) -> ad.Node:
        """``J_d(q)^T g_r``: gradient w.r.t. positions from a gradient w.r.t. distances."""
        D, S = _distance_operators(n_particles, d)
        tape = g_r.tape
        coef = ad.mul(g_r, ad.reciprocal(self.r))
        coef_rep = ad.matmul(coef, tape.constant(S), transpose_b=True)
        return ad.matmul(ad.mul(coef_rep, self.diff), tape.constant(D), transpose_b=True)


def distance_graph(q: ad.Node, n_particles: int, d: int) -> DistanceGraph:
    D, S = _distance_operators(n_particles, d)
    tape = q.tape
    diff = ad.matmul(q, tape.constant(D))
    r = ad.sqrt(ad.matmul(ad.square(diff), tape.constant(S)), floor=DISTANCE_FLOOR)
    return DistanceGraph(diff, r)


@dataclass
class DynamicsModel:
    kind: str
    coords: str
    net: MlpParams
    n_particles: int
    d: int
    masses: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.coords not in COORDS:
            raise ValueError(f"unknown coords {self.coords!r}")
        if self.kind in ("nhode-pot", "node-phys"):
            if self.masses is None or len(self.masses) != self.n_particles:
                raise ValueError(f"{self.kind} needs one mass per particle")
        if self.masses is not None:
            self.masses = tuple(float(m) for m in self.masses)
            if any(m <= 0 for m in self.masses):
                raise ValueError("masses must be positive")
        want_in, want_out = io_sizes(self.kind, self.coords, self.n_particles, self.d)
        if (self.net.in_size, self.net.out_size) != (want_in, want_out):
            raise ValueError(
                f"{self.kind},{self.coords} network must map {want_in} -> {want_out}, "
                f"got {self.net.in_size} -> {self.net.out_size}"
            )

    @property
    def n(self) -> int:
        return self.n_particles * self.d

    @property
    def state_dim(self) -> int:
        return 2 * self.n

    @property
    def is_hamiltonian(self) -> bool:
        return self.kind.startswith("nhode")

    @property
    def name(self) -> str:
        return f"{self.kind},{self.coords}"

    def inverse_mass_vector(self) -> np.ndarray:
        return np.repeat(1.0 / np.asarray(self.masses), self.d)


def io_sizes(kind: str, coords: str, n_particles: int, d: int) -> tuple[int, int]:
    n = n_particles * d
    q_width = n if coords == "abs" else n_pairs(n_particles)
    if kind == "nhode-pot":
        return q_width, 1
    in_size = q_width + n
    if kind == "nhode-tot":
        return in_size, 1
    if kind == "node-vanilla":
        return in_size, 2 * n
    if kind == "node-phys":
        return in_size, n
    raise ValueError(f"unknown model kind {kind!r}")


def make_model(kind: str, coords: str, n_particles: int, d: int, rng: np.random.Generator,
               masses=None, width: int = 128, depth: int = 4) -> DynamicsModel:
    in_size, out_size = io_sizes(kind, coords, n_particles, d)
    net = MlpParams.init(mlp_widths(in_size, out_size, width, depth), rng)
    return DynamicsModel(kind, coords, net, n_particles, d, masses)


def _split(x: ad.Node, n: int) -> tuple[ad.Node, ad.Node]:
    return ad.gather(x, np.arange(n)), ad.gather(x, np.arange(n, 2 * n))


def field_graph(model: DynamicsModel, net: BoundMlp, x: ad.Node) -> ad.Node:
    """Vector field ``f_theta(x)`` as graph ops; ``x`` has shape ``(batch, 2n)``."""
    n = model.n
    if x.value.shape[-1] != 2 * n:
        raise ValueError(f"state width {x.value.shape[-1]} != {2 * n}")
    q, p = _split(x, n)
    dist = None
    if model.coords == "rel":
        dist = distance_graph(q, model.n_particles, model.d)
        q_in = dist.r
    else:
        q_in = q

    if model.kind == "nhode-pot":
        dv = mlp_input_gradient_graph(net, q_in)
        dh_dq = dist.pullback(dv, model.n_particles, model.d) if dist else dv
        q_dot = ad.scale(p, model.inverse_mass_vector())
        return ad.concat([q_dot, ad.neg(dh_dq)])

    z = ad.concat([q_in, p])
    if model.kind == "nhode-tot":
        g = mlp_input_gradient_graph(net, z)
        m = q_in.value.shape[-1]
        g_q, g_p = ad.gather(g, np.arange(m)), ad.gather(g, np.arange(m, m + n))
        dh_dq = dist.pullback(g_q, model.n_particles, model.d) if dist else g_q
        return ad.concat([g_p, ad.neg(dh_dq)])
    if model.kind == "node-vanilla":
        return mlp_graph(net, z)
    # node-phys: only the momentum derivatives are learned
    q_dot = ad.scale(p, model.inverse_mass_vector())
    return ad.concat([q_dot, mlp_graph(net, z)])


def vector_field(model: DynamicsModel, x) -> np.ndarray:
    """Numeric vector field; accepts a single state or a ``(batch, 2n)`` array."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    tape = ad.Tape(record=False)
    out = field_graph(model, model.net.bind(tape, trainable=False), tape.constant(np.atleast_2d(x))).value
    return out[0] if single else out


def hamiltonian_value(model: DynamicsModel, x) -> np.ndarray | float:
    """Learned Hamiltonian; kinetic energy is exact for the ``nhode-pot`` variants."""
    if not model.is_hamiltonian:
        raise TypeError(f"{model.name} has no Hamiltonian")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    n = model.n
    q, p = x2[:, :n], x2[:, n:]
    q_in = pairwise_distances(q, model.n_particles, model.d) if model.coords == "rel" else q
    if model.kind == "nhode-tot":
        h = mlp_forward(model.net, np.concatenate([q_in, p], axis=1))[:, 0]
    else:
        kinetic = 0.5 * (p * p) @ model.inverse_mass_vector()
        h = kinetic + mlp_forward(model.net, q_in)[:, 0]
    return float(h[0]) if single else h


def hamiltonian_gradient(model: DynamicsModel, x) -> np.ndarray:
    """``grad_x H_theta``, recovered from the vector field via ``S^-1``."""
    f = vector_field(model, x)
    n = model.n
    return np.concatenate([-f[..., n:], f[..., :n]], axis=-1)


@dataclass
class Encoder:
    """Maps ``K + 1`` observed snapshots to the hidden part of the initial state.

    The flattened window passes through a fixed affine map ``(w - shift) @ mix``
    before the network. Both default to the identity; ``whiten_inputs`` fits them
    to a set of observed windows.
    """

    net: MlpParams
    window: int
    scheme: ObservationScheme
    shift: np.ndarray | None = None
    mix: np.ndarray | None = None

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window length K must be >= 0")
        want_in = (self.window + 1) * len(self.scheme.observed)
        if self.net.in_size != want_in or self.net.out_size != len(self.scheme.hidden):
            raise ValueError(
                f"encoder must map {want_in} -> {len(self.scheme.hidden)}, "
                f"got {self.net.in_size} -> {self.net.out_size}"
            )
        if (self.shift is None) != (self.mix is None):
            raise ValueError("shift and mix must be given together")
        if self.shift is not None:
            self.shift = np.asarray(self.shift, dtype=np.float64)
            self.mix = np.asarray(self.mix, dtype=np.float64)
            if self.shift.shape != (want_in,) or self.mix.shape != (want_in, want_in):
                raise ValueError(f"input map must be ({want_in},) and ({want_in}, {want_in})")

    @classmethod
    def create(cls, scheme: ObservationScheme, window: int, rng: np.random.Generator,
               width: int = 128, depth: int = 4) -> Encoder:
        widths = mlp_widths((window + 1) * len(scheme.observed), len(scheme.hidden), width, depth)
        return cls(MlpParams.init(widths, rng), window, scheme)

    def flatten_window(self, observed_window: np.ndarray) -> np.ndarray:
        """``(..., K+1, n_obs)`` -> ``(..., (K+1) * n_obs)``, time-major."""
        w = np.asarray(observed_window, dtype=np.float64)
        if w.shape[-2:] != (self.window + 1, len(self.scheme.observed)):
            raise ValueError(
                f"window must have shape (K+1={self.window + 1}, {len(self.scheme.observed)}), "
                f"got {w.shape[-2:]}"
            )
        return w.reshape(*w.shape[:-2], -1)

    def prepare(self, flat: np.ndarray) -> np.ndarray:
        if self.shift is None:
            return flat
        return (flat - self.shift) @ self.mix

    def copy(self) -> Encoder:
        keep = None if self.shift is None else (self.shift.copy(), self.mix.copy())
        return Encoder(self.net.copy(), self.window, self.scheme, *(keep or (None, None)))


def whiten_inputs(enc: Encoder, observed_windows, rel_floor: float = 1e-9) -> Encoder:
    """Copy of ``enc`` whose input map centres and decorrelates the given windows.

    Consecutive snapshots are nearly collinear, so the raw window is badly
    conditioned: hidden momenta show up only in small second differences.
    Principal directions are rescaled to unit variance; singular values
    below ``rel_floor`` times the largest are clamped to avoid amplifying roundoff.
    """
    flat = enc.flatten_window(observed_windows).reshape(-1, enc.net.in_size)
    if flat.shape[0] < 2:
        raise ValueError("need at least two windows to fit the input map")
    shift = flat.mean(axis=0)
    _, sigma, vt = np.linalg.svd(flat - shift, full_matrices=False)
    scale = np.maximum(sigma, rel_floor * sigma[0]) / np.sqrt(flat.shape[0])
    mix = np.zeros((enc.net.in_size, enc.net.in_size))
    mix[:, : len(sigma)] = vt.T / scale
    return Encoder(enc.net.copy(), enc.window, enc.scheme, shift, mix)


def encode_initial_hidden(enc: Encoder, observed_window) -> np.ndarray:
    flat = enc.flatten_window(observed_window)
    single = flat.ndim == 1
    out = mlp_forward(enc.net, enc.prepare(np.atleast_2d(flat)))
    return out[0] if single else out


def initial_state_graph(scheme: ObservationScheme, obs0: ad.Node, hidden: ad.Node) -> ad.Node:
    """``x0 = (x_obs(t0), x_hid0)`` placed in canonical component order."""
    return ad.gather(ad.concat([obs0, hidden]), scheme.assembly_index())


def linear_momentum(x, n_particles: int, d: int) -> np.ndarray:
    x = np.asarray(x)
    n = n_particles * d
    p = x[..., n:].reshape(*x.shape[:-1], n_particles, d)
    return p.sum(axis=-2)


def angular_momentum(x, n_particles: int, d: int) -> np.ndarray:
    """``sum_j q_j x p_j``; planar states are embedded in 3-D (only the z entry survives)."""
    if d not in (2, 3):
        raise ValueError("angular momentum needs d = 2 or 3")
    x = np.asarray(x)
    n = n_particles * d
    q = x[..., :n].reshape(*x.shape[:-1], n_particles, d)
    p = x[..., n:].reshape(*x.shape[:-1], n_particles, d)
    if d == 2:
        return (q[..., 0] * p[..., 1] - q[..., 1] * p[..., 0]).sum(axis=-1)[..., None]
    return np.cross(q, p).sum(axis=-2)


def angular_bracket(model: DynamicsModel, x) -> np.ndarray:
    """``sum_j (dH/dp_j x p_j - q_j x dH/dq_j)``, i.e. dL/dt under the learned flow."""
    f = vector_field(model, x)
    n = model.n
    d = model.d
    x = np.asarray(x)
    q = x[..., :n].reshape(*x.shape[:-1], model.n_particles, d)
    p = x[..., n:].reshape(*x.shape[:-1], model.n_particles, d)
    qd = f[..., :n].reshape(q.shape)
    pd = f[..., n:].reshape(p.shape)
    if d == 2:
        cross = lambda a, b: (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])[..., None]  # noqa: E731
    else:
        cross = np.cross
    return (cross(qd, p) + cross(q, pd)).sum(axis=-2)
