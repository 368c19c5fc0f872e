"""Ground truth for the benchmark systems.

* ``dms``  - two masses, two linear springs, 1-D, wall-anchored.
* ``nlms`` - three masses on a triangle of quartic-potential springs, 2-D.
* ``tbp``  - three gravitating bodies with Plummer softening, 3-D.

Gradients are written out by hand so they can serve as an oracle for the
automatic differentiation path.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ObservationScheme, pairs
from .odeint import PiecewiseField, SolverConfig, SolverError, rollout

SYSTEM_KINDS = ("dms", "nlms", "tbp")
_KIND_CODE = {"dms": 0, "nlms": 1, "tbp": 2}
_GEOMETRY = {"dms": (2, 1), "nlms": (3, 2), "tbp": (3, 3)}

DATASET_MAGIC = b"NHDS0001"
RNG_ALGORITHM = "philox4x64-10 via numpy SeedSequence(seed, spawn_key=crc32(path))"

# Table-style defaults per system
SYSTEM_DEFAULTS = {
    "dms": dict(n_traj=4000, horizon=1.0, steps=101, rtol=1e-6, atol=1e-8, max_steps=100_000, depth=4),
    "nlms": dict(n_traj=4000, horizon=1.0, steps=101, rtol=1e-6, atol=1e-8, max_steps=100_000, depth=3),
    "tbp": dict(n_traj=2000, horizon=3.0, steps=1001, rtol=1e-5, atol=1e-6, max_steps=16_384, depth=4),
}


def derive_rng(seed: int, *path: str) -> np.random.Generator:
    """Independent Philox stream for a named derivation path under a root seed."""
    key = tuple(zlib.crc32(p.encode()) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    masses: tuple[float, ...]
    spring_k: tuple[float, ...] = ()
    rest_lengths: tuple[float, ...] = ()
    G: float = 1.0
    eps: float = 0.6

    def __post_init__(self):
        if self.kind not in SYSTEM_KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}")
        for name in ("masses", "spring_k", "rest_lengths"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        n_p, _ = _GEOMETRY[self.kind]
        n_springs = {"dms": 2, "nlms": 3, "tbp": 0}[self.kind]
        if len(self.masses) != n_p:
            raise ValueError(f"{self.kind} needs {n_p} masses")
        if len(self.spring_k) != n_springs or len(self.rest_lengths) != n_springs:
            raise ValueError(f"{self.kind} needs {n_springs} spring constants and rest lengths")
        values = list(self.masses) + list(self.spring_k) + list(self.rest_lengths)
        if self.kind == "tbp":
            values += [self.G, self.eps]
        if any(not v > 0 for v in values):
            raise ValueError("masses, spring constants, rest lengths, G and eps must be positive")

    @classmethod
    def dms(cls, masses=(1.0, 1.2), k=(3.0, 5.0), rest=(0.4, 0.6)) -> SystemSpec:
        return cls("dms", masses, k, rest)

    @classmethod
    def nlms(cls, masses=(1.0, 1.0, 1.0), k=(1.0, 1.0, 1.0), rest=(0.9, 0.9, 0.9)) -> SystemSpec:
        """Springs ordered (1,2), (1,3), (2,3)."""
        return cls("nlms", masses, k, rest)

    @classmethod
    def tbp(cls, eps: float = 0.6, masses=(1.0, 1.0, 1.0), G: float = 1.0) -> SystemSpec:
        return cls("tbp", masses, G=G, eps=eps)

    @property
    def n_particles(self) -> int:
        return _GEOMETRY[self.kind][0]

    @property
    def d(self) -> int:
        return _GEOMETRY[self.kind][1]

    @property
    def n(self) -> int:
        return self.n_particles * self.d

    @property
    def state_dim(self) -> int:
        return 2 * self.n

    def inverse_mass_vector(self) -> np.ndarray:
        return np.repeat(1.0 / np.asarray(self.masses), self.d)

    def parameters(self) -> list[float]:
        out = list(self.masses) + list(self.spring_k) + list(self.rest_lengths)
        if self.kind == "tbp":
            out += [self.G, self.eps]
        return out

    @classmethod
    def from_parameters(cls, kind: str, values) -> SystemSpec:
        v = [float(x) for x in values]
        if kind == "dms":
            return cls(kind, v[0:2], v[2:4], v[4:6])
        if kind == "nlms":
            return cls(kind, v[0:3], v[3:6], v[6:9])
        if kind == "tbp":
            return cls(kind, v[0:3], G=v[3], eps=v[4])
        raise ValueError(f"unknown system kind {kind!r}")


def _check_dim(spec: SystemSpec, x: np.ndarray) -> None:
    if x.shape[-1] != spec.state_dim:
        raise ValueError(f"{spec.kind} state has {spec.state_dim} components, got {x.shape[-1]}")


def _sign(v):
    # sign(0) = 0 keeps |.| differentiable enough for the gradient
    return np.sign(v)


def kinetic_energy(spec: SystemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    p = x[..., spec.n:]
    return 0.5 * (p * p) @ spec.inverse_mass_vector()


def potential_energy(spec: SystemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_dim(spec, x)
    q = x[..., :spec.n]
    if spec.kind == "dms":
        (k1, k2), (l1, l2) = spec.spring_k, spec.rest_lengths
        e1 = np.abs(q[..., 0]) - l1
        e2 = np.abs(q[..., 1] - q[..., 0]) - l2
        return 0.5 * k1 * e1 ** 2 + 0.5 * k2 * e2 ** 2
    r = q.reshape(*q.shape[:-1], spec.n_particles, spec.d)
    v = np.zeros(q.shape[:-1])
    for m, (i, j) in enumerate(pairs(spec.n_particles)):
        dist = np.linalg.norm(r[..., j, :] - r[..., i, :], axis=-1)
        if spec.kind == "nlms":
            v = v + 0.25 * spec.spring_k[m] * (dist - spec.rest_lengths[m]) ** 4
        else:
            v = v - spec.G * spec.masses[i] * spec.masses[j] / np.sqrt(dist ** 2 + spec.eps ** 2)
    return v


def true_hamiltonian(spec: SystemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_dim(spec, x)
    h = kinetic_energy(spec, x) + potential_energy(spec, x)
    return float(h) if h.ndim == 0 else h


def potential_gradient(spec: SystemSpec, q, branch=None) -> np.ndarray:
    """Hand-derived ``dV/dq`` for each system.

    ``branch`` (dms only) fixes the signs of ``q1`` and ``q2 - q1``, giving the
    smooth extension of that branch instead of the true piecewise gradient.
    """
    q = np.asarray(q, dtype=np.float64)
    if spec.kind == "dms":
        (k1, k2), (l1, l2) = spec.spring_k, spec.rest_lengths
        q1, q2 = q[..., 0], q[..., 1]
        s1, s2 = (_sign(q1), _sign(q2 - q1)) if branch is None else branch
        f1 = k1 * (s1 * q1 - l1) * s1
        f2 = k2 * (s2 * (q2 - q1) - l2) * s2
        return np.stack([f1 - f2, f2], axis=-1)
    r = q.reshape(*q.shape[:-1], spec.n_particles, spec.d)
    g = np.zeros_like(r)
    for m, (i, j) in enumerate(pairs(spec.n_particles)):
        diff = r[..., j, :] - r[..., i, :]
        dist = np.linalg.norm(diff, axis=-1, keepdims=True)
        if spec.kind == "nlms":
            e = dist - spec.rest_lengths[m]
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = np.where(dist > 0, diff / dist, 0.0)
            force = spec.spring_k[m] * e ** 3 * unit  # dV/dr_j
        else:
            force = spec.G * spec.masses[i] * spec.masses[j] * diff / (dist ** 2 + spec.eps ** 2) ** 1.5
        g[..., j, :] += force
        g[..., i, :] -= force
    return g.reshape(q.shape)


def true_vector_field(spec: SystemSpec, x, branch=None) -> np.ndarray:
    """``S grad H``: ``(p / m, -dV/dq)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(spec, x)
    q, p = x[..., :spec.n], x[..., spec.n:]
    return np.concatenate([p * spec.inverse_mass_vector(), -potential_gradient(spec, q, branch)], axis=-1)


def true_field_fn(spec: SystemSpec):
    """``f(t, x)`` wrapper for the integrators."""
    return lambda t, x: true_vector_field(spec, x)


_BOUNDS = {
    "dms": dict(pos=[(0.2, 0.8), (0.9, 1.4)], vel=(-0.7, 0.7)),
    "nlms": dict(pos=[(0.3, 0.7), (1.0, 1.4), (0.1, 0.4), (0.1, 0.5), (0.6, 0.9), (0.1, 0.5)],
                 vel=(-0.7, 0.7)),
    "tbp": dict(pos=[(0.3, 0.7), (1.0, 1.4), (-0.1, 0.1),
                     (0.1, 0.4), (0.1, 0.5), (-0.1, 0.1),
                     (0.6, 0.9), (0.1, 0.5), (-0.1, 0.1)],
                vel=(-0.3, 0.3)),
}


def sample_initial_condition(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform positions/velocities on ``[a, b)``, momentum fix-ups, then ``p = m v``."""
    bounds = _BOUNDS[spec.kind]
    q = np.array([rng.uniform(a, b) for a, b in bounds["pos"]])
    v = rng.uniform(*bounds["vel"], size=spec.n)
    m = np.asarray(spec.masses)
    if spec.kind in ("nlms", "tbp"):
        vel = v.reshape(spec.n_particles, spec.d)
        vel -= (m[:, None] * vel).sum(axis=0) / m.sum()
        v = vel.reshape(-1)
    if spec.kind == "tbp":
        pos = q.reshape(spec.n_particles, spec.d)
        pos -= (m[:, None] * pos).sum(axis=0) / m.sum()
        q = pos.reshape(-1)
    p = v * np.repeat(m, spec.d)
    return np.concatenate([q, p])


def default_scheme(spec: SystemSpec) -> ObservationScheme:
    """Hidden particle per system: the second mass for dms/nlms, the first body for tbp."""
    hidden = 0 if spec.kind == "tbp" else 1
    return ObservationScheme.hide_particle(spec.n_particles, spec.d, hidden)


def default_solver(spec: SystemSpec) -> SolverConfig:
    dflt = SYSTEM_DEFAULTS[spec.kind]
    return SolverConfig("tsit5-adaptive", rtol=dflt["rtol"], atol=dflt["atol"], max_steps=dflt["max_steps"])


def time_grid(steps: int, dt: float) -> np.ndarray:
    return np.arange(steps) * dt


class DatasetGenerationError(SolverError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"trajectory {index} failed: {cause}")
        self.index = index


@dataclass
class Dataset:
    spec: SystemSpec
    states: np.ndarray  # (n_traj, steps, 2n)
    scheme: ObservationScheme
    dt: float
    seed: int
    rng_algorithm: str = field(default=RNG_ALGORITHM)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 3 or self.states.shape[2] != self.spec.state_dim:
            raise ValueError(f"states must be (n_traj, steps, {self.spec.state_dim})")
        if self.scheme.dim != self.spec.state_dim:
            raise ValueError("observation scheme does not match the state dimension")

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return time_grid(self.steps, self.dt)

    def subset(self, index) -> Dataset:
        return Dataset(self.spec, self.states[np.asarray(index)], self.scheme, self.dt, self.seed,
                       self.rng_algorithm)


def piecewise_field(spec: SystemSpec) -> PiecewiseField | None:
    """Branch structure of the true field, or ``None`` when it is smooth.

    The dms springs act on ``|q1|`` and ``|q2 - q1|``, so the force jumps when
    a mass crosses the wall or the other mass. Each branch fixes both signs.
    """
    if spec.kind != "dms":
        return None
    return PiecewiseField(lambda x: np.array([x[0], x[1] - x[0]]),
                          lambda t, x, mode: true_vector_field(spec, x, branch=mode))


def simulate(spec: SystemSpec, x0, times, cfg: SolverConfig) -> np.ndarray:
    return rollout(true_field_fn(spec), x0, times, cfg, piecewise_field(spec)).states


def generate_dataset(spec: SystemSpec, n_traj: int, horizon: float, steps: int,
                     solver: SolverConfig | None = None, scheme: ObservationScheme | None = None,
                     seed: int = 0) -> Dataset:
    """Integrate ``n_traj`` ground-truth trajectories on a uniform grid over ``[0, horizon]``."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    solver = solver or default_solver(spec)
    scheme = scheme or default_scheme(spec)
    dt = horizon / (steps - 1)
    times = time_grid(steps, dt)
    rng = derive_rng(seed, "data")
    x0s = [sample_initial_condition(spec, rng) for _ in range(n_traj)]
    states = np.empty((n_traj, steps, spec.state_dim))
    for i, x0 in enumerate(x0s):
        try:
            states[i] = simulate(spec, x0, times, solver)
        except SolverError as exc:
            raise DatasetGenerationError(i, exc) from exc
    return Dataset(spec, states, scheme, dt, seed)


def _bitmap(scheme: ObservationScheme) -> bytes:
    bits = bytearray((scheme.dim + 7) // 8)
    for i in scheme.observed:
        bits[i // 8] |= 1 << (i % 8)
    return bytes(bits)


def _unbitmap(buf: bytes, dim: int) -> tuple[int, ...]:
    return tuple(i for i in range(dim) if buf[i // 8] >> (i % 8) & 1)


def dataset_to_bytes(ds: Dataset) -> bytes:
    spec = ds.spec
    params = spec.parameters()
    header = [
        DATASET_MAGIC,
        struct.pack("<B", _KIND_CODE[spec.kind]),
        struct.pack("<IIII", spec.n_particles, spec.d, ds.n_traj, ds.steps),
        struct.pack("<d", ds.dt),
        struct.pack("<Q", ds.seed),
        _bitmap(ds.scheme),
        struct.pack("<I", len(params)),
        np.asarray(params, dtype="<f8").tobytes(),
    ]
    return b"".join(header) + np.ascontiguousarray(ds.states, dtype="<f8").tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if buf[:8] != DATASET_MAGIC:
        raise ValueError("not an NHDS0001 dataset")
    pos = 8
    (code,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    n_p, d, n_traj, steps = struct.unpack_from("<IIII", buf, pos)
    pos += 16
    (dt,) = struct.unpack_from("<d", buf, pos)
    pos += 8
    (seed,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    kind = {v: k for k, v in _KIND_CODE.items()}[code]
    dim = 2 * n_p * d
    nbytes = (dim + 7) // 8
    observed = _unbitmap(buf[pos:pos + nbytes], dim)
    pos += nbytes
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    pos += 8 * count
    spec = SystemSpec.from_parameters(kind, params)
    if (spec.n_particles, spec.d) != (n_p, d):
        raise ValueError("dataset geometry does not match its system kind")
    body = np.frombuffer(buf, dtype="<f8", count=n_traj * steps * dim, offset=pos)
    if pos + body.nbytes != len(buf):
        raise ValueError("trailing or missing bytes in dataset body")
    states = body.astype(np.float64).reshape(n_traj, steps, dim)
    return Dataset(spec, states, ObservationScheme(observed, dim), dt, seed)


def dataset_digest(ds: Dataset) -> int:
    return int.from_bytes(hashlib.blake2b(dataset_to_bytes(ds), digest_size=8).digest(), "little")


def sidecar_text(ds: Dataset) -> str:
    spec = ds.spec
    lines = [
        "format = NHDS0001",
        f"system = {spec.kind}",
        f"n_particles = {spec.n_particles}",
        f"d = {spec.d}",
        f"n_traj = {ds.n_traj}",
        f"steps = {ds.steps}",
        f"dt = {ds.dt!r}",
        f"seed = {ds.seed}",
        f"observed = {','.join(map(str, ds.scheme.observed))}",
        f"parameters = {','.join(repr(v) for v in spec.parameters())}",
        f"rng = {ds.rng_algorithm}",
        f"digest = {dataset_digest(ds):016x}",
    ]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_to_bytes(ds))
    Path(str(path) + ".txt").write_text(sidecar_text(ds))
    return path


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
