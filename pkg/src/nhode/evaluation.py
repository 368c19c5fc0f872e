"""Metrics, conservation audits and the analysis experiments."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .models import (
    DynamicsModel,
    Encoder,
    ObservationScheme,
    angular_bracket,
    angular_momentum,
    encode_initial_hidden,
    hamiltonian_gradient,
    hamiltonian_value,
    linear_momentum,
    pairwise_distances,
    vector_field,
)
from .odeint import SolverConfig, step_fixed
from .systems import (
    SYSTEM_DEFAULTS,
    SystemSpec,
    default_scheme,
    derive_rng,
    generate_dataset,
    sample_initial_condition,
    simulate,
    time_grid,
    true_hamiltonian,
    true_vector_field,
)

DIVERGENCE_THRESHOLD = 1e12
SERIES = ("observed_mse", "hidden_mse", "energy_error", "momentum_drift", "angular_drift")


@dataclass
class Predictor:
    """Anything that can be rolled out: a numeric field ``f(x)`` plus an optional encoder."""

    field: Callable[[np.ndarray], np.ndarray]
    encoder: Encoder | None = None
    name: str = "model"

    @classmethod
    def from_model(cls, model: DynamicsModel, encoder: Encoder | None = None) -> Predictor:
        return cls(lambda x: vector_field(model, x), encoder, model.name)

    @classmethod
    def oracle(cls, spec: SystemSpec) -> Predictor:
        return cls(lambda x: true_vector_field(spec, x), None, "true-field")


def fixed_rollout(field_fn, x0: np.ndarray, times, method: str = "rk4", substeps: int = 1):
    """Batched fixed-step rollout that stops integrating rows once they blow up.

    Returns ``(states, diverged_at)``; ``states[i, b]`` is ``inf`` from the
    first grid index at which row ``b`` exceeded the divergence threshold, and
    ``diverged_at[b]`` is that index (or -1).
    """
    x = np.array(np.atleast_2d(x0), dtype=np.float64)
    n_rows = x.shape[0]
    out = np.empty((len(times), n_rows, x.shape[1]))
    out[0] = x
    diverged_at = np.full(n_rows, -1)
    alive = np.ones(n_rows, dtype=bool)
    f = lambda t, y: field_fn(y)  # noqa: E731
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, len(times)):
            h = (times[i] - times[i - 1]) / substeps
            if alive.any():
                y = x[alive]
                for j in range(substeps):
                    y = step_fixed(method, f, y, times[i - 1] + j * h, h)
                x[alive] = y
            bad = alive & ~(np.isfinite(x).all(axis=1) & (np.abs(x) <= DIVERGENCE_THRESHOLD).all(axis=1))
            diverged_at[bad] = i
            alive &= ~bad
            x[~alive] = np.inf
            out[i] = x
    return out, diverged_at


def _initial_states(pred: Predictor, truth: np.ndarray, scheme: ObservationScheme) -> np.ndarray:
    x0 = truth[:, 0, :].copy()
    if pred.encoder is None:
        return x0
    k = pred.encoder.window
    window = scheme.observe(truth[:, : k + 1, :])
    hidden = encode_initial_hidden(pred.encoder, window)
    return scheme.assemble(scheme.observe(x0), hidden)


def _series(spec: SystemSpec, scheme: ObservationScheme, pred: np.ndarray, truth: np.ndarray) -> dict:
    """``pred``/``truth`` are ``(n_test, T, dim)``; each series is ``(T, n_test)``."""
    obs, hid = list(scheme.observed), list(scheme.hidden)
    with np.errstate(over="ignore", invalid="ignore"):
        err = (pred - truth) ** 2
        out = {
            "observed_mse": err[..., obs].mean(axis=-1).T,
            "hidden_mse": (err[..., hid].mean(axis=-1) if hid else np.zeros(err.shape[:-1])).T,
            "energy_error": np.abs(true_hamiltonian(spec, pred) - true_hamiltonian(spec, truth)).T,
        }
        mom = linear_momentum(pred, spec.n_particles, spec.d)
        out["momentum_drift"] = np.linalg.norm(mom - mom[:, :1], axis=-1).T
        if spec.d >= 2:
            ang = angular_momentum(pred, spec.n_particles, spec.d)
            out["angular_drift"] = np.linalg.norm(ang - ang[:, :1], axis=-1).T
        else:
            out["angular_drift"] = np.full(out["momentum_drift"].shape, np.nan)
    for v in out.values():
        v[~np.isfinite(v) & ~np.isnan(v)] = np.inf
        v[np.isnan(v) & ~np.isnan(out["angular_drift"])] = np.inf
    diverged = ~np.isfinite(pred).all(axis=-1).T
    for name in SERIES:
        if name != "angular_drift" or spec.d >= 2:
            out[name][diverged] = np.inf
    return out


@dataclass
class MetricsRecord:
    """Per-seed error series on a shared grid.

    ``per_seed[name]`` has shape ``(n_seeds, T, n_test)``; ``mean_prediction``
    holds the same series computed from the seed-averaged trajectories.
    """

    times: np.ndarray
    per_seed: dict[str, np.ndarray]
    mean_prediction: dict[str, np.ndarray]
    diverged_at: np.ndarray  # (n_seeds, n_test), -1 where no divergence
    names: list[str] = field(default_factory=list)

    def median_curve(self, name: str) -> np.ndarray:
        """Median across test trajectories, then mean across seeds."""
        return np.median(self.per_seed[name], axis=2).mean(axis=0)

    def max_curve(self, name: str) -> np.ndarray:
        return self.per_seed[name].max(axis=(0, 2))

    def per_seed_scalar(self, name: str, t_max: float | None = None) -> np.ndarray:
        """Per seed: mean over ``t <= t_max`` per trajectory, median across trajectories."""
        sel = self.times <= (self.times[-1] if t_max is None else t_max + 1e-12)
        per_traj = self.per_seed[name][:, sel, :].mean(axis=1)
        return np.median(per_traj, axis=1)

    def scalar(self, name: str, t_max: float | None = None) -> float:
        return float(np.mean(self.per_seed_scalar(name, t_max)))


def reference_solver(spec: SystemSpec, tighten: float = 100.0) -> SolverConfig:
    dflt = SYSTEM_DEFAULTS[spec.kind]
    return SolverConfig("tsit5-adaptive", rtol=dflt["rtol"] / tighten, atol=dflt["atol"] / tighten,
                        max_steps=10_000_000)


def heldout_initial_conditions(spec: SystemSpec, n_test: int, seed: int) -> np.ndarray:
    rng = derive_rng(seed, "eval")
    return np.stack([sample_initial_condition(spec, rng) for _ in range(n_test)])


def ground_truth(spec: SystemSpec, x0s: np.ndarray, times, solver: SolverConfig | None = None) -> np.ndarray:
    solver = solver or reference_solver(spec)
    return np.stack([simulate(spec, x0, times, solver) for x0 in x0s])


def evaluate(predictors: Sequence[Predictor] | Predictor, spec: SystemSpec,
             scheme: ObservationScheme | None = None, n_test: int = 10, horizon: float = 20.0,
             dt: float = 0.01, seed: int = 0, method: str = "rk4", substeps: int = 1,
             truth: np.ndarray | None = None) -> MetricsRecord:
    """Roll out each predictor (one per trained seed) from unseen initial conditions.

    ``truth`` may be passed to reuse a precomputed ``(n_test, T, dim)`` reference.
    """
    if isinstance(predictors, Predictor):
        predictors = [predictors]
    scheme = scheme or default_scheme(spec)
    steps = int(round(horizon / dt)) + 1
    times = time_grid(steps, dt)
    if truth is None:
        truth = ground_truth(spec, heldout_initial_conditions(spec, n_test, seed), times)
    preds, div = [], []
    for p in predictors:
        states, diverged_at = fixed_rollout(p.field, _initial_states(p, truth, scheme), times, method, substeps)
        preds.append(np.swapaxes(states, 0, 1))
        div.append(diverged_at)
    per = [_series(spec, scheme, pr, truth) for pr in preds]
    per_seed = {k: np.stack([s[k] for s in per]) for k in SERIES}
    with np.errstate(invalid="ignore"):
        mean_pred = np.mean(np.stack(preds), axis=0)
    mean_prediction = _series(spec, scheme, mean_pred, truth)
    return MetricsRecord(times, per_seed, mean_prediction, np.stack(div), [p.name for p in predictors])


def export_metrics(rec: MetricsRecord, out_dir, method: str = "model",
                   windows: Sequence[float] = (1.0, 20.0)) -> list[Path]:
    """One CSV per series (time, one column per test trajectory, median, max) plus a summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in SERIES:
        data = rec.per_seed[name].mean(axis=0)
        path = out_dir / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"traj_{i}" for i in range(data.shape[1])] + ["median", "max",
                                                                                   "mean_prediction_median"])
            med, mx = rec.median_curve(name), rec.max_curve(name)
            mp = np.median(rec.mean_prediction[name], axis=1)
            for i, t in enumerate(rec.times):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in data[i]]
                           + [repr(float(med[i])), repr(float(mx[i])), repr(float(mp[i]))])
        written.append(path)
    path = out_dir / "summary.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "t_max", "observed", "unobserved", "n_seeds"])
        for t_max in windows:
            if t_max > rec.times[-1] + 1e-12:
                continue
            w.writerow([method, repr(float(t_max)), repr(rec.scalar("observed_mse", t_max)),
                        repr(rec.scalar("hidden_mse", t_max)), rec.per_seed["observed_mse"].shape[0]])
    written.append(path)
    return written


def long_rollout_csv(pred: Predictor, spec: SystemSpec, path, scheme=None, horizon: float = 200.0,
                     dt: float = 0.01, seed: int = 0, method: str = "rk4") -> Path:
    """Single-trajectory qualitative rollout: time, true state, predicted state."""
    scheme = scheme or default_scheme(spec)
    steps = int(round(horizon / dt)) + 1
    times = time_grid(steps, dt)
    truth = ground_truth(spec, heldout_initial_conditions(spec, 1, seed), times)
    states, _ = fixed_rollout(pred.field, _initial_states(pred, truth, scheme), times, method)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = spec.state_dim
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"true_{i}" for i in range(dim)] + [f"pred_{i}" for i in range(dim)])
        for i, t in enumerate(times):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in truth[0, i]]
                       + [repr(float(v)) for v in states[i, 0]])
    return path


# Which quantities each variant conserves by construction.
GUARANTEES = {
    ("nhode-tot", "abs"): {"energy"},
    ("nhode-tot", "rel"): {"energy", "momentum"},
    ("nhode-pot", "abs"): {"energy"},
    ("nhode-pot", "rel"): {"energy", "momentum", "angular"},
    ("node-vanilla", "abs"): set(),
    ("node-vanilla", "rel"): set(),
    ("node-phys", "abs"): set(),
    ("node-phys", "rel"): set(),
}


@dataclass
class AuditReport:
    model: str
    guaranteed: set
    energy_drift: float | None
    momentum_drift: float
    angular_drift: float | None
    energy_rate: float | None        # max |grad H . f| at visited states
    momentum_identity: float | None  # max |sum_j dH/dq_j|
    angular_identity: float | None   # max |dL/dt| from the bracket
    steps: int
    min_pair_distance: float         # close encounters make rel-coordinate energies non-smooth
    diverged: bool = False

    def passes(self, drift_tol: float = 1e-8, identity_tol: float = 1e-12) -> dict[str, bool]:
        """Pass/fail for every quantity the variant guarantees; others are not asserted."""
        out = {}
        if self.diverged:
            return {q: False for q in self.guaranteed}
        if "energy" in self.guaranteed:
            out["energy"] = self.energy_drift < drift_tol and self.energy_rate < identity_tol
        if "momentum" in self.guaranteed:
            out["momentum"] = self.momentum_drift < drift_tol and self.momentum_identity < identity_tol
        if "angular" in self.guaranteed and self.angular_drift is not None:
            out["angular"] = self.angular_drift < drift_tol and self.angular_identity < identity_tol
        return out

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["guaranteed"] = sorted(self.guaranteed)
        return d


def conservation_audit(model: DynamicsModel, x0, horizon: float = 1.0, dt: float = 1e-3,
                       method: str = "rk4") -> AuditReport:
    """Drift of learned energy and momenta over a fixed-step rollout plus pointwise identities."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    steps = int(round(horizon / dt))
    states, diverged_at = fixed_rollout(lambda x: vector_field(model, x), x0, time_grid(steps + 1, dt), method)
    diverged = bool((diverged_at >= 0).any())
    if diverged:
        states = states[: int(diverged_at[diverged_at >= 0].min())]
    flat = states.reshape(-1, states.shape[-1])
    n, n_p, d = model.n, model.n_particles, model.d
    mom = linear_momentum(states, n_p, d)
    momentum_drift = float(np.abs(mom - mom[:1]).max())
    angular_drift = angular_identity = None
    if d >= 2:
        ang = angular_momentum(states, n_p, d)
        angular_drift = float(np.abs(ang - ang[:1]).max())
    min_dist = float(pairwise_distances(flat[:, :n], n_p, d).min())
    energy_drift = energy_rate = momentum_identity = None
    if model.is_hamiltonian:
        h = hamiltonian_value(model, flat).reshape(states.shape[:2])
        energy_drift = float(np.abs(h - h[:1]).max())
        grad = hamiltonian_gradient(model, flat)
        energy_rate = float(np.abs(np.einsum("ij,ij->i", grad, vector_field(model, flat))).max())
        dq = grad[:, :n].reshape(-1, n_p, d).sum(axis=1)
        momentum_identity = float(np.abs(dq).max())
        if d >= 2:
            angular_identity = float(np.abs(angular_bracket(model, flat)).max())
    return AuditReport(model.name, GUARANTEES[(model.kind, model.coords)], energy_drift, momentum_drift,
                       angular_drift, energy_rate, momentum_identity, angular_identity, steps,
                       min_dist, diverged)


def plummer_max_force(eps: float, G: float = 1.0, m1: float = 1.0, m2: float = 1.0) -> float:
    """Peak pair force ``G m1 m2 r / (r^2 + eps^2)^1.5``, attained at ``r = eps / sqrt(2)``."""
    return 2.0 * G * m1 * m2 / (3.0 * math.sqrt(3.0) * eps ** 2)


@dataclass
class SweepResult:
    rows: list[tuple[float, int, float]]  # (eps, trajectory, mse)

    def quartiles(self) -> list[tuple[float, float, float, float, float, float]]:
        out = []
        for eps in sorted({r[0] for r in self.rows}):
            v = np.array([r[2] for r in self.rows if r[0] == eps])
            q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
            out.append((eps, *map(float, q)))
        return out

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows_path, q_path = out_dir / "eps_sweep.csv", out_dir / "eps_sweep_quartiles.csv"
        with rows_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "trajectory", "mse"])
            for eps, i, mse in self.rows:
                w.writerow([repr(eps), i, repr(mse)])
        with q_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "min", "q1", "median", "q3", "max"])
            for row in self.quartiles():
                w.writerow([repr(v) for v in row])
        return rows_path, q_path


def epsilon_sweep(eps_values: Sequence[float], train_cfg, kind: str = "nhode-pot", coords: str = "rel",
                  n_traj: int = 64, horizon: float = 3.0, steps: int = 301, n_test: int = 8,
                  test_steps: int = 500, test_dt: float = 0.002, width: int = 128, depth: int = 4,
                  data_seed: int = 0, eval_seed: int = 1, progress=None) -> SweepResult:
    """Train one model per softening length and record trajectory-wise test MSE.

    Test errors are measured against ground truth of the same softened system.
    Full-scale settings would be ``n_test=128, test_steps=10000, test_dt=0.002``.
    """
    from .training import build_model, train

    if not eps_values:
        raise ValueError("eps_values must be non-empty")
    rows = []
    for eps in eps_values:
        spec = SystemSpec.tbp(eps=float(eps))
        ds = generate_dataset(spec, n_traj, horizon, steps, seed=data_seed)
        model = build_model(kind, coords, spec, train_cfg.seed, width, depth)
        result = train(model, None, ds, train_cfg)
        rec = evaluate(Predictor.from_model(result.model), spec, ds.scheme, n_test,
                       horizon=test_steps * test_dt, dt=test_dt, seed=eval_seed, method=train_cfg.method)
        full = (rec.per_seed["observed_mse"][0] * len(ds.scheme.observed)
                + rec.per_seed["hidden_mse"][0] * len(ds.scheme.hidden)) / spec.state_dim
        for i, mse in enumerate(full.mean(axis=0)):
            rows.append((float(eps), i, float(mse)))
        if progress is not None:
            progress(eps, rows[-n_test:])
    return SweepResult(rows)


@dataclass
class IdentifiabilityCase:
    x0: np.ndarray
    observed_deviation: float
    hidden_offset: np.ndarray     # q2_tilde(t) - q2(t) per grid point
    hidden_momentum_deviation: float
    branch_ok: bool


@dataclass
class IdentifiabilityReport:
    shift: float
    cases: list[IdentifiabilityCase]
    times: np.ndarray

    @property
    def valid_cases(self) -> list[IdentifiabilityCase]:
        return [c for c in self.cases if c.branch_ok]

    @property
    def max_observed_deviation(self) -> float:
        return max(c.observed_deviation for c in self.valid_cases)

    @property
    def max_hidden_offset_error(self) -> float:
        return max(float(np.abs(np.abs(c.hidden_offset) - abs(self.shift)).max()) for c in self.valid_cases)


def compensating_shift(spec: SystemSpec, k2_tilde: float, l2_tilde: float, separation: float) -> float:
    """Shift ``a`` of the second mass that leaves the first mass's motion unchanged.

    Only the branch with ``q2 - q1 > 0`` and ``q2 + a - q1 > 0`` is supported.
    """
    k2, l2 = spec.spring_k[1], spec.rest_lengths[1]
    r = k2 / k2_tilde
    return (r - 1.0) * separation - r * l2 + l2_tilde


def identifiability_demo(spec: SystemSpec, k2_tilde: float, l2_tilde: float, n_ic: int = 5,
                         horizon: float = 1.0, steps: int = 101, rtol: float = 1e-9, atol: float = 1e-12,
                         seed: int = 0, x0s=None) -> IdentifiabilityReport:
    """Simulate the original system and a re-parameterised one with the hidden mass shifted.

    The observed (first) mass must follow the same trajectory in both; the
    hidden position differs by the constant shift.
    """
    if spec.kind != "dms":
        raise ValueError("identifiability demo is defined for the dms system")
    if not (k2_tilde > 0 and l2_tilde > 0):
        raise ValueError("modified spring constant and rest length must be positive")
    if k2_tilde != spec.spring_k[1]:
        raise ValueError("a constant shift exists only when the spring constant is unchanged")
    a = compensating_shift(spec, k2_tilde, l2_tilde, 0.0)
    shifted = SystemSpec.dms(spec.masses, (spec.spring_k[0], k2_tilde), (spec.rest_lengths[0], l2_tilde))
    times = time_grid(steps, horizon / (steps - 1))
    solver = SolverConfig("tsit5-adaptive", rtol=rtol, atol=atol, max_steps=10_000_000)
    if x0s is None:
        rng = derive_rng(seed, "identifiability")
        x0s = [sample_initial_condition(spec, rng) for _ in range(n_ic)]
    cases = []
    for x0 in x0s:
        x0 = np.asarray(x0, dtype=np.float64)
        x0_shift = x0.copy()
        x0_shift[1] += a
        orig = simulate(spec, x0, times, solver)
        mod = simulate(shifted, x0_shift, times, solver)
        branch_ok = bool(((orig[:, 1] - orig[:, 0]) > 0).all() and ((mod[:, 1] - mod[:, 0]) > 0).all())
        obs = [0, 2]
        cases.append(IdentifiabilityCase(
            x0=x0,
            observed_deviation=float(np.abs(orig[:, obs] - mod[:, obs]).max()),
            hidden_offset=mod[:, 1] - orig[:, 1],
            hidden_momentum_deviation=float(np.abs(mod[:, 3] - orig[:, 3]).max()),
            branch_ok=branch_ok,
        ))
    return IdentifiabilityReport(a, cases, times)
