"""Explicit Runge-Kutta integration.

The fixed-step steppers are generic over the state type: they accept either
numpy arrays or :class:`nhode.ad.Node` objects, so the same code produces a
plain numeric rollout or a differentiable graph. Adaptive stepping (Tsit5 with
a PI step-size controller) is numeric only and is used for ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ad

METHODS = ("rk4", "tsit5-fixed", "tsit5-adaptive")

# Tsitouras (2011) 5(4) pair, as tabulated in OrdinaryDiffEq.jl / diffrax.
TSIT5_C = (0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0)
TSIT5_A = (
    (),
    (0.161,),
    (-0.008480655492356989, 0.335480655492357),
    (2.897153057105493, -6.359448489975075, 4.3622954328695815),
    (5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525),
    (5.86145544294642, -12.92096931784711, 8.159367898576159, -0.071584973281401,
     -0.028269050394068383),
    (0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
     -3.290069515436081, 2.324710524099774),
)
TSIT5_B = TSIT5_A[6] + (0.0,)
# b - b_hat; the last entry multiplies the FSAL stage f(t + h, x_new)
TSIT5_BTILDE = (
    -0.00178001105222577714,
    -0.0008164344596567469,
    0.007880878010261995,
    -0.1447110071732629,
    0.5823571654525552,
    -0.45808210592918697,
    1.0 / 66.0,
)

PI_BETA1 = 0.7
PI_BETA2 = 0.4
SAFETY = 0.9
FACTOR_MIN = 0.2
FACTOR_MAX = 10.0


class SolverError(RuntimeError):
    """The integrator could not complete the requested solve."""


class MaxStepsExceeded(SolverError):
    pass


class StepSizeUnderflow(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    rtol: float = 1e-6
    atol: float = 1e-8
    initial_step: float | None = None
    max_steps: int = 100_000
    substeps: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "tsit5-adaptive" and not (self.rtol > 0 and self.atol > 0):
            raise ValueError("adaptive solves need rtol > 0 and atol > 0")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ValueError("initial_step must be positive")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.times.ndim != 1 or len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


def _combine(x, h: float, coeffs: Sequence[float], ks: Sequence):
    """``x + h * sum(coeffs[j] * ks[j])`` for arrays or graph nodes."""
    if isinstance(x, ad.Node):
        return ad.lincomb([x, *ks], [1.0, *(h * c for c in coeffs)])
    out = x.copy()
    for c, k in zip(coeffs, ks):
        if c != 0.0:
            out += (h * c) * k
    return out


def step_rk4(f: Callable, x, t: float, h: float):
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, _combine(x, h, (0.5,), (k1,)))
    k3 = f(t + 0.5 * h, _combine(x, h, (0.5,), (k2,)))
    k4 = f(t + h, _combine(x, h, (1.0,), (k3,)))
    return _combine(x, h, (1 / 6, 1 / 3, 1 / 3, 1 / 6), (k1, k2, k3, k4))


def _tsit5_stages(f, x, t, h, k1=None):
    ks = [f(t, x) if k1 is None else k1]
    for i in range(1, 6):
        ks.append(f(t + TSIT5_C[i] * h, _combine(x, h, TSIT5_A[i], ks)))
    return ks


def step_tsit5(f: Callable, x, t: float, h: float, with_error: bool = True, k1=None):
    """One Tsit5 step.

    Returns ``(x_new, err)`` where ``err`` is the embedded local error
    estimate, or just ``x_new`` when ``with_error`` is false (saves the FSAL
    stage, which is what training rollouts use).
    """
    ks = _tsit5_stages(f, x, t, h, k1)
    x_new = _combine(x, h, TSIT5_B[:6], ks)
    if not with_error:
        return x_new
    k7 = f(t + h, x_new)
    err = _combine(np.zeros_like(x), h, TSIT5_BTILDE, ks + [k7])
    return x_new, err


def step_fixed(method: str, f: Callable, x, t: float, h: float):
    if method == "rk4":
        return step_rk4(f, x, t, h)
    if method == "tsit5-fixed":
        return step_tsit5(f, x, t, h, with_error=False)
    raise ValueError(f"{method!r} is not a fixed-step method")


def integrate_fixed(f: Callable, x0, save_times: Sequence[float], method: str = "rk4",
                    substeps: int = 1) -> list:
    """States at each save time, ``substeps`` equal steps per interval.

    Works for arrays and graph nodes alike; with nodes the returned list is
    the unrolled differentiable chain.
    """
    save_times = np.asarray(save_times, dtype=np.float64)
    if np.any(np.diff(save_times) <= 0):
        raise ValueError("save times must be strictly increasing")
    states = [x0]
    x = x0
    for t_a, t_b in zip(save_times[:-1], save_times[1:]):
        h = (t_b - t_a) / substeps
        for j in range(substeps):
            x = step_fixed(method, f, x, t_a + j * h, h)
        states.append(x)
    return states


def _error_norm(err, x, x_new, rtol, atol) -> float:
    scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f, t0, x0, f0, rtol, atol, span) -> float:
    # Hairer, Norsett & Wanner, "Solving ODEs I", II.4
    scale = atol + rtol * np.abs(x0)
    d0 = float(np.sqrt(np.mean((x0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    x1 = x0 + h0 * f0
    f1 = f(t0 + h0, x1)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, span)


@dataclass(frozen=True)
class PiecewiseField:
    """A field that is smooth except across the zero sets of ``surfaces(x)``.

    ``field(t, x, mode)`` is the smooth branch selected by the sign vector
    ``mode`` and must stay defined (as its smooth extension) slightly past
    the surfaces.
    """

    surfaces: Callable
    field: Callable

    def mode_at(self, x) -> np.ndarray:
        s = np.sign(np.asarray(self.surfaces(x), dtype=np.float64))
        return np.where(s == 0, 1.0, s)


def _locate_crossing(g, x, t, h_try, k1, surfaces, mode):
    """Smallest step (to a few ulp of ``t``) whose end state leaves ``mode``."""
    lo, hi = 0.0, h_try
    gap = 64 * np.finfo(float).eps * max(1.0, abs(t))
    while hi - lo > gap:
        mid = 0.5 * (lo + hi)
        if np.any(mode * np.asarray(surfaces(step_tsit5(g, x, t, mid, with_error=False, k1=k1))) < 0):
            hi = mid
        else:
            lo = mid
    return hi


def _adaptive(f, x0, save_times, cfg: SolverConfig, pieces: PiecewiseField | None = None) -> list[np.ndarray]:
    x = np.array(x0, dtype=np.float64)
    t = float(save_times[0])
    span = float(save_times[-1] - save_times[0])
    if pieces is not None:
        mode = pieces.mode_at(x)
        g = lambda t_, y, m=mode: pieces.field(t_, y, m)  # noqa: E731
    else:
        g = f
    f_x = g(t, x)
    if cfg.initial_step is not None:
        h = float(cfg.initial_step)
    else:
        h = _initial_step(g, t, x, f_x, cfg.rtol, cfg.atol, span)
    k = 5.0  # embedded order + 1
    err_prev = 1.0
    n_steps = 0
    out = [x.copy()]
    for target in save_times[1:]:
        target = float(target)
        while t < target:
            remaining = target - t
            clamped = h >= remaining
            h_try = remaining if clamped else h
            if h_try <= 16 * np.finfo(float).eps * max(1.0, abs(t)):
                raise StepSizeUnderflow(f"step size underflow at t={t:.6g} (h={h_try:.3g})")
            n_steps += 1
            if n_steps > cfg.max_steps:
                raise MaxStepsExceeded(f"exceeded {cfg.max_steps} steps at t={t:.6g}")
            with np.errstate(over="ignore", invalid="ignore"):
                x_new, err = step_tsit5(g, x, t, h_try, k1=f_x)
                e = _error_norm(err, x, x_new, cfg.rtol, cfg.atol)
            if not np.isfinite(e) or not np.isfinite(x_new).all():
                h = h_try * FACTOR_MIN
                continue
            if e <= 1.0:
                if pieces is not None and np.any(mode * np.asarray(pieces.surfaces(x_new)) < 0):
                    # stop just past the first surface on the current branch, then switch branch
                    h_hit = _locate_crossing(g, x, t, h_try, f_x, pieces.surfaces, mode)
                    x_new = step_tsit5(g, x, t, h_hit, with_error=False, k1=f_x)
                    t = target if clamped and h_hit >= h_try else t + h_hit
                    x = x_new
                    mode = np.where(mode * np.asarray(pieces.surfaces(x)) < 0, -mode, mode)
                    g = lambda t_, y, m=mode: pieces.field(t_, y, m)  # noqa: E731
                    f_x = g(t, x)
                    continue
                t = target if clamped else t + h_try
                x = x_new
                f_x = g(t, x)
                e_safe = max(e, 1e-10)
                factor = SAFETY * e_safe ** (-PI_BETA1 / k) * err_prev ** (PI_BETA2 / k)
                factor = min(FACTOR_MAX, max(FACTOR_MIN, factor))
                err_prev = max(e, 1e-4)
                if clamped and factor >= 1.0:
                    h = max(h, h_try)
                else:
                    h = h_try * factor
            else:
                h = h_try * max(FACTOR_MIN, SAFETY * e ** (-1.0 / k))
        out.append(x.copy())
    return out


def odesolve_adaptive(f: Callable, x0, t0: float, t1: float, cfg: SolverConfig) -> np.ndarray:
    """Adaptive Tsit5 solve from ``t0`` to ``t1``; returns the final state."""
    if not t1 > t0:
        raise ValueError("t1 must be greater than t0")
    return _adaptive(f, x0, np.array([t0, t1]), cfg)[-1]


def rollout(f: Callable, x0, save_times: Sequence[float], cfg: SolverConfig,
            pieces: PiecewiseField | None = None) -> Trajectory:
    """Numeric trajectory with states exactly at ``save_times``.

    With ``pieces`` the adaptive driver integrates each smooth branch
    separately and stops on every surface crossing instead of stepping over
    the jump. Fixed-step methods ignore it and always call ``f``.
    """
    save_times = np.asarray(save_times, dtype=np.float64)
    if np.any(np.diff(save_times) <= 0):
        raise ValueError("save times must be strictly increasing")
    x0 = np.asarray(x0, dtype=np.float64)
    if len(save_times) == 1:
        return Trajectory(save_times, x0[None].copy())
    if cfg.method == "tsit5-adaptive":
        states = _adaptive(f, x0, save_times, cfg, pieces)
    else:
        states = integrate_fixed(f, x0, save_times, cfg.method, cfg.substeps)
    return Trajectory(save_times, np.stack(states))


def richardson_ratio(error_at: Callable[[float], float], h: float) -> float:
    """``error(h) / error(h/2)``; about ``2**order`` for a convergent method."""
    return error_at(h) / error_at(h / 2)


def order_from_ratio(ratio: float) -> float:
    return math.log2(ratio)
