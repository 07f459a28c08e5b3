"""Adaptive Dormand-Prince 5(4) integration onto arbitrary time grids.

The solver propagates the 5th-order solution, controls the local error with
the embedded 4th-order estimate, and fills requested grid times with cubic
Hermite interpolation between accepted steps (both endpoint derivatives are
available for free thanks to the FSAL property).  A fixed-step classical RK4
mode backs the convergence-order oracle used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverFailure
from .fields import StatePoint

# Dormand-Prince tableau (Hairer, Norsett & Wanner, "Solving ODE I", p. 178)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_ERR = _B5 - _B4

_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_SAFETY = 0.9


@dataclass
class TimeGrid:
    """Strictly increasing times, length >= 2, starting at t >= 0."""

    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or self.times.size < 2:
            raise ValueError("grid needs at least two times")
        if not np.all(np.isfinite(self.times)):
            raise ValueError("grid times must be finite")
        if not np.all(np.diff(self.times) > 0):
            raise ValueError("grid times must be strictly increasing")
        if self.times[0] < 0:
            raise ValueError("grid must start at a non-negative time")

    def __len__(self) -> int:
        return self.times.size


@dataclass
class Trajectory:
    """Solver output on a grid.

    When `diverged` is set the states array holds only the rows before the
    divergence point; otherwise it has one row per grid time.
    """

    grid: TimeGrid
    states: np.ndarray
    diverged: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if not self.diverged and self.states.shape[0] != len(self.grid):
            raise ValueError("need one state row per grid time")
        if self.diverged and self.states.shape[0] >= len(self.grid):
            raise ValueError("diverged trajectory must be truncated")

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass
class SolverConfig:
    rel_tol: float = 1e-7
    abs_tol: float = 1e-9
    max_step: float = 1e308  # effectively unbounded, but JSON-serializable
    divergence_threshold: float = 1e4
    # smooth desk-scale trajectories need well under 1000 accepted steps;
    # a tight budget keeps near-blow-up draws cheap to reject
    max_steps: int = 3000

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "max_step", "divergence_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")


def _error_norm(err, scale):
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f, t0, x0, f0, cfg: SolverConfig, t_span: float) -> float:
    # Hairer's starter, simplified; only the order of magnitude matters.
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(x0)
    d0 = float(np.sqrt(np.mean((x0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, t_span)
    x1 = x0 + h0 * f0
    f1 = f(x1)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, t_span, cfg.max_step)


def _hermite(t, t0, t1, x0, x1, f0, f1):
    """Cubic Hermite value(s) at times `t` inside [t0, t1]."""
    h = t1 - t0
    s = (np.asarray(t) - t0) / h
    s = s[:, None]
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * x0 + h10 * h * f0 + h01 * x1 + h11 * h * f1


def integrate(field_eval, x0, grid: TimeGrid, cfg: SolverConfig | None = None) -> Trajectory:
    """Integrate dx/dt = field_eval(x) and sample the solution on `grid`.

    `field_eval` maps a (D,) state to its (D,) derivative and must not
    depend on time.  The first grid time carries the initial state x0.
    Raising behaviour: step-budget exhaustion or step underflow raises
    SolverFailure; a state-norm blow-up past `divergence_threshold` returns
    a truncated trajectory flagged `diverged` instead.
    """
    if cfg is None:
        cfg = SolverConfig()
    if isinstance(x0, StatePoint):
        x0 = x0.values
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ValueError("initial state must be a vector")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")

    times = grid.times
    if float(np.max(np.abs(x0))) > cfg.divergence_threshold:
        return Trajectory(grid, x0[None, :].copy()[:0], diverged=True)

    out = np.empty((times.size, x0.size))
    out[0] = x0
    filled = 1

    t = times[0]
    t_end = times[-1]
    x = x0.copy()
    k = np.empty((7, x0.size))
    k[0] = field_eval(x)
    if not np.all(np.isfinite(k[0])):
        raise SolverFailure("vector field non-finite at the initial state")
    h = _initial_step(field_eval, t, x, k[0], cfg, t_end - t)

    n_steps = 0
    while t < t_end:
        if n_steps >= cfg.max_steps:
            raise SolverFailure(f"step budget {cfg.max_steps} exhausted at t={t:g}")
        h = min(h, cfg.max_step)
        last = h >= t_end - t
        if last:
            h = t_end - t
        if h <= np.abs(t) * 1e-15 or h < 1e-300:
            raise SolverFailure(f"step size underflow at t={t:g}")

        for i in range(1, 7):
            k[i] = field_eval(x + h * (k[:i].T @ _A[i]))
        x_new = x + h * (k.T @ _B5)
        err_vec = h * (k.T @ _ERR)
        n_steps += 1

        if not np.all(np.isfinite(x_new)):
            h *= _MIN_FACTOR
            continue
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(x), np.abs(x_new))
        err = _error_norm(err_vec, scale)
        if not np.isfinite(err):  # stages overflowed even though x_new is finite
            h *= _MIN_FACTOR
            continue
        if err > 1.0:
            h *= max(_MIN_FACTOR, _SAFETY * err ** -0.2)
            continue

        t_new = t_end if last else t + h
        f_new = k[6]  # FSAL: last stage is the derivative at (t_new, x_new)
        inside = (times > t) & (times <= t_new) & (np.arange(times.size) >= filled)
        if inside.any():
            out[inside] = _hermite(times[inside], t, t_new, x, x_new, k[0], f_new)
            filled += int(inside.sum())

        if float(np.max(np.abs(x_new))) > cfg.divergence_threshold:
            # report only states at or before the last non-diverged step
            n_keep = int(np.searchsorted(times, t, side="right"))
            return Trajectory(grid, out[:n_keep], diverged=True)

        t, x = t_new, x_new
        k[0] = f_new
        factor = _MAX_FACTOR if err == 0.0 else min(_MAX_FACTOR, _SAFETY * err ** -0.2)
        h *= max(_MIN_FACTOR, factor)

    return Trajectory(grid, out, diverged=False)


def rk4_fixed(field_eval, x0, t_span: float, n_steps: int) -> np.ndarray:
    """Classical fixed-step RK4 endpoint state after `t_span` time units."""
    if isinstance(x0, StatePoint):
        x0 = x0.values
    x = np.asarray(x0, dtype=float).copy()
    h = t_span / n_steps
    for _ in range(n_steps):
        k1 = field_eval(x)
        k2 = field_eval(x + 0.5 * h * k1)
        k3 = field_eval(x + 0.5 * h * k2)
        k4 = field_eval(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise SolverFailure("fixed-step RK4 diverged")
    return x


def convergence_order(field_eval, x0, t_span: float, n_coarse: int = 32) -> float:
    """Richardson order estimate of the fixed-step RK4 mode.

    Integrates with n, 2n and 4n steps and returns
    log2(|x_n - x_2n| / |x_2n - x_4n|); about 4 for smooth fields.  Returns
    NaN when the differences vanish (e.g. the zero field), in which case the
    order test is meaningless.
    """
    x_a = rk4_fixed(field_eval, x0, t_span, n_coarse)
    x_b = rk4_fixed(field_eval, x0, t_span, 2 * n_coarse)
    x_c = rk4_fixed(field_eval, x0, t_span, 4 * n_coarse)
    scale = max(1.0, float(np.max(np.abs(x_c))))
    d_ab = float(np.max(np.abs(x_a - x_b)))
    d_bc = float(np.max(np.abs(x_b - x_c)))
    if d_ab < 1e-14 * scale or d_bc < 1e-14 * scale:
        return float("nan")
    return float(np.log2(d_ab / d_bc))
