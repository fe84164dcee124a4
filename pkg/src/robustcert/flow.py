"""Numerical flow of ``x' = f(x)`` and sampling of disturbed trajectories.

All integrators here are batched: a stack of ``m`` initial states shares the
step sequence, which is what the grid propagation needs. Reverse time is
handled by integrating the negated field.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .dsl import SafetyProblem

DEFAULT_SAMPLE_STEP = 0.01


class FlowError(RuntimeError):
    pass


class DomainExitError(FlowError):
    def __init__(self, time: float, point: np.ndarray):
        self.time = time
        self.point = np.asarray(point)
        super().__init__(
            f"trajectory left the domain at t={time:.6g}, x=({', '.join(f'{v:.6g}' for v in self.point)})"
        )


class StepLimitError(FlowError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk45"
    h: float | None = None
    atol: float = 1e-8
    rtol: float = 1e-8
    max_steps: int = 200_000

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown integration method {self.method!r}")
        if self.method == "rk4" and (self.h is None or self.h <= 0):
            raise ValueError("rk4 needs a positive step h")
        if self.atol <= 0 or self.rtol <= 0:
            raise ValueError("atol and rtol must be positive")

    def error_bound(self, scale: float = 1.0) -> float:
        """Conservative global error allowance for one integration call."""
        if self.method == "rk4":
            return 1e-7 * (1.0 + scale)
        return 100.0 * (self.atol + self.rtol * scale)


# Dormand-Prince 5(4)
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_E = _B - np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def rk4_step(fun, X, h):
    k1 = fun(X)
    k2 = fun(X + 0.5 * h * k1)
    k3 = fun(X + 0.5 * h * k2)
    k4 = fun(X + h * k3)
    return X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class BatchResult:
    states: np.ndarray  # (m, n) final states (frozen at exit for rows that left)
    left: np.ndarray  # (m,) bool
    exit_time: np.ndarray  # (m,) time of first outside sample, nan if inside


def integrate_batch(
    fun: Callable[[np.ndarray], np.ndarray],
    X0: np.ndarray,
    T: float,
    cfg: IntegratorConfig,
    lo: np.ndarray | None = None,
    hi: np.ndarray | None = None,
) -> BatchResult:
    """Integrate ``x' = fun(x)`` for time ``T >= 0`` from every row of ``X0``.

    Rows leaving ``[lo, hi]`` are frozen at their first outside state.
    """
    X = np.array(X0, dtype=float, copy=True)
    m = X.shape[0]
    left = np.zeros(m, dtype=bool)
    exit_time = np.full(m, np.nan)
    if T <= 0 or m == 0:
        return BatchResult(X, left, exit_time)
    check = lo is not None

    def frozen_fun(Y):
        d = fun(Y)
        d[left] = 0.0
        return d

    def mark(t):
        if not check:
            bad = ~np.all(np.isfinite(X), axis=1)
        else:
            bad = ~np.all((X >= lo) & (X <= hi), axis=1) | ~np.all(np.isfinite(X), axis=1)
        new = bad & ~left
        if new.any():
            left[new] = True
            exit_time[new] = t

    t = 0.0
    steps = 0
    if cfg.method == "rk4":
        nsteps = max(1, int(np.ceil(T / cfg.h - 1e-12)))
        h = T / nsteps
        for k in range(nsteps):
            X = rk4_step(frozen_fun, X, h)
            t = (k + 1) * h
            mark(t)
        return BatchResult(X, left, exit_time)

    h = min(T, 0.05)
    K = np.empty((7,) + X.shape)
    K[0] = frozen_fun(X)
    while t < T:
        if steps >= cfg.max_steps:
            raise StepLimitError(f"step limit {cfg.max_steps} exceeded at t={t:.6g}")
        h = min(h, T - t)
        for s in range(1, 7):
            Y = X + h * np.tensordot(_A[s], K[:s], axes=1)
            K[s] = frozen_fun(Y)
        Xn = X + h * np.tensordot(_B[:6], K[:6], axes=1)
        err_vec = h * np.tensordot(_E, K, axes=1)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(X), np.abs(Xn))
        with np.errstate(invalid="ignore", over="ignore"):
            ratio = np.sqrt(np.mean((err_vec / scale) ** 2, axis=1))
        ratio = ratio[~left] if (~left).any() else np.zeros(1)
        ratio = np.where(np.isfinite(ratio), ratio, np.inf)
        err = float(np.max(ratio)) if ratio.size else 0.0
        steps += 1
        if err <= 1.0:
            t += h
            X = Xn
            mark(t)
            K[0] = frozen_fun(X)  # FSAL would reuse K[6]; freezing can change between steps
            fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        else:
            if not np.isfinite(err):
                fac = 0.2
            else:
                fac = max(0.2, 0.9 * err ** -0.2)
            if h < 1e-14:
                raise StepLimitError(f"step size underflow at t={t:.6g}")
        h *= fac
    return BatchResult(X, left, exit_time)


def field_fun(p: SafetyProblem, direction: float = 1.0):
    if direction >= 0:
        return p.f
    return lambda X: -p.f(X)


def flow_batch(p: SafetyProblem, X0, t: float, cfg: IntegratorConfig | None = None, check_box=True) -> BatchResult:
    """Flow every row of ``X0`` by signed time ``t``."""
    cfg = cfg or IntegratorConfig()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    lo, hi = (p.lo, p.hi) if check_box else (None, None)
    res = integrate_batch(field_fun(p, t), X0, abs(t), cfg, lo, hi)
    if t < 0:
        res.exit_time = -res.exit_time
    return res


def flow_durations(p: SafetyProblem, X0, taus, cfg: IntegratorConfig | None = None) -> np.ndarray:
    """Flow row ``i`` of ``X0`` by its own signed time ``taus[i]``.

    Uses the rescaled system ``dx/ds = tau_i f(x)`` on ``s in [0, 1]``.
    """
    cfg = cfg or IntegratorConfig()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    taus = np.asarray(taus, dtype=float).reshape(-1, 1)
    if cfg.method == "rk4":
        span = float(np.max(np.abs(taus))) if taus.size else 0.0
        if span == 0:
            return X0.copy()
        cfg = IntegratorConfig("rk4", h=cfg.h / span)
    res = integrate_batch(lambda X: taus * p.f(X), X0, 1.0, cfg)
    return res.states


def integrate_flow(p: SafetyProblem, x0, t: float, cfg: IntegratorConfig | None = None) -> np.ndarray:
    """Approximate the flow map at ``x0`` after signed time ``t``.

    Raises ``DomainExitError`` with the exit time and point if the
    trajectory leaves the domain box.
    """
    cfg = cfg or IntegratorConfig()
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if not p.in_box(x0)[0]:
        raise ValueError("initial state outside the domain box")
    res = flow_batch(p, x0, t, cfg)
    if res.left[0]:
        # the batch reports the end of the first outside step; bisect the crossing
        a, b = 0.0, abs(float(res.exit_time[0]))
        sign = 1.0 if t >= 0 else -1.0
        while b - a > 1e-9:
            mid = 0.5 * (a + b)
            y = flow_batch(p, x0, sign * mid, cfg, check_box=False).states
            if p.in_box(y)[0]:
                a = mid
            else:
                b = mid
        point = flow_batch(p, x0, sign * b, cfg, check_box=False).states[0]
        raise DomainExitError(sign * b, point)
    return res.states[0]


# ---------------------------------------------------------------------------
# disturbed trajectories


@dataclass(frozen=True)
class TrajectorySample:
    times: np.ndarray
    states: np.ndarray
    epsilon: float
    inputs: np.ndarray  # piecewise-constant disturbance per step, shape (len(times)-1, n)
    truncated: bool = False

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self.times, self.states)


def write_trajectory_csv(path, times, states) -> None:
    n = states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{k + 1}" for k in range(n)])
        for t, x in zip(times, states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def uniform_ball(rng: np.random.Generator, m: int, n: int, radius: float) -> np.ndarray:
    """``m`` points uniform in the Euclidean ball of the given radius."""
    d = rng.standard_normal((m, n))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    r = radius * rng.random((m, 1)) ** (1.0 / n)
    return d / norms * r


@dataclass
class DisturbedBatch:
    times: np.ndarray  # (k+1,)
    states: np.ndarray  # (k+1, m, n); rows frozen after leaving the box
    inputs: np.ndarray  # (k, m, n)
    exit_step: np.ndarray  # (m,) index of first outside state, -1 if none

    @property
    def truncated(self) -> np.ndarray:
        return self.exit_step >= 0


def sample_disturbed_batch(
    p: SafetyProblem,
    X0,
    horizon: float,
    eps: float,
    rng: np.random.Generator,
    h: float = DEFAULT_SAMPLE_STEP,
) -> DisturbedBatch:
    """RK4 integration of ``x' = f(x) + u`` with ``u`` redrawn each step.

    Each disturbance is uniform in the Euclidean ``eps``-ball, so every
    trajectory is an exact ``eps``-solution up to RK4 error.
    """
    X = np.atleast_2d(np.asarray(X0, dtype=float)).copy()
    m, n = X.shape
    k = max(1, int(np.ceil(horizon / h - 1e-12)))
    h = horizon / k
    lo, hi = p.lo, p.hi
    states = np.empty((k + 1, m, n))
    inputs = uniform_ball(rng, k * m, n, eps).reshape(k, m, n) if eps > 0 else np.zeros((k, m, n))
    states[0] = X
    alive = np.all((X >= lo) & (X <= hi), axis=1)
    exit_step = np.where(alive, -1, 0)
    for j in range(k):
        u = inputs[j]
        Xn = rk4_step(lambda Y: p.f(Y) + u, X, h)
        Xn[~alive] = X[~alive]
        X = Xn
        states[j + 1] = X
        out = alive & ~np.all((X >= lo) & (X <= hi), axis=1)
        exit_step[out] = j + 1
        alive &= ~out
    times = np.linspace(0.0, horizon, k + 1)
    return DisturbedBatch(times, states, inputs, exit_step)


def sample_disturbed_trajectory(
    p: SafetyProblem,
    x0,
    horizon: float,
    eps: float,
    seed: int = 0,
    cfg: IntegratorConfig | None = None,
) -> TrajectorySample:
    """One ``eps``-solution from ``x0``, deterministic in ``seed``.

    The step is ``cfg.h`` for an RK4 config, else ``DEFAULT_SAMPLE_STEP``.
    Leaving the domain box truncates the trajectory at the first outside
    state and sets ``truncated``.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    h = cfg.h if cfg is not None and cfg.method == "rk4" else DEFAULT_SAMPLE_STEP
    rng = np.random.default_rng(seed)
    b = sample_disturbed_batch(p, x0, horizon, eps, rng, h)
    stop = int(b.exit_step[0])
    end = stop + 1 if stop >= 0 else len(b.times)
    return TrajectorySample(
        times=b.times[:end],
        states=b.states[:end, 0],
        epsilon=float(eps),
        inputs=b.inputs[: end - 1, 0],
        truncated=stop >= 0,
    )


# ---------------------------------------------------------------------------
# Lipschitz bound


def jacobian_fd(p: SafetyProblem, X, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobians at each row of ``X``: ``(m, n, n)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m, n = X.shape
    J = np.empty((m, n, n))
    widths = p.hi - p.lo
    for j in range(n):
        d = rel_step * max(1.0, widths[j])
        E = np.zeros(n)
        E[j] = d
        J[:, :, j] = (p.f(X + E) - p.f(X - E)) / (2 * d)
    return J


def lipschitz_estimate(p: SafetyProblem, samples: int = 1024, safety: float = 1.2) -> float:
    """Max Jacobian operator norm over a Halton sample of the box, times ``safety``."""
    if samples < 2:
        raise ValueError("need at least two samples")
    U = qmc.Halton(d=p.dim, scramble=False).random(samples)
    X = p.lo + U * (p.hi - p.lo)
    J = jacobian_fd(p, X)
    norms = np.linalg.norm(J, ord=2, axis=(1, 2))
    return float(safety * np.max(norms))
