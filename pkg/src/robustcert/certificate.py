"""Finite-time search for robust safety certificates.

The search grows ``W_t``, an over-approximation of everything
eps-reachable from the initial set within time ``t``, until one step of
length ``delta`` under half the margin maps ``W_t`` into itself. At that
point the ``[0, delta]`` tube of ``W_t`` at half margin is invariant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dsl import SafetyProblem
from .flow import (
    DEFAULT_SAMPLE_STEP,
    IntegratorConfig,
    TrajectorySample,
    lipschitz_estimate,
    sample_disturbed_batch,
)
from .grid import (
    OccupancyGrid,
    ReachParams,
    compose_step_reach,
    grid_subset,
    rasterize,
    reach_interval,
    set_algebra,
    sweep_step,
)

log = logging.getLogger(__name__)

FOUND = "found"
UNSAFE_SUSPECT = "unsafe-suspect"
INCONCLUSIVE = "inconclusive"


@dataclass
class CertificateResult:
    status: str
    eps: float
    delta: float
    shape: tuple
    V: OccupancyGrid | None = None
    t_found: float | None = None
    witness: TrajectorySample | None = None
    lipschitz: float | None = None
    iterations: int = 0
    reason: str = ""


def sample_in_cells(grid: OccupancyGrid, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` points uniform over the occupied cells."""
    idx = grid.occupied_indices()
    pick = idx[rng.integers(0, len(idx), size=m)]
    return np.array(grid.lo) + (pick + rng.random(pick.shape)) * grid.cell


def sample_in_set(p: SafetyProblem, pred, grid: OccupancyGrid, m: int, rng, max_rounds: int = 50) -> np.ndarray:
    """Rejection samples of a predicate set, proposed from its raster."""
    out = []
    have = 0
    for _ in range(max_rounds):
        X = sample_in_cells(grid, max(m, 64), rng)
        X = X[pred(X)]
        out.append(X)
        have += len(X)
        if have >= m:
            break
    X = np.concatenate(out)[:m] if out else np.empty((0, p.dim))
    return X


def falsify(
    p: SafetyProblem,
    eps: float,
    horizon: float,
    init_grid: OccupancyGrid,
    seed: int = 0,
    budget: int = 256,
    h: float = DEFAULT_SAMPLE_STEP,
) -> TrajectorySample | None:
    """Look for a sampled eps-solution from the initial set that turns unsafe.

    Returns the earliest-hitting trajectory, cut at its first unsafe (or
    outside-the-box) state, or ``None``.
    """
    if init_grid.is_empty() or horizon <= 0:
        return None
    rng = np.random.default_rng(seed)
    X0 = sample_in_set(p, p.init, init_grid, budget, rng)
    if len(X0) == 0:
        return None
    b = sample_disturbed_batch(p, X0, horizon, eps, rng, h)
    k1, m, n = b.states.shape
    bad = np.asarray(p.unsafe(b.states.reshape(-1, n))).reshape(k1, m)
    for j, e in enumerate(b.exit_step):
        if e >= 0:
            bad[e, j] = True
    hit = bad.any(axis=0)
    if not hit.any():
        return None
    first = np.where(hit, np.argmax(bad, axis=0), k1)
    j = int(np.argmin(first))
    end = int(first[j]) + 1
    return TrajectorySample(
        times=b.times[:end],
        states=b.states[:end, j],
        epsilon=float(eps),
        inputs=b.inputs[: end - 1, j],
        truncated=bool(b.exit_step[j] >= 0 and b.exit_step[j] < end),
    )


def search_certificate(
    p: SafetyProblem,
    eps: float,
    delta: float = 0.5,
    t_max: float = 20.0,
    shape=None,
    cfg: IntegratorConfig | None = None,
    seed: int = 0,
    dt_sub: float | None = None,
    lipschitz: float | None = None,
    falsify_budget: int = 256,
    witness_hint: TrajectorySample | None = None,
) -> CertificateResult:
    """Grow the eps-reach set of the initial set in steps of ``delta``.

    Returns ``found`` with the certificate ``V``, ``unsafe-suspect`` when the
    over-approximation meets the unsafe set and a sampled witness confirms
    it, or ``inconclusive`` otherwise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if t_max < delta:
        raise ValueError("t_max must be at least delta")
    if shape is None:
        shape = default_shape(p.dim)
    if np.isscalar(shape):
        shape = (int(shape),) * p.dim
    shape = tuple(int(s) for s in shape)
    L = lipschitz if lipschitz is not None else max(lipschitz_estimate(p), 1e-6)
    dt_sub = dt_sub or delta / 8
    rp = ReachParams(eps, dt_sub, L)
    rp_half = ReachParams(eps / 2, dt_sub, L)
    I = rasterize(p, p.init, shape)
    U = rasterize(p, p.unsafe, shape)
    k_sub = int(np.ceil(delta / dt_sub - 1e-12))
    h = delta / k_sub

    def suspect(reason, t, iters):
        w = None
        if witness_hint is not None and witness_hint.epsilon <= eps:
            w = witness_hint
        if w is None:
            w = falsify(p, eps, t_max, I, seed=seed, budget=falsify_budget)
        if w is not None:
            return CertificateResult(UNSAFE_SUSPECT, eps, delta, shape, witness=w, lipschitz=L,
                                     iterations=iters, reason=reason)
        return CertificateResult(INCONCLUSIVE, eps, delta, shape, lipschitz=L, iterations=iters,
                                 reason=reason + "; no sampled witness")

    W, cur = I, I
    t = 0.0
    iters = 0
    while True:
        iters += 1
        if W.escaped or not set_algebra("disjointness", W, U):
            return suspect(f"reach set meets the unsafe set by t={t:g}", t, iters)
        E = compose_step_reach(W, p, rp_half, delta, cfg)
        log.info("t=%g |W|=%d |E|=%d", t, W.count, E.count)
        if not E.escaped and grid_subset(E, W):
            V = reach_interval(W, p, rp_half, delta, cfg)
            if V.escaped or not set_algebra("disjointness", V, U):
                return suspect(f"certificate candidate meets the unsafe set at t={t:g}", t, iters)
            return CertificateResult(FOUND, eps, delta, shape, V=V, t_found=t, lipschitz=L, iterations=iters)
        if t + delta > t_max + 1e-12:
            return CertificateResult(INCONCLUSIVE, eps, delta, shape, lipschitz=L, iterations=iters,
                                     reason=f"no invariant step found up to t_max={t_max:g}")
        acc, esc = W.occ.copy(), W.escaped
        for _ in range(k_sub):
            cur, tube = sweep_step(cur, p, rp, h, cfg)
            acc |= tube.occ
            esc = esc or tube.escaped or cur.escaped
        W = W.like(acc, esc)
        t += delta


def default_shape(n: int) -> tuple:
    return {1: (512,), 2: (256, 256)}.get(n, (64,) * n)


@dataclass
class CertificateReport:
    init_subset: bool
    delta_invariant_grid: bool
    sample_violations: int
    trials: int
    unsafe_disjoint: bool
    violation_point: list | None = None

    @property
    def delta_invariant(self) -> bool:
        return self.delta_invariant_grid and self.sample_violations == 0

    @property
    def passed(self) -> bool:
        return self.init_subset and self.delta_invariant and self.unsafe_disjoint

    def verdicts(self) -> dict:
        return {
            "init_subset": self.init_subset,
            "delta_invariant": self.delta_invariant,
            "unsafe_disjoint": self.unsafe_disjoint,
        }


def validate_certificate(
    V: OccupancyGrid,
    p: SafetyProblem,
    eps: float,
    delta: float,
    trials: int = 10_000,
    seed: int = 0,
    cfg: IntegratorConfig | None = None,
    dt_sub: float | None = None,
    lipschitz: float | None = None,
) -> CertificateReport:
    """Check the three certificate conditions on a grid.

    Invariance is checked twice: by the bloated ``delta``-step image and by
    ``trials`` sampled eps-solutions of length ``delta`` started uniformly
    in ``V``, whose time-``delta`` states must all lie in ``V``. States in
    between may leave the grid: ``V`` over-approximates the invariant set,
    it need not be continuously invariant itself.
    """
    I = rasterize(p, p.init, V.shape)
    U = rasterize(p, p.unsafe, V.shape)
    init_ok = grid_subset(I, V)
    unsafe_ok = bool(set_algebra("disjointness", V, U)) and not V.escaped
    L = lipschitz if lipschitz is not None else max(lipschitz_estimate(p), 1e-6)
    rp = ReachParams(eps, dt_sub or delta / 8, L)
    E = compose_step_reach(V, p, rp, delta, cfg)
    grid_ok = (not E.escaped) and grid_subset(E, V)
    violations, where = 0, None
    if trials > 0 and not V.is_empty():
        rng = np.random.default_rng(seed)
        X0 = sample_in_cells(V, trials, rng)
        b = sample_disturbed_batch(p, X0, delta, eps, rng)
        k1, m, n = b.states.shape
        final = b.states[-1]
        bad = ~V.contains(final) | b.truncated
        violations = int(bad.sum())
        if violations:
            where = final[int(np.argmax(bad))].tolist()
    return CertificateReport(init_ok, grid_ok, violations, trials, unsafe_ok, where)
