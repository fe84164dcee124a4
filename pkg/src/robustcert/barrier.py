"""Smoothing of the exit-time field, barrier assembly and barrier validation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .dsl import Expr, SafetyProblem, compile_expr, face_samples, gradient
from .exit_time import ExitTimeField
from .grid import OccupancyGrid, rasterize


class BarrierConstructionError(RuntimeError):
    pass


class BoundsViolatedError(BarrierConstructionError):
    pass


class BandTooThinError(BarrierConstructionError):
    pass


# ---------------------------------------------------------------------------
# kernel smoothing

RIDGE = 1e-6


def bump(s):
    """``exp(-1/(1-s))`` for squared radius ``s < 1``, zero outside."""
    out = np.zeros_like(s)
    m = s < 1
    out[m] = np.exp(-1.0 / (1.0 - s[m]))
    return out


@dataclass
class MollifiedField:
    """Local-linear kernel regression of band samples with a bump kernel.

    At a query point ``x`` an affine model ``a + b.(c - x)`` is fitted to
    the defined samples ``c`` within radius ``width``, weighted by the bump
    kernel; the smoothed value is ``a``. Affine data are reproduced exactly
    and the result inherits the smoothness of the kernel.
    """

    source: ExitTimeField
    width: float
    sup_error: float = float("nan")
    min_lie: float = float("nan")
    checked_cells: int = 0

    def __post_init__(self):
        g = self.source.V
        self._lo = np.array(g.lo)
        self._cell = g.cell
        self._shape = np.array(g.shape)
        self._values = self.source.values
        reach = np.ceil(self.width / self._cell).astype(int)
        self._reach = np.minimum(reach, self._shape)

    def value_and_grad(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m, n = X.shape
        w2 = self.width**2
        base = np.rint((X - self._lo) / self._cell - 0.5).astype(int)
        M = np.zeros((m, n + 1, n + 1))
        r = np.zeros((m, n + 1))
        dM = np.zeros((n, m, n + 1, n + 1))
        dr = np.zeros((n, m, n + 1))
        ksum = np.zeros(m)
        dksum = np.zeros((n, m))
        eye = np.eye(n)
        for off in product(*[range(-k, k + 1) for k in self._reach]):
            idx = base + np.array(off)
            valid = np.all((idx >= 0) & (idx < self._shape), axis=1)
            if not valid.any():
                continue
            y = np.full(m, np.nan)
            y[valid] = self._values[tuple(idx[valid].T)]
            use = valid & ~np.isnan(y)
            if not use.any():
                continue
            d = self._lo + (idx + 0.5) * self._cell - X
            s = np.sum(d * d, axis=1) / w2
            use &= s < 1
            if not use.any():
                continue
            rows = np.nonzero(use)[0]
            d, s, y = d[rows], s[rows], y[rows]
            k = bump(s)
            # d k / d x = 2 k d / (w^2 (1 - s)^2)
            dk = (2.0 * k / (w2 * (1.0 - s) ** 2))[:, None] * d
            z = np.concatenate([np.ones((len(rows), 1)), d], axis=1)
            zz = z[:, :, None] * z[:, None, :]
            M[rows] += k[:, None, None] * zz
            r[rows] += (k * y)[:, None] * z
            ksum[rows] += k
            dksum[:, rows] += dk.T
            for a in range(n):
                dz = np.zeros_like(z)
                dz[:, 1:] = -eye[a]
                dM[a, rows] += dk[:, a, None, None] * zz + k[:, None, None] * (
                    dz[:, :, None] * z[:, None, :] + z[:, :, None] * dz[:, None, :]
                )
                dr[a, rows] += (dk[:, a] * y)[:, None] * z + (k * y)[:, None] * dz
        val = np.full(m, np.nan)
        grad = np.full((m, n), np.nan)
        ok = ksum > 0
        if not ok.any():
            return val, grad
        R = np.diag([0.0] + [1.0] * n)
        lam = RIDGE * w2 * ksum[ok]
        A = M[ok] + lam[:, None, None] * R
        theta = np.linalg.solve(A, r[ok][:, :, None])[:, :, 0]
        val[ok] = theta[:, 0]
        for a in range(n):
            dA = dM[a, ok] + (RIDGE * w2 * dksum[a, ok])[:, None, None] * R
            rhs = dr[a, ok] - np.einsum("mij,mj->mi", dA, theta)
            dtheta = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
            grad[ok, a] = dtheta[:, 0]
        return val, grad

    def __call__(self, X) -> np.ndarray:
        return self.value_and_grad(X)[0]

    def grad(self, X) -> np.ndarray:
        return self.value_and_grad(X)[1]

    def lie(self, p: SafetyProblem, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.sum(self.grad(X) * p.f(X), axis=1)


def mollify_field(
    nu: ExitTimeField,
    width: float,
    p: SafetyProblem,
    delta: float | None = None,
) -> MollifiedField:
    """Smooth ``nu`` with kernel radius ``width`` and check the two bounds.

    On band cells with ``|nu| <= delta`` (all defined band cells when
    ``delta`` is None) the smoothed field must stay within ``delta/2`` of
    ``nu`` and its Lie derivative must exceed ``1 - delta/2``.
    """
    if width < float(np.min(nu.V.cell)) * (1 - 1e-9):
        raise ValueError("kernel width must be at least one cell")
    mf = MollifiedField(nu, width)
    idx = np.argwhere(nu.defined)
    vals = nu.values[tuple(idx.T)]
    if delta is not None:
        keep = np.abs(vals) <= delta
        idx, vals = idx[keep], vals[keep]
    if len(idx) == 0:
        raise BoundsViolatedError("no band cells to check")
    C = nu.V.centers(idx)
    v, g = mf.value_and_grad(C)
    mf.sup_error = float(np.max(np.abs(v - vals)))
    mf.min_lie = float(np.min(np.sum(g * p.f(C), axis=1)))
    mf.checked_cells = len(idx)
    if delta is not None:
        problems = []
        if not mf.sup_error < delta / 2:
            problems.append(f"sup |nu' - nu| = {mf.sup_error:.4g} >= delta/2 = {delta / 2:.4g}")
        if not mf.min_lie > 1 - delta / 2:
            problems.append(f"min Lie(nu') = {mf.min_lie:.4g} <= 1 - delta/2 = {1 - delta / 2:.4g}")
        if problems:
            raise BoundsViolatedError("; ".join(problems) + " (try a smaller kernel or finer grid)")
    return mf


# ---------------------------------------------------------------------------
# saturation and assembly


def saturate(s, delta: float):
    """Smooth odd monotone clamp to ``[-delta, delta]``.

    Identity for ``|s| <= delta/2``, constant ``+-delta`` for ``|s| >= delta``,
    a quintic blend in between (C2 at both joins).
    """
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    h = delta / 2
    u = np.clip((a - h) / h, 0.0, 1.0)
    blend = np.minimum(h + h * (u + 4 * u**3 - 7 * u**4 + 3 * u**5), delta)
    out = np.where(a <= h, a, np.where(a >= delta, delta, blend))
    return np.sign(s) * out


def saturate_prime(s, delta: float):
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    h = delta / 2
    u = np.clip((a - h) / h, 0.0, 1.0)
    blend = (1 - u) ** 2 * (15 * u**2 + 2 * u + 1)
    return np.where(a <= h, 1.0, np.where(a >= delta, 0.0, blend))


class Barrier:
    """Anything with vectorized ``value`` and ``grad``."""

    dim: int

    def value(self, X) -> np.ndarray:
        raise NotImplementedError

    def grad(self, X) -> np.ndarray:
        raise NotImplementedError

    def lie(self, p: SafetyProblem, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.sum(self.grad(X) * p.f(X), axis=1)


class AnalyticBarrier(Barrier):
    def __init__(self, expr: Expr, n: int):
        self.expr = expr
        self.dim = n
        self._f = compile_expr(expr)
        self._g = [compile_expr(e) for e in gradient(expr, n)]

    def value(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._f(X)

    def grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([g(X) for g in self._g], axis=-1)


@dataclass
class BarrierFunction(Barrier):
    """``saturate(nu')`` on the band, ``+delta`` inside ``V`` and ``-delta``
    outside it beyond the band."""

    smooth: MollifiedField
    delta: float

    def __post_init__(self):
        self.V: OccupancyGrid = self.smooth.source.V
        self.band = self.smooth.source.band
        self.dim = self.V.ndim

    def _locate(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        in_box = np.all((X >= np.array(self.V.lo)) & (X <= np.array(self.V.hi)), axis=1)
        idx = self.V.cell_index(X)
        t = tuple(idx.T)
        on_band = in_box & self.band[t]
        inside = in_box & self.V.occ[t]
        return X, on_band, inside

    def value_and_grad(self, X):
        X, on_band, inside = self._locate(X)
        val = np.where(inside, self.delta, -self.delta).astype(float)
        grad = np.zeros(X.shape)
        if on_band.any():
            v, g = self.smooth.value_and_grad(X[on_band])
            val[on_band] = saturate(v, self.delta)
            grad[on_band] = saturate_prime(v, self.delta)[:, None] * g
        return val, grad

    def value(self, X):
        return self.value_and_grad(X)[0]

    def grad(self, X):
        return self.value_and_grad(X)[1]

    def to_csv(self, path, p: SafetyProblem) -> None:
        C = self.V.all_centers().reshape(-1, self.dim)
        v, g = self.value_and_grad(C)
        lie = np.sum(g * p.f(C), axis=1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k + 1}" for k in range(self.dim)] + ["beta", "lie"])
            for c, b, l in zip(C, v, lie):
                w.writerow([repr(float(a)) for a in c] + [repr(float(b)), repr(float(l))])


def cell_points(grid: OccupancyGrid, idx: np.ndarray) -> np.ndarray:
    pts = [grid.centers(idx)]
    for corner in product((0, 1), repeat=grid.ndim):
        pts.append(np.array(grid.lo) + (idx + np.array(corner)) * grid.cell)
    return np.concatenate(pts)


def assemble_barrier(smooth: MollifiedField, delta: float) -> BarrierFunction:
    """Clamp the smoothed exit time into a globally defined barrier.

    Every band cell that borders a non-band cell must already be saturated
    (``|nu'| >= delta`` with the sign of the neighboring constant) so the
    barrier is continuous across the band edge.
    """
    if not 0 < delta < 0.5:
        raise ValueError("clamp level must lie in (0, 1/2)")
    V = smooth.source.V
    band = smooth.source.band
    cross = np.zeros(band.shape, dtype=bool)
    want_pos = np.zeros(band.shape, dtype=bool)
    want_neg = np.zeros(band.shape, dtype=bool)
    for ax in range(V.ndim):
        for shift in (1, -1):
            nb_band = np.roll(band, shift, axis=ax)
            nb_occ = np.roll(V.occ, shift, axis=ax)
            edge = np.ones(band.shape, dtype=bool)
            sl = [slice(None)] * V.ndim
            sl[ax] = 0 if shift == 1 else -1
            edge[tuple(sl)] = False  # no neighbor across the grid border
            hit = band & ~nb_band & edge
            cross |= hit
            want_pos |= hit & nb_occ
            want_neg |= hit & ~nb_occ
    if (want_pos & want_neg).any():
        raise BandTooThinError("a band edge cell borders both the inside and the outside of V")
    for want, sign in ((want_pos, 1.0), (want_neg, -1.0)):
        idx = np.argwhere(want)
        if len(idx) == 0:
            continue
        pts = cell_points(V, idx)
        v = smooth(pts)
        bad = ~(sign * v >= delta)
        if bad.any():
            j = int(np.argmax(bad))
            where = ", ".join(f"{a:.4g}" for a in pts[j])
            raise BandTooThinError(
                f"smoothed exit time {v[j]:.4g} at band edge ({where}) does not reach "
                f"{'+' if sign > 0 else '-'}{delta:g}; widen the band"
            )
    return BarrierFunction(smooth, delta)


def lie_derivative(beta: Barrier, p: SafetyProblem, x) -> np.ndarray | float:
    X = np.atleast_2d(np.asarray(x, dtype=float))
    out = beta.lie(p, X)
    return float(out[0]) if np.ndim(x) <= 1 else out


# ---------------------------------------------------------------------------
# validation


@dataclass
class BarrierReport:
    init_margin: float  # min beta on I
    lie_margin: float  # min Lie(beta) on the zero set
    unsafe_margin: float  # -max beta on U and the box faces
    eps_b: float
    worst_init: list
    worst_lie: list | None
    worst_unsafe: list
    samples: dict = field(default_factory=dict)

    @property
    def conditions(self) -> dict:
        return {
            "init_positive": self.init_margin > 0,
            "lie_positive_on_zero_set": self.lie_margin > 0,
            "unsafe_negative": self.unsafe_margin > 0,
        }

    @property
    def passed(self) -> bool:
        return all(self.conditions.values())

    @property
    def failed(self) -> list:
        return [k for k, v in self.conditions.items() if not v]

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None or not np.isfinite(x) else float(x)

        return {
            "pass": self.passed,
            "eps_b": float(self.eps_b),
            "conditions": {
                "init_positive": {"pass": self.init_margin > 0, "margin": num(self.init_margin),
                                  "worst_point": self.worst_init},
                "lie_positive_on_zero_set": {"pass": self.lie_margin > 0, "margin": num(self.lie_margin),
                                             "worst_point": self.worst_lie},
                "unsafe_negative": {"pass": self.unsafe_margin > 0, "margin": num(self.unsafe_margin),
                                    "worst_point": self.worst_unsafe},
            },
            "samples": self.samples,
        }


def _zero_crossings(beta: Barrier, verts: list[np.ndarray], vals: np.ndarray, iters: int = 50) -> np.ndarray:
    """Roots of ``beta`` on every sweep-grid edge whose endpoints change sign."""
    n = len(verts)
    out = []
    for ax in range(n):
        a = np.take(vals, range(0, vals.shape[ax] - 1), axis=ax)
        b = np.take(vals, range(1, vals.shape[ax]), axis=ax)
        hit = (a == 0) | (np.sign(a) * np.sign(b) < 0)
        idx = np.argwhere(hit)
        if len(idx) == 0:
            continue
        P0 = np.stack([verts[k][idx[:, k]] for k in range(n)], axis=1)
        P1 = P0.copy()
        P1[:, ax] = verts[ax][idx[:, ax] + 1]
        f0 = beta.value(P0)
        lo, hi = P0, P1
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            fm = beta.value(mid)
            same = np.sign(fm) == np.sign(f0)
            lo = np.where(same[:, None], mid, lo)
            hi = np.where(same[:, None], hi, mid)
        out.append(0.5 * (lo + hi))
    return np.concatenate(out) if out else np.empty((0, n))


def _predicate_points(p, pred, grid: OccupancyGrid, rng, samples: int) -> np.ndarray:
    from .certificate import sample_in_set

    R = rasterize(p, pred, grid.shape)
    idx = R.occupied_indices()
    if len(idx) == 0:
        return np.empty((0, p.dim))
    pts = cell_points(R, idx)
    pts = pts[np.asarray(pred(pts)) & p.in_box(pts)]
    extra = sample_in_set(p, pred, R, samples, rng) if samples > 0 else np.empty((0, p.dim))
    return np.concatenate([pts, extra])


def validate_barrier(
    beta: Barrier,
    p: SafetyProblem,
    samples: int = 2000,
    sweep=None,
    seed: int = 0,
    ratchet_steps: int = 1000,
) -> BarrierReport:
    """Check the three barrier conditions and find a robust margin.

    1. ``beta > eps_b`` on the initial set (raster corners and centers plus
       rejection samples).
    2. ``Lie(beta) > eps_b`` wherever ``|beta| <= eps_b``; at ``eps_b = 0``
       this is evaluated on roots located along every sweep-grid edge.
    3. ``beta < -eps_b`` on the unsafe part of the box and on its faces.

    ``eps_b`` is raised in ``ratchet_steps`` increments until one of the
    conditions would fail.
    """
    from .certificate import default_shape

    if samples < 1:
        raise ValueError("need at least one sample")
    if sweep is None:
        sweep = default_shape(p.dim)
    if np.isscalar(sweep):
        sweep = (int(sweep),) * p.dim
    rng = np.random.default_rng(seed)
    g = OccupancyGrid.for_problem(p, sweep)

    XI = _predicate_points(p, p.init, g, rng, samples)
    bI = beta.value(XI)
    jI = int(np.argmin(bI))
    init_margin = float(bI[jI])

    XU = np.concatenate([_predicate_points(p, p.unsafe, g, rng, samples), face_samples(p.domain, 33)])
    bU = beta.value(XU)
    jU = int(np.argmax(bU))
    unsafe_margin = float(-bU[jU])

    verts = [g.lo[k] + np.arange(s + 1) * g.cell[k] for k, s in enumerate(g.shape)]
    VX = np.stack(np.meshgrid(*verts, indexing="ij"), axis=-1)
    flat = VX.reshape(-1, p.dim)
    bV = beta.value(flat)
    roots = _zero_crossings(beta, verts, bV.reshape(VX.shape[:-1]))
    Xs = np.concatenate([flat, g.all_centers().reshape(-1, p.dim), p.lo + rng.random((samples, p.dim)) * (p.hi - p.lo)])
    bs = beta.value(Xs)
    ls = beta.lie(p, Xs)
    if len(roots):
        lr = beta.lie(p, roots)
        jr = int(np.argmin(lr))
        lie_margin = float(lr[jr])
        worst_lie = roots[jr].tolist()
    else:
        lr = np.empty(0)
        lie_margin = float("inf")
        worst_lie = None

    # ratchet: sorted |beta| with a running min of the Lie derivative
    absb = np.concatenate([np.abs(bs), np.zeros(len(lr))])
    lies = np.concatenate([ls, lr])
    order = np.argsort(absb, kind="stable")
    absb, run = absb[order], np.minimum.accumulate(lies[order])
    cap = min(init_margin, unsafe_margin)
    eps_b = 0.0
    if init_margin > 0 and unsafe_margin > 0 and lie_margin > 0 and cap > 0:
        for j in range(1, ratchet_steps):
            e = cap * j / ratchet_steps
            pos = np.searchsorted(absb, e, side="right")
            worst = run[pos - 1] if pos > 0 else np.inf
            if not worst > e:
                break
            eps_b = e

    return BarrierReport(
        init_margin=init_margin,
        lie_margin=lie_margin,
        unsafe_margin=unsafe_margin,
        eps_b=eps_b,
        worst_init=XI[jI].tolist(),
        worst_lie=worst_lie,
        worst_unsafe=XU[jU].tolist(),
        samples={"init": int(len(XI)), "unsafe": int(len(XU)), "sweep": int(len(Xs)), "zero_set": int(len(lr))},
    )
