"""Signed exit time to the boundary of a certificate grid.

For a point ``x`` the flow crosses the boundary of ``V`` at a unique
signed time ``t``; the exit-time value is ``-t``, positive inside ``V`` and
negative outside, and it grows at unit rate along trajectories.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np
from scipy import ndimage

from .dsl import SafetyProblem
from .flow import lipschitz_estimate, rk4_step
from .grid import OccupancyGrid


class ExitTimeError(RuntimeError):
    """Structural failure while building the exit-time field."""


class NonSingularityError(ExitTimeError):
    pass


@dataclass
class Crossings:
    """Batched crossing search result; ``t`` is nan where no crossing was found."""

    t: np.ndarray
    inside: np.ndarray
    extra: list  # (row, [extra crossing times]) pairs
    left_forward: np.ndarray
    left_backward: np.ndarray

    @property
    def nu(self) -> np.ndarray:
        return -self.t


# Gaussian width, in cells, of the default crossed surface
BOUNDARY_SMOOTHING = 3.0


@dataclass(frozen=True, eq=False)
class SmoothBoundary:
    """The 1/2-level set of the Gaussian-smoothed occupancy of ``V``.

    Membership is ``g(x) >= 1/2`` with ``g`` the multilinear interpolant of
    the smoothed cell values (zero beyond the box). Crossing times measured
    against this surface vary continuously between neighboring flow lines,
    unlike those measured against the staircase of cell faces.
    """

    V: OccupancyGrid
    sigma_cells: float = BOUNDARY_SMOOTHING

    @cached_property
    def _padded(self) -> np.ndarray:
        g = ndimage.gaussian_filter(self.V.occ.astype(float), self.sigma_cells, mode="constant", cval=0.0)
        return np.pad(g, 1)

    def level(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        g = self._padded
        rel = (X - np.array(self.V.lo)) / self.V.cell + 0.5  # padded center coordinates
        top = np.array(g.shape) - 1
        rel = np.clip(rel, 0, top)
        base = np.minimum(np.floor(rel).astype(int), top - 1)
        frac = rel - base
        out = np.zeros(X.shape[0])
        for corner in product((0, 1), repeat=X.shape[1]):
            c = np.array(corner)
            w = np.prod(np.where(c, frac, 1.0 - frac), axis=1)
            out += w * g[tuple((base + c).T)]
        return out

    def contains(self, X) -> np.ndarray:
        return self.level(X) >= 0.5


def _scan(p, V, X, direction, dt, steps):
    lo, hi = p.lo, p.hi
    fun = p.f if direction > 0 else (lambda Y: -p.f(Y))
    m = X.shape[0]
    states = np.empty((steps + 1,) + X.shape)
    ind = np.empty((steps + 1, m), dtype=bool)
    alive = np.ones((steps + 1, m), dtype=bool)
    cur = X.copy()
    states[0] = cur
    ind[0] = V.contains(cur)
    ok = np.all((cur >= lo) & (cur <= hi), axis=1)
    alive[0] = ok
    for k in range(1, steps + 1):
        cur = rk4_step(fun, cur, dt)
        ok = ok & np.all((cur >= lo) & (cur <= hi), axis=1) & np.all(np.isfinite(cur), axis=1)
        states[k] = cur
        ind[k] = V.contains(np.where(ok[:, None], cur, X))
        alive[k] = ok
    return states, ind, alive


def crossing_times(
    p: SafetyProblem,
    V: OccupancyGrid,
    X,
    t_search: float,
    tol: float = 1e-7,
    substeps: int = 256,
    boundary=None,
) -> Crossings:
    """Scan membership of ``V`` along the flow, then bisect the first change.

    Points inside ``V`` are scanned backward, points outside forward. Any
    other membership change seen in either direction is reported in
    ``extra``. ``boundary`` (anything with ``contains``) replaces the cell
    faces of ``V`` as the crossed surface, e.g. a ``SmoothBoundary``.
    """
    V = V if boundary is None else boundary
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = X.shape[0]
    dt = t_search / substeps
    inside = V.contains(X)
    t = np.full(m, np.nan)
    extra_times = [[] for _ in range(m)]
    left = {}
    brackets = []
    for direction in (1, -1):
        states, ind, alive = _scan(p, V, X, direction, dt, substeps)
        left[direction] = ~alive[-1]
        change = (ind[1:] != ind[:-1]) & alive[1:]
        primary = (~inside) if direction > 0 else inside
        has = change.any(axis=0)
        first = np.argmax(change, axis=0)
        rows = np.nonzero(primary & has)[0]
        brackets.append((direction, rows, first[rows], states))
        for j, k in zip(*np.nonzero(change.T)):
            if primary[j] and k == first[j]:
                continue
            extra_times[j].append(float(direction * (k + 0.5) * dt))

    for direction, rows, ks, states in brackets:
        if rows.size == 0:
            continue
        start = states[ks, rows]
        ref = V.contains(start)
        a = np.zeros(rows.size)
        b = np.full(rows.size, dt)
        fun = p.f if direction > 0 else (lambda Y: -p.f(Y))
        while np.max(b - a) > tol:
            mid = 0.5 * (a + b)
            Y = rk4_step(lambda Z: mid[:, None] * fun(Z), start, 1.0)
            same = V.contains(Y) == ref
            a = np.where(same, mid, a)
            b = np.where(same, b, mid)
        t[rows] = direction * (ks * dt + 0.5 * (a + b))

    extra = [(j, ts) for j, ts in enumerate(extra_times) if ts]
    return Crossings(t, inside, extra, left[1], left[-1])


@dataclass
class CrossingResult:
    t: float | None
    extra: list
    left_domain: list  # directions ("forward"/"backward") in which the scan left the box

    @property
    def nu(self) -> float | None:
        return None if self.t is None else -self.t


def crossing_time(
    p: SafetyProblem, V: OccupancyGrid, x, t_search: float, tol: float = 1e-7, boundary=None
) -> CrossingResult:
    """Signed time at which the flow through ``x`` crosses the boundary of ``V``."""
    if V.is_empty() or V.occ.all():
        raise ValueError("V must be nonempty with nonempty complement")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if not p.in_box(x)[0]:
        raise ValueError("point outside the domain box")
    c = crossing_times(p, V, x, t_search, tol, boundary=boundary)
    left = [name for name, flag in (("forward", c.left_forward[0]), ("backward", c.left_backward[0])) if flag]
    t = None if np.isnan(c.t[0]) else float(c.t[0])
    return CrossingResult(t, c.extra[0][1] if c.extra else [], left)


def boundary_cells(V: OccupancyGrid) -> np.ndarray:
    """Occupied cells with at least one unoccupied face neighbor."""
    cross = ndimage.generate_binary_structure(V.ndim, 1)
    inner = ndimage.binary_erosion(V.occ, cross, border_value=0)
    return V.occ & ~inner


def band_cells(V: OccupancyGrid, k: int) -> np.ndarray:
    """Cells within face-graph distance ``k`` of a boundary cell."""
    cross = ndimage.generate_binary_structure(V.ndim, 1)
    return ndimage.binary_dilation(boundary_cells(V), cross, iterations=k)


def multilinear(values: np.ndarray, lo, cell, X, strict: bool = False) -> np.ndarray:
    """Interpolate cell-center ``values`` at points ``X``, skipping nan neighbors.

    With ``strict`` the result is nan unless every neighbor is defined.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    shape = np.array(values.shape)
    rel = (X - np.asarray(lo)) / cell - 0.5
    base = np.floor(rel).astype(int)
    frac = rel - base
    num = np.zeros(X.shape[0])
    den = np.zeros(X.shape[0])
    full = np.ones(X.shape[0], dtype=bool)
    for corner in product((0, 1), repeat=X.shape[1]):
        c = np.array(corner)
        idx = base + c
        valid = np.all((idx >= 0) & (idx < shape), axis=1)
        w = np.prod(np.where(c, frac, 1.0 - frac), axis=1)
        v = np.full(X.shape[0], np.nan)
        v[valid] = values[tuple(idx[valid].T)]
        have = valid & ~np.isnan(v)
        if strict:
            full &= have
        use = have & (w > 0)
        num[use] += w[use] * v[use]
        den[use] += w[use]
    out = np.full(X.shape[0], np.nan)
    ok = (den > 1e-12) & full
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class ExitTimeField:
    V: OccupancyGrid
    band: np.ndarray  # bool, grid shape
    boundary: np.ndarray
    values: np.ndarray  # nan outside the band or where undefined
    k: int
    t_search: float
    min_speed: float
    undefined: int
    sign_violations: int
    uniqueness: list  # (cell index, extra crossing times)
    max_jump: float
    jump_threshold: float
    surface: SmoothBoundary | None = None
    refine: int = 1

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def continuity_flag(self) -> bool:
        return self.max_jump > self.jump_threshold

    def __call__(self, X, strict: bool = False) -> np.ndarray:
        return multilinear(self.values, self.V.lo, self.V.cell, X, strict)

    def band_centers(self) -> np.ndarray:
        return self.V.centers(np.argwhere(self.band))

    def diagnostics(self) -> dict:
        return {
            "band_cells": int(self.band.sum()),
            "band_width": self.k,
            "undefined_cells": self.undefined,
            "sign_violations": self.sign_violations,
            "extra_crossings": len(self.uniqueness),
            "max_adjacent_jump": self.max_jump,
            "jump_threshold": self.jump_threshold,
            "continuity_flag": self.continuity_flag,
            "min_speed": self.min_speed,
            "boundary_smoothing_cells": None if self.surface is None else self.surface.sigma_cells / self.refine,
            "refine": self.refine,
        }

    def to_csv(self, path) -> None:
        n = self.V.ndim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k + 1}" for k in range(n)] + ["nu"])
            for idx in np.argwhere(self.band):
                c = self.V.centers(idx)
                v = self.values[tuple(idx)]
                w.writerow([repr(float(a)) for a in c] + ["undef" if np.isnan(v) else repr(float(v))])


def build_band_field(
    p: SafetyProblem,
    V: OccupancyGrid,
    k: int = 8,
    t_search: float = 2.0,
    tol: float = 1e-7,
    lipschitz: float | None = None,
    max_undefined: float = 0.01,
    smoothing: float | None = BOUNDARY_SMOOTHING,
    refine: int = 1,
) -> ExitTimeField:
    """Exit-time values at the centers of all cells in a ``k``-cell band around the boundary of ``V``.

    With ``smoothing`` (a Gaussian width in cells) the crossed surface is a
    ``SmoothBoundary``; ``None`` uses the cell faces of ``V`` directly.
    ``refine`` samples on a lattice with each cell of ``V`` split that many
    times per axis; ``k`` and ``smoothing`` stay in cells of ``V``, so the
    crossed surface is unchanged and only the interpolation error shrinks.
    The returned field's ``V`` is the refined grid.
    """
    if k < 1:
        raise ValueError("band width must be at least one cell")
    if refine < 1:
        raise ValueError("refinement must be a positive integer")
    if V.is_empty() or V.occ.all():
        raise ExitTimeError("V must be nonempty with nonempty complement")
    V = V.refine(refine)
    k *= refine
    if smoothing is not None:
        smoothing *= refine
    band = band_cells(V, k)
    idx = np.argwhere(band)
    C = V.centers(idx)
    speed = np.linalg.norm(p.f(C), axis=1)
    L = lipschitz if lipschitz is not None else lipschitz_estimate(p)
    # the field may vanish anywhere in a cell, not just at its center
    lower = speed - L * V.halfdiag
    j = int(np.argmin(lower))
    if lower[j] < 1e-6:
        where = ", ".join(f"{v:.4g}" for v in C[j])
        raise NonSingularityError(
            f"vector field may vanish in band cell at ({where}): |f|={speed[j]:.3g}, "
            f"cell bound {lower[j]:.3g}"
        )
    surface = None if smoothing is None else SmoothBoundary(V, smoothing)
    cr = crossing_times(p, V, C, t_search, tol, boundary=surface)
    values = np.full(V.shape, np.nan)
    values[tuple(idx.T)] = cr.nu
    undefined = int(np.isnan(cr.t).sum())
    if undefined > max_undefined * len(idx):
        raise ExitTimeError(
            f"{undefined} of {len(idx)} band cells have no boundary crossing within t_search={t_search:g}"
        )
    occ_at = V.occ[tuple(idx.T)] if surface is None else surface.contains(C)
    nu = cr.nu
    sign_bad = int(np.sum(occ_at & (nu <= 0)) + np.sum(~occ_at & (nu >= 0)))

    max_jump = 0.0
    for ax in range(V.ndim):
        a = np.take(values, range(0, V.shape[ax] - 1), axis=ax)
        b = np.take(values, range(1, V.shape[ax]), axis=ax)
        d = np.abs(a - b)
        if np.any(~np.isnan(d)):
            max_jump = max(max_jump, float(np.nanmax(d)))
    threshold = 2 * V.halfdiag / float(speed.min()) * 5.0
    uniq = [(idx[j].tolist(), ts) for j, ts in cr.extra]
    return ExitTimeField(
        V=V,
        band=band,
        boundary=boundary_cells(V),
        values=values,
        k=k,
        t_search=t_search,
        min_speed=float(speed.min()),
        undefined=undefined,
        sign_violations=sign_bad,
        uniqueness=uniq,
        max_jump=max_jump,
        jump_threshold=threshold,
        surface=surface,
        refine=refine,
    )
