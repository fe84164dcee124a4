"""Occupancy grids and over-approximating perturbed reach operators."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import ndimage

from .dsl import SafetyProblem, SetPredicate
from .flow import IntegratorConfig, flow_batch


class GridShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Union of closed, axis-aligned cells over a box.

    ``occ`` has the grid shape; ``escaped`` records that some propagated
    image left the box.
    """

    lo: tuple
    hi: tuple
    shape: tuple
    occ: np.ndarray
    escaped: bool = False

    def __post_init__(self):
        if len(self.shape) != len(self.lo) or any(s < 2 for s in self.shape):
            raise GridShapeError(f"invalid resolution {self.shape}")
        occ = np.asarray(self.occ, dtype=bool)
        if occ.shape != tuple(self.shape):
            raise GridShapeError(f"bitmap shape {occ.shape} != resolution {self.shape}")
        occ = occ.copy()
        occ.flags.writeable = False
        object.__setattr__(self, "occ", occ)

    @classmethod
    def empty(cls, lo, hi, shape) -> "OccupancyGrid":
        shape = tuple(int(s) for s in shape)
        return cls(tuple(map(float, lo)), tuple(map(float, hi)), shape, np.zeros(shape, bool))

    @classmethod
    def for_problem(cls, p: SafetyProblem, shape) -> "OccupancyGrid":
        if np.isscalar(shape):
            shape = (int(shape),) * p.dim
        return cls.empty(p.lo, p.hi, shape)

    def like(self, occ, escaped: bool = False) -> "OccupancyGrid":
        return OccupancyGrid(self.lo, self.hi, self.shape, occ, escaped)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def cell(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.shape)

    @property
    def halfdiag(self) -> float:
        return 0.5 * float(np.linalg.norm(self.cell))

    @property
    def count(self) -> int:
        return int(self.occ.sum())

    @property
    def fraction(self) -> float:
        return self.count / self.occ.size

    def is_empty(self) -> bool:
        return not self.occ.any()

    def centers(self, idx) -> np.ndarray:
        return np.array(self.lo) + (np.asarray(idx, dtype=float) + 0.5) * self.cell

    def occupied_indices(self) -> np.ndarray:
        return np.argwhere(self.occ)

    def occupied_centers(self) -> np.ndarray:
        return self.centers(self.occupied_indices())

    def all_centers(self) -> np.ndarray:
        """Centers of every cell, shape ``shape + (n,)``."""
        axes = [self.lo[k] + (np.arange(s) + 0.5) * self.cell[k] for k, s in enumerate(self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_index(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx = np.floor((X - np.array(self.lo)) / self.cell).astype(int)
        return np.clip(idx, 0, np.array(self.shape) - 1)

    def contains(self, X) -> np.ndarray:
        """Membership of points in the union of occupied closed cells.

        A point on a shared face counts if either adjacent cell is occupied.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo, hi = np.array(self.lo), np.array(self.hi)
        inside = np.all((X >= lo) & (X <= hi), axis=1)
        rel = (X - lo) / self.cell
        base = np.clip(np.floor(rel).astype(int), 0, np.array(self.shape) - 1)
        out = self.occ[tuple(base.T)] & inside
        frac = rel - np.floor(rel)
        on_face = (frac < 1e-9) | (frac > 1 - 1e-9)
        if on_face.any():
            for k in range(self.ndim):
                rows = np.nonzero(on_face[:, k] & inside & ~out)[0]
                if rows.size == 0:
                    continue
                r = np.rint(rel[rows, k]).astype(int)
                for cand in (r - 1, r):
                    idx = base[rows].copy()
                    idx[:, k] = np.clip(cand, 0, self.shape[k] - 1)
                    out[rows] |= self.occ[tuple(idx.T)]
        return out

    def refine(self, r: int) -> "OccupancyGrid":
        """The same set on a grid with every cell split ``r`` times per axis."""
        if r == 1:
            return self
        occ = self.occ
        for ax in range(self.ndim):
            occ = np.repeat(occ, r, axis=ax)
        return OccupancyGrid(self.lo, self.hi, tuple(s * r for s in self.shape), occ, self.escaped)

    def dilate(self, cells: int = 1) -> "OccupancyGrid":
        if cells <= 0:
            return self
        struct = ndimage.generate_binary_structure(self.ndim, self.ndim)
        occ = ndimage.binary_dilation(self.occ, struct, iterations=cells)
        return self.like(occ, self.escaped)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# domain " + " ".join(f"{a!r}:{b!r}" for a, b in zip(self.lo, self.hi)) + "\n")
            fh.write("# resolution " + " ".join(str(s) for s in self.shape) + "\n")
            fh.write(f"# escaped {int(self.escaped)}\n")
            w = csv.writer(fh)
            w.writerow([f"cell_index_{k + 1}" for k in range(self.ndim)] + ["occupied"])
            for idx in np.ndindex(*self.shape):
                w.writerow(list(idx) + [int(self.occ[idx])])

    @classmethod
    def from_csv(cls, path) -> "OccupancyGrid":
        lo, hi, shape, escaped = [], [], None, False
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.startswith("# domain"):
                    for part in line.split()[2:]:
                        a, b = part.split(":")
                        lo.append(float(a))
                        hi.append(float(b))
                elif line.startswith("# resolution"):
                    shape = tuple(int(s) for s in line.split()[2:])
                elif line.startswith("# escaped"):
                    escaped = bool(int(line.split()[2]))
                elif line.startswith("cell_index"):
                    continue
                elif line.strip():
                    rows.append([int(v) for v in line.strip().split(",")])
        if shape is None or not lo:
            raise GridShapeError(f"{path}: missing '# domain' or '# resolution' header")
        occ = np.zeros(shape, dtype=bool)
        if rows:
            arr = np.array(rows)
            occ[tuple(arr[:, :-1].T)] = arr[:, -1].astype(bool)
        return cls(tuple(lo), tuple(hi), shape, occ, escaped)


def _check_same(A: OccupancyGrid, B: OccupancyGrid):
    if A.shape != B.shape or not np.allclose(A.lo, B.lo) or not np.allclose(A.hi, B.hi):
        raise GridShapeError(f"grid mismatch: {A.shape} vs {B.shape}")


def grid_subset(A: OccupancyGrid, B: OccupancyGrid) -> bool:
    _check_same(A, B)
    return not np.any(A.occ & ~B.occ)


def set_algebra(op: str, A: OccupancyGrid, B: OccupancyGrid):
    _check_same(A, B)
    if op == "union":
        return A.like(A.occ | B.occ, A.escaped or B.escaped)
    if op == "intersection":
        return A.like(A.occ & B.occ)
    if op == "disjointness":
        return not np.any(A.occ & B.occ)
    raise ValueError(f"unknown set operation {op!r}")


def complement(A: OccupancyGrid) -> OccupancyGrid:
    return A.like(~A.occ)


def rasterize_set(pred: SetPredicate, lo, hi, shape, dilate: int = 0) -> OccupancyGrid:
    """Corner-and-center sampling rasterization of a predicate.

    A cell is occupied if the predicate holds at one of its corners or at
    its center. Thin features between samples can be missed; ``dilate``
    adds rings of neighbor cells.
    """
    g = OccupancyGrid.empty(lo, hi, shape)
    n = g.ndim
    verts = [g.lo[k] + np.arange(s + 1) * g.cell[k] for k, s in enumerate(g.shape)]
    V = np.stack(np.meshgrid(*verts, indexing="ij"), axis=-1)
    hv = np.asarray(pred(V.reshape(-1, n))).reshape(V.shape[:-1])
    occ = np.asarray(pred(g.all_centers().reshape(-1, n))).reshape(g.shape).copy()
    for corner in product((0, 1), repeat=n):
        sl = tuple(slice(c, c + s) for c, s in zip(corner, g.shape))
        occ |= hv[sl]
    return g.like(occ).dilate(dilate)


def rasterize(p: SafetyProblem, pred: SetPredicate, shape, dilate: int = 0) -> OccupancyGrid:
    if np.isscalar(shape):
        shape = (int(shape),) * p.dim
    return rasterize_set(pred, p.lo, p.hi, shape, dilate)


def mark_balls(template: OccupancyGrid, Y, radii) -> tuple[np.ndarray, bool]:
    """Cells meeting any closed ball ``B(Y[i], radii[i])``, plus an escape flag.

    The flag is set when a ball is not contained in the box.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (Y.shape[0],))
    occ = np.zeros(template.shape, dtype=bool)
    if Y.shape[0] == 0:
        return occ, False
    lo, hi, w = np.array(template.lo), np.array(template.hi), template.cell
    finite = np.all(np.isfinite(Y), axis=1) & np.isfinite(radii)
    escaped = bool((~finite).any())
    Y, radii = Y[finite], radii[finite]
    if Y.shape[0] == 0:
        return occ, escaped
    escaped |= bool(np.any((Y - radii[:, None] < lo) | (Y + radii[:, None] > hi)))
    shape = np.array(template.shape)
    base = np.floor((Y - lo) / w).astype(np.int64)
    K = np.ceil(radii.max() / w).astype(int) + 1
    r2 = radii**2
    for off in product(*[range(-k, k + 1) for k in K]):
        idx = base + np.array(off)
        valid = np.all((idx >= 0) & (idx < shape), axis=1)
        if not valid.any():
            continue
        cl = lo + idx * w
        d = np.maximum(np.maximum(cl - Y, 0.0), Y - (cl + w))
        hit = valid & (np.sum(d * d, axis=1) <= r2)
        if hit.any():
            occ[tuple(idx[hit].T)] = True
    return occ, escaped


@dataclass(frozen=True)
class ReachParams:
    eps: float
    dt_sub: float
    lipschitz: float
    tol: float = 1e-6

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.dt_sub <= 0:
            raise ValueError("sub-step must be positive")
        if self.lipschitz <= 0:
            raise ValueError("Lipschitz bound must be positive")

    def radius(self, h, halfdiag: float):
        """Gronwall bloat: every eps-solution from a cell stays this close to
        the flowed cell center after time ``h``."""
        L = self.lipschitz
        g = np.exp(L * np.asarray(h, dtype=float))
        return (self.eps / L) * (g - 1.0) + halfdiag * g + self.tol


def step_reach(
    X: OccupancyGrid,
    p: SafetyProblem,
    rp: ReachParams,
    h: float,
    cfg: IntegratorConfig | None = None,
) -> OccupancyGrid:
    """Over-approximation of the states reached at exactly time ``h``."""
    C = X.occupied_centers()
    if C.shape[0] == 0:
        return X.like(np.zeros(X.shape, bool))
    res = flow_batch(p, C, h, cfg)
    occ, esc = mark_balls(X, res.states, rp.radius(h, X.halfdiag))
    return X.like(occ, esc or bool(res.left.any()))


def sweep_step(
    X: OccupancyGrid,
    p: SafetyProblem,
    rp: ReachParams,
    h: float,
    cfg: IntegratorConfig | None = None,
    max_pieces: int = 64,
) -> tuple[OccupancyGrid, OccupancyGrid]:
    """Reach over one sub-step: the time-``h`` image and the ``[0, h]`` tube.

    The nominal trajectory of each cell center is sampled at ``q`` pieces
    so that it moves at most about one cell per piece. Between samples an
    eps-solution stays within ``r(tau) + speed * dtau / 2`` of the nearer
    nominal sample, where the speed bound uses ``|f(phi(c, s))| <=
    |f(phi(c, tau))| exp(L |s - tau|)``.
    """
    C = X.occupied_centers()
    empty = X.like(np.zeros(X.shape, bool))
    if C.shape[0] == 0 or h <= 0:
        return empty, X
    L = rp.lipschitz
    speed0 = float(np.max(np.linalg.norm(p.f(C), axis=1)))
    wmin = float(np.min(X.cell))
    q = int(np.clip(np.ceil(speed0 * np.exp(L * h) * h / wmin), 1, max_pieces))
    dtau = h / q
    nodes = [C]
    left = np.zeros(C.shape[0], bool)
    cur = C
    for _ in range(q):
        res = flow_batch(p, cur, dtau, cfg)
        left |= res.left
        cur = res.states
        nodes.append(cur)
    speeds = [np.linalg.norm(p.f(Y), axis=1) for Y in nodes]
    growth = np.exp(L * dtau)
    tube = np.zeros(X.shape, bool)
    esc = bool(left.any())
    for j in range(q + 1):
        pad = np.zeros(C.shape[0])
        r = np.zeros(C.shape[0])
        for piece in (j - 1, j):
            if 0 <= piece < q:
                s_piece = np.maximum(speeds[piece], speeds[piece + 1]) * growth * dtau / 2
                r_piece = rp.radius((piece + 1) * dtau, X.halfdiag)
                pad = np.maximum(pad, r_piece + s_piece)
        r = pad
        occ, e = mark_balls(X, nodes[j], r)
        tube |= occ
        esc |= e
    end_occ, end_esc = mark_balls(X, nodes[-1], rp.radius(h, X.halfdiag))
    return X.like(end_occ, end_esc or bool(left.any())), X.like(tube, esc)


def reach_interval(
    X: OccupancyGrid,
    p: SafetyProblem,
    rp: ReachParams,
    horizon: float,
    cfg: IntegratorConfig | None = None,
) -> OccupancyGrid:
    """Over-approximation of everything eps-reachable from ``X`` within ``horizon``."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if horizon == 0 or X.is_empty():
        return X
    k = max(1, int(np.ceil(horizon / rp.dt_sub - 1e-12)))
    h = horizon / k
    acc = X.occ.copy()
    esc = X.escaped
    cur = X
    for _ in range(k):
        cur, tube = sweep_step(cur, p, rp, h, cfg)
        acc |= tube.occ
        esc = esc or tube.escaped or cur.escaped
    return X.like(acc, esc)


def compose_step_reach(
    X: OccupancyGrid,
    p: SafetyProblem,
    rp: ReachParams,
    horizon: float,
    cfg: IntegratorConfig | None = None,
) -> OccupancyGrid:
    """Time-``horizon`` image as a composition of ``step_reach`` sub-steps."""
    k = max(1, int(np.ceil(horizon / rp.dt_sub - 1e-12)))
    h = horizon / k
    cur = X
    esc = False
    for _ in range(k):
        cur = step_reach(cur, p, rp, h, cfg)
        esc = esc or cur.escaped
    return cur.like(cur.occ, esc)
