"""End-to-end barrier synthesis: certificate, exit time, smoothing, clamp, validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .barrier import (
    BandTooThinError,
    BarrierConstructionError,
    BarrierFunction,
    BarrierReport,
    BoundsViolatedError,
    MollifiedField,
    cell_points,
    assemble_barrier,
    mollify_field,
    validate_barrier,
)
from .certificate import FOUND, CertificateResult, search_certificate
from .dsl import SafetyProblem
from .exit_time import BOUNDARY_SMOOTHING, ExitTimeError, ExitTimeField, NonSingularityError, build_band_field
from .grid import OccupancyGrid, rasterize

log = logging.getLogger(__name__)

BAND_WIDTHS = (8, 16, 32, 64)
DELTA_SHRINK = 0.9

STAGE_NONSINGULAR = "exit-time non-singularity"
STAGE_EXIT_TIME = "exit-time"
STAGE_DELTA = "clamp side conditions"
STAGE_BOUNDS = "mollify bounds"
STAGE_BAND = "assemble band-too-thin"


class StageError(RuntimeError):
    """A structural failure in one named stage of the synthesis pipeline."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.detail = message


@dataclass
class SynthesisConfig:
    eps: float = 0.1
    delta: float = 0.5  # certificate search step
    t_max: float = 20.0
    shape: tuple | None = None
    clamp: float = 0.2  # upper bound on the clamp level
    kernel_cells: float = 2.0  # kernel radius in cell widths
    kernel_width: float | None = None  # kernel radius in state units, overrides kernel_cells
    boundary_smoothing: float | None = BOUNDARY_SMOOTHING  # Gaussian width in cells of the crossed surface
    seed: int = 0
    samples: int = 2000
    t_search: float = 2.0


@dataclass
class Synthesis:
    certificate: CertificateResult | None
    V: OccupancyGrid
    field: ExitTimeField
    smooth: MollifiedField
    clamp: float
    barrier: BarrierFunction
    report: BarrierReport


def _set_points(p: SafetyProblem, pred, V: OccupancyGrid) -> np.ndarray:
    R = rasterize(p, pred, V.shape)
    idx = R.occupied_indices()
    if len(idx) == 0:
        return np.empty((0, p.dim))
    pts = cell_points(R, idx)
    return pts[np.asarray(pred(pts)) & p.in_box(pts)]


def choose_clamp(p: SafetyProblem, smooth: MollifiedField, upper: float) -> float:
    """Largest clamp level ``<= upper`` keeping the initial and unsafe sets
    outside ``{|nu'| < clamp}``.

    Points of either set outside the band are clamped by construction; those
    in the band need ``nu' > 0`` on the initial set and ``nu' < 0`` on the
    unsafe set.
    """
    V, band = smooth.source.V, smooth.source.band
    level = upper
    for pred, sign, name in ((p.init, 1.0, "initial"), (p.unsafe, -1.0, "unsafe")):
        pts = _set_points(p, pred, V)
        if len(pts) == 0:
            continue
        in_box = np.all((pts >= p.lo) & (pts <= p.hi), axis=1)
        pts = pts[in_box]
        pts = pts[band[tuple(V.cell_index(pts).T)]]
        if len(pts) == 0:
            continue
        v = sign * smooth(pts)
        worst = float(np.nanmin(v)) if np.any(~np.isnan(v)) else float("nan")
        if not worst > 0 or np.isnan(v).any():
            raise StageError(STAGE_DELTA, f"smoothed exit time does not separate the {name} set from the boundary of V")
        level = min(level, DELTA_SHRINK * worst)
    return level


def synthesize_from_certificate(
    p: SafetyProblem,
    V: OccupancyGrid,
    cfg: SynthesisConfig,
    certificate: CertificateResult | None = None,
) -> Synthesis:
    """Turn a certificate grid into a validated barrier, widening the band as needed."""
    if not 0 < cfg.clamp < 0.5:
        raise ValueError("clamp level must lie in (0, 1/2)")
    last: Exception | None = None
    for k in BAND_WIDTHS:
        field = None
        t_search = cfg.t_search
        while field is None:
            try:
                field = build_band_field(p, V, k=k, t_search=t_search, smoothing=cfg.boundary_smoothing)
            except NonSingularityError as e:
                if isinstance(last, BandTooThinError):
                    raise StageError(STAGE_BAND, f"{last}; widening to {k} cells hits a singular cell: {e}") from e
                raise StageError(STAGE_NONSINGULAR, str(e)) from e
            except ExitTimeError as e:
                if t_search >= 16 * cfg.t_search:
                    raise StageError(STAGE_EXIT_TIME, str(e)) from e
                t_search *= 2
        width = cfg.kernel_width or cfg.kernel_cells * float(np.max(V.cell))
        smooth = mollify_field(field, width, p)
        clamp = choose_clamp(p, smooth, cfg.clamp)
        try:
            smooth = mollify_field(field, width, p, clamp)
        except BoundsViolatedError as e:
            raise StageError(STAGE_BOUNDS, str(e)) from e
        log.info("band %d cells: clamp %.4g, sup err %.3g, min Lie %.4g", k, clamp, smooth.sup_error, smooth.min_lie)
        try:
            barrier = assemble_barrier(smooth, clamp)
        except BandTooThinError as e:
            last = e
            continue
        except BarrierConstructionError as e:
            raise StageError(STAGE_BAND, str(e)) from e
        report = validate_barrier(barrier, p, samples=cfg.samples, sweep=V.shape, seed=cfg.seed)
        return Synthesis(certificate, V, field, smooth, clamp, barrier, report)
    raise StageError(STAGE_BAND, str(last))


def synthesize(p: SafetyProblem, cfg: SynthesisConfig) -> Synthesis | CertificateResult:
    """Run the certificate search, then build a barrier if one was found.

    Returns the bare search result when no certificate was found.
    """
    res = search_certificate(p, cfg.eps, cfg.delta, cfg.t_max, cfg.shape, seed=cfg.seed)
    if res.status != FOUND:
        return res
    return synthesize_from_certificate(p, res.V, cfg, res)
