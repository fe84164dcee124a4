import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustcert.certificate import sample_in_cells
from robustcert.dsl import make_problem, parse_predicate
from robustcert.flow import integrate_flow, sample_disturbed_batch
from robustcert.grid import (
    GridShapeError,
    OccupancyGrid,
    ReachParams,
    complement,
    grid_subset,
    rasterize,
    rasterize_set,
    reach_interval,
    set_algebra,
    step_reach,
)

ZERO = make_problem(["0"], [[-2.2, 2.2]], "x1^2 <= 0.25", "x1^2 >= 4")
RP = ReachParams(eps=0.1, dt_sub=0.0625, lipschitz=1.2)


def interval_cells(g: OccupancyGrid, a: float, b: float) -> np.ndarray:
    """Oracle: cells of a 1D grid whose closed span meets [a, b]."""
    left = g.lo[0] + np.arange(g.shape[0]) * g.cell[0]
    return (left + g.cell[0] >= a) & (left <= b)


# -- rasterize


def test_rasterize_init_interval(lin1d):
    R = rasterize(lin1d, lin1d.init, 512)
    want = interval_cells(R, -0.5, 0.5)
    assert R.cell[0] == pytest.approx(4.4 / 512)
    assert np.all(R.occ <= want)
    assert want.sum() - R.count <= 2


def test_rasterize_constant_predicates(lin1d):
    assert rasterize(lin1d, parse_predicate("false", 1), 64).is_empty()
    assert rasterize(lin1d, parse_predicate("true", 1), 64).occ.all()


def test_rasterize_dilation(lin1d):
    R = rasterize(lin1d, lin1d.init, 512)
    D = rasterize(lin1d, lin1d.init, 512, dilate=1)
    assert D.count == R.count + 2


def test_invalid_resolution():
    with pytest.raises(GridShapeError):
        OccupancyGrid.empty([0.0], [1.0], [1])
    with pytest.raises(GridShapeError):
        OccupancyGrid((0.0,), (1.0,), (4,), np.zeros(5, bool))


# -- step_reach


def test_stationary_small_step_is_one_ring():
    X = rasterize(ZERO, ZERO.init, 512)
    Y = step_reach(X, ZERO, ReachParams(0.0, 1e-3, 1e-3), 1e-3)
    assert grid_subset(X, Y)
    assert np.array_equal(Y.occ, X.dilate(1).occ)


def test_small_step_within_one_ring(lin1d):
    X = rasterize(lin1d, lin1d.init, 512)
    Y = step_reach(X, lin1d, ReachParams(0.0, 1e-3, 1e-3), 1e-3)
    assert grid_subset(X, Y)
    assert grid_subset(Y, X.dilate(1))


def test_step_reach_linear_example(lin1d, rng):
    X = rasterize_set(parse_predicate("x1 >= 0.49 and x1 <= 0.51", 1), lin1d.lo, lin1d.hi, (512,))
    h = 0.1
    rp = ReachParams(0.1, h, 1.2)
    Y = step_reach(X, lin1d, rp, h)
    r = rp.radius(h, X.halfdiag)
    assert r == pytest.approx(0.1 / 1.2 * (np.exp(0.12) - 1) + X.halfdiag * np.exp(0.12) + 1e-6)
    c = X.occupied_centers()[:, 0]
    pts = np.linspace(c.min() * np.exp(-h) - r, c.max() * np.exp(-h) + r, 400)[:, None]
    assert Y.contains(pts).all()
    assert Y.contains([[0.51 * np.exp(-h) + r]]).all()
    # sampled eps-solutions over one step all land inside
    X0 = sample_in_cells(X, 10_000, rng)
    end = sample_disturbed_batch(lin1d, X0, h, 0.1, rng).states[-1]
    assert Y.contains(end).all()


def test_escape_at_box_face(lin1d_unstable):
    X = OccupancyGrid.for_problem(lin1d_unstable, 512)
    occ = np.zeros(512, bool)
    occ[-1] = True
    Y = step_reach(X.like(occ), lin1d_unstable, RP, 0.0625)
    assert Y.escaped


# -- reach_interval


def test_zero_horizon_is_identity(lin1d):
    X = rasterize(lin1d, lin1d.init, 512)
    assert reach_interval(X, lin1d, RP, 0.0) is X


def test_negative_horizon_rejected(lin1d):
    with pytest.raises(ValueError):
        reach_interval(rasterize(lin1d, lin1d.init, 64), lin1d, RP, -1.0)


def test_stable_interval_reach(lin1d):
    X = rasterize(lin1d, lin1d.init, 512)
    R = reach_interval(X, lin1d, RP, 5.0)
    assert not R.escaped
    assert np.all(R.occ <= interval_cells(R, -0.62, 0.62))
    assert grid_subset(X, R)


def test_unstable_interval_reach_escapes(lin1d_unstable):
    X = rasterize(lin1d_unstable, lin1d_unstable.init, 512)
    assert reach_interval(X, lin1d_unstable, RP, 3.0).escaped


# -- inclusion and set algebra


def test_subset_examples(lin1d):
    A = rasterize(lin1d, lin1d.init, 64)
    empty = A.like(np.zeros(64, bool))
    full = A.like(np.ones(64, bool))
    holed = np.ones(64, bool)
    holed[10] = False
    assert grid_subset(A, A)
    assert grid_subset(empty, A)
    assert not grid_subset(full, A.like(holed))


def test_set_algebra_examples(lin1d):
    A = rasterize(lin1d, lin1d.init, 512)
    empty = A.like(np.zeros(512, bool))
    assert set_algebra("intersection", A, complement(A)).is_empty()
    assert np.array_equal(set_algebra("union", A, empty).occ, A.occ)
    assert set_algebra("disjointness", A, rasterize(lin1d, lin1d.unsafe, 512))
    with pytest.raises(ValueError):
        set_algebra("xor", A, A)


def test_shape_mismatch(lin1d):
    with pytest.raises(GridShapeError):
        grid_subset(rasterize(lin1d, lin1d.init, 64), rasterize(lin1d, lin1d.init, 128))


def test_contains_closed_faces():
    g = OccupancyGrid.empty([0.0], [4.0], [4])
    occ = np.zeros(4, bool)
    occ[1] = True
    g = g.like(occ)
    assert list(g.contains([[1.0], [1.5], [2.0], [2.5], [5.0]])) == [True, True, True, False, False]


def test_csv_round_trip(tmp_path, spiral):
    X = rasterize(spiral, spiral.init, (32, 16)).like(rasterize(spiral, spiral.init, (32, 16)).occ, True)
    X.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0].startswith("# domain") and lines[1] == "# resolution 32 16"
    Y = OccupancyGrid.from_csv(tmp_path / "g.csv")
    assert Y.shape == X.shape and Y.lo == X.lo and Y.hi == X.hi and Y.escaped
    assert np.array_equal(Y.occ, X.occ)


# -- properties

SMALL = 64


def small_grid(bits):
    return OccupancyGrid.empty(ZERO.lo, ZERO.hi, (SMALL,)).like(np.array(bits, bool))


bitmaps = st.lists(st.booleans(), min_size=SMALL, max_size=SMALL)


@given(bitmaps, bitmaps)
def test_reach_monotone_in_set(a, b):
    from robustcert.benchmarks import get_benchmark

    p = get_benchmark("lin1d-stable").problem
    X, Y = small_grid(a), small_grid(np.array(a) | np.array(b))
    assert grid_subset(reach_interval(X, p, RP, 0.5), reach_interval(Y, p, RP, 0.5))


@given(bitmaps, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_reach_monotone_in_horizon(a, t1, t2):
    from robustcert.benchmarks import get_benchmark

    p = get_benchmark("lin1d-stable").problem
    t1, t2 = sorted((t1, t2))
    X = small_grid(a)
    assert grid_subset(reach_interval(X, p, RP, t1), reach_interval(X, p, RP, t2))


@given(bitmaps, bitmaps)
def test_step_reach_splits_over_cells(a, b):
    # per-cell work merges by union, so any split of X gives the same image
    from robustcert.benchmarks import get_benchmark

    p = get_benchmark("lin1d-stable").problem
    A, B = np.array(a), np.array(b)
    whole = step_reach(small_grid(A | B), p, RP, 0.0625)
    part1 = step_reach(small_grid(A), p, RP, 0.0625)
    part2 = step_reach(small_grid(B & ~A), p, RP, 0.0625)
    assert np.array_equal(whole.occ, part1.occ | part2.occ)


@pytest.mark.parametrize("t,s", [(0.5, 0.5), (1.0, 0.25)])
def test_semigroup_over_approximation(spiral, t, s):
    X = rasterize(spiral, spiral.init, (96, 96))
    rp = ReachParams(0.1, 0.0625, 1.35)
    A = reach_interval(X, spiral, rp, t)
    whole = reach_interval(X, spiral, rp, t + s)
    split = set_algebra("union", reach_interval(A, spiral, rp, s), A)
    assert grid_subset(whole, split)


@pytest.mark.parametrize("name,shape,horizon", [("lin1d-stable", (512,), 5.0), ("spiral2d", (128, 128), 2.0)])
def test_soundness_against_sampling(name, shape, horizon, rng):
    from robustcert.benchmarks import get_benchmark

    p = get_benchmark(name).problem
    X = rasterize(p, p.init, shape)
    rp = ReachParams(0.1, 0.0625, 1.2 if p.dim == 1 else 1.35)
    R = reach_interval(X, p, rp, horizon)
    batch = sample_disturbed_batch(p, sample_in_cells(X, 2000, rng), horizon, 0.1, rng)
    visited = batch.states.reshape(-1, p.dim)
    assert R.contains(visited).all()


def test_nominal_flow_inside_reach(spiral):
    X = rasterize(spiral, spiral.init, (96, 96))
    R = reach_interval(X, spiral, ReachParams(0.0, 0.0625, 1.35), 3.0)
    for t in np.linspace(0, 3, 13):
        assert R.contains(integrate_flow(spiral, [1.0, 0.0], t)).all()
