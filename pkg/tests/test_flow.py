import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustcert.benchmarks import get_benchmark
from robustcert.dsl import make_problem
from robustcert.flow import (
    DomainExitError,
    IntegratorConfig,
    flow_batch,
    flow_durations,
    integrate_flow,
    lipschitz_estimate,
    rk4_step,
    sample_disturbed_batch,
    sample_disturbed_trajectory,
)

ZERO = make_problem(["0"], [[-2.2, 2.2]], "x1^2 <= 0.25", "x1^2 >= 4")
CFG = IntegratorConfig()
TOL = CFG.error_bound()


def test_zero_field_is_identity():
    assert integrate_flow(ZERO, [0.3], 5.0)[0] == 0.3


def test_decay_closed_form(lin1d):
    assert integrate_flow(lin1d, [1.0], 1.0)[0] == pytest.approx(np.exp(-1.0), abs=1e-6)


def test_reverse_time_closed_form(lin1d):
    assert integrate_flow(lin1d, [0.3678794], -1.0)[0] == pytest.approx(1.0, abs=1e-6)


def test_domain_exit_reported(lin1d_unstable):
    with pytest.raises(DomainExitError) as err:
        integrate_flow(lin1d_unstable, [0.5], 3.0)
    assert err.value.time == pytest.approx(np.log(2.2 / 0.5), abs=1e-6)
    assert err.value.point[0] == pytest.approx(2.2, abs=1e-3)


def test_rk4_matches_closed_form():
    bench = get_benchmark("spiral2d")
    X = np.array([[1.0, 0.5], [-2.0, 0.3]])
    cfg = IntegratorConfig("rk4", h=0.5 / 64)
    got = flow_batch(bench.problem, X, 2.0, cfg).states
    np.testing.assert_allclose(got, bench.flow(X, 2.0), atol=1e-7)


def test_flow_durations_per_row(spiral):
    bench = get_benchmark("spiral2d")
    X = np.array([[1.0, 0.5], [-0.5, 0.3], [0.2, -1.0]])
    taus = np.array([0.3, -0.2, 1.1])
    got = flow_durations(spiral, X, taus)
    want = np.stack([bench.flow(x, t) for x, t in zip(X, taus)])
    np.testing.assert_allclose(got, want, atol=1e-7)


@pytest.mark.parametrize("name", ["lin1d-stable", "spiral2d"])
def test_semigroup_and_inverse(name):
    p = get_benchmark(name).problem
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 100:
        x = rng.uniform(-0.5, 0.5, p.dim)
        s, t = rng.uniform(-1, 1, 2)
        try:
            a = integrate_flow(p, x, s + t)
            b = integrate_flow(p, integrate_flow(p, x, s), t)
            back = integrate_flow(p, integrate_flow(p, x, t), -t)
        except DomainExitError:
            continue
        assert np.linalg.norm(a - b) <= 10 * TOL
        assert np.linalg.norm(back - x) <= 10 * TOL
        checked += 1


def test_zero_disturbance_matches_flow(spiral):
    tr = sample_disturbed_trajectory(spiral, [1.0, 0.0], 2.0, 0.0, seed=3)
    bench = get_benchmark("spiral2d")
    want = np.stack([bench.flow(np.array([1.0, 0.0]), t) for t in tr.times])
    assert np.max(np.abs(tr.states - want)) <= 1e-8
    assert not tr.truncated


def test_disturbed_stays_in_invariant_interval(lin1d):
    for seed in range(20):
        tr = sample_disturbed_trajectory(lin1d, [0.5], 10.0, 0.1, seed=seed)
        assert np.all(np.abs(tr.states) <= 0.5 + 1e-3)


def test_unstable_truncates(lin1d_unstable):
    tr = sample_disturbed_trajectory(lin1d_unstable, [0.5], 10.0, 0.1, seed=0)
    assert tr.truncated
    assert tr.times[-1] < 2.0
    assert abs(tr.final[0]) > 2.2


def test_trajectory_shape_invariants(spiral):
    tr = sample_disturbed_trajectory(spiral, [1.0, 0.1], 3.0, 0.2, seed=11)
    assert tr.times[0] == 0.0
    assert np.all(np.diff(tr.times) > 0)
    assert tr.states.shape == (len(tr.times), 2)
    assert tr.inputs.shape == (len(tr.times) - 1, 2)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5))
def test_disturbance_bound(seed, eps):
    p = get_benchmark("spiral2d").problem
    tr = sample_disturbed_trajectory(p, [0.8, -0.4], 1.0, eps, seed=seed)
    assert np.all(np.linalg.norm(tr.inputs, axis=1) <= eps + 1e-15)
    # every step is an RK4 step of the disturbed field, and its chord
    # derivative lies within eps of f at the midpoint up to O(h^2)
    h = np.diff(tr.times)
    for j in range(len(h)):
        u = tr.inputs[j]
        again = rk4_step(lambda Y: p.f(Y) + u, tr.states[j : j + 1], h[j])[0]
        np.testing.assert_allclose(tr.states[j + 1], again, rtol=0, atol=1e-14)
        chord = (tr.states[j + 1] - tr.states[j]) / h[j]
        mid = p.f(0.5 * (tr.states[j] + tr.states[j + 1]))
        assert np.linalg.norm(chord - mid) <= eps + 1e-3


def test_determinism(spiral):
    a = sample_disturbed_trajectory(spiral, [1.0, 0.0], 2.0, 0.1, seed=42)
    b = sample_disturbed_trajectory(spiral, [1.0, 0.0], 2.0, 0.1, seed=42)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.inputs.tobytes() == b.inputs.tobytes()
    c = sample_disturbed_trajectory(spiral, [1.0, 0.0], 2.0, 0.1, seed=43)
    assert a.states.tobytes() != c.states.tobytes()


def test_batch_freezes_rows_leaving_box(lin1d_unstable):
    b = sample_disturbed_batch(lin1d_unstable, np.array([[0.0], [1.5]]), 3.0, 0.0, np.random.default_rng(0))
    assert list(b.truncated) == [False, True]
    k = b.exit_step[1]
    assert np.all(b.states[k:, 1] == b.states[k, 1])


def test_lipschitz_estimates(lin1d, spiral):
    assert 1.0 <= lipschitz_estimate(lin1d) <= 1.3
    assert 0.0 <= lipschitz_estimate(ZERO) <= 1e-6 * 1.2
    assert 1.118 <= lipschitz_estimate(spiral) <= 1.45


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig("rk4")
    with pytest.raises(ValueError):
        IntegratorConfig(atol=0)
    with pytest.raises(ValueError):
        IntegratorConfig("euler", h=0.1)


def test_trajectory_csv(tmp_path, spiral):
    tr = sample_disturbed_trajectory(spiral, [1.0, 0.0], 0.05, 0.1, seed=1)
    path = tmp_path / "tr.csv"
    tr.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x1,x2"
    assert len(lines) == len(tr.times) + 1
    assert float(lines[-1].split(",")[1]) == tr.final[0]
