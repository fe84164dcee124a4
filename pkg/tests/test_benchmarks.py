import numpy as np
import pytest
from scipy.integrate import solve_ivp

from robustcert.barrier import AnalyticBarrier, validate_barrier
from robustcert.benchmarks import get_benchmark, list_benchmarks
from robustcert.certificate import UNSAFE_SUSPECT, search_certificate
from robustcert.dsl import parse_expression, parse_problem
from robustcert.pipeline import SynthesisConfig, synthesize_from_certificate


def test_catalogue():
    names = [b.name for b in list_benchmarks()]
    assert {"lin1d-stable", "lin1d-unstable", "spiral2d"} <= set(names)
    with pytest.raises(KeyError):
        get_benchmark("nope")


@pytest.mark.parametrize("b", list_benchmarks(), ids=lambda b: b.name)
def test_problem_text_parses(b):
    p = parse_problem(b.text)
    assert p.dim == b.matrix.shape[0]
    X = np.random.default_rng(0).uniform(-1, 1, (20, p.dim))
    np.testing.assert_allclose(p.f(X), X @ b.matrix.T, atol=1e-15)


def test_lin1d_flow_oracle():
    b = get_benchmark("lin1d-stable")
    for x, t in [(1.0, 0.5), (-0.3, 2.0), (2.0, -0.1)]:
        assert b.flow(np.array([x]), t)[0] == pytest.approx(x * np.exp(-t), rel=1e-14)


@pytest.mark.parametrize("name", ["lin1d-stable", "lin1d-unstable", "spiral2d"])
def test_flow_oracle_against_reference_solver(name):
    # independent check of the matrix-exponential oracle with a generic ODE solver
    b = get_benchmark(name)
    x0 = np.linspace(0.3, -0.4, b.matrix.shape[0])
    sol = solve_ivp(lambda t, x: b.matrix @ x, (0, 1.5), x0, rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(b.flow(x0, 1.5), sol.y[:, -1], atol=1e-9)


def test_spiral_sets():
    p = get_benchmark("spiral2d").problem
    assert p.init(np.array([[1.0, 0.0], [1.2, 0.0], [1.21, 0.0]])).tolist() == [True, True, False]
    assert p.unsafe(np.array([[3.0, 0.0], [2.9, 0.0]])).tolist() == [True, False]


def test_analytic_barrier_passes():
    b = get_benchmark("lin1d-stable")
    rep = validate_barrier(AnalyticBarrier(parse_expression(b.barrier, 1), 1), b.problem)
    assert rep.passed


def test_unsafe_benchmark_has_confirmed_witness():
    p = get_benchmark("lin1d-unstable").problem
    res = search_certificate(p, 0.1, 0.5, 20.0, (512,))
    assert res.status == UNSAFE_SUSPECT
    assert p.unsafe(res.witness.final[None, :])[0]


@pytest.mark.parametrize("b", [b for b in list_benchmarks() if b.safe], ids=lambda b: b.name)
def test_safe_benchmarks_complete_the_pipeline(b, request):
    fixture = {"lin1d-stable": "lin1d_cert", "spiral2d": "spiral_cert"}.get(b.name)
    if fixture is None:
        pytest.skip("no cached certificate fixture")
    cert = request.getfixturevalue(fixture)
    s = synthesize_from_certificate(b.problem, cert.V, SynthesisConfig(), cert)
    assert s.report.passed and s.report.eps_b > 0
