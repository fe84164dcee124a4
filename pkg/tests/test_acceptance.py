"""The nine acceptance criteria, one test each.

Every test records a PASS/FAIL line with its measured value; the lines are
printed in the terminal summary (see conftest.py) and the test then asserts.
"""

import json
import time

import numpy as np
import pytest

from robustcert.benchmarks import get_benchmark
from robustcert.certificate import sample_in_cells
from robustcert.cli import main
from robustcert.exit_time import build_band_field
from robustcert.flow import DomainExitError, flow_durations, integrate_flow, lipschitz_estimate, sample_disturbed_batch
from robustcert.grid import ReachParams, rasterize, reach_interval


@pytest.fixture
def record(acceptance_results):
    def rec(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        acceptance_results[number] = line
        print(line)
        assert ok, line

    return rec


def cli(tmp_path, out, *args):
    d = tmp_path / out
    code = main([*args, "--out", str(d)])
    return code, d


def test_1_flow_oracle(record):
    rng = np.random.default_rng(1)
    worst, pairs = 0.0, 0
    start = time.perf_counter()
    for name in ("lin1d-stable", "spiral2d"):
        b = get_benchmark(name)
        p = b.problem
        done = 0
        while done < 200:
            x = rng.uniform(p.lo, p.hi)
            t = rng.uniform(-3, 3)
            # keep pairs whose exact trajectory stays in the box
            path = np.stack([b.flow(x, s) for s in np.linspace(0, t, 64)])
            if not p.in_box(path).all():
                continue
            try:
                got = integrate_flow(p, x, t)
            except DomainExitError:
                continue
            worst = max(worst, float(np.max(np.abs(got - b.flow(x, t)))))
            done += 1
        pairs += done
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-6 and elapsed < 5, f"{pairs} pairs, max error {worst:.2e} (<= 1e-6), {elapsed:.2f} s (< 5 s)")


def test_2_reach_soundness(record):
    start = time.perf_counter()
    outside = {}
    for name, shape in (("lin1d-stable", (512,)), ("spiral2d", (256, 256))):
        p = get_benchmark(name).problem
        rng = np.random.default_rng(2)
        I = rasterize(p, p.init, shape)
        R = reach_interval(I, p, ReachParams(0.1, 0.5 / 8, lipschitz_estimate(p)), 5.0)
        b = sample_disturbed_batch(p, sample_in_cells(I, 10_000, rng), 5.0, 0.1, rng)
        outside[name] = int((~R.contains(b.states.reshape(-1, p.dim))).sum())
    elapsed = time.perf_counter() - start
    ok = all(v == 0 for v in outside.values()) and elapsed < 120
    record(2, ok, f"states outside reach grid {outside} with 10^4 trajectories each, {elapsed:.1f} s (< 120 s)")


def test_3_certify_pipeline(tmp_path, record):
    code, d = cli(tmp_path, "c", "certify", "--bench", "lin1d-stable", "--eps", "0.1", "--delta", "0.5",
                  "--trials", "10000")
    r = json.loads((d / "certificate.json").read_text())
    v = r.get("validation") or {}
    ok = (code == 0 and r["status"] == "found" and r["t_found"] <= 2.0 and r["verdicts"] is not None
          and all(r["verdicts"].values()) and v.get("trials") == 10_000 and v.get("sample_violations") == 0)
    record(3, ok, f"exit {code}, status {r['status']}, t_found {r['t_found']}, verdicts {r['verdicts']}, "
                  f"{v.get('sample_violations')} escapes in {v.get('trials')} trials")


def test_4_unsafe_detection(tmp_path, record):
    code, d = cli(tmp_path, "u", "certify", "--bench", "lin1d-unstable")
    r = json.loads((d / "certificate.json").read_text())
    w = r.get("witness") or {}
    p = get_benchmark("lin1d-unstable").problem
    rows = (d / r["witness_csv_path"]).read_text().splitlines() if r.get("witness_csv_path") else []
    final = [float(v) for v in rows[-1].split(",")[1:]] if rows else None
    ok = (code == 1 and r["status"] == "unsafe-suspect" and w.get("final_unsafe") is True
          and final is not None and bool(p.unsafe(np.array([final]))[0]))
    record(4, ok, f"exit {code}, status {r['status']}, witness final state {final} unsafe={w.get('final_unsafe')}")


@pytest.fixture(scope="module")
def lin1d_band(lin1d, lin1d_cert):
    return build_band_field(lin1d, lin1d_cert.V, k=8)


def band_sample(F, m, rng):
    C = F.band_centers()
    X = C[rng.integers(0, len(C), 4 * m)] + (rng.random((4 * m, C.shape[1])) - 0.5) * F.V.cell
    return X[~np.isnan(F(X, strict=True))]


def test_5_cocycle(lin1d, lin1d_band, record):
    rng = np.random.default_rng(5)
    X = band_sample(lin1d_band, 100, rng)
    s = rng.uniform(-0.2, 0.2, len(X))
    Y = flow_durations(lin1d, X, s)
    a, b = lin1d_band(X, strict=True), lin1d_band(Y, strict=True)
    ok_rows = np.nonzero(~np.isnan(b))[0][:100]
    err = float(np.max(np.abs(b[ok_rows] - a[ok_rows] - s[ok_rows])))
    record(5, len(ok_rows) == 100 and err <= 1e-3, f"{len(ok_rows)} pairs, max |nu(phi(x,s)) - nu(x) - s| = {err:.2e} (<= 1e-3)")


def test_6_lie_of_nu(lin1d, spiral, lin1d_band, spiral_cert, record):
    h = 1e-2
    parts, ok = [], True
    fields = {
        "lin1d-stable": (lin1d, lin1d_band),
        "spiral2d": (spiral, build_band_field(spiral, spiral_cert.V, k=8, refine=4)),
    }
    for name, (p, F) in fields.items():
        rng = np.random.default_rng(6)
        X = band_sample(F, 100, rng)
        d = (F(flow_durations(p, X, np.full(len(X), h)), strict=True) - F(X, strict=True)) / h
        d = d[~np.isnan(d)][:100]
        ok &= len(d) == 100 and bool(np.all((d >= 0.95) & (d <= 1.05)))
        parts.append(f"{name} {len(d)} points in [{d.min():.4f}, {d.max():.4f}]")
    record(6, ok, "; ".join(parts) + " (within [0.95, 1.05])")


def test_7_synthesize(tmp_path, record):
    parts, ok = [], True
    for name in ("lin1d-stable", "spiral2d"):
        start = time.perf_counter()
        code, d = cli(tmp_path, name, "synthesize", "--bench", name)
        elapsed = time.perf_counter() - start
        r = json.loads((d / "synthesis.json").read_text())
        m = r.get("mollify", {})
        b = r.get("barrier", {})
        good = (code == 0 and b.get("pass") and b.get("eps_b", 0) > 0
                and m.get("sup_error", 1) < m.get("sup_error_bound", 0)
                and m.get("min_lie", 0) > m.get("min_lie_bound", 1) and elapsed < 300)
        ok &= bool(good)
        parts.append(f"{name} exit {code}, eps_b {b.get('eps_b', 0):.4f}, sup err {m.get('sup_error', float('nan')):.2e} "
                     f"< {m.get('sup_error_bound', float('nan')):.4f}, min Lie {m.get('min_lie', float('nan')):.4f} "
                     f"> {m.get('min_lie_bound', float('nan')):.4f}, {elapsed:.1f} s")
    record(7, ok, "; ".join(parts))


def test_8_check_barrier(tmp_path, record):
    code_a, d = cli(tmp_path, "a", "check-barrier", "--bench", "lin1d-stable", "--barrier", "1 - x1^2")
    c = json.loads((d / "check_barrier.json").read_text())["conditions"]
    m1, m2 = c["init_positive"]["margin"], c["lie_positive_on_zero_set"]["margin"]
    code_b, d = cli(tmp_path, "b", "check-barrier", "--bench", "lin1d-stable", "--barrier", "x1")
    c3 = json.loads((d / "check_barrier.json").read_text())["conditions"]["unsafe_negative"]
    p = get_benchmark("lin1d-stable").problem
    point = c3["worst_point"]
    ok = (code_a == 0 and abs(m1 - 0.75) <= 0.01 and abs(m2 - 2.0) <= 0.05 and code_b == 1 and not c3["pass"]
          and bool(p.unsafe(np.array([point]))[0]) and point[0] > 0)
    record(8, ok, f"'1 - x1^2' exit {code_a}, condition-1 margin {m1:.4f}, condition-2 margin {m2:.4f}; "
                  f"'x1' exit {code_b}, condition 3 fails at {point} with beta = {point[0]:.4f} >= 0")


def test_9_determinism(tmp_path, record):
    runs = {
        "reach": (["reach", "--bench", "lin1d-stable"], "reach.json"),
        "certify": (["certify", "--bench", "lin1d-unstable", "--seed", "4"], "certificate.json"),
        "synthesize": (["synthesize", "--bench", "spiral2d"], "synthesis.json"),
        "check-barrier": (["check-barrier", "--bench", "lin1d-stable", "--barrier", "1 - x1^2"], "check_barrier.json"),
        "bench": (["bench"], "bench.json"),
    }
    same = {}
    for cmd, (args, name) in runs.items():
        a = cli(tmp_path, f"{cmd}-1", *args)[1] / name
        b = cli(tmp_path, f"{cmd}-2", *args)[1] / name
        same[cmd] = a.read_bytes() == b.read_bytes()
    record(9, all(same.values()), "byte-identical JSON across two runs: " + ", ".join(f"{k}={v}" for k, v in same.items()))
