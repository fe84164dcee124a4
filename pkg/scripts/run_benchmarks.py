"""Run the full pipeline on every built-in benchmark and print one line each.

    python3 scripts/run_benchmarks.py [--eps 0.1] [--json out.json]
"""

import argparse
import json
import time

from robustcert.benchmarks import list_benchmarks
from robustcert.certificate import CertificateResult
from robustcert.pipeline import StageError, SynthesisConfig, synthesize


def run(eps: float, seed: int) -> dict:
    rows = {}
    for b in list_benchmarks():
        start = time.perf_counter()
        row = {"expected": "safe" if b.safe else "unsafe"}
        try:
            s = synthesize(b.problem, SynthesisConfig(eps=eps, seed=seed))
        except StageError as e:
            row.update(status="found", stage=e.stage, error=e.detail)
        else:
            if isinstance(s, CertificateResult):
                row.update(status=s.status, reason=s.reason)
            else:
                row.update(status="found", t_found=s.certificate.t_found, clamp=s.clamp,
                           eps_b=s.report.eps_b, barrier_pass=s.report.passed,
                           sup_error=s.smooth.sup_error, min_lie=s.smooth.min_lie)
        row["seconds"] = round(time.perf_counter() - start, 2)
        rows[b.name] = row
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--eps", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", metavar="PATH", help="also write the rows as JSON")
    args = ap.parse_args()
    rows = run(args.eps, args.seed)
    for name, r in rows.items():
        extra = ""
        if "eps_b" in r:
            extra = f" clamp={r['clamp']:.4f} eps_b={r['eps_b']:.4f} barrier_pass={r['barrier_pass']}"
        elif "stage" in r:
            extra = f" failed at {r['stage']}"
        print(f"{name:16s} expected={r['expected']:7s} status={r['status']:15s}{extra} ({r['seconds']} s)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
