#!/usr/bin/env python3
"""Run every shipped config (or the ones named) and print a one-line digest each."""
import argparse
import json
import sys
from pathlib import Path

from hydot.harness import load_config, run

ROOT = Path(__file__).resolve().parents[1]


def digest(summary: dict) -> str:
    kind = summary["kind"]
    if kind.startswith("exp"):
        parts = []
        for label, r in summary["results"].items():
            errs = max(r["c_err_absolute"]) if kind != "exp1" else 0.0
            parts.append(f"{label}: L2={r['l2']:.3f} Dice={r['dice']:.3f} max c err={errs:.3f}")
        return "; ".join(parts)
    if kind == "solver-bench":
        it = {k: v["iters"] for k, v in summary["solver_bench"].items()}
        return f"iterations by k {it}, k=10 saves {summary.get('iteration_reduction_k10_pct', 0):.1f}%"
    b = summary["compress_bench"]
    return "; ".join(f"Ns={n}: recursive {v['recursive_s']:.3f}s vs direct {v['direct_s']:.3f}s" for n, v in b.items())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("configs", nargs="*", type=Path, help="default: configs/*.ini")
    args = ap.parse_args(argv)
    paths = args.configs or sorted((ROOT / "configs").glob("*.ini"))
    for path in paths:
        files = run(load_config(path))
        summary = json.loads(Path(files["summary.json"]).read_text())
        print(f"{path.name}: {digest(summary)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
