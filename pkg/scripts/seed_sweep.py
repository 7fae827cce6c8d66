#!/usr/bin/env python3
"""Repeat a reconstruction config over several noise seeds and tabulate the spread.

Used to check that a pinned-seed result is typical rather than lucky:
prints L2, Dice and the largest concentration error per seed and per
operator variant.
"""
import argparse
import dataclasses
import json
import sys
import tempfile
from pathlib import Path

from hydot.harness import load_config, run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(2, 10)))
    args = ap.parse_args(argv)
    base = load_config(args.config)
    if not base.run.kind.startswith("exp"):
        ap.error("seed sweeps apply to exp1, exp2 and exp3 configs")
    print("seed,label,l2,dice,max_c_err_abs,stop_reason")
    with tempfile.TemporaryDirectory() as tmp:
        for seed in args.seeds:
            cfg = dataclasses.replace(
                base,
                run=dataclasses.replace(base.run, outdir=str(Path(tmp) / str(seed)), log_level="WARNING"),
                seeds=dataclasses.replace(base.seeds, noise=seed),
            )
            summary = json.loads(Path(run(cfg)["summary.json"]).read_text())
            for label, r in summary["results"].items():
                print(f"{seed},{label},{r['l2']:.4f},{r['dice']:.4f},{max(r['c_err_absolute']):.4f},{r['reason']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
