#!/usr/bin/env python3
"""Calibrate acceptance thresholds for the end-loss ranking experiment.

Runs the locked comparison protocol once and records the measured
margins plus derived thresholds (half the margin, floored at zero) in
a JSON file the acceptance test reads back.  Exit status is 0 only if
both orderings held (every margin positive).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from glq.experiments import (
    MARGIN_KEYS,
    PROTOCOL,
    end_loss_comparison,
    thresholds_from_margins,
)

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "results" / "pilot_thresholds.json"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=len(PROTOCOL["seeds"]),
                    help="number of seeds (0..n-1)")
    ap.add_argument("--bits", type=int, default=PROTOCOL["bits"])
    ap.add_argument("--g", type=int, default=PROTOCOL["g"])
    ap.add_argument("--steps", type=int, default=PROTOCOL["steps"])
    ap.add_argument("--task", default=PROTOCOL["task"])
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args(argv)

    result = end_loss_comparison(
        seeds=range(args.seeds), bits=args.bits, g=args.g,
        task=args.task, steps=args.steps,
    )
    record = {
        "protocol": result["protocol"],
        "means": result["means"],
        "margins": result["margins"],
        "thresholds": thresholds_from_margins(result["margins"]),
        "runtime_s": round(result["runtime_s"], 2),
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")

    print(f"pilot protocol: {record['protocol']}")
    for m, v in record["means"].items():
        print(f"  mean end loss {m:12s} {v:10.4f}")
    ok = True
    for k in MARGIN_KEYS:
        margin = record["margins"][k]
        held = margin > 0.0
        ok = ok and held
        status = "holds" if held else "VIOLATED"
        print(f"  ordering {k:22s} margin {margin:+9.4f}  threshold "
              f"{record['thresholds'][k]:.4f}  ({status})")
    print(f"  runtime {record['runtime_s']:.1f} s")
    print(f"wrote {args.out}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
