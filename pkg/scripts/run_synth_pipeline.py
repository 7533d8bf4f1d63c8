"""Run the desk pipeline on a synthetic region and print the probe table.

    python scripts/run_synth_pipeline.py --out runs/synth --seeds 0 1 2
"""

import argparse
import logging
from pathlib import Path

from mobalign import probe
from mobalign.pipeline import load_config, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON config (defaults to the desk preset)")
    ap.add_argument("--out", default="runs/synth")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--distill", action="store_true")
    ap.add_argument("--deterministic", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config)
    for seed in args.seeds:
        res = run_pipeline(base.with_seed(seed), Path(args.out) / f"seed{seed}",
                           deterministic=args.deterministic, with_distill=args.distill)
        print(f"# seed {seed}  stages: " + "  ".join(f"{k} {v:.1f}s" for k, v in res.manifest.stage_seconds.items()))
        print(probe.format_report(res.reports), end="")
        if res.surrogate is not None:
            print(f"# distillation final mse {res.surrogate.final_loss:.5f}")


if __name__ == "__main__":
    main()
