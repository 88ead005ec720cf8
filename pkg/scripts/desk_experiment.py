"""Train and evaluate desk-preset variants on the synthetic corpus.

    python scripts/desk_experiment.py                      # every variant, runs/<variant>/
    python scripts/desk_experiment.py --variant base --steps 300

The base run is also scored on 4x and 10x concatenated test sequences.
Finished runs with an identical configuration are skipped unless --force.
"""

import argparse
import json
import sys
from pathlib import Path

from wavesplit.experiment import VARIANTS, ExperimentConfig, load_cached, run

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variant", choices=VARIANTS, action="append")
    p.add_argument("--steps", type=int, default=ExperimentConfig.steps)
    p.add_argument("--lr", type=float, default=ExperimentConfig.lr)
    p.add_argument("--out", default=str(ROOT / "runs"))
    p.add_argument("--force", action="store_true")
    args = p.parse_args(argv)
    for variant in args.variant or VARIANTS:
        cfg = ExperimentConfig(variant=variant, steps=args.steps, lr=args.lr)
        out = Path(args.out) / variant
        record = None if args.force else load_cached(cfg, out)
        if record is None:
            factors = (1, 4, 10) if variant == "base" else (1,)
            record = run(cfg, out, factors)
        print(json.dumps({k: record[k] for k in ("variant", "train_seconds", "best_step", "test_dsi_sdr")}),
              flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
