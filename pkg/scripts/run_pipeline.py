"""End-to-end run: full detector, POD reduction, fine-tuning, evaluation.

    python3 scripts/run_pipeline.py [--config cfg.json] [--out runs/default]
"""

import argparse
import json
import logging
from pathlib import Path

from poddet.config import Config
from poddet.models import save_model
from poddet.train import run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/default")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    res = run_pipeline(cfg, log_every=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(res.full, out / "full.pdm")
    save_model(res.reduced, out / "reduced.pdm")
    (out / "report.json").write_text(json.dumps(res.report.to_dict(), indent=2, sort_keys=True))
    (out / "history.json").write_text(json.dumps({"full": res.hist_full, "reduced": res.hist_reduced}, indent=2))
    print(json.dumps({k: v for k, v in res.report.to_dict().items() if k != "config"}, indent=2))


if __name__ == "__main__":
    main()
