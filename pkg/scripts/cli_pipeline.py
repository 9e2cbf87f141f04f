"""End-to-end CLI walk-through on a small synthetic dataset.

Generates data, normalizes faces, trains with cross-validation and renders
the report, all under one output directory.

    python scripts/cli_pipeline.py --out runs/demo
"""
import argparse
import json
from pathlib import Path

from userstate.cli import main as cli

SMALL = {
    "seed": 0,
    "model": "toy",
    "train": {"total_epochs": 6, "folds": 2, "distill_start": 2, "unlabeled_factor": 2, "batch_size": 8},
    "synth": {"labeled": 32, "unlabeled": 64},
}


def run(*argv):
    rc = cli([str(a) for a in argv])
    if rc != 0:
        raise SystemExit(f"`userstate {' '.join(map(str, argv))}` exited with {rc}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/demo")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "config.json"
    cfg.write_text(json.dumps(SMALL, indent=2))
    run("synth", "--config", cfg, "--run-dir", out / "synth")
    run("preprocess", "--config", cfg, "--data", out / "synth" / "data", "--run-dir", out / "prep")
    run("train", "--config", cfg, "--data", out / "prep" / "data", "--run-dir", out / "train")
    run("report", "--report", out / "train" / "report.json", "--run-dir", out / "report")
    print((out / "report" / "report.txt").read_text())


if __name__ == "__main__":
    main()
