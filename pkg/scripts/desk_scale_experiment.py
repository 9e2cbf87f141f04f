"""Run the desk-scale semi-supervised vs supervised comparison and save the result.

    python scripts/desk_scale_experiment.py --seeds 0 1 2 --out desk_scale.json
"""
import argparse
import dataclasses
import json
import logging

from userstate.experiment import DeskScaleConfig, compare


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=DeskScaleConfig.epochs)
    p.add_argument("--unlabeled", type=int, default=DeskScaleConfig.unlabeled)
    p.add_argument("--steps-per-epoch", type=int, default=DeskScaleConfig.steps_per_epoch)
    p.add_argument("--out", default="desk_scale.json")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("userstate.trainer").setLevel(logging.ERROR)
    cfg = dataclasses.replace(DeskScaleConfig(), epochs=args.epochs, unlabeled=args.unlabeled,
                              steps_per_epoch=args.steps_per_epoch)
    out = compare(cfg, seeds=tuple(args.seeds))
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2)
    print(f"supervised {out['supervised']}  semi {out['semi']}  margin {out['margin']:+.3f}  "
          f"{out['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
