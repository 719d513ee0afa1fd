"""Train an agent from a config file, then evaluate and race it.

The bundled ``configs/desk.cfg`` is the 100k-step CPU profile.  Pass
``--steps`` to shorten the run for a quick look; everything else (buffer,
update cadence, networks) follows the file.

    python demos/04_train_and_evaluate.py --steps 3000 --out demo_out/run

The same pipeline from the command line:

    mmdreamer train --config demos/configs/desk.cfg --seed 0 --out runs/poe
    mmdreamer eval --ckpt runs/poe/final.drck --episodes 30 --horizon 5
    mmdreamer race --ckpt runs/poe/final.drck --episodes 30
    mmdreamer plot runs/poe/losses.csv --out runs/poe/losses.svg --columns wm_loss
"""
import argparse
import logging
from pathlib import Path

from mmdreamer.harness.config import load_config
from mmdreamer.harness.evaluate import RACE_METRICS, race_head_to_head
from mmdreamer.harness.plot import plot_csv
from mmdreamer.harness.train import quartile_means, train

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=HERE / "configs" / "desk.cfg")
    ap.add_argument("--variant", default=None, help="multimodal-poe, multi-rssm-concat or multimodal-map")
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="demo_out/run")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    overrides = {"total_steps": args.steps, "seed": args.seed}
    if args.steps < 5000:
        overrides["prefill_steps"] = args.steps // 2
    if args.variant:
        overrides["model.variant"] = args.variant
    cfg = load_config(args.config).with_overrides(overrides)
    out = Path(args.out)
    manifest = train(cfg, out)

    wm = [row[2] for row in manifest.losses]
    print(f"\nworld-model loss by run quarter: {[round(v, 1) for v in quartile_means(wm)]}")
    print(f"eval mean progress {manifest.eval['mean_progress']:.3f} "
          f"vs random policy {manifest.baseline['mean_progress']:.3f}")
    plot_csv(out / "losses.csv", out / "losses.svg", columns=["wm_loss"], smooth=25)
    plot_csv(out / "episodes.csv", out / "episodes.svg", x="env_steps", columns=["progress"], smooth=10)

    result = race_head_to_head(out / "final.drck", episodes=5)
    print("\nhead-to-head against the waypoint follower:")
    for k in RACE_METRICS:
        v = result.table[k]
        print(f"  {k:26s} {f'{v[0]:.2f} / {v[1]:.2f}' if isinstance(v, tuple) else f'{v:.2f}'}")


if __name__ == "__main__":
    main()
