"""Command-line entry point: ``mmdreamer <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from ..errors import FormatError
from .config import TrainConfig, load_config, profile


def _cmd_train(args) -> int:
    from .train import train

    base = profile(args.profile) if args.profile else TrainConfig()
    cfg = load_config(args.config, base) if args.config else base
    cfg = cfg.with_overrides({"seed": args.seed})
    out = Path(args.out or f"runs/{cfg.model.variant}_seed{args.seed}")
    manifest = train(cfg, out, evaluate=not args.no_eval)
    print(f"wrote {out / 'manifest.json'}")
    if manifest.eval:
        print(f"eval mean progress {manifest.eval['mean_progress']:.4f} "
              f"(random baseline {manifest.baseline['mean_progress']:.4f})")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import evaluate_single, save_report_dir

    report = evaluate_single(args.ckpt, args.track, args.episodes, args.horizon, args.mode, args.seed, args.max_ticks)
    w = csv.writer(sys.stdout)
    w.writerow(report.metrics.FIELDS)
    w.writerow([f"{v:.6f}" for v in report.metrics.as_dict().values()])
    if args.out:
        save_report_dir(report, args.out)
    return 0


def _cmd_race(args) -> int:
    from .evaluate import RACE_METRICS, race_head_to_head, write_race_episodes, write_race_table

    result = race_head_to_head(args.ckpt, args.track, args.episodes, args.seed, args.max_ticks)
    w = csv.writer(sys.stdout)
    w.writerow(("metric", "value"))
    for k in RACE_METRICS:
        v = result.table[k]
        w.writerow((k, f"{v[0]:.3f} / {v[1]:.3f}" if isinstance(v, tuple) else f"{v:.3f}"))
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        write_race_table(result, d / "race_table.csv")
        write_race_episodes(result, d / "race_episodes.csv")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    cases = run_suite(args.seed)
    w = csv.writer(sys.stdout)
    w.writerow(("case", "max_rel_error", "status"))
    for c in cases:
        w.writerow((c.name, f"{c.error:.3e}", "PASS" if c.ok else "FAIL"))
    bad = [c for c in cases if not c.ok]
    print(f"{len(cases) - len(bad)}/{len(cases)} within {TOLERANCE:g}", file=sys.stderr)
    return 1 if bad else 0


def _cmd_export(args) -> int:
    from .export import export_latents

    rows = export_latents(args.ckpt, args.out, args.episodes, track=args.track, seed=args.seed,
                          max_ticks=args.max_ticks)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_select_best(args) -> int:
    from .train import RunManifest

    scored = []
    for path in args.manifests:
        m = RunManifest.load(path)
        if not m.eval:
            raise FormatError(f"{path} has no evaluation results")
        scored.append((m.eval["mean_progress"], m.seed, str(path)))
    w = csv.writer(sys.stdout)
    w.writerow(("manifest", "seed", "mean_progress", "best"))
    best = max(scored, key=lambda s: s[0])
    for prog, seed, path in scored:
        w.writerow((path, seed, f"{prog:.6f}", int((prog, seed, path) == best)))
    return 0


def _cmd_plot(args) -> int:
    from .plot import plot_csv

    out = plot_csv(args.csv, args.out, x=args.x, columns=args.columns, smooth=args.smooth)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmdreamer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--profile", choices=("full", "desk", "smoke"), help="base settings before --config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.add_argument("--no-eval", action="store_true")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="single-agent evaluation from the start pose")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--track")
    e.add_argument("--episodes", type=int, default=30)
    e.add_argument("--horizon", type=int, default=5)
    e.add_argument("--mode")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-ticks", type=int, default=4000)
    e.add_argument("--out")
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("race", help="head-to-head races against the waypoint follower")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--track")
    r.add_argument("--episodes", type=int, default=30)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--max-ticks", type=int, default=4000)
    r.add_argument("--out")
    r.set_defaults(func=_cmd_race)

    g = sub.add_parser("gradcheck", help="finite-difference suite over ops and the toy ELBO")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gradcheck)

    x = sub.add_parser("export-latents", help="posterior means per step as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--episodes", type=int, default=3)
    x.add_argument("--track")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--max-ticks", type=int, default=2000)
    x.set_defaults(func=_cmd_export)

    s = sub.add_parser("select-best", help="pick the run with the highest eval mean progress")
    s.add_argument("manifests", nargs="+")
    s.set_defaults(func=_cmd_select_best)

    pl = sub.add_parser("plot", help="plot CSV columns to SVG")
    pl.add_argument("csv")
    pl.add_argument("--out", required=True)
    pl.add_argument("--x")
    pl.add_argument("--columns", nargs="*")
    pl.add_argument("--smooth", type=int, default=1)
    pl.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
