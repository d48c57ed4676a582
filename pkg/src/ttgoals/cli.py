"""Command-line interface.

Subcommands: bootstrap (demo generation), train (full run), eval (checkpoint
metrics), ablate (demo-count study), plot (learning curves). Runs are batch;
the TTGOALS_SEED environment variable overrides configured seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttgoals")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bootstrap", help="generate the initial demonstration dataset")
    p.add_argument("--config", default=None, help="run config JSON file")
    p.add_argument("--out", required=True, help="output demos JSONL path")
    p.add_argument("--n", type=int, required=True, help="number of demonstrations")
    p.add_argument("--source", choices=("scripted", "es"), default="scripted")
    p.add_argument("--delta-b", type=float, default=0.25,
                   help="joint perturbation amplitude for landing diversity")

    p = sub.add_parser("train", help="run the iterative imitation training loop")
    p.add_argument("--config", default=None)
    p.add_argument("--demos", default=None, help="demos JSONL (ignored in gcsl mode)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--mode", choices=("goalseye", "lfp", "gcsl"), default="goalseye")
    p.add_argument("--ensemble", type=int, default=1, help="number of models sharing the cache")

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--goals", choices=("five", "uniform"), default="uniform")
    p.add_argument("--n", type=int, default=None,
                   help="episodes per goal (five) or number of sampled goals (uniform)")
    p.add_argument("--out", required=True, help="metrics JSON output path")

    p = sub.add_parser("ablate", help="demonstration-count ablation study")
    p.add_argument("--config", default=None)
    p.add_argument("--demo-counts", required=True,
                   help="comma-separated demo counts, e.g. 0,10,100,1000")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")

    p = sub.add_parser("plot", help="emit learning curves for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None, help="output SVG path (default: RUNDIR/curves.svg)")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .config import load_config

    if args.command == "bootstrap":
        from . import bootstrap as bs, plots

        cfg = load_config(args.config)
        if args.source == "es":
            source = _es_source(cfg)
        else:
            source = "scripted"
        cache, summary = bs.generate_bootstrap(
            source, args.n, cfg, seed=cfg.train.seed, out_path=args.out,
            delta_b=args.delta_b,
        )
        out = Path(args.out)
        _write_scatter(summary, cfg, out)
        print(
            f"wrote {len(cache)} demos to {args.out} "
            f"({summary.attempts} attempts, {summary.hits} hits, "
            f"grid occupancy {summary.grid_occupancy:.2f})"
        )
        return 0

    if args.command == "train":
        from . import ssp

        cfg = load_config(args.config)
        demos = None
        if args.mode != "gcsl":
            if args.demos is None:
                raise SystemExit("train: --demos is required unless --mode gcsl")
            demos = ssp.load_demos_file(args.demos)
        run_dir = ssp.run_training(
            cfg, demos=demos, out_dir=args.out, mode=args.mode, ensemble_n=args.ensemble
        )
        print(f"run complete: {run_dir}")
        return 0

    if args.command == "eval":
        from . import evaluation

        cfg = load_config(args.config)
        settings = cfg.eval
        settings = replace(settings, goals=args.goals)
        if args.n is not None:
            settings = replace(settings, episodes_per_goal=args.n)
        result = evaluation.evaluate(args.checkpoint, cfg, settings)
        payload = evaluation.result_to_jsonable(result)
        Path(args.out).write_text(json.dumps(payload, indent=1))
        agg = result.aggregate
        pcts = " ".join(f"<={t:g}m: {p:.1f}%" for t, p in agg.pct_within.items())
        dist = f"{agg.mean_dist:.3f} m" if agg.mean_dist is not None else "n/a"
        print(f"{agg.n_attempts} attempts, {agg.n_landed} landed, mean dist {dist}, {pcts}")
        return 0

    if args.command == "ablate":
        from . import evaluation

        cfg = load_config(args.config)
        counts = [int(c) for c in args.demo_counts.split(",") if c != ""]
        seeds = [int(s) for s in args.seeds.split(",") if s != ""]
        report = evaluation.ablate_demos(cfg, counts, args.out, seeds=seeds)
        print(json.dumps(report["median_efficiency"], indent=1))
        return 0

    if args.command == "plot":
        from .plots import emit_learning_curve

        csv_path, svg_path = emit_learning_curve(args.run, out_svg=args.out)
        print(f"wrote {csv_path} and {svg_path}")
        return 0

    raise SystemExit(f"unknown command {args.command!r}")


def _es_source(cfg):
    """Train a small ES policy to serve as the demo source."""
    import numpy as np

    from . import bootstrap as bs
    from .policy import ARCH_LSTM, init_params

    J = cfg.chain.joint_count
    input_dim = 3 + (3 if cfg.episode.include_ball_vel else 0) + J + 2
    rng = np.random.default_rng([cfg.train.seed, 0xE5])
    template = init_params(ARCH_LSTM, input_dim, 16, J, rng)
    fitness = bs.es_policy_fitness(template, cfg, bs.FitnessSpec(), episodes=3,
                                   seed=cfg.train.seed)
    es_cfg = bs.EsConfig(population=8, sigma=0.05, alpha=0.02, iterations=40)
    best = bs.es_train(fitness, template.flatten(), es_cfg, rng)
    return template.with_flat(best)


def _write_scatter(summary, cfg, out: Path) -> None:
    import csv as _csv

    from .plots import emit_landing_scatter

    scatter_csv = out.with_suffix(".landings.csv")
    with open(scatter_csv, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in summary.landings:
            w.writerow([repr(x), repr(y)])
    emit_landing_scatter(summary.landings, cfg.geom, out.with_suffix(".landings.svg"))


if __name__ == "__main__":
    sys.exit(main())
