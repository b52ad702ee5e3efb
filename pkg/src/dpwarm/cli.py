"""Command line entry point: ``dpwarm <subcommand> ...``."""

import argparse
import sys
from pathlib import Path

from . import bench
from .core import RngStream
from .losses import LOSSES, certify, get_loss


def _cmd_run(args):
    cfg = bench.load_experiment_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    result = bench.run_experiment(cfg)
    for row in result.summary:
        print(f"eps={row['epsilon']:<5g} {row['algorithm']:<10} train={row['mean_train']:.4f}"
              f" (se {row['se_train']:.4f})  test={row['mean_test']:.4f}")
    print(f"wrote {cfg.output_dir}/results.csv, summary.csv, ledger.txt, hyperparams.txt "
          f"({result.runtime:.1f}s)")
    return 0


def _cmd_grid(args):
    cfg = bench.load_experiment_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    chosen = bench.grid_search(cfg)
    print(bench.hyperparams_listing(cfg, chosen))
    return 0


def _cmd_sweep(args):
    scfg = bench.load_sweep_config(args.config)
    if args.output_dir:
        scfg.output_dir = args.output_dir
    reports = bench.sweep_scaling(scfg)
    text = bench.sweep_report_text(reports)
    out = Path(scfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    return 0


def _cmd_certify(args):
    loss = get_loss(args.loss, args.radius)
    rng = RngStream(args.seed)
    conditions = args.condition or ["lipschitz", "smooth"]
    failed = False
    for cond in conditions:
        rep = certify(loss, cond, args.radius, args.samples, rng.substream(len(cond)), d=args.d)
        status = "PASS" if rep.passed else "FAIL"
        consts = ", ".join(f"{k}={v:g}" for k, v in rep.constants.items())
        print(f"{status} {args.loss} {cond} ({consts}) radius={args.radius:g} samples={rep.n_samples} "
              f"worst_residual={rep.worst_residual:.3e}")
        failed |= not rep.passed
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="dpwarm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run-experiment", help="run the epsilon sweep and write CSV reports")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("grid-search", help="select hyperparameters on fresh validation data")
    g.add_argument("--config", required=True)
    g.add_argument("--output-dir")
    g.set_defaults(func=_cmd_grid)

    s = sub.add_parser("sweep", help="gradient norm vs n scaling fit")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(func=_cmd_sweep)

    c = sub.add_parser("certify", help="sample-check Lipschitz/smoothness constants")
    c.add_argument("--loss", required=True, choices=sorted(LOSSES))
    c.add_argument("--radius", type=float, required=True)
    c.add_argument("--samples", type=int, default=10_000)
    c.add_argument("--d", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--condition", action="append", choices=["lipschitz", "smooth", "quasar", "kl"])
    c.set_defaults(func=_cmd_certify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (bench.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
