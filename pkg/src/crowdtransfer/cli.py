"""Command-line entry point: ``crowdtransfer {gen,run,ablate,report}``."""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

from . import io
from .config import METHODS, ExperimentConfig, load_config
from .crowdsim import ConfigError, DataError, simulate
from .distill import PipelineError
from .graphtransfer import NumericalError
from .pipeline import SWEEP_PARAMS, run_ablation, run_pipeline, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PIPELINE = 0, 2, 3, 4


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "method", None):
        overrides["method"] = args.method
    return cfg.replace(**overrides) if overrides else cfg


def cmd_gen(args):
    cfg = _config(args)
    d, nz = cfg.data, cfg.noise
    crowd, pool = simulate(d.n, d.d, d.C, d.class_sep, nz.R, nz.G, nz.rho, nz.rho_max,
                           nz.mean_annotations, cfg.seed)
    path = os.path.join(args.out, cfg.config_hash(), "data", f"seed_{cfg.seed}")
    os.makedirs(path, exist_ok=True)
    h = cfg.config_hash()
    io.save_instances_csv(crowd.base, os.path.join(path, "instances.csv"), h)
    io.save_annotations_csv(crowd, os.path.join(path, "annotations.csv"), h)
    io.save_pool_json(pool, os.path.join(path, "pool.json"), h)
    print(path)
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    result = run_pipeline(cfg, args.out, dry_run=args.dry_run)
    print(json.dumps(result, sort_keys=True, indent=2))
    return EXIT_OK


def _sweep_values(param, raw):
    if param == "method":
        return raw
    cast = int if param in ("G", "k") else float
    try:
        return [cast(v) for v in raw]
    except ValueError as exc:
        raise ConfigError(f"bad value for sweep {param!r}: {exc}") from None


def cmd_ablate(args):
    cfg = _config(args)
    sweep = None
    if args.sweep:
        if not args.values:
            raise ConfigError("--sweep needs --values")
        sweep = (args.sweep, _sweep_values(args.sweep, args.values))
    result = run_ablation(cfg, args.seeds, args.methods, sweep, args.workers)
    path = os.path.join(args.out, cfg.config_hash())
    os.makedirs(path, exist_ok=True)
    name = f"sweep_{args.sweep}" if args.sweep else "sweep"
    write_csv(result["rows"], os.path.join(path, f"{name}.csv"))
    write_csv(result["summary"], os.path.join(path, f"{name}_summary.csv"))
    print(format_summary(result["summary"]))
    return EXIT_OK


def format_summary(summary):
    lines = [f"{'value':>8} {'method':<12} {'accuracy':>18} {'transition err':>18}"]
    for e in summary:
        acc = f"{e['test_accuracy_mean']:.4f} ± {e['test_accuracy_std']:.4f}"
        te = "-"
        if e["transition_error_mean"] is not None:
            te = f"{e['transition_error_mean']:.4f} ± {e['transition_error_std']:.4f}"
        lines.append(f"{str(e['value']):>8} {e['method']:<12} {acc:>18} {te:>18}")
    return "\n".join(lines)


def cmd_report(args):
    files = sorted(glob.glob(os.path.join(args.out, "*", "*", "seed_*", "metrics.json")))
    if not files:
        raise DataError(f"no metrics.json files under {args.out}")
    print(f"{'config':<14}{'seed':>6}  {'method':<12}{'accuracy':>10}{'trans err':>11}")
    for f in files:
        with open(f, encoding="utf-8") as fh:
            m = json.load(fh)
        expected = os.path.basename(os.path.dirname(os.path.dirname(os.path.dirname(f))))
        if m.get("config_hash") != expected:
            raise DataError(f"{f}: config hash {m.get('config_hash')!r} does not match directory {expected!r}")
        te = m.get("transition_error")
        te_s = f"{te:.4f}" if te is not None else "-"
        print(f"{m['config_hash']:<14}{m['seed']:>6}  {m['method']:<12}{m['test_accuracy']:>10.4f}{te_s:>11}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="crowdtransfer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, method=True):
        sp.add_argument("--config", help="JSON config file (defaults are used when omitted)")
        sp.add_argument("--out", default="out", help="output root directory")
        if method:
            sp.add_argument("--method", choices=METHODS)

    sp = sub.add_parser("gen", help="simulate a crowd and write it to disk")
    common(sp, method=False)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("run", help="run one method end to end")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dry-run", action="store_true", help="print the stage plan without training")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ablate", help="compare methods over several seeds")
    common(sp, method=False)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--methods", nargs="+", choices=METHODS, default=["taidtm", "taidtm_ft", "global_only"])
    sp.add_argument("--sweep", choices=["method", *SWEEP_PARAMS], help="parameter to sweep")
    sp.add_argument("--values", nargs="+", help="sweep values")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="tabulate metrics.json files under --out")
    sp.add_argument("--out", default="out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PipelineError, NumericalError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
