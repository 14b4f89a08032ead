"""Command-line entry point: ``pinn-bc {run,study,oracle,sweep,export}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from .errors import ConfigurationError, NumericalFailure
from .harness import (
    PRESETS,
    ExperimentConfig,
    build_problem,
    convergence_study,
    export,
    least_squares_oracle,
    load_records,
    preset,
    run_experiment,
    sweep,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# command-line flag -> config key
_OVERRIDES = {
    "seed": "seeds",
    "levels": "levels",
    "method": "method",
    "lam": "lam",
    "m": "m",
    "gamma": "gamma",
    "model": "model",
    "problem": "problem",
    "domain": "domain",
}


def _levels(text):
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be integers, got {text!r}")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with ExperimentConfig keys (plus optional 'preset' and 'grid')")
    common.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    common.add_argument("--seed", type=int, nargs="+", help="one or more seeds (best run is kept)")
    common.add_argument("--out-dir", default=None, help="directory for JSON/CSV/plot-data output")
    common.add_argument("--levels", type=_levels, help="mesh levels, e.g. '1,2,3,4'")
    common.add_argument("--method", choices=["ma", "mb", "mc", "md"])
    common.add_argument("--lambda", dest="lam", type=float, help="penalty weight for ma")
    common.add_argument("--m", type=int, choices=[1, 2], help="normalization order for mb")
    common.add_argument("--gamma", type=float, help="Nitsche stabilization for md")
    common.add_argument("--model", choices=["pinn", "vpinn"])
    common.add_argument("--problem")
    common.add_argument("--domain")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pinn-bc", description="Boundary-condition studies for (V)PINNs.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train at the last configured level")
    s = sub.add_parser("study", parents=[common], help="convergence study over mesh levels")
    s.add_argument("--mode", choices=["oracle", "train"], default="oracle")
    sub.add_parser("oracle", parents=[common], help="least-squares oracle at each configured level")
    w = sub.add_parser("sweep", parents=[common], help="grid sweep (grid given in the config file)")
    w.add_argument("--workers", type=int, default=1)
    e = sub.add_parser("export", parents=[common], help="re-export saved records")
    e.add_argument("records", help="records.json written by an earlier command")
    return p


def _load_yaml(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a mapping")
    return data


def build_config(args):
    """Merge preset, config file and command-line flags (later wins); returns (config, grid)."""
    data = _load_yaml(args.config) if args.config else {}
    grid = data.pop("grid", None)
    name = args.preset or data.pop("preset", None)
    data.pop("preset", None)
    base = dict(PRESETS[name]) if name else {}
    if name and name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}")
    base.update(data)
    for flag, key in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    cfg = ExperimentConfig.from_dict(base) if base or not name else preset(name)
    return cfg.validate(), grid


def _emit(obj):
    print(json.dumps(obj, indent=1, default=str))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "export":
            recs = load_records(args.records)
            files = export(recs, args.out_dir or ".")
            _emit({"written": files})
            return EXIT_OK
        cfg, grid = build_config(args)
        if args.command == "run":
            rec = run_experiment(cfg, out_dir=args.out_dir)
            _emit({k: v for k, v in rec.to_dict().items() if k not in ("train", "extra", "config")})
            if rec.status != "ok":
                return EXIT_NUMERIC
        elif args.command == "study":
            rec = convergence_study(cfg, mode=args.mode, out_dir=args.out_dir)
            _emit({"config_hash": rec.config_hash, "rate": rec.rate, "noisy": rec.noisy,
                   "level_errors": rec.level_errors})
        elif args.command == "oracle":
            spec = build_problem(cfg)
            rows = []
            for level in cfg.levels:
                sol = least_squares_oracle(spec, cfg.bc_method(), level, cfg.k_int, cfg.k_test, cfg.q)
                rows.append({"level": level, "h": sol.pair.coarse.meshsize, "h1_error": sol.error,
                             "relative_error": sol.relative_error, "residual_norm": sol.residual_norm})
            _emit({"config_hash": cfg.hash(), "levels": rows})
        elif args.command == "sweep":
            if not grid:
                raise ConfigurationError("sweep needs a 'grid' mapping in the config file")
            recs = sweep(cfg, grid, workers=args.workers, out_dir=args.out_dir)
            _emit([{"grid_point": r.extra.get("grid_point"), "status": r.status, "final_error": r.final_error,
                    "message": r.message} for r in recs])
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
