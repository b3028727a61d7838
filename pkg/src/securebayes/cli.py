"""Command-line harness.

Exit codes: 0 success, 2 configuration error, 3 protocol abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import DataError, save_csv, synthetic
from .dp_accounting import InfeasibleSpecError, PrivacyDomainError
from .experiments import SETTINGS, ExperimentConfig, compare_settings, emit_plot_data, run_experiment
from .he import HeError
from .protocol import ConfigError, ProtocolAbort

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
log = logging.getLogger("securebayes")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="securebayes", description="Private distributed Bayesian sampling experiments.")
    p.add_argument("--model", choices=("density", "logistic", "survival"))
    p.add_argument("--setting", action="append", choices=SETTINGS + ("all",),
                   help="repeatable; 'all' runs every setting")
    p.add_argument("--sites", type=int)
    p.add_argument("--epsilon", type=float, action="append", help="repeatable; forms the epsilon grid")
    p.add_argument("--delta", type=float)
    p.add_argument("--tau", type=int)
    p.add_argument("--iters", type=int, dest="T", help="number of epochs T (iterations are floor(N T / tau))")
    p.add_argument("--max-steps", type=int, dest="iters", help="cap on the number of sampler iterations")
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=("lattice", "mock", "exact"))
    p.add_argument("--preset", dest="he_preset", help="HE parameter preset name or JSON path")
    p.add_argument("--config", type=Path, help="JSON config; command-line flags override it")
    p.add_argument("--out", type=Path, help="output directory for reports and plot data")
    p.add_argument("--strict-privacy", action="store_true", dest="strict", default=None)
    p.add_argument("--gamma", action="store_true", default=None, help="include the divergence term (central samplers)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--lipschitz", type=float, dest="L")
    p.add_argument("--aux-c", type=float, dest="c")
    p.add_argument("--data", dest="data_path", help="CSV dataset instead of the synthetic generator")
    p.add_argument("--partition-file", dest="partition_path", help="JSON row ranges per site")
    p.add_argument("--export-data", type=Path, help="write the synthetic dataset as CSV and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_FIELDS = ("model", "sites", "delta", "tau", "T", "iters", "repeats", "seed", "backend", "he_preset", "strict",
           "gamma", "alpha", "lam", "L", "c", "data_path", "partition_path")


def make_config(args) -> tuple[ExperimentConfig, list[str]]:
    raw = {}
    if args.config:
        try:
            raw = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    settings = raw.pop("settings", None)
    cfg = ExperimentConfig.from_dict(raw)
    over = {k: getattr(args, k) for k in _FIELDS if getattr(args, k) is not None}
    if args.epsilon:
        over["epsilons"] = tuple(args.epsilon)
    if args.out:
        over["out"] = str(args.out)
    if "model" in over and ("tau" not in over and "tau" not in raw):
        over["tau"] = None
    if "model" in over and ("T" not in over and "T" not in raw):
        over["T"] = None
    cfg = replace(cfg, **over)
    chosen = args.setting or settings or [cfg.setting]
    if isinstance(chosen, str):
        chosen = [chosen]
    if "all" in chosen:
        chosen = list(SETTINGS)
    for s in chosen:
        replace(cfg, setting=s).validate()
    return cfg, chosen


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, settings = make_config(args)
        if args.export_data:
            save_csv(synthetic(cfg.model, cfg.seed), args.export_data)
            print(f"wrote {args.export_data}")
            return EXIT_OK
        reports = []
        for s in settings:
            log.info("running %s / %s", cfg.model, s)
            reports.append(run_experiment(replace(cfg, setting=s)))
        summary = compare_settings(*reports)
        print(summary.text())
        if cfg.out:
            for kind in ("epsilon-sweep", "timing"):
                emit_plot_data(reports, kind, cfg.out)
            (Path(cfg.out) / "summary.json").write_text(json.dumps(
                {"rows": summary.rows, "deltas": {str(k): v for k, v in summary.deltas.items()},
                 "ops": summary.op_table}, indent=1))
        return EXIT_OK
    except ProtocolAbort as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except HeError as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, DataError, InfeasibleSpecError, PrivacyDomainError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
