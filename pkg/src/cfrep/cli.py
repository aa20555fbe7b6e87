"""Command-line entry points.

Subcommands:

* ``synth``: write the bundled synthetic dataset (with its generator noise
  columns) to CSV.
* ``train-backend``: train the configured generative model once and save a
  checkpoint.
* ``run``: full multi-seed experiment into an output directory.
* ``report``: reformat a run's report.csv as csv or an aligned table.
* ``verify``: representation-invariance and abduction checks against the
  configured backend; exits nonzero when an exact backend misses a bound.

Every flag can also be supplied through an environment variable named
``CFREP_<FLAG>`` (for example ``CFREP_CONFIG`` for ``--config``).

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import experiment
from .data import DataError, SchemaError, generate_synthetic, split
from .experiment import ConfigError, load_config
from .genmodel import GenModelError, save_model, train_cvae, train_dcevae
from .methods import MethodError
from .scm import ScmError

_CONFIG_ERRORS = (ConfigError, SchemaError, ScmError, DataError)
_RUNTIME_ERRORS = (GenModelError, MethodError, experiment.RunError, OSError)


def _env(name: str, fallback=None):
    return os.environ.get(f"CFREP_{name}", fallback)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfrep",
        description="Counterfactually fair representations: train, evaluate, verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="write the synthetic dataset to CSV")
    p_synth.add_argument("--n", type=int, default=int(_env("N", 3000)))
    p_synth.add_argument("--seed", type=int, default=int(_env("SEED", 0)))
    p_synth.add_argument("--out", default=_env("OUT"), required=_env("OUT") is None)

    p_tb = sub.add_parser("train-backend",
                          help="train the configured generative model once")
    p_tb.add_argument("--config", default=_env("CONFIG"),
                      required=_env("CONFIG") is None)
    p_tb.add_argument("--out", default=_env("OUT"), required=_env("OUT") is None)

    p_run = sub.add_parser("run", help="run the full multi-seed experiment")
    p_run.add_argument("--config", default=_env("CONFIG"),
                       required=_env("CONFIG") is None)
    p_run.add_argument("--out", default=_env("OUT"), required=_env("OUT") is None)
    p_run.add_argument("--jobs", type=int, default=int(_env("JOBS", 1)))

    p_rep = sub.add_parser("report", help="reformat a run's report file")
    p_rep.add_argument("--in", dest="infile", default=_env("IN"),
                       required=_env("IN") is None)
    p_rep.add_argument("--format", choices=("csv", "table"),
                       default=_env("FORMAT", "table"))

    p_ver = sub.add_parser("verify",
                           help="check representation invariances on the backend")
    p_ver.add_argument("--config", default=_env("CONFIG"),
                       required=_env("CONFIG") is None)
    return parser


def _cmd_synth(args) -> int:
    dataset = generate_synthetic(n=args.n, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["X", "A", "Y", *dataset.exogenous_names])
        for i in range(dataset.n):
            writer.writerow([f"{dataset.X[i, 0]:.12g}", int(dataset.a[i]),
                             f"{dataset.y[i]:.12g}",
                             *(f"{v:.12g}" for v in dataset.exogenous[i])])
    print(f"wrote {dataset.n} rows to {out}")
    return 0


def _cmd_train_backend(args) -> int:
    cfg = load_config(args.config)
    if cfg.backend.kind == "scm":
        raise ConfigError("backend.kind: nothing to train for an exact scm backend")
    dataset = experiment.make_dataset(cfg.dataset)
    parts = split(dataset, cfg.split, cfg.seeds[0])
    trainer = train_cvae if cfg.backend.kind == "cvae" else train_dcevae
    model = trainer(parts["train"], cfg.backend.vae, cfg.seeds[0],
                    validation=parts.get("validation"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model)
    print(f"saved {model.family} checkpoint to {out}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    artifacts = experiment.run_experiment(cfg, args.out, jobs=args.jobs)
    print(f"report written to {artifacts.outdir / 'report.csv'}")
    return 0


def _cmd_report(args) -> int:
    with open(args.infile, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{args.infile}: empty report")
    if args.format == "csv":
        writer = csv.writer(sys.stdout)
        writer.writerows(rows)
        return 0
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    for r in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return 0


def _cmd_verify(args) -> int:
    cfg = load_config(args.config)
    results = experiment.verify_config(cfg)
    for res in results:
        print(res.line())
    if all(r.passed for r in results):
        print("all invariants hold")
        return 0
    return 3


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "train-backend": _cmd_train_backend,
        "run": _cmd_run,
        "report": _cmd_report,
        "verify": _cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
