"""Batch experiment driver.

Three subcommands: ``train`` runs a training grid from a JSON config and
writes trace files; ``attack`` runs the three-step attack over trace files
and writes a JSON report plus a CSV summary; ``sweep`` runs one varying axis
with repetitions and emits a CSV matrix suitable for external plotting.

Exit codes: 0 success, 2 invalid configuration (with the failing field
path), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema

from . import experiments
from .attack import DEFAULT_N_MAX, DEFAULT_RESIDUAL_TOL
from .data import DataPrior, Dataset
from .defense import DefenseConfig
from .trace_io import load_trace

EXIT_CONFIG = 2
EXIT_IO = 3


class ConfigError(Exception):
    pass


def _load_schema(name: str) -> dict:
    with resources.files("fedleak.schemas").joinpath(name).open() as f:
        return json.load(f)


def load_validated(path, schema_name: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    validate_config(cfg, schema_name, str(path))
    return cfg


def validate_config(cfg: dict, schema_name: str, source: str = "<config>") -> None:
    schema = _load_schema(schema_name)
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ConfigError(f"{source}: {path}: {err.message}")


def _out_dir(cfg: dict, args) -> Path:
    out = args.out or os.environ.get("FEDLEAK_OUT") or cfg.get("out_dir")
    if out is None:
        raise ConfigError("no output directory: pass --out, set FEDLEAK_OUT, "
                          "or put out_dir in the config")
    return Path(out) / cfg["experiment"]


def cmd_train(args) -> int:
    cfg = load_validated(args.config, "train_config.schema.json")
    if args.defense:
        cfg["training"]["defense"] = DefenseConfig.from_spec(args.defense).to_dict()
    out = _out_dir(cfg, args)
    prep = experiments.prepare_experiment(cfg)
    paths = experiments.run_experiment(prep, out)
    print(f"experiment {cfg['experiment']}: wrote {len(paths)} trace(s) to {out}")
    accs = []
    for path in paths:
        trace = load_trace(path)
        acc = trace.metadata.get("accuracy")
        if acc is not None:
            accs.append(acc)
            print(f"  {Path(path).name}: lr={trace.config.learning_rate:g} "
                  f"accuracy={acc:.4f} p_censored={trace.p_censored:.4f}")
    if accs:
        print(f"best accuracy {max(accs):.4f} (held-out pool of "
              f"{len(prep.eval_dataset) if prep.eval_dataset else 0} samples)")
    return 0


def _attack_context(trace_paths: list[Path], args):
    base = trace_paths[0].parent
    dataset_path = Path(args.dataset) if args.dataset else base.parent / "dataset.json"
    if not dataset_path.exists():
        raise ConfigError(f"no dataset file at {dataset_path}; pass --dataset")
    pooled = Dataset.from_json(dataset_path.read_text())
    first = load_trace(trace_paths[0])
    n_clients = first.config.n_clients
    client_size = first.config.dataset_size_per_client
    return pooled, n_clients, client_size


def cmd_attack(args) -> int:
    trace_paths = sorted(Path(p) for p in glob.glob(args.traces))
    if not trace_paths:
        raise ConfigError(f"no traces match {args.traces!r}")
    prior = DataPrior.from_spec(args.prior)
    pooled, n_clients, client_size = _attack_context(trace_paths, args)
    dims = {load_trace(p).config.input_dim for p in trace_paths}
    if len(dims) != 1:
        raise ConfigError(f"traces disagree on data dimension: {sorted(dims)}")
    report = experiments.attack_report(
        trace_paths, n_max=args.nmax, residual_tol=args.tol,
        baseline=args.baseline, with_oracle=args.oracle,
        pooled=pooled, prior=prior, n_clients=n_clients,
        client_size=client_size, name=args.name)
    out = Path(args.out) if args.out else trace_paths[0].parent.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report, sort_keys=True, separators=(",", ":")))
    with open(out / "summary.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(experiments.CSV_COLUMNS)
        writer.writerow(experiments.format_csv_row(report["experiment"], report))
    m = report["metrics"]
    print(f"attack over {report['n_traces']} trace(s): "
          f"recovered {report['n_recovered']} "
          f"(rho={m['rho_recovered']:.3f}, v_norm={m['v_normalized']:.3f})")
    print(f"report written to {out / 'report.json'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_validated(args.config, "sweep_config.schema.json")
    base = dict(cfg["base"])
    base.setdefault("experiment", cfg["experiment"])
    validate_config(base, "train_config.schema.json", f"{args.config}:base")
    cfg["base"] = base
    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    rows = experiments.sweep_rows(cfg, workers=args.workers)
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(experiments.CSV_COLUMNS)
        writer.writerows(rows)
    print(f"sweep {cfg['experiment']}: {len(rows)} row(s) -> {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedleak",
        description="FedAvg simulation, update-disaggregation attack, and defenses")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training grid from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", help="output root (overrides config/out_dir)")
    p_train.add_argument("--defense", help="override defense, e.g. q:4 or beta:0.9")
    p_train.set_defaults(func=cmd_train)

    p_attack = sub.add_parser("attack", help="attack a set of trace files")
    p_attack.add_argument("--traces", required=True, help="glob of trace files")
    p_attack.add_argument("--prior", required=True,
                          help="binary | grid:<levels> | binary-subset:<a>-<b> | unit-norm")
    p_attack.add_argument("--nmax", type=int, default=DEFAULT_N_MAX)
    p_attack.add_argument("--tol", type=float, default=DEFAULT_RESIDUAL_TOL)
    p_attack.add_argument("--dataset", help="pooled dataset JSON for evaluation")
    p_attack.add_argument("--out", help="report directory")
    p_attack.add_argument("--name", default="attack")
    p_attack.add_argument("--baseline", action="store_true",
                          help="also run the k-means grouping baseline")
    p_attack.add_argument("--oracle", action="store_true",
                          help="attach verification reports (needs oracle-logged traces)")
    p_attack.set_defaults(func=cmd_attack)

    p_sweep = sub.add_parser("sweep", help="vary one axis and emit a CSV matrix")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
