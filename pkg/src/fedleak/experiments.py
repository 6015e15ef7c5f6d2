"""Experiment orchestration: config assembly, grids, attacks, sweeps.

The CLI is a thin argparse shell over these functions; acceptance-style
protocols (defense accuracy grids, heterogeneity comparisons) live here so
they can be driven both from the command line and from tests.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attack import DEFAULT_N_MAX, DEFAULT_RESIDUAL_TOL, run_attack
from .data import (
    DataPrior,
    Dataset,
    Partition,
    generate_synthetic,
    load_idx_images,
    partition_dirichlet,
    partition_iid,
    SyntheticSpec,
)
from .defense import DefenseConfig
from .federated import TrainingConfig, TrainingTrace, run_grid
from .metrics import evaluate_attack, evaluate_clustering, match_recovered
from .oracle import (
    verify_batch_decomposition,
    verify_isolated_recovery,
    verify_round_decomposition,
    verify_start_coverage,
)
from .trace_io import load_trace, save_trace

__all__ = [
    "PreparedExperiment",
    "prepare_experiment",
    "run_experiment",
    "attack_report",
    "grid_best_accuracy",
    "defense_accuracy_protocol",
    "heterogeneity_comparison",
    "sweep_rows",
    "CSV_COLUMNS",
    "format_csv_row",
]

REP_SEED_TAG = 0x9E9E


@dataclass
class PreparedExperiment:
    """Everything a training grid needs, resolved from a config dict."""

    name: str
    pooled: Dataset
    partition: Partition
    eval_dataset: Dataset | None
    prior: DataPrior
    base_config: TrainingConfig
    learning_rates: list[float]
    seeds: list[int]

    @property
    def client_size(self) -> float:
        return float(np.mean(self.partition.client_sizes()))


def _synthetic_spec(data: dict, n: int, seed: int, id_offset: int = 0) -> SyntheticSpec:
    return SyntheticSpec(
        kind=data["kind"],
        d=data["d"],
        n=n,
        classes=data.get("classes", 2),
        seed=seed,
        levels=data.get("levels", 256),
        heavy_fraction=data.get("heavy_fraction", 0.3),
        template_bias=data.get("template_bias", 0.85),
        blob_std=data.get("blob_std", 0.12),
        task=data.get("task", "classification"),
        id_offset=id_offset,
    )


def _derived_seed(seed: int, tag: int, extra: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), tag, int(extra)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**31))


def prepare_experiment(cfg: dict) -> PreparedExperiment:
    """Build datasets, partition and base config from a validated config."""
    data = cfg["data"]
    training = cfg["training"]
    part_cfg = cfg.get("partition", {})
    n_clients = training["n_clients"]
    per_client = training["dataset_size_per_client"]
    n_pool = data.get("n_pool", n_clients * per_client)
    n_eval = data.get("n_eval", 0)
    data_seed = data.get("seed", 0)
    task = data.get("task", "classification")

    if data["kind"] == "idx":
        full = load_idx_images(data["images"], data["labels"],
                               limit=n_pool + n_eval)
        if len(full) < n_pool:
            raise ValueError(
                f"IDX selection holds {len(full)} distinct samples, need {n_pool}")
        pool = full.subset_rows(np.arange(n_pool))
        eval_ds = (full.subset_rows(np.arange(n_pool, len(full)))
                   if n_eval and len(full) > n_pool else None)
        prior = DataPrior.grid(256)
    else:
        # train and eval come from one draw so they share class structure
        spec = _synthetic_spec(data, n_pool + n_eval, data_seed)
        full = generate_synthetic(spec)
        prior = spec.prior()
        pool = full.subset_rows(np.arange(n_pool))
        eval_ds = (full.subset_rows(np.arange(n_pool, n_pool + n_eval))
                   if n_eval else None)

    scheme = part_cfg.get("scheme", "iid")
    part_seed = part_cfg.get("seed", data_seed)
    if scheme == "dirichlet":
        partition = partition_dirichlet(pool, n_clients, part_cfg["alpha"],
                                        part_seed, per_client)
    else:
        partition = partition_iid(pool, n_clients, part_seed, per_client)
    pooled = pool.with_partition(partition)

    n_outputs = 1 if task == "survival" else data.get("classes", 2)
    base_config = TrainingConfig(
        n_clients=n_clients,
        dataset_size_per_client=per_client,
        batch_size=training["batch_size"],
        n_updates=training["n_updates"],
        t_max=training["t_max"],
        learning_rate=1.0,  # overridden per grid cell
        seed=0,             # overridden per grid cell
        hidden_neurons=training["hidden_neurons"],
        input_dim=data["d"],
        n_outputs=n_outputs,
        loss_kind=training.get("loss_kind", "cross_entropy"),
        head_widths=tuple(training.get("head_widths", ())),
        defense=DefenseConfig.from_dict(training.get("defense", {})),
        oracle_logging=training.get("oracle_logging", False),
        client_weights=(tuple(training["client_weights"])
                        if training.get("client_weights") else None),
        lr_schedule=(tuple(training["lr_schedule"])
                     if training.get("lr_schedule") else None),
    )
    grid = cfg["grid"]
    return PreparedExperiment(
        name=cfg["experiment"],
        pooled=pooled,
        partition=partition,
        eval_dataset=eval_ds,
        prior=prior,
        base_config=base_config,
        learning_rates=[float(lr) for lr in grid["learning_rates"]],
        seeds=[int(s) for s in grid["seeds"]],
    )


def run_experiment(prep: PreparedExperiment, out_dir: Path | None = None):
    """Run the full grid; returns traces, or written paths when out_dir given."""
    if out_dir is None:
        return run_grid(prep.base_config, prep.pooled, prep.partition,
                        prep.learning_rates, prep.seeds, prep.eval_dataset)
    out_dir = Path(out_dir)
    trace_dir = out_dir / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dataset.json").write_text(prep.pooled.to_json())
    (out_dir / "partition.json").write_text(prep.partition.to_json())
    if prep.eval_dataset is not None:
        (out_dir / "eval_dataset.json").write_text(prep.eval_dataset.to_json())
    paths = []
    counter = iter(range(10**9))

    def sink(trace: TrainingTrace):
        i = next(counter)
        li, si = divmod(i, len(prep.seeds))
        path = trace_dir / f"trace_lr{li:02d}_seed{si:03d}.trace"
        save_trace(path, trace)
        paths.append(path)

    run_grid(prep.base_config, prep.pooled, prep.partition,
             prep.learning_rates, prep.seeds, prep.eval_dataset, sink=sink)
    return paths


def _oracle_section(sources, pooled: Dataset, prior: DataPrior) -> dict:
    reports = {"batch_decomposition": [], "round_decomposition": [],
               "start_coverage": [], "isolated_recovery": []}
    for source in sources:
        trace = source if isinstance(source, TrainingTrace) else load_trace(source)
        if trace.oracle_log is None:
            continue
        reports["batch_decomposition"].append(
            verify_batch_decomposition(trace, pooled).to_dict())
        if not trace.config.defense.active:
            reports["round_decomposition"].append(
                verify_round_decomposition(trace, pooled).to_dict())
        reports["start_coverage"].append(
            verify_start_coverage(trace, pooled).to_dict())
        reports["isolated_recovery"].append(
            verify_isolated_recovery(trace, prior, pooled).to_dict())
    return reports


def attack_report(sources, prep: PreparedExperiment | None = None,
                  n_max: int = DEFAULT_N_MAX,
                  residual_tol: float = DEFAULT_RESIDUAL_TOL,
                  baseline: bool = False,
                  with_oracle: bool = False,
                  include_vectors: bool = True,
                  pooled: Dataset | None = None,
                  prior: DataPrior | None = None,
                  n_clients: int | None = None,
                  client_size: float | None = None,
                  name: str | None = None) -> dict:
    """Run the attack over trace sources and assemble the JSON-ready report.

    Evaluation context comes either from ``prep`` or from the explicit
    ``pooled``/``prior``/``n_clients``/``client_size`` arguments (CLI use).
    """
    if prep is not None:
        pooled = prep.pooled
        prior = prep.prior
        n_clients = prep.base_config.n_clients
        client_size = prep.client_size
        name = prep.name
    if pooled is None or prior is None or n_clients is None or client_size is None:
        raise ValueError("need either a prepared experiment or explicit context")
    result = run_attack(sources, prior, n_max, residual_tol,
                        baseline_clusters=n_clients if baseline else None)
    metrics = evaluate_attack(result, pooled, n_clients, client_size)
    sample_ids, client_ids = match_recovered(result.recovered, pooled)
    report = {
        "experiment": name or "attack",
        "n_traces": len(sources),
        "n_recovered": len(result.recovered),
        "n_reconstructions": len(result.reconstructions),
        "n_components": len(result.graph.components),
        "n_unmatched_recovered": int((sample_ids < 0).sum()),
        # components can outgrow a client dataset; the ratio is reported raw
        "rho_component_exceeds_one": metrics.rho_component > 1.0,
        "metrics": metrics.to_dict(),
        "components": result.graph.components,
        "provenance": [list(p) for p in result.recovered.provenance],
        "best_accuracy": best_accuracy_of(sources),
    }
    if include_vectors:
        report["recovered_vectors"] = result.recovered.vectors.tolist()
        report["reconstructions"] = [
            {
                "key": list(r.key),
                "members": r.member_indices.tolist(),
                "coefficients": r.coefficients.tolist(),
                "residual": r.residual,
                "first_activation_subset": r.first_activation_subset.tolist(),
            }
            for r in result.reconstructions
        ]
    if baseline and result.baseline_labels is not None:
        report["baseline"] = evaluate_clustering(
            result.baseline_labels, client_ids, len(result.recovered),
            len(pooled))
    if with_oracle:
        report["oracle"] = _oracle_section(sources, pooled, prior)
    return report


def best_accuracy_of(sources) -> float | None:
    accs = []
    for source in sources:
        trace = source if isinstance(source, TrainingTrace) else load_trace(source)
        acc = trace.metadata.get("accuracy")
        if acc is not None:
            accs.append(acc)
    return max(accs) if accs else None


def grid_best_accuracy(prep: PreparedExperiment) -> float:
    """Best held-out accuracy across the grid, traces discarded on the fly."""
    best = -1.0

    def sink(trace: TrainingTrace):
        nonlocal best
        best = max(best, trace.metadata.get("accuracy", -1.0))

    cfg = replace(prep.base_config, keep_iterates=False)
    run_grid(cfg, prep.pooled, prep.partition, prep.learning_rates, prep.seeds,
             prep.eval_dataset, sink=sink)
    if best < 0:
        raise ValueError("accuracy protocol needs an eval dataset")
    return best


def with_repetition(cfg: dict, rep: int) -> dict:
    """Deterministically re-seed a config for repetition ``rep``."""
    out = copy.deepcopy(cfg)
    data_seed = out["data"].get("seed", 0)
    out["data"]["seed"] = _derived_seed(data_seed, REP_SEED_TAG, rep)
    part = out.setdefault("partition", {})
    part["seed"] = _derived_seed(part.get("seed", data_seed), REP_SEED_TAG, rep + 1)
    out["grid"]["seeds"] = [
        _derived_seed(s, REP_SEED_TAG, 7919 * (rep + 1)) for s in out["grid"]["seeds"]
    ]
    return out


def defense_accuracy_protocol(cfg: dict, defense: dict, n_reps: int) -> dict:
    """Best-over-learning-rates accuracy, defended vs undefended, per rep.

    Matched comparisons: each repetition reruns the identical grid with only
    the defense toggled.
    """
    undefended, defended = [], []
    for rep in range(n_reps):
        rep_cfg = with_repetition(cfg, rep)
        plain = copy.deepcopy(rep_cfg)
        plain["training"]["defense"] = {"kind": "none"}
        undefended.append(grid_best_accuracy(prepare_experiment(plain)))
        guarded = copy.deepcopy(rep_cfg)
        guarded["training"]["defense"] = dict(defense)
        defended.append(grid_best_accuracy(prepare_experiment(guarded)))
    return {
        "undefended": undefended,
        "defended": defended,
        "mean_undefended": float(np.mean(undefended)),
        "mean_defended": float(np.mean(defended)),
        "mean_gap": float(abs(np.mean(undefended) - np.mean(defended))),
    }


def heterogeneity_comparison(cfg: dict, alphas, n_max: int = DEFAULT_N_MAX,
                             residual_tol: float = DEFAULT_RESIDUAL_TOL) -> list[dict]:
    """Attack vs k-means grouping quality across label heterogeneity levels."""
    rows = []
    for alpha in alphas:
        point = copy.deepcopy(cfg)
        point.setdefault("partition", {})["scheme"] = "dirichlet"
        point["partition"]["alpha"] = float(alpha)
        prep = prepare_experiment(point)
        traces = run_experiment(prep)
        report = attack_report(traces, prep, n_max, residual_tol,
                               baseline=True, include_vectors=False)
        rows.append({
            "alpha": float(alpha),
            "v_normalized": report["metrics"]["v_normalized"],
            "baseline_v_normalized": report.get("baseline", {}).get("v_normalized", 0.0),
            "rho_recovered": report["metrics"]["rho_recovered"],
            "n_recovered": report["n_recovered"],
        })
    return rows


CSV_COLUMNS = [
    "schema_version", "experiment", "axis_name", "axis_value", "repetition",
    "n_traces", "n_recovered", "rho_recovered", "rho_matched", "rho_component",
    "homogeneity", "completeness", "v_recovered", "v_normalized", "p_censored",
    "best_accuracy", "baseline_v_normalized",
]

CSV_SCHEMA_VERSION = "v1"


def format_csv_row(experiment: str, report: dict, axis_name: str = "",
                   axis_value="", repetition: int = 0) -> list[str]:
    m = report["metrics"]

    def fmt(x):
        if x is None or x == "":
            return ""
        return repr(x) if isinstance(x, float) else str(x)

    return [fmt(v) for v in [
        CSV_SCHEMA_VERSION, experiment, axis_name, axis_value, repetition,
        report["n_traces"], report["n_recovered"], m["rho_recovered"],
        m["rho_matched"], m["rho_component"], m["homogeneity"],
        m["completeness"], m["v_recovered"], m["v_normalized"], m["p_censored"],
        report.get("best_accuracy"),
        report.get("baseline", {}).get("v_normalized"),
    ]]


def _axis_applied(base: dict, axis_name: str, value) -> dict:
    cfg = copy.deepcopy(base)
    t = cfg["training"]
    if axis_name == "learning_rate":
        cfg["grid"]["learning_rates"] = [float(value)]
    elif axis_name == "n_trainings":
        cfg["grid"]["seeds"] = list(range(int(value)))
    elif axis_name == "dirichlet_alpha":
        cfg.setdefault("partition", {})["scheme"] = "dirichlet"
        cfg["partition"]["alpha"] = float(value)
    elif axis_name in ("batch_size", "hidden_neurons", "t_max", "n_updates",
                       "n_clients", "dataset_size_per_client"):
        t[axis_name] = int(value)
    else:
        raise ValueError(f"unknown sweep axis {axis_name!r}")
    return cfg


def _sweep_cell(args) -> list[str]:
    sweep_cfg, value, rep = args
    axis = sweep_cfg["axis"]
    attack_cfg = sweep_cfg.get("attack", {})
    cfg = with_repetition(_axis_applied(sweep_cfg["base"], axis["name"], value), rep)
    prep = prepare_experiment(cfg)
    traces = run_experiment(prep)
    report = attack_report(
        traces, prep,
        n_max=attack_cfg.get("n_max", DEFAULT_N_MAX),
        residual_tol=attack_cfg.get("residual_tol", DEFAULT_RESIDUAL_TOL),
        baseline=attack_cfg.get("baseline", False),
        include_vectors=False)
    return format_csv_row(sweep_cfg["experiment"], report, axis["name"], value, rep)


def sweep_rows(sweep_cfg: dict, workers: int = 1) -> list[list[str]]:
    """One CSV row per (axis value, repetition), in deterministic order.

    Cells are independent trainings; with ``workers > 1`` they run on a
    bounded process pool and results are still emitted in axis order.
    """
    reps = sweep_cfg.get("repetitions", 1)
    cells = [(sweep_cfg, value, rep)
             for value in sweep_cfg["axis"]["values"] for rep in range(reps)]
    if workers <= 1:
        return [_sweep_cell(cell) for cell in cells]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_cell, cells))
