"""FedAvg orchestration with local SGD and ideal secure aggregation.

One training runs ``t_max`` rounds; in each round every client starts from
the aggregated parameters, performs ``n_updates`` minibatch SGD steps on its
own data (optionally censoring neurons before transmission), and the server
averages the client results.  The attacker-visible product is the sequence
of aggregated iterates; ground-truth activation bookkeeping is gathered only
when oracle logging is requested and never feeds back into training.

All randomness derives from the config seed through counter-based seed
sequences keyed by (round, client), so client execution order can never
perturb batch draws and reruns are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model
from .data import Dataset, Partition
from .defense import DefenseConfig, apply_defense
from .model import ModelParams

__all__ = [
    "TrainingConfig",
    "UpdateLog",
    "OracleLog",
    "TrainingTrace",
    "local_update",
    "secure_aggregate",
    "run_training",
    "run_grid",
    "evaluate_accuracy",
]

# seed-stream tags keeping init/batching/grid derivations independent
_INIT_STREAM = 0x1A17
_ROUND_STREAM = 0x2B0D
_GRID_STREAM = 0x36E1


@dataclass(frozen=True)
class TrainingConfig:
    """Hyper-parameters of one federated training."""

    n_clients: int
    dataset_size_per_client: int
    batch_size: int
    n_updates: int
    t_max: int
    learning_rate: float
    seed: int
    hidden_neurons: int
    input_dim: int
    n_outputs: int
    loss_kind: str = "cross_entropy"
    head_widths: tuple[int, ...] = ()
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    oracle_logging: bool = False
    oracle_log_params: bool = False
    keep_iterates: bool = True
    # relaxations of the strict regime (defaults keep it strict): weighted
    # aggregation and a per-round learning-rate schedule
    client_weights: tuple[float, ...] | None = None
    lr_schedule: tuple[float, ...] | None = None

    def __post_init__(self):
        # the cross-silo setting is K >= 2; K = 1 stays allowed as the
        # degenerate plain-SGD case used by tests
        if self.n_clients < 1:
            raise ValueError("need at least one client")
        if self.batch_size < 1 or self.batch_size > self.dataset_size_per_client:
            raise ValueError("batch size must be in [1, dataset_size_per_client]")
        if self.n_updates < 1 or self.t_max < 0:
            raise ValueError("n_updates must be >= 1 and t_max >= 0")
        if self.loss_kind not in model.LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_kind == "cox" and self.n_outputs != 1:
            raise ValueError("survival loss requires a single model output")
        if self.client_weights is not None and (
                len(self.client_weights) != self.n_clients
                or any(w <= 0 for w in self.client_weights)):
            raise ValueError("client weights must be positive, one per client")
        if self.lr_schedule is not None and len(self.lr_schedule) != self.t_max:
            raise ValueError("learning-rate schedule needs one rate per round")

    def round_lr(self, t: int) -> float:
        """Learning rate of round ``t`` (1-based)."""
        if self.lr_schedule is not None:
            return float(self.lr_schedule[t - 1])
        return self.learning_rate

    @property
    def strict_regime(self) -> bool:
        return self.client_weights is None and self.lr_schedule is None

    def to_dict(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "dataset_size_per_client": self.dataset_size_per_client,
            "batch_size": self.batch_size,
            "n_updates": self.n_updates,
            "t_max": self.t_max,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "hidden_neurons": self.hidden_neurons,
            "input_dim": self.input_dim,
            "n_outputs": self.n_outputs,
            "loss_kind": self.loss_kind,
            "head_widths": list(self.head_widths),
            "defense": self.defense.to_dict(),
            "oracle_logging": self.oracle_logging,
            "oracle_log_params": self.oracle_log_params,
            "client_weights": list(self.client_weights) if self.client_weights else None,
            "lr_schedule": list(self.lr_schedule) if self.lr_schedule else None,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainingConfig":
        return TrainingConfig(
            n_clients=d["n_clients"],
            dataset_size_per_client=d["dataset_size_per_client"],
            batch_size=d["batch_size"],
            n_updates=d["n_updates"],
            t_max=d["t_max"],
            learning_rate=d["learning_rate"],
            seed=d["seed"],
            hidden_neurons=d["hidden_neurons"],
            input_dim=d["input_dim"],
            n_outputs=d["n_outputs"],
            loss_kind=d.get("loss_kind", "cross_entropy"),
            head_widths=tuple(d.get("head_widths", ())),
            defense=DefenseConfig.from_dict(d.get("defense", {})),
            oracle_logging=d.get("oracle_logging", False),
            oracle_log_params=d.get("oracle_log_params", False),
            client_weights=tuple(d["client_weights"]) if d.get("client_weights") else None,
            lr_schedule=tuple(d["lr_schedule"]) if d.get("lr_schedule") else None,
        )


@dataclass
class UpdateLog:
    """What one client's local round produced, beyond the parameters."""

    batch_ids: np.ndarray              # (n_updates, b) global sample ids
    activation_mask: np.ndarray        # (n_updates, H, b) bool
    censored: np.ndarray               # neuron indices reset by the defense
    intermediate: list[ModelParams] | None = None  # theta_{t,k,i}, i=0..n_updates


@dataclass
class OracleLog:
    """Ground-truth bookkeeping; consumed only by the oracle and tests.

    ``round_sets[t-1][h]`` is the round-level activation set of neuron ``h``
    in round ``t`` (union of the batch-level sets of all clients/updates) and
    ``round_start_active[t-1][h]`` its subset of samples already activating
    the neuron at the round-start parameters.
    """

    batch_ids: np.ndarray          # (t_max, K, n_updates, b)
    activation_mask: np.ndarray    # (t_max, K, n_updates, H, b) bool
    round_sets: list[list[np.ndarray]]
    round_start_active: list[list[np.ndarray]]
    intermediate: list[list[list[ModelParams]]] | None = None  # [t][k][i]

    def batch_set(self, t: int, k: int, i: int, h: int) -> np.ndarray:
        """Sample ids of one batch-level activation set (1-based round t)."""
        mask = self.activation_mask[t - 1, k, i, h]
        return np.unique(self.batch_ids[t - 1, k, i][mask])


@dataclass
class TrainingTrace:
    """The attacker's entire view of one training, plus optional oracle data.

    Attack code must consume only ``iterates`` and the public config fields
    (dimensions, t_max); ``oracle_log`` and the metadata are for evaluation.
    """

    config: TrainingConfig
    iterates: list[ModelParams]
    oracle_log: OracleLog | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def t_max(self) -> int:
        return len(self.iterates) - 1

    @property
    def p_censored(self) -> float:
        """Censored neuron-round-client events over H * t_max * K."""
        counts = self.metadata.get("censored_counts")
        if counts is None or self.config.t_max == 0:
            return 0.0
        total = self.config.hidden_neurons * self.config.t_max * self.config.n_clients
        return float(np.sum(counts)) / total


def _to_int_list(seed_parts) -> list[int]:
    return [int(p) for p in seed_parts]


def round_rng(seed: int, t: int, k: int) -> np.random.Generator:
    """Independent per-(round, client) stream derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence(_to_int_list([seed, _ROUND_STREAM, t, k])))


def draw_batches(rng: np.random.Generator, n: int, batch_size: int,
                 n_updates: int) -> list[np.ndarray]:
    """Shuffle once, slice consecutive chunks, reshuffle when exhausted."""
    order = rng.permutation(n)
    pos = 0
    batches = []
    for _ in range(n_updates):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        batches.append(order[pos: pos + batch_size].copy())
        pos += batch_size
    return batches


def local_update(start: ModelParams, client_data: Dataset, config: TrainingConfig,
                 rng: np.random.Generator,
                 lr: float | None = None) -> tuple[ModelParams, UpdateLog]:
    """``n_updates`` SGD steps on the client's data, then optional censoring."""
    n = len(client_data)
    if n < config.batch_size:
        raise ValueError("client dataset smaller than the batch size")
    if lr is None:
        lr = config.learning_rate
    H = config.hidden_neurons
    batches = draw_batches(rng, n, config.batch_size, config.n_updates)

    need_sets = config.defense.active or config.oracle_logging
    batch_ids = np.empty((config.n_updates, config.batch_size), dtype=np.int64)
    masks = np.zeros((config.n_updates, H, config.batch_size), dtype=bool)
    membership = np.zeros((H, n), dtype=bool)
    pooled_abs = np.zeros((H, n))
    intermediate = [start] if config.oracle_log_params else None

    params = start
    for i, rows in enumerate(batches):
        X = client_data.X[rows]
        y = client_data.label_slice(rows)
        grads = model.gradients(params, X, y, config.loss_kind)
        if need_sets:
            lam_hn = grads.lam.T  # (H, b)
            pre = X @ params.W.T + params.b
            mask = (pre.T > 0) & (np.abs(lam_hn) > model.LAMBDA_THRESHOLD)
            masks[i] = mask
            membership[:, rows] |= mask
            pooled_abs[:, rows] += np.abs(lam_hn)
        batch_ids[i] = client_data.sample_ids[rows]
        params = model.apply_sgd_step(params, grads, lr)
        if intermediate is not None:
            intermediate.append(params)

    params, censored = apply_defense(config.defense, start, params,
                                     membership, pooled_abs)
    return params, UpdateLog(batch_ids, masks, censored, intermediate)


def secure_aggregate(client_params: Sequence[ModelParams],
                     weights: Sequence[float] | None = None) -> ModelParams:
    """Mean of the client parameters (ideal aggregation, no masking).

    ``weights`` switches to a normalized weighted mean; the default is the
    plain average of the strict regime.
    """
    if not client_params:
        raise ValueError("nothing to aggregate")
    first = client_params[0]
    for p in client_params[1:]:
        if p.W.shape != first.W.shape or len(p.head) != len(first.head) or any(
            a.V.shape != b.V.shape for a, b in zip(p.head, first.head)
        ):
            raise ValueError("client parameters have mismatched shapes")
    if weights is None:
        K = len(client_params)
        W = sum(p.W for p in client_params) / K
        b = sum(p.b for p in client_params) / K
        head = tuple(
            model.HeadLayer(sum(p.head[i].V for p in client_params) / K,
                            sum(p.head[i].c for p in client_params) / K)
            for i in range(len(first.head))
        )
        return ModelParams(W, b, head)
    if len(weights) != len(client_params):
        raise ValueError("one weight per client required")
    total = float(sum(weights))
    w = [float(x) / total for x in weights]
    W = sum(wi * p.W for wi, p in zip(w, client_params))
    b = sum(wi * p.b for wi, p in zip(w, client_params))
    head = tuple(
        model.HeadLayer(sum(wi * p.head[i].V for wi, p in zip(w, client_params)),
                        sum(wi * p.head[i].c for wi, p in zip(w, client_params)))
        for i in range(len(first.head))
    )
    return ModelParams(W, b, head)


def _round_level_sets(update_logs: list[UpdateLog], H: int) -> list[np.ndarray]:
    """Union of the batch-level activation sets over clients and updates."""
    all_masks = np.concatenate([ul.activation_mask for ul in update_logs], axis=0)
    all_ids = np.concatenate([ul.batch_ids for ul in update_logs], axis=0)
    return [np.unique(all_ids[all_masks[:, h, :]]) for h in range(H)]


def run_training(config: TrainingConfig, pooled: Dataset, partition: Partition,
                 eval_dataset: Dataset | None = None) -> TrainingTrace:
    """Full-participation FedAvg for ``t_max`` rounds."""
    if set(int(s) for s in pooled.sample_ids) != set(partition.assignments):
        raise ValueError("partition must assign exactly the pooled samples")
    if partition.n_clients != config.n_clients:
        raise ValueError("partition client count differs from the config")
    if pooled.dim != config.input_dim:
        raise ValueError(
            f"dataset dimension {pooled.dim} != configured {config.input_dim}")

    clients = [
        pooled.subset_rows(pooled.rows_of_ids(partition.client_ids_sorted(k)))
        for k in range(config.n_clients)
    ]
    init_rng = np.random.default_rng(
        np.random.SeedSequence(_to_int_list([config.seed, _INIT_STREAM])))
    params = model.init_params(init_rng, config.input_dim, config.hidden_neurons,
                               config.head_widths, config.n_outputs)

    iterates = [params]
    censored_counts = np.zeros((config.t_max, config.n_clients), dtype=np.int64)
    log: OracleLog | None = None
    if config.oracle_logging:
        log = OracleLog(
            batch_ids=np.empty((config.t_max, config.n_clients, config.n_updates,
                                config.batch_size), dtype=np.int64),
            activation_mask=np.zeros((config.t_max, config.n_clients, config.n_updates,
                                      config.hidden_neurons, config.batch_size), dtype=bool),
            round_sets=[],
            round_start_active=[],
            intermediate=[] if config.oracle_log_params else None,
        )
        id_to_row = {int(s): i for i, s in enumerate(pooled.sample_ids)}

    for t in range(1, config.t_max + 1):
        round_start = params
        client_results = []
        update_logs = []
        for k in range(config.n_clients):
            end, ulog = local_update(round_start, clients[k], config,
                                     round_rng(config.seed, t, k),
                                     lr=config.round_lr(t))
            client_results.append(end)
            update_logs.append(ulog)
            censored_counts[t - 1, k] = len(ulog.censored)
        params = secure_aggregate(client_results, config.client_weights)

        if log is not None:
            for k, ulog in enumerate(update_logs):
                log.batch_ids[t - 1, k] = ulog.batch_ids
                log.activation_mask[t - 1, k] = ulog.activation_mask
            sets = _round_level_sets(update_logs, config.hidden_neurons)
            log.round_sets.append(sets)
            # members already active at the round-start parameters
            pre = pooled.X @ round_start.W.T + round_start.b  # (N, H)
            start_active = []
            for h, ids in enumerate(sets):
                if ids.size == 0:
                    start_active.append(ids)
                    continue
                rows = np.array([id_to_row[int(s)] for s in ids])
                start_active.append(ids[pre[rows, h] > 0])
            log.round_start_active.append(start_active)
            if log.intermediate is not None:
                log.intermediate.append([ul.intermediate for ul in update_logs])

        if config.keep_iterates:
            iterates.append(params)

    if not config.keep_iterates:
        iterates.append(params)

    trace = TrainingTrace(config, iterates, log,
                          metadata={"censored_counts": censored_counts.tolist()})
    if eval_dataset is not None and pooled.task == "classification":
        trace.metadata["accuracy"] = evaluate_accuracy(params, eval_dataset)
    return trace


def evaluate_accuracy(params: ModelParams, dataset: Dataset) -> float:
    """Top-1 accuracy of the final model on a held-out pool."""
    preds = model.forward(params, dataset.X).argmax(axis=1)
    return float(np.mean(preds == dataset.labels))


def derive_grid_seed(seed: int, lr_index: int) -> int:
    """Per-(learning rate, seed) training seed so grid entries are independent."""
    ss = np.random.SeedSequence(_to_int_list([seed, _GRID_STREAM, lr_index]))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def run_grid(base: TrainingConfig, pooled: Dataset, partition: Partition,
             learning_rates: Sequence[float], seeds: Sequence[int],
             eval_dataset: Dataset | None = None,
             sink=None) -> list[TrainingTrace]:
    """One training per (learning rate, seed), sharing dataset and partition.

    This mirrors the attacker's multi-training view of a hyper-parameter
    search.  When ``sink`` is given each trace is passed to it and dropped
    instead of accumulated.
    """
    if not learning_rates or not seeds:
        raise ValueError("need at least one learning rate and one seed")
    traces = []
    for li, lr in enumerate(learning_rates):
        for seed in seeds:
            config = replace(base, learning_rate=float(lr),
                             seed=derive_grid_seed(seed, li))
            trace = run_training(config, pooled, partition, eval_dataset)
            if sink is None:
                traces.append(trace)
            else:
                sink(trace)
    return traces
