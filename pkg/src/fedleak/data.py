"""Datasets, client partitions, and data-prior membership predicates.

A data prior is a membership test over sample space (a discrete grid, binary
coordinates, a binary subset of features, or the unit sphere) used by the
attack to decide whether a candidate vector is a genuine sample.  Every
generated or loaded dataset is guaranteed to satisfy its matching prior, and
pooled datasets never contain duplicate samples.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "DataPrior",
    "LabeledExample",
    "Dataset",
    "Partition",
    "GenerationError",
    "IdxFormatError",
    "PartitionError",
    "generate_synthetic",
    "load_idx_images",
    "partition_iid",
    "partition_dirichlet",
]

PRIOR_KINDS = ("grid", "binary", "binary-subset", "unit-norm")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class GenerationError(RuntimeError):
    """Synthetic generation could not produce enough distinct samples."""


class IdxFormatError(ValueError):
    """Malformed IDX file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PartitionError(RuntimeError):
    """A client partition could not be completed."""


@dataclass(frozen=True)
class DataPrior:
    """Membership predicate over sample space.

    ``grid`` accepts vectors whose coordinates all sit within ``tolerance``
    of some ``k/(levels-1)`` with ``0 <= k < levels``; ``binary`` is the
    two-level grid; ``binary-subset`` checks only the coordinates in
    ``feature_indices``; ``unit-norm`` accepts vectors of norm 1.  An
    optional affine transform handles standardized data: membership is
    tested on ``(x - offset) / scale``.
    """

    kind: str
    levels: int = 2
    feature_indices: tuple[int, ...] | None = None
    tolerance: float = 1e-5
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "binary-subset" and not self.feature_indices:
            raise ValueError("binary-subset prior needs feature indices")

    @staticmethod
    def grid(levels: int = 256, tolerance: float = 1e-5) -> "DataPrior":
        return DataPrior("grid", levels=levels, tolerance=tolerance)

    @staticmethod
    def binary(tolerance: float = 1e-5) -> "DataPrior":
        return DataPrior("binary", levels=2, tolerance=tolerance)

    @staticmethod
    def binary_subset(feature_indices: Sequence[int], tolerance: float = 1e-5) -> "DataPrior":
        return DataPrior("binary-subset", levels=2,
                         feature_indices=tuple(int(i) for i in feature_indices),
                         tolerance=tolerance)

    @staticmethod
    def unit_norm(tolerance: float = 1e-5) -> "DataPrior":
        return DataPrior("unit-norm", tolerance=tolerance)

    @staticmethod
    def from_spec(spec: str) -> "DataPrior":
        """Parse a prior from a CLI spec like ``binary``, ``grid:256``,
        ``binary-subset:0-38`` or ``unit-norm``."""
        name, _, arg = spec.partition(":")
        if name == "grid":
            return DataPrior.grid(int(arg) if arg else 256)
        if name == "binary":
            return DataPrior.binary()
        if name == "binary-subset":
            lo, _, hi = arg.partition("-")
            return DataPrior.binary_subset(range(int(lo), int(hi) + 1))
        if name == "unit-norm":
            return DataPrior.unit_norm()
        raise ValueError(f"cannot parse prior spec {spec!r}")

    def _lattice_distance(self, coords: np.ndarray) -> np.ndarray:
        v = (coords - self.offset) / self.scale
        k = np.clip(np.rint(v * (self.levels - 1)), 0, self.levels - 1)
        return np.abs(v - k / (self.levels - 1))

    def membership_matrix(self, X: np.ndarray) -> np.ndarray:
        """Vectorized membership over the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not np.isfinite(X).all():
            raise ValueError("membership requires finite vectors")
        if self.kind == "unit-norm":
            return np.abs(np.linalg.norm(X, axis=1) - 1.0) < self.tolerance
        if self.kind == "binary-subset":
            X = X[:, list(self.feature_indices)]
        return (self._lattice_distance(X) <= self.tolerance).all(axis=1)

    def membership(self, x: np.ndarray) -> bool:
        return bool(self.membership_matrix(np.asarray(x)[None, :])[0])

    def snap(self, x: np.ndarray) -> np.ndarray:
        """Project a member candidate onto the prior (lattice rounding, or
        normalization for the unit-norm prior)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "unit-norm":
            return x / np.linalg.norm(x)
        v = (x - self.offset) / self.scale
        k = np.clip(np.rint(v * (self.levels - 1)), 0, self.levels - 1)
        snapped = k / (self.levels - 1) * self.scale + self.offset
        if self.kind == "binary-subset":
            out = x.copy()
            out[list(self.feature_indices)] = snapped[list(self.feature_indices)]
            return out
        return snapped

    def dedup_key(self, x: np.ndarray) -> bytes:
        """Hashable identity of a snapped vector (exact on lattice priors)."""
        if self.kind == "unit-norm":
            return np.round(x, 9).tobytes()
        return np.asarray(x, dtype=np.float64).tobytes()

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "levels": self.levels, "tolerance": self.tolerance,
               "scale": self.scale, "offset": self.offset}
        if self.feature_indices is not None:
            out["feature_indices"] = list(self.feature_indices)
        return out

    @staticmethod
    def from_dict(d: dict) -> "DataPrior":
        fi = d.get("feature_indices")
        return DataPrior(d["kind"], levels=d.get("levels", 2),
                         feature_indices=tuple(fi) if fi else None,
                         tolerance=d.get("tolerance", 1e-5),
                         scale=d.get("scale", 1.0), offset=d.get("offset", 0.0))


@dataclass(frozen=True)
class LabeledExample:
    """One sample: features, label, globally unique id, true client."""

    x: np.ndarray
    y: object  # class index, or (time, event) for survival
    sample_id: int
    client_id: int = -1


@dataclass
class Dataset:
    """Column-oriented dataset; per-sample views via :meth:`examples`.

    ``labels`` is an int array for classification and a ``(times, events)``
    pair for survival.  ``client_ids`` is -1 until a partition is applied and
    is ground truth visible only to the oracle and the evaluation metrics.
    """

    X: np.ndarray
    labels: object
    sample_ids: np.ndarray
    client_ids: np.ndarray
    task: str = "classification"

    def __post_init__(self):
        if len(set(self.sample_ids.tolist())) != len(self.sample_ids):
            raise ValueError("sample ids must be unique")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        if self.task != "classification":
            raise ValueError("class count undefined for survival data")
        return int(np.max(self.labels)) + 1

    def label_slice(self, rows: np.ndarray):
        if self.task == "classification":
            return self.labels[rows]
        times, events = self.labels
        return times[rows], events[rows]

    def rows_of_ids(self, ids: Sequence[int]) -> np.ndarray:
        index = {int(s): i for i, s in enumerate(self.sample_ids)}
        return np.array([index[int(s)] for s in ids], dtype=np.int64)

    def subset_rows(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.X[rows], self.label_slice(rows),
                       self.sample_ids[rows], self.client_ids[rows], self.task)

    def with_partition(self, partition: "Partition") -> "Dataset":
        """Restrict to the partitioned samples, with client ids filled in."""
        rows = self.rows_of_ids(sorted(partition.assignments))
        out = self.subset_rows(rows)
        out.client_ids = np.array(
            [partition.assignments[int(s)] for s in out.sample_ids], dtype=np.int64
        )
        return out

    def examples(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            y = self.labels[i] if self.task == "classification" else (
                self.labels[0][i], self.labels[1][i])
            yield LabeledExample(self.X[i], y, int(self.sample_ids[i]),
                                 int(self.client_ids[i]))

    def distinctness_audit(self) -> bool:
        """True when no two samples share identical feature vectors."""
        return len({row.tobytes() for row in self.X}) == len(self)

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "X": self.X.tolist(),
            "sample_ids": self.sample_ids.tolist(),
            "client_ids": self.client_ids.tolist(),
        }
        if self.task == "classification":
            payload["labels"] = np.asarray(self.labels).tolist()
        else:
            payload["times"] = self.labels[0].tolist()
            payload["events"] = np.asarray(self.labels[1], dtype=int).tolist()
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Dataset":
        d = json.loads(text)
        if d["task"] == "classification":
            labels = np.array(d["labels"], dtype=np.int64)
        else:
            labels = (np.array(d["times"], dtype=np.float64),
                      np.array(d["events"], dtype=bool))
        return Dataset(np.array(d["X"], dtype=np.float64), labels,
                       np.array(d["sample_ids"], dtype=np.int64),
                       np.array(d["client_ids"], dtype=np.int64), d["task"])


@dataclass(frozen=True)
class Partition:
    """Assignment of sample ids to clients; every client nonempty."""

    assignments: dict[int, int]
    n_clients: int

    def __post_init__(self):
        held = set(self.assignments.values())
        if held != set(range(self.n_clients)):
            raise PartitionError(
                f"every one of the {self.n_clients} clients needs samples; got {sorted(held)}"
            )

    def client_ids_sorted(self, k: int) -> list[int]:
        return sorted(s for s, c in self.assignments.items() if c == k)

    def client_sizes(self) -> list[int]:
        counts = [0] * self.n_clients
        for c in self.assignments.values():
            counts[c] += 1
        return counts

    def to_json(self) -> str:
        return json.dumps({"n_clients": self.n_clients,
                           "assignments": {str(k): v for k, v in sorted(self.assignments.items())}},
                          sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Partition":
        d = json.loads(text)
        return Partition({int(k): int(v) for k, v in d["assignments"].items()},
                         int(d["n_clients"]))


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic pooled dataset.

    ``binary`` draws, per sample, a number of active coordinates (sparse for
    most samples, dense for a ``heavy_fraction`` minority) and places them
    preferentially on the class template's support: the dense minority forms
    a tightly co-activating core while sparse samples stay individually
    distinguishable, mimicking the uneven feature-activity of real binary
    corpora.  ``grid`` quantizes class-conditional Gaussian blobs onto the
    ``levels``-point lattice.  Samples are globally distinct by construction
    (re-drawn on collision).
    """

    kind: str
    d: int
    n: int
    classes: int
    seed: int
    levels: int = 256
    heavy_fraction: float = 0.3
    template_bias: float = 0.85
    light_count: tuple[float, float] = (0.30, 0.47)
    heavy_count: tuple[float, float] = (0.64, 0.92)
    blob_std: float = 0.12
    task: str = "classification"
    event_prob: float = 0.7
    id_offset: int = 0

    def prior(self) -> DataPrior:
        if self.kind == "binary":
            return DataPrior.binary()
        return DataPrior.grid(self.levels)


REDRAW_BUDGET_FACTOR = 100


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Class-structured synthetic samples that satisfy their prior exactly."""
    if spec.n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A]))
    if spec.kind == "binary":
        templates = rng.integers(0, 2, size=(spec.classes, spec.d)).astype(np.float64)
        bias = min(max(spec.template_bias, 0.01), 0.99)
        weights = np.where(templates > 0, bias, 1.0 - bias)
        weights /= weights.sum(axis=1, keepdims=True)
        light_lo = max(1, int(spec.light_count[0] * spec.d))
        light_hi = max(light_lo + 1, int(spec.light_count[1] * spec.d) + 1)
        heavy_lo = max(1, int(spec.heavy_count[0] * spec.d))
        heavy_hi = min(spec.d, max(heavy_lo + 1, int(spec.heavy_count[1] * spec.d) + 1))
    elif spec.kind == "grid":
        centers = rng.uniform(0.25, 0.75, size=(spec.classes, spec.d))
    else:
        raise ValueError(f"unknown synthetic kind {spec.kind!r}")

    # balanced labels in a shuffled, seed-deterministic order
    labels = np.arange(spec.n) % spec.classes
    rng.shuffle(labels)

    seen: set[bytes] = set()
    rows = np.empty((spec.n, spec.d))
    budget = REDRAW_BUDGET_FACTOR * spec.n
    for i in range(spec.n):
        while True:
            if budget == 0:
                raise GenerationError(
                    f"could not draw {spec.n} distinct samples (kind={spec.kind}, d={spec.d})"
                )
            budget -= 1
            if spec.kind == "binary":
                if rng.random() < spec.heavy_fraction:
                    k = int(rng.integers(heavy_lo, heavy_hi))
                else:
                    k = int(rng.integers(light_lo, light_hi))
                active = rng.choice(spec.d, size=k, replace=False,
                                    p=weights[labels[i]])
                x = np.zeros(spec.d)
                x[active] = 1.0
            else:
                raw = centers[labels[i]] + spec.blob_std * rng.standard_normal(spec.d)
                k = np.clip(np.rint(raw * (spec.levels - 1)), 0, spec.levels - 1)
                x = k / (spec.levels - 1) + 0.0  # clears IEEE negative zeros
            key = x.tobytes()
            if key not in seen:
                seen.add(key)
                rows[i] = x
                break

    ids = np.arange(spec.id_offset, spec.id_offset + spec.n, dtype=np.int64)
    if spec.task == "survival":
        # event times keyed to the class so the risk model is learnable
        times = rng.exponential(scale=0.5 + labels.astype(np.float64)) + 1e-3
        events = rng.random(spec.n) < spec.event_prob
        if not events.any():
            events[0] = True
        y = (times, events)
    else:
        y = labels.astype(np.int64)
    return Dataset(rows, y, ids, np.full(spec.n, -1, dtype=np.int64), spec.task)


def _read_exact(f, n: int, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated file: wanted {n} bytes, got {len(buf)}", offset)
    return buf


def _open_maybe_gz(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def load_idx_images(path, labels_path, limit: int | None = None,
                    id_offset: int = 0) -> Dataset:
    """Load an IDX image/label pair as a flat grid-prior dataset.

    Pixels are scaled to ``k/255`` so each sample is exactly a member of the
    256-level grid prior.  Duplicate images within the loaded selection are
    dropped to keep the pooled dataset distinct.
    """
    with _open_maybe_gz(path) as f:
        magic, n_images, n_rows, n_cols = struct.unpack(">IIII", _read_exact(f, 16, 0))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x}", 0)
        n_take = n_images if limit is None else min(limit, n_images)
        pixels = np.frombuffer(
            _read_exact(f, n_take * n_rows * n_cols, 16), dtype=np.uint8
        )
    with _open_maybe_gz(labels_path) as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, 0))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x}", 0)
        if n_labels != n_images:
            raise IdxFormatError(
                f"label count {n_labels} != image count {n_images}", 4)
        raw_labels = np.frombuffer(_read_exact(f, n_take, 8), dtype=np.uint8)

    X = pixels.reshape(n_take, n_rows * n_cols).astype(np.float64) / 255.0
    labels = raw_labels.astype(np.int64)
    keep, seen = [], set()
    for i in range(n_take):
        key = X[i].tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(i)
    keep = np.array(keep, dtype=np.int64)
    ids = np.arange(id_offset, id_offset + len(keep), dtype=np.int64)
    return Dataset(X[keep], labels[keep], ids,
                   np.full(len(keep), -1, dtype=np.int64), "classification")


def partition_iid(dataset: Dataset, n_clients: int, seed: int,
                  samples_per_client: int | None = None) -> Partition:
    """Uniform-at-random split into equally sized client datasets."""
    if samples_per_client is None:
        samples_per_client = len(dataset) // n_clients
    need = n_clients * samples_per_client
    if need > len(dataset):
        raise PartitionError(
            f"need {need} samples for {n_clients} clients but pool has {len(dataset)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    order = rng.permutation(len(dataset))[:need]
    assignments = {
        int(dataset.sample_ids[row]): pos // samples_per_client
        for pos, row in enumerate(order)
    }
    return Partition(assignments, n_clients)


def partition_dirichlet(dataset: Dataset, n_clients: int, alpha: float, seed: int,
                        samples_per_client: int | None = None) -> Partition:
    """Label-skewed split: each client's label mix follows a Dirichlet draw.

    For client ``k`` a proportion vector ``q`` is drawn from
    ``Dirichlet(alpha * 1)``; ``floor(q_l * n_k)`` samples of each label are
    taken from that label's pool, and the remainder is filled one by one from
    the most probable labels that still have stock.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if dataset.task != "classification":
        raise PartitionError("label-skewed partitioning needs class labels")
    if samples_per_client is None:
        samples_per_client = len(dataset) // n_clients
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD112]))
    n_labels = dataset.n_classes
    pools = [
        list(rng.permutation(np.sort(dataset.sample_ids[dataset.labels == l])))
        for l in range(n_labels)
    ]
    assignments: dict[int, int] = {}
    for k in range(n_clients):
        q = rng.dirichlet(np.full(n_labels, alpha))
        want = np.floor(q * samples_per_client).astype(int)
        taken = 0
        for l in range(n_labels):
            grab = min(want[l], len(pools[l]))
            for _ in range(grab):
                assignments[int(pools[l].pop())] = k
            taken += grab
        # fill the remainder from the most probable labels with stock left
        order = np.argsort(-q, kind="stable")
        while taken < samples_per_client:
            progressed = False
            for l in order:
                if taken == samples_per_client:
                    break
                if pools[l]:
                    assignments[int(pools[l].pop())] = k
                    taken += 1
                    progressed = True
            if not progressed:
                raise PartitionError(
                    f"label pools exhausted for client {k}: alpha={alpha}, "
                    f"n_clients={n_clients}, requested={samples_per_client}, "
                    f"short by {samples_per_client - taken}")
    return Partition(assignments, n_clients)
