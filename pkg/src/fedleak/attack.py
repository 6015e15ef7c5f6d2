"""Update-disaggregation attack on aggregated FedAvg iterates.

The attack reads nothing but the sequence of aggregated models and the data
prior.  It proceeds in three steps:

1. sample recovery: for every training, round and neuron, the ratio of the
   round's weight-row delta to its bias delta is a genuine sample whenever a
   single sample dominates the neuron's round-level activation set; prior
   membership filters the candidates and snapping puts them exactly on the
   prior lattice;
2. activation-set reconstruction: greedy orthogonal matching pursuit
   expresses a round's extended weight delta as a short linear combination
   of recovered samples, accepting only near-exact decompositions;
3. grouping: reconstructed sets whose round-start-active subset is known to
   be single-client connect their members in a graph; connected components
   are the inferred per-client groups, grown to a fixed point.

A k-means clustering of the recovered samples serves as the naive grouping
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import DataPrior
from .federated import TrainingTrace

__all__ = [
    "DELTA_B_MIN",
    "RecoveredSet",
    "ReconstructedActivation",
    "GroupingGraph",
    "UnionFind",
    "AttackResult",
    "recover_samples",
    "omp_reconstruct",
    "build_grouping_graph",
    "kmeans_baseline",
    "run_attack",
]

# Ratios with |delta b| at or below this are skipped as numerically void.
DELTA_B_MIN = 1e-12

DEFAULT_N_MAX = 20
DEFAULT_RESIDUAL_TOL = 1e-6


def _materialize(source) -> TrainingTrace:
    if isinstance(source, TrainingTrace):
        return source
    from .trace_io import load_trace

    return load_trace(source)


def extended_iterates(trace: TrainingTrace) -> np.ndarray:
    """First-layer extended weights per iterate, shape (t_max+1, H, d+1).

    This is the attacker's entire view of a trace; nothing else on the trace
    is ever read by the attack.
    """
    return np.stack([p.extended_first_layer() for p in trace.iterates])


@dataclass
class RecoveredSet:
    """Deduplicated recovered samples with first-recovery provenance."""

    vectors: np.ndarray                     # (N, d) snapped onto the prior
    provenance: list[tuple[int, int, int]]  # (training, round, neuron)
    prior: DataPrior

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def extended(self) -> np.ndarray:
        """Samples with a trailing 1, the OMP atom matrix (N, d+1)."""
        return np.concatenate(
            [self.vectors, np.ones((len(self), 1))], axis=1)


class _RecoveredBuilder:
    def __init__(self, prior: DataPrior, dim: int):
        self.prior = prior
        self.dim = dim
        self.rows: list[np.ndarray] = []
        self.provenance: list[tuple[int, int, int]] = []
        self._index: dict[bytes, int] = {}

    def add(self, candidate: np.ndarray, key: tuple[int, int, int]) -> int:
        snapped = self.prior.snap(candidate)
        dedup = self.prior.dedup_key(snapped)
        if dedup not in self._index:
            self._index[dedup] = len(self.rows)
            self.rows.append(snapped)
            self.provenance.append(key)
        return self._index[dedup]

    def build(self) -> RecoveredSet:
        vectors = (np.stack(self.rows) if self.rows
                   else np.empty((0, self.dim)))
        return RecoveredSet(vectors, self.provenance, self.prior)


def recover_samples(traces: Sequence, prior: DataPrior,
                    delta_b_min: float = DELTA_B_MIN) -> RecoveredSet:
    """Step 1: prior-filtered ratios of round-level update deltas.

    ``traces`` may hold in-memory traces or paths to trace files; candidates
    are deduplicated globally across all trainings.
    """
    builder = None
    for training_idx, source in enumerate(traces):
        trace = _materialize(source)
        ext = extended_iterates(trace)
        d = ext.shape[2] - 1
        if builder is None:
            builder = _RecoveredBuilder(prior, d)
        elif builder.dim != d:
            raise ValueError("traces disagree on the data dimension")
        for t in range(1, ext.shape[0]):
            delta = ext[t] - ext[t - 1]
            db = delta[:, d]
            usable = np.flatnonzero(np.abs(db) > delta_b_min)
            if usable.size == 0:
                continue
            ratios = delta[usable, :d] / db[usable, None]
            members = prior.membership_matrix(ratios)
            for j in np.flatnonzero(members):
                builder.add(ratios[j], (training_idx, t, int(usable[j])))
    if builder is None:
        raise ValueError("need at least one trace")
    return builder.build()


@dataclass
class ReconstructedActivation:
    """An accepted sparse decomposition of one round/neuron update."""

    key: tuple[int, int, int]              # (training, round, neuron)
    member_indices: np.ndarray             # indices into the recovered set
    coefficients: np.ndarray
    residual: float                        # relative to the update norm
    first_activation_subset: np.ndarray    # members active at round start


def _omp_solve(atoms: np.ndarray, atom_norms: np.ndarray, target: np.ndarray,
               n_max: int, tol: float):
    """Greedy pursuit with an incrementally updated QR factorization.

    ``atoms`` is (d+1, N).  Returns (support, coefficients, relative
    residual); rank-deficient selections are dropped and pursuit continues.
    """
    target_norm = np.linalg.norm(target)
    res = target.copy()
    n_atoms = atoms.shape[1]
    Q = np.empty((atoms.shape[0], min(n_max, n_atoms)))
    R = np.zeros((Q.shape[1], Q.shape[1]))
    qty = np.empty(Q.shape[1])
    blocked = np.zeros(n_atoms, dtype=bool)
    support: list[int] = []

    while len(support) < n_max:
        rel = np.linalg.norm(res) / target_norm
        if rel < tol:
            break
        corr = np.abs(atoms.T @ res) / atom_norms
        corr[blocked] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= 0.0:
            break
        blocked[j] = True
        k = len(support)
        v = atoms[:, j].copy()
        coeffs = Q[:, :k].T @ v
        v -= Q[:, :k] @ coeffs
        norm_v = np.linalg.norm(v)
        if norm_v <= 1e-12 * atom_norms[j]:
            continue  # atom lies in the current span: drop it, keep going
        Q[:, k] = v / norm_v
        R[:k, k] = coeffs
        R[k, k] = norm_v
        qty[k] = Q[:, k] @ target
        support.append(j)
        res -= Q[:, k] * (Q[:, k] @ res)

    k = len(support)
    if k == 0:
        return np.empty(0, dtype=np.int64), np.empty(0), 1.0
    lam = np.linalg.solve(R[:k, :k], qty[:k])
    rel = np.linalg.norm(res) / target_norm
    return np.array(support, dtype=np.int64), lam, float(rel)


def omp_reconstruct(trace, recovered: RecoveredSet,
                    n_max: int = DEFAULT_N_MAX,
                    residual_tol: float = DEFAULT_RESIDUAL_TOL,
                    training_idx: int = 0) -> list[ReconstructedActivation]:
    """Step 2: per (round, neuron) sparse decomposition over recovered samples.

    A decomposition is accepted when its relative residual is below
    ``residual_tol`` and the implied bias identity (coefficients summing to
    the bias delta) holds at the same scale; for accepted sets the subset of
    members already active at the round-start parameters is computed from
    the previous iterate.
    """
    if len(recovered) == 0:
        raise ValueError("recovered set is empty")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    trace = _materialize(trace)
    ext = extended_iterates(trace)
    d = ext.shape[2] - 1
    if recovered.vectors.shape[1] != d:
        raise ValueError("recovered samples and trace disagree on dimension")

    atoms = np.ascontiguousarray(recovered.extended.T)  # (d+1, N)
    atom_norms = np.linalg.norm(atoms, axis=0)
    results = []
    for t in range(1, ext.shape[0]):
        delta = ext[t] - ext[t - 1]
        norms = np.linalg.norm(delta, axis=1)
        prev = ext[t - 1]
        for h in np.flatnonzero(norms > 0.0):
            target = delta[h]
            support, lam, rel = _omp_solve(atoms, atom_norms, target,
                                           n_max, residual_tol)
            if support.size == 0 or rel >= residual_tol:
                continue
            if abs(lam.sum() - target[d]) > residual_tol * norms[h]:
                continue
            keep = lam != 0.0
            support, lam = support[keep], lam[keep]
            if support.size == 0:
                continue
            # members already activating the neuron at round start
            start_pre = atoms[:, support].T @ prev[h]
            results.append(ReconstructedActivation(
                key=(training_idx, t, int(h)),
                member_indices=support,
                coefficients=lam,
                residual=rel,
                first_activation_subset=support[start_pre > 0],
            ))
    return results


class UnionFind:
    """Disjoint sets over 0..n-1 with path compression and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: int, y: int) -> bool:
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return False
        if self.size[rx] < self.size[ry]:
            rx, ry = ry, rx
        self.parent[ry] = rx
        self.size[rx] += self.size[ry]
        return True

    def components(self) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for x in range(len(self.parent)):
            groups.setdefault(self.find(x), []).append(x)
        return sorted(groups.values())


@dataclass
class GroupingGraph:
    """Connected components over recovered-sample indices."""

    n_nodes: int
    components: list[list[int]]
    n_merges: int
    n_sweeps: int

    def labels(self) -> np.ndarray:
        out = np.empty(self.n_nodes, dtype=np.int64)
        for label, comp in enumerate(self.components):
            out[comp] = label
        return out


def build_grouping_graph(reconstructions: Iterable[ReconstructedActivation],
                         recovered: RecoveredSet) -> GroupingGraph:
    """Step 3: same-client edges grown to a fixed point.

    Seed pass: a reconstruction whose round-start-active subset is a single
    sample links all its members.  Then, repeatedly, any reconstruction whose
    round-start subset already sits inside one component links all its
    members, until a full sweep adds nothing.
    """
    uf = UnionFind(len(recovered))
    recons = sorted(reconstructions, key=lambda r: r.key)
    merges = 0

    def link_all(members: np.ndarray) -> int:
        done = 0
        first = int(members[0])
        for m in members[1:]:
            done += uf.union(first, int(m))
        return done

    for rec in recons:
        if len(rec.first_activation_subset) == 1:
            merges += link_all(rec.member_indices)

    sweeps = 0
    while True:
        sweeps += 1
        added = 0
        for rec in recons:
            subset = rec.first_activation_subset
            if len(subset) == 0:
                continue
            roots = {uf.find(int(m)) for m in subset}
            if len(roots) == 1:
                added += link_all(rec.member_indices)
        merges += added
        if added == 0:
            break
    return GroupingGraph(len(recovered), uf.components(), merges, sweeps)


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(len(X))]
    dist2 = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = dist2.sum()
        if total <= 0:
            centers[i] = X[rng.integers(len(X))]
            continue
        centers[i] = X[rng.choice(len(X), p=dist2 / total)]
        dist2 = np.minimum(dist2, ((X - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans_baseline(recovered: RecoveredSet | np.ndarray, n_clusters: int,
                    seed: int, n_restarts: int = 20,
                    max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best inertia of 20 restarts.

    An emptied cluster is re-seeded at the point farthest from its current
    center assignment.
    """
    X = recovered.vectors if isinstance(recovered, RecoveredSet) else np.asarray(recovered)
    if len(X) < n_clusters:
        raise ValueError("need at least as many samples as clusters")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6A3A]))
    best_labels, best_inertia = None, np.inf
    for _ in range(n_restarts):
        centers = _kmeans_pp_init(X, n_clusters, rng)
        labels = np.zeros(len(X), dtype=np.int64)
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            for c in range(n_clusters):
                rows = new_labels == c
                if rows.any():
                    centers[c] = X[rows].mean(axis=0)
                else:
                    farthest = int(d2.min(axis=1).argmax())
                    centers[c] = X[farthest]
                    new_labels[farthest] = c
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        inertia = float(((X - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


@dataclass
class AttackResult:
    """Everything the three steps produced for one set of traces."""

    recovered: RecoveredSet
    reconstructions: list[ReconstructedActivation]
    graph: GroupingGraph
    baseline_labels: np.ndarray | None = None
    trace_p_censored: list[float] = field(default_factory=list)


def run_attack(traces: Sequence, prior: DataPrior,
               n_max: int = DEFAULT_N_MAX,
               residual_tol: float = DEFAULT_RESIDUAL_TOL,
               delta_b_min: float = DELTA_B_MIN,
               baseline_clusters: int | None = None,
               baseline_seed: int = 0) -> AttackResult:
    """All three attack steps over a set of trainings.

    ``traces`` may be in-memory traces or paths; files are loaded one at a
    time per pass so large grids never sit in memory at once.
    """
    recovered = recover_samples(traces, prior, delta_b_min)
    reconstructions: list[ReconstructedActivation] = []
    p_censored = []
    if len(recovered) > 0:
        for idx, source in enumerate(traces):
            trace = _materialize(source)
            p_censored.append(trace.p_censored)
            reconstructions.extend(
                omp_reconstruct(trace, recovered, n_max, residual_tol,
                                training_idx=idx))
    else:
        p_censored = [_materialize(s).p_censored for s in traces]
    graph = build_grouping_graph(reconstructions, recovered)
    baseline = None
    if baseline_clusters is not None and len(recovered) >= baseline_clusters:
        baseline = kmeans_baseline(recovered, baseline_clusters, baseline_seed)
    return AttackResult(recovered, reconstructions, graph, baseline, p_censored)
