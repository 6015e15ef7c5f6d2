"""Evaluation quantities: recovery ratios, V-measure family, censoring rate.

These functions see ground truth (sample-to-client ownership) and therefore
live strictly on the evaluation side; attack code never calls them.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .attack import AttackResult, RecoveredSet
from .data import Dataset

__all__ = [
    "AttackReportMetrics",
    "compute_ratios",
    "v_measure",
    "labels_from_components",
    "match_recovered",
    "evaluate_attack",
]


@dataclass(frozen=True)
class AttackReportMetrics:
    """One experiment's attack quality measures.

    ``v_normalized`` is exactly ``rho_recovered * v_recovered``;
    ``rho_component`` is reported unclamped and may exceed 1 when inferred
    components outgrow a client dataset.
    """

    rho_recovered: float
    rho_matched: float
    rho_component: float
    homogeneity: float
    completeness: float
    v_recovered: float
    v_normalized: float
    p_censored: float = 0.0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def compute_ratios(recovered: RecoveredSet | int,
                   components: Sequence[Sequence[int]],
                   pooled_size: int, client_size: float,
                   n_clients: int) -> tuple[float, float, float]:
    """(recovered, matched, component) ratios of an attack partition.

    * recovered: recovered samples over the pooled dataset size;
    * matched: recovered samples grouped with at least one other sample,
      over the pooled dataset size;
    * component: mean size of the ``n_clients`` largest components over the
      mean client dataset size.
    """
    n_recovered = len(recovered) if not isinstance(recovered, int) else recovered
    sizes = sorted((len(c) for c in components), reverse=True)
    if sum(sizes) != n_recovered:
        raise ValueError("components must partition the recovered indices")
    rho_recovered = n_recovered / pooled_size
    rho_matched = sum(s for s in sizes if s > 1) / pooled_size
    rho_component = sum(sizes[:n_clients]) / n_clients / client_size
    return rho_recovered, rho_matched, rho_component


def _entropy(counts: np.ndarray, total: int) -> float:
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def v_measure(predicted_components: Sequence[Sequence[int]],
              true_labels: Sequence[int]) -> tuple[float, float, float]:
    """Entropy-based homogeneity, completeness and their harmonic mean.

    ``true_labels[i]`` is the real client of recovered sample ``i``;
    ``predicted_components`` partitions those indices.  Conventions: a zero
    class entropy gives homogeneity 1, a zero cluster entropy gives
    completeness 1, and V is 0 when both scores vanish.
    """
    true_labels = np.asarray(true_labels)
    pred = labels_from_components(predicted_components, len(true_labels))
    n = len(true_labels)
    if n == 0:
        return 1.0, 1.0, 1.0

    classes, class_idx = np.unique(true_labels, return_inverse=True)
    clusters, cluster_idx = np.unique(pred, return_inverse=True)
    contingency = np.zeros((len(classes), len(clusters)))
    np.add.at(contingency, (class_idx, cluster_idx), 1.0)

    h_class = _entropy(contingency.sum(axis=1), n)
    h_cluster = _entropy(contingency.sum(axis=0), n)
    nz = contingency > 0
    joint = contingency[nz] / n
    h_class_given_cluster = float(
        -(joint * np.log(contingency[nz] / contingency.sum(axis=0)[np.nonzero(nz)[1]])).sum())
    h_cluster_given_class = float(
        -(joint * np.log(contingency[nz] / contingency.sum(axis=1)[np.nonzero(nz)[0]])).sum())

    homogeneity = 1.0 - h_class_given_cluster / h_class if h_class > 0 else 1.0
    completeness = 1.0 - h_cluster_given_class / h_cluster if h_cluster > 0 else 1.0
    if homogeneity + completeness == 0.0:
        v = 0.0
    else:
        v = 2.0 * homogeneity * completeness / (homogeneity + completeness)
    return homogeneity, completeness, v


def labels_from_components(components: Sequence[Sequence[int]], n: int) -> np.ndarray:
    out = np.full(n, -1, dtype=np.int64)
    for label, comp in enumerate(components):
        for i in comp:
            if out[i] != -1:
                raise ValueError(f"index {i} appears in two components")
            out[i] = label
    if (out == -1).any():
        raise ValueError("components do not cover every index")
    return out


def match_recovered(recovered: RecoveredSet, dataset: Dataset):
    """Ground-truth identity of each recovered vector.

    Returns (sample_ids, client_ids), both -1 where a recovered vector does
    not correspond to any dataset sample (which the soundness property says
    should never happen on lattice priors).
    """
    # +0.0 canonicalizes IEEE signed zeros so byte keys compare by value
    index = {(dataset.X[i] + 0.0).tobytes(): i for i in range(len(dataset))}
    sample_ids = np.full(len(recovered), -1, dtype=np.int64)
    client_ids = np.full(len(recovered), -1, dtype=np.int64)
    for r in range(len(recovered)):
        row = index.get((recovered.vectors[r] + 0.0).tobytes())
        if row is not None:
            sample_ids[r] = dataset.sample_ids[row]
            client_ids[r] = dataset.client_ids[row]
    return sample_ids, client_ids


def evaluate_attack(result: AttackResult, dataset: Dataset,
                    n_clients: int, client_size: float) -> AttackReportMetrics:
    """Score an attack run against the ground-truth pooled dataset.

    Recovered vectors absent from the dataset are excluded from the
    V-measure (the report still counts them in no ratio's numerator since
    they cannot be matched to a client).
    """
    _, client_ids = match_recovered(result.recovered, dataset)
    rho_rec, rho_match, rho_comp = compute_ratios(
        result.recovered, result.graph.components, len(dataset),
        client_size, n_clients)

    known = client_ids >= 0
    if known.all():
        components = result.graph.components
        labels = client_ids
    else:
        # re-index components onto the matched subset
        keep = np.flatnonzero(known)
        remap = {int(old): new for new, old in enumerate(keep)}
        components = [
            [remap[i] for i in comp if i in remap]
            for comp in result.graph.components
        ]
        components = [c for c in components if c]
        labels = client_ids[keep]
    homogeneity, completeness, v_rec = v_measure(components, labels)
    p_censored = float(np.mean(result.trace_p_censored)) if result.trace_p_censored else 0.0
    return AttackReportMetrics(
        rho_recovered=rho_rec,
        rho_matched=rho_match,
        rho_component=rho_comp,
        homogeneity=homogeneity,
        completeness=completeness,
        v_recovered=v_rec,
        v_normalized=rho_rec * v_rec,
        p_censored=p_censored,
    )


def evaluate_clustering(labels_pred: np.ndarray, client_ids: np.ndarray,
                        n_recovered: int, pooled_size: int) -> dict:
    """V-measure scores of a flat clustering (the k-means baseline)."""
    known = client_ids >= 0
    comps: dict[int, list[int]] = {}
    for i in np.flatnonzero(known):
        comps.setdefault(int(labels_pred[i]), []).append(int(i))
    # re-index onto the matched subset
    keep = np.flatnonzero(known)
    remap = {int(old): new for new, old in enumerate(keep)}
    components = [[remap[i] for i in comp] for comp in comps.values()]
    h, c, v = v_measure(components, client_ids[keep])
    rho = n_recovered / pooled_size
    return {"homogeneity": h, "completeness": c, "v_recovered": v,
            "v_normalized": rho * v}
