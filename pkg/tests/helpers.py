"""Shared test oracles and builders used by several test modules."""

import math
from collections import Counter

import numpy as np

from fedleak.attack import RecoveredSet, ReconstructedActivation
from fedleak.data import DataPrior


def contingency_oracle(components, labels):
    """Independent entropy computation straight from the definitions."""
    labels = list(labels)
    n = len(labels)
    pred = [None] * n
    for ci, comp in enumerate(components):
        for i in comp:
            pred[i] = ci
    class_counts = Counter(labels)
    cluster_counts = Counter(pred)
    joint = Counter(zip(labels, pred))

    def entropy(counts):
        return -sum(c / n * math.log(c / n) for c in counts.values() if c)

    h_class, h_cluster = entropy(class_counts), entropy(cluster_counts)
    h_c_given_k = -sum(
        c / n * math.log(c / cluster_counts[k]) for (_, k), c in joint.items())
    h_k_given_c = -sum(
        c / n * math.log(c / class_counts[cl]) for (cl, _), c in joint.items())
    h = 1.0 - h_c_given_k / h_class if h_class > 0 else 1.0
    c = 1.0 - h_k_given_c / h_cluster if h_cluster > 0 else 1.0
    v = 0.0 if h + c == 0 else 2 * h * c / (h + c)
    return h, c, v


def oracle_true_grouping_inputs(trace, pooled, prior=None):
    """Ground-truth activation sets shaped as grouping-graph inputs.

    Builds a recovered set holding every pooled sample and one
    reconstruction per nonempty oracle round-level set, with the true
    round-start-active subset; also returns the per-node true client labels.
    """
    log = trace.oracle_log
    id_list = sorted(int(s) for s in pooled.sample_ids)
    node = {s: i for i, s in enumerate(id_list)}
    rec = RecoveredSet(
        pooled.X[pooled.rows_of_ids(id_list)],
        [(0, 0, 0)] * len(id_list),
        prior or DataPrior.binary())
    recons = []
    for t in range(trace.config.t_max):
        for h in range(trace.config.hidden_neurons):
            ids = log.round_sets[t][h]
            if ids.size == 0:
                continue
            members = np.array([node[int(s)] for s in ids], dtype=np.int64)
            subset = np.array([node[int(s)] for s in log.round_start_active[t][h]],
                              dtype=np.int64)
            recons.append(ReconstructedActivation(
                key=(0, t + 1, h), member_indices=members,
                coefficients=np.ones(len(members)), residual=0.0,
                first_activation_subset=subset))
    owner = {node[int(s)]: int(c)
             for s, c in zip(pooled.sample_ids, pooled.client_ids)}
    labels = [owner[i] for i in range(len(id_list))]
    return rec, recons, labels
