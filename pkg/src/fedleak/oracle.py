"""Ground-truth verification layer over oracle-logged trainings.

Every check here recomputes quantities along a second, deliberately
independent code path and compares them with what the simulator or the
theory predicts.  :func:`reference_lambdas` re-derives the per-sample
first-layer coefficients from scratch (its own forward pass, its own loss
derivatives) precisely so that the linear-decomposition identities are
confirmed by two implementations rather than one.  Nothing in this module is
reachable from attack code.

Deviations are reported relative to ``max(|analytic|, |recomputed|)``.  A
difference below the float-noise resolution of its own computation (machine
epsilon times the magnitudes that entered it, e.g. one-ulp dust left on a
never-activated neuron by K-way averaging) counts as zero: the identities
are exact in exact arithmetic, and a relative error on pure rounding dust is
meaningless.  Any genuine defect sits many orders of magnitude above this
gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import model
from .data import DataPrior, Dataset
from .federated import TrainingTrace

__all__ = [
    "reference_lambdas",
    "DecompositionReport",
    "CoverageReport",
    "IsolatedRecoveryReport",
    "verify_batch_decomposition",
    "verify_round_decomposition",
    "verify_start_coverage",
    "verify_isolated_recovery",
]

# differences below NOISE_GATE_OPS * eps * (magnitudes entering the
# computation) are indistinguishable from rounding and count as zero
NOISE_GATE_OPS = 64
RATIO_DELTA_B_MIN = 1e-12


def _softmax_rows(u: np.ndarray) -> np.ndarray:
    shifted = np.exp(u - u.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _head_forward_single(params: model.ModelParams, z: np.ndarray):
    """One sample through the head, keeping pre-activations."""
    pres = []
    a = z
    for i, (V, c) in enumerate(params.head):
        p = V @ a + c
        pres.append(p)
        a = p if i == len(params.head) - 1 else np.where(p > 0, p, 0.0)
    return a, pres


def _head_pullback_single(params: model.ModelParams, pres, g: np.ndarray):
    """Pull a gradient at the head output back to the first-layer output."""
    for i in range(len(params.head) - 1, -1, -1):
        g = params.head[i].V.T @ g
        if i > 0:
            g = g * (pres[i - 1] > 0)
    return g


def reference_lambdas(params: model.ModelParams, X: np.ndarray, y,
                      loss_kind: str) -> np.ndarray:
    """Per-sample, per-neuron linear coefficients, derived from scratch.

    Returns an (n, H) matrix: entry (i, h) is the derivative of the summed
    batch loss w.r.t. sample i's output of neuron h, gated to zero when the
    sample does not strictly activate the neuron.  Deliberately shares no
    computation with :mod:`fedleak.model`.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    H = params.W.shape[0]
    pre1 = np.empty((n, H))
    outputs = []
    head_pres = []
    for i in range(n):
        pre1[i] = params.W @ X[i] + params.b
        z = np.where(pre1[i] > 0, pre1[i], 0.0)
        out, pres = _head_forward_single(params, z)
        outputs.append(out)
        head_pres.append(pres)
    outputs = np.stack(outputs)

    if loss_kind == "cross_entropy":
        labels = np.asarray(y, dtype=np.int64)
        probs = _softmax_rows(outputs)
        dout = probs.copy()
        dout[np.arange(n), labels] -= 1.0
    elif loss_kind == "cox":
        times = np.asarray(y[0], dtype=np.float64)
        events = np.asarray(y[1]).astype(bool)
        s = outputs[:, 0]
        dout = np.zeros_like(outputs)
        for i in np.flatnonzero(events):
            risk = times >= times[i]
            w = np.where(risk, np.exp(s - s[risk].max()), 0.0)
            dout[:, 0] += w / w.sum()
            dout[i, 0] -= 1.0
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    lam = np.empty((n, H))
    for i in range(n):
        dz = _head_pullback_single(params, head_pres[i], dout[i])
        lam[i] = np.where(pre1[i] > 0, dz, 0.0)
    return lam


@dataclass
class DecompositionReport:
    """Worst relative deviation of a linear-decomposition identity."""

    max_deviation: float
    n_checked: int
    worst_key: tuple | None = None

    def to_dict(self) -> dict:
        return {"max_deviation": self.max_deviation, "n_checked": self.n_checked,
                "worst_key": list(self.worst_key) if self.worst_key else None}


def _deviation(analytic_W, analytic_b, rec_W, rec_b, noise_scale) -> float:
    """Per-neuron relative deviation with a float-noise gate; max over neurons.

    ``noise_scale`` holds, per neuron, the magnitudes that entered the two
    computations; differences within ``NOISE_GATE_OPS`` ulps of that scale
    are rounding, not deviation.
    """
    num = np.maximum(np.abs(analytic_W - rec_W).max(axis=1),
                     np.abs(analytic_b - rec_b))
    scale = np.maximum(np.abs(analytic_W).max(axis=1), np.abs(rec_W).max(axis=1))
    scale = np.maximum(scale, np.maximum(np.abs(analytic_b), np.abs(rec_b)))
    gate = NOISE_GATE_OPS * np.finfo(np.float64).eps * noise_scale
    dev = np.where(num <= gate, 0.0, num / (scale + 1e-300))
    return float(dev.max())


def _require_log(trace: TrainingTrace):
    if trace.oracle_log is None:
        raise ValueError("this check needs a trace recorded with oracle logging")
    return trace.oracle_log


def _batch_arrays(dataset: Dataset, ids: np.ndarray):
    rows = dataset.rows_of_ids(ids)
    return dataset.X[rows], dataset.label_slice(rows)


def verify_batch_decomposition(trace: TrainingTrace, dataset: Dataset) -> DecompositionReport:
    """Batch gradients equal their activation-set linear decomposition.

    For every round, client and local update, the local parameter trajectory
    is replayed from the trace; the analytic first-layer gradient is compared
    with ``sum(lam * x) / sum(lam)`` built from independently recomputed
    coefficients.
    """
    log = _require_log(trace)
    cfg = trace.config
    worst, worst_key, checked = 0.0, None, 0
    for t in range(1, cfg.t_max + 1):
        for k in range(cfg.n_clients):
            theta = trace.iterates[t - 1]
            for i in range(cfg.n_updates):
                X, y = _batch_arrays(dataset, log.batch_ids[t - 1, k, i])
                grads = model.gradients(theta, X, y, cfg.loss_kind)
                lam = reference_lambdas(theta, X, y, cfg.loss_kind)
                rec_W = lam.T @ X
                rec_b = lam.sum(axis=0)
                mass = np.abs(lam.T) @ np.abs(X).max(axis=1) + np.abs(lam).sum(axis=0)
                dev = _deviation(grads.dW, grads.db, rec_W, rec_b, mass)
                checked += 1
                if dev > worst:
                    worst, worst_key = dev, (t, k, i)
                theta = model.apply_sgd_step(theta, grads, cfg.round_lr(t))
    return DecompositionReport(worst, checked, worst_key)


def verify_round_decomposition(trace: TrainingTrace, dataset: Dataset) -> DecompositionReport:
    """Aggregated round deltas equal -(lr/K) times the summed decomposition.

    Only meaningful for undefended runs: censoring removes client
    contributions from the aggregate by design.
    """
    log = _require_log(trace)
    cfg = trace.config
    if cfg.defense.active:
        raise ValueError("round-level decomposition only holds without a defense")
    if not cfg.strict_regime:
        raise ValueError("round-level decomposition assumes the strict regime "
                         "(uniform weights, fixed learning rate)")
    worst, worst_key, checked = 0.0, None, 0
    scale = -cfg.learning_rate / cfg.n_clients
    for t in range(1, cfg.t_max + 1):
        H, d = cfg.hidden_neurons, cfg.input_dim
        acc_W = np.zeros((H, d))
        acc_b = np.zeros(H)
        mass = np.zeros(H)
        for k in range(cfg.n_clients):
            theta = trace.iterates[t - 1]
            for i in range(cfg.n_updates):
                X, y = _batch_arrays(dataset, log.batch_ids[t - 1, k, i])
                lam = reference_lambdas(theta, X, y, cfg.loss_kind)
                acc_W += lam.T @ X
                acc_b += lam.sum(axis=0)
                mass += np.abs(lam.T) @ np.abs(X).max(axis=1) + np.abs(lam).sum(axis=0)
                theta = model.apply_sgd_step(
                    theta, model.gradients(theta, X, y, cfg.loss_kind),
                    cfg.learning_rate)
        delta_W = trace.iterates[t].W - trace.iterates[t - 1].W
        delta_b = trace.iterates[t].b - trace.iterates[t - 1].b
        # the delta differences stored parameters, so their own magnitude
        # bounds the achievable agreement
        param_scale = np.maximum(
            np.abs(trace.iterates[t - 1].extended_first_layer()).max(axis=1),
            np.abs(trace.iterates[t].extended_first_layer()).max(axis=1))
        dev = _deviation(delta_W, delta_b, scale * acc_W, scale * acc_b,
                         abs(scale) * mass + param_scale)
        checked += 1
        if dev > worst:
            worst, worst_key = dev, (t,)
    return DecompositionReport(worst, checked, worst_key)


@dataclass
class CoverageReport:
    """Round-start coverage: clients in a round-level activation set must
    also appear in its round-start-active subset."""

    n_violations: int
    n_nonempty_sets: int
    violations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n_violations": self.n_violations,
                "n_nonempty_sets": self.n_nonempty_sets,
                "violations": self.violations[:100]}


def verify_start_coverage(trace: TrainingTrace, dataset: Dataset) -> CoverageReport:
    log = _require_log(trace)
    cfg = trace.config
    owner = {int(s): int(c) for s, c in zip(dataset.sample_ids, dataset.client_ids)}
    violations = []
    nonempty = 0
    for t in range(cfg.t_max):
        for h in range(cfg.hidden_neurons):
            ids = log.round_sets[t][h]
            if ids.size == 0:
                continue
            nonempty += 1
            present = {owner[int(s)] for s in ids}
            at_start = {owner[int(s)] for s in log.round_start_active[t][h]}
            for k in sorted(present - at_start):
                violations.append((t + 1, h, k))
    return CoverageReport(len(violations), nonempty, violations)


@dataclass
class IsolatedRecoveryReport:
    """Singleton activation sets and how exactly their ratios recover them.

    ``n_recovered`` counts raw ratios within ``tolerance`` of the true
    sample.  A ratio can miss that bound yet still identify its sample
    exactly after prior snapping (a co-activated sample just below the
    coefficient threshold leaves ~1e-9 dust); ``n_snapped_exact`` counts
    those, which is the recovery-completeness property proper.
    """

    n_isolated: int
    n_recovered: int
    n_snapped_exact: int
    max_error: float
    all_prior_members: bool

    def to_dict(self) -> dict:
        return {"n_isolated": self.n_isolated, "n_recovered": self.n_recovered,
                "n_snapped_exact": self.n_snapped_exact,
                "max_error": self.max_error,
                "all_prior_members": self.all_prior_members}


def verify_isolated_recovery(trace: TrainingTrace, prior: DataPrior,
                             dataset: Dataset,
                             tolerance: float = 1e-9) -> IsolatedRecoveryReport:
    """Every oracle singleton with a usable bias delta yields its sample.

    Checks the raw ratio (before prior snapping) against the true sample in
    max norm, prior membership, and exact identity after snapping.
    """
    log = _require_log(trace)
    cfg = trace.config
    n_isolated = n_recovered = n_snapped = 0
    max_err = 0.0
    members_ok = True
    for t in range(1, cfg.t_max + 1):
        delta_W = trace.iterates[t].W - trace.iterates[t - 1].W
        delta_b = trace.iterates[t].b - trace.iterates[t - 1].b
        for h in range(cfg.hidden_neurons):
            ids = log.round_sets[t - 1][h]
            if ids.size != 1 or abs(delta_b[h]) <= RATIO_DELTA_B_MIN:
                continue
            n_isolated += 1
            ratio = delta_W[h] / delta_b[h]
            x = dataset.X[dataset.rows_of_ids(ids)[0]]
            err = float(np.abs(ratio - x).max())
            max_err = max(max_err, err)
            if err < tolerance:
                n_recovered += 1
            if (prior.snap(ratio) + 0.0).tobytes() == (x + 0.0).tobytes():
                n_snapped += 1
            members_ok = members_ok and prior.membership(ratio)
    return IsolatedRecoveryReport(n_isolated, n_recovered, n_snapped,
                                  max_err, members_ok)
