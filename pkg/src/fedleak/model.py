"""Two-part ReLU network with hand-derived gradients.

The model is a fully connected ReLU layer of ``H`` neurons feeding a small
MLP head (zero or more ReLU hidden layers plus a linear output).  All
gradients are computed explicitly rather than through an autodiff framework
so that the per-sample, per-neuron linear coefficients of the first-layer
gradient are directly available: for every neuron ``h`` the weight-row
gradient is ``sum_i lam[i, h] * x_i`` and the bias gradient is
``sum_i lam[i, h]``, where ``lam[i, h]`` is the loss derivative w.r.t. the
neuron's post-activation output, gated by whether sample ``i`` activates the
neuron.

Conventions used throughout:

* all arithmetic is float64,
* the ReLU subgradient at exactly 0 is 0 (strict ``> 0`` gates),
* batch losses are summed, not averaged, over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "LOSS_KINDS",
    "LAMBDA_THRESHOLD",
    "HeadLayer",
    "ModelParams",
    "Gradients",
    "FirstLayerGradient",
    "init_params",
    "forward",
    "loss",
    "gradients",
    "first_layer_gradients",
    "activation_mask",
    "batch_activation_set",
    "apply_sgd_step",
]

LOSS_KINDS = ("cross_entropy", "cox")

# Loss derivatives with absolute value at or below this threshold are treated
# as zero when deciding activation-set membership.  The gradient itself is
# never truncated.
LAMBDA_THRESHOLD = 1e-12


class HeadLayer(NamedTuple):
    """One affine head layer: ``z -> z @ V.T + c``."""

    V: np.ndarray  # (out, in)
    c: np.ndarray  # (out,)


@dataclass(frozen=True)
class ModelParams:
    """Parameters ``(W, b, phi)`` of the two-part model.

    ``W`` (H, d) and ``b`` (H,) form the fully connected first layer; the
    head layers hold the remaining parameters ``phi``.  Every head layer but
    the last is followed by a ReLU; the last is linear.  Instances are
    treated as immutable values: updates build new instances.
    """

    W: np.ndarray
    b: np.ndarray
    head: tuple[HeadLayer, ...]

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.ndim != 1:
            raise ValueError("W must be a matrix and b a vector")
        if self.W.shape[0] != self.b.shape[0]:
            raise ValueError(
                f"W has {self.W.shape[0]} rows but b has {self.b.shape[0]} entries"
            )
        fan_in = self.W.shape[0]
        for i, (V, c) in enumerate(self.head):
            if V.shape[1] != fan_in or V.shape[0] != c.shape[0]:
                raise ValueError(f"head layer {i} has inconsistent shape")
            fan_in = V.shape[0]

    @property
    def hidden_neurons(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.head[-1].V.shape[0]

    @property
    def phi(self) -> np.ndarray:
        """Head parameters as one flat vector."""
        return np.concatenate([np.concatenate([V.ravel(), c]) for V, c in self.head])

    def extended_weights(self, h: int) -> np.ndarray:
        """The (d+1)-vector concatenating neuron ``h``'s weight row and bias."""
        if not 0 <= h < self.hidden_neurons:
            raise ValueError(f"neuron index {h} out of range")
        return np.concatenate([self.W[h], [self.b[h]]])

    def extended_first_layer(self) -> np.ndarray:
        """All extended weights stacked, shape (H, d+1)."""
        return np.concatenate([self.W, self.b[:, None]], axis=1)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b, self.phi])

    @staticmethod
    def unflatten(
        vec: np.ndarray, d: int, hidden: int, head_widths: Sequence[int], n_outputs: int
    ) -> "ModelParams":
        pos = hidden * d
        W = vec[:pos].reshape(hidden, d).copy()
        b = vec[pos : pos + hidden].copy()
        pos += hidden
        layers = []
        fan_in = hidden
        for width in list(head_widths) + [n_outputs]:
            V = vec[pos : pos + width * fan_in].reshape(width, fan_in).copy()
            pos += width * fan_in
            c = vec[pos : pos + width].copy()
            pos += width
            layers.append(HeadLayer(V, c))
            fan_in = width
        if pos != vec.shape[0]:
            raise ValueError("flat vector length does not match the given dimensions")
        return ModelParams(W, b, tuple(layers))


class Gradients(NamedTuple):
    """Full gradient of a batch loss, plus the per-sample coefficients."""

    dW: np.ndarray  # (H, d)
    db: np.ndarray  # (H,)
    dhead: tuple[HeadLayer, ...]
    lam: np.ndarray  # (n, H) gated loss derivative per sample and neuron
    degenerate: bool


@dataclass(frozen=True)
class FirstLayerGradient:
    """First-layer gradient with its linear decomposition.

    ``lambdas[h]`` lists the ``(sample_id, coefficient)`` pairs of the batch
    samples that both activate neuron ``h`` and carry a nonzero loss
    derivative there; ``dW[h] == sum(coef * x)`` and ``db[h] == sum(coef)``
    over that list.
    """

    dW: np.ndarray
    db: np.ndarray
    lambdas: dict[int, list[tuple[int, float]]]


def init_params(
    rng: np.random.Generator,
    input_dim: int,
    hidden_neurons: int,
    head_widths: Sequence[int] = (),
    n_outputs: int = 2,
) -> ModelParams:
    """Uniform init: first layer in +-1/sqrt(d), head layers in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(input_dim)
    W = rng.uniform(-bound, bound, size=(hidden_neurons, input_dim))
    b = rng.uniform(-bound, bound, size=hidden_neurons)
    layers = []
    fan_in = hidden_neurons
    for width in list(head_widths) + [n_outputs]:
        hb = 1.0 / np.sqrt(fan_in)
        layers.append(
            HeadLayer(
                rng.uniform(-hb, hb, size=(width, fan_in)),
                rng.uniform(-hb, hb, size=width),
            )
        )
        fan_in = width
    return ModelParams(W, b, tuple(layers))


def _as_batch(X: np.ndarray, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"expected samples of dimension {d}, got shape {X.shape}")
    return X


def _forward_cached(params: ModelParams, X: np.ndarray):
    """Forward pass keeping every intermediate needed for backprop."""
    pre1 = X @ params.W.T + params.b  # (n, H)
    z = np.maximum(pre1, 0.0)
    acts = [z]
    pres = []
    a = z
    for i, (V, c) in enumerate(params.head):
        p = a @ V.T + c
        pres.append(p)
        a = p if i == len(params.head) - 1 else np.maximum(p, 0.0)
        acts.append(a)
    return pre1, acts, pres


def forward(
    params: ModelParams, x: np.ndarray, return_preactivations: bool = False
):
    """Predictions of the model, for one sample (1-D) or a batch (2-D).

    With ``return_preactivations`` the first-layer pre-activations
    ``W x + b`` are returned alongside the predictions.
    """
    X = _as_batch(x, params.input_dim)
    single = np.asarray(x).ndim == 1
    pre1, acts, _ = _forward_cached(params, X)
    out = acts[-1]
    if single:
        out, pre1 = out[0], pre1[0]
    if return_preactivations:
        return out, pre1
    return out


def _check_labels(y, n: int, loss_kind: str):
    if loss_kind == "cross_entropy":
        labels = np.asarray(y, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"expected {n} integer labels, got shape {labels.shape}")
        return labels
    if loss_kind == "cox":
        times = np.asarray(y[0], dtype=np.float64)
        events = np.asarray(y[1]).astype(bool)
        if times.shape != (n,) or events.shape != (n,):
            raise ValueError("survival labels must be (times, events) of batch length")
        return times, events
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _cross_entropy(out: np.ndarray, labels: np.ndarray):
    m = out.max(axis=1, keepdims=True)
    shifted = out - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    value = -log_probs[np.arange(out.shape[0]), labels].sum()
    dout = np.exp(log_probs)
    dout[np.arange(out.shape[0]), labels] -= 1.0
    return value, dout, False


def _cox_partial(out: np.ndarray, times: np.ndarray, events: np.ndarray):
    """Negative partial log-likelihood over admissible pairs.

    Risk sets use ``t_j >= t_i`` so the event sample is always admissible
    against itself; a batch with no events is degenerate (zero loss and
    gradient).
    """
    if out.shape[1] != 1:
        raise ValueError("survival loss requires a single model output")
    s = out[:, 0]
    ev = np.flatnonzero(events)
    if ev.size == 0:
        return 0.0, np.zeros_like(out), True
    at_risk = times[None, :] >= times[ev, None]  # (n_events, n)
    m = np.where(at_risk, s[None, :], -np.inf).max(axis=1, keepdims=True)
    exps = np.where(at_risk, np.exp(s[None, :] - m), 0.0)
    denom = exps.sum(axis=1, keepdims=True)
    value = -(s[ev] - (m[:, 0] + np.log(denom[:, 0]))).sum()
    dout = np.zeros_like(out)
    dout[ev, 0] -= 1.0
    dout[:, 0] += (exps / denom).sum(axis=0)
    return value, dout, False


def _loss_and_dout(params: ModelParams, X: np.ndarray, y, loss_kind: str):
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    pre1, acts, pres = _forward_cached(params, X)
    labels = _check_labels(y, X.shape[0], loss_kind)
    if loss_kind == "cross_entropy":
        value, dout, degenerate = _cross_entropy(acts[-1], labels)
    else:
        value, dout, degenerate = _cox_partial(acts[-1], *labels)
    return value, dout, degenerate, pre1, acts, pres


def loss(params: ModelParams, X: np.ndarray, y, loss_kind: str) -> tuple[float, bool]:
    """Batch loss (summed over samples) and a degenerate-batch flag.

    The flag is only ever True for a survival batch without events, whose
    loss and gradient are identically zero.
    """
    X = _as_batch(X, params.input_dim)
    value, _, degenerate, _, _, _ = _loss_and_dout(params, X, y, loss_kind)
    return float(value), degenerate


def gradients(params: ModelParams, X: np.ndarray, y, loss_kind: str) -> Gradients:
    """Analytic gradient of the summed batch loss w.r.t. every parameter."""
    X = _as_batch(X, params.input_dim)
    _, dout, degenerate, pre1, acts, pres = _loss_and_dout(params, X, y, loss_kind)

    G = dout
    dhead: list[HeadLayer] = []
    for i in range(len(params.head) - 1, -1, -1):
        V, _ = params.head[i]
        inp = acts[i]
        dhead.append(HeadLayer(G.T @ inp, G.sum(axis=0)))
        G = G @ V
        if i > 0:
            G = G * (pres[i - 1] > 0)
    dhead.reverse()

    lam = G * (pre1 > 0)  # (n, H): gated derivative w.r.t. the ReLU output
    dW = lam.T @ X
    db = lam.sum(axis=0)
    return Gradients(dW, db, tuple(dhead), lam, degenerate)


def first_layer_gradients(
    params: ModelParams,
    X: np.ndarray,
    y,
    loss_kind: str,
    sample_ids: Sequence[int] | None = None,
) -> FirstLayerGradient:
    """First-layer gradient together with its per-neuron linear decomposition."""
    X = _as_batch(X, params.input_dim)
    if sample_ids is None:
        sample_ids = np.arange(X.shape[0])
    sample_ids = np.asarray(sample_ids)
    g = gradients(params, X, y, loss_kind)
    listed = np.abs(g.lam) > LAMBDA_THRESHOLD
    lambdas = {
        h: [(int(sample_ids[i]), float(g.lam[i, h])) for i in np.flatnonzero(listed[:, h])]
        for h in range(params.hidden_neurons)
    }
    return FirstLayerGradient(g.dW, g.db, lambdas)


def activation_mask(params: ModelParams, X: np.ndarray, y, loss_kind: str) -> np.ndarray:
    """Batch-level activation sets for all neurons at once, as an (H, n) mask.

    ``mask[h, i]`` is True when sample ``i`` has a strictly positive
    pre-activation at neuron ``h`` and a loss derivative there above the
    zero threshold.
    """
    X = _as_batch(X, params.input_dim)
    g = gradients(params, X, y, loss_kind)
    pre1 = X @ params.W.T + params.b
    return ((pre1 > 0) & (np.abs(g.lam) > LAMBDA_THRESHOLD)).T


def batch_activation_set(
    params: ModelParams,
    X: np.ndarray,
    y,
    h: int,
    loss_kind: str,
    sample_ids: Sequence[int] | None = None,
) -> set[int]:
    """Samples of the batch that contribute linearly to neuron ``h``'s gradient."""
    if not 0 <= h < params.hidden_neurons:
        raise ValueError(f"neuron index {h} out of range")
    X = _as_batch(X, params.input_dim)
    if sample_ids is None:
        sample_ids = np.arange(X.shape[0])
    mask = activation_mask(params, X, y, loss_kind)
    return {int(np.asarray(sample_ids)[i]) for i in np.flatnonzero(mask[h])}


def apply_sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """One SGD step; returns new params, inputs untouched."""
    head = tuple(
        HeadLayer(V - lr * dV, c - lr * dc)
        for (V, c), (dV, dc) in zip(params.head, grads.dhead)
    )
    return ModelParams(params.W - lr * grads.dW, params.b - lr * grads.db, head)
