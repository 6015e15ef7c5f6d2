"""Client-side censoring defenses applied before an update is transmitted.

Both defenses act per neuron on the extended first-layer weights (weight row
plus bias) at the end of a client's local round, resetting censored neurons
to their round-start values so the aggregated update carries no trace of
them.  Head parameters are never touched.

* count censoring ("q"): a neuron is reset when between 1 and ``q`` distinct
  client samples activated it during the round.  ``q = 0`` censors nothing.
* share censoring ("beta"): a neuron is reset when a single sample's pooled
  absolute coefficient accounts for at least a fraction ``beta`` of the
  neuron's total coefficient mass over the round.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams

__all__ = [
    "DefenseConfig",
    "censored_indices_q",
    "censor_q",
    "censored_indices_beta",
    "censor_beta",
    "apply_defense",
]


@dataclass(frozen=True)
class DefenseConfig:
    """Censoring rule: ``none``, ``q`` (count) or ``beta`` (share)."""

    kind: str = "none"
    q: int = 0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "q", "beta"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind == "q" and self.q < 0:
            raise ValueError("q must be >= 0")
        if self.kind == "beta" and not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")

    @property
    def active(self) -> bool:
        return self.kind != "none"

    def to_dict(self) -> dict:
        if self.kind == "q":
            return {"kind": "q", "q": self.q}
        if self.kind == "beta":
            return {"kind": "beta", "beta": self.beta}
        return {"kind": "none"}

    @staticmethod
    def from_dict(d: dict) -> "DefenseConfig":
        kind = d.get("kind", "none")
        return DefenseConfig(kind, q=int(d.get("q", 0)), beta=float(d.get("beta", 1.0)))

    @staticmethod
    def from_spec(spec: str) -> "DefenseConfig":
        """Parse CLI specs such as ``none``, ``q:4`` or ``beta:0.9``."""
        name, _, arg = spec.partition(":")
        if name == "none":
            return DefenseConfig()
        if name == "q":
            return DefenseConfig("q", q=int(arg))
        if name == "beta":
            return DefenseConfig("beta", beta=float(arg))
        raise ValueError(f"cannot parse defense spec {spec!r}")


def _reset_rows(round_start: ModelParams, end: ModelParams,
                neurons: np.ndarray) -> ModelParams:
    if neurons.size == 0:
        return end
    W = end.W.copy()
    b = end.b.copy()
    W[neurons] = round_start.W[neurons]
    b[neurons] = round_start.b[neurons]
    return ModelParams(W, b, end.head)


def censored_indices_q(activation_sets: np.ndarray, q: int) -> np.ndarray:
    """Neurons whose client-level activation set has between 1 and q members.

    ``activation_sets`` is an (H, n_client) membership matrix: entry (h, j)
    marks that the client's j-th sample activated neuron h at some update of
    the round.  Empty sets are left alone: those neurons never moved.
    """
    sizes = np.asarray(activation_sets).sum(axis=1)
    return np.flatnonzero((sizes >= 1) & (sizes <= q))


def censor_q(round_start: ModelParams, end: ModelParams,
             activation_sets: np.ndarray, q: int) -> ModelParams:
    """Reset every neuron with a small nonempty activation set to round start."""
    return _reset_rows(round_start, end, censored_indices_q(activation_sets, q))


def censored_indices_beta(abs_coefficients: np.ndarray, beta: float) -> np.ndarray:
    """Neurons where one sample's coefficient share reaches ``beta``.

    ``abs_coefficients`` is an (H, n_client) ledger: entry (h, j) is the sum
    of ``|lam|`` contributed by the client's j-th sample to neuron h over all
    updates of the round (a sample drawn in several batches is pooled).
    """
    ledger = np.asarray(abs_coefficients, dtype=np.float64)
    totals = ledger.sum(axis=1)
    peak = ledger.max(axis=1, initial=0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(totals > 0, peak / totals, 0.0)
    return np.flatnonzero(share >= beta)


def censor_beta(round_start: ModelParams, end: ModelParams,
                abs_coefficients: np.ndarray, beta: float) -> ModelParams:
    """Reset every neuron dominated by a single sample to round start."""
    return _reset_rows(round_start, end, censored_indices_beta(abs_coefficients, beta))


def apply_defense(config: DefenseConfig, round_start: ModelParams, end: ModelParams,
                  activation_sets: np.ndarray,
                  abs_coefficients: np.ndarray) -> tuple[ModelParams, np.ndarray]:
    """Route to the configured censoring rule; returns (params, censored neurons)."""
    if config.kind == "q":
        idx = censored_indices_q(activation_sets, config.q)
    elif config.kind == "beta":
        idx = censored_indices_beta(abs_coefficients, config.beta)
    else:
        idx = np.empty(0, dtype=np.int64)
    return _reset_rows(round_start, end, idx), idx
