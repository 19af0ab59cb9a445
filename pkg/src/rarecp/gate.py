"""Gate network over experts and mixing of expert supports in weight space.

The gate maps (query, descriptor) to simplex weights over the M experts.
Mixing happens on residual weights, not on keys or logits: the final
weight of calibration index i is ``sum_m pi_m * v_{m,i}`` over the experts
whose support contains i, which preserves each expert's local neighborhood
while letting the mixture switch between error regimes.
"""

from __future__ import annotations

import numpy as np

from rarecp import autodiff as ad
from rarecp.autodiff import Tensor
from rarecp.conformal import PredictionInterval, WeightedSupport, build_interval
from rarecp.data import CalibrationStore, DatasetDescriptor, normalize_context
from rarecp.errors import DataError
from rarecp.experts import (
    RetrievalExpert,
    RetrievalResult,
    _mlp_forward,
    _mlp_init,
    descriptor_feature_dim,
    descriptor_features,
)


class GateParams:
    """Small MLP producing M expert logits from (query, descriptor).

    The final layer starts at zero, so an untrained gate mixes experts
    uniformly.
    """

    def __init__(
        self,
        context_dim: int,
        n_experts: int,
        hidden_dim: int = 4,
        activation: str = "tanh",
        seed: int = 0,
    ):
        if n_experts < 1:
            raise DataError("gate needs at least one expert")
        self.context_dim = int(context_dim)
        self.n_experts = int(n_experts)
        self.hidden_dim = int(hidden_dim)
        self.activation = activation
        input_dim = context_dim + descriptor_feature_dim(context_dim)
        rng = np.random.default_rng([seed, 303])
        self.layers = _mlp_init([input_dim, hidden_dim, n_experts], rng)
        w_last, b_last = self.layers[-1]
        w_last.data = np.zeros_like(w_last.data)
        b_last.data = np.zeros_like(b_last.data)

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def logits(self, query_z: np.ndarray, feats: np.ndarray) -> Tensor:
        x = ad.constant(np.concatenate([query_z, feats]))
        return _mlp_forward(self.layers, x, self.activation)

    def logits_batch(self, inputs: np.ndarray) -> Tensor:
        """Logit columns for a whole (input_dim, B) query block."""
        return _mlp_forward(self.layers, ad.constant(inputs), self.activation)


def gate_weights(
    params: GateParams,
    query: np.ndarray,
    descriptor: DatasetDescriptor,
    normalize: bool = True,
) -> np.ndarray:
    """Softmax simplex weights over experts for one query."""
    query_z = normalize_context(query, descriptor) if normalize else np.asarray(query)
    logits = params.logits(query_z, descriptor_features(descriptor))
    return ad.softmax_with_temperature(logits, 1.0).data


def mix_supports(
    pi: np.ndarray, retrievals: list[RetrievalResult]
) -> tuple[WeightedSupport, np.ndarray]:
    """Mix expert supports in residual-weight space.

    A calibration index appearing in several expert supports has its
    weights summed; total mass stays 1. Returns the merged support and the
    union of calibration indices (sorted, deterministic).
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 1 or pi.size != len(retrievals):
        raise DataError("pi must assign one weight per expert support")
    if np.any(pi < 0) or abs(float(pi.sum()) - 1.0) > 1e-9:
        raise DataError("pi must be simplex weights")
    all_indices = np.concatenate([r.support_indices for r in retrievals])
    all_weights = np.concatenate(
        [p * r.weights for p, r in zip(pi, retrievals)]
    )
    all_residuals = np.concatenate([r.residuals for r in retrievals])
    union, inverse = np.unique(all_indices, return_inverse=True)
    merged = np.zeros(union.size)
    np.add.at(merged, inverse, all_weights)
    residuals = np.zeros(union.size)
    residuals[inverse] = all_residuals
    return WeightedSupport(residuals, merged), union


def mixed_support(
    store: CalibrationStore,
    experts: list[RetrievalExpert],
    gate: GateParams,
    descriptor: DatasetDescriptor,
    query: np.ndarray,
    normalize: bool = True,
) -> tuple[WeightedSupport, np.ndarray, np.ndarray]:
    """Full mixture pipeline: per-expert retrieval, gate, weight-space merge."""
    retrievals = [
        expert.retrieve(store, query, descriptor, normalize=normalize)
        for expert in experts
    ]
    pi = gate_weights(gate, query, descriptor, normalize=normalize)
    support, union = mix_supports(pi, retrievals)
    return support, union, pi


def rarecp_interval(
    forecast: float,
    query: np.ndarray,
    store: CalibrationStore,
    experts: list[RetrievalExpert],
    gate: GateParams,
    descriptor: DatasetDescriptor,
    alpha: float,
    normalize: bool = True,
) -> PredictionInterval:
    """Prediction interval from the gate-mixed expert supports.

    The final quantile is computed over at most M * k residual entries.
    """
    if len(store) == 0:
        raise DataError("cannot build an interval from an empty store")
    support, _, _ = mixed_support(
        store, experts, gate, descriptor, query, normalize=normalize
    )
    return build_interval(forecast, support, alpha)
