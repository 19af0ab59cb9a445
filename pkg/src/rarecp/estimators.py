"""Estimator-style wrappers around the conformal machinery.

Both estimators follow the usual contract: hyperparameters go to the
constructor under stable names, ``fit`` ingests the initial calibration
data and returns ``self``, prediction methods require a fitted state, and
``get_params``/``set_params`` expose the configuration. After fitting they
run online: ``observe`` feeds each newly revealed residual into the FIFO
calibration window.
"""

from __future__ import annotations

import numpy as np

from rarecp.base import BaseEstimator
from rarecp.checkpoint import (
    RareCPComponents,
    components_from_trainer,
    load_checkpoint,
    save_checkpoint,
)
from rarecp.conformal import (
    PredictionInterval,
    WeightedSupport,
    baseline_weights,
    build_interval,
)
from rarecp.data import CalibrationEntry, CalibrationStore, compute_descriptor
from rarecp.errors import DataError
from rarecp.gate import mixed_support, rarecp_interval
from rarecp.training import CalibrationDataset, ModelConfig, TrainConfig, Trainer
from rarecp.validation import (
    check_fitted,
    check_matrix,
    check_unit_interval,
    check_vector,
)


class SplitConformal(BaseEstimator):
    """Split conformal intervals with uniform or recency-decayed weights.

    ``weighting="uniform"`` is classical split conformal prediction;
    ``weighting="nexcp"`` decays calibration weights geometrically with
    age at rate ``nexcp_lambda``.
    """

    def __init__(
        self,
        alpha: float = 0.2,
        weighting: str = "uniform",
        nexcp_lambda: float = 0.99,
        capacity: int | None = None,
    ):
        self.alpha = alpha
        self.weighting = weighting
        self.nexcp_lambda = nexcp_lambda
        self.capacity = capacity
        self.store_ = None

    def fit(self, X, y) -> "SplitConformal":
        """Seed the calibration window from contexts ``X`` and residuals ``y``.

        ``X`` may be ``None``; these baselines only use the residuals, but
        contexts are accepted so all estimators share one surface.
        """
        y = check_vector(y, "y")
        if X is None:
            X = np.zeros((y.size, 1))
        X = check_matrix(X, "X")
        if X.shape[0] != y.size:
            raise DataError("X and y must have the same number of rows")
        capacity = self.capacity or y.size
        store = CalibrationStore(capacity, X.shape[1])
        start = max(0, y.size - capacity)
        for i in range(start, y.size):
            store.append(CalibrationEntry(context=X[i], residual=float(y[i]), time_index=i))
        self.store_ = store
        self._next_time = y.size
        return self

    def weighted_support(self) -> WeightedSupport:
        check_fitted(self, "store_")
        return baseline_weights(
            self.store_.residuals(), mode=self.weighting, nexcp_lambda=self.nexcp_lambda
        )

    def predict_interval(self, forecast: float, alpha: float | None = None) -> PredictionInterval:
        check_fitted(self, "store_")
        alpha = check_unit_interval(self.alpha if alpha is None else alpha, "alpha")
        return build_interval(float(forecast), self.weighted_support(), alpha)

    def observe(self, residual: float, context=None, time_index: int | None = None) -> None:
        """Append one observed residual to the FIFO window."""
        check_fitted(self, "store_")
        if context is None:
            context = np.zeros(self.store_.context_dim)
        if time_index is None:
            time_index = self._next_time
        self.store_.append(
            CalibrationEntry(context=np.asarray(context, dtype=np.float64),
                             residual=float(residual), time_index=int(time_index))
        )
        self._next_time = int(time_index) + 1


class RareCP(BaseEstimator):
    """Regime-aware retrieval conformal predictor.

    ``fit`` trains the full stack on the initial calibration set (teacher
    bank, hypernetwork retrieval experts anchored to the teachers, then
    the gate) and seeds the FIFO calibration window. ``predict_interval``
    retrieves each expert's top-k residual support under the current
    query-conditioned key map, mixes the supports through the gate, and
    reads off the weighted residual quantiles.
    """

    def __init__(
        self,
        alpha: float = 0.2,
        n_experts: int = 3,
        top_k: int = 32,
        beta: float = 12.0,
        latent_dim: int = 32,
        hidden_dim: int = 96,
        hidden_layers: int = 2,
        activation: str = "tanh",
        encoder_kind: str = "hypernetwork",
        gate_hidden_dim: int = 4,
        window: int = 64,
        include_forecast: bool = True,
        normalize_contexts: bool = True,
        lambda_anchor: float = 5.0,
        lambda_entropy: float = 0.02,
        student_lr: float = 1e-3,
        gate_lr: float = 4e-3,
        teacher_lr: float = 1e-3,
        epochs: int = 100,
        teacher_epochs: int = 20,
        batch_size: int = 256,
        tau_start: float = 0.05,
        tau_end: float = 1e-4,
        tau_p: float = 5e-4,
        n_cycles: int = 4,
        capacity: int | None = None,
        seed: int = 0,
    ):
        self.alpha = alpha
        self.n_experts = n_experts
        self.top_k = top_k
        self.beta = beta
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.encoder_kind = encoder_kind
        self.gate_hidden_dim = gate_hidden_dim
        self.window = window
        self.include_forecast = include_forecast
        self.normalize_contexts = normalize_contexts
        self.lambda_anchor = lambda_anchor
        self.lambda_entropy = lambda_entropy
        self.student_lr = student_lr
        self.gate_lr = gate_lr
        self.teacher_lr = teacher_lr
        self.epochs = epochs
        self.teacher_epochs = teacher_epochs
        self.batch_size = batch_size
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.tau_p = tau_p
        self.n_cycles = n_cycles
        self.capacity = capacity
        self.seed = seed
        self.components_: RareCPComponents | None = None
        self.store_ = None
        self.train_log_ = None
        self.descriptor_ = None

    # -- configuration ------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_experts=self.n_experts,
            latent_dim=self.latent_dim,
            top_k=self.top_k,
            beta=self.beta,
            hidden_dim=self.hidden_dim,
            hidden_layers=self.hidden_layers,
            activation=self.activation,
            encoder_kind=self.encoder_kind,
            gate_hidden_dim=self.gate_hidden_dim,
            window=self.window,
            include_forecast=self.include_forecast,
            normalize_contexts=self.normalize_contexts,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_anchor=self.lambda_anchor,
            lambda_entropy=self.lambda_entropy,
            student_lr=self.student_lr,
            gate_lr=self.gate_lr,
            teacher_lr=self.teacher_lr,
            epochs=self.epochs,
            teacher_epochs=self.teacher_epochs,
            batch_size=self.batch_size,
            tau_start=self.tau_start,
            tau_end=self.tau_end,
            tau_p=self.tau_p,
            n_cycles=self.n_cycles,
            seed=self.seed,
        )

    # -- fitting --------------------------------------------------------------

    def fit(self, X, y, dataset_id: int = 0) -> "RareCP":
        """Train on the initial calibration contexts ``X`` and residuals ``y``."""
        X = check_matrix(X, "X")
        y = check_vector(y, "y")
        if X.shape[0] != y.size:
            raise DataError("X and y must have the same number of rows")
        model = self.model_config()
        if X.shape[1] != model.context_dim:
            raise DataError(
                f"X has {X.shape[1]} features but window={self.window} and "
                f"include_forecast={self.include_forecast} imply {model.context_dim}"
            )
        dataset = CalibrationDataset.from_arrays(
            X, y, dataset_id=dataset_id, normalize=self.normalize_contexts
        )
        trainer = Trainer([dataset], model, self.train_config()).run()
        self.components_ = components_from_trainer(trainer)
        self.train_log_ = trainer.log
        self._dataset_id = int(dataset_id)
        self.descriptor_ = dataset.descriptor
        self._seed_store(X, y)
        return self

    def _seed_store(self, X: np.ndarray, y: np.ndarray) -> None:
        capacity = self.capacity or y.size
        store = CalibrationStore(capacity, X.shape[1])
        start = max(0, y.size - capacity)
        for i in range(start, y.size):
            store.append(CalibrationEntry(context=X[i], residual=float(y[i]), time_index=i))
        self.store_ = store
        self._next_time = y.size

    @classmethod
    def from_checkpoint(cls, path, dataset_id: int = 0) -> "RareCP":
        """Rebuild an estimator around saved components (store left empty)."""
        components = load_checkpoint(path)
        model = components.model
        est = cls(
            n_experts=model.n_experts,
            top_k=model.top_k,
            beta=model.beta,
            latent_dim=model.latent_dim,
            hidden_dim=model.hidden_dim,
            hidden_layers=model.hidden_layers,
            activation=model.activation,
            encoder_kind=model.encoder_kind,
            gate_hidden_dim=model.gate_hidden_dim,
            window=model.window,
            include_forecast=model.include_forecast,
            normalize_contexts=model.normalize_contexts,
        )
        est.components_ = components
        est._dataset_id = int(dataset_id)
        return est

    def save(self, path) -> None:
        check_fitted(self, "components_")
        save_checkpoint(self.components_, path)

    def seed_store(self, X, y, start_time: int = 0) -> None:
        """Seed the FIFO window explicitly (used after ``from_checkpoint``).

        The conditioning descriptor is recomputed from the seeded window,
        which is the initial calibration set of the run being started.
        """
        check_fitted(self, "components_")
        X = check_matrix(X, "X")
        y = check_vector(y, "y")
        capacity = self.capacity or y.size
        store = CalibrationStore(capacity, X.shape[1])
        for i in range(max(0, y.size - capacity), y.size):
            store.append(
                CalibrationEntry(context=X[i], residual=float(y[i]), time_index=start_time + i)
            )
        self.store_ = store
        self.descriptor_ = compute_descriptor(store.contexts(), self._dataset_id)
        self._next_time = start_time + y.size

    # -- prediction -------------------------------------------------------------

    def _descriptor(self):
        if getattr(self, "descriptor_", None) is not None:
            return self.descriptor_
        return self.components_.descriptor_for(self._dataset_id)

    def weighted_support(self, x) -> WeightedSupport:
        """Gate-mixed residual support for one query context."""
        check_fitted(self, "components_")
        check_fitted(self, "store_")
        x = check_vector(x, "x")
        support, _, _ = mixed_support(
            self.store_,
            self.components_.experts,
            self.components_.gate,
            self._descriptor(),
            x,
            normalize=self.normalize_contexts,
        )
        return support

    def predict_interval(
        self, x, forecast: float, alpha: float | None = None
    ) -> PredictionInterval:
        check_fitted(self, "components_")
        check_fitted(self, "store_")
        x = check_vector(x, "x")
        alpha = check_unit_interval(self.alpha if alpha is None else alpha, "alpha")
        return rarecp_interval(
            float(forecast),
            x,
            self.store_,
            self.components_.experts,
            self.components_.gate,
            self._descriptor(),
            alpha,
            normalize=self.normalize_contexts,
        )

    def observe(self, x, residual: float, time_index: int | None = None) -> None:
        """Append one observed (context, residual) pair to the FIFO window."""
        check_fitted(self, "store_")
        if time_index is None:
            time_index = self._next_time
        self.store_.append(
            CalibrationEntry(
                context=check_vector(x, "x"), residual=float(residual),
                time_index=int(time_index),
            )
        )
        self._next_time = int(time_index) + 1
