"""Smooth interval-score training: teachers, retrieval experts, then the gate.

The hard weighted quantile is replaced by a sigmoid-CDF relaxation and the
miss indicators by temperature softplus penalties, giving a differentiable
surrogate of the Winkler score. With sorted support ``(r_(i), p_(i))`` and
cumulative endpoints ``C_{i-1}, C_i``:

    b_i(q)      = [sigmoid((q - C_{i-1}) / tau_q) - sigmoid((q - C_i) / tau_q)]_+
    lambda_i(q) = b_i / sum_l b_l
    Qs(q)       = sum_i lambda_i(q) * r_(i)

    loss_alpha  = Qs(1 - a/2) - Qs(a/2)
                  + (2/a) * [softplus_tp(Qs(a/2) - r_j) + softplus_tp(r_j - Qs(1 - a/2))]

and the training objective averages loss_alpha over a small grid of levels
centered on the target miscoverage. As both temperatures go to zero this
recovers the hard weighted quantiles and the hard Winkler score. At high
tau_q the smooth lower quantile can cross the smooth upper one; the width
term is allowed to go transiently negative (no ordering correction), which
only affects the surrogate, never hard evaluation.

Training units are leave-one-out episodes: the held-out query retrieves
from the minibatch candidates excluding itself, so its own residual never
enters its support. Stages run strictly in order: prefit affine teachers,
then hypernetwork students anchored to their teachers in parameter space,
then the gate (experts frozen) with an entropy bonus that discourages
early collapse onto one expert.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from rarecp import autodiff as ad
from rarecp.autodiff import Adam, Tape, Tensor
from rarecp.conformal import WeightedSupport
from rarecp.data import DatasetDescriptor, compute_descriptor, normalize_context
from rarecp.errors import DataError, NumericError, RareCPError
from rarecp.experts import (
    ExpertConfig,
    FixedAffineMap,
    HypernetworkParams,
    RetrievalExpert,
    descriptor_features,
)
from rarecp.gate import GateParams


def default_alpha_grid(center: float = 0.20, step: float = 0.02, spread: int = 5):
    """Miscoverage grid {center} union {center +/- step*m, m=1..spread}."""
    levels = sorted(center + step * m for m in range(-spread, spread + 1))
    if levels[0] <= 0.0 or levels[-1] >= 1.0:
        raise DataError("alpha grid leaves (0, 1)")
    return tuple(levels)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Cyclic quantile temperature: cosine from tau_start down to tau_end."""

    tau_start: float = 0.05
    tau_end: float = 1e-4
    cycle_steps: int = 100

    def __post_init__(self):
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise DataError("temperatures must be positive")
        if self.cycle_steps < 1:
            raise DataError("cycle_steps must be >= 1")


def temperature_at(step: int, schedule: TemperatureSchedule) -> float:
    """Temperature at a training step; exact at cycle peaks and troughs."""
    phase = (step % schedule.cycle_steps) / schedule.cycle_steps
    w = 0.5 * (1.0 + math.cos(2.0 * math.pi * phase))
    if w < 1e-12:
        w = 0.0
    elif w > 1.0 - 1e-12:
        w = 1.0
    return schedule.tau_end + (schedule.tau_start - schedule.tau_end) * w


@dataclass(frozen=True)
class SmoothLossConfig:
    tau_q: float = 0.05
    tau_p: float = 5e-4
    alpha_grid: tuple = field(default_factory=default_alpha_grid)

    def __post_init__(self):
        if self.tau_q <= 0 or self.tau_p <= 0:
            raise DataError("loss temperatures must be positive")
        if not self.alpha_grid or any(not 0 < a < 1 for a in self.alpha_grid):
            raise DataError("alpha grid levels must lie in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    lambda_anchor: float = 5.0
    lambda_entropy: float = 0.02
    student_lr: float = 1e-3
    gate_lr: float = 4e-3
    teacher_lr: float = 1e-3
    epochs: int = 100
    teacher_epochs: int = 20
    batch_size: int = 256
    tau_start: float = 0.05
    tau_end: float = 1e-4
    tau_p: float = 5e-4
    n_cycles: int = 4
    seed: int = 0
    audit: bool = False

    def __post_init__(self):
        if self.lambda_anchor < 0 or self.lambda_entropy < 0:
            raise DataError("regularization weights must be >= 0")
        if min(self.student_lr, self.gate_lr, self.teacher_lr) <= 0:
            raise DataError("learning rates must be positive")
        if min(self.epochs, self.teacher_epochs, self.batch_size, self.n_cycles) < 1:
            raise DataError("epochs, batch size and cycle count must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and context-construction settings, frozen at fit time."""

    n_experts: int = 3
    latent_dim: int = 32
    top_k: int = 32
    beta: float = 12.0
    hidden_dim: int = 96
    hidden_layers: int = 2
    activation: str = "tanh"
    encoder_kind: str = "hypernetwork"
    gate_hidden_dim: int = 4
    window: int = 64
    include_forecast: bool = True
    normalize_contexts: bool = True

    def __post_init__(self):
        if self.n_experts < 1:
            raise DataError("need at least one expert")
        if self.encoder_kind not in ("hypernetwork", "fixed_affine"):
            raise DataError(f"unknown encoder kind {self.encoder_kind!r}")

    @property
    def context_dim(self) -> int:
        return self.window + (1 if self.include_forecast else 0)

    def expert_config(self) -> ExpertConfig:
        return ExpertConfig(
            latent_dim=self.latent_dim,
            top_k=self.top_k,
            beta=self.beta,
            encoder_kind=self.encoder_kind,
        )


@dataclass
class CalibrationDataset:
    """Initial calibration set of one dataset, ready for episode training."""

    contexts: np.ndarray
    residuals: np.ndarray
    descriptor: DatasetDescriptor
    normalize: bool = True

    def __post_init__(self):
        self.contexts = np.asarray(self.contexts, dtype=np.float64)
        self.residuals = np.asarray(self.residuals, dtype=np.float64)
        if self.contexts.ndim != 2 or self.contexts.shape[0] != self.residuals.size:
            raise DataError("contexts and residuals must align")
        if self.normalize:
            self.contexts_z = normalize_context(self.contexts, self.descriptor)
        else:
            self.contexts_z = self.contexts
        self.feats = descriptor_features(self.descriptor)

    def __len__(self) -> int:
        return int(self.residuals.size)

    @classmethod
    def from_arrays(
        cls,
        contexts,
        residuals,
        dataset_id: int = 0,
        sigma_floor: float = 1e-6,
        normalize: bool = True,
    ) -> "CalibrationDataset":
        contexts = np.asarray(contexts, dtype=np.float64)
        descriptor = compute_descriptor(contexts, dataset_id, sigma_floor)
        return cls(contexts, np.asarray(residuals, dtype=np.float64), descriptor, normalize)


@dataclass(frozen=True)
class LooEpisode:
    """One leave-one-out training unit: query j retrieves from candidates \\ {j}."""

    query_position: int
    candidate_positions: np.ndarray
    target_residual: float


def loo_episodes(dataset: "CalibrationDataset", batch: np.ndarray) -> list[LooEpisode]:
    """Materialize the episode view of a batch (the batched losses compute
    the same retrievals without building these objects)."""
    batch = np.asarray(batch, dtype=np.int64)
    return [
        LooEpisode(
            query_position=int(j),
            candidate_positions=batch[batch != j],
            target_residual=float(dataset.residuals[j]),
        )
        for j in batch
    ]


# ---------------------------------------------------------------------------
# smooth losses (single traced implementation, vectorized over alpha levels)
# ---------------------------------------------------------------------------

_CUM_MATRICES: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _cumulative_matrices(s: int) -> tuple[np.ndarray, np.ndarray]:
    cached = _CUM_MATRICES.get(s)
    if cached is None:
        incl = np.tril(np.ones((s, s)))
        prev = np.tril(np.ones((s, s)), k=-1)
        cached = (incl, prev)
        if s <= 4096:
            _CUM_MATRICES[s] = cached
    return cached


def _smooth_quantiles(
    weights: Tensor,
    residuals_sorted: np.ndarray,
    q_levels: np.ndarray,
    tau_q: float,
) -> Tensor:
    """Differentiable quantiles of the sorted support at all levels at once."""
    s = residuals_sorted.size
    incl, prev = _cumulative_matrices(s)
    c_incl = ad.matmul(ad.constant(incl), weights)
    c_prev = ad.matmul(ad.constant(prev), weights)
    ones_col = ad.constant(np.ones((q_levels.size, 1)))
    q_mat = np.broadcast_to(q_levels[:, None], (q_levels.size, s))
    m_prev = ad.matmul(ones_col, ad.reshape(c_prev, (1, s)))
    m_incl = ad.matmul(ones_col, ad.reshape(c_incl, (1, s)))
    s_prev = ad.sigmoid(ad.scale(ad.add_const(ad.scale(m_prev, -1.0), q_mat), 1.0 / tau_q))
    s_incl = ad.sigmoid(ad.scale(ad.add_const(ad.scale(m_incl, -1.0), q_mat), 1.0 / tau_q))
    bins = ad.relu(ad.add(s_prev, ad.scale(s_incl, -1.0)))
    num = ad.matmul(bins, ad.constant(residuals_sorted))
    den = ad.matmul(bins, ad.constant(np.ones(s)))
    if np.any(den.data <= 0.0):
        raise NumericError("smooth quantile bin mass vanished (tau_q > 0 violated?)")
    return ad.mul(num, ad.reciprocal(den))


def _traced_alpha_grid_winkler(
    weights_sorted: Tensor,
    residuals_sorted: np.ndarray,
    target_residual: float,
    alpha_grid: np.ndarray,
    tau_q: float,
    tau_p: float,
) -> Tensor:
    """Mean smooth Winkler over the alpha grid for one sorted support."""
    alphas = np.asarray(alpha_grid, dtype=np.float64)
    n_alpha = alphas.size
    q_levels = np.concatenate([alphas / 2.0, 1.0 - alphas / 2.0])
    qs = _smooth_quantiles(weights_sorted, residuals_sorted, q_levels, tau_q)
    q_lo = ad.index_select(qs, np.arange(n_alpha))
    q_hi = ad.index_select(qs, n_alpha + np.arange(n_alpha))
    width = ad.add(q_hi, ad.scale(q_lo, -1.0))
    pen_lo = ad.softplus_with_temperature(ad.add_const(q_lo, -target_residual), tau_p)
    pen_hi = ad.softplus_with_temperature(
        ad.add_const(ad.scale(q_hi, -1.0), target_residual), tau_p
    )
    penalties = ad.mul(ad.add(pen_lo, pen_hi), ad.constant(2.0 / alphas))
    return ad.reduce_mean(ad.add(width, penalties))


def _sorted_support(support: WeightedSupport) -> tuple[Tensor, np.ndarray]:
    order = np.argsort(support.residuals, kind="stable")
    return ad.constant(support.weights[order]), support.residuals[order]


def smooth_weighted_quantile(support: WeightedSupport, q: float, tau_q: float) -> float:
    """Differentiable weighted quantile; a convex combination of the residuals."""
    if not 0.0 < q < 1.0:
        raise DataError("quantile level must lie in (0, 1)")
    if tau_q <= 0:
        raise DataError("tau_q must be positive")
    weights, residuals = _sorted_support(support)
    out = _smooth_quantiles(weights, residuals, np.asarray([q]), tau_q)
    return float(out.data[0])


def smooth_winkler(
    support: WeightedSupport,
    target_residual: float,
    alpha: float,
    tau_q: float,
    tau_p: float,
) -> float:
    """Smooth residual-space Winkler loss at a single miscoverage level."""
    weights, residuals = _sorted_support(support)
    out = _traced_alpha_grid_winkler(
        weights, residuals, float(target_residual), np.asarray([alpha]), tau_q, tau_p
    )
    return float(out.data)


def alpha_grid_loss(
    support: WeightedSupport, target_residual: float, config: SmoothLossConfig
) -> float:
    """Mean smooth Winkler over the configured miscoverage grid."""
    weights, residuals = _sorted_support(support)
    out = _traced_alpha_grid_winkler(
        weights,
        residuals,
        float(target_residual),
        np.asarray(config.alpha_grid),
        config.tau_q,
        config.tau_p,
    )
    return float(out.data)


# ---------------------------------------------------------------------------
# episode-parallel batch losses
# ---------------------------------------------------------------------------


def _batched_alpha_grid_winkler(
    weights_sorted: Tensor,
    residuals_sorted: np.ndarray,
    targets: np.ndarray,
    alpha_grid: np.ndarray,
    tau_q: float,
    tau_p: float,
) -> Tensor:
    """Mean smooth Winkler over the alpha grid, one value per episode row.

    ``weights_sorted`` is (B, s) with each row a support sorted by its
    (constant) residuals; zero-weight padding columns contribute nothing.
    """
    s = residuals_sorted.shape[1]
    c_incl = ad.matmul(weights_sorted, ad.constant(np.triu(np.ones((s, s)))))
    c_prev = ad.matmul(weights_sorted, ad.constant(np.triu(np.ones((s, s)), 1)))
    ones_s = ad.constant(np.ones(s))
    res_const = ad.constant(residuals_sorted)

    quantiles: dict[float, Tensor] = {}
    alphas = np.asarray(alpha_grid, dtype=np.float64)
    levels = sorted({float(q) for a in alphas for q in (a / 2.0, 1.0 - a / 2.0)})
    for q in levels:
        s_prev = ad.sigmoid(ad.scale(ad.add_const(ad.scale(c_prev, -1.0), q), 1.0 / tau_q))
        s_incl = ad.sigmoid(ad.scale(ad.add_const(ad.scale(c_incl, -1.0), q), 1.0 / tau_q))
        bins = ad.relu(ad.add(s_prev, ad.scale(s_incl, -1.0)))
        num = ad.matmul(ad.mul(bins, res_const), ones_s)
        den = ad.matmul(bins, ones_s)
        if np.any(den.data <= 0.0):
            raise NumericError("smooth quantile bin mass vanished (tau_q > 0 violated?)")
        quantiles[q] = ad.mul(num, ad.reciprocal(den))

    total: Tensor | None = None
    for a in alphas:
        lo = quantiles[float(a / 2.0)]
        hi = quantiles[float(1.0 - a / 2.0)]
        width = ad.add(hi, ad.scale(lo, -1.0))
        pen_lo = ad.softplus_with_temperature(ad.add_const(lo, -targets), tau_p)
        pen_hi = ad.softplus_with_temperature(
            ad.add_const(ad.scale(hi, -1.0), targets), tau_p
        )
        per_alpha = ad.add(width, ad.scale(ad.add(pen_lo, pen_hi), 2.0 / a))
        total = per_alpha if total is None else ad.add(total, per_alpha)
    return ad.scale(total, 1.0 / alphas.size)


def _valid_batch(batch: np.ndarray) -> bool:
    """An episode needs >= 2 leave-one-out candidates, so a batch needs >= 3."""
    if batch.size == 0:
        return False
    if batch.size < 3:
        warnings.warn(
            f"skipping batch of size {batch.size}: episodes would have fewer "
            "than 2 candidates",
            stacklevel=3,
        )
        return False
    return True


def _expert_retrieval_batch(
    encoder,
    dataset: CalibrationDataset,
    batch: np.ndarray,
    top_k: int,
    temperature: float,
):
    """Leave-one-out retrieval for every episode of a batch at once.

    Each batch member is a query; its candidates are the other members.
    Self-retrieval is excluded by masking the query's own score before the
    (constant) top-k selection. Returns the selected candidate columns
    ``sel`` (B, k), the softmax weight rows (Tensor), and the emitted map
    stack for anchoring (the raw map output for hypernetworks, the (A, b)
    tensors for a fixed affine encoder).
    """
    B = batch.size
    ctx_block = dataset.contexts_z[batch]
    contexts_t = np.ascontiguousarray(ctx_block.T)
    if isinstance(encoder, HypernetworkParams):
        inputs = np.concatenate(
            [ctx_block, np.tile(dataset.feats, (B, 1))], axis=1
        ).T
        out = encoder.emit_batch(inputs)
        keys = ad.emit_keys(out, contexts_t, encoder.latent_dim)
        normalized = ad.l2_normalize(keys)
        scores = ad.query_key_scores(normalized, np.arange(B))
        emitted = out
    else:
        keys2d = ad.l2_normalize(ad.affine(encoder.A, ad.constant(contexts_t), encoder.b))
        scores = ad.matmul(ad.transpose(keys2d), keys2d)
        emitted = (encoder.A, encoder.b)

    masked = scores.data.copy()
    np.fill_diagonal(masked, -np.inf)
    k_eff = min(int(top_k), B - 1)
    order = np.argsort(-masked, axis=1, kind="stable")  # stable: ties -> smaller index
    sel = order[:, :k_eff]
    sel_scores = ad.gather_rows(scores, sel)
    weights = ad.softmax_rows(sel_scores, temperature)
    return sel, weights, emitted


def _expert_batch_term(
    encoder,
    dataset: CalibrationDataset,
    batch: np.ndarray,
    top_k: int,
    temperature: float,
    alpha_grid: np.ndarray,
    tau_q: float,
    tau_p: float,
    audit: list | None,
):
    """Per-episode smooth losses plus the emitted maps for one batch."""
    sel, weights, emitted = _expert_retrieval_batch(
        encoder, dataset, batch, top_k, temperature
    )
    support_positions = batch[sel]
    if audit is not None:
        ds_id = dataset.descriptor.dataset_id
        for row, j in enumerate(batch):
            audit.append((ds_id, int(j), support_positions[row]))
    res_sel = dataset.residuals[support_positions]
    perm = np.argsort(res_sel, axis=1, kind="stable")
    res_sorted = np.take_along_axis(res_sel, perm, axis=1)
    weights_sorted = ad.gather_rows(weights, perm)
    loss_vec = _batched_alpha_grid_winkler(
        weights_sorted,
        res_sorted,
        dataset.residuals[batch],
        alpha_grid,
        tau_q,
        tau_p,
    )
    return loss_vec, emitted


def _anchor_term(emitted, teacher: tuple[np.ndarray, np.ndarray], n_episodes: int) -> Tensor:
    """Mean squared parameter-space distance to the teacher map."""
    B_mat, c_vec = teacher
    if isinstance(emitted, Tensor):
        # hypernetwork: stacked flat maps, one column per episode
        flat = np.concatenate([B_mat.reshape(-1), c_vec])
        diff = ad.add_const(emitted, -flat[:, None])
        return ad.scale(ad.reduce_sum(ad.square(diff)), 1.0 / n_episodes)
    A, b = emitted
    da = ad.reduce_sum(ad.square(ad.add_const(A, -B_mat)))
    db = ad.reduce_sum(ad.square(ad.add_const(b, -c_vec)))
    return ad.add(da, db)


def _stack_mean(scalars: list[Tensor]) -> Tensor:
    if len(scalars) == 1:
        return scalars[0]
    return ad.reduce_mean(ad.concat([ad.reshape(s, (1,)) for s in scalars]))


def expert_batch_loss(
    encoder,
    datasets: list[CalibrationDataset],
    batches: list[np.ndarray],
    teachers: list[tuple[np.ndarray, np.ndarray]] | None,
    top_k: int,
    temperature: float,
    alpha_grid: np.ndarray,
    tau_q: float,
    tau_p: float,
    lambda_anchor: float,
    dense: bool = False,
    audit: list | None = None,
) -> Tensor | None:
    """Full expert objective on one round of batches.

    The interval term averages leave-one-out losses per dataset, then over
    datasets, so each dataset carries equal weight; the anchor term pulls
    every emitted (A, b) toward the dataset-level teacher map. ``dense``
    retrieval keeps all candidates (used for teacher prefitting). Returns
    None when every batch was skipped.
    """
    per_ds_losses: list[Tensor] = []
    per_ds_anchors: list[Tensor] = []
    for ds_index, (dataset, batch) in enumerate(zip(datasets, batches)):
        batch = np.asarray(batch, dtype=np.int64)
        if not _valid_batch(batch):
            continue
        k = len(dataset) if dense else top_k
        loss_vec, emitted = _expert_batch_term(
            encoder, dataset, batch, k, temperature, alpha_grid, tau_q, tau_p, audit
        )
        per_ds_losses.append(ad.reduce_mean(loss_vec))
        if teachers is not None and lambda_anchor > 0.0:
            per_ds_anchors.append(_anchor_term(emitted, teachers[ds_index], batch.size))
    if not per_ds_losses:
        return None
    total = _stack_mean(per_ds_losses)
    if per_ds_anchors:
        total = ad.add(total, ad.scale(_stack_mean(per_ds_anchors), lambda_anchor))
    return total


def expert_training_step(
    encoder,
    datasets: list[CalibrationDataset],
    batches: list[np.ndarray],
    teachers: list[tuple[np.ndarray, np.ndarray]] | None,
    optimizer: Adam,
    top_k: int,
    temperature: float,
    alpha_grid: np.ndarray,
    tau_q: float,
    tau_p: float,
    lambda_anchor: float,
    dense: bool = False,
    audit: list | None = None,
) -> float:
    """One optimizer step on an expert (or teacher) encoder."""
    optimizer.zero_grad()
    with Tape() as tape:
        total = expert_batch_loss(
            encoder,
            datasets,
            batches,
            teachers,
            top_k,
            temperature,
            alpha_grid,
            tau_q,
            tau_p,
            lambda_anchor,
            dense=dense,
            audit=audit,
        )
        if total is None:
            return float("nan")
    value = float(total.data)
    if not np.isfinite(value):
        raise NumericError("expert training loss is not finite")
    tape.backward(total)
    optimizer.step()
    return value


@dataclass
class _PreparedGateBatch:
    """Frozen-expert precomputation for one batch of gate episodes."""

    inputs: np.ndarray          # (input_dim, B) gate network input block
    weight_cube: np.ndarray     # (B, U, M): expert weights on the padded union
    residuals_sorted: np.ndarray  # (B, U) union residuals in sorted order
    sort_perm: np.ndarray       # (B, U) permutation applied to union slots
    targets: np.ndarray         # (B,) held-out residuals


def _prepare_gate_batch(
    experts: list[RetrievalExpert],
    dataset: CalibrationDataset,
    batch: np.ndarray,
    audit: list | None,
) -> _PreparedGateBatch:
    """Compute every expert's leave-one-out support for the batch (no tape).

    Episodes pad their support union to a common width with zero-weight
    slots, which contribute nothing to the smooth quantiles.
    """
    B = batch.size
    n_experts = len(experts)
    per_expert_positions: list[np.ndarray] = []
    per_expert_weights: list[np.ndarray] = []
    for expert in experts:
        sel, weights, _ = _expert_retrieval_batch(
            expert.encoder,
            dataset,
            batch,
            expert.config.top_k,
            expert.config.weight_temperature,
        )
        per_expert_positions.append(batch[sel])
        per_expert_weights.append(weights.data)

    unions: list[np.ndarray] = []
    for row in range(B):
        union = np.unique(
            np.concatenate([pos[row] for pos in per_expert_positions])
        )
        unions.append(union)
        if audit is not None:
            audit.append((dataset.descriptor.dataset_id, int(batch[row]), union))
    width = max(u.size for u in unions)
    cube = np.zeros((B, width, n_experts))
    residuals = np.zeros((B, width))
    for row, union in enumerate(unions):
        residuals[row, : union.size] = dataset.residuals[union]
        for m in range(n_experts):
            slots = np.searchsorted(union, per_expert_positions[m][row])
            cube[row, slots, m] = per_expert_weights[m][row]
    perm = np.argsort(residuals, axis=1, kind="stable")
    residuals_sorted = np.take_along_axis(residuals, perm, axis=1)
    inputs = np.concatenate(
        [dataset.contexts_z[batch], np.tile(dataset.feats, (B, 1))], axis=1
    ).T
    return _PreparedGateBatch(
        inputs=inputs,
        weight_cube=cube,
        residuals_sorted=residuals_sorted,
        sort_perm=perm,
        targets=dataset.residuals[batch],
    )


def gate_batch_loss(
    gate: GateParams,
    prepared: list[_PreparedGateBatch],
    alpha_grid: np.ndarray,
    tau_q: float,
    tau_p: float,
    lambda_entropy: float,
) -> Tensor:
    """Gate objective: mixed-support interval loss minus the entropy bonus."""
    per_ds_losses: list[Tensor] = []
    per_ds_entropy: list[Tensor] = []
    for prep in prepared:
        logits = gate.logits_batch(prep.inputs)
        pi = ad.softmax_rows(ad.transpose(logits), 1.0)
        mixed = ad.batched_mix(ad.constant(prep.weight_cube), pi)
        mixed_sorted = ad.gather_rows(mixed, prep.sort_perm)
        loss_vec = _batched_alpha_grid_winkler(
            mixed_sorted,
            prep.residuals_sorted,
            prep.targets,
            alpha_grid,
            tau_q,
            tau_p,
        )
        log_pi = ad.log(ad.add_const(pi, 1e-30))
        n_experts = pi.data.shape[1]
        entropy_vec = ad.scale(
            ad.matmul(ad.mul(pi, log_pi), ad.constant(np.ones(n_experts))), -1.0
        )
        per_ds_losses.append(ad.reduce_mean(loss_vec))
        per_ds_entropy.append(ad.reduce_mean(entropy_vec))
    return ad.add(
        _stack_mean(per_ds_losses),
        ad.scale(_stack_mean(per_ds_entropy), -lambda_entropy),
    )


def gate_training_step(
    gate: GateParams,
    experts: list[RetrievalExpert],
    datasets: list[CalibrationDataset],
    batches: list[np.ndarray],
    optimizer: Adam,
    alpha_grid: np.ndarray,
    tau_q: float,
    tau_p: float,
    lambda_entropy: float,
    audit: list | None = None,
) -> float:
    """One optimizer step on the gate; experts receive no gradient.

    Expert supports are computed outside the tape (frozen), the gate mixes
    them in weight space, and an entropy bonus on the simplex weights
    discourages collapse onto a single expert.
    """
    prepared: list[_PreparedGateBatch] = []
    for dataset, batch in zip(datasets, batches):
        batch = np.asarray(batch, dtype=np.int64)
        if not _valid_batch(batch):
            continue
        prepared.append(_prepare_gate_batch(experts, dataset, batch, audit))
    if not prepared:
        return float("nan")

    optimizer.zero_grad()
    with Tape() as tape:
        total = gate_batch_loss(gate, prepared, alpha_grid, tau_q, tau_p, lambda_entropy)
    value = float(total.data)
    if not np.isfinite(value):
        raise NumericError("gate training loss is not finite")
    tape.backward(total)
    optimizer.step()
    return value


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogRow:
    stage: str
    epoch: int
    mean_loss: float
    tau_q: float


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    positions = rng.permutation(n)
    return [positions[i : i + batch_size] for i in range(0, n, batch_size)]


class Trainer:
    """Three-stage fitting: teachers -> experts (anchored) -> gate (frozen experts)."""

    def __init__(
        self,
        datasets: list[CalibrationDataset],
        model: ModelConfig,
        train: TrainConfig,
    ):
        if not datasets:
            raise DataError("need at least one calibration dataset")
        for ds in datasets:
            if ds.contexts.shape[1] != model.context_dim:
                raise DataError(
                    f"dataset context dim {ds.contexts.shape[1]} does not match "
                    f"model context dim {model.context_dim}"
                )
        if model.encoder_kind == "fixed_affine" and len(datasets) > 1:
            raise DataError("fixed_affine encoders support a single dataset")
        self.datasets = datasets
        self.model = model
        self.train = train
        self.alpha_grid = np.asarray(default_alpha_grid())
        self.teachers: list[list[FixedAffineMap]] | None = None
        self.experts: list[RetrievalExpert] | None = None
        self.gate: GateParams | None = None
        self.log: list[LogRow] = []
        self.audit: list | None = [] if train.audit else None

    # -- scheduling -------------------------------------------------------

    def _schedule(self, total_steps: int) -> TemperatureSchedule:
        cycle = max(1, total_steps // self.train.n_cycles)
        return TemperatureSchedule(
            tau_start=self.train.tau_start,
            tau_end=self.train.tau_end,
            cycle_steps=cycle,
        )

    def _steps_per_epoch(self) -> int:
        # one optimizer step per round; a round takes one batch per dataset
        return max(
            max(1, math.ceil(len(ds) / self.train.batch_size)) for ds in self.datasets
        )

    def _batches(self, rng: np.random.Generator) -> list[list[np.ndarray]]:
        """Per-dataset batch lists for one epoch, padded to equal length."""
        per_ds = [
            _epoch_batches(len(ds), self.train.batch_size, rng) for ds in self.datasets
        ]
        rounds = max(len(b) for b in per_ds)
        aligned = []
        for batches in per_ds:
            if len(batches) < rounds:
                batches = batches + [np.empty(0, dtype=np.int64)] * (rounds - len(batches))
            aligned.append(batches)
        # transpose: one entry per round, each holding one batch per dataset
        return [[aligned[d][r] for d in range(len(per_ds))] for r in range(rounds)]

    # -- stages -----------------------------------------------------------

    def fit_teachers(self) -> None:
        cfg = self.train
        teachers: list[list[FixedAffineMap]] = []
        epoch_losses: dict[int, list[float]] = {e: [] for e in range(cfg.teacher_epochs)}
        epoch_tau: dict[int, float] = {}
        for m in range(self.model.n_experts):
            per_dataset: list[FixedAffineMap] = []
            for d, dataset in enumerate(self.datasets):
                teacher = FixedAffineMap(
                    self.model.context_dim,
                    self.model.latent_dim,
                    seed=cfg.seed * 1000 + m * 10 + d,
                )
                opt = Adam(teacher.parameters(), lr=cfg.teacher_lr)
                rng = np.random.default_rng([cfg.seed, 11, m, d])
                steps_total = cfg.teacher_epochs * max(
                    1, math.ceil(len(dataset) / cfg.batch_size)
                )
                schedule = self._schedule(steps_total)
                step = 0
                for epoch in range(cfg.teacher_epochs):
                    losses = []
                    for batch in _epoch_batches(len(dataset), cfg.batch_size, rng):
                        tau_q = temperature_at(step, schedule)
                        if m == 0 and d == 0 and epoch not in epoch_tau:
                            epoch_tau[epoch] = tau_q
                        loss = expert_training_step(
                            teacher,
                            [dataset],
                            [batch],
                            teachers=None,
                            optimizer=opt,
                            top_k=len(dataset),
                            temperature=1.0 / self.model.beta,
                            alpha_grid=self.alpha_grid,
                            tau_q=tau_q,
                            tau_p=cfg.tau_p,
                            lambda_anchor=0.0,
                            dense=True,
                            audit=self.audit,
                        )
                        if np.isfinite(loss):
                            losses.append(loss)
                        step += 1
                    if losses:
                        epoch_losses[epoch].append(float(np.mean(losses)))
                per_dataset.append(teacher)
            teachers.append(per_dataset)
        self.teachers = teachers
        for epoch in range(cfg.teacher_epochs):
            if epoch_losses[epoch]:
                self.log.append(
                    LogRow(
                        stage="teacher",
                        epoch=epoch,
                        mean_loss=float(np.mean(epoch_losses[epoch])),
                        tau_q=epoch_tau.get(epoch, cfg.tau_start),
                    )
                )

    def _teacher_bias_map(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Mean teacher map across datasets; the student's starting geometry."""
        assert self.teachers is not None
        maps = [t.as_arrays() for t in self.teachers[m]]
        A0 = np.mean([a for a, _ in maps], axis=0)
        b0 = np.mean([b for _, b in maps], axis=0)
        return A0, b0

    def _make_encoder(self, m: int):
        if self.model.encoder_kind == "fixed_affine":
            encoder = FixedAffineMap(
                self.model.context_dim,
                self.model.latent_dim,
                seed=self.train.seed * 1000 + 500 + m,
            )
            if self.teachers is not None:
                A0, b0 = self._teacher_bias_map(m)
                encoder.A.data = A0.copy()
                encoder.b.data = b0.copy()
            return encoder
        bias_map = (
            self._teacher_bias_map(m) if self.teachers is not None else "identity"
        )
        return HypernetworkParams(
            context_dim=self.model.context_dim,
            latent_dim=self.model.latent_dim,
            hidden_dim=self.model.hidden_dim,
            hidden_layers=self.model.hidden_layers,
            activation=self.model.activation,
            seed=self.train.seed * 1000 + 500 + m,
            final_bias_map=bias_map,
        )

    def fit_experts(self) -> None:
        if self.teachers is None:
            raise RareCPError("experts cannot be trained before the teacher bank")
        cfg = self.train
        experts: list[RetrievalExpert] = []
        epoch_losses: dict[int, list[float]] = {e: [] for e in range(cfg.epochs)}
        steps_total = cfg.epochs * self._steps_per_epoch()
        schedule = self._schedule(steps_total)
        for m in range(self.model.n_experts):
            encoder = self._make_encoder(m)
            teacher_arrays = [t.as_arrays() for t in self.teachers[m]]
            opt = Adam(encoder.parameters(), lr=cfg.student_lr)
            rng = np.random.default_rng([cfg.seed, 22, m])
            step = 0
            for epoch in range(cfg.epochs):
                losses = []
                for round_batches in self._batches(rng):
                    tau_q = temperature_at(step, schedule)
                    loss = expert_training_step(
                        encoder,
                        self.datasets,
                        round_batches,
                        teachers=teacher_arrays,
                        optimizer=opt,
                        top_k=self.model.top_k,
                        temperature=1.0 / self.model.beta,
                        alpha_grid=self.alpha_grid,
                        tau_q=tau_q,
                        tau_p=cfg.tau_p,
                        lambda_anchor=cfg.lambda_anchor,
                        audit=self.audit,
                    )
                    if np.isfinite(loss):
                        losses.append(loss)
                    step += 1
                if losses:
                    epoch_losses[epoch].append(float(np.mean(losses)))
            experts.append(
                RetrievalExpert(encoder=encoder, config=self.model.expert_config())
            )
        self.experts = experts
        for epoch in range(cfg.epochs):
            if epoch_losses[epoch]:
                self.log.append(
                    LogRow(
                        stage="expert",
                        epoch=epoch,
                        mean_loss=float(np.mean(epoch_losses[epoch])),
                        tau_q=temperature_at(epoch * self._steps_per_epoch(), schedule),
                    )
                )

    def fit_gate(self) -> None:
        if self.experts is None:
            raise RareCPError("the gate cannot be trained before the experts")
        cfg = self.train
        gate = GateParams(
            context_dim=self.model.context_dim,
            n_experts=self.model.n_experts,
            hidden_dim=self.model.gate_hidden_dim,
            activation=self.model.activation,
            seed=cfg.seed * 1000 + 900,
        )
        opt = Adam(gate.parameters(), lr=cfg.gate_lr)
        rng = np.random.default_rng([cfg.seed, 33])
        steps_total = cfg.epochs * self._steps_per_epoch()
        schedule = self._schedule(steps_total)

        # experts are frozen, so one fixed batch partition is prepared once
        # and its leave-one-out supports reused for every gate epoch
        prepared_rounds: list[list[_PreparedGateBatch]] = []
        for round_batches in self._batches(rng):
            prepared = [
                _prepare_gate_batch(self.experts, dataset, np.asarray(batch), self.audit)
                for dataset, batch in zip(self.datasets, round_batches)
                if _valid_batch(np.asarray(batch))
            ]
            if prepared:
                prepared_rounds.append(prepared)
        if not prepared_rounds:
            raise DataError("no usable gate training batches")

        step = 0
        for epoch in range(cfg.epochs):
            losses = []
            for prepared in prepared_rounds:
                tau_q = temperature_at(step, schedule)
                opt.zero_grad()
                with Tape() as tape:
                    total = gate_batch_loss(
                        gate, prepared, self.alpha_grid, tau_q, cfg.tau_p,
                        cfg.lambda_entropy,
                    )
                value = float(total.data)
                if not np.isfinite(value):
                    raise NumericError("gate training loss is not finite")
                tape.backward(total)
                opt.step()
                losses.append(value)
                step += 1
            if losses:
                self.log.append(
                    LogRow(
                        stage="gate",
                        epoch=epoch,
                        mean_loss=float(np.mean(losses)),
                        tau_q=temperature_at(epoch * self._steps_per_epoch(), schedule),
                    )
                )
        self.gate = gate

    def run(self) -> "Trainer":
        self.fit_teachers()
        self.fit_experts()
        self.fit_gate()
        return self


def fit_teacher_bank(
    datasets: list[CalibrationDataset], model: ModelConfig, train: TrainConfig
) -> list[list[FixedAffineMap]]:
    """Prefit dataset-level affine teacher maps, one per (expert, dataset)."""
    trainer = Trainer(datasets, model, train)
    trainer.fit_teachers()
    assert trainer.teachers is not None
    return trainer.teachers


def train_pipeline(
    datasets: list[CalibrationDataset], model: ModelConfig, train: TrainConfig
) -> Trainer:
    """Run the full three-stage pipeline and return the fitted trainer."""
    return Trainer(datasets, model, train).run()


def write_training_log(rows: list[LogRow], path) -> None:
    """One CSV line per epoch: stage, epoch, mean loss, current tau_q."""
    lines = ["stage,epoch,mean_loss,tau_q"]
    for row in rows:
        lines.append(
            f"{row.stage},{row.epoch},{row.mean_loss!r},{row.tau_q!r}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
