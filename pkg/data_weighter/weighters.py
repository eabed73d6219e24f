"""
Instance weighting algorithms.

BetaDataWeighter keeps a Beta(a, b) belief per source instance and learns
(log a, log b) from meta-gradients of a one-step speculative update.
DataWeighter does the same with clipped point weights. L2RW derives
throwaway per-batch weights, and the NN weighter fixes weights before
training from nearest-neighbour distances to the target set.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, ContractError
from .metaloss import MetaGradient
from .ndmath import DTYPE, RandomStream, betainc, implicit_beta_grads, sample_beta_many
from .net import LossGrads, LossKind, MLPSpec, ParamVector, loss_and_grads

LOGGER = logging.getLogger(__name__)

PRUNE_RULES = ("prose", "equation")
NN_CHUNK = 1024

MetaFn = Callable[[ParamVector], MetaGradient]


# ---------------------------------------------------------------------------
# Tables and settings


@dataclass
class BetaWeightTable:
    """
    Per-instance Beta parameters stored in log space.

    Pruned rows keep their last (log a, log b) for analysis but are never
    sampled or updated again.
    """
    log_a: np.ndarray
    log_b: np.ndarray
    active: np.ndarray
    domain_tags: Optional[np.ndarray] = None

    def __post_init__(self):
        self.log_a = np.array(self.log_a, dtype=DTYPE)
        self.log_b = np.array(self.log_b, dtype=DTYPE)
        self.active = np.array(self.active, dtype=bool)
        n = self.log_a.shape
        if self.log_a.ndim != 1 or self.log_b.shape != n or self.active.shape != n:
            raise ContractError("log_a, log_b and active must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(self.log_a)) and np.all(np.isfinite(self.log_b))):
            raise ContractError("Beta log-parameters must be finite")
        if self.domain_tags is not None:
            self.domain_tags = np.asarray(self.domain_tags)
            if self.domain_tags.shape != n:
                raise ContractError("domain_tags must have one entry per instance")

    @classmethod
    def uniform(cls, n: int, domain_tags=None) -> "BetaWeightTable":
        """Every instance starts at Beta(1, 1)."""
        return cls(np.zeros(n), np.zeros(n), np.ones(n, dtype=bool), domain_tags)

    def __len__(self) -> int:
        return self.log_a.shape[0]

    @property
    def a(self) -> np.ndarray:
        return np.exp(self.log_a)

    @property
    def b(self) -> np.ndarray:
        return np.exp(self.log_b)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def expected_weight(self) -> np.ndarray:
        """E[w] = a / (a + b) per instance."""
        # computed in log space so huge parameters stay finite
        return 1.0 / (1.0 + np.exp(self.log_b - self.log_a))


@dataclass
class ScalarWeightTable:
    """Point weights in [0, 1], zero at start."""
    w: np.ndarray
    active: np.ndarray
    domain_tags: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = np.clip(np.array(self.w, dtype=DTYPE), 0.0, 1.0)
        self.active = np.array(self.active, dtype=bool)
        if self.w.ndim != 1 or self.active.shape != self.w.shape:
            raise ContractError("w and active must be 1-D arrays of equal length")

    @classmethod
    def zeros(cls, n: int, domain_tags=None) -> "ScalarWeightTable":
        return cls(np.zeros(n), np.ones(n, dtype=bool), domain_tags)

    def __len__(self) -> int:
        return self.w.shape[0]

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def expected_weight(self) -> np.ndarray:
        return self.w.copy()


@dataclass(frozen=True)
class PruneConfig:
    """
    lam is the CDF threshold, rho the density threshold.

    rule="prose" prunes when CDF(lam) > rho. rule="equation" keeps exactly
    those instances instead and prunes the rest.
    """
    lam: float = 0.25
    rho: float = 0.5
    rule: str = "prose"

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ConfigurationError(f"lambda must lie in (0, 1), got {self.lam}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in (0, 1), got {self.rho}")
        if self.rule not in PRUNE_RULES:
            raise ConfigurationError(f"unknown prune rule '{self.rule}', expected one of {PRUNE_RULES}")


@dataclass(frozen=True)
class HyperParams:
    """Inner rate alpha, outer rate eta, batch size k, epochs T."""
    alpha: float = 1e-4
    eta: float = 10.0
    k: int = 64
    T: int = 100

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        # eta = 0 freezes the weights
        if not self.eta >= 0:
            raise ConfigurationError(f"eta must be non-negative, got {self.eta}")
        if self.k < 1:
            raise ConfigurationError(f"batch size must be at least 1, got {self.k}")
        if self.T < 1:
            raise ConfigurationError(f"epochs must be at least 1, got {self.T}")


@dataclass(frozen=True)
class SourceBatch:
    """
    A mini-batch of source instances.

    inputs feed loss_and_grads; targets carry rotation or class labels and
    noise the VAE latent draws, both aligned with indices.
    """
    indices: np.ndarray
    inputs: np.ndarray
    targets: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", indices)
        if len(indices) == 0:
            raise ContractError("a source batch needs at least one instance")
        if len(self.inputs) != len(indices):
            raise ContractError(f"{len(self.inputs)} inputs for {len(indices)} indices")
        if len(np.unique(indices)) != len(indices):
            raise ContractError("a source batch must not repeat an instance")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class InnerLoss:
    """Per-instance self-supervised loss of the model being pre-trained."""
    spec: MLPSpec
    kind: LossKind

    def __call__(self, theta: ParamVector, batch: SourceBatch) -> LossGrads:
        return loss_and_grads(self.spec, theta, batch.inputs, self.kind,
                              targets=batch.targets, noise=batch.noise)


class StepResult(NamedTuple):
    theta: ParamVector
    weights: np.ndarray
    train_loss: float
    meta_loss: float = float("nan")
    n_clamped: int = 0
    grad_log_a: Optional[np.ndarray] = None
    grad_log_b: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Shared pieces


def _grad_matrix(g) -> np.ndarray:
    if isinstance(g, ParamVector):
        return g.values[None, :]
    if isinstance(g, (list, tuple)) and g and isinstance(g[0], ParamVector):
        layout = g[0].layout
        if any(gi.layout != layout for gi in g):
            raise ContractError("per-example gradients use different layouts")
        return np.stack([gi.values for gi in g])
    return np.atleast_2d(np.asarray(g, dtype=DTYPE))


def hypergrad_weights(g, m, alpha: float, k: int) -> np.ndarray:
    """
    Exact derivative of the meta-loss in each instance weight.

    theta' = theta - (alpha / k) * sum_i w_i g_i, so
    dL/dw_i = -(alpha / k) * <g_i, m> where m is the meta-gradient at theta'.
    """
    G = _grad_matrix(g)
    if isinstance(m, ParamVector):
        if isinstance(g, (list, tuple)) and g and isinstance(g[0], ParamVector) and g[0].layout != m.layout:
            raise ContractError("per-example and meta gradients use different layouts")
        m = m.values
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 1 or G.shape[1] != m.shape[0]:
        raise ContractError(f"gradient widths differ: {G.shape[1]} vs {m.shape}")
    if k < 1:
        raise ContractError(f"batch size must be at least 1, got {k}")
    return -(alpha / k) * (G @ m)


def weighted_step(theta: ParamVector, G: np.ndarray, weights: np.ndarray, alpha: float,
                  scale: Optional[float] = None) -> ParamVector:
    """theta - alpha * scale * sum_i w_i g_i, with scale defaulting to 1/k."""
    G = np.asarray(G)
    weights = np.asarray(weights, dtype=DTYPE)
    if G.shape != (len(weights), len(theta)):
        raise ContractError(f"gradient matrix of shape {G.shape} does not match "
                            f"{len(weights)} weights and {len(theta)} parameters")
    if scale is None:
        scale = 1.0 / len(weights)
    direction = (weights @ G) * scale
    return theta.with_values(theta.values - alpha * direction)


def _check_active(active: np.ndarray, batch: SourceBatch) -> None:
    if batch.indices.min() < 0 or batch.indices.max() >= len(active):
        raise ContractError("batch index outside the weight table")
    inactive = batch.indices[~active[batch.indices]]
    if inactive.size:
        raise ContractError(f"pruned instances in batch: {inactive[:5].tolist()}")


def _weighted_mean(losses: np.ndarray, weights: np.ndarray) -> float:
    return float(np.mean(weights * losses))


# ---------------------------------------------------------------------------
# Training steps


def bdw_step(batch: SourceBatch, theta: ParamVector, table: BetaWeightTable, hp: HyperParams,
             rng: RandomStream, inner: InnerLoss, meta: Optional[MetaFn],
             unit_weights: bool = False) -> Tuple[ParamVector, BetaWeightTable, StepResult]:
    """
    One BetaDataWeighter step on a batch.

    Weights are sampled from the batch rows' Beta beliefs, the model takes a
    speculative weighted step, the meta-loss gradient at the new parameters
    is chained through the implicit sample gradients into (log a, log b),
    and the speculative parameters are committed. The table is updated in
    place and only on the batch rows.

    Args:
        batch: Active source instances of this step.
        theta: Current model parameters.
        table: Beta beliefs of the whole source set.
        hp: Inner rate alpha and outer rate eta.
        rng: Stream the weights are drawn from.
        inner: Per-instance self-supervised loss.
        meta: Meta-loss gradient at given parameters, or None to skip the
            weight update.
        unit_weights: Replace the draws by ones and leave the table untouched.

    Returns:
        Tuple of (theta_next, table, StepResult with the draws, losses and
        the (log a, log b) gradients).

    Raises:
        ContractError: If the batch holds a pruned instance or an index
            outside the table.
    """
    _check_active(table.active, batch)
    idx = batch.indices
    k = len(batch)
    lg = inner(theta, batch)
    a, b = table.a[idx], table.b[idx]
    weights = np.ones(k) if unit_weights else sample_beta_many(a, b, rng)
    theta_next = weighted_step(theta, lg.grads, weights, hp.alpha)
    train_loss = _weighted_mean(lg.losses, weights)
    if meta is None:
        return theta_next, table, StepResult(theta_next, weights, train_loss)

    mg = meta(theta_next)
    if unit_weights:
        return theta_next, table, StepResult(theta_next, weights, train_loss, mg.loss)

    hg = hypergrad_weights(lg.grads, mg.grad.values, hp.alpha, k)
    dx_da, dx_db, clamped = implicit_beta_grads(weights, a, b)
    grad_log_a = hg * dx_da * a
    grad_log_b = hg * dx_db * b
    if hp.eta > 0:
        table.log_a[idx] -= hp.eta * grad_log_a
        table.log_b[idx] -= hp.eta * grad_log_b
    n_clamped = int(np.count_nonzero(clamped))
    LOGGER.debug("bdw batch: meta %.5f, train %.5f, mean w %.4f, %d clamped",
                 mg.loss, train_loss, float(weights.mean()), n_clamped)
    return theta_next, table, StepResult(theta_next, weights, train_loss, mg.loss, n_clamped,
                                         grad_log_a, grad_log_b)


def dw_step(batch: SourceBatch, theta: ParamVector, table: ScalarWeightTable, hp: HyperParams,
            rng: Optional[RandomStream], inner: InnerLoss,
            meta: MetaFn) -> Tuple[ParamVector, ScalarWeightTable, StepResult]:
    """
    One DataWeighter step: weighted update with the stored point weights,
    then w <- clip(w - eta * dL/dw, 0, 1) on the batch rows.

    rng is unused; the signature mirrors bdw_step.
    """
    _check_active(table.active, batch)
    idx = batch.indices
    k = len(batch)
    lg = inner(theta, batch)
    weights = table.w[idx].copy()
    theta_next = weighted_step(theta, lg.grads, weights, hp.alpha)
    mg = meta(theta_next)
    hg = hypergrad_weights(lg.grads, mg.grad.values, hp.alpha, k)
    table.w[idx] = np.clip(weights - hp.eta * hg, 0.0, 1.0)
    return theta_next, table, StepResult(theta_next, weights, _weighted_mean(lg.losses, weights), mg.loss)


def l2rw_weights(hypergrads: np.ndarray) -> np.ndarray:
    """max(0, -dL/dw) normalised to sum to one, or all zeros."""
    raw = np.maximum(0.0, -np.asarray(hypergrads, dtype=DTYPE))
    total = raw.sum()
    if total > 0:
        return raw / total
    return np.zeros_like(raw)


def l2rw_step(batch: SourceBatch, theta: ParamVector, hp: HyperParams, inner: InnerLoss,
              meta: MetaFn, lookahead: bool = False) -> StepResult:
    """
    Learning-to-reweight step with per-batch weights.

    Args:
        batch: Source instances of this step.
        theta: Current model parameters.
        hp: Learning rates; only alpha is used.
        inner: Per-instance self-supervised loss.
        meta: Meta-loss gradient at given parameters.
        lookahead: Take the meta-gradient after a unit-weight step
            theta - (alpha / k) * sum_i g_i instead of at theta, where the
            zero-initialised weights leave the parameters unchanged.

    Returns:
        StepResult whose weights are max(0, -dL/dw) normalised to sum to one
        (or all zero) and whose theta is theta - alpha * sum_i w_i g_i. The
        weights are not kept between batches.
    """
    k = len(batch)
    lg = inner(theta, batch)
    point = weighted_step(theta, lg.grads, np.ones(k), hp.alpha) if lookahead else theta
    mg = meta(point)
    weights = l2rw_weights(hypergrad_weights(lg.grads, mg.grad.values, hp.alpha, k))
    theta_next = weighted_step(theta, lg.grads, weights, hp.alpha, scale=1.0)
    return StepResult(theta_next, weights, float(weights @ lg.losses), mg.loss)


def fixed_weight_step(batch: SourceBatch, theta: ParamVector, weights: np.ndarray,
                      hp: HyperParams, inner: InnerLoss) -> StepResult:
    """Plain weighted SGD used by the unweighted, oracle and NN runs."""
    weights = np.asarray(weights, dtype=DTYPE)
    lg = inner(theta, batch)
    theta_next = weighted_step(theta, lg.grads, weights, hp.alpha)
    return StepResult(theta_next, weights, _weighted_mean(lg.losses, weights))


# ---------------------------------------------------------------------------
# Nearest-neighbour weights


def nn_distances(source: np.ndarray, target: np.ndarray, chunk: int = NN_CHUNK) -> np.ndarray:
    """Exact Euclidean distance from every source row to its nearest target row."""
    source = np.asarray(source, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if len(target) == 0:
        raise ConfigurationError("nearest-neighbour weights need a non-empty target set")
    source = source.reshape(len(source), -1)
    target = target.reshape(len(target), -1)
    if source.shape[1] != target.shape[1]:
        raise ContractError(f"source width {source.shape[1]} differs from target width {target.shape[1]}")
    out = np.empty(len(source))
    for start in range(0, len(source), chunk):
        block = cdist(source[start:start + chunk], target, metric="euclidean")
        out[start:start + chunk] = block.min(axis=1)
    return out


def nn_weights(source: np.ndarray, target_train: np.ndarray, beta: float) -> np.ndarray:
    """w_i = exp(-beta * d_i) with d_i the distance to the nearest target vector."""
    if not beta > 0:
        raise ConfigurationError(f"nn beta must be positive, got {beta}")
    d = nn_distances(source, target_train)
    LOGGER.info("NN weights: median distance %.3f, mean weight %.4f",
                float(np.median(d)) if len(d) else 0.0, float(np.exp(-beta * d).mean()) if len(d) else 0.0)
    return np.exp(-beta * d)


# ---------------------------------------------------------------------------
# Pruning


def prune_bdw(table: BetaWeightTable, pc: PruneConfig) -> Tuple[BetaWeightTable, int]:
    """Deactivate active rows whose Beta mass below lam exceeds rho (or the reverse rule)."""
    idx = np.flatnonzero(table.active)
    if idx.size == 0:
        return table, 0
    cdf = betainc(np.full(idx.size, pc.lam), table.a[idx], table.b[idx])
    drop = cdf > pc.rho if pc.rule == "prose" else cdf <= pc.rho
    table.active[idx[drop]] = False
    return table, int(np.count_nonzero(drop))


def prune_dw(table: ScalarWeightTable, lam: float) -> Tuple[ScalarWeightTable, int]:
    """Keep active rows with w > lam."""
    idx = np.flatnonzero(table.active)
    drop = table.w[idx] <= lam
    table.active[idx[drop]] = False
    return table, int(np.count_nonzero(drop))


def domain_means(values: np.ndarray, tags: Optional[np.ndarray],
                 mask: Optional[np.ndarray] = None) -> Dict[str, Optional[float]]:
    """Mean of values per domain tag, restricted to mask when given; None for an empty selection."""
    if tags is None:
        return {}
    values = np.asarray(values)
    out = {}
    for name in sorted({str(t) for t in tags}):
        sel = np.asarray([str(t) == name for t in tags])
        if mask is not None:
            sel &= mask
        out[name] = float(values[sel].mean()) if sel.any() else None
    return out
