"""
Meta-losses that score speculative parameters on the labelled target train split.

Supervised: nearest-centroid (prototype) cross entropy on a K-way N-shot
episode, with features taken from the penultimate layer. Unsupervised: mean
negative ELBO of a batch of target images.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from .data import ImageSet
from .errors import ConfigurationError, ContractError
from .ndmath import DTYPE, RandomStream
from .net import (HeadKind, LossKind, MLPSpec, ParamVector, features, features_backward,
                  loss_and_grads, vae_batch_loss)

LOGGER = logging.getLogger(__name__)


class MetaObjective(str, Enum):
    NCC = "ncc"
    RECONSTRUCTION = "reconstruction"


@dataclass(frozen=True)
class MetaBatchConfig:
    """
    K-way N-shot episode shape with Q queries per class.

    reuse_support evaluates the classifier on its own support examples
    instead of held-out queries.
    """
    ways: int = 10
    shots: int = 5
    queries: Optional[int] = None
    reuse_support: bool = False

    def __post_init__(self):
        if self.queries is None:
            object.__setattr__(self, "queries", self.shots)
        if self.ways < 2:
            raise ConfigurationError(f"an episode needs at least 2 ways, got {self.ways}")
        if self.shots < 1:
            raise ConfigurationError(f"an episode needs at least 1 shot, got {self.shots}")
        if self.queries < 1:
            raise ConfigurationError(f"an episode needs at least 1 query per class, got {self.queries}")

    @property
    def per_class(self) -> int:
        return self.shots if self.reuse_support else self.shots + self.queries


@dataclass(frozen=True)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    ways: int
    shots: int


class NccResult(NamedTuple):
    loss: float
    d_support: np.ndarray
    d_query: np.ndarray


class MetaGradient(NamedTuple):
    loss: float
    grad: ParamVector


def sample_episode(target_train: ImageSet, cfg: MetaBatchConfig, rng: RandomStream) -> Episode:
    """Draw a K-way N-shot episode (plus queries) without replacement."""
    if target_train.labels is None:
        raise ConfigurationError("episodes need a labelled target train set")
    labels = np.asarray(target_train.labels)
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= cfg.per_class]
    if len(eligible) < cfg.ways:
        raise ConfigurationError(
            f"a {cfg.ways}-way episode needs {cfg.ways} classes with at least {cfg.per_class} "
            f"examples each; only {len(eligible)} of {len(classes)} classes qualify")
    chosen = np.sort(eligible[rng.choice(len(eligible), cfg.ways, replace=False)])
    support, query = [], []
    for c in chosen:
        idx = np.flatnonzero(labels == c)
        perm = idx[rng.permutation(len(idx))]
        support.append(perm[:cfg.shots])
        if cfg.reuse_support:
            query.append(perm[:cfg.shots])
        else:
            query.append(perm[cfg.shots:cfg.shots + cfg.queries])
    support_idx = np.concatenate(support)
    query_idx = np.concatenate(query)
    flat = target_train.flat()
    return Episode(flat[support_idx], labels[support_idx], flat[query_idx], labels[query_idx],
                   support_idx, query_idx, cfg.ways, cfg.shots)


def ncc_loss_and_grads(features_support: np.ndarray, support_labels,
                       features_query: np.ndarray, query_labels) -> NccResult:
    """Nearest-centroid cross entropy and its gradients w.r.t. both feature sets."""
    fs = np.atleast_2d(np.asarray(features_support, dtype=DTYPE))
    fq = np.atleast_2d(np.asarray(features_query, dtype=DTYPE))
    ys = np.asarray(support_labels)
    yq = np.asarray(query_labels)
    classes = np.unique(ys)
    missing = np.setdiff1d(np.unique(yq), classes)
    if missing.size:
        raise ContractError(f"query classes {missing.tolist()} have no support examples")
    member = ys[None, :] == classes[:, None]
    counts = member.sum(axis=1).astype(DTYPE)
    centroids = (member.astype(DTYPE) @ fs) / counts[:, None]

    diff = fq[:, None, :] - centroids[None, :, :]
    logits = -np.sum(diff * diff, axis=2)
    target = np.searchsorted(classes, yq)
    lse = logsumexp(logits, axis=1)
    rows = np.arange(len(yq))
    loss = float(np.mean(lse - logits[rows, target]))

    d_logits = np.exp(logits - lse[:, None])
    d_logits[rows, target] -= 1.0
    d_logits /= len(yq)
    d_query = -2.0 * np.einsum("qk,qkd->qd", d_logits, diff)
    d_centroids = 2.0 * np.einsum("qk,qkd->kd", d_logits, diff)
    d_support = (member.T.astype(DTYPE) / counts[None, :]) @ d_centroids
    return NccResult(loss, d_support, d_query)


def ncc_meta_loss(features_support: np.ndarray, support_labels,
                  features_query: np.ndarray, query_labels) -> float:
    """Mean cross entropy of queries under logits -||f - c_k||^2."""
    return ncc_loss_and_grads(features_support, support_labels, features_query, query_labels).loss


def reconstruction_meta_loss(spec: MLPSpec, theta: ParamVector, target_batch,
                             rng: RandomStream) -> float:
    """Mean negative ELBO of the batch; one latent noise draw is shared by all rows."""
    batch = _as_rows(spec, target_batch)
    noise = rng.normal(spec.latent)
    return float(np.mean(vae_batch_loss(spec, theta, batch, noise)))


def _as_rows(spec: MLPSpec, target_batch) -> np.ndarray:
    if isinstance(target_batch, ImageSet):
        target_batch = target_batch.flat()
    batch = np.asarray(target_batch, dtype=DTYPE)
    if batch.ndim == 1:
        batch = batch[None, :]
    if len(batch) == 0:
        raise ContractError("the target batch is empty")
    return batch.reshape(len(batch), -1)


def meta_grad(spec: MLPSpec, theta: ParamVector, objective: MetaObjective, inputs,
              rng: Optional[RandomStream] = None, noise=None, scale: float = 1.0) -> MetaGradient:
    """
    Meta-loss at theta and its exact gradient with respect to theta.

    NCC takes an Episode; reconstruction takes a batch of target images and
    either explicit latent noise or a stream to draw the shared noise from.
    """
    objective = MetaObjective(objective)
    if objective is MetaObjective.NCC:
        if not isinstance(inputs, Episode):
            raise ContractError("the NCC meta-loss needs an Episode")
        f_s, trace_s = features(spec, theta, inputs.support_x)
        f_q, trace_q = features(spec, theta, inputs.query_x)
        res = ncc_loss_and_grads(f_s, inputs.support_y, f_q, inputs.query_y)
        grad = (features_backward(spec, theta, trace_s, res.d_support)
                + features_backward(spec, theta, trace_q, res.d_query))
        return MetaGradient(scale * res.loss, theta.with_values(scale * grad))

    if spec.head is not HeadKind.VAE:
        raise ContractError("the reconstruction meta-loss needs a VAE model")
    batch = _as_rows(spec, inputs)
    if noise is None:
        if rng is None:
            raise ContractError("reconstruction meta-gradients need latent noise or a random stream")
        noise = rng.normal(spec.latent)
    noise = np.broadcast_to(np.asarray(noise, dtype=DTYPE), (len(batch), spec.latent))
    lg = loss_and_grads(spec, theta, batch, LossKind.VAE, noise=noise, per_example=False)
    m = len(batch)
    return MetaGradient(scale * float(np.mean(lg.losses)), theta.with_values(scale * lg.grads / m))


class TargetMetaLoss:
    """
    Callable meta-loss over the target train split.

    Every call draws a fresh episode (NCC) or a fresh batch of target images
    (reconstruction) from its own stream, then returns the loss and gradient
    at the given parameters.
    """

    def __init__(self, spec: MLPSpec, target_train: ImageSet, objective: MetaObjective,
                 rng: RandomStream, episode: Optional[MetaBatchConfig] = None,
                 batch_size: int = 64):
        self.spec = spec
        self.target_train = target_train
        self.objective = MetaObjective(objective)
        self.rng = rng
        self.episode = episode or MetaBatchConfig()
        self.batch_size = batch_size
        self._flat = target_train.flat()
        if self.objective is MetaObjective.NCC:
            # fail on an infeasible episode shape before training starts
            sample_episode(target_train, self.episode, rng.child(rng.stream_id + 1000))
        elif len(target_train) == 0:
            raise ConfigurationError("the reconstruction meta-loss needs target train images")

    def __call__(self, theta: ParamVector) -> MetaGradient:
        if self.objective is MetaObjective.NCC:
            episode = sample_episode(self.target_train, self.episode, self.rng)
            return meta_grad(self.spec, theta, self.objective, episode)
        size = min(self.batch_size, len(self._flat))
        idx = np.sort(self.rng.choice(len(self._flat), size, replace=False))
        return meta_grad(self.spec, theta, self.objective, self._flat[idx], rng=self.rng)
