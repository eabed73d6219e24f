"""
Experiment runner: data split, model, weighting method, pruning and evaluation.
"""
import logging
import time
from typing import Any, Dict, List, NamedTuple, Optional, Union

import numpy as np

from .config import ExperimentConfig
from .data import Domain, ImageSet, SplitSpec, build_mixed_splits, load_domain, synth_domain_pools
from .errors import ConfigurationError, ContractError
from .metaloss import MetaBatchConfig, MetaObjective, TargetMetaLoss
from .ndmath import DTYPE, RandomStream
from .net import (HeadKind, LossKind, MLPSpec, ParamVector, features, init_params, loss_and_grads,
                  vae_batch_loss)
from .report import EpochRecord, MetricsReport, WeightSnapshot, export_report, format_time
from .weighters import (BetaWeightTable, HyperParams, InnerLoss, PruneConfig, ScalarWeightTable,
                        SourceBatch, bdw_step, domain_means, dw_step, fixed_weight_step, l2rw_step,
                        nn_weights, prune_bdw, prune_dw)

LOGGER = logging.getLogger(__name__)

# Derived random streams, one per concern
DATA_STREAM = 1
INIT_STREAM = 2
TRAIN_STREAM = 3
WEIGHT_STREAM = 4
META_STREAM = 5
EVAL_STREAM = 6
SPLIT_STREAM = 7

READOUT_MAX_ITER = 800
READOUT_TOL = 1e-6


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_vae(spec: MLPSpec, theta: ParamVector, test_set: Union[ImageSet, np.ndarray],
                 rng: RandomStream, samples: int = 1) -> float:
    """
    Mean negative ELBO over the test set.

    Each of the samples draws one latent noise vector shared by all images.
    """
    if spec.head is not HeadKind.VAE:
        raise ContractError("evaluate_vae needs a VAE model")
    x = test_set.flat() if isinstance(test_set, ImageSet) else np.asarray(test_set, dtype=DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    if len(x) == 0:
        raise ContractError("cannot evaluate on an empty test set")
    total = 0.0
    for _ in range(samples):
        noise = rng.normal(spec.latent)
        total += float(np.mean(vae_batch_loss(spec, theta, x, noise)))
    return total / samples


def evaluate_rotation(spec: MLPSpec, theta: ParamVector, test_set: ImageSet) -> float:
    """Rotation loss averaged over every test image and all four rotations."""
    return float(np.mean(loss_and_grads(spec, theta, test_set.images, LossKind.ROTATION,
                                        per_example=False).losses))


def _train_mask(n: int, split) -> np.ndarray:
    if isinstance(split, (int, np.integer)):
        if not 0 < split < n:
            raise ContractError(f"split must leave train and test rows, got {split} of {n}")
        mask = np.zeros(n, dtype=bool)
        mask[:split] = True
        return mask
    mask = np.asarray(split, dtype=bool)
    if mask.shape != (n,):
        raise ContractError(f"split mask has shape {mask.shape} for {n} rows")
    if mask.all() or not mask.any():
        raise ContractError("split mask must select both train and test rows")
    return mask


class LogisticReadout(NamedTuple):
    """Multinomial logistic regression fitted on frozen features."""
    classes: np.ndarray
    weights: np.ndarray

    def predict(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats, dtype=DTYPE)
        scores = np.hstack([feats, np.ones((len(feats), 1))]) @ self.weights
        return self.classes[np.argmax(scores, axis=1)]

    def accuracy(self, feats: np.ndarray, labels: np.ndarray) -> float:
        labels = np.asarray(labels)
        if len(labels) == 0:
            raise ContractError("cannot score an empty evaluation set")
        return float(np.mean(self.predict(feats) == labels))


def fit_logistic(feats: np.ndarray, labels: np.ndarray, max_iter: int = READOUT_MAX_ITER,
                 tol: float = READOUT_TOL) -> LogisticReadout:
    """
    Fit a multinomial logistic regression by full-batch gradient descent.

    The step is 1/L on the mean cross entropy plus (c/2)*||W||^2 with
    c = 100 / (classes * feature_dim); the bias is not penalised.

    Args:
        feats: (n, m) feature rows.
        labels: n class labels, at least two distinct.
        max_iter: Iteration cap.
        tol: Stop once the gradient norm falls below this.

    Returns:
        The fitted LogisticReadout.

    Raises:
        ContractError: If shapes disagree or the labels hold a single class.
    """
    feats = np.asarray(feats, dtype=DTYPE)
    labels = np.asarray(labels)
    if feats.ndim != 2 or len(feats) != len(labels):
        raise ContractError(f"features {feats.shape} do not match {labels.shape} labels")
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ContractError("the readout training split holds a single class")
    n, m = feats.shape
    c = len(classes)
    reg = 100.0 / (c * m)
    X = np.hstack([feats, np.ones((n, 1))])
    Y = np.eye(c)[y]
    lipschitz = 0.5 * np.linalg.norm(X, 2) ** 2 / n + reg
    step = 1.0 / lipschitz
    W = np.zeros((m + 1, c))
    penal = np.ones((m + 1, 1))
    penal[-1] = 0.0
    for it in range(max_iter):
        logits = X @ W
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = X.T @ (p - Y) / n + reg * penal * W
        if np.linalg.norm(grad) < tol:
            LOGGER.debug("logistic fit converged after %d iterations", it)
            break
        W -= step * grad
    return LogisticReadout(classes, W)


def linear_probe(feats: np.ndarray, labels: np.ndarray, split, max_iter: int = READOUT_MAX_ITER,
                 tol: float = READOUT_TOL) -> float:
    """
    Held-out accuracy of a logistic regression on frozen features.

    split is the number of leading training rows or a boolean train mask;
    the remaining rows are scored.
    """
    feats = np.asarray(feats, dtype=DTYPE)
    labels = np.asarray(labels)
    if feats.ndim != 2 or len(feats) != len(labels):
        raise ContractError(f"features {feats.shape} do not match {labels.shape} labels")
    train = _train_mask(len(feats), split)
    model = fit_logistic(feats[train], labels[train], max_iter, tol)
    return model.accuracy(feats[~train], labels[~train])


def readout_accuracies(spec: MLPSpec, theta: ParamVector, target_train: ImageSet,
                       *eval_sets: ImageSet) -> List[float]:
    """Fit one logistic readout on target-train features and score it on each evaluation set."""
    f_train, _ = features(spec, theta, target_train.flat())
    model = fit_logistic(f_train, target_train.labels)
    return [model.accuracy(features(spec, theta, s.flat())[0], s.labels) for s in eval_sets]


# ---------------------------------------------------------------------------
# Setup


def load_domains(cfg: ExperimentConfig, rng: RandomStream) -> List[Domain]:
    """Generated domains for synthetic runs, otherwise the IDX folders under cfg.data_dir."""
    if cfg.synthetic:
        return synth_domain_pools(rng, cfg.synth_per_domain, cfg.target_test, cfg.synth_size)
    return [load_domain(cfg.data_dir, name) for name in cfg.domains]


def build_model(cfg: ExperimentConfig, side: int) -> MLPSpec:
    """VAE or 4-way rotation classifier for side x side images."""
    d = side * side
    if cfg.task == "vae":
        return MLPSpec((d, cfg.hidden, cfg.latent), cfg.activation, HeadKind.VAE)
    return MLPSpec((d, cfg.hidden, 4), cfg.activation, HeadKind.CLASSIFIER)


def learning_rate(cfg: ExperimentConfig, epoch: int) -> float:
    """Step decay by lr_decay once past each milestone epoch."""
    passed = sum(1 for m in cfg.lr_milestones if epoch > m)
    return cfg.alpha * cfg.lr_decay ** passed


class _Weighting:
    """Per-method weight state behind a common step/prune interface."""

    def __init__(self, cfg: ExperimentConfig, source: ImageSet, target_train: ImageSet,
                 inner: InnerLoss, meta: Optional[TargetMetaLoss], rng: RandomStream):
        self.cfg = cfg
        self.method = cfg.method
        self.inner = inner
        self.meta = meta
        self.rng = rng
        self.tags = source.domain_tags
        n = len(source)
        self.prune = PruneConfig(cfg.lam, cfg.rho, cfg.prune_rule)
        self.table = None
        self.fixed = None
        if self.method == "bdw":
            self.table = BetaWeightTable.uniform(n, self.tags)
        elif self.method == "dw":
            self.table = ScalarWeightTable.zeros(n, self.tags)
        elif self.method == "nn":
            self.fixed = nn_weights(source.flat(), target_train.flat(), cfg.nn_beta)
        else:
            self.fixed = np.ones(n)
        self._active = np.ones(n, dtype=bool)
        if self.method == "oracle":
            if self.tags is None:
                raise ConfigurationError("the oracle run needs domain tags on the source set")
            self._active = np.asarray([str(t) == cfg.target for t in self.tags])
            if not self._active.any():
                raise ConfigurationError(f"no source instances belong to target '{cfg.target}'")

    @property
    def active(self) -> np.ndarray:
        return self.table.active if self.table is not None else self._active

    def expected_weight(self) -> np.ndarray:
        if self.table is not None:
            return self.table.expected_weight()
        return self.fixed * self._active

    def step(self, batch: SourceBatch, theta: ParamVector, hp: HyperParams):
        if self.method == "bdw":
            _, _, res = bdw_step(batch, theta, self.table, hp, self.rng, self.inner, self.meta)
        elif self.method == "dw":
            _, _, res = dw_step(batch, theta, self.table, hp, self.rng, self.inner, self.meta)
        elif self.method == "l2rw":
            res = l2rw_step(batch, theta, hp, self.inner, self.meta, lookahead=self.cfg.l2rw_lookahead)
        else:
            res = fixed_weight_step(batch, theta, self.fixed[batch.indices], hp, self.inner)
        return res

    def prune_epoch(self) -> int:
        if not self.cfg.prune_enabled or self.table is None:
            return 0
        if self.method == "bdw":
            _, pruned = prune_bdw(self.table, self.prune)
        else:
            _, pruned = prune_dw(self.table, self.cfg.lam)
        return pruned

    def snapshot(self) -> WeightSnapshot:
        if isinstance(self.table, BetaWeightTable):
            return WeightSnapshot(self.tags, self.table.expected_weight(), self.table.active.copy(),
                                  self.table.a, self.table.b)
        return WeightSnapshot(self.tags, self.expected_weight(), self.active.copy())


def _make_batch(cfg: ExperimentConfig, spec: MLPSpec, source: ImageSet, flat: np.ndarray,
                idx: np.ndarray, rng: RandomStream) -> SourceBatch:
    if cfg.task == "vae":
        return SourceBatch(idx, flat[idx], noise=rng.normal((len(idx), spec.latent)))
    targets = None if cfg.all_rotations else rng.integers(0, 4, len(idx))
    return SourceBatch(idx, source.images[idx], targets=targets)


def _domain_active(tags: Optional[np.ndarray], active: np.ndarray) -> Dict[str, int]:
    if tags is None:
        return {}
    names = np.asarray([str(t) for t in tags])
    return {name: int(np.count_nonzero(active & (names == name))) for name in sorted(set(names))}


# ---------------------------------------------------------------------------
# Main loop


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> MetricsReport:
    """
    Train with the configured weighting method and collect per-epoch metrics.

    Data and meta-loss problems surface before the first training step.
    Rotation runs with a validation split score a logistic readout on it
    every epoch; the summary then names the epoch with the best validation
    accuracy and its test accuracy.

    Args:
        cfg: Run settings; validated before anything is loaded.
        write: Write the report to cfg.out_dir when it is set.

    Returns:
        MetricsReport with one record per epoch, the final weights and a summary.

    Raises:
        ConfigurationError: On invalid settings, infeasible splits or an
            empty source set.
        FileNotFoundError: If an IDX domain folder or file is missing.
        FormatError: If an IDX file is malformed.
    """
    cfg.validate()
    root = RandomStream(cfg.seed)
    domains = load_domains(cfg, root.child(DATA_STREAM))
    caps = {d.name: cfg.source_cap for d in domains}
    source, target_train, target_test, target_val = build_mixed_splits(
        domains, SplitSpec(cfg.target, cfg.target_train, cfg.target_test, caps, cfg.seed, cfg.target_val),
        root.child(SPLIT_STREAM))
    eval_sets = [target_test] + ([target_val] if len(target_val) else [])
    if len(source) == 0:
        raise ConfigurationError("the source set is empty")

    spec = build_model(cfg, source.side)
    theta = init_params(spec, root.child(INIT_STREAM))
    kind = LossKind.VAE if cfg.task == "vae" else LossKind.ROTATION
    inner = InnerLoss(spec, kind)
    meta = None
    if cfg.method in ("bdw", "dw", "l2rw"):
        episode = MetaBatchConfig(cfg.ways, cfg.shots, cfg.queries, cfg.reuse_support)
        meta = TargetMetaLoss(spec, target_train, MetaObjective(cfg.objective), root.child(META_STREAM),
                              episode, cfg.meta_batch_size)
    weighting = _Weighting(cfg, source, target_train, inner, meta, root.child(WEIGHT_STREAM))
    train_rng = root.child(TRAIN_STREAM)
    flat = source.flat()
    LOGGER.info("Running %s on %s: %d source images, model %s with %d parameters",
                cfg.method, cfg.task, len(source), spec.widths, spec.n_params)

    report = MetricsReport(config=cfg.to_dict())
    total_seconds = 0.0
    total_batches = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(cfg, epoch)
        hp = HyperParams(lr, cfg.eta, cfg.batch_size, cfg.epochs)
        start = time.perf_counter()
        active_idx = np.flatnonzero(weighting.active)
        order = active_idx[train_rng.permutation(len(active_idx))]
        train_losses, meta_losses = [], []
        batches = 0
        for s in range(0, len(order), cfg.batch_size):
            batch = _make_batch(cfg, spec, source, flat, order[s:s + cfg.batch_size], train_rng)
            res = weighting.step(batch, theta, hp)
            theta = res.theta
            train_losses.append(res.train_loss)
            if not np.isnan(res.meta_loss):
                meta_losses.append(res.meta_loss)
            batches += 1
            LOGGER.debug("epoch %d batch %d: train %.5f, meta %.5f", epoch, batches,
                         res.train_loss, res.meta_loss)
        pruned = weighting.prune_epoch()
        seconds = time.perf_counter() - start
        total_seconds += seconds
        total_batches += batches

        test_accuracy = val_accuracy = None
        if cfg.task == "vae":
            test_loss = evaluate_vae(spec, theta, target_test, root.child(EVAL_STREAM), cfg.eval_samples)
        else:
            test_loss = evaluate_rotation(spec, theta, target_test)
            if (len(target_val) or epoch == cfg.epochs
                    or (cfg.probe_every and epoch % cfg.probe_every == 0)):
                scores = readout_accuracies(spec, theta, target_train, *eval_sets)
                test_accuracy = scores[0]
                val_accuracy = scores[1] if len(scores) > 1 else None
        expected = weighting.expected_weight()
        record = EpochRecord(
            epoch=epoch, lr=lr, batches=batches,
            train_loss=float(np.mean(train_losses)) if train_losses else None,
            meta_loss=float(np.mean(meta_losses)) if meta_losses else None,
            test_loss=test_loss, test_accuracy=test_accuracy, val_accuracy=val_accuracy,
            active=int(weighting.active.sum()), pruned=pruned,
            mean_weight=float(expected.mean()),
            domain_weight=domain_means(expected, source.domain_tags),
            domain_active=_domain_active(source.domain_tags, weighting.active),
            wall_seconds=seconds)
        report.records.append(record)
        LOGGER.info("Epoch %d/%d: test loss %.4f, active %d, pruned %d, %s",
                    epoch, cfg.epochs, test_loss, record.active, pruned, format_time(total_seconds))
        if val_accuracy is not None:
            LOGGER.info("Epoch %d readout: val accuracy %.4f, test accuracy %.4f", epoch, val_accuracy, test_accuracy)

    report.weights = weighting.snapshot()
    report.summary = _summary(cfg, report, source, total_seconds, total_batches)
    if write and cfg.out_dir:
        export_report(report, cfg.out_dir)
    return report


def _summary(cfg: ExperimentConfig, report: MetricsReport, source: ImageSet,
             seconds: float, batches: int) -> Dict[str, Any]:
    last = report.records[-1] if report.records else None
    summary = {
        "method": cfg.method,
        "task": cfg.task,
        "target": cfg.target,
        "epochs": len(report.records),
        "source_size": len(source),
        "final_test_loss": last.test_loss if last else None,
        "final_test_accuracy": last.test_accuracy if last else None,
        "final_active": last.active if last else len(source),
        "selected_epoch": None,
        "selected_val_accuracy": None,
        "selected_test_accuracy": None,
        "total_batches": batches,
        "wall_seconds": seconds,
    }
    scored = [r for r in report.records if r.val_accuracy is not None]
    if scored:
        # earliest epoch wins ties
        best = max(scored, key=lambda r: r.val_accuracy)
        summary["selected_epoch"] = best.epoch
        summary["selected_val_accuracy"] = best.val_accuracy
        summary["selected_test_accuracy"] = best.test_accuracy
    if source.domain_tags is not None and report.weights is not None:
        names = np.asarray([str(t) for t in source.domain_tags])
        sizes, pruned_fraction = {}, {}
        ever_trainable = np.ones(len(source), dtype=bool)
        if cfg.method == "oracle":
            ever_trainable = names == cfg.target
        for name in sorted(set(names)):
            sel = names == name
            sizes[name] = int(sel.sum())
            base = sel & ever_trainable
            lost = base & ~report.weights.active
            pruned_fraction[name] = float(lost.sum() / base.sum()) if base.any() else 0.0
        summary["domain_sizes"] = sizes
        summary["pruned_fraction"] = pruned_fraction
        summary["final_domain_weight"] = domain_means(report.weights.expected_weight, source.domain_tags)
    return summary
