"""
Small fully-connected models and their exact gradients.

Two model families share one dense-chain implementation:

* classifier-logits: input -> hidden layers -> logits (rotation prediction)
* vae-gaussian-latent: encoder input -> hidden -> (mu, log sigma^2), decoder
  mirroring the encoder back to per-pixel Bernoulli logits

Backward passes are written out by hand, layer by layer, and can return either
one gradient per example (rows of a (n, P) array) or the summed gradient.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from .data import rotate_image
from .errors import ContractError
from .ndmath import DTYPE, RandomStream, Tensor

LOGGER = logging.getLogger(__name__)

N_ROTATIONS = 4


def _tanh_grad(z, y):
    return 1.0 - y * y


def _relu_grad(z, y):
    return (z > 0.0).astype(DTYPE)


def _sigmoid_grad(z, y):
    return y * (1.0 - y)


def _identity_grad(z, y):
    return np.ones_like(z)


# name -> (activation, derivative given pre- and post-activation)
ACTIVATIONS: Dict[str, Tuple[Callable, Callable]] = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (lambda z: np.maximum(z, 0.0), _relu_grad),
    "sigmoid": (expit, _sigmoid_grad),
    "identity": (lambda z: z, _identity_grad),
}


class HeadKind(str, Enum):
    VAE = "vae-gaussian-latent"
    CLASSIFIER = "classifier-logits"


class LossKind(str, Enum):
    VAE = "vae"
    ROTATION = "rotation"
    CLASSIFICATION = "classification"


@dataclass(frozen=True)
class DenseLayer:
    name: str
    fan_in: int
    fan_out: int
    activation: str

    @property
    def n_params(self) -> int:
        return self.fan_out * self.fan_in + self.fan_out


@dataclass(frozen=True)
class MLPSpec:
    """
    Architecture of a small feed-forward model.

    For the VAE head, widths describe the encoder (input ... latent); the
    decoder mirrors them. widths=(784, 100, 1) gives 784-100-(mu, logvar) and
    1-100-784.
    """
    widths: Tuple[int, ...]
    activation: str = "tanh"
    head: HeadKind = HeadKind.CLASSIFIER

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "head", HeadKind(self.head))
        if len(self.widths) < 2:
            raise ContractError(f"an MLP needs at least two layer widths, got {self.widths}")
        if any(w <= 0 for w in self.widths):
            raise ContractError(f"layer widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation '{self.activation}'")

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def latent(self) -> int:
        return self.widths[-1]

    def encoder_layers(self) -> List[DenseLayer]:
        """Layers applied to the input: the whole classifier, or the VAE encoder."""
        w = self.widths
        if self.head is HeadKind.CLASSIFIER:
            return [DenseLayer(f"l{i}", w[i], w[i + 1],
                               self.activation if i < len(w) - 2 else "identity")
                    for i in range(len(w) - 1)]
        layers = [DenseLayer(f"enc{i}", w[i], w[i + 1], self.activation)
                  for i in range(len(w) - 2)]
        layers.append(DenseLayer("enc_head", w[-2], 2 * w[-1], "identity"))
        return layers

    def decoder_layers(self) -> List[DenseLayer]:
        if self.head is not HeadKind.VAE:
            return []
        rw = self.widths[::-1]
        return [DenseLayer(f"dec{i}", rw[i], rw[i + 1],
                           self.activation if i < len(rw) - 2 else "identity")
                for i in range(len(rw) - 1)]

    def feature_layers(self) -> List[DenseLayer]:
        """Layers producing the penultimate activations used as features."""
        return self.encoder_layers()[:-1]

    def layers(self) -> List[DenseLayer]:
        return self.encoder_layers() + self.decoder_layers()

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers())


@dataclass(frozen=True)
class Layout:
    """Offsets of every weight and bias block inside a flat parameter vector."""
    entries: Tuple[Tuple[str, int, Tuple[int, ...]], ...]

    @classmethod
    def from_spec(cls, spec: MLPSpec) -> "Layout":
        entries = []
        offset = 0
        for layer in spec.layers():
            for name, shape in ((f"{layer.name}.weight", (layer.fan_out, layer.fan_in)),
                                (f"{layer.name}.bias", (layer.fan_out,))):
                entries.append((name, offset, shape))
                offset += int(np.prod(shape))
        return cls(tuple(entries))

    @property
    def size(self) -> int:
        if not self.entries:
            return 0
        _, offset, shape = self.entries[-1]
        return offset + int(np.prod(shape))

    def slice(self, name: str) -> Tuple[slice, Tuple[int, ...]]:
        for entry_name, offset, shape in self.entries:
            if entry_name == name:
                return slice(offset, offset + int(np.prod(shape))), shape
        raise ContractError(f"no parameter block named '{name}'")

    def names(self) -> List[str]:
        return [name for name, _, _ in self.entries]


@dataclass
class ParamVector:
    """Flat trainable parameters with named layer views."""
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=DTYPE)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise ContractError(
                f"parameter vector of length {self.values.size} does not match layout size {self.layout.size}")

    def __len__(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        sl, shape = self.layout.slice(name)
        return self.values[sl].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)


@dataclass
class ChainTrace:
    """Inputs, pre-activations and activations of each layer in a dense chain."""
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1] if self.post else self.inputs[0]


@dataclass
class ForwardTrace:
    encoder: ChainTrace
    decoder: Optional[ChainTrace] = None
    mu: Optional[np.ndarray] = None
    logvar: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None


class LossGrads(NamedTuple):
    losses: np.ndarray
    grads: np.ndarray


def init_params(spec: MLPSpec, rng: RandomStream) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    layout = Layout.from_spec(spec)
    theta = ParamVector(np.zeros(layout.size), layout)
    for layer in spec.layers():
        limit = np.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        w = theta.view(f"{layer.name}.weight")
        w[...] = rng.uniform(w.shape) * 2.0 * limit - limit
    return theta


def _check_theta(spec: MLPSpec, theta: ParamVector) -> None:
    if theta.layout != Layout.from_spec(spec):
        raise ContractError("parameter layout does not match the model spec")


def _as_batch(spec: MLPSpec, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        raise ContractError(f"expected inputs of width {spec.input_width}, got shape {np.shape(x)}")
    return x, single


def _chain_forward(layers: Sequence[DenseLayer], theta: ParamVector, a0: np.ndarray) -> ChainTrace:
    trace = ChainTrace()
    a = a0
    for layer in layers:
        w = theta.view(f"{layer.name}.weight")
        b = theta.view(f"{layer.name}.bias")
        z = a @ w.T + b
        y = ACTIVATIONS[layer.activation][0](z)
        trace.inputs.append(a)
        trace.pre.append(z)
        trace.post.append(y)
        a = y
    if not layers:
        trace.inputs.append(a0)
    return trace


def _chain_backward(layers: Sequence[DenseLayer], theta: ParamVector, trace: ChainTrace,
                    grad_out: np.ndarray, out: np.ndarray, per_example: bool) -> np.ndarray:
    """
    Backpropagate grad_out (w.r.t. the chain's final activation) into `out`.

    `out` is (n, P) when per_example is set, otherwise (P,). Returns the
    gradient with respect to the chain input.
    """
    g = grad_out
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        delta = g * ACTIVATIONS[layer.activation][1](trace.pre[idx], trace.post[idx])
        a_in = trace.inputs[idx]
        w_slice, _ = theta.layout.slice(f"{layer.name}.weight")
        b_slice, _ = theta.layout.slice(f"{layer.name}.bias")
        if per_example:
            n = delta.shape[0]
            out[:, w_slice] += np.einsum("no,ni->noi", delta, a_in).reshape(n, -1)
            out[:, b_slice] += delta
        else:
            out[w_slice] += (delta.T @ a_in).ravel()
            out[b_slice] += delta.sum(axis=0)
        g = delta @ theta.view(f"{layer.name}.weight")
    return g


def forward(spec: MLPSpec, theta: ParamVector, x: Tensor,
            noise: Optional[np.ndarray] = None) -> Tuple[Tensor, ForwardTrace]:
    """
    Run the model on one example (1-D input) or a batch (2-D input).

    Classifiers return logits. VAEs return decoder logits for the latent code
    z = mu + sigma * noise; without noise the posterior mean is decoded.
    """
    _check_theta(spec, theta)
    xb, single = _as_batch(spec, x)
    enc = _chain_forward(spec.encoder_layers(), theta, xb)
    if spec.head is HeadKind.CLASSIFIER:
        out = enc.output
        return (out[0] if single else out), ForwardTrace(encoder=enc)

    latent = spec.latent
    head = enc.output
    mu, logvar = head[:, :latent], head[:, latent:]
    if noise is None:
        eps = np.zeros_like(mu)
    else:
        eps = np.broadcast_to(np.asarray(noise, dtype=DTYPE), mu.shape)
    z = mu + np.exp(0.5 * logvar) * eps
    dec = _chain_forward(spec.decoder_layers(), theta, z)
    trace = ForwardTrace(encoder=enc, decoder=dec, mu=mu, logvar=logvar, noise=eps, z=z)
    out = dec.output
    return (out[0] if single else out), trace


# ---------------------------------------------------------------------------
# Losses


def cross_entropy(logits: Tensor, label: int) -> float:
    """-log softmax(logits)[label]."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim != 1 or logits.size < 2:
        raise ContractError(f"cross entropy needs a vector of at least 2 logits, got shape {logits.shape}")
    if not (0 <= int(label) < logits.size):
        raise ContractError(f"label {label} out of range for {logits.size} classes")
    return float(logsumexp(logits) - logits[int(label)])


def _xent_batch(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row cross entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if np.any((labels < 0) | (labels >= c)):
        raise ContractError(f"labels out of range for {c} classes")
    lse = logsumexp(logits, axis=1)
    rows = np.arange(n)
    losses = lse - logits[rows, labels]
    dlogits = np.exp(logits - lse[:, None])
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the last axis."""
    mu = np.asarray(mu, dtype=DTYPE)
    logvar = np.asarray(logvar, dtype=DTYPE)
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def bernoulli_nll(logits: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Bernoulli cross entropy of targets x in [0, 1], summed over the last axis."""
    return np.sum(np.logaddexp(0.0, logits) - x * logits, axis=-1)


def _vae_losses_and_grads(spec: MLPSpec, theta: ParamVector, xb: np.ndarray, noise,
                          per_example: bool, want_grads: bool = True):
    logits, trace = forward(spec, theta, xb, noise=noise)
    losses = bernoulli_nll(logits, xb) + gaussian_kl(trace.mu, trace.logvar)
    if not want_grads:
        return losses, None
    n = xb.shape[0]
    out = np.zeros((n, len(theta)) if per_example else len(theta))
    d_logits = expit(logits) - xb
    dz = _chain_backward(spec.decoder_layers(), theta, trace.decoder, d_logits, out, per_example)
    sigma = np.exp(0.5 * trace.logvar)
    d_mu = dz + trace.mu
    d_logvar = 0.5 * dz * trace.noise * sigma + 0.5 * (np.exp(trace.logvar) - 1.0)
    _chain_backward(spec.encoder_layers(), theta, trace.encoder,
                    np.concatenate([d_mu, d_logvar], axis=1), out, per_example)
    return losses, out


def vae_batch_loss(spec: MLPSpec, theta: ParamVector, x: Tensor, noise) -> np.ndarray:
    """Negative ELBO of every row of x for the given latent noise."""
    xb, _ = _as_batch(spec, x)
    losses, _ = _vae_losses_and_grads(spec, theta, xb, noise, per_example=False, want_grads=False)
    return losses


def vae_loss(spec: MLPSpec, theta: ParamVector, x: Tensor,
             rng: RandomStream) -> Tuple[float, ForwardTrace]:
    """Single-sample negative ELBO: Bernoulli reconstruction plus Gaussian KL."""
    if spec.head is not HeadKind.VAE:
        raise ContractError("vae_loss needs a vae-gaussian-latent model")
    noise = rng.normal(spec.latent)
    logits, trace = forward(spec, theta, x, noise=noise)
    xb, _ = _as_batch(spec, x)
    loss = bernoulli_nll(np.atleast_2d(logits), xb) + gaussian_kl(trace.mu, trace.logvar)
    return float(loss[0]), trace


def _flatten_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=DTYPE)
    return images.reshape(images.shape[0], -1)


def _as_images(x: np.ndarray) -> np.ndarray:
    """View a batch of flat square images (n, s*s) or images (n, s, s) as (n, s, s)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x
    side = int(round(np.sqrt(x.shape[-1])))
    if side * side != x.shape[-1]:
        raise ContractError(f"cannot view width {x.shape[-1]} as a square image")
    return x.reshape(x.shape[0], side, side)


def rotate_batch(images: np.ndarray, r: int) -> np.ndarray:
    return np.stack([rotate_image(img, r) for img in images])


def rotation_loss(spec: MLPSpec, theta: ParamVector, x: Tensor, r: int) -> float:
    """Cross entropy of predicting rotation r of image x."""
    if spec.head is not HeadKind.CLASSIFIER or spec.widths[-1] != N_ROTATIONS:
        raise ContractError("rotation_loss needs a classifier with 4 outputs")
    if r not in range(N_ROTATIONS):
        raise ContractError(f"rotation index must be 0..3, got {r}")
    img = _as_images(np.asarray(x, dtype=DTYPE).reshape(1, -1))[0]
    logits, _ = forward(spec, theta, rotate_image(img, r).ravel())
    return cross_entropy(logits, r)


def _classification_losses_and_grads(spec, theta, xb, labels, per_example):
    logits, trace = forward(spec, theta, xb)
    losses, dlogits = _xent_batch(logits, labels)
    out = np.zeros((xb.shape[0], len(theta)) if per_example else len(theta))
    _chain_backward(spec.encoder_layers(), theta, trace.encoder, dlogits, out, per_example)
    return losses, out


def loss_and_grads(spec: MLPSpec, theta: ParamVector, inputs, kind: LossKind,
                   targets=None, noise=None, rng: Optional[RandomStream] = None,
                   per_example: bool = True) -> LossGrads:
    """
    Instance losses and their gradients.

    kind=vae: inputs (k, d) pixels; noise (k, latent) or drawn from rng.
    kind=rotation: inputs (k, s, s) images; targets are one rotation per image,
        or None to average each image's loss over all four rotations.
    kind=classification: inputs (k, d) and integer class targets.

    Returns grads of shape (k, P) when per_example is set, otherwise the
    gradient of the summed loss.
    """
    _check_theta(spec, theta)
    kind = LossKind(kind)
    n = len(inputs)
    if n == 0:
        raise ContractError("cannot compute gradients of an empty batch")

    if kind is LossKind.VAE:
        xb, _ = _as_batch(spec, inputs)
        if noise is None:
            if rng is None:
                raise ContractError("vae gradients need latent noise or a random stream")
            noise = rng.normal((n, spec.latent))
        return LossGrads(*_vae_losses_and_grads(spec, theta, xb, noise, per_example))

    if kind is LossKind.CLASSIFICATION:
        xb, _ = _as_batch(spec, inputs)
        return LossGrads(*_classification_losses_and_grads(spec, theta, xb, targets, per_example))

    images = _as_images(inputs)
    if targets is not None:
        targets = np.asarray(targets, dtype=np.int64)
        rotated = np.stack([rotate_image(img, int(r)) for img, r in zip(images, targets)])
        return LossGrads(*_classification_losses_and_grads(
            spec, theta, _flatten_images(rotated), targets, per_example))

    losses = np.zeros(n)
    grads = np.zeros((n, len(theta)) if per_example else len(theta))
    for r in range(N_ROTATIONS):
        xb = _flatten_images(rotate_batch(images, r))
        l_r, g_r = _classification_losses_and_grads(spec, theta, xb, np.full(n, r), per_example)
        losses += l_r / N_ROTATIONS
        grads += g_r / N_ROTATIONS
    return LossGrads(losses, grads)


def per_example_grads(spec: MLPSpec, theta: ParamVector, batch, kind: LossKind,
                      targets=None, noise=None, rng: Optional[RandomStream] = None) -> np.ndarray:
    """One exact gradient row per instance, shape (k, P)."""
    return loss_and_grads(spec, theta, batch, kind, targets=targets, noise=noise, rng=rng).grads


def batch_grad(spec: MLPSpec, theta: ParamVector, batch, kind: LossKind,
               targets=None, noise=None, rng: Optional[RandomStream] = None) -> ParamVector:
    """Gradient of the mean instance loss over the batch."""
    lg = loss_and_grads(spec, theta, batch, kind, targets=targets, noise=noise, rng=rng,
                        per_example=False)
    return theta.with_values(lg.grads / len(batch))


def sgd_step(theta: ParamVector, direction: ParamVector, alpha: float) -> ParamVector:
    """theta - alpha * direction as a new vector."""
    if theta.layout != direction.layout:
        raise ContractError("parameter and direction layouts differ")
    return theta.with_values(theta.values - alpha * direction.values)


# ---------------------------------------------------------------------------
# Features


def features(spec: MLPSpec, theta: ParamVector, x: Tensor) -> Tuple[np.ndarray, ChainTrace]:
    """Penultimate activations (input to the output head) for a batch."""
    _check_theta(spec, theta)
    xb, _ = _as_batch(spec, x)
    trace = _chain_forward(spec.feature_layers(), theta, xb)
    return trace.output, trace


def features_backward(spec: MLPSpec, theta: ParamVector, trace: ChainTrace,
                      d_features: np.ndarray) -> np.ndarray:
    """Summed parameter gradient given the gradient w.r.t. the features."""
    out = np.zeros(len(theta))
    _chain_backward(spec.feature_layers(), theta, trace, d_features, out, per_example=False)
    return out
