"""
Dense numerics: seeded random streams and Beta-distribution special functions.

Tensors are plain 64-bit numpy arrays. The incomplete beta function uses the
Numerical Recipes continued fraction (modified Lentz), vectorised over arrays
so whole weight tables can be evaluated at once.
"""
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, gammaln

from .errors import ConvergenceError, DomainError

Tensor = np.ndarray
ArrayLike = Union[float, np.ndarray]

DTYPE = np.float64

# Continued fraction settings
CF_MAX_ITER = 20000
CF_EPS = 1e-15
CF_FPMIN = 1e-300

# Pathwise gradients clamp draws to [EPS_CLAMP, 1 - EPS_CLAMP]
EPS_CLAMP = 1e-7

# Relative step of the finite differences in (a, b)
FD_REL_STEP = 1e-5


@dataclass
class RandomStream:
    """
    Seeded source of randomness.

    Identical (seed, stream_id) pairs replay identical draws. Streams are
    single-owner; derive a child stream instead of sharing one.
    """
    seed: int
    stream_id: int = 0
    _generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        self._generator = np.random.Generator(np.random.PCG64(seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def child(self, stream_id: int) -> "RandomStream":
        """Independent stream derived from the same seed."""
        return RandomStream(self.seed, stream_id)

    def uniform(self, size=None):
        return self._generator.random(size)

    def normal(self, size=None):
        return self._generator.standard_normal(size)

    def gamma(self, shape, size=None):
        return self._generator.standard_gamma(shape, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size=size)


@dataclass(frozen=True)
class BetaParams:
    """Beta(a, b) stored through its logarithms so a, b stay positive."""
    log_a: float
    log_b: float

    def __post_init__(self):
        if not (math.isfinite(self.log_a) and math.isfinite(self.log_b)):
            raise DomainError(f"log-parameters must be finite, got ({self.log_a}, {self.log_b})")

    @classmethod
    def from_ab(cls, a: float, b: float) -> "BetaParams":
        if not (a > 0 and b > 0):
            raise DomainError(f"Beta parameters must be strictly positive, got a={a}, b={b}")
        return cls(math.log(a), math.log(b))

    @property
    def a(self) -> float:
        return math.exp(self.log_a)

    @property
    def b(self) -> float:
        return math.exp(self.log_b)

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)


class ImplicitGrad(NamedTuple):
    dx_da: float
    dx_db: float
    clamped: bool


# ---------------------------------------------------------------------------
# Log-gamma and Beta density


def lgamma(x: float) -> float:
    """ln Gamma(x) for positive finite x."""
    if not math.isfinite(x) or x <= 0:
        raise DomainError(f"lgamma requires a positive finite argument, got {x}")
    return float(gammaln(x))


def log_beta_fn(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    return gammaln(a) + gammaln(b) - gammaln(np.add(a, b))


def beta_log_pdf(x: ArrayLike, a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """Vectorised log-density for x strictly inside (0, 1)."""
    x = np.asarray(x, dtype=DTYPE)
    return (np.subtract(a, 1.0) * np.log(x) + np.subtract(b, 1.0) * np.log1p(-x)
            - log_beta_fn(a, b))


def beta_pdf(x: float, p: BetaParams) -> float:
    """Density of Beta(a, b) at x in the open unit interval."""
    if not (0.0 < x < 1.0):
        raise DomainError(f"beta_pdf requires 0 < x < 1, got {x}")
    return float(np.exp(beta_log_pdf(x, p.a, p.b)))


# ---------------------------------------------------------------------------
# Regularised incomplete beta


def _betacf(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Continued fraction for I_x(a, b), evaluated elementwise."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < CF_FPMIN, CF_FPMIN, d)
    d = 1.0 / d
    h = d.copy()
    done = np.zeros(x.shape, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for m in range(1, CF_MAX_ITER + 1):
            m2 = 2.0 * m
            aa = m * (b - m) * x / ((qam + m2) * (a + m2))
            d = 1.0 + aa * d
            d = np.where(np.abs(d) < CF_FPMIN, CF_FPMIN, d)
            c = 1.0 + aa / c
            c = np.where(np.abs(c) < CF_FPMIN, CF_FPMIN, c)
            d = 1.0 / d
            h = np.where(done, h, h * d * c)
            aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
            d = 1.0 + aa * d
            d = np.where(np.abs(d) < CF_FPMIN, CF_FPMIN, d)
            c = 1.0 + aa / c
            c = np.where(np.abs(c) < CF_FPMIN, CF_FPMIN, c)
            d = 1.0 / d
            delta = d * c
            h = np.where(done, h, h * delta)
            done |= np.abs(delta - 1.0) < CF_EPS
            if done.all():
                return h
    raise ConvergenceError(
        f"incomplete beta continued fraction did not converge in {CF_MAX_ITER} iterations "
        f"(max a={np.max(a):.4g}, max b={np.max(b):.4g})")


def betainc(x: ArrayLike, a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """Regularised incomplete beta I_x(a, b), broadcast over arrays."""
    x, a, b = np.broadcast_arrays(np.asarray(x, dtype=DTYPE),
                                  np.asarray(a, dtype=DTYPE),
                                  np.asarray(b, dtype=DTYPE))
    scalar = x.ndim == 0
    shape = x.shape
    x, a, b = x.ravel(), a.ravel(), b.ravel()
    out = np.empty(x.shape, dtype=DTYPE)
    out[x <= 0.0] = 0.0
    out[x >= 1.0] = 1.0
    inner = (x > 0.0) & (x < 1.0)
    if inner.any():
        xi, ai, bi = x[inner], a[inner], b[inner]
        log_front = ai * np.log(xi) + bi * np.log1p(-xi) - log_beta_fn(ai, bi)
        front = np.exp(log_front)
        # symmetry switch keeps the fraction in its fast-converging region
        flip = xi > (ai + 1.0) / (ai + bi + 2.0)
        keep = ~flip
        val = np.empty_like(xi)
        if keep.any():
            val[keep] = front[keep] * _betacf(xi[keep], ai[keep], bi[keep]) / ai[keep]
        if flip.any():
            val[flip] = 1.0 - front[flip] * _betacf(1.0 - xi[flip], bi[flip], ai[flip]) / bi[flip]
        out[inner] = np.clip(val, 0.0, 1.0)
    if scalar:
        return float(out[0])
    return out.reshape(shape)


def beta_cdf(x: float, p: BetaParams) -> float:
    """Beta CDF, the regularised incomplete beta I_x(a, b)."""
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"beta_cdf requires 0 <= x <= 1, got {x}")
    return float(betainc(x, p.a, p.b))


def beta_cdf_grads(x: ArrayLike, a: ArrayLike, b: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """Central differences of I_x(a, b) in a and in b, elementwise."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    ha = FD_REL_STEP * np.maximum(1.0, np.abs(a))
    hb = FD_REL_STEP * np.maximum(1.0, np.abs(b))
    # keep the lower step strictly positive for tiny shapes
    ha = np.minimum(ha, 0.5 * a)
    hb = np.minimum(hb, 0.5 * b)
    d_a = (np.asarray(betainc(x, a + ha, b)) - np.asarray(betainc(x, a - ha, b))) / (2.0 * ha)
    d_b = (np.asarray(betainc(x, a, b + hb)) - np.asarray(betainc(x, a, b - hb))) / (2.0 * hb)
    return d_a, d_b


def beta_cdf_param_grads(x: float, p: BetaParams) -> Tuple[float, float]:
    """(dI/da, dI/db) at an interior point x."""
    if not (0.0 < x < 1.0):
        raise DomainError(f"beta_cdf_param_grads requires 0 < x < 1, got {x}")
    d_a, d_b = beta_cdf_grads(x, p.a, p.b)
    return float(d_a), float(d_b)


def implicit_beta_grads(x: ArrayLike, a: ArrayLike, b: ArrayLike):
    """
    Pathwise derivatives dx/da, dx/db of Beta draws with the uniform noise held fixed.

    Returns (dx_da, dx_db, clamped) arrays; clamped marks draws pulled into
    [EPS_CLAMP, 1 - EPS_CLAMP] before differentiating.
    """
    x = np.asarray(x, dtype=DTYPE)
    xc = np.clip(x, EPS_CLAMP, 1.0 - EPS_CLAMP)
    clamped = xc != x
    d_a, d_b = beta_cdf_grads(xc, a, b)
    pdf = np.exp(beta_log_pdf(xc, a, b))
    underflow = ~(pdf > 0.0)
    safe = np.where(underflow, 1.0, pdf)
    dx_da = np.where(underflow, 0.0, -d_a / safe)
    dx_db = np.where(underflow, 0.0, -d_b / safe)
    return dx_da, dx_db, clamped | underflow


def implicit_beta_grad(x: float, p: BetaParams) -> ImplicitGrad:
    """Implicit reparameterisation gradient of a single draw x ~ Beta(a, b)."""
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"implicit_beta_grad requires a draw in [0, 1], got {x}")
    dx_da, dx_db, clamped = implicit_beta_grads(x, p.a, p.b)
    return ImplicitGrad(float(dx_da), float(dx_db), bool(clamped))


def beta_quantile(u: ArrayLike, a: ArrayLike, b: ArrayLike, tol: float = 1e-15,
                  max_iter: int = 200) -> ArrayLike:
    """Invert I_x(a, b) = u by bisection."""
    u, a, b = np.broadcast_arrays(np.asarray(u, dtype=DTYPE),
                                  np.asarray(a, dtype=DTYPE),
                                  np.asarray(b, dtype=DTYPE))
    if np.any((u < 0.0) | (u > 1.0)):
        raise DomainError("quantile level must lie in [0, 1]")
    lo = np.zeros(u.shape, dtype=DTYPE)
    hi = np.ones(u.shape, dtype=DTYPE)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = np.asarray(betainc(mid, a, b)) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo < tol):
            break
    mid = 0.5 * (lo + hi)
    return float(mid) if mid.ndim == 0 else mid


# ---------------------------------------------------------------------------
# Sampling


def _log_gamma_draws(shape: np.ndarray, rng: RandomStream) -> np.ndarray:
    """log of Gamma(shape, 1) draws; shapes below one use the boost transform."""
    shape = np.asarray(shape, dtype=DTYPE)
    small = shape < 1.0
    boosted = np.where(small, shape + 1.0, shape)
    g = rng.gamma(boosted)
    log_g = np.log(g)
    if small.any():
        u = rng.uniform(shape.shape)
        log_g = np.where(small, log_g + np.log(u) / shape, log_g)
    return log_g


def sample_beta_many(a: ArrayLike, b: ArrayLike, rng: RandomStream) -> np.ndarray:
    """Draw Beta(a_i, b_i) for every entry as a ratio of Gamma draws."""
    a = np.atleast_1d(np.asarray(a, dtype=DTYPE))
    b = np.atleast_1d(np.asarray(b, dtype=DTYPE))
    a, b = np.broadcast_arrays(a, b)
    log_ga = _log_gamma_draws(a, rng)
    log_gb = _log_gamma_draws(b, rng)
    w = expit(log_ga - log_gb)
    return np.clip(w, np.finfo(DTYPE).tiny, 1.0 - np.finfo(DTYPE).epsneg)


def sample_beta(p: BetaParams, rng: RandomStream, size: Optional[int] = None):
    """One draw from Beta(a, b), or an array of `size` draws."""
    n = 1 if size is None else int(size)
    draws = sample_beta_many(np.full(n, p.a), np.full(n, p.b), rng)
    return float(draws[0]) if size is None else draws
