"""
Gaussian value distributions and Beta action distributions

All functions broadcast over numpy arrays so that one call can score a whole
minibatch. Beta vectors sum their log-densities over the trailing (action)
axis.
"""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.special import betaln, digamma, polygamma

from .funcapprox import softplus

SIGMA_FLOOR = 1e-3
ACTION_EPS = 1e-6
BOUNDS_TOLERANCE = 1e-9
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

ArrayLike = Union[float, np.ndarray]


def _require_finite(*arrays, what: str = "input") -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"Non-finite {what}")


@dataclass(frozen=True)
class GaussianValue:
    """Normal distribution over returns, N(mean, stddev^2)"""

    mean: ArrayLike
    stddev: ArrayLike

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "stddev", np.asarray(self.stddev, dtype=np.float64))
        _require_finite(self.mean, self.stddev, what="Gaussian parameters")
        if np.any(self.stddev <= 0.0):
            raise ValueError("Gaussian stddev must be positive")

    def floored(self, floor: float = SIGMA_FLOOR) -> "GaussianValue":
        return GaussianValue(self.mean, np.maximum(self.stddev, floor))

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = np.broadcast(self.mean, self.stddev).shape
        if size is not None:
            shape = tuple(np.atleast_1d(size)) + shape
        return self.mean + self.stddev * rng.standard_normal(shape)


def gaussian_kl(target: GaussianValue, model: GaussianValue) -> np.ndarray:
    """
    KL(target || model) between two normals

    Returns:
        log(s2/s1) + (s1^2 + (m1 - m2)^2) / (2 s2^2) - 1/2, elementwise
    """
    m1, s1 = target.mean, target.stddev
    m2, s2 = model.mean, model.stddev
    kl = np.log(s2 / s1) + (s1 ** 2 + (m1 - m2) ** 2) / (2.0 * s2 ** 2) - 0.5
    # Rounding can leave tiny negatives for identical arguments
    return np.maximum(kl, 0.0)


def gaussian_kl_grad(target: GaussianValue, model: GaussianValue) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of ``gaussian_kl`` with respect to the model's (mean, stddev)"""
    m1, s1 = target.mean, target.stddev
    m2, s2 = model.mean, model.stddev
    d_mean = (m2 - m1) / s2 ** 2
    d_std = 1.0 / s2 - (s1 ** 2 + (m1 - m2) ** 2) / s2 ** 3
    return d_mean, d_std


def gaussian_log_density(x: ArrayLike, dist: GaussianValue) -> np.ndarray:
    """log N(x; mean, stddev^2)"""
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x, what="sample")
    z = (x - dist.mean) / dist.stddev
    return -np.log(dist.stddev) - LOG_SQRT_2PI - 0.5 * z ** 2


def gaussian_nll_grad(x: ArrayLike, dist: GaussianValue) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of -log N(x; mean, stddev^2) with respect to (mean, stddev)"""
    x = np.asarray(x, dtype=np.float64)
    diff = x - dist.mean
    d_mean = -diff / dist.stddev ** 2
    d_std = 1.0 / dist.stddev - diff ** 2 / dist.stddev ** 3
    return d_mean, d_std


@dataclass(frozen=True)
class BetaParams:
    """Per-dimension Beta shapes; the trailing axis indexes action dimensions"""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if alpha.shape != beta.shape:
            raise ValueError(f"alpha shape {alpha.shape} does not match beta shape {beta.shape}")
        _require_finite(alpha, beta, what="Beta shapes")
        if np.any(alpha <= 0.0) or np.any(beta <= 0.0):
            raise ValueError("Beta shapes must be positive")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self) -> np.ndarray:
        total = self.alpha + self.beta
        return self.alpha * self.beta / (total ** 2 * (total + 1.0))


def beta_shapes_from_output(output: np.ndarray) -> BetaParams:
    """Split a network output [a_1..a_d, b_1..b_d] into shapes softplus(.) + 1"""
    output = np.asarray(output, dtype=np.float64)
    if output.shape[-1] % 2:
        raise ValueError(f"Beta head needs an even number of outputs, got {output.shape[-1]}")
    d = output.shape[-1] // 2
    return BetaParams(softplus(output[..., :d]) + 1.0, softplus(output[..., d:]) + 1.0)


def beta_log_density(x: ArrayLike, params: BetaParams) -> np.ndarray:
    """
    Log-density of a product of Betas, summed over the trailing axis

    Raises:
        ValueError: If any coordinate lies outside [0, 1]
    """
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x, what="Beta sample")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("Beta sample outside the unit interval")
    x = np.clip(x, ACTION_EPS, 1.0 - ACTION_EPS)
    a, b = params.alpha, params.beta
    per_dim = (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)
    return np.sum(per_dim, axis=-1)


def beta_log_density_grad(x: ArrayLike, params: BetaParams) -> Tuple[np.ndarray, np.ndarray]:
    """Per-dimension gradient of ``beta_log_density`` with respect to (alpha, beta)"""
    x = np.clip(np.asarray(x, dtype=np.float64), ACTION_EPS, 1.0 - ACTION_EPS)
    a, b = params.alpha, params.beta
    common = digamma(a + b)
    return np.log(x) - digamma(a) + common, np.log1p(-x) - digamma(b) + common


def sample_beta(params: BetaParams, rng: np.random.Generator) -> np.ndarray:
    """Independent Beta draws, one per shape pair"""
    return rng.beta(params.alpha, params.beta)


def beta_entropy(params: BetaParams) -> np.ndarray:
    """Differential entropy summed over the trailing axis"""
    a, b = params.alpha, params.beta
    per_dim = (
        betaln(a, b)
        - (a - 1.0) * digamma(a)
        - (b - 1.0) * digamma(b)
        + (a + b - 2.0) * digamma(a + b)
    )
    return np.sum(per_dim, axis=-1)


def beta_kl(p: BetaParams, q: BetaParams) -> np.ndarray:
    """KL(p || q) summed over the trailing axis"""
    a1, b1, a2, b2 = p.alpha, p.beta, q.alpha, q.beta
    per_dim = (
        betaln(a2, b2)
        - betaln(a1, b1)
        + (a1 - a2) * digamma(a1)
        + (b1 - b2) * digamma(b1)
        + (a2 - a1 + b2 - b1) * digamma(a1 + b1)
    )
    return np.sum(per_dim, axis=-1)


def beta_fisher_diag(params: BetaParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Fisher information of one Beta dimension in (alpha, beta) coordinates

    Returns:
        Tuple of (I_aa, I_ab, I_bb), the entries of the symmetric 2x2 matrix
    """
    a, b = params.alpha, params.beta
    cross = -polygamma(1, a + b)
    return polygamma(1, a) + cross, cross, polygamma(1, b) + cross


@dataclass(frozen=True)
class ActionBounds:
    """Box [lower, upper] of the environment's action space"""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError(f"Bounds must be vectors of equal length, got {lower.shape} and {upper.shape}")
        _require_finite(lower, upper, what="action bounds")
        if np.any(upper <= lower):
            raise ValueError("Every upper bound must exceed its lower bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def symmetric(cls, limit: float, dim: int) -> "ActionBounds":
        return cls(-limit * np.ones(dim), limit * np.ones(dim))

    @property
    def scale(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def offset(self) -> np.ndarray:
        return self.lower

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def log_correction(self) -> float:
        return float(-np.sum(np.log(self.scale)))


def transform_action(x: ArrayLike, bounds: ActionBounds) -> Tuple[np.ndarray, float]:
    """
    Map a unit-hypercube sample to the action box

    Returns:
        Tuple of (action, log-likelihood correction -sum(log k))

    Raises:
        ValueError: If ``x`` leaves the unit hypercube or has the wrong width
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (bounds.dim,):
        raise ValueError(f"Expected actions with {bounds.dim} dimensions, got shape {x.shape}")
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise ValueError("Unit-interval action outside [0, 1]")
    return x * bounds.scale + bounds.offset, bounds.log_correction


def untransform_action(a: ArrayLike, bounds: ActionBounds, tolerance: float = BOUNDS_TOLERANCE) -> np.ndarray:
    """
    Map an environment action back to (ACTION_EPS, 1 - ACTION_EPS)

    Raises:
        ValueError: If ``a`` lies outside the box by more than ``tolerance``
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1:] != (bounds.dim,):
        raise ValueError(f"Expected actions with {bounds.dim} dimensions, got shape {a.shape}")
    slack = tolerance * np.maximum(1.0, bounds.scale)
    if np.any(a < bounds.lower - slack) or np.any(a > bounds.upper + slack) or not np.all(np.isfinite(a)):
        raise ValueError(f"Action outside bounds [{bounds.lower}, {bounds.upper}]")
    return np.clip((a - bounds.offset) / bounds.scale, ACTION_EPS, 1.0 - ACTION_EPS)


def action_features(x: ArrayLike) -> np.ndarray:
    """Centre unit-interval actions on zero before they enter a network"""
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0
