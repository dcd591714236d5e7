"""Building a two-hidden-layer mean-field net that induces a chosen predictive.

The construction has two stages. The first weight layer (the *random
variable introducer*) copies the input forward and appends one hidden unit
whose pre-activation is a unit Gaussian: its weight row has mean zero and its
bias has standard deviation 1, so the randomness of that single bias becomes
the latent variable. The remaining single-hidden-layer net (the *random
variable mapper*) deterministically approximates the transport map

    G^{-1}(h) = F_target^{-1}( Phi( phi^{-1}(h) ) ),

which pushes the latent Gaussian onto the target distribution; it is fit by
least squares on quantile pairs rather than appealed to by existence. Giving
the mapper weights a small uniform standard deviation turns the whole thing
into a mean-field posterior whose induced output distribution approximates
the target; the approximation is scored with a two-sample-free KS statistic
against the target CDF.

Targets are mixtures of Gaussians (strictly increasing continuous CDF), and
the activation must be invertible, so plain ReLU is excluded; the default is
leaky ReLU with slope 0.1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from ._rng import derived_rng
from .linear_analysis import MeanFieldLayer
from .mfvi import MeanFieldPosterior
from .model_core import ActivationSpec, NetworkSpec, ParamLayout

U_CLIP = 1e-15
QUANTILE_TOL = 1e-12


@dataclass(frozen=True)
class TargetPredictive:
    """Mixture-of-Gaussians target density for a scalar output."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        for name in ("weights", "means", "stds"):
            object.__setattr__(
                self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            )
        if not (len(self.weights) == len(self.means) == len(self.stds)):
            raise ValueError("component arrays must have equal length")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.stds <= 0):
            raise ValueError("stds must be positive")

    @classmethod
    def from_components(cls, components) -> "TargetPredictive":
        arr = np.asarray(components, dtype=np.float64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def pdf(self, y):
        y = np.asarray(y, dtype=np.float64)[..., None]
        z = (y - self.means) / self.stds
        comp = np.exp(-0.5 * z * z) / (self.stds * np.sqrt(2.0 * np.pi))
        return (comp * self.weights).sum(axis=-1)

    def cdf(self, y):
        y = np.asarray(y, dtype=np.float64)[..., None]
        return (ndtr((y - self.means) / self.stds) * self.weights).sum(axis=-1)

    def sample(self, n: int, rng) -> np.ndarray:
        comps = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comps] + self.stds[comps] * rng.standard_normal(n)

    def support(self):
        lo = float(np.min(self.means - 12.0 * self.stds))
        hi = float(np.max(self.means + 12.0 * self.stds))
        return lo, hi

    def quantile(self, u):
        """Inverse CDF by bisection plus a Newton polish; |F(y) - u| < 1e-12."""
        u = np.clip(np.asarray(u, dtype=np.float64), U_CLIP, 1.0 - U_CLIP)
        scalar = u.ndim == 0
        u = np.atleast_1d(u)
        lo_edge, hi_edge = self.support()
        lo = np.full(u.shape, lo_edge)
        hi = np.full(u.shape, hi_edge)
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        y = 0.5 * (lo + hi)
        for _ in range(4):
            f = self.pdf(y)
            step = np.where(f > 0, (self.cdf(y) - u) / np.maximum(f, 1e-300), 0.0)
            y = np.clip(y - step, lo_edge, hi_edge)
        return float(y[0]) if scalar else y


@dataclass(frozen=True)
class QuantileMap:
    """The transport G^{-1}: hidden value phi(z) -> target quantile."""

    target: TargetPredictive
    activation: ActivationSpec

    def __post_init__(self):
        if self.activation.negative_slope == 0.0:
            raise ValueError("activation must be invertible")

    def __call__(self, h):
        z = self.activation.inverse(h)
        return self.target.quantile(ndtr(z))

    def from_z(self, z):
        return self.target.quantile(ndtr(np.asarray(z, dtype=np.float64)))


def quantile_map(target: TargetPredictive, activation: ActivationSpec | None = None) -> QuantileMap:
    if activation is None:
        activation = ActivationSpec("leaky_relu", 0.1)
    return QuantileMap(target, activation)


@dataclass(frozen=True)
class IntroducerLayer:
    """First-layer moments: latent-unit row plus an input copy block."""

    weights: MeanFieldLayer
    bias_mu: np.ndarray
    bias_sigma: np.ndarray


def build_rv_introducer(input_dim: int, sigma: float) -> IntroducerLayer:
    """First layer mapping x to hidden units (phi(z), phi(x')).

    The first hidden unit's pre-activation is dominated by its bias, which
    has standard deviation 1: that bias is the latent unit Gaussian z. The
    remaining units copy the input with identity-mean weights; all weight
    entries share the small standard deviation ``sigma``, so
    Var(x'_i) = sigma^2 (|x|^2 + 1).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = np.vstack([np.zeros((1, input_dim)), np.eye(input_dim)])
    sig = np.full((input_dim + 1, input_dim), float(sigma))
    bias_mu = np.zeros(input_dim + 1)
    bias_sigma = np.concatenate([[1.0], np.full(input_dim, float(sigma))])
    return IntroducerLayer(MeanFieldLayer(mu, sig), bias_mu, bias_sigma)


@dataclass
class MapperFit:
    """Deterministic second-stage weights fit to quantile targets."""

    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    rmse: float
    under_capacity: bool


def fit_rv_mapper(
    qmap: QuantileMap,
    width: int,
    z_grid_size: int = 4096,
    rmse_threshold: float = 0.05,
    coef_penalty: float = 5e-5,
    x_anchor=None,
) -> MapperFit:
    """Least-squares fit of the mapper net to the transport map.

    Hidden kinks act on the phi(z) feature: one at exactly zero, one far
    outside the latent range (a pure linear unit over it), and the rest at
    unit-Gaussian quantiles, dense where the latent has mass. The linear
    output layer is solved by ridge-regularized least squares: the small
    coefficient penalty keeps the solution from ringing, which would
    otherwise make the induced distribution hypersensitive to the weight
    noise added at assembly. An RMSE above the threshold flags
    under-capacity but does not fail.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    act = qmap.activation
    input_dim = 1 if x_anchor is None else len(np.atleast_1d(x_anchor))
    # Training pairs along the latent axis, equally spaced in probability.
    u = (np.arange(z_grid_size) + 0.5) / z_grid_size
    z = ndtri(u)
    h_z = np.where(z > 0.0, z, act.negative_slope * z)
    targets = qmap.from_z(z)

    if width >= 3:
        kink_u = (np.arange(width - 2) + 0.5) / (width - 2)
        zk = ndtri(kink_u)
        spread = np.where(zk > 0.0, zk, act.negative_slope * zk)
        kink_h = np.concatenate([[0.0, 12.0], spread])
    elif width == 2:
        kink_h = np.array([0.0, 12.0])
    else:
        kink_h = np.array([0.0])
    w_hidden = np.zeros((width, input_dim + 1))
    w_hidden[:, 0] = 1.0
    b_hidden = -kink_h

    pre = h_z[:, None] + b_hidden
    feats = np.where(pre > 0.0, pre, act.negative_slope * pre)
    design = np.column_stack([feats, np.ones(z_grid_size)])
    p = design.shape[1]
    penalty = np.sqrt(coef_penalty) * np.eye(p)
    penalty[-1, -1] = 0.0  # the intercept is free
    coef, *_ = np.linalg.lstsq(
        np.vstack([design, penalty]),
        np.concatenate([targets, np.zeros(p)]),
        rcond=None,
    )
    fitted = design @ coef
    rmse = float(np.sqrt(np.mean((fitted - targets) ** 2)))
    return MapperFit(
        w_hidden=w_hidden,
        b_hidden=b_hidden,
        w_out=coef[:-1][None, :],
        b_out=coef[-1:],
        rmse=rmse,
        under_capacity=rmse > rmse_threshold,
    )


def assemble_posterior(
    introducer: IntroducerLayer,
    mapper: MapperFit,
    weight_std: float,
    activation: ActivationSpec | None = None,
):
    """Wire introducer + mapper into a NetworkSpec and mean-field posterior.

    The mapper weights become posterior means with uniform ``weight_std``;
    the introducer keeps its structured standard deviations (in particular
    the unit-std latent bias).
    """
    if activation is None:
        activation = ActivationSpec("leaky_relu", 0.1)
    input_dim = introducer.weights.shape[1]
    width = mapper.w_hidden.shape[0]
    spec = NetworkSpec((input_dim, input_dim + 1, width, 1), activation, has_bias=True)
    layout = ParamLayout(spec)
    mu = layout.pack(
        [
            (introducer.weights.mu, introducer.bias_mu),
            (mapper.w_hidden, mapper.b_hidden),
            (mapper.w_out, mapper.b_out),
        ]
    )
    std = layout.pack(
        [
            (introducer.weights.sigma, introducer.bias_sigma),
            (np.full_like(mapper.w_hidden, weight_std), np.full_like(mapper.b_hidden, weight_std)),
            (np.full_like(mapper.w_out, weight_std), np.full_like(mapper.b_out, weight_std)),
        ]
    )
    return spec, MeanFieldPosterior.from_moments(spec, mu, std)


def ks_statistic(samples, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov statistic of samples against a CDF."""
    y = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(y)
    f = cdf(y)
    i = np.arange(1, n + 1)
    return float(np.max(np.maximum(i / n - f, f - (i - 1) / n)))


def induced_vs_target_ks(
    spec: NetworkSpec,
    q: MeanFieldPosterior,
    target: TargetPredictive,
    x,
    n: int,
    seed: int,
) -> float:
    """KS distance between n induced network outputs at x and the target CDF."""
    if n < 100:
        raise ValueError("need at least 100 samples")
    from .mfvi import predict

    out = predict(q, spec, np.asarray(x, dtype=np.float64), n, seed)[:, 0]
    return ks_statistic(out, target.cdf)


def bimodal_demo_target() -> TargetPredictive:
    return TargetPredictive([0.5, 0.5], [-2.0, 2.0], [0.5, 0.5])
