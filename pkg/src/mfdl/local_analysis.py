"""Per-sample linearizations of piecewise-linear networks at an anchor input.

A piecewise-linear network is exactly linear on the activation region its
input falls in, so for a fixed weight draw the whole net collapses to one
matrix: interleave the weight matrices with diagonal branch-multiplier
matrices read off the activation pattern at the anchor. Biases are folded in
by augmenting the input with a trailing 1, which keeps the collapsed object a
single matrix ``P`` with ``P @ [x, 1] == f(x)`` at the anchor.

Sampling weights from a posterior and collapsing each draw at the same anchor
yields a *local product matrix* sample set whose empirical moments play the
same role the analytic product-matrix moments play for linear nets; with the
identity activation the two agree. Entry marginals of the local product can
be multimodal (the pattern switches across draws); entries are flagged by a
BIC-selected Gaussian mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import derived_rng, shard_sizes
from .linear_analysis import CovTensor4
from .model_core import NetworkSpec, ParamLayout, ShapeError, forward
from .posterior_geometry import gmm_bic_select


@dataclass(frozen=True)
class LocalProductSample:
    """One collapsed linear map: matrix P, its pattern, and the draw index."""

    P: np.ndarray
    pattern: tuple
    theta_ref: int | None = None


def augment_input(spec: NetworkSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([x, [1.0]]) if spec.has_bias else x


def local_product_matrix(spec: NetworkSpec, theta, x) -> LocalProductSample:
    """Collapse the network at anchor x for one parameter vector.

    ``P`` has shape (n_out, n_in + 1) when biases are folded, else
    (n_out, n_in); the pattern is the one captured by ``forward`` at x.
    The collapse accumulates in extended precision and rounds once, so the
    stored P carries no accumulation error of its own.
    """
    _, pattern = forward(spec, theta, x)
    blocks = ParamLayout(spec).unpack(theta)
    P = _collapse(spec, blocks, pattern)
    return LocalProductSample(P, tuple(np.asarray(p) for p in pattern))


def _collapse(spec: NetworkSpec, blocks, pattern):
    W0, b0 = blocks[0]
    if spec.has_bias:
        P = np.concatenate([W0, b0[:, None]], axis=1).astype(np.longdouble)
    else:
        P = W0.astype(np.longdouble)
    for l in range(1, spec.n_layers):
        P = pattern[l - 1].astype(np.longdouble)[:, None] * P
        W, b = blocks[l]
        P = W.astype(np.longdouble) @ P
        if b is not None:
            P[:, -1] += b
    return P.astype(np.float64)


def sample_local_products(spec: NetworkSpec, q, x, n: int, seed: int) -> np.ndarray:
    """n posterior draws collapsed at the same anchor, shape (n, n_out, n_aug).

    ``q`` is any posterior with flat ``mu`` and ``std()`` matching the spec's
    parameter layout (e.g. a trained mean-field posterior). Sampling is cut
    into fixed-size shards with streams keyed by (seed, shard), so the result
    is independent of how shards are scheduled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ShapeError(f"anchor shape {x.shape}, expected ({spec.input_dim},)")
    layout = ParamLayout(spec)
    mu, std = q.mu, q.std()
    n_aug = spec.input_dim + (1 if spec.has_bias else 0)
    out = np.empty((n, spec.output_dim, n_aug))
    alpha = spec.activation.negative_slope
    identity = spec.activation.is_identity

    done = 0
    for idx, m in shard_sizes(n, 4096):
        rng = derived_rng(seed, idx)
        thetas = mu + std * rng.standard_normal((m, layout.n_params))
        ws, bs = [], []
        for (wsl, wshape), bsl in zip(layout.w_slices, layout.b_slices):
            ws.append(thetas[:, wsl].reshape((m,) + wshape))
            bs.append(thetas[:, bsl[0]] if bsl is not None else None)

        h = np.broadcast_to(x, (m, spec.input_dim))
        if spec.has_bias:
            P = np.concatenate([ws[0], bs[0][:, :, None]], axis=2)
        else:
            P = ws[0].copy()
        for l in range(spec.n_layers):
            z = np.einsum("mij,mj->mi", ws[l], h)
            if bs[l] is not None:
                z = z + bs[l]
            if l == spec.n_layers - 1:
                break
            pat = np.ones_like(z) if identity else np.where(z > 0.0, 1.0, alpha)
            h = pat * z
            P = pat[:, :, None] * P
            P = np.matmul(ws[l + 1], P)
            if bs[l + 1] is not None:
                P[:, :, -1] += bs[l + 1]
        out[done : done + m] = P
        done += m
    return out


@dataclass
class LocalCovReport:
    """Empirical moments of local product samples at one anchor."""

    mean: np.ndarray
    cov: CovTensor4
    n_samples: int
    anchor: np.ndarray | None = None
    flags: dict = field(default_factory=dict)  # flat entry index -> chosen k

    @property
    def multimodal_entries(self):
        return sorted(i for i, k in self.flags.items() if k >= 2)


def _as_sample_array(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples
    return np.stack([s.P for s in samples])


def empirical_cov(
    samples, anchor=None, flag_entries: int = 0, seed: int = 0
) -> LocalCovReport:
    """Sample mean and unbiased covariance over flattened P entries.

    ``flag_entries`` randomly chosen entries (without replacement) get a 1-D
    mixture/BIC check on their marginals; an entry is multimodal when the
    selected component count is >= 2.
    """
    arr = _as_sample_array(samples)
    n = arr.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    n_out, n_aug = arr.shape[1], arr.shape[2]
    flat = arr.reshape(n, n_out * n_aug)
    mean = flat.mean(axis=0)
    diff = flat - mean
    cov = diff.T @ diff / (n - 1)
    cov = 0.5 * (cov + cov.T)

    flags = {}
    if flag_entries > 0:
        rng = derived_rng(seed, 0xF1A6)
        count = min(flag_entries, flat.shape[1])
        chosen = rng.choice(flat.shape[1], size=count, replace=False)
        for entry in sorted(int(i) for i in chosen):
            _, k, _ = gmm_bic_select(flat[:, entry], k_max=4, seed=seed + entry)
            flags[entry] = k

    return LocalCovReport(
        mean=mean.reshape(n_out, n_aug),
        cov=CovTensor4(cov.reshape(n_out, n_aug, n_out, n_aug)),
        n_samples=n,
        anchor=None if anchor is None else np.asarray(anchor, dtype=np.float64),
        flags=flags,
    )


@dataclass(frozen=True)
class ActivationStats:
    mean_on_fraction: float
    sd_on_fraction: float
    all_off_rows: int
    n_theta: int
    n_inputs: int


def activation_stats(
    spec: NetworkSpec, q, dataset, n_theta: int, seed: int
) -> ActivationStats:
    """How often hidden units fire across posterior draws and inputs.

    The on-fraction is the share of hidden units on the positive branch,
    aggregated per draw; an all-off row is one (draw, input, layer) event
    where an entire hidden layer sits on the negative branch.
    """
    X = dataset.X if hasattr(dataset, "X") else np.asarray(dataset, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("dataset must be nonempty")
    rng = derived_rng(seed, 0xAC7)
    from .model_core import forward_batch

    fractions = np.empty(n_theta)
    all_off = 0
    for t in range(n_theta):
        theta = q.sample_theta(rng)
        _, patterns = forward_batch(spec, theta, X)
        on = 0
        total = 0
        for pat in patterns:
            fired = pat == 1.0
            on += int(fired.sum())
            total += fired.size
            all_off += int((~fired.any(axis=1)).sum())
        fractions[t] = on / total if total else 1.0
    sd = float(fractions.std(ddof=1)) if n_theta > 1 else 0.0
    return ActivationStats(
        mean_on_fraction=float(fractions.mean()),
        sd_on_fraction=sd,
        all_off_rows=all_off,
        n_theta=n_theta,
        n_inputs=X.shape[0],
    )


def region_count_bound(spec: NetworkSpec) -> int:
    """Upper bound on the number of linear regions the network can carve.

    Computed over the hidden widths n_1..n_H with input dimension n_0:
    ``prod_{i<H} floor(n_i / n_0)^{n_0} * sum_{j=0}^{n_0} C(n_H, j)``;
    exact integer arithmetic.
    """
    widths = spec.layer_widths
    n0 = widths[0]
    hidden = widths[1:-1]
    if not hidden:
        return 1
    bound = 1
    for w in hidden[:-1]:
        bound *= (w // n0) ** n0
    bound *= sum(math.comb(hidden[-1], j) for j in range(n0 + 1))
    return max(bound, 1)


def max_ulp_gap(a, b, scale=None) -> float:
    """Worst |a-b| in units of float64 spacing at the given scale.

    With no explicit scale the larger magnitude of the two arrays is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if scale is None:
        scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / np.spacing(float(scale)))


def anchor_exactness_ulp(spec: NetworkSpec, theta, x, P) -> float:
    """Gap between ``P @ x~`` and the forward pass, in computation-scale ulp.

    Both evaluations round at the scale of their intermediates, so the gap is
    measured against the largest intermediate magnitude seen by either: the
    pre-activations of the forward pass and the condition sum of the final
    dot product. A collapse that loses nothing beyond unavoidable float64
    rounding stays within a few ulp under this measure.
    """
    x = np.asarray(x, dtype=np.float64)
    y, _ = forward(spec, theta, x)
    xt = augment_input(spec, x)
    blocks = ParamLayout(spec).unpack(theta)
    scale = np.max(np.abs(xt))
    h = x
    alpha = spec.activation.negative_slope
    for l, (W, b) in enumerate(blocks):
        z = W @ h + (b if b is not None else 0.0)
        scale = max(scale, np.max(np.abs(z)))
        if l < spec.n_layers - 1:
            h = z if spec.activation.is_identity else np.where(z > 0.0, z, alpha * z)
        else:
            h = z
    scale = max(scale, float(np.max(np.abs(P) @ np.abs(xt))))
    return max_ulp_gap(P @ xt, y, scale=scale)
