"""Moments of products of independent elementwise-Gaussian weight matrices.

A deep linear model collapses into a single *product matrix*
``M = W_L ... W_2 W_1`` (layers listed bottom-first, i.e. ``layers[0]`` is
applied to the input first). When every ``W_l`` has independent entries with
means ``mu_l`` and standard deviations ``sigma_l``, the mean of ``M`` is the
product of the means and the covariance between any two entries of ``M``
follows a closed recursion over layers, implemented here as
:func:`cov_recursive_step` / :func:`cov_product`. The recursion only uses
first and second moments, so it holds for any factorized weight distribution;
the Monte-Carlo samplers in this module (used as oracles in the tests) are
Gaussian.

Covariances are stored densely as a four-index tensor ``C[a, b, c, d] =
Cov(M[a, b], M[c, d])`` (:class:`CovTensor4`). Dense storage is quadratic in
the matrix size, which is fine at the matrix widths this package targets
(tens, not thousands).

A Kronecker-factored (matrix variate) Gaussian arises as the special case of
a three-factor chain with deterministic outer factors; see
:func:`mvg_product`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import SHARD, derived_rng, shard_sizes
from .model_core import ShapeError


@dataclass(frozen=True)
class MeanFieldLayer:
    """Elementwise-independent Gaussian weight matrix: means and stds."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        if mu.ndim != 2 or mu.shape != sigma.shape:
            raise ShapeError("mu and sigma must be matrices of the same shape")
        if not np.all(sigma > 0):
            raise ValueError("sigma must be elementwise positive")

    @property
    def shape(self):
        return self.mu.shape

    @property
    def var(self) -> np.ndarray:
        return self.sigma * self.sigma


class CovTensor4:
    """Dense covariance tensor ``C[a, b, c, d] = Cov(M[a,b], M[c,d])``."""

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] != data.shape[2] or data.shape[1] != data.shape[3]:
            raise ShapeError(f"covariance tensor shape {data.shape} is not (a,b,a,b)-like")
        self.data = data

    @property
    def dims(self):
        return self.data.shape[:2]

    @property
    def n_flat(self) -> int:
        return self.data.shape[0] * self.data.shape[1]

    def flat_matrix(self) -> np.ndarray:
        """(n_out*n_in) x (n_out*n_in) view, entries flattened row-major."""
        n = self.n_flat
        return self.data.reshape(n, n)

    def is_exactly_symmetric(self) -> bool:
        return np.array_equal(self.data, self.data.transpose(2, 3, 0, 1))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.flat_matrix())[0])

    def variances(self) -> np.ndarray:
        """Per-entry variances C[a,b,a,b] as an (n_out, n_in) matrix."""
        n_out, n_in = self.dims
        return np.einsum("abab->ab", self.data).reshape(n_out, n_in)


@dataclass(frozen=True)
class ProductMoments:
    """Mean matrix and entry covariance of a product of weight layers."""

    mean: np.ndarray
    cov: CovTensor4


def _check_chain(layers):
    if not layers:
        raise ShapeError("need at least one layer")
    for lo, hi in zip(layers[:-1], layers[1:]):
        if hi.shape[1] != lo.shape[0]:
            raise ShapeError(
                f"layer shapes {lo.shape} -> {hi.shape} are not conformable"
            )


def product_mean(layers) -> np.ndarray:
    """Mean of the product matrix: the product of the per-layer means."""
    _check_chain(layers)
    m = layers[0].mu
    for layer in layers[1:]:
        m = layer.mu @ m
    return m


def _single_layer_moments(layer: MeanFieldLayer) -> ProductMoments:
    n_out, n_in = layer.shape
    data = np.zeros((n_out, n_in, n_out, n_in))
    flat = data.reshape(n_out * n_in, n_out * n_in)
    flat[np.diag_indices_from(flat)] = layer.var.reshape(-1)
    return ProductMoments(layer.mu.copy(), CovTensor4(data))


def cov_two_layer(w1: MeanFieldLayer, w2: MeanFieldLayer) -> CovTensor4:
    """Closed-form entry covariance of the two-layer product ``W2 W1``.

    Three terms: a fully diagonal one, one for entries sharing a column
    (delta_bd), and one for entries sharing a row (delta_ac). Entries sharing
    neither a row nor a column have exactly zero covariance at two layers.
    """
    _check_chain([w1, w2])
    n_out = w2.shape[0]
    n_in = w1.shape[1]
    v1, v2 = w1.var, w2.var
    C = np.zeros((n_out, n_in, n_out, n_in))

    # Shared column, [a,b,c,b]: sum_i mu2_ai mu2_ci v1_ib.
    # The outer product over (a, c) is formed first so the result is exactly
    # symmetric under (a,b) <-> (c,d).
    outer2 = np.einsum("ai,ci->aci", w2.mu, w2.mu)
    s_col = np.tensordot(outer2, v1, axes=([2], [0]))  # (a, c, b)
    br = np.arange(n_in)
    C[:, br, :, br] += s_col.transpose(2, 0, 1)

    # Shared row, [a,b,a,d]: sum_i v2_ai mu1_ib mu1_id.
    outer1 = np.einsum("ib,id->ibd", w1.mu, w1.mu)
    s_row = np.tensordot(v2, outer1, axes=([1], [0]))  # (a, b, d)
    ar = np.arange(n_out)
    C[ar, :, ar, :] += s_row

    # Diagonal, [a,b,a,b]: sum_i v2_ai v1_ib.
    flat = C.reshape(n_out * n_in, n_out * n_in)
    flat[np.diag_indices_from(flat)] += (v2 @ v1).reshape(-1)
    return CovTensor4(C)


def cov_recursive_step(prev: ProductMoments, top: MeanFieldLayer) -> ProductMoments:
    """Moments of ``W_top @ M_prev`` from the moments of ``M_prev``.

    The covariance update has three terms: covariance-times-covariance,
    top-means squared times previous covariance, and previous means squared
    times top covariance; the first and third collapse onto row-diagonal
    entries because the top layer is elementwise independent.
    """
    mbar, C = prev.mean, prev.cov.data
    p, n_in = mbar.shape
    if top.shape[1] != p:
        raise ShapeError(f"top layer shape {top.shape} not conformable with ({p}, ...)")
    mu, v = top.mu, top.var
    n_out = top.shape[0]

    # mu_ai mu_cj C_ibjd, symmetrized so stored symmetry is exact.
    tmp = np.tensordot(mu, C, axes=([1], [0]))  # (a, b, j, d)
    t2 = np.moveaxis(np.tensordot(tmp, mu, axes=([2], [1])), 3, 2)
    t2 = 0.5 * (t2 + t2.transpose(2, 3, 0, 1))

    # v_ai C_ibid and v_ai mbar_ib mbar_id land on entries [a, b, a, d].
    cdiag = np.einsum("ibid->ibd", C)
    t1 = np.tensordot(v, cdiag, axes=([1], [0]))
    outer_m = np.einsum("ib,id->ibd", mbar, mbar)
    t3 = np.tensordot(v, outer_m, axes=([1], [0]))

    ar = np.arange(n_out)
    t2[ar, :, ar, :] += t1 + t3
    return ProductMoments(mu @ mbar, CovTensor4(t2))


def cov_product(layers) -> ProductMoments:
    """Mean and entry covariance of the full product, bottom layer first."""
    _check_chain(layers)
    moments = _single_layer_moments(layers[0])
    for layer in layers[1:]:
        moments = cov_recursive_step(moments, layer)
    return moments


def _sample_product_shard(layers, m: int, rng) -> np.ndarray:
    prod = None
    for layer in layers:
        w = layer.mu + layer.sigma * rng.standard_normal((m,) + layer.shape)
        prod = w if prod is None else np.matmul(w, prod)
    return prod


def mc_product_samples(layers, n: int, seed: int) -> np.ndarray:
    """n independent draws of the product matrix, shape (n, n_out, n_in).

    Deterministic given the seed: sampling is cut into fixed-size shards with
    per-shard streams, so the result does not depend on how shards are
    scheduled.
    """
    _check_chain(layers)
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.empty((n, layers[-1].shape[0], layers[0].shape[1]))
    done = 0
    for idx, m in shard_sizes(n):
        rng = derived_rng(seed, idx)
        out[done : done + m] = _sample_product_shard(layers, m, rng)
        done += m
    return out


def mc_product_moments(layers, n: int, seed: int):
    """Streaming Monte-Carlo mean/covariance of the product with errors.

    Returns ``(mean, cov, se_mean, se_cov)`` where ``cov`` and ``se_cov`` are
    :class:`CovTensor4`; standard errors for covariance entries come from the
    delta method (fourth central moments). Two passes over regenerated
    shards, so only one shard is in memory at a time; draws are identical to
    :func:`mc_product_samples` with the same seed.
    """
    _check_chain(layers)
    n_out, n_in = layers[-1].shape[0], layers[0].shape[1]
    k = n_out * n_in

    total = np.zeros(k)
    for idx, m in shard_sizes(n):
        rng = derived_rng(seed, idx)
        total += _sample_product_shard(layers, m, rng).reshape(m, k).sum(axis=0)
    mean_flat = total / n

    acc_outer = np.zeros((k, k))
    acc_sq = np.zeros((k, k))
    for idx, m in shard_sizes(n):
        rng = derived_rng(seed, idx)
        d = _sample_product_shard(layers, m, rng).reshape(m, k) - mean_flat
        acc_outer += d.T @ d
        dsq = d * d
        acc_sq += dsq.T @ dsq
    cov_flat = acc_outer / (n - 1)
    m22 = acc_sq / n
    var_cov = np.maximum(m22 - cov_flat * cov_flat, 0.0) / n
    se_cov_flat = np.sqrt(var_cov)
    se_mean = np.sqrt(np.maximum(np.diag(cov_flat), 0.0) / n).reshape(n_out, n_in)

    shape4 = (n_out, n_in, n_out, n_in)
    return (
        mean_flat.reshape(n_out, n_in),
        CovTensor4(cov_flat.reshape(shape4)),
        se_mean,
        CovTensor4(se_cov_flat.reshape(shape4)),
    )


@dataclass(frozen=True)
class MVGFactors:
    """Deterministic outer factors A, C and the mean of the Gaussian middle.

    The chain ``A B C`` with ``B`` elementwise standard-Gaussian around
    ``mu_B`` has Kronecker-factored covariance with scale matrices
    ``U = A A^T`` (rows) and ``V = C^T C`` (columns).
    """

    A: np.ndarray
    C: np.ndarray
    mu_B: np.ndarray

    def __post_init__(self):
        for name in ("A", "C", "mu_B"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.A.shape[1] != self.mu_B.shape[0] or self.mu_B.shape[1] != self.C.shape[0]:
            raise ShapeError(
                f"factors not conformable: {self.A.shape} x {self.mu_B.shape} x {self.C.shape}"
            )

    @property
    def U(self) -> np.ndarray:
        u = self.A @ self.A.T
        return 0.5 * (u + u.T)

    @property
    def V(self) -> np.ndarray:
        v = self.C.T @ self.C
        return 0.5 * (v + v.T)


def mvg_product(factors: MVGFactors) -> ProductMoments:
    """Analytic moments of ``A B C`` with B elementwise N(mu_B, 1).

    Under column-major stacking, ``vec(A B C) = (C^T kron A) vec(B)``, so the
    covariance of ``vec(ABC)`` is ``V kron U``; expressed on the four-index
    tensor that is ``C[a,b,c,d] = U[a,c] V[b,d]``, independent of the
    stacking convention.
    """
    mean = factors.A @ factors.mu_B @ factors.C
    data = np.einsum("ac,bd->abcd", factors.U, factors.V)
    return ProductMoments(mean, CovTensor4(data))


def mc_mvg_moments(factors: MVGFactors, n: int, seed: int):
    """Monte-Carlo moments of ``A B C`` with B ~ N(mu_B, 1), as CovTensor4s.

    Same streaming scheme and error estimates as :func:`mc_product_moments`.
    """
    A, C, mu_B = factors.A, factors.C, factors.mu_B
    n_out, n_in = A.shape[0], C.shape[1]
    k = n_out * n_in

    def shard(idx, m):
        rng = derived_rng(seed, idx)
        b = mu_B + rng.standard_normal((m,) + mu_B.shape)
        return np.matmul(np.matmul(A, b), C).reshape(m, k)

    total = np.zeros(k)
    for idx, m in shard_sizes(n):
        total += shard(idx, m).sum(axis=0)
    mean_flat = total / n

    acc_outer = np.zeros((k, k))
    acc_sq = np.zeros((k, k))
    for idx, m in shard_sizes(n):
        d = shard(idx, m) - mean_flat
        acc_outer += d.T @ d
        dsq = d * d
        acc_sq += dsq.T @ dsq
    cov_flat = acc_outer / (n - 1)
    var_cov = np.maximum(acc_sq / n - cov_flat * cov_flat, 0.0) / n
    shape4 = (n_out, n_in, n_out, n_in)
    return (
        mean_flat.reshape(n_out, n_in),
        CovTensor4(cov_flat.reshape(shape4)),
        np.sqrt(np.maximum(np.diag(cov_flat), 0.0) / n).reshape(n_out, n_in),
        CovTensor4(np.sqrt(var_cov).reshape(shape4)),
    )


def prior_element_density(L: int, K: int, sigma: float, n: int, seed: int) -> np.ndarray:
    """Draws of entry (0, 0) of a product of L KxK zero-mean Gaussian layers.

    The marginal of a product entry is only Gaussian at L = 1; deeper chains
    are heavier-tailed, and this sampler is the only characterization offered
    (no closed form is attempted).
    """
    if L < 1 or K < 1:
        raise ValueError("L and K must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = np.zeros((K, K))
    sig = np.full((K, K), float(sigma))
    layers = [MeanFieldLayer(mu, sig) for _ in range(L)]
    out = np.empty(n)
    done = 0
    for idx, m in shard_sizes(n, min(SHARD, max(1, (1 << 22) // (K * K)))):
        rng = derived_rng(seed, idx)
        out[done : done + m] = _sample_product_shard(layers, m, rng)[:, 0, 0]
        done += m
    return out
