"""Mean-field Gaussian variational inference for the MLPs in model_core.

The approximate posterior puts an independent Gaussian on every weight and
bias. Standard deviations are parameterized through a softplus,
``std = log(1 + exp(rho))``, so they stay positive without projection. The
training objective is the negative evidence lower bound

    temperature * KL(q || prior) - E_q[log p(y | x, theta)],

with the KL term in closed form (both distributions are diagonal Gaussians)
and the likelihood term estimated with reparameterized samples
``theta = mu + std * eps``. Minibatches scale the KL term by
batch_size / dataset_size so batch objectives sum to the full one.
Optimization is Adam with the AMSGrad correction. Training is single-threaded
and bit-reproducible given its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import derived_rng
from .data_io import Dataset
from .model_core import (
    BatchBackprop,
    NetworkSpec,
    NumericError,
    ParamLayout,
    forward_batch,
    gaussian_nll,
    softmax_cross_entropy,
)

RHO_INIT = -3.0  # softplus(-3) ~ 0.0486


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def d_softplus(x):
    # sigmoid
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


@dataclass
class MeanFieldPosterior:
    """Diagonal Gaussian over the full flat parameter vector of a network."""

    spec: NetworkSpec
    mu: np.ndarray
    rho: np.ndarray
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        layout = ParamLayout(self.spec)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.mu.shape != (layout.n_params,) or self.rho.shape != self.mu.shape:
            raise ValueError("mu/rho must be flat vectors matching the spec layout")

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int) -> "MeanFieldPosterior":
        """He-normal means, all stds at softplus(-3)."""
        rng = derived_rng(seed, 0x1417)
        layout = ParamLayout(spec)
        blocks = []
        for n_out, n_in in spec.weight_shapes():
            W = rng.normal(scale=np.sqrt(2.0 / n_in), size=(n_out, n_in))
            blocks.append((W, np.zeros(n_out) if spec.has_bias else None))
        mu = layout.pack(blocks)
        return cls(spec, mu, np.full(layout.n_params, RHO_INIT))

    @classmethod
    def from_moments(cls, spec: NetworkSpec, mu, std) -> "MeanFieldPosterior":
        mu = np.asarray(mu, dtype=np.float64)
        std = np.broadcast_to(np.asarray(std, dtype=np.float64), mu.shape)
        return cls(spec, mu.copy(), softplus_inverse(std))

    @property
    def n_params(self) -> int:
        return self.mu.shape[0]

    def std(self) -> np.ndarray:
        return softplus(self.rho)

    def sample_theta(self, rng) -> np.ndarray:
        return self.mu + self.std() * rng.standard_normal(self.n_params)

    def mean_theta(self) -> np.ndarray:
        return self.mu.copy()

    def weight_layers(self):
        """Weight blocks as linear-analysis layers (biases set aside)."""
        from .linear_analysis import MeanFieldLayer

        layout = ParamLayout(self.spec)
        mus = layout.unpack(self.mu)
        stds = layout.unpack(self.std())
        return [MeanFieldLayer(w, s) for (w, _), (s, _) in zip(mus, stds)]

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "mu": self.mu.tolist(),
            "rho": self.rho.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MeanFieldPosterior":
        return cls(
            NetworkSpec.from_json(obj["spec"]),
            np.array(obj["mu"], dtype=np.float64),
            np.array(obj["rho"], dtype=np.float64),
        )


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean isotropic Gaussian prior; std may vary per layer."""

    std: float | tuple = 0.23

    def flat_std(self, spec: NetworkSpec) -> np.ndarray:
        layout = ParamLayout(spec)
        if np.isscalar(self.std):
            if self.std <= 0:
                raise ValueError("prior std must be positive")
            return np.full(layout.n_params, float(self.std))
        stds = list(self.std)
        if len(stds) != spec.n_layers or any(s <= 0 for s in stds):
            raise ValueError("need one positive std per layer")
        out = np.empty(layout.n_params)
        for l, ((ws, _), bs) in enumerate(zip(layout.w_slices, layout.b_slices)):
            out[ws] = stds[l]
            if bs is not None:
                out[bs[0]] = stds[l]
        return out


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    n_train_samples: int = 16
    n_test_samples: int = 16
    temperature: float = 1.0
    seed: int = 0
    likelihood: str = "categorical"  # or "gaussian"
    noise_scale: float = 0.05
    amsgrad: bool = True

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs, self.n_train_samples) <= 0:
            raise ValueError("learning rate, batch size, epochs, samples must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.likelihood not in ("categorical", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")


def make_loss_closure(likelihood: str, targets, noise_scale: float = 0.05):
    if likelihood == "categorical":
        labels = np.asarray(targets, dtype=np.int64)

        def closure(out):
            return softmax_cross_entropy(out, labels)

    else:
        t = np.asarray(targets, dtype=np.float64)

        def closure(out):
            return gaussian_nll(out, t, noise_scale)

    return closure


def kl_diag_gaussians(mu_q, std_q, std_p) -> float:
    """KL(q || p) between diagonal Gaussians with p zero-mean; in nats."""
    ratio2 = (std_q / std_p) ** 2
    return float(
        np.sum(np.log(std_p / std_q) + 0.5 * (ratio2 + (mu_q / std_p) ** 2) - 0.5)
    )


def _kl_and_grads(mu, rho, std_p):
    std_q = softplus(rho)
    kl = kl_diag_gaussians(mu, std_q, std_p)
    d_mu = mu / (std_p * std_p)
    d_std = std_q / (std_p * std_p) - 1.0 / std_q
    return kl, d_mu, d_std * d_softplus(rho)


def elbo(
    q: MeanFieldPosterior,
    prior: PriorSpec,
    spec: NetworkSpec,
    batch,
    n_samples: int,
    dataset_size: int,
    temperature: float,
    seed: int,
    engine: BatchBackprop | None = None,
    loss_closure=None,
):
    """Negative ELBO estimate for one batch and its gradient.

    Returns ``(value, (grad_mu, grad_rho), kl_term, nll_term)``. The KL term
    is scaled by ``temperature * len(batch) / dataset_size``; the likelihood
    term is the batch-summed NLL averaged over ``n_samples`` reparameterized
    draws with a stream fixed by ``seed`` (common random numbers).
    """
    X, targets = batch
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if loss_closure is None:
        kind = "categorical" if np.issubdtype(np.asarray(targets).dtype, np.integer) else "gaussian"
        loss_closure = make_loss_closure(kind, targets)
    if engine is None:
        engine = BatchBackprop(spec, X.shape[0])

    std = q.std()
    dstd = d_softplus(q.rho)
    rng = derived_rng(seed)
    nll = 0.0
    g_mu = np.zeros_like(q.mu)
    g_rho = np.zeros_like(q.rho)
    for _ in range(n_samples):
        eps = rng.standard_normal(q.n_params)
        theta = q.mu + std * eps
        value, g_theta = engine.loss_and_grad(theta, X, loss_closure)
        nll += value
        g_mu += g_theta
        g_rho += g_theta * eps
    nll /= n_samples
    g_mu /= n_samples
    g_rho *= dstd / n_samples

    scale = temperature * X.shape[0] / dataset_size
    kl, kl_dmu, kl_drho = _kl_and_grads(q.mu, q.rho, prior.flat_std(spec))
    value = scale * kl + nll
    if not np.isfinite(value):
        raise NumericError(f"non-finite negative ELBO {value!r}")
    return value, (g_mu + scale * kl_dmu, g_rho + scale * kl_drho), scale * kl, nll


class AdamState:
    """Adam with optional AMSGrad on a flat vector."""

    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8, amsgrad=True):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.vhat = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.amsgrad = amsgrad

    def step(self, params, grad, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.t)
        if self.amsgrad:
            np.maximum(self.vhat, self.v, out=self.vhat)
            vref = self.vhat / (1 - b2**self.t)
        else:
            vref = self.v / (1 - b2**self.t)
        params -= lr * mhat / (np.sqrt(vref) + self.eps)


def train(
    spec: NetworkSpec,
    dataset: Dataset,
    prior: PriorSpec,
    config: TrainConfig,
) -> MeanFieldPosterior:
    """Fit the mean-field posterior by minimizing the negative ELBO.

    The returned posterior carries a ``history`` list of per-epoch records
    ``(epoch, neg_elbo, kl_term, nll_term)``, each summed over the epoch's
    batches (so neg_elbo estimates the full-dataset objective).
    """
    if dataset.n == 0:
        raise ValueError("dataset must be nonempty")
    q = MeanFieldPosterior.initialize(spec, config.seed)
    opt = AdamState(2 * q.n_params, amsgrad=config.amsgrad)
    shuffle_rng = derived_rng(config.seed, 0x5F0F)
    std_p = prior.flat_std(spec)
    engines = {}
    flat = np.concatenate([q.mu, q.rho])
    n = dataset.n
    P = q.n_params
    noise_rng = derived_rng(config.seed, 0xE125)

    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        tot = kl_tot = nll_tot = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            X, t = dataset.X[idx], dataset.y[idx]
            engine = engines.get(len(idx))
            if engine is None:
                engine = engines[len(idx)] = BatchBackprop(spec, len(idx))
            q.mu, q.rho = flat[:P], flat[P:]
            try:
                value, (g_mu, g_rho), kl_term, nll_term = elbo(
                    q,
                    prior,
                    spec,
                    (X, t),
                    config.n_train_samples,
                    n,
                    config.temperature,
                    int(noise_rng.integers(0, 2**63 - 1)),
                    engine=engine,
                    loss_closure=make_loss_closure(
                        config.likelihood, t, config.noise_scale
                    ),
                )
            except NumericError as err:
                raise TrainingError(
                    f"training diverged at epoch {epoch}: {err}", epoch=epoch
                ) from err
            opt.step(flat, np.concatenate([g_mu, g_rho]), config.learning_rate)
            tot += value
            kl_tot += kl_term
            nll_tot += nll_term
        q.history.append((epoch, tot, kl_tot, nll_tot))
    q.mu, q.rho = flat[:P].copy(), flat[P:].copy()
    return q


def predict(
    q: MeanFieldPosterior, spec: NetworkSpec, x, n_samples: int, seed: int
) -> np.ndarray:
    """Forward passes under independent posterior draws.

    For a single input vector returns (n_samples, n_out); for a batch of rows
    returns (n_samples, n_rows, n_out). Deterministic given the seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    rng = derived_rng(seed, 0x9E8D)
    out = np.empty((n_samples, X.shape[0], spec.output_dim))
    for s in range(n_samples):
        theta = q.sample_theta(rng)
        out[s], _ = forward_batch(spec, theta, X)
    return out[:, 0, :] if single else out


def ensemble_accuracy(samples_logits: np.ndarray, labels) -> float:
    """Accuracy of the mean-softmax ensemble prediction."""
    z = samples_logits - samples_logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    pred = p.mean(axis=0).argmax(axis=-1)
    return float((pred == np.asarray(labels)).mean())
