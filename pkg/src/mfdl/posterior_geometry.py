"""How much is lost when a posterior mode is forced to be diagonal.

The pipeline: sample a small BNN posterior with Hamiltonian Monte Carlo,
isolate the dominant mode with a BIC-selected Gaussian mixture, fit a
full-covariance Gaussian and its best diagonal restriction to the mode, and
report two gap measures:

* the Wasserstein error ``E_W = W(samples, diag draws) - W(samples, full
  draws)``, computed between point clouds with an exact transport solver, and
* the KL error ``E_KL = KL(full || diag)`` in nats, the worst-case
  information lost by diagonalizing the mode.

``depth_gap_sweep`` runs the whole pipeline over a list of depths at a fixed
parameter budget, several restarts per depth.

The HMC here is plain fixed-length leapfrog with Metropolis correction; the
step size is adapted toward a target acceptance rate by dual averaging during
burn-in and then frozen. Kept samples are separated by the configured number
of leapfrog steps.
"""

from __future__ import annotations

import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix, vstack
from scipy.spatial.distance import cdist

from ._rng import derived_rng
from .data_io import Dataset, fmt_float, write_json
from .mfvi import MeanFieldPosterior, PriorSpec, TrainConfig, make_loss_closure, train
from .model_core import BatchBackprop, NetworkSpec, ParamLayout, ShapeError


class HMCError(RuntimeError):
    pass


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Log posterior of a small BNN


def make_bnn_logpost(spec: NetworkSpec, dataset: Dataset | None, prior_precision: float, tau: float = 1.0):
    """Closure theta -> (log posterior, gradient), up to an additive constant.

    log p = tau * log p(D | theta) - 0.5 * prior_precision * |theta|^2.
    With no data the prior term alone remains. The closure reuses internal
    buffers, so share it only within one worker.
    """
    if dataset is None or dataset.n == 0:
        def prior_only(theta):
            theta = np.asarray(theta, dtype=np.float64)
            return -0.5 * prior_precision * float(theta @ theta), -prior_precision * theta

        return prior_only

    engine = BatchBackprop(spec, dataset.n)
    closure = make_loss_closure(
        "categorical" if dataset.task == "classification" else "gaussian", dataset.y
    )
    X = dataset.X
    from .model_core import NumericError

    def logpost(theta):
        theta = np.asarray(theta, dtype=np.float64)
        # Extreme parameter values mid-trajectory are a rejection, not a bug.
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                nll, g_nll = engine.loss_and_grad(theta, X, closure)
            except NumericError:
                return -np.inf, np.zeros_like(theta)
        value = -tau * nll - 0.5 * prior_precision * float(theta @ theta)
        grad = -tau * g_nll - prior_precision * theta
        return value, grad

    return logpost


def bnn_log_posterior(spec: NetworkSpec, dataset: Dataset | None, prior_precision: float, theta):
    """One-shot evaluation of the BNN log posterior and its gradient."""
    return make_bnn_logpost(spec, dataset, prior_precision)(theta)


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo


@dataclass(frozen=True)
class HMCConfig:
    step_size: float = 0.01
    n_leapfrog: int = 100
    n_burnin: int = 500
    burnin_leapfrog: int | None = None  # defaults to n_leapfrog
    target_accept: float = 0.8
    n_samples: int | None = 1000  # None: resolved by the caller (e.g. dim+100)
    seed: int = 0
    prior_precision: float = 1.0
    init: np.ndarray | None = None
    # Per-trajectory step-size jitter (uniform in [1-j, 1+j]); breaks the
    # resonance of fixed-length trajectories on near-Gaussian targets.
    step_jitter: float = 0.1
    # Optional diagonal mass matrix (per-coordinate masses). Ill-scaled
    # posteriors mix far better when masses reflect inverse squared scales.
    mass_diag: np.ndarray | None = None

    def __post_init__(self):
        if self.step_size <= 0 or self.n_leapfrog < 1 or self.n_burnin < 0:
            raise ValueError("step size, leapfrog count, burn-in must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target acceptance must be in (0, 1)")
        if self.n_samples is not None and self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class PosteriorSamples:
    samples: np.ndarray  # (n, dim)
    log_posts: np.ndarray
    acceptance_rate: float
    step_size: float
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _leapfrog(theta, p, grad, eps, n_steps, logpost, inv_mass):
    """Run one trajectory; returns None on non-finite energy."""
    p = p + 0.5 * eps * grad
    value = None
    for i in range(n_steps):
        theta = theta + eps * (p * inv_mass if inv_mass is not None else p)
        value, grad = logpost(theta)
        if not np.isfinite(value):
            return None
        p = p + (eps if i < n_steps - 1 else 0.5 * eps) * grad
    return theta, p, value, grad


_MAX_NONFINITE_STREAK = 100


def hmc_sample(logpost, config: HMCConfig, dim: int | None = None) -> PosteriorSamples:
    """Metropolis-adjusted leapfrog HMC with dual-averaging step size.

    During burn-in the step size chases ``target_accept``; afterwards it is
    frozen at the dual-averaging estimate and every iteration's end state is
    kept as one sample. Deterministic given the config seed.
    """
    if config.n_samples is None:
        raise ValueError("n_samples must be resolved before sampling")
    if config.init is not None:
        theta = np.array(config.init, dtype=np.float64)
    elif dim is not None:
        theta = np.zeros(dim)
    else:
        raise ValueError("need an init point or an explicit dimension")

    rng = derived_rng(config.seed, 0x4A3C)
    value, grad = logpost(theta)
    if not np.isfinite(value):
        raise HMCError("log posterior non-finite at the initial point")

    mass = None
    sqrt_mass = None
    inv_mass = None
    if config.mass_diag is not None:
        mass = np.asarray(config.mass_diag, dtype=np.float64)
        if mass.shape != theta.shape or np.any(mass <= 0):
            raise ValueError("mass_diag must be positive and match the dimension")
        sqrt_mass = np.sqrt(mass)
        inv_mass = 1.0 / mass

    # Dual averaging state (Hoffman & Gelman constants).
    eps = config.step_size
    mu = np.log(10.0 * eps)
    log_eps_bar = 0.0
    h_bar = 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75

    streak = 0

    def kinetic(p):
        if inv_mass is None:
            return 0.5 * float(p @ p)
        return 0.5 * float(p @ (p * inv_mass))

    def propose(eps_now, n_steps):
        nonlocal theta, value, grad, streak
        if config.step_jitter > 0:
            eps_now = eps_now * (1.0 + config.step_jitter * (2.0 * rng.random() - 1.0))
        p0 = rng.standard_normal(theta.shape)
        if sqrt_mass is not None:
            p0 = p0 * sqrt_mass
        h0 = -value + kinetic(p0)
        result = _leapfrog(theta, p0, grad, eps_now, n_steps, logpost, inv_mass)
        if result is None:
            streak += 1
            if streak >= _MAX_NONFINITE_STREAK:
                raise HMCError(
                    f"{streak} consecutive non-finite trajectories (step size {eps_now:g})"
                )
            return 0.0
        streak = 0
        theta_new, p_new, value_new, grad_new = result
        h1 = -value_new + kinetic(p_new)
        alpha = float(np.exp(min(0.0, h0 - h1)))
        if rng.random() < alpha:
            theta, value, grad = theta_new, value_new, grad_new
        return alpha

    burn_steps = config.burnin_leapfrog or config.n_leapfrog
    for m in range(1, config.n_burnin + 1):
        alpha = propose(eps, burn_steps)
        frac = 1.0 / (m + t0)
        h_bar = (1.0 - frac) * h_bar + frac * (config.target_accept - alpha)
        log_eps = mu - np.sqrt(m) / gamma * h_bar
        eta = m**-kappa
        log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar
        eps = float(np.exp(log_eps))
    if config.n_burnin > 0:
        eps = float(np.exp(log_eps_bar))

    n = config.n_samples
    samples = np.empty((n, theta.shape[0]))
    log_posts = np.empty(n)
    alphas = np.empty(n)
    for i in range(n):
        alphas[i] = propose(eps, config.n_leapfrog)
        samples[i] = theta
        log_posts[i] = value
    return PosteriorSamples(
        samples,
        log_posts,
        acceptance_rate=float(alphas.mean()),
        step_size=eps,
        meta={},
    )


# ---------------------------------------------------------------------------
# Diagonal-covariance Gaussian mixtures with BIC selection


@dataclass
class GMMResult:
    weights: np.ndarray
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d)
    log_likelihood: float
    converged: bool

    @property
    def k(self) -> int:
        return len(self.weights)

    def n_free_params(self) -> int:
        k, d = self.means.shape
        return (k - 1) + 2 * k * d

    def bic(self, n: int) -> float:
        return -2.0 * self.log_likelihood + self.n_free_params() * np.log(n)

    def responsibilities(self, X: np.ndarray) -> np.ndarray:
        logp = _component_logpdf(X, self.weights, self.means, self.variances)
        logp -= logp.max(axis=1, keepdims=True)
        r = np.exp(logp)
        r /= r.sum(axis=1, keepdims=True)
        return r


def _component_logpdf(X, weights, means, variances):
    n, d = X.shape
    out = np.empty((n, len(weights)))
    for j in range(len(weights)):
        diff = X - means[j]
        out[:, j] = (
            np.log(weights[j])
            - 0.5 * (diff * diff / variances[j]).sum(axis=1)
            - 0.5 * np.log(variances[j]).sum()
            - 0.5 * d * np.log(2.0 * np.pi)
        )
    return out


def _kpp_means(X, k, rng):
    # k-means++ style spread-out seeding; deterministic given rng.
    n = X.shape[0]
    means = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [((X - m) ** 2).sum(axis=1) for m in means], axis=0
        )
        total = d2.sum()
        if total <= 0:
            means.append(X[rng.integers(n)])
            continue
        means.append(X[np.searchsorted(np.cumsum(d2 / total), rng.random())])
    return np.array(means)


def gmm_fit_diag(X, k, seed=0, max_iter=200, tol=1e-7, n_init=2) -> GMMResult:
    """EM fit of a k-component diagonal-covariance Gaussian mixture."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    floor = 1e-10 * float(X.var(axis=0).mean() + 1e-30) + 1e-300
    best = None
    for attempt in range(n_init):
        rng = derived_rng(seed, 0x63A1, k, attempt)
        means = _kpp_means(X, k, rng)
        variances = np.tile(X.var(axis=0) + floor, (k, 1))
        weights = np.full(k, 1.0 / k)
        prev_ll = -np.inf
        converged = False
        for _ in range(max_iter):
            logp = _component_logpdf(X, weights, means, variances)
            m = logp.max(axis=1, keepdims=True)
            lse = m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True))
            ll = float(lse.sum())
            resp = np.exp(logp - lse)
            if abs(ll - prev_ll) < tol * (1.0 + abs(ll)):
                converged = True
                break
            prev_ll = ll
            nk = resp.sum(axis=0)
            nk = np.maximum(nk, 1e-12)
            weights = nk / n
            means = (resp.T @ X) / nk[:, None]
            for j in range(k):
                diff = X - means[j]
                variances[j] = (resp[:, j] @ (diff * diff)) / nk[j] + floor
        result = GMMResult(weights, means, variances, ll, converged)
        if best is None or result.log_likelihood > best.log_likelihood:
            best = result
    return best


def gmm_bic_select(samples, k_max: int = 4, seed: int = 0):
    """Fit k = 1..k_max mixtures and return (best_fit, chosen_k, bic_values)."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    fits = []
    bics = []
    for k in range(1, k_max + 1):
        if n < 2 * k:
            break
        fit = gmm_fit_diag(X, k, seed=seed)
        fits.append(fit)
        bics.append(fit.bic(n))
    best = int(np.argmin(bics))
    return fits[best], best + 1, bics


def gmm_dominant_mode(samples, k_max: int = 4, seed: int = 0):
    """Samples hard-assigned to the heaviest mixture component.

    Returns ``(subset, chosen_k, warning)`` where ``warning`` flags an EM fit
    that hit its iteration cap. With fewer than dim + 2 samples no mixture is
    attempted (k = 1, all samples returned).
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < d + 2:
        return X, 1, False
    fit, k, _ = gmm_bic_select(X, k_max=k_max, seed=seed)
    if k == 1:
        return X, 1, not fit.converged
    dominant = int(np.argmax(fit.weights))
    assign = fit.responsibilities(X).argmax(axis=1)
    subset = X[assign == dominant]
    if subset.shape[0] == 0:  # heaviest component owns no points; keep all
        subset = X
    return subset, k, not fit.converged


# ---------------------------------------------------------------------------
# Gaussian fits and the two gap measures


@dataclass
class GaussianFit:
    """Gaussian fitted to samples; covariance dense ('full') or a vector ('diag')."""

    mean: np.ndarray
    cov: np.ndarray
    kind: str  # "full" | "diag"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.kind not in ("full", "diag"):
            raise ValueError(f"unknown fit kind {self.kind!r}")
        if self.kind == "full":
            if self.cov.shape != (self.dim, self.dim):
                raise ShapeError("full covariance must be (dim, dim)")
        else:
            if self.cov.shape != (self.dim,):
                raise ShapeError("diagonal covariance must be a vector")
            if np.any(self.cov <= 0):
                raise FitError("diagonal variances must be positive")
        self._chol = None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def cholesky(self) -> np.ndarray:
        if self.kind != "full":
            raise ValueError("cholesky only applies to full fits")
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self.cov)
            except np.linalg.LinAlgError as err:
                raise FitError(f"covariance not positive definite: {err}") from err
        return self._chol

    def log_det(self) -> float:
        if self.kind == "diag":
            return float(np.log(self.cov).sum())
        return 2.0 * float(np.log(np.diag(self.cholesky())).sum())

    def sample(self, n: int, rng) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        if self.kind == "diag":
            return self.mean + np.sqrt(self.cov) * z
        return self.mean + z @ self.cholesky().T


# Relative jitter added to full-fit diagonals; near-singular sample
# covariances (n barely above dim) are expected in the sweep.
COV_JITTER = 1e-8


def fit_full(samples) -> GaussianFit:
    """Sample mean and unbiased covariance, jittered for invertibility."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 2:
        raise FitError("need at least 2 samples")
    mean = X.mean(axis=0)
    diff = X - mean
    S = diff.T @ diff / (n - 1)
    S = 0.5 * (S + S.T)
    jitter = COV_JITTER * float(np.trace(S)) / d
    if jitter <= 0:
        jitter = COV_JITTER
    S[np.diag_indices_from(S)] += jitter
    fit = GaussianFit(mean, S, "full")
    fit.cholesky()  # raises FitError if singular even after jitter
    return fit


def fit_diag(full: GaussianFit) -> GaussianFit:
    """Best diagonal approximation under KL(full || .): same mean, diag(cov)."""
    if full.kind != "full":
        raise ValueError("fit_diag expects a full-covariance fit")
    return GaussianFit(full.mean.copy(), np.diag(full.cov).copy(), "diag")


def kl_error(full: GaussianFit, diag: GaussianFit) -> float:
    """Closed-form KL(full || diag) between Gaussian fits, in nats."""
    if full.dim != diag.dim:
        raise ShapeError("fits have different dimensions")
    if diag.kind != "diag":
        raise ValueError("second argument must be a diagonal fit")
    inv_d = 1.0 / diag.cov
    if full.kind == "full":
        trace = float(np.diag(full.cov) @ inv_d)
        logdet_f = full.log_det()
    else:
        trace = float(full.cov @ inv_d)
        logdet_f = float(np.log(full.cov).sum())
    dmean = diag.mean - full.mean
    quad = float(dmean * dmean @ inv_d)
    value = 0.5 * (trace + quad - full.dim + diag.log_det() - logdet_f)
    return max(value, 0.0)


def wasserstein_point_clouds(U, V) -> float:
    """Exact transport cost between uniform point clouds, squared-L2 ground cost.

    Equal-size clouds reduce to a linear assignment problem (the optimal
    coupling is a permutation); unequal sizes solve the transport linear
    program exactly.
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if U.shape[1] != V.shape[1]:
        raise ShapeError("clouds must share a dimension")
    n, m = U.shape[0], V.shape[0]
    M = cdist(U, V, "sqeuclidean")
    if n == m:
        rows, cols = linear_sum_assignment(M)
        return float(M[rows, cols].sum()) / n
    # Uniform-marginal transport LP; the last column constraint is redundant.
    rows_i = np.repeat(np.arange(n), m)
    cols_j = np.tile(np.arange(m), n)
    var = np.arange(n * m)
    a_rows = coo_matrix((np.ones(n * m), (rows_i, var)), shape=(n, n * m))
    keep = cols_j < m - 1
    a_cols = coo_matrix(
        (np.ones(int(keep.sum())), (cols_j[keep], var[keep])), shape=(m - 1, n * m)
    )
    A = vstack([a_rows, a_cols]).tocsr()
    b = np.concatenate([np.full(n, 1.0 / n), np.full(m - 1, 1.0 / m)])
    res = linprog(M.reshape(-1), A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def wasserstein_error(
    posterior_samples, full: GaussianFit, diag: GaussianFit, n_draws: int | None = None, seed: int = 0
) -> float:
    """W(samples, diag draws) - W(samples, full draws) on equal-size clouds."""
    X = np.asarray(posterior_samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if n_draws is None:
        n_draws = X.shape[0]
    w_diag = wasserstein_point_clouds(X, diag.sample(n_draws, derived_rng(seed, 0xD1A)))
    w_full = wasserstein_point_clouds(X, full.sample(n_draws, derived_rng(seed, 0xF011)))
    return w_diag - w_full


# ---------------------------------------------------------------------------
# Depth sweep


def solve_width(input_dim: int, output_dim: int, depth: int, budget: int) -> int:
    """Hidden width whose non-bias parameter count is closest to the budget."""
    if depth < 1 or budget < 1:
        raise ValueError("depth and budget must be >= 1")

    def count(w):
        return input_dim * w + (depth - 1) * w * w + w * output_dim

    best_w, best_gap = 1, abs(count(1) - budget)
    w = 2
    while True:
        gap = abs(count(w) - budget)
        if gap < best_gap:
            best_w, best_gap = w, gap
        if count(w) > 2 * budget and w > best_w:
            break
        w += 1
    return best_w


@dataclass
class GapCell:
    depth: int
    restart: int
    e_w: float
    e_kl: float
    test_acc: float
    acceptance: float
    width: int = 0
    n_mode_samples: int = 0
    gmm_k: int = 1


@dataclass
class GapReport:
    cells: list
    failures: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for depth in sorted({c.depth for c in self.cells}):
            rows = [c for c in self.cells if c.depth == depth]
            out[str(depth)] = {}
            for name in ("e_w", "e_kl", "test_acc", "acceptance"):
                vals = np.array([getattr(c, name) for c in rows])
                se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
                out[str(depth)][name] = {
                    "mean": float(vals.mean()),
                    "se": se,
                    "median": float(np.median(vals)),
                }
            out[str(depth)]["width"] = rows[0].width
            out[str(depth)]["n_restarts"] = len(rows)
        return out

    def median(self, depth: int, name: str) -> float:
        vals = [getattr(c, name) for c in self.cells if c.depth == depth]
        return float(np.median(vals))

    def to_csv(self, path) -> None:
        rows = sorted(self.cells, key=lambda c: (c.depth, c.restart))
        with open(path, "w", newline="") as fh:
            fh.write("depth,restart,e_w,e_kl,test_acc,acceptance\r\n")
            for c in rows:
                fh.write(
                    f"{c.depth},{c.restart},{fmt_float(c.e_w)},{fmt_float(c.e_kl)},"
                    f"{fmt_float(c.test_acc)},{fmt_float(c.acceptance)}\r\n"
                )

    def to_json(self, path) -> None:
        write_json(path, {"summary": self.summary(), "failures": self.failures})


def _cell_seed(*key) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1, np.uint64)[0] >> 1)


def _run_gap_cell(args: dict):
    depth = args["depth"]
    restart = args["restart"]
    try:
        train_ds: Dataset = args["train_ds"]
        test_ds: Dataset = args["test_ds"]
        activation = args["activation"]
        width = args["width"]
        seed = args["seed"]
        n_classes = train_ds.n_classes
        spec = NetworkSpec(
            (train_ds.dim, *([width] * depth), n_classes), activation
        )
        layout = ParamLayout(spec)

        vi_cfg: TrainConfig = args["mfvi_config"]
        vi_cfg = replace(vi_cfg, seed=_cell_seed(seed, depth, restart, 0))
        q = train(spec, train_ds, PriorSpec(1.0 / np.sqrt(args["prior_precision"])), vi_cfg)

        hmc_cfg: HMCConfig = args["hmc_config"]
        n_samples = hmc_cfg.n_samples or layout.n_params + 200
        # Precondition with the fitted per-parameter scales: data-pinned and
        # prior-dominated directions then mix at comparable rates.
        scales = np.clip(q.std(), 1e-2, 2.0)
        hmc_cfg = replace(
            hmc_cfg,
            n_samples=n_samples,
            seed=_cell_seed(seed, depth, restart, 1),
            init=q.mean_theta(),
            mass_diag=1.0 / (scales * scales),
        )
        logpost = make_bnn_logpost(spec, train_ds, hmc_cfg.prior_precision)
        chain = hmc_sample(logpost, hmc_cfg)

        mode, k, _warn = gmm_dominant_mode(
            chain.samples, k_max=4, seed=_cell_seed(seed, depth, restart, 2)
        )
        full = fit_full(mode)
        diag = fit_diag(full)
        e_kl = kl_error(full, diag)
        e_w = wasserstein_error(
            mode, full, diag, seed=_cell_seed(seed, depth, restart, 3)
        )

        engine = BatchBackprop(spec, test_ds.n)
        probs = np.zeros((test_ds.n, n_classes))
        for theta in chain.samples:
            logits = engine.outputs(theta, test_ds.X)
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs += e / e.sum(axis=1, keepdims=True)
        acc = float((probs.argmax(axis=1) == test_ds.y).mean())

        return GapCell(
            depth=depth,
            restart=restart,
            e_w=e_w,
            e_kl=e_kl,
            test_acc=acc,
            acceptance=chain.acceptance_rate,
            width=width,
            n_mode_samples=mode.shape[0],
            gmm_k=k,
        )
    except Exception as err:  # cell isolation: a sweep survives bad cells
        return (depth, restart, f"{type(err).__name__}: {err}")


def depth_gap_sweep(
    depths,
    param_budget: int,
    train_ds: Dataset,
    test_ds: Dataset,
    activation,
    restarts: int,
    seed: int = 0,
    hmc_config: HMCConfig | None = None,
    mfvi_config: TrainConfig | None = None,
    prior_precision: float = 1.0,
    jobs: int = 1,
) -> GapReport:
    """Run the full mode-gap pipeline over depths x restarts.

    Width is solved per depth so the non-bias parameter count lands near the
    budget. Cells are independent jobs with derived seeds; results are
    identical for any ``jobs`` value. Failed cells are recorded and skipped.
    """
    if hmc_config is None:
        hmc_config = HMCConfig(n_samples=None)
    if mfvi_config is None:
        mfvi_config = TrainConfig(
            learning_rate=1e-3, batch_size=250, epochs=200, n_train_samples=2
        )
    cells = []
    for depth in depths:
        width = solve_width(train_ds.dim, train_ds.n_classes, depth, param_budget)
        for restart in range(restarts):
            cells.append(
                {
                    "depth": depth,
                    "restart": restart,
                    "width": width,
                    "train_ds": train_ds,
                    "test_ds": test_ds,
                    "activation": activation,
                    "seed": seed,
                    "hmc_config": hmc_config,
                    "mfvi_config": mfvi_config,
                    "prior_precision": prior_precision,
                }
            )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_gap_cell, cells))
    else:
        results = [_run_gap_cell(c) for c in cells]

    report = GapReport(cells=[])
    for res in results:
        if isinstance(res, GapCell):
            report.cells.append(res)
        else:
            depth, restart, msg = res
            print(f"depth-gap cell ({depth}, {restart}) failed: {msg}", file=sys.stderr)
            report.failures.append({"depth": depth, "restart": restart, "error": msg})
    report.cells.sort(key=lambda c: (c.depth, c.restart))
    return report
