"""Dense MLPs with explicit flat parameter vectors and hand-written gradients.

Everything here is plain float64 numpy. Networks are described by a
:class:`NetworkSpec`; parameters live in a single flat vector whose layout is
fixed by :class:`ParamLayout`. The forward pass records, for every hidden
unit, which linear branch of the (piecewise-linear) activation fired, so that
downstream analysis can rebuild the same linear map. Gradients are computed
by explicit reverse-mode backpropagation rather than an autodiff tape; the
test suite checks them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATION_KINDS = ("linear", "relu", "leaky_relu")


class ShapeError(ValueError):
    """Raised when array shapes do not match the network specification."""


class NumericError(FloatingPointError):
    """Raised on non-finite values; carries the offending parameter index."""

    def __init__(self, message, param_index=None):
        super().__init__(message)
        self.param_index = param_index


@dataclass(frozen=True)
class ActivationSpec:
    """Activation function: identity ('linear') or a (leaky) rectifier.

    ``alpha`` is the slope of the negative branch and is only meaningful for
    ``leaky_relu``; plain ``relu`` behaves like ``leaky_relu`` with alpha 0.
    """

    kind: str = "leaky_relu"
    alpha: float = 0.1

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 < self.alpha <= 1.0:
            raise ValueError("leaky_relu alpha must be in (0, 1]")

    @property
    def negative_slope(self) -> float:
        if self.kind == "linear":
            return 1.0
        if self.kind == "relu":
            return 0.0
        return self.alpha

    @property
    def is_identity(self) -> bool:
        return self.kind == "linear"

    def inverse(self, h):
        """Inverse of the activation; requires an invertible branch pair."""
        slope = self.negative_slope
        if slope == 0.0:
            raise ValueError("relu is not invertible")
        h = np.asarray(h, dtype=np.float64)
        return np.where(h > 0.0, h, h / slope)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a fully connected net: widths, activation, bias flag."""

    layer_widths: tuple
    activation: ActivationSpec
    has_bias: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")

    @property
    def n_layers(self) -> int:
        """Number of weight matrices."""
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def weight_shapes(self):
        w = self.layer_widths
        return [(w[l + 1], w[l]) for l in range(self.n_layers)]

    def to_json(self) -> dict:
        return {
            "widths": list(self.layer_widths),
            "activation": self.activation.kind,
            "alpha": self.activation.alpha,
            "bias": self.has_bias,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkSpec":
        act = ActivationSpec(kind=obj["activation"], alpha=float(obj.get("alpha", 0.1)))
        return cls(tuple(obj["widths"]), act, bool(obj.get("bias", True)))


class ParamLayout:
    """Flat layout of a network's parameters.

    Per layer, the weight block (row-major) is followed by the bias block, and
    layers are stored bottom (first applied) to top. ``pack``/``unpack``
    round-trip exactly; ``unpack`` returns views into the flat vector.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.w_slices = []
        self.b_slices = []
        off = 0
        for n_out, n_in in spec.weight_shapes():
            self.w_slices.append((slice(off, off + n_out * n_in), (n_out, n_in)))
            off += n_out * n_in
            if spec.has_bias:
                self.b_slices.append((slice(off, off + n_out), (n_out,)))
                off += n_out
            else:
                self.b_slices.append(None)
        self.n_params = off

    def unpack(self, theta: np.ndarray):
        """Flat vector -> list of (W, b) views; b is None without biases."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(
                f"parameter vector has length {theta.shape}, expected ({self.n_params},)"
            )
        out = []
        for (ws, wshape), bs in zip(self.w_slices, self.b_slices):
            W = theta[ws].reshape(wshape)
            b = theta[bs[0]] if bs is not None else None
            out.append((W, b))
        return out

    def pack(self, blocks) -> np.ndarray:
        theta = np.empty(self.n_params, dtype=np.float64)
        for ((ws, wshape), bs), (W, b) in zip(
            zip(self.w_slices, self.b_slices), blocks
        ):
            W = np.asarray(W, dtype=np.float64)
            if W.shape != wshape:
                raise ShapeError(f"weight block shape {W.shape}, expected {wshape}")
            theta[ws] = W.reshape(-1)
            if bs is not None:
                b = np.asarray(b, dtype=np.float64)
                if b.shape != bs[1]:
                    raise ShapeError(f"bias block shape {b.shape}, expected {bs[1]}")
                theta[bs[0]] = b
        return theta

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_params, dtype=np.float64)


def _branch_multipliers(z: np.ndarray, act: ActivationSpec) -> np.ndarray:
    """Per-unit branch multiplier: 1 on the positive branch, alpha otherwise.

    Pre-activations exactly at 0 take the negative branch by convention.
    """
    if act.is_identity:
        return np.ones_like(z)
    return np.where(z > 0.0, 1.0, act.negative_slope)


def forward(spec: NetworkSpec, theta: np.ndarray, x: np.ndarray):
    """Evaluate the network at one input.

    Returns ``(y, pattern)`` where ``pattern`` is a list with one multiplier
    vector (entries 1 or alpha) per hidden layer. With the identity
    activation the pattern is all ones.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ShapeError(f"input shape {x.shape}, expected ({spec.input_dim},)")
    Y, patterns = forward_batch(spec, theta, x[None, :])
    return Y[0], [p[0] for p in patterns]


def forward_batch(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray):
    """Evaluate the network on a batch of inputs (rows of X)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"batch shape {X.shape}, expected (n, {spec.input_dim})")
    layout = ParamLayout(spec)
    blocks = layout.unpack(theta)
    H = X
    patterns = []
    for l, (W, b) in enumerate(blocks):
        Z = H @ W.T
        if b is not None:
            Z = Z + b
        if l < spec.n_layers - 1:
            pat = _branch_multipliers(Z, spec.activation)
            patterns.append(pat)
            H = pat * Z
        else:
            H = Z
    return H, patterns


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Summed categorical cross-entropy and its gradient w.r.t. the logits."""
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    n = logits.shape[0]
    idx = np.arange(n)
    value = -float(logp[idx, labels].sum())
    grad = e / denom
    grad[idx, labels] -= 1.0
    return value, grad


def gaussian_nll(outputs: np.ndarray, targets: np.ndarray, noise_std: float):
    """Summed Gaussian negative log-likelihood with fixed noise scale."""
    targets = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    resid = outputs - targets
    var = noise_std * noise_std
    value = float(0.5 * (resid * resid).sum() / var)
    value += 0.5 * resid.size * np.log(2.0 * np.pi * var)
    grad = resid / var
    return value, grad


class BatchBackprop:
    """Reusable forward/backward engine for one (spec, batch size) pair.

    All intermediate buffers are allocated once and reused, which matters when
    the same network is evaluated hundreds of thousands of times (HMC). Not
    safe for concurrent use from multiple threads; create one engine per
    worker instead.
    """

    def __init__(self, spec: NetworkSpec, n_batch: int):
        self.spec = spec
        self.layout = ParamLayout(spec)
        self.n_batch = n_batch
        widths = spec.layer_widths
        self._z = [np.empty((n_batch, w)) for w in widths[1:]]
        self._pat = [np.empty((n_batch, w)) for w in widths[1:-1]]
        self._h = [np.empty((n_batch, w)) for w in widths[1:-1]]
        self._dh = [np.empty((n_batch, w)) for w in widths[1:-1]]
        self._grad = np.empty(self.layout.n_params)

    def loss_and_grad(self, theta: np.ndarray, X: np.ndarray, loss_closure):
        """Scalar loss and its gradient as a fresh flat vector.

        ``loss_closure(outputs) -> (value, d value/d outputs)`` must be
        differentiable in the outputs.
        """
        spec = self.spec
        if X.shape != (self.n_batch, spec.input_dim):
            raise ShapeError(f"batch shape {X.shape} does not match engine")
        blocks = self.layout.unpack(np.asarray(theta, dtype=np.float64))
        L = spec.n_layers
        alpha = spec.activation.negative_slope
        identity = spec.activation.is_identity

        H = X
        for l in range(L - 1):
            W, b = blocks[l]
            Z = self._z[l]
            np.matmul(H, W.T, out=Z)
            if b is not None:
                Z += b
            pat = self._pat[l]
            if identity:
                pat.fill(1.0)
            else:
                np.greater(Z, 0.0, out=pat)
                if alpha != 0.0:
                    pat *= 1.0 - alpha
                    pat += alpha
            np.multiply(pat, Z, out=self._h[l])
            H = self._h[l]
        W, b = blocks[L - 1]
        out = self._z[L - 1]
        np.matmul(H, W.T, out=out)
        if b is not None:
            out += b

        value, dout = loss_closure(out)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss value {value!r}")

        grad = self._grad
        gblocks = self.layout.unpack(grad)
        prev_h = X if L == 1 else self._h[L - 2]
        gW, gb = gblocks[L - 1]
        np.matmul(dout.T, prev_h, out=gW)
        if gb is not None:
            np.sum(dout, axis=0, out=gb)
        dnext = dout
        for l in range(L - 2, -1, -1):
            W_up = blocks[l + 1][0]
            dH = self._dh[l]
            np.matmul(dnext, W_up, out=dH)
            dH *= self._pat[l]
            prev_h = X if l == 0 else self._h[l - 1]
            gW, gb = gblocks[l]
            np.matmul(dH.T, prev_h, out=gW)
            if gb is not None:
                np.sum(dH, axis=0, out=gb)
            dnext = dH

        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad))[0])
            raise NumericError(
                f"non-finite gradient at parameter index {bad}", param_index=bad
            )
        return value, grad.copy()

    def outputs(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Forward pass only; returns a view of an internal buffer."""
        spec = self.spec
        blocks = self.layout.unpack(np.asarray(theta, dtype=np.float64))
        H = X
        for l in range(spec.n_layers - 1):
            W, b = blocks[l]
            Z = self._z[l]
            np.matmul(H, W.T, out=Z)
            if b is not None:
                Z += b
            pat = self._pat[l]
            if spec.activation.is_identity:
                pat.fill(1.0)
            else:
                np.greater(Z, 0.0, out=pat)
                a = spec.activation.negative_slope
                if a != 0.0:
                    pat *= 1.0 - a
                    pat += a
            np.multiply(pat, Z, out=self._h[l])
            H = self._h[l]
        W, b = blocks[-1]
        out = self._z[-1]
        np.matmul(H, W.T, out=out)
        if b is not None:
            out += b
        return out


def loss_and_grad(spec: NetworkSpec, theta, X, loss_closure):
    """One-shot loss value and flat gradient (fresh buffers)."""
    X = np.asarray(X, dtype=np.float64)
    engine = BatchBackprop(spec, X.shape[0])
    return engine.loss_and_grad(theta, X, loss_closure)


def grad_logdensity(spec: NetworkSpec, theta, X, loss_closure) -> np.ndarray:
    """Gradient of a scalar loss of the batch outputs w.r.t. all parameters."""
    return loss_and_grad(spec, theta, X, loss_closure)[1]
