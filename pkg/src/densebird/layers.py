"""Dense-tensor layers with explicit forward and backward passes.

Tensors are plain numpy arrays in (batch, channels, height, width) layout.
Every layer keeps whatever it needs from the last forward call and
`backward` consumes the upstream gradient, accumulating parameter gradients
into its `LayerParams`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64
# Finite differences are evaluated at this precision to keep roundoff far
# below the tolerance even where a true gradient is close to zero.
REFERENCE_DTYPE = np.longdouble


class LayerParams:
    """Named parameters with their gradients and momentum velocities.

    Non-trainable state (batch-norm running statistics) lives in `buffers`
    and is excluded from gradients, updates and parameter counts.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.velocity: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.velocity[name] = np.zeros_like(value)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = value

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def reset_velocity(self) -> None:
        for v in self.velocity.values():
            v.fill(0)

    def astype(self, dtype) -> None:
        for store in (self.values, self.grads, self.velocity, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)

    def __len__(self):
        return len(self.values)

    def size(self) -> int:
        return sum(v.size for v in self.values.values())


class Layer:
    """Base class; subclasses implement `forward` and `backward`."""

    def __init__(self):
        self.params = LayerParams()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)

    def astype(self, dtype) -> "Layer":
        for p in _param_groups(self):
            p.astype(dtype)
        return self


# Attributes where layers keep forward activations for their backward pass.
_BUFFERS = ("_x", "_cache", "_shape", "_dlogits")


def release_buffers(root) -> None:
    """Drop the activations held for backward by `root` and every layer it contains."""
    stack, seen = [root], set()
    while stack:
        obj = stack.pop()
        if id(obj) in seen:
            continue
        seen.add(id(obj))
        for name in _BUFFERS:
            if getattr(obj, name, None) is not None:
                setattr(obj, name, None)
        for v in vars(obj).values():
            if isinstance(v, Layer):
                stack.append(v)
            elif isinstance(v, (list, tuple)):
                stack.extend(u for u in v if isinstance(u, Layer))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=TRAIN_DTYPE):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Convolution
#
# Each kernel tap (a, b) is applied to the whole input with one matrix
# product, Y_ab = W[:, :, a, b] @ x, and the output sums shifted slices of
# the Y_ab planes. The backward pass scatters the output gradient into the
# same shifted planes and needs two matrix products. Work scales with the
# output channel count rather than with an im2col of the input.


def _conv_geometry(h: int, w: int, kh: int, kw: int, mode: str, stride: int):
    if mode == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' convolution needs odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    elif mode == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown convolution mode {mode!r}")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    return ph, pw, ho, wo


def _tap_ranges(size_in: int, size_out: int, tap: int, pad: int, stride: int):
    """Output index range [lo, hi) and input slice for one kernel tap."""
    # smallest i with stride*i + tap - pad >= 0
    lo = max(0, -(-(pad - tap) // stride))
    hi = min(size_out, (size_in - 1 + pad - tap) // stride + 1)
    if hi <= lo:
        return None
    start = stride * lo + tap - pad
    return lo, hi, slice(start, start + stride * (hi - lo - 1) + 1, stride)


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, mode: str = "same", stride: int = 1) -> np.ndarray:
    """Cross-correlate `x` (n, c, h, w) with `kernels` (o, c, kh, kw)."""
    n, c, h, w = x.shape
    o, c2, kh, kw = kernels.shape
    if c != c2:
        raise ValueError(f"input has {c} channels, kernels expect {c2}")
    ph, pw, ho, wo = _conv_geometry(h, w, kh, kw, mode, stride)
    taps = kernels.transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
    planes = np.matmul(taps, x.reshape(n, c, h * w))
    if kh == kw == 1 and stride == 1:
        return planes.reshape(n, o, h, w)
    planes = planes.reshape(n, kh, kw, o, h, w)
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for a in range(kh):
        rows = _tap_ranges(h, ho, a, ph, stride)
        if rows is None:
            continue
        for b in range(kw):
            cols = _tap_ranges(w, wo, b, pw, stride)
            if cols is None:
                continue
            out[:, :, rows[0]:rows[1], cols[0]:cols[1]] += planes[:, a, b, :, rows[2], cols[2]]
    return out


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, grad: np.ndarray,
                    mode: str = "same", stride: int = 1):
    """Return (grad_input, grad_kernels) for `conv2d_forward`."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernels.shape
    ph, pw, ho, wo = _conv_geometry(h, w, kh, kw, mode, stride)
    if kh == kw == 1 and stride == 1:
        planes = grad.reshape(n, o, h * w)
    else:
        planes = np.zeros((n, kh, kw, o, h, w), dtype=grad.dtype)
        for a in range(kh):
            rows = _tap_ranges(h, ho, a, ph, stride)
            if rows is None:
                continue
            for b in range(kw):
                cols = _tap_ranges(w, wo, b, pw, stride)
                if cols is None:
                    continue
                planes[:, a, b, :, rows[2], cols[2]] = grad[:, :, rows[0]:rows[1], cols[0]:cols[1]]
        planes = planes.reshape(n, kh * kw * o, h * w)
    taps_t = np.ascontiguousarray(kernels.transpose(1, 2, 3, 0).reshape(c, kh * kw * o))
    dx = np.matmul(taps_t, planes).reshape(n, c, h, w)
    dtaps = np.matmul(planes, x.reshape(n, c, h * w).transpose(0, 2, 1)).sum(axis=0)
    dk = dtaps.reshape(kh, kw, o, c).transpose(2, 3, 0, 1)
    return dx, dk


def conv2d(x, kernels, mode="same", stride=1):
    return conv2d_forward(x, kernels, mode, stride)


class Conv2D(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, mode: str = "same",
                 stride: int = 1, rng: np.random.Generator | None = None, dtype=TRAIN_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mode, self.stride = mode, stride
        receptive = kernel * kernel
        self.params.add("weight", glorot_uniform(
            rng, (out_ch, in_ch, kernel, kernel), in_ch * receptive, out_ch * receptive, dtype))
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return conv2d_forward(x, self.params.values["weight"], self.mode, self.stride)

    def backward(self, grad):
        dx, dk = conv2d_backward(self._x, self.params.values["weight"], grad, self.mode, self.stride)
        self.params.grads["weight"] += dk
        return dx


# ---------------------------------------------------------------------------
# Batch normalization


class BatchNorm(Layer):
    """Per-channel batch normalization over (batch, height, width)."""

    def __init__(self, channels: int, epsilon: float = 1e-4, stat_momentum: float = 0.1,
                 dtype=TRAIN_DTYPE):
        super().__init__()
        self.epsilon = epsilon
        self.stat_momentum = stat_momentum
        self.params.add("gamma", np.ones(channels, dtype=dtype))
        self.params.add("beta", np.zeros(channels, dtype=dtype))
        self.params.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.params.add_buffer("running_var", np.ones(channels, dtype=dtype))
        self.params.add_buffer("tracked", np.zeros(1, dtype=dtype))
        self._cache = None

    @staticmethod
    def _bcast(v):
        return v.reshape(1, -1, 1, 1)

    def forward(self, x, train=False):
        p = self.params
        gamma, beta = p.values["gamma"], p.values["beta"]
        if train:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = np.einsum("nchw->c", x) / count
            centered = x - self._bcast(mean)
            var = np.einsum("nchw,nchw->c", centered, centered) / count
            inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.epsilon))
            m = x.dtype.type(self.stat_momentum)
            rm, rv = p.buffers["running_mean"], p.buffers["running_var"]
            rm *= 1 - m
            rm += m * mean
            rv *= 1 - m
            rv += m * var
            p.buffers["tracked"] += 1
        else:
            if p.buffers["tracked"][0] == 0:
                raise RuntimeError("batch norm used in inference mode before any running statistics were recorded")
            inv_std = 1.0 / np.sqrt(p.buffers["running_var"] + x.dtype.type(self.epsilon))
            centered = x - self._bcast(p.buffers["running_mean"])
        self._cache = (train, centered, inv_std)
        out = centered * self._bcast(gamma * inv_std)
        out += self._bcast(beta)
        return out

    def backward(self, grad):
        train, centered, inv_std = self._cache
        p = self.params
        gamma = p.values["gamma"]
        sum_g = np.einsum("nchw->c", grad)
        sum_gx = np.einsum("nchw,nchw->c", grad, centered) * inv_std
        p.grads["gamma"] += sum_gx
        p.grads["beta"] += sum_g
        scale = gamma * inv_std
        if not train:
            return grad * self._bcast(scale)
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        dx = grad * self._bcast(scale)
        dx -= self._bcast(scale * sum_g / count)
        dx -= centered * self._bcast(scale * inv_std * sum_gx / count)
        return dx


def batchnorm(x, params: LayerParams, mode="train", epsilon=1e-4, stat_momentum=0.1):
    """Functional batch norm over an existing `LayerParams` (gamma/beta/running stats)."""
    layer = BatchNorm(x.shape[1], epsilon, stat_momentum, dtype=x.dtype)
    layer.params = params
    return layer.forward(x, train=(mode == "train"))


# ---------------------------------------------------------------------------
# Activations and pooling


def relu_backward(x: np.ndarray, grad: np.ndarray, guided: bool = False) -> np.ndarray:
    gate = x > 0
    if guided:
        gate &= grad > 0
    return grad * gate


class ReLU(Layer):
    """Rectifier; `guided=True` switches the backward pass to guided backprop."""

    def __init__(self):
        super().__init__()
        self.guided = False
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return np.maximum(x, x.dtype.type(0))

    def backward(self, grad):
        return relu_backward(self._x, grad, self.guided)


def relu(x):
    return np.maximum(x, 0)


class MaxPool2x2(Layer):
    """Non-overlapping 2x2 max pooling; odd sizes get one zero row/column.

    Ties go to the first maximum in row-major order within the window.
    """

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, train=False):
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            x = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)))
        v00, v01 = x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]
        v10, v11 = x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]
        right_top = v01 > v00
        right_bottom = v11 > v10
        top = np.maximum(v00, v01)
        bottom = np.maximum(v10, v11)
        lower = bottom > top
        self._cache = (right_top, right_bottom, lower, (h, w), x.shape)
        return np.maximum(top, bottom)

    def backward(self, grad):
        right_top, right_bottom, lower, (h, w), padded = self._cache
        dx = np.empty(padded, dtype=grad.dtype)
        upper = ~lower
        dx[:, :, 0::2, 0::2] = grad * (upper & ~right_top)
        dx[:, :, 0::2, 1::2] = grad * (upper & right_top)
        dx[:, :, 1::2, 0::2] = grad * (lower & ~right_bottom)
        dx[:, :, 1::2, 1::2] = grad * (lower & right_bottom)
        return dx[:, :, :h, :w]


def maxpool2x2(x):
    return MaxPool2x2().forward(x)


class GlobalMeanPool(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        scale = grad.dtype.type(1.0 / (h * w))
        return np.broadcast_to((grad * scale)[:, :, None, None], self._shape).copy()


def global_mean_pool(x):
    return x.mean(axis=(2, 3))


# ---------------------------------------------------------------------------
# Output layer


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int = 2,
                 rng: np.random.Generator | None = None, dtype=TRAIN_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params.add("weight", glorot_uniform(rng, (in_features, out_features),
                                                 in_features, out_features, dtype))
        self.params.add("bias", np.zeros(out_features, dtype=dtype))
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params.values["weight"] + self.params.values["bias"]

    def backward(self, grad):
        self.params.grads["weight"] += self._x.T @ grad
        self.params.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params.values["weight"].T


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean categorical cross-entropy; returns (loss, probabilities, dlogits)."""
    loss, probs, dlogits = _xent(logits, labels)
    return float(loss), probs, dlogits


def _xent(logits, labels):
    # loss stays a numpy scalar of the logits' dtype
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row is required")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    probs = np.exp(log_probs)
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, probs, dlogits


def dense_softmax_xent(features: np.ndarray, params: LayerParams, labels):
    """Affine output layer followed by softmax cross-entropy.

    Returns (loss, probabilities). Gradients are accumulated into `params`.
    """
    w, b = params.values["weight"], params.values["bias"]
    if w.shape[1] != 2:
        raise ValueError("the output layer must have exactly two classes")
    logits = features @ w + b
    loss, probs, dlogits = softmax_cross_entropy(logits, labels)
    params.grads["weight"] += features.T @ dlogits
    params.grads["bias"] += dlogits.sum(axis=0)
    return loss, probs


class SoftmaxXentHead(Layer):
    """Dense output layer with a built-in cross-entropy loss for fixed labels.

    `forward` returns the scalar loss as a 0-d array, which lets the
    gradient checker treat the whole head like any other layer.
    """

    def __init__(self, in_features: int, labels, rng=None, dtype=TRAIN_DTYPE):
        super().__init__()
        self.dense = Dense(in_features, 2, rng, dtype)
        self.params = self.dense.params
        self.labels = np.asarray(labels)
        self._dlogits = None

    def forward(self, x, train=False):
        loss, self.probabilities, self._dlogits = _xent(self.dense.forward(x), self.labels)
        return np.asarray(loss)

    def backward(self, grad):
        return self.dense.backward(self._dlogits * grad)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        body = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"{'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g}): {body}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(layer, x: np.ndarray, tolerance: float = 1e-4, step: float = 1e-5,
                            max_elements: int = 10_000, seed: int = 0, train: bool = True,
                            grad_hook=None, max_refinements: int = 3) -> GradCheckReport:
    """Compare a layer's analytic gradients with central differences.

    The scalar objective is sum(R * layer(x)) for a fixed random R (or the
    output itself when the layer returns a scalar). Every input and
    trainable parameter element is probed, or a random subset of
    `max_elements` when a tensor is larger. `layer` needs `forward`,
    `backward`, `astype` and a `params` attribute (a `LayerParams` or an
    iterable of them). The analytic pass runs in 64-bit; the differences
    are taken on an extended-precision copy of the layer, each probe
    refined by factors of 10 (up to `max_refinements` times) until two
    successive estimates agree, so a step that crosses a kink is not
    mistaken for a wrong gradient. `grad_hook`, if
    given, is applied to each analytic gradient before comparison (used to
    verify the checker itself).
    """
    if x.dtype != CHECK_DTYPE:
        raise TypeError("gradient checks require 64-bit inputs")
    rng = np.random.default_rng(seed)

    probe = layer.forward(x, train)
    weights = np.ones_like(probe) if probe.ndim == 0 else rng.standard_normal(probe.shape)
    twin = copy.deepcopy(layer).astype(REFERENCE_DTYPE)
    x_ref = x.astype(REFERENCE_DTYPE)
    w_ref = weights.astype(REFERENCE_DTYPE)

    def output():
        return twin.forward(x_ref, train)

    groups = _param_groups(layer)
    for p in groups:
        p.zero_grad()
    layer.forward(x, train)
    analytic = {"input": layer.backward(weights.astype(x.dtype))}
    for gi, p in enumerate(groups):
        for name in p.values:
            analytic[f"{gi}.{name}"] = p.grads[name].copy()
    targets = {"input": x_ref}
    for gi, p in enumerate(_param_groups(twin)):
        for name, v in p.values.items():
            targets[f"{gi}.{name}"] = v

    report = GradCheckReport(tolerance=tolerance)
    for key, arr in targets.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_elements:
            idx = rng.choice(flat.size, max_elements, replace=False)
        numeric = np.empty(len(idx), dtype=REFERENCE_DTYPE)
        for j, i in enumerate(idx):

            def central(h):
                orig = flat[i]
                flat[i] = orig + h
                plus = output()
                flat[i] = orig - h
                minus = output()
                flat[i] = orig
                return np.sum(w_ref * (plus - minus)) / (2 * h)

            # A probe that straddles a ReLU or max-pool switch disagrees with
            # its own refinement; shrink the step until two estimates agree.
            h, est = step, central(step)
            for _ in range(max_refinements):
                h /= 10
                finer = central(h)
                agree = relative_error(np.float64(est), np.float64(finer)) < tolerance / 10
                est = finer
                if agree:
                    break
            numeric[j] = est
        ga = analytic[key].reshape(-1)[idx]
        if grad_hook is not None:
            ga = grad_hook(ga)
        report.errors[key] = float(relative_error(ga, numeric.astype(np.float64)).max()) if len(idx) else 0.0
    return report


def _param_groups(layer) -> list[LayerParams]:
    params = getattr(layer, "params", None)
    if params is None:
        return []
    if isinstance(params, LayerParams):
        return [params]
    return list(params)
