"""Conv / batch-norm / activation / max-pool layers with hand-written backward passes.

Inside the network tensors are channels-last numpy arrays ``[N, H, W, C]``,
which keeps im2col copies and per-channel reductions contiguous.  The
functional wrappers at the bottom accept and return NCHW.  Every layer keeps
the context of its last ``forward`` call and consumes it in ``backward``, which
returns the input gradient and stores parameter gradients in ``layer.grads``.
"""
from __future__ import annotations

import math

import numpy as np


class UsageError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


ACTIVATIONS = ("leaky_relu", "relu", "identity")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._ctx = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_ctx(self):
        if self._ctx is None:
            raise UsageError(f"{self.kind}.backward called without a retained forward context")
        ctx, self._ctx = self._ctx, None
        return ctx

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        return self

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(f'{k}={v.shape}' for k, v in self.params.items())})"


def activation_gain(kind: str, alpha: float = 0.1) -> float:
    if kind == "leaky_relu":
        return math.sqrt(2.0 / (1.0 + alpha * alpha))
    if kind == "relu":
        return math.sqrt(2.0)
    return 1.0


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """NHWC input -> ``[N*Ho*Wo, kh*kw*C]`` patches ordered (ki, kj, c)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if kh == kw == 1 and stride == 1:
        return np.ascontiguousarray(xp).reshape(n * ho * wo, c), ho, wo
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, gain: float = math.sqrt(2.0), dtype=np.float32):
        super().__init__()
        if padding is None:
            if kernel % 2 == 0:
                raise ShapeError("'same' padding needs an odd kernel")
            padding = (kernel - 1) // 2
        if stride < 1 or padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        self.stride, self.padding = stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * kernel * kernel
        # stored [Cout, Cin, Kh, Kw]
        self.params["weight"] = (rng.standard_normal((cout, cin, kernel, kernel)) * gain / math.sqrt(fan_in)).astype(dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.needs_input_grad = True

    def _wmat(self) -> np.ndarray:
        w = self.params["weight"]
        return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])

    def forward(self, x, train=False):
        w = self.params["weight"]
        cout, cin, kh, kw = w.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeError(f"conv expects [N,H,W,{cin}], got {list(x.shape)}")
        n, h, wd, _ = x.shape
        p, s = self.padding, self.stride
        if h + 2 * p < kh or wd + 2 * p < kw:
            raise ShapeError(f"input {h}x{wd} smaller than kernel {kh}x{kw} after padding")
        cols, ho, wo = im2col(x, kh, kw, s, p)
        out = cols @ self._wmat()
        out += self.params["bias"]
        self._ctx = (cols, x.shape, ho, wo)
        return out.reshape(n, ho, wo, cout)

    def backward(self, dy):
        cols, xshape, ho, wo = self._take_ctx()
        w = self.params["weight"]
        cout, cin, kh, kw = w.shape
        n, h, wd, _ = xshape
        dym = dy.reshape(-1, cout)
        self.grads["weight"] = (cols.T @ dym).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        self.grads["bias"] = dym.sum(axis=0)
        if not self.needs_input_grad:
            return None
        p, s = self.padding, self.stride
        dcols = (dym @ self._wmat().T).reshape(n, ho, wo, kh * kw, cin)
        if kh == kw == 1 and s == 1 and p == 0:
            return dcols.reshape(xshape)
        dxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=dym.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i * kw + j, :]
        return dxp[:, p:p + h, p:p + wd, :]


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be > 0")
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        c = self.params["gamma"].shape[0]
        if x.ndim != 4 or x.shape[3] != c:
            raise ShapeError(f"batchnorm expects [N,H,W,{c}], got {list(x.shape)}")
        flat = x.reshape(-1, c)
        m = flat.shape[0]
        if train:
            if m < 2:
                raise ShapeError("train-mode batchnorm needs N*H*W >= 2")
            # channel sums as gemv: far faster than ndarray.sum over axis 0
            ones = np.ones(m, dtype=x.dtype)
            mean = (ones @ flat) / m
            xc = flat - mean
            var = np.einsum("ij,ij->j", xc, xc) / m
            mom = self.momentum
            self.buffers["running_mean"] = ((1 - mom) * self.buffers["running_mean"] + mom * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - mom) * self.buffers["running_var"] + mom * var * m / (m - 1)).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
            xc = flat - mean
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        out = xc * (self.params["gamma"] * inv_std)
        out += self.params["beta"]
        self._ctx = (xc, inv_std, train, x.shape)
        return out.reshape(x.shape)

    def backward(self, dy):
        xc, inv_std, train, shape = self._take_ctx()
        c = shape[3]
        dyf = dy.reshape(-1, c)
        m = dyf.shape[0]
        k = self.params["gamma"] * inv_std
        self.grads["gamma"] = np.einsum("ij,ij->j", dyf, xc) * inv_std
        self.grads["beta"] = np.ones(m, dtype=dyf.dtype) @ dyf
        dx = dyf * k
        if train:
            # k * (dy - sum(dy)/m - xhat * sum(dy*xhat)/m), xhat = xc*inv_std
            dx -= xc * (k * inv_std * self.grads["gamma"] / m)
            dx -= k * self.grads["beta"] / m
        return dx.reshape(shape)


class Activation(Layer):
    """Elementwise activation.  ``inplace`` lets the layer overwrite its input
    and upstream gradient; the model builder enables it because those arrays
    are never reused."""

    kind = "activation"

    def __init__(self, name: str = "leaky_relu", alpha: float = 0.1, inplace: bool = False):
        super().__init__()
        if name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        if not 0 <= alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        self.name = name
        self.alpha = alpha if name == "leaky_relu" else 0.0
        self.inplace = inplace

    def forward(self, x, train=False):
        if self.name == "identity":
            self._ctx = (None,)
            return x if self.inplace else x.copy()
        out = x if self.inplace else None
        # branchless forms; masked ufuncs are an order of magnitude slower
        if self.name == "relu":
            out = np.maximum(x, 0, out=out)
        else:
            out = np.maximum(x, x * x.dtype.type(self.alpha), out=out)
        self._ctx = (out,)
        return out

    def backward(self, dy):
        (y,) = self._take_ctx()
        if y is None:
            return dy
        if self.name == "relu":
            slope = (y > 0).astype(dy.dtype)
        else:
            slope = (y < 0).astype(dy.dtype)
            slope *= dy.dtype.type(self.alpha - 1.0)
            slope += 1
        if self.inplace:
            dy *= slope
            return dy
        return dy * slope

    def __repr__(self):
        return f"Activation({self.name}, alpha={self.alpha})"


class MaxPool2d(Layer):
    """Max pooling; the stored argmax is the row-major index inside each window,
    first occurrence on ties."""

    kind = "maxpool"

    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        if window < 1 or stride < 1:
            raise ValueError("window and stride must be >= 1")
        self.window, self.stride = window, stride

    def forward(self, x, train=False):
        return self.forward_with_indices(x)[0]

    def _out_extent(self, h, w):
        k, s = self.window, self.stride
        if k == s and (h % s or w % s):
            raise ShapeError(f"maxpool {k}/{s} needs extents divisible by {s}, got {h}x{w}")
        if h < k or w < k:
            raise ShapeError(f"input {h}x{w} smaller than pooling window {k}")
        return (h - k) // s + 1, (w - k) // s + 1

    def forward_with_indices(self, x):
        n, h, w, c = x.shape
        k, s = self.window, self.stride
        ho, wo = self._out_extent(h, w)
        taps = [x[:, i:i + s * ho:s, j:j + s * wo:s, :] for i in range(k) for j in range(k)]
        y = taps[0].copy()
        for v in taps[1:]:
            np.maximum(y, v, out=y)
        # first tap equal to the max, built back to front without masked writes
        arg = np.zeros(y.shape, dtype=np.int16)
        for t in range(len(taps) - 1, 0, -1):
            arg += 1
            arg *= taps[t - 1] != y
        self._ctx = (arg, x.shape)
        return y, arg

    def backward(self, dy):
        arg, xshape = self._take_ctx()
        k, s = self.window, self.stride
        ho, wo = arg.shape[1], arg.shape[2]
        dx = np.zeros(xshape, dtype=dy.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            hit = dy * (arg == t)
            if k == s:
                dx[:, i:i + s * ho:s, j:j + s * wo:s, :] = hit
            else:
                dx[:, i:i + s * ho:s, j:j + s * wo:s, :] += hit
        return dx


# ---------------------------------------------------------------- functional wrappers

def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d_forward(x, layer: Conv2d):
    """NCHW convolution (cross-correlation, no kernel flip)."""
    return to_nchw(layer.forward(to_nhwc(x)))


def batchnorm_forward(x, layer: BatchNorm2d, mode: str = "train"):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return to_nchw(layer.forward(to_nhwc(x), train=mode == "train"))


def activation_forward(x, kind: str = "leaky_relu", alpha: float = 0.1):
    return Activation(kind, alpha).forward(np.asarray(x))


def maxpool_forward(x, layer: MaxPool2d | None = None):
    """NCHW max pooling; returns the pooled tensor and per-window argmax indices."""
    y, arg = (layer or MaxPool2d()).forward_with_indices(to_nhwc(x))
    return to_nchw(y), to_nchw(arg)


def layer_backward(layer: Layer, dy):
    """NCHW upstream gradient -> (input gradient, copy of parameter gradients)."""
    if layer.kind == "activation":
        dx = layer.backward(np.asarray(dy))
    else:
        dx = layer.backward(to_nhwc(dy))
        dx = None if dx is None else to_nchw(dx)
    return dx, dict(layer.grads)


# ---------------------------------------------------------------- gradient checks

def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(f, x: np.ndarray, step: float = 1e-5, proj: np.ndarray | None = None) -> np.ndarray:
    """Central differences w.r.t. ``x`` (perturbed in place).

    ``f()`` returns an array; with ``proj`` the output differences are
    projected onto it before dividing, which avoids cancellation in a
    pre-summed scalar.
    """
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        fp = np.array(f(), dtype=np.float64)
        x[idx] = old - step
        fm = np.array(f(), dtype=np.float64)
        x[idx] = old
        diff = fp - fm if proj is None else np.sum((fp - fm) * proj)
        g[idx] = diff / (2 * step)
    return g


def make_check_instance(kind: str, seed: int):
    """A small float64 layer plus an NHWC input that keeps every kink well separated."""
    rng = np.random.default_rng(seed)
    if kind == "conv":
        layer = Conv2d(2, 3, 3, rng=rng, dtype=np.float64)
        layer.params["bias"] = rng.standard_normal(3)
        x = rng.standard_normal((2, 5, 5, 2))
    elif kind == "batchnorm":
        layer = BatchNorm2d(3, dtype=np.float64)
        layer.params["gamma"] = rng.uniform(0.5, 1.5, 3)
        layer.params["beta"] = rng.standard_normal(3)
        x = rng.standard_normal((2, 4, 4, 3)) * 2 + 1
    elif kind in ACTIVATIONS:
        layer = Activation(kind, 0.1)
        x = rng.standard_normal((2, 3, 4, 4))
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
    elif kind == "maxpool":
        layer = MaxPool2d(2, 2)
        # distinct values spaced far beyond the FD step keep argmax stable
        x = rng.permutation(2 * 3 * 4 * 4).reshape(2, 4, 4, 3) * 0.01 + rng.uniform(0, 1e-3)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return layer, x


def grad_check(kind: str, seed: int = 7, step: float = 1e-5, train: bool = True) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    layer, x = make_check_instance(kind, seed)
    proj = np.random.default_rng(seed + 1000).standard_normal(layer.forward(x.copy(), train=train).shape)

    def out():
        return layer.forward(x, train=train)

    layer.forward(x, train=train)
    dx = layer.backward(proj.copy())
    analytic = {"input": dx, **{k: v.copy() for k, v in layer.grads.items()}}
    numeric = {"input": numeric_grad(out, x, step, proj)}
    for name, p in layer.params.items():
        numeric[name] = numeric_grad(out, p, step, proj)
    return max(_rel_err(analytic[k], numeric[k]) for k in numeric)
