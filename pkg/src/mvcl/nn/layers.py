"""Layers with hand-written backward passes.

Each layer caches what its backward pass needs during ``forward`` and fills
``grads`` (same keys as ``params``) during ``backward``. Inputs are NCHW for
the spatial layers and (batch, features) for the dense ones.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError, ShapeError


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __call__(self, x, train=True):
        return self.forward(x, train)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_ch, dtype=dtype)}

    def _windows(self, x):
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return xp.shape, win  # win: (B, C, Ho, Wo, k, k)

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"Conv2d expects (B, {self.in_ch}, H, W), got {x.shape}")
        B, C, H, W = x.shape
        Ho = conv_out(H, self.kernel, self.stride, self.padding)
        Wo = conv_out(W, self.kernel, self.stride, self.padding)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"input {H}x{W} too small for kernel {self.kernel}")
        xp_shape, win = self._windows(x)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, -1)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        out = cols @ wmat.T + self.params["bias"]
        self._cache = (x.shape, xp_shape, cols, Ho, Wo)
        return out.reshape(B, Ho, Wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        x_shape, xp_shape, cols, Ho, Wo = self._cache
        B, C, H, W = x_shape
        k, s, p = self.kernel, self.stride, self.padding
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        w = self.params["weight"]
        self.grads = {
            "weight": (dmat.T @ cols).reshape(w.shape),
            "bias": dmat.sum(axis=0),
        }
        dcols = (dmat @ w.reshape(self.out_ch, -1)).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + H, p:p + W] if p else dxp

    def __repr__(self):
        return f"Conv2d({self.in_ch}, {self.out_ch}, k={self.kernel}, s={self.stride}, p={self.padding})"


class MaxPool2d(Layer):
    def __init__(self, kernel=3, stride=2):
        super().__init__()
        self.kernel, self.stride = kernel, stride

    def forward(self, x, train=True):
        B, C, H, W = x.shape
        k, s = self.kernel, self.stride
        Ho, Wo = conv_out(H, k, s, 0), conv_out(W, k, s, 0)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"input {H}x{W} too small for max-pool kernel {k}")
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        flat = win.reshape(B, C, Ho, Wo, k * k)
        arg = flat.argmax(axis=-1)
        self._cache = (x.shape, arg, Ho, Wo)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        x_shape, arg, Ho, Wo = self._cache
        k, s = self.kernel, self.stride
        dx = np.zeros(x_shape, dtype=dout.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += np.where(arg == idx, dout, 0)
        return dx

    def __repr__(self):
        return f"MaxPool2d(k={self.kernel}, s={self.stride})"


def _adaptive_bins(n, out):
    return [(i * n // out, -((-(i + 1) * n) // out)) for i in range(out)]


class AdaptiveAvgPool2d(Layer):
    """Average over ``floor(i*n/out) .. ceil((i+1)*n/out)`` bins per axis."""

    def __init__(self, out_hw):
        super().__init__()
        self.out_hw = tuple(out_hw)

    def forward(self, x, train=True):
        B, C, H, W = x.shape
        oh, ow = self.out_hw
        self._cache = x.shape
        out = np.empty((B, C, oh, ow), dtype=x.dtype)
        for a, (h0, h1) in enumerate(_adaptive_bins(H, oh)):
            for b, (w0, w1) in enumerate(_adaptive_bins(W, ow)):
                out[:, :, a, b] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
        return out

    def backward(self, dout):
        B, C, H, W = self._cache
        oh, ow = self.out_hw
        dx = np.zeros(self._cache, dtype=dout.dtype)
        for a, (h0, h1) in enumerate(_adaptive_bins(H, oh)):
            for b, (w0, w1) in enumerate(_adaptive_bins(W, ow)):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += (dout[:, :, a, b] / area)[:, :, None, None]
        return dx

    def __repr__(self):
        return f"AdaptiveAvgPool2d({self.out_hw})"


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return np.where(self._mask, dout, 0).astype(dout.dtype, copy=False)


class Flatten(Layer):
    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(n_out, dtype=dtype)}

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"Linear expects (B, {self.n_in}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout):
        self.grads = {"weight": dout.T @ self._x, "bias": dout.sum(axis=0)}
        return dout @ self.params["weight"]

    def __repr__(self):
        return f"Linear({self.n_in}, {self.n_out})"


class BatchNorm1d(Layer):
    """Batch statistics in training mode, running statistics in evaluation mode."""

    def __init__(self, n, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.n, self.eps, self.momentum = n, eps, momentum
        self.params = {"weight": np.ones(n, dtype=dtype), "bias": np.zeros(n, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(n, dtype=dtype), "running_var": np.ones(n, dtype=dtype)}
        self.track_running_stats = True

    def forward(self, x, train=True):
        g, b = self.params["weight"], self.params["bias"]
        if train:
            if x.shape[0] < 2:
                raise ShapeError("BatchNorm1d in training mode needs a batch of at least 2")
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            if self.track_running_stats:
                m = self.momentum
                n = x.shape[0]
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                rm[...] = (1 - m) * rm + m * mu
                rv[...] = (1 - m) * rv + m * var * n / (n - 1)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu) * inv
            self._cache = ("train", xhat, inv)
        else:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self.buffers["running_mean"]) * inv
            self._cache = ("eval", xhat, inv)
        return (xhat * g + b).astype(x.dtype, copy=False)

    def backward(self, dout):
        mode, xhat, inv = self._cache
        g = self.params["weight"]
        self.grads = {"weight": (dout * xhat).sum(axis=0), "bias": dout.sum(axis=0)}
        dxhat = dout * g
        if mode == "eval":
            return dxhat * inv
        n = dout.shape[0]
        return inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))

    def __repr__(self):
        return f"BatchNorm1d({self.n})"


class L2Normalize(Layer):
    """Row-wise unit normalization; rows with norm below ``eps`` map to zero.

    ``degenerate`` holds the boolean mask of such rows after each forward.
    """

    def __init__(self, eps=1e-12):
        super().__init__()
        self.eps = eps
        self.degenerate = None

    def forward(self, x, train=True):
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite input to L2 normalization")
        norm = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
        self.degenerate = norm[:, 0] < self.eps
        safe = np.where(self.degenerate[:, None], 1.0, norm)
        z = np.where(self.degenerate[:, None], 0.0, x / safe).astype(x.dtype)
        self._cache = (z, safe)
        return z

    def backward(self, dout):
        z, norm = self._cache
        dx = (dout - z * (dout * z).sum(axis=1, keepdims=True)) / norm
        dx[self.degenerate] = 0
        return dx.astype(dout.dtype, copy=False)


class Sequential(Layer):
    def __init__(self, named_layers):
        super().__init__()
        self.layers = list(named_layers)

    def forward(self, x, train=True):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_layers(self):
        return list(self.layers)

    def named_parameters(self, prefix=""):
        for name, layer in self.layers:
            for k, v in layer.params.items():
                yield f"{prefix}{name}.{k}", v

    def named_grads(self, prefix=""):
        for name, layer in self.layers:
            for k in layer.params:
                yield f"{prefix}{name}.{k}", layer.grads.get(k)

    def named_buffers(self, prefix=""):
        for name, layer in self.layers:
            for k, v in layer.buffers.items():
                yield f"{prefix}{name}.{k}", v

    def zero_grad(self):
        for _, layer in self.layers:
            layer.zero_grad()

    def __repr__(self):
        inner = "\n".join(f"  ({n}): {layer!r}" for n, layer in self.layers)
        return f"Sequential(\n{inner}\n)"
