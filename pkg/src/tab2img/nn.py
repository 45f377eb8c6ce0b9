"""Neural layers, losses, and the AdamW optimizer.

Everything operates on :class:`~tab2img.tensor.Tensor`. Convolution and
pooling also expose raw-array forward helpers (``*_forward``) so that
attribution code can replay layers without building a graph.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, ShapeError, TrainingDiverged
from .tensor import Tensor

# ---- initialization ----------------------------------------------------


def fan_in_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    """Default weight init: uniform in +-1/sqrt(d_in)."""
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out)).astype(np.float32)


# ---- modules -----------------------------------------------------------


class Module:
    """Minimal parameter container; submodules are discovered by attribute."""

    def parameters(self) -> list[Tensor]:
        params = []
        for value in vars(self).values():
            if isinstance(value, Tensor) and value.requires_grad:
                params.append(value)
            elif isinstance(value, Module):
                params.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        params.extend(item.parameters())
        return params

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_count(module_or_params) -> int:
    """Total number of trainable scalar parameters."""
    params = module_or_params.parameters() if isinstance(module_or_params, Module) else module_or_params
    return int(sum(p.data.size for p in params))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 weight: np.ndarray | None = None):
        self.d_in = d_in
        self.d_out = d_out
        w = weight if weight is not None else fan_in_uniform(rng, d_in, d_out)
        if w.shape != (d_in, d_out):
            raise ShapeError(f"weight shape {w.shape} != ({d_in}, {d_out})")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.data + self.bias.data


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias, broadcast over the leading batch dimension."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    return T.matmul(x, weight) + bias


# ---- convolution -------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    """(B,C,H,W) -> (B,OH,OW,C*kh*kw) patches at stride 1."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))     # (B,C,OH,OW,kh,kw)
    v = v.transpose(0, 2, 3, 1, 4, 5)                       # (B,OH,OW,C,kh,kw)
    b, oh, ow = v.shape[:3]
    return np.ascontiguousarray(v).reshape(b, oh, ow, -1)


def _col2im(dcol: np.ndarray, x_shape, kh: int, kw: int, padding: int) -> np.ndarray:
    """Scatter (B,OH,OW,C*kh*kw) patch gradients back onto the input."""
    b, c, h, w = x_shape
    oh, ow = dcol.shape[1], dcol.shape[2]
    dcol = dcol.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcol.dtype)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + oh, kx:kx + ow] += dcol[:, :, :, :, ky, kx]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                   padding: int = 1) -> np.ndarray:
    """Same-size 3x3 cross-correlation on (B,C,H,W) arrays."""
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d input channels {x.shape[1]} != kernel channels {c_in}")
    col = _im2col(x, kh, kw, padding)
    wmat = kernels.reshape(c_out, -1).T
    out = col @ wmat + bias
    return out.transpose(0, 3, 1, 2)


def conv2d_input_grad(g: np.ndarray, kernels: np.ndarray, x_shape,
                      padding: int = 1) -> np.ndarray:
    """Adjoint of conv2d_forward w.r.t. its input (used for multipliers too)."""
    c_out, c_in, kh, kw = kernels.shape
    wmat = kernels.reshape(c_out, -1).T
    dcol = g.transpose(0, 2, 3, 1) @ wmat.T
    return _col2im(dcol, x_shape, kh, kw, padding)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects (B,C,H,W), got {x.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"only 3x3 kernels are supported, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d input channels {x.shape[1]} != kernel channels {c_in}")

    col = _im2col(x.data, kh, kw, padding)
    wmat = kernels.data.reshape(c_out, -1).T
    data = (col @ wmat + bias.data).transpose(0, 3, 1, 2)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)                        # (B,OH,OW,C_out)
        if kernels.requires_grad:
            dw = col.reshape(-1, col.shape[-1]).T @ gt.reshape(-1, c_out)
            dw = dw.T.reshape(c_out, c_in, kh, kw)
            kernels._accumulate(dw.astype(kernels.dtype, copy=False))
        if bias.requires_grad:
            bias._accumulate(gt.sum(axis=(0, 1, 2)).astype(bias.dtype, copy=False))
        if x.requires_grad:
            dx = conv2d_input_grad(g, kernels.data, x.shape, padding)
            x._accumulate(dx.astype(x.dtype, copy=False))

    return T._make(data, (x, kernels, bias), backward)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, padding: int = 1):
        fan_in = c_in * 9
        bound = 1.0 / np.sqrt(fan_in)
        self.kernels = Tensor(
            rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)).astype(np.float32),
            requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernels, self.bias, self.padding)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return conv2d_forward(x, self.kernels.data, self.bias.data, self.padding)


# ---- pooling -----------------------------------------------------------


def _pool_views(x: np.ndarray):
    b, c, h, w = x.shape
    windows = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return windows.reshape(b, c, h // 2, w // 2, 4)


def maxpool2d_forward(x: np.ndarray) -> np.ndarray:
    return _pool_views(x).max(axis=-1)


def maxpool2d(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    flat = _pool_views(x.data)
    idx = flat.argmax(axis=-1)                   # first index wins on ties
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
            dx = dflat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate(dx.reshape(b, c, h, w))

    return T._make(data, (x,), backward)


# ---- dropout -----------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    mask = mask.astype(x.dtype)
    data = x.data * mask

    def backward(g):
        if x.requires_grad:
            x._accumulate((g * mask).astype(x.dtype, copy=False))

    return T._make(data, (x,), backward)


# ---- losses ------------------------------------------------------------


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log probability of the true class.

    ``probs`` rows must already be distributions; values are clamped at
    1e-12 before the log.
    """
    labels = np.asarray(labels)
    b, n = probs.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= n:
        from .errors import DataError
        raise DataError(f"label out of range [0, {n})")
    picked = probs.data[np.arange(b), labels]
    clamped = np.maximum(picked, 1e-12)
    data = np.asarray(-np.mean(np.log(clamped), dtype=np.float64), dtype=probs.dtype)

    def backward(g):
        if probs.requires_grad:
            dp = np.zeros_like(probs.data)
            live = picked > 1e-12
            rows = np.arange(b)[live]
            dp[rows, labels[live]] = -float(g) / (b * picked[live])
            probs._accumulate(dp)

    return T._make(data, (probs,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes disagree: {a.shape} vs {b.shape}")
    return ((a - b) ** 2).mean()


# ---- optimizer ---------------------------------------------------------


class AdamW:
    """Decoupled weight-decay Adam (the published update rule)."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient in parameter {i} at step {t}")
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
