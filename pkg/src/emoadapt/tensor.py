"""Layer primitives with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` in NCHW layout. Every forward function
returns ``(output, cache)`` and the matching ``*_backward`` consumes the
upstream gradient plus that cache. float32 is the production dtype; the
gradient checks run everything in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

_DEBUG = False


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Raise :class:`NumericError` as soon as any op produces NaN/Inf."""
    global _DEBUG
    previous, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = previous


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")
    return arr


def _out(arr: np.ndarray, where: str) -> np.ndarray:
    return check_finite(arr, where) if _DEBUG else arr


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvCache:
    x_shape: tuple
    cols: np.ndarray  # (C*kh*kw, N*H'*W') im2col matrix of the padded input
    kernel: np.ndarray
    stride: int
    pad: int
    out_hw: tuple


def _pad_amount(k: int, padding: str) -> int:
    if padding == "same":
        return k // 2
    if padding == "none":
        return 0
    raise ValueError(f"unknown padding mode {padding!r}")


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: str = "same"):
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (O,C,kh,kw).

    ``same`` pads ``k // 2`` zeros on every side, which yields
    ``H' = ceil(H / stride)`` for the 1x1 and 3x3 kernels used here.
    Computed as a single matrix product over a channel-major im2col buffer.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if h == 0 or w == 0 or n == 0:
        raise ShapeError("conv2d on empty spatial dims")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    pad = _pad_amount(kh, padding)
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError("conv2d input smaller than kernel")
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = kernel.reshape(o, -1) @ cols
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    return _out(out, "conv2d"), ConvCache(x.shape, cols, kernel, stride, pad, (ho, wo))


def conv2d_backward(dout: np.ndarray, cache: ConvCache):
    """Return ``(grad_input, grad_kernel)``."""
    n, c, h, w = cache.x_shape
    kernel = cache.kernel
    o, _, kh, kw = kernel.shape
    ho, wo = cache.out_hw
    if dout.shape != (n, o, ho, wo):
        raise ShapeError(f"conv2d_backward: upstream grad has shape {dout.shape}")
    s, pad = cache.stride, cache.pad
    d = dout.transpose(1, 0, 2, 3).reshape(o, -1)
    dkernel = (d @ cache.cols.T).reshape(kernel.shape)
    dcols = (kernel.reshape(o, -1).T @ d).reshape(c, kh, kw, n, ho, wo)
    dxt = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j]
    dx = dxt[:, :, pad : pad + h, pad : pad + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dkernel


# --------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum_stats: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, epsilon: float = 1e-5, momentum_stats: float = 0.1):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            epsilon=epsilon,
            momentum_stats=momentum_stats,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mask: np.ndarray | None
    count: int
    train: bool


def batchnorm(x: np.ndarray, state: BatchNormState, mode: str = "train", mask: np.ndarray | None = None):
    """Per-channel batch normalisation of an (N,C,H,W) or (N,C) array.

    ``mask`` (broadcastable to ``x``, 1 = valid) restricts the batch statistics
    to valid positions and zeroes the output elsewhere. Running statistics are
    updated in place in train mode.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None, None]
        if mask is not None:
            mask = mask.reshape(mask.shape[0], 1, 1, 1)
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm channel mismatch: {x.shape[1]} vs {state.channels}")
    if x.size == 0:
        raise ShapeError("batchnorm on zero-size batch")
    c = state.channels
    shape = (1, c, 1, 1)
    if mode == "train":
        if mask is None:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = ((x - mean.reshape(shape)) ** 2).mean(axis=(0, 2, 3))
        else:
            m = np.broadcast_to(mask, (x.shape[0], 1, x.shape[2], x.shape[3]))
            count = int(m.sum())
            if count == 0:
                raise ShapeError("batchnorm: no valid positions")
            mean = (x * m).sum(axis=(0, 2, 3)) / count
            var = (((x - mean.reshape(shape)) * m) ** 2).sum(axis=(0, 2, 3)) / count
        mom = state.momentum_stats
        unbiased = var * (count / (count - 1)) if count > 1 else var
        state.running_mean *= 1 - mom
        state.running_mean += (mom * mean).astype(state.running_mean.dtype)
        state.running_var *= 1 - mom
        state.running_var += (mom * unbiased).astype(state.running_var.dtype)
        train = True
    elif mode == "eval":
        mean, var = state.running_mean.astype(x.dtype), state.running_var.astype(x.dtype)
        count = 0
        train = False
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype)
    xhat = (x - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * state.gamma.reshape(shape).astype(x.dtype) + state.beta.reshape(shape).astype(x.dtype)
    if mask is not None:
        out = out * mask
        xhat = xhat * mask
    if squeeze:
        out = out[:, :, 0, 0]
    return _out(out, "batchnorm"), BNCache(xhat, inv_std, state.gamma, mask, count, train)


def batchnorm_backward(dout: np.ndarray, cache: BNCache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    squeeze = dout.ndim == 2
    if squeeze:
        dout = dout[:, :, None, None]
    mask = cache.mask
    if mask is not None:
        dout = dout * mask
    c = cache.gamma.shape[0]
    shape = (1, c, 1, 1)
    xhat = cache.xhat
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    gamma = cache.gamma.reshape(shape).astype(dout.dtype)
    if cache.train:
        dxhat = dout * gamma
        m = cache.count
        dx = (cache.inv_std.reshape(shape) / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
        )
        if mask is not None:
            dx = dx * mask
    else:
        dx = dout * gamma * cache.inv_std.reshape(shape)
    if squeeze:
        dx = dx[:, :, 0, 0]
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# pointwise, pooling, dense


def relu(x: np.ndarray):
    out = np.maximum(x, 0)
    return out, x > 0


def relu_backward(dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
    return dout * cache


def avgpool2d(x: np.ndarray, patch: int = 2, stride: int = 2):
    """Average pooling in ceil mode; partial windows are zero padded, divisor stays ``patch**2``."""
    if patch != 2 or stride != 2:
        raise ValueError("only 2x2 / stride 2 pooling is supported")
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    xp = np.pad(x, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)))
    out = xp.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))
    return out, x.shape


def avgpool2d_backward(dout: np.ndarray, x_shape: tuple) -> np.ndarray:
    n, c, h, w = x_shape
    dx = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0
    return np.ascontiguousarray(dx[:, :, :h, :w])


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """``x @ weights + bias`` with ``weights`` shaped (D_in, D_out)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weights {weights.shape}")
    return _out(x @ weights + bias, "dense"), (x, weights)


def dense_backward(dout: np.ndarray, cache):
    x, weights = cache
    return dout @ weights.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("softmax_xent: one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad


# --------------------------------------------------------------------------
# attention pooling


@dataclass
class AttentionCache:
    z: np.ndarray  # N,H,W,C
    u: np.ndarray  # tanh activations
    weights: np.ndarray  # N,H,W
    valid: np.ndarray  # N,1,W boolean
    params: dict = field(repr=False)


def attention_pool(x: np.ndarray, lengths, params: dict):
    """Weighted sum over valid time-frequency cells.

    Cell score = ``v . tanh(W z + b)`` where ``z`` is the cell's channel
    vector. Softmax runs over cells with ``t < lengths[i]`` only.
    """
    n, c, h, w = x.shape
    lengths = np.asarray(lengths)
    if lengths.shape != (n,):
        raise ShapeError("attention_pool: one length per sample required")
    if np.any(lengths <= 0):
        raise ValueError("attention_pool: lengths must be positive")
    if np.any(lengths > w):
        raise ValueError("attention_pool: length exceeds feature width")
    W, b, v = params["W"], params["b"], params["v"]
    if W.shape != (c, c):
        raise ShapeError(f"attention_pool: W has shape {W.shape}, expected {(c, c)}")
    z = x.transpose(0, 2, 3, 1)
    u = np.tanh(z @ W.T + b)
    scores = u @ v
    valid = np.arange(w)[None, None, :] < lengths[:, None, None]
    scores = np.where(valid, scores, -np.inf)
    flat = scores.reshape(n, -1)
    flat = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(flat)
    a = (e / e.sum(axis=1, keepdims=True)).reshape(n, h, w)
    out = np.einsum("nhw,nhwc->nc", a, z)
    return _out(out, "attention_pool"), AttentionCache(z, u, a, valid, params)


def attention_pool_backward(dout: np.ndarray, cache: AttentionCache):
    """Return ``(grad_input, {"W": .., "b": .., "v": ..})``."""
    z, u, a = cache.z, cache.u, cache.weights
    W, v = cache.params["W"], cache.params["v"]
    dz = a[..., None] * dout[:, None, None, :]
    da = np.einsum("nhwc,nc->nhw", z, dout)
    ds = a * (da - (a * da).sum(axis=(1, 2), keepdims=True))
    ds = np.where(cache.valid, ds, 0.0)
    dv = np.einsum("nhw,nhwc->c", ds, u)
    dpre = ds[..., None] * v * (1 - u * u)
    dW = np.einsum("nhwc,nhwd->cd", dpre, z)
    db = dpre.sum(axis=(0, 1, 2))
    dz = dz + dpre @ W
    return np.ascontiguousarray(dz.transpose(0, 3, 1, 2)), {"W": dW, "b": db, "v": dv}


# --------------------------------------------------------------------------
# optimiser


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
                      weight_decay_factor: float = 0.0) -> None:
    """In-place ``v <- momentum*v - lr*g``; ``p <- p + v`` for every key in ``grads``.

    ``weight_decay_factor`` adds an L2 term ``wd * p`` to the gradient (0 disables it).
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if weight_decay_factor:
            g = g + weight_decay_factor * p
        vel = velocity.get(name)
        if vel is None:
            vel = velocity[name] = np.zeros_like(p)
        vel *= momentum
        vel -= (lr * g).astype(vel.dtype)
        p += vel
