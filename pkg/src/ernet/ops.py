"""Layer operators: forward passes and exact hand-derived backward passes.

Every operator comes as a ``*_forward`` / ``*_backward`` pair. Forward
returns ``(output, cache)``; backward consumes the upstream gradient plus
that cache and returns a :class:`GradBundle`. Convolution is
cross-correlation (no kernel flip). Only stride 1 is supported: all
downsampling in the model family happens through 2x2 max pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArgumentError, ShapeError


@dataclass
class ConvParams:
    """Regular or 1x1 convolution parameters, weights (kh, kw, in_ch, out_ch)."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "same"


@dataclass
class DepthwiseParams:
    """Per-channel spatial filter, weights (kh, kw, ch); bias optional."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: str = "same"


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5


@dataclass
class GradBundle:
    """Gradient w.r.t. an operator's input plus its named parameters."""

    d_input: np.ndarray
    d_params: dict


def _check_4d(x: np.ndarray, who: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{who} expects a (batch, h, w, ch) tensor, got {x.shape}")


def _check_conv_args(kh: int, kw: int, stride: int, padding: str) -> None:
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride != 1:
        raise ArgumentError("only stride 1 is supported; downsample with maxpool2")
    if padding not in ("same", "valid"):
        raise ArgumentError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pad_for(x: np.ndarray, kh: int, kw: int, padding: str) -> np.ndarray:
    if padding == "valid" or (kh == 1 and kw == 1):
        return x
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Gather kh*kw taps into the trailing axis: (B, Ho, Wo, kh*kw*C).

    The copy runs through a sliding-window view so the gather stays cache
    local; writing tap slices directly is several times slower.
    """
    b = xp.shape[0]
    c = xp.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, kh * kw * c)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, p: ConvParams):
    _check_4d(x, "conv2d")
    kh, kw, cin, cout = p.weights.shape
    _check_conv_args(kh, kw, p.stride, p.padding)
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d input has {x.shape[3]} channels, weights expect {cin}")
    if p.bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {p.bias.shape}")
    xp = _pad_for(x, kh, kw, p.padding)
    b, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp)  # 1x1 taps are the input itself
    else:
        cols = _im2col(xp, kh, kw)
    y = cols.reshape(-1, kh * kw * cin) @ p.weights.reshape(kh * kw * cin, cout)
    y += p.bias
    y = y.reshape(b, ho, wo, cout)
    cache = (x, p, (ho, wo))
    return y, cache


def conv2d_backward(upstream: np.ndarray, cache) -> GradBundle:
    x, p, (ho, wo) = cache
    kh, kw, cin, cout = p.weights.shape
    if upstream.shape != (x.shape[0], ho, wo, cout):
        raise ShapeError(
            f"upstream shape {upstream.shape} != forward output {(x.shape[0], ho, wo, cout)}"
        )
    up2 = upstream.reshape(-1, cout)
    db = up2.sum(axis=0)
    if kh == 1 and kw == 1:
        x2 = np.ascontiguousarray(x).reshape(-1, cin)
        dw = (x2.T @ up2).reshape(p.weights.shape)
        dx = (up2 @ p.weights.reshape(cin, cout).T).reshape(x.shape)
        return GradBundle(d_input=dx, d_params={"weights": dw, "bias": db})
    xp = _pad_for(x, kh, kw, p.padding)
    cols = _im2col(xp, kh, kw)
    dw = (cols.reshape(-1, kh * kw * cin).T @ up2).reshape(p.weights.shape)
    dcols = (up2 @ p.weights.reshape(kh * kw * cin, cout).T).reshape(
        x.shape[0], ho, wo, kh * kw * cin
    )
    dxp = np.zeros_like(xp)
    t = 0
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo, :] += dcols[..., t * cin:(t + 1) * cin]
            t += 1
    if p.padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        dx = dxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2], :]
    else:
        dx = dxp
    return GradBundle(d_input=dx, d_params={"weights": dw, "bias": db})


# ---------------------------------------------------------------------------
# depthwise / separable convolution
# ---------------------------------------------------------------------------

def depthwise_forward(x: np.ndarray, p: DepthwiseParams):
    _check_4d(x, "depthwise_conv")
    kh, kw, ch = p.weights.shape
    _check_conv_args(kh, kw, p.stride, p.padding)
    if x.shape[3] != ch:
        raise ShapeError(f"depthwise input has {x.shape[3]} channels, weights expect {ch}")
    xp = _pad_for(x, kh, kw, p.padding)
    b, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    y = np.zeros((b, ho, wo, ch), dtype=x.dtype)
    tmp = np.empty_like(y)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, i:i + ho, j:j + wo, :], p.weights[i, j], out=tmp)
            y += tmp
    if p.bias is not None:
        y += p.bias
    cache = (x, p, (ho, wo))
    return y, cache


def depthwise_backward(upstream: np.ndarray, cache) -> GradBundle:
    x, p, (ho, wo) = cache
    kh, kw, ch = p.weights.shape
    if upstream.shape != (x.shape[0], ho, wo, ch):
        raise ShapeError(
            f"upstream shape {upstream.shape} != forward output {(x.shape[0], ho, wo, ch)}"
        )
    xp = _pad_for(x, kh, kw, p.padding)
    dw = np.zeros_like(p.weights)
    dxp = np.zeros_like(xp)
    tmp = np.empty_like(upstream)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + ho, j:j + wo, :]
            dw[i, j] = np.einsum("bhwc,bhwc->c", patch, upstream)
            np.multiply(upstream, p.weights[i, j], out=tmp)
            dxp[:, i:i + ho, j:j + wo, :] += tmp
    if p.padding == "same" and (kh > 1 or kw > 1):
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        dx = dxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2], :]
    else:
        dx = dxp
    d_params = {"weights": dw}
    if p.bias is not None:
        d_params["bias"] = np.sum(upstream, axis=(0, 1, 2))
    return GradBundle(d_input=dx, d_params=d_params)


def separable_forward(x: np.ndarray, dw: DepthwiseParams, pw: ConvParams):
    """Depthwise spatial filter followed by a 1x1 channel-mixing conv."""
    if pw.weights.shape[0] != 1 or pw.weights.shape[1] != 1:
        raise ShapeError("separable pointwise stage must use a 1x1 kernel")
    if pw.weights.shape[2] != dw.weights.shape[2]:
        raise ShapeError(
            f"pointwise in_ch {pw.weights.shape[2]} != depthwise channels {dw.weights.shape[2]}"
        )
    mid, dw_cache = depthwise_forward(x, dw)
    y, pw_cache = conv2d_forward(mid, pw)
    return y, (dw_cache, pw_cache)


def separable_backward(upstream: np.ndarray, cache) -> GradBundle:
    dw_cache, pw_cache = cache
    pw_bundle = conv2d_backward(upstream, pw_cache)
    dw_bundle = depthwise_backward(pw_bundle.d_input, dw_cache)
    d_params = {
        "dw_weights": dw_bundle.d_params["weights"],
        "pw_weights": pw_bundle.d_params["weights"],
        "pw_bias": pw_bundle.d_params["bias"],
    }
    if "bias" in dw_bundle.d_params:
        d_params["dw_bias"] = dw_bundle.d_params["bias"]
    return GradBundle(d_input=dw_bundle.d_input, d_params=d_params)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_taps(x: np.ndarray, ho: int, wo: int):
    """The four window positions as strided views, in row-major scan order."""
    return (
        x[:, 0:2 * ho:2, 0:2 * wo:2, :],
        x[:, 0:2 * ho:2, 1:2 * wo:2, :],
        x[:, 1:2 * ho:2, 0:2 * wo:2, :],
        x[:, 1:2 * ho:2, 1:2 * wo:2, :],
    )


def maxpool2_forward(x: np.ndarray):
    """2x2 max pool, stride 2; odd trailing row/column is dropped."""
    _check_4d(x, "maxpool2")
    b, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs spatial extents >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    t0, t1, t2, t3 = _pool_taps(x, ho, wo)
    y = np.maximum(np.maximum(t0, t1), np.maximum(t2, t3))
    # ties resolve to the first window position in scan order
    idx = np.where(t0 == y, np.int8(0),
                   np.where(t1 == y, np.int8(1),
                            np.where(t2 == y, np.int8(2), np.int8(3))))
    return y, (x.shape, idx)


def maxpool2_backward(upstream: np.ndarray, cache) -> GradBundle:
    (b, h, w, c), idx = cache
    ho, wo = h // 2, w // 2
    if upstream.shape != (b, ho, wo, c):
        raise ShapeError(f"upstream shape {upstream.shape} != pooled shape {(b, ho, wo, c)}")
    dx = np.zeros((b, h, w, c), dtype=upstream.dtype)
    for k, tap in enumerate(_pool_taps(dx, ho, wo)):
        tap += upstream * (idx == k)
    return GradBundle(d_input=dx, d_params={})


def global_avg_pool_forward(x: np.ndarray):
    _check_4d(x, "global_avg_pool")
    y = x.mean(axis=(1, 2), keepdims=True)
    return y, x.shape


def global_avg_pool_backward(upstream: np.ndarray, cache) -> GradBundle:
    shape = cache
    if upstream.shape != (shape[0], 1, 1, shape[3]):
        raise ShapeError(f"upstream shape {upstream.shape} != {(shape[0], 1, 1, shape[3])}")
    area = shape[1] * shape[2]
    dx = np.broadcast_to(upstream / area, shape).astype(upstream.dtype, copy=True)
    return GradBundle(d_input=dx, d_params={})


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def batch_norm_forward(x: np.ndarray, p: BatchNormParams, phase: str):
    _check_4d(x, "batch_norm")
    ch = x.shape[3]
    if p.scale.shape != (ch,):
        raise ShapeError(f"batch_norm params sized {p.scale.shape}, input has {ch} channels")
    if x.shape[0] < 1:
        raise ArgumentError("batch_norm requires a non-empty batch")
    if phase not in ("train", "infer"):
        raise ArgumentError(f"phase must be 'train' or 'infer', got {phase!r}")
    if phase == "train":
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = x - mean
        xhat *= inv_std
        # running stats updated in place; only the designated trainer does this
        p.running_mean[:] = p.momentum * p.running_mean + (1.0 - p.momentum) * mean
        p.running_var[:] = p.momentum * p.running_var + (1.0 - p.momentum) * var
        y = xhat * p.scale
        y += p.shift
        return y, (phase, xhat, inv_std, p.scale)
    # infer folds to one per-channel affine map; xhat is rebuilt on demand
    inv_std = (1.0 / np.sqrt(p.running_var + p.epsilon)).astype(x.dtype)
    a = p.scale * inv_std
    y = x * a
    y += p.shift - p.running_mean * a
    return y, (phase, x, inv_std, p.scale, p.running_mean)


def batch_norm_backward(upstream: np.ndarray, cache) -> GradBundle:
    phase = cache[0]
    if upstream.shape != cache[1].shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {cache[1].shape}")
    if phase == "infer":
        _, x, inv_std, scale, mean = cache
        xhat = (x - mean) * inv_std
        d_scale = np.einsum("bhwc,bhwc->c", upstream, xhat)
        d_shift = np.sum(upstream, axis=(0, 1, 2))
        dx = upstream * (scale * inv_std)
        return GradBundle(d_input=dx, d_params={"scale": d_scale, "shift": d_shift})
    _, xhat, inv_std, scale = cache
    d_scale = np.einsum("bhwc,bhwc->c", upstream, xhat)
    d_shift = np.sum(upstream, axis=(0, 1, 2))
    m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    # full train-phase gradient: normalization statistics depend on x
    dx = upstream * scale
    dx -= dx.mean(axis=(0, 1, 2))
    dx -= xhat * (d_scale * (scale / m))
    dx *= inv_std
    return GradBundle(d_input=dx, d_params={"scale": d_scale, "shift": d_shift})


# ---------------------------------------------------------------------------
# activations, dense, dropout
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), (x > 0)


def relu_backward(upstream: np.ndarray, cache) -> GradBundle:
    mask = cache
    if upstream.shape != mask.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {mask.shape}")
    return GradBundle(d_input=upstream * mask, d_params={})


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    if x.ndim != 2:
        raise ShapeError(f"dense expects (batch, features), got {x.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input has {x.shape[1]} features, weights expect {weights.shape[0]}")
    y = x @ weights + bias
    return y, (x, weights)


def dense_backward(upstream: np.ndarray, cache) -> GradBundle:
    x, weights = cache
    if upstream.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"upstream shape {upstream.shape} != {(x.shape[0], weights.shape[1])}")
    return GradBundle(
        d_input=upstream @ weights.T,
        d_params={"weights": x.T @ upstream, "bias": upstream.sum(axis=0)},
    )


def dropout_forward(x: np.ndarray, rate: float, phase: str, rng):
    """Inverted dropout: survivors scaled by 1/(1-rate); identity at infer."""
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if phase == "infer" or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    return x * mask * scale, (mask, scale)


def dropout_backward(upstream: np.ndarray, cache) -> GradBundle:
    if cache is None:
        return GradBundle(d_input=upstream, d_params={})
    mask, scale = cache
    return GradBundle(d_input=upstream * mask * scale, d_params={})


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy_forward(logits: np.ndarray, labels: np.ndarray):
    """Stable softmax + mean cross-entropy. Returns (loss, probs, cache)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    if labels.shape != logits.shape:
        raise ShapeError(f"labels shape {labels.shape} != logits shape {logits.shape}")
    row_sums = labels.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-5):
        raise ArgumentError("label rows must sum to 1 (one-hot or soft labels)")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    loss = float(-(labels * log_probs).sum() / logits.shape[0])
    return loss, probs, (probs, labels)


def softmax_cross_entropy_backward(cache) -> np.ndarray:
    probs, labels = cache
    return (probs - labels) / probs.shape[0]


# ---------------------------------------------------------------------------
# residual merge
# ---------------------------------------------------------------------------

def residual_merge_forward(block_in: np.ndarray, block_out: np.ndarray,
                           proj: Optional[ConvParams] = None):
    """out = block_out + block_in, with an optional 1x1 projection of block_in."""
    if block_in.shape[:3] != block_out.shape[:3]:
        raise ShapeError(
            f"residual spatial extents differ: {block_in.shape} vs {block_out.shape}"
        )
    if proj is None:
        if block_in.shape[3] != block_out.shape[3]:
            raise ShapeError(
                f"residual channels differ ({block_in.shape[3]} vs {block_out.shape[3]}) "
                "and no projection was given"
            )
        return block_out + block_in, None
    if proj.weights.shape[3] != block_out.shape[3]:
        raise ShapeError(
            f"projection emits {proj.weights.shape[3]} channels, block output has {block_out.shape[3]}"
        )
    shortcut, proj_cache = conv2d_forward(block_in, proj)
    shortcut += block_out  # the conv output is locally owned, safe to reuse
    return shortcut, proj_cache


def residual_merge_backward(upstream: np.ndarray, cache) -> GradBundle:
    """Gradient w.r.t. block_in; d(block_out) is `upstream` itself (identity add)."""
    if cache is None:
        return GradBundle(d_input=upstream, d_params={})
    proj_bundle = conv2d_backward(upstream, cache)
    return GradBundle(
        d_input=proj_bundle.d_input,
        d_params={"proj_weights": proj_bundle.d_params["weights"],
                  "proj_bias": proj_bundle.d_params["bias"]},
    )
