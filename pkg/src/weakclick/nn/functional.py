"""Layer-level differentiable ops: convolutions, activations, losses.

All sequence ops take ``(batch, time, channels)`` arrays and all image ops
``(batch, height, width, channels)``.  Convolution weights keep the usual
``(out_channels, in_channels, *kernel)`` shape so parameter counts read the
same as in any framework.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, accumulate, concat, make, reshape  # noqa: F401  (re-exported)

_kink_log: list | None = None


class record_kinks:
    """Collect the sign pattern of every ReLU input evaluated inside the block.

    Used by the finite-difference harness to drop coordinates whose
    perturbation crosses a non-differentiable point.
    """

    def __enter__(self):
        global _kink_log
        self._prev = _kink_log
        _kink_log = self.patterns = []
        return self

    def __exit__(self, *exc):
        global _kink_log
        _kink_log = self._prev


def relu(x: Tensor) -> Tensor:
    if _kink_log is not None:
        _kink_log.append(np.packbits(x.data > 0))
    mask = x.data > 0

    def backward(g):
        accumulate(x, g * mask)

    return make(x.data * mask, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        accumulate(x, g * out * (1.0 - out))

    return make(out, (x,), backward, "sigmoid")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            accumulate(x, g @ weight.data)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            accumulate(weight, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return make(out, parents, backward, "linear")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        accumulate(x, g * keep)

    return make(x.data * keep, (x,), backward, "dropout")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        accumulate(x, g - soft * g.sum(axis=axis, keepdims=True))

    return make(out, (x,), backward, "log_softmax")


def nll_loss(log_probs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``log_probs``."""
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.ndim != 2 or targets.shape != (log_probs.shape[0],):
        raise ValueError(f"nll_loss: log_probs {log_probs.shape} vs targets {targets.shape}")
    batch = np.arange(len(targets))
    value = -log_probs.data[batch, targets].mean()

    def backward(g):
        full = np.zeros_like(log_probs.data)
        full[batch, targets] = -1.0 / len(targets)
        accumulate(log_probs, full * g)

    return make(np.asarray(value, dtype=log_probs.dtype), (log_probs,), backward, "nll_loss")


def mean_pool_time(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Average ``(B, T, C)`` over time; ``mask`` (B, T) marks valid steps."""
    if mask is None:
        return x.mean(axis=1)
    mask = np.asarray(mask, dtype=x.dtype)
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mean_pool_time: mask {mask.shape} vs input {x.shape}")
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    weights = (mask / counts)[:, :, None]

    def backward(g):
        accumulate(x, g[:, None, :] * weights)

    return make((x.data * weights).sum(axis=1), (x,), backward, "mean_pool_time")


def mse_sum(pred: Tensor, target) -> Tensor:
    """Sum of squared errors per sample, averaged over the batch axis."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"mse_sum: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    batch = pred.shape[0]

    def backward(g):
        accumulate(pred, g * 2.0 * diff / batch)

    return make(np.asarray((diff ** 2).sum() / batch, dtype=pred.dtype), (pred,), backward, "mse_sum")


# -- convolutions ---------------------------------------------------------------

def _cols1d(xp: np.ndarray, k: int, dilation: int, stride: int) -> np.ndarray:
    """(B, Tp, C) -> (B, To, k, C) gathered taps."""
    span = (k - 1) * dilation + 1
    view = sliding_window_view(xp, span, axis=1)[:, ::stride, :, ::dilation]
    return view.transpose(0, 1, 3, 2)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, pad_left: int = 0, pad_right: int = 0) -> Tensor:
    """1-D convolution on ``(B, T, C_in)`` with weight ``(C_out, C_in, k)``.

    A causal layer uses ``pad_left=(k-1)*dilation`` so that output step ``t``
    only sees inputs ``<= t`` and the length is preserved.
    """
    if x.ndim != 3:
        raise ValueError(f"conv1d: expected (B, T, C) input, got shape {x.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[2] != c_in:
        raise ValueError(f"conv1d: input channels {x.shape[2]} != weight in-channels {c_in} "
                         f"(input {x.shape}, weight {weight.shape})")
    b, t_in, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pad_left, pad_right), (0, 0))) if (pad_left or pad_right) else x.data
    span = (k - 1) * dilation + 1
    if xp.shape[1] < span:
        raise ValueError(f"conv1d: padded length {xp.shape[1]} shorter than kernel span {span}")
    w_mat = np.ascontiguousarray(weight.data.transpose(2, 1, 0)).reshape(k * c_in, c_out)
    cols = _cols1d(xp, k, dilation, stride)
    t_out = cols.shape[1]
    cmat = np.ascontiguousarray(cols).reshape(b * t_out, k * c_in)
    out = (cmat @ w_mat).reshape(b, t_out, c_out)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(b * t_out, c_out)
        if weight.requires_grad:
            gw = (cmat.T @ g2).reshape(k, c_in, c_out).transpose(2, 1, 0)
            accumulate(weight, gw)
        if bias is not None and bias.requires_grad:
            accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            if stride == 1:
                # input grad: correlate the zero-padded output grad with flipped taps
                gp = np.pad(g, ((0, 0), (span - 1, span - 1), (0, 0)))
                w_flip = np.ascontiguousarray(weight.data[:, :, ::-1].transpose(2, 0, 1)).reshape(k * c_out, c_in)
                gcols = np.ascontiguousarray(_cols1d(gp, k, dilation, 1)).reshape(-1, k * c_out)
                gxp = (gcols @ w_flip).reshape(b, -1, c_in)
            else:
                gc = (g2 @ w_mat.T).reshape(b, t_out, k, c_in)
                gxp = np.zeros_like(xp)
                last = stride * (t_out - 1) + 1
                for j in range(k):
                    off = j * dilation
                    gxp[:, off:off + last:stride, :] += gc[:, :, j, :]
            accumulate(x, gxp[:, pad_left:pad_left + t_in, :])

    return make(out, parents, backward, "conv1d")


def _cols2d(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, Hp, Wp, C) -> (B, Ho, Wo, kh, kw, C)."""
    view = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return view.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution on ``(B, H, W, C_in)`` with weight ``(C_out, C_in, kh, kw)``."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: expected (B, H, W, C) input, got shape {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[3] != c_in:
        raise ValueError(f"conv2d: input channels {x.shape[3]} != weight in-channels {c_in} "
                         f"(input {x.shape}, weight {weight.shape})")
    b, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    w_mat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(kh * kw * c_in, c_out)
    cols = _cols2d(xp, kh, kw, stride)
    _, ho, wo = cols.shape[:3]
    out = (np.ascontiguousarray(cols).reshape(-1, kh * kw * c_in) @ w_mat).reshape(b, ho, wo, c_out)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, c_out)
        if weight.requires_grad:
            cmat = np.ascontiguousarray(_cols2d(xp, kh, kw, stride)).reshape(-1, kh * kw * c_in)
            gw = (cmat.T @ g2).reshape(kh, kw, c_in, c_out).transpose(3, 2, 0, 1)
            accumulate(weight, gw)
        if bias is not None and bias.requires_grad:
            accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gc = (g2 @ w_mat.T).reshape(b, ho, wo, kh, kw, c_in)
            gxp = np.zeros_like(xp)
            last_h = stride * (ho - 1) + 1
            last_w = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + last_h:stride, j:j + last_w:stride, :] += gc[:, :, :, i, j, :]
            accumulate(x, gxp[:, padding:padding + h, padding:padding + w, :])

    return make(out, parents, backward, "conv2d")


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def _resize_axis(x: Tensor, size: int, axis: int, op: str) -> Tensor:
    n_in = x.shape[axis]
    if size < n_in:
        raise ValueError(f"{op}: target size {size} smaller than input {n_in}")
    idx = _nearest_index(n_in, size)
    starts = np.searchsorted(idx, np.arange(n_in))

    def backward(g):
        accumulate(x, np.add.reduceat(g, starts, axis=axis))

    return make(np.take(x.data, idx, axis=axis), (x,), backward, op)


def upsample_nearest1d(x: Tensor, size: int) -> Tensor:
    """Nearest-neighbour resize of ``(B, T, C)`` to ``size`` steps."""
    return _resize_axis(x, size, 1, "upsample_nearest1d")


def upsample_nearest2d(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of ``(B, H, W, C)`` to ``size``."""
    return _resize_axis(_resize_axis(x, size[0], 1, "upsample_nearest2d"), size[1], 2, "upsample_nearest2d")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def gaussian_kl(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over latents, mean over batch."""
    batch = mu.shape[0]
    kl = 0.5 * (log_var.exp() + mu * mu - 1.0 - log_var)
    return kl.sum() * (1.0 / batch)

