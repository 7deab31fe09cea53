"""Forward and backward kernels for every layer the segmentation net uses.

Convolutions are computed as a loop over kernel offsets, each offset a
single BLAS matmul over the flattened spatial extent.  That keeps peak
memory at one input-sized slice instead of a full im2col buffer and
stays bit-deterministic in single-threaded mode.

Shape convention: activations are [N, C, D, H, W]; conv weights are
[Cout, Cin, kd, kh, kw]; transposed-conv weights are [Cin, Cout, kd, kh, kw].
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

Triple = Tuple[int, int, int]


def _check_5d(x: np.ndarray, what: str) -> None:
    if x.ndim != 5:
        raise ValueError(f"{what} must be rank 5 [N,C,D,H,W], got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"{what} has a zero-sized extent: {x.shape}")


def _pad_amounts(kernel: Triple, padding: str) -> Triple:
    if padding == "same":
        for k in kernel:
            if k % 2 == 0:
                raise ValueError(f"same-mode padding needs odd kernel extents, got {kernel}")
        return tuple(k // 2 for k in kernel)
    if padding == "valid":
        return (0, 0, 0)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pad_input(x: np.ndarray, pads: Triple) -> np.ndarray:
    pd, ph, pw = pads
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _conv_out_extent(size: int, k: int, p: int, s: int) -> int:
    out = (size + 2 * p - k) // s + 1
    if out < 1:
        raise ValueError(f"kernel {k} with stride {s} does not fit extent {size}")
    return out


# --------------------------------------------------------------------------
# conv3d
# --------------------------------------------------------------------------

def conv3d_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: Optional[np.ndarray] = None,
    stride: Triple = (1, 1, 1),
    padding: str = "same",
) -> np.ndarray:
    """Direct 3D cross-correlation plus bias.

    With 'same' padding and stride 1, output spatial extents equal the
    input's.
    """
    _check_5d(x, "conv3d input")
    if w.ndim != 5:
        raise ValueError(f"conv3d weight must be rank 5, got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"input channels {x.shape[1]} do not match weight's Cin {w.shape[1]}"
        )
    n, cin, d, h, wdt = x.shape
    cout, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pads = _pad_amounts((kd, kh, kw), padding)
    xp = _pad_input(x, pads)
    do = _conv_out_extent(d, kd, pads[0], sd)
    ho = _conv_out_extent(h, kh, pads[1], sh)
    wo = _conv_out_extent(wdt, kw, pads[2], sw)
    ell = do * ho * wo

    yf = np.zeros((n, cout, ell), dtype=x.dtype)
    for a in range(kd):
        for bq in range(kh):
            for c in range(kw):
                sl = xp[:, :, a : a + sd * do : sd, bq : bq + sh * ho : sh, c : c + sw * wo : sw]
                slf = np.ascontiguousarray(sl).reshape(n, cin, ell)
                yf += np.matmul(w[:, :, a, bq, c], slf)
    y = yf.reshape(n, cout, do, ho, wo)
    if b is not None:
        if b.shape != (cout,):
            raise ValueError(f"bias shape {b.shape} does not match Cout {cout}")
        y += b.reshape(1, cout, 1, 1, 1)
    return y


def conv3d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: Triple = (1, 1, 1),
    padding: str = "same",
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv3d_forward wrt input, weight and bias."""
    _check_5d(x, "conv3d input")
    n, cin, d, h, wdt = x.shape
    cout, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pads = _pad_amounts((kd, kh, kw), padding)
    do = _conv_out_extent(d, kd, pads[0], sd)
    ho = _conv_out_extent(h, kh, pads[1], sh)
    wo = _conv_out_extent(wdt, kw, pads[2], sw)
    if grad_out.shape != (n, cout, do, ho, wo):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, cout, do, ho, wo)}"
        )
    xp = _pad_input(x, pads)
    ell = do * ho * wo
    gf = np.ascontiguousarray(grad_out).reshape(n, cout, ell)

    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(kd):
        for bq in range(kh):
            for c in range(kw):
                sl = xp[:, :, a : a + sd * do : sd, bq : bq + sh * ho : sh, c : c + sw * wo : sw]
                slf = np.ascontiguousarray(sl).reshape(n, cin, ell)
                gw[:, :, a, bq, c] = np.tensordot(gf, slf, axes=([0, 2], [0, 2]))
                gsl = np.matmul(w[:, :, a, bq, c].T, gf).reshape(n, cin, do, ho, wo)
                gxp[:, :, a : a + sd * do : sd, bq : bq + sh * ho : sh, c : c + sw * wo : sw] += gsl
    pd, ph, pw = pads
    gx = gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wdt]
    gb = grad_out.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(gx), gw, gb


# --------------------------------------------------------------------------
# transposed conv3d (upsampling; kernel extent == stride extent per axis)
# --------------------------------------------------------------------------

def _check_transpose_args(w: np.ndarray, stride: Triple) -> None:
    if w.ndim != 5:
        raise ValueError(f"transposed-conv weight must be rank 5, got shape {w.shape}")
    kernel = w.shape[2:]
    for s, k in zip(stride, kernel):
        if s not in (1, 2):
            raise ValueError(f"unsupported transposed-conv stride {stride}; components must be 1 or 2")
        if s != k:
            raise ValueError(
                f"kernel extents {kernel} must equal stride extents {stride} per axis"
            )


def conv3d_transpose_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: Optional[np.ndarray] = None,
    stride: Triple = (2, 2, 2),
) -> np.ndarray:
    """Adjoint of a strided valid conv: each input voxel paints a kernel-sized
    output block, so spatial extents multiply by the stride."""
    _check_5d(x, "transposed-conv input")
    _check_transpose_args(w, stride)
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"input channels {x.shape[1]} do not match weight's Cin {w.shape[0]}"
        )
    n, cin, d, h, wdt = x.shape
    _, cout, kd, kh, kw = w.shape
    # (n,d,h,w,cout,kd,kh,kw) -> (n,cout,d,kd,h,kh,w,kw) -> merged blocks
    t = np.tensordot(x, w, axes=([1], [0]))
    t = t.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    y = np.ascontiguousarray(t).reshape(n, cout, d * kd, h * kh, wdt * kw)
    if b is not None:
        y += b.reshape(1, cout, 1, 1, 1)
    return y


def conv3d_transpose_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: Triple = (2, 2, 2),
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_transpose_args(w, stride)
    n, cin, d, h, wdt = x.shape
    _, cout, kd, kh, kw = w.shape
    expected = (n, cout, d * kd, h * kh, wdt * kw)
    if grad_out.shape != expected:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output {expected}"
        )
    g = np.ascontiguousarray(grad_out).reshape(n, cout, d, kd, h, kh, wdt, kw)
    # gx[n,i,d,h,w] = sum_{o,abc} g[n,o,d,a,h,b,w,c] * w[i,o,a,b,c]
    gx = np.tensordot(g, w, axes=([1, 3, 5, 7], [1, 2, 3, 4]))
    gx = np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3))
    # gw[i,o,a,b,c] = sum_{n,dhw} x[n,i,d,h,w] * g[n,o,d,a,h,b,w,c]
    gw = np.tensordot(x, g, axes=([0, 2, 3, 4], [0, 2, 4, 6]))
    gb = grad_out.sum(axis=(0, 2, 3, 4))
    return gx, np.ascontiguousarray(gw), gb


# --------------------------------------------------------------------------
# max pooling (disjoint windows)
# --------------------------------------------------------------------------

def maxpool3d_forward(x: np.ndarray, window: Triple) -> Tuple[np.ndarray, np.ndarray]:
    """Window-wise maximum over disjoint windows.

    Returns the pooled tensor and, per output element, the flat index of
    the winning source voxel; ties go to the lowest flat index.
    """
    _check_5d(x, "maxpool input")
    n, c, d, h, wdt = x.shape
    wd, wh, ww = window
    if d % wd or h % wh or wdt % ww:
        raise ValueError(
            f"spatial extents {(d, h, wdt)} not divisible by window {window}"
        )
    do, ho, wo = d // wd, h // wh, wdt // ww
    v = x.reshape(n, c, do, wd, ho, wh, wo, ww)
    vt = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 6, 3, 5, 7))
    vt = vt.reshape(n, c, do, ho, wo, wd * wh * ww)
    # argmax returns the first maximum, which inside a window is also the
    # lowest flat source index (both orders are lexicographic in (a,b,c))
    local = vt.argmax(axis=-1)
    y = np.take_along_axis(vt, local[..., None], axis=-1)[..., 0]

    a, bq, cc = np.unravel_index(local, (wd, wh, ww))
    ni, ci, di, hi, wi = np.indices((n, c, do, ho, wo), sparse=True)
    src = np.ravel_multi_index(
        (ni, ci, di * wd + a, hi * wh + bq, wi * ww + cc), x.shape
    )
    return y, src


def maxpool3d_backward(
    grad_out: np.ndarray, argmax: np.ndarray, input_shape: Tuple[int, ...]
) -> np.ndarray:
    """Routes each output gradient to its recorded source voxel."""
    if grad_out.shape != argmax.shape:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match argmax shape {argmax.shape}"
        )
    gx = np.zeros(int(np.prod(input_shape)), dtype=grad_out.dtype)
    gx[argmax.ravel()] = grad_out.ravel()  # windows are disjoint: indices unique
    return gx.reshape(input_shape)


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def batchnorm3d_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
):
    """Per-channel normalization over the (N, D, H, W) axes.

    Train mode normalizes with batch statistics and blends them into the
    running estimates: running <- (1 - momentum) * running + momentum * batch.
    Eval mode normalizes with the running estimates and leaves them alone.

    Returns (y, cache, running_mean, running_var).
    """
    _check_5d(x, "batchnorm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3, 4)
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is None:
            running_mean = np.zeros(c, dtype=x.dtype)
            running_var = np.ones(c, dtype=x.dtype)
        running_mean = (1.0 - momentum) * running_mean + momentum * mu
        running_var = (1.0 - momentum) * running_var + momentum * var
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval mode requires initialized running statistics")
        mu, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(1, c, 1, 1, 1)) * inv_std.reshape(1, c, 1, 1, 1)
    y = gamma.reshape(1, c, 1, 1, 1) * xhat + beta.reshape(1, c, 1, 1, 1)
    cache = (xhat, inv_std, gamma, mode)
    return y, cache, running_mean, running_var


def batchnorm3d_backward(grad_out: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma, mode = cache
    c = xhat.shape[1]
    axes = (0, 2, 3, 4)
    dbeta = grad_out.sum(axis=axes)
    dgamma = (grad_out * xhat).sum(axis=axes)
    scale = (gamma * inv_std).reshape(1, c, 1, 1, 1)
    if mode == "eval":
        gx = grad_out * scale
    else:
        m = grad_out.size // c
        gx = scale * (
            grad_out
            - dbeta.reshape(1, c, 1, 1, 1) / m
            - xhat * dgamma.reshape(1, c, 1, 1, 1) / m
        )
    return gx, dgamma, dbeta


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward given the forward output y = sigmoid(x)."""
    return grad_out * y * (1.0 - y)


# --------------------------------------------------------------------------
# soft Dice loss
# --------------------------------------------------------------------------

def dice_loss(
    probs: np.ndarray, target_onehot: np.ndarray, smoothing: float = 1e-6
) -> Tuple[float, np.ndarray]:
    """Soft Dice loss over the foreground channels (all but channel 0).

    Per foreground class c: dice_c = (2 * sum(p*g) + s) / (sum(p) + sum(g) + s),
    summed over batch and space.  Loss = 1 - mean_c dice_c.  Returns the
    loss and its analytic gradient with respect to probs.
    """
    _check_5d(probs, "dice probs")
    if probs.shape != target_onehot.shape:
        raise ValueError(
            f"probs shape {probs.shape} does not match target {target_onehot.shape}"
        )
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    nclasses = probs.shape[1]
    if nclasses < 2:
        raise ValueError("need at least one foreground class (channels >= 2)")
    lo, hi = float(probs.min()), float(probs.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"probs must lie in [0, 1], got range [{lo}, {hi}]")

    axes = (0, 2, 3, 4)
    k = nclasses - 1
    grad = np.zeros_like(probs)
    dice_sum = 0.0
    for c in range(1, nclasses):
        p = probs[:, c]
        g = target_onehot[:, c]
        inter = float((p * g).sum())
        denom = float(p.sum() + g.sum()) + smoothing
        num = 2.0 * inter + smoothing
        dice_sum += num / denom
        grad[:, c] = -(2.0 * g * denom - num) / (denom * denom) / k
    loss = 1.0 - dice_sum / k
    return loss, grad
