"""Differentiable operations on :class:`~vitguide.autodiff.tensor.Tensor`.

Images and feature maps are channels-last (B, H, W, C) throughout; conv
kernels are (kh, kw, C_in, C_out).
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result


def _pair(a, b):
    """Coerce a binary op's operands to tensors of a common dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_result(a.data / b.data, (a, b), backward, "div")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * x.dtype.type(factor),)

    return make_result(x.data * x.dtype.type(factor), (x,), backward, "scale")


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return make_result(x.data**p, (x,), backward, "power")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * x.data,)

    return make_result(x.data * x.data, (x,), backward, "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return make_result(out, (x,), backward, "sqrt")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_result(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return make_result(np.log(x.data), (x,), backward, "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.maximum(x.data, 0), (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x3 = x.data * x.data * x.data
    th = np.tanh(_GELU_C * (x.data + 0.044715 * x3))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x.data * x.data)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * dinner),)

    return make_result(0.5 * x.data * (1.0 + th), (x,), backward, "gelu")


# ------------------------------------------------------------------ structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # (..., K) @ (K, N): one flat GEMM each way instead of a batch of small ones.
        a2 = a.data.reshape(-1, a.shape[-1])

        def backward_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        return make_result(out, (a, b), backward_flat, "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), backward, "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward, "concat")


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows :func:`numpy.pad`."""
    pad_width = [tuple(p) for p in pad_width]
    if len(pad_width) != x.ndim:
        raise ShapeError(f"pad: {len(pad_width)} pad pairs for a rank-{x.ndim} tensor")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))

    def backward(g):
        return (g[index],)

    return make_result(np.pad(x.data, pad_width), (x,), backward, "pad")


# ----------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def frobenius_sq(x: Tensor) -> Tensor:
    """Sum of squared entries, returned as a scalar tensor."""

    def backward(g):
        return (2.0 * g * x.data,)

    return make_result(np.asarray(np.sum(x.data * x.data)), (x,), backward, "frobenius_sq")


# ------------------------------------------------------------ normalizations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def multi_head_attention(qkv: Tensor, heads: int):
    """Scaled dot-product self-attention on packed ``qkv`` of shape (B, N, 3C).

    Returns ``(out, probs)``: ``out`` is the (B, N, C) head-concatenated
    result on the tape, ``probs`` the (B, heads, N, N) softmax as a plain array.
    """
    if qkv.ndim != 3 or qkv.shape[-1] % (3 * heads):
        raise ShapeError(f"multi_head_attention: cannot split {qkv.shape} into q, k, v over {heads} heads")
    b, n, c3 = qkv.shape
    c = c3 // 3
    d = c // heads
    scale_ = d**-0.5
    parts = qkv.data.reshape(b, n, 3, heads, d).transpose(2, 0, 3, 1, 4)
    q, k, v = parts[0], parts[1], parts[2]
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale_
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, n, c)

    def backward(g):
        go = g.reshape(b, n, heads, d).transpose(0, 2, 1, 3)
        dv = np.matmul(probs.transpose(0, 1, 3, 2), go)
        dp = np.matmul(go, v.transpose(0, 1, 3, 2))
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True)) * scale_
        dq = np.matmul(ds, k)
        dk = np.matmul(ds.transpose(0, 1, 3, 2), q)
        grad = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, n, c3)
        return (grad,)

    return make_result(out, (qkv,), backward, "multi_head_attention"), probs


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), backward, "l2_normalize")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match features {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        reduce_axes = tuple(range(x.ndim - 1))
        g_gamma = (g * xhat).sum(axis=reduce_axes)
        g_beta = g.sum(axis=reduce_axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv_std * (
                gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, g_gamma, g_beta

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward, "layernorm")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over (B, H, W) of a channels-last map.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; otherwise the running statistics are
    used and left untouched.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected (B, H, W, C), got {x.shape}")
    c = x.shape[-1]
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm2d: parameter shape {gamma.shape} does not match channels {c}")
    axes = (0, 1, 2)
    n = x.shape[0] * x.shape[1] * x.shape[2]

    if training:
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv_std
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = inv_std * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        else:
            gx = gxhat * inv_std
        return gx.astype(x.dtype), g_gamma.astype(gamma.dtype), g_beta.astype(beta.dtype)

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


# ----------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    cols = [
        xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
        for i in range(kh)
        for j in range(kw)
    ]
    return np.concatenate(cols, axis=-1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a (B, H, W, C_in) map with a (kh, kw, C_in, C_out) kernel."""
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank-4 (kh, kw, C_in, C_out), got {weight.shape}")
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be (B, H, W, C), got {x.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels of {x.shape} do not match kernel {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel {weight.shape}")
    b, h, w, _ = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(-1, kh * kw * cin)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, ho, wo, kh * kw, cin)
            gxp = np.zeros_like(xp)
            k = 0
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += gcols[
                        :, :, :, k, :
                    ]
                    k += 1
            gx = gxp[:, padding : padding + h, padding : padding + w, :] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Point-wise projection of the last (channel) axis; ``weight`` is (1, 1, C_in, C_out)."""
    if weight.ndim != 4 or weight.shape[:2] != (1, 1):
        raise ShapeError(f"conv1x1: kernel must be (1, 1, C_in, C_out), got {weight.shape}")
    if x.shape[-1] != weight.shape[2]:
        raise ShapeError(f"conv1x1: input channels of {x.shape} do not match kernel {weight.shape}")
    out = matmul(x, reshape(weight, weight.shape[2:]))
    return out if bias is None else add(out, bias)


# --------------------------------------------------------------------- resize


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m.astype(dtype)


def _apply_hw(data: np.ndarray, ry: np.ndarray, rx: np.ndarray) -> np.ndarray:
    # (B, H, W, C) -> (B, ry.rows, rx.rows, C)
    b, h, w, c = data.shape
    t = np.matmul(ry, data.reshape(b, h, w * c)).reshape(b, ry.shape[0], w, c)
    t = np.matmul(rx, t.transpose(0, 2, 1, 3).reshape(b, w, -1))
    return t.reshape(b, rx.shape[0], ry.shape[0], c).transpose(0, 2, 1, 3)


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resize of a (B, H, W, C) map with corner-aligned sampling."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected (B, H, W, C), got {x.shape}")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"bilinear_resize: invalid target size ({target_h}, {target_w})")
    _, h, w, _ = x.shape
    if (h, w) == (target_h, target_w):
        ry = rx = None
        out = x.data.copy()
    else:
        ry = _interp_matrix(target_h, h, x.dtype)
        rx = _interp_matrix(target_w, w, x.dtype)
        out = np.ascontiguousarray(_apply_hw(x.data, ry, rx))

    def backward(g):
        if ry is None:
            return (g,)
        return (np.ascontiguousarray(_apply_hw(g, ry.T, rx.T)),)

    return make_result(out, (x,), backward, "bilinear_resize")


# ----------------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"cross_entropy: labels outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    loss = (logsumexp - shifted[rows, labels]).mean()

    def backward(g):
        probs = np.exp(shifted - logsumexp[:, None])
        probs[rows, labels] -= 1.0
        return ((probs * (g / logits.shape[0])).astype(logits.dtype),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")

