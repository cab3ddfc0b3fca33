"""Differentiable operators.

Binary elementwise ops accept identical shapes or a scalar on either side
(python number or 0-d tensor). Any other broadcast is rejected.
"""

from __future__ import annotations

import numpy as np

from .core import Tensor, as_tensor, make_node

LEAKY_SLOPE = 0.2


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape} (only identical shapes or scalars)")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div by zero")

    def backward(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * a.data / (b.data * b.data), b)

    return make_node(a.data / b.data, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise FloatingPointError("sqrt of negative value")
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g / (2 * out),), "sqrt")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (x.data >= lo_) & (x.data <= hi_)
    out = np.clip(x.data, lo_, hi_).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * inside,), "clamp")


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference, a scalar."""
    a, b = _binary_operands(a, b)
    diff = a.data - b.data
    sign = np.sign(diff)
    n = diff.size

    def backward(g):
        return _reduce_to(g * sign / n, a), _reduce_to(-g * sign / n, b)

    return make_node(np.asarray(np.abs(diff).mean(), dtype=a.dtype), (a, b), backward, "l1_distance")


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise FloatingPointError("l2_norm of a zero vector has no gradient")
    out = norm if keepdims else np.squeeze(norm, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * x.data / norm,)

    return make_node(out, (x,), backward, "l2_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True)) + eps
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return make_node(y, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat of nothing")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: non-axis dims differ: {t.shape} vs {ref} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_node(np.array(out, copy=True), (x,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_node(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    count = x.size // max(out.size, 1) if axis is not None else x.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)

    return make_node(out, (x,), backward, "mean")


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping k x k average pooling (stride == kernel)."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {kernel}")
    ho, wo = h // kernel, w // kernel
    out = x.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def backward(g):
        g6 = np.broadcast_to(g[:, :, :, None, :, None], (n, c, ho, kernel, wo, kernel))
        return ((g6 / (kernel * kernel)).reshape(x.shape).astype(x.dtype),)

    return make_node(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return ((np.broadcast_to(g[:, :, None, None], x.shape) / (h * w)).astype(x.dtype),)

    return make_node(out, (x,), backward, "global_avg_pool")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched (identical leading dims) matrix product."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1]."""
    t = np.broadcast_to(np.asarray(target, dtype=logits.dtype), logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return (g * (_stable_sigmoid(z) - t) / n,)

    return make_node(np.asarray(loss.mean(), dtype=z.dtype), (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_out_size(size: int, kernel: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Padded NHWC (N, Hp, Wp, C) -> (N*ho*wo, kh*kw*C) patch matrix."""
    n, _, _, c = xp.shape
    if kh == kw == sh == sw == 1:
        return xp[:, :ho, :wo].reshape(n * ho * wo, c)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-accumulate into a zero NHWC buffer of ``shape``."""
    n, _, _, c = shape
    d = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(shape, dtype=cols.dtype)
    if kh == kw == sh == sw == 1:
        out[:, :ho, :wo] = d[:, :, :, 0, 0]
        return out
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += d[:, :, :, i, j]
    return out


def _pad_nhwc(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of NCHW input with an (O, I, kh, kw) kernel (im2col + GEMM)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    sh, sw = pair(stride)
    ph, pw = pair(padding)
    ho, wo = conv_out_size(h, kh, sh, ph), conv_out_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h + 2 * ph}x{w + 2 * pw}")
    xp = _pad_nhwc(_nhwc(x.data), ph, pw)
    cols = im2col(xp, kh, kw, sh, sw, ho, wo)
    # columns are ordered (kh, kw, C)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = _nchw(out.reshape(n, ho, wo, o))

    def backward(g):
        gmat = _nhwc(g).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = col2im(gmat @ wmat, xp.shape, kh, kw, sh, sw, ho, wo)
            gx = _nchw(gxp[:, ph : ph + h, pw : pw + w])
        if weight.requires_grad:
            gw = np.ascontiguousarray((gmat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, output_padding=0
) -> Tensor:
    """Adjoint of :func:`conv2d`; weight is laid out (I, O, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    i, o, kh, kw = weight.shape
    if c != i:
        raise ValueError(f"conv_transpose2d: input has {c} channels but weight expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} != ({o},)")
    sh, sw = pair(stride)
    ph, pw = pair(padding)
    oph, opw = pair(output_padding)
    if (oph > 0 and oph >= sh) or (opw > 0 and opw >= sw):
        raise ValueError("conv_transpose2d: output_padding must be smaller than stride")
    hout = conv_transpose_out_size(h, kh, sh, ph, oph)
    wout = conv_transpose_out_size(w, kw, sw, pw, opw)
    if hout < 1 or wout < 1:
        raise ValueError("conv_transpose2d: non-positive output size")
    hb = max((h - 1) * sh + kh, ph + hout)
    wb = max((w - 1) * sw + kw, pw + wout)
    xmat = _nhwc(x.data).reshape(-1, c)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(c, -1)
    buf = col2im(xmat @ wmat, (n, hb, wb, o), kh, kw, sh, sw, h, w)
    out = _nchw(buf[:, ph : ph + hout, pw : pw + wout])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gbuf = np.zeros((n, hb, wb, o), dtype=g.dtype)
        gbuf[:, ph : ph + hout, pw : pw + wout] = g.transpose(0, 2, 3, 1)
        gcols = im2col(gbuf, kh, kw, sh, sw, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _nchw((gcols @ wmat.T).reshape(n, h, w, c))
        if weight.requires_grad:
            gw = np.ascontiguousarray((xmat.T @ gcols).reshape(c, kh, kw, o).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv_transpose2d")


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride=1, padding=0) -> np.ndarray:
    """Reference convolution: loop over kernel taps, contract channels per tap.

    Kept deliberately simple; the im2col path in :func:`conv2d` must agree
    with it to 1e-5.
    """
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    sh, sw = pair(stride)
    ph, pw = pair(padding)
    ho, wo = conv_out_size(h, kh, sh, ph), conv_out_size(w, kw, sw, pw)
    xp = _pad(x, ph, pw)
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, weight))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            out += np.einsum("nchw,oc->nohw", patch, weight[:, :, i, j])
    if bias is not None:
        out += bias[None, :, None, None]
    return out


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

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
    """Per-channel batch normalisation over (N, H, W).

    In training mode the running buffers are updated in place
    (unbiased variance, PyTorch convention).
    """
    c = x.shape[1]
    for name, arr in (("gamma", gamma.shape), ("beta", beta.shape), ("running_mean", running_mean.shape),
                      ("running_var", running_var.shape)):
        if arr != (c,):
            raise ValueError(f"batchnorm2d: {name} has shape {arr}, expected ({c},)")
    g4 = gamma.data[None, :, None, None]
    if training:
        m = x.size // c
        if m < 2:
            raise ValueError("batchnorm2d: need more than one value per channel in training mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        out = g4 * xhat + beta.data[None, :, None, None]

        def backward(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (g4 * inv[None, :, None, None] / m) * (
                    m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None]
                )
            return gx, gg, gb
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean[None, :, None, None].astype(x.dtype)) * inv[None, :, None, None]
        out = g4 * xhat + beta.data[None, :, None, None]

        def backward(g):
            return g * g4 * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_node(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm2d")
