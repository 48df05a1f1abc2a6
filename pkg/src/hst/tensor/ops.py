"""Differentiable primitive operations.

Every primitive computes its forward with numpy, then (when a tape is
active and an input requires gradients) records a backward closure that
maps the output adjoint to per-input adjoint contributions. Gradient
formulas live in module-level ``*_grad`` helpers so tests can substitute
a corrupted rule and prove the finite-difference checker catches it.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ShapeError
from . import kernels
from .core import Tensor, active_tape, debug_enabled

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _check_finite(out: Tensor, op: str) -> None:
    if debug_enabled() and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op}: non-finite values in output")


def _same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _emit(out: Tensor, op: str, backward) -> Tensor:
    tape = active_tape()
    if tape is not None and backward is not None:
        out.requires_grad = True
        tape.record(out, backward)
    _check_finite(out, op)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _same_dtype("add", a, b)
    out = Tensor(a.data + b.data)
    backward = None
    if a.requires_grad or b.requires_grad:

        def backward(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, _unbroadcast(g, a.shape)))
            if b.requires_grad:
                pairs.append((b, _unbroadcast(g, b.shape)))
            return pairs

    return _emit(out, "add", backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _same_dtype("sub", a, b)
    out = Tensor(a.data - b.data)
    backward = None
    if a.requires_grad or b.requires_grad:

        def backward(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, _unbroadcast(g, a.shape)))
            if b.requires_grad:
                pairs.append((b, _unbroadcast(-g, b.shape)))
            return pairs

    return _emit(out, "sub", backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _same_dtype("mul", a, b)
    out = Tensor(a.data * b.data)
    backward = None
    if a.requires_grad or b.requires_grad:

        def backward(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, _unbroadcast(g * b.data, a.shape)))
            if b.requires_grad:
                pairs.append((b, _unbroadcast(g * a.data, b.shape)))
            return pairs

    return _emit(out, "mul", backward)


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _same_dtype("div", a, b)
    out = Tensor(a.data / b.data)
    backward = None
    if a.requires_grad or b.requires_grad:

        def backward(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, _unbroadcast(g / b.data, a.shape)))
            if b.requires_grad:
                pairs.append((b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))
            return pairs

    return _emit(out, "div", backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    backward = None
    if a.requires_grad:

        def backward(g):
            return [(a, -g)]

    return _emit(out, "neg", backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    backward = None
    if a.requires_grad or b.requires_grad:

        def backward(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)))
            if b.requires_grad:
                pairs.append((b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)))
            return pairs

    return _emit(out, "matmul", backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias over the last axis."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.ascontiguousarray(x.data.reshape(shape)))
    backward = None
    if x.requires_grad:
        original = x.shape

        def backward(g):
            return [(x, g.reshape(original))]

    return _emit(out, "reshape", backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    backward = None
    if x.requires_grad:
        inverse = tuple(np.argsort(axes))

        def backward(g):
            return [(x, np.ascontiguousarray(g.transpose(inverse)))]

    return _emit(out, "transpose", backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _same_dtype("concat", *tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    backward = None
    if any(t.requires_grad for t in tensors):
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            pairs = []
            for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(start, stop)
                    pairs.append((t, np.ascontiguousarray(g[tuple(idx)])))
            return pairs

    return _emit(out, "concat", backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(np.ascontiguousarray(x.data[index]))
    backward = None
    if x.requires_grad:

        def backward(g):
            gx = np.zeros_like(x.data)
            gx[index] = g
            return [(x, gx)]

    return _emit(out, "slice", backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.ascontiguousarray(np.broadcast_to(x.data, shape)))
    backward = None
    if x.requires_grad:
        original = x.shape

        def backward(g):
            return [(x, _unbroadcast(g, original))]

    return _emit(out, "broadcast", backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    backward = None
    if x.requires_grad:

        def backward(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return [(x, np.broadcast_to(gg, x.shape).copy())]

    return _emit(out, "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    backward = None
    if x.requires_grad:
        count = x.size // out.size

        def backward(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return [(x, np.broadcast_to(gg, x.shape) / count)]

    return _emit(out, "mean", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the token axis ([B,T,D] -> [B,D]) or spatial axes ([B,C,H,W] -> [B,C])."""
    if x.ndim == 3:
        return mean(x, axis=1)
    if x.ndim == 4:
        return mean(x, axis=(2, 3))
    raise ShapeError(f"global_avg_pool expects rank 3 or 4 input, got {x.shape}")


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    backward = None
    if x.requires_grad:

        def backward(g):
            return [(x, softmax_grad(g, y, axis))]

    return _emit(out, "softmax", backward)


def softmax_grad(g: np.ndarray, y: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * x.dtype.type(_INV_SQRT2)))
    out = Tensor(x.data * cdf)
    backward = None
    if x.requires_grad:

        def backward(g):
            return [(x, g * gelu_grad(x.data, cdf))]

    return _emit(out, "gelu", backward)


def gelu_grad(x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
    return cdf + x * pdf


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Normalization multiplies by the reciprocal 1/sqrt(var + eps); callers
    reproducing values bit-exactly must use the same form.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature size {d}"
        )
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be positive")
    _same_dtype("layer_norm", x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    out = Tensor(xhat * gamma.data + beta.data)
    backward = None
    if x.requires_grad or gamma.requires_grad or beta.requires_grad:

        def backward(g):
            pairs = []
            if gamma.requires_grad:
                pairs.append((gamma, (g * xhat).reshape(-1, d).sum(axis=0)))
            if beta.requires_grad:
                pairs.append((beta, g.reshape(-1, d).sum(axis=0)))
            if x.requires_grad:
                gxhat = g * gamma.data
                mean1 = gxhat.mean(axis=-1, keepdims=True)
                mean2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
                pairs.append((x, (gxhat - mean1 - xhat * mean2) * inv_std))
            return pairs

    return _emit(out, "layer_norm", backward)


# ---------------------------------------------------------------------------
# spatial ops (kernel-backed)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    _same_dtype("conv2d", *( (x, w) if b is None else (x, w, b) ))
    in_h, in_w = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    if (in_h + 2 * padding - kh) // stride + 1 <= 0 or (in_w + 2 * padding - kw) // stride + 1 <= 0:
        raise ShapeError(
            f"conv2d: non-positive output size for input {x.shape}, kernel {w.shape}, "
            f"stride {stride}, padding {padding}"
        )
    y = kernels.conv2d_forward(x.data, w.data, stride, padding)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y)
    backward = None
    if x.requires_grad or w.requires_grad or (b is not None and b.requires_grad):

        def backward(g):
            g = np.ascontiguousarray(g)
            pairs = []
            if x.requires_grad:
                pairs.append((x, kernels.conv2d_grad_input(g, w.data, stride, padding, in_h, in_w)))
            if w.requires_grad:
                pairs.append((w, kernels.conv2d_grad_weight(g, x.data, kh, kw, stride, padding)))
            if b is not None and b.requires_grad:
                pairs.append((b, g.sum(axis=(0, 2, 3))))
            return pairs

    return _emit(out, "conv2d", backward)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel bilinear resampling; differentiable w.r.t. x only."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [B,C,H,W], got {x.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"bilinear_resize: non-positive output size ({out_h}, {out_w})")
    in_h, in_w = x.shape[2], x.shape[3]
    if (out_h, out_w) == (in_h, in_w):
        # Identity resize is exact by definition; skip the resampling math
        # so the output is bit-equal to the input.
        y = x.data.copy()
    else:
        y = kernels.bilinear_forward(x.data, out_h, out_w)
    out = Tensor(y)
    backward = None
    if x.requires_grad:
        identity = (out_h, out_w) == (in_h, in_w)

        def backward(g):
            if identity:
                return [(x, g)]
            return [(x, kernels.bilinear_grad_input(np.ascontiguousarray(g), in_h, in_w))]

    return _emit(out, "bilinear_resize", backward)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels against raw logits."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(n), labels]
    out = Tensor(np.asarray(-picked.mean(), dtype=logits.dtype))
    backward = None
    if logits.requires_grad:
        probs = np.exp(log_probs)

        def backward(g):
            gl = probs.copy()
            gl[np.arange(n), labels] -= 1.0
            return [(logits, gl * (g / n))]

    return _emit(out, "cross_entropy", backward)


# ---------------------------------------------------------------------------
# operator sugar on Tensor


def _scalar_like(x, other) -> Tensor:
    return as_tensor(other, like=x)


Tensor.__add__ = lambda self, other: add(self, _scalar_like(self, other))
Tensor.__radd__ = lambda self, other: add(_scalar_like(self, other), self)
Tensor.__sub__ = lambda self, other: sub(self, _scalar_like(self, other))
Tensor.__rsub__ = lambda self, other: sub(_scalar_like(self, other), self)
Tensor.__mul__ = lambda self, other: mul(self, _scalar_like(self, other))
Tensor.__rmul__ = lambda self, other: mul(_scalar_like(self, other), self)
Tensor.__truediv__ = lambda self, other: div(self, _scalar_like(self, other))
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
