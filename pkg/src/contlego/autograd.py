"""Dense-tensor numerical core with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array; operations executed inside an active
``Tape`` record their local gradient rules in execution order.  ``backward``
walks the tape once in reverse, accumulating gradients into every tensor
with ``requires_grad``, then clears the tape.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as _K

__all__ = [
    "AutogradError",
    "DimensionError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "softmax",
    "layer_norm",
    "gelu",
    "embedding_lookup",
    "dropout",
    "masked_cross_entropy",
    "no_grad",
]

class AutogradError(RuntimeError):
    """Contract violation in the autodiff engine."""


class DimensionError(AutogradError):
    """Incompatible operand shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g, owned: bool = False):
        """Add g into grad; `owned` means g is a fresh array we may keep."""
        if self.grad is None:
            if owned and g.shape == self.data.shape and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPE_STACK: list = []


class Tape:
    """Ordered record of executed operations and their gradient rules."""

    def __init__(self):
        self.entries = []  # (output tensor, backward callable) in execution order

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, fn):
        self.entries.append((out, fn))

    def backward(self, loss: Tensor):
        """Seed d(loss)=1, visit entries once in reverse, then clear the tape."""
        if loss.data.size != 1:
            raise AutogradError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.entries):
            if out.grad is not None:
                fn(out.grad)
        self.entries.clear()


def backward(loss: Tensor):
    """Backward through the innermost active tape."""
    if not _TAPE_STACK:
        raise AutogradError("backward called with no active tape")
    _TAPE_STACK[-1].backward(loss)


class no_grad:
    """Context that suppresses tape recording (evaluation mode)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _track(inputs, out_data):
    """Build the output tensor; returns (out, tape) with tape None if untracked."""
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        return out, tape
    return Tensor(out_data), None


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    out, tape = _track((a, b), out_data)
    if tape is not None:
        def _bwd(g):
            # g is finished with after this node; at most one branch may keep it
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g, b.shape) if b.requires_grad else None
            donated = False
            if ga is not None:
                own_a = ga is g and gb is not g
                a._accumulate(ga, owned=own_a)
                donated = own_a
            if gb is not None:
                b._accumulate(gb, owned=(gb is not g) or (not donated and a is not b))
        tape.record(out, _bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out, tape = _track((a,), a.data * s)
    if tape is not None:
        def _bwd(g):
            a._accumulate(g * s, owned=True)
        tape.record(out, _bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands per numpy semantics."""
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    out_data = a.data @ b.data
    out, tape = _track((a, b), out_data)
    if tape is not None:
        def _bwd(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.shape), owned=True)
            if b.requires_grad:
                if b.data.ndim == 2 and a.data.ndim > 2:
                    # weight matrix shared across the batch
                    k = a.shape[-1]
                    n = g.shape[-1]
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                    gb = _unbroadcast(gb, b.shape)
                b._accumulate(gb, owned=True)
        tape.record(out, _bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out, tape = _track((a,), a.data.reshape(shape))
    if tape is not None:
        def _bwd(g):
            # g is dead after this node, so the reshaped view may be kept
            a._accumulate(g.reshape(a.shape), owned=True)
        tape.record(out, _bwd)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out, tape = _track((a,), np.transpose(a.data, axes))
    if tape is not None:
        inv = tuple(np.argsort(axes))
        def _bwd(g):
            a._accumulate(np.transpose(g, inv), owned=True)
        tape.record(out, _bwd)
    return out


def softmax(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out, tape = _track((a,), p)
    if tape is not None:
        def _bwd(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            a._accumulate(p * (g - dot), owned=True)
        tape.record(out, _bwd)
    return out


def _fusable(*arrays) -> bool:
    return _K.HAVE_NUMBA and all(
        arr.flags.c_contiguous and arr.dtype in (np.float32, np.float64)
        for arr in arrays
    )


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match "
            f"feature dim of {a.shape}"
        )
    x = a.data
    if _fusable(x, gamma.data, beta.data) and x.ndim >= 2:
        return _layer_norm_fused(a, gamma, beta, eps)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    out, tape = _track((a, gamma, beta), out_data)
    if tape is not None:
        def _bwd(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0), owned=True)
            if beta.requires_grad:
                beta._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0), owned=True)
            if a.requires_grad:
                n = x.shape[-1]
                gx = g * gamma.data
                s1 = gx.sum(axis=-1, keepdims=True)
                s2 = (gx * xhat).sum(axis=-1, keepdims=True)
                a._accumulate(inv * (gx - s1 / n - xhat * s2 / n), owned=True)
        tape.record(out, _bwd)
    return out


def _layer_norm_fused(a: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    x = a.data
    x2 = x.reshape(-1, x.shape[-1])
    out_data = np.empty_like(x)
    xhat = np.empty_like(x2)
    inv = np.empty(x2.shape[0], dtype=x.dtype)
    _K.layernorm_forward(
        x2, gamma.data, beta.data, eps, out_data.reshape(x2.shape), xhat, inv
    )
    out, tape = _track((a, gamma, beta), out_data)
    if tape is not None:
        def _bwd(g):
            g2 = np.ascontiguousarray(g.reshape(x2.shape))
            gx = np.empty_like(x2) if a.requires_grad else xhat  # scratch reuse
            ggamma = np.empty_like(gamma.data)
            gbeta = np.empty_like(beta.data)
            _K.layernorm_backward(g2, gamma.data, xhat, inv, gx, ggamma, gbeta)
            if gamma.requires_grad:
                gamma._accumulate(ggamma, owned=True)
            if beta.requires_grad:
                beta._accumulate(gbeta, owned=True)
            if a.requires_grad:
                a._accumulate(gx.reshape(x.shape), owned=True)
        tape.record(out, _bwd)
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (the BERT-family `gelu_new` form)."""
    x = a.data
    fused = _fusable(x)
    if fused:
        t = np.empty_like(x)
        _K.gelu_inner(x, t)
        np.tanh(t, out=t)
        y = np.empty_like(x)
        _K.gelu_combine(x, t, y)
    else:
        t = x * x
        t *= x
        t *= _GELU_K
        t += x
        t *= _GELU_C
        np.tanh(t, out=t)
        y = t + 1.0
        y *= x
        y *= 0.5
    out, tape = _track((a,), y)
    if tape is not None:
        def _bwd(g):
            # d/dx = 0.5(1+t) + 0.5 x (1-t^2) C (1 + 3K x^2)
            if fused and _fusable(g):
                w = np.empty_like(x)
                _K.gelu_backward(x, t, g, w)
            else:
                du = x * x
                du *= 3.0 * _GELU_K
                du += 1.0
                du *= _GELU_C
                w = t * t
                np.subtract(1.0, w, out=w)
                w *= du
                w *= x
                w *= 0.5
                du = None
                w += 0.5
                w += 0.5 * t
                w *= g
            a._accumulate(w, owned=True)
        tape.record(out, _bwd)
    return out


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding_lookup: index outside table of {table.shape[0]} rows"
        )
    out, tape = _track((table,), table.data[idx])
    if tape is not None:
        def _bwd(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table._accumulate(gt, owned=True)
        tape.record(out, _bwd)
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise AutogradError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    out, tape = _track((a,), a.data * keep)
    if tape is not None:
        def _bwd(g):
            a._accumulate(g * keep, owned=True)
        tape.record(out, _bwd)
    return out


def masked_cross_entropy(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over positions whose label is not `ignore_index`.

    ``logits`` has shape (..., num_classes); ``labels`` the matching leading
    shape.  Gradient is exactly zero at ignored positions.
    """
    y = np.asarray(labels)
    if y.shape != logits.shape[:-1]:
        raise DimensionError(
            f"masked_cross_entropy: labels {y.shape} do not match logits {logits.shape}"
        )
    mask = y != ignore_index
    n = int(mask.sum())
    if n == 0:
        raise AutogradError("masked_cross_entropy: no labeled positions")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se))[..., 0]
    safe = np.where(mask, y, 0)
    true_logit = np.take_along_axis(x, safe[..., None], axis=-1)[..., 0]
    loss_val = ((lse - true_logit) * mask).sum() / n
    out, tape = _track((logits,), np.asarray(loss_val, dtype=x.dtype))
    if tape is not None:
        def _bwd(g):
            p = e / se
            grad = p.copy()
            flat = grad.reshape(-1, grad.shape[-1])
            fm = mask.reshape(-1)
            fy = safe.reshape(-1)
            flat[np.arange(flat.shape[0]), fy] -= 1.0
            flat[~fm] = 0.0
            logits._accumulate((g / n) * flat.reshape(grad.shape), owned=True)
        tape.record(out, _bwd)
    return out
