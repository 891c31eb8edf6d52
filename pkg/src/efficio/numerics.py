"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of ops a decoder-only transformer needs are provided. Every op
is a plain function taking :class:`Tensor` inputs; when a :class:`Tape` is
active and an input requires a gradient, the op appends a backward closure to
the tape. Gradients for a tensor used at several graph sites are summed, which
is what makes cross-layer parameter sharing work without special casing.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericalAbort, UsageError

DTYPE = np.float64
LN_EPS = 1e-5
GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    """Immutable-by-convention float64 array plus a requires_grad flag."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, what: str) -> "Tensor":
        _check_finite(arr, what)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction is much cheaper than np.isfinite(arr).all(); any NaN/Inf
    # propagates into the sum
    if arr.size and not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise NumericalAbort(f"non-finite values produced by {what}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops executed inside ``with Tape():``.

    After :meth:`backward`, :meth:`grad` returns the accumulated gradient of
    any tensor that required one. A tape is single-owner and single-use.
    """

    def __init__(self):
        self._nodes: list = []
        self._grads: dict = {}
        self._done = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self._nodes.append((out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar, got shape {loss.shape}")
        if self._done:
            raise UsageError("tape has already been differentiated")
        self._done = True
        grads = {id(loss): (loss, np.ones_like(loss.data))}
        for out, inputs, backward in reversed(self._nodes):
            entry = grads.pop(id(out), None)
            if entry is None:
                continue
            for inp, gi in zip(inputs, backward(entry[1])):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = (inp, gi if prev is None else prev[1] + gi)
        # only leaves remain; each entry holds its tensor so the id stays valid
        self._grads = grads
        self._nodes = []

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the differentiated loss w.r.t. ``t`` (zeros if unused)."""
        if not self._done:
            raise UsageError("call backward() before grad()")
        entry = self._grads.get(id(t))
        if entry is None or entry[0] is not t:
            return np.zeros_like(t.data)
        return entry[1]


def _make(arr: np.ndarray, inputs: Sequence[Tensor], backward: Callable, what: str) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs, what)
    if needs:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows ``table[ids]``; scatter-adds on the way back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"token id out of range [0, {table.shape[0]})")
    rows = table.shape

    def backward(g):
        out = np.zeros(rows, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (out,)

    return _make(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared across any leading batch axes of ``a``) or have
    the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if b.ndim == 2:
        k, n = bd.shape
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(*lead, n)

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(*lead, k) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for x [..., k], w [k, n], b [n] as a single tape node."""
    if b is None:
        return matmul(x, w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match weight {w.shape}")
    wd = w.data
    k, n = wd.shape
    lead = x.shape[:-1]
    # one flat GEMM is much faster than numpy's per-batch loop for nd @ 2d
    x2 = x.data.reshape(-1, k)
    y = x2 @ wd
    y += b.data
    y = y.reshape(*lead, n)

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(*lead, k) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(y, (x, w, b), backward, "linear")


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) gives masked entries
    probability exactly 0; every row must keep at least one entry.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a last axis of size >= 1, got {x.shape}")
    p = _softmax(x.data, mask)

    def backward(g):
        gp = g * p
        s = gp.sum(axis=-1, keepdims=True)
        np.subtract(g, s, out=gp)
        gp *= p
        return (gp,)

    return _make(p, (x,), backward, "softmax")


def _softmax(z: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    z = np.where(mask, z, -np.inf) if mask is not None else z.copy()
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def causal_self_attention(x: Tensor, w_q: Tensor, b_q: Tensor, w_k: Tensor, b_k: Tensor,
                          w_v: Tensor, b_v: Tensor, num_heads: int) -> Tensor:
    """Multi-head causal attention context [B, T, H] (before the output projection).

    Fuses the q/k/v projections, per-head scaled dot products, the causal
    softmax and the weighted sum of values into one tape node. Scores are
    scaled by ``1/sqrt(H / num_heads)``.
    """
    B, T, H = x.shape
    if H % num_heads:
        raise DimensionError(f"num_heads={num_heads} does not divide width {H}")
    for w in (w_q, w_k, w_v):
        if w.shape != (H, H):
            raise DimensionError(f"projection shape {w.shape} does not match width {H}")
    hd = H // num_heads
    c = 1.0 / math.sqrt(hd)
    x2 = x.data.reshape(B * T, H)
    W = np.concatenate([w_q.data, w_k.data, w_v.data], axis=1)
    bias = np.concatenate([b_q.data, b_k.data, b_v.data])
    qkv = (x2 @ W + bias).reshape(B, T, 3, num_heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    p = _softmax((q @ k.swapaxes(-1, -2)) * c, causal_mask(T))
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(B, T, H)
    inputs = (x, w_q, b_q, w_k, b_k, w_v, b_v)

    def backward(g):
        gctx = g.reshape(B, T, num_heads, hd).transpose(0, 2, 1, 3)
        gv = p.swapaxes(-1, -2) @ gctx
        gs = gctx @ v.swapaxes(-1, -2)
        gs -= (gs * p).sum(axis=-1, keepdims=True)
        gs *= p
        gs *= c
        gq = gs @ k
        gk = gs.swapaxes(-1, -2) @ q
        gqkv = np.stack([gq, gk, gv]).transpose(1, 3, 0, 2, 4).reshape(B * T, 3 * H)
        gx = (gqkv @ W.T).reshape(B, T, H) if x.requires_grad else None
        gW = x2.T @ gqkv
        gb = gqkv.sum(axis=0)
        return (gx, gW[:, :H], gb[:H], gW[:, H:2 * H], gb[H:2 * H], gW[:, 2 * H:], gb[2 * H:])

    return _make(ctx, inputs, backward, "attention")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu, or gelu with the tanh approximation."""
    xd = x.data
    if kind == "relu":
        on = xd > 0
        return _make(np.where(on, xd, 0.0), (x,), lambda g: (g * on,), "relu")
    if kind == "gelu":
        x2 = xd * xd
        t = x2 * (_SQRT_2_OVER_PI * GELU_COEF)
        t += _SQRT_2_OVER_PI
        t *= xd
        np.tanh(t, out=t)
        half = t + 1.0
        half *= 0.5
        out = xd * half

        def backward(g):
            # d/dx = half + 0.5 x (1 - t^2) u'
            du = x2 * (3.0 * _SQRT_2_OVER_PI * GELU_COEF)
            du += _SQRT_2_OVER_PI
            r = t * t
            np.subtract(1.0, r, out=r)
            r *= du
            r *= xd
            r *= 0.5
            r += half
            r *= g
            return (r,)

        return _make(out, (x,), backward, "gelu")
    raise ConfigError(f"activation must be 'relu' or 'gelu', got {kind!r}")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token negative log-likelihood in nats."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise DataError(f"target id out of range [0, {V})")
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    N = t.size
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(N)
    loss = float((lse - z[rows, t]).sum() / N)
    shape = logits.shape

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return ((p * (float(g) / N)).reshape(shape),)

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


def causal_mask(T: int) -> np.ndarray:
    """Boolean [T, T] mask, True where key position <= query position."""
    return np.tril(np.ones((T, T), dtype=bool))


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor. The error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise UsageError(f"step h must be in [1e-6, 1e-4], got {h}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=DTYPE)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise UsageError("grad_check needs f to return a scalar Tensor")
    tape.backward(out)
    analytic = tape.grad(x).reshape(-1)

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
