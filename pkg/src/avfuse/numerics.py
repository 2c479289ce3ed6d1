"""Dense tensors with reverse-mode autodiff.

Everything downstream (encoders, fusion, training) computes on this module.
Tensors wrap numpy arrays; operations record vector-Jacobian products onto an
explicitly opened :class:`GradTape`, and :func:`backward` replays the tape to
produce one gradient per ``requires_grad`` leaf.  A finite-difference
:func:`gradcheck` harness verifies analytic gradients.

Conventions that the rest of the package relies on:

* float64 by default (``set_default_dtype`` switches to float32 for speed;
  all stated tolerances assume float64),
* every forward result is checked for NaN/Inf and rejected,
* op ordering is deterministic, so repeated runs are bit-identical,
* masked attention logits are *set* to a large negative finite constant
  (never ``-inf``), which makes causal outputs bit-invariant to future
  positions while keeping the finiteness invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, DomainError, UsageError

_DEFAULT_DTYPE = np.float64

# Large negative finite logit for masked attention positions.  Any real logit
# added near it is absorbed (|logit| << ulp(1e30)), and exp() underflows to an
# exact 0.0, which is what makes causality bit-exact.
MASKED_LOGIT = -1.0e30

_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    """Set the global tensor dtype (float64 or float32)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported tensor dtype {dt}; use float64 or float32")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense real-valued array plus autodiff metadata.

    Treat instances as immutable once created; optimizer updates replace
    ``data`` wholesale between tapes, never during one.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the free functions do the actual work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of operations sufficient to compute VJPs.

    One training step owns one tape (single writer).  Use as a context
    manager; ops executed inside record themselves when any input requires
    gradients.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise UsageError("GradTape contexts closed out of order")

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._entries.append((out, inputs, vjp))

    def __len__(self) -> int:
        return len(self._entries)


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite values produced by {opname}")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _result(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, opname: str) -> Tensor:
    _check_finite(out_data, opname)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    if track:
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow becomes a DomainError in _result
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a) -> Tensor:
    """Elementwise logistic function, clamped into the open interval (0, 1)."""
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    one = x.dtype.type(1.0)
    zero = x.dtype.type(0.0)
    np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero), out=out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), vjp, "sigmoid")


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, which keeps gradcheck clean."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT_2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _result(out, (a,), vjp, "gelu")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _result(np.asarray(out), (a,), vjp, "sum")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2))
    return _result(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), vjp, "concat")


def slice_axis(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def vjp(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full[idx] = g
        return (full,)

    return _result(out, (a,), vjp, "slice_axis")


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ``ids`` (any leading shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise UsageError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros(table.shape, dtype=table.data.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _result(out, (table,), vjp, "embedding")


def where_mask(mask: np.ndarray, a, fill: float) -> Tensor:
    """Keep ``a`` where ``mask`` is True, replace by the constant ``fill`` elsewhere.

    The mask is a constant: no gradient flows through the selection itself.
    """
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, a.data.dtype.type(fill))

    def vjp(g):
        return (_unbroadcast(np.where(mask, g, 0.0), a.shape),)

    return _result(out, (a,), vjp, "where_mask")


def take_along_last(a, idx: np.ndarray) -> Tensor:
    """Pick one entry per last-dim row: out[...] = a[..., idx[...]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _result(out, (a,), vjp, "take_along_last")


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    with np.errstate(over="ignore"):  # overflow becomes a DomainError in _result
        out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), vjp, "matmul")


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` broadcast over leading dims."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be 2-d, got {weight.shape}")
    k, n = weight.shape
    if x.shape[-1] != k:
        raise DimensionError(f"linear input width {x.shape[-1]} != weight rows {k}")
    if bias.shape != (n,):
        raise DimensionError(f"linear bias shape {bias.shape} != ({n},)")
    with np.errstate(over="ignore"):
        out = x.data @ weight.data + bias.data

    def vjp(g):
        gx = g @ weight.data.T
        xr = x.data.reshape(-1, k)
        gr = g.reshape(-1, n)
        gw = xr.T @ gr
        gb = gr.sum(axis=0)
        return gx.reshape(x.shape), gw, gb

    return _result(out, (x, weight, bias), vjp, "linear")


def softmax_lastdim(x) -> Tensor:
    """Stable softmax over the last dimension (max-subtraction)."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DomainError(f"softmax over empty last dimension, shape {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / s

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), vjp, "softmax_lastdim")


def log_softmax_lastdim(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DomainError(f"log_softmax over empty last dimension, shape {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), vjp, "log_softmax_lastdim")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row (last dim) standardization followed by an affine map."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DomainError("layer_norm over empty last dimension")
    if eps <= 0:
        raise DomainError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gain.data + bias.data

    def vjp(g):
        gy = g * gain.data
        gmean = gy.mean(axis=-1, keepdims=True)
        gproj = (gy * xn).mean(axis=-1, keepdims=True)
        gx = inv * (gy - gmean - xn * gproj)
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xn).sum(axis=lead)
        gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, L, d = t.shape
    h = reshape(t, (*lead, L, heads, d // heads))
    return swapaxes(h, -3, -2)  # (..., heads, L, d/heads)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, heads, L, e = t.shape
    h = swapaxes(t, -3, -2)
    return reshape(h, (*lead, L, heads * e))


def multi_head_attention(
    q_in,
    kv_in,
    params: AttentionParams,
    heads: int,
    causal: bool = False,
    kv_padding_mask: np.ndarray | None = None,
    attn_dropout: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Scaled dot-product multi-head attention with output projection.

    ``q_in`` is (..., L_q, d) and ``kv_in`` (..., L_kv, d); ``kv_in`` acts as
    both keys and values.  ``kv_padding_mask`` marks *valid* kv positions
    (True = attend) with shape (L_kv,) or (batch, L_kv).  Causal attention
    requires L_q == L_kv and forbids attending past the query index.  A query
    row whose kv positions are all masked is an error, not a NaN.
    """
    q_in, kv_in = _as_tensor(q_in), _as_tensor(kv_in)
    d = q_in.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by heads {heads}")
    if kv_in.shape[-1] != d:
        raise DimensionError(f"query width {d} != key/value width {kv_in.shape[-1]}")
    L_q, L_kv = q_in.shape[-2], kv_in.shape[-2]
    if causal and L_q != L_kv:
        raise DimensionError(f"causal attention needs L_q == L_kv, got {L_q} vs {L_kv}")
    if L_kv == 0:
        raise DomainError("attention with zero key/value positions")

    q = _split_heads(linear(q_in, params.wq, params.bq), heads)
    k = _split_heads(linear(kv_in, params.wk, params.bk), heads)
    v = _split_heads(linear(kv_in, params.wv, params.bv), heads)

    scale = 1.0 / math.sqrt(d / heads)
    logits = mul(matmul(q, swapaxes(k, -1, -2)), scale)  # (..., heads, L_q, L_kv)

    valid = np.ones((L_q, L_kv), dtype=bool)
    if causal:
        valid = np.tril(valid)
    if kv_padding_mask is not None:
        km = np.asarray(kv_padding_mask, dtype=bool)
        if km.shape[-1] != L_kv:
            raise DimensionError(f"kv_padding_mask length {km.shape[-1]} != L_kv {L_kv}")
        km = km.reshape(km.shape[:-1] + (1, 1, L_kv))
        valid = valid & km
    if not np.broadcast_to(valid, logits.shape).any(axis=-1).all():
        raise DomainError("attention row with every key/value position masked")
    if causal or kv_padding_mask is not None:
        logits = where_mask(valid, logits, MASKED_LOGIT)

    probs = softmax_lastdim(logits)
    if attn_dropout > 0.0 and dropout_rng is not None:
        keep = (dropout_rng.random(probs.shape) >= attn_dropout).astype(probs.data.dtype)
        probs = mul(probs, keep / (1.0 - attn_dropout))

    ctx = _merge_heads(matmul(probs, v))
    return linear(ctx, params.wo, params.bo)


# ---------------------------------------------------------------------------
# reverse pass and verification
# ---------------------------------------------------------------------------


def backward(output: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` backwards from a scalar ``output``.

    Returns a dict with exactly one gradient per requires_grad leaf that
    participated in the tape (zero-filled if the leaf did not influence the
    output).  Leaf ``.grad`` fields are populated as a convenience.
    """
    if output.data.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    produced = {id(out) for out, _, _ in tape._entries}

    leaves: list[Tensor] = []
    seen: set[int] = set()
    for _, inputs, _ in tape._entries:
        for t in inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in seen:
                seen.add(id(t))
                leaves.append(t)

    for out, inputs, vjp in reversed(tape._entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = vjp(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi

    result: dict[Tensor, np.ndarray] = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        if g.shape != leaf.data.shape:  # pragma: no cover - internal invariant
            raise DimensionError(f"gradient shape {g.shape} != leaf shape {leaf.shape}")
        leaf.grad = g
        result[leaf] = g
    return result


def gradcheck(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    step: float = 1e-6,
    exclusion_predicate: Callable[[int], bool] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    Returns the max over probed coordinates of
    ``|analytic - fd| / max(1, |fd|)``.  ``exclusion_predicate(i)`` skips flat
    coordinates, which is how callers avoid probing across the fusion mask's
    hard threshold.  ``max_coords`` probes a seeded random subset instead of
    every coordinate (needed for large parameter groups).
    """
    if not 0.0 < step <= 1e-2:
        raise UsageError(f"gradcheck step must be in (0, 1e-2], got {step}")
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    if base.dtype != np.float64:
        raise UsageError("gradcheck requires float64 inputs")

    leaf = Tensor(base.copy(), requires_grad=True)
    with GradTape() as tape:
        out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise UsageError("gradcheck function must return a scalar Tensor")
    analytic = backward(out, tape)[leaf].reshape(-1)

    n = base.size
    coords: Iterable[int]
    if max_coords is not None and max_coords < n:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
    else:
        coords = range(n)

    flat = base.reshape(-1)
    max_err = 0.0
    for i in coords:
        if exclusion_predicate is not None and exclusion_predicate(i):
            continue
        probe = flat.copy()
        probe[i] = flat[i] + step
        f_plus = f(Tensor(probe.reshape(base.shape))).item()
        probe[i] = flat[i] - step
        f_minus = f(Tensor(probe.reshape(base.shape))).item()
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise DomainError(f"non-finite value while probing coordinate {i}")
        fd = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[i] - fd) / max(1.0, abs(fd))
        if err > max_err:
            max_err = err
    return max_err
