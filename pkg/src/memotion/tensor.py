"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient; outside a tape everything runs in plain
inference mode. Gradients of trainable (leaf) tensors accumulate in
``Tensor.grad``; intermediate gradients live only for the duration of
:meth:`Tape.backward`.

Arrays created from Python data use the default dtype (32-bit unless changed
with :func:`default_dtype`). Floating numpy arrays keep their own dtype, and
mixed-precision arithmetic follows numpy promotion, which is what lets
:func:`finite_diff_check` evaluate its reference differences in 64-bit.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, InputError, ShapeError

_default_dtype = np.dtype(np.float32)
_tapes: list["Tape"] = []


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; ``stream`` keys independent sub-streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


class Tensor:
    __slots__ = ("values", "grad", "trainable", "name", "_requires_grad", "_tape")

    def __init__(self, values, trainable: bool = False, name: str | None = None):
        if isinstance(values, (np.ndarray, np.floating)) and values.dtype.kind == "f":
            arr = np.asarray(values)
        else:
            arr = np.asarray(values, dtype=_default_dtype)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.name = name
        self._requires_grad = False
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def requires_grad(self) -> bool:
        return self.trainable or self._requires_grad

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else _not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, trainable={self.trainable})"

    # operator sugar -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a topological order of the computation, so walking it in
    reverse visits each operation once, after all of its consumers.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.trainable and loss._tape is None:
            loss.grad = np.ones_like(loss.values) if loss.grad is None else loss.grad + 1
            return
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for out, inputs, backward_fn in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ContractError(f"gradient shape {gi.shape} does not match tensor shape {t.shape}")
                if t.trainable:
                    t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    pending[key] = gi if key not in pending else pending[key] + gi


def backward(loss: Tensor):
    """Populate ``grad`` on every trainable tensor that ``loss`` depends on."""
    if loss._tape is None and not loss.trainable:
        raise ContractError("loss is not on a tape; run the forward pass inside `with Tape():`")
    tape = loss._tape if loss._tape is not None else Tape()
    tape.backward(loss)


def _result(values: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(values)
    if _tapes and any(t.requires_grad for t in inputs):
        tape = _tapes[-1]
        out._requires_grad = True
        out._tape = tape
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.values + b, (a,), lambda g: (g,))
    a = _lift(a, b)
    return _result(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.values - b, (a,), lambda g: (g,))
    return _result(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.values, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.values * b, (a,), lambda g: (g * b,))
    av, bv = a.values, b.values
    return _result(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.values / b, (a,), lambda g: (g / b,))
    av, bv = a.values, b.values
    return _result(
        av / bv,
        (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)),
    )


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _result(y, (a,), lambda g: (g * y,))


def clamped_log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); zero gradient where the floor is active."""
    v = np.maximum(a.values, floor)
    live = a.values > floor
    return _result(np.log(v), (a,), lambda g: (np.where(live, g / v, 0.0).astype(g.dtype),))


def cast(a: Tensor, dtype) -> Tensor:
    """Change precision; the gradient comes back in the input's dtype."""
    src = a.dtype
    return _result(a.values.astype(dtype), (a,), lambda g: (g.astype(src),))


# --- shape manipulation --------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.values.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward_fn(g):
        z = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _result(np.array(a.values[index]), (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis`` (the feature axis by default)."""
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tensors, backward_fn)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to axis length {a.shape[axis]}")
    axis = axis % a.ndim
    parts, start = [], 0
    for n in sizes:
        index = tuple([slice(None)] * axis + [slice(start, start + n)])
        parts.append(getitem(a, index))
        start += n
    return parts


# --- reductions ----------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(g.dtype, copy=True),)

    return _result(np.asarray(a.values.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.shape[i] for i in axes)
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --- linear algebra ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also batched over leading axes of ``a`` and ``b``."""
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    if a.ndim == 1:
        return _result(av @ bv, (a, b), lambda g: (bv @ g, np.outer(av, g)))

    def backward_fn(g):
        da = g @ np.swapaxes(bv, -1, -2)
        db = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _result(av @ bv, (a, b), backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --- activations ---------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    live = a.values > 0
    # np.maximum keeps NaN visible instead of zeroing it
    return _result(np.maximum(a.values, 0).astype(a.dtype), (a,), lambda g: (g * live,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _result(y, (a,), lambda g: (g * (1 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.values
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    y = 0.5 * x * (1 + t)

    def backward_fn(g):
        dt = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dt),)

    return _result(y, (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), backward_fn)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gv = gamma.values

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gv
        dx = inv_std * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _result(xhat * gv + beta.values, (a, gamma, beta), backward_fn)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: identity in eval mode or at rate 0, else mask and rescale."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) * (1.0 / (1.0 - rate))
    return _result(a.values * keep, (a,), lambda g: (g * keep,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"token id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}")

    def backward_fn(g):
        dt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _result(table.values[ids], (table,), backward_fn)


# --- convolutional ops ---------------------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """3x3 cross-correlation over ``C×H×W`` (or batched ``N×C×H×W``) input."""
    single = x.ndim == 3
    xv = x.values[None] if single else x.values
    if xv.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W or N×C×H×W input and 4-d kernels, got {x.shape} and {kernels.shape}")
    n, c, h, w = xv.shape
    c_out, c_in, kh, kw = kernels.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernels must be 3×3, got {kh}×{kw}")
    if c_in != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, kernels expect {c_in}")
    p = padding
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernels.values.reshape(c_out, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.values
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if single:
        out = out[0]
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def backward_fn(g):
        g4 = g[None] if single else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dk = (gm.T @ cols).reshape(kernels.shape)
        dcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xp.shape, dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho, j : j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + h, p : p + w]
        dx = dx[0] if single else dx
        grads = (np.ascontiguousarray(dx), dk)
        return grads if bias is None else grads + (gm.sum(axis=0),)

    return _result(out, inputs, backward_fn)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping 2×2 max-pool; ties route the gradient to the first (row-major) element."""
    if window != 2 or stride != 2:
        raise ShapeError("only window=2, stride=2 pooling is supported")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dimensions, got {h}×{w}")
    lead = x.shape[:-2]
    blocks = x.values.reshape(*lead, h // 2, 2, w // 2, 2).swapaxes(-3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg, g[..., None], axis=-1)
        gx = gb.reshape(*lead, h // 2, w // 2, 2, 2).swapaxes(-3, -2).reshape(x.shape)
        return (gx,)

    return _result(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: ``C×H×W -> C``."""
    h, w = x.shape[-2:]
    scale = 1.0 / (h * w)

    def backward_fn(g):
        return (np.broadcast_to(g[..., None, None] * scale, x.shape).astype(g.dtype, copy=True),)

    return _result(x.values.mean(axis=(-2, -1)), (x,), backward_fn)


# --- gradient checking ---------------------------------------------------------------


def gradient_errors(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-3,
    coords: Iterable[int] | None = None,
    numeric_dtype=np.float64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic and central-difference gradients of ``f`` at ``x``.

    ``f`` is called with ``x`` itself; for the numeric side ``x.values`` is
    temporarily replaced by a perturbed copy in ``numeric_dtype``. Returns
    ``(coords, analytic, numeric)``.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    saved_values, saved_grad, saved_flag = x.values, x.grad, x.trainable
    try:
        x.trainable = True
        x.grad = None
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
        analytic_full = np.zeros(x.shape, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
        idx = np.arange(x.size) if coords is None else np.asarray(list(coords), dtype=np.int64)
        base = saved_values.astype(numeric_dtype)
        numeric = np.empty(len(idx), dtype=np.float64)
        for k, i in enumerate(idx):
            probe = base.copy()
            probe.flat[i] += epsilon
            x.values = probe
            f_plus = float(f(x).values)
            probe.flat[i] -= 2 * epsilon
            f_minus = float(f(x).values)
            numeric[k] = (f_plus - f_minus) / (2 * epsilon)
        return idx, analytic_full.reshape(-1)[idx], numeric
    finally:
        x.values, x.grad, x.trainable = saved_values, saved_grad, saved_flag


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-3,
    coords: Iterable[int] | None = None,
    numeric_dtype=np.float64,
) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    _, analytic, numeric = gradient_errors(f, x, epsilon, coords, numeric_dtype)
    if analytic.size == 0:
        return 0.0
    return float(relative_errors(analytic, numeric).max())
