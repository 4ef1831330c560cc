"""Dense tensors with a recording tape for reverse-mode differentiation."""

import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import special

from xstream.exceptions import MaskError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
MASK_FILL = -1e9 # Additive mask value, finite so that no inf - inf can occur
LAYER_NORM_EPS = 1e-5

_local = threading.local()


class Tensor:
    """
    Immutable dense array of float32 or float64 scalars.

    Parameters
    ----------
    data : array_like
        Values. Copied and frozen.
    dtype : numpy dtype, optional
        Storage type. Defaults to the dtype of `data` when it is a float
        array, float32 otherwise.
    """

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        if dtype is None:
            dtype = getattr(data, "dtype", np.float32)
            if np.dtype(dtype) not in DTYPES:
                dtype = np.float32
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64.")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        obj = cls.__new__(cls)
        arr.flags.writeable = False
        obj._data = arr
        return obj

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        """Untracked copy in another dtype."""
        return Tensor(self._data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass(frozen=True)
class TapeEntry:
    """One primitive application recorded on a tape."""
    op: str
    inputs: tuple
    output: int
    saved: tuple
    forward: Callable
    vjp: Callable


class Tape:
    """
    Ordered record of primitive applications.

    Used as a context manager: every primitive evaluated inside the block
    whose inputs depend on a watched tensor is recorded. Node ids are
    assigned in creation order, so the record is topological by
    construction. A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._ids: dict[int, int] = {}
        self._values: list[np.ndarray] = []
        self._alive: list[Tensor] = []
        self._tracked: set[int] = set()
        self._leaves: set[int] = set()
        self._watched: list[int] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _register(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key in self._ids:
            return self._ids[key]
        nid = len(self._values)
        self._ids[key] = nid
        self._values.append(tensor.data)
        self._alive.append(tensor)
        return nid

    def watch(self, tensor: Tensor) -> Tensor:
        """Marks `tensor` as a differentiable leaf and returns it."""
        nid = self._register(tensor)
        if nid not in self._tracked:
            self._watched.append(nid)
        self._tracked.add(nid)
        self._leaves.add(nid)
        return tensor

    def node(self, tensor: Tensor) -> int | None:
        """Node id of `tensor` on this tape, if any."""
        return self._ids.get(id(tensor))

    def is_tracked(self, tensor: Tensor) -> bool:
        nid = self.node(tensor)
        return nid is not None and nid in self._tracked

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        forward: Callable,
        vjp: Callable,
        saved: tuple = (),
        ) -> None:
        """Appends one entry if any input depends on a watched tensor."""
        if not any(self.is_tracked(t) for t in inputs):
            return
        ids = []
        for t in inputs:
            nid = self._register(t)
            if nid not in self._tracked:
                self._leaves.add(nid)
            ids.append(nid)
        out_id = self._register(output)
        self._tracked.add(out_id)
        self.entries.append(TapeEntry(op, tuple(ids), out_id, saved, forward, vjp))

    def value(self, nid: int) -> np.ndarray:
        return self._values[nid]

    def replay(self) -> dict[int, np.ndarray]:
        """
        Re-evaluates every entry from the leaf values.

        Returns
        -------
        dict
            Node id to recomputed value, for every recorded output.
        """
        values = {nid: self._values[nid] for nid in self._leaves}
        for entry in self.entries:
            values[entry.output] = entry.forward(*(values[i] for i in entry.inputs))
        return {e.output: values[e.output] for e in self.entries}


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes

def current_tape() -> Tape | None:
    """Innermost active tape of this thread."""
    stack = _stack()
    return stack[-1] if stack else None

def apply_op(
    name: str,
    forward: Callable[..., np.ndarray],
    inputs: Sequence[Tensor],
    vjp: Callable,
    ) -> Tensor:
    """
    Evaluates a primitive and records it on the active tape.

    Parameters
    ----------
    name : str
        Primitive name, for diagnostics.
    forward : callable
        Pure function of the input arrays returning the output array.
    inputs : sequence of Tensor
        Operands.
    vjp : callable
        ``vjp(g, out, *arrays)`` returning one gradient (or None) per input.

    Returns
    -------
    Tensor
        The output.

    Raises
    ------
    NonFiniteError
        When the output holds NaN or Inf.
    """
    arrays = [t.data for t in inputs]
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) > 1:
        raise ShapeError(f"{name}: mixed dtypes {sorted(str(d) for d in dtypes)}")
    out = np.asarray(forward(*arrays))
    if arrays:
        out = out.astype(arrays[0].dtype, copy=False)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    result = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None:
        tape.record(
            name,
            inputs,
            result,
            forward,
            lambda g, _out=out, _arrays=arrays: vjp(g, _out, *_arrays),
            saved=(out, *arrays),
            )
    return result

def _check_leading_broadcast(name, a_shape, b_shape):
    if a_shape == b_shape:
        return
    n = len(b_shape)
    if n > len(a_shape) or tuple(a_shape[len(a_shape) - n:]) != tuple(b_shape):
        raise ShapeError(f"{name}: cannot combine {a_shape} with {b_shape}")

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.reshape((-1, *shape)).sum(axis=0)

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. `b` may omit leading axes of `a`."""
    _check_leading_broadcast("add", a.shape, b.shape)
    return apply_op(
        "add", np.add, [a, b],
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        )

def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("sub", a.shape, b.shape)
    return apply_op(
        "sub", np.subtract, [a, b],
        lambda g, out, x, y: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)),
        )

def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("mul", a.shape, b.shape)
    return apply_op(
        "mul", np.multiply, [a, b],
        lambda g, out, x, y: (
            _unbroadcast(g * y, x.shape),
            _unbroadcast(g * x, y.shape),
            ),
        )

def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op("scale", lambda x: x * c, [a], lambda g, out, x: (g * c,))

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    `a` is ``[..., m, k]``; `b` is either ``[k, n]`` (shared across the
    leading axes of `a`) or ``[..., k, n]`` with the same leading axes.

    Raises
    ------
    ShapeError
        If inner extents or leading axes differ.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading axes differ: {a.shape} x {b.shape}")

    def vjp(g, out, x, y):
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        if y.ndim == 2 and x.ndim > 2:
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return gx, gy

    return apply_op("matmul", np.matmul, [a, b], vjp)

def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    return apply_op(
        "reshape", lambda x: x.reshape(shape), [a],
        lambda g, out, x: (g.reshape(x.shape),),
        )

def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    return apply_op(
        "swapaxes", lambda x: np.swapaxes(x, axis1, axis2), [a],
        lambda g, out, x: (np.swapaxes(g, axis1, axis2),),
        )

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenation along `axis`."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")

    def vjp(g, out, *xs):
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op("concat", lambda *xs: np.concatenate(xs, axis=axis), tensors, vjp)

def sum(a: Tensor) -> Tensor: # noqa: A001
    """Sum of all elements, as a scalar tensor."""
    return apply_op(
        "sum", lambda x: np.sum(x), [a],
        lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),),
        )

def mean(a: Tensor) -> Tensor:
    n = a.size
    return apply_op(
        "mean", lambda x: np.sum(x) / n, [a],
        lambda g, out, x: (np.broadcast_to(g / n, x.shape).copy(),),
        )

def exp(a: Tensor) -> Tensor:
    return apply_op("exp", np.exp, [a], lambda g, out, x: (g * out,))

def log(a: Tensor) -> Tensor:
    return apply_op("log", np.log, [a], lambda g, out, x: (g / x,))

def tanh(a: Tensor) -> Tensor:
    return apply_op("tanh", np.tanh, [a], lambda g, out, x: (g * (1.0 - out * out),))

def relu(a: Tensor) -> Tensor:
    return apply_op(
        "relu", lambda x: np.maximum(x, 0), [a],
        lambda g, out, x: (g * (x > 0),),
        )

def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    def forward(x):
        return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))

    def vjp(g, out, x):
        cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return apply_op("gelu", forward, [a], vjp)

def _softmax_kernel(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)

def _softmax_vjp(g, p):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    return apply_op(
        "softmax", _softmax_kernel, [a],
        lambda g, out, x: (_softmax_vjp(g, out),),
        )

def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """
    Softmax over the last axis restricted to allowed keys.

    Disallowed scores are replaced by `MASK_FILL` before normalization and
    the resulting probabilities are set to exactly zero afterwards. With an
    all-true mask the result is bitwise equal to `softmax`.

    Parameters
    ----------
    scores : Tensor
        ``[..., Tq, Tk]`` attention logits.
    mask : np.ndarray of bool
        ``[Tq, Tk]`` allowance matrix shared across leading axes.

    Raises
    ------
    MaskError
        If the mask shape does not match or a query row allows no key.
    """
    mask = np.asarray(mask, dtype=bool)
    if scores.ndim < 2 or mask.shape != scores.shape[-2:]:
        raise MaskError(f"mask shape {mask.shape} does not fit scores {scores.shape}")
    if not mask.any(axis=-1).all():
        row = int(np.argmin(mask.any(axis=-1)))
        raise MaskError(f"query row {row} has no allowed key")

    def forward(x):
        p = _softmax_kernel(np.where(mask, x, MASK_FILL).astype(x.dtype, copy=False))
        return np.where(mask, p, 0).astype(x.dtype, copy=False)

    return apply_op(
        "masked_softmax", forward, [scores],
        lambda g, out, x: (_softmax_vjp(g, out),),
        )

def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    return apply_op(
        "log_softmax", lambda x: special.log_softmax(x, axis=-1), [a],
        lambda g, out, x: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
        )

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Normalizes the last axis to zero mean and unit variance, then applies
    ``gain`` and ``bias``.
    """
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least two features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} != ({d},)")

    def normalize(v):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps), var

    def forward(v, w, b):
        xhat, _ = normalize(v)
        return xhat * w + b

    def vjp(g, out, v, w, b):
        xhat, var = normalize(v)
        gx_hat = g * w
        inv_std = 1.0 / np.sqrt(var + eps)
        gv = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            )
        return gv, _unbroadcast(g * xhat, w.shape), _unbroadcast(g, b.shape)

    return apply_op("layer_norm", forward, [x, gain, bias], vjp)

def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """
    Strictly causal 1-D convolution.

    ``out[t] = sum_i x[t - k + 1 + i] @ kernel[i]`` with zero rows before the
    start, so ``out[t]`` only reads ``x[t-k+1 .. t]``.

    Parameters
    ----------
    x : Tensor
        ``[T, d_in]`` sequence.
    kernel : Tensor
        ``[k, d_in, d_out]`` taps, oldest first.
    """
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1d shapes do not fit: {x.shape}, {kernel.shape}")
    k = kernel.shape[0]
    if k < 1:
        raise ShapeError("conv1d kernel width must be at least 1")

    def pad(v):
        return np.concatenate([np.zeros((k - 1, v.shape[1]), dtype=v.dtype), v], axis=0)

    def forward(v, w):
        vp = pad(v)
        n = v.shape[0]
        out = np.zeros((n, w.shape[2]), dtype=v.dtype)
        for i in range(k):
            out += vp[i:i + n] @ w[i]
        return out

    def vjp(g, out, v, w):
        vp = pad(v)
        n = v.shape[0]
        gvp = np.zeros_like(vp)
        gw = np.zeros_like(w)
        for i in range(k):
            gvp[i:i + n] += g @ w[i].T
            gw[i] = vp[i:i + n].T @ g
        return gvp[k - 1:], gw

    return apply_op("conv1d", forward, [x, kernel], vjp)

def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of `table` selected by integer `ids`."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")

    def vjp(g, out, w):
        gw = np.zeros_like(w)
        np.add.at(gw, idx, g)
        return (gw,)

    return apply_op("embedding", lambda w: w[idx], [table], vjp)

def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """``out[i, j] = a[i] + b[j]`` for ``a: [m, d]`` and ``b: [n, d]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"outer_add shapes do not fit: {a.shape}, {b.shape}")
    return apply_op(
        "outer_add", lambda x, y: x[:, None, :] + y[None, :, :], [a, b],
        lambda g, out, x, y: (g.sum(axis=1), g.sum(axis=0)),
        )

def dropout(
    x: Tensor,
    rate: float,
    rng: np.random.Generator | None,
    ) -> Tensor:
    """Inverted dropout. Identity when `rate` is 0 or `rng` is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor._wrap(keep))

def backward(
    tape: Tape,
    root: Tensor,
    wrt: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
    ):
    """
    Reverse-mode accumulation from a scalar root.

    Parameters
    ----------
    tape : Tape
        Tape the root was computed under.
    root : Tensor
        Scalar output.
    wrt : mapping or iterable of Tensor, optional
        Tensors to return gradients for. Defaults to every watched leaf,
        keyed by node id.

    Returns
    -------
    dict or list
        Gradients shaped like their tensors, keyed like `wrt`. Tensors that
        do not influence the root receive zeros.

    Raises
    ------
    ShapeError
        If the root is not a scalar.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    rid = tape.node(root)
    if rid is not None and rid in tape._tracked:
        grads[rid] = np.ones_like(root.data)
        for entry in reversed(tape.entries):
            g = grads.get(entry.output)
            if g is None:
                continue
            del grads[entry.output]
            for nid, gi in zip(entry.inputs, entry.vjp(g)):
                if gi is None or nid not in tape._tracked:
                    continue
                gi = np.asarray(gi, dtype=tape.value(nid).dtype).reshape(tape.value(nid).shape)
                grads[nid] = grads[nid] + gi if nid in grads else gi

    def grad_of(t: Tensor) -> np.ndarray:
        nid = tape.node(t)
        if nid is None or nid not in grads:
            return np.zeros(t.shape, dtype=t.dtype)
        return grads[nid]

    if wrt is None:
        return {nid: grads.get(nid, np.zeros_like(tape.value(nid))) for nid in tape._watched}
    if isinstance(wrt, Mapping):
        return {name: grad_of(t) for name, t in wrt.items()}
    return [grad_of(t) for t in wrt]

def finite_difference_gradcheck(
    f: Callable[..., Tensor],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    ) -> float:
    """
    Largest relative error between analytic and central-difference gradients.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.

    Parameters
    ----------
    f : callable
        Deterministic function of ``len(params)`` tensors returning a scalar.
    params : sequence of np.ndarray
        Evaluation point, float64.
    step : float, optional
        Central-difference half step.

    Returns
    -------
    float
        Maximum relative error over all coordinates of all parameters.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    with Tape() as tape:
        tensors = [tape.watch(Tensor(p)) for p in params]
        out = f(*tensors)
    analytic = backward(tape, out, tensors)

    worst = 0.0
    for k, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += step
            minus[k][idx] -= step
            f_plus = f(*(Tensor(q) for q in plus)).item()
            f_minus = f(*(Tensor(q) for q in minus)).item()
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[k][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    logger.debug("gradcheck over %d tensors: max relative error %.3e", len(params), worst)
    return worst
