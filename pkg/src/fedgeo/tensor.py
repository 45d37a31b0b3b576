"""Dense float64 tensors with reverse-mode gradients over a fixed operator set.

Values are immutable once constructed and safe to share across threads.
A :class:`GradTape` records the primitive operations applied to tensors that
descend from its registered parameters; :func:`backward` replays the adjoints
in exact reverse order.  The operator set is intentionally closed: matmul,
add/sub/mul (with numpy broadcasting), relu, clamp, log, exp, acos, cos,
temperature softmax, row L2 normalization, logsumexp and plain reductions.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "clamp",
    "log",
    "exp",
    "acos",
    "cos",
    "softmax_with_temperature",
    "l2_normalize_rows",
    "logsumexp_rows",
    "sum_rows",
    "sum_all",
    "mean_all",
    "reshape",
    "one_hot",
]


class Tensor:
    """Immutable dense tensor of float64 values.

    ``data`` is exposed as a read-only numpy view; ``shape`` is a plain tuple.
    Tensors produced while a tape is recording carry a private node id used
    during the adjoint replay.
    """

    __slots__ = ("_data", "_tape", "_node")

    def __init__(self, data, shape=None):
        # np.array (not ascontiguousarray) keeps 0-d scalars 0-d
        arr = np.array(data, dtype=np.float64, order="C")
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        if not np.isfinite(arr).all():
            raise ContractError("tensor values must be finite")
        arr.flags.writeable = False
        self._data = arr
        self._tape = None
        self._node = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: "GradTape | None" = None, node: int = -1) -> "Tensor":
        """Internal constructor that takes ownership of ``arr`` without copying."""
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t._data = arr
        t._tape = tape
        t._node = node
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=np.float64))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def tracked(self) -> bool:
        return self._tape is not None

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self._data.reshape(()))

    def tolist(self):
        return self._data.tolist()

    def detach(self) -> "Tensor":
        """Return an untracked tensor sharing this tensor's values."""
        return Tensor._wrap(self._data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


class GradTape:
    """Ordered record of primitive operations for one backward pass.

    Single-owner: a tape consumed by :func:`backward` cannot be replayed
    again.  Parameters are registered by name via :meth:`parameter`, which
    returns a tracked tensor; any op touching a tracked tensor appends a
    record with the vector-Jacobian products of its inputs.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[tuple[int, Callable[[np.ndarray], np.ndarray]], ...]]] = []
        self._params: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._next_node = 0
        self._consumed = False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def parameter(self, name: str, tensor: Tensor) -> Tensor:
        """Register ``tensor`` under ``name`` and return its tracked alias."""
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered on this tape")
        node = self._new_node()
        self._params[name] = (node, tensor.shape)
        return Tensor._wrap(tensor.data, self, node)

    def _record(self, out_node, inputs):
        self._records.append((out_node, inputs))


def backward(tape: GradTape, loss: Tensor) -> dict[str, Tensor]:
    """Replay ``tape`` in reverse and return per-parameter gradients.

    ``loss`` must be a scalar tensor produced through ``tape``.  Every
    registered parameter gets a gradient of its own shape (zeros when the
    parameter does not influence the loss).  The tape is consumed.
    """
    if loss.shape != ():
        raise ContractError(f"backward() requires a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape or loss._node < 0:
        raise ContractError("loss was not produced through this tape")
    if tape._consumed:
        raise ContractError("tape already consumed by backward()")
    tape._consumed = True

    adjoints: dict[int, np.ndarray] = {loss._node: np.ones((), dtype=np.float64)}
    for out_node, inputs in reversed(tape._records):
        g = adjoints.pop(out_node, None)
        if g is None:
            continue
        for in_node, vjp in inputs:
            contrib = vjp(g)
            prev = adjoints.get(in_node)
            adjoints[in_node] = contrib if prev is None else prev + contrib

    grads: dict[str, Tensor] = {}
    for name, (node, shape) in tape._params.items():
        g = adjoints.get(node)
        if g is None:
            g = np.zeros(shape, dtype=np.float64)
        grads[name] = Tensor._wrap(np.ascontiguousarray(g))
    return grads


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t._tape is None:
            continue
        if t._tape._consumed:
            raise ContractError("operand belongs to a tape already consumed by backward()")
        if tape is None:
            tape = t._tape
        elif tape is not t._tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _emit(arr: np.ndarray, tape: GradTape | None, inputs) -> Tensor:
    """Wrap ``arr``; when recording, append the op's vjp records."""
    if tape is None:
        return Tensor._wrap(arr)
    node = tape._new_node()
    tracked = tuple((t._node, vjp) for t, vjp in inputs if t._tape is tape and t._node >= 0)
    if tracked:
        tape._record(node, tracked)
    return Tensor._wrap(arr, tape, node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _binary(op_name: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(op_name, a.shape, b.shape)
    tape = _tape_of(a, b)
    out = fwd(a.data, b.data)
    return _emit(
        out,
        tape,
        (
            (a, lambda g, sa=a.shape: _unbroadcast(vjp_a(g), sa)),
            (b, lambda g, sb=b.shape: _unbroadcast(vjp_b(g), sb)),
        ),
    )


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (e.g. batch + bias row)."""
    return _binary("add", a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    return _binary(
        "mul", a, b,
        lambda x, y: x * y,
        lambda g: g * b.data,
        lambda g: g * a.data,
    )


def matmul(a, b) -> Tensor:
    """2-D matrix product (B,n) @ (n,m)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    tape = _tape_of(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    if not np.isfinite(out).all():
        raise NumericError("matmul overflowed to non-finite values")
    return _emit(
        out,
        tape,
        (
            (a, lambda g: g @ b.data.T),
            (b, lambda g: a.data.T @ g),
        ),
    )


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = _as_tensor(x)
    tape = _tape_of(x)
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)
    return _emit(out, tape, ((x, lambda g: g * mask),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient is 1 strictly inside, 0 outside."""
    if not lo < hi:
        raise DomainError(f"clamp requires lo < hi, got [{lo}, {hi}]")
    x = _as_tensor(x)
    tape = _tape_of(x)
    inside = (x.data > lo) & (x.data < hi)
    out = np.clip(x.data, lo, hi)
    return _emit(out, tape, ((x, lambda g: g * inside),))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if (x.data <= 0.0).any():
        raise DomainError("log requires strictly positive values")
    tape = _tape_of(x)
    out = np.log(x.data)
    return _emit(out, tape, ((x, lambda g: g / x.data),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    tape = _tape_of(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.isfinite(out).all():
        raise NumericError("exp overflowed to non-finite values")
    return _emit(out, tape, ((x, lambda g: g * out),))


def acos(x) -> Tensor:
    x = _as_tensor(x)
    if (np.abs(x.data) >= 1.0).any():
        raise DomainError("acos requires values strictly inside (-1, 1); clamp first")
    tape = _tape_of(x)
    out = np.arccos(x.data)
    denom = np.sqrt(1.0 - x.data * x.data)
    return _emit(out, tape, ((x, lambda g: -g / denom),))


def cos(x) -> Tensor:
    x = _as_tensor(x)
    tape = _tape_of(x)
    out = np.cos(x.data)
    return _emit(out, tape, ((x, lambda g: -g * np.sin(x.data)),))


# ---------------------------------------------------------------------------
# row-wise ops
# ---------------------------------------------------------------------------

def _rows(x: Tensor, op_name: str) -> np.ndarray:
    if x.data.ndim == 1:
        return x.data.reshape(1, -1)
    if x.data.ndim == 2:
        return x.data
    raise ContractError(f"{op_name} expects a 1-D or 2-D tensor, got shape {x.shape}")


def softmax_with_temperature(x, tau: float) -> Tensor:
    """Row softmax of ``x / tau``; rows sum to 1 within 1e-12.

    The temperature divides the logits before exponentiation; computation is
    shifted by the row max so finite inputs can never overflow.
    """
    if not tau > 0.0:
        raise DomainError(f"temperature must be positive, got {tau}")
    x = _as_tensor(x)
    tape = _tape_of(x)
    rows = _rows(x, "softmax_with_temperature")
    with np.errstate(over="ignore"):
        scaled = rows / tau
    if not np.isfinite(scaled).all():
        raise NumericError("softmax_with_temperature: logits / tau overflowed")
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out2d = e / e.sum(axis=1, keepdims=True)
    out = out2d.reshape(x.shape)

    def vjp(g):
        g2 = g.reshape(out2d.shape)
        inner = (g2 * out2d).sum(axis=1, keepdims=True)
        return (out2d * (g2 - inner) / tau).reshape(x.shape)

    return _emit(out, tape, ((x, vjp),))


def l2_normalize_rows(x) -> Tensor:
    """Scale each row to unit Euclidean norm; zero rows are a contract error."""
    x = _as_tensor(x)
    tape = _tape_of(x)
    rows = _rows(x, "l2_normalize_rows")
    with np.errstate(over="ignore"):
        norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    if not np.isfinite(norms).all():
        raise NumericError("l2_normalize_rows overflowed to non-finite norms")
    if (norms == 0.0).any():
        raise ContractError("l2_normalize_rows: zero-norm row")
    out2d = rows / norms
    out = out2d.reshape(x.shape)

    def vjp(g):
        g2 = g.reshape(out2d.shape)
        inner = (g2 * out2d).sum(axis=1, keepdims=True)
        return ((g2 - out2d * inner) / norms).reshape(x.shape)

    return _emit(out, tape, ((x, vjp),))


def logsumexp_rows(x) -> Tensor:
    """Stable log-sum-exp of each row of a 2-D tensor; returns shape (B,)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ContractError(f"logsumexp_rows expects a 2-D tensor, got shape {x.shape}")
    tape = _tape_of(x)
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)
    soft = e / s
    return _emit(out, tape, ((x, lambda g: soft * g.reshape(-1, 1)),))


def sum_rows(x) -> Tensor:
    """Sum each row of a 2-D tensor; returns shape (B,)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ContractError(f"sum_rows expects a 2-D tensor, got shape {x.shape}")
    tape = _tape_of(x)
    out = x.data.sum(axis=1)
    n = x.shape[1]
    return _emit(out, tape, ((x, lambda g: np.repeat(g.reshape(-1, 1), n, axis=1)),))


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    tape = _tape_of(x)
    out = np.asarray(x.data.sum())
    return _emit(out, tape, ((x, lambda g: np.broadcast_to(g, x.shape).copy()),))


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    tape = _tape_of(x)
    n = max(x.size, 1)
    out = np.asarray(x.data.sum() / n)
    return _emit(out, tape, ((x, lambda g: np.broadcast_to(g / n, x.shape).copy()),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    tape = _tape_of(x)
    out = x.data.reshape(shape)
    return _emit(out, tape, ((x, lambda g, s=x.shape: g.reshape(s)),))


def one_hot(labels, n_classes: int) -> Tensor:
    """Constant (B, C) one-hot matrix for integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return Tensor._wrap(out)


def track_params(params: Mapping[str, Tensor], tape: GradTape) -> dict[str, Tensor]:
    """Register every named tensor on ``tape`` and return the tracked aliases."""
    return {name: tape.parameter(name, t) for name, t in params.items()}
