"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tape` records every differentiable operation executed while it
is active; :meth:`Tape.backward` replays the records in reverse to
accumulate gradients.  Outside a tape the same operations run as plain
numpy forwards, which is how inference-time decoding skips all gradient
bookkeeping.  Tapes are rebuilt per sentence, so variable sequence
lengths need no padding or masking.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import CheckpointError, GradientError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"SEGNMT1"


class Tensor:
    """A dense float64 array plus a gradient accumulator."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


# The active tape.  Exactly one tape may be active at a time; forward
# ops consult this instead of threading a tape argument everywhere.
_ACTIVE: "Tape | None" = None


class Tape:
    """Ordered record of executed ops; inputs always precede outputs."""

    def __init__(self):
        self._nodes: list[Callable[[], None]] = []

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise GradientError("a tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf reachable from loss.

        The loss must be a scalar.  Each node is visited exactly once, in
        reverse recording order, which makes the pass deterministic.
        """
        if loss.data.shape != ():
            raise GradientError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self._nodes):
            node()


def _record(fn: Callable[[], None]) -> None:
    if _ACTIVE is not None:
        _ACTIVE._nodes.append(fn)


def recording() -> bool:
    return _ACTIVE is not None


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, g)
        _acc(b, g)

    _record(bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, g)
        _acc(b, -g)

    _record(bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; either operand may be a scalar (shape ())."""
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out = Tensor(a.data * b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        ga = g * b.data
        gb = g * a.data
        _acc(a, ga.sum() if a.data.ndim == 0 and ga.ndim != 0 else ga)
        _acc(b, gb.sum() if b.data.ndim == 0 and gb.ndim != 0 else gb)

    _record(bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-trainable constant."""
    out = Tensor(a.data * c)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, g * c)

    _record(bwd)
    return out


def one_minus(a: Tensor) -> Tensor:
    out = Tensor(1.0 - a.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, -g)

    _record(bwd)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, g * y * (1.0 - y))

    _record(bwd)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, g * (1.0 - y * y))

    _record(bwd)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, g / a.data)

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [m,k]@[k,n] -> [m,n], or matrix-vector [m,k]@[k] -> [m]."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError(
            f"matmul: unsupported ranks {a.data.ndim} and {b.data.ndim}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dims {a.data.shape} x {b.data.shape} do not match"
        )
    out = Tensor(a.data @ b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if b.data.ndim == 1:
            _acc(a, np.outer(g, b.data))
            _acc(b, a.data.T @ g)
        else:
            _acc(a, g @ b.data.T)
            _acc(b, a.data.T @ g)

    _record(bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    out = Tensor(a.data.T)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, g.T)

    _record(bwd)
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "dot")
    out = Tensor(np.dot(a.data, b.data))

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    _record(bwd)
    return out


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(
            f"add_rowvec: shapes {m.data.shape} and {v.data.shape} do not conform"
        )
    out = Tensor(m.data + v.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(m, g)
        _acc(v, g.sum(axis=0))

    _record(bwd)
    return out


def mean_rows(m: Tensor) -> Tensor:
    if m.data.ndim != 2:
        raise ShapeError("mean_rows expects a matrix")
    n = m.data.shape[0]
    out = Tensor(m.data.mean(axis=0))

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(m, np.broadcast_to(g / n, m.data.shape))

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# shape ops


def concat(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError("concat expects vectors")
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])
    out = Tensor(np.concatenate([p.data for p in parts]))
    parts = tuple(parts)

    def bwd():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _acc(p, g[lo:hi])

    _record(bwd)
    return out


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack scalars into a vector or equal-length vectors into matrix rows."""
    if not parts:
        raise ShapeError("stack of zero tensors")
    nd = parts[0].data.ndim
    if nd not in (0, 1) or any(p.data.ndim != nd for p in parts):
        raise ShapeError("stack expects all scalars or all vectors")
    out = Tensor(np.stack([p.data for p in parts]))
    parts = tuple(parts)

    def bwd():
        g = out.grad
        if g is None:
            return
        for i, p in enumerate(parts):
            _acc(p, g[i])

    _record(bwd)
    return out


def pick(x: Tensor, i: int) -> Tensor:
    """Select one entry of a vector as a scalar."""
    if x.data.ndim != 1:
        raise ShapeError("pick expects a vector")
    out = Tensor(x.data[i])

    def bwd():
        g = out.grad
        if g is None:
            return
        gx = np.zeros_like(x.data)
        gx[i] = g
        _acc(x, gx)

    _record(bwd)
    return out


def embed(table: Tensor, index: int) -> Tensor:
    """Look up one row of an embedding matrix."""
    if table.data.ndim != 2:
        raise ShapeError("embed expects a matrix table")
    out = Tensor(table.data[index].copy())

    def bwd():
        g = out.grad
        if g is None:
            return
        gt = np.zeros_like(table.data)
        gt[index] = g
        _acc(table, gt)

    _record(bwd)
    return out


def scatter_sum(x: Tensor, indices: Sequence[int], size: int) -> Tensor:
    """out[v] = sum of x[i] over positions i with indices[i] == v."""
    if x.data.ndim != 1 or len(indices) != x.data.shape[0]:
        raise ShapeError("scatter_sum: indices must match vector length")
    idx = np.asarray(indices, dtype=np.intp)
    data = np.zeros(size, dtype=np.float64)
    np.add.at(data, idx, x.data)
    out = Tensor(data)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(x, g[idx])

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# normalizers


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over a vector (max-subtraction)."""
    if x.data.ndim != 1 or x.data.shape[0] < 1:
        raise ShapeError("softmax expects a non-empty vector")
    e = np.exp(x.data - x.data.max())
    y = e / e.sum()
    out = Tensor(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(x, y * (g - np.dot(g, y)))

    _record(bwd)
    return out


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 1 or x.data.shape[0] < 1:
        raise ShapeError("log_softmax expects a non-empty vector")
    m = x.data.max()
    shifted = x.data - m
    lse = m + np.log(np.exp(shifted).sum())
    y = x.data - lse
    out = Tensor(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(x, g - np.exp(y) * g.sum())

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# parameters and optimizer


class Parameter:
    """A trainable tensor with Adam moment state."""

    __slots__ = ("name", "value", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, data):
        self.name = name
        self.value = Tensor(data)
        self.adam_m = np.zeros_like(self.value.data)
        self.adam_v = np.zeros_like(self.value.data)
        self.step_count = 0

    @property
    def gradient(self) -> np.ndarray:
        """Accumulated gradient; zeros when the parameter was unreachable."""
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def clear_gradient(self) -> None:
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


def uniform_parameter(name: str, shape, rng: np.random.Generator, bound: float = 0.08) -> Parameter:
    return Parameter(name, rng.uniform(-bound, bound, size=shape))


def zeros_parameter(name: str, shape) -> Parameter:
    return Parameter(name, np.zeros(shape))


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.value.grad is not None:
            total += float(np.sum(p.value.grad * p.value.grad))
    return float(np.sqrt(total))


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.value.grad is not None:
                p.value.grad *= factor
    return norm


def adam_step(params: Iterable[Parameter], learning_rate: float) -> None:
    """One Adam update per parameter; gradients are cleared afterwards.

    Raises GradientError naming the parameter if its gradient is not
    finite, so a diverging run fails loudly instead of silently.
    """
    for p in params:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        elif not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {p.name!r}")
        p.step_count += 1
        p.adam_m = ADAM_BETA1 * p.adam_m + (1.0 - ADAM_BETA1) * g
        p.adam_v = ADAM_BETA2 * p.adam_v + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = p.adam_m / (1.0 - ADAM_BETA1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - ADAM_BETA2 ** p.step_count)
        p.value.data -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        p.clear_gradient()


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "SEGNMT1", then per-parameter records:
#   u32 name byte length | name (utf-8) | u32 rank | u64 * rank dims |
#   raw little-endian float64 payload
# Records run to end of file.  Save/load round-trips bit-exactly.


def save_checkpoint(params: Mapping[str, Parameter] | Mapping[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in params.items():
            arr = value.value.data if isinstance(value, Parameter) else np.asarray(value, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt record") from exc
        out[name] = arr.astype(np.float64)
    return out


def assign_parameters(params: Mapping[str, Parameter], state: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an existing parameter set by name."""
    for name, p in params.items():
        if name not in state:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = state[name]
        if arr.shape != p.value.data.shape:
            raise CheckpointError(
                f"checkpoint shape {arr.shape} for {name!r} does not match {p.value.data.shape}"
            )
        p.value.data = arr.copy()
        p.value.grad = None
