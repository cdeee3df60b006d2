"""Small define-by-run reverse-mode autodiff over numpy float64 arrays.

Every primitive builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Graphs are
rebuilt on every forward pass and :func:`backward` walks them once.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class OpRecord:
    kind: str
    input_ids: tuple[int, ...]


class Tensor:
    __slots__ = ("id", "data", "requires_grad", "op_record", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.id = next(_ids)
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op_record: OpRecord | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op_record is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Build values only; nothing created inside records provenance."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(kind: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op_record = OpRecord(kind, tuple(p.id for p in parents))
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _make("scale", a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def grad_multiply(x: Tensor, factor: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``factor``.

    ``factor = -lam`` is the gradient reversal layer.
    """
    factor = float(factor)
    return _make("grad_multiply", x.data, (x,), lambda g: (g * factor,))


# -------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is a 2-D weight or both operands share batch dims."""
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), backward)


# ------------------------------------------------------------------ structure

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make("concat", data, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: incompatible shapes {tensors[0].shape} and {t.shape}")
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make("stack", data, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def slice_(a: Tensor, index) -> Tensor:
    try:
        data = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("slice", data, (a,), backward)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {weight.shape[0]}) for weight {weight.shape}")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make("embedding", weight.data[ids], (weight,), backward)


# ----------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ----------------------------------------------------------- probabilistic ops

def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def softmax(a: Tensor) -> Tensor:
    return exp(log_softmax(a))


def nll(logprobs: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logprobs``.

    ``logprobs`` has shape ``targets.shape + (C,)``.  Positions where ``mask``
    is false are ignored, including in the normaliser.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logprobs.shape[:-1] != targets.shape:
        raise ShapeError(f"nll: logprobs {logprobs.shape} do not match targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logprobs.shape[-1]):
        raise ShapeError(f"nll: target ids outside [0, {logprobs.shape[-1]})")
    weight = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if weight.shape != targets.shape:
        raise ShapeError(f"nll: mask {weight.shape} does not match targets {targets.shape}")
    count = weight.sum()
    if count == 0:
        raise ShapeError("nll: mask selects no positions")
    picked = np.take_along_axis(logprobs.data, targets[..., None], axis=-1)[..., 0]
    value = -(picked * weight).sum() / count

    def backward(g):
        full = np.zeros_like(logprobs.data)
        np.put_along_axis(full, targets[..., None], (-weight / count)[..., None], axis=-1)
        return (full * g,)

    return _make("nll", np.asarray(value), (logprobs,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------- dispatcher

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
    "concat": concat, "slice": slice_, "embedding": embedding, "tanh": tanh,
    "sigmoid": sigmoid, "relu": relu, "exp": exp, "log_softmax": log_softmax,
    "nll": nll, "sum": sum_, "mean": mean, "reshape": reshape, "stack": stack,
    "grad_multiply": grad_multiply,
}


def primitive_forward(kind: str, inputs: Sequence[Tensor], *args, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind in ("concat", "stack"):
        return fn(list(inputs), *args, **kwargs)
    return fn(*inputs, *args, **kwargs)


# ------------------------------------------------------------------- backward

GradientMap = dict  # leaf tensor id -> np.ndarray


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode gradients of scalar ``loss`` for every reachable leaf that requires grad.

    The graph is left untouched, so calling twice returns equal maps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: GradientMap = {}
    if not loss.requires_grad:
        return grads

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))

    upstream: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            grads[node.id] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent.id in upstream:
                upstream[parent.id] = upstream[parent.id] + pg
            else:
                upstream[parent.id] = pg
    return grads


# ------------------------------------------------------------------ optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(state: OptimizerState, params: Iterable[Tensor], grads: GradientMap) -> None:
    """Update ``params`` in place.  Every parameter must have a gradient entry."""
    params = list(params)
    for p in params:
        if p.id not in grads:
            raise KeyError(f"no gradient for parameter {p.name or p.id}")
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params:
            p.data = p.data - lr * grads[p.id]
        return
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = grads[p.id]
        m = state.m.get(p.id)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[p.id] = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[p.id] + (1 - b2) * g * g
        state.m[p.id], state.v[p.id] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads_for(params: Iterable[Tensor], grads: GradientMap) -> GradientMap:
    """Fill in zero gradients for parameters the loss did not reach."""
    out = dict(grads)
    for p in params:
        if p.id not in out:
            out[p.id] = np.zeros_like(p.data)
    return out


# ------------------------------------------------------------ gradient check

def _central_difference(evaluate: Callable[[], float], flat: np.ndarray, i: int, step: float, order: int) -> float:
    saved = flat[i]

    def at(offset):
        flat[i] = saved + offset
        return evaluate()

    try:
        if order == 2:
            return (at(step) - at(-step)) / (2 * step)
        # five-point stencil, O(step^4) truncation error
        return (8 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12 * step)
    finally:
        flat[i] = saved


def _check_args(step: float, order: int) -> None:
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")


def _relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def check_gradients(fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence, step: float = 1e-5,
                    order: int = 2) -> float:
    """Max relative error between :func:`backward` and central differences.

    ``fn`` maps a list of tensors to a scalar tensor; ``inputs`` are arrays or
    tensors giving the point of evaluation.  ``order=4`` uses a five-point
    stencil, which tolerates a larger ``step`` and so less roundoff.
    """
    _check_args(step, order)
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = backward(fn(leaves))
    worst = 0.0
    for k, base in enumerate(arrays):
        analytic = grads.get(leaves[k].id, np.zeros_like(base)).reshape(-1)
        flat = base.reshape(-1)
        for i in range(flat.size):
            numeric = _central_difference(lambda: _eval_at(fn, arrays), flat, i, step, order)
            worst = max(worst, _relative_error(analytic[i], numeric))
    return worst


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central-difference gradient of ``loss_fn()`` with respect to ``param`` (perturbed in place)."""
    _check_args(step, order)

    def evaluate():
        with no_grad():
            return loss_fn().item()

    flat = param.data.reshape(-1)
    return np.array([_central_difference(evaluate, flat, i, step, order)
                     for i in range(flat.size)]).reshape(param.shape)


def check_parameter_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                              order: int = 2, max_entries: int | None = None,
                              rng: np.random.Generator | None = None) -> float:
    """Like :func:`check_gradients` for a closure over existing parameter tensors.

    Entries are perturbed in place and restored.  ``max_entries`` samples that
    many coordinates per parameter instead of checking all of them.
    """
    _check_args(step, order)
    grads = backward(loss_fn())
    rng = rng or np.random.default_rng(0)

    def evaluate():
        with no_grad():
            return loss_fn().item()

    worst = 0.0
    for p in params:
        analytic = grads.get(p.id, np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            worst = max(worst, _relative_error(analytic[i], _central_difference(evaluate, flat, i, step, order)))
    return worst


def _eval_at(fn, arrays) -> float:
    with no_grad():
        return fn([Tensor(a.copy()) for a in arrays]).item()


# ------------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"PPCK"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray | Tensor]) -> None:
    """Write named tensors as little-endian float32 in the PPCK layout."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a PPCK checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        out[name] = arr.astype(np.float64)
    return out
