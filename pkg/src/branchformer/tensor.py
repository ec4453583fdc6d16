"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a static
``forward`` over numpy arrays and a ``backward`` mapping the output gradient
to one gradient per input. Subclasses register themselves by ``name`` in
:data:`PRIMITIVES`, which is what the gradient checker enumerates.

Broadcasting is deliberately absent: elementwise ops need identical shapes
(a 0-d tensor on either side is the single exception) and every other
alignment goes through an explicit op such as :func:`expand`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, ClassVar, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64

PRIMITIVES: dict[str, type["Function"]] = {}

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Context:
    """Scratch space a Function's forward leaves for its backward."""

    needs_input_grad: tuple[bool, ...] = ()


class TapeNode:
    __slots__ = ("op", "inputs", "ctx")

    def __init__(self, op: type["Function"], inputs: tuple["Tensor", ...], ctx: Context):
        self.op = op
        self.inputs = inputs
        self.ctx = ctx


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return AddConst.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return AddConst.apply(self, value=-float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis)

    def backward(self, inputs: Sequence["Tensor"] | None = None) -> None:
        backward(self, inputs)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Function:
    """A primitive op: forward over arrays, backward over the output gradient."""

    name: ClassVar[str] = ""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name:
            PRIMITIVES[cls.name] = cls

    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def sample(cls, rng: np.random.Generator) -> tuple[list[np.ndarray], dict]:
        """Random finite inputs (and kwargs) used by the primitive gradient check."""
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx = Context()
        track = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if track:
            ctx.needs_input_grad = tuple(t.requires_grad for t in inputs)
        out = cls.forward(ctx, *[t.data for t in inputs], **kwargs)
        result = Tensor(out, requires_grad=track)
        if track:
            result.node = TapeNode(cls, inputs, ctx)
        return result


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Tensors listed in ``inputs`` that the loss does not depend on receive a
    zero gradient rather than ``None``.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for t in reversed(_topological_order(loss)):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t.node
            if node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            in_grads = node.op.backward(node.ctx, g)
            for x, gx in zip(node.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                if gx.shape != x.shape:
                    raise ShapeError(
                        f"{node.op.name}: backward produced {gx.shape} for input {x.shape}"
                    )
                k = id(x)
                grads[k] = gx if k not in grads else grads[k] + gx
    for x in inputs or ():
        if x.grad is None:
            x.grad = np.zeros_like(x.data)


# -- primitive ops ---------------------------------------------------------

def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        if b.ndim != 2 and (b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2]):
            raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
        ctx.a, ctx.b = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        need_a, need_b = ctx.needs_input_grad
        ga = g @ _swap(b) if need_a else None
        gb = None
        if need_b:
            if b.ndim == 2:
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(a) @ g
        return ga, gb

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4, 5))], {}


def _check_same(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _check_same("add", a, b)
        ctx.shapes = a.shape, b.shape
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _reduce_to(g, sa), _reduce_to(g, sb)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))], {}


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _check_same("sub", a, b)
        ctx.shapes = a.shape, b.shape
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, ())], {}


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _check_same("mul", a, b)
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        need_a, need_b = ctx.needs_input_grad
        return (
            _reduce_to(g * b, a.shape) if need_a else None,
            _reduce_to(g * a, b.shape) if need_b else None,
        )

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))], {}


class Scale(Function):
    name = "scale"

    @staticmethod
    def forward(ctx, a, factor: float):
        ctx.factor = factor
        return a * factor

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.factor,)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4))], {"factor": -0.7}


class AddConst(Function):
    name = "add_const"

    @staticmethod
    def forward(ctx, a, value: float):
        return a + value

    @staticmethod
    def backward(ctx, g):
        return (g,)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3,))], {"value": 1.5}


class MulConst(Function):
    """Elementwise product with a constant array (masks, fixed weights)."""

    name = "mul_const"

    @staticmethod
    def forward(ctx, a, const: np.ndarray):
        if const.shape != a.shape:
            raise ShapeError(f"mul_const: shapes {a.shape} and {const.shape} differ")
        ctx.const = const
        return a * const

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.const,)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4))], {"const": rng.uniform(-2, 2, (3, 4))}


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis: int | None = None):
        ctx.shape, ctx.axis = a.shape, axis
        return np.asarray(a.sum(axis=axis))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is None:
            return (np.full(ctx.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, ctx.axis), ctx.shape).copy(),)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 3, 4))], {"axis": 1}


class Mean(Function):
    name = "mean"

    @staticmethod
    def forward(ctx, a, axis: int | None = None):
        ctx.shape, ctx.axis = a.shape, axis
        ctx.count = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is None:
            return (np.full(ctx.shape, float(g) / ctx.count),)
        return (np.broadcast_to(np.expand_dims(g, ctx.axis), ctx.shape) / ctx.count,)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 3, 4))], {"axis": -2}


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape: tuple[int, ...]):
        ctx.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 6))], {"shape": (3, 4)}


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a, axes: tuple[int, ...] | None = None):
        if axes is None:
            axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        ctx.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(a.transpose(axes))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(g.transpose(ctx.inverse)),)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 3, 4))], {"axes": (1, 0, 2)}


class Slice(Function):
    name = "slice"

    @staticmethod
    def forward(ctx, a, axis: int, start: int, stop: int):
        axis = axis % a.ndim
        ctx.shape, ctx.index = a.shape, (slice(None),) * axis + (slice(start, stop),)
        return np.ascontiguousarray(a[ctx.index])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape)
        out[ctx.index] = g
        return (out,)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 6))], {"axis": -1, "start": 1, "stop": 4}


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis: int = -1):
        ref = arrays[0]
        ax = axis % ref.ndim
        for a in arrays[1:]:
            if a.ndim != ref.ndim or a.shape[:ax] + a.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
                raise ShapeError(f"concat: shapes {ref.shape} and {a.shape} disagree off axis {axis}")
        ctx.axis = ax
        ctx.bounds = np.cumsum([a.shape[ax] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, ctx.bounds, axis=ctx.axis))

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 2)), rng.uniform(-2, 2, (3, 4))], {"axis": -1}


class Expand(Function):
    """Insert a new axis at ``axis`` and repeat the input ``n`` times along it."""

    name = "expand"

    @staticmethod
    def forward(ctx, a, axis: int, n: int):
        out_ndim = a.ndim + 1
        ax = axis % out_ndim
        ctx.axis = ax
        shape = a.shape[:ax] + (n,) + a.shape[ax:]
        return np.ascontiguousarray(np.broadcast_to(np.expand_dims(a, ax), shape))

    @staticmethod
    def backward(ctx, g):
        return (g.sum(axis=ctx.axis),)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 3))], {"axis": -2, "n": 4}


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        ctx.out = np.exp(a)
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out,)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4))], {}


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        ctx.a = a
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(0.5, 2, (3, 4))], {}


# -- functional wrappers -----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


_ELEMENTWISE: dict[str, Callable[[Tensor, Tensor], Tensor]] = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def mul_const(a: Tensor, const: np.ndarray) -> Tensor:
    return MulConst.apply(a, const=np.asarray(const, dtype=DTYPE))


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    return Sum.apply(a, axis=axis)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return Mean.apply(a, axis=axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def take(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return Slice.apply(a, axis=axis, start=start, stop=stop)


def split(a: Tensor, parts: int = 2, axis: int = -1) -> list[Tensor]:
    """Split into ``parts`` equal pieces along ``axis``."""
    n = a.shape[axis]
    if n % parts:
        raise ShapeError(f"split: dimension {axis} has size {n}, not divisible by {parts}")
    step = n // parts
    return [take(a, axis, i * step, (i + 1) * step) for i in range(parts)]


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    return Expand.apply(a, axis=axis, n=n)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)
