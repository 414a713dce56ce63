"""Dense numpy-backed arrays with reverse-mode differentiation.

Every operation builds a node holding its forward values, its parents and a
closure mapping the output gradient to one gradient per parent. ``backward``
walks the graph once in reverse topological order.
"""
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from gaussfusion.core.errors import ContractError, DimensionError, NumericError

_DTYPES = {'float64': np.float64, 'float32': np.float32}
_default_dtype = np.float64

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
ArrayLike = Union['NumericArray', np.ndarray, float, int, Sequence]


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"unsupported precision '{name}', expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(item is Ellipsis or item is None or isinstance(item, (slice, int, np.integer)) for item in items)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class NumericArray:
    __slots__ = ('values', 'grad', 'requires_grad', 'name', '_parents', '_backward')
    __array_priority__ = 100

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(values, NumericArray):
            values = values.values
        self.values = np.array(values, dtype=_default_dtype)
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"non-finite values in array '{name or '?'}'")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple['NumericArray', ...] = ()
        self._backward: Optional[Backward] = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> 'NumericArray':
        return constant(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"NumericArray(shape={self.shape}{flag})"

    # ---------------------------------------------------------------- backward
    def _topological_order(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return reversed(order)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise ContractError("backward() called on an array that does not require grad")
        if grad is None:
            if self.values.size != 1:
                raise ContractError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.values)
        pending = {id(self): np.asarray(grad, dtype=self.values.dtype)}
        for node in self._topological_order():
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other):
        other = lift(other)
        a_shape, b_shape = self.shape, other.shape
        return make(self.values + other.values, (self, other),
                    lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), 'add')

    __radd__ = __add__

    def __sub__(self, other):
        other = lift(other)
        a_shape, b_shape = self.shape, other.shape
        return make(self.values - other.values, (self, other),
                    lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)), 'sub')

    def __rsub__(self, other):
        return lift(other) - self

    def __mul__(self, other):
        other = lift(other)
        a, b = self.values, other.values
        return make(a * b, (self, other),
                    lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), 'mul')

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = lift(other)
        a, b = self.values, other.values
        return make(a / b, (self, other),
                    lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)), 'div')

    def __rtruediv__(self, other):
        return lift(other) / self

    def __neg__(self):
        return make(-self.values, (self,), lambda g: (-g,), 'neg')

    def __pow__(self, exponent: float):
        if isinstance(exponent, NumericArray):
            raise ContractError("only scalar exponents are supported")
        x = self.values
        return make(x ** exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),), 'pow')

    def __matmul__(self, other):
        return matmul(self, lift(other))

    def __rmatmul__(self, other):
        return matmul(lift(other), self)

    def __getitem__(self, index):
        x_shape, dtype = self.shape, self.values.dtype
        basic = _is_basic_index(index)

        def backward(g):
            gx = np.zeros(x_shape, dtype=dtype)
            if basic:
                gx[index] += g
            else:
                np.add.at(gx, index, g)
            return (gx,)

        return make(self.values[index], (self,), backward, 'getitem')

    # ------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False):
        x_shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, x_shape),)

        return make(self.values.sum(axis=axes, keepdims=keepdims), (self,), backward, 'sum')

    def mean(self, axis=None, keepdims: bool = False):
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / max(count, 1))

    # ----------------------------------------------------------------- shapes
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x_shape = self.shape
        return make(self.values.reshape(shape), (self,), lambda g: (g.reshape(x_shape),), 'reshape')

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return make(self.values.transpose(axes), (self,), lambda g: (g.transpose(inverse),), 'transpose')

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    # ------------------------------------------------------------ elementwise
    def exp(self):
        out = np.exp(self.values)
        return make(out, (self,), lambda g: (g * out,), 'exp')

    def log(self):
        x = self.values
        return make(np.log(x), (self,), lambda g: (g / x,), 'log')

    def sqrt(self):
        out = np.sqrt(self.values)
        return make(out, (self,), lambda g: (g / (2.0 * out),), 'sqrt')

    def abs(self):
        sign = np.sign(self.values)
        return make(np.abs(self.values), (self,), lambda g: (g * sign,), 'abs')

    def tanh(self):
        out = np.tanh(self.values)
        return make(out, (self,), lambda g: (g * (1.0 - out * out),), 'tanh')

    def sigmoid(self):
        out = expit(self.values)
        return make(out, (self,), lambda g: (g * out * (1.0 - out),), 'sigmoid')

    def relu(self):
        mask = self.values > 0
        return make(self.values * mask, (self,), lambda g: (g * mask,), 'relu')

    def softplus(self):
        x = self.values
        return make(np.logaddexp(0.0, x), (self,), lambda g: (g * expit(x),), 'softplus')

    def sin(self):
        x = self.values
        return make(np.sin(x), (self,), lambda g: (g * np.cos(x),), 'sin')

    def cos(self):
        x = self.values
        return make(np.cos(x), (self,), lambda g: (-g * np.sin(x),), 'cos')

    def clamp(self, low=None, high=None):
        x = self.values
        low_v = -np.inf if low is None else np.asarray(low, dtype=x.dtype)
        high_v = np.inf if high is None else np.asarray(high, dtype=x.dtype)
        mask = (x >= low_v) & (x <= high_v)
        return make(np.clip(x, low_v, high_v), (self,), lambda g: (g * mask,), 'clamp')


def make(values: np.ndarray, parents: Tuple[NumericArray, ...], backward: Backward, op: str) -> NumericArray:
    """Create an op output node; raises NumericError on NaN/Inf."""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"operation '{op}' produced non-finite values")
    out = NumericArray.__new__(NumericArray)
    out.values = values
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def constant(values: ArrayLike) -> NumericArray:
    return NumericArray(values, requires_grad=False)


def parameter(values: ArrayLike, name: Optional[str] = None) -> NumericArray:
    return NumericArray(values, requires_grad=True, name=name)


def lift(x: ArrayLike) -> NumericArray:
    if isinstance(x, NumericArray):
        return x
    values = np.asarray(x)
    if values.dtype.kind != 'f':
        values = values.astype(_default_dtype)
    return make(values, (), None, 'const')


def zeros(shape, requires_grad: bool = False) -> NumericArray:
    return NumericArray(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> NumericArray:
    return NumericArray(np.ones(shape), requires_grad=requires_grad)


def matmul(a: NumericArray, b: NumericArray) -> NumericArray:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    av, bv = a.values, b.values

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return make(out, (a, b), backward, 'matmul')


def concat(arrays: Sequence[NumericArray], axis: int = 0) -> NumericArray:
    arrays = [lift(a) for a in arrays]
    axis = axis % arrays[0].ndim
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        out = np.concatenate([a.values for a in arrays], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[a.shape for a in arrays]} on axis {axis}") from exc
    return make(out, tuple(arrays), backward, 'concat')


def stack(arrays: Sequence[NumericArray], axis: int = 0) -> NumericArray:
    arrays = [lift(a) for a in arrays]
    try:
        out = np.stack([a.values for a in arrays], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot stack shapes {[a.shape for a in arrays]}") from exc
    axis = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))

    return make(out, tuple(arrays), backward, 'stack')


def pad(x: NumericArray, width: Iterable[Tuple[int, int]]) -> NumericArray:
    width = tuple(tuple(w) for w in width)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(width, x.shape))
    return make(np.pad(x.values, width), (x,), lambda g: (g[index],), 'pad')


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> NumericArray:
    """Select ``a`` where ``mask`` holds, else ``b``; the mask is constant."""
    a, b = lift(a), lift(b)
    mask = np.asarray(mask, dtype=bool)
    a_shape, b_shape = a.shape, b.shape
    out = np.where(mask, a.values, b.values)
    return make(out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0.0), a_shape),
                                        _unbroadcast(np.where(mask, 0.0, g), b_shape)), 'where')
