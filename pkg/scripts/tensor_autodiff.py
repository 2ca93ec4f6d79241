"""Minimal reverse-mode differentiation over dense float64 arrays.

Every op builds its output eagerly and records a Node holding the inputs and a
closure mapping the output adjoint to one adjoint per input. ``backward`` walks the
recorded graph in reverse topological order. Shapes are explicit: nothing
broadcasts implicitly except ``scale`` (tensor times a Python scalar) and the
explicit ``broadcast_to`` op.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import AccumulationError, ShapeError

logger = logging.getLogger(__name__)

Adjoint = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Shape = Tuple[int, ...]


@dataclass
class Node:
    op: str
    inputs: Tuple["Tensor", ...]
    adjoint: Adjoint


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = "") -> None:
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> Shape:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item: expected a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def parameter(values, name: str = "") -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def as_tensor(value: Union[Tensor, np.ndarray, float]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _result(values: np.ndarray, op: str, inputs: Sequence[Tensor], adjoint: Adjoint) -> Tensor:
    out = Tensor(values)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op=op, inputs=tuple(inputs), adjoint=adjoint)
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _result(a.values + b.values, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _result(a.values - b.values, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _result(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.values * factor, "scale", (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m) or batched (..., n, k) @ (..., k, m) with identical batch dims."""
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.values.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def adjoint(g: np.ndarray):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _result(av @ bv, "matmul", (a, b), adjoint)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast: a's shape right-aligns with ``shape``; each dim equal or 1."""
    shape = tuple(int(s) for s in shape)
    src = a.shape
    lead = len(shape) - len(src)
    if lead < 0 or any(s not in (1, d) for s, d in zip(src, shape[lead:])):
        raise ShapeError(f"broadcast_to: shape mismatch {src} vs {shape}")

    def adjoint(g: np.ndarray):
        reduced = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and reduced.shape[i] != 1)
        if axes:
            reduced = reduced.sum(axis=axes, keepdims=True)
        return (reduced.reshape(src),)

    return _result(np.broadcast_to(a.values, shape).copy(), "broadcast_to", (a,), adjoint)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _result(np.where(mask, a.values, 0.0), "relu", (a,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (a,), adjoint)


def mean(a: Tensor, axis: Union[None, int, Tuple[int, ...]] = None) -> Tensor:
    if axis is None:
        axes = tuple(range(a.values.ndim))
    else:
        axes = tuple(ax % a.values.ndim for ax in ((axis,) if isinstance(axis, int) else axis))
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    src = a.shape

    def adjoint(g: np.ndarray):
        expanded = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(expanded, src) / count,)

    return _result(a.values.mean(axis=axes), "mean", (a,), adjoint)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    ndim = a.values.ndim
    if axes is None:
        if ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got {a.shape}")
        axes = list(range(ndim - 2)) + [ndim - 1, ndim - 2]
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(a.values.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size or any(s < 0 for s in shape):
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _result(a.values.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].values.ndim
    axis = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.values.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.values for t in tensors], axis=axis), "concat", tuple(tensors), adjoint)


def roll(a: Tensor, shift: int, axis: int) -> Tensor:
    shift = int(shift)
    return _result(np.roll(a.values, shift, axis=axis), "roll", (a,), lambda g: (np.roll(g, -shift, axis=axis),))


def gather(a: Tensor, indices: Sequence[int], axis: int = -1) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.values.ndim
    n = a.shape[axis]
    if idx.ndim != 1 or np.any(idx < -n) or np.any(idx >= n):
        raise ShapeError(f"gather: indices {idx.tolist()} invalid for axis {axis} of {a.shape}")
    idx = idx % n
    src = a.shape

    def adjoint(g: np.ndarray):
        moved = np.moveaxis(g, axis, -1)
        buf = np.zeros(moved.shape[:-1] + (n,))
        for j, ix in enumerate(idx):
            buf[..., ix] += moved[..., j]
        return (np.moveaxis(buf, -1, axis).reshape(src),)

    return _result(np.take(a.values, idx, axis=axis), "gather", (a,), adjoint)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded, stride-1 cross-correlation: (B, C, H, W) * (O, C, kh, kw) -> (B, O, H, W)."""
    if x.values.ndim != 4 or weight.values.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {weight.shape}")
    O, C, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sizes must be odd, got {(kh, kw)}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")
    B, _, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xpad = np.pad(x.values, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    patches = sliding_window_view(xpad, (kh, kw), axis=(2, 3))  # B, C, H, W, kh, kw
    wv = weight.values
    out = np.tensordot(patches, wv, axes=([1, 4, 5], [1, 2, 3]))  # B, H, W, O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.values[None, :, None, None]

    def adjoint(g: np.ndarray):
        gw = np.tensordot(g, patches, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
        gpad = np.zeros_like(xpad)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i:i + H, j:j + W] += np.tensordot(g, wv[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = gpad[:, :, ph:ph + H, pw:pw + W]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, "conv2d", inputs, adjoint)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for inp in tensor.node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaves that already hold a gradient raise AccumulationError; call zero_grad first.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    leaves = [t for t in order if t.is_leaf]
    stale = [t.name or repr(t) for t in leaves if t.grad is not None]
    if stale:
        raise AccumulationError(f"backward: gradients already populated for {', '.join(stale)}; call zero_grad first")

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for tensor in reversed(order):
        if tensor.node is None:
            continue
        g = adjoints.pop(id(tensor), None)
        if g is None:
            continue
        for inp, gi in zip(tensor.node.inputs, tensor.node.adjoint(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{tensor.node.op}: adjoint shape {gi.shape} does not match input {inp.shape}")
            key = id(inp)
            adjoints[key] = adjoints[key] + gi if key in adjoints else np.array(gi, dtype=np.float64)

    for leaf in leaves:
        leaf.grad = adjoints.get(id(leaf), np.zeros_like(leaf.values))


def grad_check(f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences."""
    base = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    point = parameter(base.copy(), name="grad_check")
    loss = f(point)
    # other leaves (model parameters) keep whatever gradient the caller already holds
    others = [t for t in _topological_order(loss) if t.is_leaf and t is not point]
    held = [t.grad for t in others]
    zero_grad(others)
    backward(loss)
    for tensor, grad in zip(others, held):
        tensor.grad = grad
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for k in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[k] += eps
        f_plus = f(Tensor(shifted.reshape(base.shape))).item()
        shifted[k] -= 2.0 * eps
        f_minus = f(Tensor(shifted.reshape(base.shape))).item()
        flat[k] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    error = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
    logger.debug("grad_check over %d coordinates: max relative error %.3e", base.size, error)
    return error
