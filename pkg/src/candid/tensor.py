"""Minimal reverse-mode autodiff over numpy arrays.

Every trainable block in the package is built from the ops here. Tensors carry
float32 data by default; :func:`default_dtype` switches to float64 for gradient
checks. Gradients accumulate additively on leaves until :func:`zero_grad`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient contains NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """Raised when ``backward`` is called twice on the same graph."""


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def get_default_dtype():
    return _DTYPE[-1]


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a float64 sum of finite float32/float64 values stays finite unless inf/nan is present
    if arr.size and not np.isfinite(arr.sum(dtype=np.float64)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _flush_subnormal(arr: np.ndarray) -> np.ndarray:
    # subnormal floats slow BLAS kernels by up to ~100x and carry no usable precision
    small = np.abs(arr) < np.finfo(arr.dtype).tiny
    if small.any():
        return np.where(small, arr.dtype.type(0), arr)
    return arr


class Tensor:
    """Dense float array that records the ops applied to it."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, name or "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, f"{op} output")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype), dtype=ref.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by an earlier backward call")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(_flush_subnormal(g))
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            _check_finite(pg, "gradient")
            if pg.dtype != p.data.dtype:
                pg = pg.astype(p.data.dtype)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _like(a, b)
    b = _like(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _like(a, b)
    b = _like(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _like(a, b)
    b = _like(b, a)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), back, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    shape = x.shape
    return Tensor._from_op(out, (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                           lambda g: (g.transpose(inv),), "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return Tensor._from_op(np.array(x.data[index]), (x,), back, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


# ---------------------------------------------------------------------------
# softmax / loss


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {x.ndim}-d tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), back, "softmax")


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute difference."""
    target = _like(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype)

    def back(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return Tensor._from_op(out, (pred, target), back, "l1_loss")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Cross-correlation of ``[Cin,H,W]`` or ``[B,Cin,H,W]`` input with ``[Cout,Cin,k,k]`` weights.

    The padded batch is laid out channel-major and flattened, so each kernel tap
    becomes one matmul against a contiguous slice (no im2col buffer). Columns
    that straddle a row or image boundary are computed and discarded.
    """
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"weights must be [Cout,Cin,k,k], got {weight.shape}")
    cout, cin, k, _ = weight.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d input must be 3-d or 4-d, got {x.shape}")
    xd = x.data[None] if unbatched else x.data
    if xd.shape[1] != cin:
        raise ValueError(f"input has {xd.shape[1]} channels, weights expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must be [{cout}], got {bias.shape}")

    p = (k - 1) // 2 if padding == "same" else 0
    bsz, _, h, w = xd.shape
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise ValueError("input smaller than kernel for valid convolution")
    dtype = np.result_type(xd.dtype, weight.dtype)
    xt = np.zeros((cin, bsz, hp, wp), dtype=dtype)
    xt[:, :, p:p + h, p:p + w] = xd.transpose(1, 0, 2, 3)
    xt = xt.reshape(cin, -1)
    span = xt.shape[1] - ((k - 1) * wp + k - 1)
    taps = [(i * wp + j, np.ascontiguousarray(weight.data[:, :, i, j])) for i in range(k) for j in range(k)]
    acc = np.zeros((cout, bsz * hp * wp), dtype=dtype)
    for off, wij in taps:
        acc[:, :span] += wij @ xt[:, off:off + span]
    if bias is not None:
        acc += bias.data[:, None]
    out = np.ascontiguousarray(acc.reshape(cout, bsz, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3))
    if unbatched:
        out = out[0]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g = g.reshape(bsz, cout, ho, wo)
        gfull = np.zeros((cout, bsz, hp, wp), dtype=g.dtype)
        gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gf = gfull.reshape(cout, -1)[:, :span]
        gw = None
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=weight.dtype)
            for t, (off, _) in enumerate(taps):
                gw[:, :, t // k, t % k] = gf @ xt[:, off:off + span].T
        gx = None
        if x.requires_grad:
            gxt = np.zeros((cin, bsz * hp * wp), dtype=g.dtype)
            for off, wij in taps:
                gxt[:, off:off + span] += wij.T @ gf
            gx = gxt.reshape(cin, bsz, hp, wp)[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, parents, back, "conv2d")


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Moments and hyperparameters for :func:`adam_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if not lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected ADAM update, in place. Gradients are left as they are."""
    if len(params) != len(state.first_moment):
        raise ValueError("parameter count does not match optimizer state")
    for p, m in zip(params, state.first_moment):
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {p.name or p.shape}")
        if p.shape != m.shape:
            raise ValueError(f"parameter {p.name or ''} has shape {p.shape}, state expects {m.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data -= update.astype(p.dtype, copy=False)
