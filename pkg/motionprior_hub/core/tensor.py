"""
Плотные тензоры на numpy с обратным автоматическим дифференцированием.

Тензор неизменяем после создания: каждая операция возвращает новый узел,
который помнит родителей и правило обратного прохода. Graph упорядочивает
узлы топологически, backward() проходит его в обратном порядке.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from motionprior_hub.core.exceptions import ContractError, DimensionError, NumericError

PRECISIONS: dict[str, type] = {"f32": np.float32, "f64": np.float64}

_state = {"dtype": np.float32, "check_finite": False}

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]
Axis = int | tuple[int, ...] | None


def set_precision(precision: str) -> None:
    if precision not in PRECISIONS:
        raise ContractError(f"Неизвестная точность '{precision}' (f32 или f64)")
    _state["dtype"] = PRECISIONS[precision]


def default_dtype() -> type:
    return _state["dtype"]


@contextmanager
def numeric_mode(precision: str = "f64", check_finite: bool = True) -> Iterator[None]:
    """Временный режим точности; f64 + проверка конечности для оракулов."""
    saved = dict(_state)
    set_precision(precision)
    _state["check_finite"] = check_finite
    try:
        yield
    finally:
        _state.update(saved)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        arr = np.array(data, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item(): тензор формы {self.shape} не скаляр")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, op={self.op}, "
            f"requires_grad={self.requires_grad})"
        )

    def __add__(self, other: object) -> Tensor:
        return add(self, other)

    def __radd__(self, other: object) -> Tensor:
        return add(other, self)

    def __sub__(self, other: object) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: object) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: object) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: object) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)


def _const(x: object, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _result(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NumericError(op)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _sum_to_vector(g: np.ndarray, d: int) -> np.ndarray:
    return g.reshape(-1, d).sum(axis=0)


# --- поэлементные операции ---------------------------------------------------


def add(a: object, b: object) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        d = b.shape[0]
        return _result(
            a.data + b.data, (a, b), lambda g: (g, _sum_to_vector(g, d)), "add_bias"
        )
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return add(b, a)
    if a.size == 1 and a.ndim == 0:
        return _result(a.data + b.data, (a, b), lambda g: (g.sum(), g), "add_scalar")
    if b.size == 1 and b.ndim == 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum()), "add_scalar")
    raise DimensionError("add", a.shape, b.shape)


def sub(a: object, b: object) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    if a.shape != b.shape:
        return add(a, scale(b, -1.0))
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: object, b: object) -> Tensor:
    if not isinstance(a, Tensor):
        return scale(b, float(a))
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def gelu(x: Tensor) -> Tensor:
    """GELU в точной форме x·Φ(x) через erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (cdf + xd * pdf),)

    return _result((xd * cdf).astype(xd.dtype, copy=False), (x,), backward, "gelu")


# --- линейная алгебра ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    C = A·B по двум последним осям.

    B либо двумерная матрица (общая для всех ведущих осей A),
    либо имеет те же ведущие оси, что и A.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), backward, "matmul")


# --- формы ----------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError("reshape", src, tuple(shape)) from e
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat: пустой список тензоров")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError("concat", tensors[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=ax)

    return _result(
        np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat"
    )


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """
    Выбор строк по индексам: x [..., N, D], index [..., K] -> [..., K, D].

    Одномерный index применяется ко всем ведущим осям.
    """
    index = np.asarray(index, dtype=np.intp)
    if x.ndim < 2:
        raise DimensionError("gather", x.shape, index.shape)
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    if index.ndim == 1:
        index = np.broadcast_to(index, lead + index.shape)
    if index.shape[:-1] != lead:
        raise DimensionError("gather", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ContractError(f"gather: индекс вне диапазона 0..{n - 1}")
    k = index.shape[-1]
    batch = int(np.prod(lead)) if lead else 1
    flat_idx = index.reshape(batch, k)
    flat_x = x.data.reshape(batch, n, d)
    rows = np.arange(batch)[:, None]
    out = flat_x[rows, flat_idx].reshape(lead + (k, d))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        acc = np.zeros((batch, n, d), dtype=g.dtype)
        np.add.at(acc, (rows, flat_idx), g.reshape(batch, k, d))
        return (acc.reshape(x.shape),)

    return _result(out, (x,), backward, "gather")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Повтор тензора по новым ведущим осям: [d] -> [..., d]."""
    shape = tuple(shape)
    if shape[len(shape) - x.ndim :] != x.shape:
        raise DimensionError("expand", x.shape, shape)
    lead = len(shape) - x.ndim

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.sum(axis=tuple(range(lead))) if lead else g,)

    return _result(np.broadcast_to(x.data, shape), (x,), backward, "expand")


# --- редукции ---------------------------------------------------------------


def _norm_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axes, keepdims), 1.0 / count)


# --- нормализации -----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ContractError(f"softmax: ось {axis} для формы {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Нормализация по последней оси, дисперсия генеральной совокупности."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gamma.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dgamma = _sum_to_vector(g * xhat, d)
        dbeta = _sum_to_vector(g, d)
        dxhat = g * gd
        dx = (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    out = (xhat * gd + beta.data).astype(xd.dtype, copy=False)
    return _result(out, (x, gamma, beta), backward, "layer_norm")


# --- граф и обратный проход ---------------------------------------------------


@dataclass
class Graph:
    """Узлы вычисления в топологическом порядке (входы раньше выходов)."""

    nodes: list[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(
    loss: Tensor,
    wrt: Iterable[Tensor] = (),
    graph: Graph | None = None,
) -> dict[Tensor, np.ndarray]:
    """
    Градиенты скалярной потери по всем узлам графа.

    Параметры из wrt, не лежащие на пути к потере, получают нулевой градиент.
    Повторное использование узла суммирует вклады.
    """
    if loss.size != 1:
        raise ContractError(
            f"backward: потеря должна быть скаляром, форма {loss.shape}"
        )
    graph = graph or Graph.from_output(loss)
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(node)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg
    for t in wrt:
        if t not in grads:
            grads[t] = np.zeros_like(t.data)
    for t, g in grads.items():
        if t.requires_grad:
            t.grad = np.asarray(g)
    return grads


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    eps: float = 1e-5,
    probe: int | None = None,
) -> float:
    """
    Сравнение backward() с центральными разностями.

    Возвращает max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    probe ограничивает проверку координатами с наибольшим |g_ad|.
    """
    x = np.array(x, dtype=np.float64)
    with numeric_mode("f64", check_finite=True):
        t = Tensor(x, requires_grad=True)
        g_ad = np.asarray(backward(f(t), wrt=[t])[t], dtype=np.float64).reshape(-1)

        coords = np.arange(x.size)
        if probe is not None and probe < x.size:
            coords = np.argsort(-np.abs(g_ad), kind="stable")[:probe]

        worst = 0.0
        for i in coords:
            xp = x.copy()
            xp.flat[i] += eps
            xm = x.copy()
            xm.flat[i] -= eps
            g_fd = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * eps)
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    return float(worst)
