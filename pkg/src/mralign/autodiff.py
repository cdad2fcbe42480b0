"""Small reverse-mode autodiff engine on top of numpy.

Every op records a closure that maps the output gradient to input gradients.
Shapes broadcast only in the keepdims sense: operands either match, one of
them is a scalar, or they have the same rank and each axis is equal or 1.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def default_dtype():
    return _DTYPE[-1]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "kind", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.kind: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node(self):
        """The autodiff record ``(kind, parents)`` or None for leaves/constants."""
        if self._backward is None:
            return None
        return self.kind, self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, kind={self.kind})"

    def detach(self) -> Tensor:
        return stop_gradient(self)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, kind: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.kind = kind
        out.parents = parents
        out._backward = backward
    return out


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.ndim == b.ndim and all(x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape)):
        return
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) < grad.ndim:
        grad = grad.sum(axis=tuple(range(grad.ndim - len(shape))))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        "div",
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive argument")
    ad = a.data
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1 - out * out),))


def maximum_const(a, c: float) -> Tensor:
    """max(a, c) against a constant; gradient passes where a > c."""
    a = as_tensor(a)
    keep = a.data > c
    return _make(np.where(keep, a.data, a.data.dtype.type(c)), "maximum", (a,), lambda g: (g * keep,))


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """2-D matmul, or batched (..., n, k) @ (k, m) / (b, n, k) @ (b, k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2-D, got {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), "transpose", (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


# -- reductions --------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), "mean", (a,), backward)


def tmax(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
        return (full,)

    return _make(out if keepdims else out.squeeze(axis), "max", (a,), backward)


# -- structural --------------------------------------------------------------
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        "concat",
        tuple(ts),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def take(a, idx) -> Tensor:
    """Indexing (slices or integer arrays); repeated indices accumulate."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("take: index must be an int/slice/array, not a Tensor")
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), "slice", (a,), backward)


class _StopGradientTape:
    """Records stop-gradient outputs once, then replays them in order.

    Finite differences must hold stop-gradient outputs constant, exactly as
    the analytic gradient does; ``gradcheck`` uses this to freeze them at the
    unperturbed point.
    """

    def __init__(self):
        self.values: list[np.ndarray] | None = None
        self.replay = False
        self.pos = 0

    @contextlib.contextmanager
    def session(self, values: list[np.ndarray], replay: bool):
        saved = (self.values, self.replay, self.pos)
        self.values, self.replay, self.pos = values, replay, 0
        try:
            yield
            if replay and self.pos != len(values):
                raise RuntimeError(f"stop-gradient replay used {self.pos} of {len(values)} recorded values")
        finally:
            self.values, self.replay, self.pos = saved

    def __call__(self, data: np.ndarray) -> np.ndarray:
        if self.values is None:
            return data.copy()
        if not self.replay:
            self.values.append(data.copy())
            return data.copy()
        if self.pos >= len(self.values) or self.values[self.pos].shape != data.shape:
            raise RuntimeError("stop-gradient replay diverged from the recorded call sequence")
        out = self.values[self.pos].astype(data.dtype)
        self.pos += 1
        return out


_SG_TAPE = _StopGradientTape()


def stop_gradient(a) -> Tensor:
    """Same values, cut from the graph."""
    a = as_tensor(a)
    return Tensor(_SG_TAPE(a.data), requires_grad=False)


# -- composites --------------------------------------------------------------
def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise DomainError(f"softmax: temperature must be positive, got {temperature}")
    x = as_tensor(x)
    s = scale(x, 1.0 / temperature) if temperature != 1.0 else x
    s = s - stop_gradient(tmax(s, axis=axis, keepdims=True))
    e = exp(s)
    return e / tsum(e, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> Tensor:
    """x - logsumexp(x), with max subtraction."""
    x = as_tensor(x)
    s = x - stop_gradient(tmax(x, axis=axis, keepdims=True))
    return s - log(tsum(exp(s), axis=axis, keepdims=True))


def l2_normalize(v, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Unit-normalise along ``axis``; rows with norm below eps map to zero."""
    v = as_tensor(v)
    sq = tsum(v * v, axis=axis, keepdims=True)
    small = sq.data < eps * eps
    if np.any(small):
        keep = (~small).astype(v.data.dtype)
        sq = sq + Tensor(small.astype(v.data.dtype))
        return v * Tensor(keep) / sqrt(sq)
    return v / sqrt(sq)


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError(f"cosine_similarity: length mismatch {a.shape} vs {b.shape}")
    return tsum(l2_normalize(a, axis, eps) * l2_normalize(b, axis, eps), axis=axis)


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "sum": tsum,
    "mean": tmean,
    "max": tmax,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": take,
    "transpose": transpose,
    "scale": scale,
    "sqrt": sqrt,
    "tanh": tanh,
    "reshape": reshape,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- backward ----------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every reachable leaf; returns leaf -> gradient."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.data.dtype:
                pg = pg.astype(parent.data.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt``; unreachable inputs get exact zeros."""
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# -- finite differences --------------------------------------------------------
def rel_error(g: np.ndarray, g_hat: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    g_hat = np.asarray(g_hat, dtype=np.float64)
    return np.abs(g - g_hat) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(g_hat)))


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None = None

    def ok(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def gradcheck(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-3,
    max_coords: int | None = 64,
    seed: int = 0,
) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` against central differences.

    The analytic pass runs at the default precision. Finite differences are
    taken in float64 so that the check measures the derivative rather than
    float32 rounding of the loss. Stop-gradient outputs are held at their
    unperturbed values during the perturbed evaluations. With ``max_coords`` set, that many random
    coordinates per parameter are probed.
    """
    rng = np.random.default_rng(seed)
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = fn(leaves)
    analytic = dict(zip(leaves, grad(loss, list(leaves.values()))))

    base64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    frozen: list[np.ndarray] = []

    def f64(overrides: dict[str, np.ndarray], replay: bool = True) -> float:
        with precision(np.float64), _SG_TAPE.session(frozen, replay):
            ts = {k: Tensor(overrides.get(k, base64[k])) for k in base64}
            return float(fn(ts).data)

    f64({}, replay=False)

    worst, where, count = 0.0, None, 0
    for name, value in base64.items():
        flat_n = value.size
        if max_coords is None or flat_n <= max_coords:
            coords = np.arange(flat_n)
        else:
            coords = np.sort(rng.choice(flat_n, size=max_coords, replace=False))
        for c in coords:
            idx = np.unravel_index(int(c), value.shape)
            plus = value.copy()
            plus[idx] += eps
            minus = value.copy()
            minus[idx] -= eps
            numeric = (f64({name: plus}) - f64({name: minus})) / (2 * eps)
            err = float(rel_error(analytic[name][idx], numeric))
            count += 1
            if err > worst or where is None:
                worst, where = max(worst, err), (name, tuple(int(i) for i in idx))
    return GradCheckResult(worst, count, where)


# -- optimizer -----------------------------------------------------------------
@dataclass
class OptState:
    lr: float = 5e-5
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptState,
    lr: float | None = None,
    no_decay: Iterable[str] = (),
) -> None:
    """One decoupled-weight-decay Adam update, applied in place."""
    lr = state.lr if lr is None else lr
    skip = set(no_decay)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adamw: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ShapeError(f"adamw: moment shape {m.shape} != parameter shape {p.shape} for {name!r}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay and name not in skip:
            p *= p.dtype.type(1.0 - lr * state.weight_decay)
        step_size = lr / bc1
        denom = np.sqrt(v / bc2) + state.epsilon
        p -= (step_size * m / denom).astype(p.dtype)
