"""Dense float64 tensors with a recording tape for reverse- and forward-mode AD.

Operations on :class:`Tensor` objects are recorded onto the active :class:`Tape`
whenever at least one input is tracked (a leaf created with
``requires_grad=True`` or a node already on the tape).  Untracked inputs are
evaluated eagerly and never touch the tape.

Broadcasting is deliberately restricted: elementwise binary ops require equal
shapes unless one side is a 0-d scalar.  Use :func:`broadcast_to` to expand
explicitly.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ADError", "as_tensor", "backward", "jvp", "vjp", "linearize",
    "jvp_fd", "check_gradients", "GradCheckReport",
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "concat",
    "reshape", "transpose", "broadcast_to", "take", "relu", "silu", "tanh", "exp",
    "sqrt", "cos", "power", "cross", "norm",
]


class ADError(ValueError):
    pass


_counter = itertools.count()
_active: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()

    def __len__(self):
        return len(self.nodes)

    def _record(self, node: "Tensor"):
        node.node_id = len(self.nodes)
        node.tape = self
        self.nodes.append(node)


def _current_tape() -> Tape | None:
    return _active[-1] if _active else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_vjp", "_jvp",
                 "tape", "node_id", "name", "uid")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._vjp = None
        self._jvp = None
        self.tape: Tape | None = None
        self.node_id: int | None = None
        self.name = name
        self.uid = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return slice_(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self): return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, vjp_fn, jvp_fn) -> Tensor:
    out = Tensor(data)
    if any(p.op.endswith(":detached") for p in parents):
        out.op = op + ":detached"
    elif any(p.tracked for p in parents):
        tape = _current_tape()
        if tape is None:
            out.op = op + ":detached"
        else:
            out.parents = parents
            out.op = op
            out._vjp = vjp_fn
            out._jvp = jvp_fn
            tape._record(out)
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ADError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # only scalar <-> tensor broadcasting is permitted
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def _z(t, like):
    return np.zeros_like(like) if t is None else t


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
                 lambda ta, tb: _add_t(ta, tb))


def _add_t(ta, tb):
    if ta is None:
        return tb
    if tb is None:
        return ta
    return ta + tb


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
                 lambda ta, tb: _add_t(ta, None if tb is None else -tb))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,), lambda ta: None if ta is None else -ta)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def jvp_fn(ta, tb):
        out = None if ta is None else ta * bd
        if tb is not None:
            out = _add_t(out, ad * tb)
        return out

    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), jvp_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    sa, sb = a.shape, b.shape

    def jvp_fn(ta, tb):
        r = None if ta is None else ta / bd
        if tb is not None:
            r = _add_t(r, -out * tb / bd)
        return r

    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)), jvp_fn)


def _unary(a, out, dydx, op) -> Tensor:
    return _make(out, (a,), op, lambda g: (g * dydx,), lambda ta: None if ta is None else ta * dydx)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0), (a.data > 0).astype(np.float64), "relu")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-safe sigmoid
    return _unary(a, a.data * s, s * (1.0 + a.data * (1.0 - s)), "silu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _unary(a, y, 1.0 - y * y, "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _unary(a, y, y, "exp")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
    return _unary(a, y, d, "sqrt")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.cos(a.data), -np.sin(a.data), "cos")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise ADError("power: exponent must be a constant")
    p = float(p)
    y = a.data ** p
    d = p * a.data ** (p - 1.0) if p != 0 else np.zeros_like(a.data)
    return _unary(a, y, d, "pow")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` 2-D (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ADError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    k = bd.shape[0]

    def vjp_fn(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    def jvp_fn(ta, tb):
        out = None if ta is None else ta @ bd
        if tb is not None:
            out = _add_t(out, ad @ tb)
        return out

    return _make(ad @ bd, (a, b), "matmul", vjp_fn, jvp_fn)


def cross(a, b) -> Tensor:
    """Cross product along the last axis (size 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ADError(f"cross: need equal shapes ending in 3, got {a.shape}, {b.shape}")
    ad, bd = a.data, b.data

    def jvp_fn(ta, tb):
        out = None if ta is None else np.cross(ta, bd)
        if tb is not None:
            out = _add_t(out, np.cross(ad, tb))
        return out

    return _make(np.cross(ad, bd), (a, b), "cross",
                 lambda g: (np.cross(bd, g), np.cross(g, ad)), jvp_fn)


def norm(a, axis=-1, keepdims=False, eps: float = 0.0) -> Tensor:
    """L2 norm ``sqrt(sum(a**2) + eps)``; gradient at an exact zero is taken as zero."""
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True) + eps)
    safe = np.where(n > 0, n, 1.0)
    unit = np.where(n > 0, ad / safe, 0.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp_fn(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * unit,)

    def jvp_fn(ta):
        if ta is None:
            return None
        t = (unit * ta).sum(axis=axis, keepdims=keepdims)
        return t

    return _make(out, (a,), "norm", vjp_fn, jvp_fn)


# ---------------------------------------------------------------- reductions / structure

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", vjp_fn,
                 lambda ta: None if ta is None else ta.sum(axis=axis, keepdims=keepdims))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / float(count))


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]

    def vjp_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    def jvp_fn(*ts):
        if all(t is None for t in ts):
            return None
        return np.concatenate([_z(t, it.data) for t, it in zip(ts, items)], axis=axis)

    return _make(np.concatenate([t.data for t in items], axis=axis), tuple(items), "concat",
                 vjp_fn, jvp_fn)


def slice_(a, idx) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters (and accumulates) into zeros."""
    a = as_tensor(a)
    shape = a.shape

    def vjp_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), "slice", vjp_fn, lambda ta: None if ta is None else ta[idx])


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp_fn(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), "take", vjp_fn,
                 lambda ta: None if ta is None else np.take(ta, indices, axis=axis))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),),
                 lambda ta: None if ta is None else ta.reshape(shape))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), "transpose",
                 lambda g: (np.transpose(g, inv),),
                 lambda ta: None if ta is None else np.transpose(ta, axes))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint sums over expanded axes."""
    a = as_tensor(a)
    old = a.shape
    shape = tuple(shape)
    lead = len(shape) - len(old)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(old) if s == 1 and shape[i + lead] != 1)

    def vjp_fn(g):
        return (g.sum(axis=axes, keepdims=True).reshape(old),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast", vjp_fn,
                 lambda ta: None if ta is None else np.broadcast_to(ta, shape).copy())


# ---------------------------------------------------------------- differentiation

def _backprop(root: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
    tape = root.tape
    grads: dict[int, np.ndarray] = {root.uid: seed}
    for node in reversed(tape.nodes[: root.node_id + 1]):
        g = grads.pop(node.uid, None)
        if g is None:
            continue
        for p, gp in zip(node.parents, node._vjp(g)):
            if not p.tracked:
                continue
            if p.uid in grads:
                grads[p.uid] = grads[p.uid] + gp
            else:
                grads[p.uid] = gp
    return grads


def _leaves(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    for node in root.tape.nodes[: root.node_id + 1]:
        for p in node.parents:
            if p.requires_grad and p.tape is None:
                seen[p.uid] = p
    return list(seen.values())


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(root)/d(leaf) for every tracked leaf feeding ``root``.

    Populates ``leaf.grad`` and returns the same arrays keyed by leaf tensor.
    A constant root with no tracked inputs yields an empty map.
    """
    if root.size != 1:
        raise ADError(f"backward: root must be scalar, got shape {root.shape}")
    if root.tape is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.data)
            return {root: root.grad}
        if root.op == "leaf":
            return {}
        raise ADError("backward: root was not recorded on a tape")
    raw = _backprop(root, np.ones_like(root.data))
    out = {}
    for leaf in _leaves(root):
        g = raw.get(leaf.uid)
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
        leaf.grad = g
        out[leaf] = g
    return out


def _forward_tangents(tape: Tape, seeds: dict[int, np.ndarray], upto: Tensor) -> np.ndarray | None:
    tangents = dict(seeds)
    for node in tape.nodes[: upto.node_id + 1]:
        ts = [tangents.get(p.uid) for p in node.parents]
        if all(t is None for t in ts):
            continue
        t = node._jvp(*ts)
        if t is not None:
            if np.shape(t) != node.shape:
                t = np.broadcast_to(t, node.shape)
            tangents[node.uid] = t
    return tangents.get(upto.uid)


class Linearization:
    """A recorded evaluation of ``f`` at ``x`` supporting repeated J·v and Jᵀ·u."""

    def __init__(self, f: Callable[[Tensor], Tensor], x):
        x = np.asarray(x, dtype=np.float64)
        self.tape = Tape()
        with self.tape:
            self.x = Tensor(x, requires_grad=True)
            y = as_tensor(f(self.x))
        self.y = y
        self.value = y.data.copy()
        if not np.all(np.isfinite(self.value)):
            raise ADError("non-finite output")

    def jvp(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.x.shape:
            raise ADError(f"jvp: direction shape {v.shape} != input shape {self.x.shape}")
        if self.y.tape is None:
            return np.zeros_like(self.value)
        t = _forward_tangents(self.tape, {self.x.uid: v}, self.y)
        t = np.zeros_like(self.value) if t is None else np.asarray(t)
        if not np.all(np.isfinite(t)):
            raise ADError("jvp: non-finite tangent")
        return t

    def vjp(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != self.value.shape:
            raise ADError(f"vjp: cotangent shape {u.shape} != output shape {self.value.shape}")
        if self.y.tape is None:
            return np.zeros_like(self.x.data)
        g = _backprop(self.y, u).get(self.x.uid)
        g = np.zeros_like(self.x.data) if g is None else np.asarray(g).reshape(self.x.shape)
        if not np.all(np.isfinite(g)):
            raise ADError("vjp: non-finite cotangent")
        return g


def linearize(f, x) -> Linearization:
    return Linearization(f, x)


def jvp(f, x, v) -> np.ndarray:
    """J_f(x)·v by forward-mode propagation over the recorded tape."""
    return Linearization(f, x).jvp(v)


def vjp(f, x, u) -> np.ndarray:
    """J_f(x)ᵀ·u via one reverse sweep."""
    return Linearization(f, x).vjp(u)


def jvp_fd(f: Callable[[np.ndarray], np.ndarray], x, v, h: float | None = None) -> np.ndarray:
    """Central-difference J·v on a plain numpy function."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise ADError(f"jvp_fd: direction shape {v.shape} != input shape {x.shape}")
    if h is None:
        h = 1e-5 * (1.0 + np.abs(x).max(initial=0.0))
    out = (np.asarray(f(x + h * v)) - np.asarray(f(x - h * v))) / (2 * h)
    if not np.all(np.isfinite(out)):
        raise ADError("jvp_fd: non-finite output")
    return out


# ---------------------------------------------------------------- gradient checking

class GradCheckReport(dict):
    """Maps parameter-block name to ``(passed, max_rel_err)``."""

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, (ok, _) in self.items() if not ok]


def check_gradients(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
                    tolerance: float = 1e-4, *, max_entries: int = 24, n_directions: int = 3,
                    seed: int = 0, atol: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(params)`` with central differences.

    Blocks with at most ``max_entries`` elements are checked entry by entry; larger
    blocks are checked along ``n_directions`` random unit directions.  The error
    for one probe is ``|ad - fd| / max(|ad|, |fd|, atol)``.
    """
    report = GradCheckReport()
    if not params:
        return report
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values):
        leaves = {k: Tensor(v) for k, v in values.items()}
        return float(as_tensor(f(leaves)).data)

    with Tape():
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        root = as_tensor(f(leaves))
        grads = backward(root)
    rng = np.random.default_rng(seed)

    for name, value in params.items():
        g = grads.get(leaves[name], np.zeros_like(value))
        if value.size <= max_entries:
            dirs = []
            for i in range(value.size):
                e = np.zeros(value.size)
                e[i] = 1.0
                dirs.append(e.reshape(value.shape))
        else:
            dirs = []
            for _ in range(n_directions):
                d = rng.standard_normal(value.shape)
                dirs.append(d / np.linalg.norm(d))
        h = 1e-5 * (1.0 + np.abs(value).max(initial=0.0))
        worst = 0.0
        for d in dirs:
            plus = dict(params)
            minus = dict(params)
            plus[name] = value + h * d
            minus[name] = value - h * d
            fd = (evaluate(plus) - evaluate(minus)) / (2 * h)
            ad = float((g * d).sum())
            err = abs(ad - fd) / max(abs(ad), abs(fd), atol)
            worst = max(worst, err)
        report[name] = (bool(worst <= tolerance), worst)
    return report
