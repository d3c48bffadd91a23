"""Dense tensor kernels, a small reverse-mode tape and a finite-difference checker.

Tensors are plain C-contiguous numpy arrays (float32 unless a caller asks for
float64, which the gradient checker does). `Var` wraps an array on the tape;
every differentiable op below has a hand-written backward rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError

DTYPE = np.float32
MAGIC = b"TENSORv1"


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Plain kernels


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis with per-row max subtraction."""
    a = np.asarray(a)
    if a.shape[-1] < 1:
        raise DimensionError("softmax_rows: rows must be non-empty")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    d = q.shape[-1]
    return softmax_rows((q @ np.swapaxes(k, -1, -2)) * q.dtype.type(1.0 / math.sqrt(d)))


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q kᵀ / √d) v for q [m×d], k [p×d], v [p×d]."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not agree")
    if k.shape[-2] < 1:
        raise DimensionError("attention: need at least one key")
    return attention_weights(q, k) @ v


# ---------------------------------------------------------------------------
# Tape


class Var:
    """An array on the tape. Leaves with requires_grad collect `.grad`."""

    __slots__ = ("value", "grad", "parents", "grad_fn", "requires_grad")

    def __init__(self, value, parents=(), grad_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return mm(self, other)

    def backward(self, seed=None):
        backward(self, seed)


def leaf(x, dtype=None) -> Var:
    x = np.asarray(x)
    if dtype is not None:
        x = x.astype(dtype)
    return Var(np.ascontiguousarray(x), requires_grad=True)


def const(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(out: Var, seed=None) -> None:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    grads = {id(out): np.ones_like(out.value) if seed is None else seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def add(a, b) -> Var:
    a, b = const(a), const(b)
    sa, sb = a.value.shape, b.value.shape
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    sa, sb = a.value.shape, b.value.shape
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return Var(av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, s: float) -> Var:
    s = a.value.dtype.type(s)
    return Var(a.value * s, (a,), lambda g: (g * s,))


def mm(a, b) -> Var:
    """Batched matmul over the last two axes (numpy broadcasting on the rest)."""
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def grad_fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Var(av @ bv, (a, b), grad_fn)


def transpose(a: Var) -> Var:
    return Var(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Var], axis: int) -> Var:
    xs = [const(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return Var(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
               lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a: Var, idx: np.ndarray, axis: int) -> Var:
    """Gather along `axis`; backward scatter-adds into the source positions."""
    av = a.value
    axis = axis % av.ndim

    def grad_fn(g):
        out = np.zeros_like(av)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (out,)

    return Var(np.take(av, idx, axis=axis), (a,), grad_fn)


def add_rows(a: Var, rows: np.ndarray, vec: Var) -> Var:
    """Add `vec` (shape [..., d]) to rows `rows` of `a` ([..., n, d])."""
    a, vec = const(a), const(vec)
    out = a.value.copy()
    out[..., rows, :] += vec.value[..., None, :]
    vshape = vec.value.shape

    def grad_fn(g):
        return g, _unbroadcast(g[..., rows, :].sum(axis=-2), vshape)

    return Var(out, (a, vec), grad_fn)


def replace_rows(a: Var, rows: np.ndarray, src: Var, src_rows: np.ndarray) -> Var:
    """Copy of `a` with a[..., rows, :] = src[..., src_rows, :]."""
    a, src = const(a), const(src)
    out = a.value.copy()
    out[..., rows, :] = src.value[..., src_rows, :]

    def grad_fn(g):
        ga = g.copy()
        ga[..., rows, :] = 0
        gs = np.zeros_like(src.value)
        np.add.at(np.moveaxis(gs, -2, 0), src_rows, np.moveaxis(g[..., rows, :], -2, 0))
        return ga, gs

    return Var(out, (a, src), grad_fn)


def softmax(a: Var) -> Var:
    y = softmax_rows(a.value)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Var(y, (a,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Var) -> Var:
    """tanh-approximated GELU."""
    x = a.value
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    th = np.tanh(inner)
    y = 0.5 * x * (1 + th)

    def grad_fn(g):
        d_inner = c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * d_inner),)

    return Var(y, (a,), grad_fn)


def layer_norm(a: Var, eps: float = 1e-5) -> Var:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Var(y, (a,), grad_fn)


def mean(a: Var) -> Var:
    n = a.value.size
    shape = a.value.shape
    dt = a.value.dtype.type
    return Var(a.value.mean(dtype=a.value.dtype).reshape(()), (a,),
               lambda g: (np.full(shape, g / dt(n), dtype=a.value.dtype),))


def mse(pred: Var, target) -> Var:
    """Mean of squared differences, a scalar Var."""
    target = const(target)
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def attention(q: Var, k: Var, v: Var) -> Var:
    """Differentiable softmax(q kᵀ/√d) v over the last two axes."""
    d = q.value.shape[-1]
    if k.value.shape[-1] != d or k.value.shape[-2] != v.value.shape[-2]:
        raise DimensionError(
            f"attention: q {q.value.shape}, k {k.value.shape}, v {v.value.shape}")
    s = scale(mm(q, transpose(k)), 1.0 / math.sqrt(d))
    return mm(softmax(s), v)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradReport:
    max_rel_error: dict[str, float]
    tol: float
    probes: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e < self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def table(self) -> str:
        lines = [f"{'parameter':<28}{'max rel err':>14}  status"]
        for name, err in self.max_rel_error.items():
            lines.append(f"{name:<28}{err:>14.3e}  {'ok' if err < self.tol else 'FAIL'}")
        return "\n".join(lines)


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def finite_diff_gradcheck(
    f: Callable[[], float],
    params: dict[str, np.ndarray] | Sequence[np.ndarray],
    analytic: dict[str, np.ndarray] | Sequence[np.ndarray],
    eps: float = 1e-3,
    tol: float = 1e-4,
    probes: int = 8,
    seed: int = 0,
    select: str = "random",
) -> GradReport:
    """Compare analytic gradients against central differences.

    `f` reads the arrays in `params` in place; each probe perturbs one
    coordinate by ±eps, re-evaluates and restores it. Groups with more than
    `probes` entries are sampled: uniformly ("random") or by taking the
    coordinates with the largest analytic magnitude ("largest"). The latter
    avoids near-stationary coordinates, where the O(eps²) truncation term
    swamps a tiny derivative and the relative error says nothing about the
    backward rule.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if select not in ("random", "largest"):
        raise ValueError(f"unknown probe selection {select!r}")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
        analytic = {f"p{i}": g for i, g in enumerate(analytic)}
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    total = 0

    def evaluate() -> float:
        val = float(f())
        if not math.isfinite(val):
            raise EvaluationError(f"gradcheck: objective returned {val}")
        return val

    for name, p in params.items():
        g = analytic[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradcheck: gradient {g.shape} vs parameter {p.shape}")
        flat = p.reshape(-1)
        if flat.size and not np.shares_memory(flat, p):
            raise DimensionError(f"gradcheck: parameter {name} must be contiguous")
        gflat = g.reshape(-1)
        n = flat.size
        if n <= probes:
            coords = np.arange(n)
        elif select == "largest":
            coords = np.argsort(-np.abs(gflat), kind="stable")[:probes]
        else:
            coords = rng.choice(n, size=probes, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, rel_error(float(gflat[i]), num))
            total += 1
        errors[name] = worst
    return GradReport(errors, tol, total)


# ---------------------------------------------------------------------------
# TENSORv1 files


def dumps_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = " ".join([MAGIC.decode(), str(arr.ndim), *map(str, arr.shape)]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def loads_tensor(blob: bytes) -> np.ndarray:
    nl = blob.index(b"\n")
    parts = blob[:nl].split()
    if not parts or parts[0] != MAGIC:
        raise ValueError("not a TENSORv1 payload")
    ndim = int(parts[1])
    shape = tuple(int(s) for s in parts[2:2 + ndim])
    if len(shape) != ndim:
        raise ValueError("TENSORv1 header truncated")
    data = np.frombuffer(blob, dtype="<f4", offset=nl + 1)
    if data.size != math.prod(shape):
        raise ValueError(f"TENSORv1 payload has {data.size} values, header says {shape}")
    return data.reshape(shape).astype(DTYPE)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())
