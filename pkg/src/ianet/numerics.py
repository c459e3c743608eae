"""Dense tensors with tape-based reverse-mode differentiation and Adam.

Every network operation in the package is assembled from the primitives in
this module.  A primitive computes its forward value with numpy and, when a
:class:`Graph` is active and an input requires gradients, appends a node to
the graph's tape.  :meth:`Graph.backward` walks the tape in exact reverse
execution order and dispatches each node to the rule stored in
:data:`BACKWARD` under the op's name, so a rule can be swapped out (the
gradient checker relies on this for fault injection).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A NaN or Inf was produced or consumed."""


BACKWARD: dict[str, Callable] = {}

_active: list["Graph"] = []
_check_finite = False


def register(name: str):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class Param(Tensor):
    """A learnable tensor carrying its gradient accumulator and Adam moments."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    ctx: dict = field(default_factory=dict)


class Graph:
    """Execution-ordered record of primitive ops, used as a context manager.

    >>> with Graph() as g:
    ...     loss = sum_all(mul(x, x))
    ...     g.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = BACKWARD[node.op](node.ctx, g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += gi
        # intermediate buffers are dead once the pass is complete
        for node in self.nodes:
            if not isinstance(node.out, Param):
                node.out.grad = None
        self.nodes.clear()


@contextlib.contextmanager
def checked():
    """Raise :class:`NumericalError` as soon as any op yields NaN/Inf."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], ctx: dict | None = None) -> Tensor:
    if _check_finite and not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite output from {op}")
    out = Tensor(value)
    if _active and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active[-1].nodes.append(Node(op, out, tuple(inputs), ctx if ctx is not None else {}))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must agree."""
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", np.matmul(a.data, b.data), (a, b), {"a": a.data, "b": b.data})


@register("matmul")
def _matmul_bw(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


@register("add")
def _add_bw(ctx, g):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


@register("sub")
def _sub_bw(ctx, g):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), {"a": a.data, "b": b.data})


@register("mul")
def _mul_bw(ctx, g):
    return g * ctx["b"], g * ctx["a"]


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", x.data * c, (x,), {"c": c})


@register("scale")
def _scale_bw(ctx, g):
    return (g * ctx["c"],)


def one_minus(x: Tensor) -> Tensor:
    return _emit("one_minus", 1.0 - x.data, (x,))


@register("one_minus")
def _one_minus_bw(ctx, g):
    return (-g,)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of ``x`` (last axis n)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return _emit("add_bias", x.data + b.data, (x, b))


@register("add_bias")
def _add_bias_bw(ctx, g):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), {"y": y})


@register("sigmoid")
def _sigmoid_bw(ctx, g):
    y = ctx["y"]
    return (g * y * (1.0 - y),)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), {"y": y})


@register("tanh")
def _tanh_bw(ctx, g):
    y = ctx["y"]
    return (g * (1.0 - y * y),)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    if x.data.ndim < 1 or x.data.size == 0:
        raise DimensionError(f"softmax_rows: empty input {x.shape}")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax_rows", y, (x,), {"y": y})


@register("softmax_rows")
def _softmax_bw(ctx, g):
    y = ctx["y"]
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _emit("transpose", np.swapaxes(x.data, -1, -2), (x,))


@register("transpose")
def _transpose_bw(ctx, g):
    return (np.swapaxes(g, -1, -2),)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: column shapes differ {[p.shape for p in parts]}")
    sizes = [p.shape[0] for p in parts]
    return _emit("concat_rows", np.concatenate([p.data for p in parts], axis=0), parts, {"sizes": sizes})


@register("concat_rows")
def _concat_rows_bw(ctx, g):
    return np.split(g, np.cumsum(ctx["sizes"])[:-1], axis=0)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[:-1] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row shapes differ {[p.shape for p in parts]}")
    sizes = [p.shape[-1] for p in parts]
    return _emit("concat_cols", np.concatenate([p.data for p in parts], axis=-1), parts, {"sizes": sizes})


@register("concat_cols")
def _concat_cols_bw(ctx, g):
    return np.split(g, np.cumsum(ctx["sizes"])[:-1], axis=-1)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start..stop-1`` along the second-to-last axis."""
    n = x.shape[-2]
    if not 0 <= start <= stop <= n:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")
    return _emit("slice_rows", x.data[..., start:stop, :], (x,), {"shape": x.shape, "start": start, "stop": stop})


@register("slice_rows")
def _slice_rows_bw(ctx, g):
    full = np.zeros(ctx["shape"], dtype=g.dtype)
    full[..., ctx["start"]:ctx["stop"], :] = g
    return (full,)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[m, D] -> [H, m, D/H]: column block h becomes head h."""
    m, d = x.shape
    if d % heads:
        raise DimensionError(f"split_heads: {heads} heads do not divide width {d}")
    y = x.data.reshape(m, heads, d // heads).transpose(1, 0, 2)
    return _emit("split_heads", y, (x,), {"shape": x.shape})


@register("split_heads")
def _split_heads_bw(ctx, g):
    return (g.transpose(1, 0, 2).reshape(ctx["shape"]),)


def _tree_sum(x: np.ndarray) -> np.ndarray:
    # pairwise folding: averaging 2^k identical heads is then exact
    while x.shape[0] > 1:
        half = x.shape[0] // 2
        folded = x[:half] + x[half:2 * half]
        x = np.concatenate([folded, x[2 * half:]]) if x.shape[0] % 2 else folded
    return x[0]


def mean_heads(x: Tensor) -> Tensor:
    """Uniform average over the leading (head) axis."""
    h = x.shape[0]
    return _emit("mean_heads", _tree_sum(x.data) / h, (x,), {"h": h})


@register("mean_heads")
def _mean_heads_bw(ctx, g):
    h = ctx["h"]
    return (np.broadcast_to(g / h, (h,) + g.shape),)


def normalize_rows(x: Tensor) -> Tensor:
    """L2-normalise each row; all-zero rows map to zero rows."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    y = x.data / safe
    return _emit("normalize_rows", y, (x,), {"y": y, "n": safe, "zero": n == 0})


@register("normalize_rows")
def _normalize_rows_bw(ctx, g):
    y, n = ctx["y"], ctx["n"]
    gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / n
    return (np.where(ctx["zero"], 0.0, gx),)


def gather(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick ``x[rows[i], cols[i]]`` into a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    return _emit("gather", x.data[rows, cols], (x,), {"shape": x.shape, "rows": rows, "cols": cols})


@register("gather")
def _gather_bw(ctx, g):
    full = np.zeros(ctx["shape"], dtype=g.dtype)
    np.add.at(full, (ctx["rows"], ctx["cols"]), g)
    return (full,)


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Entries ``x[idx]`` of a 1-D tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    return _emit("take", x.data[idx], (x,), {"shape": x.shape, "idx": idx})


@register("take")
def _take_bw(ctx, g):
    full = np.zeros(ctx["shape"], dtype=g.dtype)
    np.add.at(full, ctx["idx"], g)
    return (full,)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", np.asarray(x.data.sum()), (x,), {"shape": x.shape})


@register("sum_all")
def _sum_all_bw(ctx, g):
    return (np.full(ctx["shape"], g, dtype=g.dtype),)


def add_scalars(a: Tensor, b: Tensor, cb: float = 1.0) -> Tensor:
    """``a + cb * b`` for two scalar tensors."""
    return _emit("add_scalars", np.asarray(a.data + cb * b.data), (a, b), {"cb": cb})


@register("add_scalars")
def _add_scalars_bw(ctx, g):
    return g, g * ctx["cb"]


CS_EPS = 1e-7


def soft_bce(cs: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of probabilities ``cs`` against soft labels."""
    o = np.asarray(target, dtype=cs.dtype)
    if o.shape != cs.shape:
        raise DimensionError(f"soft_bce: target {o.shape} vs cs {cs.shape}")
    p = np.clip(cs.data, CS_EPS, 1.0 - CS_EPS)
    loss = -(o * np.log(p) + (1.0 - o) * np.log(1.0 - p)).mean()
    return _emit("soft_bce", np.asarray(loss, dtype=cs.dtype), (cs,), {"p": p, "o": o})


@register("soft_bce")
def _soft_bce_bw(ctx, g):
    p, o = ctx["p"], ctx["o"]
    return (g * (p - o) / (p * (1.0 - p)) / p.size,)


def smooth_l1_value(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1(pred: Tensor, target: np.ndarray, denom: float) -> Tensor:
    """``sum(S(pred - target)) / denom`` with S the smooth-L1 (knee at 1)."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"smooth_l1: target {t.shape} vs pred {pred.shape}")
    d = pred.data - t
    val = smooth_l1_value(d).sum() / denom
    return _emit("smooth_l1", np.asarray(val, dtype=pred.dtype), (pred,), {"d": d, "denom": denom})


@register("smooth_l1")
def _smooth_l1_bw(ctx, g):
    d = ctx["d"]
    return (g * np.where(np.abs(d) < 1.0, d, np.sign(d)) / ctx["denom"],)


# ---------------------------------------------------------------------------
# layers built from primitives


@dataclass
class LinearParams:
    W: Param
    b: Param

    def params(self) -> list[Param]:
        return [self.W, self.b]


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return add_bias(matmul(x, p.W), p.b)


# ---------------------------------------------------------------------------
# initialisation


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, name: str, dtype=np.float32) -> LinearParams:
    return LinearParams(
        Param(xavier_uniform(rng, d_in, d_out, dtype), name=f"{name}.W"),
        Param(np.zeros(d_out, dtype=dtype), name=f"{name}.b"),
    )


# ---------------------------------------------------------------------------
# optimisation


def adam_step(params: Iterable[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place, then zero the gradients."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5,
               oracle_dtype=None) -> list[GradCheckEntry]:
    """Compare backward-pass gradients of ``f()`` with central differences.

    ``f`` must rebuild the scalar output from the current parameter values on
    every call.  Parameters should be float64.  With ``oracle_dtype`` (e.g.
    ``np.longdouble``) the finite differences are evaluated at that precision
    while the analytic side stays in the parameters' own dtype; this removes
    the ~1e-11 rounding floor that otherwise dominates near-zero gradients.
    """
    for p in params:
        p.zero_grad()
    with Graph() as g:
        out = f()
        g.backward(out)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    saved = [p.data for p in params]
    if oracle_dtype is not None:
        for p in params:
            p.data = p.data.astype(oracle_dtype)
    report = []
    try:
        for p, a in zip(params, analytic):
            numeric = np.zeros(p.shape, dtype=np.float64)
            flat = p.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().data
                flat[i] = orig - h
                fm = f().data
                flat[i] = orig
                num_flat[i] = float((fp - fm) / (2 * h))
            err = relative_error(a, numeric)
            if err.size:
                k = np.unravel_index(int(np.argmax(err)), err.shape)
                report.append(GradCheckEntry(p.name or "?", float(err[k]), tuple(int(i) for i in k),
                                             float(a[k]), float(numeric[k])))
            else:
                report.append(GradCheckEntry(p.name or "?", 0.0, (), 0.0, 0.0))
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return report
