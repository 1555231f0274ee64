"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the primitives the super-resolution pipeline needs are provided: conv2d,
relu, bilinear upsampling, average pooling, softmax, l1 loss and a few
structural helpers (add, concat, sum).  There is no broadcasting; operands of
binary ops must have identical shapes.

Every primitive records a node on its output.  ``backward`` walks the nodes in
reverse topological order, accumulates gradients into leaf tensors that
require them, and then frees the graph, so a second ``backward`` on the same
loss is an error.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, NumericError, StateError

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = contextvars.ContextVar("mmsr_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording graph nodes."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ConfigError(f"unsupported dtype {dtype!r}; expected 'f32' or 'f64'") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dt}")
    return dt


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Dense row-major float array that may take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.array(data, dtype=resolve_dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numel(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._node.op}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{op})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a primitive's forward result and attach its backward rule.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite values in output", where=op)
    inputs = tuple(inputs)
    needs = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = Node(op, inputs, backward_fn)
    return out


class Graph:
    """Recorded primitives reachable from one output, in topological order."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.tensors if t._node is not None]

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise StateError("loss is detached: nothing in its history requires grad")
    if loss._node is not None and loss._node.consumed:
        raise StateError("graph already consumed by a previous backward()")

    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise StateError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig
    for node in graph.nodes:
        node.consumed = True
        node.backward_fn = _consumed


def _consumed(_g):
    raise StateError("graph already consumed by a previous backward()")


# --------------------------------------------------------------------------
# structural ops


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.dtype
    out = np.asarray(x.data.sum(dtype=dt)).reshape(())
    return record("sum", out, (x,), lambda g: (np.full(shape, g, dtype=dt),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ArgumentError("concat: empty input")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ArgumentError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, tensors, bw)


# --------------------------------------------------------------------------
# nonlinearities and losses


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("NaN input", where="softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), bw)


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference; subgradient 0 at ties."""
    b = as_tensor(b, dtype=a.dtype)
    _same_shape("l1_loss", a, b)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=a.dtype)).reshape(())

    def bw(g):
        s = np.sign(diff) * (g / n)
        return (s, -s)

    return record("l1_loss", out, (a, b), bw)


# --------------------------------------------------------------------------
# convolution


def _offsets(k: int):
    for d in range(k * k):
        yield d, d // k, d % k


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, H*W) with zero same-padding, rows ordered (c, ky, kx)."""
    c, h, w = x.shape
    if k == 1:
        return x.reshape(c, h * w)
    r = k // 2
    padded = np.pad(x, ((0, 0), (r, r), (r, r)))
    cols = np.empty((c, k * k, h, w), dtype=x.dtype)
    for d, dy, dx in _offsets(k):
        cols[:, d] = padded[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * k * k, h * w)


def col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    c, h, w = shape
    if k == 1:
        return cols.reshape(c, h, w)
    r = k // 2
    cols = cols.reshape(c, k * k, h, w)
    padded = np.zeros((c, h + 2 * r, w + 2 * r), dtype=cols.dtype)
    for d, dy, dx in _offsets(k):
        padded[:, dy:dy + h, dx:dx + w] += cols[:, d]
    return padded[:, r:r + h, r:r + w].copy()


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, k: int | None = None) -> Tensor:
    """Same-padded (zeros) 2-D cross-correlation of a C_in x H x W map."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ArgumentError(f"conv2d: expected CxHxW input and 4-D weight, got {x.shape}, {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if k is None:
        k = kh
    if kh != k or kw != k or k % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be odd and square of size {k}, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ConfigError(f"conv2d: input has {x.shape[0]} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ConfigError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    _, h, w = x.shape
    cols = im2col(x.data, k)
    wm = weight.data.reshape(c_out, c_in * k * k)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, h, w)
    x_needs, w_needs = x.requires_grad, weight.requires_grad

    def bw(g):
        gm = g.reshape(c_out, h * w)
        gx = col2im(wm.T @ gm, x.shape, k) if x_needs else None
        gw = (gm @ cols.T).reshape(weight.shape) if w_needs else None
        gb = gm.sum(axis=1) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, bw)


# --------------------------------------------------------------------------
# resampling


def interp_matrix(out_len: int, in_len: int, factor: int, dtype) -> np.ndarray:
    """Linear interpolation weights, align-corners-false, edges clamped."""
    dst = np.arange(out_len, dtype=np.float64)
    src = np.maximum((dst + 0.5) / factor - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_len - 1)
    i1 = np.minimum(i0 + 1, in_len - 1)
    frac = src - i0
    m = np.zeros((out_len, in_len), dtype=np.float64)
    rows = np.arange(out_len)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_upsample(img: Tensor, factor: int) -> Tensor:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ArgumentError(f"bilinear_upsample: factor must be a positive integer, got {factor!r}")
    if img.ndim != 3:
        raise ArgumentError(f"bilinear_upsample: expected CxHxW, got {img.shape}")
    if factor == 1:
        return record("bilinear_upsample", img.data.copy(), (img,), lambda g: (g,))
    _, h, w = img.shape
    ay = interp_matrix(h * factor, h, factor, img.dtype)
    ax = interp_matrix(w * factor, w, factor, img.dtype)
    out = ay @ img.data @ ax.T

    def bw(g):
        return (ay.T @ g @ ax,)

    return record("bilinear_upsample", out, (img,), bw)


def avg_pool_down(img: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor block means."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ArgumentError(f"avg_pool_down: factor must be a positive integer, got {factor!r}")
    if img.ndim != 3:
        raise ArgumentError(f"avg_pool_down: expected CxHxW, got {img.shape}")
    c, h, w = img.shape
    if h % factor or w % factor:
        raise ArgumentError(f"avg_pool_down: {h}x{w} not divisible by {factor}")
    out = pool_mean(img.data, factor)
    inv = img.dtype.type(1.0 / (factor * factor))

    def bw(g):
        return (np.repeat(np.repeat(g * inv, factor, axis=1), factor, axis=2),)

    return record("avg_pool_down", out, (img,), bw)


def pool_mean(a: np.ndarray, factor: int) -> np.ndarray:
    """Block means taken relative to each block's first sample, exact for constant blocks."""
    c, h, w = a.shape
    blocks = a.reshape(c, h // factor, factor, w // factor, factor)
    ref = blocks[:, :, :1, :, :1]
    return (ref + (blocks - ref).mean(axis=(2, 4), keepdims=True, dtype=a.dtype))[:, :, 0, :, 0]


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers and the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **kw) -> "AdamState":
        params = list(params)
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckResult:
    op: str
    max_rel_error: float
    passed: bool
    details: dict = field(default_factory=dict)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max |a - n| scaled by the largest gradient magnitude of either side."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], op: str = "fn",
              h: float = 1e-5, tol: float = 1e-4, probe_seed: int = 0) -> GradcheckResult:
    """Compare autodiff gradients of ``sum(fn(*inputs) * probe)`` against finite differences.

    A fixed random probe turns any output into a scalar without symmetric
    cancellation. Inputs should be f64 and require grad.
    """
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    probe = np.random.default_rng(probe_seed).standard_normal(out.shape)
    loss = sum_all(mul(out, Tensor(probe.astype(out.dtype))))
    backward(loss)

    def scalar():
        with no_grad():
            return float((fn(*inputs).data * probe).sum())

    worst = 0.0
    errs = {}
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        num = numerical_grad(scalar, t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        e = rel_error(ana, num)
        errs[t.name or f"input{idx}"] = e
        worst = max(worst, e)
    return GradcheckResult(op=op, max_rel_error=worst, passed=worst < tol, details=errs)
