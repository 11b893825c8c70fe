"""Minimal reverse-mode autodiff on numpy arrays.

Every differentiable op appends a node to the active :class:`Tape` when at
least one input requires a gradient and recording is enabled.  ``backward``
walks the tape in reverse from the loss node.  Gradients accumulate across
calls until :func:`zero_grad` resets them.

Training runs in float32; :func:`float64_mode` switches the default dtype for
gradient checks.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DegenerateDistributionError, DimensionError, InputError, ConfigurationError

_local = threading.local()


class Tape:
    """Ordered record of the primitive ops executed while recording."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "index", "tape", "op")

    def __init__(self, out, inputs, backward_fn, tape, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape
        self.op = op
        self.index = len(tape.nodes)


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def no_record():
    """Run ops without appending anything to the tape."""
    tape = get_tape()
    prev = tape.recording
    tape.recording = False
    try:
        yield
    finally:
        tape.recording = prev


@contextmanager
def float64_mode():
    """Create new tensors in float64 (for gradient checks)."""
    prev = default_dtype()
    _local.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _local.dtype = prev


def no_record_forward(f: Callable, *inputs, **kwargs):
    """Evaluate ``f`` with recording disabled; outputs carry no graph links."""
    with no_record():
        return f(*inputs, **kwargs)


class DTensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, DTensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "DTensor":
        return DTensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __truediv__(self, other):
        if isinstance(other, DTensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> DTensor:
    if isinstance(x, DTensor):
        return x
    return DTensor(np.asarray(x, dtype=dtype if dtype is not None else default_dtype()))


def _make(data: np.ndarray, inputs: Sequence[DTensor], backward_fn, op: str) -> DTensor:
    tape = get_tape()
    out = DTensor(data)
    if tape.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, tuple(inputs), backward_fn, tape, op)
        tape.nodes.append(node)
        out._node = node
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _pair(a, b) -> tuple[DTensor, DTensor]:
    if isinstance(a, DTensor):
        return a, as_tensor(b, dtype=a.dtype)
    b = as_tensor(b)
    return as_tensor(a, dtype=b.dtype), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> DTensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> DTensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> DTensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def relu(x: DTensor) -> DTensor:
    out = np.maximum(x.data, 0)

    def bw(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), bw, "relu")


def log(x: DTensor) -> DTensor:
    def bw(g):
        return (g / x.data,)

    with np.errstate(divide="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), bw, "log")


def exp(x: DTensor) -> DTensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


def straight_through(hard, soft: DTensor) -> DTensor:
    """Value of ``hard``, gradient routed to ``soft`` unchanged."""
    hard = np.asarray(hard.data if isinstance(hard, DTensor) else hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise DimensionError(f"hard {hard.shape} vs soft {soft.shape}")

    def bw(g):
        return (g,)

    return _make(hard.copy(), (soft,), bw, "straight_through")


# ---------------------------------------------------------------- shape ops


def reshape(x: DTensor, shape) -> DTensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(x: DTensor, idx) -> DTensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(xs: Sequence[DTensor], axis: int = 1) -> DTensor:
    xs = list(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        bad = [i for i in range(len(ref)) if i != axis % len(ref) and t.shape[i] != ref[i]]
        if len(t.shape) != len(ref) or bad:
            raise DimensionError(f"concat shape mismatch {ref} vs {t.shape} on axes {bad}")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, xs))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def sum_(x: DTensor, axis=None, keepdims=False) -> DTensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: DTensor, axis=None, keepdims=False) -> DTensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- linear algebra


def matmul(a: DTensor, b: DTensor) -> DTensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul expects [m,k]x[k,n], got {a.shape} x {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: DTensor, weight: DTensor, bias: DTensor | None = None) -> DTensor:
    """``x @ weight.T + bias`` with weight shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: x {x.shape} incompatible with weight {weight.shape} on axis 1")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return _make(out, inputs, bw, "linear")


# ---------------------------------------------------------------- distributions


def softmax(logits: DTensor, axis: int = -1) -> DTensor:
    x = logits.data
    m = x.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateDistributionError("softmax: every entry along the axis is -inf")
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (logits,), bw, "softmax")


def log_softmax(logits: DTensor, axis: int = -1) -> DTensor:
    x = logits.data
    m = x.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateDistributionError("log_softmax: every entry along the axis is -inf")
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), bw, "log_softmax")


def cross_entropy(logits: DTensor, labels) -> DTensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits, axis=1)
    picked = getitem(logp, (np.arange(n), labels))
    return mul(sum_(picked), -1.0 / n)


# ---------------------------------------------------------------- convolution


def _pad2d(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * p, w + 2 * p), value, dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def _out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: DTensor, weight: DTensor, stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> DTensor:
    """Grouped 2-D cross-correlation; ``weight`` is [Cout, Cin/groups, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if c % groups or cout % groups:
        raise DimensionError(f"groups={groups} must divide Cin={c} (axis 1) and Cout={cout} (axis 0)")
    if cg != c // groups:
        raise DimensionError(f"weight axis 1 is {cg}, expected Cin/groups={c // groups}")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output spatial size ({ho},{wo}) non-positive for input axes 2,3 = ({h},{w})")
    xp = _pad2d(x.data, padding) if padding else x.data
    og = cout // groups
    depthwise = cg == 1 and og == 1
    wd = weight.data

    def window(ky, kx):
        y0, x0 = ky * dilation, kx * dilation
        return (slice(None), slice(None),
                slice(y0, y0 + stride * (ho - 1) + 1, stride),
                slice(x0, x0 + stride * (wo - 1) + 1, stride))

    if kh != kw and depthwise:
        depthwise = False
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    if depthwise:
        out = _kernels.dw_forward(np.ascontiguousarray(xp), np.ascontiguousarray(wd[:, 0]),
                                  stride, dilation, ho, wo)
    else:
        wg = wd.reshape(groups, og, cg, kh, kw)
        acc = out.reshape(n, groups, og, ho * wo)
        for ky in range(kh):
            for kx in range(kw):
                sl = xp[window(ky, kx)].reshape(n, groups, cg, ho * wo)
                acc += wg[:, :, :, ky, kx] @ sl
        out = acc.reshape(n, cout, ho, wo)

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        if depthwise:
            gxp_k, gw_k = _kernels.dw_backward(np.ascontiguousarray(xp), np.ascontiguousarray(wd[:, 0]),
                                               np.ascontiguousarray(g), stride, dilation,
                                               gxp is not None, gw is not None)
            gxp = gxp_k if gxp is not None else None
            gw = gw_k[:, None] if gw is not None else None
        else:
            gg = g.reshape(n, groups, og, ho * wo)
            gwg = gw.reshape(groups, og, cg, kh, kw) if gw is not None else None
            for ky in range(kh):
                for kx in range(kw):
                    win = window(ky, kx)
                    if gwg is not None:
                        sl = xp[win].reshape(n, groups, cg, ho * wo)
                        gwg[:, :, :, ky, kx] = np.einsum("ngoh,ngch->goc", gg, sl, optimize=True)
                    if gxp is not None:
                        wt = np.swapaxes(wg[:, :, :, ky, kx], 1, 2)
                        gxp[win] += (wt @ gg).reshape(n, c, ho, wo)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return _make(out, (x, weight), bw, "conv2d")


def pool2d(x: DTensor, kind: str, window: int = 3, stride: int = 1, padding: int = 1) -> DTensor:
    """Max or average pooling; average divides by the number of in-bounds cells."""
    if kind not in ("avg", "max"):
        raise ConfigurationError(f"unsupported pool kind {kind!r}")
    if x.ndim != 4:
        raise DimensionError(f"pool2d expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    ho = _out_size(h, window, stride, padding, 1)
    wo = _out_size(w, window, stride, padding, 1)
    hp, wp = h + 2 * padding, w + 2 * padding
    if kind == "avg":
        xp = _pad2d(x.data, padding)
        count = _kernels.window_sum(_pad2d(np.ones((1, 1, h, w), dtype=x.dtype), padding), window, stride, ho, wo)
        out = _kernels.window_sum(xp, window, stride, ho, wo) / count

        def bw(g):
            gxp = _kernels.window_scatter(np.ascontiguousarray(g / count), window, stride, hp, wp)
            return (gxp[:, :, padding:padding + h, padding:padding + w],)

        return _make(out, (x,), bw, "avg_pool2d")

    xp = _pad2d(x.data, padding, -np.inf)
    out, arg = _kernels.max_forward(xp, window, stride, ho, wo)

    def bw(g):
        gxp = _kernels.max_backward(np.ascontiguousarray(g), arg, window, stride, hp, wp)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return _make(out, (x,), bw, "max_pool2d")


def batch_norm(x: DTensor, eps: float = 1e-5) -> DTensor:
    """Per-batch channel normalization; no affine parameters, no running stats."""
    if x.ndim == 4:
        axes = (0, 2, 3)
    elif x.ndim == 2:
        axes = (0,)
    else:
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    m = x.data.size // x.shape[1]
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    var = np.einsum("ncij,ncij->c", centered, centered) / m if x.ndim == 4 else (centered * centered).mean(axis=0)
    inv = (1.0 / np.sqrt(var + eps)).reshape((1, -1) + (1,) * (x.ndim - 2)).astype(x.dtype)
    xhat = centered * inv

    def bw(g):
        gs = g.sum(axis=axes, keepdims=True)
        gxs = (g * xhat).sum(axis=axes, keepdims=True)
        return (inv / m * (m * g - gs - xhat * gxs),)

    return _make(xhat.astype(x.dtype, copy=False), (x,), bw, "batch_norm")


def global_avg_pool(x: DTensor) -> DTensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------- reverse pass


def backward(loss: DTensor) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every reachable tensor needing it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise ContractError("loss was not recorded on a tape")
    node = loss._node
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for nd in reversed(node.tape.nodes[: node.index + 1]):
        g = pending.pop(id(nd.out), None)
        if g is None:
            continue
        out = nd.out
        out.grad = g if out.grad is None else out.grad + g
        for inp, ig in zip(nd.inputs, nd.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = ig if prev is None else prev + ig


def zero_grad(tensors: Iterable[DTensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- checking


def numerical_grad(f: Callable[[], DTensor], t: DTensor, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``t.data`` (edited in place)."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(f: Callable[[], DTensor], inputs: Sequence[DTensor], eps: float = 1e-3) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    get_tape().clear()
    zero_grad(inputs)
    out = f()
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(f, t, eps)))
    get_tape().clear()
    return worst
