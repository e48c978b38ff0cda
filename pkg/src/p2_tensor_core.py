# p2_tensor_core.py
"""
Minimal dense tensor engine for the CSTF network.

Tensors wrap C-ordered numpy arrays. Every differentiable op appends a node to
the thread's Graph; backward() walks that record in reverse append order and
populates .grad on the requires_grad leaves. finite_diff_grad() is the
independent central-difference oracle used to verify backward().

Spatial ops take (..., C, H, W) inputs and token ops take (..., P, C) inputs,
so a leading batch axis is optional everywhere.
"""
import math
import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

import p1_config as config
from p1_config import ConfigError, ContractError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype = _DTYPES[config.DEFAULT_PRECISION]
_state = threading.local()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --- 1. PRECISION ---
def set_precision(bits: int) -> None:
    """Switches the default float width for newly created tensors (32 or 64)."""
    global _default_dtype
    if bits not in _DTYPES:
        raise ConfigError(f"precision must be 32 or 64, got {bits}")
    _default_dtype = _DTYPES[bits]


def get_precision() -> int:
    return 32 if _default_dtype == np.float32 else 64


@contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


# --- 2. GRAPH ---
class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only record of differentiable ops; append order is a topological order."""

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward_fn: Callable) -> None:
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def current_graph() -> Graph:
    """Returns this thread's graph, creating it on first use."""
    graph = getattr(_state, "graph", None)
    if graph is None:
        graph = Graph()
        _state.graph = graph
    return graph


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disables graph recording on this thread."""
    previous = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


# --- 3. TENSOR ---
class Tensor:
    """Dense float array with shape, optional gradient and graph membership."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype, order="C", copy=True)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.requires_grad = requires_grad
        out.grad = None
        out.is_leaf = not requires_grad
        return out

    # shape helpers
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return index(self, key)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def sum(self, axis=None, keepdims=False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    needs_grad = is_recording() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        current_graph().record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_nonempty(x: Tensor, op: str) -> None:
    if x.size == 0:
        raise ShapeError(f"{op} got an empty tensor of shape {x.shape}")


# --- 4. ELEMENTWISE ---
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward_fn)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", a.data / b.data, (a, b), backward_fn)


def neg(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _make("sqrt", y, (x,), lambda g: (g * 0.5 / y,))


def gelu(x: ArrayLike) -> Tensor:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)

    def backward_fn(g):
        return (g * (cdf + x.data * pdf),)

    return _make("gelu", x.data * cdf, (x,), backward_fn)


# --- 5. REDUCTIONS & SHAPE ---
def tensor_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward_fn)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    return tensor_sum(x, axis, keepdims) / float(count)


def reshape(x: ArrayLike, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape).copy()
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from err
    return _make("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: ArrayLike) -> Tensor:
    """Swaps the last two axes."""
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    sizes = [p.shape[axis] for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat shapes {[p.shape for p in parts]} on axis {axis}: {err}") from err

    def backward_fn(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make("concat", data, parts, backward_fn)


def index(x: ArrayLike, key) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    x = as_tensor(x)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make("index", np.array(x.data[key]), (x,), backward_fn)


# --- 6. LINEAR ALGEBRA ---
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), backward_fn)


def linear(x: ArrayLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight^T + bias, with weight stored (out_features, in_features)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear input width {x.shape} does not match weight {weight.shape}")
    out = matmul(x, swap_last(weight))
    return out if bias is None else out + bias


# --- 7. NORMALIZATION ---
def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; slices along `axis` sum to one."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), backward_fn)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    y = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), backward_fn)


def layer_norm(
    x: ArrayLike,
    gain: Tensor,
    bias: Tensor,
    eps: float = config.LAYER_NORM_EPS,
    axis: int = -1,
) -> Tensor:
    """Normalizes each slice along `axis` to zero mean / unit variance, then applies gain and bias."""
    x = as_tensor(x)
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    axis = axis % x.ndim
    width = x.shape[axis]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm gain {gain.shape} / bias {bias.shape} do not match axis size {width}")
    bshape = [1] * x.ndim
    bshape[axis] = width
    g_b = gain.data.reshape(bshape)
    b_b = bias.data.reshape(bshape)

    mu = np.mean(x.data, axis=axis, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    reduce_axes = tuple(a for a in range(x.ndim) if a != axis)

    def backward_fn(g):
        gxhat = g * g_b
        gx = inv_std * (
            gxhat
            - np.mean(gxhat, axis=axis, keepdims=True)
            - xhat * np.mean(gxhat * xhat, axis=axis, keepdims=True)
        )
        ggain = np.sum(g * xhat, axis=reduce_axes)
        gbias = np.sum(g, axis=reduce_axes)
        return gx, ggain.reshape(width), gbias.reshape(width)

    return _make("layer_norm", xhat * g_b + b_b, (x, gain, bias), backward_fn)


def l2_normalize(x: ArrayLike, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(tensor_sum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


# --- 8. SPATIAL OPS (..., C, H, W) ---
def _spatial(x: Tensor, op: str) -> Tuple[int, int]:
    if x.ndim < 3:
        raise ShapeError(f"{op} expects (..., C, H, W), got shape {x.shape}")
    return x.shape[-2], x.shape[-1]


def _pair(value) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def avg_pool2d(x: ArrayLike, kernel, stride=None) -> Tensor:
    """Mean over kernel windows. Dims not divisible by stride are right/bottom trimmed with a warning."""
    x = as_tensor(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    height, width = _spatial(x, "avg_pool2d")
    if kh > height or kw > width:
        raise ShapeError(f"avg_pool2d kernel {(kh, kw)} larger than input {(height, width)}")
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ConfigError(f"avg_pool2d kernel/stride must be >= 1, got {(kh, kw)}/{(sh, sw)}")
    th, tw = height - height % sh, width - width % sw
    if (th, tw) != (height, width):
        warnings.warn(
            f"avg_pool2d trimming input {(height, width)} to {(th, tw)} for stride {(sh, sw)}",
            RuntimeWarning,
            stacklevel=2,
        )
    if kh > th or kw > tw:
        raise ShapeError(f"avg_pool2d kernel {(kh, kw)} larger than trimmed input {(th, tw)}")
    trimmed = x.data[..., :th, :tw]
    windows = sliding_window_view(trimmed, (kh, kw), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    out = windows.mean(axis=(-2, -1))
    oh, ow = out.shape[-2], out.shape[-1]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        share = g / float(kh * kw)
        for i in range(kh):
            for j in range(kw):
                gx[..., i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += share
        return (gx,)

    return _make("avg_pool2d", out, (x,), backward_fn)


def _adaptive_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i averages input cells [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -(-((i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def adaptive_avg_pool2d(x: ArrayLike, out_h: int, out_w: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    out_w = out_h if out_w is None else out_w
    height, width = _spatial(x, "adaptive_avg_pool2d")
    if out_h < 1 or out_w < 1 or out_h > height or out_w > width:
        raise ShapeError(f"adaptive_avg_pool2d grid {(out_h, out_w)} invalid for input {(height, width)}")
    mh = _adaptive_matrix(height, out_h, x.dtype)
    mw = _adaptive_matrix(width, out_w, x.dtype)

    def backward_fn(g):
        return (mh.T @ g @ mw,)

    return _make("adaptive_avg_pool2d", mh @ x.data @ mw.T, (x,), backward_fn)


def upsample_nearest(x: ArrayLike, factor: int) -> Tensor:
    """Replicates every cell into a factor x factor block."""
    x = as_tensor(x)
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    height, width = _spatial(x, "upsample_nearest")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward_fn(g):
        lead = g.shape[:-2]
        blocks = g.reshape(*lead, height, factor, width, factor)
        return (blocks.sum(axis=(-3, -1)),)

    return _make("upsample_nearest", out, (x,), backward_fn)


def resize_nearest(x: ArrayLike, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize: output cell (r, c) copies input (r*H//out_h, c*W//out_w)."""
    x = as_tensor(x)
    height, width = _spatial(x, "resize_nearest")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_nearest target {(out_h, out_w)} must be positive")
    rh = np.zeros((out_h, height), dtype=x.dtype)
    rh[np.arange(out_h), (np.arange(out_h) * height) // out_h] = 1.0
    rw = np.zeros((out_w, width), dtype=x.dtype)
    rw[np.arange(out_w), (np.arange(out_w) * width) // out_w] = 1.0

    def backward_fn(g):
        return (rh.T @ g @ rw,)

    return _make("resize_nearest", rh @ x.data @ rw.T, (x,), backward_fn)


def conv2d(x: ArrayLike, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation. x: (..., C, H, W); weight: (O, C, kh, kw); bias: (O,)."""
    x = as_tensor(x)
    _spatial(x, "conv2d")
    if weight.ndim != 4 or weight.shape[1] != x.shape[-3]:
        raise ShapeError(f"conv2d weight {weight.shape} does not match input {x.shape}")
    out_ch, in_ch, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    pad_width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x.data, pad_width) if (ph or pw) else x.data
    if kh > xp.shape[-2] or kw > xp.shape[-1]:
        raise ShapeError(f"conv2d kernel {(kh, kw)} larger than padded input {xp.shape[-2:]}")

    windows = sliding_window_view(xp, (kh, kw), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    oh, ow = windows.shape[-4], windows.shape[-3]
    lead = x.shape[:-3]
    # (..., C, oh, ow, kh, kw) -> (..., oh, ow, C*kh*kw)
    nd = windows.ndim
    perm = list(range(nd - 5)) + [nd - 4, nd - 3, nd - 5, nd - 2, nd - 1]
    cols = np.transpose(windows, perm).reshape(*lead, oh, ow, in_ch * kh * kw)
    wmat = weight.data.reshape(out_ch, -1)
    out = np.moveaxis(cols @ wmat.T, -1, -3)
    if bias is not None:
        out = out + bias.data.reshape(out_ch, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gm = np.moveaxis(g, -3, -1)  # (..., oh, ow, O)
        gw = (gm.reshape(-1, out_ch).T @ cols.reshape(-1, in_ch * kh * kw)).reshape(weight.shape)
        gcols = (gm @ wmat).reshape(*lead, oh, ow, in_ch, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = np.moveaxis(gcols[..., i, j], -1, -3)  # (..., C, oh, ow)
                gxp[..., i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += patch
        gx = gxp[..., ph : ph + x.shape[-2], pw : pw + x.shape[-1]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=tuple(a for a in range(g.ndim) if a != g.ndim - 3)))
        return tuple(grads)

    return _make("conv2d", out, inputs, backward_fn)


# --- 9. BACKWARD ---
def backward(loss: Tensor) -> None:
    """Reverse-mode pass over this thread's graph; consumes the graph."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = current_graph()
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0

    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, tensor_grad in zip(node.inputs, node.backward_fn(g)):
            if tensor_grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                tensor.grad = tensor_grad.copy() if tensor.grad is None else tensor.grad + tensor_grad
            else:
                key = id(tensor)
                grads[key] = tensor_grad if key not in grads else grads[key] + tensor_grad

    for node in graph.nodes:
        for tensor in node.inputs:
            if tensor.is_leaf and tensor.requires_grad and tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
    graph.reset()


# --- 10. FINITE-DIFFERENCE ORACLE ---
def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(f: Callable[[Tensor], ArrayLike], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central differences (f(x+h e) - f(x-h e)) / 2h per element.

    x is perturbed in place and restored, so f may also close over x.
    """
    if h <= 0:
        raise ConfigError(f"finite difference step must be > 0, got {h}")
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = _scalar(f(x))
            flat[i] = original - h
            f_minus = _scalar(f(x))
            flat[i] = original
            grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor._wrap(grad, requires_grad=False)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||); 0 when both are zero."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(
    loss_fn: Callable[[], Tensor], tensors: Dict[str, Tensor], h: float = 1e-4
) -> Dict[str, float]:
    """Compares backward() against finite_diff_grad for each named tensor."""
    for tensor in tensors.values():
        tensor.zero_grad()
    current_graph().reset()
    backward(loss_fn())
    errors = {}
    for name, tensor in tensors.items():
        numeric = finite_diff_grad(lambda _: loss_fn(), tensor, h)
        errors[name] = relative_error(tensor.grad, numeric.data)
    return errors


# --- 11. PARAMETERS ---
class ParameterSet:
    """Named learnable tensors."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, data: ArrayLike) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        tensor = Tensor(data, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def uniform(self, name: str, shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
        """Adds a parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError as err:
            raise ConfigError(f"missing parameter: {name}") from err

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def assign(self, name: str, data: ArrayLike) -> None:
        """Overwrites a parameter's values in place; shape must match."""
        tensor = self[name]
        values = np.asarray(data, dtype=tensor.dtype)
        if values.shape != tensor.shape:
            raise ShapeError(f"assign {name}: shape {values.shape} != {tensor.shape}")
        tensor.data[...] = values

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def copy(self) -> "ParameterSet":
        clone = ParameterSet()
        for name, tensor in self._params.items():
            clone.add(name, tensor.data)
        return clone

    def as_arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self._params.items()}
