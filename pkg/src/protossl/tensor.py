"""Dense tensors with reverse-mode differentiation.

Minimal engine backing the encoder, the losses, and the prototype updates.
Design constraints:

* row-major contiguous float32 or float64 buffers only (no strided views);
* two precision modes: float32 for training, float64 for gradient checks;
* gradients accumulate additively and are zeroed explicitly between steps;
* a graph and its tensors are confined to one thread of execution.

Every operation records its inputs and a local gradient rule on the output
tensor; ``backward`` linearizes the recorded operations in topological order
and replays them in reverse, which makes accumulation additive by
construction.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that disables operation recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def backward(self):
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ConfigError(f"mixed tensor dtypes {sorted(str(d) for d in dtypes)}; cast explicitly")


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; also accepts a trailing-axis row vector or a scalar."""
    if isinstance(b, (int, float)):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _check_same_dtype(a, b)
    if b.data.shape not in (a.data.shape, a.data.shape[-1:], ()):
        raise ShapeError(f"cannot add shapes {a.data.shape} and {b.data.shape}")
    out_data = a.data + b.data

    def back(out: Tensor):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            if b.data.shape == a.data.shape:
                b._accumulate(g)
            elif b.data.shape == ():
                b._accumulate(np.asarray(g.sum(), dtype=b.dtype))
            else:
                b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out_data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cannot subtract shapes {a.data.shape} and {b.data.shape}")

    def back(out: Tensor):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a same-shape tensor, row vector, or array constant."""
    b = _lift(b, a)
    _check_same_dtype(a, b)
    if b.data.shape not in (a.data.shape, a.data.shape[-1:], ()):
        raise ShapeError(f"cannot multiply shapes {a.data.shape} and {b.data.shape}")

    def back(out: Tensor):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            if b.data.shape == a.data.shape:
                b._accumulate(gb)
            elif b.data.shape == ():
                b._accumulate(np.asarray(gb.sum(), dtype=b.dtype))
            else:
                b._accumulate(gb.reshape(-1, gb.shape[-1]).sum(axis=0))

    return _make(a.data * b.data, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def back(out: Tensor):
        if a.requires_grad:
            a._accumulate(np.asarray(out.grad * s, dtype=a.dtype))

    return _make(a.data * a.dtype.type(s), (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the standard transpose gradient rules."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")

    def back(out: Tensor):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def back(out: Tensor):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(out.grad.T))

    return _make(np.ascontiguousarray(a.data.T), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(out: Tensor):
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), back)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def back(out: Tensor):
        if a.requires_grad:
            a._accumulate(out.grad * (out.data > 0))

    return _make(out_data, (a,), back)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    def back(out: Tensor):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.full_like(a.data, out.grad))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape).copy())

    return _make(np.asarray(a.data.sum(axis=axis), dtype=a.dtype), (a,), back)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise ShapeError(f"mean over empty axis of shape {a.data.shape}")
    inv = 1.0 / n

    def back(out: Tensor):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.full_like(a.data, out.grad * inv))
        else:
            g = np.expand_dims(out.grad * inv, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True))

    return _make(np.asarray(a.data.mean(axis=axis), dtype=a.dtype), (a,), back)


def take_rows(a: Tensor, indices) -> Tensor:
    """Row gather; the gradient scatter-adds back into the source rows."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got shape {a.data.shape}")

    def back(out: Tensor):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accumulate(g)

    return _make(a.data[idx].copy(), (a,), back)


# -- row-wise nonlinearities -------------------------------------------------


def _check_rows_input(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} expects a matrix, got shape {x.data.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError(f"{op} received non-finite input")


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of ``x / temperature``, stabilized by the per-row maximum."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    _check_rows_input(x, "softmax_rows")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)
    inv_t = 1.0 / temperature

    def back(out: Tensor):
        if x.requires_grad:
            g = out.grad
            dot = (g * out.data).sum(axis=1, keepdims=True)
            x._accumulate(((g - dot) * out.data * x.dtype.type(inv_t)))

    return _make(out_data, (x,), back)


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row log-softmax of ``x / temperature``; the stable path for cross-entropy."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    _check_rows_input(x, "log_softmax_rows")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=1, keepdims=True)
    out_data = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    inv_t = 1.0 / temperature

    def back(out: Tensor):
        if x.requires_grad:
            g = out.grad
            p = np.exp(out.data)
            x._accumulate((g - p * g.sum(axis=1, keepdims=True)) * x.dtype.type(inv_t))

    return _make(out_data, (x,), back)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; differentiable."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got shape {x.data.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if (norms < 1e-12).any():
        raise NumericError("degenerate feature row (norm < 1e-12): encoder output collapsed")
    out_data = x.data / norms

    def back(out: Tensor):
        if x.requires_grad:
            g = out.grad
            dot = (g * out.data).sum(axis=1, keepdims=True)
            x._accumulate((g - dot * out.data) / norms)

    return _make(out_data, (x,), back)


# -- convolution -------------------------------------------------------------


def _im2col(xp: np.ndarray, ksize: int, stride: int) -> np.ndarray:
    b, c, hp, wp = xp.shape
    windows = np.lib.stride_tricks.sliding_window_view(xp, (ksize, ksize), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, OH, OW, k, k)
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * ksize * ksize)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x: Tensor, w: Tensor, b: Tensor, ksize: int, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of NCHW input with weights flattened to (C*k*k, OC).

    Implemented as im2col followed by a matrix product; the input gradient is
    reassembled with a bincount scatter over the padded image.
    """
    _check_same_dtype(x, w, b)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.data.shape}")
    bsz, c, h, wd = x.data.shape
    if w.data.shape[0] != c * ksize * ksize or w.data.ndim != 2:
        raise ShapeError(f"conv2d weight shape {w.data.shape} incompatible with C={c}, k={ksize}")
    oc = w.data.shape[1]
    if b.data.shape != (oc,):
        raise ShapeError(f"conv2d bias shape {b.data.shape} != ({oc},)")
    if h + 2 * padding < ksize or wd + 2 * padding < ksize:
        raise ShapeError(f"conv2d input {x.data.shape} smaller than kernel {ksize} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, oh, ow = _im2col(xp, ksize, stride)
    out_mat = cols @ w.data + b.data
    out_data = np.ascontiguousarray(out_mat.reshape(bsz, oh, ow, oc).transpose(0, 3, 1, 2))
    hp, wp = xp.shape[2], xp.shape[3]

    def back(out: Tensor):
        g_mat = out.grad.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, oc)
        if b.requires_grad:
            b._accumulate(g_mat.sum(axis=0))
        if w.requires_grad:
            w._accumulate(cols.T @ g_mat)
        if x.requires_grad:
            dcols = g_mat @ w.data.T  # (B*OH*OW, C*k*k)
            ohs = np.arange(oh) * stride
            ows = np.arange(ow) * stride
            ci, ki, kj = np.meshgrid(np.arange(c), np.arange(ksize), np.arange(ksize), indexing="ij")
            patch = (ci * hp * wp + ki * wp + kj).reshape(-1)  # (C*k*k,)
            pos = (ohs[:, None] * wp + ows[None, :]).reshape(-1)  # (OH*OW,)
            idx = pos[:, None] + patch[None, :]  # (OH*OW, C*k*k)
            idx = (np.arange(bsz)[:, None] * (c * hp * wp) + idx.reshape(1, -1)).ravel()
            flat = np.bincount(idx, weights=dcols.astype(np.float64, copy=False).ravel(),
                               minlength=bsz * c * hp * wp)
            dxp = flat.reshape(bsz, c, hp, wp).astype(x.dtype, copy=False)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            x._accumulate(np.ascontiguousarray(dxp))

    return _make(out_data, (x, w, b), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.data.shape}")
    bsz, c, h, w = x.data.shape
    inv = 1.0 / (h * w)

    def back(out: Tensor):
        if x.requires_grad:
            g = (out.grad * x.dtype.type(inv))[:, :, None, None]
            x._accumulate(np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True))

    return _make(x.data.mean(axis=(2, 3)), (x,), back)


# -- backward pass -----------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    """Linearize the recorded operation graph (parents before consumers)."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with requires_grad."""
    if loss.data.size != 1:
        raise ConfigError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ConfigError("backward called on a tensor with no recorded operations")
    order = _toposort(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- SSLT tensor file format ---------------------------------------------------

_SSLT_MAGIC = b"SSLT"
_SSLT_VERSION = 1
_SSLT_DTYPES = {0x00: np.dtype("<f4"), 0x01: np.dtype("<f8")}
_SSLT_CODES = {np.dtype(np.float32): 0x00, np.dtype(np.float64): 0x01}


def save_tensor(path, value) -> None:
    """Write an array to the SSLT container (little-endian, row-major)."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype not in _SSLT_CODES:
        raise ConfigError(f"SSLT stores float32/float64 only, got {arr.dtype}")
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(_SSLT_MAGIC)
        fh.write(struct.pack("<BBB", _SSLT_VERSION, _SSLT_CODES[arr.dtype], arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    """Read an SSLT container back into a contiguous array; bit-exact round trip."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _SSLT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_SSLT_MAGIC!r}")
    if len(raw) < 7:
        raise CorruptionError(f"{path}: truncated header")
    version, dtype_code, rank = struct.unpack("<BBB", raw[4:7])
    if version != _SSLT_VERSION:
        raise FormatError(f"{path}: unsupported SSLT version {version}")
    if dtype_code not in _SSLT_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {dtype_code:#04x}")
    head = 7 + 4 * rank
    if len(raw) < head:
        raise CorruptionError(f"{path}: truncated dimension list")
    shape = struct.unpack(f"<{rank}I", raw[7:head]) if rank else ()
    dtype = _SSLT_DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = head + count * dtype.itemsize
    if len(raw) != expected:
        raise CorruptionError(f"{path}: payload is {len(raw) - head} bytes, expected {expected - head}")
    data = np.frombuffer(raw[head:], dtype=dtype).reshape(shape)
    return np.ascontiguousarray(data.astype(dtype.newbyteorder("="), copy=False))
