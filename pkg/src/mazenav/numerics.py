"""Minimal reverse-mode autodiff kernel and parameter store.

The learned parts of this project are four small networks, so instead of an
external ML framework everything numerical lives here: a numpy-backed tensor
with backward closures, the 2D correlation primitives the localizer is built
from, dense/conv layers, softmax, RMSProp and a central finite-difference
checker. 64-bit is used in tests; training loops may run 32-bit.
"""

from __future__ import annotations

import json
import struct
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_GRAD_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


class no_grad:
    """Context manager that disables graph recording (fast inference path).

    The flag is thread-local: workers and evaluation threads must not see
    each other's recording state.
    """

    def __enter__(self):
        self._prev = _grad_enabled()
        _GRAD_STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAD_STATE.enabled = self._prev
        return False


class Tensor:
    """A numpy array plus the closure that routes gradients to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Reverse-mode sweep from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(np.array(data, dtype=float), requires_grad=requires_grad)


def _make(data, parents, backward):
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 2:      # (n,) @ (n,m) -> (m,)
            return g @ bd.T, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:      # (m,n) @ (n,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g              # (m,n) @ (n,p)

    return _make(out, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),))


def clip_unit(x):
    """Clamp to [-0.5, +0.5]; subgradient 0 outside, 1 inside."""
    x = as_tensor(x)
    out = np.clip(x.data, -0.5, 0.5)
    mask = (x.data >= -0.5) & (x.data <= 0.5)
    return _make(out, (x,), lambda g: (g * mask,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),))


def tsum(x):
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.data.shape),))


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def concat(parts):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.size for p in parts]
    out = np.concatenate([p.data.ravel() for p in parts])

    def backward(g):
        offs = np.cumsum([0] + sizes)
        return tuple(g[offs[i]:offs[i + 1]].reshape(p.data.shape) for i, p in enumerate(parts))

    return _make(out, tuple(parts), backward)


def pick(x, index):
    """Select one element by flat index (scalar output)."""
    x = as_tensor(x)
    idx = int(index)
    out = np.asarray(x.data.reshape(-1)[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx.reshape(-1)[idx] = g
        return (gx,)

    return _make(out, (x,), backward)


def clamp_min(x, lo):
    x = as_tensor(x)
    out = np.maximum(x.data, lo)
    return _make(out, (x,), lambda g: (g * (x.data > lo),))


def stop_gradient(x):
    """Detach from the graph; gradients do not flow past this marker."""
    x = as_tensor(x)
    return Tensor(x.data)


def softmax(x, temperature=1.0, axis=None):
    """Numerically stable softmax; axis=None normalizes over all elements."""
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=axis is not None)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=axis is not None)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=axis is not None)
        return ((g - dot) * s / temperature,)

    return _make(s, (x,), backward)


def log_softmax(x, temperature=1.0, axis=None):
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=axis is not None)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=axis is not None))
    out = z - lse

    def backward(g):
        s = np.exp(out)
        return ((g - s * g.sum(axis=axis, keepdims=axis is not None)) / temperature,)

    return _make(out, (x,), backward)


def norm2(x):
    """Euclidean norm with a tiny epsilon under the sqrt for stability."""
    x = as_tensor(x)
    sq = float((x.data * x.data).sum())
    out = np.asarray(np.sqrt(sq + 1e-30))
    return _make(out, (x,), lambda g: (g * x.data / out,))


# ---------------------------------------------------------------------------
# 2D correlation / convolution
# ---------------------------------------------------------------------------

def _corr_valid(x, k):
    win = sliding_window_view(x, k.shape)
    return np.tensordot(win, k, axes=((2, 3), (0, 1)))


def pad2d(x, pad):
    """Zero-pad a 2D tensor; pad is an int (all sides) or (top,bottom,left,right)."""
    x = as_tensor(x)
    if np.isscalar(pad):
        pt = pb = pl = pr = int(pad)
    else:
        pt, pb, pl, pr = pad
    out = np.pad(x.data, ((pt, pb), (pl, pr)))
    h, w = x.data.shape
    return _make(out, (x,), lambda g: (g[pt:pt + h, pl:pl + w],))


def correlate2d(inp, kernel, padding="valid"):
    """Stride-1 cross-correlation: out[x,y] = sum_ij in[x+i-ci, y+j-cj]*k[i,j].

    padding="valid" slides the kernel fully inside the input;
    padding="same" zero-pads so the output keeps the input shape, with the
    kernel centered (ci = (kh-1)//2).
    """
    inp, kernel = as_tensor(inp), as_tensor(kernel)
    x, k = inp.data, kernel.data
    if x.ndim != 2 or k.ndim != 2:
        raise ShapeError("correlate2d expects 2D operands")
    kh, kw = k.shape
    if padding == "valid":
        if kh > x.shape[0] or kw > x.shape[1]:
            raise ShapeError(f"valid correlation needs kernel <= input, got {k.shape} vs {x.shape}")
        pt = pb = pl = pr = 0
        xp = x
    elif padding == "same":
        pt, pl = (kh - 1) // 2, (kw - 1) // 2
        pb, pr = kh - 1 - pt, kw - 1 - pl
        xp = np.pad(x, ((pt, pb), (pl, pr)))
    else:
        raise ValueError(f"unknown padding {padding!r}")
    out = _corr_valid(xp, k)
    h, w = x.shape

    def backward(g):
        gk = _corr_valid(xp, g) if kernel.requires_grad else None
        gx = None
        if inp.requires_grad:
            gp = np.pad(g, ((kh - 1, kh - 1), (kw - 1, kw - 1)))
            gxp = _corr_valid(gp, k[::-1, ::-1])
            gx = gxp[pt:pt + h, pl:pl + w]
        return gx, gk

    return _make(out, (inp, kernel), backward)


def correlate_shifts(a, b, radius):
    """Correlation of two same-shape grids over integer offsets [-radius, radius]^2.

    out[dr+R, dc+R] = sum_rc a[r+dr, c+dc] * b[r, c], zero padding outside a.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("correlate_shifts expects same-shape grids")
    return correlate2d(pad2d(a, radius), b, "valid")


def conv2d(x, w, b=None, stride=1, padding=0):
    """Multi-channel correlation: x (C,H,W), w (O,C,kh,kw) -> (O,Ho,Wo)."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4 or xd.shape[0] != wd.shape[1]:
        raise ShapeError(f"conv2d shapes {xd.shape} vs {wd.shape}")
    o, c, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(win, wd, axes=((0, 3, 4), (1, 2, 3)))   # (Ho,Wo,O)
    out = np.ascontiguousarray(out.transpose(2, 0, 1))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        parents.append(b)
    ho, wo = out.shape[1:]

    def backward(g):
        gw = np.tensordot(g, win, axes=((1, 2), (1, 2))) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            t = np.tensordot(g, wd, axes=((0,), (0,)))   # (Ho,Wo,C,kh,kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        t[:, :, :, i, j].transpose(2, 0, 1)
            h, wdt = xd.shape[1:]
            gx = gxp[:, padding:padding + h, padding:padding + wdt]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, tuple(parents), backward)


def dense(x, w, b, activation=None):
    """Affine layer x@w + b with optional ReLU."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"dense shapes {x.data.shape} vs {w.data.shape}")
    out = add(matmul(x, w), b)
    if activation == "relu":
        return relu(out)
    if activation is None:
        return out
    raise ValueError(f"unknown activation {activation!r}")


def conv_stack(image, layers):
    """Image (H,W,C) through conv+ReLU layers [(w, b, stride), ...], flattened."""
    x = transpose(as_tensor(image), (2, 0, 1))
    for w, b, stride in layers:
        x = relu(conv2d(x, w, b, stride=stride))
    return reshape(x, (-1,))


def conv_output_size(size, kernel, stride):
    return (size - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Optimizer, parameter store, checkpoint format
# ---------------------------------------------------------------------------

def rmsprop_update(params, grads, accum, lr, decay, eps):
    """In-place RMSProp: a <- decay*a + (1-decay)*g^2; p <- p - lr*g/sqrt(a+eps)."""
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        g = g.astype(p.dtype, copy=False)
        a = accum[name]
        a *= decay
        a += (1.0 - decay) * g * g
        p -= lr * g / np.sqrt(a + eps)


class ParamStore:
    """Named tensors shared between workers.

    Reads via snapshot() are consistent copies; gradient application is
    serialized under a lock (hogwild-style accumulation across workers).
    """

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self._params: dict[str, np.ndarray] = {}
        self._accum: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.version = 0

    def register(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        self._params[name] = arr
        self._accum[name] = np.zeros_like(arr)

    def register_dict(self, values):
        for name, value in values.items():
            self.register(name, value)

    def names(self):
        return sorted(self._params)

    def snapshot(self):
        with self._lock:
            return self.version, {k: v.copy() for k, v in self._params.items()}

    def tensors(self, requires_grad=True):
        """Tensor views of a consistent snapshot, keyed by name."""
        _, snap = self.snapshot()
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in snap.items()}

    def apply_gradients(self, grads, lr, decay=0.99, eps=0.1):
        with self._lock:
            rmsprop_update(self._params, grads, self._accum, lr, decay, eps)
            self.version += 1

    # Checkpoint container: magic 'MZNV', u32 version, u32 meta length,
    # meta JSON (utf-8), u32 tensor count, then per tensor
    # u16 name length + name, u8 ndim, u32 dims..., float32 LE data.
    # RMSProp accumulators are stored alongside under '<name>.rms'.

    MAGIC = b"MZNV"

    def save(self, path, meta=None, include_optimizer=True):
        with self._lock:
            items = dict(self._params)
            if include_optimizer:
                items.update({k + ".rms": v for k, v in self._accum.items()})
            blob = json.dumps(meta or {}).encode("utf-8")
            with open(path, "wb") as fh:
                fh.write(self.MAGIC)
                fh.write(struct.pack("<II", 1, len(blob)))
                fh.write(blob)
                fh.write(struct.pack("<I", len(items)))
                for name in sorted(items):
                    arr = items[name]
                    enc = name.encode("utf-8")
                    fh.write(struct.pack("<H", len(enc)))
                    fh.write(enc)
                    fh.write(struct.pack("<B", arr.ndim))
                    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                    fh.write(arr.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, dtype=np.float64):
        with open(path, "rb") as fh:
            if fh.read(4) != cls.MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            _, meta_len = struct.unpack("<II", fh.read(8))
            meta = json.loads(fh.read(meta_len).decode("utf-8"))
            (count,) = struct.unpack("<I", fh.read(4))
            store = cls(dtype=dtype)
            accum = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<H", fh.read(2))
                name = fh.read(nlen).decode("utf-8")
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                size = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
                if name.endswith(".rms"):
                    accum[name[:-4]] = arr.astype(dtype)
                else:
                    store.register(name, arr)
            for name, arr in accum.items():
                if name in store._accum:
                    store._accum[name] = np.ascontiguousarray(arr)
        return store, meta


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(fn, params, eps=1e-5):
    """Max relative error between analytic gradients and central differences.

    fn rebuilds the scalar loss from `params` (a list of Tensors) on every
    call. Relative error uses a unit floor: |a-n| / max(1, |a|, |n|).
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            an = a.reshape(-1)[i]
            worst = max(worst, abs(an - num) / max(1.0, abs(an), abs(num)))
    return worst
