"""Small reverse-mode autodiff over dense numpy arrays.

Only the operators needed by the surrogate models are provided. Broadcasting
is limited to adding/multiplying a bias whose shape matches the trailing
dimensions of the other operand. Backward passes visit nodes in a fixed
topological order so gradients are bitwise reproducible.
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, ShapeError, UsageError

DEFAULT_DTYPE = np.float64
# per-thread so replicas trained on separate threads do not interfere
_local = threading.local()


def grad_enabled():
    return getattr(_local, "enabled", True)


class no_grad:
    """Context manager that stops graph recording (evaluation passes)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _local.enabled = False

    def __exit__(self, *exc):
        _local.enabled = self._prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else
                         (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE))
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self._backward is None:
            raise UsageError("backward() called on a tensor that is not part of a gradient graph")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo_order(root):
    """Reverse topological order (root first), deterministic in parent order."""
    seen = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return post[::-1]


class Parameter(Tensor):
    """Trainable tensor with a per-parameter learning-rate multiplier."""

    __slots__ = ("lr_scale",)

    def __init__(self, data, trainable=True, lr_scale=1.0, name=None, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype, name=name)
        if not lr_scale > 0:
            raise ValueError(f"lr_scale must be positive, got {lr_scale}")
        self.lr_scale = float(lr_scale)

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


def as_tensor(x, like: Optional[Tensor] = None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_trailing(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    if len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape):
        return
    raise ShapeError(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_trailing(a.shape, b.shape, "add")
    sb = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_trailing(a.shape, b.shape, "mul")
    sb = b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, sb)))


def scale(a, c: float):
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


# --- shape plumbing --------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {ax}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# --- linear algebra ----------------------------------------------------------------

def matmul(a, b):
    """``a @ b`` for 2-D operands, equal-batch stacks, or stacks times a 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# --- convolution ------------------------------------------------------------------

def _im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (N, Ho, Wo, C, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation on NCHW input with OIHW weights and zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {weight.shape} are not NCHW/OIHW compatible")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)
    xshape, xpshape = x.shape, xp.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xpshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + xshape[2], p:p + xshape[3]] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, tuple(parents), backward)


def upsample_nearest(x, factor=2):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


# --- normalization -----------------------------------------------------------------

def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then apply ``gamma * x_hat + beta``."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), backward)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


# --- graph ops -------------------------------------------------------------------

def _segment_sum(values, index, n):
    """Row sums of ``values`` grouped by ``index``, accumulated in row order."""
    e = len(index)
    seg = sp.csr_matrix((np.ones(e, dtype=values.dtype), (index, np.arange(e))), shape=(n, e))
    return np.asarray(seg @ values.reshape(e, -1)).reshape((n,) + values.shape[1:])


def gather(x, index):
    """Rows ``x[index]`` of an ``(N, F)`` tensor."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather: index out of range for {n} rows")

    return _make(x.data[index], (x,), lambda g: (_segment_sum(g, index, n),))


def scatter_sum(src, index, n):
    """``out[i] = sum of src[e] over edges e with index[e] == i``; ``out`` is ``(n, F)``."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != src.shape[0]:
        raise ShapeError(f"scatter_sum: {len(index)} indices for {src.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"scatter_sum: index out of range for {n} rows")
    return _make(_segment_sum(src.data, index, n), (src,), lambda g: (g[index],))


# --- loss ---------------------------------------------------------------------------

def mse_loss(pred, target, mask=None):
    """Mean squared error over cells where ``mask`` (broadcast to ``pred``) is true."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} and target {t.shape} differ")
    diff = pred.data - t
    if mask is None:
        w = np.ones_like(diff)
    else:
        m = np.asarray(mask, dtype=bool)
        try:
            w = np.broadcast_to(m, diff.shape).astype(diff.dtype)
        except ValueError as exc:
            raise ShapeError(f"mse_loss: mask {m.shape} does not fit prediction {pred.shape}") from exc
    count = w.sum()
    if count == 0:
        raise ShapeError("mse_loss: mask selects no cells")
    loss = np.asarray((w * diff * diff).sum() / count, dtype=pred.dtype)
    return _make(loss, (pred,), lambda g: (g * 2.0 * w * diff / count,))


# --- optimizer ------------------------------------------------------------------------

class AdamState:
    def __init__(self, params: Sequence[Parameter]):
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Parameter], grads, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, scaled per parameter by ``lr * lr_scale``.

    ``grads[i]`` of ``None`` leaves parameter ``i`` and its moments untouched.
    """
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step_lr = lr * p.lr_scale
        p.data -= (step_lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, self.betas[0], self.betas[1], self.eps)


# --- checkpoints ------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MBCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_params: Mapping[str, Tensor]):
    """Magic, version, count, then per parameter: name, shape, little-endian float64 data."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named_params))]
    for name, p in named_params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a meshbench checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", buf, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 8 * size > len(buf):
                raise ValueError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
