"""Reverse-mode autodiff over float32 numpy arrays.

A Tensor wraps an ndarray and records a backward closure per op; calling
``backward()`` on a scalar topologically sorts the tape and accumulates
gradients into every reachable tensor with ``requires_grad``. Convolution
forwards/backwards dispatch to the numba/numpy kernel backends; everything
else is plain numpy. Scalar reductions (sum, mse) accumulate in float64.

Gradient conventions: relu'(0) = 0; max-pool routes to the first maximum;
batch_norm with a single instance normalises per channel over the spatial
axes (instance-norm statistics, eps 1e-5).
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "ParamStore", "grad",
    "add", "mul", "mul_scalar", "reshape", "transpose", "concat", "relu",
    "matmul", "linear", "softmax", "layer_norm", "batch_norm",
    "conv3d", "conv2d", "transposed_conv3d", "avg_pool3d", "max_pool2d",
    "patchify_3d", "tensor_sum", "mse", "scaled_dot_product_attention",
]


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


def _shape_err(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """Dense float32 tensor with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float32)
        else:
            self.grad += g

    def backward(self, free: bool = True) -> None:
        """Backpropagate from a scalar; frees the tape unless free=False."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free:
                node._backward = None
                node._prev = ()

    # Small operator sugar; the full op set lives in module functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul_scalar(other, -1.0))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def reshape(self, shape):
        return reshape(self, shape)


def _node(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise _shape_err("add", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise _shape_err("mul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.asarray(g * s, dtype=np.float32))

    return _node(a.data * np.float32(s), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise _shape_err("reshape", a.shape, shape) from None

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _node(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                t.accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return _node(data, tensors, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * mask)

    return _node(np.where(mask, a.data, np.float32(0.0)), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D (n,k)@(k,m) or stacked 3D (h,n,k)@(h,k,m) matrix product."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise _shape_err("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2] or (a.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise _shape_err("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate(a.data.swapaxes(-1, -2) @ g)

    return _node(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            a.accumulate((g - dot) * s)

    return _node(s, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with learnable scale/shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise _shape_err("layer_norm", x.shape, gamma.shape)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + np.float32(eps))).astype(np.float32)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            red = tuple(range(g.ndim - 1))
            gamma.accumulate((g * xhat).sum(axis=red))
        if beta.requires_grad:
            red = tuple(range(g.ndim - 1))
            beta.accumulate(g.sum(axis=red))
        if x.requires_grad:
            gh = g * gamma.data
            dvar = (gh * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv ** 3
            dmu = (-gh * inv).sum(axis=-1, keepdims=True)
            dx = gh * inv + dvar * 2.0 * xc / n + dmu / n
            x.accumulate(dx.astype(np.float32, copy=False))

    return _node(data, (x, gamma, beta), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Single-instance batch norm: per-channel stats over spatial axes.

    x has shape (C, *spatial); gamma/beta have shape (C,).
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise _shape_err("batch_norm", x.shape, gamma.shape)
    axes = tuple(range(1, x.data.ndim))
    n = int(np.prod(x.shape[1:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + np.float32(eps))).astype(np.float32)
    xhat = xc * inv
    gshape = (c,) + (1,) * (x.data.ndim - 1)
    data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data.reshape(gshape)
            dvar = (gh * xc).sum(axis=axes, keepdims=True) * (-0.5) * inv ** 3
            dmu = (-gh * inv).sum(axis=axes, keepdims=True)
            dx = gh * inv + dvar * 2.0 * xc / n + dmu / n
            x.accumulate(dx.astype(np.float32, copy=False))

    return _node(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolutions (kernel-backed)
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None,
           pad: tuple[int, int, int] = (0, 0, 0)) -> Tensor:
    """Stride-1 3D correlation; x (Cin,D,H,W), w (Cout,Cin,kd,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 5 or x.shape[0] != w.shape[1]:
        raise _shape_err("conv3d", x.shape, w.shape)
    data = kernels.conv3d_forward(x.data, w.data, pad)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=np.float32)
        if x.requires_grad:
            x.accumulate(kernels.conv3d_grad_x(g, w.data, pad, x.shape))
        if w.requires_grad:
            w.accumulate(kernels.conv3d_grad_w(x.data, g, pad))

    out = _node(data, (x, w), backward)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise _shape_err("conv3d bias", b.shape, (w.shape[0],))
        out = add(out, reshape(b, (w.shape[0], 1, 1, 1)))
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Stride-1 2D correlation; x (Cin,H,W), w (Cout,Cin,kh,kw)."""
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[0] != w.shape[1]:
        raise _shape_err("conv2d", x.shape, w.shape)
    data = kernels.conv2d_forward(x.data, w.data, pad)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=np.float32)
        if x.requires_grad:
            x.accumulate(kernels.conv2d_grad_x(g, w.data, pad, x.shape))
        if w.requires_grad:
            w.accumulate(kernels.conv2d_grad_w(x.data, g, pad))

    out = _node(data, (x, w), backward)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise _shape_err("conv2d bias", b.shape, (w.shape[0],))
        out = add(out, reshape(b, (w.shape[0], 1, 1)))
    return out


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Kernel-2 stride-2 transposed 3D conv; x (Cin,D,H,W), w (Cin,Cout,2,2,2)."""
    if x.data.ndim != 4 or w.data.ndim != 5 or x.shape[0] != w.shape[0] \
            or w.shape[2:] != (2, 2, 2):
        raise _shape_err("transposed_conv3d", x.shape, w.shape)
    data = kernels.tconv3d_forward(x.data, w.data)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=np.float32)
        if x.requires_grad:
            x.accumulate(kernels.tconv3d_grad_x(g, w.data))
        if w.requires_grad:
            w.accumulate(kernels.tconv3d_grad_w(x.data, g))

    out = _node(data, (x, w), backward)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise _shape_err("transposed_conv3d bias", b.shape, (w.shape[1],))
        out = add(out, reshape(b, (w.shape[1], 1, 1, 1)))
    return out


def avg_pool3d(x: Tensor) -> Tensor:
    """2x2x2 stride-2 average pooling; dims must be even."""
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise _shape_err("avg_pool3d (even dims required)", x.shape)
    r = x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
    data = r.mean(axis=(2, 4, 6))

    def backward(g):
        if x.requires_grad:
            gx = np.broadcast_to(
                (g / 8.0)[:, :, None, :, None, :, None].astype(np.float32),
                (c, d // 2, 2, h // 2, 2, w // 2, 2),
            )
            x.accumulate(gx.reshape(c, d, h, w))

    return _node(data, (x,), backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; odd trailing rows/cols are dropped."""
    c, h, w = x.shape
    ho, wo = h // 2, w // 2
    r = x.data[:, :2 * ho, :2 * wo].reshape(c, ho, 2, wo, 2)
    r = np.ascontiguousarray(r.transpose(0, 1, 3, 2, 4)).reshape(c, ho, wo, 4)
    idx = r.argmax(axis=3)
    data = np.take_along_axis(r, idx[..., None], axis=3)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        gr = np.zeros((c, ho, wo, 4), dtype=np.float32)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=3)
        gr = gr.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
        full = np.zeros((c, h, w), dtype=np.float32)
        full[:, :2 * ho, :2 * wo] = gr
        x.accumulate(full)

    return _node(data, (x,), backward)


def patchify_3d(x: Tensor, patch: int) -> Tensor:
    """(C, D, H, W) -> (n_tokens, C*patch^3), tokens in d-major order."""
    c, d, h, w = x.shape
    p = int(patch)
    if d % p or h % p or w % p:
        raise ValueError(f"patchify_3d: patch {p} does not divide grid {(d, h, w)}")
    nd, nh, nw = d // p, h // p, w // p
    r = reshape(x, (c, nd, p, nh, p, nw, p))
    t = transpose(r, (1, 3, 5, 0, 2, 4, 6))
    return reshape(t, (nd * nh * nw, c * p * p * p))


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor) -> Tensor:
    data = np.float32(a.data.sum(dtype=np.float64))

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full(a.shape, np.float32(g), dtype=np.float32))

    return _node(data, (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements (float64 accumulation)."""
    if a.shape != b.shape:
        raise _shape_err("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size
    data = np.float32(np.sum(diff.astype(np.float64) ** 2) / n)

    def backward(g):
        scale = np.float32(2.0 / n) * np.float32(g)
        if a.requires_grad:
            a.accumulate(scale * diff)
        if b.requires_grad:
            b.accumulate(-scale * diff)

    return _node(data, (a, b), backward)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                                 attn_sink: list | None = None) -> Tensor:
    """Multi-head attention over (n_tokens, embed) q/k/v projections."""
    n, e = q.shape
    if k.shape != (n, e) or v.shape != (n, e):
        raise _shape_err("attention", q.shape, k.shape, v.shape)
    if e % n_heads:
        raise ValueError(f"attention: embed {e} not divisible by {n_heads} heads")
    dh = e // n_heads
    qh = transpose(reshape(q, (n, n_heads, dh)), (1, 0, 2))
    kt = transpose(reshape(k, (n, n_heads, dh)), (1, 2, 0))
    vh = transpose(reshape(v, (n, n_heads, dh)), (1, 0, 2))
    scores = mul_scalar(matmul(qh, kt), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn)
    out = matmul(attn, vh)
    return reshape(transpose(out, (1, 0, 2)), (n, e))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors with stable insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            a = np.asarray(state[k], dtype=np.float32)
            if a.shape != t.data.shape:
                raise _shape_err(f"load {k}", a.shape, t.data.shape)
            t.data = a.copy()


def merge_stores(parts: list[tuple[str, ParamStore]]) -> ParamStore:
    """One store aliasing the tensors of several, names prefixed."""
    merged = ParamStore()
    for prefix, store in parts:
        for name, t in store.items():
            merged.add(f"{prefix}.{name}", t)
    return merged


def grad(loss: Tensor, params: ParamStore) -> ParamStore:
    """Populate gradient slots of params from a scalar loss.

    Parameters unreachable from the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"grad: loss must be scalar, got shape {loss.shape}")
    params.zero_grad()
    loss.backward()
    for _, t in params.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return params
