"""Dense tensors with reverse-mode automatic differentiation.

Everything in this package computes on `Tensor`: a contiguous row-major
numpy array (float32 for training, float64 for gradient checks) plus an
optional tape node.  The tape is a DAG of `TapeNode`s; `backward()` walks
it once in reverse topological order and accumulates gradients into the
`.grad` buffer of every reachable leaf that requires them.

Layout convention is channels-first: images and latents are (C, H, W) or
batched (N, C, H, W).  Broadcasting is deliberately not supported beyond
bias addition; shape mismatches raise `ShapeError`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class TapeNode:
    """One recorded operation: kind, input tensors, and a backward closure.

    The closure receives dL/d(output) as a numpy array and must accumulate
    dL/d(input) into each input tensor via `_accumulate`.
    """

    __slots__ = ("op_kind", "inputs", "backward_fn")

    def __init__(self, op_kind: str, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], None]):
        self.op_kind = op_kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(ref.shape, value, dtype=ref.dtype))


def _make(out_data: np.ndarray, op_kind: str, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.node = TapeNode(op_kind, [t for t in inputs if t.requires_grad],
                        backward_fn) if out.requires_grad else None
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates `.grad` on every requires_grad leaf reachable from `loss`.
    Each tape node is visited exactly once (iterative topological order,
    so arbitrarily deep graphs do not hit the recursion limit).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # Iterative post-order DFS over tensors that carry nodes.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

    loss._accumulate(np.ones_like(loss.data))
    for t in reversed(topo):
        if t.node is not None and t.grad is not None:
            t.node.backward_fn(t.grad)


# ---------------------------------------------------------------------------
# Elementwise suite
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + a.data.dtype.type(b)
        return _make(out, "add_scalar", [a], lambda g: a._accumulate(g))
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(out, "add", [a, b], bw)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data - a.data.dtype.type(b)
        return _make(out, "sub_scalar", [a], lambda g: a._accumulate(g))
    _check_same_shape(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(out, "sub", [a, b], bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = a.data.dtype.type(b)
        out = a.data * s
        return _make(out, "mul_scalar", [a], lambda g: a._accumulate(g * s))
    _check_same_shape(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(out, "mul", [a, b], bw)


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    # Subgradient 0 at the kink; gradient checks sample away from 0.
    return _make(out, "abs", [a], lambda g: a._accumulate(g * np.sign(a.data)))


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _make(out, "sum", [a], lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return _make(out, "mean", [a], lambda g: a._accumulate(np.broadcast_to(g / n, a.shape)))


def tanh_(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, "tanh", [a], lambda g: a._accumulate(g * (1.0 - t * t)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (0.5x(1 + tanh(√(2/π)(x + 0.044715x³))))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a._accumulate(g * da)

    return _make(out, "gelu", [a], bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis of (C,H,W) or (N,C,H,W).

    gamma/beta are (C,) learnable scale and shift; population statistics.
    """
    axis = x.ndim - 3
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: scale/shift must be ({c},), got {gamma.shape}/{beta.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    gb = gamma.data.reshape(bshape)
    out = gb * xhat + beta.data.reshape(bshape)

    def bw(g):
        if gamma.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != axis)
            gamma._accumulate((g * xhat).sum(axis=red))
        if beta.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != axis)
            beta._accumulate(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gb
            m1 = dxhat.mean(axis=axis, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
            x._accumulate((dxhat - m1 - xhat * m2) * ivar)

    return _make(out, "layer_norm", [x, gamma, beta], bw)


def group_norm_whole(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Single-group normalization: each sample's (C,H,W) volume is
    standardized jointly, then scaled/shifted per channel.

    Makes the consumer invariant to a global affine change of its input
    (the normalization used at the entry of typical decoder stacks).
    """
    c = x.shape[-3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm_whole: affine must be ({c},), got {gamma.shape}/{beta.shape}")
    axes = tuple(range(x.ndim - 3, x.ndim))
    bshape = [1] * x.ndim
    bshape[x.ndim - 3] = c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    gb = gamma.data.reshape(bshape)
    out = gb * xhat + beta.data.reshape(bshape)

    def bw(g):
        red = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=red))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gb
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            x._accumulate((dxhat - m1 - xhat * m2) * ivar)

    return _make(out, "group_norm_whole", [x, gamma, beta], bw)


def softmax_lastaxis(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - dot))

    return _make(y, "softmax", [x], bw)


# ---------------------------------------------------------------------------
# Structural primitives
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.data.shape
    return _make(out, "reshape", [a], lambda g: a._accumulate(g.reshape(orig)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, "transpose", [a], lambda g: a._accumulate(g.transpose(inv)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (..., n, k) @ (..., k, m); batch dims must match."""
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, "matmul", [a, b], bw)


def add_bias_lastaxis(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast along the last axis (the one blessed broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    out = x.data + b.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(out, "add_bias", [x, b], bw)


def crop2d(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    """Slice the trailing two axes to [top:top+h, left:left+w]."""
    if top < 0 or left < 0 or top + h > x.shape[-2] or left + w > x.shape[-1]:
        raise ShapeError(f"crop2d: window {(top, left, h, w)} outside {x.shape}")
    out = np.ascontiguousarray(x.data[..., top:top + h, left:left + w])

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., top:top + h, left:left + w] = g
        x._accumulate(full)

    return _make(out, "crop2d", [x], bw)


def pad2d_zero(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the bottom/right of the trailing two axes."""
    cfg = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    out = np.pad(x.data, cfg)
    h, w = x.shape[-2], x.shape[-1]
    return _make(out, "pad2d_zero", [x],
                 lambda g: x._accumulate(g[..., :h, :w]))


def pad2d_reflect(x: Tensor, pad: int) -> Tensor:
    """Reflect-pad the trailing two axes by `pad` on every side."""
    h, w = x.shape[-2], x.shape[-1]
    if pad >= h or pad >= w:
        raise ShapeError(f"pad2d_reflect: pad {pad} too large for {(h, w)}")
    cfg = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, cfg, mode="reflect")
    # Scatter-add padded gradient back through the reflection index map.
    idx_h = np.pad(np.arange(h), (pad, pad), mode="reflect")
    idx_w = np.pad(np.arange(w), (pad, pad), mode="reflect")

    def bw(g):
        acc = np.zeros(x.shape, dtype=g.dtype)
        # two 1-D scatter passes keep this O(size) without fancy 2-D indexing
        tmp = np.zeros(x.shape[:-2] + (h, w + 2 * pad), dtype=g.dtype)
        np.add.at(tmp, (..., idx_h, slice(None)), g)
        np.add.at(acc, (..., slice(None), idx_w), tmp)
        x._accumulate(acc)

    return _make(out, "pad2d_reflect", [x], bw)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int):
    """(N,C,Hp,Wp) -> (N, H', W', C, k, k) strided view plus output extents."""
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view, ho, wo


def _conv2d_raw(xp: np.ndarray, w: np.ndarray, stride: int):
    """Cross-correlation of a pre-padded (N,C,Hp,Wp) with (Co,C,k,k)."""
    co, ci, k, _ = w.shape
    view, ho, wo = _im2col(xp, k, stride)
    n = xp.shape[0]
    cols = view.reshape(n * ho * wo, ci * k * k)
    out = cols @ w.reshape(co, ci * k * k).T
    return out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2), cols, (ho, wo)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Input (C_in,H,W) or (N,C_in,H,W); weight (C_out,C_in,k,k); odd k.
    Output extent per axis is floor((H + 2·pad − k)/stride) + 1.
    Differentiable w.r.t. input, weight, and bias.
    """
    if stride <= 0:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d: pad must be non-negative, got {pad}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out,C_in,k,k), got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    cin = x.shape[-3]
    if cin != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels {cin} != weight C_in {weight.shape[1]}")
    h, w_ = x.shape[-2], x.shape[-1]
    if h + 2 * pad < k or w_ + 2 * pad < k:
        raise ShapeError(f"conv2d: padded extent smaller than kernel {k}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias must be ({weight.shape[0]},), got {bias.shape}")

    xd = x.data[None] if squeeze else x.data

    if k == 1 and stride == 1 and pad == 0:
        # pointwise conv is a channel matmul; skip im2col entirely
        n_, c_, h_, w2_ = xd.shape
        xr = xd.reshape(n_, c_, h_ * w2_)
        w2d = weight.data.reshape(weight.shape[0], c_)
        out = np.matmul(w2d, xr).reshape(n_, weight.shape[0], h_, w2_)
        if bias is not None:
            out = out + bias.data[None, :, None, None]
        if squeeze:
            out = out[0]

        def bw1(g):
            gd = g[None] if squeeze else g
            gr = gd.reshape(n_, weight.shape[0], h_ * w2_)
            if bias is not None and bias.requires_grad:
                bias._accumulate(gr.sum(axis=(0, 2)))
            if weight.requires_grad:
                gw = np.einsum("nop,ncp->oc", gr, xr, optimize=True)
                weight._accumulate(gw.reshape(weight.shape))
            if x.requires_grad:
                gx = np.matmul(w2d.T, gr).reshape(xd.shape)
                x._accumulate(gx[0] if squeeze else gx)

        ins1 = [x, weight] if bias is None else [x, weight, bias]
        return _make(out, "conv2d", ins1, bw1)

    if pad > 0:
        xp = np.pad(xd, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    else:
        xp = xd
    out, cols, (ho, wo) = _conv2d_raw(xp, weight.data, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    n, co = out.shape[0], out.shape[1]
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gflat = gd.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))
        if weight.requires_grad:
            gw = gflat.T @ cols
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            # dilate grad by stride, pad by k-1, correlate with flipped kernel
            hp, wp = xp.shape[2], xp.shape[3]
            gdil = np.zeros((n, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                            dtype=gd.dtype)
            gdil[:, :, ::stride, ::stride] = gd
            gpad = np.pad(gdil, [(0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)])
            wflip = np.ascontiguousarray(
                weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _, (gh, gw_) = _conv2d_raw(gpad, wflip, 1)
            if gh < hp or gw_ < wp:  # floor-division remainder rows never touched
                gx = np.pad(gx, [(0, 0), (0, 0), (0, hp - gh), (0, wp - gw_)])
            if pad > 0:
                gx = gx[:, :, pad:pad + h, pad:pad + w_]
            x._accumulate(gx[0] if squeeze else gx)

    ins = [x, weight] if bias is None else [x, weight, bias]
    return _make(out, "conv2d", ins, bw)


# ---------------------------------------------------------------------------
# Pixel shuffle
# ---------------------------------------------------------------------------

def _shuffle_fwd(xd: np.ndarray, r: int) -> np.ndarray:
    *lead, c_r2, h, w = xd.shape
    c = c_r2 // (r * r)
    y = xd.reshape(*lead, c, r, r, h, w)
    nd = len(lead)
    y = y.transpose(*range(nd), nd, nd + 3, nd + 1, nd + 4, nd + 2)
    return np.ascontiguousarray(y.reshape(*lead, c, h * r, w * r))


def _shuffle_bwd(gd: np.ndarray, r: int) -> np.ndarray:
    *lead, c, hr, wr = gd.shape
    h, w = hr // r, wr // r
    y = gd.reshape(*lead, c, h, r, w, r)
    nd = len(lead)
    y = y.transpose(*range(nd), nd, nd + 2, nd + 4, nd + 1, nd + 3)
    return np.ascontiguousarray(y.reshape(*lead, c * r * r, h, w))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (C·r², h, w) -> (C, r·h, r·w): out[c, r·i+a, r·j+b] = in[c·r²+a·r+b, i, j]."""
    if r <= 0:
        raise ShapeError(f"pixel_shuffle: factor must be positive, got {r}")
    c = x.shape[-3]
    if c % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by r²={r * r}")
    out = _shuffle_fwd(x.data, r)
    return _make(out, "pixel_shuffle", [x], lambda g: x._accumulate(_shuffle_bwd(g, r)))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle: (C, r·h, r·w) -> (C·r², h, w)."""
    if r <= 0:
        raise ShapeError(f"pixel_unshuffle: factor must be positive, got {r}")
    h, w = x.shape[-2], x.shape[-1]
    if h % r != 0 or w % r != 0:
        raise ShapeError(f"pixel_unshuffle: extents {(h, w)} not divisible by {r}")
    out = _shuffle_bwd(x.data, r)
    return _make(out, "pixel_unshuffle", [x], lambda g: x._accumulate(_shuffle_fwd(g, r)))


# ---------------------------------------------------------------------------
# Windowed self-attention
# ---------------------------------------------------------------------------

def window_partition(x: Tensor, window: int) -> Tensor:
    """(N,C,H,W) -> (N·nh·nw, window², C) token windows."""
    n, c, h, w = x.shape
    m = window
    t = reshape(x, (n, c, h // m, m, w // m, m))
    t = transpose(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (n * (h // m) * (w // m), m * m, c))


def window_merge(t: Tensor, window: int, n: int, c: int, h: int, w: int) -> Tensor:
    """Inverse of `window_partition`."""
    m = window
    x = reshape(t, (n, h // m, w // m, m, m, c))
    x = transpose(x, (0, 5, 1, 3, 2, 4))
    return reshape(x, (n, c, h, w))


def window_attention(x: Tensor,
                     wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                     bq: Tensor, bk: Tensor, bv: Tensor, bo: Tensor,
                     window: int, heads: int) -> Tensor:
    """Multi-head softmax attention inside non-overlapping windows.

    Input (C,H,W) or (N,C,H,W); H and W divisible by `window`, C divisible
    by `heads`.  Projection weights are (C,C) applied to row-vector tokens
    (y = x Wᵀ + b).  Output shape equals input shape; every attention row
    sums to 1.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    m = window
    if h % m != 0 or w % m != 0:
        raise ShapeError(f"window_attention: extents {(h, w)} not divisible by window {m}")
    if c % heads != 0:
        raise ShapeError(f"window_attention: channels {c} not divisible by heads {heads}")
    for name, wm in (("q", wq), ("k", wk), ("v", wv), ("proj", wo)):
        if wm.shape != (c, c):
            raise ShapeError(f"window_attention: {name} weight must be ({c},{c}), got {wm.shape}")
    dh = c // heads
    scale = 1.0 / math.sqrt(dh)

    tok = window_partition(x, m)                      # (B, T, C)
    b_, t_ = tok.shape[0], tok.shape[1]

    def project(wm, bm):
        flat = reshape(tok, (b_ * t_, c))
        y = add_bias_lastaxis(matmul(flat, transpose(wm, (1, 0))), bm)
        y = reshape(y, (b_, t_, heads, dh))
        y = transpose(y, (0, 2, 1, 3))                # (B, heads, T, dh)
        return reshape(y, (b_ * heads, t_, dh))

    q = project(wq, bq)
    k = project(wk, bk)
    v = project(wv, bv)

    attn = softmax_lastaxis(mul(matmul(q, transpose(k, (0, 2, 1))), scale))
    ctx = matmul(attn, v)                             # (B·heads, T, dh)
    ctx = reshape(ctx, (b_, heads, t_, dh))
    ctx = transpose(ctx, (0, 2, 1, 3))
    ctx = reshape(ctx, (b_ * t_, c))
    out = add_bias_lastaxis(matmul(ctx, transpose(wo, (1, 0))), bo)
    out = window_merge(reshape(out, (b_, t_, c)), m, n, c, h, w)
    if squeeze:
        out = reshape(out, (c, h, w))
    return out
