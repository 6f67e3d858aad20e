"""Signal-processing kernels backing the loss terms and evaluation.

All spatial kernels act channel-wise on (C,H,W) or (N,C,H,W) tensors.
The FFT is an iterative radix-2 transform (power-of-two extents only),
unnormalized forward convention; blur/gradient kernels reflect-pad so
that constants stay fixed and gradients vanish on them.  Every function
except `laplacian_variance_map` (evaluation only) is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from luasr.tensor import (
    ShapeError, Tensor, _make, conv2d, pad2d_reflect, reshape,
)

# ---------------------------------------------------------------------------
# Radix-2 FFT
# ---------------------------------------------------------------------------

_FFT_PLANS: dict[tuple, tuple[np.ndarray, list[tuple[int, np.ndarray]]]] = {}


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _fft_plan(n: int, ctype, inverse: bool):
    key = (n, np.dtype(ctype).name, inverse)
    plan = _FFT_PLANS.get(key)
    if plan is None:
        levels = n.bit_length() - 1
        perm = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            v = i
            for _ in range(levels):
                r = (r << 1) | (v & 1)
                v >>= 1
            perm[i] = r
        stages = []
        half = 1
        while half < n:
            tw = np.exp(-2j * np.pi * np.arange(half) / (2 * half))
            if inverse:
                tw = np.conj(tw)
            stages.append((half, tw.astype(ctype)))
            half *= 2
        plan = (perm, stages)
        _FFT_PLANS[key] = plan
    return plan


def _fft_lastaxis(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 DIT transform along the last axis (power of two).

    Butterflies run in place on a flat (rows, n) working buffer; the first
    stage (twiddle 1) is a pure add/sub pass.
    """
    n = a.shape[-1]
    ctype = np.complex64 if a.dtype in (np.float32, np.complex64) else np.complex128
    if n == 1:
        return a.astype(ctype, copy=True)
    perm, stages = _fft_plan(n, ctype, inverse)
    shape = a.shape
    x = a[..., perm].astype(ctype, copy=False).reshape(-1, n)
    for half, tw in stages:
        v = x.reshape(-1, n // (2 * half), 2 * half)
        even = v[..., :half]
        odd = v[..., half:]
        if half > 1:
            odd = odd * tw
        upper = even + odd
        lower = even - odd
        v[..., :half] = upper
        v[..., half:] = lower
    x = x.reshape(shape)
    if inverse:
        x = x / n
    return x


def _fft2(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """2-D transform over the trailing two axes."""
    x = _fft_lastaxis(a, inverse)
    x = np.swapaxes(_fft_lastaxis(np.swapaxes(x, -1, -2), inverse), -1, -2)
    return x


def fft2_mag(x: Tensor) -> Tensor:
    """Per-channel unnormalized 2-D DFT magnitude of (…,H,W); H, W powers of two.

    Differentiable: with X the complex spectrum, the pullback of g is
    Re(F(g · X̄/|X|)), i.e. the forward transform applied to the phase-
    aligned cotangent (zero where the magnitude is zero).
    """
    h, w = x.shape[-2], x.shape[-1]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(f"fft2_mag: extents {(h, w)} must be powers of two")
    spec = _fft2(x.data)
    mag = np.abs(spec)

    def bw(g):
        denom = np.maximum(mag, np.finfo(mag.dtype).tiny)
        u = g * (np.conj(spec) / denom)
        x._accumulate(np.ascontiguousarray(_fft2(u).real.astype(x.dtype)))

    return _make(np.ascontiguousarray(mag.astype(x.dtype)), "fft2_mag", [x], bw)


# ---------------------------------------------------------------------------
# Gaussian blur
# ---------------------------------------------------------------------------

def gaussian_kernel1d(kernel: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalized 1-D Gaussian taps (float64)."""
    if kernel % 2 == 0:
        raise ShapeError(f"gaussian_kernel1d: kernel must be odd, got {kernel}")
    if sigma <= 0:
        raise ShapeError(f"gaussian_kernel1d: sigma must be positive, got {sigma}")
    half = kernel // 2
    t = np.arange(kernel, dtype=np.float64) - half
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _channelwise_conv(x: Tensor, kern2d: np.ndarray) -> Tensor:
    """Reflect-padded correlation of every channel with one fixed 2-D kernel."""
    k = kern2d.shape[0]
    squeeze = x.ndim == 3
    t = reshape(x, (1,) + x.shape) if squeeze else x
    n, c, h, w = t.shape
    flat = reshape(t, (n * c, 1, h, w))
    padded = pad2d_reflect(flat, k // 2)
    weight = Tensor(kern2d.reshape(1, 1, k, k).astype(x.dtype))
    out = conv2d(padded, weight, stride=1, pad=0)
    out = reshape(out, (n, c, h, w))
    return reshape(out, (c, h, w)) if squeeze else out


def gaussian_blur(x: Tensor, kernel: int = 5, sigma: float = 1.0) -> Tensor:
    """Channel-wise normalized Gaussian blur, reflect-padded borders."""
    k1 = gaussian_kernel1d(kernel, sigma)
    return _channelwise_conv(x, np.outer(k1, k1))


# ---------------------------------------------------------------------------
# Bicubic resampling (Keys kernel, a = -0.5)
# ---------------------------------------------------------------------------

_RESIZE_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)
_RESIZE_CACHE: dict[tuple[int, int, type], np.ndarray] = {}


def _keys_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    w = np.zeros_like(at)
    m1 = at <= 1.0
    w[m1] = (a + 2.0) * at[m1] ** 3 - (a + 3.0) * at[m1] ** 2 + 1.0
    m2 = (at > 1.0) & (at < 2.0)
    w[m2] = a * at[m2] ** 3 - 5.0 * a * at[m2] ** 2 + 8.0 * a * at[m2] - 4.0 * a
    return w


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Keys-kernel sampling matrix, edge clamp, align-corners false."""
    key = (n_in, n_out, float)
    mat = _RESIZE_CACHE.get(key)
    if mat is None:
        factor = n_out / n_in
        mat = np.zeros((n_out, n_in), dtype=np.float64)
        for i in range(n_out):
            src = (i + 0.5) / factor - 0.5
            i0 = math.floor(src)
            taps = np.arange(i0 - 1, i0 + 3)
            w = _keys_weights(src - taps)
            for tap, wt in zip(taps, w):
                mat[i, min(max(tap, 0), n_in - 1)] += wt
        _RESIZE_CACHE[key] = mat
    return mat


def bicubic_resize(x: Tensor, factor: float) -> Tensor:
    """Keys cubic (a=-0.5) resampling of the trailing two axes by `factor`.

    factor must be one of 1/4, 1/2, 1, 2, 4 and the output extents integral.
    """
    if not any(abs(factor - f) < 1e-12 for f in _RESIZE_FACTORS):
        raise ShapeError(f"bicubic_resize: unsupported factor {factor}")
    h, w = x.shape[-2], x.shape[-1]
    ho, wo = h * factor, w * factor
    if abs(ho - round(ho)) > 1e-9 or abs(wo - round(wo)) > 1e-9:
        raise ShapeError(f"bicubic_resize: non-integral output extents {(ho, wo)}")
    ho, wo = int(round(ho)), int(round(wo))
    if factor == 1.0:
        return _make(x.data.copy(), "bicubic_identity", [x],
                     lambda g: x._accumulate(g))
    mh = _resize_matrix(h, ho).astype(x.dtype)
    mw = _resize_matrix(w, wo).astype(x.dtype)
    out = np.ascontiguousarray(
        np.swapaxes(np.swapaxes(x.data @ mw.T, -1, -2) @ mh.T, -1, -2))

    def bw(g):
        gx = np.swapaxes(np.swapaxes(g, -1, -2) @ mh, -1, -2) @ mw
        x._accumulate(np.ascontiguousarray(gx))

    return _make(out, "bicubic_resize", [x], bw)


# ---------------------------------------------------------------------------
# Scharr gradients
# ---------------------------------------------------------------------------

_SCHARR_X = np.array([[-3.0, 0.0, 3.0],
                      [-10.0, 0.0, 10.0],
                      [-3.0, 0.0, 3.0]]) / 16.0
_SCHARR_Y = _SCHARR_X.T.copy()


def scharr_gradients(x: Tensor) -> tuple[Tensor, Tensor]:
    """Horizontal/vertical 3×3 Scharr gradient maps of a luminance image.

    Input (1,H,W) or (N,1,H,W); callers reduce RGB to luminance first.
    """
    if x.shape[-3] != 1:
        raise ShapeError(f"scharr_gradients: expected single channel, got {x.shape}")
    gx = _channelwise_conv(x, _SCHARR_X)
    gy = _channelwise_conv(x, _SCHARR_Y)
    return gx, gy


_LUMA = np.array([0.299, 0.587, 0.114])


def luminance(x: Tensor) -> Tensor:
    """Rec.601 luminance of an RGB image; single-channel passes through."""
    if x.shape[-3] == 1:
        return x
    if x.shape[-3] != 3:
        raise ShapeError(f"luminance: expected 1 or 3 channels, got {x.shape}")
    weight = Tensor(_LUMA.reshape(1, 3, 1, 1).astype(x.dtype))
    return conv2d(x, weight)


# ---------------------------------------------------------------------------
# Variance pooling
# ---------------------------------------------------------------------------

def variance_pool3(x: Tensor) -> Tensor:
    """Population variance over non-overlapping 3×3 patches.

    Trailing rows/columns that do not fill a patch are truncated.
    Differentiable: d var/d x_k = 2 (x_k − patch mean) / 9.
    """
    h, w = x.shape[-2], x.shape[-1]
    if h < 3 or w < 3:
        raise ShapeError(f"variance_pool3: extents {(h, w)} must be ≥ 3")
    ho, wo = h // 3, w // 3
    lead = x.shape[:-2]
    xc = x.data[..., :ho * 3, :wo * 3]
    patches = xc.reshape(lead + (ho, 3, wo, 3))
    mu = patches.mean(axis=(-3, -1), keepdims=True)
    centered = patches - mu
    out = (centered * centered).mean(axis=(-3, -1))

    def bw(g):
        gp = (2.0 / 9.0) * centered * g[..., :, None, :, None]
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., :ho * 3, :wo * 3] = gp.reshape(lead + (ho * 3, wo * 3))
        x._accumulate(full)

    return _make(np.ascontiguousarray(out), "variance_pool3", [x], bw)


# ---------------------------------------------------------------------------
# Frequency-domain high-pass mask
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FreqMask:
    """Centered high-pass weights on the normalized frequency grid.

    values[i, j] corresponds to (u, v) = ((i − H//2)/H, (j − W//2)/W), so the
    DC bin sits at (H//2, W//2) and carries weight 0.
    """
    height: int
    width: int
    values: np.ndarray

    def unshifted(self) -> np.ndarray:
        """Mask reordered to match an unshifted (DC-first) spectrum."""
        return np.fft.ifftshift(self.values)


def gaussian_highpass_mask(h: int, w: int, fc: float = 0.5) -> FreqMask:
    """1 − exp(−(u²+v²)/(2 fc²)) over centered frequencies u,v ∈ [−0.5, 0.5)."""
    if h < 1 or w < 1:
        raise ShapeError(f"gaussian_highpass_mask: extents must be ≥ 1, got {(h, w)}")
    if fc <= 0:
        raise ShapeError(f"gaussian_highpass_mask: cutoff must be positive, got {fc}")
    u = (np.arange(h) - h // 2) / h
    v = (np.arange(w) - w // 2) / w
    uu, vv = np.meshgrid(u, v, indexing="ij")
    values = 1.0 - np.exp(-(uu * uu + vv * vv) / (2.0 * fc * fc))
    return FreqMask(h, w, values)


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


# ---------------------------------------------------------------------------
# Laplacian-variance noise maps (evaluation only)
# ---------------------------------------------------------------------------

_LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                       [1.0, -4.0, 1.0],
                       [0.0, 1.0, 0.0]])


def laplacian_variance_map(x, patch: int) -> tuple[np.ndarray, float]:
    """Per-patch variance of the 3×3 Laplacian response and its mean.

    A noise proxy: rougher images score higher.  Accepts a (1,H,W) Tensor
    or ndarray; not differentiable (evaluation only).
    """
    if patch < 3:
        raise ShapeError(f"laplacian_variance_map: patch must be ≥ 3, got {patch}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 3 or data.shape[0] != 1:
        raise ShapeError(f"laplacian_variance_map: expected (1,H,W), got {data.shape}")
    img = data[0].astype(np.float64)
    padded = np.pad(img, 1, mode="reflect")
    resp = np.zeros_like(img)
    for a in range(3):
        for b in range(3):
            if _LAPLACIAN[a, b] != 0.0:
                resp += _LAPLACIAN[a, b] * padded[a:a + img.shape[0], b:b + img.shape[1]]
    ho, wo = img.shape[0] // patch, img.shape[1] // patch
    blocks = resp[:ho * patch, :wo * patch].reshape(ho, patch, wo, patch)
    vmap = blocks.var(axis=(1, 3))
    return vmap, float(vmap.mean()) if vmap.size else 0.0
