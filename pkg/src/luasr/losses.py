"""Loss terms and the three per-stage compositions of the curriculum.

Stage I supervises latents only (L1 + spectrum magnitude L1); Stage II
adds decoded-image consistency after bicubic reduction and Gaussian
high-frequency residual matching; Stage III is pixel-only (L1, spectrum,
and the edge-aware gradient-localization term).

Every term is an element-mean, so stage weights keep their meaning across
resolutions.  Terms with a zero coefficient are skipped entirely (their
gradient contribution is exactly zero) and logged as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from luasr import signal_ops as sig
from luasr.tensor import ShapeError, Tensor, abs_, add, mean, mul, pad2d_zero, sub

# Term names in canonical logging order.
TERM_NAMES = (
    "latent_l1", "latent_fft",
    "ds_consistency", "hf_residual",
    "pixel_l1", "pixel_fft", "eagle",
)

STAGE_TERMS = {
    "I": ("latent_l1", "latent_fft"),
    "II": ("latent_l1", "latent_fft", "ds_consistency", "hf_residual"),
    "III": ("pixel_l1", "pixel_fft", "eagle"),
}

# Default per-stage coefficients.
DEFAULT_STAGE_WEIGHTS = {
    "I": {"latent_l1": 1.0, "latent_fft": 0.1},
    "II": {"latent_l1": 1.0, "latent_fft": 0.1,
           "ds_consistency": 0.1, "hf_residual": 0.05},
    "III": {"pixel_l1": 10.0, "pixel_fft": 1.0, "eagle": 5e-5},
}


@dataclass(frozen=True)
class StageWeights:
    """Coefficients for one curriculum stage; term set is fixed per stage."""
    stage: str
    coefficients: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGE_TERMS:
            raise ValueError(f"unknown stage {self.stage!r}; expected I/II/III")
        expected = set(STAGE_TERMS[self.stage])
        got = set(self.coefficients)
        if got != expected:
            raise ValueError(
                f"stage {self.stage} requires exactly terms {sorted(expected)}, got {sorted(got)}")
        for name, c in self.coefficients.items():
            if c < 0:
                raise ValueError(f"coefficient for {name} must be ≥ 0, got {c}")


def stage_weights(stage: str, **overrides: float) -> StageWeights:
    """Default coefficients for a stage, with keyword overrides."""
    coeff = dict(DEFAULT_STAGE_WEIGHTS[stage])
    for name, value in overrides.items():
        if name not in coeff:
            raise ValueError(f"term {name!r} is not part of stage {stage}")
        coeff[name] = value
    return StageWeights(stage, coeff)


@dataclass
class LossBreakdown:
    """Scalar total plus per-term raw/weighted values for logging."""
    total: Tensor
    raw: dict[str, float]
    weighted: dict[str, float]

    @property
    def total_value(self) -> float:
        return self.total.item()


# ---------------------------------------------------------------------------
# Individual terms
# ---------------------------------------------------------------------------

def _l1(a: Tensor, b: Tensor, what: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return mean(abs_(sub(a, b)))


def latent_l1(z_hat: Tensor, z_hr: Tensor) -> Tensor:
    """Mean absolute difference between predicted and reference latents."""
    return _l1(z_hat, z_hr, "latent_l1")


def latent_fft(z_hat: Tensor, z_hr: Tensor) -> Tensor:
    """Element-mean L1 between channel-wise 2-D spectrum magnitudes."""
    if z_hat.shape != z_hr.shape:
        raise ShapeError(f"latent_fft: shape mismatch {z_hat.shape} vs {z_hr.shape}")
    return mean(abs_(sub(sig.fft2_mag(z_hat), sig.fft2_mag(z_hr))))


def ds_consistency(x_hat: Tensor, x_hr: Tensor, d: int) -> Tensor:
    """L1 after bicubic downsampling both images by d (2 for ×2, 4 for ×4)."""
    if d not in (2, 4):
        raise ValueError(f"ds_consistency: d must be 2 or 4, got {d}")
    if x_hat.shape != x_hr.shape:
        raise ShapeError(f"ds_consistency: shape mismatch {x_hat.shape} vs {x_hr.shape}")
    if x_hat.shape[-2] % d or x_hat.shape[-1] % d:
        raise ShapeError(f"ds_consistency: extents {x_hat.shape[-2:]} not divisible by {d}")
    return _l1(sig.bicubic_resize(x_hat, 1.0 / d), sig.bicubic_resize(x_hr, 1.0 / d),
               "ds_consistency")


def hf_residual(x_hat: Tensor, x_hr: Tensor, kernel: int = 5, sigma: float = 1.0) -> Tensor:
    """L1 between Gaussian high-frequency residuals (x − blur(x))."""
    if x_hat.shape != x_hr.shape:
        raise ShapeError(f"hf_residual: shape mismatch {x_hat.shape} vs {x_hr.shape}")
    ra = sub(x_hat, sig.gaussian_blur(x_hat, kernel, sigma))
    rb = sub(x_hr, sig.gaussian_blur(x_hr, kernel, sigma))
    return mean(abs_(sub(ra, rb)))


def pixel_l1(x_hat: Tensor, x_hr: Tensor) -> Tensor:
    """Mean absolute difference between decoded images."""
    return _l1(x_hat, x_hr, "pixel_l1")


def pixel_fft(x_hat: Tensor, x_hr: Tensor) -> Tensor:
    """Element-mean L1 between image spectrum magnitudes."""
    if x_hat.shape != x_hr.shape:
        raise ShapeError(f"pixel_fft: shape mismatch {x_hat.shape} vs {x_hr.shape}")
    return mean(abs_(sub(sig.fft2_mag(x_hat), sig.fft2_mag(x_hr))))


def _masked_spectrum_l1(va: Tensor, vb: Tensor, fc: float) -> Tensor:
    """Zero-pad pooled maps to powers of two, compare masked spectra."""
    h, w = va.shape[-2], va.shape[-1]
    ph, pw = sig.next_pow2(h), sig.next_pow2(w)
    if (ph, pw) != (h, w):
        va = pad2d_zero(va, ph - h, pw - w)
        vb = pad2d_zero(vb, ph - h, pw - w)
    mask = sig.gaussian_highpass_mask(ph, pw, fc).unshifted()
    diff = sub(sig.fft2_mag(va), sig.fft2_mag(vb))
    mask_t = Tensor(np.broadcast_to(mask, diff.shape).astype(diff.dtype).copy())
    return mean(abs_(mul(diff, mask_t)))


def eagle(x_hat: Tensor, x_hr: Tensor, fc: float = 0.5) -> Tensor:
    """Edge-aware gradient-localization loss.

    Luminance → Scharr gradients → 3×3 variance pooling → spectrum
    magnitude → centered Gaussian high-pass mask (cutoff fc) → element-
    mean L1, summed over the horizontal and vertical directions.
    """
    if x_hat.shape != x_hr.shape:
        raise ShapeError(f"eagle: shape mismatch {x_hat.shape} vs {x_hr.shape}")
    if x_hat.shape[-2] < 3 or x_hat.shape[-1] < 3:
        raise ShapeError(f"eagle: extents {x_hat.shape[-2:]} too small (need ≥ 3)")
    gxa, gya = sig.scharr_gradients(sig.luminance(x_hat))
    gxb, gyb = sig.scharr_gradients(sig.luminance(x_hr))
    vxa, vya = sig.variance_pool3(gxa), sig.variance_pool3(gya)
    vxb, vyb = sig.variance_pool3(gxb), sig.variance_pool3(gyb)
    return add(_masked_spectrum_l1(vxa, vxb, fc), _masked_spectrum_l1(vya, vyb, fc))


def precompute_targets(z_hr: np.ndarray, x_ref: np.ndarray | None,
                       stage: str) -> dict[str, np.ndarray]:
    """Reference-side constants for the cached-target stage loss.

    z_hr is the (N,C,h,w) latent stack; x_ref the pixel-domain reference
    images (required for stages II/III).  Returns plain arrays indexable
    per batch.
    """
    from luasr.tensor import no_grad

    out: dict[str, np.ndarray] = {}
    with no_grad():
        if stage in ("I", "II"):
            out["z_hr"] = np.asarray(z_hr, dtype=np.float32)
            out["z_mag"] = sig.fft2_mag(Tensor(z_hr)).numpy()
        if stage in ("II", "III"):
            if x_ref is None:
                raise ValueError(f"stage {stage} targets need pixel references")
            xt = Tensor(x_ref)
            if stage == "II":
                out["ds2"] = sig.bicubic_resize(xt, 0.5).numpy()
                out["ds4"] = sig.bicubic_resize(xt, 0.25).numpy()
                out["hf_res"] = (sub(xt, sig.gaussian_blur(xt))).numpy()
            if stage == "III":
                out["pix_mag"] = sig.fft2_mag(xt).numpy()
                vx, vy = eagle_pooled_gradients(xt)
                out["eagle_vx_mag"] = sig.fft2_mag(vx).numpy()
                out["eagle_vy_mag"] = sig.fft2_mag(vy).numpy()
    return out


def stage_loss_cached(weights: StageWeights, targets: dict[str, np.ndarray],
                      sel: np.ndarray, z_hat: Tensor | None = None,
                      x_hat: Tensor | None = None, x_ref: np.ndarray | None = None,
                      d: int = 2) -> LossBreakdown:
    """stage_loss with every reference-side constant precomputed.

    Produces bit-identical values to stage_loss on the same inputs; the
    trainer's hot path.  `sel` indexes the batch rows inside `targets`.
    """
    raw: dict[str, float] = {}
    weighted: dict[str, float] = {}
    total: Tensor | None = None
    for name in STAGE_TERMS[weights.stage]:
        coeff = weights.coefficients[name]
        if coeff == 0.0:
            raw[name] = 0.0
            weighted[name] = 0.0
            continue
        if name == "latent_l1":
            term = l1_to_target(z_hat, Tensor(targets["z_hr"][sel]))
        elif name == "latent_fft":
            term = fft_l1_to_target(z_hat, Tensor(targets["z_mag"][sel]))
        elif name == "ds_consistency":
            term = ds_to_target(x_hat, Tensor(targets[f"ds{d}"][sel]), d)
        elif name == "hf_residual":
            term = hf_to_target(x_hat, Tensor(targets["hf_res"][sel]))
        elif name == "pixel_l1":
            term = l1_to_target(x_hat, Tensor(x_ref[sel]))
        elif name == "pixel_fft":
            term = fft_l1_to_target(x_hat, Tensor(targets["pix_mag"][sel]))
        else:
            term = eagle_to_target(x_hat, Tensor(targets["eagle_vx_mag"][sel]),
                                   Tensor(targets["eagle_vy_mag"][sel]))
        raw[name] = term.item()
        weighted_term = mul(term, coeff)
        weighted[name] = weighted_term.item()
        total = weighted_term if total is None else add(total, weighted_term)
    if total is None:
        total = Tensor(np.zeros((), dtype=np.float32))
    return LossBreakdown(total=total, raw=raw, weighted=weighted)


# ---------------------------------------------------------------------------
# Cached-target variants
#
# During training the reference side of every term is a constant, so the
# trainer precomputes it once per pair set (decoded images, spectrum
# magnitudes, blur residuals, pooled-gradient spectra) and evaluates these
# equivalents; each returns bit-identical values to its canonical term.
# ---------------------------------------------------------------------------

def l1_to_target(x_hat: Tensor, target: Tensor) -> Tensor:
    return _l1(x_hat, target, "l1_to_target")


def fft_l1_to_target(x_hat: Tensor, target_mag: Tensor) -> Tensor:
    """latent_fft / pixel_fft with the reference spectrum precomputed."""
    return mean(abs_(sub(sig.fft2_mag(x_hat), target_mag)))


def ds_to_target(x_hat: Tensor, target_ds: Tensor, d: int) -> Tensor:
    return mean(abs_(sub(sig.bicubic_resize(x_hat, 1.0 / d), target_ds)))


def hf_to_target(x_hat: Tensor, target_residual: Tensor,
                 kernel: int = 5, sigma: float = 1.0) -> Tensor:
    ra = sub(x_hat, sig.gaussian_blur(x_hat, kernel, sigma))
    return mean(abs_(sub(ra, target_residual)))


def eagle_pooled_gradients(x: Tensor) -> tuple[Tensor, Tensor]:
    """The shared front of the edge-aware loss: luminance → Scharr →
    variance pooling, zero-padded to power-of-two extents."""
    gx, gy = sig.scharr_gradients(sig.luminance(x))
    vx, vy = sig.variance_pool3(gx), sig.variance_pool3(gy)
    h, w = vx.shape[-2], vx.shape[-1]
    ph, pw = sig.next_pow2(h), sig.next_pow2(w)
    if (ph, pw) != (h, w):
        vx = pad2d_zero(vx, ph - h, pw - w)
        vy = pad2d_zero(vy, ph - h, pw - w)
    return vx, vy


def eagle_to_target(x_hat: Tensor, target_vx_mag: Tensor, target_vy_mag: Tensor,
                    fc: float = 0.5) -> Tensor:
    """eagle() with the reference branch's spectrum magnitudes precomputed."""
    vx, vy = eagle_pooled_gradients(x_hat)
    mask = sig.gaussian_highpass_mask(vx.shape[-2], vx.shape[-1], fc).unshifted()

    def masked(v, tmag):
        diff = sub(sig.fft2_mag(v), tmag)
        mask_t = Tensor(np.broadcast_to(mask, diff.shape).astype(diff.dtype).copy())
        return mean(abs_(mul(diff, mask_t)))

    return add(masked(vx, target_vx_mag), masked(vy, target_vy_mag))


# ---------------------------------------------------------------------------
# Stage composition
# ---------------------------------------------------------------------------

def stage_loss(weights: StageWeights,
               z_hat: Tensor | None = None, z_hr: Tensor | None = None,
               x_hat: Tensor | None = None, x_hr: Tensor | None = None,
               d: int = 2) -> LossBreakdown:
    """Weighted sum of the stage's active terms.

    Latent tensors are required whenever a latent-domain term is active,
    decoded images whenever a pixel-domain term is active (Stage I never
    needs them).  Zero-weight terms are skipped entirely.
    """
    def need_latent():
        if z_hat is None or z_hr is None:
            raise ValueError(f"stage {weights.stage}: latent tensors required")

    def need_pixel():
        if x_hat is None or x_hr is None:
            raise ValueError(f"stage {weights.stage}: decoded image tensors required")

    raw: dict[str, float] = {}
    weighted: dict[str, float] = {}
    total: Tensor | None = None
    for name in STAGE_TERMS[weights.stage]:
        coeff = weights.coefficients[name]
        if coeff == 0.0:
            raw[name] = 0.0
            weighted[name] = 0.0
            continue
        if name in ("latent_l1", "latent_fft"):
            need_latent()
            term = latent_l1(z_hat, z_hr) if name == "latent_l1" else latent_fft(z_hat, z_hr)
        elif name == "ds_consistency":
            need_pixel()
            term = ds_consistency(x_hat, x_hr, d)
        elif name == "hf_residual":
            need_pixel()
            term = hf_residual(x_hat, x_hr)
        elif name == "pixel_l1":
            need_pixel()
            term = pixel_l1(x_hat, x_hr)
        elif name == "pixel_fft":
            need_pixel()
            term = pixel_fft(x_hat, x_hr)
        else:
            need_pixel()
            term = eagle(x_hat, x_hr)
        raw[name] = term.item()
        weighted_term = mul(term, coeff)
        weighted[name] = weighted_term.item()
        total = weighted_term if total is None else add(total, weighted_term)
    if total is None:  # every coefficient zero
        ref = z_hat if z_hat is not None else x_hat
        dtype = ref.dtype if ref is not None else np.float32
        total = Tensor(np.zeros((), dtype=dtype))
    return LossBreakdown(total=total, raw=raw, weighted=weighted)
