"""Frozen stand-in codecs for the VAE and the synthetic data pipeline.

Two codec kinds: an `analytic` space-to-depth rearrangement (lossless,
linear decode, makes loss values exactly checkable) and a `learned`
strided-conv encoder / sub-pixel-conv decoder trained to reconstruct the
procedural corpus and then frozen (a lossy latent manifold on which the
latent-drift failure mode can manifest).

Training pairs follow the bicubic pipeline: the HR image is encoded to
z_hr, the LR image is a bicubic downsample of the HR image encoded to
z_lr (never a downsampled latent).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from luasr.tensor import (
    ShapeError, Tensor, add, conv2d, gelu, mean, mul, no_grad, pixel_shuffle,
    pixel_unshuffle, sub, tanh_,
)
from luasr import signal_ops as sig


class CodecTrainingError(RuntimeError):
    """Learned codec failed to reach its reconstruction gate."""


@dataclass(frozen=True)
class LatentGrid:
    """A (C,h,w) latent tagged with the codec that produced it."""
    data: np.ndarray
    codec_id: str
    stride: int

    @property
    def shape(self):
        return self.data.shape


def _psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return 99.0
    return min(10.0 * math.log10(peak * peak / mse), 99.0)


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

class Codec:
    """Encoder/decoder pair with stride s mapping (3,H,W) <-> (C,H/s,W/s).

    decode() is differentiable w.r.t. its input; parameters never receive
    gradients once frozen.  decode_calls counts tape-building decodes so
    the trainer tests can assert Stage I never touches the decoder.
    """

    def __init__(self, kind: str, stride: int, channels: int,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        self.kind = kind
        self.stride = stride
        self.channels = channels
        self.params = params or {}
        self.frozen = True
        self.seed = seed
        self.decode_calls = 0

    @property
    def codec_id(self) -> str:
        return f"{self.kind}-s{self.stride}-c{self.channels}-seed{self.seed}"

    def named_params(self):
        return sorted(self.params.items())

    def freeze(self):
        for _, p in self.named_params():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    # -- analytic paths ---------------------------------------------------

    def _encode_t(self, x: Tensor) -> Tensor:
        if x.shape[-3] != 3:
            raise ShapeError(f"encode: expected RGB input, got {x.shape}")
        if x.shape[-2] % self.stride or x.shape[-1] % self.stride:
            raise ShapeError(
                f"encode: extents {x.shape[-2:]} not divisible by stride {self.stride}")
        if self.kind == "analytic":
            return pixel_unshuffle(x, self.stride)
        # space-to-depth then stride-1 convs: the exact-depth equivalent of a
        # stride-s convolution front end, lossless before the channel squeeze
        h = pixel_unshuffle(x, self.stride)
        h = gelu(conv2d(h, self.params["enc_in.weight"], self.params["enc_in.bias"], pad=1))
        h = gelu(conv2d(h, self.params["enc_mid.weight"], self.params["enc_mid.bias"], pad=1))
        return conv2d(h, self.params["enc_out.weight"], self.params["enc_out.bias"], pad=1)

    def _decode_t(self, z: Tensor) -> Tensor:
        if z.shape[-3] != self.channels:
            raise ShapeError(f"decode: expected {self.channels} channels, got {z.shape}")
        if self.kind == "analytic":
            return pixel_shuffle(z, self.stride)
        # sub-pixel decoder with a saturating output stage mapping to [0,1]:
        # pixel values near 0/1 live close to the tanh asymptote, so codes
        # pushed purely by pixel supervision can grow without bound there
        h = gelu(conv2d(z, self.params["dec_in.weight"], self.params["dec_in.bias"], pad=1))
        h = gelu(conv2d(h, self.params["dec_mid.weight"], self.params["dec_mid.bias"], pad=1))
        h = conv2d(h, self.params["dec_out.weight"], self.params["dec_out.bias"], pad=1)
        u = pixel_shuffle(h, self.stride)
        return mul(add(tanh_(u), 1.0), 0.5)

    # -- public api ---------------------------------------------------------

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Image array (3,H,W) or (N,3,H,W) -> latent array (no tape)."""
        with no_grad():
            return self._encode_t(Tensor(np.asarray(x, dtype=np.float32))).numpy()

    def decode(self, z: Tensor) -> Tensor:
        """Differentiable decode of a latent Tensor."""
        self.decode_calls += 1
        return self._decode_t(z)

    def decode_array(self, z: np.ndarray) -> np.ndarray:
        """Decode without building tape."""
        with no_grad():
            return self._decode_t(Tensor(np.asarray(z, dtype=np.float32))).numpy()

    def macs_decode(self, h: int, w: int) -> int:
        """Exact decode MACs for a (C,h,w) latent (0 for the analytic kind)."""
        if self.kind == "analytic":
            return 0
        pos = h * w
        cin = self.channels
        mid = self.params["dec_in.weight"].shape[0]
        s2 = self.stride * self.stride
        return pos * 9 * (mid * cin + mid * mid + (3 * s2) * mid)


def analytic_codec(s: int) -> Codec:
    """Lossless space-to-depth codec: encode (3,H,W) -> (3s², H/s, W/s)."""
    if s not in (2, 4, 8):
        raise ValueError(f"analytic_codec: stride must be in {{2,4,8}}, got {s}")
    return Codec("analytic", s, 3 * s * s)


# ---------------------------------------------------------------------------
# Learned toy codec
# ---------------------------------------------------------------------------

def _codec_params(rng, s: int, c: int, mid: int) -> dict[str, Tensor]:
    def w(shape):
        std = math.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
        return Tensor((rng.normal(0.0, std, size=shape)).astype(np.float32),
                      requires_grad=True)

    def b(n):
        return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

    params: dict[str, Tensor] = {}
    depth = 3 * s * s
    params["enc_in.weight"] = w((mid, depth, 3, 3))
    params["enc_in.bias"] = b(mid)
    params["enc_mid.weight"] = w((mid, mid, 3, 3))
    params["enc_mid.bias"] = b(mid)
    params["enc_out.weight"] = w((c, mid, 3, 3))
    params["enc_out.bias"] = b(c)
    params["dec_in.weight"] = w((mid, c, 3, 3))
    params["dec_in.bias"] = b(mid)
    params["dec_mid.weight"] = w((mid, mid, 3, 3))
    params["dec_mid.bias"] = b(mid)
    params["dec_out.weight"] = w((3 * s * s, mid, 3, 3))
    params["dec_out.bias"] = b(3 * s * s)
    return params


def train_toy_codec(corpus: np.ndarray, s: int, c: int, steps: int = 4500,
                    seed: int = 0, mid: int = 40, lr: float = 2.5e-3,
                    batch: int = 8, psnr_gate: float = 28.0) -> Codec:
    """Train a small reconstruction codec on the corpus, then freeze it.

    Held-out PSNR must reach `psnr_gate` (dB) or a CodecTrainingError is
    raised; silent degradation is never accepted.  The defaults reach
    ~29 dB on a 256-image corpus in a few CPU minutes.
    """
    if c < 1:
        raise ValueError(f"latent channels must be ≥ 1, got {c}")
    corpus = np.asarray(corpus, dtype=np.float32)
    if corpus.ndim != 4 or corpus.shape[0] == 0:
        raise ValueError("corpus must be a non-empty (N,3,H,W) stack")
    if s not in (2, 4, 8):
        raise ValueError(f"stride must be in {{2,4,8}}, got {s}")

    n_hold = max(2, corpus.shape[0] // 10)
    train_set, holdout = corpus[:-n_hold], corpus[-n_hold:]
    rng = np.random.default_rng(seed)
    codec = Codec("learned", s, c, _codec_params(rng, s, c, mid), seed=seed)
    codec.frozen = False

    params = [p for _, p in codec.named_params()]
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8

    for step in range(steps):
        lr_t = lr * 0.5 ** ((step > steps * 0.5) + (step > steps * 0.75)
                            + (step > steps * 0.9))
        idx = rng.integers(0, train_set.shape[0], size=batch)
        x = Tensor(train_set[idx])
        z = codec._encode_t(x)
        recon = codec._decode_t(z)
        diff = sub(recon, x)
        # tiny latent-scale penalty: the normalized decoder entry leaves the
        # encoder's output scale unconstrained, which makes its inputs
        # nonstationary and training slow; this anchors the scale near 1
        loss = mean(mul(diff, diff)) + mul(mean(mul(z, z)), 1e-3)
        if not np.isfinite(loss.item()):
            raise CodecTrainingError(f"non-finite codec loss at step {step}")
        for p in params:
            p.zero_grad()
        from luasr.tensor import backward
        backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in params]
        # global-norm clip keeps rare loss spikes from wrecking the moments
        gnorm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        if gnorm > 1.0:
            grads = [g * (1.0 / gnorm) for g in grads]
        t = step + 1
        for i, (p, g) in enumerate(zip(params, grads)):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p.data -= (lr_t * mh / (np.sqrt(vh) + eps)).astype(np.float32)

    codec.freeze()
    scores = [_psnr(codec.decode_array(codec.encode(img)), img) for img in holdout]
    held_psnr = float(np.mean(scores))
    if held_psnr < psnr_gate:
        raise CodecTrainingError(
            f"held-out reconstruction {held_psnr:.2f} dB below the {psnr_gate} dB gate "
            f"after {steps} steps")
    codec.holdout_psnr = held_psnr
    return codec


# ---------------------------------------------------------------------------
# Procedural corpus
# ---------------------------------------------------------------------------

def _band_limited_noise(rng, size, cutoff):
    """White noise low-passed at `cutoff` cycles/sample via the spectrum."""
    noise = rng.normal(size=(size, size))
    f = np.fft.fftfreq(size)
    fr = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    spec = np.fft.fft2(noise) * (fr <= cutoff)
    out = np.fft.ifft2(spec).real
    scale = max(np.abs(out).max(), 1e-9)
    return out / scale


def _checkerboard(rng, size):
    period = int(rng.choice([2, 4, 8]))
    px, py = rng.integers(0, period, size=2)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ((((ii + px) // (period // 2 or 1)) + ((jj + py) // (period // 2 or 1))) % 2
            ).astype(np.float64)


def _polygon_mask(rng, size, supersample=2):
    """Anti-aliased convex polygon coverage via supersampled half-planes."""
    n_vert = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vert))
    radius = rng.uniform(0.2, 0.45) * size
    cx, cy = rng.uniform(0.3 * size, 0.7 * size, size=2)
    vx = cx + radius * np.cos(angles)
    vy = cy + radius * np.sin(angles)
    ss = size * supersample
    ii, jj = np.meshgrid((np.arange(ss) + 0.5) / supersample,
                         (np.arange(ss) + 0.5) / supersample, indexing="ij")
    inside = np.ones((ss, ss), dtype=bool)
    for k in range(n_vert):
        x1, y1 = vx[k], vy[k]
        x2, y2 = vx[(k + 1) % n_vert], vy[(k + 1) % n_vert]
        inside &= ((x2 - x1) * (jj - y1) - (y2 - y1) * (ii - x1)) <= 0
    cov = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return cov


def _gradient_field(rng, size):
    gx, gy = rng.normal(size=2)
    ii, jj = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    g = gx * ii + gy * jj
    lo, hi = g.min(), g.max()
    return (g - lo) / max(hi - lo, 1e-9)


def gen_corpus(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic procedural RGB corpus, (n,3,size,size) in [0,1].

    Images blend smooth gradients, anti-aliased polygons, checkerboards at
    random phase/frequency, and band-limited noise; values are quantized
    to 8-bit levels so the PPM round trip is lossless.
    """
    if size < 64 or size & (size - 1):
        raise ValueError(f"size must be a power of two ≥ 64, got {size}")
    if n == 0:
        return np.zeros((0, 3, size, size), dtype=np.float32)
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    root = np.random.SeedSequence(seed)
    for i, ss in enumerate(root.spawn(n)):
        rng = np.random.default_rng(ss)
        base_colors = rng.uniform(0.1, 0.9, size=(3, 1, 1))
        grad = _gradient_field(rng, size)
        img = base_colors * (0.4 + 0.6 * grad[None])
        if rng.uniform() < 0.85:
            poly = _polygon_mask(rng, size)
            color = rng.uniform(0, 1, size=(3, 1, 1))
            img = img * (1 - poly[None]) + color * poly[None]
        if rng.uniform() < 0.85:
            check = _checkerboard(rng, size)
            amp = rng.uniform(0.15, 0.4)
            color = rng.uniform(0, 1, size=(3, 1, 1))
            img = img * (1 - amp) + color * amp * check[None]
        cutoff = rng.uniform(0.12, 0.4)
        noise = _band_limited_noise(rng, size, cutoff)
        img = img + rng.uniform(0.02, 0.06) * noise[None]
        img = np.clip(img, 0.0, 1.0)
        images[i] = np.round(img * 255.0) / 255.0
    return images


def high_frequency_energy_fraction(image: np.ndarray) -> float:
    """Fraction of non-DC spectral energy above half the Nyquist frequency."""
    lum = image.mean(axis=0)
    spec = np.abs(np.fft.fft2(lum)) ** 2
    f = np.fft.fftfreq(lum.shape[0])
    fr = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    total = spec.sum() - spec[0, 0]
    if total <= 0:
        return 0.0
    return float(spec[fr > 0.25].sum() / total)


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------

@dataclass
class PairSet:
    """Aligned (LR latent, HR latent, HR image) triples for one scale."""
    z_lr: np.ndarray          # (N, C, h, w)
    z_hr: np.ndarray          # (N, C, αh, αw)
    x_hr: np.ndarray          # (N, 3, sαh, sαw)
    alpha: int
    seed: int
    codec_id: str
    stride: int
    latent_lo: float = field(default=0.0)
    latent_hi: float = field(default=0.0)

    def __len__(self):
        return self.z_lr.shape[0]

    def record(self, i: int):
        return (LatentGrid(self.z_lr[i], self.codec_id, self.stride),
                LatentGrid(self.z_hr[i], self.codec_id, self.stride),
                self.x_hr[i])

    def validate(self):
        n, _, h, w = self.z_lr.shape
        if self.z_hr.shape != (n, self.z_lr.shape[1], self.alpha * h, self.alpha * w):
            raise ShapeError("PairSet: z_hr extents must be α × z_lr extents")
        if self.x_hr.shape != (n, 3, self.stride * self.z_hr.shape[2],
                               self.stride * self.z_hr.shape[3]):
            raise ShapeError("PairSet: x_hr extents must be s × z_hr extents")


def apply_channel_anisotropy(codec: Codec, spread: float, seed: int = 0) -> np.ndarray:
    """Rescale latent channels by shuffled log-spaced gains 2^[-spread, spread],
    compensating in the decoder's first convolution.

    Reconstruction is numerically unchanged (the first decoder layer is
    linear in the latent); only the latent geometry becomes anisotropic,
    mirroring the uneven channel scales of real VAE latent spaces.
    """
    if codec.kind != "learned":
        raise ValueError("channel anisotropy applies to the learned codec only")
    gains = np.logspace(-spread, spread, codec.channels, base=2.0).astype(np.float32)
    np.random.default_rng(seed).shuffle(gains)
    codec.params["enc_out.weight"].data *= gains[:, None, None, None]
    codec.params["enc_out.bias"].data *= gains
    codec.params["dec_in.weight"].data /= gains[None, :, None, None]
    codec.channel_gains = gains
    return gains


def save_pairs(pairs: PairSet, out_dir) -> None:
    """Persist a PairSet: latents as f32 blobs, HR images as PPM, one manifest."""
    import json
    from pathlib import Path
    from luasr.io_formats import write_latent_blob, write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_latent_blob(out / "z_lr", pairs.z_lr, seed=pairs.seed)
    write_latent_blob(out / "z_hr", pairs.z_hr, seed=pairs.seed)
    for i in range(len(pairs)):
        write_ppm(out / f"x_hr_{i:05d}.ppm", pairs.x_hr[i])
    manifest = {"alpha": pairs.alpha, "seed": pairs.seed, "codec_id": pairs.codec_id,
                "stride": pairs.stride, "count": len(pairs),
                "latent_lo": pairs.latent_lo, "latent_hi": pairs.latent_hi}
    with open(out / "pairs.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def load_pairs(in_dir) -> PairSet:
    import json
    from pathlib import Path
    from luasr.io_formats import read_latent_blob, read_ppm

    src = Path(in_dir)
    with open(src / "pairs.json") as f:
        manifest = json.load(f)
    z_lr, _ = read_latent_blob(src / "z_lr")
    z_hr, _ = read_latent_blob(src / "z_hr")
    x_hr = np.stack([read_ppm(src / f"x_hr_{i:05d}.ppm")
                     for i in range(manifest["count"])])
    pairs = PairSet(z_lr=z_lr, z_hr=z_hr, x_hr=x_hr, alpha=manifest["alpha"],
                    seed=manifest["seed"], codec_id=manifest["codec_id"],
                    stride=manifest["stride"], latent_lo=manifest["latent_lo"],
                    latent_hi=manifest["latent_hi"])
    pairs.validate()
    return pairs


def save_codec(codec: Codec, path_base) -> None:
    """Persist a codec as a weight file plus a JSON meta sidecar."""
    import json
    from pathlib import Path
    from luasr.io_formats import save_weights

    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    meta = {"kind": codec.kind, "stride": codec.stride, "channels": codec.channels,
            "seed": codec.seed}
    if hasattr(codec, "holdout_psnr"):
        meta["holdout_psnr"] = codec.holdout_psnr
    with open(base.with_suffix(".json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")
    if codec.kind == "learned":
        save_weights(base.with_suffix(".lua1"),
                     [(n, p.numpy()) for n, p in codec.named_params()])


def load_codec(path_base) -> Codec:
    import json
    from pathlib import Path
    from luasr.io_formats import load_weights

    base = Path(path_base)
    with open(base.with_suffix(".json")) as f:
        meta = json.load(f)
    if meta["kind"] == "analytic":
        return analytic_codec(meta["stride"])
    arrays = load_weights(base.with_suffix(".lua1"))
    params = {n: Tensor(a) for n, a in arrays.items()}
    codec = Codec("learned", meta["stride"], meta["channels"], params,
                  seed=meta["seed"])
    codec.freeze()
    if "holdout_psnr" in meta:
        codec.holdout_psnr = meta["holdout_psnr"]
    return codec


def make_pairs(corpus: np.ndarray, codec: Codec, alpha: int, seed: int = 0) -> PairSet:
    """Encode bicubic HR/LR pairs: z_hr = E(x_hr), z_lr = E(↓α(x_hr))."""
    if alpha not in (2, 4):
        raise ValueError(f"alpha must be 2 or 4, got {alpha}")
    corpus = np.asarray(corpus, dtype=np.float32)
    size_h, size_w = corpus.shape[-2], corpus.shape[-1]
    if size_h % (codec.stride * alpha) or size_w % (codec.stride * alpha):
        raise ShapeError(
            f"image extents {(size_h, size_w)} not divisible by s·α = {codec.stride * alpha}")
    with no_grad():
        x_lr = sig.bicubic_resize(Tensor(corpus), 1.0 / alpha).numpy()
    z_hr = codec.encode(corpus)
    z_lr = codec.encode(x_lr)
    lo, hi = np.percentile(z_hr, [1.0, 99.0])
    pairs = PairSet(z_lr=z_lr, z_hr=z_hr, x_hr=corpus, alpha=alpha, seed=seed,
                    codec_id=codec.codec_id, stride=codec.stride,
                    latent_lo=float(lo), latent_hi=float(hi))
    pairs.validate()
    return pairs
