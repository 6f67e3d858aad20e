"""Metrics, the efficiency benchmark, and the ablation suites.

PSNR is computed against the original HR images (the pixel-domain loss
targets during training are decoded references; evaluation uses ground
truth).  Perceptual-network metrics are out of reach here, so sharpness
and noise are tracked by spectral distance (mean |Δ spectrum magnitude|)
and Laplacian-variance means.  Evaluations run on EMA weights.

Wall-clock protocol: median over `runs` timed passes after `warmup`
untimed ones, single process.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from luasr import signal_ops as sig
from luasr.codec import Codec, PairSet
from luasr.model import LuaModel, ModelConfig, build, swap_input_adapter
from luasr.tensor import ShapeError, Tensor, no_grad
from luasr.trainer import (
    HeadPolicy, StageConfig, TrainState, LatentDriftError, clone_model,
    run_curriculum, run_stage, use_params,
)

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10·log10(peak²/MSE), capped at 99 dB (identical images hit the cap)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


def spectral_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference of spectrum magnitudes (power-of-two extents)."""
    with no_grad():
        ma = sig.fft2_mag(Tensor(np.asarray(a, dtype=np.float32)))
        mb = sig.fft2_mag(Tensor(np.asarray(b, dtype=np.float32)))
    return float(np.mean(np.abs(ma.numpy().astype(np.float64)
                                - mb.numpy().astype(np.float64))))


def laplacian_variance_mean(image: np.ndarray, patch: int = 8) -> float:
    """Noise proxy of an RGB image: Laplacian-variance mean of its luminance."""
    lum = (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2])[None]
    _, vmean = sig.laplacian_variance_map(lum, patch)
    return vmean


@dataclass
class EvalReport:
    per_image_psnr: list[float]
    per_image_spectral: list[float]
    per_image_lapvar: list[float]
    timings: dict[str, float] = field(default_factory=dict)
    macs: dict[str, int] = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_image_psnr))

    @property
    def mean_spectral(self) -> float:
        return float(np.mean(self.per_image_spectral))

    @property
    def mean_lapvar(self) -> float:
        return float(np.mean(self.per_image_lapvar))


def evaluate_model(model: LuaModel, codec: Codec, pairs: PairSet,
                   params: dict | None = None) -> EvalReport:
    """Decode model upscales of every LR latent and score against the
    original HR images.  `params` substitutes weights (e.g. the EMA)."""
    def run() -> EvalReport:
        ps, sd, lv = [], [], []
        with no_grad():
            z_hat = model.upscale(Tensor(pairs.z_lr), pairs.alpha)
            x_hat = codec._decode_t(z_hat).numpy()
        for i in range(len(pairs)):
            ps.append(psnr(x_hat[i], pairs.x_hr[i]))
            sd.append(spectral_distance(x_hat[i], pairs.x_hr[i]))
            lv.append(laplacian_variance_mean(x_hat[i]))
        return EvalReport(ps, sd, lv)

    if params is not None:
        with use_params(model, params):
            return run()
    return run()


def bicubic_latent_baseline(codec: Codec, pairs: PairSet) -> EvalReport:
    """Decode bicubic-upsampled LR latents: the no-model reference point."""
    ps, sd, lv = [], [], []
    with no_grad():
        z_up = sig.bicubic_resize(Tensor(pairs.z_lr), float(pairs.alpha))
        x_up = codec._decode_t(z_up).numpy()
    for i in range(len(pairs)):
        ps.append(psnr(x_up[i], pairs.x_hr[i]))
        sd.append(spectral_distance(x_up[i], pairs.x_hr[i]))
        lv.append(laplacian_variance_mean(x_up[i]))
    return EvalReport(ps, sd, lv)


def latent_stats(arrays: np.ndarray) -> dict[str, list[float]]:
    """Per-channel mean/std dump for an (N,C,h,w) latent stack."""
    a = np.asarray(arrays, dtype=np.float64)
    return {"mean": a.mean(axis=(0, 2, 3)).tolist(),
            "std": a.std(axis=(0, 2, 3)).tolist()}


# ---------------------------------------------------------------------------
# Efficiency benchmark
# ---------------------------------------------------------------------------

def _median_time(fn, runs: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_cost(model: LuaModel, codec: Codec, pixel_sr_ref: LuaModel,
               sizes, alpha: int = 2, runs: int = 30, warmup: int = 5,
               seed: int = 0) -> list[dict]:
    """Latent-path vs pixel-path accounting and wall-clock at each size.

    Latent path: upscale the (C,h,w) latent, decode once at (αh, αw).
    Pixel path: decode at (h,w), then run the same backbone architecture
    (3-channel variant) over the (s·h, s·w) image.  The SR-stage position
    ratio is exactly s² by construction; MACs are exact per layer and the
    wall-clock is a median after warm-up.
    """
    s = codec.stride
    rng = np.random.default_rng(seed)
    rows = []
    for h, w in sizes:
        lat_cost = model.spatial_cost(h, w, alpha, s)
        pix_cost = pixel_sr_ref.spatial_cost(s * h, s * w, alpha, 1)
        row = {
            "h": h, "w": w, "alpha": alpha, "stride": s,
            "latent_positions": lat_cost.latent_positions,
            "pixel_positions": lat_cost.pixel_positions,
            "position_ratio": lat_cost.pixel_positions // lat_cost.latent_positions,
            "latent_sr_macs": lat_cost.macs_total,
            "latent_decode_macs": codec.macs_decode(alpha * h, alpha * w),
            "pixel_sr_macs": pix_cost.macs_total,
            "pixel_decode_macs": codec.macs_decode(h, w),
        }
        row["latent_path_macs"] = row["latent_sr_macs"] + row["latent_decode_macs"]
        row["pixel_path_macs"] = row["pixel_sr_macs"] + row["pixel_decode_macs"]

        z = Tensor(rng.normal(size=(codec.channels, h, w)).astype(np.float32))

        def latent_path():
            with no_grad():
                codec._decode_t(model.upscale(z, alpha))

        def pixel_path():
            with no_grad():
                x = codec._decode_t(z)
                pixel_sr_ref.upscale(x, alpha)

        row["latent_path_seconds"] = _median_time(latent_path, runs, warmup)
        row["pixel_path_seconds"] = _median_time(pixel_path, runs, warmup)
        rows.append(row)
    return rows


def pixel_sr_reference(model: LuaModel, seed: int = 0) -> LuaModel:
    """The same backbone configuration operating on RGB images."""
    cfg = ModelConfig(in_channels=3, embed_dim=model.config.embed_dim,
                      num_groups=model.config.num_groups,
                      blocks_per_group=model.config.blocks_per_group,
                      window=model.config.window, heads=model.config.heads,
                      scales=model.config.scales)
    return build(cfg, seed)


# ---------------------------------------------------------------------------
# Ablation suites
# ---------------------------------------------------------------------------

ABLATION_CONFIGS = ("latent_l1", "I+II", "I+III", "II+III", "full")


def _curriculum_for(config_name: str, budget: tuple[int, int, int],
                    batches: tuple[int, int, int]) -> list[StageConfig]:
    from luasr.losses import stage_weights

    s1, s2, s3 = budget
    b1, b2, b3 = batches
    stages = {
        "I": StageConfig("I", steps=s1, batch=b1, betas=(0.9, 0.995)),
        "II": StageConfig("II", steps=s2, batch=b2, betas=(0.9, 0.995)),
        "III": StageConfig("III", steps=s3, batch=b3, betas=(0.9, 0.99),
                           warmup_frac=0.02),
    }
    if config_name == "latent_l1":
        # pure latent-L1 baseline gets the whole step budget
        return [StageConfig("I", steps=s1 + s2 + s3, batch=b1,
                            betas=(0.9, 0.995),
                            weights=stage_weights("I", latent_fft=0.0))]
    if config_name == "full":
        return [stages["I"], stages["II"], stages["III"]]
    return [stages[p] for p in config_name.split("+")]


@dataclass
class AblationRun:
    config: str
    seed: int
    psnr_by_scale: dict[int, float]
    spectral_by_scale: dict[int, float]
    aborted: str | None = None
    batch_fingerprint: str = ""


def _batch_fingerprint(state: TrainState) -> str:
    import hashlib
    h = hashlib.sha256()
    for row in state.log_rows:
        h.update(f"{row['step']}:{row['heads']};".encode())
    return h.hexdigest()[:16]


def train_and_eval(model_cfg: ModelConfig, codec: Codec,
                   pairs_train: dict[int, PairSet], pairs_eval: dict[int, PairSet],
                   stage_cfgs: list[StageConfig], seed: int,
                   out_dir=None) -> tuple[TrainState | None, dict[int, EvalReport], LuaModel]:
    """One training run plus EMA evaluation at every scale."""
    model = build(model_cfg, seed)
    state = run_curriculum(model, codec, pairs_train, stage_cfgs,
                           run_seed=seed, out_dir=out_dir)
    reports = {a: evaluate_model(model, codec, pairs_eval[a], params=state.ema)
               for a in sorted(pairs_eval)}
    return state, reports, model


def ablation_curriculum(model_cfg: ModelConfig, codec: Codec,
                        pairs_train: dict[int, PairSet],
                        pairs_eval: dict[int, PairSet], seeds,
                        budget: tuple[int, int, int] = (1200, 900, 900),
                        batches: tuple[int, int, int] = (32, 8, 8)) -> list[AblationRun]:
    """Train every stage-ablation configuration per seed on identical data.

    Runs aborting on the latent-drift diagnostic are reported as aborted,
    never dropped.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    runs = []
    for seed in seeds:
        for config_name in ABLATION_CONFIGS:
            cfgs = _curriculum_for(config_name, budget, batches)
            try:
                state, reports, _ = train_and_eval(
                    model_cfg, codec, pairs_train, pairs_eval, cfgs, seed)
                runs.append(AblationRun(
                    config=config_name, seed=seed,
                    psnr_by_scale={a: r.mean_psnr for a, r in reports.items()},
                    spectral_by_scale={a: r.mean_spectral for a, r in reports.items()},
                    batch_fingerprint=_batch_fingerprint(state)))
            except LatentDriftError as err:
                runs.append(AblationRun(config=config_name, seed=seed,
                                        psnr_by_scale={}, spectral_by_scale={},
                                        aborted=str(err)))
    return runs


def summarize_ablation(runs: list[AblationRun]) -> dict[str, dict]:
    """Mean ± std PSNR / spectral distance per configuration and scale."""
    out: dict[str, dict] = {}
    for config_name in ABLATION_CONFIGS:
        rs = [r for r in runs if r.config == config_name]
        if not rs:
            continue
        ok = [r for r in rs if r.aborted is None]
        entry = {"aborted": len(rs) - len(ok), "runs": len(rs)}
        scales = sorted({a for r in ok for a in r.psnr_by_scale})
        for a in scales:
            vals = [r.psnr_by_scale[a] for r in ok]
            spec = [r.spectral_by_scale[a] for r in ok]
            entry[f"psnr_x{a}_mean"] = float(np.mean(vals))
            entry[f"psnr_x{a}_std"] = float(np.std(vals))
            entry[f"spectral_x{a}_mean"] = float(np.mean(spec))
        out[config_name] = entry
    return out


def ablation_multiscale(model_cfg: ModelConfig, codec: Codec,
                        pairs_train: dict[int, PairSet],
                        pairs_eval: dict[int, PairSet], seeds,
                        budget: tuple[int, int, int] = (1200, 900, 900),
                        batches: tuple[int, int, int] = (32, 8, 8),
                        joint_frac: float = 0.6) -> dict:
    """Joint multi-head model vs per-scale specialists.

    Per-head supervision is equalized: under the joint policy a head is
    supervised for joint_frac + (1-joint_frac)/2 of the steps in
    expectation, so specialists train for that fraction of the budget.
    """
    from dataclasses import replace as dc_replace

    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    head_frac = joint_frac + (1.0 - joint_frac) / 2.0
    spec_budget = tuple(max(1, int(round(head_frac * s))) for s in budget)

    results = {"joint": [], "sep2": [], "sep4": [],
               "per_head_steps": {"joint": tuple(int(round(head_frac * s)) for s in budget),
                                  "specialist": spec_budget}}
    params = {}
    for seed in seeds:
        cfgs = _curriculum_for("full", budget, batches)
        _, reports, joint_model = train_and_eval(
            model_cfg, codec, pairs_train, pairs_eval, cfgs, seed)
        results["joint"].append({a: r.mean_psnr for a, r in reports.items()})
        params["joint"] = joint_model.param_count()

        for alpha, key in ((2, "sep2"), (4, "sep4")):
            cfg_a = dc_replace(model_cfg, scales=(alpha,))
            cfgs_a = _curriculum_for("full", spec_budget, batches)
            _, reports_a, spec_model = train_and_eval(
                cfg_a, codec, {alpha: pairs_train[alpha]},
                {alpha: pairs_eval[alpha]}, cfgs_a, seed)
            results[key].append({alpha: reports_a[alpha].mean_psnr})
            params[key] = spec_model.param_count()
    results["param_counts"] = params
    return results


def adapter_transfer_eval(model_src: LuaModel, state_src: TrainState,
                          codec_b: Codec, pairs_b_train: dict[int, PairSet],
                          pairs_b_eval: dict[int, PairSet],
                          full_budget: tuple[int, int, int],
                          batches: tuple[int, int, int],
                          fine_tune_budget: int, seed: int) -> dict:
    """Swap the input adapter onto codec B, fine-tune briefly, and compare
    against a from-scratch model trained with the full budget.

    Gains are measured in dB above the bicubic-latent baseline.  The
    source backbone is verified bit-identical at swap time.
    """
    # swap from an independent clone carrying the source run's EMA weights
    src_ema = clone_model(model_src, state_src.ema)
    swapped = swap_input_adapter(src_ema, codec_b.channels, seed=seed)
    backbone_ok = all(
        np.array_equal(p.numpy(), q.numpy())
        for (_, p), (_, q) in zip(src_ema.backbone_named_params(),
                                  swapped.backbone_named_params()))

    ft_cfg = StageConfig("III", steps=fine_tune_budget, batch=batches[2],
                         betas=(0.9, 0.99), warmup_frac=0.02)
    state_ft = TrainState(run_seed=seed)
    state_ft = run_stage(swapped, codec_b, pairs_b_train, ft_cfg,
                         HeadPolicy(), state_ft)
    transfer_reports = {a: evaluate_model(swapped, codec_b, pairs_b_eval[a],
                                          params=state_ft.ema)
                        for a in sorted(pairs_b_eval)}

    cfg_scratch = ModelConfig(in_channels=codec_b.channels,
                              embed_dim=model_src.config.embed_dim,
                              num_groups=model_src.config.num_groups,
                              blocks_per_group=model_src.config.blocks_per_group,
                              window=model_src.config.window,
                              heads=model_src.config.heads,
                              scales=model_src.config.scales)
    cfgs_full = _curriculum_for("full", full_budget, batches)
    _, scratch_reports, _ = train_and_eval(cfg_scratch, codec_b, pairs_b_train,
                                           pairs_b_eval, cfgs_full, seed)

    out = {"backbone_bit_identical_at_swap": backbone_ok,
           "fine_tune_steps": fine_tune_budget,
           "full_budget_steps": sum(full_budget), "scales": {}}
    for a in sorted(pairs_b_eval):
        base = bicubic_latent_baseline(codec_b, pairs_b_eval[a]).mean_psnr
        t = transfer_reports[a].mean_psnr
        s = scratch_reports[a].mean_psnr
        out["scales"][a] = {
            "baseline_psnr": base, "transfer_psnr": t, "scratch_psnr": s,
            "transfer_gain": t - base, "scratch_gain": s - base,
            "gain_ratio": (t - base) / (s - base) if s > base else float("inf"),
        }
    return out
