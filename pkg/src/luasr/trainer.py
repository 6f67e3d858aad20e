"""Three-stage curriculum runner.

Optimization follows the reference recipe: Adam (lr 2e-4, weight decay 0,
eps 1e-8) with betas (0.9, 0.995) for Stages I-II and (0.9, 0.99) for
Stage III, global L2-norm gradient clipping at 0.4, per-stage MultiStep
lr decay (milestones at 50/75/90% of the stage, factor 0.5), an optional
short linear warm-up for Stage III, and a 0.999 parameter EMA that spans
the whole curriculum and is used for evaluation.

Multi-scale protocol: during the first `joint_frac` of each stage both
heads are supervised every iteration; in the remaining steps one head is
chosen uniformly per iteration.  Batch indices and head choices derive
statelessly from (run_seed, global_step), so ablation configurations with
the same seed consume identical data batches and checkpoint resume is
bit-exact.

Pixel-domain targets are the decoded references D(z_hr), cached per pair
set.  Every step monitors the predicted latent range against the encoder
percentiles recorded in the pair set; an excursion beyond 3× that band
(or a non-finite loss) aborts with a latent-drift diagnostic.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from luasr.codec import Codec, PairSet
from luasr.io_formats import load_weights, save_weights
from luasr.losses import (
    StageWeights, TERM_NAMES, precompute_targets, stage_loss_cached,
    stage_weights,
)
from luasr.model import LuaModel, ModelConfig, build
from luasr.tensor import Tensor, backward, mul, no_grad

ADAM_EPS = 1e-8


class LatentDriftError(RuntimeError):
    """Latent activations left the calibrated range (or loss went non-finite)."""

    def __init__(self, message: str, step: int, stats: dict):
        super().__init__(message)
        self.step = step
        self.stats = stats


@dataclass(frozen=True)
class HeadPolicy:
    """Joint supervision for the first fraction of steps, then one head
    sampled uniformly per iteration."""
    joint_frac: float = 0.6

    def heads_for(self, step: int, steps: int, scales, rng) -> tuple[int, ...]:
        if step < self.joint_frac * steps or len(scales) == 1:
            return tuple(scales)
        return (int(rng.choice(scales)),)


@dataclass(frozen=True)
class StageConfig:
    stage: str
    steps: int
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.995)
    weight_decay: float = 0.0
    ema_decay: float = 0.999
    clip_norm: float = 0.4
    milestones: tuple[float, ...] = (0.5, 0.75, 0.9)
    gamma: float = 0.5
    batch: int = 8
    micro_batch: int | None = None
    warmup_frac: float = 0.0
    weights: StageWeights | None = None
    ds_factor: int | None = None  # None: match the active scale head

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be ≥ 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        ms = self.milestones
        if any(not 0 < m < 1 for m in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing in (0, 1)")
        if self.weights is None:
            object.__setattr__(self, "weights", stage_weights(self.stage))
        if self.weights.stage != self.stage:
            raise ValueError(f"weights are for stage {self.weights.stage}, config says {self.stage}")

    @property
    def effective_micro(self) -> int:
        micro = self.micro_batch or self.batch
        if self.batch % micro:
            raise ValueError(f"batch {self.batch} not divisible by micro_batch {micro}")
        return micro


def default_stage_configs(steps=(2000, 1500, 1500), batches=(64, 8, 8),
                          lr: float = 2e-4) -> list[StageConfig]:
    """The desk-scale curriculum: per-stage budgets with reference ratios."""
    return [
        StageConfig("I", steps=steps[0], lr=lr, betas=(0.9, 0.995), batch=batches[0]),
        StageConfig("II", steps=steps[1], lr=lr, betas=(0.9, 0.995), batch=batches[1]),
        StageConfig("III", steps=steps[2], lr=lr, betas=(0.9, 0.99), batch=batches[2],
                    warmup_frac=0.02),
    ]


# ---------------------------------------------------------------------------
# Optimizer pieces
# ---------------------------------------------------------------------------

def lr_at(step: int, cfg: StageConfig) -> float:
    """Stage lr: optional linear warm-up, then gamma^(passed milestones)."""
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    warm = int(round(cfg.warmup_frac * cfg.steps))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    passed = sum(step >= int(m * cfg.steps) for m in cfg.milestones)
    return cfg.lr * cfg.gamma ** passed


def clip_global_norm(grads: dict[str, np.ndarray],
                     max_norm: float = 0.4) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm/‖g‖₂ when the global norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for g in grads.values():
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = {n: g * np.float32(scale) for n, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, named_params) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in named_params},
                   v={n: np.zeros_like(p.data) for n, p in named_params})


def adam_step(named_params, grads: dict[str, np.ndarray], opt: AdamState,
              lr_t: float, betas: tuple[float, float]) -> None:
    """One bias-corrected Adam update (weight decay 0, eps 1e-8) in place.

    Non-finite gradients abort the step with a LatentDriftError.
    """
    for n, g in grads.items():
        if not np.isfinite(g).all():
            raise LatentDriftError(f"non-finite gradient in {n}", opt.t,
                                   {"param": n})
    opt.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for n, p in named_params:
        g = grads.get(n)
        if g is None:
            g = np.zeros_like(p.data)
        m = opt.m[n]
        v = opt.v[n]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr_t * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.data.dtype)


def ema_update(ema: dict[str, np.ndarray], named_params, decay: float = 0.999) -> None:
    """ema ← decay·ema + (1−decay)·params, in place."""
    for n, p in named_params:
        ema[n] *= decay
        ema[n] += (1.0 - decay) * p.data


# ---------------------------------------------------------------------------
# Parameter plumbing
# ---------------------------------------------------------------------------

def named_arrays(model: LuaModel) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_params()}


def set_named_arrays(model: LuaModel, arrays: dict[str, np.ndarray]) -> None:
    for n, p in model.named_params():
        src = arrays[n]
        if src.shape != p.data.shape:
            raise ValueError(f"{n}: shape {src.shape} does not match {p.data.shape}")
        p.data = src.astype(p.data.dtype).copy()


def clone_model(model: LuaModel, arrays: dict[str, np.ndarray] | None = None) -> LuaModel:
    """Independent copy of a model (optionally with substitute weights)."""
    fresh = build(model.config, seed=0)
    set_named_arrays(fresh, arrays if arrays is not None else named_arrays(model))
    return fresh


class use_params:
    """Temporarily run a model with substitute parameters (e.g. the EMA)."""

    def __init__(self, model: LuaModel, arrays: dict[str, np.ndarray]):
        self.model = model
        self.arrays = arrays

    def __enter__(self):
        self.saved = named_arrays(self.model)
        set_named_arrays(self.model, self.arrays)
        return self.model

    def __exit__(self, *exc):
        set_named_arrays(self.model, self.saved)
        return False


# ---------------------------------------------------------------------------
# Train state and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    run_seed: int
    global_step: int = 0
    stages_done: int = 0
    opt: AdamState | None = None
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    log_rows: list[dict] = field(default_factory=list)
    aborted: LatentDriftError | None = None

    def save_checkpoint(self, model: LuaModel, path) -> None:
        entries = [(f"param/{n}", p.data) for n, p in model.named_params()]
        entries += [(f"ema/{n}", a.astype(np.float32)) for n, a in sorted(self.ema.items())]
        save_weights(path, entries)
        meta = {"run_seed": self.run_seed, "global_step": self.global_step,
                "stages_done": self.stages_done}
        with open(Path(path).with_suffix(".json"), "w") as f:
            json.dump(meta, f, sort_keys=True, indent=1)
            f.write("\n")

    @classmethod
    def load_checkpoint(cls, model: LuaModel, path) -> "TrainState":
        arrays = load_weights(path)
        params = {n[len("param/"):]: a for n, a in arrays.items() if n.startswith("param/")}
        ema = {n[len("ema/"):]: a for n, a in arrays.items() if n.startswith("ema/")}
        set_named_arrays(model, params)
        with open(Path(path).with_suffix(".json")) as f:
            meta = json.load(f)
        return cls(run_seed=meta["run_seed"], global_step=meta["global_step"],
                   stages_done=meta["stages_done"], ema=ema)


_LOG_FIELDS = (["step", "stage", "lr", "heads", "batch_crc", "loss"]
               + [f"raw_{t}" for t in TERM_NAMES] + [f"w_{t}" for t in TERM_NAMES]
               + ["grad_norm_pre", "grad_norm_post", "z_min", "z_max"])


def _write_log(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(",".join(_LOG_FIELDS) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(k, "")) for k in _LOG_FIELDS) + "\n")


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------

def _stage_targets(pairs: PairSet, codec: Codec | None, stage: str) -> dict:
    """Cache the stage's reference-side constants on the pair set.

    The pixel-domain reference is the original HR image from the pair set
    (decoding the HR latent instead would cap the pixel stages at the
    codec's own reconstruction and collapse their objective into the
    latent one's optimum).
    """
    store = getattr(pairs, "_target_cache", None)
    if store is None:
        store = {}
        pairs._target_cache = store
    if stage not in store:
        x_ref = pairs.x_hr if stage in ("II", "III") else None
        store[stage] = precompute_targets(pairs.z_hr, x_ref, stage)
    return store[stage]


def _drift_band(pairs_by_scale) -> tuple[float, float]:
    los = [p.latent_lo for p in pairs_by_scale.values()]
    his = [p.latent_hi for p in pairs_by_scale.values()]
    lo, hi = min(los), max(his)
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    return mid - 3.0 * half, mid + 3.0 * half


def run_stage(model: LuaModel, codec: Codec, pairs_by_scale: dict[int, PairSet],
              cfg: StageConfig, policy: HeadPolicy = HeadPolicy(),
              state: TrainState | None = None) -> TrainState:
    """Train one curriculum stage in place on `model`.

    pairs_by_scale maps each supported scale α to its PairSet (records are
    index-aligned across scales so joint iterations share HR targets).
    Raises LatentDriftError when the diagnostic trips; the partially
    updated state is attached to the exception as `.state`.
    """
    if state is None:
        state = TrainState(run_seed=0)
    if not state.ema:
        state.ema = named_arrays(model)
    scales = tuple(sorted(pairs_by_scale))
    for a in scales:
        if a not in model.config.scales:
            raise ValueError(f"pairs provided for scale {a} not in model scales")
    if codec is not None and not codec.frozen:
        raise ValueError("codec must be frozen during upscaler training")

    needs_pixels = cfg.stage in ("II", "III")
    n_records = len(pairs_by_scale[scales[0]])
    params = list(model.named_params())
    opt = AdamState.init(params)
    state.opt = opt
    lo_band, hi_band = _drift_band(pairs_by_scale)
    micro = cfg.effective_micro
    n_micro = cfg.batch // micro

    codec_before = ([(n, p.data.copy()) for n, p in codec.named_params()]
                    if codec is not None else [])

    for step in range(cfg.steps):
        rng = np.random.default_rng(np.random.SeedSequence(
            (state.run_seed, state.global_step)))
        idx = rng.integers(0, n_records, size=cfg.batch)
        heads = policy.heads_for(step, cfg.steps, scales, rng)
        lr_t = lr_at(step, cfg)

        grads: dict[str, np.ndarray] = {}
        raw_acc = {t: 0.0 for t in TERM_NAMES}
        w_acc = {t: 0.0 for t in TERM_NAMES}
        loss_acc = 0.0
        z_min, z_max = np.inf, -np.inf

        for mb in range(n_micro):
            sel = idx[mb * micro:(mb + 1) * micro]
            total = None
            for alpha in heads:
                pairs = pairs_by_scale[alpha]
                targets = _stage_targets(pairs, codec, cfg.stage)
                z_lr = Tensor(pairs.z_lr[sel])
                z_hat = model.upscale(z_lr, alpha)
                z_min = min(z_min, float(z_hat.data.min()))
                z_max = max(z_max, float(z_hat.data.max()))
                x_hat = x_ref = None
                if needs_pixels:
                    x_hat = codec.decode(z_hat)
                    x_ref = pairs.x_hr
                d = cfg.ds_factor if cfg.ds_factor is not None else alpha
                breakdown = stage_loss_cached(cfg.weights, targets, sel,
                                              z_hat=z_hat, x_hat=x_hat,
                                              x_ref=x_ref, d=d)
                for t in TERM_NAMES:
                    raw_acc[t] += breakdown.raw.get(t, 0.0) / (len(heads) * n_micro)
                    w_acc[t] += breakdown.weighted.get(t, 0.0) / (len(heads) * n_micro)
                contrib = mul(breakdown.total, 1.0 / (len(heads) * n_micro))
                total = contrib if total is None else total + contrib
            loss_val = total.item()
            loss_acc += loss_val
            if not np.isfinite(loss_val):
                err = LatentDriftError(
                    f"non-finite loss at step {state.global_step}",
                    state.global_step,
                    {"loss": loss_val, "z_min": z_min, "z_max": z_max,
                     "band": (lo_band, hi_band)})
                state.aborted = err
                err.state = state
                raise err
            for _, p in params:
                p.zero_grad()
            backward(total)
            for n, p in params:
                if p.grad is not None:
                    grads[n] = grads.get(n, 0.0) + p.grad

        if z_min < lo_band or z_max > hi_band:
            err = LatentDriftError(
                f"latent drift at step {state.global_step}: "
                f"range [{z_min:.3g}, {z_max:.3g}] outside 3× band "
                f"[{lo_band:.3g}, {hi_band:.3g}]",
                state.global_step,
                {"z_min": z_min, "z_max": z_max, "band": (lo_band, hi_band)})
            state.aborted = err
            err.state = state
            raise err

        grads, pre_norm = clip_global_norm(grads, cfg.clip_norm)
        post_norm = min(pre_norm, cfg.clip_norm)
        adam_step(params, grads, opt, lr_t, cfg.betas)
        ema_update(state.ema, params, cfg.ema_decay)

        row = {"step": state.global_step, "stage": cfg.stage, "lr": lr_t,
               "heads": "+".join(str(a) for a in heads),
               "batch_crc": zlib.crc32(idx.astype(np.int64).tobytes()),
               "loss": loss_acc,
               "grad_norm_pre": pre_norm, "grad_norm_post": post_norm,
               "z_min": z_min, "z_max": z_max}
        row.update({f"raw_{t}": raw_acc[t] for t in TERM_NAMES})
        row.update({f"w_{t}": w_acc[t] for t in TERM_NAMES})
        state.log_rows.append(row)
        state.global_step += 1

    for n, before in codec_before:
        now = dict(codec.named_params())[n].data
        if not np.array_equal(before, now):
            raise RuntimeError(f"frozen codec parameter {n} changed during training")

    state.stages_done += 1
    return state


def run_curriculum(model: LuaModel, codec: Codec,
                   pairs_by_scale: dict[int, PairSet],
                   cfgs: list[StageConfig], run_seed: int = 0,
                   out_dir=None, policy: HeadPolicy = HeadPolicy(),
                   resume_from=None) -> TrainState:
    """Run stages sequentially on shared parameters.

    Per-stage checkpoints (params + EMA) are persisted under out_dir; a
    resume from a stage-boundary checkpoint reproduces the uninterrupted
    run bit-exactly because batch streams depend only on (run_seed,
    global_step) and optimizer state is per-stage.
    """
    order = [c.stage for c in cfgs]
    if order != sorted(order, key=("I", "II", "III").index):
        raise ValueError(f"stages must be ordered I, II, III; got {order}")
    if resume_from is not None:
        state = TrainState.load_checkpoint(model, resume_from)
    else:
        state = TrainState(run_seed=run_seed)
        state.ema = named_arrays(model)

    out = Path(out_dir) if out_dir is not None else None
    for i, cfg in enumerate(cfgs):
        if i < state.stages_done:
            continue
        try:
            state = run_stage(model, codec, pairs_by_scale, cfg, policy, state)
        finally:
            if out is not None:
                _write_log(state.log_rows, out / "train_log.csv")
        if out is not None:
            state.save_checkpoint(model, out / f"stage{i + 1}.lua1")
    return state
