"""Command-line entry point tying the modules into reproducible runs.

Commands: gen-data, train, upscale, eval, bench, ablate.  Configuration
is a plain-text sectioned key=value file; every key has a default (the
reference recipe's value where one exists, a documented desk-scale value
otherwise), so all commands run without a config file.  Each command
writes a resolved config snapshot into its output directory and exits
nonzero with a single-line `error: ...` on any failure.

LUA_THREADS caps numpy's internal parallelism (set before numpy loads).
"""

from __future__ import annotations

import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("LUA_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

import argparse
import json
import time
from pathlib import Path

import numpy as np

from luasr import codec as codec_mod
from luasr import eval_bench, io_formats
from luasr.model import LuaModel, ModelConfig, build
from luasr.losses import stage_weights
from luasr.trainer import (
    StageConfig, TrainState, LatentDriftError, run_curriculum, use_params,
)

DEFAULT_CONFIG: dict[str, dict[str, str]] = {
    "experiment": {"name": "desk", "seed": "0"},
    "codec": {"kind": "learned", "stride": "4", "channels": "8",
              "steps": "4500", "mid": "40", "psnr_gate": "28.0",
              "anisotropy": "0.0"},
    "model": {"embed_dim": "32", "num_groups": "2", "blocks_per_group": "2",
              "window": "4", "heads": "4", "scales": "2,4"},
    "data": {"corpus_n": "256", "corpus_size": "64", "eval_n": "50",
             "eval_seed": "777"},
    # reference optimizer values: lr 2e-4, betas (0.9,0.995)/(0.9,0.99),
    # clip 0.4, EMA 0.999, milestones 50/75/90% with gamma 0.5
    "stage.I": {"steps": "2000", "lr": "2e-4", "beta1": "0.9", "beta2": "0.995",
                "batch": "64", "clip_norm": "0.4", "ema_decay": "0.999",
                "gamma": "0.5", "milestones": "0.5,0.75,0.9",
                "warmup_frac": "0.0", "latent_l1": "1.0", "latent_fft": "0.1"},
    "stage.II": {"steps": "1500", "lr": "2e-4", "beta1": "0.9", "beta2": "0.995",
                 "batch": "8", "clip_norm": "0.4", "ema_decay": "0.999",
                 "gamma": "0.5", "milestones": "0.5,0.75,0.9",
                 "warmup_frac": "0.0", "latent_l1": "1.0", "latent_fft": "0.1",
                 "ds_consistency": "0.1", "hf_residual": "0.05"},
    "stage.III": {"steps": "1500", "lr": "2e-4", "beta1": "0.9", "beta2": "0.99",
                  "batch": "8", "clip_norm": "0.4", "ema_decay": "0.999",
                  "gamma": "0.5", "milestones": "0.5,0.75,0.9",
                  "warmup_frac": "0.02", "pixel_l1": "10.0", "pixel_fft": "1.0",
                  "eagle": "5e-5"},
    "train": {"joint_frac": "0.6"},
    "bench": {"sizes": "8,16,32", "alpha": "2", "runs": "30", "warmup": "5"},
    "ablate": {"budget": "1200,900,900", "batches": "32,8,8",
               "seeds": "0,1,2", "fine_tune_frac": "0.25",
               "transfer_channels": "16,4"},
}


class CliError(RuntimeError):
    pass


def load_config(path: str | None, seed: int | None = None) -> dict[str, dict[str, str]]:
    cfg = {s: dict(kv) for s, kv in DEFAULT_CONFIG.items()}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {path}")
        user = io_formats.parse_config_text(p.read_text())
        for section, kv in user.items():
            if section not in cfg:
                raise CliError(f"unknown config section [{section}]")
            for key, value in kv.items():
                if key not in cfg[section]:
                    raise CliError(f"unknown key {key!r} in [{section}]")
                cfg[section][key] = value
    if seed is not None:
        cfg["experiment"]["seed"] = str(seed)
    return cfg


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def model_config_from(cfg, in_channels: int | None = None) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(in_channels=(in_channels if in_channels is not None
                                    else int(cfg["codec"]["channels"])),
                       embed_dim=int(m["embed_dim"]),
                       num_groups=int(m["num_groups"]),
                       blocks_per_group=int(m["blocks_per_group"]),
                       window=int(m["window"]), heads=int(m["heads"]),
                       scales=_ints(m["scales"]))


def stage_config_from(cfg, stage: str, steps: int | None = None,
                      batch: int | None = None) -> StageConfig:
    s = cfg[f"stage.{stage}"]
    names = {"I": ("latent_l1", "latent_fft"),
             "II": ("latent_l1", "latent_fft", "ds_consistency", "hf_residual"),
             "III": ("pixel_l1", "pixel_fft", "eagle")}[stage]
    weights = stage_weights(stage, **{n: float(s[n]) for n in names})
    return StageConfig(stage, steps=steps if steps is not None else int(s["steps"]),
                       lr=float(s["lr"]), betas=(float(s["beta1"]), float(s["beta2"])),
                       ema_decay=float(s["ema_decay"]), clip_norm=float(s["clip_norm"]),
                       milestones=_floats(s["milestones"]), gamma=float(s["gamma"]),
                       batch=batch if batch is not None else int(s["batch"]),
                       warmup_frac=float(s["warmup_frac"]), weights=weights)


def write_snapshot(cfg, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(io_formats.format_config_text(cfg))


def build_codec(cfg, corpus) -> codec_mod.Codec:
    c = cfg["codec"]
    seed = int(cfg["experiment"]["seed"])
    if c["kind"] == "analytic":
        return codec_mod.analytic_codec(int(c["stride"]))
    if c["kind"] != "learned":
        raise CliError(f"unknown codec kind {c['kind']!r}")
    codec = codec_mod.train_toy_codec(
        corpus, s=int(c["stride"]), c=int(c["channels"]), steps=int(c["steps"]),
        seed=seed, mid=int(c["mid"]), psnr_gate=float(c["psnr_gate"]))
    spread = float(c["anisotropy"])
    if spread > 0:
        codec_mod.apply_channel_anisotropy(codec, spread, seed=seed)
    return codec


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    write_snapshot(cfg, out)
    d = cfg["data"]
    seed = int(cfg["experiment"]["seed"])
    corpus = codec_mod.gen_corpus(int(d["corpus_n"]), int(d["corpus_size"]), seed=seed)
    eval_corpus = codec_mod.gen_corpus(int(d["eval_n"]), int(d["corpus_size"]),
                                       seed=int(d["eval_seed"]))
    codec = build_codec(cfg, corpus)
    codec_mod.save_codec(codec, out / "codec")
    corpus_dir = out / "corpus"
    corpus_dir.mkdir(exist_ok=True)
    for i, img in enumerate(corpus):
        io_formats.write_ppm(corpus_dir / f"img_{i:05d}.ppm", img)
    for alpha in _ints(cfg["model"]["scales"]):
        codec_mod.save_pairs(codec_mod.make_pairs(corpus, codec, alpha, seed=seed),
                             out / f"pairs_x{alpha}")
        codec_mod.save_pairs(codec_mod.make_pairs(eval_corpus, codec, alpha,
                                                  seed=int(d["eval_seed"])),
                             out / f"eval_pairs_x{alpha}")
    print(f"gen-data: wrote corpus ({len(corpus)} images), codec, and pair sets to {out}")
    return 0


def _load_data(data_dir: Path, scales) -> tuple[codec_mod.Codec, dict, dict]:
    if not data_dir.exists():
        raise CliError(f"data directory not found: {data_dir} (run gen-data first)")
    codec = codec_mod.load_codec(data_dir / "codec")
    pairs = {a: codec_mod.load_pairs(data_dir / f"pairs_x{a}") for a in scales}
    eval_pairs = {a: codec_mod.load_pairs(data_dir / f"eval_pairs_x{a}") for a in scales}
    return codec, pairs, eval_pairs


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    write_snapshot(cfg, out)
    scales = _ints(cfg["model"]["scales"])
    codec, pairs, _ = _load_data(Path(args.data), scales)
    model = build(model_config_from(cfg, in_channels=codec.channels),
                  int(cfg["experiment"]["seed"]))
    cfgs = [stage_config_from(cfg, st) for st in ("I", "II", "III")]
    from luasr.trainer import HeadPolicy
    policy = HeadPolicy(joint_frac=float(cfg["train"]["joint_frac"]))
    state = run_curriculum(model, codec, pairs, cfgs,
                           run_seed=int(cfg["experiment"]["seed"]),
                           out_dir=out, policy=policy)
    model_meta = {"model": {k: v for k, v in cfg["model"].items()},
                  "in_channels": codec.channels, "codec_id": codec.codec_id}
    (out / "model.json").write_text(json.dumps(model_meta, sort_keys=True, indent=1) + "\n")
    print(f"train: {state.global_step} steps across {state.stages_done} stages -> {out}")
    return 0


def _model_from_run(run_dir: Path, checkpoint: str = "stage3.lua1"):
    meta = json.loads((run_dir / "model.json").read_text())
    m = meta["model"]
    mc = ModelConfig(in_channels=int(meta["in_channels"]),
                     embed_dim=int(m["embed_dim"]), num_groups=int(m["num_groups"]),
                     blocks_per_group=int(m["blocks_per_group"]),
                     window=int(m["window"]), heads=int(m["heads"]),
                     scales=_ints(m["scales"]))
    model = build(mc, seed=0)
    ck = run_dir / checkpoint
    if not ck.exists():
        ck = sorted(run_dir.glob("stage*.lua1"))[-1]
    state = TrainState.load_checkpoint(model, ck)
    return model, state


def cmd_upscale(args) -> int:
    run_dir = Path(args.weights)
    if not run_dir.exists():
        raise CliError(f"weights not found: {run_dir}")
    model, state = _model_from_run(run_dir)
    codec = codec_mod.load_codec(Path(args.codec))
    latent, manifest = io_formats.read_latent_blob(Path(args.latent))
    if latent.ndim != 3:
        raise CliError(f"expected a (C,h,w) latent, got shape {tuple(latent.shape)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from luasr.tensor import Tensor, no_grad
    with use_params(model, state.ema):
        with no_grad():
            z_up = model.upscale(Tensor(latent), args.scale).numpy()
            image = codec.decode_array(z_up)
    io_formats.write_latent_blob(out / "upscaled", z_up,
                                 extra={"scale": args.scale,
                                        "codec_id": codec.codec_id})
    io_formats.write_ppm(out / "upscaled.ppm", np.clip(image, 0.0, 1.0))
    print(f"upscale: ({','.join(map(str, latent.shape))}) -> "
          f"({','.join(map(str, z_up.shape))}) latent + {out / 'upscaled.ppm'}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.weights)
    model, state = _model_from_run(run_dir)
    pairs = codec_mod.load_pairs(Path(args.pairs))
    codec = codec_mod.load_codec(Path(args.codec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = eval_bench.evaluate_model(model, codec, pairs, params=state.ema)
    base = eval_bench.bicubic_latent_baseline(codec, pairs)
    rows = ["image,psnr,spectral,lapvar,baseline_psnr,baseline_lapvar"]
    for i in range(len(pairs)):
        rows.append(f"{i},{report.per_image_psnr[i]:.6f},{report.per_image_spectral[i]:.6f},"
                    f"{report.per_image_lapvar[i]:.8f},{base.per_image_psnr[i]:.6f},"
                    f"{base.per_image_lapvar[i]:.8f}")
    (out / "eval.csv").write_text("\n".join(rows) + "\n")
    stats = {"z_lr": eval_bench.latent_stats(pairs.z_lr),
             "z_hr": eval_bench.latent_stats(pairs.z_hr)}
    (out / "latent_stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    summary = (f"pairs x{pairs.alpha}: n={len(pairs)}\n"
               f"model : PSNR {report.mean_psnr:.3f} dB | spectral "
               f"{report.mean_spectral:.5f} | lap-var {report.mean_lapvar:.6f}\n"
               f"bicubic latent baseline: PSNR {base.mean_psnr:.3f} dB | "
               f"lap-var {base.mean_lapvar:.6f}\n")
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    write_snapshot(cfg, out)
    b = cfg["bench"]
    seed = int(cfg["experiment"]["seed"])
    stride = int(cfg["codec"]["stride"])
    if cfg["codec"]["kind"] == "analytic":
        codec = codec_mod.analytic_codec(stride)
        mc = model_config_from(cfg)
        mc = ModelConfig(in_channels=codec.channels, embed_dim=mc.embed_dim,
                         num_groups=mc.num_groups, blocks_per_group=mc.blocks_per_group,
                         window=mc.window, heads=mc.heads, scales=mc.scales)
    else:
        corpus = codec_mod.gen_corpus(int(cfg["data"]["corpus_n"]),
                                      int(cfg["data"]["corpus_size"]), seed=seed)
        codec = build_codec(cfg, corpus)
        mc = model_config_from(cfg, in_channels=codec.channels)
    model = build(mc, seed)
    ref = eval_bench.pixel_sr_reference(model, seed)
    sizes = [(n, n) for n in _ints(b["sizes"])]
    rows = eval_bench.bench_cost(model, codec, ref, sizes, alpha=int(b["alpha"]),
                                 runs=int(b["runs"]), warmup=int(b["warmup"]),
                                 seed=seed)
    header = sorted(rows[0])
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[k]) for k in header))
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    text = [f"stride s={stride}: SR-stage position ratio = {stride * stride} (exact)"]
    for row in rows:
        text.append(f"  {row['h']}x{row['w']} latent: latent-path "
                    f"{row['latent_path_seconds'] * 1e3:.2f} ms vs pixel-path "
                    f"{row['pixel_path_seconds'] * 1e3:.2f} ms | MACs "
                    f"{row['latent_path_macs']:.3e} vs {row['pixel_path_macs']:.3e}")
    (out / "bench.txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    write_snapshot(cfg, out)
    scales = _ints(cfg["model"]["scales"])
    codec, pairs, eval_pairs = _load_data(Path(args.data), scales)
    mc = model_config_from(cfg, in_channels=codec.channels)
    ab = cfg["ablate"]
    budget = _ints(ab["budget"])
    batches = _ints(ab["batches"])
    seeds = _ints(ab["seeds"])

    if args.suite == "curriculum":
        runs = eval_bench.ablation_curriculum(mc, codec, pairs, eval_pairs,
                                              seeds, budget, batches)
        summary = eval_bench.summarize_ablation(runs)
        lines = [f"{'configuration':<14} " + " ".join(
            f"PSNR x{a} (mean±std)" for a in scales)]
        for name in eval_bench.ABLATION_CONFIGS:
            e = summary.get(name, {})
            cells = []
            for a in scales:
                if f"psnr_x{a}_mean" in e:
                    cells.append(f"{e[f'psnr_x{a}_mean']:.3f}±{e[f'psnr_x{a}_std']:.3f}")
                else:
                    cells.append("aborted")
            lines.append(f"{name:<14} " + "  ".join(cells))
        (out / "curriculum.txt").write_text("\n".join(lines) + "\n")
        (out / "curriculum.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        print("\n".join(lines))
    elif args.suite == "multiscale":
        res = eval_bench.ablation_multiscale(mc, codec, pairs, eval_pairs,
                                             seeds, budget, batches)
        lines = [f"joint params {res['param_counts']['joint']}, specialists "
                 f"{res['param_counts']['sep2']} + {res['param_counts']['sep4']}"]
        for key in ("joint", "sep2", "sep4"):
            vals = res[key]
            for a in scales:
                ps = [v[a] for v in vals if a in v]
                if ps:
                    lines.append(f"{key} x{a}: {np.mean(ps):.3f}±{np.std(ps):.3f} dB")
        (out / "multiscale.txt").write_text("\n".join(lines) + "\n")
        (out / "multiscale.json").write_text(json.dumps(
            {k: v for k, v in res.items()}, indent=1, default=str) + "\n")
        print("\n".join(lines))
    elif args.suite == "transfer":
        seed = seeds[0]
        ch_a, ch_b = _ints(ab["transfer_channels"])
        reports = {}
        for src_c, dst_c in ((ch_a, ch_b), (ch_b, ch_a)):
            reports[f"{src_c}->{dst_c}"] = _run_transfer(
                cfg, codec, src_c, dst_c, budget, batches,
                float(ab["fine_tune_frac"]), seed)
        (out / "transfer.json").write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n")
        print(json.dumps(reports, indent=1, sort_keys=True))
    else:
        raise CliError(f"unknown suite {args.suite!r}")
    return 0


def _run_transfer(cfg, codec_default, src_c, dst_c, budget, batches, ft_frac, seed):
    d = cfg["data"]
    corpus = codec_mod.gen_corpus(int(d["corpus_n"]), int(d["corpus_size"]),
                                  seed=int(cfg["experiment"]["seed"]))
    eval_corpus = codec_mod.gen_corpus(int(d["eval_n"]), int(d["corpus_size"]),
                                       seed=int(d["eval_seed"]))

    def codec_for(ch):
        if codec_default.channels == ch:
            return codec_default
        c = cfg["codec"]
        codec = codec_mod.train_toy_codec(
            corpus, s=int(c["stride"]), c=ch, steps=int(c["steps"]),
            seed=int(cfg["experiment"]["seed"]), mid=int(c["mid"]),
            psnr_gate=min(float(c["psnr_gate"]), 27.0 if ch <= 4 else 28.0))
        if float(c["anisotropy"]) > 0:
            codec_mod.apply_channel_anisotropy(codec, float(c["anisotropy"]),
                                               seed=int(cfg["experiment"]["seed"]))
        return codec

    codec_a, codec_b = codec_for(src_c), codec_for(dst_c)
    scales = _ints(cfg["model"]["scales"])
    mc = model_config_from(cfg)
    mc_a = ModelConfig(in_channels=src_c, embed_dim=mc.embed_dim,
                       num_groups=mc.num_groups, blocks_per_group=mc.blocks_per_group,
                       window=mc.window, heads=mc.heads, scales=mc.scales)
    pa_train = {a: codec_mod.make_pairs(corpus, codec_a, a) for a in scales}
    pa_eval = {a: codec_mod.make_pairs(eval_corpus, codec_a, a) for a in scales}
    pb_train = {a: codec_mod.make_pairs(corpus, codec_b, a) for a in scales}
    pb_eval = {a: codec_mod.make_pairs(eval_corpus, codec_b, a) for a in scales}
    cfgs = eval_bench._curriculum_for("full", budget, batches)
    state_src, _, model_src = eval_bench.train_and_eval(
        mc_a, codec_a, pa_train, pa_eval, cfgs, seed)
    ft_steps = max(1, int(round(ft_frac * sum(budget))))
    return eval_bench.adapter_transfer_eval(
        model_src, state_src, codec_b, pb_train, pb_eval, budget, batches,
        ft_steps, seed)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="luasr",
                                     description="latent-space super-resolution at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=False):
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--seed", type=int, default=None, help="override experiment seed")
        p.add_argument("--out", default="out", help="output directory")
        if data:
            p.add_argument("--data", default="out/data", help="gen-data output directory")

    p = sub.add_parser("gen-data", help="generate corpus, codec, and pair sets")
    add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the three-stage curriculum")
    add_common(p, data=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("upscale", help="upscale a latent file and decode it")
    p.add_argument("--weights", required=True, help="training output directory")
    p.add_argument("--codec", required=True, help="codec path base")
    p.add_argument("--latent", required=True, help="latent blob path base")
    p.add_argument("--scale", type=int, choices=(2, 4), required=True)
    p.add_argument("--out", default="out/upscale")
    p.set_defaults(fn=cmd_upscale)

    p = sub.add_parser("eval", help="evaluate a trained model on a pair set")
    p.add_argument("--weights", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", default="out/eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="latent- vs pixel-path cost benchmark")
    add_common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="curriculum/multiscale/transfer suites")
    p.add_argument("--suite", choices=("curriculum", "multiscale", "transfer"),
                   required=True)
    add_common(p, data=True)
    p.set_defaults(fn=cmd_ablate)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, codec_mod.CodecTrainingError, LatentDriftError,
            io_formats.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
