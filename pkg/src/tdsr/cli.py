"""Command-line entry point: ``tdsr {gen-data,train,infer,eval,probe}``.

Exit codes: 0 success, 2 configuration/input error, 3 missing or unreadable
prerequisite, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import pipeline as pl
from .checkpoint import CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .data import KINDS, make_texture
from .encoder import cosine_probe, probe_minimum, write_probe_csv
from .metrics import psnr, ssim
from .aggregation import seam_score
from .training import DivergenceError, TrainLog, params_digest

log = logging.getLogger("tdsr")

EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_DIVERGED = 4

STAGES = ("autoencoder", "prior", "encoder", "cfw")
# stage -> (checkpoint prefix, stages whose checkpoints must exist)
STAGE_INFO = {
    "autoencoder": ("ae", ()),
    "prior": ("prior", ("autoencoder",)),
    "encoder": ("encoder", ("autoencoder", "prior")),
    "cfw": ("cfw", ("autoencoder", "prior", "encoder")),
}
CONFIG_NAME = "config.yaml"


class PrerequisiteError(RuntimeError):
    pass


# ---------------------------------------------------------------- file helpers


def read_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise PrerequisiteError(f"missing image {path}") from exc


def png_bytes(img: np.ndarray) -> bytes:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | Path, img: np.ndarray) -> None:
    atomic_write_bytes(path, png_bytes(img))


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode())


def write_json(path: str | Path, data) -> None:
    atomic_write_bytes(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode())


def quantized(img: np.ndarray) -> np.ndarray:
    """What a PNG round-trip would give back."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0


# ---------------------------------------------------------------- config


def resolve_config(args, ckpt_dir: Path | None = None) -> RunConfig:
    path = getattr(args, "config", None)
    if path is None and ckpt_dir is not None and (ckpt_dir / CONFIG_NAME).exists():
        path = ckpt_dir / CONFIG_NAME
    cfg = load_config(path)
    return apply_overrides(cfg, dict(_overrides(args)))


def _overrides(args):
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        yield key, value
    flags = {
        "w": "sampling.w",
        "guidance_scale": "sampling.guidance_scale",
        "steps": "sampling.steps",
        "color": "sampling.color",
        "tile_size": "sampling.tile_size",
        "tile_overlap": "sampling.tile_overlap",
        "tile_sigma": "sampling.tile_sigma",
        "seed": "sampling.seed",
    }
    for attr, key in flags.items():
        if getattr(args, attr, None) is not None:
            yield key, getattr(args, attr)
    if getattr(args, "preclean", False):
        yield "sampling.preclean", True


# ---------------------------------------------------------------- datasets


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise PrerequisiteError(f"no manifest at {path}")
    return json.loads(path.read_text())


def load_pairs(data_dir: str | Path, cfg: RunConfig) -> pl.Pairs:
    """Read a generated dataset and check it against the manifest."""
    root = Path(data_dir)
    manifest = load_manifest(root)
    entries = manifest.get("pairs", [])
    if not entries:
        raise ConfigError(f"manifest in {root} lists no pairs")
    hr = np.stack([read_png(root / e["hr"]) for e in entries])
    lr = np.stack([read_png(root / e["lr"]) for e in entries])
    factor = int(manifest.get("factor", cfg.data.factor))
    if hr.shape[1:3] != (lr.shape[1] * factor, lr.shape[2] * factor):
        raise ConfigError(f"manifest mismatch: HR {hr.shape[1:3]} is not {factor}x LR {lr.shape[1:3]}")
    lr_up = np.stack([pl.upsample(x, factor) for x in lr])
    return pl.Pairs(hr=hr, lr=lr, lr_up=lr_up, seeds=[int(e["seed"]) for e in entries])


def synth_pairs(cfg: RunConfig, split: str = "train") -> pl.Pairs:
    """The dataset ``gen-data`` would write, built in memory (with the same 8-bit quantisation)."""
    d = cfg.data
    n, seed = (d.n_train, d.seed) if split == "train" else (d.n_val, d.val_seed)
    hr = np.stack([quantized(make_texture(seed, i, d.size)) for i in range(n)])
    return pl.make_pairs(hr, d, seed)


def training_pairs(args, cfg: RunConfig) -> pl.Pairs:
    return load_pairs(args.data, cfg) if args.data else synth_pairs(cfg, "train")


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    d = cfg.data
    split = args.split
    n = args.n if args.n is not None else (d.n_train if split == "train" else d.n_val)
    seed = args.data_seed if args.data_seed is not None else (d.seed if split == "train" else d.val_seed)
    out = Path(args.out)
    params = pl.degradation_of(d)
    entries = []
    for i in range(n):
        hr = quantized(make_texture(seed, i, d.size))
        s = pl.pair_seed(seed, i)
        lr = pl.degrade_lr(hr, params, s)
        name = f"{i:04d}.png"
        write_png(out / "hr" / name, hr)
        write_png(out / "lr" / name, lr)
        lr_psnr = psnr(pl.upsample(quantized(lr), d.factor), hr)
        entries.append({"index": i, "hr": f"hr/{name}", "lr": f"lr/{name}", "seed": s,
                        "kind": KINDS[i % len(KINDS)], "lr_psnr": round(lr_psnr, 6)})
    band = [e["lr_psnr"] for e in entries]
    write_json(out / "manifest.json", {
        "split": split,
        "n": n,
        "seed": seed,
        "size": d.size,
        "factor": d.factor,
        "blur_sigma": list(d.blur_sigma),
        "noise_sigma": list(d.noise_sigma),
        "lr_psnr_band": [min(band), max(band)] if band else [],
        "lr_psnr_mean": round(float(np.mean(band)), 6) if band else None,
        "pairs": entries,
    })
    print(f"wrote {n} pairs to {out}")
    return 0


# ---------------------------------------------------------------- checkpoints


def stage_path(ckpt_dir: Path, stage: str) -> Path:
    return ckpt_dir / f"{stage}.tdsr"


def module_of(models: pl.Models, stage: str) -> torch.nn.Module:
    return getattr(models, STAGE_INFO[stage][0])


def load_stages(models: pl.Models, ckpt_dir: Path, stages: Sequence[str]) -> None:
    for st in stages:
        path = stage_path(ckpt_dir, st)
        if not path.exists():
            raise PrerequisiteError(f"stage {st!r} checkpoint missing: {path}")
        try:
            state = load_checkpoint(path)
        except CheckpointError as exc:
            raise PrerequisiteError(f"{path}: {exc}") from exc
        prefix = STAGE_INFO[st][0]
        try:
            module_of(models, st).load_state_dict({k[len(prefix) + 1:]: v for k, v in state.items()})
        except RuntimeError as exc:
            raise ConfigError(f"{path} does not match the configured architecture: {exc}") from exc


def save_stage(models: pl.Models, ckpt_dir: Path, stage: str) -> Path:
    prefix = STAGE_INFO[stage][0]
    state = {f"{prefix}.{k}": v for k, v in module_of(models, stage).state_dict().items()}
    path = stage_path(ckpt_dir, stage)
    save_checkpoint(state, path)
    return path


def load_models(ckpt_dir: Path, cfg: RunConfig, stages: Sequence[str] = STAGES) -> pl.Models:
    models = pl.Models.fresh(0, cfg.model, schedule=cfg.schedule)
    load_stages(models, ckpt_dir, stages)
    return models


# ---------------------------------------------------------------- train


def run_stage(stage: str, models: pl.Models, pairs: pl.Pairs, cfg: RunConfig, log_every: int) -> TrainLog:
    schedule = pl.schedule_of(cfg)
    if stage == "autoencoder":
        return pl.stage_autoencoder(models, pairs.hr, cfg, log_every)
    hr_latents = pl.encode_images(models.ae, pairs.hr)
    if stage == "prior":
        return pl.stage_prior(models, hr_latents, schedule, cfg, log_every)
    if stage == "encoder":
        lr_latents = pl.encode_images(models.ae, pairs.lr_up)
        return pl.stage_encoder(models, lr_latents, hr_latents, schedule, cfg, log_every)
    return pl.stage_cfw(models, pairs, schedule, cfg, log_every)


def train_one(stage: str, models: pl.Models, pairs: pl.Pairs, cfg: RunConfig, ckpt_dir: Path, log_every: int) -> dict:
    deps = STAGE_INFO[stage][1]
    frozen_before = {d: params_digest(module_of(models, d)) for d in deps}
    history = run_stage(stage, models, pairs, cfg, log_every)
    frozen_after = {d: params_digest(module_of(models, d)) for d in deps}
    audit = {
        "stage": stage,
        "steps": len(history.losses),
        "final_loss": history.final if history.losses else None,
        "trained_sha256": params_digest(module_of(models, stage)),
        "frozen": {d: {"sha256": frozen_before[d], "unchanged": frozen_before[d] == frozen_after[d]} for d in deps},
    }
    for d, rec in audit["frozen"].items():
        print(f"[{stage}] frozen {d} sha256={rec['sha256'][:16]} {'unchanged' if rec['unchanged'] else 'CHANGED'}")
    if not all(r["unchanged"] for r in audit["frozen"].values()):
        raise DivergenceError(f"frozen parameters changed during stage {stage}")
    path = save_stage(models, ckpt_dir, stage)
    write_csv(ckpt_dir / f"{stage}_loss.csv", ["step", "loss"], [(i, repr(v)) for i, v in enumerate(history.losses)])
    write_json(ckpt_dir / f"{stage}_audit.json", audit)
    if history.losses:
        print(f"[{stage}] {audit['steps']} steps, final loss {history.final:.6g} -> {path}")
    return audit


def cmd_train(args) -> int:
    ckpt_dir = Path(args.ckpt_dir)
    cfg = resolve_config(args, ckpt_dir)
    if args.train_steps is not None:
        cfg = apply_overrides(cfg, {f"train.{s}.steps": args.train_steps for s in STAGES if args.stage in (s, "all")})
    stages = STAGES if args.stage == "all" else (args.stage,)
    models = pl.Models.fresh(0, cfg.model, schedule=cfg.schedule)
    load_stages(models, ckpt_dir, STAGE_INFO[stages[0]][1])
    pairs = training_pairs(args, cfg)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, ckpt_dir / CONFIG_NAME)
    for st in stages:
        train_one(st, models, pairs, cfg, ckpt_dir, args.log_every)
    return 0


# ---------------------------------------------------------------- infer


def seam_report(z: torch.Tensor, tile: int) -> dict:
    """Cross-boundary differences at the naive tile boundaries vs the interior."""
    w = z.shape[-1]
    cols = list(range(tile, w, tile))
    grad = float((z[..., 1:] - z[..., :-1]).abs().mean())
    seam = float(np.mean([seam_score(z, c) for c in cols])) if cols else None
    return {"boundary_columns": cols, "seam": seam, "mean_abs_dx": grad}


def cmd_infer(args) -> int:
    ckpt_dir = Path(args.ckpt_dir)
    cfg = resolve_config(args, ckpt_dir)
    s = cfg.sampling
    lr = read_png(args.input)
    h, w = lr.shape[0] * s.scale, lr.shape[1] * s.scale
    if h % 4 or w % 4:
        raise ConfigError(f"output size {h}x{w} must be divisible by 4")
    models = load_models(ckpt_dir, cfg)
    schedule = pl.schedule_of(cfg)
    x_up = pl.prepare_inputs(lr, s)
    z, feats = pl.sample_latents(models, x_up, schedule, s, tiled=not args.no_tiling)
    out = pl.decode(models, z, feats, x_up, s.w, s.color, s.wavelet_levels)[0]
    write_png(args.output, out)
    lh, lw = z.shape[-2:]
    layout = pl.layout_for(lh, lw, s)
    report = {"output": str(args.output), "latent": [lh, lw], "patches": 1 if args.no_tiling else layout.M,
              "tiled": not args.no_tiling and layout.M > 1}
    report.update(seam_report(z, s.tile_size))
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------- eval


def _floats(values: Sequence[float] | None, default: float) -> list[float]:
    return list(values) if values else [default]


def cmd_eval(args) -> int:
    ckpt_dir = Path(args.ckpt_dir)
    cfg = resolve_config(args, ckpt_dir)
    pairs = load_pairs(args.data, cfg)
    ws = _floats(args.w_sweep, cfg.sampling.w)
    scales = _floats(args.s_sweep, cfg.sampling.guidance_scale)
    # validate every sweep value before any sampling
    for w in ws:
        apply_overrides(cfg, {"sampling.w": w})
    for sc in scales:
        apply_overrides(cfg, {"sampling.guidance_scale": sc})

    rows = []

    def score(method, w, sc, preds):
        p = [psnr(a, b) for a, b in zip(preds, pairs.hr)]
        q = [ssim(a, b) for a, b in zip(preds, pairs.hr)]
        for i, (pi, qi) in enumerate(zip(p, q)):
            rows.append(["pair", i, method, w, sc, repr(pi), repr(qi)])
        rows.append(["aggregate", "", method, w, sc, repr(float(np.mean(p))), repr(float(np.mean(q)))])
        return float(np.mean(p))

    score("bicubic", "", "", pairs.lr_up)
    if not args.bicubic_only:
        models = load_models(ckpt_dir, cfg)
        schedule = pl.schedule_of(cfg)
        x_up = pl.prepare_inputs(pairs.lr, cfg.sampling)
        for sc in scales:
            sub = apply_overrides(cfg, {"sampling.guidance_scale": sc}).sampling
            z, feats = pl.sample_latents(models, x_up, schedule, sub, tiled=not args.no_tiling)
            for w in ws:
                preds = pl.decode(models, z, feats, x_up, w, sub.color, sub.wavelet_levels)
                mean = score("pipeline", w, sc, preds)
                print(f"w={w} s={sc} psnr={mean:.4f}")
    write_csv(args.out, ["row", "index", "method", "w", "s", "psnr", "ssim"], rows)
    return 0


# ---------------------------------------------------------------- probe


def cmd_probe(args) -> int:
    ckpt_dir = Path(args.ckpt_dir)
    cfg = resolve_config(args, ckpt_dir)
    models = load_models(ckpt_dir, cfg, ("autoencoder", "prior", "encoder"))
    pairs = load_pairs(args.data, cfg) if args.data else synth_pairs(cfg, "val")
    if not 0 <= args.index < len(pairs):
        raise ConfigError(f"--index {args.index} out of range for {len(pairs)} pairs")
    hr_latent = pl.encode_images(models.ae, pairs.hr[args.index:args.index + 1])
    lr_latent = pl.encode_images(models.ae, pairs.lr_up[args.index:args.index + 1])
    T = cfg.schedule.T
    t_list = args.timesteps or list(range(args.stride, T + 1, args.stride))
    if any(not 1 <= t <= T for t in t_list):
        raise ConfigError(f"probe timesteps must lie in [1, {T}]")
    rows = cosine_probe(models.prior, models.encoder, lr_latent, hr_latent, pl.schedule_of(cfg), t_list, args.probe_seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_probe_csv(rows, out)
    t, snr_min, cos = probe_minimum(rows)
    print(f"minimum cosine {cos:.6f} at t={t} (SNR {snr_min:.4g}); {len(rows)} rows -> {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdsr", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1, for reproducibility)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")

    g = sub.add_parser("gen-data", help="write procedural HR/LR PNG pairs and a manifest")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--split", choices=("train", "val"), default="train")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage (or all) and write its checkpoint")
    common(t)
    t.add_argument("--stage", choices=STAGES + ("all",), required=True)
    t.add_argument("--ckpt-dir", required=True)
    t.add_argument("--data", help="dataset directory from gen-data (default: synthesise in memory)")
    t.add_argument("--train-steps", type=int, help="override the step count of the selected stage(s)")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    def sampling(sp):
        sp.add_argument("--ckpt-dir", required=True)
        sp.add_argument("--w", type=float, help="CFW fidelity weight in [0, 1]")
        sp.add_argument("--guidance-scale", type=float, help="classifier-free guidance scale s >= 0")
        sp.add_argument("--steps", type=int, help="sampling steps")
        sp.add_argument("--color", choices=("pixel", "wavelet", "none"))
        sp.add_argument("--preclean", action="store_true")
        sp.add_argument("--tile-size", type=int, help="latent patch size")
        sp.add_argument("--tile-overlap", type=int)
        sp.add_argument("--tile-sigma", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--no-tiling", action="store_true", help="sample the whole latent in one pass")

    i = sub.add_parser("infer", help="super-resolve one LR PNG")
    common(i)
    sampling(i)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM on the luminance channel over a pairs manifest")
    common(e)
    sampling(e)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--w-sweep", type=float, nargs="+")
    e.add_argument("--s-sweep", type=float, nargs="+")
    e.add_argument("--bicubic-only", action="store_true")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="cosine similarity of prior features before/after SFT per timestep")
    common(pr)
    pr.add_argument("--ckpt-dir", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--data")
    pr.add_argument("--index", type=int, default=0)
    pr.add_argument("--timesteps", type=int, nargs="+")
    pr.add_argument("--stride", type=int, default=10)
    pr.add_argument("--probe-seed", type=int, default=0)
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
