from __future__ import annotations

import argparse
import sys
import time
import traceback
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from smarc import config as cfgmod
from smarc.checkpoint import checkpoint_meta, load_checkpoint
from smarc.config import DESK_ARCH, SMOKE_ARCH_64, RunConfig
from smarc.dataset import (
    Dataset,
    apply_mask,
    central_mask,
    load_image,
    load_image_folder,
    read_split_manifest,
    save_image,
    split_assignment,
    subset_from_manifest,
    write_split_manifest,
)
from smarc.evaluate import batch_pair, evaluate
from smarc.grids import save_triptychs, triptych
from smarc.model import (
    build_model,
    count_params,
    forward,
    millions_per_second,
    param_count,
    param_throughput,
    param_throughput_total,
)
from smarc.report import write_report
from smarc.synth import synth_textures
from smarc.tensor import no_grad
from smarc.train import BEST_CHECKPOINT, TRAINING_LOG, TrainingAborted, train
from smarc.utils import STATUS_FAILED, STATUS_OK, Stopwatch, array_checksum, find_images, log, num_workers, write_run_manifest

# =================== CONFIG ===================
DEFAULT_FRACTION = 0.10
DEFAULT_SIZE = 224
SPLIT_MANIFEST = "split_manifest.tsv"
CONFIG_SNAPSHOT = "config.txt"
GRID_COUNT = 8
ARCH_PRESETS = {"full": None, "desk": DESK_ARCH, "smoke64": SMOKE_ARCH_64}

# Published reference row for the full-size model; printed with --show-reference, never asserted.
REFERENCE_PARAMS_M = 145.07
REFERENCE_S_PER_IMG = 0.0130
REFERENCE_TOTAL_S = 7.59
# ==============================================

EXIT_OK = 0
EXIT_FAILED = 1


# ---------- mask ----------

def cmd_mask(args) -> int:
    sw = Stopwatch()
    src, out = Path(args.input), Path(args.output)
    files = find_images(src)
    if not files:
        raise ValueError(f"no images found in {src.resolve()}")
    clashes = sorted(stem for stem, n in Counter(p.stem for p in files).items() if n > 1)
    if clashes:
        raise ValueError(f"input images share a file stem and would overwrite each other as .png: {', '.join(clashes)}")
    mask = central_mask(args.size, args.fraction)
    out.mkdir(parents=True, exist_ok=True)

    def _one(p: Path):
        try:
            img = load_image(p, args.size)
            dest = out / f"{p.stem}.png"
            save_image(apply_mask(img, mask), dest)
            return p, dest, None
        except Exception as e:
            return p, None, f"{type(e).__name__}: {e}"

    with sw.lap("mask"):
        with ThreadPoolExecutor(max_workers=num_workers()) as pool:
            results = list(pool.map(_one, files))
        mask_path = save_image(mask, out / "mask.png")

    failed = [(p, err) for p, _, err in results if err]
    for p, err in failed:
        log("WARN", f"Could not mask {p}: {err}")
    done = len(results) - len(failed)
    log("mask", f"{done} masked image(s) -> {out} | visible {int(mask.sum())}/{mask.size} pixels")

    write_run_manifest(
        out, "mask",
        {"fraction": str(args.fraction), "size": str(args.size)},
        None,
        {"input": src},
        {"mask": mask_path, "images": done, "failed": len(failed)},
        sw.timings,
        STATUS_OK if not failed else "PARTIAL",
    )
    return EXIT_OK if not failed else EXIT_FAILED


# ---------- data helpers ----------

def _resolve_run_config(args) -> RunConfig:
    base = RunConfig()
    preset = ARCH_PRESETS.get(getattr(args, "arch", "full"))
    if getattr(args, "desk_arch", False):
        preset = DESK_ARCH
    if preset is not None:
        base = RunConfig(arch=preset, train=base.train, split=base.split)
    overrides = cfgmod.parse_overrides(getattr(args, "set", None) or [])
    return cfgmod.resolve_config(getattr(args, "config", None), overrides, base)


def _load_data(data: Optional[str], synthetic: Optional[int], size: int, fraction: float, seed: int, verbose: bool = True) -> Dataset:
    if synthetic:
        log("data", f"synthetic textures: {synthetic} per class at {size}x{size}", verbose)
        return synth_textures(synthetic, size, seed, fraction)
    if not data:
        raise ValueError("either --data or --synthetic is required")
    ds, failed = load_image_folder(data, size, fraction, verbose)
    if failed:
        log("WARN", f"{len(failed)} unreadable image(s) skipped", verbose)
    return ds


# ---------- train ----------

def cmd_train(args) -> int:
    sw = Stopwatch()
    run = _resolve_run_config(args)  # every config problem surfaces here, before any work
    if not args.data and not args.synthetic:
        raise ValueError("either --data or --synthetic is required")
    if args.data and not Path(args.data).exists():
        raise FileNotFoundError(f"Data folder not found: {Path(args.data).resolve()}")

    with sw.lap("load"):
        ds = _load_data(args.data, args.synthetic, run.arch.input_size, args.fraction, run.train.seed)
    if ds.num_classes != run.arch.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes {ds.class_names} but num_classes = {run.arch.num_classes}")

    # nothing is written until the arguments, config and data all check out
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config_file(out / CONFIG_SNAPSHOT, run)

    assign = split_assignment(ds.labels, run.split, ds.num_classes)
    manifest_path = write_split_manifest(out / SPLIT_MANIFEST, ds, assign)
    train_set, val_set, test_set = (ds.subset(np.flatnonzero(assign == s)) for s in ("train", "val", "test"))
    log("split", f"train={len(train_set)} val={len(val_set)} test={len(test_set)} -> {manifest_path}")

    meta = {
        "class_names": ds.class_names,
        "visible_fraction": args.fraction,
        "data": str(args.data or ""),
        "synthetic": int(args.synthetic or 0),
        "seed": run.train.seed,
        "config": cfgmod.config_snapshot(run),
    }
    model = build_model(run.arch, seed=run.train.seed)
    log("model", f"{param_count(model):,} parameters")
    with sw.lap("train"):
        try:
            model, state = train(model, train_set, val_set, run.train, out, meta)
        except TrainingAborted as e:
            log("ERROR", f"training aborted: {e} | last good checkpoint: {e.last_good}")
            write_run_manifest(out, "train", cfgmod.config_snapshot(run), run.train.seed,
                               {"data": args.data or f"synthetic:{args.synthetic}"},
                               {"checkpoint": e.last_good}, sw.timings, STATUS_FAILED)
            return EXIT_FAILED

    write_run_manifest(
        out, "train", cfgmod.config_snapshot(run), run.train.seed,
        {"data": args.data or f"synthetic:{args.synthetic}", "config": args.config or ""},
        {
            "checkpoint": out / BEST_CHECKPOINT,
            "split_manifest": manifest_path,
            "training_log": out / TRAINING_LOG,
            "config": out / CONFIG_SNAPSHOT,
            "best_epoch": state.best_epoch,
            "best_val_acc": state.best_value,
            "weights_checksum": array_checksum(p.data for p in model.parameters()),
        },
        sw.timings,
    )
    log("DONE", f"best epoch {state.best_epoch} val_acc={state.best_value:.4f} -> {out / BEST_CHECKPOINT}")
    return EXIT_OK


# ---------- eval ----------

def cmd_eval(args) -> int:
    sw = Stopwatch()
    ckpt = Path(args.checkpoint)
    with sw.lap("load"):
        model, _ = load_checkpoint(ckpt)
        meta = checkpoint_meta(ckpt)
        fraction = float(meta.get("visible_fraction", DEFAULT_FRACTION))
        synthetic = args.synthetic if args.synthetic is not None else (int(meta.get("synthetic", 0)) or None)
        data = args.data or (meta.get("data") or None)
        seed = int(meta.get("seed", 42))
        ds = _load_data(data, synthetic, model.cfg.input_size, fraction, seed)

    manifest_file = Path(args.split_manifest) if args.split_manifest else ckpt.parent / SPLIT_MANIFEST
    if args.split == "all":
        part = ds
    elif manifest_file.exists():
        part = subset_from_manifest(ds, read_split_manifest(manifest_file), args.split)
    else:
        snapshot = meta.get("config") or {}
        run = cfgmod.apply_values(RunConfig(arch=model.cfg), {k: v for k, v in snapshot.items() if k in ("train_frac", "val_frac", "test_frac", "seed", "stratified")})
        assign = split_assignment(ds.labels, run.split, ds.num_classes)
        part = ds.subset(np.flatnonzero(assign == args.split))
    if meta.get("class_names"):
        part.class_names = list(meta["class_names"])

    with sw.lap("eval"):
        report = evaluate(model, part, args.batch_size, composite=args.composite, split_name=args.split)
    out = Path(args.report)
    paths = write_report(report, out)
    n = min(args.grids, len(part))
    if n:
        save_triptychs(out / "grids", apply_mask(part.images[:n], part.masks[:n]), report.previews[:n], part.images[:n], part.paths[:n])

    write_run_manifest(
        out, "eval", {"checkpoint": str(ckpt), "split": args.split, "composite": str(args.composite)}, seed,
        {"checkpoint": ckpt, "data": data or f"synthetic:{synthetic}", "split_manifest": manifest_file if manifest_file.exists() else ""},
        paths, sw.timings,
    )
    m = report.metrics()
    log("DONE", f"accuracy={m['accuracy']:.4f} recall_w={m['recall_w']:.4f} psnr_mean={m['psnr_mean']:.2f} -> {paths['report_txt']}")
    return EXIT_OK


# ---------- bench ----------

def cmd_bench(args) -> int:
    if args.images < 1:
        raise ValueError(f"--images must be >= 1, got {args.images}")
    if args.warmup < 0:
        raise ValueError(f"--warmup must be >= 0, got {args.warmup}")
    sw = Stopwatch()
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_model(DESK_ARCH if args.desk_arch else cfgmod.ArchConfig(), seed=args.seed)
    s = model.cfg.input_size
    rng = np.random.default_rng(args.seed)
    mask = central_mask(s, DEFAULT_FRACTION)[None]
    images = rng.random((args.images + args.warmup, s, s, 3), dtype=np.float32)

    times: List[float] = []
    with no_grad(), sw.lap("bench"):
        for i in range(args.warmup + args.images):
            pair = batch_pair(images[i:i + 1], mask)
            t0 = time.perf_counter()
            forward(model, pair, train_mode=False)
            dt = time.perf_counter() - t0
            if i >= args.warmup:
                times.append(dt)

    count = param_count(model)
    total = float(np.sum(times))
    per_img = total / len(times)
    rows = {
        "params": count,
        "params_tally": count_params(model.cfg),
        "params_m": count / 1e6,
        "s_per_img": per_img,
        "total_s": total,
        "params_per_s_caption": param_throughput(model, per_img),
        "params_per_s_total": param_throughput_total(model, total),
    }
    for k, v in rows.items():
        log("bench", f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    if args.show_reference:
        log("bench", f"reference row: {REFERENCE_PARAMS_M} M params, {REFERENCE_S_PER_IMG} s/img, {REFERENCE_TOTAL_S} s total | "
                     f"caption formula {millions_per_second(int(REFERENCE_PARAMS_M * 1e6), REFERENCE_S_PER_IMG):.2f} M/s, "
                     f"per-total {millions_per_second(int(REFERENCE_PARAMS_M * 1e6), REFERENCE_TOTAL_S):.2f} M/s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench_file = out / "bench.txt"
    bench_file.write_text("".join(f"{k}: {v}\n" for k, v in rows.items()), encoding="utf-8")
    write_run_manifest(out, "bench", {"images": str(args.images), "warmup": str(args.warmup)}, args.seed,
                       {"checkpoint": args.checkpoint or ("desk" if args.desk_arch else "full")},
                       {"bench": bench_file}, sw.timings)
    return EXIT_OK


# ---------- reconstruct ----------

def cmd_reconstruct(args) -> int:
    sw = Stopwatch()
    model, _ = load_checkpoint(args.checkpoint)
    meta = checkpoint_meta(args.checkpoint)
    names = list(meta.get("class_names") or [str(i) for i in range(model.cfg.num_classes)])
    s = model.cfg.input_size
    with sw.lap("reconstruct"):
        img = load_image(args.image, s)
        mask = central_mask(s, args.fraction)
        with no_grad():
            out = forward(model, batch_pair(img[None], mask[None]), train_mode=False)
    recon = out.reconstruction.numpy()[0]
    probs = out.class_probs.numpy()[0]
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    triptych(apply_mask(img, mask), recon, img).save(dest)

    best = int(np.argmax(probs))
    log("reconstruct", f"predicted {names[best]} ({probs[best]:.4f}) | " + ", ".join(f"{n}={p:.4f}" for n, p in zip(names, probs)))
    write_run_manifest(dest.parent, "reconstruct", {"fraction": str(args.fraction)}, None,
                       {"checkpoint": args.checkpoint, "image": args.image},
                       {"triptych": dest, "predicted": names[best]}, sw.timings)
    return EXIT_OK


# ---------- entry ----------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smarc", description="Mask-aware reconstruction + classification engine")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mask", help="Apply the central-patch mask to a folder of images")
    m.add_argument("--input", required=True)
    m.add_argument("--output", required=True)
    m.add_argument("--fraction", type=float, default=DEFAULT_FRACTION)
    m.add_argument("--size", type=int, default=DEFAULT_SIZE)
    m.set_defaults(func=cmd_mask)

    t = sub.add_parser("train", help="Split, Phase A, Phase B; writes the best checkpoint")
    t.add_argument("--data", default=None, help="root/<class>/*.png|jpg")
    t.add_argument("--synthetic", type=int, default=None, help="synthetic textures per class instead of --data")
    t.add_argument("--config", default=None, help="flat key = value file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value (repeatable)")
    t.add_argument("--out", required=True)
    t.add_argument("--fraction", type=float, default=DEFAULT_FRACTION)
    t.add_argument("--arch", choices=sorted(ARCH_PRESETS), default="full")
    t.add_argument("--desk-arch", action="store_true", help="same as --arch desk")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--synthetic", type=int, default=None)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.add_argument("--split-manifest", default=None, help="defaults to split_manifest.tsv beside the checkpoint")
    e.add_argument("--report", required=True, help="output folder")
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--composite", action="store_true", help="paste visible ground-truth pixels before scoring")
    e.add_argument("--grids", type=int, default=GRID_COUNT, help="triptychs for the first N samples")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="Parameter count and single-image throughput")
    b.add_argument("--checkpoint", default=None)
    b.add_argument("--desk-arch", action="store_true")
    b.add_argument("--images", type=int, default=20)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--seed", type=int, default=42)
    b.add_argument("--out", default="bench_out")
    b.add_argument("--show-reference", action="store_true", help="print the published reference row")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("reconstruct", help="Mask one image, reconstruct it, write a triptych")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--fraction", type=float, default=DEFAULT_FRACTION)
    r.set_defaults(func=cmd_reconstruct)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except Exception as e:
        log("ERROR", f"{e}")
        print(traceback.format_exc(limit=3), file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
