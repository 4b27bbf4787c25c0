"""``deepcap`` command line: synth, train, infer, eval and bench.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""
from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from . import metrics
from .errors import DeepCapError
from .model import (REDUCED_CONFIG, DeepCap, ModelConfig, build_model, config_from_arg,
                    infer_probs, load_checkpoint, save_checkpoint)
from .preprocess import (FRAME_SIDE, VARIANT_CHANNELS, ManifestRecord, assemble_input,
                         load_dataset, read_manifest, write_gray, write_manifest)
from .synth import PhantomSpec, generate_dataset, render_manifest
from .training import (SplitSpec, TrainConfig, evaluate, split_dataset, stack_batch, train,
                       write_metrics_csv)

DEFAULT_PIXEL_SPACING_UM = 10.0
SUBSETS = ("all", "train", "val", "test")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def read_kv_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path!r}: {exc}") from None
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}: expected 'key = value', got {raw!r}")
            out[key.strip()] = value.strip()
    return out


def _coerce(cls, values: dict):
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in types:
            raise UsageError(f"unknown config key {key!r} for {cls.__name__}")
        typ = types[key]
        try:
            if typ in ("int", int):
                out[key] = int(value)
            elif typ in ("float", float):
                out[key] = float(value)
            elif typ in ("bool", bool):
                out[key] = value.lower() == "true"
            else:
                out[key] = value
        except ValueError:
            raise UsageError(f"bad value for {key}: {value!r}") from None
    return out


# --- synth -----------------------------------------------------------------

def cmd_synth(args) -> int:
    overrides = _coerce(PhantomSpec, read_kv_file(args.config)) if args.config else {}
    for key in ("n_frames", "seed", "pullback_id"):
        overrides.pop(key, None)
    pullbacks = generate_dataset(args.frames, args.seed, args.frames_per_pullback, **overrides)
    path = render_manifest(pullbacks, args.out, args.format)
    print(f"wrote {sum(len(p.frames) for p in pullbacks)} frames in {len(pullbacks)} pullbacks; manifest {path}")
    return 0


# --- train -----------------------------------------------------------------

def model_config(args) -> ModelConfig:
    cfg = config_from_arg(args.config) if args.config else REDUCED_CONFIG
    changes = {}
    if getattr(args, "variant", None):
        changes["input_channels"] = VARIANT_CHANNELS[args.variant]
    if getattr(args, "upsample", None):
        changes["upsample"] = args.upsample
    return replace(cfg, **changes)


def subset_of(pullbacks, subset: str, split_seed: int):
    if subset == "all":
        return pullbacks
    parts = dict(zip(("train", "val", "test"), split_dataset(pullbacks, SplitSpec(seed=split_seed))))
    return parts[subset]


def cmd_train(args) -> int:
    torch.set_num_threads(args.threads)
    cfg = model_config(args)
    pullbacks = load_dataset(args.manifest)
    split_seed = args.seed if args.split_seed is None else args.split_seed
    train_pb, val_pb, test_pb = split_dataset(pullbacks, SplitSpec(seed=split_seed))
    hyper = TrainConfig(batch=args.batch, micro_batch=args.micro_batch, epochs=args.epochs,
                        seed=args.seed, patience=args.patience, variant=args.variant,
                        peak_lr=args.lr, augment=not args.no_augment, precision=args.precision)
    model = build_model(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    model, report = train(model, train_pb, val_pb, hyper,
                          log=None if args.quiet else (lambda s: print(s, flush=True)))
    meta = {"variant": args.variant, "split_seed": split_seed, "seed": args.seed,
            "best_epoch": report.best_epoch}
    size = save_checkpoint(model, os.path.join(args.out, "model.dcap"), meta)
    report.write_csv(os.path.join(args.out, "train_report.csv"))
    with open(os.path.join(args.out, "run_summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.summary_text())
        fh.write(f"split_seed = {split_seed}\n")
        for name, part in (("train", train_pb), ("val", val_pb), ("test", test_pb)):
            fh.write(f"split.{name} = {','.join(p.pullback_id for p in part)}\n")
        fh.write(f"checkpoint_bytes = {size}\n")
    print(f"stopped: {report.stop_reason}; best epoch {report.best_epoch}; checkpoint {size} bytes")
    return 0


# --- infer / eval ----------------------------------------------------------

def _load(args):
    model, meta = load_checkpoint(args.ckpt, with_meta=True)
    variant = meta.get("variant", "ALL")
    split_seed = int(meta.get("split_seed", 0)) if args.seed is None else args.seed
    return model, variant, split_seed


def predict_samples(model: DeepCap, samples, variant: str, chunk: int) -> list[np.ndarray]:
    out = []
    for i in range(0, len(samples), chunk):
        stacks = [assemble_input(s, variant) for s in samples[i:i + chunk]]
        x, _ = stack_batch(stacks, model.dtype)
        probs = infer_probs(model, x, chunk)
        out.extend((probs[:, 1] > probs[:, 0]).to(torch.uint8).numpy())
    return out


def embed_crop(mask: np.ndarray, side: int = FRAME_SIDE) -> np.ndarray:
    """Place a centre-crop prediction back on the full frame (zeros outside)."""
    full = np.zeros((side, side), np.uint8)
    top = (side - mask.shape[0]) // 2
    full[top:top + mask.shape[0], top:top + mask.shape[1]] = mask
    return full


def cmd_infer(args) -> int:
    torch.set_num_threads(args.threads)
    model, variant, split_seed = _load(args)
    pullbacks = subset_of(load_dataset(args.manifest), args.subset, split_seed)
    os.makedirs(args.out, exist_ok=True)
    records = []
    src = {(r.pullback_id, r.frame_index): r for r in read_manifest(args.manifest)}
    for pb in pullbacks:
        masks = predict_samples(model, pb.samples(), variant, args.chunk)
        sub = os.path.join(args.out, pb.pullback_id)
        os.makedirs(sub, exist_ok=True)
        for idx, mask in zip(pb.frame_indices, masks):
            path = os.path.join(sub, f"pred_{idx:04d}.png")
            write_gray(path, embed_crop(mask) * 255)
            r = src[(pb.pullback_id, idx)]
            records.append(ManifestRecord(pb.pullback_id, idx, r.image_path, path, r.frame_spacing_um))
    manifest = os.path.join(args.out, "predictions.tsv")
    write_manifest(manifest, records)
    print(f"wrote {len(records)} masks; manifest {manifest}")
    return 0


def cmd_eval(args) -> int:
    torch.set_num_threads(args.threads)
    if args.ckpt is None and args.pred_manifest is None:
        raise UsageError("eval needs --ckpt or --pred-manifest")
    truth = load_dataset(args.manifest)
    if args.ckpt is not None:
        model, variant, split_seed = _load(args)
        data = subset_of(truth, args.subset, split_seed)
        records, summary = evaluate(model, data, args.pixel_spacing, variant, args.chunk)
    else:
        split_seed = args.seed or 0
        data = subset_of(truth, args.subset, split_seed)
        preds = {pb.pullback_id: pb for pb in load_dataset(args.pred_manifest)}

        def stored(samples):
            out = []
            for s in samples:
                pb = preds.get(s.pullback_id)
                if pb is None or s.frame_index not in pb.frame_indices:
                    raise DeepCapError(f"no stored prediction for {s.pullback_id} frame {s.frame_index}")
                mask = pb.masks[pb.frame_indices.index(s.frame_index)]
                out.append(assemble_input(replace(s, mask=mask), "IM").mask)
            return out
        records, summary = evaluate(stored, data, args.pixel_spacing, "IM", args.chunk)
    if args.csv:
        write_metrics_csv(args.csv, records)
    print(metrics.format_summary(summary, f"{args.subset} subset, {len(records)} images"))
    return 0


# --- bench -----------------------------------------------------------------

@dataclass
class BenchReport:
    batch_size: int
    repetitions: int
    warmup_reps: int
    batch_ms: list = field(default_factory=list)
    threads: int = 1
    precision: str = "float32"
    input_side: int = 256
    parameters: int = 0

    @property
    def per_image_ms(self) -> list[float]:
        return [t / self.batch_size for t in self.batch_ms]

    @property
    def ms_per_image(self) -> float:
        return statistics.fmean(self.batch_ms) / self.batch_size

    def summary_text(self) -> str:
        per = self.per_image_ms
        return "\n".join([
            f"input_side = {self.input_side}", f"parameters = {self.parameters}",
            f"batch_size = {self.batch_size}", f"repetitions = {self.repetitions}",
            f"warmup_reps = {self.warmup_reps}", f"threads = {self.threads}",
            f"precision = {self.precision}",
            f"ms_per_image_mean = {self.ms_per_image:.3f}",
            f"ms_per_image_median = {statistics.median(per):.3f}",
            f"ms_per_image_min = {min(per):.3f}"]) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rep", "batch_ms", "ms_per_image"])
            for i, t in enumerate(self.batch_ms):
                writer.writerow([i, f"{t:.4f}", f"{t / self.batch_size:.4f}"])


def bench_inference(model: DeepCap, batch_size: int = 48, reps: int = 5, warmup: int = 1,
                    threads: int = 1, seed: int = 0, chunk: int = 8) -> tuple[BenchReport, torch.Tensor]:
    """Time whole-batch inference on fixed random inputs; returns the report and last output."""
    if reps < 5:
        raise ValueError("at least 5 timed repetitions are required")
    torch.set_num_threads(threads)
    cfg = model.config
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand((batch_size, cfg.input_channels, cfg.input_side, cfg.input_side),
                   generator=gen, dtype=torch.float64).to(model.dtype)
    report = BenchReport(batch_size, reps, warmup, threads=threads,
                         precision=str(model.dtype).replace("torch.", ""),
                         input_side=cfg.input_side, parameters=model.parameter_count)
    out = None
    for _ in range(warmup):
        out = infer_probs(model, x, chunk)
    for _ in range(reps):
        t0 = time.perf_counter()
        out = infer_probs(model, x, chunk)
        report.batch_ms.append((time.perf_counter() - t0) * 1000.0)
    return report, out


def cmd_bench(args) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model = build_model(model_config(args), args.seed)
    if args.side and args.side != model.config.input_side:
        fresh = DeepCap(replace(model.config, input_side=args.side))
        fresh.load_state_dict(model.state_dict())
        model = fresh
    if args.precision == "float64":
        model = model.to(torch.float64)
    report, _ = bench_inference(model, args.batch, args.reps, args.warmup, args.threads,
                                args.seed, args.chunk)
    text = report.summary_text()
    if args.csv:
        report.write_csv(args.csv)
        with open(os.path.splitext(args.csv)[0] + "_summary.txt", "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


# --- argument parsing ------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="deepcap", description="Capsule-network lumen segmentation engine.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--frames-per-pullback", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.add_argument("--config", help="key-value file overriding phantom settings")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=tuple(VARIANT_CHANNELS), default="ALL")
    p.add_argument("--upsample", choices=("transposed", "bilinear"))
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=24)
    p.add_argument("--micro-batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--config", help="model config name or key-value file (default deepcap-reduced)")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("infer", cmd_infer, "write predicted masks"),
                             ("eval", cmd_eval, "score predictions against ground truth")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--ckpt", required=name == "infer")
        p.add_argument("--manifest", required=True)
        p.add_argument("--subset", choices=SUBSETS, default="all")
        p.add_argument("--seed", type=int, help="split seed (default: the one stored in the checkpoint)")
        p.add_argument("--chunk", type=int, default=4)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--config", help="unused for this command; accepted for uniformity")
        if name == "infer":
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--pred-manifest", help="score stored masks instead of running a model")
            p.add_argument("--csv")
            p.add_argument("--pixel-spacing", type=float, default=DEFAULT_PIXEL_SPACING_UM,
                           help="micrometres per pixel")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time batch inference")
    p.add_argument("--ckpt")
    p.add_argument("--config", help="model config name or key-value file when no checkpoint is given")
    p.add_argument("--variant", choices=tuple(VARIANT_CHANNELS), default="ALL")
    p.add_argument("--upsample", choices=("transposed", "bilinear"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--batch", type=int, default=48)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--side", type=int, help="input side override (e.g. 128)")
    p.add_argument("--chunk", type=int, default=8)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"deepcap {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DeepCapError, OSError, ValueError) as exc:
        print(f"deepcap {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
