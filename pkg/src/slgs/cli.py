"""Command-line entry points: train, render, eval, inspect, synth."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_trainer, load_checkpoint, save_checkpoint
from .colmap import Dataset, load_dataset, save_image
from .errors import SlgsError, TrainingAborted
from .model import ModelConfig, render
from .scene import BASELINE_3DGS_OPTIMIZABLE, BASELINE_3DGS_STORED, CameraView
from .trainer import TrainConfig, Trainer, build_model, evaluate

log = logging.getLogger("slgs")

CHECKPOINT_NAME = "ckpt.slgs"
METRICS_NAME = "metrics.jsonl"
CONFIG_NAME = "config.json"


class UsageError(Exception):
    """Bad arguments, paths or configuration; reported with exit code 2."""


@dataclass
class RunConfig:
    data: str = ""
    out: str = ""
    downscale: float = 1.0
    checkpoint_every: int = 0


def _defaults() -> dict:
    merged = asdict(RunConfig())
    merged.update(asdict(ModelConfig()))
    merged.update(asdict(TrainConfig()))
    return merged


def resolve_config(file_values: dict, overrides: dict) -> tuple[RunConfig, ModelConfig, TrainConfig]:
    """Merge defaults, a JSON document and command-line overrides; unknown keys are rejected."""
    known = _defaults()
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**known, **file_values, **{k: v for k, v in overrides.items() if v is not None}}

    def build(cls):
        return cls(**{f.name: merged[f.name] for f in fields(cls)})

    try:
        return build(RunConfig), build(ModelConfig), build(TrainConfig)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{p}: expected a JSON object")
    return doc


def _load_data(path: str, downscale: float = 1.0) -> Dataset:
    if not path:
        raise UsageError("no dataset directory given (--data)")
    try:
        return load_dataset(Path(path), downscale)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


# ------------------------------------------------------------------ train

def cmd_train(args) -> int:
    file_values = _read_json(args.config) if args.config else {}
    overrides = {"data": args.data, "out": args.out, "iterations": args.iters, "seed": args.seed,
                 "downscale": args.downscale, "diffuse_dims": args.diffuse_dims,
                 "specular_dims": args.specular_dims, "checkpoint_every": args.checkpoint_every,
                 "no_mask": args.no_mask or None, "no_specular": args.no_specular or None,
                 "sh_color_baseline": args.sh_color_baseline or None}
    run, model_cfg, train_cfg = resolve_config(file_values, overrides)
    if not run.out:
        raise UsageError("no output directory given (--out)")
    dataset = _load_data(run.data, run.downscale)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = {**asdict(run), **asdict(model_cfg), **asdict(train_cfg)}
    (out / CONFIG_NAME).write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")

    try:
        trainer = Trainer(build_model(dataset, model_cfg, train_cfg.seed), dataset, train_cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ckpt_path = out / CHECKPOINT_NAME
    run_meta = {**asdict(run), "data": str(Path(run.data).resolve())}

    def snapshot() -> Checkpoint:
        ckpt = checkpoint_from_trainer(trainer)
        ckpt.config["run"] = run_meta
        return ckpt

    with open(out / METRICS_NAME, "w") as metrics:
        def on_step(stats):
            if stats.psnr is not None:
                metrics.write(json.dumps(stats.metrics()) + "\n")
                metrics.flush()
                log.info("iter %d loss %.5f psnr %.2f gaussians %d", stats.iteration, stats.loss, stats.psnr,
                         stats.num_gaussians)
            if run.checkpoint_every and stats.iteration % run.checkpoint_every == 0:
                save_checkpoint(ckpt_path, snapshot())

        try:
            trainer.run(on_step)
        except (TrainingAborted, FloatingPointError) as exc:
            diag = getattr(exc, "diagnostics", {}) or {"group": getattr(exc, "group", None)}
            (out / "abort.json").write_text(json.dumps({"error": str(exc), **diag}, indent=2, default=str))
            print(f"training aborted: {exc}", file=sys.stderr)
            return 1
    save_checkpoint(ckpt_path, snapshot())
    print(f"wrote {ckpt_path} ({len(trainer.model.cloud)} gaussians, {trainer.iteration} iterations)")
    return 0


# ------------------------------------------------------------------ render / eval

def _load_ckpt(path: str) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def _dataset_for(ckpt: Checkpoint, data: str | None) -> Dataset:
    run = ckpt.config.get("run", {})
    return _load_data(data or run.get("data", ""), run.get("downscale", 1.0))


def _split_indices(dataset: Dataset, split: str, test_every: int) -> list[int]:
    train, test = dataset.split(test_every)
    return {"train": train, "test": test, "all": sorted(train + test)}[split]


def _pose_view(path: str) -> CameraView:
    doc = _read_json(path)
    try:
        view = CameraView(int(doc["width"]), int(doc["height"]), float(doc["fx"]), float(doc["fy"]),
                          (float(doc["cx"]), float(doc["cy"])), np.array(doc["world_to_camera"], dtype=float),
                          name=doc.get("name", "pose"))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad pose file {path}: {exc}") from exc
    view.validate()
    return view


def _hwc(t) -> np.ndarray:
    return np.transpose(t.data[0], (1, 2, 0))


def cmd_render(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    model = ckpt.build_model()
    if args.no_mask:
        model.config.no_mask = True
    if args.pose:
        view = _pose_view(args.pose)
    else:
        dataset = _dataset_for(ckpt, args.data)
        test_every = ckpt.config.get("train", {}).get("test_every", 8)
        indices = _split_indices(dataset, args.split, test_every)
        if not 0 <= args.view < len(indices):
            raise UsageError(f"view index {args.view} out of range for the {args.split} split "
                             f"({len(indices)} views)")
        view = dataset.views[indices[args.view]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = render(model, view)
    stem = Path(view.name).stem or "view"
    written = [out / f"{stem}.png"]
    save_image(written[0], result.rgb())
    if args.components:
        parts = {"diffuse": _hwc(result.diffuse)}
        if result.specular is not None:
            mask = result.mask.data if result.mask is not None else np.ones_like(result.specular.data[:, :1])
            parts["specular"] = _hwc(result.specular)
            parts["mask"] = np.repeat(np.transpose(mask[0], (1, 2, 0)), 3, axis=2)
            parts["specular_mask"] = _hwc(result.specular) * np.transpose(mask[0], (1, 2, 0))
        for name, img in parts.items():
            path = out / f"{stem}_{name}.png"
            save_image(path, img)
            written.append(path)
    for path in written:
        print(path)
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    model = ckpt.build_model()
    dataset = _dataset_for(ckpt, args.data)
    test_every = ckpt.config.get("train", {}).get("test_every", 8)
    indices = _split_indices(dataset, args.split, test_every)
    if not indices:
        raise UsageError(f"the {args.split} split is empty")
    rows = evaluate(model, dataset, indices)
    mean = {"psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows]))}
    print(f"{'view':<24} {'PSNR':>8} {'SSIM':>8}")
    for r in rows:
        print(f"{r['name']:<24} {r['psnr']:8.3f} {r['ssim']:8.4f}")
    print(f"{'mean':<24} {mean['psnr']:8.3f} {mean['ssim']:8.4f}")
    report = Path(args.out) if args.out else Path(args.ckpt).with_name(f"eval_{args.split}.json")
    report.write_text(json.dumps({"split": args.split, "views": rows, "mean": mean}, indent=2) + "\n")
    return 0


# ------------------------------------------------------------------ inspect / synth

def cmd_inspect(args) -> int:
    if args.ckpt:
        ckpt = _load_ckpt(args.ckpt)
        model = ckpt.build_model()
        cloud, iteration = model.cloud, ckpt.iteration
    else:
        dataset = _load_data(args.data)
        cfg = ModelConfig(args.diffuse_dims or 8, args.specular_dims or 8)
        model = build_model(dataset, cfg)
        cloud, iteration = model.cloud, 0
    per = cloud.parameters_per_gaussian
    print(f"gaussians: {len(cloud)}")
    print(f"iteration: {iteration}")
    print(f"latent channels: {model.config.diffuse_dims} diffuse + {model.config.specular_dims} specular")
    print(f"per-gaussian optimizable scalars: {per}")
    print(f"3D-GS baseline per gaussian: {BASELINE_3DGS_OPTIMIZABLE} optimizable, "
          f"{BASELINE_3DGS_STORED} stored")
    print(f"per-gaussian scalars, ours vs baseline: {per} < {BASELINE_3DGS_STORED}"
          if per < BASELINE_3DGS_STORED else f"per-gaussian scalars: {per} >= {BASELINE_3DGS_STORED}")
    for name, net in model.networks().items():
        print(f"network {name}: {net.num_parameters()} weights")
    if len(cloud):
        op = cloud.opacities()
        print(f"opacity: min {op.min():.4f} mean {op.mean():.4f} max {op.max():.4f}")
        print(f"scale: mean {cloud.scales().mean():.4g}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_synthetic_dataset, write_dataset

    cfg = ModelConfig(args.diffuse_dims or 8, args.specular_dims or 8)
    dataset, _ = make_synthetic_dataset(args.seed, cfg)
    path = write_dataset(Path(args.out), dataset, binary=not args.text)
    print(f"wrote {len(dataset)} views to {path}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slgs", description="Latent-feature Gaussian splatting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    d = TrainConfig()
    t = sub.add_parser("train", help="optimize a scene from a COLMAP dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       epilog="Any TrainConfig field can also be set in the --config JSON document. "
                              f"Defaults: {json.dumps(_defaults(), sort_keys=True)}")
    t.add_argument("--data", help="dataset directory containing sparse/0 and images/")
    t.add_argument("--out", help="output directory")
    t.add_argument("--config", help="JSON config; unknown keys are rejected")
    t.add_argument("--iters", type=int, help=f"iterations (default {d.iterations})")
    t.add_argument("--seed", type=int, help=f"random seed (default {d.seed})")
    t.add_argument("--downscale", type=float, help="image downscale factor (default 1)")
    t.add_argument("--diffuse-dims", type=int, help="diffuse latent channels (default 8)")
    t.add_argument("--specular-dims", type=int, help="specular latent channels (default 8)")
    t.add_argument("--checkpoint-every", type=int, help="save a checkpoint every N iterations (default off)")
    t.add_argument("--no-mask", action="store_true", help="ablation: view mask fixed to 1")
    t.add_argument("--no-specular", action="store_true", help="ablation: drop the specular branch")
    t.add_argument("--sh-color-baseline", action="store_true",
                   help="ablation: per-gaussian SH colour instead of the specular decoder")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", help="dataset directory (default: the one used for training)")
    r.add_argument("--view", type=int, default=0, help="index within --split (default 0)")
    r.add_argument("--split", choices=("test", "train", "all"), default="test")
    r.add_argument("--pose", help="JSON camera: width, height, fx, fy, cx, cy, world_to_camera")
    r.add_argument("--out", default=".", help="output directory (default .)")
    r.add_argument("--components", action="store_true", help="also write diffuse, specular, mask and specular*mask")
    r.add_argument("--no-mask", action="store_true", help="compose with the mask fixed to 1")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM over a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="dataset directory (default: the one used for training)")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--out", help="JSON report path (default eval_<split>.json beside the checkpoint)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print checkpoint or initial cloud statistics")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--data")
    i.add_argument("--diffuse-dims", type=int)
    i.add_argument("--specular-dims", type=int)
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("synth", help="write the synthetic test scene as a COLMAP dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--diffuse-dims", type=int)
    s.add_argument("--specular-dims", type=int)
    s.add_argument("--text", action="store_true", help="write text instead of binary sparse files")
    s.set_defaults(func=cmd_synth)
    return p


def _thread_limit():
    value = os.environ.get("SLGS_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"SLGS_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("SLGS_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SlgsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
