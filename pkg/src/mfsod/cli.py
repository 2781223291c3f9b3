"""Command-line entry point: train, eval, infer, params and bench.

Every command takes ``--seed`` and ``--out-dir``, writes only inside the
output directory and leaves a ``manifest.json`` there with the resolved
configuration.  Settings may come from a YAML file (``--config``) with
``model:``, ``train:`` and ``data:`` sections; command-line flags win.

Exit codes: 0 success, 2 bad input or configuration, 3 checkpoint problem,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .backbone import SHUFFLE_WIDTHS, VARIANTS, BackboneConfig
from .data import RgbdSample, _read_depth, load_rgbd_dataset, read_split, split_ids, synthesize_dataset, write_split
from .errors import ConfigError, InputError, MfsodError
from .metrics import write_report
from .model import FUSION_MODES, ModelConfig, build_model, load_checkpoint, parameter_breakdown
from .training import TrainConfig, evaluate_model, predict_maps, train

log = logging.getLogger("mfsod")

MODEL_KEYS = {"fusion_mode", "seed", "projection_kernel", "backbone"}
BACKBONE_KEYS = {"variant", "level_channels", "input_size", "pretrained_weights_path"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
DATA_KEYS = {"root", "synthetic", "synthetic_size", "synthetic_seed", "train_count", "ids"}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    unknown = set(cfg) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"{p}: unknown sections {sorted(unknown)}")
    for section, allowed in (("model", MODEL_KEYS), ("train", TRAIN_KEYS), ("data", DATA_KEYS)):
        sub = cfg.get(section) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"{p}: section {section!r} must be a mapping")
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"{p}: unknown keys in {section!r}: {sorted(bad)}")
        cfg[section] = sub
    bb = cfg["model"].get("backbone") or {}
    bad = set(bb) - BACKBONE_KEYS
    if bad:
        raise ConfigError(f"{p}: unknown backbone keys {sorted(bad)}")
    return cfg


def _model_config(args, file_cfg: dict) -> ModelConfig:
    m = dict(file_cfg.get("model") or {})
    bb = dict(m.pop("backbone", None) or {})
    if getattr(args, "variant", None):
        bb["variant"] = args.variant
    if getattr(args, "width", None):
        bb["level_channels"] = args.width
    if getattr(args, "pretrained", None):
        bb["pretrained_weights_path"] = args.pretrained
    if getattr(args, "fusion_mode", None):
        m["fusion_mode"] = args.fusion_mode
    if getattr(args, "projection_kernel", None):
        m["projection_kernel"] = args.projection_kernel
    if args.seed is not None:
        m["seed"] = args.seed
    if isinstance(bb.get("level_channels"), list):
        bb["level_channels"] = tuple(bb["level_channels"])
    if "input_size" in bb:
        bb["input_size"] = tuple(bb["input_size"])
    try:
        return ModelConfig(backbone=BackboneConfig(**bb), **m)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(args, file_cfg: dict) -> TrainConfig:
    t = dict(file_cfg.get("train") or {})
    for key in ("epochs", "batch_size", "lr", "input_size", "max_iters", "weight_decay"):
        value = getattr(args, key, None)
        if value is not None:
            t[key] = value
    if args.flip:
        t["flip"] = True
    if args.invert_depth:
        t["invert_depth"] = True
    if args.seed is not None:
        t["seed"] = args.seed
    try:
        return TrainConfig(**t)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _data_config(args, file_cfg: dict) -> dict:
    d = {"root": None, "synthetic": None, "synthetic_size": 224, "synthetic_seed": 0, "train_count": None, "ids": None}
    d.update(file_cfg.get("data") or {})
    for key in ("train_count", "ids"):
        value = getattr(args, key, None)
        if value is not None:
            d[key] = value
    if args.data_root is not None:
        d["root"], d["synthetic"] = args.data_root, None
    if args.synthetic is not None:
        d["synthetic"], d["root"] = args.synthetic, None
    if args.synthetic_size is not None:
        d["synthetic_size"] = args.synthetic_size
    if args.synthetic_seed is not None:
        d["synthetic_seed"] = args.synthetic_seed
    if d["root"] is None and not d["synthetic"]:
        raise ConfigError("no dataset: pass --data-root or --synthetic N")
    return d


def _load_data(d: dict) -> list[RgbdSample]:
    if d["synthetic"]:
        size = int(d["synthetic_size"])
        return synthesize_dataset(int(d["synthetic"]), seed=int(d["synthetic_seed"]), size=(size, size))
    root = Path(d["root"])
    if not root.is_dir():
        raise ConfigError(f"dataset root not found: {root}")
    samples = load_rgbd_dataset(root)
    if d.get("ids"):
        wanted = set(read_split(d["ids"]))
        samples = [s for s in samples if s.id in wanted]
    if not samples:
        raise InputError(f"no complete RGB/depth/GT triplets under {root}")
    return samples


def _split(samples: list[RgbdSample], d: dict, seed: int, out_dir: Path) -> list[RgbdSample]:
    """Keep a seeded random subset for training and record both halves."""
    if not d.get("train_count"):
        return samples
    train_ids, test_ids = split_ids([s.id for s in samples], int(d["train_count"]), seed)
    write_split(train_ids, out_dir / "split_train.txt")
    write_split(test_ids, out_dir / "split_test.txt")
    keep = set(train_ids)
    return [s for s in samples if s.id in keep]


def _write_manifest(out_dir: Path, command: str, config: dict, started: str, argv: list[str], **extra) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "output_dir": str(out_dir),
        "started": started,
        "finished": _now(),
        "versions": {
            "mfsod": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        **extra,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def cmd_train(args, argv) -> int:
    started = _now()
    file_cfg = read_config(args.config)
    model_cfg = _model_config(args, file_cfg)
    train_cfg = _train_config(args, file_cfg)
    data_cfg = _data_config(args, file_cfg)
    samples = _split(_load_data(data_cfg), data_cfg, train_cfg.seed, args.out_dir)
    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg)
    log.info("training on %d samples for %d epoch(s)", len(samples), train_cfg.epochs)
    _, history = train(model, samples, train_cfg, out_dir=args.out_dir)
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data_cfg}
    _write_manifest(args.out_dir, "train", config, started, argv, final_loss=history.final_loss)
    print(f"final loss {history.final_loss:.6f}; checkpoint {args.out_dir / 'checkpoint.pt'}")
    return 0


def cmd_eval(args, argv) -> int:
    started = _now()
    file_cfg = read_config(args.config)
    data_cfg = _data_config(args, file_cfg)
    model = load_checkpoint(args.checkpoint)
    samples = _load_data(data_cfg)
    size = args.input_size or (file_cfg.get("train") or {}).get("input_size", 224)
    report = evaluate_model(model, samples, int(size), invert_depth=args.invert_depth)
    write_report(report, args.out_dir)
    config = {"checkpoint": str(args.checkpoint), "input_size": int(size), "data": data_cfg, "seed": args.seed}
    _write_manifest(args.out_dir, "eval", config, started, argv, metrics=report.scalars())
    for k, v in report.scalars().items():
        print(f"{k:10s} {v:.6f}")
    return 0


def cmd_infer(args, argv) -> int:
    started = _now()
    model = load_checkpoint(args.checkpoint)
    for p in (args.rgb, args.depth):
        if not Path(p).is_file():
            raise InputError(f"file not found: {p}")
    try:
        with Image.open(args.rgb) as im:
            rgb = np.asarray(im.convert("RGB"))
        depth = _read_depth(Path(args.depth))
    except OSError as exc:
        raise InputError(f"cannot read input image: {exc}") from exc
    if rgb.shape[:2] != depth.shape:
        raise InputError(f"rgb size {rgb.shape[:2]} and depth size {depth.shape} differ")
    sample = RgbdSample(rgb, depth, np.zeros(depth.shape, np.uint8), Path(args.rgb).stem)
    (saliency,) = predict_maps(model, [sample], args.input_size, invert_depth=args.invert_depth)
    out_path = args.out_dir / (args.out or f"{sample.id}.png")
    if out_path.parent != args.out_dir:
        raise ConfigError("--out must be a file name; the map is written inside --out-dir")
    Image.fromarray(np.rint(255.0 * saliency).astype(np.uint8), mode="L").save(out_path)
    config = {"checkpoint": str(args.checkpoint), "rgb": str(args.rgb), "depth": str(args.depth),
              "input_size": args.input_size, "seed": args.seed}
    _write_manifest(args.out_dir, "infer", config, started, argv, output=str(out_path))
    print(out_path)
    return 0


def cmd_params(args, argv) -> int:
    started = _now()
    file_cfg = read_config(args.config)
    base = _model_config(args, file_cfg)
    modes = FUSION_MODES if args.sweep else (base.fusion_mode,)
    rows = {}
    for mode in modes:
        cfg = ModelConfig(base.backbone, mode, base.seed, base.projection_kernel)
        rows[mode] = parameter_breakdown(build_model(cfg))
        parts = ", ".join(f"{k} {v:,}" for k, v in rows[mode].items() if k != "total")
        print(f"{mode:13s} total {rows[mode]['total']:>12,} ({rows[mode]['total'] / 1e6:.3f}M)  [{parts}]")
    (args.out_dir / "params.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    _write_manifest(args.out_dir, "params", {"model": base.to_dict(), "sweep": bool(args.sweep)}, started, argv)
    return 0


def cmd_bench(args, argv) -> int:
    started = _now()
    if args.size % 32:
        raise InputError(f"--size must be a multiple of 32, got {args.size}")
    if args.n < 1 or args.warmup < 0:
        raise InputError("--n must be >= 1 and --warmup >= 0")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        model_cfg = model.config
    else:
        model_cfg = _model_config(args, read_config(args.config))
        model = build_model(model_cfg).eval()
    gen = torch.Generator().manual_seed(args.seed or 0)
    rgb = torch.randn(1, 3, args.size, args.size, generator=gen)
    depth = torch.rand(1, 1, args.size, args.size, generator=gen)
    latencies = []
    with torch.inference_mode():
        for i in range(args.warmup + args.n):
            t0 = time.perf_counter()
            model(rgb, depth)
            dt = time.perf_counter() - t0
            if i >= args.warmup:
                latencies.append(dt)
    lat = np.array(latencies) * 1e3
    report = {
        "size": args.size,
        "n": args.n,
        "warmup": args.warmup,
        "samples_per_sec": float(args.n / (lat.sum() / 1e3)),
        "latency_ms": {
            "mean": float(lat.mean()),
            "p50": float(np.percentile(lat, 50)),
            "p95": float(np.percentile(lat, 95)),
        },
        "threads": torch.get_num_threads(),
        "device": "cpu",
    }
    (args.out_dir / "bench.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    config = {"checkpoint": args.checkpoint and str(args.checkpoint), "model": model_cfg.to_dict(),
              "size": args.size, "n": args.n, "warmup": args.warmup, "seed": args.seed}
    _write_manifest(args.out_dir, "bench", config, started, argv, report=report)
    print(
        f"{report['samples_per_sec']:.2f} samples/s  latency mean {report['latency_ms']['mean']:.2f} ms, "
        f"p50 {report['latency_ms']['p50']:.2f} ms, p95 {report['latency_ms']['p95']:.2f} ms"
    )
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", type=Path, required=True, help="all outputs go here")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--config", help="YAML config with model/train/data sections")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fusion-mode", choices=FUSION_MODES)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--width", choices=sorted(SHUFFLE_WIDTHS), help="shuffle backbone width preset")
    p.add_argument("--projection-kernel", type=int)
    p.add_argument("--pretrained", help="ImageNet classification weights for the backbone")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", help="directory with RGB/, depth/ and GT/")
    p.add_argument("--synthetic", type=int, help="use N generated scenes instead of a dataset")
    p.add_argument("--synthetic-size", type=int)
    p.add_argument("--synthetic-seed", type=int)
    p.add_argument("--invert-depth", action="store_true", help="treat smaller depth values as nearer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfsod", description="Lightweight middle-fusion RGB-D salient object detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--input-size", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--flip", action="store_true", help="random horizontal flips")
    p.add_argument("--train-count", type=int, help="train on a seeded random subset of this size; writes split files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-size", type=int)
    p.add_argument("--ids", help="newline-separated sample ids to evaluate, e.g. split_test.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="saliency map for one RGB-D pair")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--out", help="output PNG file name inside --out-dir (default <rgb stem>.png)")
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--invert-depth", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("params", help="parameter counts")
    _common(p)
    _model_flags(p)
    p.add_argument("--sweep", action="store_true", help="all fusion modes")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", help="inference speed")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int, default=352)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        return args.func(args, argv)
    except MfsodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
