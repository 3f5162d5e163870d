"""Command-line entry point ``maskcond``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from ..conditions import MASKED, ConditionSchema, ConditionVector, to_arrays
from ..data import (
    SynthSpec,
    keypoint_columns,
    load_image_dataset,
    load_pointcloud_csv,
    split,
    synth_generate,
    synth_image_dataset,
    write_image_dataset,
    write_pointcloud_csv,
)
from ..errors import MaskCondError
from ..mcdm import DiffusionConfig, McDiffusion, sample, train_dm
from ..mcvae import VaeConfig, generate
from ..schedules import SparsitySchedule
from .checkpoint import load_checkpoint, save_checkpoint
from .experiments import (
    DEFAULT_LEVELS,
    DEFAULT_SCHEDULES,
    compare_schedules,
    eval_mse_vs_sparsity,
    schedule_table,
    sweep_dataset_size,
    train_fresh_vae,
)
from .svg import write_svg

POINTCLOUD_FILE = "pointclouds.csv"
SCHEMA_FILE = "schema.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed expects an unsigned 64-bit integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"--seed expects an unsigned 64-bit integer, got {text!r}")
    return v


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    if data:
        p.add_argument("--data", type=Path, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=_u64, default=0, help="root seed for all randomness")
    p.add_argument("--svg", action="store_true", help="also write an SVG line chart")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskcond", description="Masked-conditioning generative models")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic point-cloud (and image) dataset")
    _common(p, data=False)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--images", action="store_true", help="also render a PNG image dataset")
    p.add_argument("--image-size", type=int, default=32)

    train = sub.add_parser("train", help="train a model").add_subparsers(
        dest="model", required=True, parser_class=_Parser
    )
    for name in ("vae", "dm"):
        _common(train.add_parser(name))

    ev = sub.add_parser("eval", help="evaluate a model").add_subparsers(dest="what", required=True, parser_class=_Parser)
    p = ev.add_parser("sparsity", help="MSE against inference sparsity")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--levels", type=_floats)
    p.add_argument("--seeds", type=int, help="number of evaluation seeds")
    p.add_argument("--mode", choices=("posterior", "prior"))

    sw = sub.add_parser("sweep", help="training sweeps").add_subparsers(dest="what", required=True, parser_class=_Parser)
    p = sw.add_parser("size", help="dataset-size by training-sparsity sweep")
    _common(p)
    p.add_argument("--sizes", type=_ints)
    p.add_argument("--sparsities", type=_floats)
    p.add_argument("--levels", type=_floats, help="inference levels (default: each model's training sparsity)")
    p.add_argument("--seeds", type=int)

    p = sub.add_parser("compare-schedules", help="compare sparsity schedules")
    _common(p)
    p.add_argument("--levels", type=_floats)
    p.add_argument("--seeds", type=int)

    p = sub.add_parser("sample", help="generate from a checkpoint")
    _common(p, data=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--conditions", default="", help="name=value pairs, e.g. style=style1,scale=0.4")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--mode", choices=("prior",), default="prior")
    return parser


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    return json.loads(Path(args.config).read_text())


def _need_data(args) -> Path:
    if args.data is None:
        raise UsageError("--data is required for this command")
    return args.data


def _pointclouds(data: Path):
    return load_pointcloud_csv(data / POINTCLOUD_FILE, data / SCHEMA_FILE)


def _images(data: Path):
    d = data / "images" if (data / "images" / "annotations.csv").exists() else data
    return load_image_dataset(d)


def _seeds(args, cfg) -> list[int]:
    n = args.seeds if getattr(args, "seeds", None) is not None else int(cfg.get("eval", {}).get("seeds", 3))
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    return [args.seed + i for i in range(n)]


def _write_sweep(result, out: Path, stem: str, svg: bool, title: str, x_label: str) -> None:
    result.to_csv(out / f"{stem}.csv")
    result.per_seed_to_csv(out / f"{stem}_per_seed.csv")
    result.write_summary(out / f"{stem}_summary.json")
    if svg:
        write_svg(result, out / f"{stem}.svg", title=title, x_label=x_label)


def cmd_gen_synth(args, cfg) -> None:
    spec = SynthSpec(**cfg.get("synth", {}))
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    args.out.mkdir(parents=True, exist_ok=True)
    ds = synth_generate(spec, args.samples, args.seed)
    write_pointcloud_csv(ds, args.out / POINTCLOUD_FILE)
    ds.schema.save(args.out / SCHEMA_FILE)
    (args.out / "synth.json").write_text(spec.to_json() + "\n")
    if args.images:
        imgs = synth_image_dataset(spec, args.samples, args.seed, (1, args.image_size, args.image_size))
        write_image_dataset(imgs, args.out / "images")


def cmd_train_vae(args, cfg) -> None:
    ds = _pointclouds(_need_data(args))
    config = VaeConfig.from_dict({"num_keypoints": ds.num_keypoints, **cfg.get("model", {})})
    sched = SparsitySchedule.from_config(cfg.get("schedule", {"kind": "constant", "p_start": 0.0}), total_steps=1)
    train, _ = split(ds, float(cfg.get("test_fraction", 0.2)), int(cfg.get("split_seed", 0)))
    model, report = train_fresh_vae(train, config, sched, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "model.ckpt", extra={"seed": args.seed, "schedule": sched.to_config()})
    report.to_csv(args.out / "training.csv")


def cmd_train_dm(args, cfg) -> None:
    ds = _images(_need_data(args))
    config = DiffusionConfig.from_dict({"image_shape": list(ds.image_shape), **cfg.get("model", {})})
    sched = SparsitySchedule.from_config(
        cfg.get("schedule", {"kind": "linear", "p_start": 0.1, "p_end": 0.25}), total_steps=1
    )
    model = McDiffusion(config, ds.schema, torch.Generator().manual_seed(args.seed))
    report = train_dm(model, ds, config, sched, np.random.default_rng(args.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "model.ckpt", extra={"seed": args.seed, "schedule": sched.to_config()})
    report.to_csv(args.out / "training.csv")


def cmd_eval_sparsity(args, cfg) -> None:
    model = load_checkpoint(args.checkpoint)
    data = _need_data(args)
    ev = cfg.get("eval", {})
    levels = args.levels or ev.get("levels") or list(DEFAULT_LEVELS)
    if isinstance(model, McDiffusion):
        test = _images(data)
        mode = "sample"
    else:
        _, test = split(_pointclouds(data), float(cfg.get("test_fraction", 0.2)), int(cfg.get("split_seed", 0)))
        mode = args.mode or ev.get("mode", "posterior")
    result = eval_mse_vs_sparsity(model, test, levels, _seeds(args, cfg), mode=mode)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_sweep(result, args.out, "sparsity", args.svg, "MSE vs inference sparsity", "inference sparsity")


def cmd_sweep_size(args, cfg) -> None:
    ds = _pointclouds(_need_data(args))
    sw = cfg.get("sweep", {})
    config = VaeConfig.from_dict({"num_keypoints": ds.num_keypoints, **cfg.get("model", {})})
    sizes = args.sizes or sw.get("sizes") or [10, 100, 1000]
    sparsities = args.sparsities or sw.get("sparsities") or [0.0, 0.2, 0.4, 0.6, 0.8]
    levels = args.levels or sw.get("levels")
    result = sweep_dataset_size(
        ds,
        sizes,
        sparsities,
        config,
        _seeds(args, cfg),
        inference_levels=levels,
        test_fraction=float(cfg.get("test_fraction", 0.2)),
        split_seed=int(cfg.get("split_seed", 0)),
        mode=cfg.get("eval", {}).get("mode", "posterior"),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    _write_sweep(result, args.out, "size_sweep", args.svg, "MSE by dataset size", "training sparsity")


def cmd_compare_schedules(args, cfg) -> None:
    ds = _pointclouds(_need_data(args))
    config = VaeConfig.from_dict({"num_keypoints": ds.num_keypoints, **cfg.get("model", {})})
    levels = args.levels or cfg.get("eval", {}).get("levels") or list(DEFAULT_LEVELS)
    result = compare_schedules(
        ds,
        cfg.get("schedules", DEFAULT_SCHEDULES),
        config,
        levels,
        _seeds(args, cfg),
        test_fraction=float(cfg.get("test_fraction", 0.2)),
        split_seed=int(cfg.get("split_seed", 0)),
        mode=cfg.get("eval", {}).get("mode", "posterior"),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    _write_sweep(result, args.out, "schedules", args.svg, "MSE by schedule", "inference sparsity")
    with open(args.out / "schedules_table.json", "w") as fh:
        json.dump(schedule_table(result), fh, indent=2, sort_keys=True)
        fh.write("\n")


def parse_conditions(text: str, schema: ConditionSchema) -> ConditionVector:
    """``name=value`` pairs; omitted or empty features are masked."""
    given = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise UsageError(f"condition {part!r} is not of the form name=value")
        k, v = part.split("=", 1)
        given[k.strip()] = v.strip()
    unknown = set(given) - set(schema.feature_names)
    if unknown:
        raise UsageError(f"unknown condition(s): {', '.join(sorted(unknown))}")
    cat = []
    for f in schema.categorical_features:
        label = given.get(f.name, "")
        if not label:
            cat.append(MASKED)
            continue
        try:
            cat.append(f.code(label))
        except KeyError:
            raise UsageError(f"unknown category {label!r} for {f.name}") from None
    num = []
    for f in schema.numerical_features:
        raw = given.get(f.name, "")
        try:
            num.append(f.normalize(float(raw))[0] if raw else MASKED)
        except ValueError:
            raise UsageError(f"cannot parse {raw!r} for {f.name}") from None
    return ConditionVector(cat, num)


def cmd_sample(args, cfg) -> None:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    model = load_checkpoint(args.checkpoint)
    cv = parse_conditions(args.conditions, model.schema)
    cat, num = to_arrays([cv] * args.n, model.schema)
    rng = np.random.default_rng(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    if isinstance(model, McDiffusion):
        from PIL import Image

        imgs = sample(model, (cat, num), rng)
        for i, img in enumerate(imgs):
            arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            pil = Image.fromarray(arr[0], mode="L") if arr.shape[0] == 1 else Image.fromarray(arr.transpose(1, 2, 0))
            pil.save(args.out / f"sample_{i:03d}.png")
    else:
        out = generate(model, (cat, num), rng, mode=args.mode)
        with open(args.out / "samples.csv", "w") as fh:
            fh.write(",".join(keypoint_columns(model.config.num_keypoints)) + "\n")
            for row in out:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


COMMANDS = {
    ("gen-synth",): cmd_gen_synth,
    ("train", "vae"): cmd_train_vae,
    ("train", "dm"): cmd_train_dm,
    ("eval", "sparsity"): cmd_eval_sparsity,
    ("sweep", "size"): cmd_sweep_size,
    ("compare-schedules",): cmd_compare_schedules,
    ("sample",): cmd_sample,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    key = tuple(v for v in (args.command, getattr(args, "model", None), getattr(args, "what", None)) if v)
    try:
        cfg = _load_config(args)
        COMMANDS[key](args, cfg)
    except UsageError as exc:
        print(f"maskcond: error: {exc}", file=sys.stderr)
        return 1
    except (MaskCondError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"maskcond: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
