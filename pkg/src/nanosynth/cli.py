"""Command-line entry point: ``nanosynth <command> ...``.

Commands: train, generate, segment, evaluate, ablate, make-masks, make-toy, rerun.
Exit codes: 0 success, 1 validation error, 2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import RunConfig, ablation_loss_config, apply_overrides, load_config, save_config
from .data import AugmentationPolicy, binarize, load_dataset, read_raster, read_split_manifest, split_dataset, \
    write_split_manifest
from .errors import ConfigError, DatasetError, NanosynthError, ValidationError
from .evaluation import evaluate_model, format_table, write_report_tsv
from .extractors import get_extractor
from .generation import MaskSynthesisSpec, PostProcessSpec, generate, parse_synthesis_args, post_process, save_image, save_mask, \
    segment, synthesize_masks
from .training import checkpoint_extra, checkpoint_model_config, load_checkpoint, save_checkpoint, train

log = logging.getLogger("nanosynth")

DEFAULT_ABLATION = [
    {"classification": "focal", "overlap": "dice"},
    {"classification": "ce", "overlap": "focal_tversky", "tversky_alpha": 0.3, "tversky_beta": 0.7,
     "tversky_gamma": 0.75},
    {"classification": "focal", "overlap": "tversky", "tversky_alpha": 0.4, "tversky_beta": 0.6},
]


# ---------------------------------------------------------------------------
# manifest

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    inputs: dict
    out_dir: str
    overrides: dict = dataclasses.field(default_factory=dict)
    checksums: dict = dataclasses.field(default_factory=dict)
    timestamp: str = dataclasses.field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    version: str = __version__
    extra: dict = dataclasses.field(default_factory=dict)

    @property
    def path(self):
        return Path(self.out_dir) / "manifest.json"

    def write(self):
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(dataclasses.asdict(self), indent=2, ensure_ascii=False) + "\n")

    def finalize(self):
        out = Path(self.out_dir)
        self.checksums = {str(p.relative_to(out)): sha256(p) for p in sorted(out.rglob("*"))
                          if p.is_file() and p.name != "manifest.json"}
        self.write()


# ---------------------------------------------------------------------------
# config resolution

def _parse_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def resolve_config(args, flag_map: dict) -> tuple[RunConfig, dict]:
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.field=value, got {item!r}")
        overrides[key] = _parse_value(value)
    for attr, dotted in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = list(value) if isinstance(value, tuple) else value
    config = apply_overrides(config, overrides)
    if overrides:
        log.info("config overrides applied: %s", overrides)
    return config, overrides


def _require_dir(path, what):
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"{what} not found: {path}")
    return path


def _load_split(config: RunConfig, data_root, split_file=None):
    pairs = load_dataset(data_root, config.model.image_size, config.data.mask_threshold)
    if split_file:
        return read_split_manifest(split_file, pairs, config.training.seed)
    return split_dataset(pairs, config.training.seed)


TRAIN_FLAGS = {"epochs": "training.epochs", "seed": "training.seed", "batch_size": "training.batch_size",
               "learning_rate": "training.learning_rate", "checkpoint_every": "training.checkpoint_every",
               "image_size": "model.image_size"}


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    data_root = _require_dir(args.data_root, "data root")
    config, overrides = resolve_config(args, TRAIN_FLAGS)
    out = Path(args.out_dir)
    manifest = RunManifest("train", list(args.argv), config.to_dict(), config.training.seed,
                           {"data_root": str(data_root), "config": args.config, "resume": args.resume}, str(out), overrides)
    manifest.write()
    save_config(config, out / "config.yaml")
    split = _load_split(config, data_root, args.split_file)
    write_split_manifest(split, out / "split.tsv")
    state = load_checkpoint(args.resume, config.model, config.training) if args.resume else None
    state = train(split, config.losses, config.training, config.model, AugmentationPolicy.from_config(config.data),
                  out_dir=out, state=state, checkpoint_meta={"config": config.to_dict()})
    manifest.extra = {"epochs": state.epoch, "steps": state.step,
                      "sizes": {k: len(getattr(split, k)) for k in ("train", "val", "test")}}
    manifest.finalize()
    print(f"trained {state.epoch} epochs ({state.step} steps); outputs in {out}")
    return 0


def _postprocess_spec(args):
    return PostProcessSpec(args.brightness, args.exposure, args.shadow_lift, args.highlight_cut)


def _read_masks(masks_dir, size):
    masks = {}
    for p in sorted(Path(masks_dir).iterdir()):
        if p.is_file() and p.suffix.lower() in (".png", ".tif", ".tiff"):
            m = binarize(read_raster(p), 0.5)
            if m.shape != tuple(size):
                raise DatasetError(f"{p}: mask size {m.shape} does not match model image_size {tuple(size)}")
            masks[p.stem] = m
    if not masks:
        raise DatasetError(f"no mask rasters in {masks_dir}")
    return masks


def cmd_generate(args):
    model_config = checkpoint_model_config(args.checkpoint)
    if args.masks_dir is None and not args.synthesize:
        raise ConfigError("generate needs --masks-dir or --synthesize")
    out = Path(args.out_dir)
    pp = _postprocess_spec(args)
    manifest = RunManifest("generate", list(args.argv), {"postprocess": dataclasses.asdict(pp)}, args.seed,
                           {"checkpoint": str(args.checkpoint), "masks_dir": args.masks_dir,
                            "synthesize": args.synthesize}, str(out))
    manifest.write()
    state = load_checkpoint(args.checkpoint)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if args.synthesize:
        canvas = tuple(model_config.image_size)
        spec, count = parse_synthesis_args(args.synthesize, MaskSynthesisSpec.for_canvas(canvas, seed=args.seed))
        if spec.canvas != canvas:
            raise ConfigError(f"--synthesize canvas {spec.canvas} does not match model image_size {canvas}")
        (out / "masks").mkdir(parents=True, exist_ok=True)
        masks = {f"synth_{i:04d}": m for i, m in enumerate(synthesize_masks(spec, count))}
        for name, m in masks.items():
            save_mask(out / "masks" / f"{name}.png", m)
        manifest.config["synthesis"] = dataclasses.asdict(spec) | {"count": count}
    else:
        masks = _read_masks(_require_dir(args.masks_dir, "masks directory"), model_config.image_size)
    for i, (name, mask) in enumerate(masks.items()):
        image = generate(mask, state.generator, seed=args.seed + i)
        if not pp.is_identity:
            image = post_process(image, pp)
        save_image(out / "images" / f"{name}.png", image)
    manifest.finalize()
    print(f"wrote {len(masks)} image(s) to {out / 'images'}")
    return 0


def cmd_segment(args):
    model_config = checkpoint_model_config(args.checkpoint)
    images_dir = _require_dir(args.images_dir, "images directory")
    out = Path(args.out_dir)
    manifest = RunManifest("segment", list(args.argv), {"threshold": args.threshold}, 0,
                           {"checkpoint": str(args.checkpoint), "images_dir": str(images_dir)}, str(out))
    manifest.write()
    state = load_checkpoint(args.checkpoint)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n = 0
    for p in sorted(images_dir.iterdir()):
        if not (p.is_file() and p.suffix.lower() in (".png", ".tif", ".tiff")):
            continue
        img = read_raster(p) * 2.0 - 1.0
        if img.shape != tuple(model_config.image_size):
            raise DatasetError(f"{p}: size {img.shape} does not match model image_size {model_config.image_size}")
        save_mask(out / "masks" / f"{p.stem}.png", segment(img, state.segmenter, args.threshold))
        n += 1
    manifest.finalize()
    print(f"wrote {n} mask(s) to {out / 'masks'}")
    return 0


def _identity_stub(pair, seed):
    return pair.image


def cmd_evaluate(args):
    data_root = _require_dir(args.data_root, "data root")
    model_config = checkpoint_model_config(args.checkpoint)
    extra = checkpoint_extra(args.checkpoint)
    config = RunConfig.from_dict(extra["config"]) if "config" in extra else RunConfig()
    config = apply_overrides(config, {"model.image_size": list(model_config.image_size)})
    out = Path(args.out_dir)
    extractor_name = args.extractor or config.eval.extractor
    seed = config.eval.seed if args.seed is None else args.seed
    manifest = RunManifest("evaluate", list(args.argv), config.to_dict(), seed,
                           {"checkpoint": str(args.checkpoint), "data_root": str(data_root),
                            "extractor": extractor_name, "stub": args.stub}, str(out))
    manifest.write()
    split = _load_split(config, data_root, args.split_file)
    extractor = get_extractor(extractor_name)
    if args.stub == "identity":
        generator, label = _identity_stub, "Identity stub (paired real image)"
    else:
        generator, label = load_checkpoint(args.checkpoint).generator, args.label
    report = evaluate_model(split.test, generator, seed, extractor, label=label, ssim_window=config.eval.ssim_window)
    (out / "report.txt").write_text(format_table([report], title="METHODOLOGY") + "\n")
    write_report_tsv([report], out / "report.tsv")
    manifest.finalize()
    print(format_table([report], title="METHODOLOGY"))
    return 0


def _slug(text):
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")


def cmd_ablate(args):
    data_root = _require_dir(args.data_root, "data root")
    config, overrides = resolve_config(args, TRAIN_FLAGS)
    entries = config.ablation or DEFAULT_ABLATION
    loss_configs = [ablation_loss_config(config.losses, e, f"ablation[{i}]") for i, e in enumerate(entries)]
    out = Path(args.out_dir)
    seed = config.training.seed
    manifest = RunManifest("ablate", list(args.argv), config.to_dict(), seed,
                           {"data_root": str(data_root), "config": args.config}, str(out), overrides,
                           extra={"rows": [{"label": lc.describe(), "seed": seed,
                                            "losses": dataclasses.asdict(lc)} for lc in loss_configs]})
    manifest.write()
    split = _load_split(config, data_root, args.split_file)
    write_split_manifest(split, out / "split.tsv")
    extractor = get_extractor(config.eval.extractor)
    reports = []
    for lc in loss_configs:
        label = lc.describe()
        run_dir = out / _slug(label)
        log.info("ablation row %r (seed %d)", label, seed)
        state = train(split, lc, config.training, config.model, AugmentationPolicy.from_config(config.data),
                      out_dir=run_dir, checkpoint_meta={"config": config.to_dict() | {"losses": dataclasses.asdict(lc)}})
        reports.append(evaluate_model(split.test, state.generator, config.eval.seed, extractor, label=label,
                                      ssim_window=config.eval.ssim_window, meta={"seed": seed}))
    table = format_table(reports)
    (out / "ablation.txt").write_text(table + "\n")
    write_report_tsv(reports, out / "ablation.tsv")
    manifest.finalize()
    print(table)
    return 0


def cmd_make_masks(args):
    spec, count = parse_synthesis_args(args.spec)
    out = Path(args.out_dir)
    manifest = RunManifest("make-masks", list(args.argv), dataclasses.asdict(spec) | {"count": count}, spec.seed,
                           {}, str(out))
    manifest.write()
    for i, m in enumerate(synthesize_masks(spec, count)):
        save_mask(out / f"synth_{i:04d}.png", m)
    manifest.finalize()
    print(f"wrote {count} mask(s) to {out}")
    return 0


def cmd_make_toy(args):
    from .toy import make_toy_pairs, write_dataset

    write_dataset(make_toy_pairs(args.n, args.size, args.seed, args.density), args.out_dir)
    print(f"wrote {args.n} toy pair(s) to {args.out_dir}")
    return 0


def cmd_rerun(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if args.out_dir:
        idx = argv.index("--out-dir")
        argv[idx + 1] = args.out_dir
    return main(argv)


# ---------------------------------------------------------------------------

def _pair_arg(text):
    parts = re.split(r"[x,]", text)
    if len(parts) == 1:
        parts = parts * 2
    return tuple(int(p) for p in parts)


def build_parser():
    parser = argparse.ArgumentParser(prog="nanosynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="YAML run config with sections data/model/losses/training/eval")
        p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="override one config field")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--checkpoint-every", type=int)
        p.add_argument("--image-size", type=_pair_arg, metavar="HxW")
        p.add_argument("--split-file", help="id<TAB>split manifest to reuse instead of a seeded split")

    p = sub.add_parser("train", help="train all four networks")
    config_args(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue training from a saved state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="render images from masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masks-dir")
    p.add_argument("--synthesize", nargs="+", metavar="KEY=VALUE",
                   help="synthesize masks instead, e.g. count=3 particles=20:40 radius=6:14")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--brightness", type=float, default=0.0)
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--shadow-lift", type=float, default=0.0)
    p.add_argument("--highlight-cut", type=float, default=0.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("segment", help="predict binary masks for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="FID/SSIM on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--extractor", choices=("fallback", "inception_v3", "vgg16"))
    p.add_argument("--seed", type=int)
    p.add_argument("--split-file")
    p.add_argument("--label", default="Proposed model")
    p.add_argument("--stub", choices=("identity",), help="score a reference generator instead of the checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare segmentation-loss configurations")
    config_args(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("make-masks", help="synthesize particle masks")
    p.add_argument("spec", nargs="+", metavar="KEY=VALUE")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_make_masks)

    p = sub.add_parser("make-toy", help="write a procedural toy dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--density", type=float, default=1.0)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; bad flags are validation errors here
        return 1 if exc.code == 2 else (exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NanosynthError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
