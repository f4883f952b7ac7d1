"""Command-line interface.

    slidemil <subcommand> [options]

Subcommands: synth, preprocess, encode, split, train, evaluate, sweep,
heatmap. Every subcommand accepts --config FILE (JSON); explicit flags
override config values, which override built-in defaults.

Exit codes: 0 success, 1 command-line usage error, 2 runtime failure
(bad inputs, missing files, failed runs).
"""

import argparse
import json
import os
import sys

import numpy as np

from . import bagio, encode, evalx, preprocess, runner, train
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import SlideMilError


class UsageError(Exception):
    """Bad or missing command-line options (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _fractions(text):
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated "
                                         "fractions, e.g. 0.7,0.15,0.15")
    return tuple(parts)


def _int_pair(text):
    parts = [int(p) for p in str(text).split(",")]
    if len(parts) == 1:
        return (parts[0], parts[0])
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected min,max")
    return tuple(parts)


class _Options:
    """Merged view over flags, --config JSON, and hard defaults."""

    def __init__(self, args):
        self.args = args
        self.config = {}
        path = getattr(args, "config", None)
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                self.config = json.load(fh)
            if not isinstance(self.config, dict):
                raise ValueError(f"config {path} must hold a JSON object")

    def get(self, name, default=None):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        return self.config.get(name, default)

    def require(self, name):
        value = self.get(name)
        if value is None:
            raise UsageError(
                f"missing required option --{name.replace('_', '-')}")
        return value


def _family_of(model):
    if model.kind == "transmil":
        return "transmil"
    return "clam_sb" if model.config.branch_mode == "SB" else "clam_mb"


def _load_bag_dir(opts, index, encoder_id):
    dataset = opts.require("dataset")
    base = dataset if os.path.isdir(dataset) else os.path.dirname(
        os.path.abspath(dataset))
    bags_root = opts.get("bags", os.path.join(base, "bags"))
    return runner._load_bags(bags_root, encoder_id, index)


# --- subcommands ---------------------------------------------------------


def _cmd_synth(opts):
    spec = bagio.SyntheticSpec(
        num_classes=int(opts.get("classes", 3)),
        bags_per_class=int(opts.get("bags_per_class", 20)),
        instances_per_bag=opts.get("instances", (40, 60)),
        feature_dim=int(opts.get("dim", 64)),
        signal_fraction=float(opts.get("signal_fraction", 0.05)),
        signal_separation=float(opts.get("separation", 6.0)),
        noise_sigma=float(opts.get("noise_sigma", 1.0)),
        seed=int(opts.get("seed", 0)))
    outdir = opts.require("out")
    index, bags, masks = bagio.generate_synthetic(spec)
    bagio.write_synthetic_dataset(outdir, index, bags, masks)
    print(f"wrote {len(index)} synthetic bags "
          f"({spec.num_classes} classes) to {outdir}")
    return 0


def _cmd_preprocess(opts):
    image = opts.require("image")
    out = opts.require("out")
    img = preprocess.load_image_pyramid(
        image,
        base_magnification=float(opts.get("base_magnification", 20.0)),
        num_levels=int(opts.get("levels", 4)))
    params = preprocess.SegmentationParams(
        **opts.config.get("segmentation", {}))
    mask = preprocess.segment_tissue(img, params)
    manifest = preprocess.extract_patch_grid(
        img, mask,
        magnification=float(opts.get("magnification", 20.0)),
        patch_size=int(opts.get("patch_size", 256)),
        stride=opts.get("stride"))
    manifest.slide_id = opts.get(
        "slide_id", os.path.splitext(os.path.basename(image))[0])
    preprocess.write_patch_manifest(manifest, out)
    print(f"{manifest.slide_id}: {len(manifest.coordinates)} patches "
          f"at {manifest.magnification}x -> {out}")
    return 0


def _cmd_encode(opts):
    image = opts.require("image")
    manifest = preprocess.read_patch_manifest(opts.require("manifest"))
    out = opts.require("out")
    spec = encode.default_spec(opts.require("encoder"),
                               weights_source=opts.get("weights"))
    enc = encode.load_encoder(spec)
    img = preprocess.load_image_pyramid(
        image,
        base_magnification=float(opts.get("base_magnification", 20.0)),
        num_levels=int(opts.get("levels", 4)))
    bag = encode.encode_slide(enc, img, manifest,
                              batch_size=int(opts.get("batch_size", 64)))
    bagio.write_feature_bag(bag, out)
    print(f"{bag.slide_id}: {bag.num_instances}x{bag.feature_dim} "
          f"features ({bag.encoder_id}) -> {out}")
    return 0


def _cmd_split(opts):
    index = bagio.build_index(opts.require("dataset"))
    split = bagio.make_split(index,
                             data_seed=int(opts.get("data_seed", 0)),
                             fractions=opts.get("fractions",
                                                (0.70, 0.15, 0.15)))
    out = opts.require("out")
    bagio.write_split(split, out)
    print(f"split seed={split.data_seed}: {len(split.train)} train / "
          f"{len(split.val)} val / {len(split.test)} test -> {out}")
    return 0


def _cmd_train(opts):
    index = bagio.build_index(opts.require("dataset"))
    labels = index.labels()
    encoder_id = opts.require("encoder")
    family = opts.require("model")
    bags = _load_bag_dir(opts, index, encoder_id)
    split_path = opts.get("split")
    if split_path:
        split = bagio.read_split(split_path)
    else:
        split = bagio.make_split(index,
                                 data_seed=int(opts.get("data_seed", 0)),
                                 fractions=opts.get("fractions",
                                                    (0.70, 0.15, 0.15)))
    input_dim = next(iter(bags.values())).feature_dim
    model_config = runner._model_config(
        family, input_dim, index.num_classes,
        opts.config.get("model_overrides", {}))
    train_kwargs = dict(opts.config.get("train", {}))
    for key in ("learning_rate", "weight_decay", "max_epochs", "min_epochs",
                "patience", "optimizer", "model_seed"):
        value = getattr(opts.args, key, None)
        if value is not None:
            train_kwargs[key] = value
    train_config = train.TrainConfig(**train_kwargs)
    model, log = train.train_model(family, model_config, bags, labels,
                                   split, train_config)
    outdir = opts.require("out")
    os.makedirs(outdir, exist_ok=True)
    save_checkpoint(model, os.path.join(outdir, "checkpoint.npz"),
                    extra_meta={"encoder_id": encoder_id,
                                "model_seed": train_config.model_seed,
                                "data_seed": split.data_seed})
    train.write_training_log(log, os.path.join(outdir, "log.jsonl"))
    best = min(row["val_loss"] for row in log)
    print(f"{family} on {encoder_id}: {len(log)} epochs, "
          f"best val loss {best:.4f} -> {outdir}")
    return 0


def _cmd_evaluate(opts):
    model, meta = load_checkpoint(opts.require("checkpoint"))
    encoder_id = opts.get("encoder", meta.get("encoder_id"))
    if encoder_id is None:
        raise ValueError("checkpoint lacks an encoder id; pass --encoder")
    index = bagio.build_index(opts.require("dataset"))
    labels = index.labels()
    bags = _load_bag_dir(opts, index, encoder_id)
    split = bagio.read_split(opts.require("split"))
    records = runner.evaluate_model(model, bags, labels, split.test)
    metrics = evalx.run_metrics(
        records,
        data_seed=split.data_seed,
        model_seed=int(meta.get("model_seed", 0)),
        model=_family_of(model),
        encoder_id=encoder_id,
        epochs_trained=int(meta.get("epochs_trained", 0)))
    print(f"accuracy   {metrics.accuracy:.4f}")
    print(f"auc        {metrics.auc:.4f}")
    print(f"confidence {metrics.confidence:.4f}")
    out = opts.get("out")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(dict(metrics.__dict__), fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"metrics -> {out}")
    return 0


def _cmd_sweep(opts):
    plan = runner.ExperimentPlan.from_json(opts.require("plan"))
    progress = None if opts.get("quiet") else print
    report = runner.run_sweep(plan, progress=progress)
    print(evalx.aggregate_to_text(report.aggregate), end="")
    print(f"{len(report.runs)} runs -> {plan.output_dir}")
    return 0


def _cmd_heatmap(opts):
    model, meta = load_checkpoint(opts.require("checkpoint"))
    bag = bagio.read_feature_bag(opts.require("bag"))
    manifest = preprocess.read_patch_manifest(opts.require("manifest"))
    out = opts.require("out")
    kwargs = {
        "colormap": opts.get("colormap", "coolwarm"),
        "alpha": float(opts.get("alpha", 0.6)),
        "canvas_long_side": int(opts.get("canvas_long_side", 1024)),
    }
    thumb_path = opts.get("thumbnail")
    if thumb_path:
        from PIL import Image
        kwargs["thumbnail"] = np.asarray(
            Image.open(thumb_path).convert("RGB"))
        kwargs["thumbnail_downsample"] = float(
            opts.require("thumbnail_downsample"))
    runner.export_heatmap(bag, manifest, model, out,
                          model_encoder_id=meta.get("encoder_id"), **kwargs)
    print(f"heatmap for {bag.slide_id} -> {out}")
    return 0


# --- parser --------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="JSON file with option defaults")


def build_parser():
    parser = _Parser(prog="slidemil",
                     description="Weakly-supervised whole-slide "
                                 "classification toolkit")
    subs = parser.add_subparsers(dest="command", metavar="subcommand")
    subs.required = True

    p = subs.add_parser("synth", parents=[], description=_cmd_synth.__doc__,
                        help="generate a planted-signal synthetic dataset")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--classes", type=int)
    p.add_argument("--bags-per-class", type=int, dest="bags_per_class")
    p.add_argument("--instances", type=_int_pair,
                   help="instances per bag: min,max")
    p.add_argument("--dim", type=int, help="feature dimension")
    p.add_argument("--signal-fraction", type=float, dest="signal_fraction")
    p.add_argument("--separation", type=float)
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--seed", type=int)
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("preprocess",
                        help="segment tissue and write a patch manifest")
    p.add_argument("--image", help="slide image (PNG/TIFF/JPEG)")
    p.add_argument("--out", help="output manifest JSON")
    p.add_argument("--slide-id", dest="slide_id")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--stride", type=int)
    p.add_argument("--magnification", type=float)
    p.add_argument("--base-magnification", type=float,
                   dest="base_magnification")
    p.add_argument("--levels", type=int, help="pyramid levels to build")
    _add_common(p)
    p.set_defaults(func=_cmd_preprocess)

    p = subs.add_parser("encode",
                        help="encode manifest patches into a feature bag")
    p.add_argument("--image")
    p.add_argument("--manifest")
    p.add_argument("--encoder", help="registered encoder id")
    p.add_argument("--weights", help="encoder weights file")
    p.add_argument("--out", help="output .milfb path")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--base-magnification", type=float,
                   dest="base_magnification")
    p.add_argument("--levels", type=int)
    _add_common(p)
    p.set_defaults(func=_cmd_encode)

    p = subs.add_parser("split",
                        help="write a patient-disjoint train/val/test split")
    p.add_argument("--dataset", help="dataset.json or its directory")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--fractions", type=_fractions,
                   help="train,val,test e.g. 0.7,0.15,0.15")
    p.add_argument("--out", help="output split JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_split)

    p = subs.add_parser("train", help="train one model on one split")
    p.add_argument("--dataset")
    p.add_argument("--bags", help="bag root (containing <encoder>/ dirs)")
    p.add_argument("--encoder")
    p.add_argument("--model", choices=list(train.MODEL_FAMILIES))
    p.add_argument("--split", help="split JSON (else derived from seed)")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--fractions", type=_fractions)
    p.add_argument("--model-seed", type=int, dest="model_seed")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--min-epochs", type=int, dest="min_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--optimizer", choices=["adam", "lookahead_adam"])
    p.add_argument("--out", help="output directory")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("evaluate",
                        help="score a checkpoint on a split's test set")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--bags")
    p.add_argument("--encoder", help="override checkpoint encoder id")
    p.add_argument("--split")
    p.add_argument("--out", help="optional metrics JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = subs.add_parser("sweep", help="run a seed sweep from a plan file")
    p.add_argument("--plan", help="plan JSON")
    p.add_argument("--quiet", action="store_true", default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = subs.add_parser("heatmap", help="render an attention heatmap PNG")
    p.add_argument("--checkpoint")
    p.add_argument("--bag", help=".milfb feature bag")
    p.add_argument("--manifest", help="patch manifest JSON")
    p.add_argument("--out", help="output PNG")
    p.add_argument("--colormap")
    p.add_argument("--alpha", type=float)
    p.add_argument("--canvas-long-side", type=int, dest="canvas_long_side")
    p.add_argument("--thumbnail", help="backdrop image")
    p.add_argument("--thumbnail-downsample", type=float,
                   dest="thumbnail_downsample",
                   help="level-0 pixels per thumbnail pixel")
    _add_common(p)
    p.set_defaults(func=_cmd_heatmap)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = _Options(args)
        return args.func(opts)
    except UsageError as exc:
        print(f"slidemil: error: {exc}", file=sys.stderr)
        return 1
    except (SlideMilError, OSError, ValueError, KeyError) as exc:
        print(f"slidemil: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
