"""Seed-sweep experiment runner and attention heatmap export.

A sweep executes the nested loop (encoder x model x data_seed x model_seed),
training one model per combination and scoring it on the held-out test
split. Completed runs are detected by a content hash of their configuration
and skipped on rerun, so interrupted sweeps resume where they stopped.
Everything is seeded; two sweeps over the same plan produce byte-identical
CSV outputs.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import evalx
from .attnmil import ClamConfig
from .bagio import build_index, make_split, read_feature_bag
from .checkpoint import save_checkpoint
from .errors import EncoderMismatch, MissingBags
from .evalx import PredictionRecord, RunMetrics
from .train import MODEL_FAMILIES, TrainConfig, train_model, write_training_log
from .transmil import TransmilConfig

DETERMINISTIC_ENV_VAR = "SLIDEMIL_DETERMINISTIC"


def deterministic_mode():
    """Deterministic execution flag (default on; all code paths honor it)."""
    value = os.environ.get(DETERMINISTIC_ENV_VAR, "1").strip().lower()
    return value not in ("0", "false", "off", "no")


@dataclass
class ExperimentPlan:
    dataset: str
    output_dir: str
    models: list
    encoders: list
    data_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    model_seeds: list = field(default_factory=lambda: [0, 1, 2])
    bags_root: str | None = None
    fractions: tuple = (0.70, 0.15, 0.15)
    model_overrides: dict = field(default_factory=dict)  # per model family
    train: dict = field(default_factory=dict)            # TrainConfig fields

    def validate(self):
        if len(set(self.data_seeds)) != len(self.data_seeds):
            raise ValueError("data_seeds must be distinct")
        if len(set(self.model_seeds)) != len(self.model_seeds):
            raise ValueError("model_seeds must be distinct")
        unknown = [m for m in self.models if m not in MODEL_FAMILIES]
        if unknown:
            raise ValueError(f"unknown models {unknown}; "
                             f"expected subset of {MODEL_FAMILIES}")
        if not self.models or not self.encoders:
            raise ValueError("plan needs at least one model and one encoder")

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown plan fields: {sorted(unknown)}")
        plan = cls(**raw)
        plan.fractions = tuple(plan.fractions)
        base = os.path.dirname(os.path.abspath(path))
        plan.dataset = os.path.join(base, plan.dataset) \
            if not os.path.isabs(plan.dataset) else plan.dataset
        plan.output_dir = os.path.join(base, plan.output_dir) \
            if not os.path.isabs(plan.output_dir) else plan.output_dir
        if plan.bags_root and not os.path.isabs(plan.bags_root):
            plan.bags_root = os.path.join(base, plan.bags_root)
        return plan


@dataclass
class SweepReport:
    runs: list
    aggregate: dict
    provenance: dict


def predict_probabilities(model, features):
    """Class probabilities from either model family."""
    if model.kind == "clam":
        return model.predict(features)[1]
    return model.predict(features)[0]


def attention_values(model, features):
    """Per-instance attention used for heatmaps.

    CLAM: weights of the predicted class's branch (the only branch in SB).
    TransMIL: class-token attention row with pad tokens dropped.
    """
    if model.kind == "clam":
        out, probs = model.predict(features)
        weights = out.attention_weights
        if weights.ndim == 1:
            return weights
        return weights[int(np.argmax(probs))]
    return model.predict(features)[1]


def _load_bags(bags_root, encoder_id, index):
    bag_dir = os.path.join(bags_root, encoder_id)
    missing = [r.slide_id for r in index.records
               if not os.path.exists(os.path.join(bag_dir,
                                                  f"{r.slide_id}.milfb"))]
    if missing:
        raise MissingBags(f"encoder {encoder_id}: no bags for "
                          f"{sorted(missing)}")
    bags = {}
    for r in index.records:
        bag = read_feature_bag(os.path.join(bag_dir, f"{r.slide_id}.milfb"))
        if bag.encoder_id != encoder_id:
            raise EncoderMismatch(
                f"bag {r.slide_id} was encoded by {bag.encoder_id!r}, "
                f"expected {encoder_id!r}")
        bags[r.slide_id] = bag
    return bags


def _model_config(family, input_dim, num_classes, overrides):
    kwargs = dict(overrides.get(family, {}))
    if family == "transmil":
        return TransmilConfig(input_dim=input_dim, num_classes=num_classes,
                              **kwargs)
    kwargs.setdefault("branch_mode", "SB" if family == "clam_sb" else "MB")
    return ClamConfig(input_dim=input_dim, num_classes=num_classes, **kwargs)


def _config_hash(payload):
    canonical = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def evaluate_model(model, bags, labels, slide_ids):
    """Score each slide; returns PredictionRecords in slide_ids order."""
    return [PredictionRecord(
        slide_id=sid, label=labels[sid],
        probabilities=predict_probabilities(model, bags[sid].features))
        for sid in slide_ids]


def run_sweep(plan, progress=None):
    """Execute the full nested sweep; resume completed runs by config hash.

    Args:
        plan: ExperimentPlan.
        progress: optional callable(str) for status lines.

    Returns:
        SweepReport with all RunMetrics, aggregates, and provenance.
    """
    plan.validate()
    say = progress or (lambda msg: None)
    index = build_index(plan.dataset)
    labels = index.labels()
    bags_root = plan.bags_root or os.path.join(
        os.path.dirname(os.path.abspath(plan.dataset)), "bags")
    os.makedirs(os.path.join(plan.output_dir, "runs"), exist_ok=True)

    runs = []
    run_listing = []
    for encoder_id in plan.encoders:
        bags = _load_bags(bags_root, encoder_id, index)
        input_dim = next(iter(bags.values())).feature_dim
        for family in plan.models:
            model_config = _model_config(family, input_dim,
                                         index.num_classes,
                                         plan.model_overrides)
            for data_seed in plan.data_seeds:
                split = make_split(index, data_seed, plan.fractions)
                for model_seed in plan.model_seeds:
                    train_config = TrainConfig(
                        **{**plan.train, "model_seed": model_seed})
                    run_payload = {
                        "encoder": encoder_id,
                        "model": family,
                        "data_seed": data_seed,
                        "model_seed": model_seed,
                        "fractions": list(plan.fractions),
                        "model_config": model_config.to_dict(),
                        "train_config": train_config.to_dict(),
                    }
                    cfg_hash = _config_hash(run_payload)
                    run_name = (f"{family}_{encoder_id}"
                                f"_d{data_seed}_m{model_seed}")
                    run_dir = os.path.join(plan.output_dir, "runs", run_name)
                    metrics_path = os.path.join(run_dir, "metrics.json")
                    cached = _load_cached_metrics(metrics_path, cfg_hash)
                    if cached is not None:
                        say(f"skip {run_name} (complete)")
                        runs.append(cached)
                        run_listing.append({"run": run_name,
                                            "config_hash": cfg_hash})
                        continue
                    say(f"run {run_name}")
                    try:
                        model, log = train_model(
                            family, model_config, bags, labels, split,
                            train_config)
                    except Exception as exc:
                        raise type(exc)(f"[{run_name}] {exc}") from exc
                    records = evaluate_model(model, bags, labels, split.test)
                    metrics = evalx.run_metrics(
                        records, data_seed=data_seed, model_seed=model_seed,
                        model=family, encoder_id=encoder_id,
                        epochs_trained=len(log))
                    os.makedirs(run_dir, exist_ok=True)
                    save_checkpoint(model,
                                    os.path.join(run_dir, "checkpoint.npz"),
                                    extra_meta={"encoder_id": encoder_id,
                                                "run": run_name})
                    write_training_log(log, os.path.join(run_dir, "log.jsonl"))
                    _write_metrics(metrics_path, metrics, cfg_hash)
                    runs.append(metrics)
                    run_listing.append({"run": run_name,
                                        "config_hash": cfg_hash})

    grouped = evalx.aggregate(runs)
    provenance = {
        "plan_hash": _config_hash({
            "models": plan.models, "encoders": plan.encoders,
            "data_seeds": plan.data_seeds, "model_seeds": plan.model_seeds,
            "fractions": list(plan.fractions),
            "model_overrides": plan.model_overrides, "train": plan.train}),
        "data_seeds": list(plan.data_seeds),
        "model_seeds": list(plan.model_seeds),
        "models": list(plan.models),
        "encoders": list(plan.encoders),
        "runs": run_listing,
        "deterministic": deterministic_mode(),
    }
    _write_report(plan.output_dir, runs, grouped, provenance)
    return SweepReport(runs=runs, aggregate=grouped, provenance=provenance)


def _load_cached_metrics(path, cfg_hash):
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("config_hash") != cfg_hash:
        return None
    fields = {f.name for f in dataclasses.fields(RunMetrics)}
    return RunMetrics(**{k: v for k, v in payload.items() if k in fields})


def _write_metrics(path, metrics, cfg_hash):
    payload = dict(metrics.__dict__)
    payload["config_hash"] = cfg_hash
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_report(output_dir, runs, grouped, provenance):
    with open(os.path.join(output_dir, "results.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(evalx.metrics_to_csv(runs))
    with open(os.path.join(output_dir, "aggregate.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(evalx.aggregate_to_csv(grouped))
    with open(os.path.join(output_dir, "aggregate.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(evalx.aggregate_to_text(grouped))
    with open(os.path.join(output_dir, "report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- heatmaps -----------------------------------------------------------


def _normalize_attention(values):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-300:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def _patch_span(manifest):
    """Patch footprint in coordinate units, derived from the grid pitch."""
    coords = np.asarray(manifest.coordinates, dtype=np.int64)
    spans = []
    for axis in range(2):
        uniq = np.unique(coords[:, axis])
        if uniq.size > 1:
            spans.append(int(np.diff(uniq).min()))
    return min(spans) if spans else int(manifest.patch_size)


def render_heatmap(values, manifest, thumbnail=None,
                   thumbnail_downsample=None, colormap="coolwarm",
                   canvas_long_side=1024, alpha=0.6):
    """Paint min-max-normalized attention onto patch footprints.

    Args:
        values: (N,) attention, one per manifest coordinate.
        manifest: PatchManifest giving patch positions.
        thumbnail: optional (H, W, 3) uint8 backdrop; when omitted the map
            renders on white at canvas_long_side resolution.
        thumbnail_downsample: coordinate units per thumbnail pixel (required
            with thumbnail).
        colormap: matplotlib colormap name.
        alpha: blend factor of the heat color over the backdrop.

    Returns:
        (H, W, 3) uint8 canvas.
    """
    import matplotlib

    coords = np.asarray(manifest.coordinates, dtype=np.float64)
    if coords.shape[0] != np.asarray(values).shape[0]:
        raise ValueError(f"{coords.shape[0]} coordinates vs "
                         f"{np.asarray(values).shape[0]} attention values")
    norm = _normalize_attention(values)
    span = _patch_span(manifest)
    extent_x = coords[:, 0].max() + span
    extent_y = coords[:, 1].max() + span
    if thumbnail is not None:
        if thumbnail_downsample is None:
            raise ValueError("thumbnail requires thumbnail_downsample")
        canvas = np.asarray(thumbnail, dtype=np.float64).copy()
        ds = float(thumbnail_downsample)
    else:
        ds = max(extent_x, extent_y) / float(canvas_long_side)
        h = max(1, int(round(extent_y / ds)))
        w = max(1, int(round(extent_x / ds)))
        canvas = np.full((h, w, 3), 255.0)
    cmap = matplotlib.colormaps[colormap]
    colors = cmap(norm)[:, :3] * 255.0
    for (x, y), color in zip(coords, colors):
        x0 = int(round(x / ds))
        y0 = int(round(y / ds))
        x1 = min(canvas.shape[1], int(round((x + span) / ds)))
        y1 = min(canvas.shape[0], int(round((y + span) / ds)))
        if x1 <= x0 or y1 <= y0:
            continue
        region = canvas[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1] = (1.0 - alpha) * region + alpha * color
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def export_heatmap(bag, manifest, model, out_path, model_encoder_id=None,
                   **render_kwargs):
    """Render a slide's attention heatmap to a PNG file.

    Raises EncoderMismatch when the checkpoint was trained on a different
    encoder than the bag, or when feature dimensions disagree.
    """
    from PIL import Image

    if model_encoder_id is not None and model_encoder_id != bag.encoder_id:
        raise EncoderMismatch(
            f"checkpoint encoder {model_encoder_id!r} != bag encoder "
            f"{bag.encoder_id!r}")
    if bag.feature_dim != model.config.input_dim:
        raise EncoderMismatch(
            f"bag feature dim {bag.feature_dim} != model input_dim "
            f"{model.config.input_dim}")
    values = attention_values(model, bag.features)
    canvas = render_heatmap(values, manifest, **render_kwargs)
    Image.fromarray(canvas).save(out_path, format="PNG")
    return out_path
