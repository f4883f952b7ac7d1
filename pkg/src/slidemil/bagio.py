"""Data model, on-disk formats, patient-disjoint splitting, synthetic bags.

The dataset manifest is a JSON array of records with keys slide_id,
patient_id, class_name, path, magnifications. Feature bags use the MILFB1
binary format (see write_feature_bag). Splits persist as JSON
{data_seed, train, val, test}.
"""

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic, DuplicateSlideId, EmptyIndex, InvalidSpec, NonFiniteFeature,
    TooFewPatients, TruncatedFile, UnknownClass, UnsupportedVersion,
)

MAGIC = b"MILFB1\x00"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}


@dataclass
class SlideRecord:
    """One slide: identity, patient grouping, class label, source location."""
    slide_id: str
    patient_id: str
    label: int
    class_name: str
    source_path: str | None = None
    available_magnifications: list = field(default_factory=list)


@dataclass
class PatchManifest:
    """Patch grid for one slide; coordinates are level-0 top-left corners."""
    slide_id: str
    magnification: float
    patch_size: int
    coordinates: list
    segmentation_params: dict = field(default_factory=dict)


@dataclass
class FeatureBag:
    """Instance feature matrix for one slide, row i matching coordinate i."""
    slide_id: str
    encoder_id: str
    features: np.ndarray  # (N, D) float32

    @property
    def num_instances(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]


@dataclass
class SplitSpec:
    """Patient-disjoint train/val/test slide lists for one data seed."""
    data_seed: int
    train: list
    val: list
    test: list
    fractions: tuple = (0.70, 0.15, 0.15)


@dataclass
class SyntheticSpec:
    """Parameters for planted-signal synthetic bags."""
    num_classes: int
    bags_per_class: int
    instances_per_bag: tuple  # (min, max) inclusive
    feature_dim: int
    signal_fraction: float
    signal_separation: float
    noise_sigma: float
    seed: int

    def validate(self):
        lo, hi = self.instances_per_bag
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")
        if self.feature_dim < self.num_classes:
            raise InvalidSpec("feature_dim must be >= num_classes "
                              "(class means sit on distinct axes)")
        if not (0.0 < self.signal_fraction <= 1.0):
            raise InvalidSpec("signal_fraction must be in (0, 1]")
        if lo < 1 or hi < lo:
            raise InvalidSpec("instances_per_bag range invalid")
        if self.signal_fraction * lo < 1.0:
            raise InvalidSpec("signal_fraction * min_instances must be >= 1")
        if self.signal_separation <= 0:
            raise InvalidSpec("signal_separation must be positive")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be non-negative")
        if self.bags_per_class < 1:
            raise InvalidSpec("bags_per_class must be >= 1")


class DatasetIndex:
    """Ordered slide records plus the class table (lexicographic names)."""

    def __init__(self, records, class_names):
        self.records = list(records)
        self.class_names = list(class_names)
        self._by_id = {r.slide_id: r for r in self.records}

    @property
    def num_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, slide_id):
        return self._by_id[slide_id]

    def class_counts(self):
        counts = {name: 0 for name in self.class_names}
        for r in self.records:
            counts[r.class_name] += 1
        return counts

    def labels(self):
        return {r.slide_id: r.label for r in self.records}


def index_from_records(raw_records):
    """Build a DatasetIndex from dict records (slide_id, patient_id, class_name, ...)."""
    if not raw_records:
        raise EmptyIndex("no slide records")
    seen = set()
    class_names = set()
    for rec in raw_records:
        sid = rec.get("slide_id")
        if sid in seen:
            raise DuplicateSlideId(f"slide_id repeated: {sid}")
        seen.add(sid)
        cname = rec.get("class_name")
        if not cname:
            raise UnknownClass(f"record {sid} lacks class_name")
        if not rec.get("patient_id"):
            raise ValueError(f"record {sid} lacks patient_id")
        class_names.add(cname)
    ordered = sorted(class_names)
    label_of = {name: i for i, name in enumerate(ordered)}
    records = [
        SlideRecord(
            slide_id=rec["slide_id"],
            patient_id=rec["patient_id"],
            label=label_of[rec["class_name"]],
            class_name=rec["class_name"],
            source_path=rec.get("path"),
            available_magnifications=list(rec.get("magnifications", [])),
        )
        for rec in raw_records
    ]
    return DatasetIndex(records, ordered)


def build_index(root):
    """Load a dataset index from a manifest JSON file or a directory holding dataset.json."""
    path = root
    if os.path.isdir(root):
        path = os.path.join(root, "dataset.json")
    if not os.path.exists(path):
        raise EmptyIndex(f"no dataset manifest at {path}")
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise EmptyIndex("dataset manifest must be a JSON array of records")
    return index_from_records(raw)


def write_index(index, path):
    raw = [
        {
            "slide_id": r.slide_id,
            "patient_id": r.patient_id,
            "class_name": r.class_name,
            "path": r.source_path,
            "magnifications": r.available_magnifications,
        }
        for r in index.records
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(raw, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- splitting --------------------------------------------------------


def make_split(index, data_seed, fractions=(0.70, 0.15, 0.15)):
    """Patient-disjoint split; deterministic in (index, data_seed, fractions).

    Patients are shuffled by a PRNG seeded with data_seed and assigned whole
    to train until the target slide count is reached, then to val, then the
    remainder to test.
    """
    f_train, f_val, f_test = fractions
    if min(fractions) <= 0:
        raise ValueError("fractions must be positive")
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")

    slides_of = {}
    for r in index.records:
        slides_of.setdefault(r.patient_id, []).append(r.slide_id)
    patients = sorted(slides_of)
    rng = np.random.default_rng(data_seed)
    rng.shuffle(patients)

    n_total = len(index.records)
    target_train = f_train * n_total
    target_val = f_val * n_total

    train, val, test = [], [], []
    phase = 0
    for patient in patients:
        if phase == 0 and len(train) >= target_train:
            phase = 1
        if phase == 1 and len(val) >= target_val:
            phase = 2
        bucket = (train, val, test)[phase]
        bucket.extend(slides_of[patient])

    if not train or not val or not test:
        raise TooFewPatients(
            f"{len(patients)} patients cannot fill all three partitions")
    return SplitSpec(data_seed=data_seed, train=train, val=val, test=test,
                     fractions=tuple(fractions))


def write_split(split, path):
    payload = {"data_seed": split.data_seed, "train": split.train,
               "val": split.val, "test": split.test}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_split(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return SplitSpec(data_seed=payload["data_seed"], train=payload["train"],
                     val=payload["val"], test=payload["test"])


# --- MILFB1 binary bag format ------------------------------------------


def write_feature_bag(bag, path):
    """Serialize a FeatureBag to the MILFB1 binary format (little-endian)."""
    features = np.ascontiguousarray(bag.features, dtype="<f4")
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise ValueError(f"features must be a non-empty 2-D matrix, "
                         f"got shape {features.shape}")
    if not np.isfinite(features).all():
        raise NonFiniteFeature(f"bag {bag.slide_id} holds non-finite values")
    enc = bag.encoder_id.encode("utf-8")
    sid = bag.slide_id.encode("utf-8")
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", n))
        fh.write(struct.pack("<I", d))
        fh.write(struct.pack("<B", 0))
        fh.write(struct.pack("<H", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<H", len(sid)))
        fh.write(sid)
        fh.write(features.tobytes())


def _take(buf, offset, size, path):
    if offset + size > len(buf):
        raise TruncatedFile(f"{path}: expected {size} bytes at offset {offset}")
    return buf[offset:offset + size], offset + size


def read_feature_bag(path):
    """Parse a MILFB1 file; inverse of write_feature_bag, bit-exactly."""
    with open(path, "rb") as fh:
        buf = fh.read()
    chunk, off = _take(buf, 0, len(MAGIC), path)
    if chunk != MAGIC:
        raise BadMagic(f"{path}: bad magic {chunk!r}")
    chunk, off = _take(buf, off, 4, path)
    version = struct.unpack("<I", chunk)[0]
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    chunk, off = _take(buf, off, 8, path)
    n = struct.unpack("<Q", chunk)[0]
    chunk, off = _take(buf, off, 4, path)
    d = struct.unpack("<I", chunk)[0]
    chunk, off = _take(buf, off, 1, path)
    dtype_code = struct.unpack("<B", chunk)[0]
    if dtype_code not in DTYPE_CODES:
        raise UnsupportedVersion(f"{path}: unknown dtype code {dtype_code}")
    dtype = DTYPE_CODES[dtype_code]
    chunk, off = _take(buf, off, 2, path)
    enc_len = struct.unpack("<H", chunk)[0]
    chunk, off = _take(buf, off, enc_len, path)
    encoder_id = chunk.decode("utf-8")
    chunk, off = _take(buf, off, 2, path)
    sid_len = struct.unpack("<H", chunk)[0]
    chunk, off = _take(buf, off, sid_len, path)
    slide_id = chunk.decode("utf-8")
    payload, off = _take(buf, off, n * d * dtype.itemsize, path)
    if off != len(buf):
        raise TruncatedFile(f"{path}: {len(buf) - off} unexpected trailing "
                            f"bytes after the feature matrix")
    features = np.frombuffer(payload, dtype=dtype).reshape(n, d).copy()
    if not np.isfinite(features).all():
        raise NonFiniteFeature(f"{path}: non-finite feature values")
    return FeatureBag(slide_id=slide_id, encoder_id=encoder_id,
                      features=features)


# --- synthetic planted-signal bags --------------------------------------


def generate_synthetic(spec):
    """Generate planted-signal bags.

    Per bag of class c, ceil(signal_fraction * N) instances are drawn from
    Normal(mu_c, sigma^2 I) with mu_c = signal_separation * e_c (so distinct
    class means are signal_separation * sqrt(2) apart); the rest come from
    Normal(0, sigma^2 I). Signal rows are scattered at seeded-random
    positions and flagged in the returned boolean masks.

    Returns:
        (DatasetIndex, dict slide_id -> FeatureBag, dict slide_id -> bool mask)
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.instances_per_bag

    raw_records = []
    bags = {}
    masks = {}
    for c in range(spec.num_classes):
        class_name = f"class{c}"
        mean = np.zeros(spec.feature_dim)
        mean[c] = spec.signal_separation
        for b in range(spec.bags_per_class):
            n = int(rng.integers(lo, hi + 1))
            n_signal = math.ceil(spec.signal_fraction * n)
            features = spec.noise_sigma * rng.standard_normal(
                (n, spec.feature_dim))
            positions = rng.permutation(n)[:n_signal]
            features[positions] += mean
            mask = np.zeros(n, dtype=bool)
            mask[positions] = True
            slide_id = f"syn_{class_name}_{b:03d}"
            raw_records.append({
                "slide_id": slide_id,
                "patient_id": slide_id,
                "class_name": class_name,
            })
            bags[slide_id] = FeatureBag(
                slide_id=slide_id, encoder_id="synthetic",
                features=features.astype(np.float32))
            masks[slide_id] = mask
    index = index_from_records(raw_records)
    return index, bags, masks


def write_synthetic_dataset(outdir, index, bags, masks):
    """Persist a synthetic dataset: dataset.json, bags/synthetic/*.milfb, masks.npz."""
    os.makedirs(outdir, exist_ok=True)
    write_index(index, os.path.join(outdir, "dataset.json"))
    bag_dir = os.path.join(outdir, "bags", "synthetic")
    os.makedirs(bag_dir, exist_ok=True)
    for slide_id, bag in bags.items():
        write_feature_bag(bag, os.path.join(bag_dir, f"{slide_id}.milfb"))
    np.savez(os.path.join(outdir, "masks.npz"),
             **{sid: m for sid, m in masks.items()})
