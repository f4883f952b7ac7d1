"""Patch encoders: registry, deterministic test encoder, CNN adapters.

The random-projection encoder keeps the full pipeline testable without any
external weight bundle. The CNN adapters (ResNet50 truncated after its third
stage, DenseNet121, KimiaNet) import torch lazily and consume pre-trained
weight bundles from disk; nothing here trains or downloads weights.
"""

import hashlib
from dataclasses import dataclass

import cv2
import numpy as np

from .bagio import FeatureBag
from .errors import (
    DimMismatch, EmptyManifest, NonFiniteFeature, UnknownEncoder,
    WeightsNotFound,
)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class EncoderSpec:
    encoder_id: str
    output_dim: int
    input_size: int = 224
    normalization: tuple = (IMAGENET_MEAN, IMAGENET_STD)
    weights_source: str | None = None


class Encoder:
    """Maps uint8 patch blocks to float32 feature rows, order preserving."""

    def __init__(self, spec):
        self.spec = spec

    @property
    def encoder_id(self):
        return self.spec.encoder_id

    @property
    def output_dim(self):
        return self.spec.output_dim

    def encode_batch(self, blocks):
        """blocks: (B, H, W, 3) uint8 -> (B, D) float32."""
        raise NotImplementedError


def _normalize_blocks(blocks, spec):
    """Resize to spec.input_size, scale to [0,1], per-channel normalize."""
    blocks = np.asarray(blocks)
    if blocks.ndim != 4 or blocks.shape[3] != 3:
        raise ValueError(f"expected (B, H, W, 3) blocks, got {blocks.shape}")
    size = spec.input_size
    if blocks.shape[1] != size or blocks.shape[2] != size:
        resized = np.empty((blocks.shape[0], size, size, 3), dtype=blocks.dtype)
        for i, b in enumerate(blocks):
            resized[i] = cv2.resize(b, (size, size),
                                    interpolation=cv2.INTER_AREA)
        blocks = resized
    mean, std = spec.normalization
    x = blocks.astype(np.float64) / 255.0
    x -= np.asarray(mean)
    x /= np.asarray(std)
    return x


def _seed_from_id(encoder_id):
    digest = hashlib.sha256(encoder_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RandomProjectionEncoder(Encoder):
    """Seeded Gaussian random projection of the flattened normalized patch.

    The projection matrix is drawn once from a PRNG seeded by a hash of the
    encoder_id, so equal ids give equal features on equal pixels. Output is
    X @ W / sqrt(D) with W entries standard normal.
    """

    def __init__(self, spec):
        super().__init__(spec)
        rng = np.random.default_rng(_seed_from_id(spec.encoder_id))
        flat_dim = spec.input_size * spec.input_size * 3
        self.projection = rng.standard_normal((flat_dim, spec.output_dim))

    def encode_batch(self, blocks):
        x = _normalize_blocks(blocks, self.spec)
        flat = x.reshape(x.shape[0], -1)
        out = flat @ self.projection / np.sqrt(self.spec.output_dim)
        return out.astype(np.float32)


class _TorchBackboneEncoder(Encoder):
    """Shared plumbing for torchvision-based encoders."""

    def __init__(self, spec):
        super().__init__(spec)
        import os
        if not spec.weights_source or not os.path.exists(spec.weights_source):
            raise WeightsNotFound(
                f"{spec.encoder_id}: weight bundle not found at "
                f"{spec.weights_source!r}")
        import torch
        state = torch.load(spec.weights_source, map_location="cpu",
                           weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        state = {k.removeprefix("module.").removeprefix("model."): v
                 for k, v in state.items()}
        self._torch = torch
        self.model = self._build(state)
        self.model.eval()

    def _build(self, state):
        raise NotImplementedError

    def _check_dim(self, produced):
        if produced != self.spec.output_dim:
            raise DimMismatch(
                f"{self.spec.encoder_id}: bundle produces {produced}-dim "
                f"features, spec says {self.spec.output_dim}")

    def encode_batch(self, blocks):
        torch = self._torch
        x = _normalize_blocks(blocks, self.spec)
        tensor = torch.from_numpy(
            np.ascontiguousarray(x.transpose(0, 3, 1, 2))).float()
        with torch.no_grad():
            feats = self.model(tensor)
        return feats.numpy().astype(np.float32)


class ResNet50TruncatedEncoder(_TorchBackboneEncoder):
    """ResNet50 cut after its third stage, globally average pooled (D=1024)."""

    def _build(self, state):
        import torch.nn as nn
        from torchvision.models import resnet50
        net = resnet50(weights=None)
        missing, _ = net.load_state_dict(state, strict=False)
        essential = [k for k in missing if not k.startswith(("fc.", "layer4"))]
        if essential:
            raise DimMismatch(
                f"{self.spec.encoder_id}: bundle misses keys {essential[:4]}")
        self._check_dim(1024)
        trunk = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                              net.layer1, net.layer2, net.layer3,
                              nn.AdaptiveAvgPool2d(1), nn.Flatten(1))
        return trunk


class DenseNet121Encoder(_TorchBackboneEncoder):
    """DenseNet121 penultimate global-average-pooled features (D=1024).

    Serves both the ImageNet baseline and KimiaNet, which shares the
    architecture and differs only in the weight bundle.
    """

    def _build(self, state):
        import torch.nn as nn
        import torch.nn.functional  # noqa: F401
        from torchvision.models import densenet121
        net = densenet121(weights=None)
        state = {k: v for k, v in state.items()
                 if not k.startswith("classifier.")}
        missing, _ = net.load_state_dict(state, strict=False)
        essential = [k for k in missing if not k.startswith("classifier.")]
        if essential:
            raise DimMismatch(
                f"{self.spec.encoder_id}: bundle misses keys {essential[:4]}")
        self._check_dim(1024)

        class Features(nn.Module):
            def __init__(self, features):
                super().__init__()
                self.features = features
                self.pool = nn.Sequential(nn.ReLU(inplace=False),
                                          nn.AdaptiveAvgPool2d(1),
                                          nn.Flatten(1))

            def forward(self, x):
                return self.pool(self.features(x))

        return Features(net.features)


_DEFAULT_SPECS = {
    "randproj-test": dict(output_dim=64, input_size=32,
                          normalization=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))),
    "resnet50-imagenet": dict(output_dim=1024, input_size=256),
    "densenet121-imagenet": dict(output_dim=1024, input_size=224),
    "kimianet": dict(output_dim=1024, input_size=224),
}

_REGISTRY = {}


def register_encoder(encoder_id, factory):
    """Register a factory(spec) -> Encoder under a unique encoder_id."""
    if encoder_id in _REGISTRY:
        raise ValueError(f"encoder_id already registered: {encoder_id}")
    _REGISTRY[encoder_id] = factory


register_encoder("randproj-test", RandomProjectionEncoder)
register_encoder("resnet50-imagenet", ResNet50TruncatedEncoder)
register_encoder("densenet121-imagenet", DenseNet121Encoder)
register_encoder("kimianet", DenseNet121Encoder)


def default_spec(encoder_id, weights_source=None, output_dim=None):
    """EncoderSpec with the canonical defaults for a known encoder_id."""
    if encoder_id not in _DEFAULT_SPECS:
        raise UnknownEncoder(f"no default spec for {encoder_id!r}")
    kwargs = dict(_DEFAULT_SPECS[encoder_id])
    if output_dim is not None:
        kwargs["output_dim"] = output_dim
    return EncoderSpec(encoder_id=encoder_id, weights_source=weights_source,
                       **kwargs)


def load_encoder(spec):
    """Instantiate the registered encoder for spec.encoder_id."""
    try:
        factory = _REGISTRY[spec.encoder_id]
    except KeyError:
        raise UnknownEncoder(f"unregistered encoder_id: {spec.encoder_id!r}") \
            from None
    return factory(spec)


def encode_slide(encoder, img, manifest, batch_size=64):
    """Encode every manifest patch into one FeatureBag, rows in grid order."""
    from .preprocess import crop_patches
    if not manifest.coordinates:
        raise EmptyManifest(f"manifest for {manifest.slide_id} is empty")
    rows = []
    batch = []
    for _, block in crop_patches(img, manifest):
        batch.append(block)
        if len(batch) == batch_size:
            rows.append(encoder.encode_batch(np.stack(batch)))
            batch = []
    if batch:
        rows.append(encoder.encode_batch(np.stack(batch)))
    features = np.concatenate(rows, axis=0)
    if not np.isfinite(features).all():
        raise NonFiniteFeature(
            f"encoder {encoder.encoder_id} emitted non-finite features "
            f"for {manifest.slide_id}")
    return FeatureBag(slide_id=manifest.slide_id,
                      encoder_id=encoder.encoder_id,
                      features=features.astype(np.float32))
