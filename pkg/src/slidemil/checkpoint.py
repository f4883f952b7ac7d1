"""Single-file model checkpoints: one npz with a config record + tensors."""

import json

import numpy as np

from .attnmil import ClamConfig, ClamModel
from .transmil import TransmilConfig, TransmilModel

_FAMILIES = {"clam": (ClamConfig, ClamModel),
             "transmil": (TransmilConfig, TransmilModel)}


def save_checkpoint(model, path, extra_meta=None):
    """Write model config + named parameter tensors to one .npz archive."""
    meta = {"kind": model.kind, "config": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param/{name}": var.data for name, var in model.params.items()}
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Rebuild the model from an archive; returns (model, meta dict)."""
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"].tobytes()).decode("utf-8"))
        arrays = {key[len("param/"):]: archive[key]
                  for key in archive.files if key.startswith("param/")}
    kind = meta["kind"]
    if kind not in _FAMILIES:
        raise ValueError(f"unknown model kind in checkpoint: {kind!r}")
    config_cls, model_cls = _FAMILIES[kind]
    model = model_cls(config_cls(**meta["config"]))
    expected = set(model.params)
    if set(arrays) != expected:
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        raise ValueError(f"checkpoint tensors mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, value in arrays.items():
        if model.params[name].data.shape != value.shape:
            raise ValueError(f"tensor {name}: shape {value.shape} != "
                             f"{model.params[name].data.shape}")
        model.params[name].data[...] = value
    return model, meta
