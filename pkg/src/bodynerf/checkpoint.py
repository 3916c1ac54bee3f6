"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0-7    magic b"BNRFCKPT"
    bytes 8-11   uint32 format version (1)
    bytes 12-19  uint64 header length H
    next H bytes UTF-8 JSON header
    rest         float64 little-endian payload

The header holds the model config, joint count, camera ids, training config
and an ``arrays`` list of {name, shape, offset}; ``offset`` counts float64
values from the start of the payload.  Each parameter ``p`` contributes
``param/p``, ``adam_m/p`` and ``adam_v/p`` (plus its Adam step counter in the
header); the encoder input normalization is stored as ``encoder/mean`` and
``encoder/std``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import HumanRadianceField, ModelConfig

MAGIC = b"BNRFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(model: HumanRadianceField):
    out = []
    for name, p in model.named_parameters():
        m = p.m if p.m is not None else np.zeros_like(p.data)
        v = p.v if p.v is not None else np.zeros_like(p.data)
        out += [(f"param/{name}", p.data), (f"adam_m/{name}", m), (f"adam_v/{name}", v)]
    out += [("encoder/mean", model.encoder.mean), ("encoder/std", model.encoder.std)]
    return out


def save_checkpoint(model: HumanRadianceField, path, train_config: dict | None = None,
                    extra: dict | None = None) -> Path:
    arrays = _arrays(model)
    entries, offset = [], 0
    for name, a in arrays:
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    header = {
        "model_config": model.config.to_dict(),
        "n_joints": model.n_joints,
        "camera_ids": model.latents.ids,
        "steps": {name: int(p.step) for name, p in model.named_parameters()},
        "train_config": train_config or {},
        "extra": extra or {},
        "arrays": entries,
    }
    blob = json.dumps(header).encode("utf-8")
    payload = np.concatenate([np.asarray(a, dtype="<f8").reshape(-1) for _, a in arrays])
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """-> (header, {array name: ndarray})."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[20 + hlen:], dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + n > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {e['name']}")
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path, n_joints: int | None = None) -> tuple[HumanRadianceField, dict]:
    """Rebuild the model (with optimizer state) -> (model, header).

    ``n_joints`` checks compatibility with the template about to be rendered.
    """
    header, arrays = read_checkpoint(path)
    if n_joints is not None and n_joints != header["n_joints"]:
        raise CheckpointError(f"{path}: checkpoint expects {header['n_joints']} joints, template has {n_joints}")
    model = HumanRadianceField(header["n_joints"], header["camera_ids"], ModelConfig.from_dict(header["model_config"]))
    load_into(model, header, arrays, str(path))
    return model, header


def load_into(model: HumanRadianceField, header: dict, arrays: dict, source: str = "checkpoint") -> None:
    for name, p in model.named_parameters():
        for kind in ("param", "adam_m", "adam_v"):
            key = f"{kind}/{name}"
            if key not in arrays:
                raise CheckpointError(f"{source}: missing array {key}")
            if arrays[key].shape != p.data.shape:
                raise CheckpointError(f"{source}: {key} has shape {arrays[key].shape}, model expects {p.data.shape}")
        p.data = arrays[f"param/{name}"].copy()
        p.m = arrays[f"adam_m/{name}"].copy()
        p.v = arrays[f"adam_v/{name}"].copy()
        p.step = int(header.get("steps", {}).get(name, 0))
    model.encoder.mean = arrays["encoder/mean"].copy()
    model.encoder.std = arrays["encoder/std"].copy()
