"""Versioned binary checkpoints and weight interpolation.

Layout (all integers little-endian u32)::

    b"DCA1" | version | len(meta) | meta JSON (UTF-8) | len(dir) | dir JSON | payload

``dir`` is a list of {"name", "dtype": "float32", "shape", "offset", "nbytes"}
with offsets relative to the start of the payload, which holds raw
little-endian float32 data.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DCA1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupted, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: np.array(v, dtype=np.float32, order="C") for k, v in self.tensors.items()}
        for v in self.tensors.values():
            v.setflags(write=False)

    @classmethod
    def from_model(cls, model, **metadata) -> "Checkpoint":
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        meta = {"model_config": model.config_dict(), **metadata}
        meta.setdefault("config_digest", _digest(meta["model_config"]))
        return cls(tensors, meta)

    def to_model(self):
        from .model import DualEncoder, ModelConfig
        cfg = ModelConfig(**self.metadata["model_config"])
        model = DualEncoder(cfg)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()})
        model.eval()
        return model

    def equal(self, other: "Checkpoint") -> bool:
        """Bitwise tensor equality."""
        return self.tensors.keys() == other.tensors.keys() and all(
            self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(state, path, **metadata) -> Path:
    """Write a model or Checkpoint to ``path``."""
    ck = state if isinstance(state, Checkpoint) else Checkpoint.from_model(state, **metadata)
    if isinstance(state, Checkpoint) and metadata:
        ck = Checkpoint(ck.tensors, {**ck.metadata, **metadata})
    directory, chunks, offset = [], [], 0
    for name in sorted(ck.tensors):
        arr = ck.tensors[name].astype("<f4", copy=False)
        buf = arr.tobytes()
        directory.append({"name": name, "dtype": "float32", "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    meta_b = json.dumps(ck.metadata, sort_keys=True).encode("utf-8")
    dir_b = json.dumps(directory).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(dir_b)))
        f.write(dir_b)
        for c in chunks:
            f.write(c)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    try:
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (dir_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        directory = json.loads(raw[pos:pos + dir_len].decode("utf-8"))
        pos += dir_len
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted header: {e}") from e
    payload = memoryview(raw)[pos:]
    expected = sum(e["nbytes"] for e in directory)
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, directory expects {expected} (truncated?)")
    tensors = {}
    for e in directory:
        if e["dtype"] != "float32":
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * 4 != e["nbytes"] or e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: inconsistent directory entry {e['name']!r}")
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4")
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(tensors, meta)


def load_model(path):
    return load_checkpoint(path).to_model()


def interpolate_weights(a: Checkpoint, b: Checkpoint, alpha: float) -> Checkpoint:
    """Elementwise ``alpha * a + (1 - alpha) * b``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if a.tensors.keys() != b.tensors.keys():
        raise ValueError(f"tensor names differ: {sorted(a.tensors.keys() ^ b.tensors.keys())}")
    out = {}
    for k, va in a.tensors.items():
        vb = b.tensors[k]
        if va.shape != vb.shape:
            raise ValueError(f"shape mismatch for {k!r}: {va.shape} vs {vb.shape}")
        # endpoints are copied so they stay bit-exact (including signed zeros)
        if alpha == 1.0:
            out[k] = va.copy()
        elif alpha == 0.0:
            out[k] = vb.copy()
        else:
            out[k] = (np.float32(alpha) * va + np.float32(1.0 - alpha) * vb).astype(np.float32)
    meta = dict(a.metadata)
    meta.update(parents=[a.metadata.get("config_digest"), b.metadata.get("config_digest")],
                parent_steps=[a.metadata.get("step"), b.metadata.get("step")], alpha=float(alpha))
    return Checkpoint(out, meta)
