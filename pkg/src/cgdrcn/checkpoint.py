"""Single-file checkpoints.

Layout::

    b"CGDRCKPT" | u32 LE manifest length | manifest (UTF-8 JSON) | payload

The payload is every parameter as little-endian float32, concatenated in
manifest order. The manifest records each tensor's shape and byte offset,
the model config, the training-config digest, the step and a SHA-256 of the
payload.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointCorruptError, CheckpointIncompatibleError
from .model import ModelConfig, ModelState, param_shapes

MAGIC = b"CGDRCKPT"
FORMAT_VERSION = 1


def save_checkpoint(state: ModelState, path, step: int = 0, train_config_digest: str = "") -> None:
    tensors = []
    chunks = []
    offset = 0
    for name in sorted(state.params):
        arr = np.ascontiguousarray(state.params[name], dtype="<f4")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": state.config.to_dict(),
        "train_config_digest": train_config_digest,
        "step": int(step),
        "tensors": tensors,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + payload)


def read_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[ModelState, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic")
    (mlen,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + mlen:
        raise CheckpointCorruptError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start: start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointCorruptError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    payload = raw[start + mlen:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointCorruptError(
            f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointCorruptError(f"{path}: payload digest mismatch")

    config = ModelConfig.from_dict(manifest["model_config"])
    if expected_config is not None:
        want, got = expected_config.to_dict(), config.to_dict()
        for key in want:
            if key == "precision":
                continue
            if want[key] != got.get(key):
                raise CheckpointIncompatibleError(key, want[key], got.get(key))
        config = ModelConfig.from_dict({**got, "precision": expected_config.precision})

    params = {}
    expect = 0
    for t in manifest["tensors"]:
        if t["offset"] != expect or t["nbytes"] != 4 * math.prod(t["shape"]):
            raise CheckpointCorruptError(f"{path}: tensor directory inconsistent at {t['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=math.prod(t["shape"]), offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(config.dtype)
        expect += t["nbytes"]
    if expect != len(payload):
        raise CheckpointCorruptError(f"{path}: payload has trailing bytes")
    shapes = param_shapes(config)
    if {k: tuple(v.shape) for k, v in params.items()} != shapes:
        raise CheckpointCorruptError(f"{path}: tensors do not match the stored model config")
    return ModelState(config, params), manifest


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelState:
    return read_checkpoint(path, expected_config)[0]
