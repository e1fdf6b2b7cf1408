"""Checkpoint files: a text manifest followed by raw little-endian float32 data.

::

    MEMCKPT 1
    meta {"kind": "model", "model_config": {...}, ...}
    tensor <name> <d0>x<d1>x... <byte offset> <byte length>
    ...
    crc32 <8 hex digits of the data section>
    end
    <data section>

Offsets are relative to the first byte after ``end\\n``. A scalar tensor is
written with shape ``-``. Model parameters are stored as ``param/<name>``;
training checkpoints add ``best/<name>`` snapshots and optimizer moments
``optim/m/<name>``, ``optim/v/<name>``.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .fusion import MemeModel, ModelConfig

HEADER = "MEMCKPT 1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict):
    blobs, lines, offset = [], [HEADER, "meta " + json.dumps(meta, sort_keys=True)], 0
    for name, arr in arrays.items():
        if " " in name:
            raise CheckpointError(f"tensor name {name!r} contains a space")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(d) for d in np.shape(arr)) or "-"
        lines.append(f"tensor {name} {shape} {offset} {len(data)}")
        blobs.append(data)
        offset += len(data)
    body = b"".join(blobs)
    lines += [f"crc32 {zlib.crc32(body):08x}", "end"]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + body)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    end = raw.find(b"\nend\n")
    if not raw.startswith(HEADER.encode() + b"\n") or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        lines = raw[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: corrupt manifest") from None
    body = raw[end + len(b"\nend\n") :]
    meta, entries, crc = None, [], None
    try:
        for line in lines[1:]:
            key, _, rest = line.partition(" ")
            if key == "meta":
                meta = json.loads(rest)
            elif key == "tensor":
                name, shape, off, size = rest.split(" ")
                dims = () if shape == "-" else tuple(int(d) for d in shape.split("x"))
                entries.append((name, dims, int(off), int(size)))
            elif key == "crc32":
                crc = int(rest, 16)
            else:
                raise ValueError(f"unknown manifest line {line!r}")
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if meta is None or crc is None:
        raise CheckpointError(f"{path}: manifest lacks meta or crc32 line")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: data section fails its CRC check")
    arrays = {}
    for name, dims, off, size in entries:
        if off + size > len(body) or size != 4 * int(np.prod(dims, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name} does not fit the data section")
        arrays[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=off).reshape(dims).astype(np.float32)
    return arrays, meta


def model_arrays(model: MemeModel, prefix: str = "param/") -> dict[str, np.ndarray]:
    return {prefix + name: t.values for name, t in model.named_parameters()}


def save_model(path, model: MemeModel, extra_meta: dict | None = None):
    meta = {"kind": "model", "model_config": model.config.to_dict()}
    meta.update(extra_meta or {})
    save_checkpoint(path, model_arrays(model), meta)


def strip_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_model(path, expected_config: ModelConfig | None = None) -> MemeModel:
    """Rebuild a model from a checkpoint; raises CheckpointError on any mismatch."""
    arrays, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: no model configuration in checkpoint")
    try:
        config = ModelConfig.from_dict(meta["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model configuration ({exc})") from None
    model = MemeModel(expected_config if expected_config is not None else config)
    model.load_state_dict(strip_prefix(arrays, "param/"))
    return model


def import_weights(model: MemeModel, path, components=("text", "image")) -> list[str]:
    """Copy encoder weights from another checkpoint (e.g. an earlier single-modality run).

    Only parameters under the given component prefixes are imported; shapes
    must match exactly. Returns the imported parameter names.
    """
    arrays, _ = load_checkpoint(path)
    params = strip_prefix(arrays, "param/")
    chosen = {k: v for k, v in params.items() if k.split(".", 1)[0] in components}
    own = model.parameters()
    missing = [k for k in own if k.split(".", 1)[0] in components and k not in chosen]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks {missing[:5]}")
    model.load_state_dict({k: v for k, v in chosen.items() if k in own}, strict=False)
    return sorted(chosen)
