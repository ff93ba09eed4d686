"""Binary checkpoints.

Layout: ``b"SDSC"``, u16 version, u32 header length, UTF-8 JSON header, then
every tensor listed in the header as little-endian float32, in header order.
The header carries the model spec, tensor names/shapes and the per-group
quantization state (b, e, live, frozen_until).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import CnnSpec, Decoder, DecoderSpec, QuantModel, VisionCNN
from .tensor import Rng

MAGIC = b"SDSC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _header(model: QuantModel, seed: int, step: int) -> dict:
    return {
        "kind": model.kind,
        "spec": model.spec_dict(),
        "quantize_enabled": bool(model.quantize_enabled),
        "trained": bool(model.trained),
        "seed": int(seed),
        "step": int(step),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in model.named_tensors()],
        "groups": [{"name": qp.name,
                    "b": [float(v) for v in qp.b.data],
                    "e": [float(v) for v in qp.e.data],
                    "live": [bool(v) for v in qp.live],
                    "frozen_until": [int(v) for v in qp.frozen_until]} for qp in model.quant_params],
    }


def checkpoint_bytes(model: QuantModel, seed: int = 0, step: int = 0) -> bytes:
    header = json.dumps(_header(model, seed, step), sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in model.named_tensors()]
    return b"".join(parts)


def save_checkpoint(model: QuantModel, path, seed: int = 0, step: int = 0) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, seed, step))


def read_header(buf: bytes) -> tuple[dict, int]:
    """Parsed JSON header and the offset where payloads start."""
    if len(buf) < _PREFIX.size:
        raise TruncatedCheckpointError(f"checkpoint has {len(buf)} bytes, shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    end = _PREFIX.size + hlen
    if len(buf) < end:
        raise TruncatedCheckpointError(f"header claims {hlen} bytes, only {len(buf) - _PREFIX.size} present")
    try:
        header = json.loads(buf[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    return header, end


def model_from_header(header: dict) -> QuantModel:
    kind = header.get("kind")
    if kind == "cnn":
        return VisionCNN(CnnSpec(**header["spec"]), Rng(0))
    if kind == "decoder":
        return Decoder(DecoderSpec(**header["spec"]), Rng(0))
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint_with_header(path) -> tuple[QuantModel, dict]:
    buf = Path(path).read_bytes()
    header, offset = read_header(buf)
    model = model_from_header(header)

    expected = model.named_tensors()
    listed = header["tensors"]
    if [t["name"] for t in listed] != [n for n, _ in expected]:
        raise ShapeMismatchError("tensor names in header do not match the model layout")
    for entry, (name, arr) in zip(listed, expected):
        if tuple(entry["shape"]) != arr.shape:
            raise ShapeMismatchError(f"{name}: header shape {tuple(entry['shape'])}, model expects {arr.shape}")
    for name, arr in expected:
        nbytes = 4 * arr.size
        if len(buf) < offset + nbytes:
            raise TruncatedCheckpointError(f"payload for {name} truncated")
        np.copyto(arr, np.frombuffer(buf, dtype="<f4", count=arr.size, offset=offset).reshape(arr.shape))
        offset += nbytes
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after the last tensor")

    groups = header["groups"]
    if len(groups) != len(model.quant_params):
        raise ShapeMismatchError(f"{len(groups)} group records for {len(model.quant_params)} quantized tensors")
    for g, qp in zip(groups, model.quant_params):
        for key in ("b", "e", "live", "frozen_until"):
            if len(g[key]) != qp.n_groups:
                raise ShapeMismatchError(f"{qp.name}.{key}: {len(g[key])} entries, expected {qp.n_groups}")
        qp.b.data[...] = g["b"]
        qp.e.data[...] = g["e"]
        qp.live[...] = g["live"]
        qp.frozen_until[...] = g["frozen_until"]
    model.quantize_enabled = bool(header["quantize_enabled"])
    model.trained = bool(header.get("trained", False))
    return model, header


def load_checkpoint(path) -> QuantModel:
    return load_checkpoint_with_header(path)[0]
