"""Binary container of named float64 matrices.

Layout (all integers little-endian)::

    b"FLCK"                  magic
    u32 version              currently 1
    u32 header_len           then header_len bytes of UTF-8 JSON (sorted keys)
    u32 count                number of matrices
    count x:
        u16 name_len, name (UTF-8)
        u32 rows, u32 cols
        rows*cols float64 little-endian, row-major

Matrices are written in ascending name order, so identical content always
serializes to identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import AdaptationMode, DualEncoderModel, ModelConfig

MAGIC = b"FLCK"
VERSION = 1


def encode(header: dict, matrices: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(matrices))]
    for name in sorted(matrices):
        m = np.asarray(matrices[name], dtype="<f8")
        if m.ndim != 2:
            raise ValueError(f"matrix {name!r} is not 2-D")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *m.shape))
        parts.append(np.ascontiguousarray(m).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ParseError("not a checkpoint container (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(bytes(view[pos : pos + hlen]).decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        matrices = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode()
            pos += nlen
            rows, cols = struct.unpack_from("<II", view, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(view):
                raise ParseError(f"truncated data for matrix {name!r}")
            matrices[name] = np.frombuffer(view[pos : pos + nbytes], dtype="<f8").reshape(rows, cols).astype(np.float64)
            pos += nbytes
    except ParseError:
        raise
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint: {exc}") from None
    except ValueError as exc:
        raise ParseError(f"corrupt checkpoint: {exc}") from None
    if pos != len(view):
        raise ParseError(f"{len(view) - pos} trailing bytes after last matrix")
    return header, matrices


def model_header(model: DualEncoderModel) -> dict:
    mode = asdict(model.mode)
    mode["lora_targets"] = list(mode["lora_targets"])
    return {"format": "fedlora-model", "config": asdict(model.config), "mode": mode}


def save_model(path, model: DualEncoderModel) -> None:
    Path(path).write_bytes(encode(model_header(model), model.params))


def load_model(path) -> DualEncoderModel:
    header, matrices = decode(Path(path).read_bytes())
    if header.get("format") != "fedlora-model":
        raise ParseError(f"{path}: container does not hold a model")
    mode = dict(header["mode"])
    mode["lora_targets"] = tuple(mode["lora_targets"])
    return DualEncoderModel(ModelConfig(**header["config"]), AdaptationMode(**mode), matrices)
