"""Binary checkpoint format shared by both model kinds.

Layout::

    8 bytes   magic  b"MCKPT\\x00\\r\\n"
    4 bytes   format version (uint32, little endian)
    8 bytes   header length in bytes (uint64, little endian)
    n bytes   UTF-8 JSON header (sorted keys)
    payload   every tensor as little-endian float32, at the manifest offsets

The header holds the model kind, full config, condition schema, keypoint
standardization statistics (VAE only) and the tensor manifest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..conditions import ConditionSchema
from ..errors import CorruptCheckpoint, IncompatibleVersion
from ..mcdm import DiffusionConfig, McDiffusion
from ..mcvae import McVae, VaeConfig

__all__ = ["MAGIC", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "read_header"]

MAGIC = b"MCKPT\x00\r\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _kind(model) -> str:
    if isinstance(model, McVae):
        return "vae"
    if isinstance(model, McDiffusion):
        return "diffusion"
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Write ``model``; parameters are stored as float32 regardless of model dtype.

    ``extra`` defaults to the metadata the model was loaded with, if any.
    """
    kind = _kind(model)
    if extra is None:
        extra = getattr(model, "checkpoint_extra", None)
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset, "nbytes": len(data)}
        )
        chunks.append(data)
        offset += len(data)
    header = {
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "tensors": manifest,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    if kind == "vae":
        header["standardization"] = {
            "mean": [float(v) for v in model.data_mean.float()],
            "std": [float(v) for v in model.data_std.float()],
        }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def _parse(raw: bytes) -> tuple[dict, memoryview]:
    if len(raw) < _PREFIX.size:
        raise CorruptCheckpoint("file too short for a checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    if version != FORMAT_VERSION:
        raise IncompatibleVersion(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CorruptCheckpoint("header extends past end of file")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    payload = memoryview(raw)[start + hlen :]
    if len(payload) != header.get("payload_bytes"):
        raise CorruptCheckpoint(f"payload holds {len(payload)} bytes, header declares {header.get('payload_bytes')}")
    end = 0
    for entry in sorted(header["tensors"], key=lambda e: e["offset"]):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] < end or entry["nbytes"] != 4 * count or entry["offset"] + entry["nbytes"] > len(payload):
            raise CorruptCheckpoint(f"manifest entry {entry['name']!r} overlaps or exceeds the payload")
        end = entry["offset"] + entry["nbytes"]
    return header, payload


def read_header(path) -> dict:
    return _parse(Path(path).read_bytes())[0]


def load_checkpoint(path, kind: str | None = None):
    """Rebuild the model stored at ``path``.

    ``kind`` ("vae" or "diffusion") guards against loading the wrong model type.
    """
    header, payload = _parse(Path(path).read_bytes())
    if kind is not None and header["kind"] != kind:
        raise IncompatibleVersion(f"checkpoint holds a {header['kind']!r} model, expected {kind!r}")
    schema = ConditionSchema.from_dict(header["schema"])
    if header["kind"] == "vae":
        model = McVae(VaeConfig.from_dict(header["config"]), schema)
    elif header["kind"] == "diffusion":
        model = McDiffusion(DiffusionConfig.from_dict(header["config"]), schema)
    else:
        raise IncompatibleVersion(f"unknown model kind {header['kind']!r}")
    expected = model.state_dict()
    state = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise CorruptCheckpoint(f"unexpected tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        arr = arr.reshape(entry["shape"]).astype(entry["dtype"])
        state[name] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(state)
    if missing:
        raise CorruptCheckpoint(f"checkpoint lacks tensors {sorted(missing)}")
    model.load_state_dict(state)
    model.checkpoint_extra = header.get("extra", {})
    model.eval()
    return model
