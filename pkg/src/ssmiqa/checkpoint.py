"""Binary checkpoint container: magic "QMB1", config snapshot, f32 tensors.

Layout (all integers little-endian):
    magic          4 bytes  b"QMB1"
    version        u32      currently 1
    config_len     u32      followed by canonical (sorted-keys) JSON, utf-8
    n_tensors      u32
    per tensor:    u16 name_len, name utf-8, u8 ndim, ndim x u32 dims,
                   payload (product(dims) x f32, little-endian)
    sha256         32 bytes over everything before it

Tensors are stored at f32 regardless of the compute precision; loading a
mismatched config snapshot fails before the tensor table is parsed.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"QMB1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, corrupt, or incompatible."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize(meta: dict, tensors) -> bytes:
    """Build checkpoint bytes from a metadata dict and (name, array) pairs."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = _canonical_json(meta)
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    items = list(tensors)
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def _split_verified(blob: bytes) -> bytes:
    if len(blob) < len(MAGIC) + 4 + 4 + 4 + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}; not a checkpoint file")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; checkpoint is corrupt")
    version = struct.unpack_from("<I", body, 4)[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    return body


def read_meta(blob: bytes) -> tuple[dict, int]:
    """Parse the config snapshot; returns (meta, offset of the tensor table)."""
    body = _split_verified(blob)
    cfg_len = struct.unpack_from("<I", body, 8)[0]
    cfg_end = 12 + cfg_len
    try:
        meta = json.loads(body[12:cfg_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"config snapshot unreadable: {e}") from None
    return meta, cfg_end


def read_tensors(blob: bytes, offset: int) -> dict[str, np.ndarray]:
    body = _split_verified(blob)
    (count,) = struct.unpack_from("<I", body, offset)
    pos = offset + 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = body[pos:pos + 4 * n]
        if len(payload) != 4 * n:
            raise CheckpointError(f"tensor {name!r} payload truncated")
        pos += 4 * n
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return out


def save(path: str, meta: dict, tensors):
    with open(path, "wb") as fh:
        fh.write(serialize(meta, tensors))


def load(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    meta, offset = read_meta(blob)
    return meta, read_tensors(blob, offset)


# -- model integration ---------------------------------------------------------

def model_meta(model, run_config: dict, kind: str = "full", extra: dict | None = None) -> dict:
    from . import __version__

    meta = {
        "kind": kind,
        "model": model.cfg.to_dict(),
        "run": run_config,
        "build_version": __version__,
    }
    if extra:
        meta.update(extra)
    return meta


def save_model(path: str, model, run_config: dict, kind: str = "full",
               only_trainable: bool = False, extra: dict | None = None):
    tensors = model.trainable_params() if only_trainable else list(model.named_params())
    meta = model_meta(model, run_config, kind=kind, extra=extra)
    save(path, meta, [(n, t.data) for n, t in tensors])


def backbone_hash(model) -> str:
    """Content hash over the backbone tensors at stored (f32) precision."""
    h = hashlib.sha256()
    backbone = model.backbone_param_names()
    for name, t in model.named_params():
        if name in backbone:
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


def load_into_model(path: str, model, expect_kind: str = "full") -> dict:
    """Restore tensors into an existing model; config must match exactly first."""
    with open(path, "rb") as fh:
        blob = fh.read()
    meta, offset = read_meta(blob)
    if meta.get("kind") != expect_kind:
        raise CheckpointError(f"expected a {expect_kind!r} checkpoint, found {meta.get('kind')!r}")
    if meta.get("model") != model.cfg.to_dict():
        raise CheckpointError(
            "checkpoint config does not match the model: "
            f"stored {meta.get('model')} vs expected {model.cfg.to_dict()}")
    tensors = read_tensors(blob, offset)
    names = dict(model.named_params())
    missing = [n for n in names if n not in tensors]
    if expect_kind == "full" and missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing[:5]} (+{max(0, len(missing) - 5)} more)")
    for name, arr in tensors.items():
        if name not in names:
            raise CheckpointError(f"checkpoint tensor {name!r} has no slot in the model")
        if names[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} shape {arr.shape} != model {names[name].shape}")
        names[name].data = arr
    return meta
