"""Checkpoint file format (version 1).

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header,
then the raw payload. The header carries the format version, the variant
label, the model/diffusion/run configuration, and a tensor index of
(name, dtype, shape, offset, trainable) entries; the payload is the tensors'
little-endian row-major scalar data concatenated in index order. Offsets are
relative to the payload start, non-overlapping and in-bounds; every model
parameter appears exactly once, and save -> load round-trips bitwise.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import baseline_controlnet as bc
from . import reparam, unet
from .tensor_core import Tensor
from .unet import ModelGraph, UNetConfig

FORMAT_VERSION = 1
_LE = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def _variant_of(model) -> str:
    return model.variant


def save_checkpoint(path, model, run_config: dict | None = None,
                    diffusion: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    names = set()
    for name, t in unet.named_tensors(model):
        if name in names:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        names.add(name)
        raw = t.data.astype(_LE[t.dtype]).tobytes()
        entries.append({"name": name, "dtype": t.dtype, "shape": list(t.shape),
                        "offset": len(payload), "trainable": t.trainable})
        payload.extend(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "variant": _variant_of(model),
        "model_config": dataclasses.asdict(model.config),
        "diffusion": diffusion or {},
        "run_config": run_config or {},
        "tensors": entries,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def _skeleton(variant: str, cfg: UNetConfig):
    base = unet.build_base_model(cfg, seed=0, zero_out=False)
    if variant == "base":
        return base
    if variant == "dual":
        return unet.make_dual_model(base, w=0.0)
    if variant == "fused":
        return reparam.fuse_model(unet.make_dual_model(base, w=0.0),
                                  reparam.FusionConfig(1.0, 1.0))
    if variant == "controlnet":
        return bc.make_controlnet(base)
    raise CheckpointError(f"unknown variant {variant!r}")


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, header)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: too short to hold a header length")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if 8 + hlen > len(blob):
        raise CheckpointError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version!r} unsupported "
                              f"(expected {FORMAT_VERSION})")
    payload = memoryview(blob)[8 + hlen:]
    try:
        cfg = UNetConfig(**header["model_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad model_config: {e}") from e
    model = _skeleton(header.get("variant"), cfg)

    slots = dict(unet.named_tensors(model))
    seen = set()
    spans = []
    for e in header.get("tensors", []):
        name = e.get("name")
        if name in seen:
            raise CheckpointError(f"{path}: tensor {name!r} listed twice")
        seen.add(name)
        t = slots.get(name)
        if t is None:
            raise CheckpointError(f"{path}: unknown tensor {name!r} for "
                                  f"variant {header.get('variant')!r}")
        dtype, shape = e.get("dtype"), tuple(e.get("shape", ()))
        if dtype not in _LE:
            raise CheckpointError(f"{path}: tensor {name!r} has bad dtype {dtype!r}")
        if shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name!r} shape {shape} does not "
                                  f"match the {t.shape} slot")
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_LE[dtype]).itemsize
        off = e.get("offset")
        if not isinstance(off, int) or off < 0 or off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} offset {off!r} out of bounds")
        spans.append((off, off + nbytes, name))
        data = np.frombuffer(payload[off:off + nbytes], dtype=_LE[dtype]).reshape(shape)
        t.data = np.ascontiguousarray(data, dtype=np.dtype(dtype))
        t.trainable = bool(e.get("trainable", False))
    missing = sorted(set(slots) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing tensor {missing[0]!r} "
                              f"({len(missing)} missing in total)")
    spans.sort()
    for (a0, a1, an), (b0, _b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"{path}: tensors {an!r} and {bn!r} overlap")
    return model, header
