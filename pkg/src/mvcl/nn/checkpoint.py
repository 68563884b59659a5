"""Checkpoint file: JSON header followed by raw little-endian tensor payloads.

Layout::

    b"MVCLCKPT" | uint32 format version | uint64 header length | header JSON | payload

The header indexes every tensor (name, kind, shape, byte offset into the
payload) and carries a CRC-32 of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .model import EncoderConfig, ModelState, ProjectorConfig

MAGIC = b"MVCLCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_WIRE = {"float32": "<f4", "float64": "<f8"}


def _tensors(state: ModelState):
    for name, arr in state.named_parameters():
        yield "param", name, arr
    for name, arr in state.named_buffers():
        yield "buffer", name, arr
    for name in sorted(state.velocity):
        yield "velocity", name, state.velocity[name]


def checkpoint_save(state: ModelState, path, extra=None) -> Path:
    path = Path(path)
    wire = _WIRE[state.dtype]
    index, chunks, offset = [], [], 0
    for kind, name, arr in _tensors(state):
        raw = np.ascontiguousarray(arr, dtype=wire).tobytes()
        index.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": asdict(state.encoder_config),
        "projector_config": asdict(state.projector_config),
        "plane_ids": list(state.plane_ids),
        "seed": state.seed,
        "dtype": state.dtype,
        "epoch": state.epoch,
        "step": state.step,
        "extra": extra or {},
        "tensors": index,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"corrupt checkpoint {path}: file truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}; this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointError(f"corrupt checkpoint {path}: header truncated")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: unreadable header ({exc})") from exc
    payload = blob[start + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"corrupt checkpoint {path}: payload has {len(payload)} bytes, header promises {header.get('payload_bytes')}"
        )
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointError(f"corrupt checkpoint {path}: payload checksum mismatch")
    return header, payload


def checkpoint_load(path) -> ModelState:
    header, payload = read_header(path)
    dtype = header["dtype"]
    state = ModelState.init(
        EncoderConfig(**header["encoder_config"]),
        ProjectorConfig(**header["projector_config"]),
        header["plane_ids"],
        seed=header["seed"],
        dtype=dtype,
    )
    state.epoch, state.step = header["epoch"], header["step"]
    params, buffers = state.parameters(), state.buffers()
    wire = _WIRE[dtype]
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype=wire, count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"]).astype(dtype)
        kind, name = t["kind"], t["name"]
        if kind == "velocity":
            state.velocity[name] = arr
            continue
        target = (params if kind == "param" else buffers).get(name)
        if target is None or target.shape != arr.shape:
            raise CheckpointError(f"checkpoint tensor {name} does not fit the configured model")
        target[...] = arr
    return state


def checkpoint_extra(path) -> dict:
    return read_header(path)[0].get("extra", {})
