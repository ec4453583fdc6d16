"""Checkpoint file format.

Layout::

    BRANCHFORMER-CHECKPOINT\\n
    version=1\\n
    config.<field>=<value>\\n      one line per EncoderConfig field
    head_classes=<int>\\n
    pruned=<0|1>\\n
    params=<count>\\n
    payload_bytes=<int>\\n
    end\\n
    payload: per parameter
        u32 name length, utf-8 name, u32 ndim, u64 dims[ndim], float64 data
    u32 CRC32 of everything above

All integers and floats are little-endian.
"""
from __future__ import annotations

import dataclasses
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderParams, init_encoder, prune_to_cgmlp
from .errors import (
    CheckpointCorruptError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .nn import named_parameters

MAGIC = b"BRANCHFORMER-CHECKPOINT\n"
VERSION = 1
_MAX_HEADER = 1 << 16


def _encode_params(params: EncoderParams) -> tuple[int, bytes]:
    chunks = []
    count = 0
    for name, t in named_parameters(params):
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
        count += 1
    return count, b"".join(chunks)


def save_checkpoint(path: str | Path, cfg: EncoderConfig, params: EncoderParams) -> None:
    count, payload = _encode_params(params)
    lines = [f"version={VERSION}"]
    lines += [f"config.{k}={v}" for k, v in cfg.to_dict().items()]
    classes = params.head.out_features if params.head is not None else 0
    lines += [
        f"head_classes={classes}",
        f"pruned={int(params.pruned)}",
        f"params={count}",
        f"payload_bytes={len(payload)}",
        "end",
    ]
    body = MAGIC + ("\n".join(lines) + "\n").encode() + payload
    blob = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _parse_value(field: dataclasses.Field, text: str):
    kind = type(field.default)
    if kind is bool:
        return text == "True"
    return kind(text)


def _read_header(blob: bytes) -> tuple[dict[str, str], int]:
    if not MAGIC.startswith(blob[:len(MAGIC)]):
        raise CheckpointCorruptError("not a branchformer checkpoint (bad magic)")
    if len(blob) < len(MAGIC):
        raise CheckpointTruncatedError(f"file is {len(blob)} bytes, shorter than the magic line")
    pos = len(MAGIC)
    header: dict[str, str] = {}
    while True:
        nl = blob.find(b"\n", pos, pos + _MAX_HEADER)
        if nl < 0:
            if len(blob) - pos < _MAX_HEADER:
                raise CheckpointTruncatedError("file ends inside the header")
            raise CheckpointCorruptError("header has no terminator")
        try:
            line = blob[pos:nl].decode()
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptError("header is not valid text") from exc
        pos = nl + 1
        if line == "end":
            return header, pos
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointCorruptError(f"malformed header line {line!r}")
        header[key] = value


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Raw header and named arrays, with integrity checks but no model building."""
    blob = Path(path).read_bytes()
    header, start = _read_header(blob)
    try:
        version = int(header["version"])
    except (KeyError, ValueError) as exc:
        raise CheckpointCorruptError("header lacks an integer version") from exc
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    try:
        count = int(header["params"])
        size = int(header["payload_bytes"])
    except (KeyError, ValueError) as exc:
        raise CheckpointCorruptError("header lacks params/payload_bytes") from exc
    end = start + size
    if len(blob) < end + 4:
        raise CheckpointTruncatedError(f"expected {end + 4} bytes, file has {len(blob)}")
    if len(blob) > end + 4:
        raise CheckpointCorruptError(f"{len(blob) - end - 4} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", blob, end)
    if crc != zlib.crc32(blob[:end]):
        raise CheckpointCorruptError("CRC mismatch")

    arrays: dict[str, np.ndarray] = {}
    pos = start
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos + 4)
            pos += 4 + 8 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > end:
                raise CheckpointCorruptError(f"parameter {name} overruns the payload")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"payload is malformed: {exc}") from exc
    if pos != end:
        raise CheckpointCorruptError("payload size disagrees with its records")
    return header, arrays


def config_from_header(header: dict[str, str]) -> EncoderConfig:
    values = {}
    for f in dataclasses.fields(EncoderConfig):
        key = f"config.{f.name}"
        if key not in header:
            raise CheckpointCorruptError(f"header lacks {key}")
        try:
            values[f.name] = _parse_value(f, header[key])
        except ValueError as exc:
            raise CheckpointCorruptError(f"bad value for {key}: {header[key]!r}") from exc
    try:
        return EncoderConfig(**values)
    except ConfigError as exc:
        raise CheckpointCorruptError(f"stored config is invalid: {exc}") from exc


def load_checkpoint(
    path: str | Path, cfg: EncoderConfig | None = None
) -> tuple[EncoderConfig, EncoderParams]:
    """Load (config, params). With ``cfg`` given, parameters must fit that config."""
    header, arrays = read_checkpoint(path)
    stored = config_from_header(header)
    cfg = cfg or stored
    classes = int(header.get("head_classes", "0"))
    params = init_encoder(cfg, num_classes=classes)
    if header.get("pruned") == "1":
        params = prune_to_cgmlp(params)
    expected = dict(named_parameters(params))
    for name, t in expected.items():
        if name not in arrays:
            raise CheckpointShapeError(f"parameter {name} missing from checkpoint")
        if arrays[name].shape != t.shape:
            raise CheckpointShapeError(
                f"parameter {name}: checkpoint shape {arrays[name].shape}, config expects {t.shape}"
            )
        t.data = arrays[name]
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise CheckpointShapeError(f"checkpoint has parameters the config lacks: {extra[0]}")
    return cfg, params
