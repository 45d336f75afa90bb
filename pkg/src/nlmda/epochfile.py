"""Portable epoch file.

Layout (little-endian)::

    b"NEEG"              magic
    u16 version          = 1
    u64 n_epochs
    u16 C, u16 T, u16 fs_hz
    u8  label_dtype      = 1 (u8 labels)
    u8[n_epochs]         labels
    f32[n_epochs*C*T]    samples in (epoch, channel, time) order

Provenance goes to a sibling ``<path>.manifest`` of ``key=value`` lines.
Samples are stored as float32; reading promotes them back to float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .pipeline import EpochSet

MAGIC = b"NEEG"
VERSION = 1
LABEL_U8 = 1
_HEADER = struct.Struct("<4sHQHHHB")


class EpochFileError(ValueError):
    code = "epoch_file_error"


class BadMagic(EpochFileError):
    code = "bad_magic"


class VersionMismatch(EpochFileError):
    code = "version_mismatch"


class TruncatedPayload(EpochFileError):
    code = "truncated_payload"


class CountMismatch(EpochFileError):
    code = "count_mismatch"


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def write_manifest(path, entries: dict[str, str]) -> None:
    lines = []
    for key, value in entries.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValueError(f"manifest entry {key!r} is not representable")
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def encode_epochs(data: EpochSet) -> bytes:
    n, _, C, T = data.epochs.shape
    if data.labels.shape != (n,):
        raise CountMismatch(f"{data.labels.shape[0]} labels for {n} epochs")
    if np.any((data.labels < 0) | (data.labels > 255)):
        raise ValueError("labels must fit in u8")
    header = _HEADER.pack(MAGIC, VERSION, n, C, T, int(data.fs), LABEL_U8)
    payload = data.epochs.astype("<f4").tobytes(order="C")
    return header + data.labels.astype(np.uint8).tobytes() + payload


def decode_epochs(buf: bytes) -> EpochSet:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("not an epoch file (bad magic)")
    if len(buf) < _HEADER.size:
        raise TruncatedPayload("header is truncated")
    _, version, n, C, T, fs, label_dtype = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatch(f"epoch file version {version}, expected {VERSION}")
    if label_dtype != LABEL_U8:
        raise VersionMismatch(f"unsupported label dtype code {label_dtype}")
    need = _HEADER.size + n + 4 * n * C * T
    if len(buf) < need:
        raise TruncatedPayload(f"payload has {len(buf)} bytes, header implies {need}")
    if len(buf) > need:
        raise CountMismatch(f"{len(buf) - need} bytes beyond the declared {n} epochs")
    off = _HEADER.size
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).astype(np.int64)
    samples = np.frombuffer(buf, dtype="<f4", count=n * C * T, offset=off + n)
    epochs = samples.astype(np.float64).reshape(n, 1, C, T)
    return EpochSet(epochs, labels, fs)


def write_epochs(data: EpochSet, path) -> None:
    Path(path).write_bytes(encode_epochs(data))
    prov = dict(data.provenance)
    prov.setdefault("n_epochs", str(len(data)))
    write_manifest(manifest_path(path), prov)


def read_epochs(path) -> EpochSet:
    data = decode_epochs(Path(path).read_bytes())
    mpath = manifest_path(path)
    if mpath.exists():
        data.provenance = read_manifest(mpath)
    return data
