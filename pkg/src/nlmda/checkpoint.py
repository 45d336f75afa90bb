"""Parameter checkpoint.

Layout (little-endian)::

    b"NLMD"                          magic
    u16 version                      = 1
    config block                     u32 C, T, D, temporal_kernels, temporal_len,
                                     spatial_kernels, depth_attn_kernel,
                                     attn_hidden, n_classes, f, N_t;
                                     u8 use_batchnorm; u64 seed
    u16 n_arrays
    per array                        u8 rank, u32 extents[rank], f64 data

Arrays follow ``model.PARAM_ORDER`` (batch-norm entries only when enabled),
then, with batch norm on, the running mean and variance of bn1 and bn2.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import PARAM_ORDER, ModelConfig, ModelParams, param_shapes
from .tensor import RunningStats, Tensor

MAGIC = b"NLMD"
VERSION = 1
_INT_FIELDS = ("C", "T", "D", "temporal_kernels", "temporal_len", "spatial_kernels",
               "depth_attn_kernel", "attn_hidden", "n_classes", "f", "N_t")
_CONFIG = struct.Struct("<" + "I" * len(_INT_FIELDS) + "BQ")


class CheckpointError(ValueError):
    pass


def _ordered_arrays(params: ModelParams) -> list[np.ndarray]:
    arrays = [params.arrays[k].data for k in PARAM_ORDER if k in params.arrays]
    for stage in ("bn1", "bn2"):
        if stage in params.bn_state:
            arrays += [params.bn_state[stage].mean, params.bn_state[stage].var]
    return arrays


def encode_checkpoint(params: ModelParams) -> bytes:
    cfg = params.config
    parts = [MAGIC, struct.pack("<H", VERSION)]
    parts.append(_CONFIG.pack(*(getattr(cfg, f) for f in _INT_FIELDS),
                              int(cfg.use_batchnorm), cfg.seed))
    arrays = _ordered_arrays(params)
    parts.append(struct.pack("<H", len(arrays)))
    for a in arrays:
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> ModelParams:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
        vals = _CONFIG.unpack_from(buf, 6)
        cfg = ModelConfig(**dict(zip(_INT_FIELDS, vals[:-2])),
                          use_batchnorm=bool(vals[-2]), seed=vals[-1])
        off = 6 + _CONFIG.size
        (count,) = struct.unpack_from("<H", buf, off)
        off += 2
        arrays = []
        for _ in range(count):
            (rank,) = struct.unpack_from("<B", buf, off)
            shape = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 8 * size > len(buf):
                raise CheckpointError("checkpoint payload truncated")
            arrays.append(np.frombuffer(buf, "<f8", size, off).astype(np.float64).reshape(shape))
            off += 8 * size
    except struct.error as e:
        raise CheckpointError("checkpoint truncated") from e
    if off != len(buf):
        raise CheckpointError("trailing bytes after checkpoint arrays")

    shapes = param_shapes(cfg)
    names = [k for k in PARAM_ORDER if k in shapes]
    expected = len(names) + (4 if cfg.use_batchnorm else 0)
    if count != expected:
        raise CheckpointError(f"{count} arrays, config implies {expected}")
    params = {}
    for name, arr in zip(names, arrays):
        if arr.shape != shapes[name]:
            raise CheckpointError(f"{name}: shape {arr.shape}, expected {shapes[name]}")
        params[name] = Tensor(arr, requires_grad=True)
    bn_state = {}
    if cfg.use_batchnorm:
        rest = arrays[len(names):]
        bn_state = {"bn1": RunningStats(rest[0], rest[1]), "bn2": RunningStats(rest[2], rest[3])}
    return ModelParams(cfg, params, bn_state)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes())
