"""Bit-exact binary checkpoints.

Layout: magic "BTTA" | version u32 LE | tensor count u32 LE | per tensor:
name-length u16 LE, UTF-8 name, dtype byte (0=f64, 1=f32), rank u8, dims
u32 LE each, raw little-endian payload | optional buffer section tagged
"BUFR" (u32 count + same tensor records) | SHA-256 over all preceding bytes.

Model config, preprocessing statistics, and norm-layer statistics are
stored as reserved-name tensors inside the main table; buffer parameters
and their configuration go into the BUFR section.
"""

import hashlib
import io
import struct

import numpy as np

from .model import Backbone, BackboneConfig
from .norm import NormMode
from .params import ParamSet

MAGIC = b"BTTA"
BUFFER_MAGIC = b"BUFR"
VERSION = 1

_MODE_CODES = {m: i for i, m in enumerate(NormMode)}
_MODE_FROM_CODE = {i: m for m, i in _MODE_CODES.items()}


class CheckpointError(RuntimeError):
    pass


def _write_tensor(buf, name, arr):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    if arr.dtype == np.float64:
        dtype_byte, dtype = 0, "<f8"
    elif arr.dtype == np.float32:
        dtype_byte, dtype = 1, "<f4"
    else:
        arr = np.asarray(arr, dtype=np.float64)
        dtype_byte, dtype = 0, "<f8"
    buf.write(struct.pack("<B", dtype_byte))
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_tensor(buf):
    raw = buf.read(2)
    if len(raw) < 2:
        raise CheckpointError("truncated tensor record")
    (nlen,) = struct.unpack("<H", raw)
    name = buf.read(nlen).decode("utf-8")
    (dtype_byte,) = struct.unpack("<B", buf.read(1))
    (rank,) = struct.unpack("<B", buf.read(1))
    dims = struct.unpack(f"<{rank}I", buf.read(4 * rank)) if rank else ()
    dtype = {0: "<f8", 1: "<f4"}.get(dtype_byte)
    if dtype is None:
        raise CheckpointError(f"unknown dtype byte {dtype_byte}")
    count = int(np.prod(dims)) if dims else 1
    payload = buf.read(count * int(dtype[-1]))
    if len(payload) != count * int(dtype[-1]):
        raise CheckpointError("truncated tensor payload")
    return name, np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float64)


def _config_array(cfg):
    kind = 0 if cfg.norm_kind == "bn" else 1
    return np.array([cfg.stages, cfg.blocks_per_stage, cfg.base_channels, kind,
                     cfg.groups, cfg.num_classes, *cfg.input_shape], dtype=np.float64)


def _config_from_array(arr):
    vals = [int(v) for v in arr]
    return BackboneConfig(stages=vals[0], blocks_per_stage=vals[1], base_channels=vals[2],
                          norm_kind="bn" if vals[3] == 0 else "gn", groups=vals[4],
                          num_classes=vals[5], input_shape=tuple(vals[6:9]))


def serialize(model, bank=None):
    tensors = [("__config__", _config_array(model.cfg)),
               ("__prep__.mean", model.prep_mean),
               ("__prep__.std", model.prep_std)]
    for name, arr, trainable in model.params.items():
        tensors.append((name, arr))
        tensors.append((f"__trainable__.{name}", np.array([float(trainable)])))
    for name, layer in model.norms:
        tensors.append((f"{name}.gamma", layer.gamma))
        tensors.append((f"{name}.beta", layer.beta))
        tensors.append((f"{name}.mu_s", layer.mu_s))
        tensors.append((f"{name}.var_s", layer.var_s))
        tensors.append((f"{name}.mu_run", layer.mu_run))
        tensors.append((f"{name}.var_run", layer.var_run))
        tensors.append((f"__normmeta__.{name}",
                        np.array([_MODE_CODES[layer.mode], layer.momentum,
                                  float(layer.affine_trainable), layer.groups])))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, np.asarray(arr, dtype=np.float64))
    if bank is not None:
        from .buffers import serialize_bank_tensors
        btensors = serialize_bank_tensors(bank)
        buf.write(BUFFER_MAGIC)
        buf.write(struct.pack("<I", len(btensors)))
        for name, arr in btensors:
            _write_tensor(buf, name, np.asarray(arr, dtype=np.float64))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model, path, bank=None):
    with open(path, "wb") as fh:
        fh.write(serialize(model, bank=bank))


def deserialize(blob):
    if len(blob) < 44:
        raise CheckpointError("file too short")
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("content hash mismatch (corrupt file)")
    buf = io.BytesIO(body)
    if buf.read(4) != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (count,) = struct.unpack("<I", buf.read(4))
    table = dict(_read_tensor(buf) for _ in range(count))

    bank_table = None
    tag = buf.read(4)
    if tag == BUFFER_MAGIC:
        (bcount,) = struct.unpack("<I", buf.read(4))
        bank_table = dict(_read_tensor(buf) for _ in range(bcount))
    elif tag:
        raise CheckpointError("trailing bytes after tensor table")

    cfg = _config_from_array(table.pop("__config__"))
    params = ParamSet()
    norm_names = []
    for name in list(table):
        if name.startswith("__normmeta__."):
            norm_names.append(name[len("__normmeta__."):])
    from .model import build_backbone
    model = build_backbone(cfg, seed=0)
    model.prep_mean = table["__prep__.mean"].copy()
    model.prep_std = table["__prep__.std"].copy()
    for name in model.params:
        model.params[name][...] = table[name]
        model.params.set_trainable(name, bool(table[f"__trainable__.{name}"][0]))
    if set(norm_names) != set(model.norms.layers):
        raise CheckpointError("norm layer set does not match config")
    for name, layer in model.norms:
        meta = table[f"__normmeta__.{name}"]
        layer.mode = _MODE_FROM_CODE[int(meta[0])]
        layer.momentum = float(meta[1])
        layer.affine_trainable = bool(meta[2])
        layer.groups = int(meta[3])
        for fld in ("gamma", "beta", "mu_s", "var_s", "mu_run", "var_run"):
            getattr(layer, fld)[...] = table[f"{name}.{fld}"]

    bank = None
    if bank_table is not None:
        from .buffers import bank_from_tensors
        bank = bank_from_tensors(model, bank_table)
        model.bank = bank
    return model, bank


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
