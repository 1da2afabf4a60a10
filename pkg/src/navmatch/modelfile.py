"""Binary model and checkpoint files.

Layout (little-endian)::

    magic  b"NAVMODEL"
    u32    format version
    u32    hyperparameter count, then per entry: u16 name length, name, i64 value
    u32    tensor count, then per tensor: u16 name length, name, u8 rank,
           u32 dims[rank], float32 data (row-major)
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .model import ModelConfig, NavigatorModel

MAGIC = b"NAVMODEL"
VERSION = 1
OPTIMIZER_PREFIX = "adam."


class ModelFileError(ValueError):
    pass


def _write_name(buf, name: str):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def encode(hparams: dict[str, int], tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(hparams)))
    for name, value in hparams.items():
        _write_name(buf, name)
        buf.write(struct.pack("<q", int(value)))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        _write_name(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFileError(f"truncated file while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self, what: str) -> str:
        (n,) = self.unpack("<H", f"{what} name length")
        return self.take(n, f"{what} name").decode("utf-8")


def decode(data: bytes) -> tuple[dict[str, int], dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ModelFileError("bad magic: not a model file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ModelFileError(f"version mismatch: file has {version}, expected {VERSION}")
    (nh,) = r.unpack("<I", "hyperparameter count")
    hparams = {}
    for _ in range(nh):
        name = r.name("hyperparameter")
        (hparams[name],) = r.unpack("<q", f"hyperparameter {name}")
    (nt,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(nt):
        name = r.name("tensor")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * count, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise ModelFileError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return hparams, tensors


def config_from_hparams(hparams: dict[str, int]) -> ModelConfig:
    values = {}
    for f in fields(ModelConfig):
        if f.name not in hparams:
            raise ModelFileError(f"missing hyperparameter {f.name}")
        values[f.name] = int(hparams[f.name])
    return ModelConfig(**values)


def check_tensors(cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    names = {
        "nav.head.weight": "vocab",
        "nav.head.bias": "vocab",
        "nav.token_embed": "vocab",
        "qs.label_embed": "n_labels",
        "nav.node_pos_embed": "window",
        "nav.seq_pos_embed": "max_len",
    }
    for name, shape in cfg.shapes().items():
        if name not in tensors:
            raise ModelFileError(f"missing tensor {name}")
        got = tuple(tensors[name].shape)
        if got != shape:
            field_name = names.get(name, "d")
            raise ModelFileError(
                f"tensor {name} has shape {got}, inconsistent with {field_name}="
                f"{getattr(cfg, field_name)} (expected {shape})"
            )


def model_bytes(model: NavigatorModel, extra_hparams=None, extra_tensors=None) -> bytes:
    hparams = dict(asdict(model.config))
    hparams.update(extra_hparams or {})
    tensors = {name: model.params[name] for name in model.config.shapes()}
    tensors.update(extra_tensors or {})
    return encode(hparams, tensors)


def save_model(model: NavigatorModel, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def read_file(path) -> tuple[dict[str, int], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def model_from_parts(hparams, tensors) -> NavigatorModel:
    cfg = config_from_hparams(hparams)
    check_tensors(cfg, tensors)
    return NavigatorModel(cfg, {k: tensors[k] for k in cfg.shapes()}, np.float32)


def load_model(path) -> NavigatorModel:
    hparams, tensors = read_file(path)
    return model_from_parts(hparams, tensors)
