"""Binary checkpoint container.

Layout (all integers unsigned 32-bit little-endian)::

    b"SAFERCKPT"                      9-byte magic
    version                           currently 1
    header_len, header                UTF-8 JSON {"model": ViTConfig, "adapter": AdapterConfig|null,
                                                  "trainable": [handle names]}
    handle_count
    repeated per handle (registry order):
        name_len, name
        param_count
        repeated per parameter:
            name_len, name, ndim, dims[ndim], float64 LE data (row-major)
    state_len, state                  UTF-8 JSON trainer state (epoch, RNG state, selection, log), "null" if none
    moment_count
    repeated per momentum buffer:
        name_len, name, ndim, dims[ndim], float64 LE data

Keys in the JSON blocks are sorted so identical inputs give identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from safer.autodiff import Tensor
from safer.errors import FormatError, VersionError
from safer.models.adapters import AdapterConfig, wrap_adapters
from safer.models.vit import Model, ViTConfig, build_model

MAGIC = b"SAFERCKPT"
VERSION = 1


def _u32(buf: io.BytesIO, v: int) -> None:
    buf.write(struct.pack("<I", v))


def _str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    _u32(buf, len(raw))
    buf.write(raw)


def _array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    _str(buf, name)
    _u32(buf, arr.ndim)
    for d in arr.shape:
        _u32(buf, d)
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self) -> tuple[str, np.ndarray]:
        name = self.str()
        shape = tuple(self.u32() for _ in range(self.u32()))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, data


def encode_checkpoint(model: Model, state: dict | None = None,
                      moments: dict[str, np.ndarray] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    header = {
        "model": model.cfg.to_dict(),
        "adapter": model.adapter_cfg.to_dict() if model.adapter_cfg is not None else None,
        "trainable": sorted(model.trainable),
    }
    _str(buf, json.dumps(header, sort_keys=True))
    _u32(buf, len(model.registry))
    for h in model.registry:
        _str(buf, h.name)
        _u32(buf, len(h.param_names))
        for n in h.param_names:
            _array(buf, n, model.params[n].data)
    _str(buf, json.dumps(state, sort_keys=True))
    moments = moments or {}
    _u32(buf, len(moments))
    for n in sorted(moments):
        _array(buf, n, moments[n])
    return buf.getvalue()


def atomic_write(path: str | os.PathLike, raw: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: Model, state: dict | None = None,
                    moments: dict[str, np.ndarray] | None = None) -> Path:
    atomic_write(path, encode_checkpoint(model, state, moments))
    return Path(path)


def decode_checkpoint(raw: bytes) -> tuple[Model, dict | None, dict[str, np.ndarray]]:
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise VersionError("not a checkpoint: bad magic")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    header = json.loads(r.str())
    model = build_model(ViTConfig(**header["model"]))
    if header["adapter"] is not None:
        model = wrap_adapters(model, AdapterConfig.from_dict(header["adapter"]))
    n_handles = r.u32()
    if n_handles != len(model.registry):
        raise VersionError(f"checkpoint has {n_handles} layers, model expects {len(model.registry)}")
    for h in model.registry:
        name = r.str()
        if name != h.name:
            raise VersionError(f"checkpoint layer {name!r} does not match model layer {h.name!r}")
        n_params = r.u32()
        if n_params != len(h.param_names):
            raise VersionError(f"layer {name!r}: parameter count mismatch")
        for _ in range(n_params):
            pname, data = r.array()
            if pname not in model.params or model.params[pname].shape != data.shape:
                raise VersionError(f"parameter {pname!r} does not match the model")
            model.params[pname] = Tensor(data, requires_grad=True, name=pname)
    model.trainable = set(header["trainable"])
    state = json.loads(r.str())
    moments = dict(r.array() for _ in range(r.u32()))
    if r.pos != len(raw):
        raise FormatError(f"trailing bytes after offset {r.pos}")
    return model, state, moments


def load_checkpoint(path) -> tuple[Model, dict | None, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
