"""Binary container for checkpoints and datasets.

Layout (all integers little-endian)::

    b"OFTS"                      magic
    u16                          format version
    u32 n, n bytes               UTF-8 config text (key=value lines)
    u32 count, records...        first section (parameters / dataset tensors)
    u32 count, records...        second section (EMA parameters / empty)

    record: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
            prod(dims) x f64 payload
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CorruptCheckpointError, FormatError, VersionError
from .model import DTYPE, Arch, VelocityModel

MAGIC = b"OFTS"
VERSION = 1


def _write_section(buf: io.BytesIO, tensors: Mapping[str, torch.Tensor]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().contiguous().numpy().astype("<f8", copy=False)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))


def encode(config_text: str, *sections: Mapping[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    cfg = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for section in sections:
        _write_section(buf, section)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"container truncated: wanted {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_section(r: _Reader) -> "OrderedDict[str, torch.Tensor]":
    (count,) = r.unpack("<I")
    out = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"bad record name: {exc}") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        numel = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * numel), dtype="<f8").reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float64)).to(DTYPE)
    return out


def decode(data: bytes, n_sections: int = 2) -> tuple[str, list]:
    r = _Reader(data)
    if len(data) < 4 and MAGIC.startswith(data):
        raise CorruptCheckpointError(f"container truncated to {len(data)} bytes")
    if data[:4] != MAGIC:
        raise FormatError("not a container file (bad magic)")
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (expected {VERSION})")
    (n,) = r.unpack("<I")
    try:
        text = r.take(n).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError(f"config block is not UTF-8: {exc}") from None
    sections = [_read_section(r) for _ in range(n_sections)]
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - r.pos} trailing bytes after last section")
    return text, sections


def parse_kv(text: str) -> "OrderedDict[str, str]":
    out = OrderedDict()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptCheckpointError(f"malformed config line {line!r}")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(model: VelocityModel, path, extra: Mapping[str, str] | None = None) -> bytes:
    text = model.arch.to_text()
    if extra:
        text += "\n" + "\n".join(f"{k}={v}" for k, v in extra.items())
    data = encode(text + "\n", model.params, model.ema)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> VelocityModel:
    text, (params, ema) = decode(Path(path).read_bytes())
    arch = Arch.from_mapping(parse_kv(text))
    ref = init_shapes(arch)
    for label, section in (("params", params), ("ema", ema)):
        if list(section) != list(ref) or any(tuple(section[k].shape) != ref[k] for k in ref):
            raise CorruptCheckpointError(f"{label} shape table does not match the stored architecture")
    return VelocityModel(arch, params, ema)


def load_checkpoint_meta(path) -> "OrderedDict[str, str]":
    text, _ = decode(Path(path).read_bytes())
    return parse_kv(text)


def init_shapes(arch: Arch) -> "OrderedDict[str, tuple]":
    from .model import init_velocity_model

    return OrderedDict((k, tuple(v.shape)) for k, v in init_velocity_model(arch, 0).params.items())


def save_tensors(path, tensors: Mapping[str, torch.Tensor], meta: Mapping[str, str] | None = None) -> bytes:
    """Dataset / sample files: one named-tensor section, an empty second section."""
    text = "\n".join(f"{k}={v}" for k, v in (meta or {}).items())
    data = encode(text + "\n" if text else "", tensors, {})
    Path(path).write_bytes(data)
    return data


def load_tensors(path) -> tuple["OrderedDict[str, str]", "OrderedDict[str, torch.Tensor]"]:
    text, (tensors, _) = decode(Path(path).read_bytes())
    return parse_kv(text), tensors
