"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FCLM"                  magic
    u16                      format version
    u32 n, n bytes           UTF-8 JSON header: model config, context schema,
                             vocabulary, gate order, array names
    repeated per array:
      u16 n, n bytes         array name
      u8                     dtype code (1 = float32, 2 = float64)
      u8                     rank, then rank x u32 extents
      raw little-endian data
    u32                      CRC-32 of every preceding byte

Arrays are written in their stored precision, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .context import ContextSchema
from .data import Vocabulary
from .errors import FormatError, VersionError
from .model import GATE_ORDER, LanguageModel, ModelConfig, param_shapes

MAGIC = b"FCLM"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def to_bytes(model: LanguageModel) -> bytes:
    vocab = model.vocab
    header = {
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "vocab": None if vocab is None else {"unit": vocab.unit, "tokens": vocab.tokens, "counts": vocab.counts},
        "gate_order": list(GATE_ORDER),
        "arrays": list(model.params),
        "meta": model.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(hb)), hb]
    for name, arr in model.params.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"array {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<BB{arr.ndim}I", _CODES[arr.dtype], arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: LanguageModel, path) -> None:
    """Write atomically: a partial file never replaces a good checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes, dtype=None) -> LanguageModel:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this library reads version {VERSION}", 4)
    if len(buf) < 4 + 6 + 4:
        raise FormatError("truncated checkpoint", len(buf))
    (crc,) = struct.unpack("<I", buf[-4:])
    body = buf[:-4]
    try:
        model = _scan(r, body, dtype)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, struct.error) as exc:
        raise FormatError(f"malformed checkpoint: {exc}", r.pos) from None
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (corrupt or truncated checkpoint)", len(body))
    return model


def _scan(r: _Reader, body: bytes, dtype=None) -> LanguageModel:
    r.buf = body
    (hlen,) = r.unpack("<I", "header length")
    hpos = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("unreadable checkpoint header", hpos) from None
    if header.get("gate_order") != list(GATE_ORDER):
        raise FormatError(f"unsupported gate order {header.get('gate_order')}", hpos)
    params = {}
    for expected in header["arrays"]:
        start = r.pos
        (nlen,) = r.unpack("<H", "array name length")
        name = r.take(nlen, "array name").decode("utf-8", errors="replace")
        if name != expected:
            raise FormatError(f"expected array {expected!r}, found {name!r}", start)
        code, ndim = r.unpack("<BB", f"array {name!r} dtype")
        if code not in _DTYPES or ndim > 3:
            raise FormatError(f"array {name!r}: bad dtype code {code} or rank {ndim}", start)
        shape = r.unpack(f"<{ndim}I", f"array {name!r} shape")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(n, f"array {name!r} data"), dtype=dt).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="))
        if dtype is not None:
            arr = arr.astype(dtype)
        params[name] = arr
    if r.pos != len(body):
        raise FormatError("trailing bytes after last array", r.pos)
    config = ModelConfig.from_dict(header["config"])
    schema = ContextSchema.from_dict(header["schema"])
    v = header.get("vocab")
    vocab = None if v is None else Vocabulary(v["tokens"], v["unit"], v.get("counts"))
    expected_shapes = param_shapes(config, schema)
    for name, shape in expected_shapes.items():
        if name not in params or params[name].shape != tuple(shape):
            raise FormatError(f"array {name!r} missing or mis-shaped for the stored config")
    return LanguageModel(config, params, schema, vocab, header.get("meta", {}))


def load_checkpoint(path, dtype=None) -> LanguageModel:
    """Read a checkpoint; ``dtype`` optionally widens (or narrows) every array."""
    return from_bytes(Path(path).read_bytes(), dtype)
