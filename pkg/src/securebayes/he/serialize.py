"""Length-prefixed binary encoding of ciphertexts and plaintexts.

Layout (little-endian)::

    u32   body length (bytes following this field)
    u8    format version
    u8    kind (0 ciphertext, 1 plaintext)
    u8    backend (0 lattice, 1 mock)
    u8    level
    u64   scale as IEEE-754 float64 bits
    u64   key tag (0 for plaintexts)
    u16   polynomial count
    u16   limb count
    u32   words per limb
    u64[] limbs, polynomial-major

Mock payloads store slot values as float64 bit patterns in a single limb.
"""
from __future__ import annotations

import struct

import numpy as np

from .backend import Ciphertext, Plaintext

VERSION = 1
_HEADER = struct.Struct("<BBBBdQHHI")
_LEN = struct.Struct("<I")
_BACKENDS = {"lattice": 0, "mock": 1}


class SerializationError(ValueError):
    pass


def _polys(obj) -> list[np.ndarray]:
    if isinstance(obj.data, tuple):
        return [np.asarray(p, dtype=np.uint64) for p in obj.data]
    if isinstance(obj.data, np.ndarray) and obj.data.dtype == np.float64:
        return [obj.data.view(np.uint64)[None, :]]
    return [np.asarray(obj.data, dtype=np.uint64)]


def dumps(obj: Ciphertext | Plaintext) -> bytes:
    is_ct = isinstance(obj, Ciphertext)
    mock = isinstance(obj.data, np.ndarray) and obj.data.dtype == np.float64
    polys = _polys(obj)
    limbs, words = polys[0].shape
    header = _HEADER.pack(
        VERSION,
        0 if is_ct else 1,
        _BACKENDS["mock" if mock else "lattice"],
        obj.level,
        float(obj.scale),
        obj.key_tag if is_ct else 0,
        len(polys),
        limbs,
        words,
    )
    body = header + b"".join(np.ascontiguousarray(p, dtype="<u8").tobytes() for p in polys)
    return _LEN.pack(len(body)) + body


def loads(buf: bytes) -> Ciphertext | Plaintext:
    if len(buf) < _LEN.size + _HEADER.size:
        raise SerializationError("buffer too short")
    (length,) = _LEN.unpack_from(buf, 0)
    if length != len(buf) - _LEN.size:
        raise SerializationError(f"length prefix {length} does not match payload {len(buf) - _LEN.size}")
    version, kind, backend, level, scale, tag, npoly, limbs, words = _HEADER.unpack_from(buf, _LEN.size)
    if version != VERSION:
        raise SerializationError(f"unsupported version {version}")
    off = _LEN.size + _HEADER.size
    flat = np.frombuffer(buf, dtype="<u8", offset=off).astype(np.uint64)
    if flat.size != npoly * limbs * words:
        raise SerializationError("limb data truncated")
    polys = flat.reshape(npoly, limbs, words)
    if backend == _BACKENDS["mock"]:
        data = polys[0, 0].view(np.float64).copy()
    elif kind == 0:
        data = tuple(np.ascontiguousarray(p) for p in polys)
    else:
        data = np.ascontiguousarray(polys[0])
    if kind == 0:
        return Ciphertext(data, level, scale, tag, size=npoly if backend == 0 else 2)
    return Plaintext(data, level, scale)
