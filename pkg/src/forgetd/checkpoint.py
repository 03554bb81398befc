"""Binary checkpoint format.

Layout (little-endian)::

    b"FGTD"  u16 version  u32 descriptor_len  descriptor
    per parameter layer: f64 weights (row-major), f64 biases
    u32 crc32 of everything before it

The descriptor is ``u32 ndim, u32 dims[ndim], u32 n_layers`` followed by one
``u32 kind, u32 d0, u32 d1, u32 d2, u32 d3`` record per layer (unused dims
are zero). Its SHA-256 is the arch fingerprint that binds ledgers to models.
"""

import hashlib
import struct
import zlib

import numpy as np

from forgetd._binio import Reader, split_crc
from forgetd.errors import BadMagicError, ConfigError, FormatError, VersionError
from forgetd.nn import KINDS, Arch, LayerSpec, ModelParams

MAGIC = b"FGTD"
VERSION = 1
_F64 = np.dtype("<f8")


def arch_descriptor(arch: Arch) -> bytes:
    parts = [struct.pack("<I", len(arch.input_shape))]
    parts += [struct.pack("<I", d) for d in arch.input_shape]
    parts.append(struct.pack("<I", len(arch.layers)))
    for spec in arch.layers:
        dims = tuple(spec.dims) + (0,) * (4 - len(spec.dims))
        parts.append(struct.pack("<5I", KINDS.index(spec.kind), *dims))
    return b"".join(parts)


def arch_fingerprint(arch: Arch) -> bytes:
    return hashlib.sha256(arch_descriptor(arch)).digest()


def parse_descriptor(r: Reader) -> Arch:
    (ndim,) = r.unpack("<I", "descriptor")
    if ndim > 8:
        raise FormatError(f"implausible input rank {ndim}")
    shape = r.unpack(f"<{ndim}I", "descriptor")
    (n_layers,) = r.unpack("<I", "descriptor")
    if n_layers > 4096:
        raise FormatError(f"implausible layer count {n_layers}")
    layers = []
    for i in range(n_layers):
        kind, *dims = r.unpack("<5I", f"layer {i} descriptor")
        if kind >= len(KINDS):
            raise FormatError(f"unknown layer kind code {kind} in layer {i}")
        name = KINDS[kind]
        n = {"dense": 2, "conv2d": 4, "maxpool2d": 1, "relu": 0, "flatten": 0}[name]
        if any(dims[n:]):
            raise FormatError(f"layer {i}: unused dims must be zero")
        layers.append(LayerSpec(name, tuple(dims[:n])))
    return Arch(tuple(shape), tuple(layers))


def to_bytes(params: ModelParams) -> bytes:
    desc = arch_descriptor(params.arch)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(desc)), desc]
    for w, b in params.layers:
        parts.append(np.ascontiguousarray(w, dtype=_F64).tobytes())
        parts.append(np.ascontiguousarray(b, dtype=_F64).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes) -> ModelParams:
    if buf[:4] != MAGIC:
        raise BadMagicError("bad checkpoint magic")
    body = split_crc(buf, "checkpoint")
    r = Reader(body, "checkpoint")
    r.take(4, "header")
    version, desc_len = r.unpack("<HI", "header")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    desc = Reader(r.take(desc_len, "descriptor"), "checkpoint descriptor")
    try:
        arch = parse_descriptor(desc)
    except ConfigError as exc:
        raise FormatError(f"invalid architecture descriptor: {exc}") from exc
    if desc.remaining():
        raise FormatError("trailing bytes in architecture descriptor")
    layers = []
    for l, (ws, bs) in enumerate(arch.param_shapes()):
        w = np.frombuffer(r.take(8 * int(np.prod(ws)), f"layer {l} weights"), dtype=_F64).reshape(ws)
        b = np.frombuffer(r.take(8 * int(np.prod(bs)), f"layer {l} biases"), dtype=_F64).reshape(bs)
        layers.append((w.astype(np.float64), b.astype(np.float64)))
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes after parameters")
    return ModelParams(arch, layers)


def save(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def load(path) -> ModelParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
