"""Per-minibatch update ledger, pruning masks and the ledger file format.

File layout (little-endian)::

    b"FGTL" u16 version  32-byte arch fingerprint  u8 mode
    u32 epochs  u32 batches_per_epoch  u32 n_layers  u32 n_records
    u32 layer_sizes[n_layers]
    records: u32 epoch, u32 batch, u32 n_ids, u64 ids[n_ids], then per layer
        u8 encoding (0 dense, 1 sparse), u32 layer_size,
        dense:  f64 values[layer_size]
        sparse: u32 nnz, u32 indices[nnz], f64 values[nnz]
    u32 crc32 of everything before it

A layer is the flattened concatenation of its weights and biases.
"""

from __future__ import annotations

import functools
import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from forgetd._binio import Reader
from forgetd.errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    DuplicateRecordError,
    FormatError,
    LedgerLookupError,
    TruncatedError,
    UsageError,
    VersionError,
)
from forgetd.nn import Arch, ModelParams

MAGIC = b"FGTL"
VERSION = 1
MODES = ("full", "random", "magnitude", "global")
STRATEGIES = MODES[1:]
DENSE, SPARSE = 0, 1
SPARSE_THRESHOLD = 0.5
HEADER_BYTES = 4 + 2 + 32 + 1 + 4 * 4
_F64 = np.dtype("<f8")
_U32 = np.dtype("<u4")
_U64 = np.dtype("<u8")


def zero_count(fraction: float, size: int) -> int:
    """``round(fraction * size)`` with halves rounded up."""
    return int(np.floor(fraction * size + 0.5))


def linear_schedule(n_layers: int, first: float, last: float) -> tuple[float, ...]:
    """Fractions interpolated linearly from the first to the last parameter layer."""
    if n_layers == 1:
        return (float(first),)
    return tuple(float(first + (last - first) * l / (n_layers - 1)) for l in range(n_layers))


@dataclass(frozen=True)
class PrunePlan:
    """Which entries of each stored update get zeroed.

    ``fractions[l]`` is the share of layer ``l`` that is discarded. The
    ``global`` strategy takes a single fraction applied across the whole
    update.
    """

    strategy: str
    fractions: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown pruning strategy {self.strategy!r}")
        object.__setattr__(self, "fractions", tuple(float(p) for p in self.fractions))
        if not self.fractions or any(not 0.0 <= p <= 1.0 for p in self.fractions):
            raise ConfigError(f"pruning fractions must lie in [0, 1], got {self.fractions}")
        if self.strategy == "global" and len(self.fractions) != 1:
            raise ConfigError("global pruning takes exactly one fraction")

    @classmethod
    def depth_schedule(cls, n_layers, first=0.9, last=0.1, strategy="random", seed=0) -> "PrunePlan":
        fr = linear_schedule(n_layers, first, last)
        if strategy == "global":
            fr = (float(np.mean(fr)),)
        return cls(strategy, fr, seed)

    @classmethod
    def uniform(cls, n_layers, fraction, strategy="random", seed=0) -> "PrunePlan":
        return cls(strategy, (fraction,) if strategy == "global" else (fraction,) * n_layers, seed)

    def fraction(self, l: int) -> float:
        if self.strategy == "global":
            return self.fractions[0]
        try:
            return self.fractions[l]
        except IndexError:
            raise ConfigError(f"prune plan has {len(self.fractions)} fractions, layer {l} requested") from None


@functools.lru_cache(maxsize=64)
def _random_mask(seed: int, l: int, size: int, k: int) -> np.ndarray:
    mask = np.ones(size, dtype=bool)
    mask[np.random.default_rng([seed, l]).permutation(size)[:k]] = False
    mask.flags.writeable = False
    return mask


def _smallest_mask(values: np.ndarray, k: int) -> np.ndarray:
    mask = np.ones(values.size, dtype=bool)
    if k:
        order = np.argsort(np.abs(values), kind="stable")  # ties: lower index pruned first
        mask[order[:k]] = False
    return mask


def make_prune_mask(plan: PrunePlan, l: int, layer_size: int, update_values=None) -> np.ndarray:
    """0/1 mask (bool) over the flattened layer ``l``.

    ``random`` masks depend only on ``(plan.seed, l)`` and are reused for every
    update. ``magnitude`` needs this layer's update values. ``global`` needs the
    whole update: pass the list of every layer's flattened values.
    """
    if plan.strategy == "random":
        return _random_mask(plan.seed, l, layer_size, zero_count(plan.fraction(l), layer_size))
    if update_values is None:
        raise UsageError(f"{plan.strategy} pruning needs the update values")
    if plan.strategy == "magnitude":
        v = np.asarray(update_values, dtype=np.float64).ravel()
        if v.size != layer_size:
            raise UsageError(f"update has {v.size} values, layer {l} has {layer_size}")
        return _smallest_mask(v, zero_count(plan.fraction(l), layer_size))
    return make_prune_masks(plan, update_values)[l]


def make_prune_masks(plan: PrunePlan, flats: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Masks for every layer of one update."""
    if plan.strategy != "global":
        return [make_prune_mask(plan, l, v.size, v) for l, v in enumerate(flats)]
    flats = [np.asarray(v, dtype=np.float64).ravel() for v in flats]
    whole = np.concatenate(flats)
    mask = _smallest_mask(whole, zero_count(plan.fractions[0], whole.size))
    bounds = np.cumsum([0] + [v.size for v in flats])
    return [mask[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass(eq=False)
class LayerDelta:
    """One layer of a stored update, dense or as sorted (index, value) pairs."""

    size: int
    values: np.ndarray
    indices: np.ndarray | None = None

    @property
    def encoding(self) -> int:
        return DENSE if self.indices is None else SPARSE

    def to_dense(self) -> np.ndarray:
        if self.indices is None:
            return self.values
        out = np.zeros(self.size)
        out[self.indices] = self.values
        return out

    def add_into(self, acc: np.ndarray) -> None:
        if self.indices is None:
            acc += self.values
        else:
            acc[self.indices] += self.values

    def payload_bytes(self) -> int:
        if self.indices is None:
            return 1 + 4 + 8 * self.size
        return 1 + 4 + 4 + 12 * self.values.size

    def equals(self, other: "LayerDelta") -> bool:
        if self.size != other.size or self.encoding != other.encoding:
            return False
        if self.indices is not None and self.indices.tobytes() != other.indices.tobytes():
            return False
        return self.values.tobytes() == other.values.tobytes()


def apply_mask(delta_layer, mask_layer) -> LayerDelta:
    """Hadamard product of a flattened delta and a 0/1 mask.

    Stored sparse (kept positions only) when at least half the mask is zero.
    """
    d = np.asarray(delta_layer, dtype=np.float64).ravel()
    m = np.asarray(mask_layer).ravel().astype(bool)
    if d.shape != m.shape:
        raise UsageError(f"delta of size {d.size} vs mask of size {m.size}")
    zeros = d.size - int(np.count_nonzero(m))
    if d.size and zeros / d.size >= SPARSE_THRESHOLD:
        idx = np.flatnonzero(m).astype(np.uint32)
        return LayerDelta(d.size, d[idx], idx)
    return LayerDelta(d.size, np.where(m, d, 0.0))


@dataclass(eq=False)
class UpdateRecord:
    epoch: int
    batch: int
    member_ids: np.ndarray
    layers: list

    def equals(self, other: "UpdateRecord") -> bool:
        return (
            self.epoch == other.epoch
            and self.batch == other.batch
            and np.array_equal(self.member_ids, other.member_ids)
            and len(self.layers) == len(other.layers)
            and all(a.equals(b) for a, b in zip(self.layers, other.layers))
        )

    def payload_bytes(self) -> int:
        return 12 + 8 * self.member_ids.size + sum(x.payload_bytes() for x in self.layers)


@dataclass(eq=False)
class Ledger:
    """Append-only record of training updates plus batch membership.

    ``mode`` is ``"full"`` or the pruning strategy name; ``plan`` holds the
    pruning fractions while recording and is not persisted.
    """

    fingerprint: bytes
    mode: str
    n_epochs: int
    batches_per_epoch: int
    layer_sizes: tuple[int, ...]
    records: list = field(default_factory=list)
    plan: PrunePlan | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown ledger mode {self.mode!r}")
        if self.mode != "full" and self.plan is not None and self.plan.strategy != self.mode:
            raise ConfigError(f"mode {self.mode!r} does not match plan strategy {self.plan.strategy!r}")
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self._index = {}
        self._members = None
        for i, r in enumerate(self.records):
            key = (r.epoch, r.batch)
            if key in self._index:
                raise DuplicateRecordError(f"duplicate record for epoch {r.epoch}, batch {r.batch}")
            self._index[key] = i

    @classmethod
    def create(cls, arch: Arch, n_epochs: int, batches_per_epoch: int, plan: PrunePlan | None = None):
        from forgetd.checkpoint import arch_fingerprint

        mode = "full" if plan is None else plan.strategy
        return cls(arch_fingerprint(arch), mode, n_epochs, batches_per_epoch, tuple(arch.layer_sizes()), [], plan)

    @property
    def pruned(self) -> bool:
        return self.mode != "full"

    def __len__(self):
        return len(self.records)

    def keys(self) -> list[tuple[int, int]]:
        return [(r.epoch, r.batch) for r in self.records]

    def __contains__(self, key):
        return tuple(key) in self._index

    def get(self, e: int, b: int) -> UpdateRecord:
        try:
            return self.records[self._index[(e, b)]]
        except KeyError:
            raise LedgerLookupError(f"no record for epoch {e}, batch {b}") from None

    def equals(self, other: "Ledger") -> bool:
        return (
            self.fingerprint == other.fingerprint
            and self.mode == other.mode
            and self.n_epochs == other.n_epochs
            and self.batches_per_epoch == other.batches_per_epoch
            and self.layer_sizes == other.layer_sizes
            and len(self.records) == len(other.records)
            and all(a.equals(b) for a, b in zip(self.records, other.records))
        )

    def member_index(self) -> dict[int, list[int]]:
        """sample id -> positions of the records whose batch contained it."""
        if self._members is None:
            index: dict[int, list[int]] = {}
            for i, r in enumerate(self.records):
                for s in r.member_ids.tolist():
                    index.setdefault(s, []).append(i)
            self._members = index
        return self._members


def record_update(ledger: Ledger, e: int, b: int, member_ids, delta) -> UpdateRecord:
    """Append the update of batch ``b`` in epoch ``e`` (pruned first in pruned mode).

    ``delta`` is a ModelParams or a list of flattened layer vectors.
    """
    key = (int(e), int(b))
    if key in ledger._index:
        raise DuplicateRecordError(f"duplicate record for epoch {e}, batch {b}")
    flats = delta.flat() if isinstance(delta, ModelParams) else [np.asarray(v, dtype=np.float64).ravel() for v in delta]
    if tuple(v.size for v in flats) != ledger.layer_sizes:
        raise UsageError(f"delta layer sizes {[v.size for v in flats]} do not match ledger {ledger.layer_sizes}")
    if ledger.pruned:
        if ledger.plan is None:
            raise UsageError("pruned ledger has no prune plan to record with")
        layers = [apply_mask(v, m) for v, m in zip(flats, make_prune_masks(ledger.plan, flats))]
    else:
        layers = [LayerDelta(v.size, v.copy()) for v in flats]
    rec = UpdateRecord(key[0], key[1], np.array(member_ids, dtype=np.uint64), layers)
    ledger._index[key] = len(ledger.records)
    ledger.records.append(rec)
    ledger._members = None
    return rec


def affected_batches(ledger: Ledger, target_ids: Iterable) -> set[tuple[int, int]]:
    """(epoch, batch) pairs whose batch contained any of ``target_ids``."""
    index = ledger.member_index()
    hit = set()
    for s in target_ids:
        hit.update(index.get(int(s), ()))
    return {(ledger.records[i].epoch, ledger.records[i].batch) for i in hit}


def sum_updates(ledger: Ledger, batch_set, arch: Arch | None = None):
    """Elementwise sum of the selected updates, accumulated in recording order.

    Returns ModelParams when ``arch`` is given, else a list of flat layers.
    """
    wanted = {(int(e), int(b)) for e, b in batch_set}
    missing = [k for k in wanted if k not in ledger._index]
    if missing:
        e, b = sorted(missing)[0]
        raise LedgerLookupError(f"no record for epoch {e}, batch {b}")
    acc = [np.zeros(s) for s in ledger.layer_sizes]
    for pos in sorted(ledger._index[k] for k in wanted):
        for a, layer in zip(acc, ledger.records[pos].layers):
            layer.add_into(a)
    if arch is None:
        return acc
    if tuple(arch.layer_sizes()) != ledger.layer_sizes:
        raise UsageError("architecture does not match the ledger's layer sizes")
    return ModelParams.from_flat(arch, acc)


def ledger_size_bytes(ledger: Ledger) -> int:
    """Exact size of the serialized ledger file."""
    header = HEADER_BYTES + 4 * len(ledger.layer_sizes)
    return header + sum(r.payload_bytes() for r in ledger.records) + 4


class _CrcWriter:
    def __init__(self, fh):
        self.fh = fh
        self.crc = 0
        self.count = 0

    def write(self, data):
        self.crc = zlib.crc32(data, self.crc)
        self.fh.write(data)
        self.count += len(data)


def write(ledger: Ledger, fh) -> int:
    """Serialize into a binary file object; returns bytes written."""
    w = _CrcWriter(fh)
    if len(ledger.fingerprint) != 32:
        raise UsageError("fingerprint must be 32 bytes")
    w.write(MAGIC + struct.pack("<H", VERSION) + ledger.fingerprint)
    w.write(struct.pack("<B4I", MODES.index(ledger.mode), ledger.n_epochs, ledger.batches_per_epoch,
                        len(ledger.layer_sizes), len(ledger.records)))
    w.write(struct.pack(f"<{len(ledger.layer_sizes)}I", *ledger.layer_sizes))
    for r in ledger.records:
        ids = np.ascontiguousarray(r.member_ids, dtype=_U64)
        w.write(struct.pack("<3I", r.epoch, r.batch, ids.size) + ids.tobytes())
        for layer in r.layers:
            if layer.indices is None:
                w.write(struct.pack("<BI", DENSE, layer.size))
                w.write(np.ascontiguousarray(layer.values, dtype=_F64).tobytes())
            else:
                w.write(struct.pack("<BII", SPARSE, layer.size, layer.values.size))
                w.write(np.ascontiguousarray(layer.indices, dtype=_U32).tobytes())
                w.write(np.ascontiguousarray(layer.values, dtype=_F64).tobytes())
    fh.write(struct.pack("<I", w.crc))
    return w.count + 4


def to_bytes(ledger: Ledger) -> bytes:
    buf = io.BytesIO()
    write(ledger, buf)
    return buf.getvalue()


def save(ledger: Ledger, path) -> int:
    with open(path, "wb") as fh:
        return write(ledger, fh)


def from_bytes(buf) -> Ledger:
    view = memoryview(buf)
    if bytes(view[:4]) != MAGIC:
        raise BadMagicError("bad ledger magic")
    r = Reader(view, "ledger")
    r.take(4, "header")
    (version,) = r.unpack("<H", "header")
    if version != VERSION:
        raise VersionError(f"unsupported ledger version {version}")
    fingerprint = bytes(r.take(32, "header"))
    mode, n_epochs, n_batches, n_layers, n_records = r.unpack("<B4I", "header")
    if mode >= len(MODES):
        raise FormatError(f"unknown ledger mode byte {mode}")
    if n_layers > 4096:
        raise FormatError(f"implausible layer count {n_layers}")
    sizes = r.unpack(f"<{n_layers}I", "header")
    records, seen = [], set()
    for i in range(n_records):
        where = f"record {i}"
        e, b, n_ids = r.unpack("<3I", where)
        if (e, b) in seen:
            raise FormatError(f"record {i}: duplicate (epoch {e}, batch {b})")
        seen.add((e, b))
        ids = np.frombuffer(r.take(8 * n_ids, where), dtype=_U64).copy()
        layers = []
        for l in range(n_layers):
            enc, size = r.unpack("<BI", where)
            if enc == DENSE:
                vals = np.frombuffer(r.take(8 * size, where), dtype=_F64).astype(np.float64)
                layers.append(LayerDelta(size, vals))
            elif enc == SPARSE:
                (nnz,) = r.unpack("<I", where)
                if nnz > size:
                    raise FormatError(f"record {i} layer {l}: {nnz} entries for a layer of {size}")
                idx = np.frombuffer(r.take(4 * nnz, where), dtype=_U32).astype(np.uint32)
                vals = np.frombuffer(r.take(8 * nnz, where), dtype=_F64).astype(np.float64)
                if nnz and (idx[-1] >= size or np.any(np.diff(idx.astype(np.int64)) <= 0)):
                    raise FormatError(f"record {i} layer {l}: sparse indices not increasing and in range")
                layers.append(LayerDelta(size, vals, idx))
            else:
                raise FormatError(f"record {i} layer {l}: unknown encoding {enc}")
        rec_sizes = tuple(x.size for x in layers)
        if rec_sizes != sizes:
            raise FormatError(f"record {i}: layer sizes {rec_sizes} differ from {sizes}")
        records.append(UpdateRecord(e, b, ids, layers))
    if r.remaining() < 4:
        raise TruncatedError(f"ledger truncated after record {n_records - 1}: missing checksum")
    if r.remaining() > 4:
        raise FormatError(f"{r.remaining() - 4} trailing bytes after the last record")
    (crc,) = r.unpack("<I", "checksum")
    if zlib.crc32(view[:-4]) != crc:
        raise ChecksumError("ledger checksum mismatch")
    return Ledger(fingerprint, MODES[mode], n_epochs, n_batches, sizes, records)


def load(path) -> Ledger:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
