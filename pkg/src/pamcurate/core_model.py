"""Domain types, identifiers, and file formats shared by every pipeline stage.

The atomic unit of curation is a 10-second, non-overlapping window of one
hydrophone recording.  Windows are addressed by a content-derived 64-bit id
(see :func:`window_id_of`) so that shards and manifests produced by
independent workers agree without coordination.

File formats owned by this module:

* Embedding shard (binary, little-endian): magic ``PAMEMB01``, ``u32 dim``,
  ``u64 count``, then ``count`` records of ``[u64 window_id][dim * f32]``.
* Curation manifest (UTF-8 text): one ``key=value`` record per line in
  canonical key order, lines sorted by ``window_id``.
* Deployment config (JSON): hydrophones with locations and recordings.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from operator import attrgetter
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    ParseError,
    ShardDimError,
    ShardMagicError,
    ShardTruncatedError,
    ValidationError,
)

WINDOW_S = 10
# Downstream feature extraction resamples to this rate; recorded here as
# metadata only, audio DSP happens outside this package.
TARGET_SAMPLE_RATE_HZ = 16_000
SHARD_MAGIC = b"PAMEMB01"
MANIFEST_SOURCES = ("ais", "hkmeans")
MANIFEST_KEYS = ("window_id", "hydrophone_id", "recording_id", "offset_s", "source", "mmsi", "cluster_path")
_BY_WINDOW_ID = attrgetter("window_id")

_TOKEN_RE = re.compile(r"[A-Za-z0-9_.\-]+\Z")
_U64_MAX = 2**64 - 1
_token_cache: set[str] = set()


def _require_token(value: str, what: str) -> str:
    # Manifests repeat a handful of ids across hundreds of thousands of
    # entries; memoize the accepted ones.
    if value in _token_cache:
        return value
    if not isinstance(value, str) or not _TOKEN_RE.match(value):
        raise ValidationError(f"{what} must be a non-empty token of [A-Za-z0-9_.-], got {value!r}")
    if len(_token_cache) < 65536:
        _token_cache.add(value)
    return value


def parse_utc(text: str) -> int:
    """Parse ``YYYY-MM-DDTHH:MM:SS`` (naive = UTC) to Unix epoch seconds."""
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ValidationError(f"bad UTC timestamp {text!r}: {exc}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_utc(epoch_s: int) -> str:
    return datetime.fromtimestamp(epoch_s, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class GeoPoint:
    """A WGS84 coordinate; ``lon`` is normalized to the half-open [-180, 180)."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (np.isfinite(self.lat) and np.isfinite(self.lon)):
            raise ValidationError(f"coordinates must be finite, got ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"latitude {self.lat} outside [-90, 90]")
        lon = ((self.lon + 180.0) % 360.0) - 180.0
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True, slots=True)
class Recording:
    """One continuous recording; ``start`` is Unix epoch seconds (UTC)."""

    id: str
    start: int
    duration_s: int
    native_sample_rate_hz: int

    def __post_init__(self):
        _require_token(self.id, "recording id")
        if self.duration_s < 0:
            raise ValidationError(f"recording {self.id}: duration_s {self.duration_s} < 0")
        if self.native_sample_rate_hz <= 0:
            raise ValidationError(f"recording {self.id}: sample rate must be positive")

    @property
    def end(self) -> int:
        return self.start + self.duration_s

    @property
    def window_count(self) -> int:
        return window_count(self.duration_s)


@dataclass(frozen=True, slots=True)
class Hydrophone:
    id: str
    location: GeoPoint
    recordings: tuple[Recording, ...] = ()

    def __post_init__(self):
        _require_token(self.id, "hydrophone id")
        object.__setattr__(self, "recordings", tuple(self.recordings))
        seen = set()
        for rec in self.recordings:
            if rec.id in seen:
                raise ValidationError(f"hydrophone {self.id}: duplicate recording id {rec.id}")
            seen.add(rec.id)
        by_start = sorted(self.recordings, key=lambda r: r.start)
        for prev, cur in zip(by_start, by_start[1:]):
            if cur.start < prev.end:
                raise ValidationError(
                    f"hydrophone {self.id}: recordings {prev.id} and {cur.id} overlap in time"
                )


@dataclass(frozen=True, slots=True)
class AudioWindow:
    """One complete 10-second slice of a recording."""

    window_id: int
    hydrophone_id: str
    recording_id: str
    offset_s: int

    def __post_init__(self):
        if self.offset_s < 0 or self.offset_s % WINDOW_S != 0:
            raise ValidationError(f"window offset {self.offset_s} must be a non-negative multiple of {WINDOW_S}")


@dataclass(frozen=True, slots=True)
class AisPulse:
    """One timestamped, geolocated vessel ping."""

    mmsi: int
    time: int
    position: GeoPoint
    vessel_type: int | None = None

    def __post_init__(self):
        if not 0 < self.mmsi <= 999_999_999:
            raise ValidationError(f"mmsi {self.mmsi} outside 1..999999999")


# ---------------------------------------------------------------------------
# Window arithmetic and identifiers
# ---------------------------------------------------------------------------


def window_count(duration_s: int) -> int:
    """Number of complete 10-second windows in a recording of ``duration_s``."""
    if duration_s < 0:
        raise ValidationError(f"duration_s {duration_s} < 0")
    return int(duration_s) // WINDOW_S


def window_id_of(hydrophone_id: str, recording_id: str, offset_s: int) -> int:
    """Stable 64-bit id of a window.

    Defined as the big-endian integer value of the 8-byte BLAKE2b digest of
    the UTF-8 string ``"{hydrophone_id}/{recording_id}/{offset_s}"``.  The
    id scheme is part of the on-disk contract: independently produced shards
    and manifests must agree on it.
    """
    _require_token(hydrophone_id, "hydrophone id")
    _require_token(recording_id, "recording id")
    if offset_s < 0 or offset_s % WINDOW_S != 0:
        raise ValidationError(f"window offset {offset_s} must be a non-negative multiple of {WINDOW_S}")
    key = f"{hydrophone_id}/{recording_id}/{offset_s}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


# ---------------------------------------------------------------------------
# Embedding shards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingShard:
    """A batch of (window_id, embedding vector) records.

    ``window_ids`` is a ``(n,)`` uint64 array, ``vectors`` a ``(n, dim)``
    float32 array.  Ids are unique within a shard and vectors finite.
    """

    dim: int
    window_ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"shard dim must be >= 1, got {self.dim}")
        ids = np.ascontiguousarray(np.asarray(self.window_ids, dtype=np.uint64))
        vecs = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        if vecs.ndim != 2 or vecs.shape[1] != self.dim:
            raise ValidationError(f"vectors must have shape (n, {self.dim}), got {vecs.shape}")
        if ids.shape != (vecs.shape[0],):
            raise ValidationError(f"window_ids shape {ids.shape} does not match {vecs.shape[0]} vectors")
        if not np.all(np.isfinite(vecs)):
            raise ValidationError("shard vectors must be finite")
        if len(np.unique(ids)) != len(ids):
            raise ValidationError("window_ids must be unique within a shard")
        object.__setattr__(self, "window_ids", ids)
        object.__setattr__(self, "vectors", vecs)

    def __len__(self) -> int:
        return len(self.window_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingShard):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.window_ids, other.window_ids)
            and np.array_equal(self.vectors, other.vectors)
        )


def write_shard(shard: EmbeddingShard, path: str | Path) -> None:
    n = len(shard)
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<IQ", shard.dim, n))
        record = np.empty(n, dtype=_record_dtype(shard.dim))
        record["window_id"] = shard.window_ids
        record["vector"] = shard.vectors
        fh.write(record.tobytes())


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("window_id", "<u8"), ("vector", "<f4", (dim,))])


def read_shard(path: str | Path, expect_dim: int | None = None) -> EmbeddingShard:
    """Read a shard file, raising a distinct error per malformation.

    Error offsets point at the byte where the malformed structure begins:
    magic at 0, dim at 8, count at 12, record ``i`` at ``20 + i*(8+4*dim)``.
    """
    data = Path(path).read_bytes()
    spath = str(path)
    if len(data) < 8:
        raise ShardTruncatedError("file too short for magic", path=spath, offset=0)
    if data[:8] != SHARD_MAGIC:
        raise ShardMagicError(f"bad magic {data[:8]!r}", path=spath, offset=0)
    if len(data) < 12:
        raise ShardTruncatedError("file ends inside dim field", path=spath, offset=8)
    (dim,) = struct.unpack_from("<I", data, 8)
    if dim == 0:
        raise ShardDimError("dim must be >= 1", path=spath, offset=8)
    if expect_dim is not None and dim != expect_dim:
        raise ShardDimError(f"dim {dim} != expected {expect_dim}", path=spath, offset=8)
    if len(data) < 20:
        raise ShardTruncatedError("file ends inside count field", path=spath, offset=12)
    (count,) = struct.unpack_from("<Q", data, 12)
    rec_size = 8 + 4 * dim
    expected = 20 + count * rec_size
    if len(data) < expected:
        complete = (len(data) - 20) // rec_size
        raise ShardTruncatedError(
            f"record {complete} of {count} incomplete", path=spath, offset=20 + complete * rec_size
        )
    if len(data) > expected:
        raise ParseError(f"{len(data) - expected} trailing bytes", path=spath, offset=expected)
    records = np.frombuffer(data, dtype=_record_dtype(dim), count=count, offset=20)
    return EmbeddingShard(dim=dim, window_ids=records["window_id"].copy(), vectors=records["vector"].copy())


# ---------------------------------------------------------------------------
# Curation manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ManifestEntry:
    window_id: int
    hydrophone_id: str
    recording_id: str
    offset_s: int
    source: str
    mmsi: int | None = None
    cluster_path: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0 <= self.window_id <= _U64_MAX:
            raise ValidationError(f"window_id {self.window_id} outside u64 range")
        _require_token(self.hydrophone_id, "hydrophone id")
        _require_token(self.recording_id, "recording id")
        if self.offset_s < 0 or self.offset_s % WINDOW_S != 0:
            raise ValidationError(f"offset_s {self.offset_s} must be a non-negative multiple of {WINDOW_S}")
        if self.source not in MANIFEST_SOURCES:
            raise ValidationError(f"source {self.source!r} not in {MANIFEST_SOURCES}")
        if self.mmsi is not None and not 0 < self.mmsi <= 999_999_999:
            raise ValidationError(f"mmsi {self.mmsi} outside 1..999999999")
        if self.cluster_path is not None:
            path = tuple(int(c) for c in self.cluster_path)
            if not path or any(c < 0 for c in path):
                raise ValidationError(f"cluster_path {self.cluster_path!r} must be non-empty, non-negative")
            object.__setattr__(self, "cluster_path", path)


@dataclass(frozen=True)
class CurationManifest:
    """The assembled output dataset: deduplicated entries sorted by window_id."""

    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=_BY_WINDOW_ID))
        ids = [e.window_id for e in entries]
        if len(set(ids)) != len(ids):
            dup = next(a for a, b in zip(ids, ids[1:]) if a == b)
            raise ValidationError(f"duplicate window_id {dup} in manifest")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def count_by_source(self) -> dict[str, int]:
        counts = {s: 0 for s in MANIFEST_SOURCES}
        for e in self.entries:
            counts[e.source] += 1
        return counts


def _entry_to_line(e: ManifestEntry) -> str:
    parts = [
        f"window_id={e.window_id}",
        f"hydrophone_id={e.hydrophone_id}",
        f"recording_id={e.recording_id}",
        f"offset_s={e.offset_s}",
        f"source={e.source}",
    ]
    if e.mmsi is not None:
        parts.append(f"mmsi={e.mmsi}")
    if e.cluster_path is not None:
        parts.append("cluster_path=" + "/".join(str(c) for c in e.cluster_path))
    return " ".join(parts)


def _entry_from_line(line: str, lineno: int, path: str) -> ManifestEntry:
    fields: dict[str, str] = {}
    for token in line.split(" "):
        key, sep, value = token.partition("=")
        if not sep or key not in MANIFEST_KEYS or key in fields:
            raise ParseError(f"bad manifest token {token!r}", path=path, offset=lineno)
        fields[key] = value
    try:
        cluster_path = None
        if "cluster_path" in fields:
            cluster_path = tuple(int(c) for c in fields["cluster_path"].split("/"))
        return ManifestEntry(
            window_id=int(fields["window_id"]),
            hydrophone_id=fields["hydrophone_id"],
            recording_id=fields["recording_id"],
            offset_s=int(fields["offset_s"]),
            source=fields["source"],
            mmsi=int(fields["mmsi"]) if "mmsi" in fields else None,
            cluster_path=cluster_path,
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad manifest line: {exc}", path=path, offset=lineno) from None


def write_manifest(manifest: CurationManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in manifest.entries:
            fh.write(_entry_to_line(e))
            fh.write("\n")


def read_manifest(path: str | Path) -> CurationManifest:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            entries.append(_entry_from_line(line, lineno, str(path)))
    return CurationManifest(entries=tuple(entries))


# ---------------------------------------------------------------------------
# Deployment config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeploymentConfig:
    hydrophones: tuple[Hydrophone, ...]

    def __post_init__(self):
        object.__setattr__(self, "hydrophones", tuple(self.hydrophones))
        seen = set()
        for h in self.hydrophones:
            if h.id in seen:
                raise ValidationError(f"duplicate hydrophone id {h.id}")
            seen.add(h.id)

    def iter_windows(self) -> Iterator[AudioWindow]:
        for h in self.hydrophones:
            for rec in h.recordings:
                for i in range(rec.window_count):
                    off = i * WINDOW_S
                    yield AudioWindow(window_id_of(h.id, rec.id, off), h.id, rec.id, off)

    def window_index(self) -> dict[int, AudioWindow]:
        index: dict[int, AudioWindow] = {}
        for w in self.iter_windows():
            if w.window_id in index:
                raise ValidationError(f"window id collision on {w.window_id}")
            index[w.window_id] = w
        return index

    def total_windows(self) -> int:
        return sum(rec.window_count for h in self.hydrophones for rec in h.recordings)


def load_deployment(path: str | Path) -> DeploymentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad deployment config: {exc}", path=str(path)) from None
    try:
        hydrophones = []
        for h in doc["hydrophones"]:
            recordings = tuple(
                Recording(
                    id=r["id"],
                    start=parse_utc(r["start"]) if isinstance(r["start"], str) else int(r["start"]),
                    duration_s=int(r["duration_s"]),
                    native_sample_rate_hz=int(r["native_sample_rate_hz"]),
                )
                for r in h.get("recordings", [])
            )
            hydrophones.append(
                Hydrophone(id=h["id"], location=GeoPoint(float(h["lat"]), float(h["lon"])), recordings=recordings)
            )
        return DeploymentConfig(hydrophones=tuple(hydrophones))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"bad deployment config: missing/invalid field {exc}", path=str(path)) from None


def save_deployment(config: DeploymentConfig, path: str | Path) -> None:
    doc = {
        "hydrophones": [
            {
                "id": h.id,
                "lat": h.location.lat,
                "lon": h.location.lon,
                "recordings": [
                    {
                        "id": r.id,
                        "start": format_utc(r.start),
                        "duration_s": r.duration_s,
                        "native_sample_rate_hz": r.native_sample_rate_hz,
                    }
                    for r in h.recordings
                ],
            }
            for h in config.hydrophones
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
