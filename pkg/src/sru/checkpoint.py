"""Bit-exact binary persistence for models, datasets, and centroids.

Container layout (little-endian throughout):

    magic "SRU1" | u32 version | u32 meta_len | canonical-JSON metadata |
    u32 tensor_count | per tensor:
        u16 name_len | name utf-8 | u8 dtype_tag | u8 ndim |
        u64 shape[ndim] | u64 nbytes | raw row-major values
    | u32 crc32 of everything before

Tensors are written in sorted name order and the metadata JSON is
canonical (sorted keys, compact separators), so identical inputs always
produce identical files. Loads fully validate magic, version, shapes,
and the checksum before any object is constructed; a truncated or
corrupt file never yields a partial model.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .aggregation import AggregationConfig, AggregationModel, ShardCentroids
from .backbone import BackboneConfig, GruModel
from .corpus import ItemVocab, Session, SessionDataset
from .errors import ContractError, IntegrityError, StaleArtifactError, VersionError
from .numerics import ParamStore
from .partition import ShardAssignment

MAGIC = b"SRU1"
VERSION = 1

_DTYPE_TAGS = {"<f4": 1, "<f8": 2, "<i8": 3}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}


def _canonical_meta(metadata: dict) -> bytes:
    return json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tag_for(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str
    if key not in _DTYPE_TAGS:
        raise ContractError(f"unsupported tensor dtype {arr.dtype}")
    return _DTYPE_TAGS[key]


def save_container(path, tensors: dict[str, np.ndarray], metadata: dict) -> int:
    """Write one container atomically; returns the byte count."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = _canonical_meta(metadata)
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _tag_for(arr)
        raw = arr.astype(_TAG_DTYPES[tag], copy=False).tobytes()
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body))

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.blob):
            raise IntegrityError(
                f"file truncated: wanted {count} bytes, "
                f"{len(self.blob) - self.offset} remain",
                offset=self.offset,
            )
        out = self.blob[self.offset : self.offset + count]
        self.offset += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read and fully validate one container."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < len(MAGIC) + 8:
        raise IntegrityError("file too short to be a checkpoint", offset=len(blob))
    if blob[: len(MAGIC)] != MAGIC:
        raise VersionError(f"unrecognized magic bytes {blob[:4]!r}; expected {MAGIC!r}")
    body, crc_bytes = blob[:-4], blob[-4:]
    (expected_crc,) = struct.unpack("<I", crc_bytes)
    actual_crc = zlib.crc32(body)
    if actual_crc != expected_crc:
        raise IntegrityError(
            f"checksum mismatch: stored {expected_crc:#010x}, computed {actual_crc:#010x}",
            offset=len(body),
        )

    reader = _Reader(body)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (meta_len,) = reader.unpack("<I")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"metadata block unreadable: {exc}", offset=reader.offset) from None
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        tag, ndim = reader.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise IntegrityError(f"unknown dtype tag {tag} for tensor {name!r}",
                                 offset=reader.offset)
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = reader.unpack("<Q")
        dtype = _TAG_DTYPES[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise IntegrityError(
                f"tensor {name!r}: {nbytes} bytes stored but shape {shape} needs {expected}",
                offset=reader.offset,
            )
        raw = reader.take(nbytes)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if reader.offset != len(body):
        raise IntegrityError(
            f"{len(body) - reader.offset} unexpected trailing bytes", offset=reader.offset
        )
    return tensors, metadata


def check_config_hash(metadata: dict, expected: str | None, force: bool, path) -> None:
    if expected is None or force:
        return
    found = metadata.get("config_hash")
    if found != expected:
        raise StaleArtifactError(
            f"{path} was produced under config hash {found}, current is {expected}; "
            "rerun the upstream stage or pass force"
        )


# -- typed wrappers ----------------------------------------------------------------


def save_checkpoint(obj, path, extra_metadata: dict | None = None) -> int:
    """Persist a GruModel or AggregationModel."""
    extra = dict(extra_metadata or {})
    if isinstance(obj, GruModel):
        meta = {
            "kind": "gru",
            "d": obj.d,
            "num_items": obj.num_items,
            "max_len": obj.max_len,
            "backbone_config": obj.config.as_dict() if obj.config else None,
            **extra,
        }
        return save_container(path, dict(obj.store.params), meta)
    if isinstance(obj, AggregationModel):
        meta = {
            "kind": "aggregation",
            "k": obj.k,
            "d": obj.d,
            "f": obj.f,
            "d_ff": obj.d_ff,
            "num_items": obj.num_items,
            "agg_config": obj.config.as_dict() if obj.config else None,
            **extra,
        }
        return save_container(path, dict(obj.store.params), meta)
    raise ContractError(f"cannot checkpoint object of type {type(obj).__name__}")


def load_checkpoint(path, expected_config_hash: str | None = None, force: bool = False):
    """Load a model checkpoint back into its typed object."""
    tensors, metadata = load_container(path)
    check_config_hash(metadata, expected_config_hash, force, path)
    kind = metadata.get("kind")
    store = ParamStore()
    for name in sorted(tensors):
        store.add(name, tensors[name])
    if kind == "gru":
        config = None
        if metadata.get("backbone_config"):
            config = BackboneConfig.from_dict(metadata["backbone_config"])
        return GruModel(store=store, d=metadata["d"], num_items=metadata["num_items"],
                        max_len=metadata["max_len"], config=config)
    if kind == "aggregation":
        config = None
        if metadata.get("agg_config"):
            config = AggregationConfig.from_dict(metadata["agg_config"])
        return AggregationModel(store=store, k=metadata["k"], d=metadata["d"],
                                f=metadata["f"], d_ff=metadata["d_ff"],
                                num_items=metadata["num_items"], config=config)
    raise VersionError(f"checkpoint kind {kind!r} is not a model")


def save_datasets(path, splits: dict[str, SessionDataset],
                  extra_metadata: dict | None = None) -> int:
    """Persist one or more splits sharing a vocabulary in one container."""
    if not splits:
        raise ContractError("no splits to save")
    vocabs = {id(ds.vocab): ds.vocab for ds in splits.values()}
    if len({v.tokens for v in vocabs.values()}) != 1:
        raise ContractError("all splits must share one vocabulary")
    any_ds = next(iter(splits.values()))
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {
        "kind": "dataset",
        "vocab": list(any_ds.vocab.tokens),
        "max_len": any_ds.max_len,
        "splits": sorted(splits),
        "session_ids": {},
        **(extra_metadata or {}),
    }
    for tag, ds in splits.items():
        items = np.concatenate([np.asarray(s.items, dtype=np.int64) for s in ds.sessions]) \
            if ds.sessions else np.zeros(0, dtype=np.int64)
        offsets = np.zeros(len(ds.sessions) + 1, dtype=np.int64)
        np.cumsum([len(s) for s in ds.sessions], out=offsets[1:])
        clusters = np.array([-1 if s.cluster is None else s.cluster for s in ds.sessions],
                            dtype=np.int64)
        tensors[f"{tag}/items"] = items
        tensors[f"{tag}/offsets"] = offsets
        tensors[f"{tag}/clusters"] = clusters
        if all(s.times is not None for s in ds.sessions):
            times = np.concatenate([np.asarray(s.times, dtype=np.int64) for s in ds.sessions]) \
                if ds.sessions else np.zeros(0, dtype=np.int64)
            tensors[f"{tag}/times"] = times
        meta["session_ids"][tag] = [s.session_id for s in ds.sessions]
    return save_container(path, tensors, meta)


def load_datasets(path, expected_config_hash: str | None = None,
                  force: bool = False) -> dict[str, SessionDataset]:
    tensors, metadata = load_container(path)
    check_config_hash(metadata, expected_config_hash, force, path)
    if metadata.get("kind") != "dataset":
        raise VersionError(f"expected a dataset container, found kind {metadata.get('kind')!r}")
    vocab = ItemVocab.from_tokens(metadata["vocab"])
    out: dict[str, SessionDataset] = {}
    for tag in metadata["splits"]:
        offsets = tensors[f"{tag}/offsets"]
        items = tensors[f"{tag}/items"]
        clusters = tensors[f"{tag}/clusters"]
        times = tensors.get(f"{tag}/times")
        ids = metadata["session_ids"][tag]
        sessions = []
        for i, sid in enumerate(ids):
            lo, hi = int(offsets[i]), int(offsets[i + 1])
            sessions.append(Session(
                session_id=sid,
                items=tuple(int(v) for v in items[lo:hi]),
                times=tuple(int(v) for v in times[lo:hi]) if times is not None else None,
                cluster=None if clusters[i] < 0 else int(clusters[i]),
            ))
        out[tag] = SessionDataset(sessions=tuple(sessions), vocab=vocab,
                                  max_len=metadata["max_len"], split_tag=tag)
    return out


def dataset_fingerprint(dataset: SessionDataset) -> str:
    """Stable content hash of one dataset (ids, items, times, vocab)."""
    import hashlib
    h = hashlib.sha256()
    h.update(",".join(dataset.vocab.tokens).encode())
    h.update(str(dataset.max_len).encode())
    for s in dataset.sessions:
        h.update(s.session_id.encode())
        h.update(np.asarray(s.items, dtype=np.int64).tobytes())
        if s.times is not None:
            h.update(np.asarray(s.times, dtype=np.int64).tobytes())
        h.update(str(s.cluster).encode())
    return h.hexdigest()


def save_assignment(csv_path, bin_path, assignment: ShardAssignment,
                    extra_metadata: dict | None = None) -> None:
    """Persist the partition as `session_index,shard_id` CSV plus a
    binary centroid block."""
    rows = sorted(
        (i, k) for k, member in enumerate(assignment.members) for i in member
    )
    text = "\n".join(["session_index,shard_id", *(f"{i},{k}" for i, k in rows)]) + "\n"
    directory = os.path.dirname(os.path.abspath(csv_path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".csv-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, csv_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    meta = {
        "kind": "centroids",
        "iterations_run": assignment.iterations_run,
        "delta": assignment.delta,
        "k": assignment.k,
        "reseeds": [list(r) for r in assignment.reseeds],
        **(extra_metadata or {}),
    }
    save_container(bin_path, {"centroids": assignment.centroids}, meta)


def load_assignment(csv_path, bin_path, expected_config_hash: str | None = None,
                    force: bool = False) -> ShardAssignment:
    tensors, metadata = load_container(bin_path)
    check_config_hash(metadata, expected_config_hash, force, bin_path)
    if metadata.get("kind") != "centroids":
        raise VersionError(f"expected a centroid container, found {metadata.get('kind')!r}")
    k = metadata["k"]
    with open(csv_path, "r", encoding="utf-8") as handle:
        lines = [line.strip() for line in handle if line.strip()]
    if not lines or lines[0] != "session_index,shard_id":
        raise ContractError(f"{csv_path} is not a partition CSV")
    pairs = []
    for line in lines[1:]:
        idx_text, shard_text = line.split(",")
        pairs.append((int(idx_text), int(shard_text)))
    n = max(i for i, _ in pairs) + 1 if pairs else 0
    shard_of = np.full(n, -1, dtype=np.int64)
    members: list[list[int]] = [[] for _ in range(k)]
    for i, c in pairs:
        shard_of[i] = c
        members[c].append(i)
    return ShardAssignment(
        shard_of=shard_of,
        members=tuple(tuple(sorted(m)) for m in members),
        centroids=tensors["centroids"],
        iterations_run=metadata["iterations_run"],
        delta=metadata["delta"],
        reseeds=tuple(tuple(r) for r in metadata.get("reseeds", [])),
    )


def save_centroid_state(path, centroids: ShardCentroids,
                        extra_metadata: dict | None = None) -> int:
    meta = {"kind": "shard_centroids", "source": centroids.source, **(extra_metadata or {})}
    return save_container(path, {"c": centroids.c}, meta)


def load_centroid_state(path, expected_config_hash: str | None = None,
                        force: bool = False) -> ShardCentroids:
    tensors, metadata = load_container(path)
    check_config_hash(metadata, expected_config_hash, force, path)
    if metadata.get("kind") != "shard_centroids":
        raise VersionError(f"expected shard centroids, found {metadata.get('kind')!r}")
    return ShardCentroids(c=tensors["c"], source=metadata["source"])
