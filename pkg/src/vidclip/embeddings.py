"""Embedding dumps: a JSON header line followed by fixed-width binary rows.

Each row is (video_id int64, class_id int64, D float32), little-endian.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, IntegrityError

DUMP_MAGIC = "vidclip-embeddings"


def row_dtype(dim: int) -> np.dtype:
    return np.dtype([("video_id", "<i8"), ("class_id", "<i8"), ("embedding", "<f4", (dim,))])


@dataclass
class EmbeddingDump:
    video_ids: np.ndarray  # N int64
    class_ids: np.ndarray  # N int64
    embeddings: np.ndarray  # N x D float32
    class_names: dict = field(default_factory=dict)  # class_id -> name
    checkpoint_hash: str | None = None
    config_hash: str | None = None
    seed: int | None = None

    def __post_init__(self):
        self.video_ids = np.asarray(self.video_ids, dtype=np.int64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2:
            raise DataError("embeddings must be N x D")
        if not len(self.video_ids) == len(self.class_ids) == len(self.embeddings):
            raise DataError("video_ids, class_ids and embeddings differ in length")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def header(self) -> dict:
        return {"format": DUMP_MAGIC, "count": len(self.class_ids), "dim": self.dim,
                "class_names": {str(k): v for k, v in sorted(self.class_names.items())},
                "checkpoint_hash": self.checkpoint_hash, "config_hash": self.config_hash, "seed": self.seed}


def save_dump(dump: EmbeddingDump, path) -> Path:
    rows = np.empty(len(dump.class_ids), dtype=row_dtype(dump.dim))
    rows["video_id"], rows["class_id"], rows["embedding"] = dump.video_ids, dump.class_ids, dump.embeddings
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(dump.header(), sort_keys=True).encode() + b"\n")
        fh.write(rows.tobytes())
    return path


def load_dump(path) -> EmbeddingDump:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        data = fh.read()
    if header.get("format") != DUMP_MAGIC:
        raise IntegrityError(f"{path}: not an embedding dump")
    dtype = row_dtype(int(header["dim"]))
    if len(data) != header["count"] * dtype.itemsize:
        raise IntegrityError(f"{path}: {len(data)} payload bytes for {header['count']} declared rows")
    rows = np.frombuffer(data, dtype=dtype)
    return EmbeddingDump(rows["video_id"].copy(), rows["class_id"].copy(), rows["embedding"].copy(),
                         {int(k): v for k, v in header["class_names"].items()},
                         header.get("checkpoint_hash"), header.get("config_hash"), header.get("seed"))
