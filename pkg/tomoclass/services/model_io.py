"""
Model files.

Layout: b"TCML1", version byte, kind byte, u32 header length, UTF-8 JSON
header (sorted keys), then each tree's arrays little-endian in header order
(feature i4, threshold f8, left i4, right i4, value f8), then, for
ensembles, the member blobs whose byte lengths the header lists.
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np

from tomoclass.core.errors import FormatError, HeaderError, TruncationError
from tomoclass.services.cart import Tree
from tomoclass.services.learners import Model, ModelKind

logger = logging.getLogger(__name__)

MAGIC = b"TCML1"
VERSION = 1
_KIND_CODES = {ModelKind.TREE: 1, ModelKind.FOREST: 2, ModelKind.GBM: 3, ModelKind.ENSEMBLE: 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_PRELUDE = struct.Struct("<BBI")


def model_to_bytes(model: Model) -> bytes:
    member_blobs = [model_to_bytes(m) for m in model.members]
    header = {
        "classes": [int(c) for c in model.classes],
        "schema_hash": model.schema_hash,
        "n_features": int(model.n_features),
        "seed": int(model.seed),
        "params": model.params,
        "learning_rate": float(model.learning_rate),
        "train_loss": [float(v) for v in model.train_loss],
        "trees": [[t.n_nodes, int(t.value.shape[1])] for t in model.trees],
        "weights": [float(w) for w in model.weights],
        "members": [len(b) for b in member_blobs],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _PRELUDE.pack(VERSION, _KIND_CODES[model.kind], len(head)), head]
    for t in model.trees:
        parts += [
            t.feature.astype("<i4").tobytes(),
            t.threshold.astype("<f8").tobytes(),
            t.left.astype("<i4").tobytes(),
            t.right.astype("<i4").tobytes(),
            t.value.astype("<f8").tobytes(),
        ]
    parts += member_blobs
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, origin: str):
        self.buf = buf
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"{self.origin}: model data truncated at byte {self.pos} (+{n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int, shape=None) -> np.ndarray:
        dt = np.dtype(dtype)
        a = np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))
        return a.reshape(shape) if shape else a


def model_from_bytes(buf: bytes, origin: str = "<bytes>") -> Model:
    r = _Reader(buf, origin)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{origin}: not a TCML1 model file")
    version, kind_code, head_len = _PRELUDE.unpack(r.take(_PRELUDE.size))
    if version != VERSION:
        raise HeaderError(f"{origin}: unsupported model version {version}")
    if kind_code not in _CODE_KINDS:
        raise HeaderError(f"{origin}: unknown model kind {kind_code}")
    try:
        h = json.loads(r.take(head_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise HeaderError(f"{origin}: bad model header: {e}")

    trees = []
    for n_nodes, n_out in h["trees"]:
        trees.append(Tree(
            feature=r.array("<i4", n_nodes),
            threshold=r.array("<f8", n_nodes),
            left=r.array("<i4", n_nodes),
            right=r.array("<i4", n_nodes),
            value=r.array("<f8", n_nodes * n_out, (n_nodes, n_out)),
        ))
    members = [model_from_bytes(r.take(n), origin) for n in h["members"]]
    if r.pos != len(buf):
        raise FormatError(f"{origin}: {len(buf) - r.pos} trailing bytes after model payload")
    return Model(
        kind=_CODE_KINDS[kind_code],
        classes=np.array(h["classes"], dtype=np.int64),
        schema_hash=h["schema_hash"],
        n_features=int(h["n_features"]),
        seed=int(h["seed"]),
        params=h["params"],
        trees=trees,
        learning_rate=float(h["learning_rate"]),
        train_loss=list(h["train_loss"]),
        members=members,
        weights=list(h["weights"]),
    )


def save_model(model: Model, path: str | Path) -> None:
    data = model_to_bytes(model)
    Path(path).write_bytes(data)
    logger.info("Model (%s) saved: %s, %d bytes", model.kind.value, path, len(data))


def load_model(path: str | Path) -> Model:
    return model_from_bytes(Path(path).read_bytes(), str(path))
