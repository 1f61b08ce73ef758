"""Append-only binary embedding store.

File layout (all integers little endian):

    header : magic b"VWSE" | format version u16 | dim u32
    record : key length u16 | key utf-8 | modality u8 (0 text, 1 image)
             | model id length u16 | model id utf-8 | dim float32 values

The header is written with the first record, so an empty store has no file.
"""

import hashlib
import logging
import re
import struct
import threading
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.typing import NDArray

from visual_wsd.errors import IntegrityError
from visual_wsd.models import EmbeddingVector, Modality

MAGIC = b"VWSE"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHI")
LENGTH = struct.Struct("<H")
MODALITY_CODES: dict[Modality, int] = {"text": 0, "image": 1}
MODALITY_NAMES: dict[int, Modality] = {v: k for k, v in MODALITY_CODES.items()}

StoreKey = tuple[str, Modality, str]


class EmbeddingStore:
    """
    A single store file. Values are held in memory after the initial scan; appends go
    through one lock and are flushed immediately, so a reader re-opening the file sees
    every record written so far. The first value stored for a key wins.
    """

    def __init__(self, path: Path, dim: int | None = None) -> None:
        self.path = Path(path)
        self._dim = dim
        self._values: dict[StoreKey, NDArray[np.float32]] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._scan()

    @property
    def dim(self) -> int | None:
        return self._dim

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, key: StoreKey) -> bool:
        return key in self._values

    def keys(self) -> Iterator[StoreKey]:
        return iter(list(self._values))

    def _scan(self) -> None:
        data = self.path.read_bytes()
        if len(data) < HEADER.size:
            raise IntegrityError(f"{self.path}: truncated header")
        magic, version, dim = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise IntegrityError(f"{self.path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise IntegrityError(f"{self.path}: unsupported format version {version}")
        if self._dim is not None and self._dim != dim:
            raise IntegrityError(
                f"{self.path}: stored dim {dim} != expected {self._dim}"
            )
        self._dim = dim

        offset = HEADER.size
        width = 4 * dim
        while offset < len(data):
            try:
                (key_len,) = LENGTH.unpack_from(data, offset)
                offset += LENGTH.size
                key = data[offset : offset + key_len].decode("utf-8")
                offset += key_len
                modality = MODALITY_NAMES[data[offset]]
                offset += 1
                (model_len,) = LENGTH.unpack_from(data, offset)
                offset += LENGTH.size
                model_id = data[offset : offset + model_len].decode("utf-8")
                offset += model_len
                if offset + width > len(data):
                    raise IntegrityError(f"{self.path}: truncated record for {key!r}")
                values = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
                offset += width
            except (struct.error, KeyError, IndexError, UnicodeDecodeError) as e:
                raise IntegrityError(
                    f"{self.path}: corrupt record at byte {offset}"
                ) from e
            store_key = (model_id, modality, key)
            if store_key in self._values:
                raise IntegrityError(f"{self.path}: duplicate key {store_key}")
            self._values[store_key] = values.astype(np.float32)
        logging.info(
            f"Opened embedding store {self.path} "
            f"({len(self._values)} vectors, dim {dim})"
        )

    def get_array(
        self, model_id: str, modality: Modality, key: str
    ) -> NDArray[np.float32] | None:
        return self._values.get((model_id, modality, key))

    def get(
        self, model_id: str, modality: Modality, key: str
    ) -> EmbeddingVector | None:
        values = self.get_array(model_id, modality, key)
        if values is None:
            return None
        return EmbeddingVector(
            model_id=model_id,
            modality=modality,
            key=key,
            values=tuple(float(v) for v in values),
        )

    def append(self, vector: EmbeddingVector) -> bool:
        """Append one vector. Returns False, writing nothing, if the key exists."""
        return self.append_many([vector]) == 1

    def append_many(self, vectors: list[EmbeddingVector]) -> int:
        """Append vectors in order, skipping stored keys. Returns the number written."""
        with self._lock:
            chunks: list[bytes] = []
            pending: dict[StoreKey, NDArray[np.float32]] = {}
            for vector in vectors:
                store_key = (vector.model_id, vector.modality, vector.key)
                if store_key in self._values or store_key in pending:
                    continue
                if self._dim is None:
                    self._dim = vector.dim
                if vector.dim != self._dim:
                    raise IntegrityError(
                        f"{self.path}: vector {vector.key!r} has dim {vector.dim}, "
                        f"store has {self._dim}"
                    )
                values = np.asarray(vector.values, dtype="<f4")
                key_bytes = vector.key.encode("utf-8")
                model_bytes = vector.model_id.encode("utf-8")
                chunks.append(
                    LENGTH.pack(len(key_bytes))
                    + key_bytes
                    + bytes([MODALITY_CODES[vector.modality]])
                    + LENGTH.pack(len(model_bytes))
                    + model_bytes
                    + values.tobytes()
                )
                pending[store_key] = values.astype(np.float32)
            if not chunks:
                return 0
            assert self._dim is not None
            new_file = not self.path.exists()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as f:
                if new_file:
                    f.write(HEADER.pack(MAGIC, FORMAT_VERSION, self._dim))
                f.write(b"".join(chunks))
                f.flush()
            self._values.update(pending)
            return len(chunks)


def _store_filename(model_id: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9._-]+", "_", model_id).strip("_") or "model"
    digest = hashlib.sha1(model_id.encode("utf-8")).hexdigest()[:8]
    return f"{slug}-{digest}.vwse"


class EmbeddingCache:
    """A directory holding one store per model id, since encoders differ in dim."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self._stores: dict[str, EmbeddingStore] = {}
        self._lock = threading.Lock()

    def store_for(self, model_id: str) -> EmbeddingStore:
        with self._lock:
            if model_id not in self._stores:
                self._stores[model_id] = EmbeddingStore(
                    self.root / _store_filename(model_id)
                )
            return self._stores[model_id]

    def __len__(self) -> int:
        return sum(len(store) for store in self._stores.values())
