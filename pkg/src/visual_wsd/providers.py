from abc import ABC, abstractmethod
import base64
import logging
import threading
from pathlib import Path
from typing import Sequence

import numpy as np
import requests
from numpy.typing import NDArray

from visual_wsd.embedding_store import EmbeddingCache
from visual_wsd.errors import (
    DegenerateInputError,
    ProviderError,
    ResponseIntegrityError,
    ShapeError,
)
from visual_wsd.models import EmbedRequest, EmbedResponse, EmbeddingVector, Modality
from visual_wsd.service import post_json

VectorLike = EmbeddingVector | NDArray[np.floating] | Sequence[float]
FetchItem = tuple[Modality, str]


def _as_array(vector: VectorLike) -> NDArray[np.float64]:
    if isinstance(vector, EmbeddingVector):
        return vector.array()
    return np.asarray(vector, dtype=np.float64)


def cosine(a: VectorLike, b: VectorLike) -> float:
    """Cosine similarity, clipped to [-1, 1]."""
    va, vb = _as_array(a), _as_array(b)
    if va.shape != vb.shape:
        raise ShapeError(f"Cannot compare vectors of shape {va.shape} and {vb.shape}")
    norm_a = np.linalg.norm(va)
    norm_b = np.linalg.norm(vb)
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateInputError("Cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(va, vb) / (norm_a * norm_b), -1.0, 1.0))


class EmbeddingBackend(ABC):
    """Computes embeddings for raw payloads, over HTTP or with the in-process mock."""

    def __init__(self) -> None:
        self.calls = 0

    @abstractmethod
    def compute(
        self, model_id: str, modality: Modality, payloads: list[bytes]
    ) -> list[list[float]]:
        """Return one vector per payload, in order."""
        pass


class ServiceEmbeddingBackend(EmbeddingBackend):
    """Client for `POST /v1/embed` of a remote inference service."""

    def __init__(
        self,
        endpoint: str,
        session: requests.Session | None = None,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 30.0,
    ) -> None:
        super().__init__()
        self.endpoint = endpoint.rstrip("/")
        self.session = session or requests.Session()
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout

    def _attempted(self) -> None:
        self.calls += 1

    def _post(self, body: EmbedRequest) -> EmbedResponse:
        return post_json(
            self.session,
            f"{self.endpoint}/v1/embed",
            body,
            EmbedResponse,
            self.retries,
            self.backoff,
            self.timeout,
            on_attempt=self._attempted,
        )

    def compute(
        self, model_id: str, modality: Modality, payloads: list[bytes]
    ) -> list[list[float]]:
        if modality == "image":
            inputs = [base64.b64encode(p).decode("ascii") for p in payloads]
        else:
            inputs = [p.decode("utf-8") for p in payloads]
        body = EmbedRequest(model=model_id, modality=modality, inputs=inputs)
        response = self._post(body)
        if len(response.vectors) != len(payloads):
            raise ResponseIntegrityError(
                f"Service returned {len(response.vectors)} vectors "
                f"for {len(payloads)} inputs"
            )
        for vector in response.vectors:
            if len(vector) != response.dim:
                raise ResponseIntegrityError(
                    f"Service declared dim {response.dim} "
                    f"but sent a vector of length {len(vector)}"
                )
        return response.vectors


class ImageSource:
    """Resolves image ids to the bytes sent to an encoder.

    Without an image directory the id itself is the payload, which is what the
    in-process mock encoder expects.
    """

    def __init__(self, image_dir: Path | None = None) -> None:
        self.image_dir = Path(image_dir) if image_dir is not None else None

    def payload(self, image_id: str) -> bytes:
        if self.image_dir is None:
            return image_id.encode("utf-8")
        path = self.image_dir / image_id
        if not path.is_file():
            raise ProviderError(f"Image file not found: {path}")
        return path.read_bytes()


class EmbeddingProvider:
    """
    Write-through embedding lookups. Stored vectors are served from the cache; misses
    are computed by the backend in one batch per call, quantised to float32, appended
    to the store and only then returned, so a re-read always equals the first fetch.
    """

    def __init__(
        self,
        cache: EmbeddingCache,
        backend: EmbeddingBackend | None = None,
        images: ImageSource | None = None,
        max_text_chars: int | None = None,
    ) -> None:
        self.cache = cache
        self.backend = backend
        self.images = images or ImageSource()
        self.max_text_chars = max_text_chars
        self._truncated: set[str] = set()
        self._lock = threading.Lock()

    @property
    def truncations(self) -> int:
        """Number of distinct texts shortened to `max_text_chars`."""
        return len(self._truncated)

    def _key(self, modality: Modality, key: str) -> str:
        limit = self.max_text_chars
        if modality == "text" and limit is not None and len(key) > limit:
            self._truncated.add(key)
            return key[:limit]
        return key

    def _payload(self, modality: Modality, key: str) -> bytes:
        if modality == "image":
            return self.images.payload(key)
        return key.encode("utf-8")

    def fetch(self, model_id: str, items: Sequence[FetchItem]) -> list[EmbeddingVector]:
        """Return one vector per (modality, key-or-text) item, order preserved."""
        return [
            EmbeddingVector(
                model_id=model_id,
                modality=modality,
                key=self._key(modality, key),
                values=tuple(float(v) for v in values),
            )
            for (modality, key), values in zip(
                items, self.fetch_arrays(model_id, items)
            )
        ]

    def fetch_arrays(
        self, model_id: str, items: Sequence[FetchItem]
    ) -> list[NDArray[np.float32]]:
        store = self.cache.store_for(model_id)
        keys = [(modality, self._key(modality, key)) for modality, key in items]
        missing = [
            k for k in dict.fromkeys(keys) if store.get_array(model_id, *k) is None
        ]
        if missing:
            with self._lock:
                missing = [k for k in missing if store.get_array(model_id, *k) is None]
                if missing:
                    self._compute_missing(model_id, missing)
        arrays = []
        for modality, key in keys:
            values = store.get_array(model_id, modality, key)
            assert values is not None
            arrays.append(values)
        return arrays

    def _compute_missing(self, model_id: str, missing: list[FetchItem]) -> None:
        if self.backend is None:
            modality, key = missing[0]
            raise ProviderError(
                f"No embedding for {modality} {key!r} under {model_id} "
                "and no service configured"
            )
        store = self.cache.store_for(model_id)
        for modality in ("text", "image"):
            keys = [key for m, key in missing if m == modality]
            if not keys:
                continue
            payloads = [self._payload(modality, key) for key in keys]
            vectors = self.backend.compute(model_id, modality, payloads)
            if len(vectors) != len(keys):
                raise ResponseIntegrityError(
                    f"Backend returned {len(vectors)} vectors for {len(keys)} inputs"
                )
            dims = {len(v) for v in vectors}
            if (
                len(dims) != 1
                or 0 in dims
                or (store.dim is not None and store.dim not in dims)
            ):
                raise ResponseIntegrityError(
                    f"Backend dims {sorted(dims)} inconsistent with store dim "
                    f"{store.dim} for {model_id}"
                )
            arrays = [np.asarray(v, dtype=np.float32) for v in vectors]
            if not all(np.isfinite(a).all() for a in arrays):
                raise ResponseIntegrityError(
                    f"Backend returned non-finite {modality} embedding values "
                    f"for {model_id}"
                )
            written = store.append_many(
                [
                    EmbeddingVector(
                        model_id=model_id,
                        modality=modality,
                        key=key,
                        values=tuple(float(x) for x in a),
                    )
                    for key, a in zip(keys, arrays)
                ]
            )
            logging.info(f"Fetched {written} {modality} embedding(s) for {model_id}")

    def array(self, model_id: str, modality: Modality, key: str) -> NDArray[np.float32]:
        return self.fetch_arrays(model_id, [(modality, key)])[0]

    def vector(self, model_id: str, modality: Modality, key: str) -> EmbeddingVector:
        return self.fetch(model_id, [(modality, key)])[0]

    def prefetch(
        self, model_id: str, items: Sequence[FetchItem], batch_size: int = 256
    ) -> None:
        """Make sure all items are stored, in request batches of `batch_size`."""
        unique = list(dict.fromkeys(items))
        for start in range(0, len(unique), batch_size):
            self.fetch_arrays(model_id, unique[start : start + batch_size])


def fetch_embeddings(
    items: Sequence[FetchItem],
    model_id: str,
    endpoint: str,
    cache: EmbeddingCache,
    images: ImageSource | None = None,
    session: requests.Session | None = None,
) -> list[EmbeddingVector]:
    """Fetch embeddings from an inference service through the write-through cache."""
    provider = EmbeddingProvider(
        cache, ServiceEmbeddingBackend(endpoint, session=session), images
    )
    return provider.fetch(model_id, items)


class Similarity:
    """The scoring algorithm's two similarity functions, as cosine over embeddings."""

    def __init__(self, provider: EmbeddingProvider) -> None:
        self.provider = provider

    def sim_vl(self, image_key: str, text: str, model_id: str) -> float:
        """Vision-language similarity between an image and a text."""
        return cosine(
            self.provider.array(model_id, "image", image_key),
            self.provider.array(model_id, "text", text),
        )

    def sim_l(self, text_a: str, text_b: str, model_id: str) -> float:
        """Text-text similarity under a text encoder."""
        items: list[FetchItem] = [("text", text_a), ("text", text_b)]
        a, b = self.provider.fetch_arrays(model_id, items)
        return cosine(a, b)
