"""Deterministic stand-ins for the inference services, plus planted-signal fixtures.

Nothing here downloads a model: embeddings are seeded pseudo-random unit vectors,
definitions and translations are string templates. All draws use `make_rng`.
"""

import base64
import binascii
import logging
import socket
import threading
import time
from pathlib import Path
from typing import Literal

import numpy as np
import uvicorn
from fastapi import FastAPI, HTTPException
from numpy.typing import NDArray

from visual_wsd.augment import DEFINITION_SEPARATOR, PROMPT_HEADER, TextService
from visual_wsd.embedding_store import EmbeddingCache
from visual_wsd.knowledge import SenseInventory
from visual_wsd.models import (
    CANDIDATE_COUNT,
    Dataset,
    EmbedRequest,
    EmbedResponse,
    EmbeddingVector,
    GenerateRequest,
    GenerateResponse,
    Instance,
    Modality,
    SenseEntry,
    TranslateRequest,
    TranslateResponse,
)
from visual_wsd.providers import EmbeddingBackend
from visual_wsd.rankers import generated_key
from visual_wsd.seeding import make_rng

FixtureMode = Literal["ic", "ig", "noise"]
DEFAULT_MOCK_DIM = 64


def mock_embed(
    model_id: str,
    modality: Modality,
    payload: bytes,
    seed: int,
    dim: int = DEFAULT_MOCK_DIM,
    key: str | None = None,
) -> EmbeddingVector:
    """Unit-normalised standard-normal draws seeded by (model, payload, seed).

    The modality is not part of the seed, so an image whose bytes equal a text's
    bytes embeds to the same vector. Values are float32-exact.
    """
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    values = make_rng("mock_embed", model_id, payload, seed).standard_normal(dim)
    values = (values / np.linalg.norm(values)).astype(np.float32)
    return EmbeddingVector(
        model_id=model_id,
        modality=modality,
        key=key if key is not None else payload.decode("utf-8", errors="replace"),
        values=tuple(float(v) for v in values),
    )


class MockEmbeddingBackend(EmbeddingBackend):
    """In-process `mock_embed`; counts calls like the HTTP backend."""

    def __init__(self, seed: int = 0, dim: int = DEFAULT_MOCK_DIM) -> None:
        super().__init__()
        self.seed = seed
        self.dim = dim

    def compute(
        self, model_id: str, modality: Modality, payloads: list[bytes]
    ) -> list[list[float]]:
        self.calls += 1
        return [
            list(mock_embed(model_id, modality, p, self.seed, self.dim).values)
            for p in payloads
        ]


def mock_definition(context: str) -> str:
    return f"a mock definition of {context}."


def mock_generate(prompt: str) -> str:
    """Answer a definition prompt with one `context: definition` line per context."""
    lines = [
        line for line in prompt.splitlines() if line.strip() and line != PROMPT_HEADER
    ]
    return "\n".join(
        f"{line}{DEFINITION_SEPARATOR}{mock_definition(line)}" for line in lines
    )


def mock_translate(text: str, source: str, target: str = "en") -> str:
    return f"{text} [{source}>{target}]"


class MockTextService(TextService):
    """Template-based definitions and translations."""

    def generate(self, prompt: str) -> str:
        self.calls += 1
        return mock_generate(prompt)

    def translate(self, text: str, source: str, target: str = "en") -> str:
        self.calls += 1
        return mock_translate(text, source, target)


def create_mock_app(
    seed: int = 0, dim: int = DEFAULT_MOCK_DIM, failures: int = 0
) -> FastAPI:
    """FastAPI app serving /v1/embed, /v1/generate and /v1/translate.

    The first `failures` embed requests answer 503, to exercise client retries.
    """
    app = FastAPI(title="visual_wsd mock inference")
    remaining = {"failures": failures}
    lock = threading.Lock()

    @app.post("/v1/embed", response_model=EmbedResponse)
    def embed(request: EmbedRequest) -> EmbedResponse:
        with lock:
            if remaining["failures"] > 0:
                remaining["failures"] -= 1
                raise HTTPException(status_code=503, detail="warming up")
        try:
            if request.modality == "image":
                payloads = [
                    base64.b64decode(item, validate=True) for item in request.inputs
                ]
            else:
                payloads = [item.encode("utf-8") for item in request.inputs]
        except binascii.Error as e:
            raise HTTPException(
                status_code=422, detail=f"Invalid base64 image payload: {e}"
            ) from e
        vectors = [
            list(mock_embed(request.model, request.modality, p, seed, dim).values)
            for p in payloads
        ]
        return EmbedResponse(dim=dim, vectors=vectors)

    @app.post("/v1/generate", response_model=GenerateResponse)
    def generate(request: GenerateRequest) -> GenerateResponse:
        return GenerateResponse(text=mock_generate(request.prompt))

    @app.post("/v1/translate", response_model=TranslateResponse)
    def translate(request: TranslateRequest) -> TranslateResponse:
        text = mock_translate(request.text, request.source, request.target)
        return TranslateResponse(text=text)

    return app


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return int(s.getsockname()[1])


class MockInferenceServer:
    """Serves `create_mock_app` with uvicorn on a free local port in a thread."""

    def __init__(
        self, seed: int = 0, dim: int = DEFAULT_MOCK_DIM, failures: int = 0
    ) -> None:
        self.port = _free_port()
        config = uvicorn.Config(
            create_mock_app(seed, dim, failures),
            host="127.0.0.1",
            port=self.port,
            log_level="warning",
        )
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self, timeout: float = 10.0) -> None:
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError(
                    f"Mock inference server did not start on port {self.port}"
                )
            time.sleep(0.01)
        logging.info(f"Mock inference server listening on {self.url}")

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10.0)


def mock_mask_values(dataset: Dataset, seed: int = 0) -> dict[int, dict[str, float]]:
    """Uniform [0, 1) mean mask values for every candidate of every instance."""
    rng = make_rng(seed, "mock_masks", dataset.name)
    return {
        idx: {
            image: float(v)
            for image, v in zip(instance.candidates, rng.random(CANDIDATE_COUNT))
        }
        for idx, instance in enumerate(dataset.instances)
    }


def write_mask_values(masks: dict[int, dict[str, float]], path: Path) -> None:
    """Write mask values in the layout `load_mask_values` reads."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for idx in sorted(masks):
            for image, value in masks[idx].items():
                f.write(f"{idx}\t{image}\t{value!r}\n")


def _unit(rng: np.random.Generator, dim: int, lo: int, hi: int) -> NDArray[np.float64]:
    v = np.zeros(dim)
    v[lo:hi] = rng.standard_normal(hi - lo)
    return v / np.linalg.norm(v)


def make_fixture_dataset(
    n: int,
    mode: FixtureMode,
    seed: int,
    root: Path,
    dim: int = 32,
    vl_model: str = "mock-clip",
    l_model: str = "mock-bert",
    gen_count: int = 15,
) -> tuple[Dataset, EmbeddingCache, SenseInventory]:
    """Build an English dataset with a planted signal, its cache and inventory.

    Vectors live in two orthogonal blocks A and B of the embedding space.
    "ic": the context and distractors lie in A, glosses in B, and the gold image is
    the context vector, so it is the unique image-context argmax while every
    image-gloss and context-gloss similarity is 0.
    "ig": the context lies in A, glosses and distractors in B, and the gold image is
    one of the gloss vectors, so only image-gloss similarity carries the signal.
    "noise": every vector is drawn over the whole space.
    Generated images (for the Gen ranker) are noisy copies of the context vector.
    The text encoder sees the same text vectors as the vision-language encoder.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if dim < 4 or dim % 2:
        raise ValueError(f"dim must be an even number >= 4, got {dim}")
    rng = make_rng(seed, "fixture", mode, n)
    half = dim // 2
    a, b, full = (0, half), (half, dim), (0, dim)

    instances: list[Instance] = []
    entries: dict[str, list[SenseEntry]] = {}
    vl_vectors: list[EmbeddingVector] = []
    l_vectors: list[EmbeddingVector] = []

    def add_text(text: str, values: NDArray[np.float64]) -> None:
        for model, bucket in ((vl_model, vl_vectors), (l_model, l_vectors)):
            bucket.append(
                EmbeddingVector(
                    model_id=model, modality="text", key=text, values=tuple(values)
                )
            )

    def add_image(image: str, values: NDArray[np.float64]) -> None:
        vl_vectors.append(
            EmbeddingVector(
                model_id=vl_model, modality="image", key=image, values=tuple(values)
            )
        )

    for idx in range(n):
        lemma = f"lemma{idx:05d}"
        context = f"ctx{idx:05d} {lemma}"
        n_senses = int(rng.integers(1, 5))
        glosses = [f"{lemma} gloss {s}" for s in range(n_senses)]
        entries[lemma] = [
            SenseEntry(
                sense_id=f"{lemma}.{s}",
                lemma=lemma,
                pos="noun" if rng.random() < 0.8 else "verb",
                language="en",
                glosses=(gloss,),
            )
            for s, gloss in enumerate(glosses)
        ]

        c = _unit(rng, dim, *(full if mode == "noise" else a))
        g = [_unit(rng, dim, *(full if mode == "noise" else b)) for _ in glosses]
        add_text(context, c)
        for gloss, vector in zip(glosses, g):
            add_text(gloss, vector)

        candidates = [f"fx{idx:05d}_{j}.jpg" for j in range(CANDIDATE_COUNT)]
        gold_pos = int(rng.integers(CANDIDATE_COUNT))
        for j, image in enumerate(candidates):
            if j == gold_pos and mode == "ic":
                vector = c
            elif j == gold_pos and mode == "ig":
                vector = g[int(rng.integers(len(g)))]
            else:
                block = a if mode == "ic" else b if mode == "ig" else full
                vector = _unit(rng, dim, *block)
            add_image(image, vector)

        for k in range(gen_count):
            noisy = c + 0.3 * _unit(rng, dim, *(full if mode == "noise" else a))
            add_image(generated_key(context, k), noisy / np.linalg.norm(noisy))

        instances.append(
            Instance(
                focus_word=lemma,
                context=context,
                language="en",
                candidates=tuple(candidates),
                gold=candidates[gold_pos],
            )
        )

    cache = EmbeddingCache(root)
    cache.store_for(vl_model).append_many(vl_vectors)
    cache.store_for(l_model).append_many(l_vectors)
    dataset = Dataset(
        name=f"fixture-{mode}", language="en", split="test", instances=tuple(instances)
    )
    return dataset, cache, SenseInventory(entries)
