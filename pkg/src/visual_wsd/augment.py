from abc import ABC, abstractmethod
import logging
import re
import threading
from pathlib import Path
from typing import Sequence

import requests
from pydantic import BaseModel

from visual_wsd.errors import (
    AugmentationUnavailableError,
    InputValidationError,
    ParseError,
    ResponseParseError,
    TranslationUnavailableError,
)
from visual_wsd.models import (
    GenerateRequest,
    GenerateResponse,
    Instance,
    TranslateRequest,
    TranslateResponse,
)
from visual_wsd.service import post_json

PROMPT_HEADER = "For each line, define the phrase:"
DEFINITION_SEPARATOR = ": "
DEFAULT_BATCH_SIZE = 20


class TextGenRequest(BaseModel):
    """A batch of contexts to define with one prompt."""

    prompt: str
    contexts: tuple[str, ...]


def _clean(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def build_prompt(contexts: Sequence[str]) -> str:
    """The definition prompt: the fixed header, then one context per line."""
    if not contexts:
        raise InputValidationError("At least one context is required")
    for context in contexts:
        if "\n" in context or "\r" in context:
            raise InputValidationError(f"Context contains a newline: {context!r}")
    return "\n".join([PROMPT_HEADER, *contexts])


def make_request(contexts: Sequence[str]) -> TextGenRequest:
    return TextGenRequest(prompt=build_prompt(contexts), contexts=tuple(contexts))


def parse_definitions(response: str, contexts: Sequence[str]) -> dict[str, str]:
    """Map requested contexts to definitions found in a `context: definition` response.

    Each line is split at the first ": " whose prefix matches a requested context
    (case-insensitive). Unmatched lines are dropped; unmatched contexts are absent.
    """
    if not response.strip():
        raise ResponseParseError("Empty definition response", raw=response)
    wanted = {_clean(c).casefold(): c for c in contexts}
    definitions: dict[str, str] = {}
    for line in response.splitlines():
        line = line.strip()
        if not line:
            continue
        start = 0
        while (pos := line.find(DEFINITION_SEPARATOR, start)) != -1:
            context = wanted.get(_clean(line[:pos]).casefold())
            definition = _clean(line[pos + len(DEFINITION_SEPARATOR) :])
            if context is not None and definition:
                definitions.setdefault(context, definition)
                break
            start = pos + 1
    if not definitions:
        raise ResponseParseError(
            "No requested context found in the response", raw=response
        )
    return definitions


class TextCache:
    """
    Two-column UTF-8 TSV cache (source text, value), appended on every write so
    re-running a batch never calls a service twice. Tabs and newlines in values are
    collapsed to spaces.
    """

    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self.entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            try:
                with open(self.path, "r", encoding="utf-8", newline="") as f:
                    for line in f:
                        key, sep, value = line.rstrip("\r\n").partition("\t")
                        if sep and value:
                            self.entries.setdefault(key, value)
            except UnicodeDecodeError as e:
                raise ParseError(f"{self.path} is not valid UTF-8: {e}") from e

    def get(self, key: str) -> str | None:
        return self.entries.get(key)

    def put(self, key: str, value: str) -> str:
        """Store `value` unless `key` is already cached; returns the cached value."""
        key, value = _clean(key), _clean(value)
        if not value:
            raise InputValidationError(f"Refusing to cache an empty value for {key!r}")
        with self._lock:
            if key in self.entries:
                return self.entries[key]
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="") as f:
                f.write(f"{key}\t{value}\n")
            self.entries[key] = value
            return value

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


class AugmentationCache(TextCache):
    """context -> generated definition."""


class TranslationCache(TextCache):
    """source text -> translation, one file per (source, target) language pair."""

    def __init__(self, path: Path, source: str, target: str = "en") -> None:
        super().__init__(path)
        self.source = source
        self.target = target

    @classmethod
    def in_dir(cls, root: Path, source: str, target: str = "en") -> "TranslationCache":
        return cls(Path(root) / f"{source}-{target}.tsv", source, target)


class TextService(ABC):
    """Text generation and translation behind one interface."""

    def __init__(self) -> None:
        self.calls = 0

    @abstractmethod
    def generate(self, prompt: str) -> str:
        pass

    @abstractmethod
    def translate(self, text: str, source: str, target: str = "en") -> str:
        pass


class HttpTextService(TextService):
    """Client for `POST /v1/generate` and `POST /v1/translate`."""

    def __init__(
        self,
        endpoint: str,
        session: requests.Session | None = None,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 60.0,
    ) -> None:
        super().__init__()
        self.endpoint = endpoint.rstrip("/")
        self.session = session or requests.Session()
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout

    def _attempted(self) -> None:
        self.calls += 1

    def _post[T: BaseModel](
        self, path: str, body: BaseModel, response_model: type[T]
    ) -> T:
        return post_json(
            self.session,
            f"{self.endpoint}{path}",
            body,
            response_model,
            self.retries,
            self.backoff,
            self.timeout,
            on_attempt=self._attempted,
        )

    def generate(self, prompt: str) -> str:
        body = GenerateRequest(prompt=prompt)
        return self._post("/v1/generate", body, GenerateResponse).text

    def translate(self, text: str, source: str, target: str = "en") -> str:
        body = TranslateRequest(text=text, source=source, target=target)
        return self._post("/v1/translate", body, TranslateResponse).text


def augment_context(
    instance: Instance, cache: AugmentationCache, service: TextService | None = None
) -> Instance:
    """Attach `context: definition` as the augmented context. Idempotent."""
    if instance.augmented_context is not None:
        return instance
    key = _clean(instance.context)
    definition = cache.get(key)
    if definition is None:
        if service is None:
            raise AugmentationUnavailableError(
                f"No cached definition for {key!r} and no generation service configured"
            )
        fill_definitions([key], cache, service)
        definition = cache.get(key)
        if definition is None:
            raise AugmentationUnavailableError(
                f"Service gave no definition for {key!r}"
            )
    return instance.model_copy(
        update={
            "augmented_context": f"{instance.context}{DEFINITION_SEPARATOR}{definition}"
        }
    )


def fill_definitions(
    contexts: Sequence[str],
    cache: AugmentationCache,
    service: TextService,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> int:
    """Define uncached contexts in prompt batches. Returns the number added."""
    missing = [c for c in dict.fromkeys(_clean(c) for c in contexts) if c not in cache]
    added = 0
    for start in range(0, len(missing), batch_size):
        batch = missing[start : start + batch_size]
        request = make_request(batch)
        response = service.generate(request.prompt)
        definitions = parse_definitions(response, request.contexts)
        for context in batch:
            if context in definitions:
                cache.put(context, definitions[context])
                added += 1
        if len(definitions) < len(batch):
            logging.warning(
                f"{len(batch) - len(definitions)} context(s) left undefined "
                f"in a batch of {len(batch)}"
            )
    if missing:
        logging.info(
            f"Generated {added} definition(s) for {len(missing)} uncached context(s)"
        )
    return added


def augment_batch(
    instances: Sequence[Instance],
    cache: AugmentationCache,
    service: TextService | None = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> list[Instance]:
    """Augment many instances, batching service requests; output keeps input order."""
    if service is not None:
        fill_definitions(
            [i.context for i in instances if i.augmented_context is None],
            cache,
            service,
            batch_size,
        )
    return [augment_context(instance, cache, service) for instance in instances]


def translate_context(
    instance: Instance,
    cache: TranslationCache,
    target: str = "en",
    service: TextService | None = None,
) -> Instance:
    """Replace the context with its translation; the original is kept as provenance."""
    if instance.language == target or instance.original_context is not None:
        return instance
    translation = cache.get(_clean(instance.context))
    if translation is None:
        if service is None:
            raise TranslationUnavailableError(
                f"No cached {instance.language}->{target} translation "
                f"for {instance.context!r} "
                "and no translation service configured"
            )
        translation = cache.put(
            instance.context,
            service.translate(instance.context, instance.language, target),
        )
    return instance.with_context(translation, original_context=instance.context)
