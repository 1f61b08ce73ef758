import json
import logging
from pathlib import Path
from typing import Iterable

from pydantic import ValidationError

from visual_wsd.errors import (
    BuildError,
    ConfigError,
    DataError,
    IntegrityError,
    ParseError,
)
from visual_wsd.models import (
    CANDIDATE_COUNT,
    Dataset,
    ImageMapping,
    Instance,
    SenseEntry,
)
from visual_wsd.seeding import make_rng

NOUN_TAGS = frozenset({"noun", "n"})


class SenseInventory:
    """
    Read-only sense inventory: lemma -> senses in inventory order. Stored as a local
    JSON file {lemma: [SenseEntry, ...]} so runs are reproducible offline.
    """

    def __init__(self, entries: dict[str, list[SenseEntry]]) -> None:
        self._entries: dict[str, tuple[SenseEntry, ...]] = {}
        seen: set[str] = set()
        for lemma, senses in entries.items():
            for sense in senses:
                if sense.sense_id in seen:
                    raise IntegrityError(f"Duplicate sense id {sense.sense_id!r}")
                seen.add(sense.sense_id)
            key = lemma.casefold()
            self._entries[key] = self._entries.get(key, ()) + tuple(senses)

    @classmethod
    def load(cls, path: Path) -> "SenseInventory":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Sense inventory not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"Malformed JSON in {path}: {e.msg}", e.lineno) from e
        except UnicodeDecodeError as e:
            raise ParseError(f"{path} is not valid UTF-8: {e}") from e
        if not isinstance(data, dict):
            raise DataError(
                f"Expected dict at root of {path}, got {type(data).__name__}"
            )
        try:
            entries = {
                lemma: [
                    SenseEntry.model_validate({"lemma": lemma, **s}) for s in senses
                ]
                for lemma, senses in data.items()
            }
        except (ValidationError, TypeError) as e:
            raise DataError(f"Invalid sense inventory {path}: {e}") from e
        inventory = cls(entries)
        logging.info(f"Loaded sense inventory {path} ({len(inventory)} lemmas)")
        return inventory

    def dump(self, path: Path) -> None:
        data = {
            lemma: [s.model_dump(mode="json", exclude={"lemma"}) for s in senses]
            for lemma, senses in self._entries.items()
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)

    def senses(self, lemma: str) -> tuple[SenseEntry, ...]:
        return self._entries.get(lemma.casefold(), ())

    def __contains__(self, lemma: str) -> bool:
        return lemma.casefold() in self._entries

    def __len__(self) -> int:
        return len(self._entries)


def select_glosses(lemma: str, inventory: SenseInventory) -> list[str]:
    """One gloss per sense of `lemma`: the first listed, in inventory sense order.

    Taking only the first gloss keeps senses with many glosses from being
    over-represented. Unknown lemmas give an empty list.
    """
    return [sense.glosses[0] for sense in inventory.senses(lemma)]


def load_image_mappings(path: Path) -> list[ImageMapping]:
    """Load a BabelPic-like resource: one ImageMapping JSON object per line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Image resource not found: {path}")
    mappings = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    mappings.append(ImageMapping.model_validate_json(line))
                except ValidationError as e:
                    raise ParseError(str(e), line_number) from e
    except UnicodeDecodeError as e:
        raise ParseError(f"{path} is not valid UTF-8: {e}") from e
    return mappings


def build_supplementary(
    resource: Iterable[ImageMapping],
    per_pair_distractors: int = CANDIDATE_COUNT - 1,
    seed: int = 0,
    name: str = "supplementary",
) -> Dataset:
    """Build silver V-WSD instances from a synset -> images resource.

    For each (synset, image) pair: the context is a related-synset lemma followed by
    a base-synset lemma, the focus word is the base lemma, and the gold image is
    hidden at a random position among distractors drawn from other synsets' images.
    Synsets without related pairs are skipped.
    """
    if per_pair_distractors != CANDIDATE_COUNT - 1:
        raise ConfigError(
            f"Instances have {CANDIDATE_COUNT} candidates, "
            f"so per_pair_distractors must be {CANDIDATE_COUNT - 1}"
        )
    mappings = list(resource)
    pool = list(dict.fromkeys(image for m in mappings for image in m.image_ids))
    if len(pool) < CANDIDATE_COUNT:
        raise BuildError(
            f"Resource has {len(pool)} distinct images, need at least {CANDIDATE_COUNT}"
        )

    rng = make_rng(seed, "build_supplementary")
    instances: list[Instance] = []
    skipped = 0
    for mapping in mappings:
        if not mapping.related:
            skipped += len(mapping.image_ids)
            continue
        own_images = set(mapping.image_ids)
        others = [image for image in pool if image not in own_images]
        if len(others) < per_pair_distractors:
            raise BuildError(
                f"Synset {mapping.synset_id}: "
                f"only {len(others)} distractor images available"
            )
        for gold in mapping.image_ids:
            base_lemma = mapping.lemmas[int(rng.integers(len(mapping.lemmas)))]
            _, related_lemma = mapping.related[int(rng.integers(len(mapping.related)))]
            picks = rng.choice(len(others), size=per_pair_distractors, replace=False)
            candidates = [others[int(k)] for k in picks]
            candidates.insert(int(rng.integers(CANDIDATE_COUNT)), gold)
            instances.append(
                Instance(
                    focus_word=base_lemma,
                    context=f"{related_lemma} {base_lemma}",
                    language="en",
                    candidates=tuple(candidates),
                    gold=gold,
                )
            )
    if skipped:
        logging.warning(
            f"Skipped {skipped} (synset, image) pair(s) without related synsets"
        )
    if not instances:
        raise BuildError("Resource produced no instances")
    logging.info(
        f"Built {len(instances)} supplementary instances from {len(mappings)} synsets"
    )
    return Dataset(name=name, language="en", split="train", instances=tuple(instances))
