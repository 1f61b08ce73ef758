from abc import ABC, abstractmethod
import logging
import math
from pathlib import Path

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException
from pydantic import ValidationError
import yaml

from visual_wsd.errors import ConfigError, DataError, IntegrityError, ParseError
from visual_wsd.models import (
    CANDIDATE_COUNT,
    Dataset,
    DatasetManifest,
    Instance,
    Language,
    Split,
    focus_in_context,
)
from visual_wsd.seeding import make_rng

FIELDS_PER_LINE = 2 + CANDIDATE_COUNT


class DatasetLoader(ABC):
    """
    Abstract class for loading V-WSD datasets. The shared-task release is a pair of
    TSV/text files, but other sources (a database, a JSON dump) only need `load`.
    """

    @abstractmethod
    def load(self) -> Dataset:
        """Parse raw data into a validated Dataset."""
        pass


class TsvDatasetLoader(DatasetLoader):
    """
    Loads the shared-task format: one instance per line with 12 tab-separated fields
    (focus word, context, 10 image ids) and an optional gold file with one image id
    per line.
    """

    def __init__(
        self,
        data_path: Path,
        gold_path: Path | None = None,
        language: Language = "en",
        name: str | None = None,
        split: Split = "test",
    ) -> None:
        super().__init__()
        self.data_path = Path(data_path)
        self.gold_path = Path(gold_path) if gold_path is not None else None
        self.language = language
        self.name = name or self.data_path.stem
        self.split = split

    def _read_lines(self, path: Path) -> list[str]:
        if not path.exists():
            raise DataError(f"File not found: {path}")
        try:
            with open(path, "r", encoding="utf-8", newline="") as f:
                return [line.rstrip("\r\n") for line in f]
        except UnicodeDecodeError as e:
            raise ParseError(f"{path} is not valid UTF-8: {e}") from e

    def _read_gold(self, expected: int) -> list[str] | None:
        if self.gold_path is None:
            return None
        gold = [line.strip() for line in self._read_lines(self.gold_path)]
        if len(gold) != expected:
            raise IntegrityError(
                f"{self.gold_path} has {len(gold)} lines, "
                f"{self.data_path} has {expected}"
            )
        return gold

    def load(self) -> Dataset:
        """Load and validate the data file (and gold file, if any)."""
        lines = self._read_lines(self.data_path)
        gold = self._read_gold(len(lines))

        instances: list[Instance] = []
        flagged = 0
        for idx, line in enumerate(lines):
            line_number = idx + 1
            fields = line.split("\t")
            if len(fields) != FIELDS_PER_LINE:
                raise ParseError(
                    f"expected {FIELDS_PER_LINE} tab-separated fields, "
                    f"got {len(fields)}",
                    line_number,
                )
            focus_word, context, *candidates = fields
            gold_id = gold[idx] if gold is not None else None
            if gold_id is not None and gold_id not in candidates:
                raise IntegrityError(
                    f"line {line_number}: gold {gold_id!r} is not among the candidates"
                )
            not_in_context = not focus_in_context(focus_word, context)
            flagged += not_in_context
            try:
                instances.append(
                    Instance(
                        focus_word=focus_word,
                        context=context,
                        language=self.language,
                        candidates=tuple(candidates),
                        gold=gold_id,
                        focus_not_in_context=not_in_context,
                    )
                )
            except ValidationError as e:
                raise ParseError(str(e), line_number) from e

        if flagged:
            logging.warning(
                f"{flagged} instance(s) in {self.data_path} have a focus word "
                "missing from the context"
            )
        try:
            dataset = Dataset(
                name=self.name,
                language=self.language,
                split=self.split,
                instances=tuple(instances),
            )
        except ValidationError as e:
            raise DataError(f"Invalid dataset {self.data_path}: {e}") from e
        logging.info(
            f"Loaded {len(dataset)} instances from {self.data_path} "
            f"({self.language}, gold={dataset.has_gold})"
        )
        return dataset


def load_dataset(
    data_path: Path,
    gold_path: Path | None = None,
    language: Language = "en",
    name: str | None = None,
    split: Split = "test",
) -> Dataset:
    """Load a shared-task dataset; see `TsvDatasetLoader`."""
    return TsvDatasetLoader(data_path, gold_path, language, name, split).load()


def write_dataset(
    dataset: Dataset, data_path: Path, gold_path: Path | None = None
) -> None:
    """Write a dataset in the format `load_dataset` reads."""
    data_path.parent.mkdir(parents=True, exist_ok=True)
    with open(data_path, "w", encoding="utf-8", newline="") as f:
        for instance in dataset.instances:
            context = instance.original_context or instance.context
            f.write("\t".join([instance.focus_word, context, *instance.candidates]))
            f.write("\n")
    if gold_path is not None:
        if not dataset.has_gold:
            raise DataError(f"Dataset {dataset.name!r} has instances without gold")
        with open(gold_path, "w", encoding="utf-8", newline="") as f:
            for instance in dataset.instances:
                f.write(f"{instance.gold}\n")


def load_manifest(path: Path) -> DatasetManifest:
    """Load a YAML key-value manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Dataset manifest not found: {path}")
    try:
        raw = OmegaConf.to_container(OmegaConf.load(path), resolve=True)
    except (yaml.YAMLError, OmegaConfBaseException, UnicodeDecodeError) as e:
        raise ConfigError(f"Malformed dataset manifest {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"Expected a mapping in {path}, got {type(raw).__name__}")
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid dataset manifest {path}: {e}") from e
    base = path.parent
    return manifest.model_copy(
        update={
            "data": base / manifest.data,
            "gold": base / manifest.gold if manifest.gold is not None else None,
        }
    )


def load_from_manifest(path: Path) -> Dataset:
    manifest = load_manifest(path)
    return load_dataset(
        manifest.data, manifest.gold, manifest.language, manifest.name, manifest.split
    )


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    """Write a manifest with paths relative to its own directory when possible."""
    data = manifest.model_dump(mode="json")
    for key in ("data", "gold"):
        value = getattr(manifest, key)
        if value is not None and value.parent == path.parent:
            data[key] = value.name
    OmegaConf.save(OmegaConf.create(data), path)


def split_dev(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off a uniformly drawn dev set. Returns (train, dev), both in file order.

    The dev size is round-half-up(fraction * N), clamped to [1, N - 1].
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"Dev fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    if n < 2:
        raise DataError(f"Cannot split dataset {dataset.name!r} with {n} instance(s)")

    dev_size = math.floor(fraction * n + 0.5)
    if dev_size < 1:
        logging.warning(f"Dev size for N={n}, fraction={fraction} rounds to 0; using 1")
        dev_size = 1
    elif dev_size > n - 1:
        logging.warning(
            f"Dev size for N={n}, fraction={fraction} leaves no training data; "
            f"using {n - 1}"
        )
        dev_size = n - 1

    rng = make_rng(seed, "split_dev", dataset.name)
    dev_indices = set(rng.permutation(n)[:dev_size].tolist())
    dev = [inst for idx, inst in enumerate(dataset.instances) if idx in dev_indices]
    train = [
        inst for idx, inst in enumerate(dataset.instances) if idx not in dev_indices
    ]
    return (
        dataset.model_copy(update={"split": "train", "instances": tuple(train)}),
        dataset.model_copy(
            update={
                "name": f"{dataset.name}.dev",
                "split": "dev",
                "instances": tuple(dev),
            }
        ),
    )
