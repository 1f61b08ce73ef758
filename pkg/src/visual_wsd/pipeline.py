from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Sequence

import requests
from tqdm import tqdm

from visual_wsd.augment import (
    AugmentationCache,
    HttpTextService,
    TextService,
    TranslationCache,
    augment_batch,
    translate_context,
)
from visual_wsd.dataset import load_dataset, load_from_manifest
from visual_wsd.embedding_store import EmbeddingCache
from visual_wsd.errors import ConfigError
from visual_wsd.evaluation import build_report
from visual_wsd.knowledge import SenseInventory
from visual_wsd.models import Dataset, EvalReport, Instance, Prediction, ResolvedSystem
from visual_wsd.providers import (
    EmbeddingBackend,
    EmbeddingProvider,
    ImageSource,
    ServiceEmbeddingBackend,
)
from visual_wsd.rankers import (
    AlgorithmRanker,
    RankingResources,
    Ranker,
    load_mask_values,
    make_ranker,
    preset,
    system_config,
)
from visual_wsd.settings import RunSettings
from visual_wsd.testkit import MockEmbeddingBackend, MockTextService


def build_backend(settings: RunSettings) -> EmbeddingBackend | None:
    """Mock encoder, remote service, or none (cache-only runs)."""
    if settings.mock:
        return MockEmbeddingBackend(
            settings.providers.mock_seed, settings.providers.mock_dim
        )
    if settings.providers.endpoint:
        return ServiceEmbeddingBackend(
            settings.providers.endpoint,
            session=requests.Session(),
            retries=settings.providers.retries,
            backoff=settings.providers.backoff,
            timeout=settings.providers.timeout,
        )
    return None


def build_text_service(settings: RunSettings) -> TextService | None:
    if settings.mock:
        return MockTextService()
    if settings.augment.endpoint:
        return HttpTextService(
            settings.augment.endpoint,
            retries=settings.providers.retries,
            backoff=settings.providers.backoff,
            timeout=settings.providers.timeout,
        )
    return None


def build_provider(settings: RunSettings) -> EmbeddingProvider:
    return EmbeddingProvider(
        EmbeddingCache(settings.providers.cache_dir),
        build_backend(settings),
        ImageSource(settings.providers.image_dir),
        settings.providers.max_text_chars,
    )


def load_inventories(settings: RunSettings) -> dict[str, SenseInventory]:
    return {
        lang: SenseInventory.load(path)
        for lang, path in settings.inventory_paths().items()
    }


def load_datasets(settings: RunSettings) -> list[Dataset]:
    """The dataset given by data/gold/lang, then every manifest in `datasets`."""
    datasets = []
    if settings.data is not None:
        datasets.append(
            load_dataset(settings.data, settings.gold, settings.lang, settings.name)
        )
    datasets.extend(load_from_manifest(path) for path in settings.datasets)
    if not datasets:
        raise ConfigError(
            "No dataset given: set data=... (with gold=..., lang=...) "
            "or datasets=[...]"
        )
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ConfigError(f"Dataset names must be unique, got {names}")
    return datasets


def build_resources(
    settings: RunSettings,
    dataset: Dataset,
    provider: EmbeddingProvider,
    inventories: dict[str, SenseInventory],
) -> RankingResources:
    masks = None
    masks_by_key = settings.seg.masks
    mask_path = masks_by_key.get(dataset.name) or masks_by_key.get(dataset.language)
    if mask_path is not None:
        masks = load_mask_values(Path(mask_path))
    return RankingResources(
        provider=provider,
        inventories=inventories,
        masks=masks,
        gen_count=settings.gen.count,
        gen_aggregation=settings.gen.aggregation,
        seg_normalize=settings.seg.normalize,
        gloss_floor=settings.scoring.gloss_floor,
        fetch_batch_size=settings.providers.batch_size,
    )


def prepare_instances(
    instances: Sequence[Instance],
    system: ResolvedSystem,
    settings: RunSettings,
    text_service: TextService | None,
) -> list[Instance]:
    """Translate (Tr, Gen, Seg on non-English data), then augment (Def)."""
    prepared = list(instances)
    if system.translate and prepared:
        source = prepared[0].language
        cache = TranslationCache.in_dir(settings.augment.translations_dir, source)
        prepared = [
            translate_context(instance, cache, service=text_service)
            for instance in prepared
        ]
        logging.info(f"Translated {len(prepared)} {source} context(s) to en")
    if system.augment:
        cache = AugmentationCache(settings.augment.definitions)
        prepared = augment_batch(
            prepared, cache, text_service, settings.augment.batch_size
        )
    return prepared


@dataclass
class DatasetRun:
    """Predictions for one dataset in file order, plus the report counters."""

    dataset: Dataset
    system: ResolvedSystem
    predictions: list[Prediction]
    gloss_fallbacks: int = 0


@dataclass
class RunResult:
    runs: list[DatasetRun] = field(default_factory=list)
    truncations: int = 0

    @property
    def predictions(self) -> dict[str, list[Prediction]]:
        return {run.dataset.name: run.predictions for run in self.runs}

    def by_language(self) -> dict[str, list[Prediction]]:
        grouped: dict[str, list[Prediction]] = {}
        for run in self.runs:
            grouped.setdefault(run.dataset.language, []).extend(run.predictions)
        return grouped


def rank_all(
    ranker: Ranker, instances: Sequence[Instance], jobs: int = 1, progress: bool = False
) -> list[Prediction]:
    """Rank prepared instances with up to `jobs` threads; output follows input order."""
    ranker.prepare(instances)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = pool.map(lambda item: ranker.rank(*item), enumerate(instances))
        return list(
            tqdm(results, total=len(instances), desc="ranking", disable=not progress)
        )


def run_dataset(
    dataset: Dataset,
    settings: RunSettings,
    resources: RankingResources,
    text_service: TextService | None = None,
) -> DatasetRun:
    """Resolve the system for the dataset's language and rank every instance."""
    system = preset(
        settings.system, dataset.language, settings.models, settings.weights
    )
    instances = prepare_instances(dataset.instances, system, settings, text_service)
    ranker = make_ranker(system, resources)
    predictions = rank_all(ranker, instances, settings.jobs, settings.progress)
    fallbacks = 0
    if isinstance(ranker, AlgorithmRanker):
        fallbacks = len(ranker.fallback_indices)
    if fallbacks:
        logging.warning(
            f"{dataset.name}: {fallbacks} instance(s) scored without glosses"
        )
    logging.info(
        f"Ranked {len(predictions)} instance(s) of {dataset.name} "
        f"with {system.system_id}"
    )
    return DatasetRun(
        dataset=dataset,
        system=system,
        predictions=predictions,
        gloss_fallbacks=fallbacks,
    )


def run(settings: RunSettings, datasets: Sequence[Dataset] | None = None) -> RunResult:
    """Rank every configured dataset under the configured system."""
    datasets = list(datasets) if datasets is not None else load_datasets(settings)
    provider = build_provider(settings)
    inventories = load_inventories(settings)
    text_service = build_text_service(settings)
    result = RunResult()
    for dataset in datasets:
        resources = build_resources(settings, dataset, provider, inventories)
        result.runs.append(run_dataset(dataset, settings, resources, text_service))
    result.truncations = provider.truncations
    return result


def report_for(settings: RunSettings, result: RunResult) -> EvalReport:
    config = system_config(
        settings.system,
        settings.models,
        settings.weights,
        settings.gen.count,
        settings.seed,
    )
    return build_report(
        system=settings.system,
        predictions=result.by_language(),
        seed=settings.seed,
        weights=config.weights,
        config=settings.echo(),
        gloss_fallbacks=sum(run.gloss_fallbacks for run in result.runs),
        truncations=result.truncations,
    )
