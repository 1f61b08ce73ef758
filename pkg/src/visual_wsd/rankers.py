from abc import ABC, abstractmethod
from dataclasses import dataclass, field
import hashlib
import logging
from pathlib import Path
from typing import Callable, Literal, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import ValidationError

from visual_wsd.errors import (
    ConfigError,
    DataError,
    IntegrityError,
    InputValidationError,
    ParseError,
    ProviderError,
    UnsupportedCombinationError,
)
from visual_wsd.knowledge import SenseInventory, select_glosses
from visual_wsd.models import (
    CandidateScore,
    Instance,
    Language,
    ModelPair,
    Prediction,
    ResolvedSystem,
    ScoreBreakdown,
    SystemConfig,
    Strategy,
    SystemName,
    Weights,
)
from visual_wsd.providers import EmbeddingProvider, FetchItem, VectorLike, cosine

SimFn = Callable[[str, str], float]
GenAggregation = Literal["mean", "max"]
SegNormalization = Literal["none", "max"]

SYSTEM_IDS: dict[str, tuple[SystemName, bool]] = {
    "baseline": ("baseline", False),
    "tr": ("tr", False),
    "tr-def": ("tr", True),
    "langspec": ("langspec", False),
    "langspec-def": ("langspec", True),
    "gen": ("gen", False),
    "gen-def": ("gen", True),
    "seg": ("seg", False),
    "seg-def": ("seg", True),
}
GENERATION_STEPS = 20
GUIDANCE_SCALE = 7.5


def parse_system_id(system_id: str) -> tuple[SystemName, bool]:
    """`Tr+Def`, `tr-def` and `TR-DEF` all name the same preset."""
    key = system_id.strip().lower().replace("+", "-")
    if key not in SYSTEM_IDS:
        raise ConfigError(
            f"Unknown system {system_id!r}; expected one of {sorted(SYSTEM_IDS)}"
        )
    return SYSTEM_IDS[key]


def system_config(
    system_id: str,
    models: Mapping[str, ModelPair],
    weights: Weights | None = None,
    gen_count: int = 15,
    seed: int = 0,
) -> SystemConfig:
    name, def_enabled = parse_system_id(system_id)
    if name == "langspec" and def_enabled:
        raise UnsupportedCombinationError(
            "Def is not combined with LangSpec: generated definitions are "
            "unreliable for short non-English contexts"
        )
    try:
        return SystemConfig(
            system=name,
            def_enabled=def_enabled,
            weights=weights,
            models=dict(models),
            gen_count=gen_count,
            seed=seed,
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid system configuration: {e}") from e


def preset(
    system_id: str,
    language: Language,
    models: Mapping[str, ModelPair],
    weights: Weights | None = None,
) -> ResolvedSystem:
    """Resolve a system preset for one language.

    Tr, Gen and Seg translate non-English contexts and use the English encoders;
    LangSpec keeps the context and switches to the language's own encoders;
    Baseline scores image-context similarity on the raw context only.
    """
    config = system_config(system_id, models, weights)
    model_language = language if config.system == "langspec" else "en"
    if model_language not in config.models:
        raise ConfigError(f"No models registered for language {model_language!r}")
    pair = config.models[model_language]
    strategy: Strategy = "algorithm"
    if config.system == "gen":
        strategy = "gen"
    elif config.system == "seg":
        strategy = "seg"
    use_glosses = (
        strategy == "algorithm"
        and config.weights is not None
        and (config.weights.w_ig > 0 or config.weights.w_cg > 0)
    )
    return ResolvedSystem(
        system_id=system_id,
        strategy=strategy,
        translate=config.system in ("tr", "gen", "seg") and language != "en",
        augment=config.def_enabled,
        use_glosses=use_glosses,
        weights=config.weights,
        vl_model=pair.vl,
        l_model=pair.l,
    )


@dataclass(frozen=True)
class SimilarityTable:
    """All pairwise similarities of an instance; weights apply afterwards."""

    candidates: tuple[str, ...]
    glosses: tuple[str, ...]
    s_ic: NDArray[np.float64]
    s_ig: NDArray[np.float64]
    s_cg: NDArray[np.float64]


def similarity_table(
    instance: Instance,
    glosses: Sequence[str],
    sim_vl: SimFn,
    sim_l: SimFn,
    context: str | None = None,
) -> SimilarityTable:
    c = instance.context if context is None else context
    n, m = len(instance.candidates), len(glosses)
    s_ic = np.zeros(n)
    s_ig = np.zeros((n, m))
    s_cg = np.zeros(m)
    for j, gloss in enumerate(glosses):
        try:
            s_cg[j] = sim_l(c, gloss)
        except ProviderError as e:
            e.add_note(f"while comparing context {c!r} with gloss {gloss!r}")
            raise
    for i, image in enumerate(instance.candidates):
        try:
            s_ic[i] = sim_vl(image, c)
            for j, gloss in enumerate(glosses):
                s_ig[i, j] = sim_vl(image, gloss)
        except ProviderError as e:
            e.add_note(f"while scoring candidate {i} ({image})")
            raise
    return SimilarityTable(tuple(instance.candidates), tuple(glosses), s_ic, s_ig, s_cg)


def score_table(
    table: SimilarityTable, weights: Weights, gloss_floor: bool = False
) -> ScoreBreakdown:
    """Weighted scores from a similarity table.

    For each image the gloss term is the maximum over glosses of
    w_ig * s_ig + w_cg * s_cg (first gloss wins ties); the total adds w_ic * s_ic.
    With no glosses the gloss term is 0. `gloss_floor` starts the maximum at 0, so a
    gloss can only raise a score.
    """
    ic = weights.w_ic * table.s_ic
    if not table.glosses:
        return ScoreBreakdown(
            candidates=tuple(
                CandidateScore(
                    image_id=image,
                    index=i,
                    total=float(ic[i]),
                    s_ic=float(table.s_ic[i]),
                )
                for i, image in enumerate(table.candidates)
            ),
            gloss_fallback=True,
        )

    combined = weights.w_ig * table.s_ig + weights.w_cg * table.s_cg[np.newaxis, :]
    best = np.argmax(combined, axis=1)
    rows = np.arange(len(table.candidates))
    s_g = combined[rows, best]
    floored = np.zeros(len(rows), dtype=bool)
    if gloss_floor:
        floored = s_g < 0.0
        s_g = np.maximum(s_g, 0.0)
    totals = s_g + ic
    return ScoreBreakdown(
        candidates=tuple(
            CandidateScore(
                image_id=image,
                index=i,
                total=float(totals[i]),
                s_ic=float(table.s_ic[i]),
                s_ig=float(table.s_ig[i, best[i]]),
                s_cg=float(table.s_cg[best[i]]),
                best_gloss=None if floored[i] else table.glosses[best[i]],
            )
            for i, image in enumerate(table.candidates)
        )
    )


def score_instance(
    instance: Instance,
    glosses: Sequence[str],
    weights: Weights,
    sim_vl: SimFn,
    sim_l: SimFn,
    context: str | None = None,
    gloss_floor: bool = False,
) -> ScoreBreakdown:
    """Candidate image scoring with glosses, context and images. See `score_table`."""
    table = similarity_table(instance, glosses, sim_vl, sim_l, context)
    return score_table(table, weights, gloss_floor)


def ranking_order(totals: Sequence[float]) -> list[int]:
    """Candidate indices by descending total, ties by ascending index."""
    return sorted(range(len(totals)), key=lambda k: (-totals[k], k))


def to_prediction(
    index: int, instance: Instance, totals: Sequence[float]
) -> Prediction:
    order = ranking_order(totals)
    return Prediction(
        index=index,
        language=instance.language,
        ranking=tuple(instance.candidates[k] for k in order),
        totals=tuple(float(totals[k]) for k in order),
        gold=instance.gold,
    )


def gen_score(
    instance: Instance,
    generated: Sequence[VectorLike],
    embed_image: Callable[[str], VectorLike],
    aggregation: GenAggregation = "mean",
    gen_count: int | None = None,
) -> ScoreBreakdown:
    """Score candidates by similarity to images generated from the context."""
    if not generated:
        raise ConfigError("Generated image set is empty")
    if gen_count is not None and len(generated) != gen_count:
        raise ConfigError(
            f"Expected {gen_count} generated images, got {len(generated)}"
        )
    reduce = np.mean if aggregation == "mean" else np.max
    scores = []
    for i, image in enumerate(instance.candidates):
        vector = embed_image(image)
        total = float(reduce([cosine(vector, g) for g in generated]))
        scores.append(CandidateScore(image_id=image, index=i, total=total))
    return ScoreBreakdown(candidates=tuple(scores))


def seg_select(
    index: int,
    instance: Instance,
    mask_values: Mapping[str, float],
    normalize: SegNormalization = "none",
) -> Prediction:
    """Pick the candidate with the highest mean mask value, ties by candidate order."""
    values = []
    for image in instance.candidates:
        if image not in mask_values:
            raise IntegrityError(
                f"Instance {index}: no mask value for candidate {image}"
            )
        value = float(mask_values[image])
        if not 0.0 <= value <= 1.0:
            raise InputValidationError(
                f"Instance {index}: mask value {value} for {image} is outside [0, 1]"
            )
        values.append(value)
    if normalize == "max" and max(values) > 0.0:
        peak = max(values)
        values = [v / peak for v in values]
    return to_prediction(index, instance, values)


def load_mask_values(path: Path) -> dict[int, dict[str, float]]:
    """Read `instance index<TAB>candidate id<TAB>mean mask value` lines."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Mask value file not found: {path}")
    masks: dict[int, dict[str, float]] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                fields = line.rstrip("\r\n").split("\t")
                if len(fields) != 3:
                    raise ParseError(
                        f"expected 3 fields, got {len(fields)}", line_number
                    )
                try:
                    index, value = int(fields[0]), float(fields[2])
                except ValueError as e:
                    raise ParseError(str(e), line_number) from e
                masks.setdefault(index, {})[fields[1]] = value
    except UnicodeDecodeError as e:
        raise ParseError(f"{path} is not valid UTF-8: {e}") from e
    return masks


def generated_key(context: str, sample: int) -> str:
    """Store key of the `sample`-th image generated for `context`."""
    digest = hashlib.sha256(context.encode("utf-8")).hexdigest()[:16]
    return f"gen:{digest}:{sample}"


@dataclass
class RankingResources:
    """What rankers need besides the instance itself."""

    provider: EmbeddingProvider
    inventories: Mapping[str, SenseInventory] = field(default_factory=dict)
    masks: Mapping[int, Mapping[str, float]] | None = None
    gen_count: int = 15
    gen_aggregation: GenAggregation = "mean"
    seg_normalize: SegNormalization = "none"
    gloss_floor: bool = False
    fetch_batch_size: int = 256


class Ranker(ABC):
    """
    Abstract base class for ranking the candidates of an instance under one resolved
    system. `prepare` may warm caches for a whole batch; `rank` must be safe to call
    from several threads once prepared.
    """

    def __init__(self, system: ResolvedSystem, resources: RankingResources) -> None:
        self.system = system
        self.resources = resources

    def context(self, instance: Instance) -> str:
        """The context used for scoring: the augmented one when Def is on."""
        if not self.system.augment:
            return instance.context
        if instance.augmented_context is None:
            raise InputValidationError(
                f"{self.system.system_id} needs augmented contexts; "
                f"{instance.context!r} has none"
            )
        return instance.augmented_context

    def prepare(self, instances: Sequence[Instance]) -> None:
        """Warm caches for a batch of instances."""
        pass

    @abstractmethod
    def breakdown(self, index: int, instance: Instance) -> ScoreBreakdown:
        pass

    def rank(self, index: int, instance: Instance) -> Prediction:
        return to_prediction(index, instance, self.breakdown(index, instance).totals)


class AlgorithmRanker(Ranker):
    """Weighted image-context, image-gloss and context-gloss scoring."""

    def __init__(self, system: ResolvedSystem, resources: RankingResources) -> None:
        super().__init__(system, resources)
        if system.weights is None:
            raise ConfigError(f"{system.system_id} needs weights")
        self.weights = system.weights
        self.fallback_indices: set[int] = set()

    def glosses(self, instance: Instance) -> list[str]:
        if not self.system.use_glosses:
            return []
        inventory = self.resources.inventories.get(instance.language)
        if inventory is None:
            return []
        return select_glosses(instance.focus_word, inventory)

    def prepare(self, instances: Sequence[Instance]) -> None:
        vl_items: list[FetchItem] = []
        l_items: list[FetchItem] = []
        for instance in instances:
            texts = [self.context(instance), *self.glosses(instance)]
            vl_items.extend(("image", image) for image in instance.candidates)
            vl_items.extend(("text", text) for text in texts)
            if len(texts) > 1:
                l_items.extend(("text", text) for text in texts)
        provider = self.resources.provider
        batch_size = self.resources.fetch_batch_size
        provider.prefetch(self.system.vl_model, vl_items, batch_size)
        if l_items:
            provider.prefetch(self.system.l_model, l_items, batch_size)

    def table(self, instance: Instance) -> SimilarityTable:
        provider = self.resources.provider
        vl, l_model = self.system.vl_model, self.system.l_model

        def sim_vl(image: str, text: str) -> float:
            return cosine(
                provider.array(vl, "image", image), provider.array(vl, "text", text)
            )

        def sim_l(a: str, b: str) -> float:
            return cosine(
                provider.array(l_model, "text", a), provider.array(l_model, "text", b)
            )

        return similarity_table(
            instance, self.glosses(instance), sim_vl, sim_l, self.context(instance)
        )

    def score(
        self, index: int, table: SimilarityTable, weights: Weights | None = None
    ) -> ScoreBreakdown:
        breakdown = score_table(
            table, weights or self.weights, self.resources.gloss_floor
        )
        if breakdown.gloss_fallback and self.system.use_glosses:
            self.fallback_indices.add(index)
        return breakdown

    def breakdown(self, index: int, instance: Instance) -> ScoreBreakdown:
        return self.score(index, self.table(instance))


class GenRanker(Ranker):
    """Similarity of each candidate to images generated from the context."""

    def generated_items(self, instance: Instance) -> list[FetchItem]:
        context = self.context(instance)
        return [
            ("image", generated_key(context, k))
            for k in range(self.resources.gen_count)
        ]

    def prepare(self, instances: Sequence[Instance]) -> None:
        items: list[FetchItem] = []
        for instance in instances:
            items.extend(("image", image) for image in instance.candidates)
            items.extend(self.generated_items(instance))
        self.resources.provider.prefetch(
            self.system.vl_model, items, self.resources.fetch_batch_size
        )

    def breakdown(self, index: int, instance: Instance) -> ScoreBreakdown:
        provider = self.resources.provider
        items = self.generated_items(instance)
        generated = provider.fetch_arrays(self.system.vl_model, items)
        return gen_score(
            instance,
            generated,
            lambda image: provider.array(self.system.vl_model, "image", image),
            self.resources.gen_aggregation,
            self.resources.gen_count,
        )


class SegRanker(Ranker):
    """Highest mean mask value; mask values are produced outside this package."""

    def __init__(self, system: ResolvedSystem, resources: RankingResources) -> None:
        super().__init__(system, resources)
        if resources.masks is None:
            raise ConfigError(f"{system.system_id} needs mask values (seg.masks)")
        self.masks = resources.masks

    def _values(self, index: int) -> Mapping[str, float]:
        if index not in self.masks:
            raise IntegrityError(f"No mask values for instance {index}")
        return self.masks[index]

    def breakdown(self, index: int, instance: Instance) -> ScoreBreakdown:
        prediction = self.rank(index, instance)
        by_image = dict(zip(prediction.ranking, prediction.totals))
        return ScoreBreakdown(
            candidates=tuple(
                CandidateScore(image_id=image, index=i, total=by_image[image])
                for i, image in enumerate(instance.candidates)
            )
        )

    def rank(self, index: int, instance: Instance) -> Prediction:
        return seg_select(
            index, instance, self._values(index), self.resources.seg_normalize
        )


def make_ranker(system: ResolvedSystem, resources: RankingResources) -> Ranker:
    match system.strategy:
        case "algorithm":
            return AlgorithmRanker(system, resources)
        case "gen":
            return GenRanker(system, resources)
        case "seg":
            return SegRanker(system, resources)
        case _:
            raise ConfigError(f"Unsupported strategy: {system.strategy}")


def rank(
    instance: Instance,
    system: ResolvedSystem,
    resources: RankingResources,
    index: int = 0,
) -> Prediction:
    """Rank one instance's candidates under a resolved system."""
    ranker = make_ranker(system, resources)
    ranker.prepare([instance])
    prediction = ranker.rank(index, instance)
    logging.debug(f"Instance {index}: chose {prediction.chosen}")
    return prediction
