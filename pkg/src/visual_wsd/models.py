from datetime import datetime
from pathlib import Path
from typing import Any, Literal, Self, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, FiniteFloat, model_validator

CANDIDATE_COUNT = 10

Language = Literal["en", "it", "fa", "other"]
Modality = Literal["text", "image"]
Split = Literal["train", "dev", "test"]
SystemName = Literal["baseline", "tr", "langspec", "gen", "seg"]
Strategy = Literal["algorithm", "gen", "seg"]


def focus_in_context(focus_word: str, context: str) -> bool:
    """Case-insensitive substring test used for the focus-word invariant."""
    return focus_word.casefold() in context.casefold()


class Instance(BaseModel):
    """A focus word in a short context with ten candidate images and optional gold."""

    model_config = ConfigDict(frozen=True)

    focus_word: str = Field(min_length=1)
    context: str
    augmented_context: str | None = None
    original_context: str | None = Field(
        default=None, description="Context before translation, kept as provenance."
    )
    language: Language
    candidates: tuple[str, ...]
    gold: str | None = None
    focus_not_in_context: bool = False

    @model_validator(mode="after")
    def _check_invariants(self) -> Self:
        if len(self.candidates) != CANDIDATE_COUNT:
            raise ValueError(
                f"expected {CANDIDATE_COUNT} candidates, got {len(self.candidates)}"
            )
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("duplicate candidate image ids")
        if self.gold is not None and self.gold not in self.candidates:
            raise ValueError(f"gold {self.gold!r} is not among the candidates")
        if not self.focus_not_in_context and not focus_in_context(
            self.focus_word, self.context
        ):
            raise ValueError(
                f"focus word {self.focus_word!r} not in context {self.context!r}"
            )
        return self

    @property
    def gold_index(self) -> int | None:
        if self.gold is None:
            return None
        return self.candidates.index(self.gold)

    def with_context(self, context: str, **updates: Any) -> "Instance":
        """Return a validated copy with a new context; the focus flag is recomputed."""
        data = self.model_dump()
        data.update(updates)
        data["context"] = context
        data["focus_not_in_context"] = not focus_in_context(self.focus_word, context)
        return Instance.model_validate(data)


class Dataset(BaseModel):
    """A named, single-language collection of instances."""

    model_config = ConfigDict(frozen=True)

    name: str
    language: Language
    split: Split = "test"
    instances: tuple[Instance, ...]

    @model_validator(mode="after")
    def _check_invariants(self) -> Self:
        if not self.instances:
            raise ValueError(f"dataset {self.name!r} is empty")
        for idx, instance in enumerate(self.instances):
            if instance.language != self.language:
                raise ValueError(
                    f"instance {idx} has language {instance.language}, "
                    f"dataset is {self.language}"
                )
        return self

    @property
    def has_gold(self) -> bool:
        return all(instance.gold is not None for instance in self.instances)

    def __len__(self) -> int:
        return len(self.instances)


class DatasetManifest(BaseModel):
    """Where a dataset lives and what it is."""

    name: str
    language: Language
    split: Split = "test"
    data: Path
    gold: Path | None = None


class Weights(BaseModel):
    """Weights for image-context, image-gloss and context-gloss similarity."""

    model_config = ConfigDict(frozen=True)

    w_ic: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    w_ig: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    w_cg: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)

    @model_validator(mode="after")
    def _not_all_zero(self) -> Self:
        if self.w_ic == 0.0 and self.w_ig == 0.0 and self.w_cg == 0.0:
            raise ValueError("at least one of w_ic, w_ig, w_cg must be positive")
        return self

    @classmethod
    def of(cls, values: Sequence[float]) -> "Weights":
        w_ic, w_ig, w_cg = values
        return cls(w_ic=w_ic, w_ig=w_ig, w_cg=w_cg)

    def as_tuple(self) -> tuple[float, float, float]:
        return self.w_ic, self.w_ig, self.w_cg

    def scaled(self, factor: float) -> "Weights":
        return Weights(
            w_ic=self.w_ic * factor, w_ig=self.w_ig * factor, w_cg=self.w_cg * factor
        )


class ModelPair(BaseModel):
    """Vision-language and text-only encoder ids used for one language."""

    vl: str
    l: str  # noqa: E741


class SystemConfig(BaseModel):
    """A system preset before it is resolved against an instance language."""

    system: SystemName
    def_enabled: bool = False
    weights: Weights | None = None
    models: dict[str, ModelPair]
    gen_count: int = Field(default=15, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _normalise_weights(self) -> Self:
        if self.system == "langspec" and self.def_enabled:
            raise ValueError("Def cannot be combined with LangSpec")
        if self.system in ("gen", "seg"):
            self.weights = None
        elif self.system == "tr" and self.def_enabled:
            w_ic = self.weights.w_ic if self.weights is not None else 1.0
            self.weights = Weights(w_ic=w_ic, w_ig=0.0, w_cg=0.0)
        elif self.system == "baseline":
            self.weights = Weights(w_ic=1.0, w_ig=0.0, w_cg=0.0)
        elif self.weights is None:
            self.weights = Weights()
        return self


class ResolvedSystem(BaseModel):
    """A preset resolved for one language, with its weights and models."""

    model_config = ConfigDict(frozen=True)

    system_id: str
    strategy: Strategy
    translate: bool
    augment: bool
    use_glosses: bool
    weights: Weights | None
    vl_model: str
    l_model: str


class EmbeddingVector(BaseModel):
    """A fixed-dimension real vector keyed by (model, modality, key)."""

    model_config = ConfigDict(frozen=True)

    model_id: str
    modality: Modality
    key: str
    values: tuple[float, ...]

    @model_validator(mode="after")
    def _check_values(self) -> Self:
        if not self.values:
            raise ValueError("embedding must have dim > 0")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"embedding {self.key!r} has non-finite values")
        return self

    @property
    def dim(self) -> int:
        return len(self.values)

    def array(self) -> NDArray[np.float64]:
        return np.asarray(self.values, dtype=np.float64)


class SenseEntry(BaseModel):
    """One sense of a lemma with its glosses in inventory order."""

    sense_id: str
    lemma: str
    pos: str
    language: str
    glosses: tuple[str, ...] = Field(min_length=1)


class ImageMapping(BaseModel):
    """A synset with its images, lemmas and related (synset, lemma) pairs."""

    synset_id: str
    image_ids: tuple[str, ...] = Field(min_length=1)
    lemmas: tuple[str, ...] = Field(min_length=1)
    related: tuple[tuple[str, str], ...] = ()


class CandidateScore(BaseModel):
    """Score of one candidate image and its decomposition."""

    model_config = ConfigDict(frozen=True)

    image_id: str
    index: int
    total: float
    s_ic: float | None = None
    s_ig: float | None = None
    s_cg: float | None = None
    best_gloss: str | None = None


class ScoreBreakdown(BaseModel):
    """Per-candidate scores in original candidate order."""

    model_config = ConfigDict(frozen=True)

    candidates: tuple[CandidateScore, ...]
    gloss_fallback: bool = False

    @property
    def totals(self) -> list[float]:
        return [c.total for c in self.candidates]


class Prediction(BaseModel):
    """A full ranking of an instance's candidates, best first."""

    model_config = ConfigDict(frozen=True)

    index: int
    language: Language
    ranking: tuple[str, ...]
    totals: tuple[float, ...]
    gold: str | None = None

    @model_validator(mode="after")
    def _check_ranking(self) -> Self:
        if len(set(self.ranking)) != len(self.ranking):
            raise ValueError("ranking contains duplicates")
        if len(self.totals) != len(self.ranking):
            raise ValueError("totals must align with ranking")
        return self

    @property
    def chosen(self) -> str:
        return self.ranking[0]

    def rank_of(self, image_id: str) -> int | None:
        """1-based rank of `image_id`, None if absent."""
        try:
            return self.ranking.index(image_id) + 1
        except ValueError:
            return None


class LanguageScores(BaseModel):
    n: int
    hit_rate: float | None = Field(default=None, ge=0.0, le=1.0)
    mrr: float | None = Field(default=None, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _mrr_dominates(self) -> Self:
        if self.hit_rate is not None and self.mrr is not None:
            if self.mrr < self.hit_rate - 1e-12:
                raise ValueError("mrr must be >= hit_rate")
        return self


class EvalReport(BaseModel):
    """Everything a run reports. Serialised byte-stably."""

    system: str
    languages: dict[str, LanguageScores]
    macro_avg: float | None = None
    pearson_acc_mrr: float | None = None
    weights: Weights | None = None
    config: dict[str, Any] = Field(default_factory=dict)
    seed: int
    gloss_fallbacks: int = 0
    truncations: int = 0


class GridRow(BaseModel):
    w_ic: float
    w_ig: float
    w_cg: float
    accuracy: float


class DatasetStats(BaseModel):
    n: int
    coverage: float
    mean_polysemy: float | None = None
    noun_fraction: float | None = None


class RunManifest(BaseModel):
    """Provenance written next to every report."""

    command: str
    config_path: str | None = None
    overrides: list[str] = Field(default_factory=list)
    datasets: list[str] = Field(default_factory=list)
    out_dir: str
    seed: int
    started_at: datetime
    finished_at: datetime
    versions: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)


# Wire protocol of the inference services.


class EmbedRequest(BaseModel):
    model: str
    modality: Modality
    inputs: list[str]


class EmbedResponse(BaseModel):
    dim: int
    vectors: list[list[FiniteFloat]]


class GenerateRequest(BaseModel):
    prompt: str


class GenerateResponse(BaseModel):
    text: str


class TranslateRequest(BaseModel):
    text: str
    source: str
    target: str = "en"


class TranslateResponse(BaseModel):
    text: str
