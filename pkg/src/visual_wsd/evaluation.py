import dataclasses
import itertools
import json
import logging
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from visual_wsd.errors import (
    DataError,
    DegenerateInputError,
    EvaluationError,
    IntegrityError,
)
from visual_wsd.knowledge import NOUN_TAGS, SenseInventory
from visual_wsd.models import (
    Dataset,
    DatasetStats,
    EvalReport,
    GridRow,
    Instance,
    LanguageScores,
    Prediction,
    Weights,
)
from visual_wsd.rankers import (
    AlgorithmRanker,
    GenRanker,
    SimilarityTable,
    to_prediction,
)
from visual_wsd.seeding import make_rng

# Binarised weight domain {0, 1}^3 without the all-zero point.
BINARY_WEIGHT_DOMAIN: tuple[tuple[float, float, float], ...] = tuple(
    w for w in itertools.product((1.0, 0.0), repeat=3) if any(w)
)
DEFAULT_GEN_COUNTS = (1, 5, 10, 15)


def _reciprocal_ranks(predictions: Sequence[Prediction]) -> list[float]:
    ranks = []
    for prediction in predictions:
        if prediction.gold is None:
            raise EvaluationError(f"Instance {prediction.index} has no gold image")
        rank = prediction.rank_of(prediction.gold)
        if rank is None:
            raise IntegrityError(
                f"Instance {prediction.index}: gold {prediction.gold} not in ranking"
            )
        ranks.append(1.0 / rank)
    return ranks


def hit_rate(predictions: Sequence[Prediction]) -> float:
    """Fraction of instances whose top-ranked image is the gold one (top-1 accuracy)."""
    if not predictions:
        raise EvaluationError("No predictions to evaluate")
    hits = 0
    for prediction in predictions:
        if prediction.gold is None:
            raise EvaluationError(f"Instance {prediction.index} has no gold image")
        hits += prediction.chosen == prediction.gold
    return hits / len(predictions)


def mrr(predictions: Sequence[Prediction]) -> float:
    """Mean reciprocal rank of the gold image (ranks are 1-based)."""
    if not predictions:
        raise EvaluationError("No predictions to evaluate")
    return float(np.mean(_reciprocal_ranks(predictions)))


def macro_average(per_language: Mapping[str, float]) -> float:
    """Unweighted mean over languages. Round only when presenting."""
    if not per_language:
        raise EvaluationError("Macro average over an empty set of languages")
    return float(np.mean(list(per_language.values())))


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation coefficient."""
    if len(a) != len(b):
        raise DataError(f"Length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise DegenerateInputError("Pearson correlation needs at least two points")
    if np.std(a) == 0.0 or np.std(b) == 0.0:
        raise DegenerateInputError("Pearson correlation is undefined for zero variance")
    return float(stats.pearsonr(a, b)[0])


def sample_instances(dataset: Dataset, size: int | None, seed: int) -> Dataset:
    """A seeded uniform sample of at most `size` instances, kept in file order."""
    if size is None or size >= len(dataset):
        return dataset
    rng = make_rng(seed, "sample", dataset.name)
    keep = set(rng.choice(len(dataset), size=size, replace=False).tolist())
    return dataset.model_copy(
        update={
            "instances": tuple(
                inst for i, inst in enumerate(dataset.instances) if i in keep
            )
        }
    )


def grid_search(
    instances: Sequence[Instance],
    ranker: AlgorithmRanker,
    weight_domain: Sequence[tuple[float, float, float]] = BINARY_WEIGHT_DOMAIN,
    progress: bool = False,
) -> list[GridRow]:
    """Accuracy of each weight configuration, best first.

    Similarity tables are computed once and shared by all configurations. Rows are
    sorted by accuracy, then by weights, both descending.
    """
    ranker.prepare(instances)
    tables: list[SimilarityTable] = [
        ranker.table(instance)
        for instance in tqdm(instances, desc="similarities", disable=not progress)
    ]
    rows = []
    for values in weight_domain:
        weights = Weights.of(values)
        predictions = [
            to_prediction(idx, instance, ranker.score(idx, table, weights).totals)
            for idx, (instance, table) in enumerate(zip(instances, tables))
        ]
        rows.append(
            GridRow(
                w_ic=weights.w_ic,
                w_ig=weights.w_ig,
                w_cg=weights.w_cg,
                accuracy=hit_rate(predictions),
            )
        )
        logging.info(f"Grid weights {values}: accuracy {rows[-1].accuracy:.4f}")
    return sorted(rows, key=lambda r: (-r.accuracy, -r.w_ic, -r.w_ig, -r.w_cg))


def gen_sweep(
    instances: Sequence[Instance],
    ranker: GenRanker,
    counts: Sequence[int] = DEFAULT_GEN_COUNTS,
) -> list[tuple[int, float]]:
    """Accuracy of the generation ranker for each number of generated images."""
    results = []
    for count in counts:
        resources = dataclasses.replace(ranker.resources, gen_count=count)
        swept = GenRanker(ranker.system, resources)
        swept.prepare(instances)
        predictions = [
            swept.rank(idx, instance) for idx, instance in enumerate(instances)
        ]
        results.append((count, hit_rate(predictions)))
        logging.info(f"Gen with {count} image(s): accuracy {results[-1][1]:.4f}")
    return results


def dataset_stats(dataset: Dataset, inventory: SenseInventory) -> DatasetStats:
    """Polysemy, first-sense noun fraction and inventory coverage of focus words."""
    if len(dataset) == 0:
        raise DataError("Statistics of an empty dataset")
    sense_counts = []
    nouns = 0
    for instance in dataset.instances:
        senses = inventory.senses(instance.focus_word)
        if not senses:
            continue
        sense_counts.append(len(senses))
        nouns += senses[0].pos.casefold() in NOUN_TAGS
    covered = len(sense_counts)
    return DatasetStats(
        n=len(dataset),
        coverage=covered / len(dataset),
        mean_polysemy=float(np.mean(sense_counts)) if covered else None,
        noun_fraction=nouns / covered if covered else None,
    )


def build_report(
    system: str,
    predictions: Mapping[str, Sequence[Prediction]],
    seed: int,
    weights: Weights | None = None,
    config: dict[str, Any] | None = None,
    gloss_fallbacks: int = 0,
    truncations: int = 0,
) -> EvalReport:
    """Assemble a report from per-language predictions. Metrics need gold labels."""
    languages: dict[str, LanguageScores] = {}
    hits: list[float] = []
    reciprocal: list[float] = []
    for language in sorted(predictions):
        preds = predictions[language]
        if preds and all(p.gold is not None for p in preds):
            rr = _reciprocal_ranks(preds)
            hits.extend(float(p.chosen == p.gold) for p in preds)
            reciprocal.extend(rr)
            languages[language] = LanguageScores(
                n=len(preds), hit_rate=hit_rate(preds), mrr=float(np.mean(rr))
            )
        else:
            languages[language] = LanguageScores(n=len(preds))

    scored = {
        lang: s.hit_rate for lang, s in languages.items() if s.hit_rate is not None
    }
    correlation = None
    try:
        correlation = pearson(hits, reciprocal)
    except (DegenerateInputError, DataError):
        pass
    return EvalReport(
        system=system,
        languages=languages,
        macro_avg=macro_average(scored) if scored else None,
        pearson_acc_mrr=correlation,
        weights=weights,
        config=config or {},
        seed=seed,
        gloss_fallbacks=gloss_fallbacks,
        truncations=truncations,
    )


def _percent(value: float | None) -> str:
    return "-" if value is None else f"{100 * value:.1f}"


def report_table(report: EvalReport) -> str:
    """Aligned plain-text table, accuracy and MRR in percent to one decimal."""
    rows = [
        {
            "language": language,
            "n": scores.n,
            "hit_rate": _percent(scores.hit_rate),
            "mrr": _percent(scores.mrr),
        }
        for language, scores in report.languages.items()
    ]
    rows.append(
        {
            "language": "macro",
            "n": sum(s.n for s in report.languages.values()),
            "hit_rate": _percent(report.macro_avg),
            "mrr": "",
        }
    )
    return f"system: {report.system}\n{pd.DataFrame(rows).to_string(index=False)}\n"


def write_report(report: EvalReport, out_dir: Path) -> list[Path]:
    """Write report.json and report.txt. The JSON is byte-stable for equal reports."""
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    text_path = out_dir / "report.txt"
    payload = json.dumps(
        report.model_dump(mode="json"), indent=2, sort_keys=True, ensure_ascii=False
    )
    json_path.write_text(payload + "\n", encoding="utf-8")
    text_path.write_text(report_table(report), encoding="utf-8")
    return [json_path, text_path]


def predictions_frame(predictions: Mapping[str, Sequence[Prediction]]) -> pd.DataFrame:
    rows = [
        {
            "dataset": name,
            "index": p.index,
            "language": p.language,
            "chosen": p.chosen,
            "gold": p.gold or "",
            "ranking": ",".join(p.ranking),
            "totals": ",".join(f"{t:.10f}" for t in p.totals),
        }
        for name, preds in predictions.items()
        for p in preds
    ]
    return pd.DataFrame(
        rows,
        columns=["dataset", "index", "language", "chosen", "gold", "ranking", "totals"],
    )


def write_predictions(
    predictions: Mapping[str, Sequence[Prediction]], path: Path
) -> Path:
    """Prediction dump: one row per instance with its ranked candidates and totals."""
    path.parent.mkdir(parents=True, exist_ok=True)
    predictions_frame(predictions).to_csv(
        path, sep="\t", index=False, lineterminator="\n"
    )
    return path


def grid_frame(rows: Sequence[GridRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [row.model_dump() for row in rows], columns=["w_ic", "w_ig", "w_cg", "accuracy"]
    )
