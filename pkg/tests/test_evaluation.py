import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from visual_wsd.errors import DataError, DegenerateInputError, EvaluationError, IntegrityError
from visual_wsd.evaluation import (
    BINARY_WEIGHT_DOMAIN,
    build_report,
    dataset_stats,
    gen_sweep,
    grid_search,
    hit_rate,
    macro_average,
    mrr,
    pearson,
    write_predictions,
    write_report,
)
from visual_wsd.knowledge import SenseInventory
from visual_wsd.models import Dataset, ModelPair, Prediction, SenseEntry, Weights
from visual_wsd.providers import EmbeddingProvider
from visual_wsd.rankers import AlgorithmRanker, GenRanker, RankingResources, preset
from visual_wsd.seeding import make_rng
from visual_wsd.testkit import make_fixture_dataset

MODELS = {"en": ModelPair(vl="mock-clip", l="mock-bert")}
CANDIDATES = tuple(f"c{j}" for j in range(10))


def _prediction(rank: int, index: int = 0) -> Prediction:
    """A prediction whose gold (c0) sits at 1-based `rank`."""
    others = [c for c in CANDIDATES if c != "c0"]
    ranking = others[: rank - 1] + ["c0"] + others[rank - 1 :]
    return Prediction(index=index, language="en", ranking=tuple(ranking), totals=tuple(range(10, 0, -1)), gold="c0")


def test_hit_rate_examples():
    assert hit_rate([_prediction(1), _prediction(2), _prediction(3)]) == pytest.approx(1 / 3, abs=1e-12)
    assert hit_rate([_prediction(1)] * 4) == 1.0
    assert hit_rate([_prediction(5)] * 4) == 0.0


def test_mrr_examples():
    assert mrr([_prediction(1), _prediction(2), _prediction(4)]) == pytest.approx(0.583333, abs=1e-6)
    assert mrr([_prediction(1)] * 3) == 1.0
    assert mrr([_prediction(10)] * 3) == pytest.approx(0.1)


def test_metric_errors():
    no_gold = _prediction(1).model_copy(update={"gold": None})
    with pytest.raises(EvaluationError):
        hit_rate([no_gold])
    with pytest.raises(EvaluationError):
        mrr([])
    absent = _prediction(1).model_copy(update={"gold": "zz"})
    with pytest.raises(IntegrityError):
        mrr([absent])


def test_mrr_dominates_hit_rate_and_is_order_free():
    """500 random prediction sets."""
    for k in range(500):
        rng = make_rng("metric laws", k)
        predictions = [_prediction(int(r), i) for i, r in enumerate(rng.integers(1, 11, size=int(rng.integers(1, 30))))]
        assert mrr(predictions) >= hit_rate(predictions)
        shuffled = [predictions[j] for j in rng.permutation(len(predictions))]
        assert hit_rate(shuffled) == pytest.approx(hit_rate(predictions))
        assert mrr(shuffled) == pytest.approx(mrr(predictions))


def test_macro_average_matches_published_rows():
    assert round(macro_average({"en": 61.1, "it": 59.3, "fa": 43.0}), 1) == 54.5
    assert round(macro_average({"en": 69.1, "it": 63.3, "fa": 40.0}), 1) == 57.5
    assert macro_average({"en": 0.42}) == 0.42
    with pytest.raises(EvaluationError):
        macro_average({})


def test_pearson():
    assert pearson([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)
    assert pearson([1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]) == pytest.approx(-1.0)
    assert pearson([1.0, 2.0, 3.0], [2.0, 4.0, 7.0]) == pytest.approx(0.98974, abs=1e-4)
    with pytest.raises(DegenerateInputError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])


def _grid(tmp_path: Path, mode: str, n: int, seed: int = 0):
    dataset, cache, inventory = make_fixture_dataset(n, mode, seed, tmp_path / mode)
    system = preset("tr", "en", MODELS)
    resources = RankingResources(provider=EmbeddingProvider(cache), inventories={"en": inventory})
    ranker = AlgorithmRanker(system, resources)
    return dataset, ranker, grid_search(dataset.instances, ranker)


def test_grid_on_image_context_fixture(tmp_path: Path):
    """Every w_ic=1 row is perfect; (0,1,1) is not; (0,0,1) falls back to index 0 on ties."""
    _, _, rows = _grid(tmp_path, "ic", 300)
    assert len(rows) == 7
    assert {(r.w_ic, r.w_ig, r.w_cg) for r in rows} == set(BINARY_WEIGHT_DOMAIN)
    by_weights = {(r.w_ic, r.w_ig, r.w_cg): r.accuracy for r in rows}
    for weights, accuracy in by_weights.items():
        if weights[0] == 1.0:
            assert accuracy == 1.0
    assert by_weights[(0.0, 1.0, 1.0)] < 1.0
    sigma = math.sqrt(0.1 * 0.9 / 300)
    assert abs(by_weights[(0.0, 0.0, 1.0)] - 0.1) < 3 * sigma
    assert [(r.w_ic, r.w_ig, r.w_cg) for r in rows[:4]] == [(1.0, 1.0, 1.0), (1.0, 1.0, 0.0), (1.0, 0.0, 1.0), (1.0, 0.0, 0.0)]


def test_grid_on_noise_fixture_is_at_chance(tmp_path: Path):
    _, _, rows = _grid(tmp_path, "noise", 2000)
    sigma = math.sqrt(0.1 * 0.9 / 2000)
    for row in rows:
        assert abs(row.accuracy - 0.1) < 3 * sigma


def test_grid_row_matches_an_independent_run(tmp_path: Path):
    """The (1,0,0) row equals ranking with those weights from scratch."""
    dataset, ranker, rows = _grid(tmp_path, "noise", 200, seed=4)
    row = next(r for r in rows if (r.w_ic, r.w_ig, r.w_cg) == (1.0, 0.0, 0.0))

    system = preset("tr", "en", MODELS, Weights.of((1.0, 0.0, 0.0)))
    fresh = AlgorithmRanker(system, ranker.resources)
    fresh.prepare(dataset.instances)
    predictions = [fresh.rank(idx, inst) for idx, inst in enumerate(dataset.instances)]
    assert row.accuracy == hit_rate(predictions)


def test_image_gloss_fixture_needs_the_gloss_term(tmp_path: Path):
    _, _, rows = _grid(tmp_path, "ig", 100)
    by_weights = {(r.w_ic, r.w_ig, r.w_cg): r.accuracy for r in rows}
    assert by_weights[(0.0, 1.0, 0.0)] == 1.0


def test_gen_sweep_emits_one_accuracy_per_count(tmp_path: Path):
    dataset, cache, inventory = make_fixture_dataset(40, "ic", 0, tmp_path)
    system = preset("gen", "en", MODELS)
    ranker = GenRanker(system, RankingResources(provider=EmbeddingProvider(cache), inventories={"en": inventory}))
    results = gen_sweep(dataset.instances, ranker, counts=(1, 5, 10, 15))
    assert [count for count, _ in results] == [1, 5, 10, 15]
    assert all(accuracy >= 0.9 for _, accuracy in results)


def test_dataset_stats(make_instance):
    entries = {
        "bank": [SenseEntry(sense_id=f"bank.{k}", lemma="bank", pos="noun", language="en", glosses=("g",)) for k in range(4)],
        "bat": [SenseEntry(sense_id=f"bat.{k}", lemma="bat", pos="verb" if k == 0 else "noun", language="en", glosses=("g",)) for k in range(2)],
        "mouse": [SenseEntry(sense_id=f"mouse.{k}", lemma="mouse", pos="n", language="en", glosses=("g",)) for k in range(6)],
    }
    inventory = SenseInventory(entries)

    triple = Dataset(name="d", language="en", instances=tuple(make_instance() for _ in range(3)))
    stats = dataset_stats(triple, inventory)
    assert stats.mean_polysemy == 4.0 and stats.coverage == 1.0 and stats.noun_fraction == 1.0

    mixed = Dataset(
        name="m",
        language="en",
        instances=(
            make_instance(focus_word="bat", context="baseball bat"),
            make_instance(focus_word="mouse", context="computer mouse"),
            make_instance(focus_word="zebra", context="zebra crossing"),
        ),
    )
    stats = dataset_stats(mixed, inventory)
    assert stats.mean_polysemy == 4.0
    assert stats.coverage == pytest.approx(2 / 3)
    assert stats.noun_fraction == 0.5

    unknown = Dataset(name="u", language="en", instances=(make_instance(focus_word="zebra", context="zebra crossing"),))
    stats = dataset_stats(unknown, inventory)
    assert stats.coverage == 0.0 and stats.mean_polysemy is None and stats.noun_fraction is None


def test_report_is_byte_stable(tmp_path: Path):
    predictions = {"en": [_prediction(1, 0), _prediction(2, 1), _prediction(4, 2)], "it": [_prediction(1, 0)] * 2}
    report = build_report("tr", predictions, seed=7, weights=Weights(), config={"system": "tr"}, truncations=2)

    assert report.languages["en"].hit_rate == pytest.approx(1 / 3)
    assert report.languages["en"].mrr == pytest.approx(0.583333, abs=1e-6)
    assert report.macro_avg == pytest.approx((1 / 3 + 1.0) / 2)
    assert report.pearson_acc_mrr is not None and -1.0 <= report.pearson_acc_mrr <= 1.0

    write_report(report, tmp_path / "a")
    write_report(build_report("tr", predictions, seed=7, weights=Weights(), config={"system": "tr"}, truncations=2), tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert json.loads((tmp_path / "a" / "report.json").read_text())["truncations"] == 2
    assert "macro" in (tmp_path / "a" / "report.txt").read_text()


def test_report_without_gold_has_no_metrics():
    prediction = _prediction(1).model_copy(update={"gold": None})
    report = build_report("tr", {"en": [prediction]}, seed=0)
    assert report.languages["en"].n == 1
    assert report.languages["en"].hit_rate is None and report.macro_avg is None


def test_prediction_dump(tmp_path: Path):
    path = write_predictions({"trial": [_prediction(2, 0), _prediction(1, 1)]}, tmp_path / "predictions.tsv")
    frame = pd.read_csv(path, sep="\t")
    assert list(frame.columns) == ["dataset", "index", "language", "chosen", "gold", "ranking", "totals"]
    assert frame["chosen"].tolist() == ["c1", "c0"]
    assert frame["ranking"][0].split(",")[1] == "c0"
    assert np.isclose(float(frame["totals"][0].split(",")[0]), 10.0)
