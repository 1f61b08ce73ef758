import json
from pathlib import Path

import pandas as pd
import pytest

from visual_wsd.cli import COMMANDS, main
from visual_wsd.dataset import load_dataset, write_dataset
from visual_wsd.models import ImageMapping
from visual_wsd.testkit import MockEmbeddingBackend, make_fixture_dataset

MOCK_MODELS = ["models.en.vl=mock-clip", "models.en.l=mock-bert"]


@pytest.fixture
def fixture_run(tmp_path: Path) -> list[str]:
    """Overrides pointing at a 100-instance noise fixture with a fully populated cache."""
    dataset, _, inventory = make_fixture_dataset(100, "noise", 0, tmp_path / "cache")
    write_dataset(dataset, tmp_path / "fixture.data.txt", tmp_path / "fixture.gold.txt")
    inventory.dump(tmp_path / "inventory.json")
    return [
        f"data='{tmp_path / 'fixture.data.txt'}'",
        f"gold='{tmp_path / 'fixture.gold.txt'}'",
        f"inventory='{tmp_path / 'inventory.json'}'",
        f"providers.cache_dir='{tmp_path / 'cache'}'",
        "name=fixture",
        "progress=false",
        *MOCK_MODELS,
    ]


def _out(path: Path) -> str:
    return f"out='{path}'"


def test_run_writes_all_outputs(tmp_path: Path, fixture_run: list[str]):
    out = tmp_path / "run"
    assert main(["run", *fixture_run, _out(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "predictions.tsv", "report.json", "report.txt"]
    assert not (tmp_path / ".run.partial").exists()

    predictions = pd.read_csv(out / "predictions.tsv", sep="\t")
    assert len(predictions) == 100
    report = json.loads((out / "report.json").read_text())
    assert report["system"] == "tr"
    assert report["languages"]["en"]["n"] == 100
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "run" and manifest["datasets"] == ["fixture"]


def test_run_is_byte_identical_across_repeats_and_jobs(tmp_path: Path, fixture_run: list[str]):
    for name, jobs in (("a", 1), ("b", 1), ("c", 8)):
        assert main(["run", *fixture_run, f"jobs={jobs}", _out(tmp_path / name)]) == 0
    for filename in ("predictions.tsv", "report.json"):
        reference = (tmp_path / "a" / filename).read_bytes()
        assert (tmp_path / "b" / filename).read_bytes() == reference
        assert (tmp_path / "c" / filename).read_bytes() == reference


def test_run_with_mock_services(tmp_path: Path, sample_files, inventory_path: Path):
    """Def needs definitions: the mock text service fills the cache on the way."""
    data_path, gold_path = sample_files
    out = tmp_path / "mock"
    code = main(
        [
            "run",
            "system=tr-def",
            "mock=true",
            "progress=false",
            f"data='{data_path}'",
            f"gold='{gold_path}'",
            f"inventory='{inventory_path}'",
            f"providers.cache_dir='{tmp_path / 'cache'}'",
            f"augment.definitions='{tmp_path / 'definitions.tsv'}'",
            _out(out),
        ]
    )
    assert code == 0
    assert (tmp_path / "definitions.tsv").read_text(encoding="utf-8").count("\n") == 3
    assert len(pd.read_csv(out / "predictions.tsv", sep="\t")) == 3


def test_zero_weights_exit_with_config_error(tmp_path: Path, fixture_run: list[str], caplog):
    out = tmp_path / "zero"
    assert main(["run", *fixture_run, "weights=[0,0,0]", _out(out)]) == 2
    assert "at least one of w_ic, w_ig, w_cg must be positive" in caplog.text
    assert not out.exists()


def test_unreachable_service_exits_with_provider_error(tmp_path: Path, sample_files, inventory_path: Path):
    data_path, gold_path = sample_files
    out = tmp_path / "unreachable"
    code = main(
        [
            "run",
            "progress=false",
            f"data='{data_path}'",
            f"gold='{gold_path}'",
            f"inventory='{inventory_path}'",
            f"providers.cache_dir='{tmp_path / 'empty_cache'}'",
            "providers.endpoint='http://127.0.0.1:9'",
            "providers.retries=1",
            "providers.backoff=0",
            "providers.timeout=2",
            _out(out),
        ]
    )
    assert code == 4
    assert not out.exists()
    assert not (tmp_path / ".unreachable.partial").exists()


def test_missing_dataset_and_unknown_keys_are_config_errors(tmp_path: Path):
    assert main(["run", _out(tmp_path / "x")]) == 2
    assert main(["run", "no_such_key=1", _out(tmp_path / "x")]) == 2
    assert main(["run", "system=nonsense", _out(tmp_path / "x")]) == 2


def test_langspec_with_def_is_rejected(tmp_path: Path, fixture_run: list[str]):
    assert main(["run", *fixture_run, "system=langspec-def", _out(tmp_path / "ls")]) == 2


def test_config_file_sits_beneath_overrides(tmp_path: Path, fixture_run: list[str]):
    config = tmp_path / "experiment.yaml"
    config.write_text("system: tr-def\nseed: 5\n", encoding="utf-8")
    out = tmp_path / "cfg"
    assert main(["run", "--config", str(config), *fixture_run, "system=tr", _out(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["system"] == "tr"
    assert report["seed"] == 5
    assert json.loads((out / "manifest.json").read_text())["config_path"] == str(config)


def test_grid_writes_seven_rows(tmp_path: Path, fixture_run: list[str]):
    out = tmp_path / "grid"
    assert main(["grid", *fixture_run, "grid.sample_size=null", _out(out)]) == 0
    grid = pd.read_csv(out / "grid.tsv", sep="\t")
    assert list(grid.columns) == ["dataset", "w_ic", "w_ig", "w_cg", "accuracy"]
    assert len(grid) == 7
    assert grid["accuracy"].is_monotonic_decreasing


def test_grid_needs_a_weighted_system(tmp_path: Path, fixture_run: list[str]):
    assert main(["grid", *fixture_run, "system=gen", _out(tmp_path / "g")]) == 2


def test_stats(tmp_path: Path, fixture_run: list[str], sample_files):
    out = tmp_path / "stats"
    assert main(["stats", *fixture_run, _out(out)]) == 0
    stats = pd.read_csv(out / "stats.tsv", sep="\t")
    assert stats["coverage"].tolist() == [1.0]

    data_path, gold_path = sample_files
    assert main(["stats", f"data='{data_path}'", f"gold='{gold_path}'", _out(tmp_path / "none")]) == 2


def test_sweep_writes_one_row_per_count(tmp_path: Path):
    dataset, _, _ = make_fixture_dataset(20, "ic", 0, tmp_path / "cache")
    write_dataset(dataset, tmp_path / "gen.data.txt", tmp_path / "gen.gold.txt")
    out = tmp_path / "sweep"
    code = main(
        [
            "sweep",
            "system=gen",
            "progress=false",
            f"data='{tmp_path / 'gen.data.txt'}'",
            f"gold='{tmp_path / 'gen.gold.txt'}'",
            f"providers.cache_dir='{tmp_path / 'cache'}'",
            *MOCK_MODELS,
            _out(out),
        ]
    )
    assert code == 0
    sweep = pd.read_csv(out / "sweep.tsv", sep="\t")
    assert sweep["count"].tolist() == [1, 5, 10, 15]
    assert (sweep["accuracy"] >= 0.9).all()


def test_sweep_needs_a_gen_system(tmp_path: Path, fixture_run: list[str]):
    assert main(["sweep", *fixture_run, "system=tr", _out(tmp_path / "s")]) == 2


def test_split_writes_loadable_halves(tmp_path: Path, fixture_run: list[str]):
    out = tmp_path / "split"
    assert main(["split", *fixture_run, "split.fraction=0.25", _out(out)]) == 0
    train = load_dataset(out / "fixture.train.data.txt", out / "fixture.train.gold.txt")
    dev = load_dataset(out / "fixture.dev.data.txt", out / "fixture.dev.gold.txt")
    assert (len(train), len(dev)) == (75, 25)
    assert (out / "fixture.dev.yaml").exists()


def test_synth_builds_a_loadable_training_set(tmp_path: Path):
    resource = tmp_path / "resource.jsonl"
    mappings = [
        ImageMapping(
            synset_id=f"bn:{s:04d}n",
            image_ids=(f"s{s}_0.jpg", f"s{s}_1.jpg"),
            lemmas=(f"base{s}",),
            related=((f"bn:{(s + 1) % 12:04d}n", f"rel{s}"),),
        )
        for s in range(12)
    ]
    resource.write_text("\n".join(m.model_dump_json() for m in mappings) + "\n", encoding="utf-8")
    out = tmp_path / "synth"
    assert main(["synth", f"synth.resource='{resource}'", "seed=3", _out(out)]) == 0
    dataset = load_dataset(out / "supplementary.data.txt", out / "supplementary.gold.txt")
    assert len(dataset) == 24
    assert main(["synth", _out(tmp_path / "nothing")]) == 2


def test_augment_fills_the_definition_cache(tmp_path: Path, sample_files):
    data_path, gold_path = sample_files
    out = tmp_path / "augment"
    code = main(
        [
            "augment",
            "mock=true",
            f"data='{data_path}'",
            f"gold='{gold_path}'",
            f"augment.definitions='{tmp_path / 'definitions.tsv'}'",
            _out(out),
        ]
    )
    assert code == 0
    augmented = pd.read_csv(out / "augmented.tsv", sep="\t")
    assert augmented["augmented_context"].tolist()[1] == "river bank: a mock definition of river bank."
    assert main(["augment", f"data='{data_path}'", f"augment.definitions='{tmp_path / 'empty.tsv'}'", _out(tmp_path / "x")]) == 4


def test_crlf_dataset_runs_from_the_same_cache(tmp_path: Path, fixture_run: list[str]):
    for name in ("fixture.data.txt", "fixture.gold.txt"):
        path = tmp_path / name
        path.write_bytes(path.read_bytes().replace(b"\n", b"\r\n"))
    out = tmp_path / "crlf"
    assert main(["run", *fixture_run, _out(out)]) == 0
    assert len(pd.read_csv(out / "predictions.tsv", sep="\t")) == 100


def test_undecodable_dataset_exits_with_data_error(tmp_path: Path, sample_files):
    data_path, gold_path = sample_files
    data_path.write_bytes(data_path.read_bytes().replace(b"river", "rivière".encode("latin-1")))
    out = tmp_path / "latin1"
    assert main(["run", f"data='{data_path}'", f"gold='{gold_path}'", *MOCK_MODELS, _out(out)]) == 3
    assert not out.exists()


def test_malformed_inventory_exits_with_data_error(tmp_path: Path, fixture_run: list[str]):
    inventory = tmp_path / "broken.json"
    inventory.write_text('{"bank": [\n  {not json', encoding="utf-8")
    assert main(["run", *fixture_run, f"inventory='{inventory}'", _out(tmp_path / "inv")]) == 3


def test_missing_mask_file_exits_with_data_error(tmp_path: Path, fixture_run: list[str]):
    masks = f"seg.masks.en='{tmp_path / 'absent.tsv'}'"
    assert main(["run", *fixture_run, "system=seg", masks, _out(tmp_path / "seg")]) == 3


def test_missing_synth_resource_exits_with_data_error(tmp_path: Path):
    resource = f"synth.resource='{tmp_path / 'absent.jsonl'}'"
    assert main(["synth", resource, _out(tmp_path / "synth")]) == 3


def test_non_finite_service_vectors_exit_with_provider_error(
    tmp_path: Path, sample_files, inventory_path: Path, monkeypatch
):
    data_path, gold_path = sample_files

    def nan_vectors(self, model_id, modality, payloads):
        return [[float("nan")] * 4 for _ in payloads]

    monkeypatch.setattr(MockEmbeddingBackend, "compute", nan_vectors)
    out = tmp_path / "nan"
    code = main(
        [
            "run",
            "mock=true",
            "progress=false",
            f"data='{data_path}'",
            f"gold='{gold_path}'",
            f"inventory='{inventory_path}'",
            f"providers.cache_dir='{tmp_path / 'cache'}'",
            _out(out),
        ]
    )
    assert code == 4
    assert not out.exists()


def test_unexpected_errors_exit_with_one(tmp_path: Path, fixture_run: list[str], monkeypatch, caplog):
    def broken(settings, invocation):
        raise RuntimeError("boom")

    monkeypatch.setitem(COMMANDS, "run", broken)
    assert main(["run", *fixture_run, _out(tmp_path / "broken")]) == 1
    assert "Unexpected RuntimeError: boom" in caplog.text
