"""`vwsd` command line.

    vwsd COMMAND [--config FILE] [key=value ...]

Settings come from the packaged Hydra config, then FILE, then the overrides, e.g.
`vwsd run system=tr-def weights=[1,0,0] seed=7 data=d.txt lang=it out=runs/a`.
Every command writes its outputs and a manifest.json under `out`, or nothing on failure.
"""

import argparse
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
import importlib.metadata
import logging
from pathlib import Path
import shutil
from typing import Callable, Iterator, Sequence

import pandas as pd

from visual_wsd.dataset import split_dev, write_dataset, write_manifest
from visual_wsd.errors import ConfigError, VwsdError
from visual_wsd.evaluation import (
    dataset_stats,
    gen_sweep,
    grid_frame,
    grid_search,
    report_table,
    sample_instances,
    write_predictions,
    write_report,
)
from visual_wsd.knowledge import (
    SenseInventory,
    build_supplementary,
    load_image_mappings,
)
from visual_wsd.models import Dataset, DatasetManifest, ResolvedSystem, RunManifest
from visual_wsd.pipeline import (
    build_provider,
    build_resources,
    build_text_service,
    load_datasets,
    load_inventories,
    prepare_instances,
    report_for,
    run,
)
from visual_wsd.rankers import AlgorithmRanker, GenRanker, preset
from visual_wsd.settings import RunSettings, load_settings

VERSIONED_PACKAGES = (
    "visual_wsd",
    "numpy",
    "pandas",
    "pydantic",
    "scipy",
    "hydra-core",
    "requests",
)


@dataclass
class Invocation:
    command: str
    overrides: list[str]
    config_path: Path | None = None
    started_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))


def _versions() -> dict[str, str]:
    versions = {}
    for package in VERSIONED_PACKAGES:
        try:
            versions[package] = importlib.metadata.version(package)
        except importlib.metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


@contextmanager
def staged_outputs(out_dir: Path) -> Iterator[Path]:
    """Collect outputs in a sibling staging directory, moved to `out_dir` on success."""
    staging = out_dir.with_name(f".{out_dir.name}.partial")
    shutil.rmtree(staging, ignore_errors=True)
    staging.mkdir(parents=True)
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in sorted(staging.iterdir()):
        path.replace(out_dir / path.name)
    staging.rmdir()
    logging.info(f"Wrote outputs to {out_dir}")


def write_run_manifest(
    staging: Path,
    invocation: Invocation,
    settings: RunSettings,
    datasets: Sequence[Dataset],
    outputs: Sequence[Path],
) -> Path:
    manifest = RunManifest(
        command=invocation.command,
        config_path=str(invocation.config_path) if invocation.config_path else None,
        overrides=invocation.overrides,
        datasets=[d.name for d in datasets],
        out_dir=str(settings.out),
        seed=settings.seed,
        started_at=invocation.started_at,
        finished_at=datetime.now(timezone.utc),
        versions=_versions(),
        outputs=sorted(p.name for p in outputs),
    )
    path = staging / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def _write_table(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, sep="\t", index=False, lineterminator="\n")
    print(frame.to_string(index=False))
    return path


def _write_dataset_files(dataset: Dataset, directory: Path, stem: str) -> list[Path]:
    data_path = directory / f"{stem}.data.txt"
    gold_path = directory / f"{stem}.gold.txt" if dataset.has_gold else None
    write_dataset(dataset, data_path, gold_path)
    manifest_path = directory / f"{stem}.yaml"
    write_manifest(
        DatasetManifest(
            name=dataset.name,
            language=dataset.language,
            split=dataset.split,
            data=data_path,
            gold=gold_path,
        ),
        manifest_path,
    )
    return [p for p in (data_path, gold_path, manifest_path) if p is not None]


def cmd_run(settings: RunSettings, invocation: Invocation) -> int:
    """Rank every dataset; writes predictions.tsv, report.json and report.txt."""
    datasets = load_datasets(settings)
    with staged_outputs(settings.out) as staging:
        result = run(settings, datasets)
        report = report_for(settings, result)
        outputs = [write_predictions(result.predictions, staging / "predictions.tsv")]
        outputs.extend(write_report(report, staging))
        write_run_manifest(staging, invocation, settings, datasets, outputs)
    print(report_table(report), end="")
    return 0


def _algorithm_system(settings: RunSettings, dataset: Dataset) -> ResolvedSystem:
    system = preset(
        settings.system, dataset.language, settings.models, settings.weights
    )
    if system.strategy != "algorithm":
        raise ConfigError(f"grid search needs a weighted system, got {settings.system}")
    # Every configuration of the grid needs the gloss similarities.
    return system.model_copy(update={"use_glosses": True})


def cmd_grid(settings: RunSettings, invocation: Invocation) -> int:
    """Binarised weight grid on a seeded sample of each dataset; writes grid.tsv."""
    datasets = load_datasets(settings)
    provider = build_provider(settings)
    inventories = load_inventories(settings)
    text_service = build_text_service(settings)
    frames = []
    for dataset in datasets:
        system = _algorithm_system(settings, dataset)
        sample = sample_instances(dataset, settings.grid.sample_size, settings.seed)
        instances = prepare_instances(sample.instances, system, settings, text_service)
        resources = build_resources(settings, dataset, provider, inventories)
        ranker = AlgorithmRanker(system, resources)
        frame = grid_frame(grid_search(instances, ranker, progress=settings.progress))
        frame.insert(0, "dataset", dataset.name)
        frames.append(frame)
    with staged_outputs(settings.out) as staging:
        grid = pd.concat(frames, ignore_index=True)
        outputs = [_write_table(grid, staging / "grid.tsv")]
        write_run_manifest(staging, invocation, settings, datasets, outputs)
    return 0


def cmd_stats(settings: RunSettings, invocation: Invocation) -> int:
    """Polysemy, noun fraction and inventory coverage per dataset; writes stats.tsv."""
    paths = settings.inventory_paths()
    datasets = load_datasets(settings)
    rows = []
    for dataset in datasets:
        if dataset.language not in paths:
            raise ConfigError(
                f"stats needs a sense inventory for {dataset.language}: "
                "set inventory=PATH"
            )
        stats = dataset_stats(dataset, SenseInventory.load(paths[dataset.language]))
        rows.append(
            {
                "dataset": dataset.name,
                "language": dataset.language,
                **stats.model_dump(),
            }
        )
    with staged_outputs(settings.out) as staging:
        outputs = [_write_table(pd.DataFrame(rows), staging / "stats.tsv")]
        write_run_manifest(staging, invocation, settings, datasets, outputs)
    return 0


def cmd_augment(settings: RunSettings, invocation: Invocation) -> int:
    """Fill the definition cache for every context, translating first where needed."""
    datasets = load_datasets(settings)
    text_service = build_text_service(settings)
    rows = []
    for dataset in datasets:
        system = preset(
            settings.system, dataset.language, settings.models, settings.weights
        ).model_copy(update={"augment": True})
        instances = prepare_instances(dataset.instances, system, settings, text_service)
        rows.extend(
            {
                "dataset": dataset.name,
                "index": idx,
                "context": inst.context,
                "augmented_context": inst.augmented_context,
            }
            for idx, inst in enumerate(instances)
        )
    with staged_outputs(settings.out) as staging:
        path = staging / "augmented.tsv"
        pd.DataFrame(rows).to_csv(path, sep="\t", index=False, lineterminator="\n")
        write_run_manifest(staging, invocation, settings, datasets, [path])
    logging.info(f"Augmented {len(rows)} context(s)")
    return 0


def cmd_synth(settings: RunSettings, invocation: Invocation) -> int:
    """Build the supplementary training set from an image resource."""
    if settings.synth.resource is None:
        raise ConfigError("synth needs an image resource: set synth.resource=PATH")
    dataset = build_supplementary(
        load_image_mappings(settings.synth.resource),
        seed=settings.seed,
        name=settings.synth.name,
    )
    with staged_outputs(settings.out) as staging:
        outputs = _write_dataset_files(dataset, staging, dataset.name)
        write_run_manifest(staging, invocation, settings, [dataset], outputs)
    return 0


def cmd_split(settings: RunSettings, invocation: Invocation) -> int:
    """Split a seeded dev set off each dataset."""
    datasets = load_datasets(settings)
    with staged_outputs(settings.out) as staging:
        outputs = []
        for dataset in datasets:
            train, dev = split_dev(dataset, settings.split.fraction, settings.seed)
            stem = f"{dataset.name}.train"
            outputs.extend(_write_dataset_files(train, staging, stem))
            outputs.extend(_write_dataset_files(dev, staging, dev.name))
            logging.info(f"Split {dataset.name}: {len(train)} train, {len(dev)} dev")
        write_run_manifest(staging, invocation, settings, datasets, outputs)
    return 0


def cmd_sweep(settings: RunSettings, invocation: Invocation) -> int:
    """Gen accuracy for each count in gen.sweep_counts; writes sweep.tsv."""
    datasets = load_datasets(settings)
    provider = build_provider(settings)
    inventories = load_inventories(settings)
    text_service = build_text_service(settings)
    rows = []
    for dataset in datasets:
        system = preset(settings.system, dataset.language, settings.models)
        if system.strategy != "gen":
            raise ConfigError(
                f"sweep needs a Gen system (gen or gen-def), got {settings.system}"
            )
        instances = prepare_instances(dataset.instances, system, settings, text_service)
        resources = build_resources(settings, dataset, provider, inventories)
        ranker = GenRanker(system, resources)
        for count, accuracy in gen_sweep(instances, ranker, settings.gen.sweep_counts):
            rows.append(
                {
                    "dataset": dataset.name,
                    "system": settings.system,
                    "count": count,
                    "accuracy": accuracy,
                }
            )
    with staged_outputs(settings.out) as staging:
        outputs = [_write_table(pd.DataFrame(rows), staging / "sweep.tsv")]
        write_run_manifest(staging, invocation, settings, datasets, outputs)
    return 0


COMMANDS: dict[str, Callable[[RunSettings, Invocation], int]] = {
    "run": cmd_run,
    "grid": cmd_grid,
    "stats": cmd_stats,
    "augment": cmd_augment,
    "synth": cmd_synth,
    "split": cmd_split,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vwsd", description="Visual word sense disambiguation"
    )
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument(
        "--config", type=Path, default=None, help="YAML file merged under the overrides"
    )
    parser.add_argument(
        "overrides", nargs="*", help="key=value settings, e.g. system=tr-def seed=7"
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s [%(levelname)s] %(message)s"
    )
    invocation = Invocation(
        command=args.command,
        overrides=list(args.overrides),
        config_path=args.config,
    )
    try:
        settings = load_settings(invocation.overrides, args.config)
        return COMMANDS[args.command](settings, invocation)
    except VwsdError as e:
        logging.error(f"{type(e).__name__}: {e}")
        for note in getattr(e, "__notes__", []):
            logging.error(note)
        return e.exit_code
    except Exception as e:
        logging.exception(f"Unexpected {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
