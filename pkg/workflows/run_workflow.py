import logging
from pathlib import Path

import pandas as pd
from hydra import main
from hydra.utils import to_absolute_path
from omegaconf import DictConfig, open_dict

from visual_wsd.errors import VwsdError
from visual_wsd.evaluation import write_predictions, write_report
from visual_wsd.pipeline import load_datasets, report_for, run
from visual_wsd.settings import RunSettings


logging.basicConfig(
    level=logging.INFO, format="%(asctime)s [%(levelname)s] %(message)s"
)


def _absolute(path: str | None) -> str | None:
    """Return an absolute path for a Hydra-configured location."""
    return None if path is None else to_absolute_path(path)


@main(version_base=None, config_path="conf", config_name="experiment")
def run_experiment(cfg: DictConfig) -> None:
    """Run every configured system over the same datasets and tabulate accuracy."""

    with open_dict(cfg):
        systems = list(cfg.pop("systems"))
        for key in ("data", "gold", "inventory"):
            cfg[key] = _absolute(cfg[key])
        cfg.datasets = [_absolute(p) for p in cfg.datasets]
        cfg.providers.cache_dir = _absolute(cfg.providers.cache_dir)
    base = RunSettings.from_config(cfg)
    out_dir = Path(to_absolute_path(str(base.out)))
    datasets = load_datasets(base)

    rows: list[dict[str, object]] = []
    for system in systems:
        settings = base.model_copy(update={"system": system, "out": out_dir / system})
        try:
            result = run(settings, datasets)
        except VwsdError as e:
            logging.warning(f"Skipping {system}: {e}")
            continue
        report = report_for(settings, result)
        write_predictions(result.predictions, settings.out / "predictions.tsv")
        write_report(report, settings.out)

        record: dict[str, object] = {"system": system}
        for language, scores in report.languages.items():
            record[f"{language}_hit_rate"] = scores.hit_rate
            record[f"{language}_mrr"] = scores.mrr
        record["macro_avg"] = report.macro_avg
        logging.info(record)
        rows.append(record)

    output_file = out_dir / "results.csv"
    pd.DataFrame(rows).to_csv(output_file, index=False)
    logging.info(f"Saved results for {len(rows)} system(s) to {output_file}")


if __name__ == "__main__":
    run_experiment()
