import json
from pathlib import Path
from typing import Callable, Iterator

import pytest

from visual_wsd.models import Instance
from visual_wsd.testkit import MockInferenceServer

InstanceFactory = Callable[..., Instance]


@pytest.fixture
def make_instance() -> InstanceFactory:
    """Factory for valid instances with ten candidates `{prefix}0.jpg` .. `{prefix}9.jpg`."""

    def factory(
        focus_word: str = "bank",
        context: str = "river bank",
        gold: int | None = 0,
        prefix: str = "image.",
        language: str = "en",
    ) -> Instance:
        candidates = tuple(f"{prefix}{j}.jpg" for j in range(10))
        return Instance(
            focus_word=focus_word,
            context=context,
            language=language,
            candidates=candidates,
            gold=candidates[gold] if gold is not None else None,
        )

    return factory


@pytest.fixture
def sample_files(tmp_path: Path) -> tuple[Path, Path]:
    """Three instances in the shared-task layout, with a gold file."""
    rows = [
        ("andromeda", "andromeda tree", "a"),
        ("bank", "river bank", "b"),
        ("mouse", "computer mouse", "c"),
    ]
    data_path = tmp_path / "trial.data.txt"
    gold_path = tmp_path / "trial.gold.txt"
    with open(data_path, "w", encoding="utf-8") as data, open(gold_path, "w", encoding="utf-8") as gold:
        for focus, context, prefix in rows:
            images = [f"{prefix}{j}.jpg" for j in range(10)]
            data.write("\t".join([focus, context, *images]) + "\n")
            gold.write(f"{prefix}3.jpg\n")
    return data_path, gold_path


@pytest.fixture
def inventory_path(tmp_path: Path) -> Path:
    """Toy sense inventory: `bank` with two senses, `mouse` with one, `andromeda` with four."""
    data = {
        "bank": [
            {"sense_id": "bank.n.01", "pos": "noun", "language": "en",
             "glosses": ["sloping land beside a body of water", "a slope"]},
            {"sense_id": "bank.n.02", "pos": "noun", "language": "en",
             "glosses": ["a financial institution"]},
        ],
        "mouse": [
            {"sense_id": "mouse.n.04", "pos": "noun", "language": "en",
             "glosses": ["a hand-operated pointing device"]},
        ],
        "andromeda": [
            {"sense_id": f"andromeda.{k}", "pos": "verb" if k == 0 else "noun", "language": "en",
             "glosses": [f"andromeda sense {k}"]}
            for k in range(4)
        ],
    }
    path = tmp_path / "inventory.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
    return path


@pytest.fixture(scope="session")
def mock_server() -> Iterator[MockInferenceServer]:
    """Mock inference service on a random local port."""
    server = MockInferenceServer(seed=0, dim=64)
    server.start()
    yield server
    server.stop()
