from pathlib import Path
from typing import Any

from hydra import compose, initialize_config_module
from hydra.core.override_parser.overrides_parser import OverridesParser
from hydra.errors import HydraException
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
import yaml

from visual_wsd.errors import ConfigError
from visual_wsd.models import Language, ModelPair, Weights
from visual_wsd.rankers import (
    GENERATION_STEPS,
    GUIDANCE_SCALE,
    GenAggregation,
    SegNormalization,
)

CONFIG_MODULE = "visual_wsd.conf"
CONFIG_NAME = "config"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProviderSettings(_Section):
    endpoint: str | None = None
    cache_dir: Path = Path("cache/embeddings")
    image_dir: Path | None = None
    max_text_chars: int | None = Field(default=None, ge=1)
    retries: int = Field(default=3, ge=1)
    backoff: float = Field(default=0.5, ge=0.0)
    timeout: float = Field(default=30.0, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    mock_seed: int = 0
    mock_dim: int = Field(default=64, ge=1)


class AugmentSettings(_Section):
    endpoint: str | None = None
    definitions: Path = Path("cache/definitions.tsv")
    translations_dir: Path = Path("cache/translations")
    batch_size: int = Field(default=20, ge=1)


class GenSettings(_Section):
    count: int = Field(default=15, ge=1)
    steps: int = Field(default=GENERATION_STEPS, ge=1)
    guidance: float = GUIDANCE_SCALE
    aggregation: GenAggregation = "mean"
    sweep_counts: list[int] = Field(
        default_factory=lambda: [1, 5, 10, 15], min_length=1
    )


class SegSettings(_Section):
    masks: dict[str, Path] = Field(
        default_factory=dict, description="Dataset name or language -> mask value file."
    )
    normalize: SegNormalization = "none"


class ScoringSettings(_Section):
    gloss_floor: bool = False


class GridSettings(_Section):
    sample_size: int | None = Field(default=500, ge=1)


class SplitSettings(_Section):
    fraction: float = 0.1


class SynthSettings(_Section):
    resource: Path | None = None
    name: str = "supplementary"


class RunSettings(_Section):
    """Validated configuration of one command invocation."""

    system: str = "tr"
    lang: Language = "en"
    data: Path | None = None
    gold: Path | None = None
    name: str | None = None
    datasets: list[Path] = Field(default_factory=list)
    inventory: Path | None = None
    inventories: dict[str, Path] = Field(default_factory=dict)
    models: dict[str, ModelPair]
    weights: Weights | None = None
    seed: int = Field(default=0, ge=0)
    jobs: int = Field(default=1, ge=1)
    out: Path = Path("outputs")
    mock: bool = False
    progress: bool = True
    providers: ProviderSettings = Field(default_factory=ProviderSettings)
    augment: AugmentSettings = Field(default_factory=AugmentSettings)
    gen: GenSettings = Field(default_factory=GenSettings)
    seg: SegSettings = Field(default_factory=SegSettings)
    scoring: ScoringSettings = Field(default_factory=ScoringSettings)
    grid: GridSettings = Field(default_factory=GridSettings)
    split: SplitSettings = Field(default_factory=SplitSettings)
    synth: SynthSettings = Field(default_factory=SynthSettings)

    @field_validator("weights", mode="before")
    @classmethod
    def _weights_from_list(cls, value: Any) -> Any:
        if isinstance(value, (list, tuple)):
            if len(value) != 3:
                raise ValueError(
                    f"weights takes three values (w_ic, w_ig, w_cg), got {len(value)}"
                )
            return {"w_ic": value[0], "w_ig": value[1], "w_cg": value[2]}
        return value

    @classmethod
    def from_config(cls, cfg: DictConfig) -> "RunSettings":
        try:
            return cls.model_validate(OmegaConf.to_container(cfg, resolve=True))
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    def inventory_paths(self) -> dict[str, Path]:
        """Per-language inventories; `inventory` applies to `lang`."""
        paths = dict(self.inventories)
        if self.inventory is not None:
            paths[self.lang] = self.inventory
        return paths

    def echo(self) -> dict[str, Any]:
        """Settings that determine results, as stored in reports."""
        return self.model_dump(mode="json", exclude={"jobs", "out", "progress"})


def compose_config(overrides: list[str], config_file: Path | None = None) -> DictConfig:
    """Packaged defaults, then `config_file`, then `key=value` overrides on top."""
    try:
        with initialize_config_module(config_module=CONFIG_MODULE, version_base=None):
            cfg = compose(config_name=CONFIG_NAME)
        # The settings models reject unknown keys, so maps like seg.masks stay open.
        OmegaConf.set_struct(cfg, False)
        if config_file is not None:
            if not config_file.exists():
                raise ConfigError(f"Config file not found: {config_file}")
            merged = OmegaConf.merge(cfg, OmegaConf.load(config_file))
            if not isinstance(merged, DictConfig):
                raise ConfigError(f"Expected a mapping in {config_file}")
            cfg = merged
        for override in OverridesParser.create().parse_overrides(overrides):
            OmegaConf.update(cfg, override.key_or_group, override.value(), merge=True)
    except (
        HydraException,
        OmegaConfBaseException,
        yaml.YAMLError,
        UnicodeDecodeError,
    ) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    return cfg


def load_settings(overrides: list[str], config_file: Path | None = None) -> RunSettings:
    return RunSettings.from_config(compose_config(overrides, config_file))
