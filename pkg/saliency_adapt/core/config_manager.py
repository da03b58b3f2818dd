from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Annotated, Any, Literal, Sequence

from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from saliency_adapt.core.errors import InvalidConfigError
from saliency_adapt.core.persistence import PersistentStore

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[1] / "config" / "default.json"

KNOWN_ARMS: tuple[str, ...] = (
    "source_only",
    "vanilla_pl",
    "upl",
    "upl_wo_iss",
    "upl_wo_ppr",
    "upl_flip",
    "upl_scale",
    "upl_fda",
)

PAPER_SOURCE_PROPS = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]
PAPER_TARGET_PROPS = [0.0, 0.1, 0.2, 0.4, 0.6, 0.6]


def _check_dims(value: tuple[int, int], minimum: int = 1) -> tuple[int, int]:
    if value[0] < minimum or value[1] < minimum:
        raise ValueError(f"dimensions must be >= {minimum}, got {value[0]}x{value[1]}")
    return value


def _check_range(value: tuple[float, float]) -> tuple[float, float]:
    if value[0] > value[1]:
        raise ValueError(f"range low {value[0]} exceeds high {value[1]}")
    return value


def _check_positive_range(value: tuple[float, float]) -> tuple[float, float]:
    if value[0] <= 0:
        raise ValueError("range must be strictly positive")
    return _check_range(value)


Dims = Annotated[tuple[int, int], AfterValidator(_check_dims)]
PredictorDims = Annotated[tuple[int, int], AfterValidator(lambda value: _check_dims(value, minimum=2))]
PositiveRange = Annotated[tuple[float, float], AfterValidator(_check_positive_range)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathsConfig(_Section):
    assets: Path = Path("assets")
    datasets: Path = Path("datasets")
    run_dir: Path = Path("runs/default")


class DatasetConfig(_Section):
    canvas_dims: Dims = (64, 64)
    min_background_dims: Dims = (64, 64)
    n_source: int = Field(500, ge=1)
    n_target_train: int = Field(300, ge=1)
    n_target_eval: int = Field(200, ge=1)
    background_ratio: float = Field(1.2, ge=1.0)
    scale_range: PositiveRange = (0.5, 1.1)
    foreground_extent: PositiveRange = (0.35, 0.75)
    asset_source: Literal["procedural", "folder"] = "procedural"


class DomainShiftConfig(_Section):
    """Photometric shift turning fresh composites into the target domain."""

    gamma_range: tuple[float, float] = (1.0, 1.0)
    channel_scale_low: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_scale_high: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = Field(0.0, ge=0.0)
    blur_radius: int = Field(0, ge=0)

    @field_validator("gamma_range")
    @classmethod
    def _gamma(cls, value: tuple[float, float]) -> tuple[float, float]:
        if value[0] <= 0:
            raise ValueError("gamma must be > 0")
        return _check_range(value)

    @model_validator(mode="after")
    def _channel_ranges(self) -> DomainShiftConfig:
        for low, high in zip(self.channel_scale_low, self.channel_scale_high):
            if low < 0 or low > high:
                raise ValueError("channel scales need 0 <= low <= high per channel")
        return self

    @property
    def is_identity(self) -> bool:
        return (
            self.gamma_range == (1.0, 1.0)
            and self.channel_scale_low == (1.0, 1.0, 1.0)
            and self.channel_scale_high == (1.0, 1.0, 1.0)
            and self.noise_sigma == 0.0
            and self.blur_radius == 0
        )


class AugmentConfig(_Section):
    flip: bool = True
    scale: bool = True
    scale_dims: Dims = (224, 224)
    fda: bool = True
    fda_beta: float = Field(0.05, ge=0.0, le=1.0)
    fda_draws: int = Field(1, ge=1)


class RoundSchedule(_Section):
    rounds: int = Field(6, ge=1)
    source_props: list[float] = Field(default_factory=lambda: list(PAPER_SOURCE_PROPS))
    target_props: list[float] = Field(default_factory=lambda: list(PAPER_TARGET_PROPS))

    @model_validator(mode="after")
    def _lengths_match(self) -> RoundSchedule:
        for name in ("source_props", "target_props"):
            props = getattr(self, name)
            if len(props) != self.rounds:
                raise ValueError(f"{name} has {len(props)} entries but rounds is {self.rounds}")
            if any(p < 0.0 or p > 1.0 for p in props):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        return self

    def proportions(self, round_index: int) -> tuple[float, float]:
        """Source and target proportions for 1-based ``round_index``."""
        return self.source_props[round_index - 1], self.target_props[round_index - 1]


class TrainConfig(_Section):
    schedule: RoundSchedule = Field(default_factory=RoundSchedule)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    batch_size: int = Field(32, ge=1)
    train_input_dims: PredictorDims = (64, 64)
    test_input_dims: PredictorDims = (64, 64)
    epochs_per_round: int = Field(20, ge=1)
    lr_max: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    k: float = Field(20.0, gt=0.0)
    degenerate_low: float = Field(0.01, ge=0.0, le=1.0)
    degenerate_high: float = Field(0.99, ge=0.0, le=1.0)
    sample_selection: bool = True
    pixel_reweighting: bool = True
    arm: str = "upl"

    @field_validator("arm")
    @classmethod
    def _known_arm(cls, value: str) -> str:
        if value not in KNOWN_ARMS:
            raise ValueError(f"unknown arm {value!r}; expected one of {', '.join(KNOWN_ARMS)}")
        return value

    @model_validator(mode="after")
    def _degeneracy_band(self) -> TrainConfig:
        if self.degenerate_low > self.degenerate_high:
            raise ValueError("degenerate_low must not exceed degenerate_high")
        return self


class MetricsConfig(_Section):
    beta_sq: float = Field(0.3, gt=0.0)
    per_image: bool = False
    plot: bool = True


class StatsConfig(_Section):
    common_dims: Dims = (64, 64)
    histogram_bins: int = Field(20, ge=1)


class AblationConfig(_Section):
    arms: list[str] = Field(default_factory=lambda: ["source_only", "vanilla_pl", "upl"])
    seeds: list[int] = Field(default_factory=lambda: [0])

    @field_validator("arms")
    @classmethod
    def _known_arms(cls, value: list[str]) -> list[str]:
        unknown = [arm for arm in value if arm not in KNOWN_ARMS]
        if unknown:
            raise ValueError(f"unknown arms {unknown}; expected a subset of {list(KNOWN_ARMS)}")
        if not value:
            raise ValueError("at least one arm is required")
        return value

    @field_validator("seeds")
    @classmethod
    def _non_empty(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("at least one seed is required")
        return value


class RunConfig(_Section):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    shift: DomainShiftConfig = Field(default_factory=DomainShiftConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    stats: StatsConfig = Field(default_factory=StatsConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    seed: int = 0
    workers: int | None = Field(None, ge=1)


def deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(payload: dict[str, Any], assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place; values parse as JSON, else string."""
    if "=" not in assignment:
        raise InvalidConfigError(assignment, "override must look like key.path=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.strip().split(".")
    node = payload
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise InvalidConfigError(dotted, f"{key} is not a section")
        node = child
    node[keys[-1]] = value


def validate_run_config(payload: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = ".".join(str(part) for part in error["loc"]) or "<root>"
        raise InvalidConfigError(field, error["msg"]) from exc


class ConfigManager:
    def __init__(self, defaults_path: Path = DEFAULT_CONFIG_PATH) -> None:
        self.store = PersistentStore(defaults_path.parent)
        self.defaults_name = defaults_path.name

    def load_defaults(self) -> dict[str, Any]:
        return self.store.read_json(self.defaults_name, default={})

    def load_run_config(
        self,
        config_path: Path | None = None,
        overrides: Sequence[str] = (),
    ) -> RunConfig:
        payload = self.load_defaults()
        if config_path is not None:
            config_path = Path(config_path)
            if not config_path.exists():
                raise InvalidConfigError("--config", f"config file not found: {config_path}")
            try:
                user = json.loads(config_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise InvalidConfigError("--config", f"{config_path} is not valid JSON: {exc}") from exc
            payload = deep_merge(payload, user)
        for assignment in overrides:
            apply_override(payload, assignment)
        return validate_run_config(payload)

    def save_run_config(self, config: RunConfig, path: Path) -> Path:
        return PersistentStore(Path(path).parent).write_json(Path(path).name, config.model_dump(mode="json"))


def require_paths(config: RunConfig, *names: str) -> None:
    for name in names:
        path = getattr(config.paths, name)
        if not Path(path).exists():
            raise InvalidConfigError(f"paths.{name}", f"path does not exist: {path}")
