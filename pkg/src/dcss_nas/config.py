"""Configuration for dcss-nas.

One JSON document (:class:`RunConfig`) configures every command. Each section
is a pydantic model that rejects unknown keys; :func:`load_run_config` maps
parse and validation failures onto :class:`~dcss_nas.errors.ConfigError`
with the line of the offending key.
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Any, Literal

from loguru import logger
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from dcss_nas.errors import ConfigError

SEED_ENV = "DCSS_SEED"

# fixed operator order (kernel, expansion)
OPERATORS: tuple[tuple[int, int], ...] = ((3, 3), (3, 6), (5, 3), (5, 6), (7, 3), (7, 6))
NUM_SCALES = 4


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SplitSpec(_Section):
    """Fractions of the generated pool assigned to trainA, trainB and val."""

    train_a: float = 4 / 7
    train_b: float = 2 / 7
    val: float = 1 / 7

    @model_validator(mode="after")
    def fractions_must_partition(self) -> SplitSpec:
        parts = (self.train_a, self.train_b, self.val)
        if any(p <= 0 for p in parts):
            raise ValueError("split fractions must be > 0")
        if abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        return self

    def counts(self, total: int) -> tuple[int, int, int]:
        n_a = round(self.train_a * total)
        n_b = round(self.train_b * total)
        return n_a, n_b, total - n_a - n_b


class DatasetSpec(_Section):
    """Synthetic segmentation dataset (defaults give 200/100/50 samples)."""

    num_classes: int = 5
    image_size: int = 64
    size: int = 350
    split: SplitSpec = Field(default_factory=SplitSpec)
    seed: int = 0

    @field_validator("num_classes")
    @classmethod
    def num_classes_in_range(cls, v: int) -> int:
        if not 2 <= v < 255:
            raise ValueError("num_classes must be in [2, 255)")
        return v

    @field_validator("image_size")
    @classmethod
    def image_size_divisible_by_32(cls, v: int) -> int:
        if v < 32 or v % 32:
            raise ValueError("image_size must be a positive multiple of 32")
        return v

    @model_validator(mode="after")
    def every_split_non_empty(self) -> DatasetSpec:
        if min(self.split.counts(self.size)) < 1:
            raise ValueError("size too small: every split needs at least one sample")
        return self

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.split.counts(self.size)


class SupernetSpec(_Section):
    """Structural hyperparameters of the densely connected search space."""

    layers: int = 14
    width: int = 8
    in_degree: int = 3
    channel_ratio: float = 0.25
    n_paths: int | None = None
    num_classes: int = 5
    stem_channels: int = 32
    zero_init_residual: bool = True

    @field_validator("layers", "width", "in_degree", "stem_channels")
    @classmethod
    def must_be_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("channel_ratio")
    @classmethod
    def ratio_in_unit_interval(cls, v: float) -> float:
        if not 0 < v <= 1:
            raise ValueError("channel_ratio must be in (0, 1]")
        return v

    @field_validator("n_paths")
    @classmethod
    def n_paths_positive(cls, v: int | None) -> int | None:
        if v is not None and v < 1:
            raise ValueError("n_paths must be >= 1")
        return v

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.width * 2**i for i in range(NUM_SCALES))

    @property
    def paths(self) -> int:
        return self.n_paths if self.n_paths is not None else self.in_degree

    @property
    def edge_count(self) -> int:
        return 8 * self.layers * (self.layers + 1)


class SamplerConfig(_Section):
    tau_start: float = 5.0
    tau_end: float = 0.1
    anneal: Literal["exponential"] = "exponential"

    @model_validator(mode="after")
    def temperatures_valid(self) -> SamplerConfig:
        if self.tau_end <= 0:
            raise ValueError("tau_end must be > 0")
        # annealing must strictly cool
        if self.tau_start <= self.tau_end:
            raise ValueError("tau_start must be > tau_end")
        return self

    def tau(self, epoch: int, epochs: int) -> float:
        """Exponential interpolation from ``tau_start`` (epoch 0) to ``tau_end`` (last epoch)."""
        if epochs <= 1:
            return self.tau_start
        frac = min(max(epoch, 0), epochs - 1) / (epochs - 1)
        return float(self.tau_start * (self.tau_end / self.tau_start) ** frac)


class OptimizerConfig(_Section):
    kind: Literal["sgd", "adam"] = "sgd"
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @field_validator("base_lr")
    @classmethod
    def base_lr_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("base_lr must be > 0")
        return v

    @field_validator("momentum")
    @classmethod
    def momentum_in_range(cls, v: float) -> float:
        if not 0 <= v < 1:
            raise ValueError("momentum must be in [0, 1)")
        return v

    @field_validator("weight_decay")
    @classmethod
    def weight_decay_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("weight_decay must be >= 0")
        return v


class LrSchedule(_Section):
    base_lr: float
    max_iter: int
    power: float = 0.9

    @field_validator("base_lr")
    @classmethod
    def base_lr_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("base_lr must be > 0")
        return v

    @field_validator("max_iter")
    @classmethod
    def max_iter_non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("max_iter must be >= 0")
        return v


class SearchConfig(_Section):
    """Bilevel search protocol."""

    epochs: int = 30
    batch_size: int = 4
    steps_per_epoch: int | None = None
    lr_w: float = 0.01
    lr_arch: float = 0.0005
    weight_decay_w: float = 0.0001
    momentum_w: float = 0.9
    lambda_alpha: float = 1e-3
    lambda_beta: float = 1e-3
    lambda_con: float = 1e-3
    freeze_arch: bool = False
    augment: bool = True
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    seed: int = 0

    @field_validator("epochs")
    @classmethod
    def epochs_non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("epochs must be >= 0")
        return v

    @field_validator("batch_size")
    @classmethod
    def batch_size_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("batch_size must be >= 1")
        return v

    @field_validator("steps_per_epoch")
    @classmethod
    def steps_positive(cls, v: int | None) -> int | None:
        if v is not None and v < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        return v

    @field_validator("lr_w", "lr_arch")
    @classmethod
    def lr_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("learning rates must be > 0")
        return v

    @field_validator("lambda_alpha", "lambda_beta", "lambda_con", "weight_decay_w")
    @classmethod
    def coefficient_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("momentum_w")
    @classmethod
    def momentum_in_range(cls, v: float) -> float:
        if not 0 <= v < 1:
            raise ValueError("momentum_w must be in [0, 1)")
        return v


class TrainConfig(_Section):
    """Stand-alone retraining protocol."""

    epochs: int = 60
    batch_size: int = 4
    steps_per_epoch: int | None = None
    lr: float = 0.01
    momentum: float = 0.7
    weight_decay: float = 0.0001
    init: Literal["fresh", "inherit"] = "fresh"
    augment: bool = True
    seed: int = 0

    @field_validator("epochs")
    @classmethod
    def epochs_non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("epochs must be >= 0")
        return v

    @field_validator("batch_size")
    @classmethod
    def batch_size_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("batch_size must be >= 1")
        return v

    @field_validator("steps_per_epoch")
    @classmethod
    def steps_positive(cls, v: int | None) -> int | None:
        if v is not None and v < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        return v

    @field_validator("lr")
    @classmethod
    def lr_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("lr must be > 0")
        return v

    @field_validator("momentum")
    @classmethod
    def momentum_in_range(cls, v: float) -> float:
        if not 0 <= v < 1:
            raise ValueError("momentum must be in [0, 1)")
        return v


class CorrelationConfig(_Section):
    n_trials: int = 8
    base_seed: int = 0
    seeds: list[int] | None = None
    jobs: int = 1

    @field_validator("n_trials")
    @classmethod
    def n_trials_at_least_two(cls, v: int) -> int:
        if v < 2:
            raise ValueError("n_trials must be >= 2")
        return v

    @field_validator("jobs")
    @classmethod
    def jobs_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("jobs must be >= 1")
        return v

    @model_validator(mode="after")
    def seeds_match_trials(self) -> CorrelationConfig:
        if self.seeds is not None and len(self.seeds) != self.n_trials:
            raise ValueError("seeds must list exactly n_trials entries")
        return self

    def trial_seeds(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.base_seed + i for i in range(self.n_trials)]


class IoConfig(_Section):
    out_dir: Path = Path("runs")


class RunConfig(_Section):
    """Root configuration document shared by every CLI command."""

    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    supernet: SupernetSpec = Field(default_factory=SupernetSpec)
    search: SearchConfig = Field(default_factory=SearchConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    correlation: CorrelationConfig = Field(default_factory=CorrelationConfig)
    io: IoConfig = Field(default_factory=IoConfig)

    @model_validator(mode="after")
    def classes_agree(self) -> RunConfig:
        if self.supernet.num_classes != self.dataset.num_classes:
            raise ValueError("supernet.num_classes must equal dataset.num_classes")
        return self


def _apply_seed_override(raw: dict[str, Any]) -> None:
    value = os.environ.get(SEED_ENV)
    if value is None:
        return
    try:
        seed = int(value)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from e
    for section, key in (
        ("dataset", "seed"),
        ("search", "seed"),
        ("train", "seed"),
        ("correlation", "base_seed"),
    ):
        node = raw.setdefault(section, {})
        if isinstance(node, dict):
            node[key] = seed
    logger.info(f"{SEED_ENV}={seed} overrides every configured seed")


def _line_of_key(text: str, loc: tuple[int | str, ...]) -> int | None:
    """Best-effort line number of the innermost key of ``loc`` present in ``text``.

    Keys are searched in nesting order, each one after the previous match,
    so ``search.seed`` is not confused with ``dataset.seed``.
    """
    pos = None
    for key in (k for k in loc if isinstance(k, str)):
        start = 0 if pos is None else pos
        match = re.compile(rf'"{re.escape(key)}"\s*:').search(text, start)
        if match is None:
            # missing keys and model-level errors point at the enclosing key
            break
        pos = match.start()
    if pos is None:
        return None
    return text.count("\n", 0, pos) + 1


def parse_run_config(text: str, *, source: str = "<config>") -> RunConfig:
    """Parse and validate a JSON configuration document."""
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno, source=source) from e
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object", line=1, source=source)
    _apply_seed_override(raw)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(first["loc"])
        where = ".".join(str(k) for k in loc) or "config"
        raise ConfigError(
            f"{where}: {first['msg']}", line=_line_of_key(text, loc), source=source
        ) from e


def load_run_config(path: Path | None) -> RunConfig:
    """Load ``path`` (or all defaults when ``None``), honoring ``DCSS_SEED``."""
    if path is None:
        return parse_run_config("{}", source="<defaults>")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", source=str(path)) from e
    return parse_run_config(text, source=str(path))
