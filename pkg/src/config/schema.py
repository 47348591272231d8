"""Run configuration: one JSON document validated section by section."""

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, ValidationError, model_validator

from src.utils.errors import ConfigurationError


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(Section):
    kind: Literal["gaussian_mixture", "gaussian"] = "gaussian_mixture"
    N: int = Field(256, ge=1)
    data_dim: int = Field(2, ge=1)
    n_components: int = Field(2, ge=1)
    seed: int = Field(0, ge=0)


class ScheduleConfig(Section):
    T: int = Field(100, ge=1)
    beta_min: float = 1e-4
    beta_max: float = 0.05
    kind: Literal["linear"] = "linear"

    @model_validator(mode="after")
    def _betas(self):
        if not 0 < self.beta_min <= self.beta_max < 1:
            raise ValueError("need 0 < beta_min <= beta_max < 1")
        return self


class LayerConfig(Section):
    kind: Literal["dense", "conv1d"] = "dense"
    activation: Literal["silu", "identity"] = "silu"
    out_dim: int | None = Field(None, ge=1)
    in_dim: int | None = Field(None, ge=1)
    kernel_width: int | None = Field(None, ge=1)
    in_channels: int | None = Field(None, ge=1)
    out_channels: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _fields_for_kind(self):
        if self.kind == "dense" and self.out_dim is None:
            raise ValueError("dense layers need out_dim")
        if self.kind == "conv1d" and None in (self.kernel_width, self.in_channels, self.out_channels):
            raise ValueError("conv1d layers need kernel_width, in_channels and out_channels")
        return self


def _default_layers() -> list[LayerConfig]:
    return [
        LayerConfig(out_dim=32),
        LayerConfig(out_dim=32),
        LayerConfig(out_dim=2, activation="identity"),
    ]


class ArchitectureConfig(Section):
    time_embed_dim: int = Field(8, ge=0)
    layers: list[LayerConfig] = Field(default_factory=_default_layers, min_length=1)

    @model_validator(mode="after")
    def _even_embedding(self):
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        return self


class TrainingConfig(Section):
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: PositiveFloat = 1e-3
    momentum: float = Field(0.9, ge=0, lt=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    steps: int = Field(2000, ge=1)
    subset_steps: int | None = Field(None, ge=1)
    sampler: Literal["weighted", "strict"] = "strict"
    log_every: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)

    @property
    def retrain_steps(self) -> int:
        return self.subset_steps or max(1, self.steps // 2)


RESERVED_LABELS = ("random", "exact_retraining", "file")

# Attribution settings that only shape curvature and scores. Artifacts upstream of
# them (model, dataset, queries, LDS benchmark) are shared across these settings.
SCORING_FIELDS = frozenset(
    {"label", "backend", "ggn_kind", "sharing", "estimator", "S", "damping", "compress",
     "train_measurement", "d_proj", "proj_seed"}
)


class AttributionConfig(Section):
    label: str | None = Field(None, pattern=r"^[A-Za-z0-9_-]+$")
    backend: Literal["kfac", "ekfac", "dense", "projected"] = "kfac"
    ggn_kind: Literal["model", "loss"] = "model"
    sharing: Literal["expand", "reduce"] = "expand"
    estimator: Literal["mc", "exact"] = "mc"
    S: int = Field(250, ge=1)
    damping: list[PositiveFloat] = Field(default_factory=lambda: [1e-3], min_length=1)
    compress: bool = False
    measurement: Literal["simple_loss", "elbo", "trajectory_log_prob", "per_timestep_loss", "square_norm"] = (
        "simple_loss"
    )
    measurement_t: int | None = Field(None, ge=1)
    measurement_S: int = Field(250, ge=1)
    train_measurement: Literal["square_norm"] | None = None
    d_proj: int = Field(64, ge=1)
    proj_seed: int = Field(0, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _timestep(self):
        if self.measurement == "per_timestep_loss" and self.measurement_t is None:
            raise ValueError("per_timestep_loss needs measurement_t")
        return self

    @model_validator(mode="after")
    def _label(self):
        if self.label in RESERVED_LABELS:
            raise ValueError(f"label {self.label!r} is reserved for a baseline")
        return self

    @property
    def score_label(self) -> str:
        """Name that keys this run's curvature and score files; defaults to the backend."""
        return self.label or self.backend

    @property
    def basis_samples(self) -> int:
        """EK-FAC splits S evenly between the eigenbasis and the eigenvalue passes."""
        return max(1, self.S // 2) if self.backend == "ekfac" else self.S

    @property
    def correction_samples(self) -> int:
        return max(1, self.S - self.S // 2)


class EvaluationConfig(Section):
    M: int = Field(20, ge=1)
    K: int = Field(3, ge=1)
    fraction: float = Field(0.5, gt=0, lt=1)
    Q: int = Field(16, ge=1)
    percent: list[float] = Field(default_factory=lambda: [10.0])
    downweight_fraction: float = Field(1.0, gt=0, le=1)
    proxy_timesteps: list[int] = Field(default_factory=lambda: [1, 25, 50, 75, 100])
    target_timesteps: list[int] = Field(default_factory=lambda: [1, 25, 50, 75, 100])
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _ranges(self):
        if any(not 0 <= p < 100 for p in self.percent):
            raise ValueError("percent values must lie in [0, 100)")
        if any(t < 1 for t in self.proxy_timesteps + self.target_timesteps):
            raise ValueError("timesteps start at 1")
        return self


class RunConfig(Section):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    attribution: AttributionConfig = Field(default_factory=AttributionConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def _timesteps_within_schedule(self):
        T = self.schedule.T
        ts = self.evaluation.proxy_timesteps + self.evaluation.target_timesteps
        if self.attribution.measurement_t is not None:
            ts = ts + [self.attribution.measurement_t]
        if any(t > T for t in ts):
            raise ValueError(f"timesteps must not exceed schedule.T = {T}")
        return self

    def arch_dict(self) -> dict:
        return {
            "data_dim": self.dataset.data_dim,
            **self.architecture.model_dump(exclude_none=True),
        }


def _violations(exc: ValidationError) -> list[tuple[str, str]]:
    out = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<root>"
        out.append((path, err["msg"]))
    return out


def parse_config_dict(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError("Invalid run configuration", _violations(exc)) from None


def parse_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON", [("<root>", str(exc))]) from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must hold a JSON object", [("<root>", type(data).__name__)])
    return parse_config_dict(data)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def shared_config_hash(cfg: RunConfig) -> str:
    """Hash of everything except the scoring-only attribution settings."""
    data = cfg.model_dump(mode="json")
    data["attribution"] = {k: v for k, v in data["attribution"].items() if k not in SCORING_FIELDS}
    payload = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def with_seed_override(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return cfg.model_copy(update={"training": cfg.training.model_copy(update={"seed": int(seed)})})
