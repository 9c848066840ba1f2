"""Run configuration file: schema, loading, ``--set`` overrides and object construction."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from sparsemoa.engine import Engine, PipelineConfig
from sparsemoa.errors import ConfigError
from sparsemoa.gateway import (
    DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE,
    Gateway,
    MockScript,
    ModelEndpoint,
    RetryPolicy,
)
from sparsemoa.harness import DEFAULT_ASPECTS, GraderSpec
from sparsemoa.ledger import PriceTable


class EndpointModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    base_url: str
    model_name: str = ""
    api_key_ref: str | None = None
    default_temperature: float = Field(DEFAULT_TEMPERATURE, ge=0, le=2)
    default_max_tokens: int = Field(DEFAULT_MAX_TOKENS, ge=1)

    @model_validator(mode="after")
    def _live_needs_key(self) -> "EndpointModel":
        if not self.base_url.startswith("mock://") and not self.api_key_ref:
            raise ValueError(f"live endpoint {self.id!r} needs api_key_ref (an environment variable name)")
        return self


class PipelineModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: Literal["moa", "smoa", "sc", "mad"] = "smoa"
    proposers: list[str] = Field(min_length=1)
    aggregator: str
    judge_moderator: str | None = None
    layers: int = Field(2, ge=1)
    k: int = Field(2, ge=1)
    roles_enabled: bool = True
    response_selection_enabled: bool = True
    early_stopping_enabled: bool = True
    split_judge_moderator: bool = False
    temperature: float = Field(0.7, ge=0, le=2)
    dataset_description: str = ""
    task_requirement: str = ""
    sc_paths: int = Field(4, ge=1)
    mad_rounds: int = Field(2, ge=1)
    debaters: list[str] | None = None


class RetryModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_attempts: int = Field(3, ge=1)
    base_delay: float = Field(1.0, ge=0)
    multiplier: float = Field(2.0, ge=1)


class GraderModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    endpoint: str
    aspects: list[str] = Field(default_factory=lambda: list(DEFAULT_ASPECTS), min_length=1)


class RunConfigFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    endpoints: list[EndpointModel] = Field(min_length=1)
    pipeline: PipelineModel
    price_table: str | None = None
    retry: RetryModel = RetryModel()
    concurrency: int = Field(4, ge=1)
    max_in_flight: int = Field(8, ge=1)
    mock_script: str | None = None
    grader: GraderModel | None = None
    dataset_name: str | None = None

    @field_validator("endpoints")
    @classmethod
    def _unique_ids(cls, v: list[EndpointModel]) -> list[EndpointModel]:
        ids = [e.id for e in v]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate endpoint ids: {dupes}")
        return v

    @model_validator(mode="after")
    def _references_resolve(self) -> "RunConfigFile":
        known = {e.id for e in self.endpoints}
        p = self.pipeline
        refs = list(p.proposers) + [p.aggregator] + ([p.judge_moderator] if p.judge_moderator else [])
        refs += p.debaters or []
        if self.grader:
            refs.append(self.grader.endpoint)
        unknown = sorted(set(refs) - known)
        if unknown:
            raise ValueError(f"undefined endpoint ids: {unknown}")
        if any(e.base_url.startswith("mock://") for e in self.endpoints) and not self.mock_script:
            raise ValueError("mock:// endpoints need a mock_script")
        return self


def _read_structured(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with a YAML-typed value; keys may be dotted (``retry.max_attempts``)."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"bad override {item!r}; expected key=value")
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Undotted keys that name a pipeline field go to ``pipeline``; dotted keys address the file."""
    pipeline_fields = set(PipelineModel.model_fields)
    for item in overrides:
        key, value = parse_override(item)
        path = key.split(".")
        if len(path) == 1 and key in pipeline_fields:
            path = ["pipeline", key]
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}")
        node[path[-1]] = value
    return data


class LoadedConfig:
    """A validated config file with its paths resolved relative to the file."""

    def __init__(self, model: RunConfigFile, base_dir: Path) -> None:
        self.model = model
        self.base_dir = base_dir

    def _path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def pipeline(self) -> PipelineConfig:
        p = self.model.pipeline
        fields = p.model_dump()
        fields["proposers"] = tuple(fields["proposers"])
        if fields["debaters"] is not None:
            fields["debaters"] = tuple(fields["debaters"])
        return PipelineConfig(**fields)

    def endpoints(self) -> list[ModelEndpoint]:
        return [ModelEndpoint(**e.model_dump()) for e in self.model.endpoints]

    def mock_script(self) -> MockScript | None:
        if not self.model.mock_script:
            return None
        data = _read_structured(self._path(self.model.mock_script)) or {}
        if not isinstance(data, dict):
            raise ConfigError("mock script must be a mapping")
        return MockScript.from_mapping(data)

    def price_table(self) -> PriceTable | None:
        if not self.model.price_table:
            return None
        try:
            return PriceTable.load(self._path(self.model.price_table))
        except OSError as exc:
            raise ConfigError(f"cannot read price table: {exc.strerror}") from None

    def retry(self) -> RetryPolicy:
        return RetryPolicy(**self.model.retry.model_dump())

    def grader(self) -> GraderSpec | None:
        g = self.model.grader
        return GraderSpec(g.endpoint, tuple(g.aspects)) if g else None

    def gateway(self) -> Gateway:
        return Gateway(self.endpoints(), self.mock_script(), self.retry(), self.model.max_in_flight)

    def engine(self) -> Engine:
        return Engine(self.gateway())


def load_config(path: str | Path, overrides: list[str] | None = None) -> LoadedConfig:
    path = Path(path)
    data = _read_structured(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    apply_overrides(data, overrides or [])
    try:
        model = RunConfigFile.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    loaded = LoadedConfig(model, path.parent)
    loaded.pipeline()  # cross-field checks (k <= n, judge present, ...)
    return loaded
