"""Run configuration: one YAML file, validated strictly.

Relative paths are resolved against the directory of the config file.
Unknown keys anywhere in the tree are rejected with their dotted path.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dataset import Superclass
from .errors import ConfigParseError, ConfigValidationError
from .model import Mode, ModelConfig
from .textenc import TEXT_DIM
from .textgen import LlmEndpointConfig
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSection(_Strict):
    n_records: int = Field(500, gt=0)
    signal_length: int = Field(1000, ge=32)
    sampling_rate: float = Field(100.0, gt=0)
    noise_std: float = Field(0.1, ge=0)
    seed: int = 0
    # two superclasses given identical signals but disjoint demographics; null disables
    confound_pair: Optional[tuple[str, str]] = ("CD", "STTC")

    @field_validator("confound_pair")
    @classmethod
    def _known_classes(cls, v):
        if v is not None:
            for name in v:
                if name not in Superclass.__members__:
                    raise ValueError(f"unknown superclass {name!r}")
            if v[0] == v[1]:
                raise ValueError("confound pair needs two distinct classes")
        return v


class DataSection(_Strict):
    source: Literal["synthetic", "ptbxl"] = "synthetic"
    ptbxl_root: Optional[Path] = None
    likelihood_threshold: float = Field(50.0, ge=0, le=100)
    synthetic: SyntheticSection = SyntheticSection()

    @model_validator(mode="after")
    def _root_needed(self):
        if self.source == "ptbxl":
            if self.ptbxl_root is None:
                raise ValueError("ptbxl_root is required when source is 'ptbxl'")
            if not self.ptbxl_root.is_dir():
                raise ValueError(f"ptbxl_root {self.ptbxl_root} does not exist")
        return self


class TrainSection(_Strict):
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    max_epochs: int = Field(1000, ge=1)
    patience: int = Field(50, ge=1)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    @model_validator(mode="after")
    def _patience_below_max(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self


class ModelSection(_Strict):
    # encoder widths may be reduced for quick runs; the head is fixed
    stem_channels: int = Field(64, ge=1)
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = Field(2, ge=1)
    fusion_dim: int = Field(512, ge=1)


class TextSection(_Strict):
    # "hash", "precomputed:<path>" ("{kind}" expands to dtt or llm), or "http:<base url>"
    provider: str = "hash"
    http_model: str = "emilyalsentzer/Bio_ClinicalBERT"
    llm_texts: Optional[Path] = None  # pre-generated LLM reports (JSONL)

    @field_validator("provider")
    @classmethod
    def _provider_form(cls, v):
        kind, _, arg = v.partition(":")
        if kind == "hash" and not arg:
            return v
        if kind in ("precomputed", "http") and arg:
            return v
        raise ValueError("expected 'hash', 'precomputed:<path>' or 'http:<url>'")

    @property
    def provider_kind(self) -> str:
        return self.provider.partition(":")[0]

    @property
    def provider_arg(self) -> str:
        return self.provider.partition(":")[2]

    def precomputed_path(self, kind: str) -> Path:
        return Path(self.provider_arg.replace("{kind}", kind))


class LlmSection(_Strict):
    base_url: Optional[str] = None
    model: str = "llama-3.1-8b-instruct"
    temperature: float = Field(0.0, ge=0)
    max_tokens: int = Field(400, ge=1)
    timeout: float = Field(60.0, gt=0)
    max_attempts: int = Field(5, ge=1)
    max_workers: int = Field(4, ge=1)
    min_interval: float = Field(0.0, ge=0)

    def endpoint(self) -> LlmEndpointConfig:
        return LlmEndpointConfig(
            base_url=self.base_url or "",
            model=self.model,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            timeout=self.timeout,
            max_attempts=self.max_attempts,
            max_workers=self.max_workers,
            min_interval=self.min_interval,
        )


class RunConfig(_Strict):
    data: DataSection = DataSection()
    mode: Mode = Mode.CLIC_DTT
    train: TrainSection = TrainSection()
    model: ModelSection = ModelSection()
    text: TextSection = TextSection()
    llm: LlmSection = LlmSection()
    out: Path = Path("out")
    jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _cross_field(self):
        if self.mode is Mode.CLIC_LLM and self.llm.base_url is None and self.text.llm_texts is None:
            raise ValueError("mode clic-llm needs llm.base_url or text.llm_texts")
        if self.text.llm_texts is not None and not self.text.llm_texts.is_file():
            raise ValueError(f"text.llm_texts {self.text.llm_texts} does not exist")
        if self.text.provider_kind == "precomputed" and self.text_kind is not None:
            p = self.text.precomputed_path(self.text_kind)
            if not p.is_file():
                raise ValueError(f"precomputed embedding file {p} does not exist")
        return self

    @property
    def text_kind(self) -> str | None:
        return {Mode.CLIC_DTT: "dtt", Mode.CLIC_LLM: "llm"}.get(self.mode)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, batch_size=t.batch_size, max_epochs=t.max_epochs,
                           patience=t.patience, seeds=t.seeds)

    def encoder_overrides(self) -> dict[str, Any]:
        m = self.model
        return dict(stem_channels=m.stem_channels, stage_channels=m.stage_channels,
                    blocks_per_stage=m.blocks_per_stage, fusion_dim=m.fusion_dim)

    def build_model_config(self, attr_dim: int = 0) -> ModelConfig:
        return ModelConfig(mode=self.mode, attr_dim=attr_dim, text_dim=TEXT_DIM, **self.encoder_overrides())


_PATH_FIELDS = (("data", "ptbxl_root"), ("text", "llm_texts"), ("out",))


def _resolve_paths(raw: dict, base: Path) -> None:
    for keys in _PATH_FIELDS:
        node = raw
        for k in keys[:-1]:
            node = node.get(k) if isinstance(node, dict) else None
        if isinstance(node, dict) and isinstance(node.get(keys[-1]), str):
            p = Path(node[keys[-1]])
            node[keys[-1]] = str(p if p.is_absolute() else base / p)
    text = raw.get("text")
    if isinstance(text, dict) and isinstance(text.get("provider"), str):
        kind, sep, arg = text["provider"].partition(":")
        if kind == "precomputed" and arg and not Path(arg).is_absolute():
            text["provider"] = f"precomputed:{base / arg}"


def _first_error(exc: ValidationError) -> ConfigValidationError:
    err = exc.errors()[0]
    loc = ".".join(str(p) for p in err["loc"]) or "<root>"
    if err["type"] == "extra_forbidden":
        return ConfigValidationError("unknown key", loc)
    return ConfigValidationError(err["msg"].removeprefix("Value error, "), loc)


def validate_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise _first_error(exc) from None


def load_raw_config(path: str | Path | None) -> dict:
    """Parse the YAML file into a dict with paths resolved; ``None`` gives ``{}``."""
    if path is None:
        return {}
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigParseError(f"{path}: top level must be a mapping")
    _resolve_paths(raw, path.resolve().parent)
    return raw


def parse_config(path: str | Path | None) -> RunConfig:
    return validate_config(load_raw_config(path))
