"""1D ResNet18 ECG encoder, attribute vectorizer and fusion heads."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import PatientMeta, Sex, Superclass
from .errors import (
    DimensionMismatch,
    InvalidConfig,
    ModeMismatch,
    NonFiniteInput,
    NonFiniteLogits,
    SignalTooShort,
)
from .textgen import compute_bmi

MIN_SIGNAL_LENGTH = 32
VARIANCE_FLOOR = 1e-8


class Mode(str, enum.Enum):
    ECG_ONLY = "ecg"
    ECG_ATTR = "ecg-attr"
    CLIC_DTT = "clic-dtt"
    CLIC_LLM = "clic-llm"

    @property
    def multimodal(self) -> bool:
        return self is not Mode.ECG_ONLY

    @property
    def uses_text(self) -> bool:
        return self in (Mode.CLIC_DTT, Mode.CLIC_LLM)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings.

    Defaults reproduce the reference model. ``stem_channels`` and
    ``stage_channels`` may be shrunk for gradient checks; the ECG embedding
    width is always the last stage width.
    """

    mode: Mode = Mode.ECG_ONLY
    input_leads: int = 12
    text_dim: int = 768
    attr_dim: int = 0
    head_dims: tuple[int, ...] = (256, 64, 5)
    fusion_dim: int = 512
    stem_channels: int = 64
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "head_dims", tuple(self.head_dims))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))

    @property
    def ecg_dim(self) -> int:
        return self.stage_channels[-1]

    @property
    def context_dim(self) -> int:
        if self.mode.uses_text:
            return self.text_dim
        if self.mode is Mode.ECG_ATTR:
            return self.attr_dim
        return 0

    def validate(self) -> None:
        if self.head_dims[-1] != len(Superclass):
            raise InvalidConfig(f"head must end in {len(Superclass)} logits")
        if not self.stage_channels or self.blocks_per_stage < 1:
            raise InvalidConfig("need at least one residual stage with one block")
        if min(self.head_dims + self.stage_channels + (self.stem_channels, self.fusion_dim, self.input_leads)) < 1:
            raise InvalidConfig("all widths must be positive")
        if self.mode is Mode.ECG_ATTR and self.attr_dim < 1:
            raise InvalidConfig("ecg-attr mode needs attr_dim >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["head_dims"] = list(self.head_dims)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------


class BasicBlock1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm1d(c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm1d(c_out)
        self.relu = nn.ReLU()
        self.downsample = None
        if stride != 1 or c_in != c_out:
            self.downsample = nn.Sequential(
                nn.Conv1d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm1d(c_out)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet1d(nn.Module):
    """ResNet18 with 1D convolutions; global average pooling over time."""

    def __init__(self, in_leads=12, stem_channels=64, stage_channels=(64, 128, 256, 512), blocks_per_stage=2):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv1d(in_leads, stem_channels, 7, 2, 3, bias=False),
            nn.BatchNorm1d(stem_channels),
            nn.ReLU(),
            nn.MaxPool1d(3, 2, 1),
        )
        stages = []
        c_in = stem_channels
        for i, c_out in enumerate(stage_channels):
            blocks = [BasicBlock1d(c_in, c_out, 1 if i == 0 else 2)]
            blocks += [BasicBlock1d(c_out, c_out) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            c_in = c_out
        self.stages = nn.Sequential(*stages)
        self.out_dim = c_in

    def forward(self, x):
        return self.stages(self.stem(x)).mean(dim=-1)


class ClicModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = ResNet1d(cfg.input_leads, cfg.stem_channels, cfg.stage_channels, cfg.blocks_per_stage)
        head_in = cfg.ecg_dim
        self.fusion = None
        if cfg.mode.multimodal:
            self.fusion = nn.Sequential(nn.Linear(cfg.ecg_dim + cfg.context_dim, cfg.fusion_dim), nn.ReLU())
            head_in = cfg.fusion_dim
        layers = []
        for i, width in enumerate(cfg.head_dims):
            layers.append(nn.Linear(head_in, width))
            if i < len(cfg.head_dims) - 1:
                layers.append(nn.ReLU())
            head_in = width
        self.head = nn.Sequential(*layers)

    def _fused(self, ecg_emb, context):
        cfg = self.cfg
        if not cfg.mode.multimodal:
            if context is not None:
                raise ModeMismatch(f"mode {cfg.mode.value} takes no context input")
            return ecg_emb
        if context is None:
            raise ModeMismatch(f"mode {cfg.mode.value} requires a context input")
        if context.ndim != 2 or context.shape[1] != cfg.context_dim:
            raise DimensionMismatch(f"context shape {tuple(context.shape)}, expected (B, {cfg.context_dim})")
        if context.shape[0] != ecg_emb.shape[0]:
            raise DimensionMismatch("ECG and context batch sizes differ")
        return self.fusion(torch.cat([ecg_emb, context.to(ecg_emb.dtype)], dim=1))

    def logits_from_embedding(self, ecg_emb, context=None):
        return self.head(self._fused(ecg_emb, context))

    def penultimate(self, x, context=None):
        """Input vector of the final 5-unit layer."""
        h = self._fused(self.encoder(x), context)
        return self.head[:-1](h)

    def forward(self, x, context=None):
        return self.logits_from_embedding(self.encoder(x), context)


@torch.no_grad()
def _init_parameters(model: nn.Module, gen: torch.Generator) -> None:
    # named_modules order is deterministic, so the generator stream is too
    for module in model.modules():
        if isinstance(module, nn.Conv1d):
            fan_in = module.in_channels * module.kernel_size[0] // module.groups
            module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            if module.bias is not None:
                module.bias.zero_()
        elif isinstance(module, nn.BatchNorm1d):
            module.weight.fill_(1.0)
            module.bias.zero_()
            module.reset_running_stats()
        elif isinstance(module, nn.Linear):
            bound = 1.0 / math.sqrt(module.in_features)
            module.weight.uniform_(-bound, bound, generator=gen)
            module.bias.uniform_(-bound, bound, generator=gen)


def init_model(cfg: ModelConfig, seed: int | None = None, dtype=torch.float32) -> ClicModel:
    """Build a model with He-normal convolutions, unit/zero batch norm and
    uniform(+-1/sqrt(fan_in)) linear layers. Same (cfg, seed) gives the same weights."""
    seed = cfg.seed if seed is None else seed
    model = ClicModel(cfg).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    _init_parameters(model, gen)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``cfg``."""
    bn = lambda c: 2 * c
    total = cfg.input_leads * cfg.stem_channels * 7 + bn(cfg.stem_channels)
    c_in = cfg.stem_channels
    for i, c in enumerate(cfg.stage_channels):
        for b in range(cfg.blocks_per_stage):
            stride = 2 if (i > 0 and b == 0) else 1
            src = c_in if b == 0 else c
            total += src * c * 3 + bn(c) + c * c * 3 + bn(c)
            if b == 0 and (stride != 1 or src != c):
                total += src * c + bn(c)
        c_in = c
    head_in = cfg.ecg_dim
    if cfg.mode.multimodal:
        total += (cfg.ecg_dim + cfg.context_dim) * cfg.fusion_dim + cfg.fusion_dim
        head_in = cfg.fusion_dim
    for w in cfg.head_dims:
        total += head_in * w + w
        head_in = w
    return total


# --------------------------------------------------------------------------
# Functional entry points
# --------------------------------------------------------------------------


def standardize(samples: np.ndarray) -> np.ndarray:
    """Per-lead zero mean / unit variance over the last axis."""
    x = np.asarray(samples, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(np.maximum(var, VARIANCE_FLOOR))


def _check_signal(batch: torch.Tensor) -> None:
    if batch.ndim != 3:
        raise DimensionMismatch(f"expected (B, leads, L), got {tuple(batch.shape)}")
    if batch.shape[-1] < MIN_SIGNAL_LENGTH:
        raise SignalTooShort(f"signal length {batch.shape[-1]} < {MIN_SIGNAL_LENGTH}")
    if not torch.isfinite(batch).all():
        raise NonFiniteInput("ECG batch contains non-finite values")


def ecg_forward(model: ClicModel, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """ECG embeddings ``(B, ecg_dim)``. ``mode='train'`` updates batch-norm statistics."""
    _check_signal(batch)
    model.train(mode == "train")
    return model.encoder(batch)


def fused_forward(model: ClicModel, ecg_emb: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
    """Logits ``(B, 5)`` from ECG embeddings and the mode's context input."""
    if ecg_emb.ndim != 2 or ecg_emb.shape[1] != model.cfg.ecg_dim:
        raise DimensionMismatch(f"ECG embedding shape {tuple(ecg_emb.shape)}")
    return model.logits_from_embedding(ecg_emb, context)


def predict(logits) -> Superclass:
    z = np.asarray(logits.detach().cpu() if isinstance(logits, torch.Tensor) else logits, dtype=np.float64)
    if z.shape != (len(Superclass),):
        raise DimensionMismatch(f"expected {len(Superclass)} logits, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteLogits("logits contain non-finite values")
    return Superclass(int(np.argmax(z)))  # argmax returns the first maximum


def predict_batch(logits: torch.Tensor) -> np.ndarray:
    z = logits.detach().cpu().numpy()
    if not np.all(np.isfinite(z)):
        raise NonFiniteLogits("logits contain non-finite values")
    return np.argmax(z, axis=1)


# --------------------------------------------------------------------------
# Attributes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttrSchema:
    """Layout: age/100, missing-age, male, female, BMI/50, missing-BMI,
    device one-hot, rhythm multi-hot, form multi-hot."""

    devices: tuple[str, ...] = ()
    rhythm_codes: tuple[str, ...] = ()
    form_codes: tuple[str, ...] = ()
    n_fixed: int = field(default=6, init=False)

    @classmethod
    def fit(cls, metas: Sequence[PatientMeta]) -> "AttrSchema":
        """Vocabularies from the given (training) records, sorted."""
        devices = sorted({m.device for m in metas if m.device})
        rhythm = sorted({c for m in metas for c in m.rhythm_codes})
        form = sorted({c for m in metas for c in m.form_codes})
        return cls(tuple(devices), tuple(rhythm), tuple(form))

    @property
    def dim(self) -> int:
        return self.n_fixed + len(self.devices) + len(self.rhythm_codes) + len(self.form_codes)

    def to_dict(self) -> dict:
        return {"devices": list(self.devices), "rhythm_codes": list(self.rhythm_codes),
                "form_codes": list(self.form_codes)}

    @classmethod
    def from_dict(cls, d) -> "AttrSchema":
        return cls(tuple(d["devices"]), tuple(d["rhythm_codes"]), tuple(d["form_codes"]))


def vectorize_attributes(meta: PatientMeta, schema: AttrSchema) -> np.ndarray:
    v = np.zeros(schema.dim, dtype=np.float64)
    if meta.age is None:
        v[1] = 1.0
    else:
        v[0] = meta.age / 100.0
    if meta.sex is Sex.MALE:
        v[2] = 1.0
    elif meta.sex is Sex.FEMALE:
        v[3] = 1.0
    try:
        bmi = compute_bmi(meta.weight, meta.height)
    except ValueError:
        bmi = None
    if bmi is None:
        v[5] = 1.0
    else:
        v[4] = bmi / 50.0
    off = schema.n_fixed
    if meta.device in schema.devices:
        v[off + schema.devices.index(meta.device)] = 1.0
    off += len(schema.devices)
    for code in meta.rhythm_codes:
        if code in schema.rhythm_codes:
            v[off + schema.rhythm_codes.index(code)] = 1.0
    off += len(schema.rhythm_codes)
    for code in meta.form_codes:
        if code in schema.form_codes:
            v[off + schema.form_codes.index(code)] = 1.0
    return v
