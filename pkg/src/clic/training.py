"""Loss, Adam, early stopping, the training loop and the multi-seed runner."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch

from .dataset import Superclass
from .errors import CheckpointMismatch, EmptySplit, InvalidConfig, NonFiniteInput, ShapeMismatch
from .metrics import AggregateReport, MetricsReport, aggregate_runs, evaluate_predictions
from .model import (
    VARIANCE_FLOOR,
    AttrSchema,
    ClicModel,
    ModelConfig,
    init_model,
    predict_batch,
    standardize,
)

logger = logging.getLogger(__name__)

N_CLASSES = len(Superclass)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 1000
    patience: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def validate(self) -> None:
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise InvalidConfig("need 0 < patience < max_epochs")
        if self.lr <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("invalid Adam hyperparameters")
        if self.weight_decay != 0:
            raise InvalidConfig("weight decay is not supported")
        if not self.seeds:
            raise InvalidConfig("at least one seed is required")


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


class _StableBce(torch.autograd.Function):
    # The stable form's max/abs kinks at z=0 give autograd a wrong subgradient,
    # so the backward pass uses the analytic derivative (sigmoid(z) - y) / N.

    @staticmethod
    def forward(ctx, z, y):
        ctx.save_for_backward(z, y)
        return (z.clamp(min=0) - z * y + torch.log1p(torch.exp(-z.abs()))).mean()

    @staticmethod
    def backward(ctx, grad):
        z, y = ctx.saved_tensors
        return grad * (torch.sigmoid(z) - y) / z.numel(), None


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean elementwise binary cross-entropy on raw logits.

    Uses ``max(z, 0) - z*y + log(1 + exp(-|z|))``, finite for any finite ``z``.
    """
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if not torch.isfinite(logits).all():
        raise NonFiniteInput("non-finite logits")
    return _StableBce.apply(logits, targets.to(logits.dtype))


def one_hot(labels, n_classes: int = N_CLASSES, dtype=torch.float32) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return torch.nn.functional.one_hot(labels, n_classes).to(dtype)


# --------------------------------------------------------------------------
# Data containers
# --------------------------------------------------------------------------


@dataclass
class ArraySet:
    """One split as arrays: standardized signals, optional context, labels."""

    ids: list[str]
    x: np.ndarray  # (N, leads, L)
    y: np.ndarray  # (N,) class indices
    context: np.ndarray | None = None  # (N, d)

    def __post_init__(self):
        n = len(self.ids)
        if self.x.shape[0] != n or self.y.shape[0] != n or (self.context is not None and self.context.shape[0] != n):
            raise ShapeMismatch("ids, signals, labels and context disagree in length")

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx, dtype=torch.float32) -> "Batch":
        idx = np.asarray(idx)
        ctx = None
        if self.context is not None:
            ctx = torch.as_tensor(self.context[idx], dtype=dtype)
        return Batch(torch.as_tensor(self.x[idx], dtype=dtype), ctx, one_hot(self.y[idx], dtype=dtype))

    def batches(self, batch_size: int, order=None, dtype=torch.float32) -> Iterator["Batch"]:
        """Batches in ``order`` (default: stored order); the last partial batch is kept."""
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size], dtype)


@dataclass
class Batch:
    x: torch.Tensor
    context: torch.Tensor | None
    targets: torch.Tensor

    def __len__(self):
        return self.x.shape[0]


def make_arrayset(ids, signals, labels, context=None) -> ArraySet:
    """Build an :class:`ArraySet`, applying per-record, per-lead standardization."""
    x = standardize(signals).astype(np.float32)
    ctx = None if context is None else np.asarray(context, dtype=np.float32)
    return ArraySet(list(ids), x, np.asarray(labels, dtype=np.int64), ctx)


# --------------------------------------------------------------------------
# Gradients and Adam
# --------------------------------------------------------------------------


def loss_and_grad(model: ClicModel, batch: Batch) -> tuple[float, dict[str, torch.Tensor]]:
    """Training-mode loss and its gradient for every trainable parameter."""
    if len(batch) == 0:
        raise EmptySplit("empty batch")
    model.train()
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    logits = model(batch.x, batch.context)
    loss = bce_with_logits(logits, batch.targets)
    grads = torch.autograd.grad(loss, params)
    return float(loss.detach()), dict(zip(names, grads))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], cfg: TrainConfig
) -> tuple[AdamState, dict[str, torch.Tensor]]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if set(params) != set(grads):
        raise ShapeMismatch("parameters and gradients have different names")
    t = state.step + 1
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {tuple(g.shape)} vs parameter {tuple(p.shape)}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        new_m[name], new_v[name] = m, v
        new_p[name] = p - cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps)
    return AdamState(t, new_m, new_v), new_p


# --------------------------------------------------------------------------
# Early stopping
# --------------------------------------------------------------------------


@dataclass
class EarlyStopState:
    best_val_loss: float = math.inf
    best_epoch: int = 0
    best_checkpoint: object = None
    epochs_since_improvement: int = 0


def early_stop_update(state: EarlyStopState, val_loss: float, epoch: int, patience: int, checkpoint=None):
    """Return ``(new_state, "continue" | "stop")``.

    Only a strictly lower loss counts as improvement. ``checkpoint`` may be a
    zero-argument callable, evaluated only on improvement.
    """
    if not math.isfinite(val_loss):
        raise NonFiniteInput(f"validation loss {val_loss} at epoch {epoch}")
    if val_loss < state.best_val_loss:
        snap = checkpoint() if callable(checkpoint) else checkpoint
        new = EarlyStopState(val_loss, epoch, snap, 0)
    else:
        new = EarlyStopState(state.best_val_loss, state.best_epoch, state.best_checkpoint,
                             state.epochs_since_improvement + 1)
    return new, ("stop" if new.epochs_since_improvement >= patience else "continue")


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------


@dataclass
class EvalResult:
    loss: float
    logits: np.ndarray
    preds: np.ndarray
    labels: np.ndarray

    def report(self) -> MetricsReport:
        return evaluate_predictions(self.preds, self.labels)


@torch.no_grad()
def evaluate(model: ClicModel, data: ArraySet, batch_size: int = 16) -> EvalResult:
    """Eval-mode pass in stored order; no parameter or statistics updates."""
    if len(data) == 0:
        raise EmptySplit("nothing to evaluate")
    model.eval()
    dtype = next(model.parameters()).dtype
    logits = []
    for b in data.batches(batch_size, dtype=dtype):
        logits.append(model(b.x, b.context))
    z = torch.cat(logits)
    loss = float(bce_with_logits(z, one_hot(data.y, dtype=dtype)))
    return EvalResult(loss, z.numpy(), predict_batch(z), data.y.copy())


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    counter: int


@dataclass
class TrainedRun:
    seed: int
    model: ClicModel  # best checkpoint
    history: list[EpochRecord]
    best_epoch: int
    stopped_epoch: int

    def loss_curve_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r}" for r in self.history]
        return "\n".join(lines) + "\n"


def _snapshot(model: ClicModel) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train_model(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train: ArraySet,
    val: ArraySet,
    seed: int,
    on_epoch: Callable[[int, ClicModel, EpochRecord], bool] | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainedRun:
    """Train one model and restore its best-validation-loss weights.

    Training batches follow a fresh seeded permutation every epoch; the
    validation set is read in stored order. ``on_epoch`` may return True to
    stop early (the best checkpoint is still restored).
    """
    train_cfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise EmptySplit("train and validation splits must be non-empty")
    log = log or logger.info
    model = init_model(model_cfg, seed)
    shuffle_rng = np.random.default_rng([int(seed), 0x5EED])
    opt = AdamState()
    es = EarlyStopState()
    history = []
    epoch = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        total, count = 0.0, 0
        for batch in train.batches(train_cfg.batch_size, order=shuffle_rng.permutation(len(train))):
            loss, grads = loss_and_grad(model, batch)
            params = dict(model.named_parameters())
            opt, new = adam_step(opt, {k: p.detach() for k, p in params.items()}, grads, train_cfg)
            with torch.no_grad():
                for k, p in params.items():
                    p.copy_(new[k])
            total += loss * len(batch)
            count += len(batch)
        val_loss = evaluate(model, val, train_cfg.batch_size).loss
        es, decision = early_stop_update(es, val_loss, epoch, train_cfg.patience, lambda: _snapshot(model))
        rec = EpochRecord(epoch, total / count, val_loss, es.epochs_since_improvement)
        history.append(rec)
        log(f"seed={seed} epoch={epoch} train_loss={rec.train_loss:.6f} "
            f"val_loss={val_loss:.6f} no_improve={es.epochs_since_improvement}")
        if decision == "stop" or (on_epoch is not None and on_epoch(epoch, model, rec)):
            break
    model.load_state_dict(es.best_checkpoint)
    model.eval()
    return TrainedRun(seed, model, history, es.best_epoch, epoch)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(
    path,
    model: ClicModel,
    attr_schema: AttrSchema | None = None,
    extra: Mapping | None = None,
    context_scale: float = 1.0,
):
    payload = {
        "format": "clic-checkpoint-1",
        "model_config": model.cfg.to_dict(),
        "attr_schema": attr_schema.to_dict() if attr_schema is not None else None,
        "preprocessing": {
            "standardize": "per-record-per-lead",
            "variance_floor": VARIANCE_FLOOR,
            "context_scale": float(context_scale),
        },
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(model, payload)``; raises CheckpointMismatch on config disagreement."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != "clic-checkpoint-1":
        raise CheckpointMismatch(f"{path}: not a checkpoint")
    cfg = ModelConfig.from_dict(payload["model_config"])
    if expected is not None and expected.to_dict() | {"seed": 0} != cfg.to_dict() | {"seed": 0}:
        raise CheckpointMismatch(f"{path}: config {cfg} does not match expected {expected}")
    if payload["preprocessing"].get("variance_floor") != VARIANCE_FLOOR:
        raise CheckpointMismatch(f"{path}: preprocessing constants differ")
    model = ClicModel(cfg)
    sd = payload["state_dict"]
    dtype = next(iter(sd.values())).dtype
    model = model.to(dtype)
    try:
        model.load_state_dict(sd)
    except RuntimeError as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    model.eval()
    return model, payload


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------


@dataclass
class SplitData:
    train: ArraySet
    val: ArraySet
    test: ArraySet
    attr_schema: AttrSchema | None = None
    context_scale: float = 1.0


@dataclass
class ExperimentResult:
    mode: str
    runs: list[TrainedRun]
    reports: dict[int, MetricsReport]
    aggregate: AggregateReport


def write_run(run_dir: Path, run: TrainedRun, report: MetricsReport, mode: str, data: SplitData) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run_dir / "checkpoint.pt", run.model, data.attr_schema,
                    {"seed": run.seed, "best_epoch": run.best_epoch, "stopped_epoch": run.stopped_epoch},
                    data.context_scale)
    (run_dir / "loss_curve.csv").write_text(run.loss_curve_csv())
    (run_dir / "metrics.json").write_text(json.dumps(report.to_json(mode, run.seed), indent=2, sort_keys=True) + "\n")


def run_experiment(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: SplitData,
    seeds: Sequence[int] | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    log: Callable[[str], None] | None = None,
) -> ExperimentResult:
    """Train one run per seed, evaluate each on test and aggregate.

    With ``out_dir`` set, run ``s`` is written to ``out_dir/<mode>/<s>/``.
    """
    seeds = list(train_cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise InvalidConfig("at least one seed is required")
    mode = model_cfg.mode.value

    def one(seed):
        run = train_model(model_cfg, train_cfg, data.train, data.val, seed, log=log)
        report = evaluate(run.model, data.test, train_cfg.batch_size).report()
        if out_dir is not None:
            write_run(Path(out_dir) / mode / str(seed), run, report, mode, data)
        return run, report

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    runs = [r for r, _ in results]
    reports = {s: rep for s, (_, rep) in zip(seeds, results)}
    agg = aggregate_runs(reports[s] for s in sorted(reports))
    if out_dir is not None:
        p = Path(out_dir) / mode / "aggregate.json"
        p.write_text(json.dumps(agg.to_json(), indent=2, sort_keys=True) + "\n")
    return ExperimentResult(mode, runs, reports, agg)


def model_state_checksum(model: ClicModel) -> str:
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
