"""Wiring from labelled records to training-ready split arrays."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .dataset import PatientMeta, Superclass, build_split
from .errors import InvalidConfig
from .model import AttrSchema, Mode, ModelConfig, vectorize_attributes
from .textenc import EmbeddingStore
from .training import SplitData, make_arrayset


def build_split_data(
    rows: Sequence[tuple[PatientMeta, Superclass]],
    signals: np.ndarray,
    mode: Mode | str,
    text_store: EmbeddingStore | None = None,
) -> SplitData:
    """Split ``rows`` by fold and attach the context input ``mode`` needs.

    ``signals[i]`` is the raw ``(leads, L)`` matrix of ``rows[i]``. Attribute
    vocabularies are fit on the training split only.
    """
    mode = Mode(mode)
    if len(rows) != len(signals):
        raise ValueError("one signal matrix per row is required")
    split = build_split((m.id, m.strat_fold) for m, _ in rows)
    index = {m.id: i for i, (m, _) in enumerate(rows)}

    schema = None
    scale = 1.0
    if mode is Mode.ECG_ATTR:
        schema = AttrSchema.fit([rows[index[i]][0] for i in split.train])
    if mode.uses_text and text_store is None:
        raise InvalidConfig(f"mode {mode.value} needs text embeddings")

    def context(ids):
        if schema is not None:
            if not ids:
                return np.zeros((0, schema.dim))
            return np.stack([vectorize_attributes(rows[index[i]][0], schema) for i in ids])
        if mode.uses_text:
            return text_store.matrix(ids).astype(np.float64)
        return None

    if mode.multimodal:
        scale = context_scale(context(split.train))

    def part(ids):
        idx = [index[i] for i in ids]
        ctx = context(ids)
        if ctx is not None:
            ctx = ctx * scale
        labels = [int(rows[i][1]) for i in idx]
        return make_arrayset(ids, signals[idx], labels, ctx)

    return SplitData(part(split.train), part(split.val), part(split.test), schema, scale)


def context_scale(train_context: np.ndarray) -> float:
    """Scalar making the training-split RMS of the context input 1."""
    rms = float(np.sqrt(np.mean(np.square(train_context)))) if train_context.size else 0.0
    return 1.0 / rms if rms > 0 else 1.0


def model_config_for(mode: Mode | str, data: SplitData, text_dim: int = 768, **overrides) -> ModelConfig:
    mode = Mode(mode)
    attr_dim = data.attr_schema.dim if data.attr_schema is not None else 0
    return ModelConfig(mode=mode, attr_dim=attr_dim, text_dim=text_dim, **overrides)


def pair_accuracy(preds: Sequence[int], labels: Sequence[int], pair: tuple[int, int]) -> float:
    """Balanced accuracy on the records whose true class is in ``pair``.

    Mean of the two classes' recalls, so chance level is 0.5 whatever the
    class ratio; predicting any other class counts as an error.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    recalls = []
    for c in pair:
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} absent from the evaluated labels")
        recalls.append(float(np.mean(preds[mask] == c)))
    return float(np.mean(recalls))
