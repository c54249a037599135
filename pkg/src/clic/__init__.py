"""Multimodal ECG pathology classification with language-encoded patient context."""

from .dataset import EcgRecord, PatientMeta, Superclass, SynthConfig, build_split, synthesize_dataset
from .metrics import evaluate_predictions, render_table
from .model import Mode, ModelConfig, init_model
from .pipeline import build_split_data
from .textenc import HashEmbedder, embed_records
from .textgen import render_dtt
from .training import TrainConfig, run_experiment, train_model

__version__ = "0.1.0"

__all__ = [
    "EcgRecord",
    "HashEmbedder",
    "Mode",
    "ModelConfig",
    "PatientMeta",
    "Superclass",
    "SynthConfig",
    "TrainConfig",
    "build_split",
    "build_split_data",
    "embed_records",
    "evaluate_predictions",
    "init_model",
    "render_dtt",
    "render_table",
    "run_experiment",
    "synthesize_dataset",
    "train_model",
]
