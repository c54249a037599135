"""Small synthetic splits and reduced model widths shared by the training tests."""
import numpy as np

from clic.dataset import SYNTHETIC_STATEMENTS, SynthConfig, synthesize_dataset
from clic.pipeline import build_split_data, model_config_for
from clic.textenc import HashEmbedder, embed_records
from clic.textgen import render_dtt

SMALL_WIDTHS = dict(stem_channels=8, stage_channels=(8, 16), fusion_dim=32)


def synthetic_rows(cfg: SynthConfig):
    samples = synthesize_dataset(cfg)
    rows = [(s.meta, s.label) for s in samples]
    signals = np.stack([s.record.samples for s in samples])
    return rows, signals


def split_for(mode, rows, signals):
    store = embed_records(HashEmbedder(), [render_dtt(m, SYNTHETIC_STATEMENTS) for m, _ in rows])
    return build_split_data(rows, signals, mode, store), store


def tiny_split(mode="ecg", n_records=60, signal_length=64, seed=0):
    rows, signals = synthetic_rows(SynthConfig(n_records=n_records, signal_length=signal_length, seed=seed))
    data, store = split_for(mode, rows, signals)
    return data, store, model_config_for(mode, data, **SMALL_WIDTHS)
