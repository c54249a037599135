"""Why patient context helps: two classes whose ECGs are indistinguishable.

The synthetic data gives CD and STTC the same waveform model. CD patients are
older men and STTC patients younger women, so only the context can separate
them. A narrow network keeps this under a minute on one CPU core.

Run: python demos/03_confounded_pair.py
"""
import logging

import numpy as np

from clic.dataset import SYNTHETIC_STATEMENTS, Superclass, confound_config, synthesize_dataset
from clic.pipeline import build_split_data, model_config_for, pair_accuracy
from clic.textenc import HashEmbedder, embed_records
from clic.textgen import render_dtt
from clic.training import TrainConfig, evaluate, run_experiment

# short runs leave some classes never predicted; their 0/0 precision warnings are noise here
logging.getLogger("clic.metrics").setLevel(logging.ERROR)

samples = synthesize_dataset(confound_config(n_records=300, signal_length=128))
rows = [(s.meta, s.label) for s in samples]
signals = np.stack([s.record.samples for s in samples])
store = embed_records(HashEmbedder(), [render_dtt(m, SYNTHETIC_STATEMENTS) for m, _ in rows])
pair = (int(Superclass.CD), int(Superclass.STTC))
narrow = dict(stem_channels=16, stage_channels=(16, 32), fusion_dim=64)

for mode in ("ecg", "ecg-attr", "clic-dtt"):
    data = build_split_data(rows, signals, mode, store)
    result = run_experiment(model_config_for(mode, data, **narrow), TrainConfig(max_epochs=15, patience=4),
                            data, seeds=[0, 1], log=lambda s: None)
    accs = [pair_accuracy(evaluate(r.model, data.test).preds, data.test.y, pair) for r in result.runs]
    macro = result.aggregate["macro_f1"]
    print(f"{mode:9s} CD/STTC pair accuracy {np.mean(accs):.2f}   "
          f"macro-F1 {macro.mean:.3f} ± {macro.std:.3f}")
