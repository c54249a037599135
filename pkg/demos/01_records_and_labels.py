"""Write a 12-lead record in WFDB format 16, read it back, and label it.

Run: python demos/01_records_and_labels.py
"""
import tempfile
from pathlib import Path

import numpy as np

from clic.dataset import (
    LEADS,
    SYNTHETIC_STATEMENTS,
    derive_superclasses,
    digitize,
    read_record,
    select_label,
    write_record,
)

rng = np.random.default_rng(0)
t = np.arange(1000) / 100.0
physical = 0.8 * np.sin(2 * np.pi * 1.2 * t)[None, :] * rng.uniform(0.5, 1.5, (12, 1))

gains, baselines = [1000.0] * 12, [0] * 12
raw = digitize(physical, gains, baselines)

with tempfile.TemporaryDirectory() as d:
    write_record(d, "00001_lr", raw, 100.0, gains, baselines)
    print((Path(d) / "00001_lr.hea").read_text().splitlines()[0])
    rec = read_record(Path(d) / "00001_lr")

print(f"leads {LEADS[:3]}..., shape {rec.samples.shape}, max quantisation error "
      f"{np.abs(rec.samples - physical).max():.4f} mV (half a step is 0.0005)")

# Statement likelihoods become one diagnostic superclass, or none when ambiguous.
for scp in ({"NORM": 100.0, "SR": 0.0},
            {"IMI": 100.0, "CLBBB": 80.0},
            {"IMI": 100.0, "CLBBB": 15.0}):
    classes = derive_superclasses(scp, SYNTHETIC_STATEMENTS)
    label = select_label(classes)
    print(f"{scp} -> {label.name if label is not None else 'dropped'}")
