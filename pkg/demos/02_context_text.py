"""Turn patient metadata into a sentence and a frozen 768-d embedding.

Run: python demos/02_context_text.py
"""
import numpy as np

from clic.dataset import SYNTHETIC_STATEMENTS, PatientMeta, Sex
from clic.model import AttrSchema, vectorize_attributes
from clic.textenc import HashEmbedder
from clic.textgen import render_dtt

patients = [
    PatientMeta("a", 1, age=81, sex=Sex.MALE, height=178.0, weight=92.0, device="CS-12",
                scp_codes={"CLBBB": 100.0, "SR": 0.0}, rhythm_codes=["SR"]),
    PatientMeta("b", 1, age=29, sex=Sex.FEMALE, height=165.0, weight=55.0, device="AT-6 C 5.5",
                scp_codes={"ISC_": 100.0, "SR": 0.0}, rhythm_codes=["SR"]),
    PatientMeta("c", 1, age=None, sex=Sex.UNKNOWN, scp_codes={"NORM": 100.0}),
]

texts = [render_dtt(p, SYNTHETIC_STATEMENTS).text for p in patients]
for p, text in zip(patients, texts):
    print(f"[{p.id}] {text}")

# The hash embedder is a deterministic stand-in for a clinical language model.
emb = HashEmbedder()
vecs = np.stack([emb.embed(t).values for t in texts])
unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
print("\ncosine similarity between the three texts:")
print(np.round(unit @ unit.T, 3))

# The ECG+Attr baseline sees the same metadata as a numeric vector instead.
schema = AttrSchema.fit(patients)
print(f"\nattribute vector ({schema.dim} values) for patient a:")
print(np.round(vectorize_attributes(patients[0], schema), 3))
