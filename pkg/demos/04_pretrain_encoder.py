"""Contrastive pretraining on the synthetic dataset from demo 03.

Windows from two subjects watching the same stimulus at the same offset
form positive pairs; everything else in the batch is a negative.  The
encoder output is pooled and projected to an embedding, and NT-Xent pulls
the positives together.  Run demo 03 first (or this script will).
"""

import runpy
from pathlib import Path

import numpy as np

from daest.bundle import ModelBundle, save_bundle
from daest.dataio import load_dataset
from daest.encoder import EncoderGeometry
from daest.pretrain import PretrainConfig, embed_windows, pretrain
from daest.dataio import EegWindow

here = Path(__file__).resolve().parent
data_dir = here / "demo_out" / "synth"
if not (data_dir / "manifest.json").exists():
    runpy.run_path(str(here / "03_make_synthetic_data.py"))

dataset = load_dataset(data_dir / "manifest.json")

geometry = EncoderGeometry(
    n_channels=dataset.n_channels,
    n_samples=64,            # 2 s windows at fs=32
    fs=dataset.fs,
    n_temporal=2,
    temporal_len=7,
    n_spatial_per_temporal=2,
    transition_steps=2,
    dilation_schedule=((1, 2), (2, 2)),
    attention_len=9,
    activation="sigmoid",
)

config = PretrainConfig(
    lr=2e-3, epochs=15, patience=10, temperature=0.1,
    pool_window=8, pool_stride=8, seed=0,
)
enc, proj, log = pretrain(dataset, geometry, config)

print("epoch  train_loss  val_loss")
for row in log.rows:
    print(f"{row['epoch']:5d}  {row['train_loss']:10.4f}  {row['val_loss']:8.4f}")
print("notes:", "; ".join(log.notes))

# same-stimulus windows from two subjects should embed closer than
# windows of different stimuli
win = []
for sid in dataset.subject_ids()[:2]:
    for trial in dataset.subject(sid).trials[:2]:
        win.append(EegWindow(trial.data[:, :64], dataset.fs, sid,
                             trial.stimulus_id, 0, trial.label))
emb = embed_windows(win, enc, proj, geometry).values
emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
sim = emb @ emb.T
print(f"\ncosine, same stimulus across subjects: {sim[0, 2]:.3f} {sim[1, 3]:.3f}")
print(f"cosine, different stimuli:              {sim[0, 1]:.3f} {sim[2, 3]:.3f}")

bundle = ModelBundle(geometry=geometry, encoder=enc, projector=proj,
                     log_digest=log.digest())
out = here / "demo_out" / "encoder.daest"
save_bundle(bundle, out)
print(f"\nsaved pretrained encoder to {out}")
