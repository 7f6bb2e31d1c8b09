"""Generate a synthetic dataset with planted state transitions.

Each trial follows a hidden two-state Markov chain sampled per time
sample.  State 0 drives a slow rhythm on one spatial pattern, state 1 a
faster rhythm on an orthogonal pattern; the trial label is the class of
the state occupying the majority of samples.  Ground truth (state chains
and per-component gate signals) is written next to the data so later
demos can line up learned quantities against what was planted.
"""

import json
from pathlib import Path

import numpy as np

from daest.dataio import load_dataset
from daest.synthgen import (
    PlantedComponent,
    SyntheticSpec,
    gen_dataset,
    load_ground_truth,
    random_patterns,
)

out = Path(__file__).resolve().parent / "demo_out"
data_dir = out / "synth"

rng = np.random.default_rng(42)
patterns = random_patterns(6, 2, rng)  # two orthonormal spatial patterns

spec = SyntheticSpec(
    n_channels=6,
    fs=32,
    transition=[[0.9995, 0.0005], [0.0005, 0.9995]],  # sticky states
    components=[
        PlantedComponent(name="slow", pattern=patterns[:, 0], band=(3.0, 6.0),
                         amplitude=1.5, dc=1.2, states=(0,)),
        PlantedComponent(name="fast", pattern=patterns[:, 1], band=(9.0, 14.0),
                         amplitude=1.5, dc=1.2, states=(1,)),
    ],
    class_of_state=(0, 1),
    n_subjects=4,
    trials_per_class=3,
    trial_len_s=8,
    noise_sigma=0.35,
    rotation_scale=0.05,   # small per-subject pattern rotation
    amplitude_jitter=0.1,
)

manifest = gen_dataset(spec, data_dir, seed=11)
print(f"wrote {manifest}")

dataset = load_dataset(manifest)
print(f"{dataset.manifest.name}: {len(dataset.subjects)} subjects, "
      f"fs={dataset.fs}, channels={dataset.n_channels}, "
      f"classes={dataset.manifest.class_names}")
for sid in dataset.subject_ids()[:2]:
    subj = dataset.subject(sid)
    labels = [t.label for t in subj.trials]
    print(f"  {sid}: {len(subj.trials)} trials, labels {labels}")

gt = load_ground_truth(data_dir)
stim, info = next(iter(gt["trials"].items()))
states = np.asarray(info["states"])
print(f"\nground truth for stimulus {stim}: class {info['class']}, "
      f"state occupancy {np.bincount(states, minlength=2) / len(states)}")
print(f"gate matrix shape (components x samples): "
      f"{np.asarray(info['gates']).shape}")
