"""Synthetic recordings with planted, state-gated spatiotemporal structure.

A hidden Markov chain over a few discrete states runs through every trial.
Each planted component owns a spatial pattern (one topography, or several
topographies applied at fixed sample lags to simulate a propagating
transition), a narrow carrier band, an amplitude, an optional baseline
offset, and the set of states in which it is active.  The component's gate
is the smoothed indicator of those states; its source signal is
``amplitude * (carrier + dc) * gate``, and the recording superimposes all
delayed, pattern-weighted copies plus white sensor noise.

Content (state sequence and carriers) is generated per *trial* and shared
across subjects, mimicking stimulus-locked structure: two subjects watching
the same trial receive the same underlying sources, differing by a random
rotation of the patterns, per-component amplitude jitter, and their own
noise.  Everything is reproducible bit-exactly from (spec, seed,
subject_seed).

Trials are labelled by majority state occupancy and drawn by rejection
until each class has its quota.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm
from scipy.signal import get_window

from daest import dataio
from daest.util import rng_for

__all__ = [
    "SynthError",
    "PlantedComponent",
    "SyntheticSpec",
    "TrialContent",
    "sample_state_sequence",
    "smooth_gate",
    "gen_trial_content",
    "all_trial_contents",
    "render_recording",
    "gen_subject",
    "gen_dataset",
    "load_ground_truth",
    "random_patterns",
]


class SynthError(Exception):
    """Invalid synthetic specifications or generation failures."""


@dataclass
class PlantedComponent:
    """One gated source.

    Attributes:
        name: identifier used in ground-truth files.
        pattern: (M,) topography or (M, L) topographies applied at lags
            0, step_interval, ..., (L-1) * step_interval samples.
        band: carrier passband (low, high) in Hz.
        amplitude: source scale after carrier normalization.
        dc: baseline added to the unit-variance carrier while the gate is
            open; nonzero values make state occupancy visible in the mean,
            not only in band power.
        states: states in which the component is active.
        step_interval: lag in samples between successive pattern columns.
    """

    name: str
    pattern: np.ndarray
    band: tuple[float, float]
    amplitude: float = 1.0
    dc: float = 0.0
    states: tuple[int, ...] = (0,)
    step_interval: int = 1

    def __post_init__(self) -> None:
        self.pattern = np.atleast_2d(np.asarray(self.pattern, dtype=np.float64))
        if self.pattern.ndim != 2:
            raise SynthError(f"component {self.name}: pattern must be (M,) or (M, L)")
        if self.pattern.shape[0] == 1 and self.pattern.shape[1] > 1:
            # a 1-D vector arrived as a row; treat it as one topography
            self.pattern = self.pattern.T
        self.band = (float(self.band[0]), float(self.band[1]))
        self.states = tuple(int(s) for s in self.states)
        if not self.states:
            raise SynthError(f"component {self.name}: empty state set")
        if self.amplitude <= 0:
            raise SynthError(f"component {self.name}: amplitude must be positive")
        if self.step_interval < 1:
            raise SynthError(f"component {self.name}: step_interval must be >= 1")

    @property
    def n_hops(self) -> int:
        return self.pattern.shape[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pattern": self.pattern.tolist(),
            "band": list(self.band),
            "amplitude": self.amplitude,
            "dc": self.dc,
            "states": list(self.states),
            "step_interval": self.step_interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedComponent":
        return cls(
            name=d["name"],
            pattern=np.asarray(d["pattern"], dtype=np.float64),
            band=tuple(d["band"]),
            amplitude=float(d.get("amplitude", 1.0)),
            dc=float(d.get("dc", 0.0)),
            states=tuple(d.get("states", (0,))),
            step_interval=int(d.get("step_interval", 1)),
        )


@dataclass
class SyntheticSpec:
    """Complete description of a synthetic dataset."""

    n_channels: int
    fs: int
    transition: np.ndarray  # (n_states, n_states), rows sum to 1
    components: list[PlantedComponent]
    class_of_state: tuple[int, ...]
    n_subjects: int
    trials_per_class: int
    trial_len_s: int
    noise_sigma: float = 0.5
    rotation_scale: float = 0.0
    amplitude_jitter: float = 0.0
    gate_ramp_ms: float = 40.0

    def __post_init__(self) -> None:
        self.transition = np.asarray(self.transition, dtype=np.float64)
        n = self.transition.shape[0]
        if self.transition.shape != (n, n) or n < 1:
            raise SynthError("transition matrix must be square")
        if np.any(self.transition < 0):
            raise SynthError("transition probabilities must be non-negative")
        if np.max(np.abs(self.transition.sum(axis=1) - 1.0)) > 1e-8:
            raise SynthError("transition rows must sum to 1")
        self.class_of_state = tuple(int(c) for c in self.class_of_state)
        if len(self.class_of_state) != n:
            raise SynthError("class_of_state needs one entry per state")
        if self.n_subjects < 1 or self.trials_per_class < 1 or self.trial_len_s < 1:
            raise SynthError("n_subjects, trials_per_class, trial_len_s must be >= 1")
        if self.noise_sigma < 0 or self.rotation_scale < 0 or self.amplitude_jitter < 0:
            raise SynthError("noise/perturbation scales must be non-negative")
        nyq = self.fs / 2.0
        for comp in self.components:
            if comp.pattern.shape[0] != self.n_channels:
                raise SynthError(
                    f"component {comp.name}: pattern has {comp.pattern.shape[0]} "
                    f"channels, spec says {self.n_channels}"
                )
            lo, hi = comp.band
            if not (0.0 < lo < hi < nyq):
                raise SynthError(f"component {comp.name}: band {comp.band} invalid for fs={self.fs}")
            if any(s < 0 or s >= n for s in comp.states):
                raise SynthError(f"component {comp.name}: state index out of range")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_classes(self) -> int:
        return max(self.class_of_state) + 1

    @property
    def n_trials(self) -> int:
        return self.trials_per_class * self.n_classes

    @property
    def trial_samples(self) -> int:
        return self.trial_len_s * self.fs

    def to_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "fs": self.fs,
            "transition": self.transition.tolist(),
            "components": [c.to_dict() for c in self.components],
            "class_of_state": list(self.class_of_state),
            "n_subjects": self.n_subjects,
            "trials_per_class": self.trials_per_class,
            "trial_len_s": self.trial_len_s,
            "noise_sigma": self.noise_sigma,
            "rotation_scale": self.rotation_scale,
            "amplitude_jitter": self.amplitude_jitter,
            "gate_ramp_ms": self.gate_ramp_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        try:
            return cls(
                n_channels=int(d["n_channels"]),
                fs=int(d["fs"]),
                transition=np.asarray(d["transition"], dtype=np.float64),
                components=[PlantedComponent.from_dict(c) for c in d["components"]],
                class_of_state=tuple(d["class_of_state"]),
                n_subjects=int(d["n_subjects"]),
                trials_per_class=int(d["trials_per_class"]),
                trial_len_s=int(d["trial_len_s"]),
                noise_sigma=float(d.get("noise_sigma", 0.5)),
                rotation_scale=float(d.get("rotation_scale", 0.0)),
                amplitude_jitter=float(d.get("amplitude_jitter", 0.0)),
                gate_ramp_ms=float(d.get("gate_ramp_ms", 40.0)),
            )
        except (KeyError, TypeError, IndexError) as e:
            raise SynthError(f"malformed synthetic spec: {e}") from e

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "SyntheticSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrialContent:
    """Subject-independent content of one trial."""

    stimulus_id: str
    target_class: int
    states: np.ndarray  # (T,) uint8
    gates: np.ndarray  # (n_components, T) float64, smoothed
    carriers: np.ndarray  # (n_components, T) float64, unit variance


def sample_state_sequence(
    transition: np.ndarray, length: int, rng: np.random.Generator
) -> np.ndarray:
    """Markov-chain sample of ``length`` states, uniform initial state."""
    transition = np.asarray(transition, dtype=np.float64)
    n = transition.shape[0]
    if transition.shape != (n, n):
        raise SynthError("transition matrix must be square")
    if np.any(transition < 0) or np.max(np.abs(transition.sum(axis=1) - 1.0)) > 1e-8:
        raise SynthError("transition rows must be probability vectors")
    if length < 1:
        raise SynthError("length must be >= 1")
    cum = np.cumsum(transition, axis=1)
    states = np.empty(length, dtype=np.uint8)
    draws = rng.random(length)
    states[0] = int(rng.integers(n))
    for t in range(1, length):
        states[t] = int(np.searchsorted(cum[states[t - 1]], draws[t], side="right"))
    return states


def smooth_gate(gate: np.ndarray, fs: int, ramp_ms: float) -> np.ndarray:
    """Soften binary gates with raised-cosine ramps about ``ramp_ms`` long."""
    ramp = int(round(ramp_ms * fs / 1000.0))
    if ramp < 2:
        return gate.astype(np.float64)
    win = get_window("hann", ramp, fftbins=False)
    win = win / win.sum()
    padded = np.pad(gate.astype(np.float64), (ramp, ramp), mode="edge")
    sm = np.convolve(padded, win, mode="same")[ramp:-ramp]
    return np.clip(sm, 0.0, 1.0)


def _label_of(states: np.ndarray, spec: SyntheticSpec) -> int:
    occupancy = np.bincount(states, minlength=spec.n_states)
    return spec.class_of_state[int(np.argmax(occupancy))]


def gen_trial_content(
    spec: SyntheticSpec,
    rng: np.random.Generator,
    target_class: int,
    stimulus_id: str,
    max_tries: int = 1000,
) -> TrialContent:
    """Sample states (rejecting until the label matches) and carriers."""
    t = spec.trial_samples
    states = None
    for _ in range(max_tries):
        cand = sample_state_sequence(spec.transition, t, rng)
        if _label_of(cand, spec) == target_class:
            states = cand
            break
    if states is None:
        raise SynthError(
            f"no state sequence reached class {target_class} in {max_tries} tries; "
            "the transition matrix starves that class"
        )

    n_comp = len(spec.components)
    gates = np.empty((n_comp, t))
    carriers = np.empty((n_comp, t))
    for i, comp in enumerate(spec.components):
        raw_gate = np.isin(states, comp.states).astype(np.float64)
        gates[i] = smooth_gate(raw_gate, spec.fs, spec.gate_ramp_ms)
        white = rng.standard_normal(t)
        col = dataio.bandpass(white[None, :], spec.fs, comp.band[0], comp.band[1])[0]
        sd = col.std()
        carriers[i] = col / sd if sd > 0 else col
    return TrialContent(
        stimulus_id=stimulus_id,
        target_class=target_class,
        states=states,
        gates=gates,
        carriers=carriers,
    )


def _trial_plan(spec: SyntheticSpec) -> list[tuple[str, int]]:
    """(stimulus_id, target_class) pairs, classes interleaved."""
    return [
        (f"v{i:03d}", i % spec.n_classes) for i in range(spec.n_trials)
    ]


def all_trial_contents(spec: SyntheticSpec, seed: int) -> list[TrialContent]:
    """Shared per-trial content, one independent stream per trial."""
    return [
        gen_trial_content(spec, rng_for(seed, "trial", idx), target, stim)
        for idx, (stim, target) in enumerate(_trial_plan(spec))
    ]


def _delayed(src: np.ndarray, lag: int) -> np.ndarray:
    """Shift right by ``lag`` samples, zero-filling the head."""
    if lag == 0:
        return src
    out = np.zeros_like(src)
    out[lag:] = src[:-lag]
    return out


def _subject_perturbation(
    spec: SyntheticSpec, subject_seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and per-component amplitude factors for a subject."""
    m = spec.n_channels
    rot_rng = rng_for(subject_seed, "rotation")
    if spec.rotation_scale > 0:
        b = rot_rng.standard_normal((m, m))
        skew = b - b.T
        skew /= max(np.linalg.norm(skew), 1e-12)
        rotation = expm(spec.rotation_scale * skew)
    else:
        rotation = np.eye(m)
    jit_rng = rng_for(subject_seed, "jitter")
    n_comp = len(spec.components)
    if spec.amplitude_jitter > 0:
        factors = np.exp(spec.amplitude_jitter * jit_rng.standard_normal(n_comp))
    else:
        factors = np.ones(n_comp)
    return rotation, factors


def render_recording(
    spec: SyntheticSpec,
    content: TrialContent,
    rotation: np.ndarray,
    amp_factors: np.ndarray,
    noise_rng: np.random.Generator,
) -> np.ndarray:
    """Superimpose all active components for one subject and trial."""
    t = spec.trial_samples
    x = np.zeros((spec.n_channels, t))
    for i, comp in enumerate(spec.components):
        src = comp.amplitude * amp_factors[i] * (content.carriers[i] + comp.dc) * content.gates[i]
        pattern = rotation @ comp.pattern
        for l in range(comp.n_hops):
            x += pattern[:, l : l + 1] * _delayed(src, l * comp.step_interval)[None, :]
    if spec.noise_sigma > 0:
        x += spec.noise_sigma * noise_rng.standard_normal(x.shape)
    return x


def gen_subject(
    spec: SyntheticSpec,
    seed: int,
    subject_seed: int,
    contents: Sequence[TrialContent] | None = None,
) -> list[tuple[TrialContent, np.ndarray]]:
    """All trials of one subject.

    ``seed`` fixes the shared trial content (states, carriers); pass
    ``contents`` to reuse precomputed content across subjects.
    ``subject_seed`` fixes the subject's rotation, amplitude jitter, and
    sensor noise.
    """
    if contents is None:
        contents = all_trial_contents(spec, seed)
    rotation, factors = _subject_perturbation(spec, subject_seed)
    out = []
    for idx, content in enumerate(contents):
        noise_rng = rng_for(subject_seed, "noise", idx)
        out.append((content, render_recording(spec, content, rotation, factors, noise_rng)))
    return out


def gen_dataset(
    spec: SyntheticSpec,
    out_dir: str | os.PathLike,
    seed: int,
    name: str = "synthetic",
) -> Path:
    """Render every subject, write the dataset and its ground truth.

    Layout: ``manifest.json`` plus one trial file per (subject, trial)
    under ``<subject>/``, and a ``ground_truth/`` directory holding the
    planted state sequence and smoothed gates per trial along with a JSON
    index of component definitions.

    Returns the manifest path.
    """
    out = Path(out_dir)
    contents = all_trial_contents(spec, seed)

    class_names = {c: f"class{c}" for c in range(spec.n_classes)}
    manifest = dataio.DatasetManifest(
        name=name,
        fs=spec.fs,
        n_channels=spec.n_channels,
        channel_names=[f"ch{i:02d}" for i in range(spec.n_channels)],
        class_names=class_names,
    )
    data: dict[str, dict[str, np.ndarray]] = {}
    for s_idx in range(spec.n_subjects):
        sid = f"sub{s_idx:02d}"
        entry = dataio.SubjectEntry(subject_id=sid)
        rows = gen_subject(spec, seed, s_idx, contents=contents)
        data[sid] = {}
        for content, recording in rows:
            entry.trials.append(
                dataio.TrialEntry(
                    stimulus_id=content.stimulus_id,
                    label=content.target_class,
                    file=f"{sid}/{content.stimulus_id}.f32",
                    n_samples=recording.shape[1],
                )
            )
            data[sid][content.stimulus_id] = recording
        manifest.subjects.append(entry)

    manifest_path = dataio.write_dataset(out, manifest, data)

    gt_dir = out / "ground_truth"
    gt_dir.mkdir(exist_ok=True)
    index = {
        "seed": seed,
        "spec": spec.to_dict(),
        "trials": [],
    }
    for content in contents:
        states_file = f"ground_truth/{content.stimulus_id}.states.u8"
        gates_file = f"ground_truth/{content.stimulus_id}.gates.f32"
        (out / states_file).write_bytes(content.states.astype(np.uint8).tobytes())
        (out / gates_file).write_bytes(
            np.ascontiguousarray(content.gates, dtype="<f4").tobytes()
        )
        index["trials"].append(
            {
                "stimulus_id": content.stimulus_id,
                "class": content.target_class,
                "states": states_file,
                "gates": gates_file,
            }
        )
    with open(gt_dir / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    return manifest_path


def load_ground_truth(dataset_dir: str | os.PathLike) -> dict:
    """Read the ground-truth index and gate/state arrays of a dataset."""
    root = Path(dataset_dir)
    with open(root / "ground_truth" / "index.json") as fh:
        index = json.load(fh)
    spec = SyntheticSpec.from_dict(index["spec"])
    t = spec.trial_samples
    n_comp = len(spec.components)
    trials = {}
    for row in index["trials"]:
        states = np.frombuffer((root / row["states"]).read_bytes(), dtype=np.uint8)
        gates = np.frombuffer((root / row["gates"]).read_bytes(), dtype="<f4")
        trials[row["stimulus_id"]] = {
            "class": row["class"],
            "states": states,
            "gates": gates.reshape(n_comp, t).astype(np.float64),
        }
    return {"spec": spec, "seed": index["seed"], "trials": trials}


def random_patterns(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """(M, n) orthonormal topographies via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((m, max(n, 1))))
    q = q * np.sign(np.diag(r))[None, :]  # fix sign convention
    return q[:, :n]
