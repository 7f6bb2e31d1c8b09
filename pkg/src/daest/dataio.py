"""Dataset I/O and signal conditioning.

Recordings are exchanged through a JSON manifest plus one binary file per
trial.  Trial files hold float32 samples, channel-major (all samples of
channel 0, then channel 1, ...), little-endian.  The manifest pins the
sampling rate, channel names, label map, and per-trial byte layout, so a
dataset is fully reproducible from the directory alone.

Conditioning utilities (polyphase resampling, zero-phase Butterworth
bandpass, common-average reference) are thin, well-specified wrappers over
scipy.signal; the windowing arithmetic used by both training and
evaluation lives here as well.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.signal import butter, resample_poly, sosfiltfilt

__all__ = [
    "DatasetError",
    "TrialEntry",
    "SubjectEntry",
    "DatasetManifest",
    "Trial",
    "SubjectData",
    "Dataset",
    "EegWindow",
    "WindowingPlan",
    "resample",
    "bandpass",
    "common_average_reference",
    "window_count",
    "extract_windows",
    "save_trial_array",
    "load_trial_array",
    "write_dataset",
    "load_dataset",
    "windows_for_trial",
]

MANIFEST_VERSION = 1


class DatasetError(Exception):
    """Malformed manifests, files, or conditioning arguments."""


# ---------------------------------------------------------------------------
# signal conditioning


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase resampling of (M, T) data from fs_in to fs_out.

    Only downsampling (or identity) is supported; the polyphase filter
    anti-aliases below 0.45 * fs_out.  Output length is floor(T * fs_out /
    fs_in).
    """
    if x.ndim != 2:
        raise DatasetError(f"resample expects (M, T) data, got shape {x.shape}")
    if fs_in <= 0 or fs_out <= 0:
        raise DatasetError("sampling rates must be positive")
    if fs_out > fs_in:
        raise DatasetError(f"upsampling {fs_in} -> {fs_out} Hz is not supported")
    if fs_out == fs_in:
        return x.astype(np.float64, copy=True)
    frac = _as_fraction(fs_out, fs_in)
    up, down = frac
    y = resample_poly(x.astype(np.float64), up, down, axis=1)
    n_out = int(math.floor(x.shape[1] * fs_out / fs_in))
    return np.ascontiguousarray(y[:, :n_out])


def _as_fraction(a: float, b: float, max_den: int = 10000) -> tuple[int, int]:
    from fractions import Fraction

    f = Fraction(a).limit_denominator(max_den) / Fraction(b).limit_denominator(max_den)
    return f.numerator, f.denominator


def bandpass(x: np.ndarray, fs: float, low: float = 0.5, high: float = 47.0) -> np.ndarray:
    """Zero-phase order-4 Butterworth bandpass.

    A second-order analog prototype becomes an order-4 digital bandpass;
    running it forward and backward (``sosfiltfilt``) squares the magnitude
    response and cancels the phase, so transients stay where they are.
    """
    if x.ndim != 2:
        raise DatasetError(f"bandpass expects (M, T) data, got shape {x.shape}")
    if not (0.0 < low < high < fs / 2.0):
        raise DatasetError(f"band ({low}, {high}) invalid for fs={fs}")
    sos = butter(2, [low, high], btype="bandpass", fs=fs, output="sos")
    min_len = 3 * (sos.shape[0] * 2 + 1)
    if x.shape[1] <= min_len:
        raise DatasetError(f"signal too short for filtering: {x.shape[1]} <= {min_len}")
    return sosfiltfilt(sos, x.astype(np.float64), axis=1)


def common_average_reference(x: np.ndarray) -> np.ndarray:
    """Subtract the instantaneous mean over channels from every channel."""
    if x.ndim != 2:
        raise DatasetError(f"expected (M, T) data, got shape {x.shape}")
    return x - x.mean(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# windowing


@dataclass(frozen=True)
class WindowingPlan:
    """Sliding-window layout: length in seconds, hop = half the length.

    ``step_s`` is derived with integer division, so odd window lengths hop
    by floor(len / 2).
    """

    time_len_s: int

    def __post_init__(self) -> None:
        if self.time_len_s < 1:
            raise DatasetError("window length must be >= 1 s")

    @property
    def step_s(self) -> int:
        return max(1, self.time_len_s // 2)

    def window_samples(self, fs: int) -> int:
        return self.time_len_s * fs

    def step_samples(self, fs: int) -> int:
        return self.step_s * fs


def window_count(n_samples: int, window: int, step: int) -> int:
    """Number of full windows of ``window`` samples at hop ``step``."""
    if window < 1 or step < 1:
        raise DatasetError("window and step must be >= 1")
    if n_samples < window:
        return 0
    return (n_samples - window) // step + 1


def extract_windows(data: np.ndarray, window: int, step: int) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (segment_index, view) pairs of full windows over (M, T) data."""
    n = window_count(data.shape[1], window, step)
    for i in range(n):
        yield i, data[:, i * step : i * step + window]


# ---------------------------------------------------------------------------
# manifest types


@dataclass
class TrialEntry:
    stimulus_id: str
    label: int
    file: str
    n_samples: int


@dataclass
class SubjectEntry:
    subject_id: str
    trials: list[TrialEntry] = field(default_factory=list)


@dataclass
class DatasetManifest:
    name: str
    fs: int
    n_channels: int
    channel_names: list[str]
    class_names: dict[int, str]
    subjects: list[SubjectEntry] = field(default_factory=list)
    dvers: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "dvers": self.dvers,
            "name": self.name,
            "fs": self.fs,
            "n_channels": self.n_channels,
            "channel_names": list(self.channel_names),
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "subjects": [
                {
                    "subject_id": s.subject_id,
                    "trials": [
                        {
                            "stimulus_id": t.stimulus_id,
                            "label": t.label,
                            "file": t.file,
                            "n_samples": t.n_samples,
                        }
                        for t in s.trials
                    ],
                }
                for s in self.subjects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            if d["dvers"] != MANIFEST_VERSION:
                raise DatasetError(f"unsupported manifest version {d['dvers']}")
            manifest = cls(
                name=d["name"],
                fs=int(d["fs"]),
                n_channels=int(d["n_channels"]),
                channel_names=list(d["channel_names"]),
                class_names={int(k): v for k, v in d["class_names"].items()},
                dvers=int(d["dvers"]),
            )
            for s in d["subjects"]:
                subj = SubjectEntry(subject_id=s["subject_id"])
                for t in s["trials"]:
                    subj.trials.append(
                        TrialEntry(
                            stimulus_id=t["stimulus_id"],
                            label=int(t["label"]),
                            file=t["file"],
                            n_samples=int(t["n_samples"]),
                        )
                    )
                manifest.subjects.append(subj)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed manifest: {e}") from e
        manifest.validate()
        return manifest

    def validate(self) -> None:
        if len(self.channel_names) != self.n_channels:
            raise DatasetError(
                f"{len(self.channel_names)} channel names for {self.n_channels} channels"
            )
        # a stimulus carries one label for everyone who watched it
        stim_label: dict[str, int] = {}
        for s in self.subjects:
            for t in s.trials:
                if t.label not in self.class_names:
                    raise DatasetError(f"label {t.label} missing from class_names")
                prev = stim_label.setdefault(t.stimulus_id, t.label)
                if prev != t.label:
                    raise DatasetError(
                        f"stimulus {t.stimulus_id!r} labelled {t.label} and {prev}"
                    )


# ---------------------------------------------------------------------------
# in-memory dataset


@dataclass
class Trial:
    stimulus_id: str
    label: int
    data: np.ndarray  # (M, T) float64


@dataclass
class SubjectData:
    subject_id: str
    trials: list[Trial]


@dataclass
class Dataset:
    manifest: DatasetManifest
    subjects: list[SubjectData]

    @property
    def fs(self) -> int:
        return self.manifest.fs

    @property
    def n_channels(self) -> int:
        return self.manifest.n_channels

    @property
    def n_classes(self) -> int:
        return len(self.manifest.class_names)

    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def subject(self, subject_id: str) -> SubjectData:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise DatasetError(f"unknown subject {subject_id!r}")


@dataclass
class EegWindow:
    """One training window cut from a trial."""

    data: np.ndarray  # (M, T)
    fs: int
    subject_id: str
    stimulus_id: str
    segment_index: int
    label: int


# ---------------------------------------------------------------------------
# binary trial files


def save_trial_array(path: str | os.PathLike, data: np.ndarray) -> int:
    """Write (M, T) data as little-endian float32, channel-major."""
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    if arr.ndim != 2:
        raise DatasetError(f"trial data must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    return arr.shape[1]


def load_trial_array(path: str | os.PathLike, n_channels: int, n_samples: int) -> np.ndarray:
    expected = n_channels * n_samples * 4
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != expected:
        raise DatasetError(
            f"{path}: {len(raw)} bytes, expected {expected} "
            f"({n_channels} channels x {n_samples} samples of float32)"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(n_channels, n_samples)
    return arr.astype(np.float64)


def write_dataset(
    out_dir: str | os.PathLike,
    manifest: DatasetManifest,
    data: dict[str, dict[str, np.ndarray]],
) -> Path:
    """Write trial files named in the manifest, then the manifest itself.

    ``data`` maps subject_id -> stimulus_id -> (M, T) array.  Trial entry
    ``n_samples`` fields are filled in from the arrays.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for subj in manifest.subjects:
        for trial in subj.trials:
            arr = data[subj.subject_id][trial.stimulus_id]
            if arr.shape[0] != manifest.n_channels:
                raise DatasetError(
                    f"trial {trial.stimulus_id} of {subj.subject_id} has "
                    f"{arr.shape[0]} channels, manifest says {manifest.n_channels}"
                )
            path = out / trial.file
            path.parent.mkdir(parents=True, exist_ok=True)
            trial.n_samples = save_trial_array(path, arr)
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    return manifest_path


def load_dataset(manifest_path: str | os.PathLike) -> Dataset:
    """Load a manifest and every trial it names into memory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        with open(manifest_path) as fh:
            manifest = DatasetManifest.from_dict(json.load(fh))
    except FileNotFoundError as e:
        raise DatasetError(f"manifest not found: {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest is not valid JSON: {e}") from e
    root = manifest_path.parent
    subjects = []
    for s in manifest.subjects:
        trials = [
            Trial(
                stimulus_id=t.stimulus_id,
                label=t.label,
                data=load_trial_array(root / t.file, manifest.n_channels, t.n_samples),
            )
            for t in s.trials
        ]
        subjects.append(SubjectData(subject_id=s.subject_id, trials=trials))
    return Dataset(manifest=manifest, subjects=subjects)


def windows_for_trial(
    trial: Trial, subject_id: str, fs: int, plan: WindowingPlan
) -> list[EegWindow]:
    """All full windows of a trial under a plan, in segment order."""
    win = plan.window_samples(fs)
    step = plan.step_samples(fs)
    return [
        EegWindow(
            data=seg,
            fs=fs,
            subject_id=subject_id,
            stimulus_id=trial.stimulus_id,
            segment_index=i,
            label=trial.label,
        )
        for i, seg in extract_windows(trial.data, win, step)
    ]
