"""Command-line orchestration.

Subcommands:

* ``synth``      render a synthetic dataset from a generator spec JSON
* ``convert``    map a directory tree of .npy trials to the binary format
* ``pretrain``   contrastive pretraining, writes a model bundle + loss log
* ``train-eval`` cross-validated classifier training and evaluation
* ``sweep``      repeat train-eval over a geometry axis, emit CSV
* ``interpret``  attribution/spectra/topography reports from a bundle
* ``inspect``    print bundle metadata

Run configuration lives in a JSON file validated against a schema;
``--set key.path=value`` flags override individual entries.  Exit codes:
0 success, 2 configuration error, 3 numeric abort during training.
``DAEST_THREADS`` caps the ``--parallel-folds`` worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from daest import dataio, synthgen
from daest.bundle import (
    BundleError,
    ModelBundle,
    bundle_summary,
    load_bundle,
    save_bundle,
)
from daest.classify import (
    ClassifyError,
    LdsParams,
    TrainConfig,
    majority_vote,
    predict,
    prepare_subject_features,
    stack_features,
    train_classifier,
)
from daest.dataio import Dataset, DatasetError, load_dataset
from daest.encoder import EncoderGeometry
from daest.interpret import (
    InterpretError,
    compute_attributions,
    contribution_correlation,
    estimate_stream_covariances,
    filter_frequency_response,
    integrated_gradients,
    top_dimension_report,
    window_attention,
)
from daest.ndcore import DimensionError
from daest.pretrain import NumericAbort, PretrainConfig, PretrainError, pretrain
from daest.synthgen import SynthError, SyntheticSpec
from daest.util import config_hash, rng_for

__all__ = [
    "CliError",
    "RunConfig",
    "EvalReport",
    "load_run_config",
    "subject_folds",
    "shuffle_stimulus_labels",
    "shuffle_trial_labels",
    "run_train_eval",
    "run_sweep",
    "run_interpret",
    "main",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

SWEEP_AXES = {
    "transition-steps": "transition_steps",
    "attention-len": "attention_len",
    "activation": "activation",
    # short axis aliases accepted on the command line
    "L2": "transition_steps",
    "L3": "attention_len",
}


class CliError(Exception):
    """Configuration or usage problems, reported with exit code 2."""


# ---------------------------------------------------------------------------
# configuration

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "geometry"],
    "properties": {
        "dataset": {"type": "string"},
        "out_dir": {"type": ["string", "null"]},
        "seed": {"type": "integer"},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_samples"],
            "properties": {
                "n_channels": {"type": "integer", "minimum": 1},
                "n_samples": {"type": "integer", "minimum": 1},
                "fs": {"type": "integer", "minimum": 1},
                "n_temporal": {"type": "integer", "minimum": 1},
                "temporal_len": {"type": "integer", "minimum": 1},
                "n_spatial_per_temporal": {"type": "integer", "minimum": 1},
                "transition_steps": {"type": "integer", "minimum": 1},
                "dilation_schedule": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": {"type": "integer", "minimum": 1},
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
                "attention_len": {"type": "integer", "minimum": 1},
                "activation": {
                    "enum": ["sigmoid", "softmax", "relu", "none", "global"]
                },
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number"},
                "weight_decay": {"type": "number"},
                "epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 0},
                "temperature": {"type": "number"},
                "val_fraction": {"type": "number"},
                "pairs_per_epoch": {"type": ["integer", "null"]},
                "pool_window": {"type": "integer", "minimum": 1},
                "pool_stride": {"type": "integer", "minimum": 1},
            },
        },
        "classifier": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number"},
                "weight_decay_grid": {"type": "array", "items": {"type": "number"}},
                "epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "hidden": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 1},
                    "minItems": 1,
                },
                "cv_folds": {"type": "integer", "minimum": 2},
            },
        },
        "lds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"q": {"type": "number"}, "r": {"type": "number"}},
        },
        "cv": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["auto", "loso", "kfold"]},
                "folds": {"type": "integer", "minimum": 2},
            },
        },
        "label_map": {
            "type": ["object", "null"],
            "additionalProperties": {"type": "integer"},
        },
        "shuffle_labels": {"type": ["integer", "null"]},
        "shuffle_mode": {"enum": ["stimulus", "trial"]},
        "encoder_bundle": {"type": ["string", "null"]},
        "parallel_folds": {"type": "integer", "minimum": 1},
    },
}


@dataclass
class RunConfig:
    """Everything a train-eval run depends on, hashable for provenance."""

    dataset: str
    geometry: dict
    out_dir: str | None = None
    seed: int = 0
    pretrain: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    lds: dict = field(default_factory=dict)
    cv: dict = field(default_factory=lambda: {"mode": "auto"})
    label_map: dict[int, int] | None = None
    shuffle_labels: int | None = None
    shuffle_mode: str = "stimulus"
    encoder_bundle: str | None = None
    parallel_folds: int = 1

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "geometry": self.geometry,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "pretrain": self.pretrain,
            "classifier": self.classifier,
            "lds": self.lds,
            "cv": self.cv,
            "label_map": None
            if self.label_map is None
            else {str(k): v for k, v in self.label_map.items()},
            "shuffle_labels": self.shuffle_labels,
            "shuffle_mode": self.shuffle_mode,
            "encoder_bundle": self.encoder_bundle,
            "parallel_folds": self.parallel_folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        validate_config(d)
        d = dict(d)
        label_map = d.get("label_map")
        if label_map is not None:
            label_map = {int(k): int(v) for k, v in label_map.items()}
        return cls(
            dataset=d["dataset"],
            geometry=dict(d["geometry"]),
            out_dir=d.get("out_dir"),
            seed=int(d.get("seed", 0)),
            pretrain=dict(d.get("pretrain", {})),
            classifier=dict(d.get("classifier", {})),
            lds=dict(d.get("lds", {})),
            cv=dict(d.get("cv", {"mode": "auto"})),
            label_map=label_map,
            shuffle_labels=d.get("shuffle_labels"),
            shuffle_mode=d.get("shuffle_mode", "stimulus"),
            encoder_bundle=d.get("encoder_bundle"),
            parallel_folds=int(d.get("parallel_folds", 1)),
        )

    @property
    def hash(self) -> str:
        # provenance covers the scientific settings, not output plumbing
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("parallel_folds")
        return config_hash(d)


def validate_config(raw: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(raw, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise CliError(f"config invalid at {path}: {e.message}") from e


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise CliError(f"override {text!r} is not of the form key.path=value")
    key, _, value = text.partition("=")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value  # bare strings are taken literally
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = _parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return raw


def load_run_config(path: str | os.PathLike, overrides: list[str] | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as e:
        raise CliError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"config {path} is not valid JSON: {e}") from e
    if overrides:
        raw = apply_overrides(raw, overrides)
    return RunConfig.from_dict(raw)


def resolve_geometry(config: RunConfig, dataset: Dataset) -> EncoderGeometry:
    """Fill channel count and sampling rate from the dataset when omitted."""
    g = dict(config.geometry)
    g.setdefault("n_channels", dataset.n_channels)
    g.setdefault("fs", dataset.fs)
    if "dilation_schedule" in g:
        g["dilation_schedule"] = tuple(tuple(p) for p in g["dilation_schedule"])
    try:
        geometry = EncoderGeometry(**g)
    except (DimensionError, TypeError) as e:
        raise CliError(f"invalid geometry: {e}") from e
    if geometry.n_channels != dataset.n_channels:
        raise CliError(
            f"geometry says {geometry.n_channels} channels, dataset has {dataset.n_channels}"
        )
    if geometry.fs != dataset.fs:
        raise CliError(f"geometry says fs={geometry.fs}, dataset has fs={dataset.fs}")
    return geometry


# ---------------------------------------------------------------------------
# label handling


def remap_labels(dataset: Dataset, label_map: dict[int, int]) -> Dataset:
    """New in-memory dataset with trial labels sent through the map."""
    seen = {t.label for s in dataset.subjects for t in s.trials}
    missing = seen - set(label_map)
    if missing:
        raise CliError(f"label_map misses dataset labels {sorted(missing)}")
    new_names = {}
    for old, new in label_map.items():
        name = dataset.manifest.class_names.get(old, f"class{old}")
        new_names.setdefault(new, name)
    manifest = dataio.DatasetManifest(
        name=dataset.manifest.name,
        fs=dataset.fs,
        n_channels=dataset.n_channels,
        channel_names=list(dataset.manifest.channel_names),
        class_names=new_names,
    )
    subjects = [
        dataio.SubjectData(
            subject_id=s.subject_id,
            trials=[
                dataio.Trial(t.stimulus_id, label_map[t.label], t.data) for t in s.trials
            ],
        )
        for s in dataset.subjects
    ]
    return Dataset(manifest=manifest, subjects=subjects)


def shuffle_trial_labels(dataset: Dataset, seed: int) -> Dataset:
    """Permute each subject's trial labels independently.

    Label marginals per subject are preserved, but a stimulus no longer
    carries one consistent label, so no content-label association remains
    to learn.  Preferred control when few stimuli repeat across subjects:
    a stimulus-level permutation of a handful of stimuli stays accidentally
    correlated with the true classes.
    """
    subjects = []
    for s in dataset.subjects:
        perm = rng_for(seed, "label-shuffle-trial", s.subject_id).permutation(
            len(s.trials)
        )
        labels = [s.trials[i].label for i in perm]
        subjects.append(
            dataio.SubjectData(
                subject_id=s.subject_id,
                trials=[
                    dataio.Trial(t.stimulus_id, labels[i], t.data)
                    for i, t in enumerate(s.trials)
                ],
            )
        )
    return Dataset(manifest=dataset.manifest, subjects=subjects)


def shuffle_stimulus_labels(dataset: Dataset, seed: int) -> Dataset:
    """Permute labels across stimuli, keeping one label per stimulus.

    This severs the link between stimulus content and label while leaving
    the label marginals untouched; a sound pipeline should fall to chance.
    """
    stim_label: dict[str, int] = {}
    for s in dataset.subjects:
        for t in s.trials:
            stim_label.setdefault(t.stimulus_id, t.label)
    stims = sorted(stim_label)
    labels = [stim_label[s] for s in stims]
    rng = rng_for(seed, "label-shuffle")
    perm = rng.permutation(len(labels))
    shuffled = {stims[i]: labels[perm[i]] for i in range(len(stims))}
    subjects = [
        dataio.SubjectData(
            subject_id=s.subject_id,
            trials=[
                dataio.Trial(t.stimulus_id, shuffled[t.stimulus_id], t.data)
                for t in s.trials
            ],
        )
        for s in dataset.subjects
    ]
    return Dataset(manifest=dataset.manifest, subjects=subjects)


# ---------------------------------------------------------------------------
# cross-validation harness


def subject_folds(subject_ids: list[str], cv: dict, seed: int) -> list[list[str]]:
    """Test-subject groups per fold; every subject appears exactly once.

    "auto" resolves to leave-one-subject-out for 20 subjects or fewer and
    10-fold subject-wise otherwise.
    """
    ids = sorted(subject_ids)
    if len(ids) < 2:
        raise CliError(f"cross-validation needs >= 2 subjects, got {len(ids)}")
    mode = cv.get("mode", "auto")
    if mode == "auto":
        mode = "loso" if len(ids) <= 20 else "kfold"
    if mode == "loso":
        return [[s] for s in ids]
    n_folds = min(int(cv.get("folds", 10)), len(ids))
    order = list(ids)
    rng_for(seed, "cv-folds").shuffle(order)
    folds = [sorted(order[f::n_folds]) for f in range(n_folds)]
    return folds


@dataclass
class EvalReport:
    """Cross-validated evaluation results."""

    config_hash: str
    n_classes: int
    class_names: dict[int, str]
    folds: list[dict]
    accuracy: dict
    confusion: np.ndarray  # (C, C) row-normalized
    empty_rows: list[int]
    timing: dict

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "n_classes": self.n_classes,
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "folds": self.folds,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "empty_rows": self.empty_rows,
            "timing": self.timing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            config_hash=d["config_hash"],
            n_classes=int(d["n_classes"]),
            class_names={int(k): v for k, v in d["class_names"].items()},
            folds=d["folds"],
            accuracy=d["accuracy"],
            confusion=np.array(d["confusion"], dtype=np.float64),
            empty_rows=list(d["empty_rows"]),
            timing=d["timing"],
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _fold_seed(seed: int, fold: int) -> int:
    return int(rng_for(seed, "fold", fold).integers(2**31 - 1))


def _pretrain_config(config: RunConfig, seed: int) -> PretrainConfig:
    kw = dict(config.pretrain)
    kw["seed"] = seed
    if "pairs_per_epoch" in kw and kw["pairs_per_epoch"] is not None:
        kw["pairs_per_epoch"] = int(kw["pairs_per_epoch"])
    return PretrainConfig(**kw)


def _train_config(config: RunConfig, seed: int) -> TrainConfig:
    kw = dict(config.classifier)
    if "weight_decay_grid" in kw:
        kw["weight_decay_grid"] = tuple(kw["weight_decay_grid"])
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    kw["seed"] = seed
    return TrainConfig(**kw)


def _lds_params(config: RunConfig) -> LdsParams:
    return LdsParams(**config.lds)


def _run_fold(
    dataset: Dataset,
    geometry: EncoderGeometry,
    config: RunConfig,
    fold: int,
    test_subjects: list[str],
    shared_encoder: ModelBundle | None,
) -> dict:
    t0 = time.perf_counter()
    all_ids = dataset.subject_ids()
    train_subjects = [s for s in all_ids if s not in set(test_subjects)]
    if set(train_subjects) & set(test_subjects):
        raise RuntimeError(f"fold {fold}: train and test subjects overlap")
    if not train_subjects:
        raise CliError(f"fold {fold}: no training subjects left")
    seed = _fold_seed(config.seed, fold)

    if shared_encoder is not None:
        enc = shared_encoder.encoder.detached()
        proj = shared_encoder.projector
        log_digest = shared_encoder.log_digest
    else:
        enc, proj, log = pretrain(
            dataset, geometry, _pretrain_config(config, seed), subjects=train_subjects
        )
        enc = enc.detached()
        log_digest = log.digest()

    lds = _lds_params(config)
    fs = dataset.fs
    train_series = []
    for sid in train_subjects:
        train_series.extend(
            prepare_subject_features(dataset.subject(sid), enc, geometry, fs, lds)
        )
    x, y, subs = stack_features(train_series)
    clf = train_classifier(x, y, subs, dataset.n_classes, _train_config(config, seed))

    per_subject_sec: dict[str, float] = {}
    per_subject_trial: dict[str, float] = {}
    confusion = np.zeros((dataset.n_classes, dataset.n_classes), dtype=np.int64)
    for sid in test_subjects:
        series = prepare_subject_features(dataset.subject(sid), enc, geometry, fs, lds)
        sec_hits = sec_total = 0
        trial_hits = 0
        for fs_ in series:
            preds = predict(fs_.values.T, clf)
            sec_hits += int(np.sum(preds == fs_.label))
            sec_total += preds.size
            np.add.at(confusion, (np.full(preds.size, fs_.label), preds), 1)
            trial_hits += int(majority_vote(fs_, clf) == fs_.label)
        per_subject_sec[sid] = sec_hits / sec_total
        per_subject_trial[sid] = trial_hits / len(series)

    bundle = ModelBundle(
        geometry=geometry,
        encoder=enc,
        projector=proj.detached() if proj is not None else None,
        classifier=clf.detached(),
        config_hash=config.hash,
        log_digest=log_digest,
    )
    return {
        "fold": fold,
        "test_subjects": list(test_subjects),
        "per_subject_acc": per_subject_sec,
        "per_subject_trial_acc": per_subject_trial,
        "acc_mean": float(np.mean(list(per_subject_sec.values()))),
        "trial_acc_mean": float(np.mean(list(per_subject_trial.values()))),
        "confusion_counts": confusion,
        "bundle": bundle,
        "seconds": time.perf_counter() - t0,
    }


def _worker_cap(requested: int) -> int:
    env = os.environ.get("DAEST_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError as e:
            raise CliError(f"DAEST_THREADS={env!r} is not an integer") from e
        if cap >= 1:
            return max(1, min(requested, cap))
    return max(1, requested)


def run_train_eval(
    config: RunConfig,
    dataset: Dataset | None = None,
    write_artifacts: bool = True,
) -> EvalReport:
    """Cross-validated train/eval; the importable core of ``train-eval``.

    Per fold the encoder is pretrained on the training subjects only (or a
    shared pretrained bundle is reused), the classifier is fit on their
    per-second features, and the held-out subjects are scored.  Pass a
    loaded ``dataset`` to skip reading ``config.dataset`` from disk.
    """
    t0 = time.perf_counter()
    if dataset is None:
        dataset = load_dataset(config.dataset)
    if config.label_map is not None:
        dataset = remap_labels(dataset, config.label_map)
    if config.shuffle_labels is not None:
        if config.shuffle_mode == "trial":
            dataset = shuffle_trial_labels(dataset, config.shuffle_labels)
        else:
            dataset = shuffle_stimulus_labels(dataset, config.shuffle_labels)
    geometry = resolve_geometry(config, dataset)
    folds = subject_folds(dataset.subject_ids(), config.cv, config.seed)
    shared = load_bundle(config.encoder_bundle) if config.encoder_bundle else None
    if shared is not None and shared.geometry != geometry:
        raise CliError("encoder bundle geometry differs from the configured geometry")

    workers = _worker_cap(config.parallel_folds)
    if workers > 1 and len(folds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_fold, dataset, geometry, config, i, test, shared)
                for i, test in enumerate(folds)
            ]
            results = [f.result() for f in futures]
    else:
        results = [
            _run_fold(dataset, geometry, config, i, test, shared)
            for i, test in enumerate(folds)
        ]

    subject_sec = {}
    subject_trial = {}
    for r in results:
        subject_sec.update(r["per_subject_acc"])
        subject_trial.update(r["per_subject_trial_acc"])
    counts = np.sum([r["confusion_counts"] for r in results], axis=0)
    row_sums = counts.sum(axis=1, keepdims=True)
    empty = [int(i) for i in np.nonzero(row_sums[:, 0] == 0)[0]]
    confusion = np.divide(
        counts, np.where(row_sums == 0, 1, row_sums), dtype=np.float64
    )

    def summary(values_by_subject: dict[str, float], fold_key: str) -> dict:
        per_subject = np.array([values_by_subject[s] for s in sorted(values_by_subject)])
        fold_means = np.array([r[fold_key] for r in results])
        return {
            "mean": float(per_subject.mean()),
            "std_across_subjects": float(per_subject.std()),
            "std_across_folds": float(fold_means.std()),
            "per_fold_mean": [float(v) for v in fold_means],
        }

    fold_rows = []
    for r in results:
        fold_rows.append(
            {
                "fold": r["fold"],
                "test_subjects": r["test_subjects"],
                "per_subject_acc": r["per_subject_acc"],
                "per_subject_trial_acc": r["per_subject_trial_acc"],
                "acc_mean": r["acc_mean"],
                "trial_acc_mean": r["trial_acc_mean"],
                "seconds": r["seconds"],
            }
        )
    report = EvalReport(
        config_hash=config.hash,
        n_classes=dataset.n_classes,
        class_names=dict(dataset.manifest.class_names),
        folds=fold_rows,
        accuracy={
            "per_second": summary(subject_sec, "acc_mean"),
            "trial_vote": summary(subject_trial, "trial_acc_mean"),
        },
        confusion=confusion,
        empty_rows=empty,
        timing={
            "total_s": time.perf_counter() - t0,
            "per_fold_s": [r["seconds"] for r in results],
        },
    )

    if write_artifacts and config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "report.json")
        with open(out / "config.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        for r in results:
            save_bundle(r["bundle"], out / f"model_fold{r['fold']:02d}.daest")
    return report


# ---------------------------------------------------------------------------
# sweep


def run_sweep(
    config: RunConfig,
    axis: str,
    values: list,
    dataset: Dataset | None = None,
    write_artifacts: bool = True,
) -> list[dict]:
    """Repeat train-eval with one geometry field swept over ``values``."""
    if axis not in SWEEP_AXES:
        raise CliError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    fieldname = SWEEP_AXES[axis]
    rows = []
    for value in values:
        geom = dict(config.geometry)
        geom[fieldname] = value
        sub_out = None
        if write_artifacts and config.out_dir:
            sub_out = str(Path(config.out_dir) / f"{fieldname}_{value}")
        variant = RunConfig.from_dict(
            {**config.to_dict(), "geometry": geom, "out_dir": sub_out}
        )
        report = run_train_eval(variant, dataset=dataset, write_artifacts=write_artifacts)
        rows.append(
            {
                "axis": fieldname,
                "value": value,
                "acc_mean": report.accuracy["per_second"]["mean"],
                "acc_std_subjects": report.accuracy["per_second"]["std_across_subjects"],
                "acc_std_folds": report.accuracy["per_second"]["std_across_folds"],
                "trial_acc_mean": report.accuracy["trial_vote"]["mean"],
            }
        )
    if write_artifacts and config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"sweep_{fieldname}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# interpret


def run_interpret(
    bundle_path: str | os.PathLike,
    dataset_path: str | os.PathLike,
    out_dir: str | os.PathLike,
    subjects: list[str] | None = None,
    steps: int = 64,
    max_samples: int = 2048,
    lds: LdsParams = LdsParams(),
    emit_plots: bool = False,
    seed: int = 0,
) -> dict:
    """Attribution, correlation, spectra, and topography reports.

    Returns a manifest of what was written, including the completeness gap
    of the emitted attributions.
    """
    bundle = load_bundle(bundle_path)
    if bundle.classifier is None:
        raise CliError("bundle holds no classifier; train one with train-eval first")
    dataset = load_dataset(dataset_path)
    geometry = bundle.geometry
    if dataset.n_channels != geometry.n_channels or dataset.fs != geometry.fs:
        raise CliError("dataset channels/fs do not match the bundle geometry")
    ids = subjects if subjects else dataset.subject_ids()

    enc = bundle.encoder.detached()
    series = []
    trial_arrays = []
    for sid in ids:
        subject = dataset.subject(sid)
        series.extend(prepare_subject_features(subject, enc, geometry, dataset.fs, lds))
        trial_arrays.extend(t.data for t in subject.trials)
    x, y, _ = stack_features(series)
    if x.shape[0] > max_samples:
        keep = rng_for(seed, "interpret-subsample").permutation(x.shape[0])[:max_samples]
        x, y = x[keep], y[keep]

    clf = bundle.classifier
    attr = compute_attributions(x, clf, steps=steps)
    gap = _completeness_gap(x, clf, steps)
    corr = contribution_correlation(attr)
    covs = estimate_stream_covariances(trial_arrays, enc, geometry, seed=seed)
    source = next(
        (t for t in trial_arrays if t.shape[1] >= geometry.n_samples), None
    )
    trace = None
    if source is not None:
        trace = window_attention(source[:, : geometry.n_samples], enc, geometry)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "attributions.json", "w") as fh:
        json.dump(
            {**attr.to_dict(), "steps": steps, "max_completeness_gap": gap},
            fh,
            indent=2,
        )
    _write_matrix_csv(
        out / "correlation.csv",
        corr,
        header=[f"class{c}" for c in range(attr.n_classes)],
    )
    _write_spectra_csv(out / "spectra.csv", enc, geometry)

    reports = []
    for c in range(attr.n_classes):
        report = top_dimension_report(attr, c, enc, geometry, covs, attention_trace=trace)
        reports.append(report)
        with open(out / f"dimension_report_class{c}.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        _write_matrix_csv(
            out / f"topography_class{c}.csv",
            report.spatial_pattern,
            header=[f"step{t}" for t in range(report.spatial_pattern.shape[1])],
        )
        if report.attention_trace is not None:
            with open(out / f"attention_class{c}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t", "weight"])
                for t, v in enumerate(report.attention_trace):
                    writer.writerow([t, f"{v:.10g}"])
    if emit_plots:
        _emit_plots(out, reports)
    return {
        "out_dir": str(out),
        "n_samples": attr.n_samples,
        "max_completeness_gap": gap,
        "classes": attr.n_classes,
    }


def _completeness_gap(x: np.ndarray, clf, steps: int, n_check: int = 8) -> float:
    """Largest |sum(attributions) - logit difference| over sampled points."""
    from daest.classify import mlp_logits

    idx = np.linspace(0, x.shape[0] - 1, min(n_check, x.shape[0]), dtype=np.intp)
    pts = x[idx]
    logits = mlp_logits(pts, clf.detached()).values
    base = mlp_logits(np.zeros((1, x.shape[1])), clf.detached()).values[0]
    worst = 0.0
    for i, row in enumerate(pts):
        for c in range(clf.n_classes):
            total = float(
                integrated_gradients(clf, row, target=c, steps=steps).sum()
            )
            worst = max(worst, abs(total - (logits[i, c] - base[c])))
    return worst


def _write_matrix_csv(path, matrix: np.ndarray, header: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.atleast_2d(matrix):
            writer.writerow([f"{v:.10g}" for v in row])


def _write_spectra_csv(path, enc, geometry: EncoderGeometry) -> None:
    mags = []
    freqs = None
    for k in range(geometry.n_temporal):
        freqs, mag = filter_frequency_response(
            enc.temporal.values[k, 0], geometry.fs
        )
        mags.append(mag)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_hz"] + [f"filter{k}" for k in range(len(mags))])
        for i, f in enumerate(freqs):
            writer.writerow([f"{f:.10g}"] + [f"{m[i]:.10g}" for m in mags])


def _emit_plots(out: Path, reports) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise CliError("matplotlib is required for --emit-plots") from e
    for report in reports:
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
        axes[0].plot(report.freq_hz, report.freq_magnitude)
        axes[0].set_xlabel("Hz")
        axes[0].set_title(f"dim {report.dimension} spectrum")
        im = axes[1].imshow(report.spatial_pattern, aspect="auto", cmap="RdBu_r")
        fig.colorbar(im, ax=axes[1])
        axes[1].set_title("spatial pattern")
        if report.attention_trace is not None:
            axes[2].plot(report.attention_trace)
        axes[2].set_title("attention trace")
        fig.tight_layout()
        fig.savefig(out / f"dimension_report_class{report.emotion}.png", dpi=110)
        plt.close(fig)


# ---------------------------------------------------------------------------
# convert


def run_convert(
    in_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    name: str = "converted",
    fs_in: float | None = None,
    fs_out: int | None = None,
    band: tuple[float, float] | None = None,
    car: bool = False,
) -> Path:
    """Map a tree of ``<subject>/<stimulus>__<label>.npy`` files to a dataset.

    Each .npy file holds one (M, T) trial.  Optional preprocessing applies
    in order: resample fs_in -> fs_out, bandpass, common average reference.
    """
    root = Path(in_dir)
    if not root.is_dir():
        raise CliError(f"{in_dir} is not a directory")
    if fs_out is None:
        raise CliError("--fs-out is required (the manifest records one rate)")
    if fs_in is not None and fs_in < fs_out:
        raise CliError(f"only downsampling is supported, got {fs_in} -> {fs_out}")
    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subject_dirs:
        raise CliError(f"{in_dir} holds no subject directories")

    data: dict[str, dict[str, np.ndarray]] = {}
    entries: list[dataio.SubjectEntry] = []
    labels_seen: set[int] = set()
    n_channels = None
    for sdir in subject_dirs:
        sid = sdir.name
        entry = dataio.SubjectEntry(subject_id=sid)
        trials = {}
        for f in sorted(sdir.glob("*.npy")):
            stem = f.stem
            if "__" not in stem:
                raise CliError(
                    f"{f}: expected <stimulus>__<label>.npy naming"
                )
            stim, _, label_text = stem.rpartition("__")
            try:
                label = int(label_text)
            except ValueError as e:
                raise CliError(f"{f}: label {label_text!r} is not an integer") from e
            x = np.load(f)
            if x.ndim != 2:
                raise CliError(f"{f}: expected a 2-D (channels, samples) array")
            if n_channels is None:
                n_channels = x.shape[0]
            elif x.shape[0] != n_channels:
                raise CliError(
                    f"{f}: {x.shape[0]} channels, earlier files had {n_channels}"
                )
            if fs_in is not None:
                x = dataio.resample(x, fs_in, fs_out)
            if band is not None:
                x = dataio.bandpass(x, float(fs_out), band[0], band[1])
            if car:
                x = dataio.common_average_reference(x)
            trials[stim] = x
            labels_seen.add(label)
            entry.trials.append(
                dataio.TrialEntry(
                    stimulus_id=stim,
                    label=label,
                    file=f"{sid}/{stim}.f32",
                    n_samples=x.shape[1],
                )
            )
        if not entry.trials:
            raise CliError(f"{sdir}: no .npy trials found")
        entries.append(entry)
        data[sid] = trials

    manifest = dataio.DatasetManifest(
        name=name,
        fs=int(fs_out),
        n_channels=int(n_channels),
        channel_names=[f"ch{i:02d}" for i in range(n_channels)],
        class_names={c: f"class{c}" for c in sorted(labels_seen)},
        subjects=entries,
    )
    return dataio.write_dataset(out_dir, manifest, data)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec.from_json(args.spec)
    except FileNotFoundError as e:
        raise CliError(f"spec file not found: {args.spec}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"spec {args.spec} is not valid JSON: {e}") from e
    path = synthgen.gen_dataset(spec, args.out, seed=args.seed, name=args.name)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_convert(args) -> int:
    band = None
    if args.band:
        parts = args.band.split(",")
        if len(parts) != 2:
            raise CliError(f"--band must be low,high, got {args.band!r}")
        band = (float(parts[0]), float(parts[1]))
    path = run_convert(
        args.in_dir,
        args.out,
        name=args.name,
        fs_in=args.fs_in,
        fs_out=args.fs_out,
        band=band,
        car=args.car,
    )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = load_run_config(args.config, args.set)
    if args.seed is not None:
        config.seed = args.seed
    dataset = load_dataset(config.dataset)
    geometry = resolve_geometry(config, dataset)
    enc, proj, log = pretrain(dataset, geometry, _pretrain_config(config, config.seed))
    out = Path(config.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    bundle = ModelBundle(
        geometry=geometry,
        encoder=enc.detached(),
        projector=proj.detached(),
        config_hash=config.hash,
        log_digest=log.digest(),
    )
    bundle_path = out / "encoder.daest"
    save_bundle(bundle, bundle_path)
    log.to_csv(out / "pretrain_log.csv")
    last = log.rows[-1] if log.rows else {}
    print(f"wrote {bundle_path} ({len(log.rows)} epochs, final loss {last.get('train_loss')})")
    for note in log.notes:
        print(f"note: {note}")
    return EXIT_OK


def cmd_train_eval(args) -> int:
    config = load_run_config(args.config, args.set)
    if args.seed is not None:
        config.seed = args.seed
    if args.out_dir:
        config.out_dir = args.out_dir
    if args.encoder_bundle:
        config.encoder_bundle = args.encoder_bundle
    if args.parallel_folds:
        config.parallel_folds = args.parallel_folds
    if args.shuffle_labels is not None:
        config.shuffle_labels = args.shuffle_labels
    if args.shuffle_mode:
        config.shuffle_mode = args.shuffle_mode
    report = run_train_eval(config)
    acc = report.accuracy["per_second"]
    vote = report.accuracy["trial_vote"]
    print(
        f"per-second accuracy {acc['mean']:.4f} "
        f"(std {acc['std_across_subjects']:.4f} across subjects, "
        f"{acc['std_across_folds']:.4f} across folds)"
    )
    print(f"trial majority-vote accuracy {vote['mean']:.4f}")
    if config.out_dir:
        print(f"report written to {Path(config.out_dir) / 'report.json'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_run_config(args.config, args.set)
    if args.out_dir:
        config.out_dir = args.out_dir
    raw_values = [v for v in args.values.split(",") if v]
    if not raw_values:
        raise CliError("--values is empty")
    if SWEEP_AXES.get(args.param) == "activation":
        values: list = raw_values
    else:
        try:
            values = [int(v) for v in raw_values]
        except ValueError as e:
            raise CliError(f"--values for {args.param} must be integers") from e
    rows = run_sweep(config, args.param, values)
    for row in rows:
        print(f"{row['axis']}={row['value']}: accuracy {row['acc_mean']:.4f}")
    return EXIT_OK


def cmd_interpret(args) -> int:
    lds = LdsParams(q=args.lds_q, r=args.lds_r)
    info = run_interpret(
        args.bundle,
        args.data,
        args.out,
        subjects=args.subjects,
        steps=args.steps,
        max_samples=args.max_samples,
        lds=lds,
        emit_plots=args.emit_plots,
        seed=args.seed,
    )
    print(
        f"wrote reports for {info['classes']} classes to {info['out_dir']} "
        f"({info['n_samples']} samples, completeness gap {info['max_completeness_gap']:.2e})"
    )
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(json.dumps(bundle_summary(load_bundle(args.bundle)), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="daest",
        description="EEG state-transition encoder: data, training, evaluation, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset from a spec JSON")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert a directory of .npy trials")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="converted")
    p.add_argument("--fs-in", type=float, default=None)
    p.add_argument("--fs-out", type=int, default=None)
    p.add_argument("--band", default=None, help="low,high in Hz")
    p.add_argument("--car", action="store_true", help="common average reference")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-eval", help="cross-validated training and evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--encoder-bundle", default=None)
    p.add_argument("--parallel-folds", type=int, default=None)
    p.add_argument("--shuffle-labels", type=int, default=None,
                   help="permute labels with this seed (control run)")
    p.add_argument("--shuffle-mode", choices=["stimulus", "trial"], default=None,
                   help="permutation granularity for --shuffle-labels")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train_eval)

    p = sub.add_parser("sweep", help="train-eval over a geometry axis")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("interpret", help="attribution and filter reports")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", nargs="*", default=None)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--max-samples", type=int, default=2048)
    p.add_argument("--lds-q", type=float, default=0.1)
    p.add_argument("--lds-r", type=float, default=0.1)
    p.add_argument("--emit-plots", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("inspect", help="print bundle metadata")
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


CONFIG_ERRORS = (
    CliError,
    DatasetError,
    SynthError,
    PretrainError,
    ClassifyError,
    InterpretError,
    BundleError,
    DimensionError,
    FileNotFoundError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        print(json.dumps(e.diagnostics, indent=2, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
