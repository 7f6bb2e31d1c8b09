"""Emotion classification over smoothed per-second latent features.

The encoder stays frozen here.  Each trial's gated latent series is
reduced to one vector per second (non-overlapping means), normalized
causally per subject with running statistics, smoothed per trial by a
random-walk Kalman filter with fixed-interval (RTS) smoothing, and scored
by a small MLP.  Per-second predictions inherit the trial label; trial
predictions are the majority vote over seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from daest import ndcore as nd
from daest.dataio import SubjectData
from daest.encoder import EncoderGeometry, EncoderParams, encoder_forward
from daest.ndcore import DiffTensor, Tape
from daest.util import rng_for

__all__ = [
    "ClassifyError",
    "NormState",
    "LdsParams",
    "FeatureSeries",
    "TrainConfig",
    "ClassifierParams",
    "per_second_features",
    "adaptive_normalize",
    "lds_smooth",
    "prepare_subject_features",
    "train_classifier",
    "predict",
    "predict_proba",
]


class ClassifyError(Exception):
    """Invalid feature shapes, labels, or configurations."""


# ---------------------------------------------------------------------------
# feature pipeline


def per_second_features(latent: np.ndarray, fs: int) -> np.ndarray:
    """Mean over non-overlapping fs-sample blocks: (K, T) -> (K, S).

    A trailing partial second is dropped.  Errors if the series is shorter
    than one second.
    """
    if latent.ndim != 2:
        raise ClassifyError(f"expected (K, T) latent series, got shape {latent.shape}")
    if fs < 1:
        raise ClassifyError("fs must be >= 1")
    k, t = latent.shape
    s = t // fs
    if s < 1:
        raise ClassifyError(f"series of {t} samples is shorter than one second at fs={fs}")
    return latent[:, : s * fs].reshape(k, s, fs).mean(axis=2)


@dataclass
class NormState:
    """Running per-feature statistics for causal z-scoring.

    One state per subject; it persists across that subject's trials in
    presentation order and never sees the future.  ``mean``/``m2`` follow
    Welford's recurrence; the variance is the population variance of the
    samples seen so far, including the current one.
    """

    n_features: int
    eps: float = 1e-6
    count: int = 0
    mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    m2: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.mean is None:
            self.mean = np.zeros(self.n_features)
        if self.m2 is None:
            self.m2 = np.zeros(self.n_features)


def adaptive_normalize(features: np.ndarray, state: NormState) -> np.ndarray:
    """Causal cumulative z-score along the second axis of (K, S) features.

    Each column is folded into the running statistics and then standardized
    by them, so the first second ever seen emits exactly zero and later
    emissions converge to ordinary z-scores.
    """
    if features.ndim != 2 or features.shape[0] != state.n_features:
        raise ClassifyError(
            f"features shape {features.shape} does not match state ({state.n_features})"
        )
    out = np.empty_like(features, dtype=np.float64)
    for t in range(features.shape[1]):
        x = features[:, t]
        state.count += 1
        delta = x - state.mean
        state.mean = state.mean + delta / state.count
        state.m2 = state.m2 + delta * (x - state.mean)
        sigma = np.sqrt(state.m2 / state.count)
        out[:, t] = (x - state.mean) / (sigma + state.eps)
    return out


@dataclass(frozen=True)
class LdsParams:
    """Scalar random-walk state-space model, shared by all features.

    State x_t = x_{t-1} + w, w ~ N(0, q); observation y_t = x_t + v,
    v ~ N(0, r).  The first observation initializes the filter diffusely
    (posterior mean y_0, variance r).
    """

    q: float = 0.1
    r: float = 0.1

    def __post_init__(self) -> None:
        if self.q < 0 or self.r < 0:
            raise ClassifyError("q and r must be non-negative")


def lds_smooth(series: np.ndarray, params: LdsParams = LdsParams()) -> np.ndarray:
    """Forward Kalman filtering plus RTS smoothing of (K, S) features.

    Gains depend only on (q, r) and time, so they are computed once and
    applied to all K rows.  ``r == 0`` returns the observations untouched
    (exact measurements); ``q == 0`` returns the running posterior of a
    constant state, i.e. each row's global weighted mean after smoothing.
    """
    if series.ndim != 2:
        raise ClassifyError(f"expected (K, S) features, got shape {series.shape}")
    k, s = series.shape
    if s < 1:
        raise ClassifyError("cannot smooth an empty series")
    y = series.astype(np.float64)
    if params.r == 0.0 or s == 1:
        return y.copy()

    q, r = params.q, params.r
    p_filt = np.empty(s)
    x_filt = np.empty((k, s))
    x_filt[:, 0] = y[:, 0]
    p_filt[0] = r  # diffuse start: trust the first observation
    for t in range(1, s):
        p_pred = p_filt[t - 1] + q
        gain = p_pred / (p_pred + r)
        x_filt[:, t] = x_filt[:, t - 1] + gain * (y[:, t] - x_filt[:, t - 1])
        p_filt[t] = (1.0 - gain) * p_pred

    x_smooth = np.empty_like(x_filt)
    x_smooth[:, -1] = x_filt[:, -1]
    for t in range(s - 2, -1, -1):
        c = p_filt[t] / (p_filt[t] + q)
        x_smooth[:, t] = x_filt[:, t] + c * (x_smooth[:, t + 1] - x_filt[:, t])
    return x_smooth


@dataclass
class FeatureSeries:
    """Per-second features of one trial after normalization/smoothing."""

    values: np.ndarray  # (K, S)
    subject_id: str
    stimulus_id: str
    label: int

    @property
    def n_seconds(self) -> int:
        return self.values.shape[1]

    def per_second_labels(self) -> np.ndarray:
        return np.full(self.n_seconds, self.label, dtype=np.intp)


def prepare_subject_features(
    subject: SubjectData,
    enc: EncoderParams,
    geometry: EncoderGeometry,
    fs: int,
    lds: LdsParams = LdsParams(),
    eps: float = 1e-6,
) -> list[FeatureSeries]:
    """Frozen-encoder feature extraction for all trials of one subject.

    Trials are processed in presentation order with a single running
    normalization state; smoothing is per trial.
    """
    enc = enc.detached()
    state = NormState(n_features=geometry.n_latent, eps=eps)
    out = []
    for trial in subject.trials:
        gated, _ = encoder_forward(trial.data, enc, geometry)
        feats = per_second_features(gated.array, fs)
        feats = adaptive_normalize(feats, state)
        feats = lds_smooth(feats, lds)
        out.append(
            FeatureSeries(
                values=feats,
                subject_id=subject.subject_id,
                stimulus_id=trial.stimulus_id,
                label=trial.label,
            )
        )
    return out


def stack_features(series: Sequence[FeatureSeries]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate per-second samples: (N, K) features, labels, subject ids."""
    if not series:
        raise ClassifyError("no feature series given")
    xs = np.concatenate([fs.values.T for fs in series], axis=0)
    ys = np.concatenate([fs.per_second_labels() for fs in series])
    subjects = np.concatenate(
        [np.full(fs.n_seconds, fs.subject_id, dtype=object) for fs in series]
    )
    return xs, ys, subjects


# ---------------------------------------------------------------------------
# MLP classifier


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay_grid: tuple[float, ...] = (0.001, 0.0022, 0.005, 0.011, 0.025)
    epochs: int = 100
    patience: int = 30
    batch_size: int = 256
    hidden: tuple[int, ...] = (128, 64)
    cv_folds: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay_grid": list(self.weight_decay_grid),
            "epochs": self.epochs,
            "patience": self.patience,
            "batch_size": self.batch_size,
            "hidden": list(self.hidden),
            "cv_folds": self.cv_folds,
            "seed": self.seed,
        }


@dataclass
class ClassifierParams:
    """MLP head: K -> hidden layers -> C, ReLU between layers."""

    weights: list[DiffTensor]
    biases: list[DiffTensor]
    n_classes: int
    weight_decay: float = 0.0

    def tensors(self) -> list[DiffTensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"mlp_w{i}"] = w.values
            arrays[f"mlp_b{i}"] = b.values
        return arrays

    def detached(self) -> "ClassifierParams":
        return ClassifierParams(
            weights=[w.detached() for w in self.weights],
            biases=[b.detached() for b in self.biases],
            n_classes=self.n_classes,
            weight_decay=self.weight_decay,
        )

    def copy_values(self) -> list[np.ndarray]:
        return [t.values.copy() for t in self.tensors()]

    def load_values(self, arrays: Sequence[np.ndarray]) -> None:
        for t, arr in zip(self.tensors(), arrays):
            t.values[...] = arr

    @property
    def n_params(self) -> int:
        return sum(t.values.size for t in self.tensors())

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[0]


def init_classifier_params(
    n_features: int,
    n_classes: int,
    hidden: Sequence[int],
    rng: np.random.Generator,
    tape: Tape | None = None,
) -> ClassifierParams:
    sizes = [n_features, *hidden, n_classes]
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(1.0 / d_in)
        weights.append(DiffTensor(rng.uniform(-bound, bound, size=(d_in, d_out)), tape=tape))
        biases.append(DiffTensor(rng.uniform(-bound, bound, size=d_out), tape=tape))
    return ClassifierParams(weights=weights, biases=biases, n_classes=n_classes)


def mlp_logits(x, params: ClassifierParams) -> DiffTensor:
    """Logits for (N, K) inputs."""
    h = x if isinstance(x, DiffTensor) else DiffTensor.constant(x)
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = nd.linear(h, w, b)
        if i < n_layers - 1:
            h = nd.relu(h)
    return h


def _cross_entropy(logits: DiffTensor, labels: np.ndarray) -> DiffTensor:
    n = logits.shape[0]
    lv = logits.values
    row_max = lv.max(axis=1, keepdims=True)  # detached shift
    shifted = nd.sub(logits, row_max)
    lse = nd.add(nd.log(nd.sum_axis(nd.exp(shifted), axis=1)), row_max[:, 0])
    picked = nd.take_pairs(logits, np.arange(n), labels)
    return nd.mean_all(nd.sub(lse, picked))


def _mean_ce(x: np.ndarray, y: np.ndarray, params: ClassifierParams) -> float:
    """Mean cross-entropy without touching the tape."""
    logits = mlp_logits(x, params.detached()).values
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(lse - shifted[np.arange(len(y)), y]))


def predict_proba(features: np.ndarray, params: ClassifierParams) -> np.ndarray:
    """(N, C) class probabilities under the MLP."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.n_features:
        raise ClassifyError(
            f"features shape {features.shape} does not match classifier input "
            f"({params.n_features})"
        )
    logits = mlp_logits(features, params.detached()).values
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict(features: np.ndarray, params: ClassifierParams) -> np.ndarray:
    """Per-sample argmax labels."""
    return predict_proba(features, params).argmax(axis=1)


def _train_once(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    config: TrainConfig,
    weight_decay: float,
    seed_key: int,
    epochs: int | None = None,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> tuple[ClassifierParams, int]:
    """One MLP fit; returns the model and the epoch count actually used.

    With validation data, early stopping tracks validation cross-entropy
    and the best snapshot is restored; otherwise the run lasts exactly
    ``epochs``.  Loss, not accuracy, drives the stop: a lucky argmax right
    after init can hit a high accuracy that training then dips below for
    longer than the patience window, which would hand the final refit a
    near-zero epoch budget.  Loss ties favor the later epoch.
    """
    tape = Tape()
    rng = rng_for(config.seed, "classifier-init", seed_key)
    params = init_classifier_params(x.shape[1], n_classes, config.hidden, rng, tape=tape)
    opt = nd.Adam(params.tensors(), lr=config.lr, weight_decay=weight_decay)
    shuffle_rng = rng_for(config.seed, "classifier-shuffle", seed_key)

    n = x.shape[0]
    total_epochs = config.epochs if epochs is None else epochs
    best_loss = math.inf
    best_snapshot = None
    best_epoch = 0
    since_best = 0
    for epoch in range(total_epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            logits = mlp_logits(x[idx], params)
            loss = _cross_entropy(logits, y[idx])
            if not math.isfinite(float(loss.values)):
                raise ClassifyError(f"non-finite classifier loss at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            tape.reset()
        if x_val is not None:
            val_loss = _mean_ce(x_val, y_val, params)
            if val_loss < best_loss:
                best_loss = val_loss
                best_snapshot = params.copy_values()
                best_epoch = epoch
                since_best = 0
            else:
                if val_loss == best_loss:
                    best_snapshot = params.copy_values()
                    best_epoch = epoch
                since_best += 1
                if since_best > config.patience:
                    break
    if best_snapshot is not None:
        params.load_values(best_snapshot)
        used = best_epoch + 1
    else:
        used = total_epochs
    params.weight_decay = weight_decay
    return params, used


def _subject_folds(subjects: np.ndarray, n_folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Subject-wise sample index folds (subjects never straddle folds)."""
    uniq = np.array(sorted(set(subjects.tolist())), dtype=object)
    if len(uniq) < n_folds:
        n_folds = len(uniq)
    order = rng.permutation(len(uniq))
    folds = []
    for f in range(n_folds):
        fold_subjects = set(uniq[order[f::n_folds]].tolist())
        folds.append(np.nonzero([s in fold_subjects for s in subjects])[0])
    return folds


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    subjects: np.ndarray,
    n_classes: int,
    config: TrainConfig = TrainConfig(),
) -> ClassifierParams:
    """Fit the MLP head on per-second features with a frozen encoder.

    When the weight-decay grid has several candidates, each is scored by
    subject-wise cross-validation (accuracy on the held-out fold, early
    stopping on held-out cross-entropy); the winner is refit on all data
    for the median number of epochs its folds used.  A single-candidate
    grid skips the search and trains directly with an internal validation
    split.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    subjects = np.asarray(subjects, dtype=object)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or y.shape[0] != subjects.shape[0]:
        raise ClassifyError("features, labels, subjects must align on axis 0")
    present = np.unique(y)
    if present.size < 2:
        raise ClassifyError(f"training set holds a single class ({present.tolist()})")
    if present.min() < 0 or present.max() >= n_classes:
        raise ClassifyError(f"labels outside [0, {n_classes})")
    if not config.weight_decay_grid:
        raise ClassifyError("weight decay grid is empty")

    fold_rng = rng_for(config.seed, "classifier-folds")

    if len(config.weight_decay_grid) == 1:
        wd = config.weight_decay_grid[0]
        folds = _subject_folds(subjects, config.cv_folds, fold_rng)
        if len(folds) >= 2:
            # one holdout fold for early stopping, then refit on everything
            val_idx = folds[0]
            train_idx = np.setdiff1d(np.arange(x.shape[0]), val_idx)
            if np.unique(y[train_idx]).size < 2:
                params, _ = _train_once(x, y, n_classes, config, wd, seed_key=0)
                return params
            _, used = _train_once(
                x[train_idx], y[train_idx], n_classes, config, wd,
                seed_key=0, x_val=x[val_idx], y_val=y[val_idx],
            )
            params, _ = _train_once(x, y, n_classes, config, wd, seed_key=1, epochs=used)
        else:
            params, _ = _train_once(x, y, n_classes, config, wd, seed_key=0)
        return params

    folds = _subject_folds(subjects, config.cv_folds, fold_rng)
    if len(folds) < 2:
        raise ClassifyError(
            "weight-decay search needs at least 2 subjects for inner cross-validation"
        )
    all_idx = np.arange(x.shape[0])
    scores = []
    epoch_counts: dict[float, list[int]] = {wd: [] for wd in config.weight_decay_grid}
    for wd in config.weight_decay_grid:
        accs = []
        for f, val_idx in enumerate(folds):
            train_idx = np.setdiff1d(all_idx, val_idx)
            if np.unique(y[train_idx]).size < 2 or val_idx.size == 0:
                continue
            model, used = _train_once(
                x[train_idx], y[train_idx], n_classes, config, wd,
                seed_key=f, x_val=x[val_idx], y_val=y[val_idx],
            )
            accs.append(float(np.mean(predict(x[val_idx], model) == y[val_idx])))
            epoch_counts[wd].append(used)
        if not accs:
            raise ClassifyError("inner cross-validation produced no valid folds")
        scores.append(float(np.mean(accs)))
    best = int(np.argmax(scores))
    wd = config.weight_decay_grid[best]
    used = int(np.median(epoch_counts[wd])) if epoch_counts[wd] else config.epochs
    params, _ = _train_once(x, y, n_classes, config, wd, seed_key=99, epochs=max(used, 1))
    return params


def majority_vote(series: FeatureSeries, params: ClassifierParams) -> int:
    """Trial-level label: most common per-second prediction."""
    preds = predict(series.values.T, params)
    counts = np.bincount(preds, minlength=params.n_classes)
    return int(np.argmax(counts))
