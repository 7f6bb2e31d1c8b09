"""Cross-subject contrastive pretraining of the encoder.

Two subjects watching the same stimulus provide a positive pair: one
window from each, cut at the same segment offset of the same trial.  A
batch takes one such pair per common stimulus, embeds all 2N windows with
the encoder plus a small convolutional projector, and minimizes the
normalized temperature-scaled cross entropy (NT-Xent): every window must
be closer (by cosine similarity) to its partner than to the other 2N - 2
windows in the batch.

Subjects are paired at random, disjointly, every epoch.  A held-out
fraction of subjects provides the early-stopping signal; the returned
parameters are the best-validation snapshot.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from daest import ndcore as nd
from daest.dataio import Dataset, EegWindow, WindowingPlan, windows_for_trial
from daest.encoder import (
    EncoderGeometry,
    EncoderParams,
    encoder_forward,
    init_encoder_params,
)
from daest.ndcore import ConvSpec, DiffTensor, Tape
from daest.util import rng_for, sha256_hex

__all__ = [
    "PretrainError",
    "NumericAbort",
    "ContrastiveBatch",
    "ProjectorParams",
    "PretrainConfig",
    "TrainingLog",
    "make_batch",
    "init_projector_params",
    "projector_forward",
    "embed_windows",
    "nt_xent",
    "pretrain",
]


class PretrainError(Exception):
    """Invalid batches or configurations."""


class NumericAbort(Exception):
    """Training hit a non-finite loss; carries a diagnostics snapshot."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# batches


@dataclass
class ContrastiveBatch:
    """2N windows ordered [a_0 .. a_{N-1}, b_0 .. b_{N-1}].

    ``pairs[i] = (i, i + N)``: window i of subject a and window i of
    subject b were cut from the same trial at the same offset.
    """

    windows: list[EegWindow]
    pairs: list[tuple[int, int]]
    subject_a: str
    subject_b: str

    def __post_init__(self) -> None:
        n2 = len(self.windows)
        if n2 < 4 or n2 % 2:
            raise PretrainError(
                f"a contrastive batch needs an even number >= 4 of windows, got {n2}"
            )
        if len(self.pairs) != n2 // 2:
            raise PretrainError("one pair per positive is required")
        for i, (a, b) in enumerate(self.pairs):
            wa, wb = self.windows[a], self.windows[b]
            if wa.stimulus_id != wb.stimulus_id or wa.segment_index != wb.segment_index:
                raise PretrainError(f"pair {i} mixes different stimuli or offsets")
            if wa.subject_id == wb.subject_id:
                raise PretrainError(f"pair {i} uses a single subject")

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def partner_index(self) -> np.ndarray:
        partner = np.empty(len(self.windows), dtype=np.intp)
        for a, b in self.pairs:
            partner[a], partner[b] = b, a
        return partner


def make_batch(
    dataset: Dataset,
    subject_a: str,
    subject_b: str,
    plan: WindowingPlan,
    rng: np.random.Generator,
) -> ContrastiveBatch:
    """One positive pair per stimulus the two subjects share.

    The segment offset of each pair is drawn uniformly from the windows the
    trial supports; both subjects use the same offset, so the pair sees the
    same stimulus content.
    """
    if subject_a == subject_b:
        raise PretrainError("a batch needs two distinct subjects")
    sa, sb = dataset.subject(subject_a), dataset.subject(subject_b)
    trials_a = {t.stimulus_id: t for t in sa.trials}
    trials_b = {t.stimulus_id: t for t in sb.trials}
    common = sorted(set(trials_a) & set(trials_b))
    if len(common) < 2:
        raise PretrainError(
            f"subjects {subject_a}/{subject_b} share {len(common)} trials; "
            "the loss needs at least 2 for negatives"
        )
    fs = dataset.fs
    win_a: list[EegWindow] = []
    win_b: list[EegWindow] = []
    for stim in common:
        wa = windows_for_trial(trials_a[stim], subject_a, fs, plan)
        wb = windows_for_trial(trials_b[stim], subject_b, fs, plan)
        if len(wa) != len(wb):
            raise PretrainError(
                f"stimulus {stim}: window counts differ ({len(wa)} vs {len(wb)})"
            )
        if not wa:
            raise PretrainError(f"stimulus {stim}: trial shorter than one window")
        k = int(rng.integers(len(wa)))
        win_a.append(wa[k])
        win_b.append(wb[k])
    n = len(common)
    return ContrastiveBatch(
        windows=win_a + win_b,
        pairs=[(i, i + n) for i in range(n)],
        subject_a=subject_a,
        subject_b=subject_b,
    )


# ---------------------------------------------------------------------------
# projector


@dataclass
class ProjectorParams:
    """Projection head: average-pool, then two grouped valid convolutions.

    Channel counts double at each convolution (K -> 2K -> 4K, extent 3,
    ReLU after each); the result is flattened into the embedding.
    """

    conv1: DiffTensor  # (2K, K/groups, 3)
    conv2: DiffTensor  # (4K, 2K/groups, 3)
    groups: int
    pool_window: int = 15
    pool_stride: int = 15

    def tensors(self) -> list[DiffTensor]:
        return [self.conv1, self.conv2]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"proj_conv1": self.conv1.values, "proj_conv2": self.conv2.values}

    def detached(self) -> "ProjectorParams":
        return ProjectorParams(
            conv1=self.conv1.detached(),
            conv2=self.conv2.detached(),
            groups=self.groups,
            pool_window=self.pool_window,
            pool_stride=self.pool_stride,
        )

    def copy_values(self) -> list[np.ndarray]:
        return [t.values.copy() for t in self.tensors()]

    def load_values(self, arrays: Sequence[np.ndarray]) -> None:
        for t, arr in zip(self.tensors(), arrays):
            t.values[...] = arr

    @property
    def n_params(self) -> int:
        return sum(t.values.size for t in self.tensors())


def init_projector_params(
    geometry: EncoderGeometry,
    rng: np.random.Generator,
    tape: Tape | None = None,
    pool_window: int = 15,
    pool_stride: int = 15,
    groups: int | None = None,
) -> ProjectorParams:
    k = geometry.n_latent
    groups = geometry.n_temporal if groups is None else groups
    if k % groups or (2 * k) % groups:
        raise PretrainError(f"projector groups {groups} must divide channel counts")
    in1 = k // groups
    in2 = 2 * k // groups
    bound1 = math.sqrt(1.0 / (in1 * 3))
    bound2 = math.sqrt(1.0 / (in2 * 3))
    w1 = rng.uniform(-bound1, bound1, size=(2 * k, in1, 3))
    w2 = rng.uniform(-bound2, bound2, size=(4 * k, in2, 3))
    return ProjectorParams(
        conv1=DiffTensor(w1, tape=tape),
        conv2=DiffTensor(w2, tape=tape),
        groups=groups,
        pool_window=pool_window,
        pool_stride=pool_stride,
    )


def projector_forward(latent: DiffTensor, params: ProjectorParams) -> DiffTensor:
    """Map a (K, T) gated latent series to a 1-D embedding."""
    k, t = latent.shape
    if t < params.pool_window:
        raise PretrainError(
            f"series length {t} shorter than pool window {params.pool_window}"
        )
    pooled = nd.moving_average(latent, params.pool_window, params.pool_stride)
    spec = ConvSpec(kernel_extent_time=3, groups=params.groups, padding="none")
    h = nd.relu(nd.conv_time(pooled, params.conv1, spec))
    h = nd.relu(nd.conv_time(h, params.conv2, spec))
    return nd.flatten(h)


def embed_windows(
    windows: Sequence[EegWindow],
    enc: EncoderParams,
    proj: ProjectorParams,
    geometry: EncoderGeometry,
) -> DiffTensor:
    """Embeddings of all windows, stacked row-wise."""
    rows = []
    for w in windows:
        gated, _ = encoder_forward(w.data, enc, geometry)
        rows.append(projector_forward(gated.values, proj))
    return nd.stack_rows(rows)


# ---------------------------------------------------------------------------
# loss


def nt_xent(
    embeddings: DiffTensor,
    pairs: Sequence[tuple[int, int]],
    temperature: float = 0.1,
) -> DiffTensor:
    """Normalized temperature-scaled cross entropy over one batch.

    Embeddings are L2-normalized internally; similarity is cosine.  For
    each anchor the positive is its partner, the negatives are every other
    row except itself.
    """
    if temperature <= 0:
        raise PretrainError(f"temperature must be positive, got {temperature}")
    n2 = embeddings.shape[0]
    if embeddings.ndim != 2 or n2 < 4 or n2 % 2:
        raise PretrainError(f"expected (2N, D) embeddings with N >= 2, got {embeddings.shape}")
    partner = np.empty(n2, dtype=np.intp)
    partner[:] = -1
    for a, b in pairs:
        partner[a], partner[b] = b, a
    if np.any(partner < 0):
        raise PretrainError("pairs must cover every embedding exactly once")

    sim = nd.cosine_similarity_matrix(embeddings)
    logits = nd.scale(sim, 1.0 / temperature)

    # stable log-sum-exp over each row, excluding the diagonal; the max is
    # detached (it is a constant shift within each row)
    lv = logits.values
    off_diag_max = np.where(np.eye(n2, dtype=bool), -np.inf, lv).max(axis=1, keepdims=True)
    shifted = nd.sub(logits, off_diag_max)
    mask = 1.0 - np.eye(n2)
    exp_shift = nd.mul(nd.exp(shifted), mask)
    denom = nd.sum_axis(exp_shift, axis=1)
    lse = nd.add(nd.log(denom), off_diag_max[:, 0])

    pos = nd.take_pairs(logits, np.arange(n2), partner)
    return nd.mean_all(nd.sub(lse, pos))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PretrainConfig:
    lr: float = 7e-4
    weight_decay: float = 1.5e-4
    epochs: int = 30
    patience: int = 10
    temperature: float = 0.1
    val_fraction: float = 0.1
    pairs_per_epoch: int | None = None
    pool_window: int = 15
    pool_stride: int = 15
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "patience": self.patience,
            "temperature": self.temperature,
            "val_fraction": self.val_fraction,
            "pairs_per_epoch": self.pairs_per_epoch,
            "pool_window": self.pool_window,
            "pool_stride": self.pool_stride,
            "seed": self.seed,
        }


@dataclass
class TrainingLog:
    """Per-epoch loss curve, serializable to CSV."""

    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, val_loss: float | None, lr: float) -> None:
        self.rows.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        )

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.rows:
                val = "" if r["val_loss"] is None else f"{r['val_loss']:.10g}"
                writer.writerow([r["epoch"], f"{r['train_loss']:.10g}", val, f"{r['lr']:.10g}"])

    def digest(self) -> str:
        payload = ";".join(
            f"{r['epoch']}:{r['train_loss']:.12g}:"
            f"{'' if r['val_loss'] is None else format(r['val_loss'], '.12g')}"
            for r in self.rows
        )
        return sha256_hex(payload.encode())


def _disjoint_pairs(subjects: list[str], rng: np.random.Generator) -> list[tuple[str, str]]:
    order = list(subjects)
    rng.shuffle(order)
    return [(order[i], order[i + 1]) for i in range(0, len(order) - 1, 2)]


def _param_norms(enc: EncoderParams, proj: ProjectorParams) -> dict[str, float]:
    norms = {}
    for name, arr in {**enc.named_arrays(), **proj.named_arrays()}.items():
        norms[name] = float(np.linalg.norm(arr))
    return norms


def pretrain(
    dataset: Dataset,
    geometry: EncoderGeometry,
    config: PretrainConfig,
    subjects: Sequence[str] | None = None,
) -> tuple[EncoderParams, ProjectorParams, TrainingLog]:
    """Contrastively pretrain encoder and projector on a dataset.

    Args:
        dataset: loaded recordings.
        geometry: encoder geometry; the training window length is
            ``geometry.n_samples`` and must be a whole number of seconds.
        config: optimizer and schedule settings.
        subjects: subject ids to train on (defaults to all).  At least two
            are required; with four or more, a validation split of
            ``config.val_fraction`` (at least two subjects) drives early
            stopping.

    Returns:
        Best encoder parameters, projector parameters, and the loss log.
    """
    subject_ids = list(subjects) if subjects is not None else dataset.subject_ids()
    if len(subject_ids) < 2:
        raise PretrainError(f"pretraining needs >= 2 subjects, got {len(subject_ids)}")
    if geometry.n_samples % dataset.fs:
        raise PretrainError(
            f"window of {geometry.n_samples} samples is not a whole number of "
            f"seconds at fs={dataset.fs}"
        )
    plan = WindowingPlan(geometry.n_samples // dataset.fs)
    if geometry.n_samples < config.pool_window:
        raise PretrainError(
            f"pool window {config.pool_window} exceeds the {geometry.n_samples}-sample window"
        )
    pooled = (geometry.n_samples - config.pool_window) // config.pool_stride + 1
    if pooled < 5:
        raise PretrainError(
            f"pooling leaves {pooled} steps; the projector needs at least 5"
        )

    split_rng = rng_for(config.seed, "pretrain-split")
    ids = list(subject_ids)
    split_rng.shuffle(ids)
    n_val = max(2, int(round(config.val_fraction * len(ids)))) if len(ids) >= 4 else 0
    val_ids, train_ids = ids[:n_val], ids[n_val:]
    log = TrainingLog()
    if not n_val:
        log.notes.append("too few subjects for a validation split; no early stopping")

    tape = Tape()
    init_rng = rng_for(config.seed, "pretrain-init")
    enc = init_encoder_params(geometry, init_rng, tape=tape)
    proj = init_projector_params(
        geometry,
        init_rng,
        tape=tape,
        pool_window=config.pool_window,
        pool_stride=config.pool_stride,
    )
    opt = nd.Adam(
        enc.tensors() + proj.tensors(),
        lr=config.lr,
        weight_decay=config.weight_decay,
    )

    # fixed validation batches: one deterministic pairing of the val split
    val_batches: list[ContrastiveBatch] = []
    if n_val:
        val_rng = rng_for(config.seed, "pretrain-val")
        for a, b in _disjoint_pairs(val_ids, val_rng):
            val_batches.append(make_batch(dataset, a, b, plan, val_rng))

    best_val = math.inf
    best_snapshot: tuple[list[np.ndarray], list[np.ndarray]] | None = None
    best_epoch = -1
    epochs_since_best = 0

    for epoch in range(config.epochs):
        epoch_rng = rng_for(config.seed, "pretrain-epoch", epoch)
        pairings = _disjoint_pairs(train_ids, epoch_rng)
        if config.pairs_per_epoch is not None:
            pairings = pairings[: config.pairs_per_epoch]
        if not pairings:
            raise PretrainError("no subject pairs available for training")

        train_losses = []
        for a, b in pairings:
            batch = make_batch(dataset, a, b, plan, epoch_rng)
            emb = embed_windows(batch.windows, enc, proj, geometry)
            loss = nt_xent(emb, batch.pairs, config.temperature)
            loss_val = float(loss.values)
            if not math.isfinite(loss_val):
                raise NumericAbort(
                    f"non-finite training loss at epoch {epoch}",
                    {
                        "epoch": epoch,
                        "subjects": [a, b],
                        "loss": loss_val,
                        "param_norms": _param_norms(enc, proj),
                    },
                )
            tape.backward(loss)
            opt.step()
            tape.reset()
            train_losses.append(loss_val)

        val_loss = None
        if val_batches:
            val_loss = _validation_loss(val_batches, enc, proj, geometry, config.temperature)
            if not math.isfinite(val_loss):
                raise NumericAbort(
                    f"non-finite validation loss at epoch {epoch}",
                    {"epoch": epoch, "loss": val_loss, "param_norms": _param_norms(enc, proj)},
                )
        log.append(epoch, float(np.mean(train_losses)), val_loss, config.lr)

        if val_loss is not None:
            if val_loss < best_val:
                best_val = val_loss
                best_snapshot = (enc.copy_values(), proj.copy_values())
                best_epoch = epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best > config.patience:
                    log.notes.append(
                        f"early stop at epoch {epoch}; best epoch {best_epoch}"
                    )
                    break

    if best_snapshot is not None:
        enc.load_values(best_snapshot[0])
        proj.load_values(best_snapshot[1])
    return enc, proj, log


def _validation_loss(
    batches: Sequence[ContrastiveBatch],
    enc: EncoderParams,
    proj: ProjectorParams,
    geometry: EncoderGeometry,
    temperature: float,
) -> float:
    enc_d, proj_d = enc.detached(), proj.detached()
    losses = []
    for batch in batches:
        emb = embed_windows(batch.windows, enc_d, proj_d, geometry)
        losses.append(float(nt_xent(emb, batch.pairs, temperature).values))
    return float(np.mean(losses))
