"""Contrastive pretraining: batch assembly, projector geometry, NT-Xent
oracles and invariances, gradient flow, and the training loop."""

import csv
import math

import numpy as np
import pytest

from daest import ndcore as nd
from daest.dataio import (
    Dataset,
    DatasetManifest,
    SubjectData,
    Trial,
    WindowingPlan,
)
from daest.encoder import EncoderGeometry, encoder_forward, init_encoder_params
from daest.ndcore import DiffTensor, Tape, grad_check
from daest.pretrain import (
    ContrastiveBatch,
    NumericAbort,
    PretrainConfig,
    PretrainError,
    TrainingLog,
    embed_windows,
    init_projector_params,
    make_batch,
    nt_xent,
    pretrain,
    projector_forward,
)
from daest.pretrain import _disjoint_pairs
from daest.util import rng_for


def toy_geometry(**kw):
    base = dict(
        n_channels=6,
        n_samples=64,
        fs=32,
        n_temporal=2,
        temporal_len=5,
        n_spatial_per_temporal=2,
        transition_steps=2,
        dilation_schedule=((1, 2), (2, 2)),
        attention_len=3,
        activation="sigmoid",
    )
    base.update(kw)
    return EncoderGeometry(**base)


def toy_dataset(n_subjects=4, n_stimuli=3, trial_len_s=4, fs=32, m=6, seed=0):
    """In-memory dataset: shared stimulus content plus per-subject noise."""
    rng = np.random.default_rng(seed)
    t = trial_len_s * fs
    manifest = DatasetManifest(
        name="toy",
        fs=fs,
        n_channels=m,
        channel_names=[f"c{i}" for i in range(m)],
        class_names={0: "neg", 1: "pos"},
    )
    content = {j: rng.standard_normal((m, t)) for j in range(n_stimuli)}
    subjects = []
    for i in range(n_subjects):
        trials = [
            Trial(
                stimulus_id=f"stim{j}",
                label=j % 2,
                data=content[j] + 0.1 * rng.standard_normal((m, t)),
            )
            for j in range(n_stimuli)
        ]
        subjects.append(SubjectData(subject_id=f"s{i:02d}", trials=trials))
    return Dataset(manifest=manifest, subjects=subjects)


def toy_projector(geometry, rng, tape=None):
    # pool 8 keeps two valid extent-3 convolutions feasible at T=64
    return init_projector_params(geometry, rng, tape=tape, pool_window=8, pool_stride=8)


# ---------------------------------------------------------------------------
# batches


def test_make_batch_structure():
    ds = toy_dataset()
    plan = WindowingPlan(2)
    batch = make_batch(ds, "s00", "s01", plan, np.random.default_rng(0))
    assert batch.n_pairs == 3  # one per shared stimulus
    assert len(batch.windows) == 6
    for i, (a, b) in enumerate(batch.pairs):
        assert (a, b) == (i, i + 3)
        wa, wb = batch.windows[a], batch.windows[b]
        assert wa.subject_id == "s00" and wb.subject_id == "s01"
        assert wa.stimulus_id == wb.stimulus_id
        assert wa.segment_index == wb.segment_index
        assert wa.data.shape == (6, 64)
        assert not np.array_equal(wa.data, wb.data)  # different subjects


def test_make_batch_reproducible():
    ds = toy_dataset()
    plan = WindowingPlan(2)
    b1 = make_batch(ds, "s00", "s01", plan, np.random.default_rng(7))
    b2 = make_batch(ds, "s00", "s01", plan, np.random.default_rng(7))
    for w1, w2 in zip(b1.windows, b2.windows):
        assert w1.segment_index == w2.segment_index
        np.testing.assert_array_equal(w1.data, w2.data)


def test_make_batch_offsets_vary_with_rng():
    ds = toy_dataset(n_stimuli=8, trial_len_s=8)
    plan = WindowingPlan(2)
    rng = np.random.default_rng(3)
    b1 = make_batch(ds, "s00", "s01", plan, rng)
    b2 = make_batch(ds, "s00", "s01", plan, rng)
    seg1 = [w.segment_index for w in b1.windows]
    seg2 = [w.segment_index for w in b2.windows]
    assert seg1 != seg2


def test_make_batch_rejects_same_subject():
    ds = toy_dataset()
    with pytest.raises(PretrainError):
        make_batch(ds, "s00", "s00", WindowingPlan(2), np.random.default_rng(0))


def test_make_batch_needs_two_common_stimuli():
    ds = toy_dataset(n_subjects=2, n_stimuli=2)
    # drop one of subject s01's trials so only one stimulus is shared
    ds.subjects[1].trials = ds.subjects[1].trials[:1]
    with pytest.raises(PretrainError, match="share 1"):
        make_batch(ds, "s00", "s01", WindowingPlan(2), np.random.default_rng(0))


def test_contrastive_batch_validation():
    ds = toy_dataset()
    plan = WindowingPlan(2)
    good = make_batch(ds, "s00", "s01", plan, np.random.default_rng(0))
    with pytest.raises(PretrainError):
        ContrastiveBatch(good.windows[:3], good.pairs, "s00", "s01")  # odd count
    with pytest.raises(PretrainError):
        ContrastiveBatch(good.windows, good.pairs[:1], "s00", "s01")  # pair count
    # a pair pointing at two windows of the same subject
    same = good.windows[:3] + good.windows[:3]
    with pytest.raises(PretrainError, match="single subject"):
        ContrastiveBatch(same, [(i, i + 3) for i in range(3)], "s00", "s00")


def test_partner_index_involution():
    ds = toy_dataset()
    batch = make_batch(ds, "s02", "s03", WindowingPlan(2), np.random.default_rng(1))
    partner = batch.partner_index()
    np.testing.assert_array_equal(partner[partner], np.arange(len(batch.windows)))


def test_disjoint_pairs_disjoint_and_odd_drop():
    subjects = [f"s{i}" for i in range(7)]
    pairs = _disjoint_pairs(subjects, np.random.default_rng(0))
    assert len(pairs) == 3  # one subject left out
    used = [s for p in pairs for s in p]
    assert len(used) == len(set(used))


# ---------------------------------------------------------------------------
# projector


def test_projector_embedding_length_default_geometry():
    geom = EncoderGeometry(n_channels=32, n_samples=625, fs=125)
    rng = np.random.default_rng(0)
    proj = init_projector_params(geom, rng)
    assert proj.conv1.shape == (512, 16, 3)
    assert proj.conv2.shape == (1024, 32, 3)
    latent = DiffTensor.constant(np.random.default_rng(1).standard_normal((256, 625)) * 0.1)
    emb = projector_forward(latent, proj)
    # 625 -> 41 pooled steps -> 39 -> 37 after two valid convolutions
    assert emb.shape == (1024 * 37,)
    assert emb.shape == (37888,)


def test_projector_zero_latent_zero_embedding():
    geom = toy_geometry()
    proj = toy_projector(geom, np.random.default_rng(0))
    emb = projector_forward(DiffTensor.constant(np.zeros((4, 64))), proj)
    np.testing.assert_array_equal(emb.values, np.zeros(emb.shape))


def test_projector_rejects_short_series():
    geom = toy_geometry()
    proj = toy_projector(geom, np.random.default_rng(0))
    with pytest.raises(PretrainError):
        projector_forward(DiffTensor.constant(np.zeros((4, 5))), proj)


def test_projector_group_divisibility():
    geom = toy_geometry()
    with pytest.raises(PretrainError):
        init_projector_params(geom, np.random.default_rng(0), groups=3)


# ---------------------------------------------------------------------------
# loss


def test_nt_xent_orthogonal_pairs_hand_value():
    # rows [u, v, u, v] with u orthogonal to v; pairs (0, 2) and (1, 3).
    # Each anchor: positive at cosine 1, two negatives at cosine 0, so the
    # per-anchor loss at temperature 1 is -log(e / (e + 2)).
    u = np.array([3.0, 0.0, 0.0])
    v = np.array([0.0, -2.0, 0.0])
    emb = DiffTensor.constant(np.stack([u, v, u, v]))
    loss = nt_xent(emb, [(0, 2), (1, 3)], temperature=1.0)
    expected = -math.log(math.e / (math.e + 2.0))
    assert abs(float(loss.values) - expected) < 1e-12


def test_nt_xent_identical_embeddings():
    # all similarities are 1, so the temperature cancels: loss = log(2N - 1)
    emb = DiffTensor.constant(np.tile([1.0, 2.0], (6, 1)))
    loss = nt_xent(emb, [(0, 3), (1, 4), (2, 5)], temperature=0.1)
    assert abs(float(loss.values) - math.log(5.0)) < 1e-9


def test_nt_xent_rotation_and_scale_invariant():
    rng = np.random.default_rng(5)
    e = rng.standard_normal((8, 12))
    pairs = [(i, i + 4) for i in range(4)]
    base = float(nt_xent(DiffTensor.constant(e), pairs, 0.2).values)
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    rotated = float(nt_xent(DiffTensor.constant(3.7 * e @ q), pairs, 0.2).values)
    assert abs(base - rotated) < 1e-9


def test_nt_xent_sharp_temperature_separates():
    e = np.zeros((4, 4))
    e[0, 0] = e[2, 0] = 1.0
    e[1, 1] = e[3, 1] = 1.0
    loss = nt_xent(DiffTensor.constant(e), [(0, 2), (1, 3)], temperature=0.05)
    assert float(loss.values) < 1e-8


def test_nt_xent_validation():
    e = DiffTensor.constant(np.eye(4))
    with pytest.raises(PretrainError):
        nt_xent(e, [(0, 2), (1, 3)], temperature=0.0)
    with pytest.raises(PretrainError):
        nt_xent(e, [(0, 2)], temperature=0.1)  # rows 1, 3 unpaired
    with pytest.raises(PretrainError):
        nt_xent(DiffTensor.constant(np.eye(3)), [(0, 1)], temperature=0.1)


def test_nt_xent_gradient():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((6, 7))
    pairs = [(i, i + 3) for i in range(3)]

    def f(leaf):
        return nt_xent(leaf, pairs, temperature=0.3)

    err = grad_check(f, x, coords=20, rng=rng)
    assert err < 1e-6


def test_embed_and_loss_gradient_reaches_all_params():
    geom = toy_geometry()
    ds = toy_dataset()
    batch = make_batch(ds, "s00", "s01", WindowingPlan(2), np.random.default_rng(2))
    tape = Tape()
    rng = np.random.default_rng(3)
    enc = init_encoder_params(geom, rng, tape=tape)
    proj = toy_projector(geom, rng, tape=tape)
    emb = embed_windows(batch.windows, enc, proj, geom)
    assert emb.shape[0] == len(batch.windows)
    loss = nt_xent(emb, batch.pairs, 0.1)
    tape.backward(loss)
    for t in enc.tensors() + proj.tensors():
        assert t.grad is not None
        assert np.all(np.isfinite(t.grad))
        assert np.any(t.grad != 0.0)


def test_embed_windows_matches_manual_chain():
    geom = toy_geometry()
    ds = toy_dataset()
    batch = make_batch(ds, "s02", "s01", WindowingPlan(2), np.random.default_rng(4))
    rng = np.random.default_rng(5)
    enc = init_encoder_params(geom, rng)
    proj = toy_projector(geom, rng)
    emb = embed_windows(batch.windows, enc, proj, geom)
    gated, _ = encoder_forward(batch.windows[2].data, enc, geom)
    row = projector_forward(gated.values, proj)
    np.testing.assert_allclose(emb.values[2], row.values, rtol=0, atol=0)


# ---------------------------------------------------------------------------
# training loop


def quick_config(**kw):
    base = dict(lr=7e-4, weight_decay=1.5e-4, epochs=4, patience=10,
                temperature=0.1, pool_window=8, pool_stride=8, seed=0)
    base.update(kw)
    return PretrainConfig(**base)


def test_pretrain_smoke_loss_decreases():
    ds = toy_dataset(n_subjects=6)
    geom = toy_geometry()
    enc, proj, log = pretrain(ds, geom, quick_config(epochs=6, lr=3e-3))
    assert len(log.rows) == 6
    losses = [r["train_loss"] for r in log.rows]
    assert all(math.isfinite(v) for v in losses)
    assert np.mean(losses[-2:]) < np.mean(losses[:2])
    # validation split exists for 6 subjects, so val losses are recorded
    assert all(r["val_loss"] is not None for r in log.rows)


def test_pretrain_zero_lr_keeps_init():
    ds = toy_dataset(n_subjects=4)
    geom = toy_geometry()
    config = quick_config(lr=0.0, weight_decay=0.0, epochs=2)
    enc, proj, _ = pretrain(ds, geom, config)
    expected = init_encoder_params(geom, rng_for(config.seed, "pretrain-init"))
    for got, want in zip(enc.tensors(), expected.tensors()):
        np.testing.assert_array_equal(got.values, want.values)


def test_pretrain_deterministic():
    ds = toy_dataset(n_subjects=4)
    geom = toy_geometry()
    enc1, proj1, log1 = pretrain(ds, geom, quick_config(epochs=3))
    enc2, proj2, log2 = pretrain(ds, geom, quick_config(epochs=3))
    for a, b in zip(enc1.tensors() + proj1.tensors(), enc2.tensors() + proj2.tensors()):
        np.testing.assert_array_equal(a.values, b.values)
    assert log1.digest() == log2.digest()


def test_pretrain_too_few_subjects():
    ds = toy_dataset(n_subjects=1)
    with pytest.raises(PretrainError):
        pretrain(ds, toy_geometry(), quick_config())


def test_pretrain_rejects_fractional_second_window():
    ds = toy_dataset()
    geom = toy_geometry(n_samples=48)  # 1.5 s at fs=32
    with pytest.raises(PretrainError, match="whole number"):
        pretrain(ds, geom, quick_config())


def test_pretrain_numeric_abort_diagnostics():
    ds = toy_dataset(n_subjects=4)
    for s in ds.subjects:
        s.trials[0].data[:] = np.nan
    with pytest.raises(NumericAbort) as exc:
        pretrain(ds, toy_geometry(), quick_config())
    diag = exc.value.diagnostics
    assert diag["epoch"] == 0
    assert len(diag["subjects"]) == 2
    assert not math.isfinite(diag["loss"])
    assert diag["param_norms"] and all(
        math.isfinite(v) for v in diag["param_norms"].values()
    )


def test_pretrain_early_stop_restores_best():
    ds = toy_dataset(n_subjects=6)
    geom = toy_geometry()
    config = quick_config(epochs=40, patience=1, lr=2e-2)
    enc, proj, log = pretrain(ds, geom, config)
    assert len(log.rows) < 40
    assert any("early stop" in n for n in log.notes)
    vals = [r["val_loss"] for r in log.rows]
    best_epoch = int(np.argmin(vals))
    # the loop ran past the best epoch before giving up
    assert len(log.rows) > best_epoch + 1


def test_training_log_csv_roundtrip(tmp_path):
    log = TrainingLog()
    log.append(0, 1.25, 1.5, 7e-4)
    log.append(1, 1.1, None, 7e-4)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert float(rows[0]["train_loss"]) == 1.25
    assert float(rows[0]["val_loss"]) == 1.5
    assert rows[1]["val_loss"] == ""
    other = TrainingLog()
    other.append(0, 1.25, 1.5, 7e-4)
    assert other.digest() != log.digest()
    other.append(1, 1.1, None, 7e-4)
    assert other.digest() == log.digest()
