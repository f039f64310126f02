"""Schedule, early stopping, checkpoints, coverage voting, both steps."""

import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from axcrf.crf import AXcrfParams
from axcrf.model import unary_forward
from axcrf.pointcloud import PointCloud, generate_synthetic, slice_blocks
from axcrf.training import (ArtificialLabelSet, CorruptHeaderError, EarlyStopper,
                            ModelCheckpoint, NumericError, TrainConfig,
                            TruncatedPayloadError, VersionMismatchError,
                            checkpoint_id, coverage_vote_predict, evaluate_oa,
                            generate_artificial_labels, learning_rate,
                            load_checkpoint, pipeline_forward, save_checkpoint,
                            train_step1, train_step2)

TINY = dict(batch_blocks=2, n_sample=48, K=4, block_channels=(6, 6),
            block_strides=(1, 2), C_delta=4, hidden=6, dropout_rate=0.0,
            offset_scale=4.0, D_list=(1, 2), crf_K=4, r=2, patience=3)


def tiny_setup(seed=0, C=3, n=420):
    cloud = generate_synthetic("strata", N=n, C=C, noise=0.1, seed=seed)
    blocks = slice_blocks(cloud, side=60.0, shift=30.0, min_points=16)
    assert len(blocks) >= 4, "tiny setup needs a few blocks"
    half = len(blocks) // 2
    return cloud, blocks[:half], blocks[half:]


# -- learning-rate schedule -----------------------------------------------------


def test_schedule_published_pins():
    config = TrainConfig(C=2, lr=0.005)
    assert learning_rate(config, 0) == 0.005
    assert learning_rate(config, 4999) == 0.005
    assert learning_rate(config, 5000) == pytest.approx(0.004, abs=1e-15)
    assert learning_rate(config, 10000) == pytest.approx(0.0032, abs=1e-15)


def test_schedule_floor_never_violated():
    config = TrainConfig(C=2, lr=0.005)
    for t in (0, 10**5, 10**6, 10**7, 10**8):
        assert learning_rate(config, t) >= 1e-6
    assert learning_rate(config, 10**8) == 1e-6


def test_schedule_is_pure_function():
    config = TrainConfig(C=2)
    seq1 = [learning_rate(config, t) for t in range(0, 20000, 777)]
    seq2 = [learning_rate(config, t) for t in range(0, 20000, 777)]
    assert seq1 == seq2
    with pytest.raises(ValueError):
        learning_rate(config, -1)


# -- early stopping ---------------------------------------------------------------


def test_early_stop_fires_after_exactly_patience_epochs():
    stopper = EarlyStopper(10)
    assert not stopper.update(0.5)
    fired_at = None
    for i in range(15):
        if stopper.update(0.5):     # no strict improvement ever again
            fired_at = i
            break
    assert fired_at == 9            # the 10th stagnant epoch fires, not earlier


def test_early_stop_resets_on_improvement():
    stopper = EarlyStopper(3)
    values = [0.5, 0.5, 0.6, 0.6, 0.6]
    fired = [stopper.update(v) for v in values]
    assert fired == [False, False, False, False, False]
    assert stopper.update(0.6)      # third consecutive non-improvement


def test_early_stop_counts_epoch_pairs():
    stopper = EarlyStopper(4)
    stopper.update(0.9, epochs=0)   # baseline seed consumes no budget
    assert not stopper.update(0.8, epochs=2)
    assert stopper.update(0.8, epochs=2)
    with pytest.raises(ValueError):
        EarlyStopper(0)


# -- config validation ---------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(C=1)
    with pytest.raises(ValueError):
        TrainConfig(C=2, lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(C=2, lr_decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(C=2, momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(C=2, momentum=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(C=2, patience=0)
    with pytest.raises(ValueError):
        TrainConfig(C=2, dropout_rate=1.0)
    with pytest.raises(ValueError):
        TrainConfig(C=2, block_channels=(8,), block_strides=(1, 2))


# -- coverage voting -------------------------------------------------------------------


def test_coverage_vote_covers_every_member():
    cloud, train_blocks, _ = tiny_setup()
    model_fwd = lambda p, f: np.tile([1.0, 0.0, 0.0], (p.shape[0], 1))
    pi, labels, passes = coverage_vote_predict(cloud, train_blocks, model_fwd,
                                               n_sample=32, global_seed=0, salt=1)
    members = np.unique(np.concatenate([b.member_indices for b in train_blocks]))
    np.testing.assert_array_equal(np.sort(pi), members)
    np.testing.assert_array_equal(labels, np.zeros(len(pi)))
    assert passes >= len(train_blocks)


def test_coverage_vote_deterministic():
    cloud, train_blocks, _ = tiny_setup()
    fwd = lambda p, f: np.column_stack([p[:, 2], -p[:, 2], np.zeros(p.shape[0])])
    a = coverage_vote_predict(cloud, train_blocks, fwd, 32, 0, salt=7)
    b = coverage_vote_predict(cloud, train_blocks, fwd, 32, 0, salt=7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[2] == b[2]


def test_evaluate_oa_against_known_labels():
    cloud, train_blocks, _ = tiny_setup()
    C = cloud.C

    def oracle_fwd(p, f):
        # indexing trick: recover each sampled point's true label by position
        key = {tuple(row): l for row, l in zip(cloud.positions, cloud.labels)}
        lab = np.array([key[tuple(row)] for row in p])
        U = np.zeros((p.shape[0], C))
        U[np.arange(len(lab)), lab] = 5.0
        return U

    assert evaluate_oa(cloud, train_blocks, oracle_fwd, 32, 0) == 1.0
    unlabeled = PointCloud(cloud.positions, cloud.features, None, cloud.C)
    with pytest.raises(ValueError):
        evaluate_oa(unlabeled, train_blocks, oracle_fwd, 32, 0)


# -- step 1 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def step1_run(tmp_path_factory):
    cloud, train_blocks, val_blocks = tiny_setup()
    config = TrainConfig(C=cloud.C, lr=0.02, max_epochs=3, seed=0, **TINY)
    log = tmp_path_factory.mktemp("logs") / "step1.jsonl"
    ckpt = train_step1(cloud, train_blocks, val_blocks, config, log_path=log)
    return SimpleNamespace(cloud=cloud, train_blocks=train_blocks,
                           val_blocks=val_blocks, config=config, ckpt=ckpt,
                           log=log)


def test_step1_returns_best_checkpoint(step1_run):
    ckpt = step1_run.ckpt
    assert 0.0 <= ckpt.best_val_oa <= 1.0
    assert ckpt.axcrf is None and ckpt.thetas is None
    assert ckpt.iteration >= 0
    assert ckpt.config is step1_run.config


def test_step1_log_format(step1_run):
    lines = [json.loads(l) for l in open(step1_run.log)]
    assert len(lines) <= 3
    for i, rec in enumerate(lines):
        assert rec["step"] == 1 and rec["epoch"] == i
        assert rec["kind"] == "labeled"
        assert math.isfinite(rec["mean_loss"])
        assert 0.0 <= rec["val_oa"] <= 1.0
        assert rec["lr"] > 0


def test_step1_deterministic(step1_run):
    s = step1_run
    again = train_step1(s.cloud, s.train_blocks, s.val_blocks, s.config)
    assert checkpoint_id(again) == checkpoint_id(s.ckpt)


def test_step1_validation(step1_run):
    s = step1_run
    with pytest.raises(ValueError):
        train_step1(s.cloud, [], s.val_blocks, s.config)
    unlabeled = PointCloud(s.cloud.positions, s.cloud.features, None, s.cloud.C)
    with pytest.raises(ValueError):
        train_step1(unlabeled, s.train_blocks, s.val_blocks, s.config)


def test_numeric_blowup_raises(step1_run):
    s = step1_run
    config = TrainConfig(C=s.cloud.C, lr=1e9, max_epochs=4, seed=0, **TINY)
    with pytest.raises(NumericError):
        with np.errstate(all="ignore"):
            train_step1(s.cloud, s.train_blocks, s.val_blocks, config)


# -- artificial labels ---------------------------------------------------------------------


def test_artificial_labels_cover_and_freeze(step1_run):
    cloud, val_blocks, ckpt = step1_run.cloud, step1_run.val_blocks, step1_run.ckpt
    unlabeled = PointCloud(cloud.positions, cloud.features, None, cloud.C)
    art = generate_artificial_labels(ckpt, unlabeled, val_blocks)
    members = np.unique(np.concatenate([b.member_indices for b in val_blocks]))
    np.testing.assert_array_equal(np.sort(art.point_indices), members)
    assert art.labels.min() >= 0 and art.labels.max() < cloud.C
    assert art.checkpoint_id == checkpoint_id(ckpt)
    assert art.passes >= len(val_blocks)
    h = art.content_hash()
    assert art.content_hash() == h
    dense = art.dense_labels()
    assert dense.shape == (cloud.n_points,)
    outside = np.setdiff1d(np.arange(cloud.n_points), art.point_indices)
    assert np.all(dense[outside] == -1)
    with pytest.raises(ValueError):
        generate_artificial_labels(ckpt, unlabeled, [])


def test_artificial_label_set_validation():
    cloud = generate_synthetic("strata", N=50, C=2, noise=0.1, seed=1)
    with pytest.raises(ValueError):
        ArtificialLabelSet(cloud=cloud, blocks=[], point_indices=np.array([0, 1]),
                           labels=np.array([0]), checkpoint_id="x", passes=1)
    with pytest.raises(ValueError):
        ArtificialLabelSet(cloud=cloud, blocks=[], point_indices=np.array([0]),
                           labels=np.array([5]), checkpoint_id="x", passes=1)


# -- step 2 -----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def step2_run(step1_run, tmp_path_factory):
    s = step1_run
    unlabeled = PointCloud(s.cloud.positions, s.cloud.features, None, s.cloud.C)
    art = generate_artificial_labels(s.ckpt, unlabeled, s.val_blocks)
    log = tmp_path_factory.mktemp("logs2") / "step2.jsonl"
    ck2 = train_step2(s.ckpt, s.cloud, s.train_blocks, art, s.val_blocks,
                      config=s.config, thetas=(1.0, 0.1, 1.0), log_path=log)
    return SimpleNamespace(cloud=s.cloud, train_blocks=s.train_blocks,
                           val_blocks=s.val_blocks, config=s.config,
                           ckpt=s.ckpt, art=art, ck2=ck2, log=log)


def test_step2_attaches_refinement(step2_run):
    ck2 = step2_run.ck2
    assert ck2.axcrf is not None
    assert ck2.thetas == (1.0, 0.1, 1.0)
    assert len(ck2.axcrf.levels) == len(TINY["D_list"])
    assert 0.0 <= ck2.best_val_oa <= 1.0


def test_step2_log_interleaves_and_reports_baseline(step2_run):
    lines = [json.loads(l) for l in open(step2_run.log)]
    assert lines[0]["kind"] == "init" and lines[0]["epoch"] == -1
    assert lines[0]["mean_loss"] is None
    assert 0.0 <= lines[0]["val_oa"] <= 1.0
    kinds = [rec["kind"] for rec in lines[1:]]
    assert kinds == ["labeled", "artificial"] * (len(kinds) // 2)
    # validation is measured per pair, on the artificial record
    for rec in lines[1:]:
        assert (rec["val_oa"] is None) == (rec["kind"] == "labeled")


def test_step2_never_returns_worse_than_baseline(step2_run):
    lines = [json.loads(l) for l in open(step2_run.log)]
    assert step2_run.ck2.best_val_oa >= lines[0]["val_oa"]


def test_step2_requires_thetas_and_rejects_bad_ones(step2_run):
    s = step2_run
    with pytest.raises(ValueError, match="grid"):
        train_step2(s.ckpt, s.cloud, s.train_blocks, s.art, s.val_blocks,
                    config=s.config)
    with pytest.raises(ValueError):
        train_step2(s.ckpt, s.cloud, s.train_blocks, s.art, s.val_blocks,
                    config=s.config, thetas=(0.0, 0.1, 1.0))


def test_step2_deterministic(step2_run):
    s = step2_run
    again = train_step2(s.ckpt, s.cloud, s.train_blocks, s.art, s.val_blocks,
                        config=s.config, thetas=(1.0, 0.1, 1.0))
    assert checkpoint_id(again) == checkpoint_id(s.ck2)


# -- pipeline forward ----------------------------------------------------------------------------


def test_pipeline_forward_without_stack_is_unary(step1_run):
    cloud, train_blocks, ckpt = (step1_run.cloud, step1_run.train_blocks,
                                 step1_run.ckpt)
    idx = train_blocks[0].member_indices[:40]
    pos, feat = cloud.positions[idx], cloud.features[idx]
    np.testing.assert_array_equal(pipeline_forward(ckpt.model, None, pos, feat),
                                  unary_forward(pos, feat, ckpt.model))


def test_pipeline_forward_with_untrained_stack_keeps_argmax(step1_run):
    cloud, train_blocks, ckpt = (step1_run.cloud, step1_run.train_blocks,
                                 step1_run.ckpt)
    idx = train_blocks[0].member_indices[:40]
    pos, feat = cloud.positions[idx], cloud.features[idx]
    ax = AXcrfParams.initial(cloud.C, D_list=(1, 2), K=4, r=2)
    refined = pipeline_forward(ckpt.model, ax, pos, feat)
    base = unary_forward(pos, feat, ckpt.model)
    assert refined.shape == base.shape
    assert not np.array_equal(refined, base)
    np.testing.assert_array_equal(refined.argmax(axis=1), base.argmax(axis=1))


# -- checkpoint serialization -----------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(step2_run, tmp_path):
    ck2 = step2_run.ck2
    path = tmp_path / "model.ckpt"
    save_checkpoint(ck2, path)
    back = load_checkpoint(path)
    assert checkpoint_id(back) == checkpoint_id(ck2)
    assert back.best_val_oa == ck2.best_val_oa
    assert back.iteration == ck2.iteration
    assert back.thetas == ck2.thetas
    for a, b in zip(back.model.blocks, ck2.model.blocks):
        np.testing.assert_array_equal(a.conv_kernel, b.conv_kernel)
        np.testing.assert_array_equal(a.lift.w1, b.lift.w1)
    for la, lb in zip(back.axcrf.levels, ck2.axcrf.levels):
        assert la.bilateral_weight == lb.bilateral_weight
        np.testing.assert_array_equal(la.compat, lb.compat)
        assert (la.K, la.D, la.r) == (lb.K, lb.D, lb.r)
    assert back.config.as_dict() == ck2.config.as_dict()


def test_checkpoint_scaler_round_trip(step1_run, tmp_path):
    ckpt = step1_run.ckpt
    path = tmp_path / "s1.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert (back.scaler is None) == (ckpt.scaler is None)
    assert back.axcrf is None


def test_checkpoint_corrupt_header(tmp_path, step1_run):
    ckpt = step1_run.ckpt
    path = tmp_path / "bad.ckpt"
    save_checkpoint(ckpt, path)
    raw = path.read_bytes()
    path.write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(CorruptHeaderError):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path, step1_run):
    ckpt = step1_run.ckpt
    path = tmp_path / "short.ckpt"
    save_checkpoint(ckpt, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 64])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path, step1_run):
    ckpt = step1_run.ckpt
    path = tmp_path / "old.ckpt"
    save_checkpoint(ckpt, path)
    raw = bytearray(path.read_bytes())
    raw[5] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError, match="99"):
        load_checkpoint(path)
