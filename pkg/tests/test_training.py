import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from conftest import TINY_MODEL, tiny_gen_cfg
from volcap.exceptions import ConfigError, ConfigMismatch, EmptyDataset
from volcap.synthetic import generate_triplets
from volcap.training import (
    RunReport, TrainConfig, augment_sample, batch_rng, init_encoder, make_batch, pretrain_encoder,
    rotate_pose, sequences_by_seed, train_full, train_smoother_stage,
)


def cfg(**kw):
    base = dict(batch_size=8, model=TINY_MODEL, pretrain_steps=20, full_steps=10,
                smoother_steps=5, discriminator=dict(filters=[2, 3]))
    base.update(kw)
    return TrainConfig(**base)


def same_state(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def mpjpe(a, b):
    return float(np.mean(np.linalg.norm((a - b).reshape(-1, 26, 3), axis=-1)))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(seq_len=0)
    with pytest.raises(ConfigError):
        TrainConfig(pretrain_lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"model": {"n_enc": [1, 2]}})
    c = cfg()
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    assert c.smoother_config().window == 5


def test_pretrain_reduces_joint_loss(tiny_ds):
    r = pretrain_encoder(tiny_ds, cfg(pretrain_steps=200))
    loss = r.report.losses("pretrain", "joint")
    assert len(loss) == 200 and np.all(np.isfinite(loss))
    assert loss[-1] < 0.5 * loss[0]


def test_pretrain_deterministic(tiny_ds):
    a = pretrain_encoder(tiny_ds, cfg()).state_dict()
    b = pretrain_encoder(tiny_ds, cfg()).state_dict()
    assert same_state(a, b)
    c = pretrain_encoder(tiny_ds, cfg(seed=1)).state_dict()
    assert not same_state(a, c)


def test_pretrain_lr_overrides_lr(tiny_ds):
    base = pretrain_encoder(tiny_ds, cfg(pretrain_steps=3)).state_dict()
    same = pretrain_encoder(tiny_ds, cfg(pretrain_steps=3, pretrain_lr=1e-3)).state_dict()
    slow = pretrain_encoder(tiny_ds, cfg(pretrain_steps=3, pretrain_lr=1e-4)).state_dict()
    assert same_state(base, same) and not same_state(base, slow)


def test_encoder_lr_only_changes_encoder_updates(tiny_ds):
    enc = pretrain_encoder(tiny_ds, cfg(pretrain_steps=2)).encoder.state_dict()
    base = train_full(tiny_ds, enc, cfg(full_steps=1, adversarial=False)).generator.state_dict()
    slow = train_full(tiny_ds, enc, cfg(full_steps=1, adversarial=False, encoder_lr=1e-5))
    slow = slow.generator.state_dict()
    assert all(np.array_equal(base[k], slow[k]) for k in base if k.startswith("gen.dec"))
    assert not np.array_equal(base["gen.enc_dense.w"], slow["gen.enc_dense.w"])


def test_pose_head_starts_at_mean_pose(tiny_ds):
    enc = init_encoder(tiny_ds, cfg())
    enc.eval()
    pred = enc.pose(tiny_ds.v_low[:4])
    base = np.broadcast_to(tiny_ds.poses.mean(0), pred.shape)
    assert mpjpe(pred, tiny_ds.poses[:4]) < 1.5 * mpjpe(base, tiny_ds.poses[:4])


def test_pretrain_zero_steps_is_init(tiny_ds):
    r = pretrain_encoder(tiny_ds, cfg(pretrain_steps=0))
    init = init_encoder(tiny_ds, cfg()).state_dict()
    assert same_state(r.encoder.state_dict(), init) and r.step == 0


def test_stage_separation(tiny_ds):
    r = pretrain_encoder(tiny_ds, cfg())
    keys = r.state_dict().keys()
    assert not any(k.startswith(("gen.dec", "disc.")) for k in keys)
    assert all(n.startswith("enc") for n, _ in r.encoder.named_layers())


def test_empty_and_mismatched_datasets(tiny_ds):
    with pytest.raises(EmptyDataset):
        pretrain_encoder(tiny_ds.subset([]), cfg())
    with pytest.raises(ConfigMismatch):
        pretrain_encoder(tiny_ds, cfg(model=dict(TINY_MODEL, grid=[16, 16, 16, 2])))
    enc = pretrain_encoder(tiny_ds, cfg(pretrain_steps=0)).encoder.state_dict()
    with pytest.raises(ConfigMismatch):
        train_full(tiny_ds, enc, cfg(model=dict(TINY_MODEL, embedding_dim=3)))


def test_mu_zero_equals_dual_loss_only(tiny_ds):
    enc = pretrain_encoder(tiny_ds, cfg()).encoder.state_dict()
    a = train_full(tiny_ds, enc, cfg(mu_gan=0.0))
    b = train_full(tiny_ds, enc, cfg(adversarial=False))
    assert a.step == b.step == 10
    assert same_state(a.generator.state_dict(), b.generator.state_dict())


def test_full_losses_finite_and_reported(tiny_ds):
    r = train_full(tiny_ds, None, cfg())
    for key in ("volume", "joint", "d_loss", "g_loss", "total", "d_acc"):
        v = r.report.losses("full", key)
        assert len(v) == 10 and np.all(np.isfinite(v))
    lines = r.report.to_jsonl().splitlines()
    assert len(lines) == 12 and "config" in json.loads(lines[0])


def test_report_rejects_non_finite():
    rep = RunReport({})
    with pytest.raises(FloatingPointError):
        rep.add("full", 0, {"volume": float("nan")})


@pytest.mark.parametrize("stage", ["pretrain", "full"])
def test_resume_equals_uninterrupted(tiny_ds, stage):
    c = cfg()
    if stage == "pretrain":
        whole = pretrain_encoder(tiny_ds, c).state_dict()
        half = pretrain_encoder(tiny_ds, c, until=11).state_dict()
        resumed = pretrain_encoder(tiny_ds, c, resume=half).state_dict()
    else:
        whole = train_full(tiny_ds, None, c).state_dict()
        half = train_full(tiny_ds, None, c, until=4).state_dict()
        resumed = train_full(tiny_ds, None, c, resume=half).state_dict()
    assert same_state(whole, resumed)


def test_batches_are_pure_in_seed_and_step(tiny_ds):
    a = make_batch(tiny_ds, batch_rng(0, "full", 7), 4, True)
    b = make_batch(tiny_ds, batch_rng(0, "full", 7), 4, True)
    c = make_batch(tiny_ds, batch_rng(0, "full", 8), 4, True)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a[2], c[2])


def test_augment_zero_angle_identity(tiny_ds):
    v_l, v_h, p = tiny_ds.v_low[0], tiny_ds.v_high[0], tiny_ds.poses[0]
    out = augment_sample(v_l, v_h, p, angle=0.0)
    for x, y in zip(out, (v_l, v_h, p)):
        np.testing.assert_array_equal(x, y)


def test_pose_rotation_quarter_turn():
    pose = np.zeros(78)
    pose[:3] = (100, 0, 0)
    np.testing.assert_allclose(rotate_pose(pose, np.pi / 2)[:3], (0, 100, 0), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * np.pi), st.integers(0, 2**31))
def test_co_rotation_preserves_mpjpe(angle, seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.normal(size=(2, 4, 78)) * 300
    assert abs(mpjpe(rotate_pose(pred, angle), rotate_pose(gt, angle)) - mpjpe(pred, gt)) <= 1e-9


def _occupancy_at(vol, local, voxel):
    """Trilinear channel-0 occupancy at grid-local mm positions (N, 3)."""
    _, Z, Y, X = vol.shape
    idx = local / voxel + (np.array([X, Y, Z]) - 1) / 2.0
    return ndimage.map_coordinates(vol[0], idx[:, ::-1].T, order=1, mode="constant")


@pytest.mark.parametrize("angle", [0.3, np.pi / 2, 2.0, 4.5])
def test_probe_point_consistency(angle):
    gen = tiny_gen_cfg(seeds=[4], n_frames=1, image_size=64, focal=75.0, grid_dims=(24, 24, 24),
                       voxel_size=83.3, low_view_ids=["cam0", "cam1"], low_view_count=None)
    ds = generate_triplets(gen)
    v_l, v_h, pose = ds.v_low[0], ds.v_high[0], ds.poses[0]
    rl, rh, rp = augment_sample(v_l, v_h, pose, angle=angle)
    before = pose.reshape(26, 3)
    after = rp.reshape(26, 3)
    for orig, rot in ((v_l, rl), (v_h, rh)):
        occ0 = _occupancy_at(orig, before, gen.voxel_size)
        occ1 = _occupancy_at(rot, after, gen.voxel_size)
        assert np.all(occ1 >= occ0 - 0.1)
        # probes sit on the hull: above the empty-space floor of 2 ** -views
        floor = 0.5 ** (2 if orig is v_l else 8)
        assert np.mean(occ0 > 1.5 * floor) > 0.7


def test_smoother_stage_runs(tiny_ds):
    r = pretrain_encoder(tiny_ds, cfg())
    smoother, rep = train_smoother_stage(r.encoder, tiny_ds, cfg())
    assert len(rep.losses("smoother", "pose")) == 5
    seqs = sequences_by_seed(tiny_ds, tiny_ds.poses)
    assert [len(s) for s in seqs] == [25, 25]
    np.testing.assert_array_equal(seqs[1][3], tiny_ds.poses[28])
