import numpy as np
import pytest
from sklearn.base import clone

from conftest import TINY_MODEL, tiny_gen_cfg
from volcap.estimators import (
    DualLossEstimator, PoseSmootherEstimator, VisualHullTransformer, check_poses, check_volumes,
)
from volcap.exceptions import DataMismatch, ShapeMismatch
from volcap.pvh import GridSpec, build_pvh
from volcap.synthetic import SyntheticScene, sample_motion


def small_estimator(**kw):
    base = dict(model=TINY_MODEL, batch_size=4, pretrain_steps=3, full_steps=3,
                discriminator=dict(filters=[2, 3]))
    base.update(kw)
    return DualLossEstimator(**base)


def test_get_params_and_clone():
    est = small_estimator(lam=0.5)
    params = est.get_params()
    assert params["lam"] == 0.5 and params["model"] == TINY_MODEL
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_validation_helpers():
    with pytest.raises(ShapeMismatch):
        check_volumes(np.zeros((2, 2, 4, 4)))
    with pytest.raises(ShapeMismatch):
        check_volumes(np.zeros((1, 2, 4, 4, 4)), channels=1)
    with pytest.raises(ValueError):
        check_volumes(np.full((1, 1, 2, 2, 2), 1.5))
    with pytest.raises(ValueError):
        check_volumes(np.full((1, 1, 2, 2, 2), np.nan))
    with pytest.raises(ShapeMismatch):
        check_poses(np.zeros((3, 77)))
    with pytest.raises(DataMismatch):
        check_poses(np.zeros((3, 78)), n=2)


def test_dual_loss_estimator_fit_predict(tiny_ds):
    est = small_estimator()
    with pytest.raises(ValueError):
        est.fit(tiny_ds.v_low, tiny_ds.poses)
    est.fit(tiny_ds.v_low, tiny_ds.poses, v_high=tiny_ds.v_high)
    poses = est.predict(tiny_ds.v_low[:3])
    vols = est.transform(tiny_ds.v_low[:3])
    assert poses.shape == (3, 78) and vols.shape == tiny_ds.v_low[:3].shape
    assert est.score(tiny_ds.v_low[:3], tiny_ds.poses[:3]) <= 0
    again = small_estimator().fit(tiny_ds.v_low, tiny_ds.poses, v_high=tiny_ds.v_high)
    np.testing.assert_array_equal(again.predict(tiny_ds.v_low[:3]), poses)
    with pytest.raises(ShapeMismatch):
        est.predict(tiny_ds.v_low[:, :1])


def test_visual_hull_transformer_matches_build_pvh():
    cfg = tiny_gen_cfg(seeds=[1], n_frames=2)
    scene = SyntheticScene(cfg)
    frames = [[scene.frame_features(1, k)[c] for c in scene.cam_ids] for k in range(2)]
    vh = VisualHullTransformer(cameras=scene.rig, dims=(8, 8, 8), voxel_size=250.0)
    out = vh.fit().transform(frames)
    want = build_pvh(scene.rig, frames[1], GridSpec.centred((0, 0, 1000), (8, 8, 8), 250.0))
    np.testing.assert_array_equal(out[1], want.data)
    assert clone(vh).get_params()["voxel_size"] == 250.0


def test_pose_smoother_estimator():
    seqs = [sample_motion(s, 20).poses for s in range(2)]
    est = PoseSmootherEstimator(hidden=8, steps=10, batch_size=8).fit(seqs, seqs)
    out = est.predict(seqs)
    assert [o.shape for o in out] == [(20, 78), (20, 78)]
    np.testing.assert_array_equal(out[0][:4], seqs[0][:4])
    assert len(est.losses_) == 10
