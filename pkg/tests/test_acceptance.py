"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

The desk run (criteria 4 to 6) trains the default model once per session on synthetic
performers and evaluates it on held-out performers seen from cam0 + cam1.
"""
import hashlib
import time

import numpy as np
import pytest
from scipy import ndimage

from test_pvh import naive_pvh, small_rig
from volcap import io as vio
from volcap.adversarial import balanced_accuracy
from volcap.camera import CameraIntrinsics, project, rotate_camera
from volcap.evaluation import ablation_volumes, mpjpe, run_ablation, volume_mse
from volcap.features import FeatureImage
from volcap.nn import checkpoint
from volcap.nn.gradcheck import TOLERANCE, run_suite
from volcap.pvh import GridSpec, VoxelGrid, build_pvh, rotate_vertical
from volcap.synthetic import GenerationConfig, SyntheticScene, generate_triplets, sample_motion
from volcap.temporal import SmootherConfig, jerk, smooth_sequence, train_smoother
from volcap.training import (
    TrainConfig, augment_sample, predict, pretrain_encoder, rotate_pose, train_full,
)

CPU_BUDGET = 30 * 60.0
TRAIN_GEN = dict(seeds=list(range(100)), n_frames=3, fps=10.0, low_view_ids=None,
                 low_view_count=[2, 4])
HELD_OUT_GEN = dict(seeds=[1000, 1001, 1002, 1003], n_frames=8, fps=10.0,
                    low_view_ids=["cam0", "cam1"])
DESK = dict(batch_size=8, pretrain_steps=600, full_steps=300, pretrain_lr=1e-4,
            encoder_lr=1e-4)
COUNTS = (2, 4, 8)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def desk():
    t0 = time.process_time()
    train = generate_triplets(GenerationConfig(**TRAIN_GEN))
    held = GenerationConfig(**HELD_OUT_GEN)
    vols = ablation_volumes(held, COUNTS)
    cfg = TrainConfig(**DESK)
    pre = pretrain_encoder(train, cfg)
    full = train_full(train, pre.encoder.state_dict(), cfg)
    report = run_ablation({"desk": full.generator}, held, COUNTS, train_poses=train.poses,
                          volumes=vols)
    cpu = time.process_time() - t0
    return dict(train=train, held=held, vols=vols, cfg=cfg, pre=pre, full=full,
                report=report, cpu=cpu)


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = run_suite()
    wall = time.perf_counter() - t0
    worst = max(err for _, err, _ in results)
    failed = [name for name, _, ok in results if not ok]
    ok = not failed and worst <= TOLERANCE and wall < 60
    verdict(capsys, 1, ok, f"{len(results)} cases, max rel err {worst:.2e}, {wall:.1f}s"
            + (f", failed {failed}" if failed else ""))


def test_criterion_2_pvh_oracle(capsys):
    rng = np.random.default_rng(2)
    spec = GridSpec.centred((0, 0, 1000), (16, 16, 16), 125.0)
    worst, wall = 0.0, 0.0
    for n in (1, 2, 4, 8):
        cams = small_rig(n)
        imgs = [FeatureImage(rng.uniform(size=(2, 24, 24))) for _ in cams]
        t0 = time.perf_counter()
        got = build_pvh(cams, imgs, spec).data
        wall += time.perf_counter() - t0
        worst = max(worst, float(np.max(np.abs(got - naive_pvh(cams, imgs, spec)))))
    verdict(capsys, 2, worst <= 1e-12 and wall < 10,
            f"max |fast - naive| {worst:.1e} over C in 1,2,4,8; build time {wall:.2f}s")


def test_criterion_3_geometry(capsys):
    intr = CameraIntrinsics(500.0, 320.0, 240.0, 640, 480)
    on_axis = project([0.0, 0.0, 1000.0], intr) == (320.0, 240.0)
    rng = np.random.default_rng(3)
    pts = rng.uniform([-1e3, -1e3, 1.0], [1e3, 1e3, 1e4], size=(500, 3))
    scales = rng.uniform(1e-3, 1e3, size=500)
    scale_err = max(np.max(np.abs(np.subtract(project(p, intr), project(s * p, intr))))
                    for p, s in zip(pts, scales))
    # rig rotation vs grid rotation on a rendered performer frame
    scene = SyntheticScene(GenerationConfig(seeds=[1000], n_frames=1))
    feats = scene.frame_features(1000, 0)
    spec = scene.grid_for(1000, 0)
    cams = scene.rig
    imgs = [feats[c.id] for c in cams]
    angle = 0.7
    base = build_pvh(cams, imgs, spec)
    turned = build_pvh([rotate_camera(c, angle, spec.centre) for c in cams], imgs, spec)
    equi = float(np.mean((turned.data - rotate_vertical(base, angle).data) ** 2))
    ok = on_axis and scale_err <= 1e-9 and equi < 1e-2
    verdict(capsys, 3, ok, f"on-axis exact {on_axis}, ray scale err {scale_err:.1e}, "
            f"rotation equivariance mse {equi:.2e}")


def test_criterion_4_volume_refinement(desk, capsys):
    rep = desk["report"]
    refined = rep.value("desk", 2, "refined_mse")
    unrefined = rep.value("desk", 2, "input_mse")
    # informational: best affine remap of the 2-view input onto the 8-view range
    v_high, _, _, v_low = desk["vols"]
    a, b = np.polyfit(v_low[2].ravel(), v_high.ravel(), 1)
    remap = volume_mse(a * v_low[2] + b, v_high)
    ok = refined <= 0.6 * unrefined and desk["cpu"] <= CPU_BUDGET
    verdict(capsys, 4, ok, f"refined mse {refined:.3e} vs input {unrefined:.3e} "
            f"(ratio {refined / unrefined:.4f}); affine-remap input {remap:.3e}; "
            f"{len(desk['train'])} train frames, cpu {desk['cpu']:.0f}s")


def test_criterion_5_pose_trend(desk, capsys):
    rep = desk["report"]
    base = rep.baseline_mpjpe
    m2, m4 = rep.value("desk", 2, "mpjpe"), rep.value("desk", 4, "mpjpe")
    e2, e4, e8 = (rep.value("desk", c, "input_mse") for c in COUNTS)
    trend = m2 <= 0.5 * base
    monotone = e2 >= e4 >= e8 == 0.0
    more_views = m4 <= 1.1 * m2
    verdict(capsys, 5, trend and monotone and more_views,
            f"MPJPE {m2:.1f}mm vs mean-pose {base:.1f}mm (ratio {m2 / base:.3f}); "
            f"input mse C2 {e2:.4f} >= C4 {e4:.4f} >= C8 {e8:.1f}: {monotone}; "
            f"MPJPE C4 {m4:.1f} <= 1.1 x C2: {more_views}")


def test_criterion_6_gan_contract(desk, capsys):
    train = desk["train"].subset(range(40))
    small = dict(DESK, full_steps=10)
    plain = train_full(train, None, TrainConfig(**small, adversarial=False))
    zero = train_full(train, None, TrainConfig(**small, mu_gan=0.0))
    identical = all(np.array_equal(v, zero.generator.state_dict()[k])
                    for k, v in plain.generator.state_dict().items())
    full = desk["full"]
    keys = ("d_loss", "g_loss", "volume", "joint", "total")
    finite = len(full.report.losses("full", "total")) == desk["cfg"].full_steps and all(
        np.all(np.isfinite(full.report.losses("full", k))) for k in keys)
    v_high, _, _, v_low = desk["vols"]
    fake, _ = predict(full.generator, v_low[2])
    disc = full.discriminator
    disc.eval()
    acc = balanced_accuracy(disc.forward(v_high), disc.forward(fake))
    verdict(capsys, 6, identical and finite and 0.45 <= acc <= 1.0,
            f"mu=0 bit-identical at step 10: {identical}; {desk['cfg'].full_steps} GAN steps "
            f"finite: {finite}; held-out balanced critic accuracy {acc:.3f}")


def _jittered(seeds, frames, rng):
    clean = [sample_motion(s, frames, 25.0).poses for s in seeds]
    return [c + rng.normal(0.0, 20.0, c.shape) for c in clean], clean


def test_criterion_7_smoothing(capsys):
    noisy, clean = _jittered(range(20), 120, np.random.default_rng(70))
    smoother, _, _ = train_smoother(noisy, clean, SmootherConfig(), steps=800, seed=0)
    test_noisy, test_clean = _jittered(range(500, 505), 120, np.random.default_rng(71))
    T = smoother.cfg.window
    out = [smooth_sequence(smoother, s) for s in test_noisy]
    j_in = np.mean([jerk(s[T - 1 :]) for s in test_noisy])
    j_out = np.mean([jerk(s[T - 1 :]) for s in out])
    e_in = np.mean([mpjpe(s[T - 1 :], c[T - 1 :]) for s, c in zip(test_noisy, test_clean)])
    e_out = np.mean([mpjpe(s[T - 1 :], c[T - 1 :]) for s, c in zip(out, test_clean)])
    ok = j_out <= 0.7 * j_in and e_out <= 1.1 * e_in
    verdict(capsys, 7, ok, f"jerk {j_in:.1f} -> {j_out:.1f} (ratio {j_out / j_in:.3f}); "
            f"final-frame MPJPE {e_in:.1f} -> {e_out:.1f} mm (ratio {e_out / e_in:.3f})")


def test_criterion_8_determinism_and_round_trips(desk, tmp_path, capsys):
    train = desk["train"].subset(range(24))
    cfg = TrainConfig(**dict(DESK, pretrain_steps=4, full_steps=6))
    pre_a, pre_b = pretrain_encoder(train, cfg), pretrain_encoder(train, cfg)
    rerun = checkpoint.dumps(pre_a.state_dict()) == checkpoint.dumps(pre_b.state_dict())
    enc = pre_a.encoder.state_dict()
    straight = train_full(train, enc, cfg)
    half = train_full(train, enc, cfg, until=3)
    resumed = train_full(train, enc, cfg, resume=checkpoint.loads(checkpoint.dumps(
        half.state_dict())))
    resume_ok = checkpoint.dumps(straight.state_dict()) == checkpoint.dumps(resumed.state_dict())
    # file formats
    v_high = desk["vols"][0]
    g = VoxelGrid(GridSpec.centred((0.0, 0.0, 1000.0), (32, 32, 32), 62.5), v_high[0])
    vio.write_volume(tmp_path / "v.pvh", g)
    back = vio.read_volume(tmp_path / "v.pvh")
    pvh_ok = back.data.tobytes() == g.data.tobytes() and back.spec == g.spec
    state = desk["full"].state_dict()
    again = checkpoint.loads(checkpoint.dumps(state))
    vckp_ok = set(again) == set(state) and all(
        again[k].tobytes() == np.asarray(v).tobytes() and again[k].shape == np.shape(v)
        for k, v in state.items())
    small = desk["train"].subset(range(6))
    loaded = vio.load_dataset(vio.save_dataset(small, tmp_path / "ds"))
    vio.save_dataset(loaded, tmp_path / "ds2")
    manifest_ok = (_digests(tmp_path / "ds") == _digests(tmp_path / "ds2")
                   and np.array_equal(loaded.v_low, small.v_low)
                   and np.array_equal(loaded.v_high, small.v_high)
                   and loaded.views == small.views)
    ok = rerun and resume_ok and pvh_ok and vckp_ok and manifest_ok
    verdict(capsys, 8, ok, f"rerun bit-identical {rerun}; resume == uninterrupted {resume_ok}; "
            f"PVH1 {pvh_ok}, VCKP {vckp_ok}, manifest {manifest_ok}")


def _digests(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _occupancy_at(vol, local, voxel):
    """Trilinear channel-0 occupancy at grid-local mm positions (N, 3)."""
    _, Z, Y, X = vol.shape
    idx = local / voxel + (np.array([X, Y, Z]) - 1) / 2.0
    return ndimage.map_coordinates(vol[0], idx[:, ::-1].T, order=1, mode="constant")


def test_criterion_9_augmentation_consistency(desk, capsys):
    v_high, poses, seeds, v_low = desk["vols"]
    pred = predict(desk["full"].generator, v_low[2])[1]
    rng = np.random.default_rng(9)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=3)
    drift = max(abs(mpjpe(rotate_pose(pred, a), rotate_pose(poses, a)) - mpjpe(pred, poses))
                for a in angles)
    # probes: every joint of the first frame of each held-out performer, both volumes
    voxel = desk["held"].voxel_size
    first = [int(np.flatnonzero(seeds == s)[0]) for s in np.unique(seeds)]
    worst, probes = np.inf, 0
    for i in first:
        for a in angles:
            rl, rh, rp = augment_sample(v_low[2][i], v_high[i], poses[i], angle=a)
            for orig, rot in ((v_low[2][i], rl), (v_high[i], rh)):
                occ0 = _occupancy_at(orig, poses[i].reshape(26, 3), voxel)
                occ1 = _occupancy_at(rot, rp.reshape(26, 3), voxel)
                worst = min(worst, float(np.min(occ1 - occ0)))
                probes += len(occ0)
    ok = drift <= 1e-9 and worst >= -0.1
    verdict(capsys, 9, ok, f"co-rotation MPJPE drift {drift:.1e}; {probes} probes, "
            f"min occupancy change {worst:+.4f} (limit -0.1)")
