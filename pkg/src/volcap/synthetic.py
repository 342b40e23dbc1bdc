"""Procedural performer: a 26-joint capsule body animated by smooth sinusoids,
rendered analytically into an 8-camera ring to produce training triplets
``(low-view PVH, high-view PVH, pose)``.

Coordinates are millimetres, z up.  At zero yaw the performer faces +y, so the
left side is -x.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera import Camera, CameraIntrinsics, project_points, ring_rig, rot_z
from .exceptions import ConfigError
from .features import BeliefStack, FeatureImage, feature_channels
from .pvh import GridSpec, build_pvh

# Canonical joint order.  Never reorder: pose vectors and checkpoints depend on it.
JOINT_NAMES = (
    "pelvis", "spine1", "spine2", "neck", "head", "head_top",
    "l_clavicle", "l_shoulder", "l_elbow", "l_wrist", "l_hand",
    "r_clavicle", "r_shoulder", "r_elbow", "r_wrist", "r_hand",
    "l_hip", "l_knee", "l_ankle", "l_foot", "l_toe",
    "r_hip", "r_knee", "r_ankle", "r_foot", "r_toe",
)
N_JOINTS = len(JOINT_NAMES)
POSE_DIM = 3 * N_JOINTS
J = {name: i for i, name in enumerate(JOINT_NAMES)}

_PARENTS = {
    "pelvis": "pelvis", "spine1": "pelvis", "spine2": "spine1", "neck": "spine2",
    "head": "neck", "head_top": "head",
}
for _side in "lr":
    _PARENTS.update({
        f"{_side}_clavicle": "spine2", f"{_side}_shoulder": f"{_side}_clavicle",
        f"{_side}_elbow": f"{_side}_shoulder", f"{_side}_wrist": f"{_side}_elbow",
        f"{_side}_hand": f"{_side}_wrist",
        f"{_side}_hip": "pelvis", f"{_side}_knee": f"{_side}_hip",
        f"{_side}_ankle": f"{_side}_knee", f"{_side}_foot": f"{_side}_ankle",
        f"{_side}_toe": f"{_side}_foot",
    })


def _rest_offsets():
    off = {
        "pelvis": (0, 0, 0), "spine1": (0, 0, 180), "spine2": (0, 0, 200),
        "neck": (0, 0, 220), "head": (0, 0, 100), "head_top": (0, 0, 100),
    }
    for side, sx in (("l", -1.0), ("r", 1.0)):
        off.update({
            f"{side}_clavicle": (40 * sx, 0, 190), f"{side}_shoulder": (150 * sx, 0, 0),
            f"{side}_elbow": (0, 0, -280), f"{side}_wrist": (0, 0, -250),
            f"{side}_hand": (0, 0, -90),
            f"{side}_hip": (100 * sx, 0, -60), f"{side}_knee": (0, 0, -420),
            f"{side}_ankle": (0, 0, -410), f"{side}_foot": (0, 60, -60),
            f"{side}_toe": (0, 110, 0),
        })
    return np.array([off[n] for n in JOINT_NAMES], dtype=np.float64)


# Capsule radius (mm) of the bone ending at each joint.
_BONE_RADIUS = {
    "spine1": 120, "spine2": 115, "neck": 60, "head": 70, "head_top": 95,
    "clavicle": 55, "shoulder": 55, "elbow": 45, "wrist": 38, "hand": 35,
    "hip": 95, "knee": 70, "ankle": 52, "foot": 45, "toe": 40,
}

PELVIS_HEIGHT = 950.0


@dataclass(frozen=True)
class Skeleton:
    joints: tuple[str, ...]
    parent: tuple[int, ...]
    rest_offsets: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.joints) != N_JOINTS or len(self.parent) != N_JOINTS:
            raise ValueError("skeleton must have exactly 26 joints")
        if self.parent[0] != 0 or np.any(self.rest_offsets[0] != 0):
            raise ValueError("joint 0 must be a root with zero offset")
        for j in range(1, N_JOINTS):
            if not 0 <= self.parent[j] < j:
                raise ValueError("parents must precede children (tree order)")


def default_skeleton(scale: float = 1.0) -> Skeleton:
    """Canonical 26-joint tree; ``scale`` multiplies every bone length."""
    parent = tuple(J[_PARENTS[n]] for n in JOINT_NAMES)
    return Skeleton(JOINT_NAMES, parent, _rest_offsets() * scale)


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float


@dataclass
class CapsuleBody:
    capsules: list[Capsule]

    @classmethod
    def from_joints(cls, joints: np.ndarray, skeleton: Skeleton, radius_scale: float = 1.0):
        caps = []
        for j in range(1, N_JOINTS):
            key = skeleton.joints[j].split("_", 1)[-1]
            r = _BONE_RADIUS.get(key, _BONE_RADIUS.get(skeleton.joints[j]))
            caps.append(Capsule(joints[skeleton.parent[j]].copy(), joints[j].copy(),
                                r * radius_scale))
        return cls(caps)

    def contains(self, points, dilate=0.0):
        """Mask of ``points`` (N, 3) inside the union of (dilated) capsules."""
        points = np.asarray(points, dtype=np.float64)
        inside = np.zeros(len(points), dtype=bool)
        for cap in self.capsules:
            inside |= _point_segment_dist2(points, cap.a, cap.b) <= (cap.radius + dilate) ** 2
        return inside


def _point_segment_dist2(p, a, b):
    e = b - a
    c = float(e @ e)
    w = p - a
    u = np.clip((w @ e) / c, 0.0, 1.0) if c > 0 else np.zeros(len(p))
    d = w - u[:, None] * e
    return np.einsum("ij,ij->i", d, d)


@dataclass
class MotionClip:
    frames: np.ndarray  # (T, 26, 3) world joint positions
    fps: float
    skeleton: Skeleton = field(repr=False)
    radius_scale: float = 1.0

    @property
    def poses(self) -> np.ndarray:
        """(T, 78) joint-major pose vectors."""
        return self.frames.reshape(len(self.frames), POSE_DIM)

    def body(self, t: int) -> CapsuleBody:
        return CapsuleBody.from_joints(self.frames[t], self.skeleton, self.radius_scale)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def forward_kinematics(skeleton: Skeleton, local_rots: np.ndarray, root_pos, root_rot):
    """World joint positions from per-joint local rotations (26, 3, 3)."""
    pos = np.zeros((N_JOINTS, 3))
    glob = np.zeros((N_JOINTS, 3, 3))
    pos[0] = root_pos
    glob[0] = root_rot @ local_rots[0]
    for j in range(1, N_JOINTS):
        p = skeleton.parent[j]
        pos[j] = pos[p] + glob[p] @ skeleton.rest_offsets[j]
        glob[j] = glob[p] @ local_rots[j]
    return pos


def body_proportions(seed: int):
    """Per-performer bone-length and girth scales drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0xB0D7])
    return float(rng.uniform(0.9, 1.05)), float(rng.uniform(0.85, 1.15))


def sample_motion(seed: int, n_frames: int, fps: float = 25.0) -> MotionClip:
    """Deterministic clip: sinusoidal limb swings, torso twist and slow global turns."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    scale, radius_scale = body_proportions(seed)
    skel = default_skeleton(scale)
    rng = np.random.default_rng([seed, 0x5EED])
    u = rng.uniform

    def swing(amp_lo, amp_hi, f_lo=0.3, f_hi=0.9):
        return u(amp_lo, amp_hi), u(f_lo, f_hi), u(0, 2 * np.pi)

    yaw0 = u(0, 2 * np.pi)
    turn_rate = u(-0.6, 0.6)
    turn = swing(0.2, 0.8, 0.05, 0.2)
    wander = [swing(50, 300, 0.03, 0.1) for _ in range(2)]
    bob = swing(5, 30, 0.8, 1.6)
    twist = swing(0.0, 0.4)
    lean = swing(0.0, 0.25)
    nod = swing(0.0, 0.3)
    arm = {s: dict(flex=swing(0.2, 1.1), flex0=u(-0.3, 0.9), abd=swing(0.0, 0.5),
                   abd0=u(0.05, 1.2), elbow=swing(0.1, 0.8), elbow0=u(0.1, 1.4))
           for s in "lr"}
    leg = {s: dict(flex=swing(0.05, 0.6), flex0=u(-0.2, 0.5), abd0=u(0.0, 0.25),
                   knee=swing(0.05, 0.7), knee0=u(0.0, 0.6))
           for s in "lr"}
    centre = np.array([u(-300, 300), u(-300, 300), PELVIS_HEIGHT * scale])

    def wave(params, t):
        amp, freq, phase = params
        return amp * np.sin(2 * np.pi * freq * t + phase)

    frames = np.zeros((n_frames, N_JOINTS, 3))
    for k in range(n_frames):
        t = k / fps
        rots = np.tile(np.eye(3), (N_JOINTS, 1, 1))
        rots[J["spine1"]] = rot_z(wave(twist, t) * 0.5) @ _rx(-wave(lean, t) * 0.5)
        rots[J["spine2"]] = rot_z(wave(twist, t) * 0.5) @ _rx(-wave(lean, t) * 0.5)
        rots[J["neck"]] = rot_z(wave(nod, t + 0.7)) @ _rx(-wave(nod, t) * 0.5)
        for side, sign in (("l", 1.0), ("r", -1.0)):
            a = arm[side]
            flex = a["flex0"] + wave(a["flex"], t)
            abd = a["abd0"] + wave(a["abd"], t)
            elbow = a["elbow0"] + abs(wave(a["elbow"], t))
            rots[J[f"{side}_shoulder"]] = _ry(sign * abd) @ _rx(flex)
            rots[J[f"{side}_elbow"]] = _rx(elbow)
            g = leg[side]
            rots[J[f"{side}_hip"]] = _ry(sign * g["abd0"]) @ _rx(g["flex0"] + wave(g["flex"], t))
            rots[J[f"{side}_knee"]] = _rx(-(g["knee0"] + abs(wave(g["knee"], t))))
        yaw = yaw0 + turn_rate * t + wave(turn, t)
        root = centre + np.array([wave(wander[0], t), wave(wander[1], t), wave(bob, t)])
        frames[k] = forward_kinematics(skel, rots, root, rot_z(yaw))
    return MotionClip(frames, fps, skel, radius_scale)


# --------------------------------------------------------------------------
# Rendering

def _pixel_rays(cam: Camera, res):
    w, h = res
    intr = cam.intrinsics
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack([(xs - intr.ox) / intr.f, (ys - intr.oy) / intr.f, np.ones_like(xs)], -1)
    d = d_cam.reshape(-1, 3) @ cam.extrinsics.R  # R^T d for every row
    return cam.extrinsics.cop, d


def _ray_capsule_hit(o, d, cap: Capsule):
    """Exact test: does the ray ``o + t d, t >= 0`` come within ``radius`` of the segment?"""
    a, b, r2 = cap.a, cap.b, cap.radius ** 2
    e = b - a
    w0 = o - a
    A = np.einsum("ij,ij->i", d, d)
    B = d @ e
    C = float(e @ e)
    D = d @ w0
    E = float(e @ w0)
    best = np.full(len(d), np.inf)

    def ray_point(wp):
        t = np.maximum(0.0, -(d @ wp) / A)
        q = wp + t[:, None] * d
        return np.einsum("ij,ij->i", q, q)

    best = np.minimum(best, ray_point(w0))
    if C > 0:
        best = np.minimum(best, ray_point(o - b))
        s = np.clip(E / C, 0.0, 1.0)
        q = w0 - s * e
        best = np.minimum(best, float(q @ q))
        denom = A * C - B * B
        ok = denom > 1e-12 * A * C
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (B * E - C * D) / denom
            s = (A * E - B * D) / denom
        ok &= (t >= 0) & (s >= 0) & (s <= 1)
        if np.any(ok):
            q = w0 + t[ok, None] * d[ok] - s[ok, None] * e
            best[ok] = np.minimum(best[ok], np.einsum("ij,ij->i", q, q))
    return best <= r2


def render_occupancy(body: CapsuleBody, cam: Camera, res=None) -> FeatureImage:
    """Binary silhouette: 1 where the ray through a pixel centre hits any capsule."""
    res = res or (cam.intrinsics.width, cam.intrinsics.height)
    o, d = _pixel_rays(cam, res)
    hit = np.zeros(len(d), dtype=bool)
    dn = d / np.linalg.norm(d, axis=1, keepdims=True)
    for cap in body.capsules:
        # cull with the capsule's bounding sphere before the exact test
        centre = 0.5 * (cap.a + cap.b)
        bound = 0.5 * np.linalg.norm(cap.b - cap.a) + cap.radius
        wc = o - centre
        t = np.maximum(0.0, -(dn @ wc))
        q = wc + t[:, None] * dn
        cand = np.flatnonzero(np.einsum("ij,ij->i", q, q) <= bound * bound * (1 + 1e-9) + 1e-6)
        if len(cand):
            hit[cand] |= _ray_capsule_hit(o, d[cand], cap)
    return FeatureImage(hit.reshape(res[1], res[0]).astype(np.float64))


def render_joint_beliefs(pose, cam: Camera, res=None, sigma: float = 3.0) -> BeliefStack:
    """Unit-peak isotropic Gaussian per joint at its projection; unseen joints give 0."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    res = res or (cam.intrinsics.width, cam.intrinsics.height)
    w, h = res
    joints = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
    xy, visible = project_points(joints, cam)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    out = np.zeros((len(joints), h, w))
    for j in np.flatnonzero(visible):
        gx = np.exp(-0.5 * ((xs - xy[j, 0]) / sigma) ** 2)
        gy = np.exp(-0.5 * ((ys - xy[j, 1]) / sigma) ** 2)
        out[j] = gy[:, None] * gx[None, :]
    return BeliefStack(out)


# --------------------------------------------------------------------------
# Triplet generation

@dataclass
class GenerationConfig:
    seeds: list = field(default_factory=lambda: [0])
    n_frames: int = 10
    fps: float = 25.0
    n_cams: int = 8
    rig_radius: float = 3000.0
    rig_height: float = 1000.0
    image_size: int = 128
    focal: float = 150.0
    low_view_ids: Optional[list] = field(default_factory=lambda: ["cam0", "cam1"])
    # random contiguous arc per frame when set; a list draws the arc length per frame too
    low_view_count: Optional[object] = None
    grid_dims: tuple = (32, 32, 32)
    voxel_size: float = 62.5
    belief_sigma: float = 3.0
    per_joint_channels: bool = False
    normalize: bool = False
    arc_seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["grid_dims"] = list(self.grid_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown generation config keys: {sorted(unknown)}")
        cfg = cls(**known)
        cfg.grid_dims = tuple(cfg.grid_dims)
        return cfg


def make_rig(cfg: GenerationConfig):
    c = (cfg.image_size - 1) / 2.0
    intr = CameraIntrinsics(cfg.focal, c, c, cfg.image_size, cfg.image_size)
    return ring_rig(cfg.n_cams, cfg.rig_radius, cfg.rig_height,
                    (0.0, 0.0, cfg.rig_height), intr)


def neighbouring_arc(cam_ids: Sequence[str], start: int, count: int):
    n = len(cam_ids)
    return [cam_ids[(start + i) % n] for i in range(count)]


@dataclass
class TripletDataset:
    """In-memory triplets.  Volumes are (N, channels, Z, Y, X), poses (N, 78) in
    millimetres relative to each frame's grid centre."""

    v_low: np.ndarray
    v_high: np.ndarray
    poses: np.ndarray
    centres: np.ndarray
    frame_ids: list
    views: list
    config: GenerationConfig

    def __len__(self):
        return len(self.poses)

    def grid_spec(self, i) -> GridSpec:
        cfg = self.config
        return GridSpec.centred(self.centres[i], cfg.grid_dims, cfg.voxel_size)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.v_low, self.v_high, self.poses, self.centres):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def subset(self, idx):
        idx = list(idx)
        return TripletDataset(self.v_low[idx], self.v_high[idx], self.poses[idx],
                              self.centres[idx], [self.frame_ids[i] for i in idx],
                              [self.views[i] for i in idx], self.config)


class SyntheticScene:
    """Renders frames of the configured clips on demand for any camera subset."""

    def __init__(self, cfg: GenerationConfig):
        self.cfg = cfg
        self.rig = make_rig(cfg)
        self.cam_ids = [c.id for c in self.rig]
        self._by_id = {c.id: c for c in self.rig}
        if cfg.low_view_ids is not None:
            self._check_ids(cfg.low_view_ids)
        else:
            counts = self._counts()
            if not counts or not all(1 <= int(c) <= cfg.n_cams for c in counts):
                raise ConfigError("set low_view_ids or low_view_count values between 1 and n_cams")
        self.clips = {seed: sample_motion(seed, cfg.n_frames, cfg.fps) for seed in cfg.seeds}

    def _check_ids(self, ids):
        for vid in ids:
            if vid not in self._by_id:
                raise ConfigError(f"unknown view id {vid!r}")

    def _counts(self):
        c = self.cfg.low_view_count
        if c is None:
            return []
        return [int(v) for v in c] if isinstance(c, (list, tuple)) else [int(c)]

    def frames(self):
        return [(seed, k) for seed in self.cfg.seeds for k in range(self.cfg.n_frames)]

    def low_views(self, index: int):
        cfg = self.cfg
        if cfg.low_view_ids is not None:
            return list(cfg.low_view_ids)
        rng = np.random.default_rng([cfg.arc_seed, index])
        start = int(rng.integers(cfg.n_cams))
        counts = self._counts()
        count = counts[0] if len(counts) == 1 else counts[int(rng.integers(len(counts)))]
        return neighbouring_arc(self.cam_ids, start, count)

    def frame_features(self, seed: int, k: int, view_ids=None):
        """Feature images for one frame, keyed by camera id."""
        cfg = self.cfg
        clip = self.clips[seed]
        body = clip.body(k)
        ids = self.cam_ids if view_ids is None else list(view_ids)
        self._check_ids(ids)
        res = (cfg.image_size, cfg.image_size)
        out = {}
        for cid in ids:
            cam = self._by_id[cid]
            matte = render_occupancy(body, cam, res)
            beliefs = render_joint_beliefs(clip.frames[k], cam, res, cfg.belief_sigma)
            out[cid] = feature_channels(matte, beliefs, cfg.per_joint_channels)
        return out

    def grid_for(self, seed: int, k: int) -> GridSpec:
        pelvis = self.clips[seed].frames[k][0]
        return GridSpec.centred(pelvis, self.cfg.grid_dims, self.cfg.voxel_size)

    def volume(self, seed, k, view_ids, features=None):
        features = features or self.frame_features(seed, k, view_ids)
        spec = self.grid_for(seed, k)
        cams = [self._by_id[v] for v in view_ids]
        g = build_pvh(cams, [features[v] for v in view_ids], spec, normalize=self.cfg.normalize)
        # float32-representable so persisted PVH1 volumes reload bit-identically
        return g.data.astype(np.float32).astype(np.float64)

    def local_pose(self, seed, k):
        frame = self.clips[seed].frames[k]
        return (frame - self.grid_for(seed, k).centre).reshape(POSE_DIM)


def generate_triplets(cfg: GenerationConfig) -> TripletDataset:
    """Render every configured frame into ``(V_L, V_H, pose)``; deterministic in ``cfg``."""
    scene = SyntheticScene(cfg)
    v_low, v_high, poses, centres, ids, views = [], [], [], [], [], []
    for index, (seed, k) in enumerate(scene.frames()):
        feats = scene.frame_features(seed, k)
        low = scene.low_views(index)
        vh = scene.volume(seed, k, scene.cam_ids, feats)
        vl = vh.copy() if low == scene.cam_ids else scene.volume(seed, k, low, feats)
        v_low.append(vl)
        v_high.append(vh)
        poses.append(scene.local_pose(seed, k))
        centres.append(scene.grid_for(seed, k).centre)
        ids.append((seed, k))
        views.append(low)
    return TripletDataset(np.stack(v_low), np.stack(v_high), np.stack(poses),
                          np.stack(centres), ids, views, cfg)
