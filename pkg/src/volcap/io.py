"""File formats: PVH1 volumes, skeleton CSV, the dataset manifest, and images."""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .pvh import GridSpec, VoxelGrid
from .synthetic import N_JOINTS, POSE_DIM, GenerationConfig, TripletDataset

PVH_MAGIC = b"PVH1"
_PVH_HEADER = struct.Struct("<4s4I4f")


# --------------------------------------------------------------------------
# PVH1: magic, u32 X, Y, Z, channels, f32 voxel_size, f32 origin[3], f32 payload
# indexed ((c * Z + z) * Y + y) * X + x.

def volume_to_bytes(g: VoxelGrid) -> bytes:
    x, y, z = g.spec.dims
    header = _PVH_HEADER.pack(PVH_MAGIC, x, y, z, g.channels, g.spec.voxel_size, *g.spec.origin)
    return header + np.ascontiguousarray(g.data, dtype="<f4").tobytes()


def volume_from_bytes(buf: bytes) -> VoxelGrid:
    if len(buf) < _PVH_HEADER.size or buf[:4] != PVH_MAGIC:
        raise FormatError("not a PVH1 volume (bad magic)")
    _, x, y, z, c, vs, ox, oy, oz = _PVH_HEADER.unpack_from(buf)
    count = x * y * z * c
    payload = buf[_PVH_HEADER.size :]
    if len(payload) != 4 * count:
        raise FormatError(f"PVH1 payload has {len(payload)} bytes, expected {4 * count}")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, z, y, x).astype(np.float64)
    return VoxelGrid(GridSpec((x, y, z), float(vs), (float(ox), float(oy), float(oz))), data)


def write_volume(path, g: VoxelGrid):
    Path(path).write_bytes(volume_to_bytes(g))


def read_volume(path) -> VoxelGrid:
    return volume_from_bytes(Path(path).read_bytes())


def write_feature_image(path, img):
    """Feature rasters reuse PVH1 with Z = 1 and unit voxels."""
    c, h, w = img.data.shape
    write_volume(path, VoxelGrid(GridSpec((w, h, 1), 1.0), img.data.reshape(c, 1, h, w)))


def read_feature_image(path):
    from .features import FeatureImage

    g = read_volume(path)
    return FeatureImage(g.data[:, 0])


# --------------------------------------------------------------------------
# Skeleton CSV

CSV_HEADER = ("frame", "joint_index", "x_mm", "y_mm", "z_mm")


def poses_to_csv(poses, frames=None) -> str:
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, N_JOINTS, 3)
    frames = range(len(poses)) if frames is None else frames
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for f, pose in zip(frames, poses):
        for j, (x, y, z) in enumerate(pose):
            writer.writerow([f, j, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}"])
    return buf.getvalue()


def poses_from_csv(text: str):
    """Returns ``(frames, poses)`` with poses shaped (F, 78)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise FormatError(f"skeleton CSV must start with header {','.join(CSV_HEADER)}")
    by_frame: dict[int, np.ndarray] = {}
    order = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise FormatError(f"line {line}: expected 5 columns")
        try:
            f, j = int(row[0]), int(row[1])
            xyz = [float(v) for v in row[2:]]
        except ValueError:
            raise FormatError(f"line {line}: malformed number") from None
        if not 0 <= j < N_JOINTS:
            raise FormatError(f"line {line}: joint index {j} out of range")
        if f not in by_frame:
            by_frame[f] = np.full((N_JOINTS, 3), np.nan)
            order.append(f)
        by_frame[f][j] = xyz
    poses = np.stack([by_frame[f].reshape(POSE_DIM) for f in order]) if order else \
        np.zeros((0, POSE_DIM))
    if np.isnan(poses).any():
        raise FormatError("skeleton CSV is missing joints for some frames")
    return order, poses


def write_poses(path, poses, frames=None):
    Path(path).write_text(poses_to_csv(poses, frames), encoding="utf-8")


def read_poses(path):
    return poses_from_csv(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Dataset directory: manifest.json + volumes/ + poses/

MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    v_l: str
    v_h: str
    pose: str
    frame: int
    seed: int
    views: list


@dataclass
class Manifest:
    root: Path
    entries: list
    config: dict
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "config": self.config,
            "entries": [vars(e) for e in self.entries],
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, root) -> "Manifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from None
        if doc.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {doc.get('version')!r}")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        m = cls(Path(root), entries, doc["config"], doc["version"])
        for e in entries:
            for rel in (e.v_l, e.v_h, e.pose):
                if not (m.root / rel).is_file():
                    raise FormatError(f"manifest references missing file {rel}")
        return m


def save_dataset(ds: TripletDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "poses").mkdir(exist_ok=True)
    entries = []
    for i in range(len(ds)):
        seed, k = ds.frame_ids[i]
        stem = f"s{seed:04d}_f{k:05d}"
        spec = _float32_spec(ds.grid_spec(i))
        write_volume(out / "volumes" / f"{stem}_low.pvh", VoxelGrid(spec, ds.v_low[i]))
        write_volume(out / "volumes" / f"{stem}_high.pvh", VoxelGrid(spec, ds.v_high[i]))
        write_poses(out / "poses" / f"{stem}.csv", ds.poses[i : i + 1], [k])
        entries.append(ManifestEntry(f"volumes/{stem}_low.pvh", f"volumes/{stem}_high.pvh",
                                     f"poses/{stem}.csv", int(k), int(seed), list(ds.views[i])))
    manifest = Manifest(out, entries, ds.config.to_dict())
    path = out / "manifest.json"
    path.write_text(manifest.to_json(), encoding="utf-8")
    return path


def _float32_spec(spec: GridSpec) -> GridSpec:
    o = tuple(float(np.float32(v)) for v in spec.origin)
    return GridSpec(spec.dims, float(np.float32(spec.voxel_size)), o)


def load_manifest(path) -> Manifest:
    path = Path(path)
    return Manifest.from_json(path.read_text(encoding="utf-8"), path.parent)


def load_dataset(path) -> TripletDataset:
    """Rebuild a :class:`TripletDataset` from a manifest written by :func:`save_dataset`.

    Poses come back at the CSV's 6-decimal precision.
    """
    m = load_manifest(path)
    v_low, v_high, poses, centres = [], [], [], []
    for e in m.entries:
        lo = read_volume(m.root / e.v_l)
        hi = read_volume(m.root / e.v_h)
        v_low.append(lo.data)
        v_high.append(hi.data)
        centres.append(lo.spec.centre)
        poses.append(read_poses(m.root / e.pose)[1][0])
    cfg = GenerationConfig.from_dict(m.config)
    return TripletDataset(np.stack(v_low), np.stack(v_high), np.stack(poses), np.stack(centres),
                          [(e.seed, e.frame) for e in m.entries], [e.views for e in m.entries],
                          cfg)


# --------------------------------------------------------------------------
# 8-bit RGB rasters (PNG via Pillow, binary PPM natively)

def read_rgb(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path.read_bytes())
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_ppm(buf: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError("only 8-bit binary PPM (P6, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf[pos + 1 : pos + 1 + 3 * w * h], dtype=np.uint8)
    if data.size != 3 * w * h:
        raise FormatError("truncated PPM payload")
    return data.reshape(h, w, 3)


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())
