"""Multi-channel probabilistic visual hulls and volume resampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .camera import Camera, project_points, rot_z
from .exceptions import EmptyViewList, IndexOutOfRange, RigMismatch
from .features import FeatureImage, sample_bilinear_many


@dataclass(frozen=True)
class GridSpec:
    """Regular voxel grid; ``origin`` is the world position (mm) of voxel (0, 0, 0)'s centre."""

    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def centre(self) -> np.ndarray:
        return np.asarray(self.origin) + self.voxel_size * (np.asarray(self.dims) - 1) / 2.0

    @classmethod
    def centred(cls, centre, dims=(32, 32, 32), voxel_size=62.5) -> "GridSpec":
        origin = np.asarray(centre, dtype=np.float64) - voxel_size * (np.asarray(dims) - 1) / 2.0
        return cls(tuple(dims), voxel_size, tuple(origin))

    @property
    def shape_zyx(self):
        x, y, z = self.dims
        return (z, y, x)


@dataclass
class VoxelGrid:
    """Occupancy probabilities with ``data`` shaped (channels, Z, Y, X)."""

    spec: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.shape[1:] != self.spec.shape_zyx:
            raise ValueError(
                f"data shape {self.data.shape} does not match grid dims {self.spec.dims}")
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise ValueError("voxel values must lie in [0, 1]")

    @property
    def channels(self):
        return self.data.shape[0]


def voxel_centre(spec: GridSpec, ix: int, iy: int, iz: int) -> np.ndarray:
    for i, n in zip((ix, iy, iz), spec.dims):
        if not 0 <= i < n:
            raise IndexOutOfRange(f"voxel index ({ix}, {iy}, {iz}) outside dims {spec.dims}")
    return np.asarray(spec.origin) + spec.voxel_size * np.array([ix, iy, iz], dtype=np.float64)


def voxel_centres(spec: GridSpec) -> np.ndarray:
    """World positions of all voxel centres, shape (Z, Y, X, 3)."""
    x, y, z = spec.dims
    iz, iy, ix = np.meshgrid(np.arange(z), np.arange(y), np.arange(x), indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
    return np.asarray(spec.origin) + spec.voxel_size * idx


def sigmoid(p):
    return 1.0 / (1.0 + np.exp(-p))


def per_view_likelihood(v, cam: Camera, img: FeatureImage, channel: int) -> float:
    """Feature value seen by ``cam`` at the projection of ``v``; 0 when unseen."""
    xy, visible = project_points(np.asarray(v, dtype=np.float64).reshape(1, 3), cam)
    if not visible[0]:
        return 0.0
    return float(sample_bilinear_many(img, xy[:, 0], xy[:, 1], channel)[0])


def fuse_views(likelihoods: Sequence[float]) -> float:
    """Product over views of ``1 / (1 + exp(-p_c))``."""
    if len(likelihoods) == 0:
        raise EmptyViewList("at least one view likelihood is required")
    out = 1.0
    for p in likelihoods:
        out *= 1.0 / (1.0 + np.exp(-p))
    return float(out)


def occupancy_range(n_views: int):
    """Values a fused voxel can take for likelihoods in [0, 1]."""
    return 0.5 ** n_views, float(sigmoid(1.0)) ** n_views


def build_pvh(cams: Sequence[Camera], imgs: Sequence[FeatureImage], spec: GridSpec,
              channels: int | None = None, normalize: bool = False) -> VoxelGrid:
    """Fuse per-view feature images into a probabilistic visual hull.

    Every voxel/channel holds ``prod_c sigmoid(I_c(project(v), phi))``, with
    unseen projections contributing ``sigmoid(0)``.  With ``normalize`` the
    values are mapped affinely from ``occupancy_range(C)`` onto [0, 1].
    """
    if len(cams) != len(imgs) or len(cams) == 0:
        raise RigMismatch(f"{len(cams)} cameras but {len(imgs)} feature images")
    phi = imgs[0].channels if channels is None else channels
    if any(im.channels != phi for im in imgs):
        raise RigMismatch("all feature images must have the same channel count")
    pts = voxel_centres(spec).reshape(-1, 3)
    occ = np.ones((phi, pts.shape[0]))
    for cam, img in zip(cams, imgs):
        xy, visible = project_points(pts, cam)
        for ch in range(phi):
            p = sample_bilinear_many(img, xy[:, 0], xy[:, 1], ch)
            occ[ch] *= 1.0 / (1.0 + np.exp(-p))
    if normalize:
        lo, hi = occupancy_range(len(cams))
        occ = np.clip((occ - lo) / (hi - lo), 0.0, 1.0)
    return VoxelGrid(spec, occ.reshape((phi,) + spec.shape_zyx))


def crop_subject(g: VoxelGrid, bbox_centre, out_dims) -> VoxelGrid:
    """Subvolume of ``out_dims`` voxels centred (to the nearest voxel) on ``bbox_centre``.

    Voxels falling outside the source grid are 0.
    """
    out_dims = tuple(int(d) for d in out_dims)
    if min(out_dims) < 1:
        raise ValueError("crop dims must be positive")
    vs = g.spec.voxel_size
    want = np.asarray(bbox_centre, dtype=np.float64) - vs * (np.asarray(out_dims) - 1) / 2.0
    offset = np.rint((want - np.asarray(g.spec.origin)) / vs).astype(int)
    spec = GridSpec(out_dims, vs, tuple(np.asarray(g.spec.origin) + offset * vs))
    out = np.zeros((g.channels,) + spec.shape_zyx)
    # per-axis overlap in (x, y, z) order
    src_lo = np.maximum(offset, 0)
    src_hi = np.minimum(offset + np.asarray(out_dims), np.asarray(g.spec.dims))
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - offset
        dst_hi = src_hi - offset
        out[:, dst_lo[2]:dst_hi[2], dst_lo[1]:dst_hi[1], dst_lo[0]:dst_hi[0]] = \
            g.data[:, src_lo[2]:src_hi[2], src_lo[1]:src_hi[1], src_lo[0]:src_hi[0]]
    return VoxelGrid(spec, out)


def rotate_vertical_array(data: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a (C, Z, Y, X) array counter-clockwise about its central z axis.

    Trilinear resampling; samples from outside the grid are 0.
    """
    if angle == 0:
        return data.copy()
    _, Z, Y, X = data.shape
    cx, cy = (X - 1) / 2.0, (Y - 1) / 2.0
    iz, iy, ix = np.meshgrid(np.arange(Z), np.arange(Y), np.arange(X), indexing="ij")
    inv = rot_z(-angle)
    u = ix - cx
    w = iy - cy
    sx = cx + inv[0, 0] * u + inv[0, 1] * w
    sy = cy + inv[1, 0] * u + inv[1, 1] * w
    coords = np.stack([iz.astype(np.float64), sy, sx])
    # snap rounding noise (e.g. cos(pi/2)) onto the lattice so border samples survive
    snapped = np.rint(coords)
    coords = np.where(np.abs(coords - snapped) < 1e-9, snapped, coords)
    out = np.empty_like(data)
    for c in range(data.shape[0]):
        out[c] = ndimage.map_coordinates(data[c], coords, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def rotate_vertical(g: VoxelGrid, angle: float) -> VoxelGrid:
    return VoxelGrid(g.spec, rotate_vertical_array(g.data, angle))
