"""Pinhole camera model: world-to-camera transforms and voxel projection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import DegenerateProjection, InvalidRotation, ParseError

_PLANE_EPS = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    ox: float
    oy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not (0 <= self.ox < self.width and 0 <= self.oy < self.height):
            raise ValueError(
                f"principal point ({self.ox}, {self.oy}) outside {self.width}x{self.height} image")


@dataclass(frozen=True)
class CameraExtrinsics:
    """World-to-camera rotation ``R`` and centre of projection ``cop`` (mm, world frame)."""

    R: np.ndarray
    cop: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        cop = np.array(self.cop, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        cop.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "cop", cop)

    def check_rotation(self, tol=1e-9):
        err = np.max(np.abs(self.R @ self.R.T - np.eye(3)))
        det = np.linalg.det(self.R)
        if err > tol or abs(det - 1.0) > tol:
            raise InvalidRotation(
                f"R is not a proper rotation (|RR^T - I| = {err:.3g}, det = {det:.6g})")


@dataclass(frozen=True)
class Camera:
    id: str
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics = field(repr=False)


def world_to_camera(p, ext: CameraExtrinsics):
    """Camera-frame coordinates ``R (p - COP)``; accepts (3,) or (N, 3)."""
    p = np.asarray(p, dtype=np.float64)
    return (p - ext.cop) @ ext.R.T


def project(pc, intr: CameraIntrinsics):
    """Pinhole projection of a camera-frame point to continuous pixel coordinates.

    Raises
    ------
    DegenerateProjection
        If the point lies in the camera plane (``|z| < 1e-9``).
    """
    pc = np.asarray(pc, dtype=np.float64)
    vz = pc[..., 2]
    if np.any(np.abs(vz) < _PLANE_EPS):
        raise DegenerateProjection("point lies in the camera plane")
    x = intr.f * pc[..., 0] / vz + intr.ox
    y = intr.f * pc[..., 1] / vz + intr.oy
    if pc.ndim == 1:
        return float(x), float(y)
    return np.stack([x, y], axis=-1)


def project_voxel(v, cam: Camera) -> Optional[tuple[float, float]]:
    """Pixel position of world point ``v`` in ``cam`` or ``None`` if unseen.

    Unseen covers points behind (or in) the camera plane and projections outside
    ``[0, width) x [0, height)``.
    """
    pc = world_to_camera(v, cam.extrinsics)
    if pc[2] < _PLANE_EPS:
        return None
    x, y = project(pc, cam.intrinsics)
    intr = cam.intrinsics
    if not (0 <= x < intr.width and 0 <= y < intr.height):
        return None
    return x, y


def project_points(points, cam: Camera):
    """Vectorised :func:`project_voxel` for ``points`` of shape (N, 3).

    Returns ``(xy, visible)``; ``xy`` rows for invisible points are NaN.
    """
    pc = world_to_camera(points, cam.extrinsics)
    vz = pc[:, 2]
    front = vz >= _PLANE_EPS
    safe_z = np.where(front, vz, 1.0)
    intr = cam.intrinsics
    x = intr.f * pc[:, 0] / safe_z + intr.ox
    y = intr.f * pc[:, 1] / safe_z + intr.oy
    visible = front & (x >= 0) & (x < intr.width) & (y >= 0) & (y < intr.height)
    xy = np.stack([x, y], axis=1)
    xy[~visible] = np.nan
    return xy, visible


def look_at(cop, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation for a camera at ``cop`` looking at ``target``.

    Camera axes: +z forward, +x image right, +y image down.
    """
    cop = np.asarray(cop, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - cop
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_camera(cam: Camera, angle, centre=(0.0, 0.0, 0.0)) -> Camera:
    """Rigidly rotate a camera about the vertical axis through ``centre``."""
    Rz = rot_z(angle)
    centre = np.asarray(centre, dtype=np.float64)
    cop = centre + Rz @ (cam.extrinsics.cop - centre)
    R = cam.extrinsics.R @ Rz.T
    return replace(cam, extrinsics=CameraExtrinsics(R, cop))


def ring_rig(n=8, radius=3000.0, height=1000.0, target=(0.0, 0.0, 1000.0),
             intrinsics: CameraIntrinsics | None = None, prefix="cam"):
    """``n`` cameras evenly spaced on a horizontal circle, all aimed at ``target``."""
    intrinsics = intrinsics or CameraIntrinsics(150.0, 64.0, 64.0, 128, 128)
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n
        cop = np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(Camera(f"{prefix}{i}", intrinsics, CameraExtrinsics(look_at(cop, target), cop)))
    return cams


# --------------------------------------------------------------------------
# Calibration documents: JSON array of camera objects.

_CALIB_KEYS = ("id", "f", "ox", "oy", "width", "height", "R", "cop")


def parse_calibration(text: str) -> list[Camera]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"calibration is not valid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise ParseError("calibration document must be a JSON array")
    cams, seen = [], set()
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict):
            raise ParseError(f"entry {i} is not an object")
        missing = [k for k in _CALIB_KEYS if k not in entry]
        if missing:
            raise ParseError(f"entry {i} is missing {', '.join(missing)}")
        R, cop = entry["R"], entry["cop"]
        if (not isinstance(R, list) or len(R) != 9 or not isinstance(cop, list)
                or len(cop) != 3):
            raise ParseError(f"entry {i}: R needs 9 numbers and cop 3 numbers")
        cam_id = entry["id"]
        if not isinstance(cam_id, str) or cam_id in seen:
            raise ParseError(f"entry {i}: camera id must be a unique string, got {cam_id!r}")
        seen.add(cam_id)
        width, height = entry["width"], entry["height"]
        if not (isinstance(width, int) and isinstance(height, int)):
            raise ParseError(f"entry {i}: width and height must be integers")
        try:
            intr = CameraIntrinsics(float(entry["f"]), float(entry["ox"]), float(entry["oy"]),
                                    width, height)
            ext = CameraExtrinsics(np.array(R, dtype=np.float64), np.array(cop, dtype=np.float64))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"entry {i}: {exc}") from None
        ext.check_rotation(tol=1e-6)
        cams.append(Camera(cam_id, intr, ext))
    return cams


def serialize_calibration(cams: Sequence[Camera]) -> str:
    doc = []
    for cam in cams:
        intr, ext = cam.intrinsics, cam.extrinsics
        doc.append({
            "id": cam.id, "f": intr.f, "ox": intr.ox, "oy": intr.oy,
            "width": intr.width, "height": intr.height,
            "R": [float(v) for v in ext.R.ravel()],
            "cop": [float(v) for v in ext.cop],
        })
    return json.dumps(doc, indent=2)


def load_calibration(path) -> list[Camera]:
    with open(path, encoding="utf-8") as fh:
        return parse_calibration(fh.read())


def save_calibration(path, cams: Sequence[Camera]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_calibration(cams))
