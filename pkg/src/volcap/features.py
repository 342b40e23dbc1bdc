"""Per-view 2D feature channels: occupancy mattes and joint-belief confidences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatch


def _check_unit_range(data, what):
    if data.size and (np.min(data) < 0.0 or np.max(data) > 1.0 or not np.all(np.isfinite(data))):
        raise ValueError(f"{what} values must lie in [0, 1]")


@dataclass
class FeatureImage:
    """Multi-channel raster with ``data`` shaped (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ValueError(f"feature image data must be (C, H, W), got {self.data.shape}")
        _check_unit_range(self.data, "feature image")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @classmethod
    def stack(cls, *images: "FeatureImage") -> "FeatureImage":
        return cls(np.concatenate([im.data for im in images], axis=0))


@dataclass
class BeliefStack:
    """Per-joint confidence maps, ``data`` shaped (joints, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError(f"belief stack must be (J>=1, H, W), got {self.data.shape}")
        _check_unit_range(self.data, "belief")

    @property
    def joints(self):
        return self.data.shape[0]


def _to_unit_rgb(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch(f"expected an (H, W, 3) RGB image, got {img.shape}")
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(np.float64) / 255.0
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def hsv_distance(frame, clean_plate):
    """Per-pixel L2 distance in HSV space with circular hue, all channels in [0, 1]."""
    from matplotlib.colors import rgb_to_hsv

    a = rgb_to_hsv(_to_unit_rgb(frame))
    b = rgb_to_hsv(_to_unit_rgb(clean_plate))
    dh = np.abs(a[..., 0] - b[..., 0])
    dh = np.minimum(dh, 1.0 - dh)
    ds = a[..., 1] - b[..., 1]
    dv = a[..., 2] - b[..., 2]
    return np.sqrt(dh * dh + ds * ds + dv * dv)


def compute_matte(frame, clean_plate, threshold: float) -> FeatureImage:
    """Soft occupancy ``clamp(d / threshold, 0, 1)`` from HSV distance to the clean plate.

    ``frame`` and ``clean_plate`` are (H, W, 3) RGB arrays, uint8 or floats in [0, 1].
    """
    if np.shape(frame) != np.shape(clean_plate):
        raise DimensionMismatch(
            f"frame {np.shape(frame)} and clean plate {np.shape(clean_plate)} differ in size")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    d = hsv_distance(frame, clean_plate)
    if threshold == 0:
        return FeatureImage((d > 0).astype(np.float64))
    return FeatureImage(np.clip(d / threshold, 0.0, 1.0))


def argmax_label(b: BeliefStack):
    """Per-pixel winning joint index and its confidence; ties go to the lowest index."""
    labels = np.argmax(b.data, axis=0)
    conf = np.take_along_axis(b.data, labels[None], axis=0)[0]
    return labels, conf


def max_confidence_channel(b: BeliefStack) -> FeatureImage:
    return FeatureImage(b.data.max(axis=0))


def sample_bilinear_many(img: FeatureImage, xs, ys, channel: int):
    """Bilinear samples at arrays of coordinates; outside ``[0, w-1] x [0, h-1]`` (or NaN) is 0."""
    if not 0 <= channel < img.channels:
        raise IndexError(f"channel {channel} out of range for {img.channels} channels")
    plane = img.data[channel]
    h, w = plane.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x = np.where(inside, xs, 0.0)
    y = np.where(inside, ys, 0.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
    bottom = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
    return np.where(inside, top * (1 - fy) + bottom * fy, 0.0)


def sample_bilinear(img: FeatureImage, x: float, y: float, channel: int) -> float:
    return float(sample_bilinear_many(img, np.array([x]), np.array([y]), channel)[0])


def feature_channels(matte: FeatureImage, beliefs: BeliefStack | None, per_joint=False):
    """Assemble the lifted channel layout: matte first, then either the max-over-joints
    confidence (two channels total) or one channel per joint."""
    if beliefs is None:
        return matte
    if matte.data.shape[1:] != beliefs.data.shape[1:]:
        raise DimensionMismatch("matte and belief maps differ in size")
    extra = FeatureImage(beliefs.data) if per_joint else max_confidence_channel(beliefs)
    return FeatureImage.stack(matte, extra)
