"""scikit-learn style wrappers around the pipeline (fit / transform / predict, get_params)."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .evaluation import mpjpe
from .exceptions import DataMismatch, ShapeMismatch
from .model import ModelConfig
from .pvh import GridSpec, build_pvh
from .synthetic import POSE_DIM, GenerationConfig, TripletDataset
from .temporal import SmootherConfig, smooth_sequence, train_smoother
from .training import TrainConfig, predict, predict_pose, pretrain_encoder, train_full


def check_volumes(X, channels=None, dims_zyx=None) -> np.ndarray:
    """Validate a (N, channels, Z, Y, X) float array with values in [0, 1]."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 5:
        raise ShapeMismatch(f"expected (N, C, Z, Y, X) volumes, got shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ShapeMismatch(f"expected {channels} channels, got {X.shape[1]}")
    if dims_zyx is not None and X.shape[2:] != tuple(dims_zyx):
        raise ShapeMismatch(f"expected grid {tuple(dims_zyx)}, got {X.shape[2:]}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("volume values must lie in [0, 1]")
    return X


def check_poses(y, n=None) -> np.ndarray:
    y = check_array(y, dtype=np.float64)
    if y.shape[1] != POSE_DIM:
        raise ShapeMismatch(f"expected (N, {POSE_DIM}) poses, got {y.shape}")
    if n is not None and len(y) != n:
        raise DataMismatch(f"{len(y)} poses for {n} volumes")
    return y


def check_sequences(seqs) -> list:
    out = [check_poses(s) for s in seqs]
    if not out:
        raise DataMismatch("no sequences given")
    return out


class VisualHullTransformer(TransformerMixin, BaseEstimator):
    """Feature images per frame -> PVH volumes on a fixed grid around ``centre``."""

    def __init__(self, cameras=None, dims=(32, 32, 32), voxel_size=62.5,
                 centre=(0.0, 0.0, 1000.0), normalize=False):
        self.cameras = cameras
        self.dims = dims
        self.voxel_size = voxel_size
        self.centre = centre
        self.normalize = normalize

    def fit(self, X=None, y=None):
        if not self.cameras:
            raise ValueError("cameras must be a non-empty list")
        self.spec_ = GridSpec.centred(self.centre, self.dims, self.voxel_size)
        return self

    def transform(self, X):
        """``X``: sequence of frames, each a list of FeatureImage in camera order."""
        check_is_fitted(self, "spec_")
        return np.stack([build_pvh(self.cameras, list(frame), self.spec_,
                                   normalize=self.normalize).data for frame in X])


def _as_dataset(v_low, v_high, poses) -> TripletDataset:
    n = len(v_low)
    return TripletDataset(v_low, v_high, poses, np.zeros((n, 3)), [(0, i) for i in range(n)],
                          [[] for _ in range(n)], GenerationConfig())


class DualLossEstimator(RegressorMixin, BaseEstimator):
    """Encoder pretraining then adversarial dual-loss training of the full generator.

    ``fit(X, y, v_high=...)``: X are sparse-view volumes, y the (N, 78) poses.
    ``predict`` returns poses, ``transform`` refined volumes, ``score`` negative MPJPE.
    """

    def __init__(self, model=None, batch_size=32, pretrain_steps=200, full_steps=300,
                 lam=1e-3, mu_gan=1e-2, lr=1e-3, pretrain_lr=None, encoder_lr=None, seed=0,
                 augment=True, adversarial=True, discriminator=None):
        self.model = model
        self.batch_size = batch_size
        self.pretrain_steps = pretrain_steps
        self.full_steps = full_steps
        self.lam = lam
        self.mu_gan = mu_gan
        self.lr = lr
        self.pretrain_lr = pretrain_lr
        self.encoder_lr = encoder_lr
        self.seed = seed
        self.augment = augment
        self.adversarial = adversarial
        self.discriminator = discriminator

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, pretrain_steps=self.pretrain_steps,
            full_steps=self.full_steps, lam=self.lam, mu_gan=self.mu_gan, lr=self.lr,
            pretrain_lr=self.pretrain_lr, encoder_lr=self.encoder_lr, seed=self.seed,
            augment=self.augment, adversarial=self.adversarial, model=dict(self.model or {}),
            discriminator=dict(self.discriminator or {}))

    def _grid(self):
        return ModelConfig.from_dict(dict(self.model or {})).grid

    def fit(self, X, y, v_high=None):
        if v_high is None:
            raise ValueError("fit needs the dense-view target volumes as v_high")
        gx, gy, gz, phi = self._grid()
        X = check_volumes(X, phi, (gz, gy, gx))
        v_high = check_volumes(v_high, phi, (gz, gy, gx))
        y = check_poses(y, len(X))
        if v_high.shape != X.shape:
            raise DataMismatch("v_high must match X in shape")
        cfg = self.train_config()
        ds = _as_dataset(X, v_high, y)
        pre = pretrain_encoder(ds, cfg)
        full = train_full(ds, pre.encoder.state_dict(), cfg)
        self.generator_ = full.generator
        self.report_ = pre.report
        self.report_.extend(full.report)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "generator_")
        gx, gy, gz, phi = self.generator_.cfg.grid
        return check_volumes(X, phi, (gz, gy, gx))

    def predict(self, X):
        return predict(self.generator_, self._check_X(X))[1]

    def transform(self, X):
        return predict(self.generator_, self._check_X(X))[0]

    def predict_encoder_pose(self, X):
        return predict_pose(self.generator_.encoder, self._check_X(X))

    def score(self, X, y, sample_weight=None):
        return -mpjpe(self.predict(X), check_poses(y))


class PoseSmootherEstimator(BaseEstimator):
    """Windowed LSTM smoother fitted on paired (noisy, clean) pose sequences."""

    def __init__(self, window=5, hidden=64, layers=2, steps=500, lr=1e-3, batch_size=64,
                 seed=0):
        self.window = window
        self.hidden = hidden
        self.layers = layers
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X, y = check_sequences(X), check_sequences(y)
        cfg = SmootherConfig(layers=self.layers, hidden=self.hidden, window=self.window)
        self.smoother_, self.losses_, _ = train_smoother(
            X, y, cfg, self.steps, self.lr, self.batch_size, self.seed)
        return self

    def predict(self, X):
        check_is_fitted(self, "smoother_")
        return [smooth_sequence(self.smoother_, s) for s in check_sequences(X)]
