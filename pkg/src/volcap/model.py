"""Volumetric encoder-decoder generator with a pose/embedding latent split.

The encoder maps a low-view PVH batch ``(N, PHI, Z, Y, X)`` through conv blocks
(conv, batch norm, ReLU) and a dense layer onto a latent of ``78 + e`` values;
the first 78, multiplied by ``pose_scale``, are the grid-local joint positions
in millimetres.  The decoder mirrors the encoder: decoder layer ``i`` inverts the
shape change of encoder layer ``L - 1 - i``.  Encoder features at ``skip_layers``
are averaged into the decoder features of matching shape after rectification.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, IncompatibleCheckpoint, ShapeMismatch
from .nn import functional as F
from .nn.layers import BatchNorm3d, Conv3d, ConvTranspose3d, Dense, ReLU, Sequential, Sigmoid
from .nn.layers import named_tensors
from .synthetic import POSE_DIM


@dataclass
class ModelConfig:
    n_enc: list = field(default_factory=lambda: [8, 8, 16, 16, 32])
    n_dec: list = field(default_factory=lambda: [32, 16, 16, 8, 8])
    k_enc: list = field(default_factory=lambda: [3, 3, 3, 3, 3])
    k_dec: list = field(default_factory=lambda: [3, 3, 3, 3, 3])
    stride_layers: list = field(default_factory=lambda: [1, 3])
    skip_layers: list = field(default_factory=lambda: [1, 3])
    embedding_dim: int = 200
    grid: tuple = (32, 32, 32, 2)  # (X, Y, Z, PHI)
    joints: int = 26
    pose_scale: float = 1000.0
    use_skips: bool = True

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.validate()

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw):
        base = dict(n_enc=[64, 64, 128, 128, 256], n_dec=[256, 128, 128, 64, 64])
        base.update(kw)
        return cls(**base)

    @property
    def n_layers(self):
        return len(self.n_enc)

    @property
    def latent_dim(self):
        return 3 * self.joints + self.embedding_dim

    def validate(self):
        L = len(self.n_enc)
        if L < 1 or not (len(self.n_dec) == len(self.k_enc) == len(self.k_dec) == L):
            raise ConfigError("n_enc, n_dec, k_enc and k_dec must have the same length")
        if any(k % 2 == 0 for k in list(self.k_enc) + list(self.k_dec)):
            raise ConfigError("kernel sizes must be odd")
        if list(self.n_dec) != list(reversed(self.n_enc)):
            raise ConfigError("decoder filter counts must mirror the encoder's")
        if not set(self.stride_layers) <= set(range(L)):
            raise ConfigError("stride_layers must index encoder layers")
        # a skip at encoder layer i lands on the input of decoder layer L-1-i
        if not set(self.skip_layers) <= set(range(L - 1)):
            raise ConfigError(f"skip_layers must lie in 0..{L - 2}")
        if len(self.grid) != 4 or min(self.grid) < 1 or self.embedding_dim < 0:
            raise ConfigError("grid must be (X, Y, Z, PHI) with positive entries")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _block(cin, cout, k, stride, rng, input_grad=True):
    return Sequential(Conv3d(cin, cout, k, stride, rng=rng, input_grad=input_grad),
                      BatchNorm3d(cout), ReLU())


def _up_block(cin, cout, k, stride, output_padding, rng, final=False):
    tconv = ConvTranspose3d(cin, cout, k, stride, k // 2, output_padding, rng=rng)
    if final:
        return Sequential(tconv, Sigmoid())
    return Sequential(tconv, BatchNorm3d(cout), ReLU())


def encoder_shapes(cfg: ModelConfig):
    """Spatial (Z, Y, X) size at the input of each encoder layer plus the final output."""
    X, Y, Z, _ = cfg.grid
    sizes = [(Z, Y, X)]
    for i, k in enumerate(cfg.k_enc):
        s = 2 if i in cfg.stride_layers else 1
        sizes.append(tuple(F.conv_output_size(n, k, s, k // 2) for n in sizes[-1]))
    if min(sizes[-1]) < 1:
        raise ConfigError(f"grid {cfg.grid} is too small for the configured strides")
    return sizes


class Module:
    """Shared bookkeeping for networks made of named layers."""

    def named_layers(self):
        raise NotImplementedError

    def train(self, mode=True):
        self.training = mode
        for _, layer in self.named_layers():
            layer.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def state_dict(self, prefix="gen"):
        params, buffers = named_tensors(self.named_layers())
        out = {f"{prefix}.{k}": v.copy() for k, v in params.items()}
        out.update({f"{prefix}.{k}": v.copy() for k, v in buffers.items()})
        return out

    def load_state_dict(self, state, prefix="gen"):
        for lname, layer in self.named_layers():
            for store in (layer.params, layer.buffers):
                for k in store:
                    key = f"{prefix}.{lname}.{k}"
                    if key not in state:
                        raise IncompatibleCheckpoint(f"checkpoint lacks {key}")
                    if np.shape(state[key]) != store[k].shape:
                        raise IncompatibleCheckpoint(
                            f"{key}: checkpoint shape {np.shape(state[key])} != {store[k].shape}")
                    store[k][...] = state[key]


class Encoder(Module):
    """Conv blocks and a dense map onto the ``78 + e`` latent."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xE1])
        L = cfg.n_layers
        self.sizes = encoder_shapes(cfg)
        cins = [cfg.grid[3]] + list(cfg.n_enc[:-1])
        self.blocks = [
            _block(cins[i], cfg.n_enc[i], cfg.k_enc[i], 2 if i in cfg.stride_layers else 1, rng,
                   input_grad=i > 0)
            for i in range(L)
        ]
        self.bottleneck = (cfg.n_enc[-1],) + self.sizes[-1]
        self.dense = Dense(int(np.prod(self.bottleneck)), cfg.latent_dim, rng)
        self.training = True

    def named_layers(self):
        for i, block in enumerate(self.blocks):
            yield from block.named_layers(f"enc{i}.")
        yield "enc_dense", self.dense

    def _check_input(self, v):
        X, Y, Z, phi = self.cfg.grid
        if v.ndim != 5 or v.shape[1:] != (phi, Z, Y, X):
            raise ShapeMismatch(f"expected (N, {phi}, {Z}, {Y}, {X}) volumes, got {v.shape}")

    def forward(self, v):
        """Returns ``(latent, skips)``; latent entries 0..77 times ``pose_scale`` are the pose."""
        v = np.asarray(v, dtype=np.float64)
        self._check_input(v)
        h = v
        skips = {}
        for i, block in enumerate(self.blocks):
            h = block.forward(h)
            if i in self.cfg.skip_layers:
                skips[i] = h
        self._out_shape = h.shape
        self._latent = self.dense.forward(h.reshape(len(h), -1))
        return self._latent, skips

    def backward(self, dlatent, dskips=None):
        dskips = dskips or {}
        g = self.dense.backward(dlatent).reshape(self._out_shape)
        for i in reversed(range(len(self.blocks))):
            if i in dskips:
                g = g + dskips[i]
            g = self.blocks[i].backward(g)

    def init_pose_head(self, mean_pose, weight_scale=0.1):
        """Start the pose slice at ``mean_pose`` with damped weights, so the first
        regression steps refine a plausible skeleton instead of metres of noise."""
        mean_pose = np.asarray(mean_pose, dtype=np.float64)
        if mean_pose.shape != (POSE_DIM,):
            raise ShapeMismatch(f"mean pose must be ({POSE_DIM},), got {mean_pose.shape}")
        self.dense.params["w"][:, :POSE_DIM] *= weight_scale
        self.dense.params["b"][:POSE_DIM] = mean_pose / self.cfg.pose_scale

    def pose(self, v):
        """Pose-only forward for the regression stage, (N, 78) millimetres."""
        latent, _ = self.forward(v)
        return latent[:, :POSE_DIM] * self.cfg.pose_scale

    def pose_backward(self, dpose):
        dlatent = np.zeros_like(self._latent)
        dlatent[:, :POSE_DIM] = dpose * self.cfg.pose_scale
        self.backward(dlatent)


class Decoder(Module):
    """Dense map back to the bottleneck and mirrored up-convolution blocks."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xDEC])
        L = cfg.n_layers
        phi = cfg.grid[3]
        sizes = encoder_shapes(cfg)
        self.bottleneck = (cfg.n_enc[-1],) + sizes[-1]
        self.dense = Dense(cfg.latent_dim, int(np.prod(self.bottleneck)), rng)
        self.blocks = []
        for i in range(L):
            j = L - 1 - i  # mirrored encoder layer
            stride = 2 if j in cfg.stride_layers else 1
            k = cfg.k_dec[i]
            cout = cfg.n_dec[i + 1] if i < L - 1 else phi
            base = [(n - 1) * stride - 2 * (k // 2) + k for n in sizes[j + 1]]
            pads = {t - b for t, b in zip(sizes[j], base)}
            if len(pads) != 1 or not 0 <= next(iter(pads)) < max(stride, 1):
                raise ConfigError(f"decoder layer {i} cannot invert encoder layer {j} shape")
            self.blocks.append(_up_block(cfg.n_dec[i], cout, k, stride, pads.pop(), rng,
                                         final=i == L - 1))
        # decoder layer whose output receives each encoder skip
        self.skip_targets = {L - 2 - i: i for i in cfg.skip_layers}
        self.training = True

    def named_layers(self):
        yield "dec_dense", self.dense
        for i, block in enumerate(self.blocks):
            yield from block.named_layers(f"dec{i}.")

    def forward(self, latent, skips=None):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 2 or latent.shape[1] != self.cfg.latent_dim:
            raise ShapeMismatch(f"latent must be (N, {self.cfg.latent_dim}), got {latent.shape}")
        use = self.cfg.use_skips and skips is not None
        self._used_skips = use
        h = self.dense.forward(latent).reshape((len(latent),) + self.bottleneck)
        for i, block in enumerate(self.blocks):
            h = block.forward(h)
            if use and i in self.skip_targets:
                s = skips[self.skip_targets[i]]
                if s.shape != h.shape:
                    raise ShapeMismatch(f"skip {s.shape} vs decoder features {h.shape}")
                h = 0.5 * (h + s)
        return h

    def backward(self, dv):
        """Returns ``(d_latent, d_skips)``."""
        g = dv
        dskips = {}
        for i in reversed(range(len(self.blocks))):
            if self._used_skips and i in self.skip_targets:
                dskips[self.skip_targets[i]] = 0.5 * g
                g = 0.5 * g
            g = self.blocks[i].backward(g)
        return self.dense.backward(g.reshape(len(g), -1)), dskips


class Generator(Module):
    """Encoder-decoder network ``V_L -> (V_H, pose)``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, encoder: Encoder | None = None):
        self.cfg = cfg
        if encoder is not None and encoder.cfg.to_dict() != cfg.to_dict():
            raise ConfigError("encoder was built for a different model config")
        self.encoder = encoder if encoder is not None else Encoder(cfg, seed)
        self.decoder = Decoder(cfg, seed)
        self.training = True

    def named_layers(self):
        yield from self.encoder.named_layers()
        yield from self.decoder.named_layers()

    def encoder_forward(self, v):
        return self.encoder.forward(v)

    def decoder_forward(self, latent, skips=None):
        return self.decoder.forward(latent, skips)

    def pose_from_latent(self, latent):
        return latent[:, :POSE_DIM] * self.cfg.pose_scale

    def forward(self, v):
        """``(v_h_pred, pose_pred)``; pose in millimetres relative to the grid centre."""
        latent, skips = self.encoder.forward(v)
        self._latent = latent
        return self.decoder.forward(latent, skips), self.pose_from_latent(latent)

    __call__ = forward

    def backward(self, dv=None, dpose=None):
        """Accumulate parameter gradients for upstream gradients on either output."""
        dlatent = np.zeros_like(self._latent)
        dskips = {}
        if dv is not None:
            dl, dskips = self.decoder.backward(dv)
            dlatent += dl
        if dpose is not None:
            dlatent[:, :POSE_DIM] += dpose * self.cfg.pose_scale
        self.encoder.backward(dlatent, dskips)


def dual_loss(v_pred, v_gt, j_pred, j_gt, lam=1e-3):
    """``mse(volume) + lam * mse(joints)``.

    Returns ``(total, parts, dv, dj)`` where ``parts`` holds the two unweighted terms.
    """
    v_pred, v_gt = np.asarray(v_pred, dtype=np.float64), np.asarray(v_gt, dtype=np.float64)
    j_pred, j_gt = np.asarray(j_pred, dtype=np.float64), np.asarray(j_gt, dtype=np.float64)
    if v_pred.shape != v_gt.shape or j_pred.shape != j_gt.shape:
        raise ShapeMismatch(
            f"dual loss shapes: volume {v_pred.shape}/{v_gt.shape}, joints {j_pred.shape}/{j_gt.shape}")
    lv, dv = F.mse_loss(v_pred, v_gt)
    lj, dj = F.mse_loss(j_pred, j_gt)
    return lv + lam * lj, {"volume": lv, "joint": lj}, dv, lam * dj


def generator_forward(gen: Generator, v_l):
    return gen.forward(v_l)
