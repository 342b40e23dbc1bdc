"""Training protocol: encoder pose pretraining, adversarial dual-loss training of the
full generator, then the temporal smoother on frozen encoder outputs.

Every batch is a pure function of ``(seed, stage, step)``, so a run resumed from a
checkpoint reproduces the uninterrupted run exactly.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adversarial import Discriminator, DiscriminatorConfig, alternating_step, dual_loss_step
from .camera import rot_z
from .exceptions import ConfigError, ConfigMismatch, EmptyDataset, IncompatibleCheckpoint
from .model import Encoder, Generator, ModelConfig
from .nn import functional as F
from .nn.optim import Adam
from .pvh import rotate_vertical_array
from .synthetic import N_JOINTS, TripletDataset
from .temporal import PoseSmoother, SmootherConfig, train_smoother

_STAGE_CODES = {"pretrain": 1, "full": 2, "smoother": 3}


@dataclass
class TrainConfig:
    batch_size: int = 32
    seq_len: int = 5
    pretrain_steps: int = 200
    full_steps: int = 300
    smoother_steps: int = 500
    lam: float = 1e-3
    mu_gan: float = 1e-2
    lr: float = 1e-3
    pretrain_lr: float | None = None  # encoder pretraining rate, defaults to lr
    encoder_lr: float | None = None  # encoder rate during full training, defaults to lr
    seed: int = 0
    augment: bool = True
    adversarial: bool = True
    saturating: bool = False
    smoother_noise: float = 20.0  # mm of jitter added to encoder poses for the smoother
    model: dict = field(default_factory=dict)
    discriminator: dict = field(default_factory=dict)
    smoother: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be >= 1")
        if min(self.pretrain_steps, self.full_steps, self.smoother_steps) < 0:
            raise ConfigError("step counts must be non-negative")
        if not self.lr > 0 or self.lam < 0 or self.mu_gan < 0:
            raise ConfigError("lr must be positive; lam and mu_gan non-negative")
        for name in ("pretrain_lr", "encoder_lr"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name} must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def discriminator_config(self) -> DiscriminatorConfig:
        d = dict(self.discriminator)
        d.setdefault("grid", list(self.model_config().grid))
        return DiscriminatorConfig.from_dict(d)

    def smoother_config(self) -> SmootherConfig:
        d = dict(self.smoother)
        d.setdefault("window", self.seq_len)
        return SmootherConfig.from_dict(d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        try:
            cfg = cls(**d)
            cfg.model_config(), cfg.discriminator_config(), cfg.smoother_config()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg


# --------------------------------------------------------------------------
# Reports

class RunReport:
    """Per-step loss records plus the config echo; serialised as JSON lines."""

    def __init__(self, config: dict):
        self.config = config
        self.records: list[dict] = []
        self.summary: dict = {}
        self._t0 = time.perf_counter()

    def add(self, stage, step, metrics):
        rec = {"stage": stage, "step": int(step)}
        for k, v in metrics.items():
            v = float(v)
            if not math.isfinite(v):
                raise FloatingPointError(f"{stage} step {step}: {k} is {v}")
            rec[k] = v
        rec["wall"] = time.perf_counter() - self._t0
        self.records.append(rec)

    def losses(self, stage, key):
        return np.array([r[key] for r in self.records if r["stage"] == stage])

    def extend(self, other: "RunReport"):
        self.records.extend(other.records)
        self.summary.update(other.summary)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"config": self.config}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"summary": self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


# --------------------------------------------------------------------------
# Batching and augmentation

def batch_rng(seed, stage, step):
    return np.random.default_rng([int(seed), _STAGE_CODES[stage], int(step)])


def batch_indices(rng, n, batch_size):
    return rng.choice(n, size=batch_size, replace=batch_size > n)


def rotate_pose(pose, angle):
    """Rotate grid-local (..., 78) poses about the vertical axis (counter-clockwise)."""
    pose = np.asarray(pose, dtype=np.float64)
    j = pose.reshape(pose.shape[:-1] + (N_JOINTS, 3))
    return (j @ rot_z(angle).T).reshape(pose.shape)


def augment_sample(v_l, v_h, pose, rng=None, angle=None):
    """Rotate both volumes and the pose by one random angle about the central vertical axis."""
    if angle is None:
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
    return (rotate_vertical_array(v_l, angle), rotate_vertical_array(v_h, angle),
            rotate_pose(pose, angle))


def make_batch(ds: TripletDataset, rng, batch_size, augment):
    idx = batch_indices(rng, len(ds), batch_size)
    v_l, v_h, pose = ds.v_low[idx], ds.v_high[idx], ds.poses[idx]
    if augment:
        out = [augment_sample(a, b, p, rng) for a, b, p in zip(v_l, v_h, pose)]
        v_l = np.stack([o[0] for o in out])
        v_h = np.stack([o[1] for o in out])
        pose = np.stack([o[2] for o in out])
    return v_l, v_h, pose


def _check_dataset(ds: TripletDataset, mcfg: ModelConfig):
    if ds is None or len(ds) == 0:
        raise EmptyDataset("training dataset has no samples")
    X, Y, Z, phi = mcfg.grid
    if ds.v_low.shape[1:] != (phi, Z, Y, X):
        raise ConfigMismatch(
            f"dataset volumes {ds.v_low.shape[1:]} do not match model grid {mcfg.grid}")


# --------------------------------------------------------------------------
# Stage 1: encoder pose regression

@dataclass
class PretrainResult:
    encoder: Encoder
    optimizer: Adam
    step: int
    report: RunReport

    def state_dict(self):
        out = self.encoder.state_dict()
        out.update(self.optimizer.state_dict("opt_e"))
        out["pretrain.step"] = np.array(float(self.step))
        return out


def init_encoder(ds: TripletDataset, cfg: TrainConfig) -> Encoder:
    """Seeded encoder whose pose head starts at the dataset's mean pose."""
    enc = Encoder(cfg.model_config(), cfg.seed)
    enc.init_pose_head(ds.poses.mean(axis=0))
    return enc


def pretrain_encoder(ds: TripletDataset, cfg: TrainConfig, resume=None, until=None):
    mcfg = cfg.model_config()
    _check_dataset(ds, mcfg)
    enc = init_encoder(ds, cfg)
    opt = Adam(enc.named_layers(), lr=cfg.lr if cfg.pretrain_lr is None else cfg.pretrain_lr)
    start = 0
    if resume is not None:
        enc.load_state_dict(resume)
        opt.load_state_dict(resume, "opt_e")
        start = int(resume["pretrain.step"])
    end = cfg.pretrain_steps if until is None else min(until, cfg.pretrain_steps)
    report = RunReport(cfg.to_dict())
    enc.train()
    for step in range(start, end):
        rng = batch_rng(cfg.seed, "pretrain", step)
        v_l, _, pose = make_batch(ds, rng, cfg.batch_size, cfg.augment)
        pred = enc.pose(v_l)
        loss, dpred = F.mse_loss(pred, pose)
        opt.zero_grad()
        enc.pose_backward(dpred)
        opt.step()
        report.add("pretrain", step, {"joint": loss})
    return PretrainResult(enc, opt, max(start, end), report)


# --------------------------------------------------------------------------
# Stage 2: adversarial dual-loss training

@dataclass
class FullResult:
    generator: Generator
    discriminator: Discriminator | None
    opt_g: Adam
    opt_d: Adam | None
    step: int
    report: RunReport

    def state_dict(self):
        out = self.generator.state_dict()
        out.update(self.opt_g.state_dict("opt_g"))
        if self.discriminator is not None:
            out.update(self.discriminator.state_dict())
            out.update(self.opt_d.state_dict("opt_d"))
        out["full.step"] = np.array(float(self.step))
        return out


def train_full(ds: TripletDataset, encoder_state, cfg: TrainConfig, resume=None, until=None):
    """``encoder_state`` (tensors from :func:`pretrain_encoder`) or None for a fresh encoder."""
    mcfg = cfg.model_config()
    _check_dataset(ds, mcfg)
    gen = Generator(mcfg, cfg.seed)
    if encoder_state is not None:
        try:
            gen.encoder.load_state_dict(encoder_state)
        except IncompatibleCheckpoint as exc:
            raise ConfigMismatch(f"encoder init does not fit the model config: {exc}") from None
    enc_lr = {} if cfg.encoder_lr is None else {
        name: cfg.encoder_lr for name, _ in gen.encoder.named_layers()}
    opt_g = Adam(gen.named_layers(), lr=cfg.lr, layer_lr=enc_lr)
    disc = opt_d = None
    if cfg.adversarial:
        disc = Discriminator(cfg.discriminator_config(), cfg.seed)
        opt_d = Adam(disc.named_layers(), lr=cfg.lr)
    start = 0
    if resume is not None:
        gen.load_state_dict(resume)
        opt_g.load_state_dict(resume, "opt_g")
        if disc is not None:
            disc.load_state_dict(resume)
            opt_d.load_state_dict(resume, "opt_d")
        start = int(resume["full.step"])
    end = cfg.full_steps if until is None else min(until, cfg.full_steps)
    report = RunReport(cfg.to_dict())
    gen.train()
    for step in range(start, end):
        rng = batch_rng(cfg.seed, "full", step)
        v_l, v_h, pose = make_batch(ds, rng, cfg.batch_size, cfg.augment)
        if cfg.adversarial:
            m = alternating_step(gen, disc, opt_g, opt_d, v_l, v_h, pose, cfg.lam, cfg.mu_gan,
                                 cfg.saturating)
        else:
            m = dual_loss_step(gen, opt_g, v_l, v_h, pose, cfg.lam)
        report.add("full", step, m)
    return FullResult(gen, disc, opt_g, opt_d, max(start, end), report)


# --------------------------------------------------------------------------
# Stage 3: temporal smoother on frozen encoder outputs

def predict(gen: Generator, v_l, batch_size=8):
    """Eval-mode inference in chunks; returns ``(v_h_pred, pose_pred)``."""
    was = gen.training
    gen.eval()
    vols, poses = [], []
    for i in range(0, len(v_l), batch_size):
        v, p = gen.forward(v_l[i : i + batch_size])
        vols.append(v)
        poses.append(p)
    gen.train(was)
    return np.concatenate(vols), np.concatenate(poses)


def predict_pose(enc: Encoder, v_l, batch_size=8):
    was = enc.training
    enc.eval()
    out = np.concatenate([enc.pose(v_l[i : i + batch_size]) for i in range(0, len(v_l), batch_size)])
    enc.train(was)
    return out


def sequences_by_seed(ds: TripletDataset, values):
    """Split per-frame ``values`` into consecutive-frame runs per performer seed."""
    runs: dict[int, list] = {}
    for i, (seed, k) in enumerate(ds.frame_ids):
        runs.setdefault(seed, []).append((k, i))
    out = []
    for seed in sorted(runs):
        items = sorted(runs[seed])
        start = 0
        for j in range(1, len(items) + 1):
            if j == len(items) or items[j][0] != items[j - 1][0] + 1:
                out.append(np.stack([values[i] for _, i in items[start:j]]))
                start = j
    return out


def train_smoother_stage(encoder: Encoder, ds: TripletDataset, cfg: TrainConfig):
    preds = predict_pose(encoder, ds.v_low)
    rng = np.random.default_rng([cfg.seed, _STAGE_CODES["smoother"]])
    noisy = [s + rng.normal(0.0, cfg.smoother_noise, s.shape) if cfg.smoother_noise else s
             for s in sequences_by_seed(ds, preds)]
    gt = sequences_by_seed(ds, ds.poses)
    smoother, losses, _ = train_smoother(noisy, gt, cfg.smoother_config(), cfg.smoother_steps,
                                         cfg.lr, seed=cfg.seed)
    report = RunReport(cfg.to_dict())
    for step, loss in enumerate(losses):
        report.add("smoother", step, {"pose": loss})
    return smoother, report


def new_smoother(cfg: TrainConfig) -> PoseSmoother:
    return PoseSmoother(cfg.smoother_config(), cfg.seed)
