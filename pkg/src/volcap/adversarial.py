"""Volumetric critic and one alternating discriminator/generator update."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, IncompatibleCheckpoint, ShapeMismatch
from .model import Generator, dual_loss
from .nn import functional as F
from .nn.layers import Conv3d, Dense, ReLU, Sequential, named_tensors

PROB_CLAMP = 1e-7


@dataclass
class DiscriminatorConfig:
    filters: list = field(default_factory=lambda: [8, 16, 32, 64])
    kernel: int = 3
    grid: tuple = (32, 32, 32, 2)  # (X, Y, Z, PHI)

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if not self.filters or self.kernel % 2 == 0 or len(self.grid) != 4:
            raise ConfigError("discriminator needs >= 1 layer, an odd kernel and a 4-tuple grid")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown discriminator config keys: {sorted(unknown)}")
        return cls(**d)


class Discriminator:
    """Stride-2 conv+ReLU stack, dense head to one logit, sigmoid."""

    def __init__(self, cfg: DiscriminatorConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xD15C])
        X, Y, Z, phi = cfg.grid
        k = cfg.kernel
        size = [Z, Y, X]
        cin = phi
        self.blocks = []
        for c in cfg.filters:
            self.blocks.append(Sequential(Conv3d(cin, c, k, 2, rng=rng), ReLU()))
            size = [F.conv_output_size(n, k, 2, k // 2) for n in size]
            cin = c
        self.head = Dense(cin * int(np.prod(size)), 1, rng)
        self.training = True

    def named_layers(self):
        for i, block in enumerate(self.blocks):
            yield from block.named_layers(f"conv{i}.")
        yield "head", self.head

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def state_dict(self, prefix="disc"):
        params, _ = named_tensors(self.named_layers())
        return {f"{prefix}.{k}": v.copy() for k, v in params.items()}

    def load_state_dict(self, state, prefix="disc"):
        for lname, layer in self.named_layers():
            for k, p in layer.params.items():
                key = f"{prefix}.{lname}.{k}"
                if key not in state or np.shape(state[key]) != p.shape:
                    raise IncompatibleCheckpoint(f"checkpoint lacks a compatible {key}")
                p[...] = state[key]

    def logits(self, v):
        v = np.asarray(v, dtype=np.float64)
        X, Y, Z, phi = self.cfg.grid
        if v.ndim != 5 or v.shape[1:] != (phi, Z, Y, X):
            raise ShapeMismatch(f"expected (N, {phi}, {Z}, {Y}, {X}) volumes, got {v.shape}")
        h = v
        for block in self.blocks:
            h = block.forward(h)
        self._feat_shape = h.shape
        return self.head.forward(h.reshape(len(h), -1))[:, 0]

    def forward(self, v):
        """Probability per sample that ``v`` is a real high-view volume."""
        return F.sigmoid(self.logits(v))

    __call__ = forward

    def backward_logits(self, dlogit):
        """Accumulate parameter gradients; returns the gradient w.r.t. the input volumes."""
        g = self.head.backward(np.asarray(dlogit, dtype=np.float64)[:, None])
        g = g.reshape(self._feat_shape)
        for block in reversed(self.blocks):
            g = block.backward(g)
        return g


def gan_losses(d_real, d_fake, saturating=False):
    """Discriminator and generator losses on clamped probabilities.

    ``d_loss = -mean(log d_real + log(1 - d_fake))``; the generator loss is
    ``-mean(log d_fake)`` or, with ``saturating``, ``mean(log(1 - d_fake))``.
    Returns ``(d_loss, g_loss, grads)`` with gradients w.r.t. the probabilities:
    ``grads["d_real"]``, ``grads["d_fake"]`` (of d_loss) and ``grads["g_fake"]`` (of g_loss).
    Inside the clamp region the gradient is that of the clamp (zero).
    """
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    r = np.clip(d_real, lo, hi)
    f = np.clip(d_fake, lo, hi)
    live_r = (d_real >= lo) & (d_real <= hi)
    live_f = (d_fake >= lo) & (d_fake <= hi)
    n_r, n_f = max(r.size, 1), max(f.size, 1)
    d_loss = -(np.sum(np.log(r)) / n_r + np.sum(np.log1p(-f)) / n_f)
    grads = {"d_real": np.where(live_r, -1.0 / (r * n_r), 0.0),
             "d_fake": np.where(live_f, 1.0 / ((1.0 - f) * n_f), 0.0)}
    if saturating:
        g_loss = np.sum(np.log1p(-f)) / n_f
        grads["g_fake"] = np.where(live_f, -1.0 / ((1.0 - f) * n_f), 0.0)
    else:
        g_loss = -np.sum(np.log(f)) / n_f
        grads["g_fake"] = np.where(live_f, -1.0 / (f * n_f), 0.0)
    return float(d_loss), float(g_loss), grads


def logit_grads(p_real, p_fake, saturating=False):
    """Gradients of the two losses w.r.t. the critic logits (no clamp).

    These equal ``gan_losses`` gradients times ``p (1 - p)`` wherever the clamp is
    inactive, and stay informative when the critic saturates.
    """
    n_r, n_f = max(len(p_real), 1), max(len(p_fake), 1)
    d_real = -(1.0 - p_real) / n_r
    d_fake = p_fake / n_f
    g_fake = -p_fake / n_f if saturating else -(1.0 - p_fake) / n_f
    return d_real, d_fake, g_fake


def balanced_accuracy(p_real, p_fake):
    return 0.5 * (float(np.mean(p_real > 0.5)) + float(np.mean(p_fake < 0.5)))


def alternating_step(gen: Generator, disc: Discriminator, opt_g, opt_d, v_l, v_h, pose,
                     lam=1e-3, mu_gan=1e-2, saturating=False):
    """Phase 1 updates the critic on real ``v_h`` vs ``G(v_l)`` with the generator frozen;
    phase 2 updates the generator on ``dual_loss + mu_gan * g_loss`` with the critic frozen.

    With ``mu_gan == 0`` the critic is still trained but phase 2 performs exactly the
    plain dual-loss update.  Returns a dict of step metrics.
    """
    if len(v_l) != len(v_h) or len(v_h) != len(pose):
        raise ShapeMismatch("real and fake batches must have the same size")
    fake, pose_pred = gen.forward(v_l)
    n = len(v_h)

    # phase 1: critic
    opt_d.zero_grad()
    lg = disc.logits(np.concatenate([v_h, fake]))
    p = F.sigmoid(lg)
    p_real, p_fake = p[:n], p[n:]
    d_loss, g_loss, _ = gan_losses(p_real, p_fake, saturating)
    dr, df, _ = logit_grads(p_real, p_fake, saturating)
    disc.backward_logits(np.concatenate([dr, df]))
    opt_d.step()
    acc = balanced_accuracy(p_real, p_fake)

    # phase 2: generator
    total, parts, dv, dj = dual_loss(fake, v_h, pose_pred, pose, lam)
    opt_g.zero_grad()
    if mu_gan != 0:
        p2 = disc.forward(fake)
        _, g_loss, _ = gan_losses(p_real, p2, saturating)
        _, _, gf = logit_grads(p_real, p2, saturating)
        dv = dv + mu_gan * disc.backward_logits(gf)
        disc.zero_grad()  # critic gradients from this pass are discarded
        total = total + mu_gan * g_loss
    gen.backward(dv, dj)
    opt_g.step()
    return {"d_loss": d_loss, "g_loss": g_loss, "volume": parts["volume"],
            "joint": parts["joint"], "total": float(total), "d_acc": acc}


def dual_loss_step(gen: Generator, opt_g, v_l, v_h, pose, lam=1e-3):
    """Generator-only update on the dual loss."""
    fake, pose_pred = gen.forward(v_l)
    total, parts, dv, dj = dual_loss(fake, v_h, pose_pred, pose, lam)
    opt_g.zero_grad()
    gen.backward(dv, dj)
    opt_g.step()
    return {"volume": parts["volume"], "joint": parts["joint"], "total": float(total)}
