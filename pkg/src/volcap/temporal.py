"""Two-layer LSTM that refines the last pose of a short look-back window."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigError, DataMismatch, IncompatibleCheckpoint, ShapeMismatch
from .nn import functional as F
from .nn.layers import LSTM, Dense, named_tensors
from .nn.optim import Adam
from .synthetic import POSE_DIM


@dataclass
class SmootherConfig:
    layers: int = 2
    hidden: int = 64
    window: int = 5
    dim: int = POSE_DIM
    residual: bool = True  # predict a correction added to the window's last pose
    centre: bool = True  # feed poses relative to the last pose (implies a residual output)
    scale: float = 100.0  # mm per network unit

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.window < 1 or self.dim < 1:
            raise ConfigError("smoother layers, hidden, window and dim must be positive")
        if not self.scale > 0:
            raise ConfigError("smoother scale must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown smoother config keys: {sorted(unknown)}")
        return cls(**d)


class PoseSmoother:
    """Stateless windowed smoother: every call starts from a zero LSTM state."""

    def __init__(self, cfg: SmootherConfig | None = None, seed: int = 0):
        self.cfg = cfg or SmootherConfig()
        rng = np.random.default_rng([seed, 0x157])
        c = self.cfg
        self.lstms = [LSTM(c.dim if i == 0 else c.hidden, c.hidden, rng) for i in range(c.layers)]
        self.head = Dense(c.hidden, c.dim, rng)
        if c.residual or c.centre:
            # start close to the identity on the last pose
            self.head.params["w"][...] *= 0.1

    def named_layers(self):
        for i, layer in enumerate(self.lstms):
            yield f"lstm{i}", layer
        yield "head", self.head

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def state_dict(self, prefix="smooth"):
        params, _ = named_tensors(self.named_layers())
        return {f"{prefix}.{k}": v.copy() for k, v in params.items()}

    def load_state_dict(self, state, prefix="smooth"):
        for lname, layer in self.named_layers():
            for k, p in layer.params.items():
                key = f"{prefix}.{lname}.{k}"
                if key not in state or np.shape(state[key]) != p.shape:
                    raise IncompatibleCheckpoint(f"checkpoint lacks a compatible {key}")
                p[...] = state[key]

    def forward(self, windows):
        """``windows`` (N, T, 78) in mm -> smoothed final-frame poses (N, 78)."""
        w = np.asarray(windows, dtype=np.float64)
        c = self.cfg
        if w.ndim != 3 or w.shape[1:] != (c.window, c.dim):
            raise ShapeMismatch(f"expected (N, {c.window}, {c.dim}) windows, got {w.shape}")
        last = w[:, -1]
        x = (w - last[:, None]) if c.centre else w
        h = np.transpose(x, (1, 0, 2)) / c.scale
        for layer in self.lstms:
            h = layer.forward(h)
        out = self.head.forward(h[-1]) * c.scale
        if c.residual or c.centre:
            out = out + last
        return out

    __call__ = forward

    def backward(self, dout):
        """Accumulate parameter gradients (the input gradient is not needed)."""
        c = self.cfg
        g = self.head.backward(np.asarray(dout) * c.scale)
        dh = np.zeros((c.window,) + g.shape)
        dh[-1] = g
        for layer in reversed(self.lstms):
            dh = layer.backward(dh)


def smooth_window(smoother: PoseSmoother, window) -> np.ndarray:
    """Smoothed pose for the final frame of one (T, 78) window."""
    return smoother.forward(np.asarray(window, dtype=np.float64)[None])[0]


def sliding_windows(seq, window):
    seq = np.asarray(seq, dtype=np.float64)
    if len(seq) < window:
        return np.zeros((0, window) + seq.shape[1:])
    idx = np.arange(len(seq) - window + 1)[:, None] + np.arange(window)[None]
    return seq[idx]


def smooth_sequence(smoother: PoseSmoother, seq) -> np.ndarray:
    """Apply the smoother at every frame with a full window; earlier frames pass through.

    A sequence shorter than the window is returned unchanged with a warning.
    """
    seq = np.asarray(seq, dtype=np.float64)
    T = smoother.cfg.window
    out = seq.copy()
    if len(seq) < T:
        warnings.warn(f"sequence of {len(seq)} frames is shorter than the {T}-frame window; "
                      "poses passed through unsmoothed", stacklevel=2)
        return out
    out[T - 1 :] = smoother.forward(sliding_windows(seq, T))
    return out


def jerk(seq) -> float:
    """Mean norm of the per-joint second difference, in mm per frame squared."""
    seq = np.asarray(seq, dtype=np.float64)
    if len(seq) < 3:
        return 0.0
    dd = np.diff(seq.reshape(len(seq), -1, 3), n=2, axis=0)
    return float(np.mean(np.linalg.norm(dd, axis=-1)))


def train_smoother(noisy, gt, cfg: SmootherConfig | None = None, steps=500, lr=1e-3,
                   batch_size=64, seed=0, smoother: PoseSmoother | None = None):
    """Fit the smoother on windows drawn from paired sequences.

    ``noisy`` and ``gt`` are lists of (F_i, 78) arrays.  Returns
    ``(smoother, losses, best)`` where ``best`` is the running minimum of ``losses``.
    """
    noisy = [np.asarray(s, dtype=np.float64) for s in noisy]
    gt = [np.asarray(s, dtype=np.float64) for s in gt]
    if len(noisy) != len(gt) or any(a.shape != b.shape for a, b in zip(noisy, gt)):
        raise DataMismatch("noisy and ground-truth sequences must be paired with equal shapes")
    smoother = smoother or PoseSmoother(cfg, seed)
    T = smoother.cfg.window
    xs = [sliding_windows(s, T) for s in noisy]
    ys = [g[T - 1 :] for g in gt]
    X = np.concatenate(xs) if xs else np.zeros((0, T, POSE_DIM))
    Y = np.concatenate(ys) if ys else np.zeros((0, POSE_DIM))
    if len(X) == 0:
        raise DataMismatch(f"no sequence is long enough for a {T}-frame window")
    opt = Adam(smoother.named_layers(), lr=lr)
    rng = np.random.default_rng([seed, 0x7A1])
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(X), size=min(batch_size, len(X)))
        pred = smoother.forward(X[idx])
        # loss in network units keeps Adam's scale independent of millimetres
        loss, dpred = F.mse_loss(pred / smoother.cfg.scale, Y[idx] / smoother.cfg.scale)
        opt.zero_grad()
        smoother.backward(dpred / smoother.cfg.scale)
        opt.step()
        losses.append(loss)
    losses = np.asarray(losses)
    best = np.minimum.accumulate(losses) if len(losses) else losses
    return smoother, losses, best
