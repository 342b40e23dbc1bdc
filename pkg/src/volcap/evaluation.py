"""Pose and volume metrics plus the camera-count ablation harness."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exceptions import IncompatibleCheckpoint, LengthMismatch, ShapeMismatch
from .model import Generator, ModelConfig
from .nn import checkpoint
from .synthetic import N_JOINTS, GenerationConfig, SyntheticScene, neighbouring_arc
from .training import predict

DISPLAY_SCALE = 1e3  # volume mse is shown multiplied by 10^3


def mpjpe(pred, gt) -> float:
    """Mean Euclidean joint error (mm) over frames and the 26 joints."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[None]
    if gt.ndim == 1:
        gt = gt[None]
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted frames vs {len(gt)} ground-truth frames")
    if pred.shape != gt.shape or pred.shape[-1] != 3 * N_JOINTS:
        raise ShapeMismatch(f"pose shapes {pred.shape} and {gt.shape} differ or are not (F, 78)")
    d = (pred - gt).reshape(len(pred), N_JOINTS, 3)
    return float(np.mean(np.linalg.norm(d, axis=-1)))


def volume_mse(pred, gt) -> float:
    """Mean over frames of the per-voxel, per-channel squared error."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"volume shapes {pred.shape} and {gt.shape} differ")
    if pred.ndim < 4:
        pred, gt = pred[None], gt[None]
    per_frame = np.mean((pred - gt).reshape(len(pred), -1) ** 2, axis=1)
    return float(np.mean(per_frame))


def volume_mse_display(pred, gt) -> float:
    return volume_mse(pred, gt) * DISPLAY_SCALE


def mean_pose_baseline(train_poses, test_poses) -> float:
    """MPJPE of always predicting the training-set mean pose."""
    mean = np.asarray(train_poses, dtype=np.float64).mean(axis=0)
    test = np.asarray(test_poses, dtype=np.float64)
    return mpjpe(np.broadcast_to(mean, test.shape), test)


# --------------------------------------------------------------------------
# Ablation harness

METRICS = ("input_mse", "refined_mse", "mpjpe")


@dataclass
class MetricReport:
    """Rows keyed by (variant, camera count); each row holds per-sequence values and their
    arithmetic mean.  Volume errors are stored raw and shown ×10³ in text tables."""

    variants: list
    counts: list
    rows: dict = field(default_factory=dict)
    baseline_mpjpe: float | None = None

    def row(self, variant, count):
        return self.rows[(variant, int(count))]

    def value(self, variant, count, metric):
        return self.row(variant, count)["mean"][metric]

    def to_dict(self):
        return {
            "variants": list(self.variants),
            "counts": [int(c) for c in self.counts],
            "baseline_mpjpe": self.baseline_mpjpe,
            "volume_display_scale": DISPLAY_SCALE,
            "rows": [
                {"variant": v, "count": int(c), **self.rows[(v, int(c))]}
                for v in self.variants for c in self.counts
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        rep = cls(list(d["variants"]), list(d["counts"]), baseline_mpjpe=d.get("baseline_mpjpe"))
        for r in d["rows"]:
            rep.rows[(r["variant"], int(r["count"]))] = {
                "mean": r["mean"], "per_sequence": r["per_sequence"]}
        return rep

    def to_text(self, decimals=4) -> str:
        """One aligned block per metric: variants down, camera counts across."""
        blocks = []
        for metric in METRICS:
            scale = DISPLAY_SCALE if metric.endswith("mse") else 1.0
            unit = "x1e3" if scale != 1.0 else "mm"
            header = [f"{metric} ({unit})"] + [f"C={c}" for c in self.counts]
            body = [[v] + [f"{self.value(v, c, metric) * scale:.{decimals}f}" for c in self.counts]
                    for v in self.variants]
            widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
            lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w)
                               for i, (cell, w) in enumerate(zip(r, widths)))
                     for r in [header] + body]
            blocks.append("\n".join(lines))
        if self.baseline_mpjpe is not None:
            blocks.append(f"mean-pose baseline mpjpe (mm): {self.baseline_mpjpe:.{decimals}f}")
        return "\n\n".join(blocks) + "\n"


def parse_text_table(text: str):
    """Inverse of :meth:`MetricReport.to_text` for the metric blocks."""
    out = {}
    for block in text.strip().split("\n\n"):
        lines = block.splitlines()
        head = lines[0].split()
        if not head or head[0] not in METRICS:
            continue
        counts = [int(h[2:]) for h in head[2:]]
        for line in lines[1:]:
            cells = line.split()
            for c, cell in zip(counts, cells[1:]):
                out[(head[0], cells[0], c)] = float(cell)
    return out


def _as_generator(model, grid) -> Generator:
    if isinstance(model, Generator):
        gen = model
    else:
        cfg, state = model
        cfg = cfg if isinstance(cfg, ModelConfig) else ModelConfig.from_dict(cfg)
        gen = Generator(cfg)
        gen.load_state_dict(state)
    if tuple(gen.cfg.grid) != tuple(grid):
        raise IncompatibleCheckpoint(f"model grid {tuple(gen.cfg.grid)} != dataset grid {grid}")
    return gen


def ablation_volumes(gen_cfg: GenerationConfig, counts):
    """Render held-out frames once; return ``(v_high, poses, seeds, {count: v_low})``.

    ``V_L`` for C cameras uses the arc of C neighbouring views starting at cam0, so
    C = n_cams reproduces ``V_H`` exactly.
    """
    scene = SyntheticScene(gen_cfg)
    v_high, poses, seeds = [], [], []
    v_low = {int(c): [] for c in counts}
    for seed, k in scene.frames():
        feats = scene.frame_features(seed, k)
        vh = scene.volume(seed, k, scene.cam_ids, feats)
        v_high.append(vh)
        poses.append(scene.local_pose(seed, k))
        seeds.append(seed)
        for c in v_low:
            views = neighbouring_arc(scene.cam_ids, 0, c)
            v_low[c].append(vh.copy() if c == len(scene.cam_ids)
                            else scene.volume(seed, k, views, feats))
    return (np.stack(v_high), np.stack(poses), np.asarray(seeds),
            {c: np.stack(v) for c, v in v_low.items()})


def _grid_of(gen_cfg: GenerationConfig, phi):
    x, y, z = gen_cfg.grid_dims
    return (x, y, z, phi)


def run_ablation(models: Mapping[str, object], gen_cfg: GenerationConfig, counts=(2, 4, 8),
                 train_poses=None, volumes=None) -> MetricReport:
    """Evaluate every variant at every camera count.

    ``models`` maps a variant name to a :class:`Generator` or a ``(config, state)`` pair.
    ``volumes`` may pass a precomputed :func:`ablation_volumes` result.
    """
    counts = [int(c) for c in counts]
    v_high, poses, seeds, v_low = volumes or ablation_volumes(gen_cfg, counts)
    grid = _grid_of(gen_cfg, v_high.shape[1])
    gens = {name: _as_generator(m, grid) for name, m in models.items()}
    digests = {name: checkpoint.digest(g.state_dict()) for name, g in gens.items()}
    report = MetricReport(list(models), counts)
    if train_poses is not None:
        report.baseline_mpjpe = mean_pose_baseline(train_poses, poses)
    groups = [(int(s), np.flatnonzero(seeds == s)) for s in np.unique(seeds)]
    for name, gen in gens.items():
        for c in counts:
            vl = v_low[c]
            vh_pred, pose_pred = predict(gen, vl)
            per = {}
            for s, idx in groups:
                per[str(s)] = {
                    "input_mse": volume_mse(vl[idx], v_high[idx]),
                    "refined_mse": volume_mse(vh_pred[idx], v_high[idx]),
                    "mpjpe": mpjpe(pose_pred[idx], poses[idx]),
                }
            mean = {k: float(np.mean([p[k] for p in per.values()])) for k in next(iter(per.values()))}
            report.rows[(name, c)] = {"mean": mean, "per_sequence": per}
    for name, gen in gens.items():
        if checkpoint.digest(gen.state_dict()) != digests[name]:
            raise RuntimeError(f"evaluation mutated the weights of {name!r}")
    return report
