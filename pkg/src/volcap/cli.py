"""``volcap`` command line: synth | pvh | train | reconstruct | eval | gradcheck.

Exit codes: 0 success, 1 gradcheck failure, 2 config error, 3 I/O error,
4 compatibility error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io as vio
from .camera import load_calibration
from .evaluation import MetricReport, mpjpe, run_ablation, volume_mse
from .exceptions import (
    ConfigError, ConfigMismatch, DataMismatch, EmptyDataset, FormatError, IncompatibleCheckpoint,
    ParseError, IndexOutOfRange, InvalidRotation, RigMismatch, ShapeMismatch,
)
from .model import Generator
from .nn import checkpoint
from .nn.gradcheck import run_suite
from .pvh import GridSpec, build_pvh
from .synthetic import GenerationConfig, generate_triplets
from .temporal import PoseSmoother, smooth_sequence
from .training import (
    RunReport, TrainConfig, predict, pretrain_encoder, train_full, train_smoother_stage,
)

log = logging.getLogger("volcap")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_COMPAT = 0, 1, 2, 3, 4

# plain ValueError last: GridSpec and friends reject bad numbers from config files
_CONFIG_ERRORS = (ConfigError, ParseError, InvalidRotation, RigMismatch, EmptyDataset,
                  DataMismatch, ValueError)
_COMPAT_ERRORS = (IncompatibleCheckpoint, ConfigMismatch, ShapeMismatch, IndexOutOfRange)
_IO_ERRORS = (OSError, FormatError)

ENCODER_CKPT, MODEL_CKPT, SMOOTHER_CKPT = "encoder.vckp", "model.vckp", "smoother.vckp"
RUN_CONFIG, REPORT = "config.json", "report.jsonl"


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _read_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config {path} is not valid JSON: {exc}") from None


def _out_dir(args) -> Path:
    if args.out is None:
        raise CliError(EXIT_CONFIG, "--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args):
    n = args.threads if args.threads is not None else os.environ.get("VOLCAP_THREADS")
    if n in (None, ""):
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise CliError(EXIT_CONFIG, "thread count must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------
# Run directories: config.json plus one VCKP per stage

def _train_config(run_dir: Path) -> TrainConfig:
    return TrainConfig.from_dict(_read_json(run_dir / RUN_CONFIG))


def _run_dir(path) -> Path:
    p = Path(path)
    return p if p.is_dir() else p.parent


def load_generator(path) -> Generator:
    """Generator from a run directory (or its ``model.vckp``)."""
    run = _run_dir(path)
    cfg = _train_config(run)
    state = checkpoint.load(run / MODEL_CKPT if Path(path).is_dir() else path)
    gen = Generator(cfg.model_config(), cfg.seed)
    gen.load_state_dict(state)
    return gen


def load_smoother(run: Path) -> PoseSmoother:
    cfg = _train_config(run)
    sm = PoseSmoother(cfg.smoother_config(), cfg.seed)
    sm.load_state_dict(checkpoint.load(run / SMOOTHER_CKPT))
    return sm


# --------------------------------------------------------------------------
# Commands

def cmd_synth(args):
    cfg = GenerationConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg.arc_seed = int(args.seed)
    out = _out_dir(args)
    ds = generate_triplets(cfg)
    path = vio.save_dataset(ds, out)
    print(f"wrote {len(ds)} triplets to {path}")


def cmd_pvh(args):
    """Fuse calibrated feature images (PVH1 rasters) into one volume."""
    doc = _read_json(args.config)
    unknown = set(doc) - {"dims", "voxel_size", "centre", "normalize"}
    if unknown:
        raise ConfigError(f"unknown pvh config keys: {sorted(unknown)}")
    cams = load_calibration(args.calibration)
    if len(args.features) != len(cams):
        raise RigMismatch(f"{len(cams)} cameras but {len(args.features)} feature images")
    imgs = [vio.read_feature_image(p) for p in args.features]
    spec = GridSpec.centred(doc.get("centre", (0.0, 0.0, 1000.0)), doc.get("dims", (32, 32, 32)),
                            doc.get("voxel_size", 62.5))
    g = build_pvh(cams, imgs, spec, normalize=bool(doc.get("normalize", False)))
    out = _out_dir(args)
    vio.write_volume(out / "pvh.pvh", g)
    print(f"wrote {out / 'pvh.pvh'}")


def cmd_train(args):
    cfg_doc = _read_json(args.config)
    if args.seed is not None:
        cfg_doc["seed"] = int(args.seed)
    if args.steps is not None:
        key = {"pretrain": "pretrain_steps", "full": "full_steps", "smoother": "smoother_steps"}
        if args.stage == "all":
            raise CliError(EXIT_CONFIG, "--steps needs a single --stage")
        cfg_doc[key[args.stage]] = int(args.steps)
    cfg = TrainConfig.from_dict(cfg_doc)
    ds = vio.load_dataset(args.manifest)
    out = _out_dir(args)
    (out / RUN_CONFIG).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True),
                                  encoding="utf-8")
    resume = checkpoint.load(args.resume) if args.resume else None
    report = RunReport(cfg.to_dict())
    stages = ["pretrain", "full", "smoother"] if args.stage == "all" else [args.stage]
    encoder_state = None
    for stage in stages:
        if stage == "pretrain":
            r = pretrain_encoder(ds, cfg, resume=resume if args.stage == "pretrain" else None)
            checkpoint.save(out / ENCODER_CKPT, r.state_dict())
            encoder_state = r.encoder.state_dict()
            report.extend(r.report)
        elif stage == "full":
            if encoder_state is None and args.encoder:
                encoder_state = checkpoint.load(args.encoder)
            elif encoder_state is None and (out / ENCODER_CKPT).is_file():
                encoder_state = checkpoint.load(out / ENCODER_CKPT)
            r = train_full(ds, encoder_state, cfg, resume=resume if args.stage == "full" else None)
            checkpoint.save(out / MODEL_CKPT, r.state_dict())
            report.extend(r.report)
        else:
            gen = load_generator(out)
            smoother, rep = train_smoother_stage(gen.encoder, ds, cfg)
            checkpoint.save(out / SMOOTHER_CKPT, smoother.state_dict())
            report.extend(rep)
    report.write(out / REPORT)
    print(f"trained {'+'.join(stages)}; checkpoints in {out}")


def _reconstruct_inputs(args):
    if args.inputs:
        return [vio.read_volume(p) for p in args.inputs]
    if args.calibration and args.features:
        ns = argparse.Namespace(config=args.grid, calibration=args.calibration,
                                features=args.features, out=args.out)
        cmd_pvh(ns)
        return [vio.read_volume(Path(args.out) / "pvh.pvh")]
    raise CliError(EXIT_CONFIG, "give --inputs volumes or --calibration with --features")


def cmd_reconstruct(args):
    gen = load_generator(args.checkpoint)
    out = _out_dir(args)
    grids = _reconstruct_inputs(args)
    dims = {g.spec.dims for g in grids}
    want = tuple(gen.cfg.grid[:3])
    if dims != {want} or any(g.channels != gen.cfg.grid[3] for g in grids):
        raise IncompatibleCheckpoint(f"model expects grid {tuple(gen.cfg.grid)}, inputs have "
                                     f"{sorted(dims)}")
    v_h, poses = predict(gen, np.stack([g.data for g in grids]))
    if args.smooth:
        run = _run_dir(args.checkpoint)
        if not (run / SMOOTHER_CKPT).is_file():
            raise IncompatibleCheckpoint(f"--smooth needs {run / SMOOTHER_CKPT}")
        smoother = load_smoother(run)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            poses = smooth_sequence(smoother, poses)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    for i, (g, v) in enumerate(zip(grids, v_h)):
        vio.write_volume(out / f"frame_{i:05d}.pvh", vio.VoxelGrid(g.spec, v))
    vio.write_poses(out / "poses.csv", poses)
    print(f"wrote {len(grids)} refined volumes and poses.csv to {out}")


def _counts(text):
    try:
        return [int(c) for c in text.split(",") if c]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--counts must be comma-separated ints, got {text!r}") from None


def _compare_predictions(args) -> MetricReport:
    """Score a predicted dataset against the reference manifest, grouped by view count."""
    ref = vio.load_dataset(args.manifest)
    pred = vio.load_dataset(args.predictions)
    if len(pred) != len(ref) or pred.v_high.shape != ref.v_high.shape:
        raise ShapeMismatch("prediction manifest does not match the reference frames")
    by_count = {}
    for i, views in enumerate(ref.views):
        by_count.setdefault(len(views), []).append(i)
    rep = MetricReport(["predictions"], sorted(by_count))
    for c, idx in sorted(by_count.items()):
        per = {}
        for s in sorted({ref.frame_ids[i][0] for i in idx}):
            j = [i for i in idx if ref.frame_ids[i][0] == s]
            per[str(s)] = {"input_mse": volume_mse(ref.v_low[j], ref.v_high[j]),
                           "refined_mse": volume_mse(pred.v_high[j], ref.v_high[j]),
                           "mpjpe": mpjpe(pred.poses[j], ref.poses[j])}
        mean = {k: float(np.mean([p[k] for p in per.values()])) for k in next(iter(per.values()))}
        rep.rows[("predictions", c)] = {"mean": mean, "per_sequence": per}
    return rep


def cmd_eval(args):
    out = _out_dir(args)
    if args.predictions:
        rep = _compare_predictions(args)
    else:
        if not args.checkpoint:
            raise CliError(EXIT_CONFIG, "give --checkpoint run directories or --predictions")
        m = vio.load_manifest(args.manifest)
        gen_cfg = GenerationConfig.from_dict(m.config)
        models = {Path(p).name or str(i): load_generator(p) for i, p in enumerate(args.checkpoint)}
        train_poses = vio.load_dataset(args.train_manifest).poses if args.train_manifest else None
        rep = run_ablation(models, gen_cfg, _counts(args.counts), train_poses=train_poses)
    (out / "metrics.json").write_text(rep.to_json(), encoding="utf-8")
    text = rep.to_text()
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_gradcheck(args):
    results = run_suite()
    for name, err, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<16} rel_err={err:.3e}")
    failed = [name for name, _, ok in results if not ok]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS threads (default $VOLCAP_THREADS)")
    p = argparse.ArgumentParser(prog="volcap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic triplet dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pvh", parents=[common], help="fuse feature images into a PVH")
    s.add_argument("--calibration", required=True)
    s.add_argument("--features", nargs="+", required=True, help="PVH1 rasters, camera order")
    s.set_defaults(func=cmd_pvh)

    s = sub.add_parser("train", parents=[common], help="run training stages")
    s.add_argument("--manifest", required=True)
    s.add_argument("--stage", choices=["pretrain", "full", "smoother", "all"], default="all")
    s.add_argument("--steps", type=int, help="override the step count of --stage")
    s.add_argument("--resume", help="checkpoint of the same stage to continue from")
    s.add_argument("--encoder", help="pretrained encoder checkpoint for --stage full")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", parents=[common], help="refine volumes and regress poses")
    s.add_argument("--checkpoint", required=True, help="training run directory")
    s.add_argument("--inputs", nargs="*", help="PVH1 input volumes in frame order")
    s.add_argument("--calibration")
    s.add_argument("--features", nargs="*")
    s.add_argument("--grid", help="grid JSON for --calibration/--features input")
    s.add_argument("--smooth", action="store_true", help="apply the LSTM smoother")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", parents=[common], help="camera-count ablation tables")
    s.add_argument("--manifest", required=True, help="held-out dataset manifest")
    s.add_argument("--checkpoint", nargs="*", help="training run directories (one per variant)")
    s.add_argument("--counts", default="2,4,8")
    s.add_argument("--train-manifest", help="training manifest for the mean-pose baseline")
    s.add_argument("--predictions", help="predicted dataset manifest to score instead")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference layer suite")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        with _threads(args):
            code = args.func(args)
        return EXIT_OK if code is None else int(code)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except _COMPAT_ERRORS as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except _IO_ERRORS as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
