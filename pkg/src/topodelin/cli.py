"""Command-line entry point: synth / train / predict / eval / gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data, metrics, trainer, unet
from .data import DataError
from .engine import NonFiniteError
from .metrics import MetricError
from .runconfig import RunConfig
from .trainer import TrainingDiverged
from .unet import ConfigError
from .weights_io import WeightFormatError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_set(p):
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def _runconfig(args):
    rc = RunConfig.from_file(getattr(args, "config", None))
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        rc.override(key.strip(), value.strip())
    return rc


def _echo_config(rc, out_dir=None):
    text = rc.resolved_text()
    print(text, end="")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "resolved.cfg"), "w") as fh:
            fh.write(text)


def cmd_synth(args):
    rc = _runconfig(args)
    if args.seed is not None:
        rc.override("synth.seed", args.seed)
    cfg = rc.synth_config()
    _echo_config(rc, args.out)
    samples = data.synth(cfg, args.n)
    data.write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args):
    rc = _runconfig(args)
    if args.seed is not None:
        rc.override("train.seed", args.seed)
    model_cfg = rc.unet_config()
    train_cfg = rc.train_config()
    refine_cfg = rc.refine_config()
    mopts = rc.metrics_options()
    _echo_config(rc, args.out)
    dataset = data.read_dataset(args.data)
    result = trainer.train(dataset, model_cfg, refine_cfg, train_cfg,
                           out_dir=args.out, resume=args.resume,
                           rho=mopts["rho"], verbose=print)
    print(f"best validation quality {result.best_quality:.4f} "
          f"(threshold {result.best_threshold:.2f}); "
          f"checkpoint at {os.path.join(args.out, 'best.tdlw')}")
    return 0


def cmd_predict(args):
    model_cfg, params, _, meta = unet.load_checkpoint(args.checkpoint)
    for key, value in model_cfg.to_dict().items():
        print(f"unet.{key} = {value}")
    print(f"K = {args.k}")
    samples = data.read_dataset(args.data, with_labels=False)
    os.makedirs(args.out, exist_ok=True)
    images = np.stack([s.image for s in samples])[:, None]
    preds = trainer.predict_refined(model_cfg, params, images, args.k)
    for i, s in enumerate(samples):
        for k in range(1, args.k):
            data.save_image(os.path.join(args.out, f"{s.id}_k{k}.png"),
                            preds[k - 1][i, 0])
        final = preds[-1][i, 0] if preds else np.zeros_like(s.image)
        data.save_image(os.path.join(args.out, f"{s.id}.png"), final)
    print(f"wrote {args.k} map(s) per id for {len(samples)} ids to {args.out}")
    return 0


def _gt_path(root, sid):
    for sub in ("labels", "", "images"):
        for ext in ("png", "pgm"):
            path = os.path.join(root, sub, f"{sid}.{ext}") if sub \
                else os.path.join(root, f"{sid}.{ext}")
            if os.path.exists(path):
                return path
    raise DataError(f"no file for id {sid!r} under {root}")


def _pred_path(root, sid):
    for sub in ("", "labels", "images"):
        for ext in ("png", "pgm"):
            path = os.path.join(root, sub, f"{sid}.{ext}") if sub \
                else os.path.join(root, f"{sid}.{ext}")
            if os.path.exists(path):
                return path
    raise DataError(f"no prediction for id {sid!r} under {root}")


def _eval_ids(gt_root):
    manifest = os.path.join(gt_root, "manifest.txt")
    if os.path.exists(manifest):
        return data.read_manifest(gt_root)
    names = set()
    for entry in sorted(os.listdir(gt_root)):
        base, dot, ext = entry.rpartition(".")
        if dot and ext.lower() in ("png", "pgm"):
            names.add(base)
    if not names:
        raise DataError(f"no images found under {gt_root}")
    return sorted(names)


def cmd_eval(args):
    rc = _runconfig(args)
    mopts = rc.metrics_options()
    if args.rho is not None:
        mopts["rho"] = args.rho
    if args.threshold is not None:
        mopts["threshold"] = args.threshold
    rho = mopts["rho"]
    rho_match = mopts["rho_match"] if mopts["rho_match"] is not None else rho

    ids = _eval_ids(args.gt)
    pairs = []
    for sid in ids:
        prob = data.load_image(_pred_path(args.pred, sid))
        gt = data.load_gt(_gt_path(args.gt, sid))
        if prob.shape != gt.shape:
            raise DataError(
                f"id {sid!r}: prediction {prob.shape} != ground truth {gt.shape}")
        pairs.append((sid, prob, gt))

    thr_text = str(mopts["threshold"])
    if thr_text == "auto":
        threshold, _ = metrics.select_threshold(
            [p for _, p, _ in pairs], [g for _, _, g in pairs], rho=rho)
    else:
        threshold = float(thr_text)

    reports = [metrics.evaluate_pair(sid, prob, gt, rho=rho,
                                     rho_match=rho_match, threshold=threshold,
                                     path_samples=int(mopts["path_samples"]),
                                     seed=int(mopts["seed"]) + i)
               for i, (sid, prob, gt) in enumerate(pairs)]
    table = metrics.report_table(reports)
    print(table, end="")
    if args.out:
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(table)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    dtype = np.float32 if args.single else np.float64
    if args.single:
        print("# single precision: checks are allowed to fail at the "
              "double-precision tolerance")
    results = run_suite(seed=args.seed, dtype=dtype)
    return 0 if all(r.passed for r in results) else 3


def build_parser():
    parser = _Parser(prog="topodelin",
                     description="Topology-aware delineation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    _add_set(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with the refinement schedule")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    _add_set(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write refined predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--K", dest="k", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--config")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--threshold")
    p.add_argument("--out")
    _add_set(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--single", action="store_true",
                   help="run in single precision (allowed to fail)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, _UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, WeightFormatError, MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
