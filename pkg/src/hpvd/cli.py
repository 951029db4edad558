"""Command-line entry point: ``hpvd {phantom,train,infer,eval,compare}``.

Global flags ``--seed``, ``--config`` and ``--out`` go before the subcommand.
A JSON config holds option names as keys (dashes or underscores) and supplies
defaults that explicit flags override.  Two extra keys are understood:
``phantom_config`` (generator parameters) and ``model`` (detector
parameters).

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .errors import DataError, DivergenceError, HPVDError, ManifestError
from .geometry import StudyPredictions, dump_predictions, load_predictions
from .metrics import (auc_lroc, bonferroni, build_evals, compare_auc_paired, froc, lroc, sensitivity_at,
                      write_froc_csv, write_json, write_lroc_csv)
from .net.estimator import HeteroPhaseDetector
from .phantom import PhantomConfig, generate_dataset, load_split, write_dataset
from .postprocess import PostprocessConfig, pipeline
from .volume import parse_phases

log = logging.getLogger("hpvd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

MODEL_FILE = "model.zip"
TRAIN_LOG = "train_log.csv"
RAW_DETECTIONS = "detections_raw.json"
FINAL_DETECTIONS = "detections.json"


class UsageError(Exception):
    pass


# -- subcommands ------------------------------------------------------------------

def cmd_phantom(args, extra: dict) -> None:
    try:
        cfg = PhantomConfig.from_dict(extra.get("phantom_config", {}))
    except TypeError as exc:
        raise UsageError(f"bad phantom_config: {exc}") from exc
    ds = generate_dataset(cfg, args.n_target, args.n_control, seed=args.seed)
    write_dataset(ds, args.out, cfg, args.seed)
    log.info("wrote %d studies to %s", sum(len(v) for v in ds.values()), args.out)


def cmd_train(args, extra: dict) -> None:
    studies = load_split(args.data, args.split)
    params = dict(extra.get("model", {}))
    if args.n_batches is not None:
        params["n_batches"] = args.n_batches
    params["random_state"] = args.seed
    if "crop_size" in params:
        params["crop_size"] = tuple(params["crop_size"])
    try:
        est = HeteroPhaseDetector(**params)
    except TypeError as exc:
        raise UsageError(f"bad model parameters: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    est.fit(studies)
    est.save(out / MODEL_FILE)
    with open(out / TRAIN_LOG, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "loss", "lr", "phases"])
        for row in est.log_:
            w.writerow([row["batch"], repr(row["loss"]), repr(row["lr"]), row["phases"]])


def postprocess_config(args) -> PostprocessConfig:
    return PostprocessConfig(nms_iou=args.nms_iou, liver_overlap_min=args.liver_overlap,
                             tace_hu_threshold=args.tace_hu, tace_fraction=args.tace_fraction)


def cmd_infer(args, extra: dict) -> None:
    est = HeteroPhaseDetector.load(args.model)
    studies = load_split(args.data, args.split)
    phases = parse_phases(args.phases) if args.phases else None
    pp = postprocess_config(args)
    raw, final = [], []
    for study in sorted(studies, key=lambda s: s.id):
        try:
            dets = est.predict([study], phases=phases)[0]
            result = pipeline(dets, study, pp, phases)
        except DataError as exc:
            log.warning("study %s: %s", study.id, exc)
            err = f"{exc.code}: {exc}"
            raw.append(StudyPredictions(study.id, [], err))
            final.append(StudyPredictions(study.id, [], err))
            continue
        raw.append(StudyPredictions(study.id, dets))
        final.append(StudyPredictions(study.id, result.hcc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_predictions(raw, out / RAW_DETECTIONS)
    dump_predictions(final, out / FINAL_DETECTIONS)


def _evals(detections_path, args):
    studies = load_split(args.data, args.split)
    preds = _load_preds(detections_path)
    try:
        return build_evals(studies, preds), sum(p.error is not None for p in preds)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _load_preds(path) -> list[StudyPredictions]:
    try:
        return load_predictions(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing detections file: {path}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed detections ({exc})") from exc


def cmd_eval(args, extra: dict) -> None:
    evals, n_err = _evals(args.detections, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        auc = auc_lroc(evals, args.tau_iobb, args.mode)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    curve = froc(evals, args.tau_iobb, args.mode)
    write_froc_csv(curve, out / "froc.csv")
    write_lroc_csv(lroc(evals, args.tau_iobb, args.mode), out / "lroc.csv")
    report = auc.to_dict()
    report["sensitivity_at_fps"] = {repr(f): sensitivity_at(curve, f) for f in args.fps}
    report["n_error_records"] = n_err
    write_json(report, out / "auc.json")


def cmd_compare(args, extra: dict) -> None:
    evals_a, _ = _evals(args.a, args)
    evals_b, _ = _evals(args.b, args)
    try:
        cmp = compare_auc_paired(evals_a, evals_b, args.tau_iobb, args.mode)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    report = cmp.to_dict()
    report["p_bonferroni"] = bonferroni([cmp.p], args.m_tests)[0]
    report["m_tests"] = args.m_tests
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "compare.json")


# -- parser ------------------------------------------------------------------------

def _eval_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory holding index.json")
    p.add_argument("--split", default="test")
    p.add_argument("--tau-iobb", type=float, default=0.3)
    p.add_argument("--mode", choices=("3d", "2d"), default="3d")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="hpvd", description="Hetero-phase liver lesion detection toolkit.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", type=Path, help="JSON file of option defaults")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["phantom"] = sub.add_parser("phantom", help="write a synthetic dataset")
    p.add_argument("--n-target", type=int, default=8)
    p.add_argument("--n-control", type=int, default=8)
    p.set_defaults(func=cmd_phantom)

    p = subs["train"] = sub.add_parser("train", help="train the detector")
    p.add_argument("--data")
    p.add_argument("--split", default="train")
    p.add_argument("--n-batches", type=int)
    p.set_defaults(func=cmd_train)

    p = subs["infer"] = sub.add_parser("infer", help="detect lesions with a trained model")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--phases", help='phase subset, e.g. "NC,VP" (default: all present)')
    p.add_argument("--nms-iou", type=float, default=0.1)
    p.add_argument("--liver-overlap", type=float, default=0.30)
    p.add_argument("--tace-hu", type=float, default=200.0)
    p.add_argument("--tace-fraction", type=float, default=0.01)
    p.set_defaults(func=cmd_infer)

    p = subs["eval"] = sub.add_parser("eval", help="FROC and LROC reports")
    p.add_argument("--detections")
    _eval_options(p)
    p.add_argument("--fps", type=float, nargs="+", default=[0.125, 0.25, 0.5, 1.0])
    p.set_defaults(func=cmd_eval)

    p = subs["compare"] = sub.add_parser("compare", help="paired LROC AUC comparison")
    p.add_argument("--a", help="detections of system A")
    p.add_argument("--b", help="detections of system B")
    _eval_options(p)
    p.add_argument("--m-tests", type=int, default=1, help="number of tests for Bonferroni")
    p.set_defaults(func=cmd_compare)
    return parser, subs


def _load_config(path: Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing config file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return cfg


REQUIRED = {"train": ("data",), "infer": ("model", "data"), "eval": ("detections", "data"),
            "compare": ("a", "b", "data")}


def _apply_config(path: Path, parser, subs, command: str) -> dict:
    """Install config values as parser defaults; returns the nested extras."""
    cfg = _load_config(path)
    extra = {k: cfg.pop(k) for k in ("phantom_config", "model") if k in cfg}
    flat = {k.replace("-", "_"): v for k, v in cfg.items()}
    sub = subs[command]
    known_sub = {a.dest for a in sub._actions} - {"help"}
    known_top = {"seed", "out"}
    unknown = set(flat) - known_sub - known_top
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    sub.set_defaults(**{k: v for k, v in flat.items() if k in known_sub})
    parser.set_defaults(**{k: v for k, v in flat.items() if k in known_top})
    return extra


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        extra = {}
        if args.config is not None:
            extra = _apply_config(args.config, parser, subs, args.command)
            # explicit flags still win over config defaults
            args = parser.parse_args(argv)
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED.get(args.command, ())
                   if getattr(args, k) is None]
        if missing:
            raise UsageError(f"missing required options: {' '.join(missing)}")
        args.out = Path(args.out)
        args.func(args, extra)
    except (UsageError, ValueError) as exc:
        print(f"hpvd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"hpvd {args.command}: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as exc:
        print(f"hpvd {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HPVDError as exc:
        print(f"hpvd {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK
