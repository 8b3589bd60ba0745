"""Command-line entry point: ``neuroseg <command> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np

from .config import ConfigError, DataConfig, RunConfig, build_section, set_override, toy_run_config
from .experiments import (GRIDS, evaluate_samples, gradient_suite, load_splits, run_ablation,
                          run_experiment)
from .imgio import (IMAGE_SUFFIXES, DatasetError, PhantomConfig, phantom_dataset, read_image,
                    save_dataset)
from .metrics import MetricsReport, cldice_metric, confusion, report_all, scores
from .postprocess import predict, refine, tta_predict
from .preprocess import preprocess_image
from .trainer import load_checkpoint

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("neuroseg")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> RunConfig:
    if args.config:
        raw = RunConfig.load(args.config).to_dict()
    else:
        raw = toy_run_config().to_dict()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_override(raw, key.strip(), _parse_value(value))
    if getattr(args, "out", None):
        raw["output_dir"] = args.out
    return RunConfig.from_dict(raw)


def _run_config_from_checkpoint(payload: dict, path) -> RunConfig:
    if "run_config" in payload:
        return RunConfig.from_dict(payload["run_config"])
    sibling = Path(path).parent / "config.json"
    if sibling.exists():
        return RunConfig.load(sibling)
    raise ConfigError(f"{path}: no run config stored with the checkpoint or beside it")


# ---------------------------------------------------------------- commands

def cmd_config(args) -> int:
    cfg = toy_run_config() if args.toy else RunConfig(data=DataConfig(phantom=PhantomConfig()))
    text = cfg.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{args.config}: {e}") from None
        if "data" in raw:  # a full run config
            raw = (raw["data"] or {}).get("phantom") or {}
        pc = build_section(PhantomConfig, raw, "phantom")
    else:
        pc = PhantomConfig.toy() if args.toy else PhantomConfig()
    if args.seed is not None:
        pc = replace(pc, seed=args.seed)
    if args.tubules is not None:
        pc = replace(pc, tubule_count=tuple(args.tubules))
    samples = phantom_dataset(pc, args.n, args.dense_fraction)
    save_dataset(samples, args.out, sidecar={"phantom_config": pc.to_dict()})
    print(f"wrote {len(samples)} phantoms to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = cfg.resolved_output_dir()
    res = run_experiment(cfg, run_dir, resume=args.resume)
    print(f"best epoch {res.train_result.best_epoch} val loss {res.train_result.best_monitor:.6f}")
    for conv, rep in res.test_reports.items():
        print(f"test [{conv}] dsc {rep.dsc:.4f} iou {rep.iou:.4f} precision {rep.precision:.4f} "
              f"recall {rep.recall:.4f}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _mask_files(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"not a directory: {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _pairs_from_dirs(pred_dir, gt_dir):
    preds, gts = _mask_files(pred_dir), _mask_files(gt_dir)
    if len(preds) != len(gts) or set(preds) != set(gts):
        missing = sorted(set(gts) - set(preds))[:5]
        extra = sorted(set(preds) - set(gts))[:5]
        raise DatasetError(f"{len(preds)} predictions vs {len(gts)} ground-truth masks "
                           f"(missing {missing}, unmatched {extra})")
    ids = sorted(gts)
    return ids, [(read_image(preds[i])[..., 0] >= 0.5, read_image(gts[i])[..., 0] >= 0.5) for i in ids]


def _write_eval(out_dir, ids, pairs, reports, cl) -> dict:
    payload = {k: v.to_dict() for k, v in reports.items()}
    payload["cldice"] = cl
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        names = MetricsReport.score_names()
        with open(out / "per_image.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + names + ["cldice"])
            for i, (p, g) in zip(ids, pairs):
                r = scores(confusion(p, g)).to_dict()
                w.writerow([i] + [repr(r[n]) for n in names] + [repr(cldice_metric(p, g))])
    return payload


def cmd_eval(args) -> int:
    if args.pred or args.gt:
        if not (args.pred and args.gt) or args.checkpoint:
            raise ConfigError("give either a checkpoint or both --pred and --gt")
        ids, pairs = _pairs_from_dirs(args.pred, args.gt)
        if not pairs:
            raise DatasetError(f"no masks found in {args.gt}")
        reports = report_all(pairs)
        cl = float(np.mean([cldice_metric(p, g) for p, g in pairs]))
    else:
        if not args.checkpoint:
            raise ConfigError("give a checkpoint or --pred/--gt directories")
        model, payload = load_checkpoint(args.checkpoint)
        cfg = _run_config_from_checkpoint(payload, args.checkpoint)
        if args.dataset:
            cfg = replace(cfg, data=replace(cfg.data, dataset=args.dataset, holdout=0))
        splits = load_splits(cfg.data, cfg.preprocess)
        samples = {"train": splits.train, "val": splits.val, "test": splits.test}[args.split]
        if not samples:
            raise ConfigError(f"split {args.split!r} is empty")
        reports, cl, pairs = evaluate_samples(model, samples, cfg.postprocess, use_tta=args.tta,
                                              return_pairs=True)
        ids = [s.id for s in samples]
    print(json.dumps(_write_eval(args.out, ids, pairs, reports, cl), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    cfg = _run_config_from_checkpoint(payload, args.checkpoint)
    src = Path(args.input)
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if src.is_dir() else [src]
    if not paths:
        raise DatasetError(f"no images found at {src}")
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "probabilities").mkdir(parents=True, exist_ok=True)
    model.eval()
    for i, p in enumerate(paths):
        raw = read_image(p)
        img = preprocess_image(raw, cfg.preprocess)
        prob = tta_predict(model, img, cfg.postprocess, seed=i) if args.tta else predict(model, img)
        h, w = raw.shape[:2]
        mask = refine(prob, cfg.postprocess)
        if (h, w) != prob.shape:
            prob = np.clip(cv2.resize(prob, (w, h), interpolation=cv2.INTER_LINEAR), 0, 1)
            mask = cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)
        cv2.imwrite(str(out / "masks" / f"{p.stem}.png"), mask.astype(np.uint8) * 255)
        cv2.imwrite(str(out / "probabilities" / f"{p.stem}.png"), np.round(prob * 65535).astype(np.uint16))
    print(f"wrote {len(paths)} masks to {out / 'masks'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.resolved_output_dir().parent / f"ablation_{args.grid}"
    rows = run_ablation(cfg, args.grid, list(range(args.seeds)), out, args.variants)
    names = ["variant", "dsc", "iou", "precision", "recall", "cldice", "val_loss"]
    print("  ".join(f"{n:>22}" if n == "variant" else f"{n:>9}" for n in names))
    for r in rows:
        print(f"{r['variant']:>22}  " + "  ".join(f"{r[n]:9.4f}" for n in names[1:]))
    print(f"summary written to {out / f'{args.grid}_summary.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = gradient_suite(args.seeds)
    print(f"{'loss':>10}  {'max rel err':>12}  {'tolerance':>9}  result")
    for r in rows:
        print(f"{r['loss']:>10}  {r['max_rel_error']:12.3e}  {r['tolerance']:9.0e}  "
              f"{'PASS' if r['passed'] else 'FAIL'}")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neuroseg", description="Fluorescent cell segmentation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print a default run config as JSON")
    p.add_argument("--toy", action="store_true", help="desk-scale network and phantoms")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--dense-fraction", type=float, default=0.5)
    p.add_argument("--config", help="phantom config JSON (bare, or a run config with data.phantom)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--toy", action="store_true", help="64x96 canvases")
    p.add_argument("--tubules", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.set_defaults(func=cmd_synth)

    def add_config_args(q):
        q.add_argument("--config", help="run config JSON (default: toy config)")
        q.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. train.epochs=5 (repeatable)")
        q.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train, keep the best checkpoint, evaluate on the test split")
    add_config_args(p)
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a data split, or mask files against ground truth")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--pred", help="directory of predicted masks (instead of a checkpoint)")
    p.add_argument("--gt", help="directory of ground-truth masks, matched to --pred by file stem")
    p.add_argument("--out", help="write metrics.json and per_image.csv here")
    p.add_argument("--dataset", help="evaluate on this directory instead of the training data")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--tta", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write binary masks and probability maps")
    p.add_argument("checkpoint")
    p.add_argument("input", help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run a loss or architecture ablation grid")
    add_config_args(p)
    p.add_argument("--grid", choices=GRIDS, required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (0..n-1)")
    p.add_argument("--variants", nargs="+", help="subset of the grid")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
