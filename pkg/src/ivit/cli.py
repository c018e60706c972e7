"""Command-line entry point: ``ivit <subcommand> ...``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Verbosity comes from the ``IVIT_LOG`` environment variable
(``error``, ``info`` or ``debug``; default ``info``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import zipfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .checks import end_to_end_check
from .config import IVIT_H_MODEL, IVIT_H_SCHEDULE, PROFILES, ConfigError, IViTConfig, RunConfig
from .features import DecisionTree, gbdt_gh_vector, write_feature_csv
from .instances import LABELS, EmptyBagError, build_bag, iter_manifest
from .model import load_checkpoint, save_checkpoint
from .numerics import ContractError, encode_tensor, op_suite
from .synthetic import ABLATIONS, SynthParams, generate_dataset
from .training import (
    METRICS_HEADER,
    BagSet,
    build_bagsets,
    evaluate,
    grade_features,
    predict,
    sensitivity_sweep,
    train,
    train_dtg,
    write_metrics_log,
)

log = logging.getLogger("ivit")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
MODELS = ("ivit", "ivit_h", "dt_g")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return parts


def _common_options(default) -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--profile", choices=sorted(PROFILES), default=default,
                        help="parameter profile (default: paper)")
    common.add_argument("--threads", type=int, default=default, help="worker threads for parallel stages")
    common.add_argument("--seed", type=int, default=default, help="random seed (overrides the config)")
    return common


def build_parser() -> argparse.ArgumentParser:
    # Global options are accepted before or after the subcommand; SUPPRESS keeps
    # the subcommand copy from overwriting a value given before it.
    parser = _Parser(prog="ivit", description="Instance-based vision transformer toolkit.",
                     parents=[_common_options(None)])
    common = _common_options(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic ROI dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-per-class", type=int, required=True)
    p.add_argument("--ablation", choices=ABLATIONS, default="full")
    p.add_argument("--fractions", type=_fractions, default=(0.6, 0.2, 0.2),
                   help="train,val,test split fractions")
    p.add_argument("--config", help="JSON run config (its 'synth' section is used)")

    p = sub.add_parser("extract", parents=[common], help="extract instance bags to a binary archive")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output .zip of IVT1 tensors")

    p = sub.add_parser("features", parents=[common], help="export 153-dim ROI feature vectors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--config")

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-epoch metrics CSV (default: <out>.metrics.csv)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", help="split to evaluate ('all' when the manifest has none)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    p.add_argument("--tolerance", type=float, default=1e-6, help="per-op tolerance")
    p.add_argument("--model-tolerance", type=float, default=1e-5, help="end-to-end tolerance")

    p = sub.add_parser("sweep", parents=[common], help="P x N x scale sensitivity sweep")
    p.add_argument("--config")
    p.add_argument("--manifest", help="overrides paths.manifest in the config")
    p.add_argument("--out", required=True, help="output CSV")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), args.profile or "paper")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _seed(args, cfg: RunConfig | None = None) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.seed if cfg is not None else 0


def _threads(args) -> int:
    n = args.threads or 1
    if n < 1:
        raise ConfigError("--threads must be positive")
    return n


# -- subcommands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    run = _run_config(args)
    params = SynthParams.from_dict({**run.synth, "seed": _seed(args, run), "ablation": args.ablation})
    manifest = generate_dataset(args.n_per_class, params, args.out, args.fractions, threads=_threads(args))
    print(manifest)
    return 0


def cmd_extract(args) -> int:
    run = _run_config(args)
    cfg = run.model
    index = []
    with zipfile.ZipFile(args.out, "w", compression=zipfile.ZIP_STORED) as zf:
        for roi in iter_manifest(args.manifest):
            try:
                bag = build_bag(roi, cfg)
            except EmptyBagError:
                log.warning("skipping ROI %s: no tumor nuclei", roi.roi_id)
                continue
            arrays = {
                "patches": bag.patches,
                "grid_x": bag.grid_x,
                "grid_y": bag.grid_y,
                "grade_ids": bag.grade_ids,
                "valid": bag.valid,
            }
            for name, arr in arrays.items():
                zf.writestr(f"bags/{roi.roi_id}/{name}.ivt", encode_tensor(np.asarray(arr, dtype=np.float64)))
            index.append({"roi_id": roi.roi_id, "label": roi.label, "split": roi.split,
                          "n_valid": int(bag.valid.sum())})
        zf.writestr("index.json", json.dumps({"config": cfg.to_dict(), "bags": index}, indent=1))
    print(f"{len(index)} bags -> {args.out}")
    return 0


def cmd_features(args) -> int:
    run = _run_config(args)
    P = run.model.P

    def rows():
        for roi in iter_manifest(args.manifest):
            try:
                yield roi.roi_id, roi.label, gbdt_gh_vector(roi, P=P)
            except (EmptyBagError, ContractError) as exc:
                log.warning("skipping ROI %s: %s", roi.roi_id, exc)

    n = write_feature_csv(rows(), args.out)
    print(f"{n} rows -> {args.out}")
    return 0


def model_setup(kind: str, run: RunConfig):
    """Model config and schedule for ``kind`` (i-ViT-H uses its own small encoder)."""
    if kind == "ivit_h":
        cfg = run.model.replace(**IVIT_H_MODEL, head_dim=None)
        sched = dataclasses.replace(run.schedule, **IVIT_H_SCHEDULE)
        return cfg, sched
    return run.model, run.schedule


def cmd_train(args) -> int:
    run = _run_config(args)
    seed = _seed(args, run)
    if args.model == "dt_g":
        feats = grade_features(iter_manifest(args.manifest))
        if "train" not in feats:
            raise ContractError("manifest has no 'train' split")
        tree = train_dtg(feats, run.dt_max_depth)
        meta = {"tree": tree.to_dict(), "labels": list(LABELS), "max_depth": run.dt_max_depth,
                "inputs": "grade_distribution"}
        save_checkpoint(args.out, "dt_g", meta)
        x, y, _ = feats["train"]
        print(f"dt_g depth {tree.depth()} train acc {evaluate(tree.predict(x), y).accuracy:.4f}")
        return 0
    cfg, sched = model_setup(args.model, run)
    data = build_bagsets(iter_manifest(args.manifest), cfg, args.model)
    result = train(args.model, data, cfg, sched, seed)
    save_checkpoint(args.out, args.model, result.meta(sched, seed), result.params)
    write_metrics_log(result.log, args.metrics or f"{args.out}.metrics.csv")
    print(f"{args.model} best epoch {result.best_epoch} val acc {result.best_val_acc:.4f} "
          f"({result.seconds:.1f}s)")
    return 0


def _predict_parallel(kind, params, cfg, data, threads: int) -> np.ndarray:
    if threads <= 1 or len(data) < 2 * threads:
        return predict(kind, params, cfg, data)
    chunks = np.array_split(np.arange(len(data)), threads)

    def run(idx):
        return predict(kind, params, cfg, _subset(data, idx))

    with ThreadPoolExecutor(threads) as pool:
        return np.concatenate(list(pool.map(run, chunks)))


def _subset(data, idx):
    return BagSet(data.inputs[idx], data.grid_x[idx], data.grid_y[idx], data.grade_ids[idx],
                          data.valid[idx], data.labels[idx], [data.roi_ids[i] for i in idx], data.quantised)


def cmd_eval(args) -> int:
    meta, params = load_checkpoint(args.ckpt)
    kind = meta.get("kind")
    if kind not in MODELS:
        raise ContractError(f"checkpoint has unknown model kind {kind!r}")
    split = args.split
    if kind == "dt_g":
        feats = grade_features(iter_manifest(args.manifest))
        if split not in feats:
            raise ContractError(f"manifest has no {split!r} split (have {sorted(feats)})")
        x, y, _ = feats[split]
        pred = DecisionTree.from_dict(meta["tree"]).predict(x)
        truth = y
        epoch = ""
    else:
        cfg = IViTConfig.from_dict(meta["model"])
        data = build_bagsets(iter_manifest(args.manifest), cfg, kind)
        if split not in data:
            raise ContractError(f"manifest has no {split!r} split (have {sorted(data)})")
        pred = _predict_parallel(kind, params, cfg, data[split], _threads(args))
        truth = data[split].labels
        epoch = meta.get("best_epoch", "")
    rep = evaluate(pred, truth)
    names = {"ivit": "i-ViT", "ivit_h": "i-ViT-H", "dt_g": "DT-G"}
    print(rep.table(names[kind]))
    print()
    print(",".join(METRICS_HEADER))
    print(",".join([str(epoch), split, *(f"{v:.6f}" for v in rep.row()), ""]))
    return 0


def cmd_gradcheck(args) -> int:
    seed = _seed(args)
    rows = op_suite(seed, args.tolerance) + end_to_end_check(seed, tolerance=args.model_tolerance)
    width = max(len(r.name) for r in rows)
    print(f"{'check':<{width}}  {'max_rel_err':>12}  {'tol':>8}  result")
    for r in rows:
        print(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {r.tolerance:8.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed")
    return 0 if not failed else 2


def cmd_sweep(args) -> int:
    run = _run_config(args)
    manifest = args.manifest or run.paths.manifest
    if not manifest:
        raise ConfigError("sweep needs --manifest or paths.manifest in the config")
    rows = sensitivity_sweep(manifest, run.model, run.sweep, run.schedule, _seed(args, run), args.out)
    print(f"{len(rows)} cells -> {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "features": cmd_features,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def _setup_logging() -> None:
    level = os.environ.get("IVIT_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging()
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - report, do not traceback
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
