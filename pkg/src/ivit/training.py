"""Optimisation, evaluation, training loops and the sensitivity sweep."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import IViTConfig, Schedule, SweepConfig, scale_config
from .features import cellular_features, decision_tree_fit, grade_distribution
from .features.tree import DecisionTree
from .instances import LABELS, EmptyBagError, RoiRecord, build_bag, iter_manifest
from .model import (
    BagBatch,
    ParameterStore,
    forward_logits,
    forward_logits_h,
    init_params,
    init_params_h,
)
from .numerics import ContractError, no_grad, ops

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "epoch",
    "split",
    "acc",
    "prec_type1",
    "rec_type1",
    "f1_type1",
    "prec_type2",
    "rec_type2",
    "f1_type2",
    "lr",
)


# -- schedule and optimiser --------------------------------------------------------

def lr_at_epoch(epoch: int, base_lr: float, warmup: int, decay_epoch: int, decay_lr: float) -> float:
    """Step decay with a linear warm-up that scales whichever rate is scheduled."""
    rate = base_lr if epoch < decay_epoch else decay_lr
    if epoch < warmup:
        rate = rate * (epoch + 1) / warmup
    return rate


def schedule_lr(schedule: Schedule, epoch: int) -> float:
    return lr_at_epoch(epoch, schedule.base_lr, schedule.warmup, schedule.decay_epoch, schedule.decay_lr)


class Adam:
    """Adam with bias correction; gradients are cleared after every step."""

    def __init__(self, params: ParameterStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float) -> None:
        for name, t in self.params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else 0.0
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.grad = None


def adam_step(params: ParameterStore, state: Adam, lr: float) -> None:
    if state.params is not params:
        raise ContractError("optimizer state belongs to a different parameter store")
    state.step(lr)


# -- metrics -----------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray  # rows: truth, cols: prediction

    def row(self) -> list[float]:
        out = [self.accuracy]
        for c in range(len(self.precision)):
            out += [self.precision[c], self.recall[c], self.f1[c]]
        return out

    def table(self, name: str = "model") -> str:
        head = f"{'Model':<10}| {'Acc%':>6} |" + "".join(
            f" {'Prec%':>6} {'Rec%':>6} {'F1%':>6} |" for _ in self.precision
        )
        group = f"{'':<10}| {'All':>6} |" + "".join(
            f" {('Type ' + str(c + 1)):^20} |" for c in range(len(self.precision))
        )
        body = f"{name:<10}| {100 * self.accuracy:6.2f} |" + "".join(
            f" {100 * p:6.2f} {100 * r:6.2f} {100 * f:6.2f} |"
            for p, r, f in zip(self.precision, self.recall, self.f1)
        )
        return "\n".join([group, head, body])


def evaluate(predictions, truth, n_classes: int = 2) -> MetricsReport:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ContractError(f"predictions {pred.shape} and truth {true.shape} must be equal-length 1-D")
    if pred.size == 0:
        raise ContractError("evaluate needs at least one sample")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    col, row = conf.sum(axis=0), conf.sum(axis=1)
    prec = np.divide(tp, col, out=np.zeros(n_classes), where=col > 0)
    rec = np.divide(tp, row, out=np.zeros(n_classes), where=row > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(n_classes), where=denom > 0)
    return MetricsReport(float(tp.sum() / conf.sum()), prec, rec, f1, conf)


# -- datasets ------------------------------------------------------------------------

@dataclass
class BagSet:
    """Pre-extracted bags for one split.

    Patches built from 8-bit images are held as uint8 (exactly k/255 on
    the way out), which keeps a desk-scale dataset in memory.
    """

    inputs: np.ndarray
    grid_x: np.ndarray
    grid_y: np.ndarray
    grade_ids: np.ndarray
    valid: np.ndarray
    labels: np.ndarray
    roi_ids: list[str]
    quantised: bool = False

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> BagBatch:
        idx = np.asarray(idx)
        x = self.inputs[idx]
        x = x.astype(np.float64) / 255.0 if self.quantised else x
        return BagBatch(x, self.grid_x[idx], self.grid_y[idx], self.grade_ids[idx], self.valid[idx], self.labels[idx])


def _stack(entries, quantise: bool) -> BagSet:
    if not entries:
        raise ContractError("no usable ROIs in split")
    cols = list(zip(*entries))
    inputs = np.stack(cols[0])
    if quantise:
        inputs = np.rint(inputs * 255.0).astype(np.uint8)
    return BagSet(
        inputs,
        np.stack(cols[1]),
        np.stack(cols[2]),
        np.stack(cols[3]),
        np.stack(cols[4]),
        np.array(cols[5], dtype=np.int64),
        list(cols[6]),
        quantise,
    )


def _is_quantised(patches: np.ndarray) -> bool:
    """True when every value is exactly k/255 for an integer k in [0, 255]."""
    k = np.rint(patches * 255.0)
    return bool(k.min() >= 0 and k.max() <= 255 and np.array_equal(k / 255.0, patches))


def bag_entry(roi: RoiRecord, cfg: IViTConfig, kind: str):
    """One bag's arrays; ``kind`` 'ivit' gives patches, 'ivit_h' nucleus features."""
    bag = build_bag(roi, cfg)
    if kind == "ivit":
        inputs = bag.patches
    else:
        tumor = roi.tumor_nuclei
        feats = cellular_features(roi, tumor, P=cfg.P)
        pos = {id(n): i for i, n in enumerate(tumor)}
        inputs = np.zeros((cfg.N, feats.shape[1]))
        for i, n in enumerate(bag.nuclei):
            inputs[i] = feats[pos[id(n)]]
    return inputs, bag.grid_x, bag.grid_y, bag.grade_ids, bag.valid, bag.label, bag.roi_id


def build_bagsets(
    rois: Iterable[RoiRecord], cfg: IViTConfig, kind: str = "ivit"
) -> dict[str, BagSet]:
    """Group ROIs by split (None -> 'all'); empty-bag ROIs are skipped with a warning."""
    groups: dict[str, list] = {}
    quantise = kind == "ivit"
    for roi in rois:
        try:
            entry = bag_entry(roi, cfg, kind)
        except EmptyBagError:
            log.warning("skipping ROI %s: no tumor nuclei", roi.roi_id)
            continue
        if quantise and not _is_quantised(entry[0]):
            quantise = False
        groups.setdefault(roi.split or "all", []).append(entry)
    return {name: _stack(entries, quantise) for name, entries in groups.items()}


def grade_features(rois: Iterable[RoiRecord]) -> dict[str, tuple[np.ndarray, np.ndarray, list[str]]]:
    """Per split: grade distributions [n, 3], labels, roi ids (for DT-G)."""
    groups: dict[str, list] = {}
    for roi in rois:
        try:
            x = grade_distribution(roi.nuclei)
        except ContractError:
            log.warning("skipping ROI %s: no tumor nuclei", roi.roi_id)
            continue
        groups.setdefault(roi.split or "all", []).append((x, roi.label_index, roi.roi_id))
    return {
        k: (np.stack([e[0] for e in v]), np.array([e[1] for e in v]), [e[2] for e in v])
        for k, v in groups.items()
    }


# -- training ------------------------------------------------------------------------

FORWARDS: dict[str, Callable] = {"ivit": forward_logits, "ivit_h": forward_logits_h}


def predict(kind: str, params: ParameterStore, cfg: IViTConfig, data: BagSet, batch_size: int = 8) -> np.ndarray:
    fwd = FORWARDS[kind]
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            out.append(fwd(data.batch(idx), params, cfg).data.argmax(axis=1))
    return np.concatenate(out)


def feature_scaling(train: BagSet) -> tuple[np.ndarray, np.ndarray]:
    rows = train.inputs[train.valid]
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


@dataclass
class TrainResult:
    kind: str
    params: ParameterStore
    config: IViTConfig
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    seconds: float = 0.0

    def meta(self, schedule: Schedule, seed: int) -> dict:
        return {
            "model": self.config.to_dict(),
            "schedule": schedule.__dict__,
            "seed": seed,
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "labels": list(LABELS),
        }


def train(
    kind: str,
    data: dict[str, BagSet],
    cfg: IViTConfig,
    schedule: Schedule,
    seed: int = 0,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch cross-entropy training with Adam; keeps the best-validation state.

    Reproducible for a fixed ``seed``: it fixes initialisation and the
    per-epoch shuffles.
    """
    if kind not in FORWARDS:
        raise ContractError(f"unknown model kind {kind!r}")
    train_set, val_set = data.get("train"), data.get("val")
    if train_set is None or val_set is None or not len(train_set) or not len(val_set):
        raise ContractError("training needs non-empty 'train' and 'val' splits")
    init_rng, shuffle_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    if kind == "ivit":
        params = init_params(cfg, init_rng)
    else:
        params = init_params_h(cfg, init_rng)
        params.buffers["feat_mean"], params.buffers["feat_std"] = feature_scaling(train_set)
    fwd = FORWARDS[kind]
    opt = Adam(params)
    result = TrainResult(kind, params, cfg)
    best_state = None
    start = time.perf_counter()
    for epoch in range(schedule.epochs):
        lr = schedule_lr(schedule, epoch)
        order = shuffle_rng.permutation(len(train_set))
        preds = np.empty(len(train_set), dtype=np.int64)
        losses = []
        for s in range(0, len(order), schedule.batch_size):
            idx = order[s : s + schedule.batch_size]
            batch = train_set.batch(idx)
            logits = fwd(batch, params, cfg)
            loss = ops.cross_entropy(logits, batch.labels)
            loss.backward()
            opt.step(lr)
            preds[idx] = logits.data.argmax(axis=1)
            losses.append(loss.item())
        train_rep = evaluate(preds, train_set.labels, cfg.n_classes)
        val_rep = evaluate(predict(kind, params, cfg, val_set), val_set.labels, cfg.n_classes)
        for split, rep in (("train", train_rep), ("val", val_rep)):
            result.log.append(_log_row(epoch, split, rep, lr))
        if best_state is None or val_rep.accuracy >= result.best_val_acc:
            best_state = params.state()
            result.best_epoch, result.best_val_acc = epoch, val_rep.accuracy
        info = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
                "train_acc": train_rep.accuracy, "val_acc": val_rep.accuracy}
        log.info("%s epoch %d lr %.2e loss %.4f train %.3f val %.3f", kind, epoch, lr,
                 info["loss"], train_rep.accuracy, val_rep.accuracy)
        if progress is not None:
            progress(info)
    params.load_state(best_state)
    result.seconds = time.perf_counter() - start
    return result


def _log_row(epoch: int, split: str, rep: MetricsReport, lr: float) -> dict:
    values = [epoch, split, *rep.row(), lr]
    return dict(zip(METRICS_HEADER, values))


def write_metrics_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train_dtg(features: dict, max_depth: int | None = None) -> DecisionTree:
    x, y, _ = features["train"]
    return decision_tree_fit(x, y, max_depth)


# -- sensitivity sweep ------------------------------------------------------------------

SWEEP_HEADER = ("scale", "P", "N", "accuracy")


def sensitivity_sweep(
    manifest: str | Path,
    base: IViTConfig,
    sweep: SweepConfig,
    schedule: Schedule,
    seed: int = 0,
    out_csv: str | Path | None = None,
) -> list[tuple[str, int, int, float]]:
    """Train and test one model per (scale, P, N) cell; failed cells record NaN."""
    rows = []
    for P in sweep.P:
        for N in sweep.N:
            try:
                data = build_bagsets(iter_manifest(manifest), base.replace(P=P, N=N), "ivit")
            except Exception as exc:  # noqa: BLE001 - a broken cell must not stop the sweep
                log.error("sweep cell P=%d N=%d: bag extraction failed: %s", P, N, exc)
                data = None
            for scale in sweep.scales:
                acc = float("nan")
                if data is not None:
                    try:
                        cfg = scale_config(base.replace(P=P, N=N), scale)
                        res = train("ivit", data, cfg, schedule, seed)
                        test = data["test"]
                        acc = evaluate(predict("ivit", res.params, cfg, test), test.labels).accuracy
                    except Exception as exc:  # noqa: BLE001
                        log.error("sweep cell %s P=%d N=%d failed: %s", scale, P, N, exc)
                log.info("sweep %s P=%d N=%d acc=%.4f", scale, P, N, acc)
                rows.append((scale, P, N, acc))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    if out_csv is not None:
        write_sweep_csv(rows, out_csv)
    return rows


def write_sweep_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for scale, P, N, acc in rows:
            writer.writerow([scale, P, N, "nan" if math.isnan(acc) else repr(acc)])
