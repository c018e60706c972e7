"""Hand-crafted nucleus features and their image-level aggregation."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..instances import Nucleus, RoiRecord, _crop
from ..numerics import ContractError
from .delaunay import delaunay_neighbor_distances

FEATURE_NAMES = (
    "area",
    "major_axis",
    "minor_axis",
    "axis_ratio",
    "mean_r",
    "mean_g",
    "mean_b",
    "d_max",
    "d_min",
    "d_mean",
)
STAT_NAMES = ("mean", "std", "skew", "kurt", "entropy") + tuple(f"h{i}" for i in range(10))
N_BINS = 10


def _color_means(image: np.ndarray, nucleus: Nucleus, P: int) -> np.ndarray:
    if nucleus.mask is not None and len(nucleus.mask):
        rows, cols = nucleus.mask[:, 0], nucleus.mask[:, 1]
        return image[:, rows, cols].mean(axis=1)
    return _crop(image, nucleus.cx, nucleus.cy, P).reshape(image.shape[0], -1).mean(axis=1)


def cellular_features(roi: RoiRecord, nuclei: Sequence[Nucleus] | None = None, P: int = 64) -> np.ndarray:
    """[n, 10] feature rows for ``nuclei`` (default: the ROI's tumor nuclei).

    The axis ratio of a degenerate nucleus with zero minor axis is taken as 1.
    Neighbour distances come from the triangulation of the given nuclei; a
    lone nucleus gets zeros.
    """
    nuclei = roi.tumor_nuclei if nuclei is None else list(nuclei)
    feats = np.zeros((len(nuclei), len(FEATURE_NAMES)))
    for i, n in enumerate(nuclei):
        ratio = n.major_axis / n.minor_axis if n.minor_axis > 0 else 1.0
        feats[i, :4] = n.area, n.major_axis, n.minor_axis, ratio
        feats[i, 4:7] = _color_means(roi.image, n, P)
    if len(nuclei) >= 2:
        feats[:, 7:] = delaunay_neighbor_distances([(n.cx, n.cy) for n in nuclei])
    return feats


def _column_stats(col: np.ndarray) -> np.ndarray:
    mean = col.mean()
    dev = col - mean
    m2 = (dev**2).mean()
    if m2 > 0:
        skew = (dev**3).mean() / m2**1.5
        kurt = (dev**4).mean() / m2**2 - 3.0
    else:
        skew = kurt = 0.0
    lo, hi = col.min(), col.max()
    if hi > lo:
        counts, _ = np.histogram(col, bins=N_BINS, range=(lo, hi))
    else:
        counts = np.zeros(N_BINS)
        counts[0] = col.size
    hist = counts / col.size
    nz = hist[hist > 0]
    entropy = -(nz * np.log(nz)).sum()
    return np.concatenate([[mean, np.sqrt(m2), skew, kurt, entropy], hist])


def aggregate_distribution(per_nucleus) -> np.ndarray:
    """150-vector: per feature column, 5 moments/entropy then a 10-bin histogram.

    Population std, Fisher skewness, excess kurtosis and natural-log entropy;
    histogram bins span the column's own [min, max].
    """
    mat = np.asarray(per_nucleus, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ContractError("aggregate_distribution needs at least one nucleus row")
    return np.concatenate([_column_stats(mat[:, j]) for j in range(mat.shape[1])])


def grade_distribution(nuclei: Iterable[Nucleus]) -> np.ndarray:
    counts = np.zeros(3)
    for n in nuclei:
        if n.is_tumor:
            counts[n.grade - 1] += 1
    total = counts.sum()
    if total == 0:
        raise ContractError("grade_distribution needs at least one tumor nucleus")
    return counts / total


def gbdt_gh_vector(roi: RoiRecord, P: int = 64) -> np.ndarray:
    """153-vector: aggregated cellular features followed by the grade distribution."""
    return np.concatenate([aggregate_distribution(cellular_features(roi, P=P)), grade_distribution(roi.nuclei)])


def feature_columns() -> list[str]:
    return [f"f{i:03d}" for i in range(len(FEATURE_NAMES) * len(STAT_NAMES) + 3)]


def feature_labels() -> list[str]:
    """Human-readable names for the f000..f152 columns."""
    names = [f"{f}.{s}" for f in FEATURE_NAMES for s in STAT_NAMES]
    return names + ["p1", "p2", "p3"]


def write_feature_csv(rows: Iterable[tuple[str, str, np.ndarray]], path: str | Path) -> int:
    count = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi_id", "label", *feature_columns()])
        for roi_id, label, vec in rows:
            writer.writerow([roi_id, label, *(repr(float(v)) for v in vec)])
            count += 1
    return count
