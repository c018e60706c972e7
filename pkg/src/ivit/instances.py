"""From a segmented ROI to the model's fixed-length instance bag."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .config import IViTConfig
from .numerics import ContractError

log = logging.getLogger(__name__)

KINDS = ("grade1", "grade2", "grade3", "endothelial")
GRADE_OF = {"grade1": 1, "grade2": 2, "grade3": 3}
LABELS = ("type1", "type2")


class EmptyBagError(ValueError):
    """The ROI holds no tumor nuclei, so no instance bag can be formed."""


@dataclass
class Nucleus:
    cx: float
    cy: float
    kind: str
    area: float
    major_axis: float
    minor_axis: float
    mask: np.ndarray | None = None  # [K, 2] absolute (row, col) pixels

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown nucleus kind {self.kind!r}")
        if not self.area > 0:
            raise ContractError(f"nucleus area must be positive, got {self.area}")
        if not self.major_axis >= self.minor_axis >= 0:
            raise ContractError(
                f"need major_axis >= minor_axis >= 0, got {self.major_axis}, {self.minor_axis}"
            )
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.int64).reshape(-1, 2)
            if len(self.mask) != self.area:
                raise ContractError(
                    f"area {self.area} disagrees with mask of {len(self.mask)} pixels"
                )

    @property
    def is_tumor(self) -> bool:
        return self.kind in GRADE_OF

    @property
    def grade(self) -> int:
        return GRADE_OF.get(self.kind, 0)


@dataclass
class RoiRecord:
    image: np.ndarray  # [C, H, W], values in [0, 1]
    nuclei: list[Nucleus]
    label: str
    roi_id: str
    split: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ContractError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.image.ndim != 3:
            raise ContractError(f"ROI image must be [C, H, W], got {self.image.shape}")
        _, h, w = self.image.shape
        for n in self.nuclei:
            if not (0 <= n.cx < w and 0 <= n.cy < h):
                raise ContractError(f"nucleus center ({n.cx}, {n.cy}) outside {w}x{h} ROI {self.roi_id}")

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)

    @property
    def tumor_nuclei(self) -> list[Nucleus]:
        return [n for n in self.nuclei if n.is_tumor]


@dataclass
class InstanceBag:
    patches: np.ndarray  # [N, C, P, P]
    grid_x: np.ndarray  # int64 [N]
    grid_y: np.ndarray
    grade_ids: np.ndarray  # grade - 1 for real entries
    valid: np.ndarray  # bool [N]
    label: int
    roi_id: str = ""
    nuclei: list[Nucleus] = field(default_factory=list, repr=False)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


# -- geometry ---------------------------------------------------------------------

def crop_patch(roi: RoiRecord, nucleus: Nucleus, P: int) -> np.ndarray:
    """P x P window around the floored nucleus center, zero outside the ROI."""
    if P % 2 or P < 8:
        raise ContractError(f"patch size must be even and >= 8, got {P}")
    return _crop(roi.image, nucleus.cx, nucleus.cy, P)


def _crop(image: np.ndarray, cx: float, cy: float, P: int) -> np.ndarray:
    c, h, w = image.shape
    half = P // 2
    r0, c0 = math.floor(cy) - half, math.floor(cx) - half
    out = np.zeros((c, P, P))
    rs, re = max(r0, 0), min(r0 + P, h)
    cs, ce = max(c0, 0), min(c0 + P, w)
    if rs < re and cs < ce:
        out[:, rs - r0 : re - r0, cs - c0 : ce - c0] = image[:, rs:re, cs:ce]
    return out


def compute_morphology(mask) -> tuple[float, float, float]:
    """Area and equivalent-ellipse axis lengths (4 * sqrt(eigenvalue))."""
    pts = np.asarray(mask, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ContractError("compute_morphology needs a non-empty mask")
    centred = pts - pts.mean(axis=0)
    cov = centred.T @ centred / len(pts)
    lo, hi = np.linalg.eigvalsh(cov)
    return float(len(pts)), 4.0 * math.sqrt(max(hi, 0.0)), 4.0 * math.sqrt(max(lo, 0.0))


def grid_position(center: tuple[float, float], factor: int = 20) -> tuple[int, int]:
    if factor < 1:
        raise ContractError(f"grid factor must be >= 1, got {factor}")
    cx, cy = center
    return math.floor(cx / factor), math.floor(cy / factor)


def _rank_key(n: Nucleus):
    return (-n.grade, -n.area, n.cy, n.cx)


def select_top_k(nuclei: Sequence[Nucleus], N: int) -> list[Nucleus]:
    """Tumor nuclei ordered by grade then area (both descending), first N kept."""
    if N < 1:
        raise ContractError(f"N must be >= 1, got {N}")
    tumor = [n for n in nuclei if n.is_tumor]
    if not tumor:
        raise EmptyBagError("no tumor nuclei to select from")
    return sorted(tumor, key=_rank_key)[:N]


def build_bag(roi: RoiRecord, config: IViTConfig) -> InstanceBag:
    _, h, w = roi.image.shape
    if math.ceil(w / config.grid_factor) > config.grid_w or math.ceil(h / config.grid_factor) > config.grid_h:
        raise ContractError(
            f"{w}x{h} ROI {roi.roi_id} exceeds the {config.grid_w}x{config.grid_h} position grid"
        )
    chosen = select_top_k(roi.nuclei, config.N)
    n, P = config.N, config.P
    patches = np.zeros((n, roi.image.shape[0], P, P))
    gx = np.full(n, config.pad_pos_x, dtype=np.int64)
    gy = np.full(n, config.pad_pos_y, dtype=np.int64)
    grades = np.full(n, config.pad_grade, dtype=np.int64)
    valid = np.zeros(n, dtype=bool)
    for i, nuc in enumerate(chosen):
        patches[i] = crop_patch(roi, nuc, P)
        gx[i], gy[i] = grid_position((nuc.cx, nuc.cy), config.grid_factor)
        grades[i] = nuc.grade - 1
        valid[i] = True
    return InstanceBag(patches, gx, gy, grades, valid, roi.label_index, roi.roi_id, chosen)


# -- manifest I/O -------------------------------------------------------------------

def encode_rle(mask: np.ndarray, width: int) -> str:
    """Row-major run-length string: space-separated ``start length`` pairs."""
    flat = np.unique(mask[:, 0] * width + mask[:, 1])
    if flat.size == 0:
        return ""
    breaks = np.flatnonzero(np.diff(flat) != 1) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [flat.size]])
    return " ".join(f"{flat[s]} {e - s}" for s, e in zip(starts, ends))


def decode_rle(text: str, width: int) -> np.ndarray:
    nums = [int(t) for t in text.split()]
    if len(nums) % 2:
        raise ContractError("mask_rle must hold start/length pairs")
    flat = np.concatenate(
        [np.arange(s, s + k) for s, k in zip(nums[::2], nums[1::2])] or [np.zeros(0, np.int64)]
    )
    return np.stack([flat // width, flat % width], axis=1).astype(np.int64)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def save_png(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, optimize=False)


def nucleus_to_json(n: Nucleus, width: int) -> dict:
    entry = {
        "cx": n.cx,
        "cy": n.cy,
        "kind": n.kind,
        "area": n.area,
        "major_axis": n.major_axis,
        "minor_axis": n.minor_axis,
    }
    if n.mask is not None:
        entry["mask_rle"] = encode_rle(n.mask, width)
    return entry


def nucleus_from_json(entry: dict, width: int) -> Nucleus:
    mask = decode_rle(entry["mask_rle"], width) if entry.get("mask_rle") else None
    return Nucleus(
        cx=float(entry["cx"]),
        cy=float(entry["cy"]),
        kind=entry["kind"],
        area=float(entry["area"]),
        major_axis=float(entry["major_axis"]),
        minor_axis=float(entry["minor_axis"]),
        mask=mask,
    )


def roi_to_json(roi: RoiRecord, image_rel: str) -> dict:
    width = roi.image.shape[2]
    line = {
        "roi_id": roi.roi_id,
        "image": image_rel,
        "label": roi.label,
        "nuclei": [nucleus_to_json(n, width) for n in roi.nuclei],
    }
    if roi.split is not None:
        line["split"] = roi.split
    return line


def read_manifest(path: str | Path) -> list[dict]:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for key in ("roi_id", "image", "label", "nuclei"):
                if key not in entry:
                    raise ContractError(f"{path}:{lineno}: missing key {key!r}")
            entries.append(entry)
    return entries


def roi_from_entry(entry: dict, root: str | Path) -> RoiRecord:
    image = load_png(Path(root) / entry["image"])
    width = image.shape[2]
    return RoiRecord(
        image=image,
        nuclei=[nucleus_from_json(n, width) for n in entry["nuclei"]],
        label=entry["label"],
        roi_id=str(entry["roi_id"]),
        split=entry.get("split"),
    )


def iter_manifest(path: str | Path, split: str | None = None) -> Iterator[RoiRecord]:
    """Load ROIs one at a time; images are decoded lazily to bound memory."""
    root = Path(path).parent
    for entry in read_manifest(path):
        if split is not None and entry.get("split") != split:
            continue
        yield roi_from_entry(entry, root)


def write_manifest(rois: Iterable[RoiRecord], out_dir: str | Path, name: str = "manifest.jsonl") -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w") as fh:
        for roi in rois:
            rel = f"images/{roi.roi_id}.png"
            save_png(roi.image, out_dir / rel)
            fh.write(json.dumps(roi_to_json(roi, rel), sort_keys=True) + "\n")
    return path
