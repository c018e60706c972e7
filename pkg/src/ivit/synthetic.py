"""Seeded synthetic ROIs with ground-truth nuclei.

Papillae are drawn as circular fibrovascular cores lined by tumor nuclei.
Type 1 papillae carry a single ring of low-grade nuclei on basophilic
cytoplasm; type 2 papillae stack two or three rings, include grade-3 nuclei
and sit on eosinophilic cytoplasm.  The ablation modes isolate one factor:

* ``grade_only``: both classes share the layout (one ring, same positions)
  and differ only in the grade mix.
* ``spatial_only``: both classes share the nucleus count and grade sequence
  and differ only in ring stacking.

Each ROI depends only on ``(seed, class, index)``; the shared factors of an
ablation are drawn from streams that leave the class out of the key.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .config import ConfigError
from .instances import LABELS, Nucleus, RoiRecord, compute_morphology, write_manifest
from .numerics import ContractError

log = logging.getLogger(__name__)

ABLATIONS = ("full", "grade_only", "spatial_only")
_STREAMS = {"count": 1, "layout": 2, "grade": 3, "pixels": 4}
_SHARED = 2  # class slot used by streams common to both classes


@dataclass(frozen=True)
class SynthParams:
    roi_size: int = 400
    core_radius: tuple[float, float] = (18.0, 30.0)
    spacing: float = 13.0
    ring_offset: float = 10.0
    type2_rings: tuple[int, int] = (2, 3)
    tumor_nuclei: tuple[int, int] = (70, 110)
    endothelial_per_papilla: tuple[int, int] = (1, 2)
    radius_grade1: tuple[float, float] = (3.0, 3.7)
    radius_grade2: tuple[float, float] = (3.7, 4.5)
    radius_grade3: tuple[float, float] = (4.6, 5.6)
    elongation: tuple[float, float] = (1.0, 1.3)
    type1_grade_mix: tuple[float, float, float] = (0.6, 0.4, 0.0)
    type2_grade3_fraction: float = 0.35
    basophilic: tuple[float, float, float] = (0.72, 0.70, 0.90)
    eosinophilic: tuple[float, float, float] = (0.93, 0.68, 0.78)
    stroma: tuple[float, float, float] = (0.96, 0.86, 0.90)
    lumen: tuple[float, float, float] = (0.97, 0.96, 0.97)
    noise_std: float = 0.03
    ablation: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.roi_size < 20 or self.roi_size % 20:
            raise ConfigError(f"roi_size must be a positive multiple of 20, got {self.roi_size}")
        if not 0.0 <= self.type2_grade3_fraction <= 1.0:
            raise ConfigError("type2_grade3_fraction must lie in [0, 1]")
        mix = self.type1_grade_mix
        if any(not 0.0 <= m <= 1.0 for m in mix) or abs(sum(mix) - 1.0) > 1e-9 or mix[2] != 0.0:
            raise ConfigError("type1_grade_mix must be grade-1/2 fractions summing to 1, no grade 3")
        for name in ("core_radius", "radius_grade1", "radius_grade2", "radius_grade3", "elongation"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must be an increasing positive range")
        lo, hi = self.tumor_nuclei
        if not 1 <= lo <= hi:
            raise ConfigError("tumor_nuclei must be an increasing positive range")
        if self.spacing <= 0 or self.ring_offset <= 0 or self.noise_std < 0:
            raise ConfigError("spacing and ring_offset must be positive, noise_std non-negative")
        if 2 * self.max_outer_radius + 4 > self.roi_size:
            raise ContractError(
                f"a papilla of outer radius {self.max_outer_radius:.1f} cannot fit a {self.roi_size} ROI"
            )

    @property
    def max_outer_radius(self) -> float:
        return self.core_radius[1] + (max(self.type2_rings) - 1) * self.ring_offset + 8.0

    @property
    def type2_grade_mix(self) -> tuple[float, float, float]:
        f3 = self.type2_grade3_fraction
        return ((1 - f3) * 0.35, (1 - f3) * 0.65, f3)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SynthParams:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown keys in 'synth': {sorted(unknown)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**data)

    def replace(self, **kw) -> SynthParams:
        return dataclasses.replace(self, **kw)


def _stream(params: SynthParams, cls_slot: int, index: int, name: str) -> np.random.Generator:
    return np.random.default_rng([params.seed, cls_slot, index, _STREAMS[name]])


def _grade_mix(params: SynthParams, label: str) -> tuple[float, float, float]:
    if params.ablation == "spatial_only" or label == "type1":
        return params.type1_grade_mix
    return params.type2_grade_mix


def _ring_count(params: SynthParams, label: str, rng: np.random.Generator) -> int:
    if params.ablation == "grade_only" or label == "type1":
        return 1
    lo, hi = params.type2_rings
    return int(rng.integers(lo, hi + 1))


def _layout(params: SynthParams, label: str, k: int, rng: np.random.Generator):
    """Up to ``k`` tumor slots (x, y, tangent angle) plus endothelial slots and papillae."""
    size = params.roi_size
    papillae: list[tuple[float, float, float, float]] = []  # cx, cy, core, outer
    tumor: list[tuple[float, float, float]] = []
    endo: list[tuple[float, float, float]] = []
    tries = 0
    while len(tumor) < k:
        tries += 1
        if tries > 5000:
            raise ContractError(
                f"could only place {len(tumor)} of {k} tumor nuclei in a {size} ROI; "
                "lower tumor_nuclei or shrink papillae"
            )
        core = rng.uniform(*params.core_radius)
        rings = _ring_count(params, label, rng)
        outer = core + (rings - 1) * params.ring_offset + 8.0
        cx, cy = rng.uniform(outer + 2, size - outer - 2, size=2)
        if any(math.hypot(cx - px, cy - py) < outer + po + 3 for px, py, _, po in papillae):
            continue
        papillae.append((cx, cy, core, outer))
        for j in range(rings):
            radius = core + j * params.ring_offset
            m = max(3, int(2 * math.pi * radius / params.spacing))
            phase = rng.uniform(0, 2 * math.pi)
            for i in range(m):
                a = phase + 2 * math.pi * i / m + rng.normal(0, 0.04)
                r = radius + rng.normal(0, 0.6)
                tumor.append((cx + r * math.cos(a), cy + r * math.sin(a), a + math.pi / 2 + rng.normal(0, 0.2)))
        lo, hi = params.endothelial_per_papilla
        for _ in range(int(rng.integers(lo, hi + 1))):
            a, r = rng.uniform(0, 2 * math.pi), rng.uniform(0, 0.45 * core)
            endo.append((cx + r * math.cos(a), cy + r * math.sin(a), rng.uniform(0, math.pi)))
    return tumor[:k], endo, papillae


def _ellipse_mask(cx, cy, a, b, theta, size) -> np.ndarray:
    reach = int(math.ceil(max(a, b))) + 1
    ys = np.arange(max(0, int(cy) - reach), min(size, int(cy) + reach + 2))
    xs = np.arange(max(0, int(cx) - reach), min(size, int(cx) + reach + 2))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u, v = dx * c + dy * s, -dx * s + dy * c
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return np.stack([yy[inside], xx[inside]], axis=1).astype(np.int64)


def _nucleus_from_mask(mask: np.ndarray, kind: str) -> Nucleus:
    area, major, minor = compute_morphology(mask)
    cy, cx = mask.mean(axis=0)
    return Nucleus(float(cx), float(cy), kind, area, major, minor, mask)


_NUCLEUS_RGB = {
    1: (0.30, 0.18, 0.48),
    2: (0.36, 0.22, 0.54),
    3: (0.42, 0.26, 0.58),
    0: (0.22, 0.12, 0.36),
}
_NUCLEOLUS_RGB = (0.12, 0.04, 0.22)


def generate_roi(label: str, params: SynthParams, index: int) -> RoiRecord:
    """Render one labelled ROI; pixels are quantised to 8-bit levels."""
    if label not in LABELS:
        raise ContractError(f"label must be one of {LABELS}, got {label!r}")
    own = LABELS.index(label)
    ablation = params.ablation
    count_slot = own if ablation == "full" else _SHARED
    layout_slot = _SHARED if ablation == "grade_only" else own
    grade_slot = _SHARED if ablation == "spatial_only" else own

    k_lo, k_hi = params.tumor_nuclei
    k = int(_stream(params, count_slot, index, "count").integers(k_lo, k_hi + 1))
    slots, endo_slots, papillae = _layout(params, label, k, _stream(params, layout_slot, index, "layout"))

    g_rng = _stream(params, grade_slot, index, "grade")
    grades = g_rng.choice([1, 2, 3], size=k, p=_grade_mix(params, label))
    radii = {1: params.radius_grade1, 2: params.radius_grade2, 3: params.radius_grade3}
    shape_draws = g_rng.uniform(size=(k, 2))

    size = params.roi_size
    if ablation == "full":
        cyto = params.basophilic if label == "type1" else params.eosinophilic
    else:
        cyto = tuple((a + b) / 2 for a, b in zip(params.basophilic, params.eosinophilic))
    img = np.empty((3, size, size))
    img[:] = np.asarray(params.lumen)[:, None, None]
    yy, xx = np.mgrid[0:size, 0:size]
    for cx, cy, core, outer in papillae:
        d = np.hypot(xx - cx, yy - cy)
        img[:, d <= outer] = np.asarray(cyto)[:, None]
        img[:, d <= core - 6.0] = np.asarray(params.stroma)[:, None]

    nuclei: list[Nucleus] = []
    for (x, y, theta), g, (u1, u2) in zip(slots, grades, shape_draws):
        lo, hi = radii[int(g)]
        r = lo + u1 * (hi - lo)
        e_lo, e_hi = params.elongation
        elong = e_lo + u2 * (e_hi - e_lo)
        mask = _ellipse_mask(x, y, r * elong, r / math.sqrt(elong), theta, size)
        if len(mask) == 0:
            continue
        nuc = _nucleus_from_mask(mask, f"grade{int(g)}")
        img[:, mask[:, 0], mask[:, 1]] = np.asarray(_NUCLEUS_RGB[int(g)])[:, None]
        if g == 3:
            oy, ox = int(round(nuc.cy)), int(round(nuc.cx))
            img[:, oy : oy + 2, ox : ox + 2] = np.asarray(_NUCLEOLUS_RGB)[:, None, None]
        nuclei.append(nuc)
    for x, y, theta in endo_slots:
        mask = _ellipse_mask(x, y, 5.0, 1.6, theta, size)
        if len(mask) == 0:
            continue
        img[:, mask[:, 0], mask[:, 1]] = np.asarray(_NUCLEUS_RGB[0])[:, None]
        nuclei.append(_nucleus_from_mask(mask, "endothelial"))

    noise = _stream(params, own, index, "pixels").normal(0.0, params.noise_std, size=img.shape)
    img = np.rint(np.clip(img + noise, 0.0, 1.0) * 255.0) / 255.0
    return RoiRecord(img, nuclei, label, f"{label}_{index:05d}")


def split_counts(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return n_train, n_val, n - n_train - n_val


def split_of(index: int, n: int, fractions=(0.6, 0.2, 0.2)) -> str:
    n_train, n_val, _ = split_counts(n, fractions)
    if index < n_train:
        return "train"
    return "val" if index < n_train + n_val else "test"


def generate_dataset(
    n_per_class: int,
    params: SynthParams,
    out_dir: str | Path,
    fractions=(0.6, 0.2, 0.2),
    threads: int = 1,
) -> Path:
    """Write ``2 * n_per_class`` ROIs as PNGs plus a JSON-lines manifest.

    Within each class, the leading indices form the training split, then
    validation, then test.
    """
    if n_per_class < 1:
        raise ContractError(f"n_per_class must be >= 1, got {n_per_class}")
    split_counts(n_per_class, fractions)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ContractError(f"cannot create output directory {out_dir}: {exc}") from exc
    jobs = [(label, i) for i in range(n_per_class) for label in LABELS]

    def make(job):
        label, i = job
        roi = generate_roi(label, params, i)
        roi.split = split_of(i, n_per_class, fractions)
        return roi

    log.info("generating %d ROIs (%s) into %s", len(jobs), params.ablation, out_dir)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            # map keeps job order, so the manifest is identical to a serial run
            return write_manifest(pool.map(make, jobs), out_dir)
    return write_manifest(map(make, jobs), out_dir)
