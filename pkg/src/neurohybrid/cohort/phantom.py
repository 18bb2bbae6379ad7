"""Synthetic head phantoms with labeled deep-brain structures.

Each structure is an axis-aligned ellipsoid on a 96^3 template at 1 mm
isotropic spacing.  A diagnosis scales structure radii by a per-diagnosis
factor (<1 atrophy, >1 enlargement); every subject additionally gets a global
head-size factor, per-structure radius jitter and sub-voxel center jitter.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .structures import DIAGNOSES, STRUCTURES, Region, StructureId, diagnosis_label, region_structures

log = logging.getLogger(__name__)

S = StructureId

# (center xyz, radii xyz) in template voxels; x = left->right, y = anterior->posterior,
# z = inferior->superior.
DEFAULT_GEOMETRY: dict[StructureId, tuple[tuple[float, float, float], tuple[float, float, float]]] = {
    S.MIDBRAIN: ((48.0, 48.0, 44.0), (7.0, 7.0, 4.5)),
    S.PONS: ((48.0, 50.0, 32.0), (8.0, 7.5, 5.5)),
    S.MEDULLA: ((48.0, 52.0, 19.0), (5.0, 5.0, 6.0)),
    S.SCP: ((48.0, 60.0, 41.0), (6.0, 2.5, 2.5)),
    S.LEFT_LATERAL_VENTRICLE: ((38.0, 46.0, 62.0), (4.5, 13.0, 6.0)),
    S.RIGHT_LATERAL_VENTRICLE: ((58.0, 46.0, 62.0), (4.5, 13.0, 6.0)),
    S.THIRD_VENTRICLE: ((48.0, 46.0, 57.0), (2.0, 7.0, 4.5)),
    S.FOURTH_VENTRICLE: ((48.0, 62.0, 29.0), (4.0, 2.5, 3.5)),
    S.LEFT_PUTAMEN: ((30.0, 46.0, 50.0), (3.0, 8.0, 4.5)),
    S.RIGHT_PUTAMEN: ((66.0, 46.0, 50.0), (3.0, 8.0, 4.5)),
    S.LEFT_CAUDATE: ((38.0, 38.0, 50.0), (3.0, 3.5, 4.0)),
    S.RIGHT_CAUDATE: ((58.0, 38.0, 50.0), (3.0, 3.5, 4.0)),
}

_MSA_FACTORS = {S.PONS: 0.75, S.LEFT_PUTAMEN: 0.75, S.RIGHT_PUTAMEN: 0.75, S.FOURTH_VENTRICLE: 1.2}

DEFAULT_ATROPHY: dict[str, dict[StructureId, float]] = {
    "PD": {},
    "PSP": {S.MIDBRAIN: 0.7, S.SCP: 0.8, S.THIRD_VENTRICLE: 1.3},
    "MSA": dict(_MSA_FACTORS),
    "MSA-C": dict(_MSA_FACTORS),
    "MSA-P": dict(_MSA_FACTORS),
}

# Reference cohort: 285 PD, 192 PSP, 77 MSA (23 unclassified, 20 MSA-C, 34 MSA-P).
REFERENCE_COUNTS = {"PD": 285, "PSP": 192, "MSA": 77}
MSA_SUBTYPE_COUNTS = {"MSA": 23, "MSA-C": 20, "MSA-P": 34}


class PhantomError(RuntimeError):
    """Raised when a valid subject cannot be rasterized."""


@dataclass
class Intensities:
    background: float = 0.0
    brain: float = 0.6
    csf: float = 0.15
    brainstem: float = 0.8
    striatum: float = 0.45
    noise_std: float = 0.05


@dataclass
class PhantomSpec:
    grid: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    head_center: tuple[float, float, float] = (48.0, 48.0, 48.0)
    head_radii: tuple[float, float, float] = (40.0, 44.0, 42.0)
    geometry: dict = field(default_factory=lambda: dict(DEFAULT_GEOMETRY))
    atrophy: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_ATROPHY.items()})
    radius_jitter: float = 0.03
    center_jitter: float = 0.5
    head_scale_jitter: float = 0.03
    intensities: Intensities = field(default_factory=Intensities)
    seed: int = 20240611

    def __post_init__(self):
        for subtype, factors in self.atrophy.items():
            diagnosis_label(subtype)
            for s, f in factors.items():
                if not (0.0 < f <= 2.0):
                    raise ValueError(f"{subtype}: radius factor for {StructureId(s).value} must lie in (0, 2], got {f}")
        if self.intensities.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        missing = set(STRUCTURES) - set(self.geometry)
        if missing:
            raise ValueError(f"geometry lacks {sorted(m.value for m in missing)}")

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def factor(self, subtype: str, structure: StructureId) -> float:
        return self.atrophy.get(subtype, {}).get(structure, 1.0)


def midbrain_only_spec(factor: float = 0.7, **kwargs) -> PhantomSpec:
    """Spec whose only PD/PSP difference is midbrain atrophy."""
    atrophy = {k: {} for k in DEFAULT_ATROPHY}
    atrophy["PSP"] = {S.MIDBRAIN: factor}
    return PhantomSpec(atrophy=atrophy, **kwargs)


@dataclass
class Subject:
    """One case: image, 12 disjoint binary masks and ICV-normalized volumes."""

    subject_id: str
    diagnosis: str
    image: np.ndarray
    masks: np.ndarray
    spacing: tuple[float, float, float]
    icv: float
    volumes: np.ndarray
    subtype: str = ""

    def mask(self, structure: StructureId | str) -> np.ndarray:
        return self.masks[StructureId(structure).index]


def subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    """Generator derived from (master seed, subject id) only."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(subject_id.encode())]))


def _ellipsoid(grid, center, radii) -> tuple[tuple[slice, ...], np.ndarray]:
    lo = [max(0, math.floor(c - r)) for c, r in zip(center, radii)]
    hi = [min(n, math.ceil(c + r) + 1) for n, c, r in zip(grid, center, radii)]
    if any(h <= l for l, h in zip(lo, hi)):
        return tuple(slice(0, 0) for _ in grid), np.zeros((0, 0, 0), bool)
    axes = [(np.arange(l, h) - c) / r for l, h, c, r in zip(lo, hi, center, radii)]
    inside = (axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2 + axes[2][None, None, :] ** 2) <= 1.0
    return tuple(slice(l, h) for l, h in zip(lo, hi)), inside


def template_centers(geometry=None, grid=(96, 96, 96)) -> dict[str, tuple[int, int, int]]:
    """Bounding-box center of each region in the unjittered, unatrophied template.

    Used as a fixed crop anchor so the crop window does not move with a
    subject's atrophy.
    """
    geometry = geometry or DEFAULT_GEOMETRY
    out = {}
    for region in Region:
        union = np.zeros(grid, dtype=bool)
        for s in region_structures(region):
            union |= rasterize(grid, *geometry[s])
        nz = np.argwhere(union)
        lo, hi = nz.min(axis=0), nz.max(axis=0)
        out[region.value] = tuple(int(v) for v in (lo + hi + 1) // 2)
    return out


def rasterize(grid, center, radii) -> np.ndarray:
    """Boolean ellipsoid sampled at voxel centers."""
    out = np.zeros(grid, dtype=bool)
    sl, inside = _ellipsoid(grid, center, radii)
    out[sl] = inside
    return out


def compute_volumes(masks: np.ndarray, spacing, icv: float) -> np.ndarray:
    """Structure volume / ICV for each mask.

    Empty masks yield NaN entries (flagged invalid) and a warning.
    """
    if icv <= 0:
        raise ValueError(f"icv must be positive, got {icv}")
    masks = np.asarray(masks)
    if masks.dtype != bool and not np.isin(masks, (0, 1)).all():
        raise ValueError("masks must be binary")
    vox = float(np.prod(spacing))
    counts = masks.reshape(masks.shape[0], -1).sum(axis=1).astype(np.float64)
    vols = counts * vox / icv
    empty = counts == 0
    if empty.any():
        log.warning("empty masks at indices %s; volumes flagged invalid", np.flatnonzero(empty).tolist())
        vols[empty] = np.nan
    return vols


def generate_subject(
    spec: PhantomSpec,
    diagnosis: str,
    subject_id: str,
    rng: np.random.Generator | None = None,
    max_attempts: int = 10,
) -> Subject:
    """Rasterize one phantom subject.

    ``diagnosis`` may be a clinical subtype (``MSA-C``); the stored label is
    its grouped diagnosis.  The random draws do not depend on the diagnosis,
    so two diagnoses with the same id differ only through atrophy factors.
    """
    label = diagnosis_label(diagnosis)
    rng = subject_rng(spec.seed, subject_id) if rng is None else rng
    grid = spec.grid
    hc = np.asarray(spec.head_center, float)
    ints = spec.intensities

    for attempt in range(max_attempts):
        head_scale = 1.0 + spec.head_scale_jitter * float(np.clip(rng.standard_normal(), -2.5, 2.5))
        rjit = spec.radius_jitter * np.clip(rng.standard_normal(len(STRUCTURES)), -2.5, 2.5)
        cjit = spec.center_jitter * np.clip(rng.standard_normal((len(STRUCTURES), 3)), -2.5, 2.5)
        masks = np.zeros((len(STRUCTURES), *grid), dtype=bool)
        claimed = np.zeros(grid, dtype=np.uint8)
        for i, s in enumerate(STRUCTURES):
            center, radii = spec.geometry[s]
            c = hc + head_scale * (np.asarray(center) - hc) + cjit[i]
            r = np.asarray(radii) * head_scale * spec.factor(diagnosis, s) * (1.0 + rjit[i])
            sl, inside = _ellipsoid(grid, c, r)
            masks[i][sl] = inside
            claimed[sl] += inside
        empty = [s.value for i, s in enumerate(STRUCTURES) if not masks[i].any()]
        if claimed.max() <= 1 and not empty:
            break
        log.debug("subject %s attempt %d: overlap or empty structure, redrawing jitter", subject_id, attempt)
    else:
        raise PhantomError(f"subject {subject_id}: structures overlap after {max_attempts} jitter draws")

    head = rasterize(grid, hc, np.asarray(spec.head_radii) * head_scale)
    icv = float(head.sum()) * spec.voxel_volume

    image = np.full(grid, ints.background, dtype=np.float64)
    image[head] = ints.brain
    tissue = {
        Region.BRAINSTEM: ints.brainstem,
        Region.VENTRICLES: ints.csf,
        Region.STRIATUM: ints.striatum,
    }
    for i, s in enumerate(STRUCTURES):
        image[masks[i]] = tissue[s.region]
    if ints.noise_std > 0:
        image += ints.noise_std * rng.standard_normal(grid)
    return Subject(
        subject_id=subject_id,
        diagnosis=label,
        image=image.astype(np.float32),
        masks=masks,
        spacing=tuple(float(v) for v in spec.spacing),
        icv=icv,
        volumes=compute_volumes(masks, spec.spacing, icv),
        subtype=diagnosis,
    )


def _largest_remainder(total: int, weights: dict[str, int]) -> dict[str, int]:
    denom = sum(weights.values())
    raw = {k: total * w / denom for k, w in weights.items()}
    out = {k: math.floor(v) for k, v in raw.items()}
    leftover = total - sum(out.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - out[k]), list(weights).index(k)))[:leftover]:
        out[k] += 1
    return out


def cohort_plan(scale: float = 1.0, counts: dict[str, int] | None = None) -> list[tuple[str, str]]:
    """(subject_id, subtype) pairs for a cohort at the reference class proportions (285 PD, 192 PSP, 77 MSA).

    Class sizes are ``floor(count * scale)`` with at least one subject per
    class; MSA subjects are spread over subtypes by largest remainder.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    counts = counts or REFERENCE_COUNTS
    plan: list[tuple[str, str]] = []
    for label in DIAGNOSES:
        n = max(1, math.floor(counts[label] * scale + 1e-9))
        if label == "MSA":
            per = _largest_remainder(n, MSA_SUBTYPE_COUNTS)
            subtypes = [st for st in MSA_SUBTYPE_COUNTS for _ in range(per[st])]
        else:
            subtypes = [label] * n
        plan.extend((f"{label}-{i + 1:04d}", st) for i, st in enumerate(subtypes))
    return plan


def iter_cohort(spec: PhantomSpec, scale: float = 1.0, labels=DIAGNOSES):
    """Yield subjects one at a time (full volumes are large)."""
    for sid, subtype in cohort_plan(scale):
        if diagnosis_label(subtype) in labels:
            yield generate_subject(spec, subtype, sid)


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=seed)
