"""Invariant checks run on a freshly written cohort."""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import numpy as np

from .manifest import MANIFEST_NAME, load_subject, read_manifest
from .phantom import cohort_plan, compute_volumes
from .structures import DIAGNOSES, StructureId, diagnosis_label


class CohortInvariantError(ValueError):
    """A generated cohort violates a structural invariant."""


def verify_cohort(root, scale: float | None = None) -> dict:
    """Re-read every subject and check masks, volumes and class counts.

    Checks that each structure mask is non-empty, masks are pairwise
    disjoint, manifest volumes equal volumes recomputed from the masks read
    back from disk, and (when ``scale`` is given) that class counts match the
    cohort plan.  Returns a small summary; raises ``CohortInvariantError``.
    """
    root = Path(root)
    rows = read_manifest(root / MANIFEST_NAME, root)
    counts = Counter(r.diagnosis for r in rows)
    if scale is not None:
        want = Counter(diagnosis_label(st) for _, st in cohort_plan(scale))
        if counts != want:
            raise CohortInvariantError(f"class counts {dict(counts)} differ from plan {dict(want)}")
    midbrain = {d: [] for d in DIAGNOSES}
    for r in rows:
        subj = load_subject(r, root)
        sizes = subj.masks.reshape(len(subj.masks), -1).sum(axis=1)
        if (sizes == 0).any():
            raise CohortInvariantError(f"{r.subject_id}: empty mask(s) at indices {np.flatnonzero(sizes == 0).tolist()}")
        if int(subj.masks.sum(axis=0).max()) > 1:
            raise CohortInvariantError(f"{r.subject_id}: structure masks overlap")
        vols = compute_volumes(subj.masks, subj.spacing, r.icv)
        if not np.allclose(vols, r.volumes, rtol=1e-12, atol=0.0):
            raise CohortInvariantError(f"{r.subject_id}: manifest volumes disagree with masks on disk")
        if not np.isfinite(subj.image).all():
            raise CohortInvariantError(f"{r.subject_id}: non-finite image values")
        midbrain[r.diagnosis].append(r.volumes[StructureId.MIDBRAIN.index])
    means = {d: float(np.mean(v)) for d, v in midbrain.items() if v}
    if "PSP" in means and "PD" in means and not means["PSP"] < means["PD"]:
        raise CohortInvariantError(f"mean midbrain volume PSP {means['PSP']:.5g} >= PD {means['PD']:.5g}")
    return {"subjects": len(rows), "counts": dict(sorted(counts.items())), "mean_midbrain": means}
