"""Cohort directory layout and the CSV manifest describing it.

Layout::

    <cohort>/manifest.csv
    <cohort>/<id>/image.nii
    <cohort>/<id>/masks/<structure>.nii
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nifti import read_nifti, write_nifti
from .phantom import Subject
from .structures import DIAGNOSES, STRUCTURES

MANIFEST_NAME = "manifest.csv"
VOLUME_COLUMNS = tuple(f"vol_{s.value}" for s in STRUCTURES)
HEADER = ("subject_id", "diagnosis", "icv_mm3", *VOLUME_COLUMNS, "image_path", "mask_dir")


class ManifestError(ValueError):
    """Invalid manifest content; the message names the offending line."""


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    diagnosis: str
    icv: float
    volumes: tuple[float, ...]
    image_path: str
    mask_dir: str


def write_subject(subject: Subject, root) -> ManifestRow:
    """Write one subject's image and masks below ``root``."""
    root = Path(root)
    sdir = root / subject.subject_id
    (sdir / "masks").mkdir(parents=True, exist_ok=True)
    write_nifti(subject.image.astype(np.float32, copy=False), sdir / "image.nii", subject.spacing)
    for s in STRUCTURES:
        write_nifti(subject.mask(s).astype(np.uint8), sdir / "masks" / f"{s.value}.nii", subject.spacing)
    return ManifestRow(
        subject_id=subject.subject_id,
        diagnosis=subject.diagnosis,
        icv=float(subject.icv),
        volumes=tuple(float(v) for v in subject.volumes),
        image_path=f"{subject.subject_id}/image.nii",
        mask_dir=f"{subject.subject_id}/masks",
    )


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in rows:
            w.writerow([r.subject_id, r.diagnosis, repr(r.icv), *map(repr, r.volumes), r.image_path, r.mask_dir])


def _float(text: str, line: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ManifestError(f"line {line}: column {column} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ManifestError(f"line {line}: column {column} is not finite")
    return v


def read_manifest(path, data_dir=None, check_files: bool = True) -> list[ManifestRow]:
    """Parse and validate a manifest.

    ``data_dir`` defaults to the manifest's directory; referenced files are
    checked for existence unless ``check_files`` is false.
    """
    path = Path(path)
    data_dir = Path(data_dir) if data_dir is not None else path.parent
    rows: list[ManifestRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("line 1: empty manifest") from None
        if tuple(header) != HEADER:
            raise ManifestError(f"line 1: header mismatch; expected {','.join(HEADER)}")
        seen: set[str] = set()
        for line, rec in enumerate(reader, start=2):
            if len(rec) != len(HEADER):
                raise ManifestError(f"line {line}: expected {len(HEADER)} columns, got {len(rec)}")
            sid, diag = rec[0], rec[1]
            if not sid:
                raise ManifestError(f"line {line}: empty subject_id")
            if sid in seen:
                raise ManifestError(f"line {line}: duplicate subject_id {sid!r}")
            seen.add(sid)
            if diag not in DIAGNOSES:
                raise ManifestError(f"line {line}: diagnosis {diag!r} not in {{{', '.join(DIAGNOSES)}}}")
            icv = _float(rec[2], line, "icv_mm3")
            vols = tuple(_float(v, line, c) for v, c in zip(rec[3:15], VOLUME_COLUMNS))
            row = ManifestRow(sid, diag, icv, vols, rec[15], rec[16])
            if check_files:
                if not (data_dir / row.image_path).is_file():
                    raise ManifestError(f"line {line}: missing image file {row.image_path}")
                for s in STRUCTURES:
                    if not (data_dir / row.mask_dir / f"{s.value}.nii").is_file():
                        raise ManifestError(f"line {line}: missing mask file {row.mask_dir}/{s.value}.nii")
            rows.append(row)
    return rows


def load_subject(row: ManifestRow, data_dir) -> Subject:
    data_dir = Path(data_dir)
    image, spacing = read_nifti(data_dir / row.image_path, with_spacing=True)
    masks = np.stack([read_nifti(data_dir / row.mask_dir / f"{s.value}.nii") > 0 for s in STRUCTURES])
    return Subject(
        subject_id=row.subject_id,
        diagnosis=row.diagnosis,
        image=image,
        masks=masks,
        spacing=spacing,
        icv=row.icv,
        volumes=np.asarray(row.volumes, dtype=np.float64),
        subtype=row.diagnosis,
    )
