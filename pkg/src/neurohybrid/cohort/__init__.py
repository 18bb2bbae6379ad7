"""Phantom cohort generation, volumetry, region crops and file I/O."""

from .crop import crop_region, region_bbox
from .manifest import (
    HEADER as MANIFEST_HEADER,
    MANIFEST_NAME,
    ManifestError,
    ManifestRow,
    load_subject,
    read_manifest,
    write_manifest,
    write_subject,
)
from .nifti import NiftiFormatError, read_nifti, write_nifti
from .phantom import (
    PhantomError,
    PhantomSpec,
    Subject,
    cohort_plan,
    compute_volumes,
    generate_subject,
    iter_cohort,
    midbrain_only_spec,
    rasterize,
    template_centers,
)
from .structures import (
    BRANCHES,
    DIAGNOSES,
    REGIONS,
    STRUCTURES,
    Region,
    StructureId,
    diagnosis_label,
    region_structures,
)

__all__ = [
    "BRANCHES",
    "DIAGNOSES",
    "MANIFEST_HEADER",
    "MANIFEST_NAME",
    "ManifestError",
    "ManifestRow",
    "NiftiFormatError",
    "PhantomError",
    "PhantomSpec",
    "REGIONS",
    "Region",
    "STRUCTURES",
    "StructureId",
    "Subject",
    "cohort_plan",
    "compute_volumes",
    "crop_region",
    "diagnosis_label",
    "generate_subject",
    "iter_cohort",
    "load_subject",
    "midbrain_only_spec",
    "rasterize",
    "template_centers",
    "read_manifest",
    "read_nifti",
    "region_bbox",
    "region_structures",
    "write_manifest",
    "write_nifti",
    "write_subject",
]
