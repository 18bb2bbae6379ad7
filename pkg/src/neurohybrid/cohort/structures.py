"""The twelve deep-brain structures and the three regions they belong to."""

from __future__ import annotations

from enum import Enum


class Region(str, Enum):
    BRAINSTEM = "brainstem"
    VENTRICLES = "ventricles"
    STRIATUM = "striatum"


class StructureId(str, Enum):
    MIDBRAIN = "midbrain"
    PONS = "pons"
    MEDULLA = "medulla"
    SCP = "scp"
    LEFT_LATERAL_VENTRICLE = "left_lateral_ventricle"
    RIGHT_LATERAL_VENTRICLE = "right_lateral_ventricle"
    THIRD_VENTRICLE = "third_ventricle"
    FOURTH_VENTRICLE = "fourth_ventricle"
    LEFT_PUTAMEN = "left_putamen"
    RIGHT_PUTAMEN = "right_putamen"
    LEFT_CAUDATE = "left_caudate"
    RIGHT_CAUDATE = "right_caudate"

    @property
    def region(self) -> Region:
        return _REGION_OF[self]

    @property
    def index(self) -> int:
        return STRUCTURES.index(self)


STRUCTURES: tuple[StructureId, ...] = tuple(StructureId)

_REGION_OF = {
    **{s: Region.BRAINSTEM for s in STRUCTURES[0:4]},
    **{s: Region.VENTRICLES for s in STRUCTURES[4:8]},
    **{s: Region.STRIATUM for s in STRUCTURES[8:12]},
}

REGIONS: tuple[Region, ...] = tuple(Region)
BRANCHES: tuple[str, ...] = tuple(r.value for r in REGIONS)


def region_structures(region: Region | str) -> tuple[StructureId, ...]:
    region = Region(region)
    return tuple(s for s in STRUCTURES if s.region is region)


DIAGNOSES = ("PD", "PSP", "MSA")

# Clinical subtypes collapse to a single training label.
SUBTYPE_LABEL = {
    "PD": "PD",
    "PSP": "PSP",
    "MSA": "MSA",
    "MSA-C": "MSA",
    "MSA-P": "MSA",
}


def diagnosis_label(subtype: str) -> str:
    try:
        return SUBTYPE_LABEL[subtype]
    except KeyError:
        raise ValueError(f"unknown diagnosis {subtype!r}; expected one of {sorted(SUBTYPE_LABEL)}") from None
