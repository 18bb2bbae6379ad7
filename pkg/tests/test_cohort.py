import csv
import struct

import numpy as np
import pytest

from neurohybrid.cohort import (
    BRANCHES,
    MANIFEST_HEADER,
    STRUCTURES,
    ManifestError,
    NiftiFormatError,
    PhantomSpec,
    Region,
    StructureId,
    cohort_plan,
    compute_volumes,
    crop_region,
    diagnosis_label,
    generate_subject,
    load_subject,
    midbrain_only_spec,
    read_manifest,
    read_nifti,
    region_bbox,
    region_structures,
    template_centers,
    write_manifest,
    write_nifti,
    write_subject,
)
from neurohybrid.cohort.verify import CohortInvariantError, verify_cohort


@pytest.fixture(scope="module")
def spec():
    return PhantomSpec()


@pytest.fixture(scope="module")
def pd_subject(spec):
    return generate_subject(spec, "PD", "PD-0001")


# ---------------------------------------------------------------- structures


def test_structure_vocabulary():
    assert len(STRUCTURES) == 12
    groups = [set(region_structures(r)) for r in Region]
    assert all(len(g) == 4 for g in groups)
    assert set().union(*groups) == set(STRUCTURES)
    assert StructureId.MIDBRAIN in region_structures("brainstem")
    assert [r.value for r in Region] == list(BRANCHES)


def test_msa_subtypes_group_to_msa():
    assert {diagnosis_label(s) for s in ("MSA", "MSA-C", "MSA-P")} == {"MSA"}
    with pytest.raises(ValueError):
        diagnosis_label("HC")


# ---------------------------------------------------------------- phantom


def test_subject_invariants(pd_subject):
    s = pd_subject
    assert s.masks.shape == (12, 96, 96, 96)
    assert s.masks.sum(axis=0).max() == 1
    assert all(m.any() for m in s.masks)
    counts = s.masks.reshape(12, -1).sum(axis=1)
    np.testing.assert_allclose(s.volumes, counts / s.icv, rtol=1e-12, atol=0)
    assert s.icv > counts.sum()


def test_generation_is_deterministic(spec, pd_subject):
    again = generate_subject(spec, "PD", "PD-0001")
    np.testing.assert_array_equal(again.image, pd_subject.image)
    np.testing.assert_array_equal(again.masks, pd_subject.masks)
    assert again.icv == pd_subject.icv


def test_midbrain_atrophy_matches_cubic_volume_ratio(spec, pd_subject):
    psp = generate_subject(midbrain_only_spec(0.7), "PSP", "PD-0001")
    ratio = psp.mask("midbrain").sum() / pd_subject.mask("midbrain").sum()
    assert abs(ratio / 0.7**3 - 1) < 0.05
    for s in STRUCTURES:
        if s is not StructureId.MIDBRAIN:
            np.testing.assert_array_equal(psp.mask(s), pd_subject.mask(s))


def test_unit_atrophy_makes_diagnoses_identical():
    flat = PhantomSpec(atrophy={"PSP": {}, "MSA": {}}, intensities=PhantomSpec().intensities.__class__(noise_std=0.0))
    a = generate_subject(flat, "PD", "X-1")
    b = generate_subject(flat, "MSA-C", "X-1")
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.masks, b.masks)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(atrophy={"PSP": {StructureId.MIDBRAIN: 0.0}})
    with pytest.raises(ValueError):
        PhantomSpec(intensities=PhantomSpec().intensities.__class__(noise_std=-1))


@pytest.mark.parametrize("scale,expected", [(0.2, {"PD": 57, "PSP": 38, "MSA": 15}), (1.0, {"PD": 285, "PSP": 192, "MSA": 77})])
def test_cohort_plan_counts(scale, expected):
    plan = cohort_plan(scale)
    counts = {k: sum(1 for _, st in plan if diagnosis_label(st) == k) for k in expected}
    assert counts == expected
    assert len({sid for sid, _ in plan}) == len(plan)


def test_cohort_plan_keeps_one_per_class():
    plan = cohort_plan(0.001)
    assert sorted(diagnosis_label(st) for _, st in plan) == ["MSA", "PD", "PSP"]


# ---------------------------------------------------------------- volumetry


def test_compute_volumes_examples():
    m = np.zeros((12, 4, 4, 4), bool)
    m[:, 0, 0, 0] = True
    np.testing.assert_array_equal(compute_volumes(m, (1, 1, 1), 1000), np.full(12, 0.001))
    np.testing.assert_array_equal(compute_volumes(m, (1, 1, 1), 2000), np.full(12, 0.0005))
    m[3] = False
    v = compute_volumes(m, (1, 1, 1), 1000)
    assert np.isnan(v[3]) and np.isfinite(np.delete(v, 3)).all()
    with pytest.raises(ValueError):
        compute_volumes(m, (1, 1, 1), 0)


def test_volumes_match_recount_from_written_files(tmp_path, pd_subject):
    row = write_subject(pd_subject, tmp_path)
    for i, s in enumerate(STRUCTURES):
        raw = (tmp_path / row.mask_dir / f"{s.value}.nii").read_bytes()[352:]
        count = sum(1 for byte in raw if byte)  # byte-wise count, independent of the reader
        assert abs(count / row.icv - row.volumes[i]) <= 1e-12 * row.volumes[i]


# ---------------------------------------------------------------- crops


def test_crop_containment_and_channels(pd_subject):
    shape = (48, 48, 48)
    for region in Region:
        crop = crop_region(pd_subject, region, shape)
        assert crop.shape == (5, *shape) and crop.dtype == np.float32
        mri = crop[0].astype(np.float64)
        assert abs(mri.mean()) < 1e-6 and abs(mri.std() - 1) < 1e-6
        assert set(np.unique(crop[1:])) <= {0.0, 1.0}
        for k, s in enumerate(region_structures(region)):
            assert crop[1 + k].sum() == pd_subject.mask(s).sum()


def test_crop_modalities_and_downsample(pd_subject):
    assert crop_region(pd_subject, "striatum", (48,) * 3, use_mri=False).shape == (4, 48, 48, 48)
    assert crop_region(pd_subject, "striatum", (48,) * 3, use_mask=False).shape == (1, 48, 48, 48)
    assert crop_region(pd_subject, "striatum", (48,) * 3, downsample=4).shape == (5, 12, 12, 12)
    with pytest.raises(ValueError):
        crop_region(pd_subject, "striatum", (48,) * 3, use_mri=False, use_mask=False)


def test_template_anchor_holds_crop_still_under_atrophy(pd_subject):
    psp = generate_subject(midbrain_only_spec(0.7), "PSP", "PD-0001")
    center = template_centers()["brainstem"]
    a = crop_region(pd_subject, "brainstem", (48,) * 3, center=center)
    b = crop_region(psp, "brainstem", (48,) * 3, center=center)
    # pons, medulla and peduncle channels are untouched by midbrain atrophy
    np.testing.assert_array_equal(a[2:], b[2:])
    assert b[1].sum() < a[1].sum()


def test_crop_rejects_empty_region(pd_subject):
    empty = type(pd_subject)(**{**pd_subject.__dict__, "masks": np.zeros_like(pd_subject.masks)})
    with pytest.raises(ValueError):
        region_bbox(empty, "brainstem")


def test_crop_clips_oversized_region(pd_subject, caplog):
    crop = crop_region(pd_subject, "ventricles", (8, 8, 8))
    assert crop.shape == (5, 8, 8, 8)
    assert "not inside crop window" in caplog.text


# ---------------------------------------------------------------- NIfTI


@pytest.mark.parametrize("dtype", [np.float32, np.uint8])
def test_nifti_round_trip(tmp_path, dtype):
    rng = np.random.default_rng(0)
    vol = (rng.uniform(0, 200, size=(5, 6, 7))).astype(dtype)
    write_nifti(vol, tmp_path / "v.nii", spacing=(1.0, 1.5, 2.0))
    back, spacing = read_nifti(tmp_path / "v.nii", with_spacing=True)
    assert back.dtype == dtype and back.tobytes() == vol.tobytes()
    assert spacing == (1.0, 1.5, 2.0)
    raw = (tmp_path / "v.nii").read_bytes()
    assert struct.unpack("<i", raw[:4])[0] == 348 and raw[344:348] == b"n+1\0"
    assert struct.unpack("<f", raw[108:112])[0] == 352.0


def _corrupt(tmp_path, offset, data):
    write_nifti(np.zeros((2, 2, 2), np.float32), tmp_path / "c.nii")
    raw = bytearray((tmp_path / "c.nii").read_bytes())
    raw[offset : offset + len(data)] = data
    (tmp_path / "c.nii").write_bytes(bytes(raw))
    return tmp_path / "c.nii"


def test_nifti_errors_name_the_field(tmp_path):
    with pytest.raises(NiftiFormatError, match="unsupported variant"):
        read_nifti(_corrupt(tmp_path, 344, b"ni1\0"))
    with pytest.raises(NiftiFormatError, match="magic"):
        read_nifti(_corrupt(tmp_path, 344, b"xyz\0"))
    with pytest.raises(NiftiFormatError, match="datatype"):
        read_nifti(_corrupt(tmp_path, 70, struct.pack("<h", 64)))
    path = _corrupt(tmp_path, 0, b"")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(NiftiFormatError, match="truncated"):
        read_nifti(path)
    with pytest.raises(ValueError):
        write_nifti(np.zeros((2, 2, 2), np.float64), tmp_path / "d.nii")


# ---------------------------------------------------------------- manifest


def test_manifest_round_trip(tmp_path, pd_subject):
    psp = generate_subject(PhantomSpec(), "PSP", "PSP-0001")
    rows = [write_subject(s, tmp_path) for s in (pd_subject, psp)]
    write_manifest(rows, tmp_path / "manifest.csv")
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert len(lines) == 3 and tuple(lines[0].split(",")) == MANIFEST_HEADER
    back = read_manifest(tmp_path / "manifest.csv")
    for a, b in zip(rows, back):
        assert a.subject_id == b.subject_id and a.diagnosis == b.diagnosis
        np.testing.assert_allclose(b.volumes, a.volumes, rtol=1e-12)
        assert abs(b.icv - a.icv) <= 1e-12 * a.icv
    loaded = load_subject(back[0], tmp_path)
    np.testing.assert_array_equal(loaded.image, pd_subject.image)
    np.testing.assert_array_equal(loaded.masks, pd_subject.masks)


def _manifest_with(tmp_path, mutate):
    row = [f"PD-0001", "PD", "1000.0", *["0.001"] * 12, "PD-0001/image.nii", "PD-0001/masks"]
    mutate(row)
    with open(tmp_path / "m.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        w.writerow(row)
    return tmp_path / "m.csv"


def test_manifest_errors_carry_line_numbers(tmp_path):
    with pytest.raises(ManifestError, match="line 2: diagnosis 'HC'"):
        read_manifest(_manifest_with(tmp_path, lambda r: r.__setitem__(1, "HC")), check_files=False)
    with pytest.raises(ManifestError, match="line 2: expected 17 columns"):
        read_manifest(_manifest_with(tmp_path, lambda r: r.pop()), check_files=False)
    with pytest.raises(ManifestError, match="line 2: column vol_pons"):
        read_manifest(_manifest_with(tmp_path, lambda r: r.__setitem__(4, "abc")), check_files=False)
    with pytest.raises(ManifestError, match="line 2: missing image"):
        read_manifest(_manifest_with(tmp_path, lambda r: None))
    (tmp_path / "h.csv").write_text("subject_id,diagnosis\n")
    with pytest.raises(ManifestError, match="line 1"):
        read_manifest(tmp_path / "h.csv")


# ---------------------------------------------------------------- cohort verification


def test_verify_cohort_detects_tampering(tmp_path):
    spec = PhantomSpec()
    subjects = [generate_subject(spec, d, f"{d}-0001") for d in ("PD", "PSP", "MSA-P")]
    rows = [write_subject(s, tmp_path) for s in subjects]
    write_manifest(rows, tmp_path / "manifest.csv")
    summary = verify_cohort(tmp_path)
    assert summary["subjects"] == 3
    bad = rows[0].__class__(**{**rows[0].__dict__, "volumes": (rows[0].volumes[0] * 1.01, *rows[0].volumes[1:])})
    write_manifest([bad, *rows[1:]], tmp_path / "manifest.csv")
    with pytest.raises(CohortInvariantError):
        verify_cohort(tmp_path)
