import numpy as np
import pytest

from neurohybrid.cohort.structures import BRANCHES
from neurohybrid.netarch import ArchitectureConfig
from neurohybrid.trainer import Dataset


def tiny_arch(**kw) -> ArchitectureConfig:
    """8-voxel crops and two filters per block: fast enough for unit tests."""
    base = dict(
        crop_shapes={b: (8, 8, 8) for b in BRANCHES},
        crop_centers=None,
        filters={b: (2, 2, 2) for b in BRANCHES},
        dense_width=4,
    )
    base.update(kw)
    return ArchitectureConfig(**base)


def toy_dataset(arch: ArchitectureConfig, n: int = 8, seed: int = 0, dtype=np.float64) -> Dataset:
    """Linearly separable toy set: positives carry a bright blob in every branch."""
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n)])
    inputs = {}
    for b in BRANCHES:
        shape = arch.input_shape(b)
        x = rng.normal(0.0, 0.1, size=(n, *shape))
        x[labels == 1, :, 2:6, 2:6, 2:6] += 1.0
        inputs[b] = x.astype(dtype)
    return Dataset(inputs, labels, [f"s{i:02d}" for i in range(n)])


@pytest.fixture
def arch():
    return tiny_arch()


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """``record(tag, ok, detail)`` logs one PASS/FAIL line and returns ``ok``."""

    def _record(tag: str, ok: bool, detail: str = "") -> bool:
        line = f"{tag} {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s[2:].split()[0])):
            terminalreporter.write_line(line)
