import sys

import numpy as np
import pytest

from segcal.volume import GridMeta, LabelVolume, ProbabilityVolume


def random_probs(rng, dims, k, spacing=(1.0, 1.0, 1.0)):
    meta = GridMeta(dims, spacing)
    raw = rng.random(meta.shape + (k,)) + 1e-3
    return ProbabilityVolume(meta, k, raw / raw.sum(axis=-1, keepdims=True))


def random_labels(rng, dims, k, spacing=(1.0, 1.0, 1.0)):
    meta = GridMeta(dims, spacing)
    return LabelVolume(meta, k, rng.integers(0, k, size=meta.shape))


def one_voxel(probs, label):
    meta = GridMeta((1, 1, 1), (1.0, 1.0, 1.0))
    k = len(probs)
    return ProbabilityVolume(meta, k, np.array(probs)), LabelVolume(meta, k, np.array([label]))


def line_volume(true_class_probs):
    """K=2 volume along x where every voxel's true class is 1 with the given probability."""
    n = len(true_class_probs)
    meta = GridMeta((n, 1, 1), (1.0, 1.0, 1.0))
    q = np.asarray(true_class_probs, dtype=np.float64)
    p = ProbabilityVolume(meta, 2, np.stack([1 - q, q], axis=-1))
    return p, LabelVolume(meta, 2, np.ones(n, dtype=np.uint8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
