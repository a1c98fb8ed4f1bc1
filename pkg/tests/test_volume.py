import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_labels, random_probs
from segcal.volume import (
    GridMeta,
    LabelVolume,
    ProbabilityVolume,
    VolumeFormatError,
    argmax_labels,
    from_bytes,
    read_volume,
    to_bytes,
    write_volume,
)


class TestGridMeta:
    def test_rejects_bad_dims_and_spacing(self):
        with pytest.raises(ValueError):
            GridMeta((0, 1, 1), (1, 1, 1))
        with pytest.raises(ValueError):
            GridMeta((1, 1, 1), (1, 0, 1))

    def test_shape_is_z_slowest(self):
        assert GridMeta((4, 3, 2), (1, 1, 1)).shape == (2, 3, 4)


class TestValidation:
    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            LabelVolume(GridMeta((2, 1, 1), (1, 1, 1)), 2, [0, 2])

    def test_probability_out_of_range(self):
        meta = GridMeta((1, 1, 1), (1, 1, 1))
        with pytest.raises(ValueError):
            ProbabilityVolume(meta, 2, [1.2, -0.2])
        with pytest.raises(ValueError):
            ProbabilityVolume(meta, 2, [np.nan, 0.5], normalized=False)

    def test_normalized_flag_checked(self):
        meta = GridMeta((1, 1, 1), (1, 1, 1))
        with pytest.raises(ValueError):
            ProbabilityVolume(meta, 2, [0.9, 0.9])
        assert not ProbabilityVolume(meta, 2, [0.9, 0.9], normalized=False).normalized

    def test_arrays_are_read_only(self, rng):
        v = random_probs(rng, (2, 2, 1), 2)
        with pytest.raises(ValueError):
            v.probs[0, 0, 0, 0] = 0.5


class TestSEGV1:
    def test_single_voxel_round_trip(self, tmp_path):
        meta = GridMeta((1, 1, 1), (1.0, 1.0, 1.0))
        v = ProbabilityVolume(meta, 2, [0.3, 0.7])
        write_volume(v, tmp_path / "v.segv")
        assert read_volume(tmp_path / "v.segv") == v

    def test_truncated_payload(self, rng):
        data = to_bytes(random_probs(rng, (4, 4, 2), 3))
        with pytest.raises(VolumeFormatError, match=r"expected 384 bytes, got 380"):
            from_bytes(data[:-4])

    def test_seeded_volume_round_trips_bit_exactly(self, rng):
        v = random_probs(rng, (4, 4, 2), 3)
        data = to_bytes(v)
        assert to_bytes(from_bytes(data)) == data
        # payload length: 4*4*2 voxels * 3 classes * 4 bytes
        assert len(data) - data.index(b"\n", 6) - 1 == 384

    def test_header_is_canonical(self, rng):
        data = to_bytes(random_labels(rng, (3, 2, 1), 4, spacing=(0.5, 0.5, 2.0)))
        header = data.split(b"\n")[1]
        assert header == (b'{"classes":4,"dims":[3,2,1],"dtype":"u8","kind":"labels",'
                          b'"spacing":[0.5,0.5,2.0]}')

    def test_identical_volumes_identical_bytes(self, rng):
        v = random_probs(rng, (3, 3, 1), 2)
        w = ProbabilityVolume(v.meta, 2, v.probs.copy())
        assert to_bytes(v) == to_bytes(w)

    def test_hash_stable_over_100_random_volumes(self):
        rng = np.random.default_rng(99)
        for i in range(100):
            dims = tuple(int(d) for d in rng.integers(1, 6, size=3))
            k = int(rng.integers(2, 5))
            v = random_probs(rng, dims, k) if i % 2 else random_labels(rng, dims, k)
            once = to_bytes(v)
            twice = to_bytes(from_bytes(once))
            assert hashlib.sha256(once).digest() == hashlib.sha256(twice).digest()

    def test_label_error_reports_offset(self, rng):
        v = LabelVolume(GridMeta((3, 1, 1), (1, 1, 1)), 2, [0, 1, 1])
        data = bytearray(to_bytes(v))
        data[-1] = 7
        with pytest.raises(VolumeFormatError) as err:
            from_bytes(bytes(data))
        assert err.value.offset == len(data) - 1

    def test_probability_error_reports_offset(self):
        meta = GridMeta((2, 1, 1), (1, 1, 1))
        data = bytearray(to_bytes(ProbabilityVolume(meta, 2, [0.5, 0.5, 0.25, 0.75])))
        data[-4:] = np.float32(1.5).tobytes()
        with pytest.raises(VolumeFormatError) as err:
            from_bytes(bytes(data))
        assert err.value.offset == len(data) - 4

    @pytest.mark.parametrize("mutate", [
        lambda d: b"SEGV2" + d[5:],
        lambda d: d.replace(b'"classes":2', b'"classes": 2'),
        lambda d: d.replace(b'"kind":"probs"', b'"kind":"prob"'),
        lambda d: d.replace(b'[1.0,1.0,1.0]', b'[1,1,1]'),
        lambda d: d + b"\x00",
    ])
    def test_malformed_files_rejected(self, mutate):
        meta = GridMeta((1, 1, 1), (1.0, 1.0, 1.0))
        data = to_bytes(ProbabilityVolume(meta, 2, [0.5, 0.5]))
        with pytest.raises(VolumeFormatError):
            from_bytes(mutate(data))


class TestArgmax:
    def test_examples(self):
        meta = GridMeta((2, 1, 1), (1, 1, 1))
        p = ProbabilityVolume(meta, 2, [0.2, 0.8, 0.5, 0.5])
        np.testing.assert_array_equal(argmax_labels(p).labels.reshape(-1), [1, 0])

    def test_matches_linear_scan(self, rng):
        p = random_probs(rng, (8, 8, 1), 4)
        # make some exact ties
        raw = p.probs.copy()
        raw[0, 0, 0] = 0.25
        raw[0, 0, 1] = [0.4, 0.4, 0.1, 0.1]
        p = ProbabilityVolume(p.meta, 4, raw)
        flat = p.probs.reshape(-1, 4)
        expected = []
        for row in flat:
            best = 0
            for k in range(1, 4):
                if row[k] > row[best]:
                    best = k
            expected.append(best)
        np.testing.assert_array_equal(argmax_labels(p).labels.reshape(-1), expected)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), exponent=st.integers(0, 20))
    def test_invariant_under_positive_scaling(self, seed, exponent):
        # powers of two scale float32 exactly, so ties are preserved too
        p = random_probs(np.random.default_rng(seed), (4, 3, 1), 3)
        scaled = ProbabilityVolume(p.meta, 3, p.probs * np.float32(2.0**-exponent), normalized=False)
        np.testing.assert_array_equal(argmax_labels(p).labels, argmax_labels(scaled).labels)
