import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from lpc.data import (
    DataFormatError,
    SyntheticSpec,
    batches,
    dequantize,
    from_raw,
    linear_chain_model,
    load_idx,
    make_synthetic,
    read_raw_tensor,
    write_idx,
    write_raw_tensor,
)
from lpc.numerics import make_rng

# two 2x2 images, authored byte by byte
IDX_FIXTURE = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 17, 128, 255, 1, 2, 3, 4])
LABEL_FIXTURE = bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 3])


class TestIdx:
    def test_fixture_pixels(self, tmp_path):
        p = tmp_path / "img.idx"
        p.write_bytes(IDX_FIXTURE)
        ds = load_idx(p)
        np.testing.assert_array_equal(ds.raw, [[0, 17, 128, 255], [1, 2, 3, 4]])
        assert ds.D == 4 and len(ds) == 2

    def test_labels(self, tmp_path):
        (tmp_path / "i").write_bytes(IDX_FIXTURE)
        (tmp_path / "l").write_bytes(LABEL_FIXTURE)
        np.testing.assert_array_equal(load_idx(tmp_path / "i", tmp_path / "l").labels, [7, 3])

    def test_empty_file(self, tmp_path):
        (tmp_path / "e").write_bytes(b"")
        with pytest.raises(DataFormatError, match="byte offset 0"):
            load_idx(tmp_path / "e")

    def test_label_magic_rejected_as_images(self, tmp_path):
        (tmp_path / "l").write_bytes(LABEL_FIXTURE)
        with pytest.raises(DataFormatError, match="0x00000801"):
            load_idx(tmp_path / "l")

    def test_truncated_payload(self, tmp_path):
        (tmp_path / "t").write_bytes(IDX_FIXTURE[:-1])
        with pytest.raises(DataFormatError, match="byte offset 23"):
            load_idx(tmp_path / "t")

    def test_label_count_mismatch(self, tmp_path):
        (tmp_path / "i").write_bytes(IDX_FIXTURE)
        (tmp_path / "l").write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 1, 7]))
        with pytest.raises(DataFormatError):
            load_idx(tmp_path / "i", tmp_path / "l")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_round_trip(self, tmp_path_factory, n, h, w, seed):
        arr = np.random.default_rng(seed).integers(0, 256, size=(n, h, w), dtype=np.uint8)
        p = tmp_path_factory.mktemp("idx") / "a.idx"
        write_idx(p, arr)
        np.testing.assert_array_equal(load_idx(p).raw, arr.reshape(n, -1))

    def test_written_header_is_big_endian(self, tmp_path):
        write_idx(tmp_path / "a", np.zeros((3, 2, 2), dtype=np.uint8))
        head = (tmp_path / "a").read_bytes()[:16]
        assert struct.unpack(">IIII", head) == (0x803, 3, 2, 2)


class TestRawTensor:
    def test_round_trip(self, tmp_path, rng):
        arr = rng.normal(size=(3, 4))
        write_raw_tensor(tmp_path / "r", arr)
        assert (tmp_path / "r").read_bytes().startswith(b"dims: 3 4\n")
        assert read_raw_tensor(tmp_path / "r").tobytes() == arr.tobytes()

    def test_short_payload(self, tmp_path):
        (tmp_path / "r").write_bytes(b"dims: 2\n" + b"\0" * 8)
        with pytest.raises(DataFormatError):
            read_raw_tensor(tmp_path / "r")

    def test_missing_header(self, tmp_path):
        (tmp_path / "r").write_bytes(b"\0" * 16)
        with pytest.raises(DataFormatError, match="dims"):
            read_raw_tensor(tmp_path / "r")


class _FixedRng:
    def __init__(self, u):
        self.u = u

    def random(self, shape):
        return np.full(shape, self.u)


class TestDequantize:
    def test_zero(self):
        assert dequantize(np.array([0]), _FixedRng(0.0))[0] == 0.0

    def test_top_stays_below_one(self):
        v = dequantize(np.array([255]), _FixedRng(np.nextafter(1.0, 0.0)))[0]
        assert 0.999 < v < 1.0

    def test_uniform_mean(self):
        n = 100_000
        d = dequantize(np.full(n, 128), make_rng(0))
        # U[0,1)/256 has standard deviation 1/(256 sqrt 12)
        assert abs(d.mean() - 128.5 / 256) < 3 / (256 * math.sqrt(12) * math.sqrt(n))

    def test_floor_recovers_raw(self, rng):
        raw = rng.integers(0, 256, size=1000)
        d = dequantize(raw, rng)
        assert np.all((d >= 0) & (d < 1))
        np.testing.assert_array_equal(np.floor(256 * d).astype(int), raw)

    def test_out_of_range(self, rng):
        with pytest.raises(ValueError):
            dequantize(np.array([256]), rng)

    def test_eval_noise_repeatable(self):
        raw = np.arange(12).reshape(3, 4)
        assert np.array_equal(from_raw(raw, 5).values, from_raw(raw, 5).values)

    def test_training_noise_fresh(self):
        ds = from_raw(np.arange(12).reshape(3, 4), 5)
        r = make_rng(0)
        assert not np.array_equal(ds.observations(r), ds.observations(r))


class TestSynthetic:
    def test_zero_weight_chain(self):
        spec = SyntheticSpec("chain", dims=(2, 2), weight_scale=0.0, noise_scale=0.5, bias=1.0, n_samples=10, seed=0)
        _, truth = make_synthetic(spec)
        np.testing.assert_allclose(truth.mean, [1.0, 1.0])
        np.testing.assert_allclose(truth.cov, 0.25 * np.eye(2))
        x = np.array([0.3, 1.2])
        expected = multivariate_normal([1.0, 1.0], 0.25 * np.eye(2)).logpdf(x)
        assert truth.log_marginal(x) == pytest.approx(expected, abs=1e-12)

    def test_sample_mean(self):
        spec = SyntheticSpec("chain", dims=(2, 3, 4), noise_scale=0.3, n_samples=10_000, seed=3)
        data, truth = make_synthetic(spec)
        se = np.sqrt(np.diag(truth.cov) / spec.n_samples)
        assert np.all(np.abs(data.values.mean(axis=0) - truth.mean) < 3 * se)

    def test_sample_covariance(self):
        spec = SyntheticSpec("chain", dims=(2, 3, 4), noise_scale=0.3, n_samples=20_000, seed=4)
        data, truth = make_synthetic(spec)
        np.testing.assert_allclose(np.cov(data.values.T), truth.cov, atol=0.1 * np.max(truth.cov))

    def test_reproducible(self):
        spec = SyntheticSpec("chain", dims=(2, 4), n_samples=5, seed=8)
        a, ta = make_synthetic(spec)
        b, tb = make_synthetic(spec)
        assert np.array_equal(a.values, b.values)
        la = ta.log_marginal(a.values[0])
        assert np.isfinite(la) and la == tb.log_marginal(b.values[0])

    def test_chain_model_shape(self):
        m = linear_chain_model((2, 3, 5), make_rng(0), noise_scale=0.2, bias=0.5)
        assert m.dims == [2, 3, 5]
        np.testing.assert_allclose(m.variances(1), 0.04)
        np.testing.assert_allclose(m.biases[1], 0.5)

    def test_mixture(self):
        spec = SyntheticSpec("mixture", dims=(6,), components=3, n_samples=50, seed=1)
        data, truth = make_synthetic(spec)
        assert data.values.shape == (50, 6)
        assert set(np.unique(data.labels)) <= {0, 1, 2}
        with pytest.raises(ValueError):
            truth.log_marginal(data.values[0])

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec("cube")
        with pytest.raises(ValueError):
            SyntheticSpec("chain", dims=(2, 0))


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(10, 4, None)] == [4, 4, 2]

    def test_same_seed_same_order(self):
        a = np.concatenate(list(batches(20, 6, make_rng(1))))
        b = np.concatenate(list(batches(20, 6, make_rng(1))))
        assert np.array_equal(a, b)

    def test_partition(self):
        idx = np.concatenate(list(batches(23, 5, make_rng(2))))
        assert sorted(idx.tolist()) == list(range(23))

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            list(batches(5, 0, None))
