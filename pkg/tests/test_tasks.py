import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scnas import tasks as K
from scnas.tasks import SegmentationSample, TaskSpec

from oracles import coverage_oracle


class TestGenerate:
    def test_noise_free_label_matches_geometry(self):
        data = K.generate(TaskSpec(size=(16, 16), noise=0.0, n_train=5, seed=3))
        for s in data.train:
            ch = s.image[0]
            fg = ch > ch.min() + 1e-6
            np.testing.assert_array_equal(fg, s.label == 1)

    @pytest.mark.parametrize("kind", K.GENERATORS)
    def test_deterministic_bytes(self, kind):
        spec = TaskSpec(kind=kind, size=(12, 12, 12), channels=2, num_classes=2, radius=(0.15, 0.2), seed=9)
        a, b = K.generate(spec), K.generate(spec)
        for split in ("train", "val", "test"):
            for x, y in zip(getattr(a, split), getattr(b, split)):
                assert x.image.tobytes() == y.image.tobytes()
                assert x.label.tobytes() == y.label.tobytes()
                assert x.id == y.id

    def test_different_seeds_differ(self):
        a = K.generate(TaskSpec(seed=1)).train[0]
        b = K.generate(TaskSpec(seed=2)).train[0]
        assert a.image.tobytes() != b.image.tobytes()

    def test_foreground_fraction_over_seeds(self):
        for seed in range(100):
            s = K.generate(TaskSpec(seed=seed, n_train=1, n_val=0, n_test=0)).train[0]
            frac = np.mean(s.label > 0)
            assert 0.05 < frac < 0.5, (seed, frac)

    def test_splits_disjoint_and_well_formed(self):
        data = K.generate(TaskSpec(kind="multi-class-bodies", num_classes=2, radius=(0.15, 0.25)))
        ids = [s.id for split in (data.train, data.val, data.test) for s in split]
        assert len(ids) == len(set(ids)) == 32
        for s in data.train:
            assert s.image.dtype == np.float32 and s.label.dtype == np.uint8
            assert s.label.max() <= 2 and s.image.shape == (1, 16, 16)

    def test_nested_shells_classes(self):
        s = K.generate(TaskSpec(kind="nested-shells", num_classes=2, noise=0.0)).train[0]
        assert set(np.unique(s.label)) == {0, 1, 2}

    @pytest.mark.parametrize("kw", [dict(radius=(0.3, 0.6)), dict(kind="voxels"), dict(channels=0),
                                    dict(kind="multi-class-bodies", num_classes=5, radius=(0.3, 0.45))])
    def test_rejects_bad_specs(self, kw):
        with pytest.raises(ValueError):
            TaskSpec(**kw)


class TestZNormalize:
    def test_statistics(self, rng):
        img = (3 + 2 * rng.standard_normal((2, 9, 9))).astype(np.float32)
        out = K.z_normalize(SegmentationSample(img, np.zeros((9, 9), np.uint8), "x")).image.astype(np.float64)
        for c in range(2):
            n = out[c].size
            mean = sum(out[c].ravel()) / n
            var = sum((v - mean) ** 2 for v in out[c].ravel()) / n
            assert abs(mean) < 1e-6 and abs(var - 1) < 1e-6

    def test_idempotent(self, rng):
        s = SegmentationSample(rng.standard_normal((1, 8, 8)).astype(np.float32), np.zeros((8, 8), np.uint8), "x")
        once = K.z_normalize(s)
        twice = K.z_normalize(once)
        np.testing.assert_allclose(twice.image, once.image, atol=1e-6)

    def test_constant_channel(self):
        img = np.stack([np.full((4, 4), 5.0), np.arange(16.0).reshape(4, 4)]).astype(np.float32)
        with pytest.warns(RuntimeWarning, match="constant"):
            out = K.z_normalize(SegmentationSample(img, np.zeros((4, 4), np.uint8), "c"))
        assert np.all(out.image[0] == 0)
        assert abs(out.image[1].mean()) < 1e-6

    def test_single_voxel_rejected(self):
        with pytest.raises(ValueError):
            K.z_normalize(SegmentationSample(np.ones((1, 1), np.float32), np.zeros(1, np.uint8), "v"))


class TestCrop:
    def test_full_size(self, rng):
        s = K.generate(TaskSpec(n_train=1)).train[0]
        c = K.crop_patch(s, (16, 16), rng)
        assert c.image.tobytes() == s.image.tobytes() and c.label.tobytes() == s.label.tobytes()

    def test_point_mass_corner(self, rng):
        img = np.zeros((1, 12, 12), np.float32)
        img[0, 0, 11] = 1.0
        lab = np.arange(144, dtype=np.uint8).reshape(12, 12)
        s = SegmentationSample(img, lab, "p")
        for _ in range(1000):
            c = K.crop_patch(s, (4, 4), rng)
            assert c.image.sum() == 1.0  # the window always contains the only nonzero voxel
            r0, c0 = divmod(int(c.label[0, 0]), 12)
            np.testing.assert_array_equal(c.image[0], img[0, r0:r0 + 4, c0:c0 + 4])

    def test_uniform_over_intersecting_windows(self, rng):
        img = np.zeros((1, 10), np.float32)
        img[0, 4:6] = 1.0
        s = SegmentationSample(img, np.arange(10, dtype=np.uint8), "u")
        starts = [int(K.crop_patch(s, (3,), rng).label[0]) for _ in range(6000)]
        # windows of length 3 meeting [4, 5] start at 2..5
        counts = np.bincount(starts, minlength=10)
        assert set(np.flatnonzero(counts)) == {2, 3, 4, 5}
        assert np.all(np.abs(counts[2:6] / 6000 - 0.25) < 0.03)

    def test_all_zero_warns(self, rng):
        s = SegmentationSample(np.zeros((1, 6, 6), np.float32), np.zeros((6, 6), np.uint8), "z")
        with pytest.warns(RuntimeWarning, match="all zero"):
            assert K.crop_patch(s, (4, 4), rng).image.shape == (1, 4, 4)

    def test_patch_too_large(self, rng):
        s = SegmentationSample(np.ones((1, 6, 6), np.float32), np.zeros((6, 6), np.uint8), "z")
        with pytest.raises(ValueError):
            K.crop_patch(s, (8, 4), rng)


def linear_predictor(w, b):
    """Per-voxel linear logits; translation-equivariant so windows agree exactly."""
    def predict(x):
        return np.einsum("kc,nc...->nk...", w, x) + b.reshape((1, -1) + (1,) * (x.ndim - 2))

    return predict


class TestSlidingWindow:
    def test_single_window_equals_direct(self, rng):
        w, b = rng.standard_normal((3, 2)), rng.standard_normal(3)
        predict = linear_predictor(w, b)
        img = rng.standard_normal((2, 8, 8))
        direct = np.argmax(predict(img[None])[0], axis=0)
        np.testing.assert_array_equal(K.sliding_window_infer(predict, img, (8, 8)), direct)
        assert K.sliding_window_logits(predict, img, (8, 8)).tobytes() == predict(img[None])[0].tobytes()

    def test_window_starts_example(self):
        assert K.window_starts(8, 4) == [0, 2, 4]
        assert K.window_starts(9, 4) == [0, 2, 4, 5]
        np.testing.assert_array_equal(K.coverage_counts((8,), (4,)), [1, 1, 2, 2, 2, 2, 1, 1])

    def test_coverage_matches_oracle(self, rng):
        for _ in range(20):
            nd = int(rng.integers(1, 4))
            patch = tuple(int(2 * rng.integers(1, 4)) for _ in range(nd))
            size = tuple(int(p + rng.integers(0, 7)) for p in patch)
            expected = np.ones((), dtype=np.int64)
            for n, p in zip(size, patch):
                starts, cover = coverage_oracle(n, p)
                assert K.window_starts(n, p) == starts
                expected = np.multiply.outer(expected, np.array(cover))
            np.testing.assert_array_equal(K.coverage_counts(size, patch), expected)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10))
    def test_coverage_bounds(self, half, extra):
        p = 2 * half
        n = p + extra
        cov = K.coverage_counts((n,), (p,))
        assert cov.min() >= 1
        if n > p:
            assert np.all(cov[half:n - half] >= 2)

    def test_constant_network_gives_constant_map(self):
        def predict(x):
            out = np.zeros((1, 3) + x.shape[2:])
            out[:, 2] = 1.0
            return out

        pred = K.sliding_window_infer(predict, np.zeros((1, 13, 10)), (4, 6))
        assert np.all(pred == 2)

    def test_order_invariant_and_linear_equivariant(self, rng):
        w, b = rng.standard_normal((2, 1)), rng.standard_normal(2)
        predict = linear_predictor(w, b)
        img = rng.standard_normal((1, 11, 9))
        logits = K.sliding_window_logits(predict, img, (4, 4))
        np.testing.assert_allclose(logits, predict(img[None])[0], atol=1e-12)

    def test_rejections(self):
        f = lambda x: x
        with pytest.raises(ValueError):
            K.sliding_window_infer(f, np.zeros((1, 4, 4)), (6, 4))
        with pytest.raises(ValueError):
            K.sliding_window_infer(f, np.zeros((1, 8, 8)), (3, 4))


def test_search_split_ratio():
    data = K.generate(TaskSpec(n_train=20))
    a, b = K.search_split(data.train, 4)
    assert len(a) == 16 and len(b) == 4
    assert not {s.id for s in a} & {s.id for s in b}


class TestPersistence:
    def test_volume_round_trip(self, tmp_path):
        s = K.generate(TaskSpec(size=(6, 7, 5), channels=3, n_train=1)).train[0]
        K.write_volume(tmp_path / "a.vol", s)
        back = K.read_volume(tmp_path / "a.vol", s.id)
        assert back.image.tobytes() == s.image.tobytes()
        assert back.label.tobytes() == s.label.tobytes()
        assert back.image.shape == s.image.shape

    def test_volume_layout(self, tmp_path):
        img = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
        lab = np.array([[0, 1, 2], [3, 4, 5]], np.uint8)
        K.write_volume(tmp_path / "b.vol", SegmentationSample(img, lab, "b"))
        raw = (tmp_path / "b.vol").read_bytes()
        assert raw[:7] == b"SCNVOL1"
        assert np.frombuffer(raw[7:39], "<i8").tolist() == [3, 1, 2, 3]
        assert np.frombuffer(raw[39:63], "<f4").tolist() == list(range(6))
        assert list(raw[63:]) == list(range(6))

    def test_truncated_rejected(self, tmp_path):
        s = K.generate(TaskSpec(n_train=1)).train[0]
        K.write_volume(tmp_path / "c.vol", s)
        p = tmp_path / "c.vol"
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(ValueError):
            K.read_volume(p)

    def test_task_round_trip(self, tmp_path):
        data = K.generate(TaskSpec(n_train=3, n_val=1, n_test=2))
        manifest = K.write_task(tmp_path, data)
        assert manifest.read_text().splitlines()[1].startswith("train blobs-0-train-0000 1x16x16 ")
        back = K.read_task(tmp_path)
        for split in ("train", "val", "test"):
            for x, y in zip(getattr(data, split), back[split]):
                assert x.id == y.id and x.image.tobytes() == y.image.tobytes()
                assert x.label.tobytes() == y.label.tobytes()
