import numpy as np
import pytest

from aflkd import data as fdata
from aflkd.errors import ConfigError, UnknownClientError


class TestMakeBlobs:
    def test_determinism_bitwise(self):
        a = fdata.make_blobs(42, classes=3, dim=4, samples=60, spread=1.0)
        b = fdata.make_blobs(42, classes=3, dim=4, samples=60, spread=1.0)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)
        c = fdata.make_blobs(43, classes=3, dim=4, samples=60, spread=1.0)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_tiny_spread_is_nearest_centroid_separable(self):
        ds = fdata.make_blobs(1, classes=4, dim=3, samples=200, spread=1e-6, radius=4.0)
        centers = fdata._class_centers(4, 3, 4.0)
        d2 = ((ds.inputs[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assert (d2.argmin(axis=1) == ds.labels).all()

    def test_labels_balanced(self):
        ds = fdata.make_blobs(0, classes=2, dim=2, samples=100, spread=0.5)
        hist = np.bincount(ds.labels, minlength=2)
        assert hist.tolist() == [50, 50]
        ds2 = fdata.make_blobs(0, classes=3, dim=2, samples=100, spread=0.5)
        hist2 = np.bincount(ds2.labels, minlength=3)
        assert sorted(hist2.tolist()) == [33, 33, 34]

    def test_degenerate_spread_rejected(self):
        with pytest.raises(ConfigError):
            fdata.make_blobs(0, classes=2, dim=2, samples=10, spread=0.0)

    def test_split_is_stratified(self):
        ds = fdata.make_blobs(5, classes=5, dim=2, samples=200, spread=1.0)
        train, test = fdata.train_test_split(ds, 0.2, 7)
        assert train.n + test.n == ds.n
        train.validate()
        test.validate()


class TestDirichletPartition:
    def test_huge_alpha_is_near_uniform(self):
        ds = fdata.make_blobs(2, classes=5, dim=2, samples=5000, spread=1.0)
        _, dist = fdata.dirichlet_partition(ds, 10, alpha=1e6, seed=3)
        props = dist.proportions
        assert np.abs(props - 0.2).max() < 0.05

    def test_low_alpha_more_heterogeneous_than_high(self):
        # oracle: compute both partitions and compare the same statistic
        ds = fdata.make_blobs(2, classes=10, dim=2, samples=4000, spread=1.0)
        _, skewed = fdata.dirichlet_partition(ds, 40, alpha=0.5, seed=11)
        _, uniform = fdata.dirichlet_partition(ds, 40, alpha=1e6, seed=11)
        skew_stat = skewed.proportions.max(axis=1).mean()
        unif_stat = uniform.proportions.max(axis=1).mean()
        assert skew_stat > unif_stat

    def test_single_client_owns_everything(self):
        ds = fdata.make_blobs(4, classes=3, dim=2, samples=90, spread=1.0)
        part, dist = fdata.dirichlet_partition(ds, 1, alpha=0.5, seed=0)
        assert len(part.indices[0]) == ds.n
        assert np.array_equal(dist.counts[0], np.bincount(ds.labels, minlength=3))

    def test_counts_reconcile_with_partition(self):
        ds = fdata.make_blobs(6, classes=4, dim=2, samples=400, spread=1.0)
        part, dist = fdata.dirichlet_partition(ds, 20, alpha=0.3, seed=5)
        for j, idx in enumerate(part.indices):
            assert dist.counts[j].sum() == len(idx)
            assert np.array_equal(dist.counts[j],
                                  np.bincount(ds.labels[idx], minlength=4))

    def test_disjoint_and_complete_by_default(self):
        ds = fdata.make_blobs(7, classes=3, dim=2, samples=300, spread=1.0)
        part, _ = fdata.dirichlet_partition(ds, 15, alpha=0.5, seed=9)
        all_idx = np.concatenate(part.indices)
        assert len(all_idx) == ds.n
        assert len(np.unique(all_idx)) == ds.n
        assert all(len(ix) >= 1 for ix in part.indices)

    def test_fixed_size_mode(self):
        ds = fdata.make_blobs(8, classes=5, dim=2, samples=500, spread=1.0)
        part, dist = fdata.dirichlet_partition(ds, 12, alpha=0.5, seed=2,
                                               samples_per_client=50)
        assert part.with_replacement
        assert all(len(ix) == 50 for ix in part.indices)
        assert (dist.counts.sum(axis=1) == 50).all()

    def test_heterogeneity_non_increasing_in_alpha(self):
        ds = fdata.make_blobs(9, classes=10, dim=2, samples=2000, spread=1.0)
        alphas = [0.1, 0.5, 1.0, 10.0, 1e6]
        means = []
        for alpha in alphas:
            stats = []
            for seed in range(10):
                _, dist = fdata.dirichlet_partition(ds, 30, alpha=alpha, seed=seed)
                stats.append(dist.proportions.max(axis=1).mean())
            means.append(np.mean(stats))
        for lo, hi in zip(means[1:], means[:-1]):
            assert lo <= hi + 1e-6

    def test_iid_mode_uniform_proportions(self):
        ds = fdata.make_blobs(10, classes=4, dim=2, samples=4000, spread=1.0)
        _, dist = fdata.dirichlet_partition(ds, 8, alpha=None, seed=1)
        assert np.abs(dist.proportions - 0.25).max() < 0.06


class TestSampleBatch:
    def test_single_sample_client_repeats(self):
        ds = fdata.make_blobs(3, classes=2, dim=2, samples=10, spread=1.0)
        part = fdata.ClientPartition([np.array([4])])
        x, y = fdata.sample_batch(ds, part, 0, 4, np.random.default_rng(0))
        assert x.shape == (4, 2)
        assert np.array_equal(x, np.tile(ds.inputs[4], (4, 1)))
        assert (y == ds.labels[4]).all()

    def test_deterministic_under_equal_rng_state(self):
        ds = fdata.make_blobs(3, classes=2, dim=2, samples=50, spread=1.0)
        part, _ = fdata.dirichlet_partition(ds, 3, alpha=1.0, seed=0)
        a = fdata.sample_batch(ds, part, 1, 8, np.random.default_rng(99))
        b = fdata.sample_batch(ds, part, 1, 8, np.random.default_rng(99))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_unknown_client(self):
        ds = fdata.make_blobs(3, classes=2, dim=2, samples=10, spread=1.0)
        part = fdata.ClientPartition([np.array([0])])
        with pytest.raises(UnknownClientError):
            fdata.sample_batch(ds, part, 5, 2, np.random.default_rng(0))

    def test_empirical_frequencies_match_client_distribution(self):
        # oracle: 3-sigma multinomial bound per class over 10^4 draws
        ds = fdata.make_blobs(12, classes=4, dim=2, samples=800, spread=1.0)
        part, dist = fdata.dirichlet_partition(ds, 5, alpha=0.8, seed=4)
        client = 2
        rng = np.random.default_rng(123)
        n = 10_000
        x, y = fdata.sample_batch(ds, part, client, n, rng)
        freq = np.bincount(y, minlength=4) / n
        p = dist.proportions[client]
        sigma = np.sqrt(p * (1 - p) / n)
        assert (np.abs(freq - p) <= 3 * sigma + 1e-12).all()


class TestBinaryRoundtrip:
    def test_roundtrip(self, tmp_path):
        ds = fdata.make_blobs(21, classes=3, dim=5, samples=64, spread=1.0)
        path = tmp_path / "blob.bin"
        fdata.save_dataset(path, ds)
        back = fdata.load_dataset(path)
        assert back.num_classes == 3
        assert np.array_equal(back.inputs, ds.inputs)
        assert np.array_equal(back.labels, ds.labels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ConfigError):
            fdata.load_dataset(path)
