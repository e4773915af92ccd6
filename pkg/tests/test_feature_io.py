import numpy as np
import pytest

from cozad.errors import ConfigError, ContractError, CorruptionError, FormatError
from cozad.feature_io import (
    FeatureDataset,
    SynthConfig,
    TaskBatch,
    read_feature_file,
    split_tasks,
    subset,
    synth_generate,
    write_feature_file,
)
from cozad.oracles import pairwise_auroc


def random_dataset(rng, with_labels=True, with_masks=True):
    n = int(rng.integers(1, 6))
    gh = int(rng.integers(1, 5))
    gw = int(rng.integers(1, 5))
    d = int(rng.integers(1, 9))
    feats = rng.normal(size=(n, gh, gw, d)).astype(np.float32)
    labels = rng.integers(0, 2, size=n).astype(np.uint8) if with_labels else None
    masks = None
    if with_masks and with_labels:
        masks = np.zeros((n, gh, gw), dtype=np.uint8)
        for i in range(n):
            if labels[i] == 1:
                masks[i, rng.integers(0, gh), rng.integers(0, gw)] = 1
    return FeatureDataset(feats, labels, masks, meta=f"random-{n}x{gh}x{gw}x{d}")


class TestRoundTrip:
    def test_full_dataset_round_trips_exactly(self, tmp_path, rng):
        ds = random_dataset(rng)
        path = tmp_path / "d.cozf"
        write_feature_file(ds, path)
        assert read_feature_file(path).equals(ds)

    def test_round_trip_property_random_datasets(self, tmp_path):
        for i in range(25):
            rng = np.random.default_rng(100 + i)
            ds = random_dataset(rng, with_labels=i % 3 != 0, with_masks=i % 2 == 0)
            path = tmp_path / f"d{i}.cozf"
            write_feature_file(ds, path)
            assert read_feature_file(path).equals(ds)

    def test_write_is_deterministic(self, tmp_path, rng):
        ds = random_dataset(rng)
        a, b = tmp_path / "a.cozf", tmp_path / "b.cozf"
        write_feature_file(ds, a)
        write_feature_file(ds, b)
        assert a.read_bytes() == b.read_bytes()

    def test_labels_without_masks_sets_flag(self, tmp_path, rng):
        ds = random_dataset(rng, with_masks=False)
        path = tmp_path / "d.cozf"
        write_feature_file(ds, path)
        flags = path.read_bytes()[5]
        assert flags == 0x01  # labels yes, masks no
        assert read_feature_file(path).pixel_masks is None


class TestReadErrors:
    def test_bad_magic(self, tmp_path, rng):
        path = tmp_path / "d.cozf"
        write_feature_file(random_dataset(rng), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_feature_file(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "d.cozf"
        write_feature_file(random_dataset(rng), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 5])
        with pytest.raises(CorruptionError):
            read_feature_file(path)

    def test_header_payload_mismatch(self, tmp_path):
        # Header claims 10 images but payload only carries 9.
        ds = FeatureDataset(np.zeros((9, 2, 2, 3), dtype=np.float32), meta="m")
        path = tmp_path / "d.cozf"
        write_feature_file(ds, path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = (10).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            read_feature_file(path)

    def test_trailing_bytes(self, tmp_path, rng):
        path = tmp_path / "d.cozf"
        write_feature_file(random_dataset(rng), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CorruptionError):
            read_feature_file(path)

    def test_nonfinite_features_rejected(self, tmp_path):
        ds = FeatureDataset(np.zeros((1, 1, 1, 2), dtype=np.float32))
        path = tmp_path / "d.cozf"
        write_feature_file(ds, path)
        raw = bytearray(path.read_bytes())
        raw[24:28] = np.float32(np.nan).tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            read_feature_file(path)


class TestInvariants:
    def test_normal_image_with_nonzero_mask_rejected(self):
        feats = np.zeros((1, 2, 2, 2), dtype=np.float32)
        labels = np.zeros(1, dtype=np.uint8)
        masks = np.ones((1, 2, 2), dtype=np.uint8)
        with pytest.raises(ContractError):
            FeatureDataset(feats, labels, masks).validate()

    def test_label_length_checked(self):
        feats = np.zeros((2, 1, 1, 2), dtype=np.float32)
        with pytest.raises(ContractError):
            FeatureDataset(feats, np.zeros(3, dtype=np.uint8)).validate()

    def test_subset_preserves_invariants(self, rng):
        ds = random_dataset(rng)
        sub = subset(ds, [0])
        sub.validate()
        assert sub.n_images == 1
        assert np.array_equal(sub.features[0], ds.features[0])


class TestSynthGenerate:
    def test_identical_seed_identical_bytes(self, tmp_path):
        cfg = SynthConfig(n_normal=5, n_anomalous=2, feat_dim=8, grid_h=3, grid_w=3, seed=7)
        a, b = tmp_path / "a.cozf", tmp_path / "b.cozf"
        write_feature_file(synth_generate(cfg), a)
        write_feature_file(synth_generate(cfg), b)
        assert a.read_bytes() == b.read_bytes()

    def test_zero_anomaly_shift_rejected(self):
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(anomaly_shift=0.0))

    def test_labels_and_masks_consistent(self):
        ds = synth_generate(SynthConfig(n_normal=6, n_anomalous=3, feat_dim=8, seed=3))
        ds.validate()
        assert ds.image_labels.sum() == 3
        for i in range(ds.n_images):
            assert (ds.pixel_masks[i].any() != 0) == (ds.image_labels[i] == 1)

    def test_all_features_unit_norm(self):
        ds = synth_generate(SynthConfig(n_normal=4, n_anomalous=2, feat_dim=16, seed=5))
        norms = np.linalg.norm(ds.patch_matrix(), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-5)

    def test_anomalous_region_less_aligned_with_centers(self):
        # Brute-force check: mean cosine to the nearest estimated cluster
        # center is lower for anomalous-region patches than for normal ones.
        cfg = SynthConfig(
            n_normal=50, n_anomalous=10, feat_dim=16, grid_h=4, grid_w=4,
            anomaly_shift=6.0, noise_std=0.1, seed=11,
        )
        ds = synth_generate(cfg)
        normal_patches = ds.features[ds.image_labels == 0].reshape(-1, cfg.feat_dim).astype(np.float64)
        centers = _kmeans(normal_patches, cfg.n_clusters, seed=0)
        region = ds.pixel_masks.reshape(ds.n_images, -1).astype(bool)
        all_patches = ds.patch_matrix().reshape(ds.n_images, -1, cfg.feat_dim)
        anom_patches = np.concatenate(
            [all_patches[i][region[i]] for i in range(ds.n_images) if region[i].any()]
        )

        def mean_best_cos(patches):
            sims = (patches / np.linalg.norm(patches, axis=1, keepdims=True)) @ (
                centers / np.linalg.norm(centers, axis=1, keepdims=True)
            ).T
            return sims.max(axis=1).mean()

        assert mean_best_cos(anom_patches) < mean_best_cos(normal_patches)

    def test_separability_nearest_centroid(self):
        # With anomaly_shift >= 5 a nearest-centroid scorer on raw features
        # reaches image AUROC >= 0.95 (scored by brute force).
        cfg = SynthConfig(
            n_normal=60, n_anomalous=20, feat_dim=32, grid_h=4, grid_w=4,
            anomaly_shift=5.0, seed=13,
        )
        ds = synth_generate(cfg)
        train_patches = ds.features[ds.image_labels == 0][:40].reshape(-1, cfg.feat_dim).astype(np.float64)
        centers = _kmeans(train_patches, cfg.n_clusters, seed=1)
        patches = ds.patch_matrix()
        dists = np.sqrt(((patches[:, None, :] - centers[None]) ** 2).sum(-1)).min(1)
        image_scores = dists.reshape(ds.n_images, -1).max(1)
        assert pairwise_auroc(image_scores, ds.image_labels) >= 0.95


def _kmeans(points, k, seed, iters=15):
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(len(points), k, replace=False)]
    for _ in range(iters):
        assign = ((points[:, None, :] - centers[None]) ** 2).sum(-1).argmin(1)
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(0)
    return centers


class TestSplitTasks:
    @staticmethod
    def _normal_ds(n=5, gh=2, gw=1, d=3, seed=0):
        rng = np.random.default_rng(seed)
        return FeatureDataset(rng.normal(size=(n, gh, gw, d)).astype(np.float32))

    def test_single_task_even_split(self):
        ds = self._normal_ds(n=5, gh=2, gw=1)  # 10 patches
        (task,) = split_tasks(ds, 1, 0.5, seed=0)
        assert len(task.support_indices) == 5
        assert len(task.query_indices) == 5

    def test_partition_property(self):
        for seed in range(5):
            ds = self._normal_ds(n=7, gh=3, gw=2, seed=seed)  # 42 patches
            tasks = split_tasks(ds, 4, 0.4, seed=seed)
            seen = []
            for t in tasks:
                seen += [tuple(r) for r in t.support_indices]
                seen += [tuple(r) for r in t.query_indices]
            assert len(seen) == len(set(seen)) == 42

    def test_deterministic(self):
        ds = self._normal_ds(n=6, gh=2, gw=2)
        a = split_tasks(ds, 3, 0.5, seed=9)
        b = split_tasks(ds, 3, 0.5, seed=9)
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.support_indices, tb.support_indices)
            assert np.array_equal(ta.query_indices, tb.query_indices)

    def test_labeled_anomalies_rejected(self):
        ds = self._normal_ds(n=4)
        ds.image_labels = np.array([0, 1, 0, 0], dtype=np.uint8)
        with pytest.raises(ContractError):
            split_tasks(ds, 2, 0.5, seed=0)

    def test_too_many_tasks_rejected(self):
        ds = self._normal_ds(n=2, gh=1, gw=1)  # 2 patches
        with pytest.raises(ConfigError):
            split_tasks(ds, 3, 0.5, seed=0)

    def test_task_batch_requires_disjoint_nonempty(self):
        with pytest.raises(ContractError):
            TaskBatch(np.array([[0, 0]]), np.array([[0, 0]]), 0)
        with pytest.raises(ContractError):
            TaskBatch(np.zeros((0, 2), dtype=int), np.array([[0, 0]]), 0)
