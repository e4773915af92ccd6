"""Feature-dataset I/O, synthetic data generation, and task partitioning.

A dataset is a stack of per-image patch-feature grids (float32, shape
``[n_images, grid_h, grid_w, feat_dim]``) with optional binary image labels
and per-patch masks. On disk it is stored in the COZF container, which is
little-endian throughout:

    bytes 0-3   magic "COZF"
    byte  4     version (1)
    byte  5     flags: bit0 = has_labels, bit1 = has_masks
    bytes 6-7   reserved, zero
    4 x uint32  n_images, grid_h, grid_w, feat_dim
    float32[]   features, image-major, row-major grid
    uint8[]     labels (n_images entries, only if has_labels)
    uint8[]     masks (n_images*grid_h*grid_w entries, only if has_masks)
    uint32+utf8 meta string

Writing is deterministic: identical datasets produce identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, CorruptionError, FormatError

MAGIC = b"COZF"
VERSION = 1
_FLAG_LABELS = 0x01
_FLAG_MASKS = 0x02


@dataclass(eq=False)
class FeatureDataset:
    """In-memory patch-feature dataset. ``features`` is float32 [n, gh, gw, d]."""

    features: np.ndarray
    image_labels: np.ndarray | None = None
    pixel_masks: np.ndarray | None = None
    meta: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.image_labels is not None:
            self.image_labels = np.ascontiguousarray(self.image_labels, dtype=np.uint8)
        if self.pixel_masks is not None:
            self.pixel_masks = np.ascontiguousarray(self.pixel_masks, dtype=np.uint8)

    @property
    def n_images(self) -> int:
        return self.features.shape[0]

    @property
    def grid_h(self) -> int:
        return self.features.shape[1]

    @property
    def grid_w(self) -> int:
        return self.features.shape[2]

    @property
    def feat_dim(self) -> int:
        return self.features.shape[3]

    @property
    def patches_per_image(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        """Raise ContractError if any dataset invariant is violated."""
        if self.features.ndim != 4:
            raise ContractError(f"features must be 4-d, got shape {self.features.shape}")
        n, gh, gw, d = self.features.shape
        if n < 1 or gh < 1 or gw < 1 or d < 1:
            raise ContractError(f"all dimensions must be >= 1, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ContractError("features contain non-finite values")
        if self.image_labels is not None:
            if self.image_labels.shape != (n,):
                raise ContractError(
                    f"image_labels shape {self.image_labels.shape} != ({n},)"
                )
            if not np.isin(self.image_labels, (0, 1)).all():
                raise ContractError("image_labels must be 0 or 1")
        if self.pixel_masks is not None:
            if self.pixel_masks.shape != (n, gh, gw):
                raise ContractError(
                    f"pixel_masks shape {self.pixel_masks.shape} != ({n}, {gh}, {gw})"
                )
            if not np.isin(self.pixel_masks, (0, 1)).all():
                raise ContractError("pixel_masks must be 0 or 1")
            if self.image_labels is not None:
                normal = self.image_labels == 0
                if self.pixel_masks[normal].any():
                    raise ContractError("normal image (label 0) has a non-zero mask")

    def patch_matrix(self) -> np.ndarray:
        """All patches flattened to float64 [n*gh*gw, feat_dim] (copy)."""
        n = self.n_images
        return self.features.reshape(n * self.patches_per_image, self.feat_dim).astype(
            np.float64
        )

    def equals(self, other: "FeatureDataset") -> bool:
        if self.features.shape != other.features.shape:
            return False
        if not np.array_equal(self.features, other.features):
            return False
        for a, b in ((self.image_labels, other.image_labels), (self.pixel_masks, other.pixel_masks)):
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return self.meta == other.meta


def write_feature_file(dataset: FeatureDataset, path) -> None:
    """Serialize ``dataset`` to ``path`` in the COZF container format."""
    dataset.validate()
    flags = 0
    if dataset.image_labels is not None:
        flags |= _FLAG_LABELS
    if dataset.pixel_masks is not None:
        flags |= _FLAG_MASKS
    buf = bytearray()
    buf += MAGIC
    buf.append(VERSION)
    buf.append(flags)
    buf += b"\x00\x00"
    buf += struct.pack(
        "<4I", dataset.n_images, dataset.grid_h, dataset.grid_w, dataset.feat_dim
    )
    buf += dataset.features.astype("<f4", copy=False).tobytes()
    if dataset.image_labels is not None:
        buf += dataset.image_labels.tobytes()
    if dataset.pixel_masks is not None:
        buf += dataset.pixel_masks.tobytes()
    meta_bytes = dataset.meta.encode("utf-8")
    buf += struct.pack("<I", len(meta_bytes))
    buf += meta_bytes
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CorruptionError(
                f"truncated file: wanted {count} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out


def read_feature_file(path) -> FeatureDataset:
    """Parse a COZF file back into a FeatureDataset.

    Raises FormatError for a wrong magic/version and CorruptionError when the
    header is inconsistent with the payload.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data)
    magic = cur.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = cur.take(1)[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    flags = cur.take(1)[0]
    if flags & ~(_FLAG_LABELS | _FLAG_MASKS):
        raise FormatError(f"unknown flag bits 0x{flags:02x}")
    if cur.take(2) != b"\x00\x00":
        raise FormatError("reserved header bytes are not zero")
    n, gh, gw, d = struct.unpack("<4I", cur.take(16))
    if min(n, gh, gw, d) < 1:
        raise CorruptionError(f"invalid dimensions n={n} gh={gh} gw={gw} d={d}")
    count = n * gh * gw * d
    feats = np.frombuffer(cur.take(count * 4), dtype="<f4").reshape(n, gh, gw, d).copy()
    labels = None
    if flags & _FLAG_LABELS:
        labels = np.frombuffer(cur.take(n), dtype=np.uint8).copy()
    masks = None
    if flags & _FLAG_MASKS:
        masks = np.frombuffer(cur.take(n * gh * gw), dtype=np.uint8).reshape(n, gh, gw).copy()
    (meta_len,) = struct.unpack("<I", cur.take(4))
    meta = cur.take(meta_len).decode("utf-8")
    if cur.pos != len(data):
        raise CorruptionError(f"{len(data) - cur.pos} trailing bytes after payload")
    dataset = FeatureDataset(feats, labels, masks, meta)
    try:
        dataset.validate()
    except ContractError as exc:
        raise CorruptionError(f"file contents violate dataset invariants: {exc}") from exc
    return dataset


def subset(dataset: FeatureDataset, indices) -> FeatureDataset:
    """New dataset view restricted to the given image indices (copies)."""
    idx = np.asarray(indices, dtype=np.int64)
    return FeatureDataset(
        dataset.features[idx].copy(),
        None if dataset.image_labels is None else dataset.image_labels[idx].copy(),
        None if dataset.pixel_masks is None else dataset.pixel_masks[idx].copy(),
        dataset.meta,
    )


@dataclass
class SynthConfig:
    """Parameters for the synthetic desk-scale dataset generator.

    ``subspace_dim`` controls how many directions each cluster's Gaussian
    mode spans (real patch features concentrate near low-dimensional
    manifolds; anomaly displacements then mostly point off-manifold). Zero
    means fully isotropic modes.
    """

    n_normal: int = 100
    n_anomalous: int = 0
    feat_dim: int = 64
    grid_h: int = 8
    grid_w: int = 8
    n_clusters: int = 3
    anomaly_shift: float = 6.0
    noise_std: float = 0.05
    subspace_dim: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.n_normal < 1:
            raise ConfigError("n_normal must be >= 1")
        if self.n_anomalous < 0:
            raise ConfigError("n_anomalous must be >= 0")
        for name in ("feat_dim", "grid_h", "grid_w", "n_clusters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.subspace_dim <= self.feat_dim:
            raise ConfigError("subspace_dim must be in [0, feat_dim]")
        if not self.anomaly_shift > 0:
            raise ConfigError("anomaly_shift must be > 0")
        if not self.noise_std > 0:
            raise ConfigError("noise_std must be > 0")


def synth_generate(config: SynthConfig) -> FeatureDataset:
    """Generate a synthetic patch-feature dataset.

    Normal patches are drawn from ``n_clusters`` Gaussian modes (std
    ``noise_std``) and projected onto the unit sphere. Anomalous images carry
    one contiguous rectangular patch region whose samples are displaced by
    ``anomaly_shift * noise_std`` along a per-image random direction before
    normalization. Labels and masks are always populated. Identical configs
    produce identical datasets; the cluster centers are drawn first so that
    datasets generated with the same seed share their cluster geometry
    regardless of the image counts requested.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.feat_dim
    gh, gw = config.grid_h, config.grid_w
    ppi = gh * gw
    centers = rng.normal(size=(config.n_clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    m = min(config.subspace_dim, d)
    bases = None
    if 0 < m < d:
        # Per-cluster orthonormal mode directions; off-mode jitter is 10x
        # smaller so the data concentrates near an m-dimensional sheet.
        bases = np.empty((config.n_clusters, d, m))
        for c in range(config.n_clusters):
            q, _ = np.linalg.qr(rng.normal(size=(d, m)))
            bases[c] = q
    floor_std = config.noise_std / 10.0

    n_total = config.n_normal + config.n_anomalous
    feats = np.empty((n_total, ppi, d), dtype=np.float64)
    labels = np.zeros(n_total, dtype=np.uint8)
    masks = np.zeros((n_total, gh, gw), dtype=np.uint8)

    for img in range(n_total):
        cluster_ids = rng.integers(0, config.n_clusters, size=ppi)
        if bases is None:
            pts = centers[cluster_ids] + config.noise_std * rng.normal(size=(ppi, d))
        else:
            coeffs = config.noise_std * rng.normal(size=(ppi, m))
            pts = (
                centers[cluster_ids]
                + np.einsum("pdm,pm->pd", bases[cluster_ids], coeffs)
                + floor_std * rng.normal(size=(ppi, d))
            )
        anomalous = img >= config.n_normal
        if anomalous:
            rh = int(rng.integers(1, max(1, gh // 2) + 1))
            rw = int(rng.integers(1, max(1, gw // 2) + 1))
            r0 = int(rng.integers(0, gh - rh + 1))
            c0 = int(rng.integers(0, gw - rw + 1))
            direction = rng.normal(size=d)
            direction /= np.linalg.norm(direction)
            region = np.zeros((gh, gw), dtype=bool)
            region[r0 : r0 + rh, c0 : c0 + rw] = True
            pts[region.reshape(-1)] += config.anomaly_shift * config.noise_std * direction
            masks[img] = region.astype(np.uint8)
            labels[img] = 1
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        feats[img] = pts

    meta = (
        f"synthetic: clusters={config.n_clusters} shift={config.anomaly_shift} "
        f"noise={config.noise_std} subspace={m} seed={config.seed}"
    )
    return FeatureDataset(
        feats.reshape(n_total, gh, gw, d).astype(np.float32), labels, masks, meta
    )


@dataclass
class TaskBatch:
    """Support/query split of (image, patch) index pairs for one task."""

    support_indices: np.ndarray  # [k, 2] int64 rows of (image, patch)
    query_indices: np.ndarray
    task_id: int

    def __post_init__(self):
        self.support_indices = np.asarray(self.support_indices, dtype=np.int64)
        self.query_indices = np.asarray(self.query_indices, dtype=np.int64)
        if len(self.support_indices) == 0 or len(self.query_indices) == 0:
            raise ContractError("support and query sets must be non-empty")
        sup = {tuple(r) for r in self.support_indices}
        qry = {tuple(r) for r in self.query_indices}
        if sup & qry:
            raise ContractError("support and query sets overlap")

    def support_flat(self, patches_per_image: int) -> np.ndarray:
        s = self.support_indices
        return s[:, 0] * patches_per_image + s[:, 1]

    def query_flat(self, patches_per_image: int) -> np.ndarray:
        q = self.query_indices
        return q[:, 0] * patches_per_image + q[:, 1]


def split_tasks(
    dataset: FeatureDataset, n_tasks: int, support_fraction: float, seed
) -> list[TaskBatch]:
    """Partition every training patch into ``n_tasks`` support/query tasks.

    The union of all task indices is exactly the set of patch indices, tasks
    are pairwise disjoint, and each side of each split is non-empty. Only
    all-normal datasets may be split (training is one-class).
    """
    if dataset.image_labels is not None and (dataset.image_labels == 1).any():
        raise ContractError("training dataset contains labeled anomalies")
    if not 0.0 < support_fraction < 1.0:
        raise ConfigError("support_fraction must be in (0, 1)")
    ppi = dataset.patches_per_image
    total = dataset.n_images * ppi
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if n_tasks > total:
        raise ConfigError(f"n_tasks={n_tasks} exceeds patch count {total}")
    if total // n_tasks < 2:
        raise ConfigError(
            f"n_tasks={n_tasks} leaves fewer than 2 patches per task ({total} total)"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(total)
    chunks = np.array_split(perm, n_tasks)
    tasks = []
    for task_id, chunk in enumerate(chunks):
        size = len(chunk)
        n_support = min(max(1, int(round(support_fraction * size))), size - 1)
        support = chunk[:n_support]
        query = chunk[n_support:]
        tasks.append(
            TaskBatch(
                np.stack([support // ppi, support % ppi], axis=1),
                np.stack([query // ppi, query % ppi], axis=1),
                task_id,
            )
        )
    return tasks
