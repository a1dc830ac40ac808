"""Dataset ingestion, caching, and deterministic forget/retain splitting.

Images are stored as float32 arrays of shape [N, C, H, W] with pixel values
in [0, 1]; labels are int64 in [0, class_count). Real datasets (CIFAR-10,
SVHN) are served from an on-disk cache; ``synthetic_gaussians`` is generated
on the fly and is the workhorse for desk-scale experiments and tests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetCacheError(RuntimeError):
    """Raised when a dataset cache is missing or fails checksum validation."""


DATASET_REGISTRY = {
    "cifar10": {"class_count": 10, "image_shape": (3, 32, 32), "train_per_class": 5000},
    "svhn": {"class_count": 10, "image_shape": (3, 32, 32), "train_per_class": None},
    "synthetic_gaussians": {"class_count": None, "image_shape": (1, 8, 8), "train_per_class": None},
}

# Fraction of the official test split carved off as the remembrance pool;
# the remainder is the evaluation split. Keeps MIA/accuracy evaluation
# disjoint from remembrance training.
REMEMBRANCE_POOL_FRACTION = 0.2


@dataclass
class LabeledDataset:
    """Indexed image/label store with class views."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("image count and label count differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0,1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count,
                              name or self.name)


@dataclass
class DatasetBundle:
    """Train split plus the held-out evaluation split and remembrance pool."""

    train: LabeledDataset
    eval: LabeledDataset
    remembrance_pool: LabeledDataset


@dataclass
class ForgetSpec:
    """What to forget: a random fraction of the train set or a whole class."""

    mode: str  # "random_fraction" | "whole_class"
    fraction: float = 0.1
    class_id: int = 0
    seed: int = 0
    indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in ("random_fraction", "whole_class"):
            raise ValueError(f"unknown forget mode {self.mode!r}")
        if self.mode == "random_fraction" and not (0.0 < self.fraction < 1.0):
            raise ValueError("fraction must lie in (0,1)")


@dataclass
class SplitView:
    """Disjoint cover of a dataset's index space."""

    forget: np.ndarray
    retain: np.ndarray

    def __post_init__(self) -> None:
        self.forget = np.sort(np.asarray(self.forget, dtype=np.int64))
        self.retain = np.sort(np.asarray(self.retain, dtype=np.int64))


def split_forget_retain(ds: LabeledDataset, spec: ForgetSpec) -> SplitView:
    """Resolve a ForgetSpec against a dataset; deterministic given the seed."""
    n = len(ds)
    if spec.mode == "random_fraction":
        n_forget = int(round(spec.fraction * n))
        rng = np.random.default_rng(spec.seed)
        forget = np.sort(rng.choice(n, size=n_forget, replace=False))
    else:
        forget = class_view(ds, spec.class_id)
    if len(forget) == 0:
        raise ValueError("forget set resolved empty")
    if len(forget) == n:
        raise ValueError("retain set resolved empty")
    mask = np.ones(n, dtype=bool)
    mask[forget] = False
    retain = np.nonzero(mask)[0]
    spec.indices = forget
    return SplitView(forget=forget, retain=retain)


def class_view(ds: LabeledDataset, class_id: int) -> np.ndarray:
    """All and only indices carrying the given label, ascending."""
    if not (0 <= class_id < ds.class_count):
        raise ValueError(f"class_id {class_id} out of range for c={ds.class_count}")
    return np.nonzero(ds.labels == class_id)[0].astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic_gaussians: c classes of sub-blob Gaussians in 2-D, rendered as
# 1x8x8 images. The left half of the image carries the x coordinate, the
# right half the y coordinate, plus optional per-pixel noise. Class identity
# is recoverable only from the coordinates, so overlap (sigma) and
# memorizability (noise) are controllable.
# ---------------------------------------------------------------------------

_SYN_RADIUS = 3.0
_SYN_EXTENT = 4.5  # coordinate box half-width used for [0,1] rendering


def _render_coords(coords: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    n = len(coords)
    uv = np.clip((coords + _SYN_EXTENT) / (2.0 * _SYN_EXTENT), 0.0, 1.0)
    img = np.empty((n, 1, 8, 8), dtype=np.float32)
    img[:, 0, :, :4] = uv[:, 0, None, None]
    img[:, 0, :, 4:] = uv[:, 1, None, None]
    if noise > 0:
        img += noise * rng.standard_normal(img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_gaussians(class_count: int = 4, per_class: int = 120, *,
                             sub_blobs: int = 2, sigma: float = 0.35,
                             noise: float = 0.02, seed: int = 0,
                             name: str = "synthetic_gaussians") -> LabeledDataset:
    """Sample a blob dataset. Sub-blobs of one class sit on adjacent arc
    positions so classes form contiguous arcs on a circle of radius 3."""
    rng = np.random.default_rng(seed)
    total_blobs = class_count * sub_blobs
    angles = 2.0 * np.pi * np.arange(total_blobs) / total_blobs
    centers = _SYN_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    coords, labels, blob_ids = [], [], []
    for i in range(class_count):
        for b in range(sub_blobs):
            cnt = per_class // sub_blobs + (1 if b < per_class % sub_blobs else 0)
            z = centers[i * sub_blobs + b] + sigma * rng.standard_normal((cnt, 2))
            coords.append(z)
            labels.append(np.full(cnt, i, dtype=np.int64))
            blob_ids.append(np.full(cnt, i * sub_blobs + b, dtype=np.int64))
    coords = np.concatenate(coords)
    labels = np.concatenate(labels)
    ds = LabeledDataset(_render_coords(coords, noise, rng), labels, class_count, name)
    ds.sub_blob_ids = np.concatenate(blob_ids)  # ground truth for cluster tests
    return ds


# ---------------------------------------------------------------------------
# Cache: <cache_dir>/<name>/{train,test}.bin + manifest.json
# .bin = raw uint8 images (C-order) followed by int64 LE labels.
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _split_bytes(images_u8: np.ndarray, labels: np.ndarray) -> bytes:
    return images_u8.astype(np.uint8).tobytes() + labels.astype("<i8").tobytes()


def write_cache(name: str, cache_dir, train: tuple[np.ndarray, np.ndarray],
                test: tuple[np.ndarray, np.ndarray], class_count: int) -> Path:
    """Write a dataset cache. Images are uint8 [N,C,H,W]; labels int64."""
    root = Path(cache_dir) / name
    root.mkdir(parents=True, exist_ok=True)
    shape = tuple(train[0].shape[1:])
    manifest = {
        "name": name,
        "class_count": class_count,
        "image_shape": list(shape),
        "counts": {"train": int(len(train[1])), "test": int(len(test[1]))},
        "normalization": "uint8/255",
        "checksums": {},
    }
    for split, (imgs, labels) in (("train", train), ("test", test)):
        payload = _split_bytes(imgs, labels)
        (root / f"{split}.bin").write_bytes(payload)
        manifest["checksums"][f"{split}.bin"] = _sha256(payload)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def _read_cached_split(root: Path, split: str, manifest: dict) -> tuple[np.ndarray, np.ndarray]:
    path = root / f"{split}.bin"
    if not path.exists():
        raise DatasetCacheError(f"missing cache file {path}")
    payload = path.read_bytes()
    if _sha256(payload) != manifest["checksums"][f"{split}.bin"]:
        raise DatasetCacheError(f"checksum mismatch for {path}")
    n = manifest["counts"][split]
    shape = tuple(manifest["image_shape"])
    img_bytes = n * int(np.prod(shape))
    images = np.frombuffer(payload[:img_bytes], dtype=np.uint8).reshape((n, *shape))
    labels = np.frombuffer(payload[img_bytes:], dtype="<i8")
    if len(labels) != n:
        raise DatasetCacheError(f"label count mismatch in {path}")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def _fetch_torchvision(name: str, root: Path) -> tuple[tuple, tuple, int]:
    import torchvision  # local import: only needed when building a cache

    if name == "cifar10":
        tr = torchvision.datasets.CIFAR10(str(root), train=True, download=True)
        te = torchvision.datasets.CIFAR10(str(root), train=False, download=True)
        to_chw = lambda d: np.transpose(np.asarray(d.data), (0, 3, 1, 2))
        return ((to_chw(tr), np.asarray(tr.targets)),
                (to_chw(te), np.asarray(te.targets)), 10)
    tr = torchvision.datasets.SVHN(str(root), split="train", download=True)
    te = torchvision.datasets.SVHN(str(root), split="test", download=True)
    return ((np.asarray(tr.data), np.asarray(tr.labels)),
            (np.asarray(te.data), np.asarray(te.labels)), 10)


def _carve_test_split(test: LabeledDataset, name: str) -> tuple[LabeledDataset, LabeledDataset]:
    """First 20% of a deterministic per-class shuffle becomes the remembrance
    pool; stratifying keeps the pool class-balanced."""
    seed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    rng = np.random.default_rng(seed)
    pool_parts, eval_parts = [], []
    for class_id in range(test.class_count):
        view = np.nonzero(test.labels == class_id)[0]
        perm = view[rng.permutation(len(view))]
        n_pool = max(1, int(np.ceil(REMEMBRANCE_POOL_FRACTION * len(view)))) if len(view) else 0
        pool_parts.append(perm[:n_pool])
        eval_parts.append(perm[n_pool:])
    pool_idx = np.sort(np.concatenate(pool_parts))
    eval_idx = np.sort(np.concatenate(eval_parts))
    return (test.subset(eval_idx, f"{name}/eval"),
            test.subset(pool_idx, f"{name}/remembrance_pool"))


def load_dataset(name: str, cache_dir, *, download: bool = False,
                 class_count: int | None = None, per_class: int | None = None,
                 sub_blobs: int = 2, sigma: float = 0.35, noise: float = 0.02,
                 seed: int = 0) -> DatasetBundle:
    """Load a dataset bundle: normalized train split, evaluation split, and a
    disjoint remembrance pool. Byte-identical on repeated loads.

    The synthetic keyword arguments are ignored for cached real datasets.
    """
    if name not in DATASET_REGISTRY:
        raise ValueError(f"unknown dataset {name!r}; known: {sorted(DATASET_REGISTRY)}")

    if name == "synthetic_gaussians":
        c = class_count or 4
        n = per_class or 120
        train = make_synthetic_gaussians(c, n, sub_blobs=sub_blobs, sigma=sigma,
                                         noise=noise, seed=seed, name=name)
        n_test = max(sub_blobs, n)
        test = make_synthetic_gaussians(c, n_test, sub_blobs=sub_blobs, sigma=sigma,
                                        noise=noise, seed=seed + 10_000,
                                        name=f"{name}/test")
        eval_ds, pool = _carve_test_split(test, name)
        return DatasetBundle(train=train, eval=eval_ds, remembrance_pool=pool)

    root = Path(cache_dir) / name
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        if not download:
            raise DatasetCacheError(
                f"no cache at {root} and download disabled; build the cache first")
        (tr, te, c) = _fetch_torchvision(name, root)
        write_cache(name, cache_dir, tr, te, c)
    manifest = json.loads(manifest_path.read_text())
    train_imgs, train_labels = _read_cached_split(root, "train", manifest)
    test_imgs, test_labels = _read_cached_split(root, "test", manifest)
    c = manifest["class_count"]
    train = LabeledDataset(train_imgs, train_labels, c, name)
    test = LabeledDataset(test_imgs, test_labels, c, f"{name}/test")
    eval_ds, pool = _carve_test_split(test, name)
    return DatasetBundle(train=train, eval=eval_ds, remembrance_pool=pool)
