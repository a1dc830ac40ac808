"""Per-class K-means over pretrained features.

Each class view is clustered independently into K groups; cluster (i, j)
carries the synthetic label ``i*K + j``, which is injective over all
class/cluster pairs. K-means uses k-means++ seeding, a fixed iteration cap,
and repairs empty clusters by reseeding at the farthest point (at most 3
repairs per class, after which the effective K for that class shrinks).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, class_view
from .nnkit import PartitionedModel, features


@dataclass
class ClusterIndex:
    """Per-class partition of image indices into clusters."""

    members: dict[int, list[np.ndarray]]
    k: int
    feature_dim: int
    seed: int
    feature_checksum: str = ""
    inertia: dict[int, float] = field(default_factory=dict)
    reduced_k: dict[int, int] = field(default_factory=dict)

    def cluster_label(self, class_id: int, j: int) -> int:
        if not (0 <= j < len(self.members[class_id])):
            raise IndexError(f"cluster {j} out of range for class {class_id}")
        return class_id * self.k + j

    def clusters(self):
        """Yield (class_id, j, member_indices, cluster_label) over all clusters."""
        for class_id in sorted(self.members):
            for j, idx in enumerate(self.members[class_id]):
                yield class_id, j, idx, self.cluster_label(class_id, j)

    @property
    def n_clusters(self) -> int:
        return sum(len(v) for v in self.members.values())

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "seed": self.seed,
            "feature_dim": self.feature_dim,
            "feature_checksum": self.feature_checksum,
            "classes": {str(c): [np.asarray(m).tolist() for m in groups]
                        for c, groups in self.members.items()},
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClusterIndex":
        payload = json.loads(text)
        members = {int(c): [np.asarray(m, dtype=np.int64) for m in groups]
                   for c, groups in payload["classes"].items()}
        return cls(members=members, k=payload["k"], feature_dim=payload["feature_dim"],
                   seed=payload["seed"], feature_checksum=payload.get("feature_checksum", ""))


def _kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
            continue
        centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100, max_repairs: int = 3):
    """Returns (assignment, inertia, effective_k)."""
    centers = _kmeans_plusplus(x, k, rng)
    repairs = 0
    assign = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for j in range(len(centers)):
            mask = new_assign == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            elif repairs < max_repairs:
                # reseed the empty centroid at the point farthest from its center
                far = d2[np.arange(len(x)), new_assign].argmax()
                centers[j] = x[far]
                new_assign[far] = j
                repairs += 1
            else:
                centers = np.delete(centers, j, axis=0)
                return _finish_lloyd(x, centers, max_iter)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    inertia = float(((x - centers[assign]) ** 2).sum())
    return assign, inertia, len(centers)


def _finish_lloyd(x, centers, max_iter):
    # continue with a reduced center set after exhausting repairs
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centers = np.stack([x[assign == j].mean(axis=0) if (assign == j).any()
                                else centers[j] for j in range(len(centers))])
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    inertia = float(((x - centers[assign]) ** 2).sum())
    return assign, inertia, len(centers)


def cluster_per_class(ds: LabeledDataset, model: PartitionedModel, k: int,
                      seed: int = 0, tap: str = "penultimate",
                      max_iter: int = 100) -> ClusterIndex:
    """Cluster every class view in feature space. Deterministic given seed."""
    if k < 1:
        raise ValueError("K must be >= 1")
    sizes = [len(class_view(ds, c)) for c in range(ds.class_count)]
    if min(s for s in sizes if s > 0) < k:
        raise ValueError(f"K={k} exceeds the smallest class size {min(sizes)}")

    members: dict[int, list[np.ndarray]] = {}
    inertia: dict[int, float] = {}
    reduced: dict[int, int] = {}
    checksum = hashlib.sha256()
    feature_dim = None
    for class_id in range(ds.class_count):
        view = class_view(ds, class_id)
        if len(view) == 0:
            members[class_id] = []
            continue
        feats = features(model, ds.images[view], tap=tap).numpy().astype(np.float64)
        feature_dim = feats.shape[1]
        checksum.update(feats.astype("<f8").tobytes())
        rng = np.random.default_rng((seed, class_id))
        if k == 1 or np.allclose(feats, feats[0]):
            if k > 1:
                warnings.warn(f"class {class_id}: degenerate features, "
                              "falling back to a single cluster")
                reduced[class_id] = 1
            members[class_id] = [view.copy()]
            inertia[class_id] = 0.0
            continue
        assign, cls_inertia, eff_k = _lloyd(feats, k, rng, max_iter=max_iter)
        groups = [view[assign == j] for j in range(eff_k)]
        groups = [g for g in groups if len(g)]
        if len(groups) < k:
            reduced[class_id] = len(groups)
        members[class_id] = groups
        inertia[class_id] = cls_inertia

    return ClusterIndex(members=members, k=k, feature_dim=feature_dim or 0,
                        seed=seed, feature_checksum=checksum.hexdigest(),
                        inertia=inertia, reduced_k=reduced)
