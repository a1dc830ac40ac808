"""Two condensers: one synthetic image per cluster.

Fast distribution matching (FDM) optimizes a softmax-weighted convex
combination of the cluster's own images so that its features match the
cluster's mean features; the trainable parameter count per cluster equals the
cluster size. Model-inversion condensation trains a small generator from
one-hot cluster labels to images through the frozen classifier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .clustering import ClusterIndex
from .data import LabeledDataset
from .nnkit import PartitionedModel, features


@dataclass
class CondensedSet:
    """One synthetic image per non-empty cluster, original class labels."""

    images: np.ndarray          # [M, C, H, W] float32 in [0, 1]
    class_ids: np.ndarray       # [M]
    cluster_js: np.ndarray      # [M]
    cluster_labels: np.ndarray  # [M] synthetic labels i*K + j
    method: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._pos = {(int(i), int(j)): m
                     for m, (i, j) in enumerate(zip(self.class_ids, self.cluster_js))}

    def position(self, class_id: int, j: int):
        return self._pos.get((class_id, j))

    def __len__(self) -> int:
        return len(self.class_ids)

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        np.save(prefix.with_suffix(".npy"), self.images)
        sidecar = {
            "method": self.method,
            "params": self.params,
            "clusters": [{"class_id": int(i), "j": int(j), "label": int(l)}
                         for i, j, l in zip(self.class_ids, self.cluster_js,
                                            self.cluster_labels)],
        }
        prefix.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))

    @classmethod
    def load(cls, prefix) -> "CondensedSet":
        prefix = Path(prefix)
        images = np.load(prefix.with_suffix(".npy"))
        sidecar = json.loads(prefix.with_suffix(".json").read_text())
        rows = sidecar["clusters"]
        return cls(images=images,
                   class_ids=np.asarray([r["class_id"] for r in rows], dtype=np.int64),
                   cluster_js=np.asarray([r["j"] for r in rows], dtype=np.int64),
                   cluster_labels=np.asarray([r["label"] for r in rows], dtype=np.int64),
                   method=sidecar["method"], params=sidecar.get("params", {}))


def _tap_forward(model: PartitionedModel, x: torch.Tensor, tap: str) -> torch.Tensor:
    """Gradient-capable feature forward (the public ``features`` is no-grad)."""
    if tap == "intermediate":
        out = model.intermediate(model.beginning(x))
        return out.reshape(len(out), -1)
    return features(model, x, tap=tap)  # penultimate path is only used frozen


def condense_fdm(clusters: ClusterIndex, ds: LabeledDataset, model: PartitionedModel,
                 epochs: int = 200, lr: float = 1e-2, tap: str = "intermediate",
                 seed: int = 0) -> CondensedSet:
    """Per cluster, fit softmax weights so the convex combination's features
    match the cluster's mean features. The model stays frozen; outputs lie in
    the convex hull of the cluster images by construction."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if clusters.n_clusters == 0:
        raise ValueError("empty cluster index")
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    images, class_ids, js, labels = [], [], [], []
    torch.manual_seed(seed)
    try:
        for class_id, j, members, label in clusters.clusters():
            x = torch.as_tensor(ds.images[members])
            if len(members) == 1:
                phi = x[0]
            else:
                with torch.no_grad():
                    target = _tap_forward(model, x, tap).mean(dim=0)
                omega = torch.zeros(len(members), requires_grad=True)
                opt = torch.optim.Adam([omega], lr=lr)
                for _ in range(epochs):
                    opt.zero_grad()
                    w = torch.softmax(omega, dim=0)
                    phi = torch.einsum("m,mchw->chw", w, x)
                    f = _tap_forward(model, phi.unsqueeze(0), tap)[0]
                    loss = torch.linalg.vector_norm(target - f)
                    if not torch.isfinite(loss):
                        raise RuntimeError(f"non-finite FDM loss on cluster "
                                           f"({class_id},{j})")
                    loss.backward()
                    opt.step()
                with torch.no_grad():
                    w = torch.softmax(omega, dim=0)
                    phi = torch.einsum("m,mchw->chw", w, x)
            images.append(phi.detach().numpy())
            class_ids.append(class_id)
            js.append(j)
            labels.append(label)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.train(was_training)

    return CondensedSet(images=np.stack(images).astype(np.float32),
                        class_ids=np.asarray(class_ids, dtype=np.int64),
                        cluster_js=np.asarray(js, dtype=np.int64),
                        cluster_labels=np.asarray(labels, dtype=np.int64),
                        method="fdm", params={"epochs": epochs, "lr": lr, "tap": tap})


class InverterNet(nn.Module):
    """Generator mapping a one-hot cluster label to an image: a small MLP
    head, a reshape to a coarse grid, then two transposed-conv blocks with a
    sigmoid output."""

    def __init__(self, n_labels: int, image_shape, hidden: int = 64, base_ch: int = 32):
        super().__init__()
        c, h, w = image_shape
        if h % 4 or w % 4:
            raise ValueError("image height/width must be divisible by 4")
        self.base = (base_ch, h // 4, w // 4)
        self.fc = nn.Sequential(nn.Linear(n_labels, hidden), nn.ReLU(),
                                nn.Linear(hidden, int(np.prod(self.base))), nn.ReLU())
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(base_ch, base_ch // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(base_ch // 2, c, 4, stride=2, padding=1), nn.Sigmoid())

    def forward(self, onehot: torch.Tensor) -> torch.Tensor:
        z = self.fc(onehot).reshape(-1, *self.base)
        return self.deconv(z)


def fit_inverter(model: PartitionedModel, n_labels: int, label_ids: np.ndarray,
                 class_targets: np.ndarray, image_shape, *, epochs: int = 50,
                 lam: float = 1.0, lr: float = 1e-3, batch_size: int = 256,
                 members: np.ndarray | None = None, seed: int = 0) -> InverterNet:
    """Train an inverter against a frozen classifier.

    ``label_ids[p]`` is the synthetic label of pair p, ``class_targets[p]``
    its original class. When ``members`` is given, the composite loss adds
    ``lam * MSE(generator(label), member_image)``; with ``members=None`` the
    loss is cross-entropy only (the unlearned-model audit has no targets).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    torch.manual_seed(seed)
    inverter = InverterNet(n_labels, image_shape)
    was_training = model.training
    model.eval()
    frozen_flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)

    onehots = torch.eye(n_labels)[torch.as_tensor(label_ids, dtype=torch.int64)]
    targets = torch.as_tensor(class_targets, dtype=torch.int64)
    member_t = None if members is None else torch.as_tensor(members, dtype=torch.float32)
    opt = torch.optim.Adam(inverter.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = len(label_ids)
    try:
        for _ in range(epochs):
            perm = torch.from_numpy(rng.permutation(n))
            for start in range(0, n, batch_size):
                idx = perm[start:start + batch_size]
                opt.zero_grad()
                gen = inverter(onehots[idx])
                loss = F.cross_entropy(model(gen), targets[idx])
                if member_t is not None and lam > 0:
                    loss = loss + lam * F.mse_loss(gen, member_t[idx])
                if not torch.isfinite(loss):
                    raise RuntimeError("non-finite inversion loss")
                loss.backward()
                opt.step()
    finally:
        for p, flag in zip(model.parameters(), frozen_flags):
            p.requires_grad_(flag)
        model.train(was_training)
    inverter.eval()
    return inverter


def condense_inversion(clusters: ClusterIndex, ds: LabeledDataset,
                       model: PartitionedModel, epochs: int = 50, lam: float = 1.0,
                       lr: float = 1e-3, batch_size: int = 256,
                       seed: int = 0) -> CondensedSet:
    """Train the inverter on (cluster label -> cluster member) pairs through
    the frozen classifier, then read one image per cluster label."""
    n_labels = ds.class_count * clusters.k
    label_ids, class_targets, member_idx = [], [], []
    rows = []
    for class_id, j, members, label in clusters.clusters():
        rows.append((class_id, j, label))
        label_ids.extend([label] * len(members))
        class_targets.extend([class_id] * len(members))
        member_idx.extend(members.tolist())
    inverter = fit_inverter(model, n_labels, np.asarray(label_ids),
                            np.asarray(class_targets), ds.image_shape,
                            epochs=epochs, lam=lam, lr=lr, batch_size=batch_size,
                            members=ds.images[np.asarray(member_idx)], seed=seed)

    with torch.no_grad():
        onehots = torch.eye(n_labels)[torch.as_tensor([r[2] for r in rows])]
        images = inverter(onehots).clamp(0.0, 1.0).numpy().astype(np.float32)
    return CondensedSet(images=images,
                        class_ids=np.asarray([r[0] for r in rows], dtype=np.int64),
                        cluster_js=np.asarray([r[1] for r in rows], dtype=np.int64),
                        cluster_labels=np.asarray([r[2] for r in rows], dtype=np.int64),
                        method="inversion",
                        params={"epochs": epochs, "lambda": lam, "lr": lr})
