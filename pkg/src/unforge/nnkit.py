"""Partitioned classifier substrate.

Every model is a composition ``final(intermediate(beginning(x)))`` of three
layer sequences. Training is segment-scoped: exactly the requested segments
receive gradient updates, everything else is bitwise frozen (frozen segments
also run in eval mode so their normalization buffers stay fixed).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SEGMENTS = ("beginning", "intermediate", "final")

ARCH_IDS = ("mlp", "cnn", "vgg16", "resnet18", "autoencoder_ae")

# Partition defaults: indices into each architecture's block list.
DEFAULT_CUTS = {
    "mlp": (1, 2),
    "cnn": (2, 4),
    "vgg16": (2, 5),
    "resnet18": (1, 3),
    "autoencoder_ae": (1, 2),
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer != "adam":
            raise ValueError("only the fixed-step adam optimizer is supported")


class PartitionedModel(nn.Module):
    """Classifier split into beginning / intermediate / final segments."""

    def __init__(self, beginning: nn.Module, intermediate: nn.Module,
                 final: nn.Module, arch_id: str, cuts: tuple[int, int],
                 feature_tap: str = "intermediate"):
        super().__init__()
        self.beginning = beginning
        self.intermediate = intermediate
        self.final = final
        self.arch_id = arch_id
        self.cuts = tuple(cuts)
        self.feature_tap = feature_tap

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.final(self.intermediate(self.beginning(x)))

    def segment(self, name: str) -> nn.Module:
        if name not in SEGMENTS:
            raise ValueError(f"unknown segment {name!r}")
        return getattr(self, name)

    def segment_parameter_counts(self) -> dict[str, int]:
        return {s: sum(p.numel() for p in self.segment(s).parameters()) for s in SEGMENTS}

    def parameter_vector(self) -> torch.Tensor:
        """Concatenation of all segment parameters, beginning first."""
        return torch.cat([p.detach().reshape(-1)
                          for s in SEGMENTS for p in self.segment(s).parameters()])


# --- architectures ----------------------------------------------------------

def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1),
                         nn.BatchNorm2d(cout), nn.ReLU())


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = nn.Sequential()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                       nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.short(x))


def _blocks_mlp(input_shape, class_count, width):
    d = int(np.prod(input_shape))
    return [nn.Sequential(nn.Flatten(), nn.Linear(d, width), nn.ReLU()),
            nn.Sequential(nn.Linear(width, width), nn.ReLU()),
            nn.Sequential(nn.Linear(width, class_count))]


def _blocks_cnn(input_shape, class_count, width):
    c, h, w = input_shape
    head_in = width * (h // 2) * (w // 2)
    return [_conv_block(c, width), _conv_block(width, width),
            _conv_block(width, width), _conv_block(width, width),
            nn.Sequential(nn.MaxPool2d(2), nn.Flatten(),
                          nn.Linear(head_in, width), nn.ReLU(), nn.Dropout(0.25),
                          nn.Linear(width, class_count))]


def _vgg_stage(cin, cout, convs):
    layers = []
    for i in range(convs):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1),
                   nn.BatchNorm2d(cout), nn.ReLU()]
    layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def _blocks_vgg16(input_shape, class_count, width):
    c, h, w = input_shape
    chans = [width, width * 2, width * 4, width * 8, width * 8]
    convs = [2, 2, 3, 3, 3]
    blocks, cin = [], c
    for co, k in zip(chans, convs):
        blocks.append(_vgg_stage(cin, co, k))
        cin = co
    blocks.append(nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                                nn.Linear(chans[-1], class_count)))
    return blocks


def _blocks_resnet18(input_shape, class_count, width):
    c, h, w = input_shape
    stem = nn.Sequential(nn.Conv2d(c, width, 3, padding=1, bias=False),
                         nn.BatchNorm2d(width), nn.ReLU())

    def layer(cin, cout, stride):
        return nn.Sequential(_BasicBlock(cin, cout, stride), _BasicBlock(cout, cout))

    return [nn.Sequential(stem, layer(width, width, 1)),
            layer(width, width * 2, 2),
            layer(width * 2, width * 4, 2),
            nn.Sequential(layer(width * 4, width * 8, 2),
                          nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                          nn.Linear(width * 8, class_count))]


def _blocks_autoencoder(input_shape, class_count, width):
    c, h, w = input_shape
    encoder = nn.Sequential(nn.Conv2d(c, width, 3, stride=2, padding=1), nn.ReLU(),
                            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.ReLU())
    decoder = nn.Sequential(
        nn.ConvTranspose2d(width * 2, width, 4, stride=2, padding=1), nn.ReLU(),
        nn.ConvTranspose2d(width, c, 4, stride=2, padding=1), nn.Sigmoid())
    head = nn.Sequential(nn.Flatten(), nn.Linear(int(np.prod(input_shape)), width * 4),
                         nn.ReLU(), nn.Linear(width * 4, class_count))
    return [encoder, decoder, head]


_BUILDERS = {
    "mlp": (_blocks_mlp, 64),
    "cnn": (_blocks_cnn, 16),
    "vgg16": (_blocks_vgg16, 64),
    "resnet18": (_blocks_resnet18, 64),
    "autoencoder_ae": (_blocks_autoencoder, 8),
}


def build_model(arch_id: str, input_shape, class_count: int,
                partition_spec: tuple[int, int] | None = None, *,
                width: int | None = None, seed: int | None = None,
                feature_tap: str = "intermediate") -> PartitionedModel:
    """Build a partitioned classifier. ``partition_spec`` names the two cut
    points inside the architecture's block list; defaults balance parameter
    mass between the segments."""
    if arch_id not in ARCH_IDS:
        raise ValueError(f"unknown arch_id {arch_id!r}")
    if seed is not None:
        torch.manual_seed(seed)
    builder, default_width = _BUILDERS[arch_id]
    blocks = builder(tuple(input_shape), class_count, width or default_width)
    cuts = tuple(partition_spec) if partition_spec is not None else DEFAULT_CUTS[arch_id]
    if not (0 < cuts[0] < cuts[1] < len(blocks)):
        raise ValueError(f"cut points {cuts} out of range for {len(blocks)} blocks")
    b, i, f = blocks[:cuts[0]], blocks[cuts[0]:cuts[1]], blocks[cuts[1]:]
    model = PartitionedModel(nn.Sequential(*b), nn.Sequential(*i), nn.Sequential(*f),
                             arch_id, cuts, feature_tap)
    return model


# --- feature tap -------------------------------------------------------------

def _last_parameterized_leaf(module: nn.Module) -> nn.Module:
    last = None
    for m in module.modules():
        if len(list(m.children())) == 0 and any(True for _ in m.parameters(recurse=False)):
            last = m
    if last is None:
        raise ValueError("final segment has no parameterized layer")
    return last


def features(model: PartitionedModel, batch, tap: str | None = None) -> torch.Tensor:
    """Feature matrix at the model's tap.

    ``intermediate``: flattened output of the intermediate segment (the
    condensation features). ``penultimate``: input to the last parameterized
    layer of the model (the clustering features).
    """
    tap = tap or model.feature_tap
    x = torch.as_tensor(np.asarray(batch), dtype=torch.float32)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if tap == "intermediate":
                out = model.intermediate(model.beginning(x))
            elif tap == "penultimate":
                captured = {}
                layer = _last_parameterized_leaf(model.final)
                handle = layer.register_forward_pre_hook(
                    lambda mod, inp: captured.__setitem__("x", inp[0]))
                try:
                    model(x)
                finally:
                    handle.remove()
                out = captured["x"]
            else:
                raise ValueError(f"unknown feature tap {tap!r}")
    finally:
        model.train(was_training)
    return out.reshape(len(out), -1)


# --- training -----------------------------------------------------------------

def _as_tensor_pair(data):
    x, y = data
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(y))
    if y.dtype not in (torch.int64, torch.float32):
        y = y.to(torch.int64 if not torch.is_floating_point(y) else torch.float32)
    return x, y


def distill_loss(student_logits, teacher_logits, labels, T: float,
                 hw: float, sw: float) -> torch.Tensor:
    """hw * CE(student, labels) + sw * T^2 * KL(student_T || teacher_T)."""
    loss = hw * F.cross_entropy(student_logits, labels)
    if sw != 0.0:
        kl = F.kl_div(F.log_softmax(student_logits / T, dim=1),
                      F.log_softmax(teacher_logits / T, dim=1),
                      reduction="batchmean", log_target=True)
        loss = loss + sw * (T ** 2) * kl
    return loss


def train_segments(model: PartitionedModel, data, cfg: TrainConfig,
                   trainable=("beginning", "intermediate", "final"),
                   loss="cross_entropy", post_step=None, log_sink=None):
    """Train exactly the masked segments; everything else stays bitwise fixed.

    ``data`` is an ``(inputs, targets)`` pair; batches are reshuffled each
    epoch with a generator seeded from ``cfg.seed``. ``loss`` is one of
    {cross_entropy, mse} or a callable ``(model, xb, yb) -> scalar``.
    Returns a list of per-epoch records ``{"epoch", "loss"}``.
    """
    trainable = tuple(trainable)
    for s in trainable:
        if s not in SEGMENTS:
            raise ValueError(f"unknown segment {s!r} in mask")
    log: list[dict] = []
    if cfg.epochs == 0:
        return log
    x, y = _as_tensor_pair(data)
    if len(x) == 0:
        raise ValueError("empty data stream")

    if callable(loss):
        loss_fn = loss
    elif loss == "cross_entropy":
        loss_fn = lambda m, xb, yb: F.cross_entropy(m(xb), yb)
    elif loss == "mse":
        loss_fn = lambda m, xb, yb: F.mse_loss(m(xb), yb)
    else:
        raise ValueError(f"loss {loss!r} needs a callable with its extra context")

    for s in SEGMENTS:
        seg = model.segment(s)
        active = s in trainable
        seg.train(active)
        for p in seg.parameters():
            p.requires_grad_(active)
    params = [p for s in trainable for p in model.segment(s).parameters()]
    if not params:
        raise ValueError("trainable mask selects no parameters")
    opt = torch.optim.Adam(params, lr=cfg.lr)

    rng = np.random.default_rng(cfg.seed)
    n = len(x)
    for epoch in range(cfg.epochs):
        perm = torch.from_numpy(rng.permutation(n))
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            value = loss_fn(model, x[idx], y[idx])
            if not torch.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss {value.item()} at epoch {epoch}, batch {batches}")
            value.backward()
            opt.step()
            if post_step is not None:
                post_step(model)
            total += float(value.detach())
            batches += 1
        record = {"epoch": epoch, "loss": total / batches}
        log.append(record)
        if log_sink is not None:
            log_sink(record)
    model.eval()
    return log


# --- snapshots -----------------------------------------------------------------

_DTYPES = {"torch.float32": ("<f4", torch.float32), "torch.int64": ("<i8", torch.int64),
           "torch.float64": ("<f8", torch.float64), "torch.int32": ("<i4", torch.int32)}


def _state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Snapshot:
    """Bitwise copy of a model's parameters and buffers."""

    arch_id: str
    cuts: tuple[int, int]
    state: dict
    checksum: str


def snapshot(model: PartitionedModel) -> Snapshot:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Snapshot(model.arch_id, model.cuts, state, _state_checksum(state))


def restore(model: PartitionedModel, snap: Snapshot,
            segments=SEGMENTS) -> None:
    """Restore the named segments from a snapshot, bitwise."""
    if snap.arch_id != model.arch_id:
        raise ValueError(f"snapshot arch {snap.arch_id!r} != model arch {model.arch_id!r}")
    state = {k: v for k, v in snap.state.items()
             if any(k.startswith(s + ".") for s in segments)}
    missing = model.load_state_dict(state, strict=False)
    unexpected = missing.unexpected_keys
    if unexpected:
        raise ValueError(f"snapshot carries unknown tensors: {unexpected[:3]}")


def save_snapshot(snap: Snapshot, path) -> None:
    """File format: uint32 LE header length, JSON header, then the raw
    little-endian tensor payload in header order."""
    entries, payload = [], bytearray()
    for key in sorted(snap.state):
        t = snap.state[key].detach().cpu()
        np_dtype = _DTYPES[str(t.dtype)][0]
        raw = t.numpy().astype(np_dtype).tobytes()
        entries.append({"key": key, "shape": list(t.shape), "dtype": str(t.dtype)})
        payload.extend(raw)
    header = json.dumps({"arch_id": snap.arch_id, "cuts": list(snap.cuts),
                         "checksum": snap.checksum, "entries": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_snapshot(path) -> Snapshot:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 0)
    header = json.loads(raw[4:4 + hlen].decode())
    offset = 4 + hlen
    state = {}
    for entry in header["entries"]:
        np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=np_dtype).reshape(entry["shape"])
        state[entry["key"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
        offset += nbytes
    snap = Snapshot(header["arch_id"], tuple(header["cuts"]), state, header["checksum"])
    if _state_checksum(state) != snap.checksum:
        raise ValueError(f"snapshot payload checksum mismatch in {path}")
    return snap
