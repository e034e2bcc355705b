"""Datasets and target classifiers: ingestion, small CNN presets, training,
accuracy, and checkpoint persistence.

Images are kept as float32 tensors in [0, 1], shape (n, c, h, w); labels as
int64. No normalization statistics are baked in anywhere, so perturbations
computed in image space transfer directly to model inputs.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import TrainingDiverged, TruncatedFileError
from .ioformats import load_named_tensors, save_named_tensors

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"
_CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
_CIFAR_CLASSES = 10

MODEL_PRESETS = ("convnet4", "convnet6", "resnet-tiny")


@dataclass
class LabeledDataset:
    images: Tensor  # (n, c, h, w) float32 in [0, 1]
    labels: Tensor  # (n,) int64
    split: str = ""
    num_classes: int = 10

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels length does not match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, n: int) -> "LabeledDataset":
        """First ``n`` examples, preserving order (splits are pre-shuffled)."""
        if not 0 < n <= len(self):
            raise ValueError(f"cannot take {n} of {len(self)} examples")
        return LabeledDataset(self.images[:n], self.labels[:n], self.split, self.num_classes)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return LabeledDataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def iter_batches(
    dataset: LabeledDataset, batch_size: int, shuffle: bool = False, seed: int = 0
) -> Iterator[tuple[Tensor, Tensor]]:
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = torch.as_tensor(order[start : start + batch_size], dtype=torch.long)
        yield dataset.images[idx], dataset.labels[idx]


# ---------------------------------------------------------------------------
# Ingestion


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD_BYTES != 0:
        raise TruncatedFileError(
            f"{path}: {len(raw)} bytes is not a multiple of the "
            f"{_CIFAR_RECORD_BYTES}-byte record size"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= _CIFAR_CLASSES:
        raise ValueError(f"{path}: label byte {labels.max()} out of range, file is not CIFAR-10")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def ingest_cifar10(root: str | Path) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the CIFAR-10 binary batches from ``root``.

    Expects the five data_batch_*.bin files plus test_batch.bin, each a
    sequence of 3073-byte records (label byte, then 3x32x32 planar RGB).
    Returns (train, test) with pixel values scaled to [0, 1].
    """
    root = Path(root)
    train_images, train_labels = [], []
    for name in CIFAR10_TRAIN_FILES:
        images, labels = _read_cifar_batch(root / name)
        train_images.append(images)
        train_labels.append(labels)
    test_images, test_labels = _read_cifar_batch(root / CIFAR10_TEST_FILE)
    train = LabeledDataset(
        torch.from_numpy(np.concatenate(train_images)),
        torch.from_numpy(np.concatenate(train_labels)),
        split="train",
    )
    test = LabeledDataset(
        torch.from_numpy(test_images), torch.from_numpy(test_labels), split="test"
    )
    return train, test


def ingest_image_folder(
    root: str | Path, resolution: int = 32, per_class_cap: int | None = None
) -> LabeledDataset:
    """Load a directory of per-class subfolders of PNG images.

    Class indices follow the sorted subfolder names. Images are resized to
    ``resolution`` square with bilinear filtering and converted to RGB.
    Undecodable files are skipped with a warning rather than aborting.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories found")
    images, labels = [], []
    skipped = 0
    for class_index, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise ValueError(f"{class_dir}: class directory contains no PNG files")
        if per_class_cap is not None:
            files = files[:per_class_cap]
        for fpath in files:
            try:
                with Image.open(fpath) as img:
                    rgb = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            except (UnidentifiedImageError, OSError) as exc:
                skipped += 1
                warnings.warn(f"skipping undecodable image {fpath}: {exc}")
                continue
            arr = np.asarray(rgb, dtype=np.float32).transpose(2, 0, 1) / 255.0
            images.append(arr)
            labels.append(class_index)
    if skipped:
        warnings.warn(f"image folder ingest skipped {skipped} undecodable file(s)")
    if not images:
        raise ValueError(f"{root}: no decodable images found")
    return LabeledDataset(
        torch.from_numpy(np.stack(images)),
        torch.tensor(labels, dtype=torch.int64),
        split="folder",
        num_classes=len(class_dirs),
    )


# ---------------------------------------------------------------------------
# Synthetic data

_NUM_PATTERN_CLASSES = 10


def _render_pattern(cls: int, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """One grayscale pattern in [-1, 1] for the given class, with jittered params."""
    if cls == 0:  # horizontal grating
        freq, phase = rng.uniform(2.0, 4.0), rng.uniform(0.0, 1.0)
        return np.sin(2 * np.pi * (freq * yy + phase))
    if cls == 1:  # vertical grating
        freq, phase = rng.uniform(2.0, 4.0), rng.uniform(0.0, 1.0)
        return np.sin(2 * np.pi * (freq * xx + phase))
    if cls == 2:  # diagonal grating
        freq, phase = rng.uniform(2.0, 4.0), rng.uniform(0.0, 1.0)
        theta = rng.uniform(np.radians(35.0), np.radians(55.0))
        return np.sin(2 * np.pi * (freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase))
    if cls == 3:  # checkerboard
        freq = rng.uniform(1.5, 3.0)
        px, py = rng.uniform(0.0, 1.0, 2)
        return np.sign(np.sin(2 * np.pi * (freq * xx + px)) * np.sin(2 * np.pi * (freq * yy + py)))
    if cls == 4:  # filled disk
        cx, cy = 0.5 + rng.uniform(-0.15, 0.15, 2)
        radius = rng.uniform(0.20, 0.32)
        dist = np.hypot(xx - cx, yy - cy)
        return np.tanh((radius - dist) * rng.uniform(15.0, 30.0))
    if cls == 5:  # ring
        cx, cy = 0.5 + rng.uniform(-0.12, 0.12, 2)
        radius, width = rng.uniform(0.22, 0.34), rng.uniform(0.05, 0.09)
        dist = np.abs(np.hypot(xx - cx, yy - cy) - radius)
        return np.tanh((width - dist) * rng.uniform(20.0, 35.0))
    if cls == 6:  # axis-aligned cross
        cx, cy = 0.5 + rng.uniform(-0.12, 0.12, 2)
        wx, wy = rng.uniform(0.06, 0.12, 2)
        sharp = rng.uniform(20.0, 35.0)
        return np.maximum(np.tanh((wx - np.abs(xx - cx)) * sharp), np.tanh((wy - np.abs(yy - cy)) * sharp))
    if cls == 7:  # square outline
        cx, cy = 0.5 + rng.uniform(-0.10, 0.10, 2)
        radius, width = rng.uniform(0.20, 0.32), rng.uniform(0.05, 0.09)
        dist = np.abs(np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - radius)
        return np.tanh((width - dist) * rng.uniform(20.0, 35.0))
    if cls == 8:  # linear ramp
        theta = rng.uniform(0.0, 2 * np.pi)
        t = np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)
        return np.clip(t / 0.5, -1.0, 1.0)
    # gaussian blobs
    pattern = np.zeros_like(xx)
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(0.15, 0.85, 2)
        sigma = rng.uniform(0.06, 0.12)
        pattern += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
    return np.clip(pattern, 0.0, 1.0) * 2.0 - 1.0


def _render_split(
    n: int, resolution: int, rng: np.random.Generator, noise_sigma: float, contrast: tuple[float, float]
) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(resolution) + 0.5) / resolution
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    labels = np.tile(np.arange(_NUM_PATTERN_CLASSES), n // _NUM_PATTERN_CLASSES + 1)[:n]
    rng.shuffle(labels)  # shuffled up front so any prefix is class-balanced
    images = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    for i, cls in enumerate(labels):
        pattern = _render_pattern(int(cls), rng, yy, xx)
        amplitude = rng.uniform(*contrast)
        base = rng.uniform(0.35, 0.65, 3)
        gain = rng.uniform(0.6, 1.0, 3)
        img = base[:, None, None] + amplitude * gain[:, None, None] * pattern[None]
        img += rng.normal(0.0, noise_sigma, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


def make_synthetic_dataset(
    n_train: int,
    n_heldout: int,
    resolution: int = 32,
    seed: int = 7,
    noise_sigma: float = 0.10,
    contrast: tuple[float, float] = (0.07, 0.19),
) -> tuple[LabeledDataset, LabeledDataset]:
    """Procedural 10-class texture/shape dataset used when CIFAR-10 is absent.

    Classes are distinct pattern families (gratings at three orientations,
    checkerboard, disk, ring, cross, square outline, ramp, blobs) rendered
    with per-sample geometry jitter, random base color and contrast, and
    additive Gaussian pixel noise. Both splits come pre-shuffled.
    """
    if n_train % _NUM_PATTERN_CLASSES or n_heldout % _NUM_PATTERN_CLASSES:
        raise ValueError(f"split sizes must be multiples of {_NUM_PATTERN_CLASSES}")
    train_imgs, train_labels = _render_split(
        n_train, resolution, np.random.default_rng(seed), noise_sigma, contrast
    )
    held_imgs, held_labels = _render_split(
        n_heldout, resolution, np.random.default_rng(seed + 1), noise_sigma, contrast
    )
    train = LabeledDataset(torch.from_numpy(train_imgs), torch.from_numpy(train_labels), "train")
    heldout = LabeledDataset(torch.from_numpy(held_imgs), torch.from_numpy(held_labels), "heldout")
    return train, heldout


# ---------------------------------------------------------------------------
# Models


class _ConvNet4(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(128 * 4 * 4, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x).flatten(1))


class _ConvNet6(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()

        def block(cin: int, cout: int) -> list[nn.Module]:
            return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]

        self.features = nn.Sequential(
            *block(in_channels, 32), *block(32, 32), nn.MaxPool2d(2),
            *block(32, 64), *block(64, 64), nn.MaxPool2d(2),
            *block(64, 128), nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(128 * 4 * 4, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x).flatten(1))


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = (
            nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
            if stride != 1 or cin != cout
            else nn.Identity()
        )

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class _ResNetTiny(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
        )
        self.stage1 = _BasicBlock(16, 16)
        self.stage2 = _BasicBlock(16, 32, stride=2)
        self.stage3 = _BasicBlock(32, 64, stride=2)
        self.head = nn.Linear(64, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        out = self.stage3(self.stage2(self.stage1(self.stem(x))))
        return self.head(F.adaptive_avg_pool2d(out, 1).flatten(1))


class TargetModel:
    """A named classifier with a parameter digest and frozen-by-default inference.

    ``logits`` keeps the autograd graph for the inputs (needed to train
    perturbations through a frozen target); ``predict`` does not.
    """

    def __init__(self, identifier: str, module: nn.Module, num_classes: int, preset: str,
                 in_channels: int = 3):
        self.identifier = identifier
        self.module = module
        self.num_classes = num_classes
        self.preset = preset
        self.in_channels = in_channels

    def logits(self, images: Tensor) -> Tensor:
        return self.module(images)

    def predict(self, images: Tensor, batch_size: int = 512) -> Tensor:
        self.module.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                outs.append(self.module(images[start : start + batch_size]).argmax(dim=1))
        return torch.cat(outs)

    def freeze(self) -> "TargetModel":
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        return self

    def param_digest(self) -> str:
        """SHA-256 over the sorted state dict (names, dtypes, shapes, bytes)."""
        h = hashlib.sha256()
        state = self.module.state_dict()
        for name in sorted(state):
            t = state[name].detach().cpu().contiguous()
            arr = t.numpy()
            h.update(name.encode())
            h.update(arr.dtype.name.encode())
            h.update(str(tuple(arr.shape)).encode())
            h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()


def build_small_cnn(
    preset: str, seed: int = 0, num_classes: int = 10, in_channels: int = 3,
    identifier: str | None = None,
) -> TargetModel:
    """Construct one of the classifier presets with seeded initialization."""
    if preset not in MODEL_PRESETS:
        raise ValueError(f"unknown preset {preset!r}, expected one of {MODEL_PRESETS}")
    torch.manual_seed(seed)
    if preset == "convnet4":
        module: nn.Module = _ConvNet4(in_channels, num_classes)
    elif preset == "convnet6":
        module = _ConvNet6(in_channels, num_classes)
    else:
        module = _ResNetTiny(in_channels, num_classes)
    name = identifier if identifier is not None else f"{preset}-s{seed}"
    return TargetModel(name, module, num_classes, preset, in_channels)


@dataclass
class ClassifierHyper:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def train_classifier(
    model: TargetModel,
    train: LabeledDataset,
    hyper: ClassifierHyper | None = None,
    heldout: LabeledDataset | None = None,
    verbose: bool = False,
) -> TargetModel:
    """Fit the classifier with Adam on cross entropy and return it frozen."""
    hyper = hyper or ClassifierHyper()
    if len(train) == 0:
        raise ValueError("empty training set")
    opt = torch.optim.Adam(
        model.module.parameters(), lr=hyper.learning_rate, weight_decay=hyper.weight_decay
    )
    model.module.train()
    for epoch in range(hyper.epochs):
        losses = []
        for x, y in iter_batches(train, hyper.batch_size, shuffle=True, seed=hyper.seed * 1000 + epoch):
            loss = F.cross_entropy(model.module(x), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"classifier loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if verbose:
            msg = f"epoch {epoch}: loss {np.mean(losses):.4f}"
            if heldout is not None:
                msg += f" heldout acc {accuracy(model, heldout):.4f}"
                model.module.train()
            print(msg)
    return model.freeze()


def accuracy(model: TargetModel, dataset: LabeledDataset, batch_size: int = 512) -> float:
    preds = model.predict(dataset.images, batch_size)
    return (preds == dataset.labels).float().mean().item()


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: TargetModel, path: str | Path) -> None:
    """Persist a classifier as a named-tensor container with identity metadata."""
    tensors = {
        name: tensor.detach().cpu().contiguous().numpy()
        for name, tensor in model.module.state_dict().items()
    }
    meta = {
        "kind": "classifier",
        "preset": model.preset,
        "identifier": model.identifier,
        "num_classes": model.num_classes,
        "in_channels": model.in_channels,
        "param_digest": model.param_digest(),
    }
    save_named_tensors(path, tensors, meta)


def load_checkpoint(path: str | Path) -> TargetModel:
    """Load a classifier checkpoint, verify its parameter digest, return it frozen."""
    tensors, meta = load_named_tensors(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path}: not a classifier checkpoint (kind={meta.get('kind')!r})")
    model = build_small_cnn(
        meta["preset"],
        num_classes=meta["num_classes"],
        in_channels=meta["in_channels"],
        identifier=meta["identifier"],
    )
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    model.module.load_state_dict(state)
    if model.param_digest() != meta["param_digest"]:
        raise ValueError(f"{path}: restored parameters do not match recorded digest")
    return model.freeze()
