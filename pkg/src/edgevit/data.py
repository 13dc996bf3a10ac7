"""Datasets: CIFAR-10 binary batches, a synthetic texture generator, sub-task splits."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
RECORD = 3073
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

SYNTH_MEAN = (0.5, 0.5, 0.5)
SYNTH_STD = (0.25, 0.25, 0.25)


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, S, S) float32, normalised
    labels: np.ndarray  # (n,) int64
    split: np.ndarray  # (n,) "train" | "eval"
    class_names: list[str]
    normalization: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def select(self, mask) -> "Dataset":
        return Dataset(self.images[mask], self.labels[mask], self.split[mask],
                       list(self.class_names), dict(self.normalization))

    def part(self, name: str) -> "Dataset":
        return self.select(self.split == name)

    @property
    def xy(self):
        return self.images, self.labels


@dataclass
class SubTask:
    """Class subset an edge model must recognise, in original class ids."""

    classes: list[int]

    def __post_init__(self):
        self.classes = [int(c) for c in self.classes]
        if not self.classes:
            raise ValueError("a sub-task needs at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("sub-task classes contain duplicates")

    @property
    def label_map(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.classes)}

    def remap(self, labels) -> np.ndarray:
        lm = self.label_map
        return np.array([lm[int(y)] for y in labels], dtype=np.int64)

    @classmethod
    def load(cls, path) -> "SubTask":
        with open(path) as f:
            return cls(json.load(f)["classes"])

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"classes": self.classes}, f)


def _read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % RECORD:
        offset = (len(raw) // RECORD) * RECORD
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {RECORD}; "
                          f"incomplete record at byte offset {offset}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD)
    return rec[:, 0].astype(np.int64), rec[:, 1:].reshape(-1, 3, 32, 32)


def normalize(pixels_u8, mean, std) -> np.ndarray:
    x = pixels_u8.astype(np.float32) / np.float32(255.0)
    return ((x - np.asarray(mean, np.float32)[:, None, None])
            / np.asarray(std, np.float32)[:, None, None]).astype(np.float32)


def load_cifar10(directory, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> Dataset:
    """Read the CIFAR-10 binary distribution (``data_batch_{1..5}.bin``, ``test_batch.bin``)."""
    labels, pixels, split = [], [], []
    for name, tag in [(f, "train") for f in TRAIN_FILES] + [(TEST_FILE, "eval")]:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 file {path}")
        y, px = _read_cifar_file(path)
        if y.size and y.max() > 9:
            raise FormatError(f"{path}: label byte {int(y.max())} outside 0..9")
        labels.append(y)
        pixels.append(px)
        split.append(np.full(len(y), tag))
    names = list(CIFAR10_CLASSES)
    meta = os.path.join(directory, "batches.meta.txt")
    if os.path.exists(meta):
        with open(meta) as f:
            listed = [ln.strip() for ln in f if ln.strip()]
        if len(listed) == 10:
            names = listed
    return Dataset(normalize(np.concatenate(pixels), mean, std), np.concatenate(labels),
                   np.concatenate(split), names,
                   {"source": "cifar10", "mean": list(mean), "std": list(std)})


def denormalize_to_bytes(images, mean, std) -> np.ndarray:
    x = images * np.asarray(std, np.float32)[:, None, None] + np.asarray(mean, np.float32)[:, None, None]
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


@dataclass
class SyntheticSpec:
    """Class-conditioned oriented gratings on a tinted background.

    Each class has a base colour, spatial frequency and orientation; samples
    draw a random phase, jittered frequency/orientation and pixel noise.
    """

    seed: int = 0
    num_classes: int = 10
    samples_per_class: int = 200
    image_size: int = 32
    eval_fraction: float = 0.2
    noise: float = 0.6
    color_spread: float = 0.15
    amplitude: float = 0.2

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        with open(path) as f:
            return cls(**json.load(f))

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1)


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    c, s = spec.num_classes, spec.image_size
    colors = 0.5 + rng.uniform(-spec.color_spread, spec.color_spread, (c, 3))
    freqs = rng.uniform(1.5, 6.0, c)
    thetas = rng.permutation(c) * (math.pi / max(c, 1)) + rng.uniform(0, 0.2, c)
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    n_eval = int(round(spec.samples_per_class * spec.eval_fraction))
    images, labels, split = [], [], []
    for k in range(c):
        for i in range(spec.samples_per_class):
            phase = rng.uniform(0, 2 * math.pi)
            f = freqs[k] * rng.uniform(0.9, 1.1)
            th = thetas[k] + rng.normal(0, 0.08)
            wave = np.sin(2 * math.pi * f * (xx * math.cos(th) + yy * math.sin(th)) / s + phase)
            img = colors[k][:, None, None] + spec.amplitude * wave[None] \
                + rng.normal(0, spec.noise, (3, s, s))
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(k)
            split.append("eval" if i >= spec.samples_per_class - n_eval else "train")
    if images:
        arr = np.stack(images)
    else:
        arr = np.zeros((0, 3, s, s))
    arr = ((arr - np.asarray(SYNTH_MEAN)[:, None, None]) / np.asarray(SYNTH_STD)[:, None, None])
    return Dataset(arr.astype(np.float32), np.asarray(labels, dtype=np.int64),
                   np.asarray(split, dtype="<U5"), [f"class_{k}" for k in range(c)],
                   {"source": "synthetic", "mean": list(SYNTH_MEAN), "std": list(SYNTH_STD),
                    "spec": asdict(spec)})


def build_subtask_split(dataset: Dataset, subtask: SubTask) -> tuple[Dataset, Dataset]:
    """Train/eval parts restricted to the sub-task, labels remapped to 0..C_edge-1."""
    missing = [cl for cl in subtask.classes if not 0 <= cl < dataset.num_classes]
    if missing:
        raise ValueError(f"classes {missing} not in dataset")
    mask = np.isin(dataset.labels, subtask.classes)
    sub = dataset.select(mask)
    sub.labels = subtask.remap(sub.labels)
    sub.class_names = [dataset.class_names[cl] for cl in subtask.classes]
    return sub.part("train"), sub.part("eval")


def load_dataset(path) -> Dataset:
    """A CIFAR-10 directory or a synthetic-spec JSON file."""
    if os.path.isdir(path):
        return load_cifar10(path)
    return make_synthetic(SyntheticSpec.load(path))


def batches(images, labels, batch_size: int = 32):
    for start in range(0, len(labels), batch_size):
        yield images[start:start + batch_size], labels[start:start + batch_size]
