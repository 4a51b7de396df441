"""Datasets, class-disjoint splits, and N-way K-shot episode sampling.

The synthetic generator builds a fine-grained classification task by
construction: every class shares one smooth global template (the common
overall appearance) and differs only in a few small high-contrast patches
at class-specific locations with class-specific signs (the discriminative
details). Per-instance patch jitter and pixel noise control difficulty.

Images are float64 arrays of shape (3, S, S), normalized per channel to
zero mean and unit variance over the whole dataset.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .numeric import Rng


class DataError(ValueError):
    """Invalid dataset, split, or episode request."""


@dataclass
class ClassRecord:
    id: int
    name: str
    instances: np.ndarray   # (J, 3, S, S)


class Dataset:
    """An ordered collection of classes with equal-shape image instances."""

    def __init__(self, classes: list[ClassRecord]):
        if not classes:
            raise DataError("dataset has no classes")
        shape = classes[0].instances.shape[1:]
        for rec in classes:
            if rec.instances.shape[1:] != shape:
                raise DataError(f"class {rec.id}: image shape {rec.instances.shape[1:]} "
                                f"differs from {shape}")
        self.classes = list(classes)
        self.by_id = {rec.id: rec for rec in classes}

    @property
    def image_size(self) -> int:
        return self.classes[0].instances.shape[-1]

    @property
    def class_ids(self) -> tuple:
        return tuple(rec.id for rec in self.classes)

    def __len__(self):
        return len(self.classes)


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint class-id partitions for meta-train / val / test."""

    train_class_ids: tuple
    val_class_ids: tuple
    test_class_ids: tuple

    def part(self, name: str) -> tuple:
        return {"train": self.train_class_ids,
                "val": self.val_class_ids,
                "test": self.test_class_ids}[name]


@dataclass
class Episode:
    """One N-way K-shot task with U queries per class.

    ``support`` is (N, K, 3, S, S) and ``query`` is (N, U, 3, S, S), both
    grouped by class in sampled order; episode-local label i refers to
    ``class_ids[i]``.
    """

    n_way: int
    k_shot: int
    n_query: int
    support: np.ndarray
    query: np.ndarray
    class_ids: tuple

    def support_flat(self) -> np.ndarray:
        return self.support.reshape((-1,) + self.support.shape[2:])

    def query_flat(self) -> np.ndarray:
        return self.query.reshape((-1,) + self.query.shape[2:])

    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.n_query)

    def permuted(self, perm) -> "Episode":
        """The same task with its classes listed in a different order."""
        perm = np.asarray(perm)
        return Episode(self.n_way, self.k_shot, self.n_query,
                       self.support[perm], self.query[perm],
                       tuple(self.class_ids[p] for p in perm))


@dataclass
class SynthConfig:
    """Controls for the synthetic fine-grained generator."""

    n_classes: int = 20
    instances_per_class: int = 40
    image_size: int = 84
    template_strength: float = 1.0
    patch_size: int = 7
    patch_count_per_class: int = 2
    jitter: int = 2
    noise_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.patch_size >= self.image_size:
            raise DataError(f"patch_size {self.patch_size} must be smaller than "
                            f"image_size {self.image_size}")
        for name in ("n_classes", "instances_per_class", "image_size",
                     "patch_size", "patch_count_per_class"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.jitter < 0 or self.noise_sigma < 0:
            raise DataError("jitter and noise_sigma must be nonnegative")


def build_split(dataset: Dataset, fractions, seed: int) -> ClassSplit:
    """Shuffle class ids by seed, then partition by rounded fractions.

    Counts are rounded half-up for train and val; test takes the rest.
    An empty train partition is an error; empty val/test partitions are
    left to the caller to reject if it needs them.
    """
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset)
    if n < 3:
        raise DataError(f"split needs at least 3 classes, got {n}")
    order = Rng(seed).permutation(n)
    ids = [dataset.classes[i].id for i in order]
    n_train = int(np.floor(f_train * n + 0.5))
    n_val = int(np.floor(f_val * n + 0.5))
    n_val = min(n_val, n - n_train)
    if n_train == 0:
        raise DataError("split produced an empty train partition")
    return ClassSplit(tuple(ids[:n_train]),
                      tuple(ids[n_train:n_train + n_val]),
                      tuple(ids[n_train + n_val:]))


def sample_episode(dataset: Dataset, split_part, n_way: int, k_shot: int,
                   n_query: int, rng: Rng) -> Episode:
    """Sample an N-way K-shot episode from the given class-id pool.

    Classes and instances are drawn without replacement; episode-local
    labels follow the sampled class order.
    """
    pool = tuple(split_part)
    if len(pool) < n_way:
        raise DataError(f"episode needs {n_way} classes but the split part has {len(pool)}")
    picked = [pool[i] for i in rng.choice(len(pool), n_way)]
    support, query = [], []
    for cid in picked:
        rec = dataset.by_id[cid]
        j = rec.instances.shape[0]
        if j < k_shot + n_query:
            raise DataError(f"class {cid} has {j} instances, episode needs "
                            f"{k_shot}+{n_query}")
        idx = rng.choice(j, k_shot + n_query)
        support.append(rec.instances[idx[:k_shot]])
        query.append(rec.instances[idx[k_shot:]])
    return Episode(n_way, k_shot, n_query, np.stack(support), np.stack(query),
                   tuple(picked))


def _smooth_field(rng: Rng, size: int) -> np.ndarray:
    """A (3, size, size) random field with only low-frequency content."""
    grid = max(2, size // 8)
    coarse = rng.normal(1.0, (3, grid, grid))
    field = np.stack([_bilinear_resize(coarse[c][None], size, size)[0]
                      for c in range(3)])
    std = field.std()
    return field / (std if std > 1e-12 else 1.0)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Build the shared-template, class-specific-patch dataset.

    All classes start from one template field scaled by
    ``template_strength``; each class adds its own high-contrast patches
    (class-specific positions and per-channel signs). Instances jitter the
    patch positions by at most ``jitter`` pixels (clipped to the image)
    and add Gaussian pixel noise.
    """
    rng = Rng(config.seed)
    s, ps = config.image_size, config.patch_size
    template = _smooth_field(rng.child(0), s) * config.template_strength

    classes = []
    for k in range(config.n_classes):
        crng = rng.child(1, k)
        pos = np.stack([crng.integers(0, s - ps + 1, config.patch_count_per_class),
                        crng.integers(0, s - ps + 1, config.patch_count_per_class)], axis=1)
        signs = crng.integers(0, 2, (config.patch_count_per_class, 3)) * 2.0 - 1.0
        instances = np.empty((config.instances_per_class, 3, s, s))
        for j in range(config.instances_per_class):
            irng = rng.child(2, k, j)
            img = template.copy()
            for p in range(config.patch_count_per_class):
                if config.jitter > 0:
                    dr, dc = irng.integers(-config.jitter, config.jitter + 1, 2)
                else:
                    dr = dc = 0
                r = int(np.clip(pos[p, 0] + dr, 0, s - ps))
                c = int(np.clip(pos[p, 1] + dc, 0, s - ps))
                img[:, r:r + ps, c:c + ps] += signs[p][:, None, None]
            if config.noise_sigma > 0:
                img += irng.normal(config.noise_sigma, (3, s, s))
            instances[j] = img
        classes.append(ClassRecord(k, f"synth_{k:03d}", instances))
    _normalize_channels(classes)
    return Dataset(classes)


def _normalize_channels(classes: list[ClassRecord]) -> None:
    """In-place per-channel standardization over the whole dataset."""
    stacked = np.concatenate([rec.instances for rec in classes])
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    std = np.where(std > 1e-12, std, 1.0)
    for rec in classes:
        rec.instances = (rec.instances - mean[:, None, None]) / std[:, None, None]


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) array (half-pixel-centered mapping)."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _read_ppm(path) -> np.ndarray:
    """Parse a binary 8-bit PPM (P6) file into a (3, H, W) array in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    # Header tokens (magic, width, height, maxval) with '#' comments allowed.
    tokens, i = [], 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        if start == i:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(raw[start:i])
    i += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a P6 PPM (magic {tokens[0]!r})")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PPM supported, maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height * 3, offset=i)
    if pixels.size != width * height * 3:
        raise DataError(f"{path}: truncated pixel data")
    img = pixels.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64)
    return img / maxval


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (3, H, W) array in [0, 1] as a binary P6 PPM."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    c, h, w = arr.shape
    data = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def load_image_folder(path, image_size: int = 84) -> Dataset:
    """Load a class-per-subdirectory folder of P6 PPM images.

    Images are bilinearly resized to ``image_size`` and the dataset is
    per-channel standardized. Unreadable files are skipped with a warning;
    a class with no readable image fails.
    """
    subdirs = sorted(d for d in os.listdir(path)
                     if os.path.isdir(os.path.join(path, d)))
    if not subdirs:
        raise DataError(f"{path}: no class subdirectories")
    classes = []
    for cid, name in enumerate(subdirs):
        folder = os.path.join(path, name)
        images = []
        for fname in sorted(os.listdir(folder)):
            fpath = os.path.join(folder, fname)
            if not os.path.isfile(fpath):
                continue
            try:
                img = _read_ppm(fpath)
            except (DataError, OSError, ValueError) as exc:
                warnings.warn(f"skipping unreadable image {fpath}: {exc}")
                continue
            images.append(_bilinear_resize(img, image_size, image_size))
        if not images:
            raise DataError(f"class directory {folder} has no readable image")
        classes.append(ClassRecord(cid, name, np.stack(images)))
    _normalize_channels(classes)
    return Dataset(classes)


def hflip(instance: np.ndarray) -> np.ndarray:
    """Horizontal mirror of a (3, S, S) image (an involution)."""
    return instance[:, :, ::-1].copy()


def augment(instance: np.ndarray, rng: Rng, flags=()) -> np.ndarray:
    """Train-time augmentation: flip (p=0.5), pad-4 random crop, value jitter.

    With no flags this is the identity. Jitter rescales contrast and
    shifts brightness, each by at most 10%.
    """
    out = instance
    if "flip" in flags:
        if rng.uniform(0.0, 1.0) < 0.5:
            out = hflip(out)
    if "crop" in flags:
        s = out.shape[-1]
        padded = np.pad(out, ((0, 0), (4, 4), (4, 4)))
        r, c = rng.integers(0, 9, 2)
        out = padded[:, r:r + s, c:c + s].copy()
    if "jitter" in flags:
        contrast = 1.0 + rng.uniform(-0.1, 0.1)
        brightness = rng.uniform(-0.1, 0.1)
        out = out * contrast + brightness
    return out


def save_dataset(path, dataset: Dataset, config: SynthConfig | None = None) -> None:
    """Persist a dataset as a tensor container plus a JSON manifest."""
    tensors = {f"class_{rec.id}": rec.instances for rec in dataset.classes}
    meta = {
        "classes": [{"id": rec.id, "name": rec.name,
                     "count": int(rec.instances.shape[0])}
                    for rec in dataset.classes],
        "image_size": dataset.image_size,
    }
    if config is not None:
        meta["generator_config"] = {k: getattr(config, k) for k in (
            "n_classes", "instances_per_class", "image_size", "template_strength",
            "patch_size", "patch_count_per_class", "jitter", "noise_sigma", "seed")}
    tensorio.save_with_manifest(path, tensors, extra=meta)


def load_dataset(path) -> Dataset:
    tensors, meta = tensorio.load_with_manifest(path)
    classes = [ClassRecord(entry["id"], entry["name"], tensors[f"class_{entry['id']}"])
               for entry in meta["classes"]]
    return Dataset(classes)
