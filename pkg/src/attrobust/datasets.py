"""Dataset ingestion.

Real datasets (CIFAR-10, GTSRB) load from disk only; nothing here fetches
over the network.  A procedurally generated shapes dataset with analytic
ground-truth boxes serves as the CI / desk-scale stand-in: ten geometry
classes drawn bright on a dark noisy background, so that input-gradient
alignment has a meaningful target.
"""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from attrobust.utils import spawn_seed, torch_generator

DATA_ROOT_ENV = "ATTROBUST_DATA_ROOT"

SHAPE_CLASSES = ("square", "circle", "triangle", "plus", "diamond",
                 "ring", "h_bar", "v_bar", "x_cross", "frame")

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
SYNTHETIC_MEAN = (0.25, 0.25, 0.25)
SYNTHETIC_STD = (0.30, 0.30, 0.30)


@dataclass
class ArrayDataset:
    """In-memory dataset: images (N, C, H, W) in [0, 1], integer labels,
    optional ground-truth boxes (x_min, y_min, x_max, y_max) per image."""

    images: np.ndarray
    labels: np.ndarray
    boxes: Optional[np.ndarray] = None
    class_names: Optional[tuple] = None

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices)
        return ArrayDataset(self.images[idx], self.labels[idx],
                            None if self.boxes is None else self.boxes[idx],
                            self.class_names)

    def tensors(self):
        return torch.from_numpy(self.images), torch.from_numpy(self.labels)

    def iter_batches(self, batch_size, shuffle=False, generator=None, augment=False):
        n = len(self)
        if shuffle:
            order = torch.randperm(n, generator=generator).numpy()
        else:
            order = np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = torch.from_numpy(self.images[idx])
            y = torch.from_numpy(self.labels[idx])
            if augment:
                x = _augment_batch(x, generator)
            yield x, y


def _augment_batch(x, generator):
    """Random 4px-pad crop plus horizontal flip, the standard light recipe."""
    n, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (4, 4, 4, 4), mode="reflect")
    out = torch.empty_like(x)
    offs = torch.randint(0, 9, (n, 2), generator=generator)
    flips = torch.rand(n, generator=generator) < 0.5
    for i in range(n):
        r, c = int(offs[i, 0]), int(offs[i, 1])
        patch = padded[i, :, r:r + h, c:c + w]
        out[i] = torch.flip(patch, dims=(2,)) if flips[i] else patch
    return out


def _shape_mask(class_index: int, s: int) -> np.ndarray:
    u, v = np.mgrid[0:s, 0:s].astype(np.float64)
    m = (s - 1) / 2.0
    du, dv = np.abs(u - m), np.abs(v - m)
    r2 = (u - m) ** 2 + (v - m) ** 2
    name = SHAPE_CLASSES[class_index]
    if name == "square":
        return np.ones((s, s), dtype=bool)
    if name == "circle":
        return r2 <= m * m + 0.26
    if name == "triangle":
        return dv <= (u / max(s - 1, 1)) * m + 0.26
    if name == "plus":
        t = s / 6.0
        return (du <= t) | (dv <= t)
    if name == "diamond":
        return du + dv <= m + 0.26
    if name == "ring":
        return (r2 <= m * m + 0.26) & (r2 >= (0.55 * m) ** 2)
    if name == "h_bar":
        return du <= s / 6.0
    if name == "v_bar":
        return dv <= s / 6.0
    if name == "x_cross":
        t = s / 7.0
        return (np.abs(u - v) <= t) | (np.abs(u + v - 2 * m) <= t)
    if name == "frame":
        return np.maximum(du, dv) >= 0.62 * m
    raise ValueError(f"no shape for class {class_index}")


def class_texture_patterns(num_classes, image_size, amplitude, pattern_seed=777, block=4):
    """Fixed per-class sign patterns of small amplitude, at block granularity.

    These are deliberately brittle shortcut features: perfectly predictive of
    the class, but with amplitude at most half the usual attack radius, so an
    attacker can invert them outright.  A model that leans on them is accurate
    yet adversarially fragile (the behaviour natural training shows on real
    image data), while robust training has to fall back on the shape geometry.
    """
    prng = np.random.default_rng(pattern_seed)
    cells = image_size // block
    signs = prng.integers(0, 2, size=(num_classes, 3, cells, cells)) * 2 - 1
    signs = np.repeat(np.repeat(signs, block, axis=2), block, axis=3)
    return (amplitude * signs[:, :, :image_size, :image_size]).astype(np.float32)


def make_synthetic_shapes(n, seed=0, image_size=32, num_classes=10, min_size=10, max_size=24,
                          background_low=0.10, background_range=0.18,
                          contrast_low=0.12, contrast_high=0.22,
                          pixel_noise=0.01, texture_amplitude=3.5 / 255, texture_block=4,
                          pattern_seed=777) -> ArrayDataset:
    """Generate n shape images with labels, exact bounding boxes and masks-by-construction.

    Composition per image: a flat per-image background level, the class's
    shape raised above it by a moderate contrast (robustly classifiable under
    the standard attack radius, but only that), the class's fixed low-amplitude
    micro-texture (fragile by construction, see class_texture_patterns), and
    faint pixel noise.  pattern_seed stays constant across splits so the
    texture shortcut is consistent between train and test; the background
    floor keeps texture inversions away from the pixel-range clip."""
    if not 2 <= num_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPE_CLASSES)}]")
    rng = np.random.default_rng(seed)
    h = w = image_size
    images = np.empty((n, 3, h, w), dtype=np.float32)
    labels = rng.integers(0, num_classes, size=n).astype(np.int64)
    boxes = np.empty((n, 4), dtype=np.int64)
    patterns = None
    if texture_amplitude > 0:
        patterns = class_texture_patterns(num_classes, image_size, texture_amplitude,
                                          pattern_seed, block=texture_block)
    for i in range(n):
        s = int(rng.integers(min_size, max_size + 1))
        r0 = int(rng.integers(1, h - s))
        c0 = int(rng.integers(1, w - s))
        mask = _shape_mask(int(labels[i]), s)
        level = rng.uniform(background_low, background_low + background_range, size=3)
        img = np.broadcast_to(level.reshape(3, 1, 1), (3, h, w)).copy()
        contrast = rng.uniform(contrast_low, contrast_high) + rng.uniform(-0.03, 0.03, size=3)
        region = img[:, r0:r0 + s, c0:c0 + s]
        for ch in range(3):
            region[ch][mask] = level[ch] + max(contrast[ch], 0.06)
        img += rng.normal(0.0, pixel_noise, size=img.shape)
        if patterns is not None:
            img += patterns[labels[i]]
        images[i] = np.clip(img, 0.0, 1.0)
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        boxes[i] = (c0 + cols[0], r0 + rows[0], c0 + cols[-1], r0 + rows[-1])
    return ArrayDataset(images, labels, boxes, SHAPE_CLASSES[:num_classes])


def subset_indices(n_total, subset_size, seed):
    """Deterministic subset selection; same seed, same index list."""
    if subset_size is None or subset_size >= n_total:
        return np.arange(n_total)
    rng = np.random.default_rng(spawn_seed(seed, "subset"))
    return rng.permutation(n_total)[:subset_size]


def _dataset_root(data_root):
    root = data_root or os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise FileNotFoundError(
            f"no dataset root configured; pass data_root or set ${DATA_ROOT_ENV}")
    return root


def _load_cifar10(split, data_root):
    import torchvision

    root = _dataset_root(data_root)
    try:
        ds = torchvision.datasets.CIFAR10(root, train=(split == "train"), download=False)
    except RuntimeError as e:
        raise FileNotFoundError(
            f"CIFAR-10 files not found under {root!r} (set ${DATA_ROOT_ENV} or pass "
            f"data_root; no network fetch is attempted): {e}") from e
    images = ds.data.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    labels = np.asarray(ds.targets, dtype=np.int64)
    return ArrayDataset(images, labels, class_names=tuple(ds.classes))


def _load_gtsrb(split, data_root, image_size=32):
    import torchvision
    from PIL import Image

    root = _dataset_root(data_root)
    try:
        ds = torchvision.datasets.GTSRB(root, split="train" if split == "train" else "test",
                                        download=False)
    except RuntimeError as e:
        raise FileNotFoundError(
            f"GTSRB files not found under {root!r}: {e}") from e
    images, labels = [], []
    for img, label in ds:
        img = img.resize((image_size, image_size), Image.BILINEAR)
        images.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
        labels.append(label)
    return ArrayDataset(np.stack(images), np.asarray(labels, dtype=np.int64))


def load_corruption_arrays(data_root, corruption, severity=None):
    """Loader hook for the common-corruptions benchmark: reads pre-generated
    <corruption>.npy / labels.npy arrays from <root>/CIFAR-10-C."""
    root = Path(_dataset_root(data_root)) / "CIFAR-10-C"
    arr_path = root / f"{corruption}.npy"
    if not arr_path.exists():
        raise FileNotFoundError(f"corruption file {arr_path} not found")
    images = np.load(arr_path).astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    labels = np.load(root / "labels.npy").astype(np.int64)
    if severity is not None:
        per = images.shape[0] // 5
        sl = slice((severity - 1) * per, severity * per)
        images, labels = images[sl], labels[sl]
    return ArrayDataset(images, labels)


def load_dataset(dataset_id, subset_size=None, seed=0, split="train", data_root=None,
                 **synthetic_kw) -> ArrayDataset:
    """Load a dataset split with deterministic subsetting.

    dataset_id 'synthetic' generates shapes procedurally (train and test use
    disjoint seeds); 'cifar10' / 'gtsrb' read files from data_root or
    $ATTROBUST_DATA_ROOT.
    """
    if dataset_id == "synthetic":
        n = subset_size or (10000 if split == "train" else 2000)
        return make_synthetic_shapes(n, seed=spawn_seed(seed, "synthetic", split),
                                     **synthetic_kw)
    if dataset_id == "cifar10":
        ds = _load_cifar10(split, data_root)
    elif dataset_id == "gtsrb":
        ds = _load_gtsrb(split, data_root)
    else:
        raise ValueError(f"unknown dataset {dataset_id!r}")
    return ds.subset(subset_indices(len(ds), subset_size, seed))


def normalization_for(dataset_id):
    if dataset_id == "cifar10":
        return CIFAR10_MEAN, CIFAR10_STD
    return SYNTHETIC_MEAN, SYNTHETIC_STD


def balance_by_augmentation(ds: ArrayDataset, seed=0, target_per_class=None) -> ArrayDataset:
    """Equalize class counts by replicating samples with small random
    rotation / translation jitter (the class-balancing recipe for skewed
    datasets such as traffic signs).  Config-gated by the caller."""
    import scipy.ndimage

    rng = np.random.default_rng(spawn_seed(seed, "balance"))
    counts = np.bincount(ds.labels, minlength=int(ds.labels.max()) + 1)
    present = np.flatnonzero(counts)
    target = target_per_class or int(counts[present].max())
    extra_images, extra_labels = [], []
    for cls in present:
        idx = np.flatnonzero(ds.labels == cls)
        need = target - idx.size
        for _ in range(need):
            src = ds.images[rng.choice(idx)]
            angle = rng.uniform(-10, 10)
            shift = rng.uniform(-2, 2, size=2)
            out = scipy.ndimage.rotate(src, angle, axes=(1, 2), reshape=False, order=1,
                                       mode="nearest")
            out = scipy.ndimage.shift(out, (0, shift[0], shift[1]), order=1, mode="nearest")
            extra_images.append(np.clip(out, 0.0, 1.0).astype(np.float32))
            extra_labels.append(cls)
    if not extra_images:
        return ds
    images = np.concatenate([ds.images, np.stack(extra_images)])
    labels = np.concatenate([ds.labels, np.asarray(extra_labels, dtype=np.int64)])
    return ArrayDataset(images, labels, None, ds.class_names)


def export_wsol_fixture(out_dir, n=40, seed=0, image_size=32, **kw):
    """Write a synthetic localization fixture: PNG images, binary mask PNGs,
    and a manifest CSV (image,label,x_min,y_min,x_max,y_max,mask)."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    kw.setdefault("min_size", 12)
    ds = make_synthetic_shapes(n, seed=seed, image_size=image_size, **kw)
    rows = ["image,label,x_min,y_min,x_max,y_max,mask"]
    for i in range(n):
        img = (ds.images[i].transpose(1, 2, 0) * 255).round().astype(np.uint8)
        img_path = out / "images" / f"{i:04d}.png"
        Image.fromarray(img).save(img_path)
        x0, y0, x1, y1 = ds.boxes[i]
        gray = ds.images[i].mean(axis=0)
        mask = np.zeros_like(gray, dtype=np.uint8)
        mask[y0:y1 + 1, x0:x1 + 1] = (gray[y0:y1 + 1, x0:x1 + 1] > 0.4) * 255
        mask_path = out / "masks" / f"{i:04d}.png"
        Image.fromarray(mask, mode="L").save(mask_path)
        rows.append(f"images/{i:04d}.png,{ds.labels[i]},{x0},{y0},{x1},{y1},masks/{i:04d}.png")
    manifest = out / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest
