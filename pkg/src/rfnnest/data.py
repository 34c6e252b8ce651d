"""Corpus ingestion, deterministic batching and the synthetic fixture generator."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import CorpusError, InputError
from .images import list_images, read_gray, write_gray


@dataclass
class ImagePair:
    ir: np.ndarray
    vi: np.ndarray
    id: str

    def __post_init__(self):
        if self.ir.shape != self.vi.shape:
            raise InputError(f"pair {self.id}: infrared {self.ir.shape} and visible {self.vi.shape} differ in size")


@dataclass
class Dataset:
    mode: str
    ids: list[str]
    images: list[np.ndarray] | None = None
    pairs: list[ImagePair] | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_images(cls, images: Sequence[np.ndarray], ids: Sequence[str] | None = None) -> "Dataset":
        ids = list(ids) if ids is not None else [f"img{i:04d}" for i in range(len(images))]
        return cls("single", ids, images=[np.asarray(im, dtype=np.float64) for im in images])

    @classmethod
    def from_pairs(cls, pairs: Sequence[ImagePair]) -> "Dataset":
        return cls("paired", [p.id for p in pairs], pairs=list(pairs))

    def batch(self, idx: Sequence[int], dtype=np.float64):
        """Stack items into (B,1,H,W) arrays: one array in single mode, (ir, vi) in paired mode."""
        if self.mode == "single":
            return np.stack([self.images[i] for i in idx])[:, None].astype(dtype)
        ir = np.stack([self.pairs[i].ir for i in idx])[:, None].astype(dtype)
        vi = np.stack([self.pairs[i].vi for i in idx])[:, None].astype(dtype)
        return ir, vi


def load_corpus(root: str | Path, mode: str = "single", image_size: int | None = 64) -> Dataset:
    """Read ``root/*.png|pgm`` (single) or matching stems under ``root/ir`` and ``root/vi`` (paired)."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus directory does not exist: {root}")
    if mode == "single":
        files = list_images(root)
        return Dataset.from_images([read_gray(f, image_size) for f in files], [f.stem for f in files])
    if mode != "paired":
        raise InputError(f"corpus mode must be 'single' or 'paired', got {mode!r}")
    ir_dir, vi_dir = root / "ir", root / "vi"
    for d in (ir_dir, vi_dir):
        if not d.is_dir():
            raise CorpusError(f"paired corpus is missing the {d.name}/ subdirectory: {d}")
    ir_files = {f.stem: f for f in list_images(ir_dir)}
    vi_files = {f.stem: f for f in list_images(vi_dir)}
    orphans = sorted(str(ir_files[s]) for s in ir_files.keys() - vi_files.keys())
    orphans += sorted(str(vi_files[s]) for s in vi_files.keys() - ir_files.keys())
    if orphans:
        raise CorpusError("unpaired files: " + ", ".join(orphans))
    pairs = [
        ImagePair(read_gray(ir_files[s], image_size), read_gray(vi_files[s], image_size), s)
        for s in sorted(ir_files)
    ]
    return Dataset.from_pairs(pairs)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of ``range(n)`` for one epoch; reshuffled each epoch with ``seed + epoch``."""
    return np.random.default_rng(seed + epoch).permutation(n)


def iter_batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def step_batches(n: int, batch_size: int, seed: int, steps: int) -> Iterator[tuple[int, np.ndarray]]:
    """(epoch, indices) for exactly ``steps`` batches, cycling through epochs as needed."""
    if n == 0:
        raise CorpusError("dataset is empty")
    done, epoch = 0, 0
    while done < steps:
        for idx in iter_batches(n, batch_size, seed, epoch):
            if done == steps:
                return
            yield epoch, idx
            done += 1
        epoch += 1


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------
def _shape_masks(rng: np.random.Generator, size: int, count: int) -> list[np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size] / size
    masks = []
    for _ in range(count):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        ry, rx = rng.uniform(0.06, 0.22, 2)
        if rng.random() < 0.5:
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        masks.append(m)
    return masks


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    return rng.uniform(0.2, 0.5) + rng.uniform(0.1, 0.3) * (ramp - ramp.mean())


def synthetic_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Gradient background, a few flat shapes, smooth blotches and light pixel noise."""
    img = _background(rng, size)
    for m in _shape_masks(rng, size, int(rng.integers(2, 5))):
        img = np.where(m, rng.uniform(0.0, 1.0), img)
    img += 0.15 * gaussian_filter(rng.normal(size=(size, size)), 3.0)
    img += 0.02 * rng.normal(size=(size, size))
    return np.clip(gaussian_filter(img, 0.6), 0.0, 1.0)


def synthetic_pair(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Registered (ir, vi) pair sharing scene geometry.

    The visible image carries texture and mid-gray objects; the infrared image
    has a dark smooth background with a few bright (hot) targets.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    masks = _shape_masks(rng, size, int(rng.integers(3, 6)))
    hot = rng.random(len(masks)) < 0.5
    hot[0] = True
    freq = rng.uniform(6, 14)
    texture = 0.08 * np.sin(2 * np.pi * freq * (xx + 0.3 * yy) + rng.uniform(0, 2 * np.pi))
    vi = _background(rng, size) + texture + 0.12 * gaussian_filter(rng.normal(size=(size, size)), 1.5)
    ir = 0.15 + 0.05 * gaussian_filter(rng.normal(size=(size, size)), 4.0) + 0.1 * (1 - yy)
    for m, is_hot in zip(masks, hot):
        vi = np.where(m, rng.uniform(0.25, 0.75) + texture, vi)
        if is_hot:
            ir = np.where(m, rng.uniform(0.75, 0.95), ir)
    vi += 0.02 * rng.normal(size=(size, size))
    ir = gaussian_filter(ir, 1.0) + 0.01 * rng.normal(size=(size, size))
    return np.clip(ir, 0.0, 1.0), np.clip(gaussian_filter(vi, 0.5), 0.0, 1.0)


def synthetic_images(n: int, size: int = 64, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset.from_images([synthetic_image(rng, size) for _ in range(n)], [f"syn{i:04d}" for i in range(n)])


def synthetic_pairs(n: int, size: int = 64, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        ir, vi = synthetic_pair(rng, size)
        pairs.append(ImagePair(ir, vi, f"pair{i:04d}"))
    return Dataset.from_pairs(pairs)


def write_corpus(ds: Dataset, root: str | Path, suffix: str = ".png") -> Path:
    """Persist a dataset in the on-disk corpus layout read by :func:`load_corpus`."""
    root = Path(root)
    if ds.mode == "single":
        for i, img in zip(ds.ids, ds.images):
            write_gray(root / f"{i}{suffix}", img)
    else:
        for p in ds.pairs:
            write_gray(root / "ir" / f"{p.id}{suffix}", p.ir)
            write_gray(root / "vi" / f"{p.id}{suffix}", p.vi)
    return root
