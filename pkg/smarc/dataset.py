"""
Dataset ingestion, the central-patch masking protocol, stratified splits and
class weights.

Layout on disk: root/<class_name>/*.png|jpg; class index = sorted class-name order.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from smarc.config import SplitSpec
from smarc.utils import find_images, log, num_workers

# ===================== CONFIG =====================
DEFAULT_FRACTION = 0.10
SPLIT_NAMES = ("train", "val", "test")


# ===================== Types =====================

@dataclass
class Sample:
    image: np.ndarray  # S x S x 3 in [0, 1]
    mask: np.ndarray  # S x S x 1 binary
    label: int
    source_path: str

    @property
    def masked(self) -> np.ndarray:
        return apply_mask(self.image, self.mask)


@dataclass
class Dataset:
    images: np.ndarray  # N x S x S x 3, float32
    masks: np.ndarray  # N x S x S x 1, float32
    labels: np.ndarray  # N, int64
    paths: List[str]
    class_names: List[str]

    def __post_init__(self):
        n = len(self.labels)
        if self.images.shape[0] != n or self.masks.shape[0] != n or len(self.paths) != n:
            raise ValueError(
                f"Dataset fields disagree: images {self.images.shape}, masks {self.masks.shape}, "
                f"labels {len(self.labels)}, paths {len(self.paths)}"
            )

    def __len__(self) -> int:
        return int(len(self.labels))

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], int(self.labels[i]), self.paths[i])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[idx],
            self.masks[idx],
            self.labels[idx],
            [self.paths[i] for i in idx],
            list(self.class_names),
        )

    def with_mask(self, mask: np.ndarray) -> "Dataset":
        """Same images, every sample given `mask` (S x S x 1)."""
        masks = np.broadcast_to(mask, (len(self),) + mask.shape).astype(np.float32)
        return Dataset(self.images, masks, self.labels, list(self.paths), list(self.class_names))


# ===================== Masking =====================

def central_mask(size: int, visible_fraction: float = DEFAULT_FRACTION) -> np.ndarray:
    """
    size x size x 1 mask with one centered visible square of side
    floor(size * sqrt(fraction) + 0.5), offset floor((size - side) / 2).
    """
    if size < 4:
        raise ValueError(f"central_mask size must be >= 4, got {size}")
    if not 0.0 < visible_fraction <= 1.0:
        raise ValueError(f"visible_fraction must be in (0, 1], got {visible_fraction}")
    side = max(1, min(size, int(math.floor(size * math.sqrt(visible_fraction) + 0.5))))
    off = (size - side) // 2
    mask = np.zeros((size, size, 1), dtype=np.float32)
    mask[off:off + side, off:off + side, 0] = 1.0
    return mask


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero every pixel where mask is 0; the original image stays untouched."""
    if image.shape[:-1] != mask.shape[:-1]:
        raise ValueError(f"apply_mask shape mismatch: image {image.shape} vs mask {mask.shape}")
    return (image * mask).astype(image.dtype, copy=False)


# ===================== Loading =====================

def load_image(path: str | Path, size: Optional[int] = None) -> np.ndarray:
    """Decode to RGB float32 in [0, 1]; bilinear resize to size x size when given."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return arr / np.float32(255.0)


def save_image(arr: np.ndarray, path: str | Path) -> Path:
    """Write an H x W x 3 (or H x W x 1) array in [0, 1] as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    a = np.round(a * 255.0).astype(np.uint8)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    Image.fromarray(a).save(path)
    return path


def list_classes(root: str | Path) -> List[str]:
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"Dataset root not found: {root.resolve()}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not classes:
        raise ValueError(f"No class directories under {root.resolve()}")
    return classes


def load_image_folder(
    root: str | Path,
    size: int,
    visible_fraction: float = DEFAULT_FRACTION,
    verbose: bool = True,
) -> Tuple[Dataset, List[Tuple[str, str]]]:
    """
    Load root/<class>/*.png|jpg into a Dataset with the central mask applied.
    Undecodable files are skipped and returned as (path, error) pairs.
    """
    classes = list_classes(root)
    jobs: List[Tuple[Path, int]] = []
    for label, name in enumerate(classes):
        for p in find_images(Path(root) / name):
            jobs.append((p, label))
    if not jobs:
        raise ValueError(f"no images found under {Path(root).resolve()}")

    def _one(job):
        p, label = job
        try:
            return p, label, load_image(p, size), None
        except Exception as e:
            return p, label, None, f"{type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        results = list(pool.map(_one, jobs))

    images, labels, paths, failed = [], [], [], []
    for p, label, img, err in results:
        if err is not None:
            log("WARN", f"Skipping unreadable image {p}: {err}", verbose)
            failed.append((str(p), err))
            continue
        images.append(img)
        labels.append(label)
        paths.append(str(p))
    if not images:
        raise ValueError(f"no readable images under {Path(root).resolve()} ({len(failed)} failed)")

    mask = central_mask(size, visible_fraction)
    ds = Dataset(
        np.stack(images).astype(np.float32),
        np.broadcast_to(mask, (len(images),) + mask.shape).astype(np.float32),
        np.asarray(labels, dtype=np.int64),
        paths,
        classes,
    )
    counts = np.bincount(ds.labels, minlength=len(classes))
    log("load", f"{len(ds)} image(s), {len(classes)} class(es): " + ", ".join(f"{c}={n}" for c, n in zip(classes, counts)), verbose)
    return ds, failed


# ===================== Splitting =====================

def _largest_remainder(counts: np.ndarray, frac: float, total: int, capacity: np.ndarray) -> np.ndarray:
    """Per-class integer quotas of counts*frac that sum to `total`, never above capacity."""
    quota = counts * frac
    alloc = np.minimum(np.floor(quota).astype(np.int64), capacity)
    rest = quota - alloc
    # stable: larger fractional part first, then lower class index
    order = sorted(range(len(counts)), key=lambda c: (-rest[c], c))
    need = total - int(alloc.sum())
    while need > 0:
        moved = False
        for c in order:
            if need == 0:
                break
            if alloc[c] < capacity[c]:
                alloc[c] += 1
                need -= 1
                moved = True
        if not moved:
            break
    return alloc


def split_assignment(labels: Sequence[int], spec: SplitSpec, num_classes: Optional[int] = None) -> np.ndarray:
    """
    Per-sample split name ('train' | 'val' | 'test'). Val and test sizes are
    round(N * frac); the remainder goes to train.
    """
    spec.validate()
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    k = int(num_classes if num_classes is not None else (labels.max() + 1 if n else 0))
    n_val = int(math.floor(n * spec.val_frac + 0.5))
    n_test = int(math.floor(n * spec.test_frac + 0.5))
    if n_val + n_test > n:
        n_test = n - n_val
    rng = np.random.default_rng(spec.seed)
    out = np.empty(n, dtype=object)

    if not spec.stratified:
        perm = rng.permutation(n)
        n_train = n - n_val - n_test
        out[perm[:n_train]] = "train"
        out[perm[n_train:n_train + n_val]] = "val"
        out[perm[n_train + n_val:]] = "test"
        return out

    counts = np.bincount(labels, minlength=k)
    empty = [c for c in range(k) if counts[c] == 0]
    if empty:
        raise ValueError(f"Stratified split: class index(es) {empty} have no samples")
    val_c = _largest_remainder(counts, spec.val_frac, n_val, counts)
    test_c = _largest_remainder(counts, spec.test_frac, n_test, counts - val_c)
    for c in range(k):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = counts[c] - val_c[c] - test_c[c]
        out[idx[:n_tr]] = "train"
        out[idx[n_tr:n_tr + val_c[c]]] = "val"
        out[idx[n_tr + val_c[c]:]] = "test"
    return out


def split(dataset: Dataset, spec: SplitSpec, verbose: bool = False) -> Tuple[Dataset, Dataset, Dataset]:
    assign = split_assignment(dataset.labels, spec, dataset.num_classes)
    parts = tuple(dataset.subset(np.flatnonzero(assign == name)) for name in SPLIT_NAMES)
    log("split", " ".join(f"{name}={len(p)}" for name, p in zip(SPLIT_NAMES, parts)), verbose)
    return parts


def write_split_manifest(path: str | Path, dataset: Dataset, assignment: Sequence[str]) -> Path:
    """`path<TAB>split<TAB>label` lines, one per sample, in dataset order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({"path": dataset.paths, "split": list(assignment), "label": dataset.labels.astype(int)})
    df.to_csv(path, sep="\t", header=False, index=False, lineterminator="\n")
    return path


def read_split_manifest(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Split manifest not found: {path.resolve()}")
    df = pd.read_csv(path, sep="\t", header=None, names=["path", "split", "label"], dtype={"path": str, "split": str, "label": int})
    bad = sorted(set(df["split"]) - set(SPLIT_NAMES))
    if bad:
        raise ValueError(f"{path}: unknown split name(s) {bad}")
    return df


def subset_from_manifest(dataset: Dataset, manifest: pd.DataFrame, split_name: str) -> Dataset:
    """Pick the samples the manifest assigns to split_name, matched by path."""
    wanted = manifest.loc[manifest["split"] == split_name, "path"].tolist()
    index: Dict[str, int] = {p: i for i, p in enumerate(dataset.paths)}
    missing = [p for p in wanted if p not in index]
    if missing:
        raise ValueError(f"{len(missing)} manifest path(s) not in dataset, first: {missing[0]}")
    return dataset.subset([index[p] for p in wanted])


# ===================== Class weights =====================

def class_weights(labels: Sequence[int], num_classes: int) -> np.ndarray:
    """w_c = N / (K * n_c); a balanced set gives all ones."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    if len(counts) > num_classes:
        raise ValueError(f"labels reach {len(counts) - 1} but num_classes is {num_classes}")
    missing = [c for c in range(num_classes) if counts[c] == 0]
    if missing:
        raise ValueError(f"class_weights: class index(es) {missing} absent from labels")
    return (len(labels) / (num_classes * counts)).astype(np.float64)
