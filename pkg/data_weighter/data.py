"""
Image datasets: IDX ingestion, mixed-domain splits, synthetic domains and rotations.
"""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .errors import ConfigurationError, ContractError, FormatError

LOGGER = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_EXTENT_LIMIT = 1 << 31

# <data-dir>/<domain>/<file>, optionally gzipped
IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

SYNTHETIC_DOMAINS = ("bars", "discs", "dots")


@dataclass(frozen=True)
class ImageSet:
    """
    Images in [0, 1] with optional class labels and domain tags.

    origin holds each image's index in the pool it was drawn from, so splits
    can be checked for overlap.
    """
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    domain_tags: Optional[np.ndarray] = None
    origin: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 3:
            raise ContractError(f"images must be an N x H x W array, got shape {images.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ContractError("pixel values must lie within [0, 1]")
        object.__setattr__(self, "images", images)
        n = images.shape[0]
        for name in ("labels", "domain_tags", "origin"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value)
                if value.shape != (n,):
                    raise ContractError(f"{name} has {value.shape[0] if value.ndim else 0} entries for {n} images")
                object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, indices) -> "ImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        pick = lambda v: None if v is None else v[indices]
        return ImageSet(self.images[indices], pick(self.labels), pick(self.domain_tags), pick(self.origin))

    def with_domain(self, name: str) -> "ImageSet":
        tags = np.full(len(self), name, dtype=object)
        origin = self.origin if self.origin is not None else np.arange(len(self))
        return ImageSet(self.images, self.labels, tags, origin)

    @staticmethod
    def concat(sets: Sequence["ImageSet"]) -> "ImageSet":
        sets = list(sets)
        if not sets:
            raise ContractError("cannot concatenate an empty list of image sets")

        def join(name):
            values = [getattr(s, name) for s in sets]
            if any(v is None for v in values):
                return None
            return np.concatenate(values)

        shapes = {s.images.shape[1:] for s in sets if len(s)}
        if len(shapes) > 1:
            raise ContractError(f"image shapes differ: {sorted(shapes)}")
        images = np.concatenate([s.images for s in sets]) if sets else np.zeros((0, 0, 0))
        return ImageSet(images, join("labels"), join("domain_tags"), join("origin"))


@dataclass(frozen=True)
class Domain:
    """Train and test pools of one image domain."""
    name: str
    train: ImageSet
    test: ImageSet


@dataclass(frozen=True)
class SplitSpec:
    """
    Sizes of the target and source splits.

    source_caps maps domain name to the maximum number of its training images
    placed in the source set (None or a missing key means no cap).
    target_val images are held out of the target training pool for model
    selection.
    """
    target: str
    target_train: int
    target_test: int
    source_caps: Optional[Mapping[str, Optional[int]]] = None
    seed: int = 0
    target_val: int = 0

    def cap(self, name: str) -> Optional[int]:
        if not self.source_caps:
            return None
        return self.source_caps.get(name)


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


def load_idx(path: Union[str, Path]) -> Union[ImageSet, np.ndarray]:
    """
    Parse an unsigned-byte IDX file.

    Args:
        path: IDX file, read through gzip when the name ends in .gz.

    Returns:
        An ImageSet scaled to [0, 1] for 3-D image files, or an int64 array
        for 1-D label files.

    Raises:
        FormatError: On an unknown magic, a truncated header or payload, or an
            extent too large to address. The error carries the byte offset.
    """
    raw = _read_bytes(Path(path))
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"{path}: unknown IDX magic 0x{magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_end])
    count = 1
    for i, extent in enumerate(dims):
        if extent >= IDX_EXTENT_LIMIT:
            raise FormatError(f"{path}: extent {extent} overflows", offset=4 + 4 * i)
        count *= extent
    payload = len(raw) - header_end
    if payload < count:
        raise FormatError(f"{path}: truncated payload, expected {count} bytes but found {payload}",
                          offset=len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end)
    if ndim == 1:
        return data.astype(np.int64)
    images = data.reshape(dims).astype(np.float64) / 255.0
    LOGGER.debug("Loaded %d images of %dx%d from %s", dims[0], dims[1], dims[2], path)
    return ImageSet(images)


def load_idx_images(path: Union[str, Path]) -> ImageSet:
    """Load an IDX image file, rejecting label files with a FormatError."""
    result = load_idx(path)
    if not isinstance(result, ImageSet):
        raise FormatError(f"{path}: expected an image file (magic 0x{IDX_IMAGES_MAGIC:08x})", offset=0)
    return result


def load_idx_labels(path: Union[str, Path]) -> np.ndarray:
    """Load an IDX label file, rejecting image files with a FormatError."""
    result = load_idx(path)
    if isinstance(result, ImageSet):
        raise FormatError(f"{path}: expected a label file (magic 0x{IDX_LABELS_MAGIC:08x})", offset=0)
    return result


def write_idx(path: Union[str, Path], values: np.ndarray) -> Path:
    """Write a uint8 array (1-D labels or 3-D images) as an IDX file."""
    values = np.asarray(values)
    if values.dtype != np.uint8:
        if values.dtype.kind == "f":
            values = np.rint(np.asarray(values) * 255.0).astype(np.uint8)
        else:
            values = values.astype(np.uint8)
    if values.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif values.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ContractError(f"IDX writer supports 1-D labels or 3-D images, got {values.ndim}-D")
    header = struct.pack(">I" + "I" * values.ndim, magic, *values.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(values).tobytes())
    return path


def _find_idx(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"IDX file '{stem}' not found in '{directory}'")


def load_domain(data_dir: Union[str, Path], name: str) -> Domain:
    """
    Read the standard MNIST-family train/test files of one domain.

    Args:
        data_dir: Directory holding one sub-directory per domain.
        name: Domain name, also used as the domain tag of every image.

    Returns:
        Domain with labelled train and test pools.

    Raises:
        FileNotFoundError: If the domain directory or one of its files is missing.
        FormatError: If a file is malformed or images and labels disagree in count.
    """
    directory = Path(data_dir).expanduser() / name
    if not directory.is_dir():
        raise FileNotFoundError(f"The domain directory '{directory}' does not exist")
    sets = {}
    for split in ("train", "test"):
        images = load_idx_images(_find_idx(directory, IDX_FILES[f"{split}_images"]))
        labels = load_idx_labels(_find_idx(directory, IDX_FILES[f"{split}_labels"]))
        if labels.shape[0] != len(images):
            raise FormatError(f"{directory}: {len(images)} {split} images but {labels.shape[0]} labels")
        sets[split] = ImageSet(images.images, labels).with_domain(name)
    LOGGER.info("Loaded domain %s: %d train, %d test images", name, len(sets["train"]), len(sets["test"]))
    return Domain(name, sets["train"], sets["test"])


# ---------------------------------------------------------------------------
# Splits


class MixedSplits(NamedTuple):
    source: ImageSet
    target_train: ImageSet
    target_test: ImageSet
    target_val: ImageSet


def build_mixed_source(domains: Sequence[Domain], spec: SplitSpec,
                       rng) -> Tuple[ImageSet, ImageSet, ImageSet]:
    """
    Split domains into (source, target_train, target_test).

    The target train set is a seeded sample of the target's training pool, the
    target test set a seeded sample of its test pool. The source set is the
    rest of the target training pool plus the other domains' training pools,
    each truncated to its cap after shuffling.

    Args:
        domains: Domains holding train and test pools; one must be spec.target.
        spec: Split sizes and per-domain source caps.
        rng: RandomStream driving every shuffle.

    Returns:
        Tuple of (source, target_train, target_test) image sets, pairwise
        disjoint, with domain tags and pool origins preserved.

    Raises:
        ConfigurationError: If the target is unknown or a size is infeasible.
    """
    source, target_train, target_test, _ = build_mixed_splits(domains, spec, rng)
    return source, target_train, target_test


def build_mixed_splits(domains: Sequence[Domain], spec: SplitSpec, rng) -> MixedSplits:
    """
    Like build_mixed_source, also holding out spec.target_val validation images.

    The validation rows are taken from the same shuffled target training
    pool, right after the target train rows; with target_val=0 the draws and
    splits equal those of build_mixed_source.
    """
    by_name = {d.name: d for d in domains}
    if spec.target not in by_name:
        raise ConfigurationError(f"target domain '{spec.target}' not among {sorted(by_name)}")
    target = by_name[spec.target]
    if spec.target_train < 0 or spec.target_test < 0 or spec.target_val < 0:
        raise ConfigurationError("split sizes must be non-negative")
    held = spec.target_train + spec.target_val
    if held > len(target.train):
        raise ConfigurationError(
            f"target train and validation sizes {spec.target_train} + {spec.target_val} exceed the "
            f"{len(target.train)} training images of '{target.name}'")
    if spec.target_test > len(target.test):
        raise ConfigurationError(
            f"target test size {spec.target_test} exceeds the {len(target.test)} test images of '{target.name}'")

    order = rng.permutation(len(target.train))
    target_train = target.train.subset(np.sort(order[:spec.target_train]))
    target_val = target.train.subset(np.sort(order[spec.target_train:held]))
    leftover = np.sort(order[held:])
    test_order = rng.permutation(len(target.test))
    target_test = target.test.subset(np.sort(test_order[:spec.target_test]))

    parts = []
    for domain in domains:
        if domain.name == target.name:
            pool = target.train.subset(leftover)
        else:
            pool = domain.train
        cap = spec.cap(domain.name)
        if cap is not None:
            if cap < 0:
                raise ConfigurationError(f"source cap for '{domain.name}' must be non-negative")
            if cap < len(pool):
                pool = pool.subset(np.sort(rng.permutation(len(pool))[:cap]))
        parts.append(pool)
    source = ImageSet.concat(parts)
    LOGGER.info("Split for target %s: %d source, %d target train, %d target val, %d target test",
                target.name, len(source), len(target_train), len(target_val), len(target_test))
    return MixedSplits(source, target_train, target_test, target_val)


# ---------------------------------------------------------------------------
# Synthetic domains


def _draw_bar(canvas: np.ndarray, rng, label: int, margin: int) -> None:
    size = canvas.shape[0]
    half = size // 2
    length = int(rng.integers(max(2, size // 4), max(3, size * 2 // 3)))
    angle = rng.uniform() * np.pi
    cy = (label // 2) * half + half // 2
    cx = (label % 2) * half + half // 2
    dx = int(round(0.5 * length * np.cos(angle)))
    dy = int(round(0.5 * length * np.sin(angle)))
    lo, hi = margin, size - 1 - margin
    p1 = (int(np.clip(cx - dx, lo, hi)), int(np.clip(cy - dy, lo, hi)))
    p2 = (int(np.clip(cx + dx, lo, hi)), int(np.clip(cy + dy, lo, hi)))
    cv2.line(canvas, p1, p2, color=1.0, thickness=max(1, size // 14))


def _draw_disc(canvas: np.ndarray, rng, label: int, margin: int) -> None:
    size = canvas.shape[0]
    half = size // 2
    radius = int(rng.integers(max(1, size // 7), max(1, size * 3 // 14) + 1))
    cy = (label // 2) * half + half // 2
    cx = (label % 2) * half + half // 2
    lo, hi = margin + radius, size - 1 - margin - radius
    center = (int(np.clip(cx, lo, max(lo, hi))), int(np.clip(cy, lo, max(lo, hi))))
    cv2.circle(canvas, center, radius, color=1.0, thickness=-1)


def _draw_dots(canvas: np.ndarray, rng, label: int, margin: int) -> None:
    size = canvas.shape[0]
    n_dots = max(4, size * size // 8)
    ys = rng.integers(0, size, n_dots)
    xs = rng.integers(0, size, n_dots)
    canvas[ys, xs] = 0.3 + 0.3 * rng.uniform(n_dots)
    # denser quadrant encodes the class
    half = size // 2
    extra = max(2, n_dots // 2)
    ys = rng.integers(0, half, extra) + (label // 2) * half
    xs = rng.integers(0, half, extra) + (label % 2) * half
    canvas[ys, xs] = 0.6


_PAINTERS = {"bars": _draw_bar, "discs": _draw_disc, "dots": _draw_dots}


def synth_domains(rng, n: int, size: int = 28, n_classes: int = 4) -> List[ImageSet]:
    """
    Three visually separable image families: thin bars, filled discs, dot textures.

    Bars and discs stay inside a blank border while dot textures cover the
    whole canvas. Labels give the quadrant holding the shape (or the denser
    dots), so each family can also serve as a labelled target.
    """
    if n < 1:
        raise ConfigurationError(f"need at least one image per domain, got {n}")
    if size < 6:
        raise ConfigurationError(f"synthetic images must be at least 6 pixels wide, got {size}")
    margin = max(1, size // 7)
    sets = []
    for name in SYNTHETIC_DOMAINS:
        paint = _PAINTERS[name]
        images = np.zeros((n, size, size), dtype=np.float64)
        labels = rng.integers(0, n_classes, n)
        for i in range(n):
            paint(images[i], rng, int(labels[i]), margin)
        np.clip(images, 0.0, 1.0, out=images)
        sets.append(ImageSet(images, labels.astype(np.int64)).with_domain(name))
    return sets


def synth_domain_pools(rng, n_train: int, n_test: int, size: int = 28) -> List[Domain]:
    """Synthetic domains with separate train and test pools."""
    train = synth_domains(rng.child(101), n_train, size)
    test = synth_domains(rng.child(102), n_test, size)
    return [Domain(name, tr, te) for name, tr, te in zip(SYNTHETIC_DOMAINS, train, test)]


# ---------------------------------------------------------------------------
# Rotations


def rotate_image(img: np.ndarray, r: int) -> np.ndarray:
    """Rotate a square image by r * 90 degrees counter-clockwise."""
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ContractError(f"rotation needs a square image, got shape {img.shape}")
    if int(r) not in range(4):
        raise ContractError(f"rotation index must be 0..3, got {r}")
    return np.ascontiguousarray(np.rot90(img, k=int(r)))
