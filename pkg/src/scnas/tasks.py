"""Synthetic volumetric segmentation tasks, preprocessing and patch inference."""

from __future__ import annotations

import itertools
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

GENERATORS = ("blobs", "nested-shells", "multi-class-bodies")
VOLUME_MAGIC = b"SCNVOL1"
MANIFEST_HEADER = "scnvol-manifest v1"


@dataclass
class SegmentationSample:
    image: np.ndarray  # float32, channels x spatial
    label: np.ndarray  # uint8, spatial
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and label {self.label.shape} disagree")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "blobs"
    size: tuple[int, ...] = (16, 16)
    channels: int = 1
    num_classes: int = 1  # foreground classes
    noise: float = 0.3
    n_train: int = 20
    n_val: int = 4
    n_test: int = 8
    seed: int = 0
    radius: tuple[float, float] = (0.2, 0.35)  # fraction of the smallest extent
    name: str = ""

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown generator {self.kind!r}; choose from {GENERATORS}")
        if self.channels < 1 or self.num_classes < 1:
            raise ValueError("channels and num_classes must be >= 1")
        lo, hi = self.radius
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius}")
        if hi >= 0.5:
            raise ValueError(f"foreground radius fraction {hi} does not fit in the volume")
        if self.kind == "multi-class-bodies" and self.num_classes * (2 * hi) ** len(self.size) > 1.0:
            raise ValueError("foreground bodies larger than the volume")
        if self.kind == "nested-shells" and self.num_classes > 3:
            raise ValueError("nested-shells supports at most 3 foreground classes")


@dataclass
class TaskData:
    spec: TaskSpec
    train: list[SegmentationSample] = field(default_factory=list)
    val: list[SegmentationSample] = field(default_factory=list)
    test: list[SegmentationSample] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes + 1


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij")
    r = sum(((g - c) / rad) ** 2 for g, c, rad in zip(grids, center, radii))
    return r <= 1.0


def _random_body(rng, shape, radius, margin=0.0):
    m = min(shape)
    radii = [rng.uniform(*radius) * m for _ in shape]
    center = [rng.uniform(r + margin, s - 1 - r - margin) for r, s in zip(radii, shape)]
    return center, radii


def _geometry(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    shape = tuple(spec.size)
    label = np.zeros(shape, dtype=np.uint8)
    if spec.kind == "blobs":
        center, radii = _random_body(rng, shape, spec.radius)
        label[_ellipsoid(shape, center, radii)] = 1
        for c in range(2, spec.num_classes + 1):
            center, radii = _random_body(rng, shape, spec.radius)
            label[_ellipsoid(shape, center, radii) & (label == 0)] = c
    elif spec.kind == "nested-shells":
        center, radii = _random_body(rng, shape, spec.radius)
        k = spec.num_classes
        for level in range(k):
            frac = 1.0 - level / k
            label[_ellipsoid(shape, center, [r * frac for r in radii])] = level + 1
    else:
        for c in range(1, spec.num_classes + 1):
            for _ in range(20):
                center, radii = _random_body(rng, shape, spec.radius)
                body = _ellipsoid(shape, center, radii)
                if not np.any(body & (label > 0)):
                    break
            label[body & (label == 0)] = c
    return label


def _render(spec: TaskSpec, label: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-channel class contrasts, offsets and additive Gaussian noise."""
    img = np.empty((spec.channels,) + label.shape, dtype=np.float64)
    for ch in range(spec.channels):
        offset = rng.uniform(-0.5, 0.5)
        contrasts = rng.uniform(0.8, 1.5, size=spec.num_classes + 1)
        contrasts[0] = 0.0
        img[ch] = offset + np.sort(contrasts)[label] if ch % 2 == 0 else offset + contrasts[label]
        if spec.noise > 0:
            img[ch] += spec.noise * rng.standard_normal(label.shape)
    return img.astype(np.float32)


def generate(spec: TaskSpec) -> TaskData:
    """Deterministically generate train/val/test samples from ``spec.seed``."""
    root = np.random.SeedSequence(spec.seed)
    name = spec.name or spec.kind
    data = TaskData(spec)
    for split, n, child in zip(("train", "val", "test"), (spec.n_train, spec.n_val, spec.n_test), root.spawn(3)):
        for i, ss in enumerate(child.spawn(n)):
            rng = np.random.default_rng(ss)
            label = _geometry(spec, rng)
            image = _render(spec, label, rng)
            getattr(data, split).append(SegmentationSample(image, label, f"{name}-{spec.seed}-{split}-{i:04d}"))
    return data


def z_normalize(sample: SegmentationSample) -> SegmentationSample:
    """Zero mean, unit variance per channel; constant channels become zeros."""
    img = sample.image.astype(np.float64)
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        ch = img[c]
        if ch.size < 2:
            raise ValueError("z-normalization needs more than one voxel per channel")
        sd = ch.std()
        if sd == 0 or not np.isfinite(sd):
            warnings.warn(f"{sample.id}: channel {c} is constant; set to zeros", RuntimeWarning, stacklevel=2)
            out[c] = 0.0
        else:
            out[c] = (ch - ch.mean()) / sd
    return SegmentationSample(out.astype(sample.image.dtype), sample.label.copy(), sample.id)


def nonzero_bbox(image: np.ndarray) -> tuple[tuple[int, int], ...] | None:
    """Inclusive per-dim bounds of voxels nonzero in any channel."""
    mask = np.any(image != 0, axis=0)
    if not mask.any():
        return None
    bounds = []
    for ax in range(mask.ndim):
        other = tuple(a for a in range(mask.ndim) if a != ax)
        idx = np.flatnonzero(mask.any(axis=other))
        bounds.append((int(idx[0]), int(idx[-1])))
    return tuple(bounds)


def crop_windows(shape: Sequence[int], patch: Sequence[int], bbox) -> list[tuple[int, int]]:
    """Per-dim inclusive ranges of window starts whose window meets ``bbox``."""
    ranges = []
    for s, p, (b0, b1) in zip(shape, patch, bbox):
        ranges.append((max(0, b0 - p + 1), min(s - p, b1)))
    return ranges


def crop_patch(sample: SegmentationSample, patch: Sequence[int], rng: np.random.Generator) -> SegmentationSample:
    """Random crop whose window intersects the bounding box of nonzero voxels."""
    shape = sample.label.shape
    patch = tuple(patch)
    if len(patch) != len(shape) or any(p > s for p, s in zip(patch, shape)):
        raise ValueError(f"patch {patch} does not fit volume {shape}")
    bbox = nonzero_bbox(sample.image)
    if bbox is None:
        warnings.warn(f"{sample.id}: image is all zero; cropping uniformly", RuntimeWarning, stacklevel=2)
        bbox = tuple((0, s - 1) for s in shape)
    starts = [int(rng.integers(lo, hi + 1)) for lo, hi in crop_windows(shape, patch, bbox)]
    sl = tuple(slice(a, a + p) for a, p in zip(starts, patch))
    return SegmentationSample(sample.image[(slice(None),) + sl].copy(), sample.label[sl].copy(), sample.id)


def window_starts(size: int, patch: int) -> list[int]:
    """Starts strided by ``patch // 2`` with the last window clamped to the end."""
    if patch > size:
        raise ValueError(f"patch {patch} larger than image extent {size}")
    step = max(1, patch // 2)
    starts = list(range(0, size - patch + 1, step))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_window_logits(predict: Callable[[np.ndarray], np.ndarray], image: np.ndarray,
                          patch: Sequence[int]) -> np.ndarray:
    """Average per-voxel logits over half-overlapping windows.

    ``predict`` maps a ``(1, C, *patch)`` array to ``(1, K, *patch)`` logits.
    """
    spatial = image.shape[1:]
    patch = tuple(patch)
    if len(patch) != len(spatial):
        raise ValueError("patch rank does not match image")
    if any(p % 2 for p in patch):
        raise ValueError(f"patch extents must be even, got {patch}")
    if any(p > s for p, s in zip(patch, spatial)):
        raise ValueError(f"image {spatial} smaller than patch {patch}")
    acc = None
    count = np.zeros(spatial, dtype=np.int64)
    for start in itertools.product(*[window_starts(s, p) for s, p in zip(spatial, patch)]):
        sl = tuple(slice(a, a + p) for a, p in zip(start, patch))
        logits = np.asarray(predict(image[(slice(None),) + sl][None]), dtype=np.float64)[0]
        if acc is None:
            acc = np.zeros((logits.shape[0],) + tuple(spatial), dtype=np.float64)
        acc[(slice(None),) + sl] += logits
        count[sl] += 1
    return acc / count


def sliding_window_infer(predict: Callable[[np.ndarray], np.ndarray], image: np.ndarray,
                         patch: Sequence[int]) -> np.ndarray:
    """Class map from window-averaged logits (ties go to the lowest class)."""
    return np.argmax(sliding_window_logits(predict, image, patch), axis=0).astype(np.uint8)


def coverage_counts(spatial: Sequence[int], patch: Sequence[int]) -> np.ndarray:
    count = np.zeros(tuple(spatial), dtype=np.int64)
    for start in itertools.product(*[window_starts(s, p) for s, p in zip(spatial, patch)]):
        count[tuple(slice(a, a + p) for a, p in zip(start, patch))] += 1
    return count


def search_split(samples: Sequence[SegmentationSample], ratio: int = 4):
    """Split into (weights part, architecture part) at ``ratio``:1."""
    n = len(samples)
    n_arch = max(1, int(round(n / (ratio + 1))))
    if n - n_arch < 1:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    return list(samples[: n - n_arch]), list(samples[n - n_arch :])


# ---------------------------------------------------------------------------
# persistence


def write_volume(path, sample: SegmentationSample) -> None:
    image = np.ascontiguousarray(sample.image, dtype="<f4")
    label = np.ascontiguousarray(sample.label, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<q", image.ndim))
        fh.write(struct.pack(f"<{image.ndim}q", *image.shape))
        fh.write(image.tobytes(order="C"))
        fh.write(label.tobytes(order="C"))


def read_volume(path, sample_id: str = "") -> SegmentationSample:
    raw = Path(path).read_bytes()
    if raw[: len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad magic")
    off = len(VOLUME_MAGIC)
    (ndim,) = struct.unpack_from("<q", raw, off)
    off += 8
    shape = struct.unpack_from(f"<{ndim}q", raw, off)
    off += 8 * ndim
    n_img = math.prod(shape)
    image = np.frombuffer(raw, dtype="<f4", count=n_img, offset=off).reshape(shape).astype(np.float32)
    off += 4 * n_img
    n_lab = math.prod(shape[1:])
    if len(raw) != off + n_lab:
        raise ValueError(f"{path}: truncated or oversized payload")
    label = np.frombuffer(raw, dtype=np.uint8, count=n_lab, offset=off).reshape(shape[1:]).copy()
    return SegmentationSample(image, label, sample_id or Path(path).stem)


def write_task(directory, data: TaskData) -> Path:
    """Write every sample plus a ``manifest.txt`` listing ``split id shape file``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for split in ("train", "val", "test"):
        for s in getattr(data, split):
            fname = f"{s.id}.vol"
            write_volume(d / fname, s)
            lines.append(f"{split} {s.id} {'x'.join(map(str, s.image.shape))} {fname}")
    manifest = d / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_task(directory) -> dict[str, list[SegmentationSample]]:
    d = Path(directory)
    lines = (d / "manifest.txt").read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{d}: bad manifest header")
    out: dict[str, list[SegmentationSample]] = {"train": [], "val": [], "test": []}
    for line in lines[1:]:
        split, sid, shape, fname = line.split()
        s = read_volume(d / fname, sid)
        if "x".join(map(str, s.image.shape)) != shape:
            raise ValueError(f"{fname}: shape {s.image.shape} disagrees with manifest {shape}")
        out[split].append(s)
    return out
