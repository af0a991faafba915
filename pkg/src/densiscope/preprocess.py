"""Data preparation: percentile normalization, slab extraction, resizing,
density computation, and patient-level splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ShapeError


@dataclass
class SliceRecord:
    """One prepared slice: normalized image plus its ground truth.

    Masks ride along (resized to the image grid) so downstream region
    statistics can partition the attribution maps; they are not inputs to
    the network.
    """

    image: np.ndarray
    density: float
    patient_id: int
    slice_index: int
    breast_mask: np.ndarray | None = None
    fgt_mask: np.ndarray | None = None


@dataclass
class Dataset:
    """A split-tagged collection of prepared slices.

    Invariants checked on construction: all images share one shape and lie
    in [0, 1].
    """

    slices: list[SliceRecord] = field(default_factory=list)
    split_tag: str = "train"

    def __post_init__(self):
        shapes = {s.image.shape for s in self.slices}
        if len(shapes) > 1:
            raise ShapeError(f"dataset mixes image shapes: {sorted(shapes)}")
        for s in self.slices:
            lo, hi = float(s.image.min(initial=0.0)), float(s.image.max(initial=0.0))
            if lo < 0.0 or hi > 1.0 + 1e-6:
                raise ValueError(
                    f"image for patient {s.patient_id} slice {s.slice_index} "
                    f"is outside [0, 1] (range [{lo}, {hi}])")

    def __len__(self) -> int:
        return len(self.slices)

    def patient_ids(self) -> list[int]:
        return sorted({s.patient_id for s in self.slices})

    def images(self) -> np.ndarray:
        """Stack into (N, 1, H, W) float32, the network's input layout."""
        return np.stack([s.image for s in self.slices])[:, None, :, :].astype(np.float32)

    def densities(self) -> np.ndarray:
        return np.array([s.density for s in self.slices], dtype=np.float32)


@dataclass(frozen=True)
class SplitSpec:
    """Patient-level split fractions (train, val, test) plus a shuffle seed."""

    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValueError(f"need three positive fractions, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(self.fractions)}")


def percentile_normalize(image: np.ndarray) -> np.ndarray:
    """Map the 2.5th..97.5th intensity percentile window onto [0, 1].

    Percentiles use linear interpolation between order statistics. Values
    outside the window clamp to 0 or 1. A constant image (degenerate window)
    maps to all zeros rather than raising: near-empty slices should survive
    preparation.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("cannot normalize an empty image")
    p_lo, p_hi = np.percentile(image, [2.5, 97.5])
    if p_hi == p_lo:
        return np.zeros_like(image, dtype=np.float32)
    out = (image - p_lo) / (p_hi - p_lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def extract_slab(volume: np.ndarray, n_slices: int = 20,
                 breast_mask: np.ndarray | None = None) -> list[np.ndarray]:
    """Take ``n_slices`` contiguous sagittal slices centered on the breast.

    The center is the breast mask's centroid along axis 0 (rounded); without
    a mask the volume midpoint is used. Windows that would cross a volume
    boundary are clamped, never padded. Phantom stacks that already have
    exactly ``n_slices`` slices pass through unchanged.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeError(f"expected a (slices, H, W) volume, got shape {volume.shape}")
    total = volume.shape[0]
    if total < n_slices:
        raise ValueError(f"volume has {total} slices, need at least {n_slices}")
    if total == n_slices:
        return [volume[i] for i in range(total)]
    if breast_mask is not None:
        weights = breast_mask.reshape(total, -1).sum(axis=1).astype(np.float64)
        if weights.sum() == 0:
            raise ValueError("breast mask is empty; no centroid to center on")
        center = int(round(float((weights * np.arange(total)).sum() / weights.sum())))
    else:
        center = total // 2
    start = min(max(center - n_slices // 2, 0), total - n_slices)
    return [volume[i] for i in range(start, start + n_slices)]


def resize_bilinear(image: np.ndarray, out_h: int = 128, out_w: int = 128) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D image.

    Grid corners map onto grid corners, so a same-size resize is exact and
    constant images stay constant. Output values are convex combinations of
    inputs and therefore stay within the input range.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] < 2 or image.shape[1] < 2:
        raise ShapeError(f"need a 2-D image of at least 2x2, got shape {image.shape}")
    in_h, in_w = image.shape
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()
    rows = np.linspace(0.0, in_h - 1.0, out_h)
    cols = np.linspace(0.0, in_w - 1.0, out_w)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = image[np.ix_(r0, c0)] * (1 - fc) + image[np.ix_(r0, c1)] * fc
    bot = image[np.ix_(r1, c0)] * (1 - fc) + image[np.ix_(r1, c1)] * fc
    return (top * (1 - fr) + bot * fr).astype(image.dtype, copy=False)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize for binary masks.

    Each output pixel copies one input pixel, so subset relations between
    masks (FGT inside breast) survive exactly.
    """
    mask = np.asarray(mask)
    if mask.shape == (out_h, out_w):
        return mask.copy()
    rows = np.clip(np.round(np.linspace(0.0, mask.shape[0] - 1.0, out_h)).astype(int),
                   0, mask.shape[0] - 1)
    cols = np.clip(np.round(np.linspace(0.0, mask.shape[1] - 1.0, out_w)).astype(int),
                   0, mask.shape[1] - 1)
    return mask[np.ix_(rows, cols)]


def compute_density(breast_mask: np.ndarray, fgt_mask: np.ndarray) -> float:
    """Slice density: FGT pixel count over breast pixel count."""
    breast = np.asarray(breast_mask).astype(bool)
    fgt = np.asarray(fgt_mask).astype(bool)
    if breast.shape != fgt.shape:
        raise ShapeError(f"mask shapes differ: {breast.shape} vs {fgt.shape}")
    n_breast = int(breast.sum())
    if n_breast == 0:
        raise ValueError("breast mask is empty")
    if bool(np.any(fgt & ~breast)):
        raise ValueError("FGT mask has pixels outside the breast mask")
    return int(fgt.sum()) / n_breast


def _largest_remainder(n: int, fractions: tuple[float, ...]) -> list[int]:
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = sorted(range(len(fractions)),
                        key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in range(n - sum(counts)):
        counts[remainders[i]] += 1
    return counts


def split_by_patient(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition slices into train/val/test with no patient crossing splits.

    Patients are shuffled with ``spec.seed`` and dealt into splits whose
    sizes come from largest-remainder rounding of the fractions.
    """
    patients = dataset.patient_ids()
    if len(patients) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(patients)}")
    counts = _largest_remainder(len(patients), spec.fractions)
    if min(counts) < 1:
        raise ValueError(
            f"fractions {spec.fractions} leave an empty split for {len(patients)} patients")
    shuffled = list(np.random.default_rng(spec.seed).permutation(patients))
    groups = {
        "train": set(shuffled[:counts[0]]),
        "val": set(shuffled[counts[0]:counts[0] + counts[1]]),
        "test": set(shuffled[counts[0] + counts[1]:]),
    }
    out = []
    for tag in ("train", "val", "test"):
        members = [s for s in dataset.slices if s.patient_id in groups[tag]]
        out.append(Dataset(slices=members, split_tag=tag))
    return tuple(out)


def write_split_manifest(path, datasets: tuple[Dataset, Dataset, Dataset]) -> None:
    """CSV of (patient_id, split_tag), sorted by patient id."""
    rows = []
    for ds in datasets:
        rows.extend((pid, ds.split_tag) for pid in ds.patient_ids())
    rows.sort()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "split_tag"])
        writer.writerows(rows)


def prepare_dataset(slices, out_h: int = 128, out_w: int = 128,
                    split_tag: str = "train") -> Dataset:
    """Normalize, resize, and wrap raw phantom slices into a Dataset.

    Ground-truth densities come from the phantom masks at native resolution;
    masks are nearest-neighbor resized onto the network grid for later
    region statistics.
    """
    records = []
    for s in slices:
        image = resize_bilinear(percentile_normalize(s.image), out_h, out_w)
        records.append(SliceRecord(
            image=image,
            density=s.density,
            patient_id=s.patient_id,
            slice_index=s.slice_index,
            breast_mask=resize_nearest(s.breast_mask, out_h, out_w),
            fgt_mask=resize_nearest(s.fgt_mask, out_h, out_w),
        ))
    return Dataset(slices=records, split_tag=split_tag)


__all__ = [
    "Dataset",
    "SliceRecord",
    "SplitSpec",
    "compute_density",
    "extract_slab",
    "percentile_normalize",
    "prepare_dataset",
    "resize_bilinear",
    "resize_nearest",
    "split_by_patient",
    "write_split_manifest",
]
