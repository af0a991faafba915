"""Seeded generator of breast-MRI-like sagittal slices with exact masks.

Each slice carries its breast and FGT masks, so the ground-truth density
(FGT pixels over breast pixels) is exact by construction rather than a
rendering approximation. Geometry follows a T1-weighted sagittal view: air
background, a pectoral wedge at the chest wall, one elliptical breast of
bright fat, and dark FGT blobs concentrated around the breast center. A
smooth multiplicative bias field and additive Gaussian noise corrupt the
image only; masks stay exact.

All randomness is derived from (seed, patient_id, slice_index), so slices
can be regenerated independently and in any order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import GenerationError
from .preprocess import resize_bilinear

_MASK64 = (1 << 64) - 1


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([p & _MASK64 for p in parts])


@dataclass
class PhantomSlice:
    """One synthetic sagittal slice with exact ground truth."""

    image: np.ndarray
    breast_mask: np.ndarray
    fgt_mask: np.ndarray
    density: float
    patient_id: int
    slice_index: int

    def __post_init__(self):
        breast = self.breast_mask.astype(bool)
        fgt = self.fgt_mask.astype(bool)
        if not breast.any():
            raise GenerationError("breast mask is empty")
        if bool(np.any(fgt & ~breast)):
            raise GenerationError("FGT mask leaks outside the breast mask")
        exact = int(fgt.sum()) / int(breast.sum())
        if self.density != exact:
            raise GenerationError(
                f"stored density {self.density} != mask ratio {exact}")


@dataclass(frozen=True)
class PhantomParams:
    """Knobs of the generator. Intensities follow the T1 convention:
    fat bright, FGT dark, muscle darker, air darkest."""

    image_size: tuple[int, int] = (128, 128)
    breast_rx_range: tuple[float, float] = (0.26, 0.34)   # fraction of width
    breast_ry_range: tuple[float, float] = (0.28, 0.38)   # fraction of height
    density_range: tuple[float, float] = (0.0, 0.6)
    density_beta: tuple[float, float] = (1.2, 3.0)
    density_tolerance: float = 0.02
    slice_density_jitter: float = 0.03
    slice_geometry_jitter: float = 0.05
    fgt_blob_sigma: tuple[float, float] = (2.0, 9.0)
    fgt_max_blobs: int = 400
    fgt_core_shrink: float = 0.92
    wall_base_range: tuple[float, float] = (0.14, 0.20)   # fraction of width
    wall_slope_range: tuple[float, float] = (-0.10, 0.10)
    bias_strength: float = 0.2
    bias_grid: int = 4
    noise_sigma: float = 0.02
    fat_mean: float = 1.0
    fgt_mean: float = 0.4
    muscle_mean: float = 0.22
    air_mean: float = 0.05

    def __post_init__(self):
        for name in ("breast_rx_range", "breast_ry_range", "density_range",
                     "fgt_blob_sigma", "wall_base_range", "wall_slope_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is empty: {(lo, hi)}")
        if not (self.fat_mean > self.fgt_mean > self.muscle_mean > self.air_mean):
            raise ValueError("intensities must be ordered fat > FGT > muscle > air")
        if self.image_size[0] < 16 or self.image_size[1] < 16:
            raise ValueError(f"image_size too small: {self.image_size}")
        if not 0.0 <= self.density_range[0] <= self.density_range[1] <= 1.0:
            raise ValueError(f"density_range must sit inside [0, 1]: {self.density_range}")
        if self.bias_strength < 0:
            raise ValueError("bias_strength must be >= 0")


def apply_bias_field(image: np.ndarray, seed: int, strength: float,
                     grid: int = 4) -> np.ndarray:
    """Multiply by a smooth field in [1 - strength, 1 + strength].

    The field is a coarse grid of uniform draws, bilinearly upsampled to the
    image size; interpolation keeps it inside the stated band.
    """
    if strength < 0:
        raise ValueError("strength must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if strength == 0.0:
        return image.copy()
    coarse = _rng(seed, 0xB1A5).uniform(-1.0, 1.0, size=(grid, grid))
    field = 1.0 + strength * resize_bilinear(coarse, image.shape[0], image.shape[1])
    return image * field


def _ellipse_mask(h, w, cy, cx, ry, rx):
    yy = (np.arange(h)[:, None] - cy) / ry
    xx = (np.arange(w)[None, :] - cx) / rx
    return yy * yy + xx * xx <= 1.0


@dataclass
class _PatientRegime:
    base_density: float
    rx: float
    ry: float
    cy: float
    wall_base: float
    wall_slope: float


def _patient_regime(seed: int, patient_id: int, params: PhantomParams) -> _PatientRegime:
    h, w = params.image_size
    rng = _rng(seed, patient_id, 0xA11CE)
    a, b = params.density_beta
    lo, hi = params.density_range
    return _PatientRegime(
        base_density=lo + rng.beta(a, b) * (hi - lo),
        rx=rng.uniform(*params.breast_rx_range) * w,
        ry=rng.uniform(*params.breast_ry_range) * h,
        cy=h / 2.0 + rng.uniform(-0.05, 0.05) * h,
        wall_base=rng.uniform(*params.wall_base_range) * w,
        wall_slope=rng.uniform(*params.wall_slope_range),
    )


def _grow_fgt(core: np.ndarray, n_breast: int, target: float, cy: float, cx: float,
              ry: float, rx: float, rng: np.random.Generator,
              params: PhantomParams) -> np.ndarray:
    """Accumulate soft blobs and threshold until the FGT/breast ratio lands
    within the density tolerance of the target. Overshooting blobs are
    undone and retried smaller, so the achieved ratio never strays."""
    h, w = core.shape
    tol = params.density_tolerance
    sig_lo, sig_hi = params.fgt_blob_sigma
    field = np.zeros((h, w), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    ratio = 0.0
    for _ in range(params.fgt_max_blobs):
        gap = target - ratio
        if abs(gap) <= tol:
            break
        if gap < 0:  # cannot remove tissue; accept the overshoot guard below
            break
        # one blob's super-threshold area is about 4.3 * sigma^2
        sigma = float(np.clip(np.sqrt(gap * n_breast / 4.3), sig_lo, sig_hi))
        by = cy + rng.normal(0.0, 0.30) * ry
        bx = cx + rng.normal(0.0, 0.30) * rx
        while True:
            y0, y1 = max(int(by - 3.5 * sigma), 0), min(int(by + 3.5 * sigma) + 1, h)
            x0, x1 = max(int(bx - 3.5 * sigma), 0), min(int(bx + 3.5 * sigma) + 1, w)
            if y0 >= y1 or x0 >= x1:
                break
            yy = np.arange(y0, y1)[:, None] - by
            xx = np.arange(x0, x1)[None, :] - bx
            bump = np.exp(-(yy * yy + xx * xx) / (2.0 * sigma * sigma))
            field[y0:y1, x0:x1] += bump
            new_mask = (field >= 0.5) & core
            new_ratio = int(new_mask.sum()) / n_breast
            if new_ratio > target + tol and sigma > sig_lo:
                field[y0:y1, x0:x1] -= bump
                sigma = max(sigma / 2.0, sig_lo)
                continue
            mask, ratio = new_mask, new_ratio
            break
    else:
        raise GenerationError(
            f"FGT growth did not reach density {target:.3f} "
            f"within {params.fgt_max_blobs} blobs")
    return mask


def _smooth3x3(image: np.ndarray) -> np.ndarray:
    """One pass of a separable 1-2-1 binomial kernel (edge-replicated)."""
    padded = np.pad(image, 1, mode="edge")
    rows = padded[:-2] + 2.0 * padded[1:-1] + padded[2:]
    return (rows[:, :-2] + 2.0 * rows[:, 1:-1] + rows[:, 2:]) / 16.0


def generate_slice(seed: int, patient_id: int, slice_index: int,
                   params: PhantomParams | None = None) -> PhantomSlice:
    """Render one slice. Deterministic for fixed (seed, patient_id, slice_index)."""
    params = params or PhantomParams()
    h, w = params.image_size
    regime = _patient_regime(seed, patient_id, params)
    rng = _rng(seed, patient_id, slice_index, 0x51)

    jg = params.slice_geometry_jitter
    rx = regime.rx * (1.0 + rng.uniform(-jg, jg))
    ry = regime.ry * (1.0 + rng.uniform(-jg, jg))
    cy = regime.cy + rng.uniform(-2.0, 2.0)
    lo, hi = params.density_range
    jd = params.slice_density_jitter
    target = float(np.clip(regime.base_density + rng.uniform(-jd, jd), lo, hi))

    wall = regime.wall_base + regime.wall_slope * (np.arange(h) - h / 2.0)
    wall_max = float(wall.max())
    cx = wall_max + rx + 2.0
    if cx + rx > w - 2.0:  # keep the breast inside the frame
        rx = (w - 4.0 - wall_max) / 2.0
        cx = wall_max + rx + 2.0
    if rx <= 2.0 or ry <= 2.0:
        raise GenerationError(
            f"breast radii collapsed for image size {params.image_size}")

    breast = _ellipse_mask(h, w, cy, cx, ry, rx)
    n_breast = int(breast.sum())
    if n_breast == 0:
        raise GenerationError("parameters produced an empty breast mask")
    wedge = np.arange(w)[None, :] < wall[:, None]
    wedge &= ~breast

    core = _ellipse_mask(h, w, cy, cx, ry * params.fgt_core_shrink,
                         rx * params.fgt_core_shrink)
    fgt = _grow_fgt(core, n_breast, target, cy, cx, ry, rx, rng, params)

    image = np.full((h, w), params.air_mean, dtype=np.float64)
    image[wedge] = params.muscle_mean
    image[breast] = params.fat_mean
    image[fgt] = params.fgt_mean
    image = _smooth3x3(image)
    image = apply_bias_field(image, int(rng.integers(1 << 62)), params.bias_strength,
                             params.bias_grid)
    image += rng.normal(0.0, params.noise_sigma, size=(h, w))
    image = np.maximum(image, 0.0)

    return PhantomSlice(
        image=image.astype(np.float32),
        breast_mask=breast,
        fgt_mask=fgt,
        density=int(fgt.sum()) / n_breast,
        patient_id=patient_id,
        slice_index=slice_index,
    )


def generate_dataset(seed: int, n_patients: int, slices_per_patient: int = 20,
                     params: PhantomParams | None = None) -> list[PhantomSlice]:
    """All slices for a cohort. Slices of one patient share the patient's
    breast geometry and density regime with small per-slice variation."""
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    params = params or PhantomParams()
    return [
        generate_slice(seed, pid, idx, params)
        for pid in range(1, n_patients + 1)
        for idx in range(slices_per_patient)
    ]


# ---------------------------------------------------------------------------
# On-disk dataset format: per slice one raw little-endian float32 image file
# plus two binary PGM masks, tied together by manifest.csv. Documented in the
# README under "Dataset directory layout".
# ---------------------------------------------------------------------------

_MANIFEST_FIELDS = ["patient_id", "slice_index", "density", "height", "width",
                    "breast_count", "fgt_count", "image_path",
                    "breast_mask_path", "fgt_mask_path"]


def _write_pgm(path: Path, mask: np.ndarray) -> None:
    data = np.where(mask, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def _read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path} is not a binary PGM file")
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w).reshape(h, w)
    return data > 127


def save_dataset(slices: list[PhantomSlice], directory) -> Path:
    """Write slices plus manifest.csv into ``directory``."""
    directory = Path(directory)
    (directory / "slices").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in slices:
        stem = f"p{s.patient_id:04d}_s{s.slice_index:02d}"
        image_path = f"slices/{stem}.img.f32"
        breast_path = f"slices/{stem}.breast.pgm"
        fgt_path = f"slices/{stem}.fgt.pgm"
        (directory / image_path).write_bytes(
            np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        _write_pgm(directory / breast_path, s.breast_mask)
        _write_pgm(directory / fgt_path, s.fgt_mask)
        rows.append([s.patient_id, s.slice_index, format(s.density, ".17g"),
                     s.image.shape[0], s.image.shape[1],
                     int(s.breast_mask.sum()), int(s.fgt_mask.sum()),
                     image_path, breast_path, fgt_path])
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_FIELDS)
        writer.writerows(rows)
    return directory


def load_dataset(directory) -> list[PhantomSlice]:
    """Read a dataset directory back; densities are recomputed from the
    masks and checked against the manifest."""
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {directory}")
    out = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            h, w = int(row["height"]), int(row["width"])
            image = np.frombuffer(
                (directory / row["image_path"]).read_bytes(), dtype="<f4",
                count=h * w).reshape(h, w)
            breast = _read_pgm(directory / row["breast_mask_path"])
            fgt = _read_pgm(directory / row["fgt_mask_path"])
            density = int(fgt.sum()) / int(breast.sum())
            if abs(density - float(row["density"])) > 0:
                raise ValueError(
                    f"manifest density {row['density']} disagrees with masks "
                    f"for patient {row['patient_id']} slice {row['slice_index']}")
            out.append(PhantomSlice(
                image=image.copy(), breast_mask=breast, fgt_mask=fgt,
                density=density, patient_id=int(row["patient_id"]),
                slice_index=int(row["slice_index"])))
    return out


__all__ = [
    "PhantomParams",
    "PhantomSlice",
    "apply_bias_field",
    "generate_dataset",
    "generate_slice",
    "load_dataset",
    "save_dataset",
]
