"""Evaluation: Spearman correlation with a permutation significance test,
per-patient prediction reports, and region-wise attribution statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ShapeError, UndefinedCorrelationError

_FLOAT_FMT = ".9g"  # all report floats carry 9 significant digits


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties receive the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Spearman correlation: Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least 3 observations")
    rx = _midranks(x)
    ry = _midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    var_x = float((rx * rx).sum())
    var_y = float((ry * ry).sum())
    if var_x == 0.0 or var_y == 0.0:
        raise UndefinedCorrelationError("constant input: rank variance is zero")
    return float((rx * ry).sum() / np.sqrt(var_x * var_y))


def permutation_p_value(x, y, n_perm: int = 10_000, seed: int = 0) -> float:
    """Two-sided permutation test on Spearman's rho.

        p = (1 + #{|rho_perm| >= |rho_obs|}) / (n_perm + 1)

    Permutations shuffle y's ranks with a seeded generator, so p is
    reproducible and never exactly zero.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    rho_obs = abs(spearman_rho(x, y))
    rx = _midranks(x)
    ry = _midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    norm = np.sqrt(float((rx * rx).sum()) * float((ry * ry).sum()))
    rng = np.random.default_rng(seed)
    hits = 0
    # blocked to keep the permutation matrix small
    block = 1_000
    done = 0
    while done < n_perm:
        count = min(block, n_perm - done)
        perms = np.stack([rng.permutation(ry) for _ in range(count)])
        rhos = perms @ rx / norm
        hits += int(np.count_nonzero(np.abs(rhos) >= rho_obs - 1e-12))
        done += count
    return (1 + hits) / (n_perm + 1)


@dataclass
class RegionStats:
    """Mean attribution per tissue region of one slice. A region absent
    from the slice reports None, not zero."""

    fgt_mean: float | None
    fat_mean: float | None
    inside_abs_mean: float | None
    outside_abs_mean: float | None
    slice_id: int = 0


def region_shap_summary(values: np.ndarray, breast_mask: np.ndarray,
                        fgt_mask: np.ndarray, slice_id: int = 0) -> RegionStats:
    """Split a map into FGT / fat (breast minus FGT) / outside and average.

    The three regions partition the image; means are also recomputable by a
    naive loop, which the tests do.
    """
    values = np.asarray(values)
    breast = np.asarray(breast_mask).astype(bool)
    fgt = np.asarray(fgt_mask).astype(bool)
    if values.shape != breast.shape or values.shape != fgt.shape:
        raise ShapeError(
            f"map {values.shape} vs masks {breast.shape}/{fgt.shape}")
    if bool(np.any(fgt & ~breast)):
        raise ValueError("FGT mask has pixels outside the breast mask")
    fat = breast & ~fgt
    outside = ~breast

    def mean_of(region, absolute=False):
        if not region.any():
            return None
        vals = values[region]
        return float(np.abs(vals).mean() if absolute else vals.mean())

    return RegionStats(
        fgt_mean=mean_of(fgt),
        fat_mean=mean_of(fat),
        inside_abs_mean=mean_of(breast, absolute=True),
        outside_abs_mean=mean_of(outside, absolute=True),
        slice_id=slice_id,
    )


@dataclass
class EvalReport:
    """Per-slice predictions rolled up to per-patient means, with the
    per-patient Spearman correlation as the headline number and the
    per-slice correlation as a secondary."""

    patient_ids: list[int]
    slice_indices: list[int]
    truths: np.ndarray
    predictions: np.ndarray
    per_patient: list[tuple[int, float, float]] = field(default_factory=list)
    spearman_rho: float = float("nan")
    p_value: float = float("nan")
    per_slice_rho: float = float("nan")
    n_patients: int = 0


def evaluate_predictions(patient_ids, slice_indices, truths, predictions,
                         n_perm: int = 10_000, seed: int = 0) -> EvalReport:
    """Build the evaluation report from per-slice predictions."""
    truths = np.asarray(truths, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    patient_ids = list(patient_ids)
    if not (len(patient_ids) == len(truths) == len(predictions)):
        raise ValueError("per-slice arrays differ in length")
    report = EvalReport(patient_ids=patient_ids, slice_indices=list(slice_indices),
                        truths=truths, predictions=predictions)
    by_patient: dict[int, list[int]] = {}
    for i, pid in enumerate(patient_ids):
        by_patient.setdefault(pid, []).append(i)
    for pid in sorted(by_patient):
        idx = by_patient[pid]
        report.per_patient.append((pid, float(truths[idx].mean()),
                                   float(predictions[idx].mean())))
    report.n_patients = len(report.per_patient)
    truth_means = np.array([t for _, t, _ in report.per_patient])
    pred_means = np.array([p for _, _, p in report.per_patient])
    report.spearman_rho = spearman_rho(truth_means, pred_means)
    report.p_value = permutation_p_value(truth_means, pred_means, n_perm, seed)
    report.per_slice_rho = spearman_rho(truths, predictions)
    return report


def scatter_report(report: EvalReport, path) -> Path:
    """Per-patient (truth, prediction) CSV sorted by patient id, ending in a
    summary row with rho, p, and N."""
    if report.n_patients == 0:
        raise ValueError("report has no patients")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "truth", "prediction"])
        for pid, truth, pred in report.per_patient:
            writer.writerow([pid, format(truth, _FLOAT_FMT), format(pred, _FLOAT_FMT)])
        writer.writerow(["summary",
                         format(report.spearman_rho, _FLOAT_FMT),
                         format(report.p_value, _FLOAT_FMT)])
    return path


def write_region_stats(stats: list[RegionStats], path) -> Path:
    path = Path(path)

    def cell(v):
        return "" if v is None else format(v, _FLOAT_FMT)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slice_id", "fgt_mean", "fat_mean",
                         "inside_abs_mean", "outside_abs_mean"])
        for s in stats:
            writer.writerow([s.slice_id, cell(s.fgt_mean), cell(s.fat_mean),
                             cell(s.inside_abs_mean), cell(s.outside_abs_mean)])
    return path


__all__ = [
    "EvalReport",
    "RegionStats",
    "evaluate_predictions",
    "permutation_p_value",
    "region_shap_summary",
    "scatter_report",
    "spearman_rho",
    "write_region_stats",
]
