"""Ground-truth derivation (FWHM), overlap metrics, the exact binomial test
for the reader study, and report assembly."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np

from .dataset import LV_MYO, SCAR, SegMask

REGIME_ORDER = ("0x", "0x+", "1x", "3x", "5x")
METRIC_ORDER = ("pct_scar_in_myo", "pct_scar_in_endo", "dice_endo", "dice_epi")


@dataclass
class ScarInclusionResult:
    pct_scar_in_myo: float
    pct_scar_in_endo: float
    n_scar_pixels: int


@dataclass
class RegimeReport:
    """Per-regime mean and standard error of the mean for each metric."""

    regime: str
    metrics: dict[str, tuple[float, float]]  # name -> (mean, sem)


def fwhm_scar_mask(image: np.ndarray, myo_mask: np.ndarray, roi_mask: np.ndarray) -> np.ndarray:
    """Threshold myocardial pixels at half the maximum intensity inside the ROI.

    An empty ROI means no visible scar was marked and yields an empty mask.
    """
    image = np.asarray(image)
    myo_mask = np.asarray(myo_mask, dtype=bool)
    roi_mask = np.asarray(roi_mask, dtype=bool)
    if image.shape != myo_mask.shape or image.shape != roi_mask.shape:
        raise ValueError("image, myo_mask and roi_mask must share dimensions")
    if not roi_mask.any():
        return np.zeros(image.shape, dtype=bool)
    if (roi_mask & ~myo_mask).any():
        raise ValueError("roi_mask must lie inside myo_mask")
    threshold = 0.5 * float(image[roi_mask].max())
    return myo_mask & (image >= threshold)


def fwhm_ground_truth(
    image: np.ndarray, mask: SegMask, seed: int = 0, roi_radius: float = 2.0
) -> np.ndarray:
    """Derive a scar ground-truth mask the way a clinician workflow would.

    A small seeded ROI is placed on part of the slice's scar region, then the
    half-maximum threshold is applied over the myocardium (annulus plus scar
    labels). Returns an empty mask when the slice has no scar region.
    """
    scar_px = mask.scar()
    if not scar_px.any():
        return np.zeros(mask.shape, dtype=bool)
    myo_region = mask.region(LV_MYO, SCAR)
    rng = np.random.default_rng(seed)
    ys, xs = np.nonzero(scar_px)
    i = int(rng.integers(0, len(ys)))
    cy, cx = float(ys[i]), float(xs[i])
    yy, xx = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]]
    roi = (np.hypot(xx - cx, yy - cy) <= roi_radius) & scar_px
    return fwhm_scar_mask(image, myo_region, roi)


def scar_inclusion(
    gt_scar_mask: np.ndarray, pred_endo_mask: np.ndarray, pred_myo_mask: np.ndarray
) -> ScarInclusionResult:
    """Percentage of ground-truth scar pixels landing in the predicted myo / endo."""
    gt = np.asarray(gt_scar_mask, dtype=bool)
    n = int(gt.sum())
    if n == 0:
        raise ValueError("scar inclusion is undefined for an empty ground-truth scar mask")
    endo = np.asarray(pred_endo_mask, dtype=bool)
    myo = np.asarray(pred_myo_mask, dtype=bool)
    return ScarInclusionResult(
        pct_scar_in_myo=100.0 * int((gt & myo).sum()) / n,
        pct_scar_in_endo=100.0 * int((gt & endo).sum()) / n,
        n_scar_pixels=n,
    )


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|); two empty masks count as identical (1.0)."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def binomial_p(n_correct: int, n_total: int) -> float:
    """Exact two-sided binomial test against chance 0.5.

    p = P(|X - n/2| >= |n_correct - n/2|) for X ~ Binomial(n, 0.5), summed
    exactly over integer tail terms.
    """
    if not 0 <= n_correct <= n_total:
        raise ValueError(f"n_correct must lie in [0, {n_total}], got {n_correct}")
    if n_total == 0:
        return 1.0
    dev = abs(2 * n_correct - n_total)  # 2*|k - n/2|, kept integral
    tail = sum(comb(n_total, j) for j in range(n_total + 1) if abs(2 * j - n_total) >= dev)
    return float(Fraction(tail, 2**n_total))


def _mean_sem(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    return mean, float(arr.std(ddof=1) / np.sqrt(arr.size))


def report_table(per_regime_results: dict[str, dict[str, list[float]]]) -> list[RegimeReport]:
    """Aggregate per-regime metric samples into mean (sem) rows.

    Output order is fixed: 0x, 0x+, 1x, 3x, 5x; only regimes present in the
    input appear.
    """
    for regime, metrics in per_regime_results.items():
        if regime not in REGIME_ORDER:
            raise ValueError(f"unknown regime {regime!r}")
        for name, values in metrics.items():
            if not values:
                raise ValueError(f"regime {regime}: metric {name} has no results")
    reports = []
    for regime in REGIME_ORDER:
        if regime not in per_regime_results:
            continue
        metrics = {
            name: _mean_sem(values) for name, values in per_regime_results[regime].items()
        }
        reports.append(RegimeReport(regime=regime, metrics=metrics))
    return reports


def format_report(reports: list[RegimeReport]) -> str:
    """Render reports as an aligned plain-text table with 'mean (sem)' cells."""
    names: list[str] = [m for m in METRIC_ORDER if any(m in r.metrics for r in reports)]
    for r in reports:
        for m in r.metrics:
            if m not in names:
                names.append(m)
    header = ["regime"] + names
    rows = [header]
    for r in reports:
        cells = [r.regime]
        for name in names:
            if name in r.metrics:
                mean, sem = r.metrics[name]
                cells.append(f"{mean:.1f} ({sem:.1f})")
            else:
                cells.append("-")
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines)


def report_json(reports: list[RegimeReport]) -> list[dict]:
    return [
        {
            "regime": r.regime,
            "metrics": {
                name: {"mean": mean, "sem": sem} for name, (mean, sem) in r.metrics.items()
            },
        }
        for r in reports
    ]
