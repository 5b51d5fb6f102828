"""Disparity accuracy and uncertainty quality metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

BAD_THRESHOLDS = (1, 3, 5)


@dataclass
class MetricsReport:
    bad1: float
    bad3: float
    bad5: float
    mae: float
    rmse: float
    mean_aleatoric_px: Optional[float]
    mean_epistemic_px: Optional[float]
    n_valid: int

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        assert 0 <= self.bad5 <= self.bad3 <= self.bad1 <= 100, self
        assert self.rmse >= self.mae >= 0, self


@dataclass
class MetricsAccumulator:
    """Sums behind a ``MetricsReport``; merging is commutative.

    Aggregating over images through the accumulator weights every valid
    pixel equally instead of averaging per-image averages.
    """

    n: int = 0
    abs_sum: float = 0.0
    sq_sum: float = 0.0
    bad_counts: dict = field(default_factory=lambda: {k: 0 for k in BAD_THRESHOLDS})
    alea_sum: float = 0.0
    epi_sum: float = 0.0
    n_unc: int = 0

    def update(self, d_hat, gt, mask, aleatoric_px=None, epistemic_px=None) -> "MetricsAccumulator":
        mask = _valid_mask(d_hat, gt, mask)
        err = np.abs(np.asarray(d_hat, np.float64)[mask] - np.asarray(gt, np.float64)[mask])
        self.n += err.size
        self.abs_sum += float(err.sum())
        self.sq_sum += float((err**2).sum())
        for k in BAD_THRESHOLDS:
            self.bad_counts[k] += int((err > k).sum())
        if aleatoric_px is not None and epistemic_px is not None:
            self.alea_sum += float(np.asarray(aleatoric_px, np.float64)[mask].sum())
            self.epi_sum += float(np.asarray(epistemic_px, np.float64)[mask].sum())
            self.n_unc += err.size
        return self

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        out = MetricsAccumulator(
            self.n + other.n,
            self.abs_sum + other.abs_sum,
            self.sq_sum + other.sq_sum,
            {k: self.bad_counts[k] + other.bad_counts[k] for k in BAD_THRESHOLDS},
            self.alea_sum + other.alea_sum,
            self.epi_sum + other.epi_sum,
            self.n_unc + other.n_unc,
        )
        return out

    def report(self) -> MetricsReport:
        if self.n == 0:
            raise ValueError("no valid pixels to evaluate")
        pct = {k: 100.0 * self.bad_counts[k] / self.n for k in BAD_THRESHOLDS}
        mae = self.abs_sum / self.n
        rmse = math.sqrt(self.sq_sum / self.n)
        # sqrt of a float sum can land one ulp under the mean of the same values
        rmse = max(rmse, mae)
        alea = self.alea_sum / self.n_unc if self.n_unc else None
        epi = self.epi_sum / self.n_unc if self.n_unc else None
        report = MetricsReport(pct[1], pct[3], pct[5], mae, rmse, alea, epi, self.n)
        report.check()
        return report


def _valid_mask(d_hat, gt, mask):
    d_hat = np.asarray(d_hat)
    gt = np.asarray(gt)
    if d_hat.shape != gt.shape:
        raise ValueError(f"prediction {d_hat.shape} and ground truth {gt.shape} differ in shape")
    valid = np.isfinite(gt)
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != gt.shape:
            raise ValueError(f"mask {mask.shape} does not match {gt.shape}")
        valid &= mask
    if not valid.any():
        raise ValueError("mask selects no valid pixels")
    return valid


def accuracy_metrics(d_hat, gt, mask=None, uncertainty=None) -> MetricsReport:
    """Bad-pixel rates, MAE, RMSE and optional mean uncertainty stddevs.

    ``uncertainty`` is an ``UncertainDisparity``; the mean aleatoric and
    epistemic values are valid-pixel means of the stddev maps in px.
    """
    alea = epi = None
    if uncertainty is not None:
        alea = np.sqrt(uncertainty.aleatoric_var)
        epi = np.sqrt(uncertainty.epistemic_var)
    return MetricsAccumulator().update(d_hat, gt, mask, alea, epi).report()


@dataclass
class SparsificationCurve:
    densities: np.ndarray
    mae_at_density: np.ndarray
    oracle_mae: np.ndarray
    ause: float

    def rows(self):
        return zip(self.densities, self.mae_at_density, self.oracle_mae)


def default_densities(steps: int = 100) -> np.ndarray:
    return np.linspace(1.0 / steps, 1.0, steps)


def _running_mae(values_sorted: np.ndarray, densities: np.ndarray) -> np.ndarray:
    n = values_sorted.size
    counts = np.maximum(1, np.rint(densities * n).astype(np.int64))
    cums = np.cumsum(values_sorted)
    return cums[counts - 1] / counts


def sparsification(abs_error, uncertainty, mask=None, steps: int = 100) -> SparsificationCurve:
    """MAE of the lowest-uncertainty fraction of pixels, for growing fractions.

    Pixels are taken in order of increasing uncertainty (stable sort, so ties
    keep pixel order). The oracle curve orders by the error itself. AUSE is
    the mean over densities of the gap between the two curves.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    err = np.asarray(abs_error, np.float64)
    unc = np.asarray(uncertainty, np.float64)
    if err.shape != unc.shape:
        raise ValueError(f"error {err.shape} and uncertainty {unc.shape} differ in shape")
    valid = np.isfinite(err) & np.isfinite(unc)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    err, unc = err[valid], unc[valid]
    if err.size == 0:
        raise ValueError("mask selects no valid pixels")
    densities = default_densities(steps)
    model = _running_mae(err[np.argsort(unc, kind="stable")], densities)
    oracle = _running_mae(err[np.argsort(err, kind="stable")], densities)
    return SparsificationCurve(densities, model, oracle, float(np.mean(model - oracle)))


def histogram_edges(values, bins: int) -> np.ndarray:
    top = float(np.max(values)) if np.size(values) else 0.0
    if not np.isfinite(top) or top <= 0:
        top = 1.0
    return np.linspace(0.0, top, bins + 1)


def error_uncertainty_histogram(abs_error, stddev_map, mask=None, bins=50, error_edges=None, stddev_edges=None):
    """Joint counts of (absolute error, stddev) over valid pixels.

    Returns ``(counts, error_edges, stddev_edges)`` where ``counts`` has
    error bins along axis 0. Edges default to ``bins`` uniform bins from 0
    to the largest value; out-of-range values land in the outermost bins.
    """
    err = np.asarray(abs_error, np.float64)
    sig = np.asarray(stddev_map, np.float64)
    valid = np.isfinite(err) & np.isfinite(sig)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    err, sig = err[valid], sig[valid]
    if isinstance(bins, int):
        bins = (bins, bins)
    if min(bins) < 1:
        raise ValueError("need at least one bin per axis")
    ee = histogram_edges(err, bins[0]) if error_edges is None else np.asarray(error_edges, np.float64)
    se = histogram_edges(sig, bins[1]) if stddev_edges is None else np.asarray(stddev_edges, np.float64)
    err = np.clip(err, ee[0], ee[-1])
    sig = np.clip(sig, se[0], se[-1])
    counts, _, _ = np.histogram2d(err, sig, bins=(ee, se))
    return counts.astype(np.int64), ee, se


def diagonal_fraction(counts, error_edges, stddev_edges) -> float:
    """Share of pixels whose stddev bin centre is within one bin width of the error."""
    ec = 0.5 * (error_edges[:-1] + error_edges[1:])
    sc = 0.5 * (stddev_edges[:-1] + stddev_edges[1:])
    width = max(np.diff(error_edges).max(), np.diff(stddev_edges).max())
    near = np.abs(sc[None, :] - ec[:, None]) < width
    total = counts.sum()
    return float(counts[near].sum() / total) if total else 0.0
