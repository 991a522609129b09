"""Error metrics, height-balanced variants, calibration diagnostics, and the
uncertainty-filtering trade-off curve.

Sign convention: errors are prediction minus reference, so a negative mean
error is underestimation. All accumulation happens in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _pairs(pred, ref):
    p = np.asarray(pred, dtype=np.float64).ravel()
    r = np.asarray(ref, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty input: metrics need at least one pair")
    if p.size != r.size:
        raise ValueError(f"prediction count {p.size} does not match reference count {r.size}")
    return p, r


def rmse(pred, ref) -> float:
    p, r = _pairs(pred, ref)
    d = p - r
    return float(np.sqrt(np.mean(d * d)))


def me(pred, ref) -> float:
    p, r = _pairs(pred, ref)
    return float(np.mean(p - r))


def mae(pred, ref) -> float:
    p, r = _pairs(pred, ref)
    return float(np.mean(np.abs(p - r)))


def rmv(uncertainties) -> float:
    """Root mean variance of predictive uncertainties (variances in)."""
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    if u.size == 0:
        raise ValueError("empty input: RMV needs at least one uncertainty")
    return float(np.sqrt(np.mean(u)))


@dataclass
class BinRow:
    lo: float
    hi: float
    count: int
    rmse: float
    me: float
    mae: float

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi, "count": self.count,
                "rmse": self.rmse, "me": self.me, "mae": self.mae}


@dataclass
class BalancedReport:
    bin_width: float
    rows: list[BinRow]
    armse: float
    ame: float
    amae: float

    def to_dict(self):
        return {"bin_width": self.bin_width, "armse": self.armse, "ame": self.ame,
                "amae": self.amae, "rows": [r.to_dict() for r in self.rows]}


def balanced_metrics(pred, ref, bin_width: float = 5.0) -> BalancedReport:
    """Metrics per ``bin_width`` reference-height interval, averaged with equal
    weight over the occupied bins (half-open bins starting at 0; the top of
    the height range is never truncated)."""
    p, r = _pairs(pred, ref)
    bins = np.floor(r / bin_width).astype(np.int64)
    rows = []
    for b in np.unique(bins):
        sel = bins == b
        rows.append(BinRow(
            lo=float(b * bin_width),
            hi=float((b + 1) * bin_width),
            count=int(sel.sum()),
            rmse=rmse(p[sel], r[sel]),
            me=me(p[sel], r[sel]),
            mae=mae(p[sel], r[sel]),
        ))
    return BalancedReport(
        bin_width=bin_width,
        rows=rows,
        armse=float(np.mean([row.rmse for row in rows])),
        ame=float(np.mean([row.me for row in rows])),
        amae=float(np.mean([row.mae for row in rows])),
    )


@dataclass
class CalibrationRow:
    lo: float  # bin bounds in uncertainty (variance) units
    hi: float
    count: int
    err: float  # RMSE of the bin, meters
    uncert: float  # RMV of the bin, meters

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi, "count": self.count,
                "err": self.err, "uncert": self.uncert}


@dataclass
class CalibrationReport:
    n_bins: int
    strategy: str
    rows: list[CalibrationRow]
    uce: float
    auce: float

    def to_dict(self):
        return {"n_bins": self.n_bins, "strategy": self.strategy, "uce": self.uce,
                "auce": self.auce, "rows": [r.to_dict() for r in self.rows]}


def calibration(pred, ref, uncert, n_bins: int = 20, strategy: str = "width") -> CalibrationReport:
    """Calibration-plot table plus UCE and AUCE.

    Samples are binned by predictive uncertainty (variance) into ``n_bins``
    equal-width intervals over the observed range ("width") or equal-count
    rank groups ("population"). Per bin, err is the RMSE and uncert the RMV;
    UCE weights |err - uncert| by bin population, AUCE averages it over the
    occupied bins.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if strategy not in ("width", "population"):
        raise ValueError(f"unknown binning strategy {strategy!r}")
    p, r = _pairs(pred, ref)
    u = np.asarray(uncert, dtype=np.float64).ravel()
    if u.size != p.size:
        raise ValueError("uncertainties do not align with predictions")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise ValueError("uncertainties must be finite and >= 0")
    n = p.size

    if strategy == "width":
        lo, hi = float(u.min()), float(u.max())
        if hi == lo:  # degenerate: all uncertainties identical
            groups = [np.arange(n)]
            edges = [(lo, hi)]
        else:
            width = (hi - lo) / n_bins
            idx = np.minimum(((u - lo) / width).astype(np.int64), n_bins - 1)
            groups, edges = [], []
            for b in range(n_bins):
                groups.append(np.flatnonzero(idx == b))
                edges.append((lo + b * width, lo + (b + 1) * width))
    else:
        order = np.argsort(u, kind="stable")
        groups = [g for g in np.array_split(order, n_bins)]
        edges = [(float(u[g].min()), float(u[g].max())) if g.size else (np.nan, np.nan) for g in groups]

    rows = []
    weighted = 0.0
    gaps = []
    for g, (lo_e, hi_e) in zip(groups, edges):
        if g.size == 0:
            continue
        bin_err = rmse(p[g], r[g])
        bin_unc = rmv(u[g])
        gap = abs(bin_err - bin_unc)
        weighted += (g.size / n) * gap
        gaps.append(gap)
        rows.append(CalibrationRow(lo=float(lo_e), hi=float(hi_e), count=int(g.size),
                                   err=bin_err, uncert=bin_unc))
    return CalibrationReport(n_bins=n_bins, strategy=strategy, rows=rows,
                             uce=float(weighted), auce=float(np.mean(gaps)))


@dataclass
class FilterRow:
    fraction: float
    retained: int
    retained_percent: float
    rmse: float
    me: float
    mae: float

    def to_dict(self):
        return {"fraction": self.fraction, "retained": self.retained,
                "retained_percent": self.retained_percent, "rmse": self.rmse,
                "me": self.me, "mae": self.mae}


def filtering_curve(pred, ref, uncert, fractions) -> list[FilterRow]:
    """Metrics after dropping the most-uncertain fraction of pairs.

    For each fraction f, the floor(f*N) pairs with the highest uncertainty are
    removed (ties resolved by stable sample order) and the error metrics are
    recomputed on the remainder.
    """
    p, r = _pairs(pred, ref)
    u = np.asarray(uncert, dtype=np.float64).ravel()
    if u.size != p.size:
        raise ValueError("uncertainties do not align with predictions")
    n = p.size
    order = np.argsort(u, kind="stable")  # ascending; the tail is dropped first
    rows = []
    for f in fractions:
        if not 0.0 <= f < 1.0:
            raise ValueError(f"filter fraction {f} outside [0, 1)")
        keep = order[: n - int(f * n)]
        rows.append(FilterRow(
            fraction=float(f),
            retained=int(keep.size),
            retained_percent=100.0 * keep.size / n,
            rmse=rmse(p[keep], r[keep]),
            me=me(p[keep], r[keep]),
            mae=mae(p[keep], r[keep]),
        ))
    return rows
