"""Deformation regularity: Jacobian determinants, folds and method comparison."""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .deform import METHODS, DeformationField, sample_dense
from .errors import BranchAmbiguity, GridTooSmall
from .volume import VolumeGrid

CSV_COLUMNS = ["method", "pose_magnitude_rad", "fold_percent", "mean_log2_absdet", "std_log2_absdet",
               "wall_time_ms", "peak_mem_mb", "status"]


def _axis_derivative(u: np.ndarray, mask: np.ndarray, axis: int, h: float) -> np.ndarray:
    """du/dx_axis: central inside the mask, one-sided at the mask boundary."""
    n = u.shape[axis]
    sl = lambda s: tuple(slice(None) if a != axis else s for a in range(3))  # noqa: E731

    up = np.zeros_like(u)
    dn = np.zeros_like(u)
    has_up = np.zeros(mask.shape, bool)
    has_dn = np.zeros(mask.shape, bool)
    up[sl(slice(0, n - 1))] = u[sl(slice(1, n))] - u[sl(slice(0, n - 1))]
    dn[sl(slice(1, n))] = u[sl(slice(1, n))] - u[sl(slice(0, n - 1))]
    has_up[sl(slice(0, n - 1))] = mask[sl(slice(1, n))]
    has_dn[sl(slice(1, n))] = mask[sl(slice(0, n - 1))]
    # voxels with neither masked neighbour fall back to plain grid differences
    grid_up = np.zeros(mask.shape, bool)
    grid_dn = np.zeros(mask.shape, bool)
    grid_up[sl(slice(0, n - 1))] = True
    grid_dn[sl(slice(1, n))] = True
    neither = ~has_up & ~has_dn
    has_up = has_up | (neither & grid_up)
    has_dn = has_dn | (neither & grid_dn)

    hu = has_up[..., None]
    hd = has_dn[..., None]
    both = hu & hd
    d = np.where(both, 0.5 * (up + dn), np.where(hu, up, np.where(hd, dn, 0.0)))
    return d / h


def jacobian_matrix(field: VolumeGrid, mask=None) -> np.ndarray:
    """d phi / dx (identity + displacement gradient), shape dims + (3, 3)."""
    if min(field.dims) < 3:
        raise GridTooSmall(f"need at least 3 voxels per axis, got {field.dims}")
    mask = np.ones(field.dims, bool) if mask is None else np.asarray(mask, bool)
    u = np.asarray(field.data, dtype=float)
    J = np.empty(field.dims + (3, 3))
    for a in range(3):
        J[..., :, a] = _axis_derivative(u, mask, a, field.spacing[a])
    J += np.eye(3)
    return J


def jacobian_determinant(field: VolumeGrid, mask=None) -> VolumeGrid:
    """det of the Jacobian of phi(x) = x + u(x) at every voxel."""
    J = jacobian_matrix(field, mask)
    det = (J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
           - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
           + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0]))
    return VolumeGrid(det, field.spacing, field.origin, mask=mask)


@dataclass
class RegularityReport:
    fold_percent: float
    std_log2_absdet: float
    mean_log2_absdet: float
    jacobian_field: VolumeGrid   # channel 0: log2|det|, channel 1: sign of det
    wall_time_ms: float = float("nan")
    peak_mem_mb: float = float("nan")
    n_interior: int = 0

    def row(self, method: str = "", pose_magnitude: float = float("nan"), status: str = "ok") -> dict:
        return {"method": method, "pose_magnitude_rad": pose_magnitude, "fold_percent": self.fold_percent,
                "mean_log2_absdet": self.mean_log2_absdet, "std_log2_absdet": self.std_log2_absdet,
                "wall_time_ms": self.wall_time_ms, "peak_mem_mb": self.peak_mem_mb, "status": status}


def regularity_report(field: VolumeGrid, mask=None, include_folds: bool = False,
                      wall_time_ms: float = float("nan"), peak_mem_mb: float = float("nan")) -> RegularityReport:
    """Fold percentage and log2|det J| statistics over the interior mask.

    Folds are det <= 0. The log statistics use det > 0 voxels only unless
    ``include_folds`` (then |det| of folded voxels is included too).
    """
    mask = np.ones(field.dims, bool) if mask is None else np.asarray(mask, bool)
    det = jacobian_determinant(field, mask).data
    d = det[mask]
    n = d.size
    folds = d <= 0
    fold_percent = 100.0 * np.count_nonzero(folds) / n if n else 0.0
    with np.errstate(divide="ignore"):
        logabs = np.log2(np.abs(det))
    sel = d if include_folds else d[~folds]
    sel = sel[sel != 0]
    vals = np.log2(np.abs(sel))
    mean = float(np.mean(vals)) if vals.size else float("nan")
    std = float(np.std(vals)) if vals.size else float("nan")
    jf = VolumeGrid(np.stack([np.where(np.isfinite(logabs), logabs, -np.inf), np.sign(det)], axis=-1),
                    field.spacing, field.origin, mask=mask)
    return RegularityReport(fold_percent, std, mean, jf, wall_time_ms, peak_mem_mb, n)


def timed_dense(field: DeformationField, grid):
    """Sample a field densely, returning (displacement, wall ms, peak MB of numpy allocations)."""
    tracemalloc.start()
    t0 = time.perf_counter()
    try:
        disp = sample_dense(field, grid)
        ms = 1e3 * (time.perf_counter() - t0)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return disp, ms, peak / 2 ** 20


def compare_methods(transforms_for, weights, mask, magnitudes, methods=METHODS, timing: bool = True):
    """Regularity report per (method, pose magnitude).

    ``transforms_for(magnitude)`` returns the K part transforms; every method
    shares ``weights``. BranchAmbiguity is recorded as a failed row.
    """
    grid = weights.grid.spec if hasattr(weights, "grid") else weights.spec
    rows, reports = [], {}
    for mag in magnitudes:
        T = transforms_for(mag)
        for m in methods:
            field = DeformationField.articulated(m, T, weights)
            try:
                if timing:
                    disp, ms, mb = timed_dense(field, grid)
                else:
                    disp, ms, mb = sample_dense(field, grid), float("nan"), float("nan")
            except BranchAmbiguity as exc:
                rows.append({"method": m, "pose_magnitude_rad": mag, "fold_percent": float("nan"),
                             "mean_log2_absdet": float("nan"), "std_log2_absdet": float("nan"),
                             "wall_time_ms": float("nan"), "peak_mem_mb": float("nan"),
                             "status": f"BranchAmbiguity({exc.angle:.4f})"})
                reports[(m, mag)] = None
                continue
            rep = regularity_report(disp, mask, wall_time_ms=ms, peak_mem_mb=mb)
            reports[(m, mag)] = rep
            rows.append(rep.row(m, mag))
    return rows, reports


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def rows_to_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in CSV_COLUMNS})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
