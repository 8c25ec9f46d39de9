"""Regular 3-D grids and interpolation on them.

World coordinates are ``origin + index * spacing`` (mm); arrays are indexed
``[i, j, k]`` with an optional trailing channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch

_SNAP = 1e-9


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise DimensionMismatch("dims, spacing and origin must have 3 entries")
        if min(dims) < 1:
            raise DimensionMismatch(f"dims must be positive, got {dims}")
        if min(spacing) <= 0:
            raise DimensionMismatch(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def to_world(self, ijk) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(ijk, dtype=float) * np.asarray(self.spacing)

    def to_index(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def centers(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape dims + (3,)."""
        axes = [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class VolumeGrid:
    """Scalar or multi-channel volume on a regular grid."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4):
            raise DimensionMismatch(f"volume data must be 3-D or 4-D, got shape {self.data.shape}")
        self.spec  # validates spacing/origin
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.dims:
                raise DimensionMismatch(f"mask shape {self.mask.shape} != dims {self.dims}")

    @classmethod
    def zeros(cls, spec: GridSpec, channels: int = 1, dtype=float) -> "VolumeGrid":
        shape = spec.dims if channels == 1 else spec.dims + (channels,)
        return cls(np.zeros(shape, dtype=dtype), spec.spacing, spec.origin)

    @classmethod
    def on(cls, spec: GridSpec, data, mask=None) -> "VolumeGrid":
        return cls(data, spec.spacing, spec.origin, mask)

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else int(self.data.shape[3])

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.origin)

    def sample(self, points, outside: str = "zero", grad: bool = False):
        return sample_trilinear(self, points, outside=outside, grad=grad)


# =============================================================================
# interpolation
# =============================================================================

def _snap(idx: np.ndarray) -> np.ndarray:
    r = np.rint(idx)
    return np.where(np.abs(idx - r) <= _SNAP, r, idx)


def trilinear(data: np.ndarray, idx, outside: str = "zero", grad: bool = False):
    """Trilinear interpolation at fractional indices ``idx`` (N, 3).

    ``outside='zero'`` returns 0 for samples beyond the lattice, ``'clamp'``
    clamps to the border. With ``grad=True`` also returns d/d(index), shape
    values.shape + (3,).
    """
    data = np.asarray(data)
    idx = _snap(np.asarray(idx, dtype=float))
    single = idx.ndim == 1
    idx = np.atleast_2d(idx)
    dims = np.array(data.shape[:3])
    chan_shape = data.shape[3:]

    inside = np.all((idx >= 0) & (idx <= dims - 1), axis=1)
    q = np.clip(idx, 0, dims - 1)
    base = np.minimum(np.floor(q).astype(np.int64), np.maximum(dims - 2, 0))
    f = q - base
    # degenerate axes (size 1)
    one = dims == 1
    if one.any():
        base[:, one] = 0
        f[:, one] = 0.0
    hi = np.minimum(base + 1, dims - 1)

    def corner(cx, cy, cz):
        ii = hi[:, 0] if cx else base[:, 0]
        jj = hi[:, 1] if cy else base[:, 1]
        kk = hi[:, 2] if cz else base[:, 2]
        return data[ii, jj, kk].astype(float)

    fx, fy, fz = (f[:, a].reshape((-1,) + (1,) * len(chan_shape)) for a in range(3))
    c000, c100, c010, c110 = corner(0, 0, 0), corner(1, 0, 0), corner(0, 1, 0), corner(1, 1, 0)
    c001, c101, c011, c111 = corner(0, 0, 1), corner(1, 0, 1), corner(0, 1, 1), corner(1, 1, 1)
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    val = c0 * (1 - fz) + c1 * fz

    if outside == "zero":
        val = np.where(inside.reshape((-1,) + (1,) * len(chan_shape)), val, 0.0)
    elif outside != "clamp":
        raise ValueError(f"unknown outside mode {outside!r}")

    if not grad:
        return val[0] if single else val

    dx = ((c100 - c000) * (1 - fy) + (c110 - c010) * fy) * (1 - fz) + \
         ((c101 - c001) * (1 - fy) + (c111 - c011) * fy) * fz
    dy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
    dz = c1 - c0
    g = np.stack([dx, dy, dz], axis=-1)
    if one.any():
        g[..., one] = 0.0
    if outside == "zero":
        g = np.where(inside.reshape((-1,) + (1,) * (len(chan_shape) + 1)), g, 0.0)
    if single:
        return val[0], g[0]
    return val, g


def sample_trilinear(vol: VolumeGrid, points, outside: str = "zero", grad: bool = False):
    """Trilinear sample of a volume at world points (..., 3)."""
    points = np.asarray(points, dtype=float)
    lead = points.shape[:-1]
    idx = vol.spec.to_index(points.reshape(-1, 3))
    res = trilinear(vol.data, idx, outside=outside, grad=grad)
    chan = vol.data.shape[3:]
    if grad:
        val, g = res
        g = g / np.asarray(vol.spacing)
        return val.reshape(lead + chan), g.reshape(lead + chan + (3,))
    return res.reshape(lead + chan)


def sample_nearest(vol: VolumeGrid, points, outside: str = "zero") -> np.ndarray:
    points = np.asarray(points, dtype=float)
    lead = points.shape[:-1]
    idx = np.rint(_snap(vol.spec.to_index(points.reshape(-1, 3)))).astype(np.int64)
    dims = np.array(vol.dims)
    inside = np.all((idx >= 0) & (idx <= dims - 1), axis=1)
    idx = np.clip(idx, 0, dims - 1)
    val = vol.data[idx[:, 0], idx[:, 1], idx[:, 2]]
    if outside == "zero":
        val = np.where(inside.reshape((-1,) + (1,) * (val.ndim - 1)), val, 0)
    return val.reshape(lead + vol.data.shape[3:])


def extend_from_mask(data: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy each exterior voxel's value from its nearest masked voxel."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all() or not mask.any():
        return np.array(data, copy=True)
    _, inds = ndimage.distance_transform_edt(~mask, return_indices=True)
    return np.asarray(data)[inds[0], inds[1], inds[2]]


def face_boundary(mask: np.ndarray) -> np.ndarray:
    """Masked voxels with at least one face neighbour outside the mask (or grid)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded.copy()
    for a in range(3):
        for s in (-1, 1):
            interior &= np.roll(padded, s, axis=a)
    return mask & ~interior[1:-1, 1:-1, 1:-1]
