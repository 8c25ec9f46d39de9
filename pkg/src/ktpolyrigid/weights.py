"""Volumetric skinning weights by Laplacian-energy projected gradient descent.

The interior weights minimise sum_k |grad w_k|^2 over the mask subject to the
probability simplex at every voxel and Dirichlet data on the boundary voxels.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, Diverged, EmptyBoundary
from .mesh import SurfaceMesh, closest_points
from .volume import GridSpec, VolumeGrid, extend_from_mask, face_boundary

log = logging.getLogger(__name__)

_NEIGHBOURS = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    V = np.atleast_2d(v)
    K = V.shape[1]
    u = -np.sort(-V, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, K + 1)
    cond = u - css / ind > 0
    rho = K - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(V)), rho] / (rho + 1)
    out = np.maximum(V - theta[:, None], 0.0)
    return out[0] if single else out


@dataclass
class WeightField:
    """K-channel weights on a grid; exterior voxels copy their nearest interior voxel."""

    grid: VolumeGrid
    boundary_index: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    energies: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def K(self) -> int:
        return self.grid.channels

    @property
    def mask(self):
        return self.grid.mask

    def at(self, points) -> np.ndarray:
        return self.grid.sample(points, outside="clamp")


# =============================================================================
# boundary data
# =============================================================================

def rasterize_boundary_weights(mesh: SurfaceMesh, vertex_weights, grid: GridSpec, mask):
    """Dirichlet data for the solve.

    Every boundary voxel (masked, with a face neighbour outside the mask) takes
    the barycentric interpolation of ``vertex_weights`` at its nearest surface
    point. Returns ``(indices (B, 3), weights (B, K))``.
    """
    W = np.asarray(vertex_weights, dtype=float)
    if W.ndim != 2 or len(W) != mesh.n_vertices:
        raise DimensionMismatch(f"vertex weights must be ({mesh.n_vertices}, K), got {W.shape}")
    if np.abs(W.sum(axis=1) - 1).max() > 1e-6 or W.min() < -1e-6:
        raise DimensionMismatch("vertex weights must lie on the simplex (tolerance 1e-6)")
    mask = np.asarray(mask, dtype=bool)
    bnd = face_boundary(mask)
    idx = np.argwhere(bnd)
    if len(idx) == 0:
        raise EmptyBoundary("mask has no boundary voxels")
    face, bary, _ = closest_points(mesh, grid.to_world(idx))
    tri = mesh.faces[face]
    vals = np.einsum("bi,bik->bk", bary, W[tri])
    return idx, project_simplex(vals)


# =============================================================================
# solver
# =============================================================================

def stable_step(spacing) -> float:
    """Explicit-diffusion stability bound 1 / (2 sum 1/h^2)."""
    h = np.asarray(spacing, dtype=float)
    return 1.0 / (2.0 * np.sum(1.0 / h ** 2))


def _neighbour_table(mask):
    """Flat indices of masked voxels and their 6 masked neighbours (-1 if absent)."""
    lin = -np.ones(mask.shape, dtype=np.int64)
    coords = np.argwhere(mask)
    lin[tuple(coords.T)] = np.arange(len(coords))
    nbr = -np.ones((len(coords), 6), dtype=np.int64)
    dims = np.array(mask.shape)
    for d, (axis, s) in enumerate(_NEIGHBOURS):
        c = coords.copy()
        c[:, axis] += s
        ok = (c[:, axis] >= 0) & (c[:, axis] < dims[axis])
        nbr[ok, d] = lin[tuple(c[ok].T)]
    return coords, lin, nbr


def laplacian_energy(w, nbr, spacing) -> float:
    """sum over mask edges of ((w_i - w_j) / h)^2 times voxel volume."""
    vol = float(np.prod(spacing))
    e = 0.0
    for d, (axis, s) in enumerate(_NEIGHBOURS):
        if s < 0:
            continue
        ok = nbr[:, d] >= 0
        diff = w[ok] - w[nbr[ok, d]]
        e += float(np.sum(diff * diff)) / spacing[axis] ** 2
    return e * vol


def solve_weights(boundary_index, boundary_weights, mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                  max_iters: int = 20000, tol: float = 1e-9, step: float | None = None,
                  extend_exterior: bool = True) -> WeightField:
    """Projected gradient descent on the discrete Laplacian energy.

    ``step`` is the explicit update size (mm^2); default 0.9 x the stability
    bound. Stops once the largest per-iteration weight change is <= ``tol``.
    Raises Diverged after 10 consecutive iterations above the lowest energy
    seen, which includes 10 consecutive increases.
    """
    mask = np.asarray(mask, dtype=bool)
    spacing = tuple(float(s) for s in spacing)
    bidx = np.asarray(boundary_index, dtype=np.int64).reshape(-1, 3)
    bw = np.atleast_2d(np.asarray(boundary_weights, dtype=float))
    if len(bidx) == 0:
        raise EmptyBoundary("no Dirichlet voxels supplied")
    if len(bw) != len(bidx):
        raise DimensionMismatch("boundary indices and weights differ in length")
    if not mask[tuple(bidx.T)].all():
        raise DimensionMismatch("Dirichlet voxels must lie inside the mask")
    K = bw.shape[1]
    n_comp = ndimage.label(mask)[1]
    if n_comp > 1:
        warnings.warn(f"interior mask has {n_comp} connected components", RuntimeWarning, stacklevel=2)

    coords, lin, nbr = _neighbour_table(mask)
    brow = lin[tuple(bidx.T)]
    fixed = np.zeros(len(coords), dtype=bool)
    fixed[brow] = True
    free = ~fixed

    # start from the nearest boundary voxel's data
    seed = np.zeros(mask.shape, dtype=bool)
    seed[tuple(bidx.T)] = True
    bgrid = np.zeros(mask.shape + (K,))
    bgrid[tuple(bidx.T)] = bw
    _, near = ndimage.distance_transform_edt(~seed, sampling=spacing, return_indices=True)
    w = bgrid[near[0][mask], near[1][mask], near[2][mask]]
    w = project_simplex(w)
    w[brow] = bw

    tau = 0.9 * stable_step(spacing) if step is None else float(step)
    inv_h2 = [1.0 / spacing[axis] ** 2 for axis, _ in _NEIGHBOURS]
    energy = laplacian_energy(w, nbr, spacing)
    energies = [energy]
    ups, it, converged = 0, 0, False
    best = energy
    has_nbr = nbr >= 0
    safe_nbr = np.where(has_nbr, nbr, 0)

    if K > 1 and free.any():
        for it in range(1, max_iters + 1):
            lap = np.zeros_like(w)
            for d in range(6):
                lap += has_nbr[:, d, None] * (w[safe_nbr[:, d]] - w) * inv_h2[d]
            w_new = w.copy()
            w_new[free] = project_simplex(w[free] + tau * lap[free])
            change = float(np.abs(w_new - w).max())
            w = w_new
            energy = laplacian_energy(w, nbr, spacing)
            # above the best energy so far: catches monotone blow-up and the
            # bounded oscillation that projection turns it into
            best = min(best, energies[-1])
            ups = ups + 1 if energy > best + 1e-12 * max(1.0, best) else 0
            energies.append(energy)
            if ups >= 10:
                raise Diverged(f"energy failed to decrease for 10 consecutive iterations (step {tau:g} too large?)")
            if change <= tol:
                converged = True
                break
    else:
        converged = True

    log.debug("weight solve: %d iterations, energy %.6g", it, energy)
    full = np.zeros(mask.shape + (K,))
    full[tuple(coords.T)] = w
    if extend_exterior:
        full = extend_from_mask(full, mask)
    grid = VolumeGrid(full, spacing, origin, mask=mask)
    return WeightField(grid, bidx, energies, it, converged)


def solve_mesh_weights(mesh: SurfaceMesh, vertex_weights, grid: GridSpec, mask, **kwargs) -> WeightField:
    idx, vals = rasterize_boundary_weights(mesh, vertex_weights, grid, mask)
    return solve_weights(idx, vals, mask, grid.spacing, grid.origin, **kwargs)
