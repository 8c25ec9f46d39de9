"""Shape-standardising flow: MVC velocity driven by a linear shape path.

The boundary moves along V(t) = V_mean + B (beta(t)) with
beta(t) = (1 - t) beta_start + t beta_end, so every vertex has the constant
velocity B (beta_end - beta_start). Interior points follow the mean value
interpolation of that velocity against the boundary at time t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, LeftDomain
from .kinematics import ShapeBasis
from .mesh import SurfaceMesh, closest_points, voxelize
from .mvc import EPS_SURF, mvc_interpolate
from .volume import GridSpec, VolumeGrid, extend_from_mask

DEFAULT_STEPS = 16


@dataclass
class FlowSpec:
    beta_start: np.ndarray
    beta_end: np.ndarray
    basis: ShapeBasis
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        self.beta_start = self.basis.check_beta(self.beta_start)
        self.beta_end = self.basis.check_beta(self.beta_end)
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        self.steps = int(self.steps)

    def beta_at(self, t: float) -> np.ndarray:
        return (1.0 - t) * self.beta_start + t * self.beta_end

    def vertices_at(self, t: float) -> np.ndarray:
        return self.basis.mean_vertices + self.basis.offsets(self.beta_at(t))


def boundary_velocity(basis: ShapeBasis, beta_start, beta_end) -> np.ndarray:
    """Per-vertex velocity B (beta_end - beta_start), constant in t."""
    b0 = np.asarray(beta_start, dtype=float).reshape(-1)
    b1 = np.asarray(beta_end, dtype=float).reshape(-1)
    if b0.shape != b1.shape or b0.shape != (basis.beta_dim,):
        raise DimensionMismatch(f"beta vectors must both have length {basis.beta_dim}, "
                                f"got {b0.shape[0]} and {b1.shape[0]}")
    return basis.offsets(b1 - b0)


@dataclass
class FlowResult:
    points: np.ndarray        # (P, 3) end positions
    left_domain: np.ndarray   # (P,) bool, point was outside the moving mesh at some step
    on_surface: np.ndarray    # (P,) bool, used the closest-point fallback at some step


def velocity_at(mesh: SurfaceMesh, vertex_velocity, points, eps_surf: float = EPS_SURF):
    """MVC-interpolated velocity at points; near-surface points use the closest face.

    Returns ``(velocity (P, 3), winding number (P,), fallback mask (P,))``.
    """
    vel, dist, wind = mvc_interpolate(points, mesh, vertex_velocity, eps_surf)
    near = dist <= eps_surf
    if near.any():
        face, bary, _ = closest_points(mesh, points[near])
        vel[near] = np.einsum("pi,pij->pj", bary, vertex_velocity[mesh.faces[face]])
        wind[near] = 1.0
    return vel, wind, near


def integrate_flow(spec: FlowSpec, mesh0: SurfaceMesh, points, freeze: bool = False,
                   eps_surf: float = EPS_SURF, strict: bool = False) -> FlowResult:
    """Explicit Euler integration of the boundary-driven flow from t = 0 to 1.

    ``mesh0`` supplies the connectivity; its vertices are replaced by the shape
    path. With ``freeze`` the coordinates are computed once against the t = 0
    boundary. Points found outside the moving mesh are flagged in
    ``left_domain`` (or raise LeftDomain with ``strict``).
    """
    X = np.array(points, dtype=float).reshape(-1, 3)
    vdot = boundary_velocity(spec.basis, spec.beta_start, spec.beta_end)
    left = np.zeros(len(X), dtype=bool)
    near_any = np.zeros(len(X), dtype=bool)
    if not np.any(vdot) or len(X) == 0:
        return FlowResult(X, left, near_any)
    dt = 1.0 / spec.steps
    frozen = None
    for n in range(spec.steps):
        t = n * dt
        if frozen is None:
            mesh_t = mesh0.with_vertices(spec.vertices_at(t))
            v, wind, near = velocity_at(mesh_t, vdot, X, eps_surf)
            near_any |= near
            left |= wind < 0.5
            if freeze:
                frozen = v
        else:
            v = frozen
        X = X + dt * v
    if strict and left.any():
        raise LeftDomain(np.flatnonzero(left))
    return FlowResult(X, left, near_any)


def flow_dense(spec: FlowSpec, mesh0: SurfaceMesh, grid: GridSpec, mask=None, freeze: bool = False,
               eps_surf: float = EPS_SURF):
    """Dense displacement of the flow on ``grid``.

    Interior voxels (``mask``, default: voxels inside the t = 0 mesh) are
    integrated. End points outside the t = 1 domain are snapped to the nearest
    voxel centre inside it and flagged. Exterior voxels copy their nearest
    interior displacement.

    Returns ``(displacement VolumeGrid, flagged voxel mask)``.
    """
    if mask is None:
        mask = voxelize(mesh0.with_vertices(spec.vertices_at(0.0)), grid)
    mask = np.asarray(mask, dtype=bool)
    idx = np.argwhere(mask)
    X = grid.to_world(idx)
    res = integrate_flow(spec, mesh0, X, freeze=freeze, eps_surf=eps_surf)
    Y = res.points
    end_mask = voxelize(mesh0.with_vertices(spec.vertices_at(1.0)), grid)
    flagged = res.left_domain.copy()
    if end_mask.any():
        ijk = np.rint(grid.to_index(Y)).astype(np.int64)
        inb = np.all((ijk >= 0) & (ijk < np.array(grid.dims)), axis=1)
        outside = ~inb.copy()
        outside[inb] = ~end_mask[tuple(ijk[inb].T)]
        if outside.any():
            _, near = ndimage.distance_transform_edt(~end_mask, sampling=grid.spacing, return_indices=True)
            c = np.clip(ijk[outside], 0, np.array(grid.dims) - 1)
            snap = np.stack([near[a][tuple(c.T)] for a in range(3)], axis=1)
            Y[outside] = grid.to_world(snap)
            flagged |= outside
    disp = np.zeros(grid.dims + (3,))
    disp[tuple(idx.T)] = Y - X
    disp = extend_from_mask(disp, mask)
    flags = np.zeros(grid.dims, dtype=bool)
    flags[tuple(idx.T)] = flagged
    return VolumeGrid.on(grid, disp, mask=mask), flags
