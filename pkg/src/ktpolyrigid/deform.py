"""Articulated volumetric deformations and dense-field utilities.

All articulated fields map canonical coordinates to native (posed) ones, and
images are resampled by pull-back: ``out(x) = image(phi(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .lie import (BRANCH_EPS, affine_exp_batch, affine_log, as_matrices, is_rigid, se3_exp_batch,
                  se3_log)
from .volume import GridSpec, VolumeGrid, sample_nearest, sample_trilinear

LBS = "lbs"
POLYRIGID = "polyrigid"
KTPOLYRIGID = "ktpolyrigid"
FLOW = "flow"
COMPOSITE = "composite"
METHODS = (LBS, POLYRIGID, KTPOLYRIGID)

WEIGHT_FLOOR = 1e-6


def _prep(x, weights):
    x = np.asarray(x, dtype=float)
    w = np.asarray(weights, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), np.atleast_2d(w), single


def _apply_mats(M, x):
    return np.einsum("...ij,...j->...i", M[..., :3, :3], x) + M[..., :3, 3]


def select_reference(weights) -> np.ndarray | int:
    """Index of the largest weight; ties go to the smallest index."""
    w = np.asarray(weights, dtype=float)
    ref = np.argmax(w, axis=-1)
    return int(ref) if np.ndim(ref) == 0 else ref


def eval_lbs(x, transforms, weights) -> np.ndarray:
    """Convex combination of the transform matrices applied to x."""
    M = as_matrices(transforms)
    X, W, single = _prep(x, weights)
    # displacement form: exact zero for identity parts even if stored weights sum to 1 only approximately
    disp = np.zeros_like(X)
    for k in range(len(M)):
        disp += W[:, k:k + 1] * (X @ M[k, :3, :3].T + M[k, :3, 3] - X)
    out = X + disp
    return out[0] if single else out


def _blend_exp(X, W, logs, rigid):
    """exp(sum_k w_k L_k) applied to X; logs are 6-vectors (rigid) or 4x4."""
    if rigid:
        xi = W @ logs
        R, t = se3_exp_batch(xi)
        return np.einsum("nij,nj->ni", R, X) + t
    A = np.einsum("nk,kij->nij", W, logs)
    E = affine_exp_batch(A)
    return _apply_mats(E, X)


def eval_polyrigid(x, transforms, weights, branch_eps: float = BRANCH_EPS) -> np.ndarray:
    """exp(sum_k w_k log T_k) applied to x. Raises BranchAmbiguity if any T_k is too large."""
    M = as_matrices(transforms)
    X, W, single = _prep(x, weights)
    rigid = is_rigid(M)
    if rigid:
        logs = np.stack([se3_log(m, branch_eps).as_vector() for m in M])
    else:
        logs = np.stack([affine_log(m, branch_eps) for m in M])
    out = _blend_exp(X, W, logs, rigid)
    return out[0] if single else out


def _inv(m, rigid):
    if rigid:
        out = np.eye(4)
        out[:3, :3] = m[:3, :3].T
        out[:3, 3] = -m[:3, :3].T @ m[:3, 3]
        return out
    return np.linalg.inv(m)


def eval_ktpolyrigid(x, transforms, weights, reference=None, weight_floor: float = WEIGHT_FLOOR,
                     branch_eps: float = BRANCH_EPS) -> np.ndarray:
    """T_ref o exp(sum_k w_k log(T_ref^-1 T_k)) applied to x.

    The reference is the arg-max weight part unless given. Parts with
    ``w_k <= weight_floor`` are dropped from the sum, so their relative log
    never has to exist.
    """
    M = as_matrices(transforms)
    X, W, single = _prep(x, weights)
    rigid = is_rigid(M)
    ref = select_reference(W) if reference is None else np.broadcast_to(np.asarray(reference), (len(X),))
    Wk = np.where(W > weight_floor, W, 0.0)
    out = np.empty_like(X)
    for r in np.unique(ref):
        sel = ref == r
        ws = Wk[sel]
        Tr_inv = _inv(M[r], rigid)
        used = np.flatnonzero(ws.max(axis=0) > 0)
        logs = np.zeros((len(M), 6) if rigid else (len(M), 4, 4))
        for k in used:
            if k == r:
                continue
            rel = Tr_inv @ M[k]
            logs[k] = se3_log(rel, branch_eps).as_vector() if rigid else affine_log(rel, branch_eps)
        local = _blend_exp(X[sel], ws, logs, rigid)
        out[sel] = _apply_mats(M[r], local)
    return out[0] if single else out


EVALUATORS = {LBS: eval_lbs, POLYRIGID: eval_polyrigid, KTPOLYRIGID: eval_ktpolyrigid}


# =============================================================================
# field objects
# =============================================================================

@dataclass
class DeformationField:
    """A map from canonical to native coordinates.

    Articulated kinds carry ``transforms`` (K, 4, 4) and a K-channel weight
    volume; ``flow`` carries a dense displacement volume; ``composite`` holds
    ``parts = (outer, inner)`` and evaluates outer(inner(x)).

    An articulated field may carry a ``shape`` displacement: the pose then acts
    on x + shape(x) while the weights are still read at x.
    """

    kind: str
    transforms: np.ndarray | None = None
    weights: VolumeGrid | None = None
    displacement: VolumeGrid | None = None
    parts: tuple = ()
    shape: VolumeGrid | None = None
    weight_floor: float = WEIGHT_FLOOR
    branch_eps: float = BRANCH_EPS

    def __post_init__(self):
        if self.transforms is not None:
            self.transforms = as_matrices(self.transforms)

    @classmethod
    def articulated(cls, method: str, transforms, weights, shape: VolumeGrid | None = None) -> "DeformationField":
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        grid = getattr(weights, "grid", weights)
        return cls(method, transforms=transforms, weights=grid, shape=shape)

    @classmethod
    def dense(cls, displacement: VolumeGrid, kind: str = FLOW) -> "DeformationField":
        return cls(kind, displacement=displacement)

    @classmethod
    def compose(cls, outer: "DeformationField", inner: "DeformationField") -> "DeformationField":
        return cls(COMPOSITE, parts=(outer, inner))

    def weights_at(self, x) -> np.ndarray:
        return sample_trilinear(self.weights, x, outside="clamp")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = x.shape
        X = x.reshape(-1, 3)
        if self.kind == COMPOSITE:
            outer, inner = self.parts
            Y = outer(inner(X))
        elif self.displacement is not None:
            Y = X + sample_trilinear(self.displacement, X, outside="clamp")
        else:
            W = self.weights_at(X)
            if self.shape is not None:
                X = X + sample_trilinear(self.shape, X, outside="clamp")
            if self.kind == LBS:
                Y = eval_lbs(X, self.transforms, W)
            elif self.kind == POLYRIGID:
                Y = eval_polyrigid(X, self.transforms, W, self.branch_eps)
            elif self.kind == KTPOLYRIGID:
                Y = eval_ktpolyrigid(X, self.transforms, W, weight_floor=self.weight_floor,
                                     branch_eps=self.branch_eps)
            else:
                raise ValueError(f"field kind {self.kind!r} needs a displacement volume")
        return Y.reshape(shape)


def sample_dense(field: DeformationField, grid: GridSpec, chunk: int = 1 << 18) -> VolumeGrid:
    """Displacement u(x) = phi(x) - x at every voxel centre (3 channels, mm)."""
    X = grid.centers().reshape(-1, 3)
    U = np.empty_like(X)
    for s in range(0, len(X), chunk):
        U[s:s + chunk] = field(X[s:s + chunk]) - X[s:s + chunk]
    return VolumeGrid.on(grid, U.reshape(grid.dims + (3,)))


def displacement_of(field, grid: GridSpec) -> VolumeGrid:
    if isinstance(field, VolumeGrid):
        return field
    return sample_dense(field, grid)


def map_points(field, X) -> np.ndarray:
    """phi(X) for a DeformationField or a displacement volume."""
    if isinstance(field, VolumeGrid):
        return X + sample_trilinear(field, X, outside="clamp")
    return field(X)


# =============================================================================
# inversion
# =============================================================================

def invert_field(displacement: VolumeGrid, max_iters: int = 50, tol: float = 0.05,
                 out_grid: GridSpec | None = None, max_halvings: int = 6, domain=None):
    """Numerical inverse of a dense displacement field.

    For every output voxel y we solve y = z + u(z). The start is the lattice
    point whose forward image lies nearest y; iterations are damped Newton
    steps on the trilinear interpolant (plain fixed-point steps where the
    local Jacobian is singular). ``tol`` is in voxels.

    ``domain`` (a mask on the field's grid, e.g. the body interior) resolves
    preimage ambiguity: outside the domain the field is only an extension and
    may map onto the same points as the interior, so starts are taken from
    domain voxels whenever y lies within a voxel diagonal of the domain's image.

    Returns ``(inverse displacement volume, validity mask)``.
    """
    spec = displacement.spec
    out = out_grid or spec
    X = spec.centers().reshape(-1, 3)
    P = X + displacement.data.reshape(-1, 3)
    Y = out.centers().reshape(-1, 3)
    _, nn = cKDTree(P).query(Y)
    if domain is not None:
        inside = np.flatnonzero(np.asarray(domain, dtype=bool).reshape(-1))
        if inside.size:
            d_in, nn_in = cKDTree(P[inside]).query(Y)
            near = d_in <= float(np.linalg.norm(spec.spacing))
            nn[near] = inside[nn_in[near]]
    z = X[nn].copy()
    tol_mm = tol * min(out.spacing)

    def residual(zz, yy):
        u, g = sample_trilinear(displacement, zz, outside="clamp", grad=True)
        return zz + u - yy, g

    r, g = residual(z, Y)
    err = np.linalg.norm(r, axis=1)
    active = np.flatnonzero(err > tol_mm)
    I = np.eye(3)
    for _ in range(max_iters):
        if active.size == 0:
            break
        J = I + g[active]
        det = np.linalg.det(J)
        step = r[active].copy()
        ok = np.abs(det) > 1e-8
        if ok.any():
            step[ok] = np.linalg.solve(J[ok], r[active][ok][..., None])[..., 0]
        alpha = np.ones(active.size)
        pending = np.arange(active.size)
        for _h in range(max_halvings + 1):
            idx = active[pending]
            z_try = z[idx] - alpha[pending, None] * step[pending]
            r_try, g_try = residual(z_try, Y[idx])
            e_try = np.linalg.norm(r_try, axis=1)
            better = e_try < err[idx]
            acc = idx[better]
            z[acc] = z_try[better]
            r[acc] = r_try[better]
            g[acc] = g_try[better]
            err[acc] = e_try[better]
            pending = pending[~better]
            if pending.size == 0:
                break
            alpha[pending] *= 0.5
        # anything that could not improve keeps its iterate; drop it
        stuck = np.zeros(active.size, dtype=bool)
        stuck[pending] = True
        active = active[~stuck & (err[active] > tol_mm)]
    valid = (err <= tol_mm).reshape(out.dims)
    inv = VolumeGrid.on(out, (z - Y).reshape(out.dims + (3,)), mask=valid)
    return inv, valid


def roundtrip_error(forward: VolumeGrid, inverse: VolumeGrid) -> np.ndarray:
    """|phi(phi^-1(y)) - y| in mm on the inverse's grid."""
    Y = inverse.spec.centers().reshape(-1, 3)
    Z = Y + inverse.data.reshape(-1, 3)
    back = Z + sample_trilinear(forward, Z, outside="clamp")
    return np.linalg.norm(back - Y, axis=1).reshape(inverse.dims)


# =============================================================================
# resampling
# =============================================================================

def resample_image(image: VolumeGrid, field, out_grid: GridSpec | None = None,
                   nearest: bool = False) -> VolumeGrid:
    """Pull-back: out(x) = image(phi(x)); samples outside the image are 0."""
    out = out_grid or image.spec
    X = out.centers().reshape(-1, 3)
    if isinstance(field, VolumeGrid) and field.spec == out:
        Y = X + field.data.reshape(-1, 3)
    else:
        Y = map_points(field, X)
    vals = sample_nearest(image, Y) if nearest else sample_trilinear(image, Y, outside="zero")
    return VolumeGrid.on(out, vals.reshape(out.dims + image.data.shape[3:]).astype(image.data.dtype
                                                                                   if nearest else float))


def resample_labels(labels: VolumeGrid, field, out_grid: GridSpec | None = None) -> VolumeGrid:
    return resample_image(labels, field, out_grid, nearest=True)
