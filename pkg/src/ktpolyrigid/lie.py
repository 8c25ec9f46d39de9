"""SE(3) / SO(3) Lie group machinery.

Rotations are kept as 3x3 matrices; twists are ordered ``(omega, v)``.
Batched helpers (``*_batch``) work on arrays with a leading point axis and are
what the dense field evaluators call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BranchAmbiguity

SMALL_ANGLE = 1e-6
# below this the cancelling coefficients use 6-term Taylor series
_SERIES_ANGLE = 0.25
BRANCH_EPS = 1e-4
# above this angle the axis is read from the symmetric part of R
_SYMMETRIC_AXIS_ANGLE = 0.75 * np.pi


# =============================================================================
# hat / vee
# =============================================================================

def skew(w) -> np.ndarray:
    """[w]_x for a 3-vector or a stack of 3-vectors."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def unskew(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def hat(xi) -> np.ndarray:
    """4x4 se(3) matrix of a twist ``(omega, v)``."""
    xi = np.asarray(xi.as_vector() if isinstance(xi, Twist) else xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = skew(xi[..., :3])
    out[..., :3, 3] = xi[..., 3:]
    return out


def vee(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.concatenate([unskew(X[..., :3, :3]), X[..., :3, 3]], axis=-1)


# =============================================================================
# value types
# =============================================================================

@dataclass(frozen=True)
class Twist:
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, x) -> np.ndarray:
        return apply(self, x)

    def angle(self) -> float:
        return rotation_angle(self.rotation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def as_matrices(transforms) -> np.ndarray:
    """Stack a sequence of RigidTransform / 4x4 arrays into (K, 4, 4)."""
    if isinstance(transforms, np.ndarray):
        M = np.asarray(transforms, dtype=float)
        if M.ndim == 2:
            M = M[None]
        return M
    return np.stack([t.matrix if isinstance(t, RigidTransform) else np.asarray(t, dtype=float)
                     for t in transforms])


# =============================================================================
# group operations
# =============================================================================

def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """(A o B)(x) = A(B(x))."""
    return RigidTransform(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def apply(T: RigidTransform, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x @ T.rotation.T + T.translation


def rotation_angle(R) -> np.ndarray | float:
    """Angle in [0, pi] of a rotation matrix, via atan2 for accuracy near 0 and pi."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm(unskew(R - np.swapaxes(R, -1, -2)), axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    ang = np.arctan2(s, c)
    return float(ang) if np.ndim(ang) == 0 else ang


# =============================================================================
# exponential
# =============================================================================

def _exp_coeffs(theta):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series below SMALL_ANGLE.

    The last two are written without cancellation: 1 - cos t = 2 sin^2(t/2),
    and (t - sin t)/t^3 uses its Taylor series up to ``_SERIES_ANGLE``.
    """
    theta = np.asarray(theta, dtype=float)
    t2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    A = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    sh = np.sin(0.5 * safe) / safe
    B = np.where(small, 0.5 - t2 / 24.0, 2.0 * sh * sh)
    mid = theta < _SERIES_ANGLE
    C_series = 1.0 / 6.0 + t2 * (-1.0 / 120.0 + t2 * (1.0 / 5040.0 + t2 * (-1.0 / 362880.0 + t2 * (
        1.0 / 39916800.0 - t2 / 6227020800.0))))
    C = np.where(mid, C_series, (safe - np.sin(safe)) / (safe ** 3))
    return A, B, C


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula, batched over leading axes."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    A, B, _ = _exp_coeffs(theta)
    W = skew(omega)
    W2 = W @ W
    return np.eye(3) + A[..., None, None] * W + B[..., None, None] * W2


def se3_exp_batch(xi) -> tuple[np.ndarray, np.ndarray]:
    """Return (R, t) for a (..., 6) array of twists."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(omega, axis=-1)
    A, B, C = _exp_coeffs(theta)
    W = skew(omega)
    W2 = W @ W
    I = np.eye(3)
    R = I + A[..., None, None] * W + B[..., None, None] * W2
    V = I + B[..., None, None] * W + C[..., None, None] * W2
    t = np.einsum("...ij,...j->...i", V, v)
    return R, t


def se3_exp(xi) -> RigidTransform:
    vec = xi.as_vector() if isinstance(xi, Twist) else np.asarray(xi, dtype=float).reshape(6)
    R, t = se3_exp_batch(vec)
    return RigidTransform(R, t)


# =============================================================================
# logarithm
# =============================================================================

def so3_log(R, branch_eps: float = BRANCH_EPS) -> np.ndarray:
    """Principal rotation vector of R. Raises BranchAmbiguity near angle pi."""
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    limit = np.pi - branch_eps
    if theta >= limit:
        raise BranchAmbiguity(theta, limit)
    skew_part = unskew(R - R.T)  # = 2 sin(theta) * axis
    if theta < SMALL_ANGLE:
        return 0.5 * skew_part * (1.0 + theta * theta / 6.0)
    if theta > _SYMMETRIC_AXIS_ANGLE:
        c = np.cos(theta)
        aat = (R + R.T - 2.0 * c * np.eye(3)) / (2.0 * (1.0 - c))
        i = int(np.argmax(np.diag(aat)))
        axis = aat[:, i] / np.sqrt(aat[i, i])
        if axis @ skew_part < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * skew_part


def _jinv_coeff(theta: float) -> float:
    """(1 - (t/2) cot(t/2)) / t^2, the W^2 coefficient of the inverse left Jacobian."""
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        return 1.0 / 12.0 + t2 * (1.0 / 720.0 + t2 * (1.0 / 30240.0 + t2 * (1.0 / 1209600.0 + t2 * (
            1.0 / 47900160.0 + t2 * 691.0 / 1307674368000.0))))
    half = 0.5 * theta
    return (1.0 - half / np.tan(half)) / (theta * theta)


def _left_jacobian_inverse(omega) -> np.ndarray:
    W = skew(omega)
    return np.eye(3) - 0.5 * W + _jinv_coeff(float(np.linalg.norm(omega))) * (W @ W)


def se3_log(T, branch_eps: float = BRANCH_EPS) -> Twist:
    """Principal logarithm of a rigid transform.

    Raises BranchAmbiguity when the rotation angle is >= pi - branch_eps.
    """
    if not isinstance(T, RigidTransform):
        T = RigidTransform.from_matrix(T)
    omega = so3_log(T.rotation, branch_eps)
    v = _left_jacobian_inverse(omega) @ T.translation
    return Twist(omega, v)


# =============================================================================
# general affine maps (used by the linearised twist perturbation)
# =============================================================================

def is_rigid(M, tol: float = 1e-9) -> bool:
    M = np.asarray(M, dtype=float)
    R = M[..., :3, :3]
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    return bool(err <= tol and np.all(np.linalg.det(R) > 0))


def affine_log(M, branch_eps: float = BRANCH_EPS) -> np.ndarray:
    """Principal matrix log of a 4x4 affine map, returned as a 4x4 matrix.

    Rigid inputs go through ``se3_log``; anything else through scipy's logm.
    The branch guard uses the rotation angle of the polar factor.
    """
    M = np.asarray(M, dtype=float)
    if is_rigid(M):
        return hat(se3_log(M, branch_eps))
    U, _, Vt = np.linalg.svd(M[:3, :3])
    R = U @ Vt
    theta = rotation_angle(R)
    if theta >= np.pi - branch_eps:
        raise BranchAmbiguity(theta, np.pi - branch_eps)
    L = scipy.linalg.logm(M)
    L = np.real(L)
    L[3, :] = 0.0
    return L


def affine_exp_batch(A, order: int = 14) -> np.ndarray:
    """exp of a stack of 4x4 matrices with zero bottom row (scaling and squaring).

    The number of squarings is chosen per matrix, so results do not depend on
    what else is in the batch.
    """
    A = np.asarray(A, dtype=float)
    norm = np.abs(A).sum(axis=-1).max(axis=-1)
    s = np.where(norm > 0.25, np.ceil(np.log2(np.maximum(norm, 1e-300) / 0.25)), 0).astype(int)
    X = A / (2.0 ** s)[..., None, None]
    out = np.broadcast_to(np.eye(4), A.shape).copy()
    term = out.copy()
    for n in range(1, order + 1):
        term = term @ X / n
        out = out + term
    for j in range(int(s.max()) if s.size else 0):
        sel = s > j
        out[sel] = out[sel] @ out[sel]
    return out
