"""Kinematic tree, angle-axis pose, forward kinematics and linear shape basis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidTree
from .lie import RigidTransform, compose, skew, so3_exp


@dataclass
class KinematicTree:
    parent: list
    rest_joint: np.ndarray
    part_names: list = field(default_factory=list)

    def __post_init__(self):
        self.parent = [None if p is None or (isinstance(p, (int, np.integer)) and p < 0) else int(p)
                       for p in self.parent]
        self.rest_joint = np.asarray(self.rest_joint, dtype=float).reshape(-1, 3)
        if not self.part_names:
            self.part_names = [f"part{k}" for k in range(len(self.parent))]
        if len(self.rest_joint) != len(self.parent) or len(self.part_names) != len(self.parent):
            raise InvalidTree("parent, rest_joint and part_names must have equal length")
        self._order = self._topological_order()
        for k, p in enumerate(self.parent):
            if p is not None and np.linalg.norm(self.rest_joint[k] - self.rest_joint[p]) <= 1e-6:
                raise InvalidTree(f"part {k} has a degenerate bone (joint coincides with parent's)")

    @property
    def K(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return self._order[0]

    @property
    def order(self) -> list:
        """Parts in root-to-leaf order."""
        return list(self._order)

    def _topological_order(self) -> list:
        K = len(self.parent)
        roots = [k for k, p in enumerate(self.parent) if p is None]
        if len(roots) != 1:
            raise InvalidTree(f"tree must have exactly one root, found {len(roots)}")
        children = [[] for _ in range(K)]
        for k, p in enumerate(self.parent):
            if p is not None:
                if not 0 <= p < K:
                    raise InvalidTree(f"part {k} has out-of-range parent {p}")
                children[p].append(k)
        order, stack = [], [roots[0]]
        while stack:
            k = stack.pop()
            order.append(k)
            stack.extend(reversed(children[k]))
        if len(order) != K:
            raise InvalidTree("parent indices contain a cycle or disconnected parts")
        return order

    def children(self, k: int) -> list:
        return [c for c, p in enumerate(self.parent) if p == k]

    def path_to_root(self, k: int) -> list:
        """[k, parent(k), ..., root]."""
        path = [k]
        while self.parent[path[-1]] is not None:
            path.append(self.parent[path[-1]])
        return path


def validate_pose(tree: KinematicTree, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (tree.K, 3):
        raise DimensionMismatch(f"pose must have shape ({tree.K}, 3), got {theta.shape}")
    if np.any(np.linalg.norm(theta, axis=1) >= 2 * np.pi):
        raise DimensionMismatch("angle-axis magnitudes must be < 2*pi")
    return theta


def joint_transform(theta_k, pivot) -> RigidTransform:
    """Rotation by angle-axis ``theta_k`` about ``pivot``."""
    R = so3_exp(np.asarray(theta_k, dtype=float))
    pivot = np.asarray(pivot, dtype=float)
    return RigidTransform(R, pivot - R @ pivot)


def forward_kinematics(tree: KinematicTree, theta) -> list:
    """Global part transforms T_k, mapping canonical (T-pose) to posed coordinates."""
    theta = validate_pose(tree, theta)
    T = [None] * tree.K
    for k in tree.order:
        local = joint_transform(theta[k], tree.rest_joint[k])
        p = tree.parent[k]
        T[k] = local if p is None else compose(T[p], local)
    return T


def posed_joints(tree: KinematicTree, theta) -> np.ndarray:
    """Joint positions after posing, chained parent to child."""
    theta = validate_pose(tree, theta)
    out = np.array(tree.rest_joint, copy=True)
    R_glob = [None] * tree.K
    for k in tree.order:
        p = tree.parent[k]
        Rk = so3_exp(theta[k])
        if p is None:
            R_glob[k] = Rk
            out[k] = tree.rest_joint[k]
        else:
            out[k] = out[p] + R_glob[p] @ (tree.rest_joint[k] - tree.rest_joint[p])
            R_glob[k] = R_glob[p] @ Rk
    return out


# =============================================================================
# derivatives
# =============================================================================

def _drot(theta) -> np.ndarray:
    """dR/dtheta_i for Rodrigues, shape (3, 3, 3) indexed [i]."""
    theta = np.asarray(theta, dtype=float)
    n2 = theta @ theta
    E = np.eye(3)
    if n2 < 1e-16:
        return np.stack([skew(E[i]) for i in range(3)])
    R = so3_exp(theta)
    out = []
    for i in range(3):
        term = theta[i] * skew(theta) + skew(np.cross(theta, (np.eye(3) - R) @ E[i]))
        out.append(term @ R / n2)
    return np.stack(out)


def pose_derivatives(tree: KinematicTree, theta, k: int) -> np.ndarray:
    """Analytic d(T_k 4x4)/d(theta_j,c), shape (K, 3, 4, 4)."""
    theta = validate_pose(tree, theta)
    path = tree.path_to_root(k)[::-1]  # root ... k
    locals_ = [joint_transform(theta[j], tree.rest_joint[j]).matrix for j in path]
    out = np.zeros((tree.K, 3, 4, 4))
    for pos, j in enumerate(path):
        prefix = np.eye(4)
        for M in locals_[:pos]:
            prefix = prefix @ M
        suffix = np.eye(4)
        for M in locals_[pos + 1:]:
            suffix = suffix @ M
        p = tree.rest_joint[j]
        for c, dR in enumerate(_drot(theta[j])):
            dG = np.zeros((4, 4))
            dG[:3, :3] = dR
            dG[:3, 3] = -dR @ p
            out[j, c] = prefix @ dG @ suffix
    return out


def pose_jacobian_check(tree: KinematicTree, theta, k: int, epsilon: float = 1e-5) -> float:
    """Max |analytic - central finite difference| over all dT_k/dtheta entries."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    theta = validate_pose(tree, theta)
    analytic = pose_derivatives(tree, theta, k)
    worst = 0.0
    for j in range(tree.K):
        for c in range(3):
            tp = theta.copy()
            tm = theta.copy()
            tp[j, c] += epsilon
            tm[j, c] -= epsilon
            fd = (forward_kinematics(tree, tp)[k].matrix - forward_kinematics(tree, tm)[k].matrix) / (2 * epsilon)
            worst = max(worst, float(np.abs(fd - analytic[j, c]).max()))
    return worst


# =============================================================================
# shape basis
# =============================================================================

@dataclass
class ShapeBasis:
    mean_vertices: np.ndarray
    components: np.ndarray  # (|beta|, N, 3)
    pose_blend: np.ndarray | None = None  # optional (N*3, 9*K) hook, zero by default

    def __post_init__(self):
        self.mean_vertices = np.asarray(self.mean_vertices, dtype=float).reshape(-1, 3)
        comps = np.asarray(self.components, dtype=float)
        if comps.size == 0:
            comps = comps.reshape(0, len(self.mean_vertices), 3)
        self.components = comps.reshape(-1, len(self.mean_vertices), 3)

    @property
    def beta_dim(self) -> int:
        return len(self.components)

    def check_beta(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float).reshape(-1)
        if beta.shape != (self.beta_dim,):
            raise DimensionMismatch(f"beta must have length {self.beta_dim}, got {beta.shape[0]}")
        return beta

    def offsets(self, beta) -> np.ndarray:
        beta = self.check_beta(beta)
        return np.tensordot(beta, self.components, axes=1) if self.beta_dim else np.zeros_like(self.mean_vertices)

    def pose_offsets(self, tree: KinematicTree, theta) -> np.ndarray:
        """Pose-blend-shape hook: matrix times flattened (R_k - I); zero unless configured."""
        if self.pose_blend is None:
            return np.zeros_like(self.mean_vertices)
        theta = validate_pose(tree, theta)
        resid = np.concatenate([(so3_exp(t) - np.eye(3)).ravel() for t in theta])
        return (np.asarray(self.pose_blend) @ resid).reshape(-1, 3)

    def orthogonality_error(self) -> float:
        B = self.components.reshape(self.beta_dim, -1)
        G = B @ B.T
        d = np.sqrt(np.outer(np.diag(G), np.diag(G)))
        off = np.abs(G - np.diag(np.diag(G))) / np.where(d > 0, d, 1.0)
        return float(off.max()) if off.size else 0.0


def shape_vertices(basis: ShapeBasis, beta) -> np.ndarray:
    """V(beta) = mean + sum_j beta_j * component_j."""
    return basis.mean_vertices + basis.offsets(beta)
