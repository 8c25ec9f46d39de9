"""Groupwise refinement of per-subject joint transforms.

Each subject s has native image I_s, part transforms T_{s,k} and canonical
skinning weights. Twists xi_{s,k} perturb the transforms to
(I + hat(xi)) T and the objective is the cross-subject intensity variance
over the canonical interior plus lambda * sum |xi|^2.

Only differences between subjects' twists on the same part are identified by
the data term; the regulariser picks the smallest-norm representative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .deform import KTPOLYRIGID, EVALUATORS
from .errors import DimensionMismatch, TwistTooLarge
from .lie import as_matrices, hat, se3_exp
from .volume import GridSpec, VolumeGrid, sample_trilinear

log = logging.getLogger(__name__)

MAX_OMEGA = 0.3
MAX_HALVINGS = 8


def perturb_transform(T, xi, exact: bool = False) -> np.ndarray:
    """Left perturbation of a 4x4 transform: (I + hat(xi)) T, or exp(xi) T with ``exact``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    w = float(np.linalg.norm(xi[:3]))
    if w > MAX_OMEGA + 1e-12:
        raise TwistTooLarge(f"|omega| = {w:.4f} exceeds the linearisation limit {MAX_OMEGA}")
    T = as_matrices([T])[0]
    if exact:
        return se3_exp(xi).matrix @ T
    return (np.eye(4) + hat(xi)) @ T


def perturb_all(transforms, xi) -> np.ndarray:
    """Batch linearised perturbation (K, 4, 4) with twists (K, 6); no size check."""
    return (np.eye(4) + hat(np.asarray(xi, dtype=float))) @ as_matrices(transforms)


def clip_rotations(xi, limit: float = MAX_OMEGA) -> np.ndarray:
    """Scale rotation parts back onto |omega| <= limit."""
    xi = np.array(xi, dtype=float)
    n = np.linalg.norm(xi[..., :3], axis=-1, keepdims=True)
    xi[..., :3] *= np.minimum(1.0, limit / np.maximum(n, 1e-300))
    return xi


@dataclass
class Subject:
    image: VolumeGrid              # native image
    transforms: np.ndarray         # (K, 4, 4) canonical -> native part transforms
    weights: VolumeGrid            # K-channel canonical weights
    shape: VolumeGrid | None = None  # optional canonical -> subject-shape displacement, applied before the pose
    name: str = ""

    def __post_init__(self):
        self.transforms = as_matrices(self.transforms)


@dataclass
class Cohort:
    subjects: list
    grid: GridSpec
    mask: np.ndarray
    method: str = KTPOLYRIGID

    def __post_init__(self):
        if not self.subjects:
            raise DimensionMismatch("cohort is empty")
        Ks = {len(s.transforms) for s in self.subjects}
        if len(Ks) != 1:
            raise DimensionMismatch(f"subjects disagree on the number of parts: {sorted(Ks)}")
        for s in self.subjects:
            if s.weights.channels != self.K:
                raise DimensionMismatch("weight channels do not match the number of parts")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.grid.dims:
            raise DimensionMismatch(f"mask shape {self.mask.shape} does not match grid {self.grid.dims}")
        self._cache = None

    @property
    def S(self) -> int:
        return len(self.subjects)

    @property
    def K(self) -> int:
        return len(self.subjects[0].transforms)

    def points(self) -> np.ndarray:
        return self.grid.to_world(np.argwhere(self.mask))

    def prepared(self):
        """Per subject: pre-pose points Y and weights W read at the canonical points (twist independent)."""
        if self._cache is None:
            X = self.points()
            prep = []
            for s in self.subjects:
                Y = X if s.shape is None else X + sample_trilinear(s.shape, X, outside="clamp")
                prep.append((Y, sample_trilinear(s.weights, X, outside="clamp")))
            self._cache = prep
        return self._cache

    def length_scale(self) -> float:
        X = self.points()
        return float(np.sqrt(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))) if len(X) else 1.0


def zero_bank(cohort: Cohort) -> np.ndarray:
    return np.zeros((cohort.S, cohort.K, 6))


def subject_values(cohort: Cohort, s: int, xi_s, grad: bool = False):
    """I_s(Phi_s(x)) over the interior, optionally with the image gradient and mapped points."""
    Y, W = cohort.prepared()[s]
    sub = cohort.subjects[s]
    T = perturb_all(sub.transforms, xi_s)
    Z = EVALUATORS[cohort.method](Y, T, W)
    if grad:
        vals, g = sample_trilinear(sub.image, Z, outside="zero", grad=True)
        return vals, g, Z
    return sample_trilinear(sub.image, Z, outside="zero")


def _data_term(values, vol, mean=None):
    m = values.mean(axis=0) if mean is None else mean
    return vol * float(np.sum((values - m) ** 2))


def cohort_mean(cohort: Cohort, xi=None) -> VolumeGrid:
    """Voxelwise mean of the subjects' canonical images (zero outside the mask)."""
    xi = zero_bank(cohort) if xi is None else np.asarray(xi, dtype=float)
    vals = np.stack([subject_values(cohort, s, xi[s]) for s in range(cohort.S)])
    out = np.zeros(cohort.grid.dims)
    out[cohort.mask] = vals.mean(axis=0)
    return VolumeGrid.on(cohort.grid, out, mask=cohort.mask)


def objective(cohort: Cohort, xi, lam: float, values=None):
    """(loss, data term, regulariser) for the twist bank ``xi`` (S, K, 6)."""
    xi = np.asarray(xi, dtype=float)
    if values is None:
        values = np.stack([subject_values(cohort, s, xi[s]) for s in range(cohort.S)])
    data = _data_term(values, cohort.grid.voxel_volume)
    reg = lam * float(np.sum(xi * xi))
    return data + reg, data, reg


def fd_gradient(cohort: Cohort, xi, lam: float, values=None, h_rot: float | None = None,
                h_trans: float = 1e-2, mean=None) -> np.ndarray:
    """Central differences over every twist coordinate (12 S K objective probes).

    ``mean`` freezes the cohort mean instead of recomputing it per probe.
    """
    xi = np.asarray(xi, dtype=float)
    if values is None:
        values = np.stack([subject_values(cohort, s, xi[s]) for s in range(cohort.S)])
    if h_rot is None:
        h_rot = h_trans / cohort.length_scale()
    vol = cohort.grid.voxel_volume
    g = np.zeros_like(xi)
    for s in range(cohort.S):
        for k in range(cohort.K):
            for c in range(6):
                h = h_rot if c < 3 else h_trans
                f = []
                for sign in (1.0, -1.0):
                    x2 = xi.copy()
                    x2[s, k, c] += sign * h
                    v2 = values.copy()
                    v2[s] = subject_values(cohort, s, x2[s])
                    f.append(_data_term(v2, vol, mean) + lam * float(np.sum(x2 * x2)))
                g[s, k, c] = (f[0] - f[1]) / (2.0 * h)
    return g


def analytic_gradient(cohort: Cohort, xi, lam: float, mean=None) -> np.ndarray:
    """First-order chain rule through the linearised action.

    Moving part k by a twist moves a point by about w_k (omega x p_k + v),
    with p_k = T_k y; the cohort-mean term drops because residuals sum to 0.
    """
    xi = np.asarray(xi, dtype=float)
    vals, grads = [], []
    for s in range(cohort.S):
        v, gI, _ = subject_values(cohort, s, xi[s], grad=True)
        vals.append(v)
        grads.append(gI)
    vals = np.stack(vals)
    m = vals.mean(axis=0) if mean is None else mean
    vol = cohort.grid.voxel_volume
    g = np.zeros_like(xi)
    for s in range(cohort.S):
        Y, W = cohort.prepared()[s]
        T = perturb_all(cohort.subjects[s].transforms, xi[s])
        r = 2.0 * vol * (vals[s] - m)
        rg = r[:, None] * grads[s]
        for k in range(cohort.K):
            p = Y @ T[k, :3, :3].T + T[k, :3, 3]
            wk = W[:, k:k + 1]
            g[s, k, :3] = np.sum(wk * np.cross(p, rg), axis=0)
            g[s, k, 3:] = np.sum(wk * rg, axis=0)
    return g + 2.0 * lam * xi


@dataclass
class GroupwiseConfig:
    lam: float | None = None        # default 1e-2 x image variance over the interior
    step: float | None = None       # largest per-coordinate move (mm-equivalent); default min spacing
    max_iters: int = 50
    grad_mode: str = "fd"           # "fd" | "analytic"
    frozen_mean: bool = False
    rel_tol: float = 1e-6


@dataclass
class GroupwiseResult:
    xi: np.ndarray
    trace: list                     # (loss, data, reg) per accepted iterate, starting at the initial bank
    status: str = "max_iters"
    lam: float = 0.0
    steps: list = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([t[0] for t in self.trace])


def default_lambda(cohort: Cohort) -> float:
    vals = np.concatenate([subject_values(cohort, s, np.zeros((cohort.K, 6))) for s in range(cohort.S)])
    return 1e-2 * float(np.var(vals)) if vals.size else 0.0


def optimize(cohort: Cohort, config: GroupwiseConfig | None = None, xi0=None) -> GroupwiseResult:
    """Gradient descent with a halving line search on the joint twist bank.

    Rotation coordinates are scaled by the interior's RMS radius so that a
    step moves every coordinate by at most ``step`` mm-equivalent. After
    each accepted step the trial size doubles (capped at ``step``). If 8
    halvings all fail the search stops with status ``LineSearchStalled`` and
    the best bank so far.
    """
    cfg = config or GroupwiseConfig()
    if cfg.grad_mode not in ("fd", "analytic"):
        raise ValueError(f"grad_mode must be 'fd' or 'analytic', got {cfg.grad_mode!r}")
    lam = default_lambda(cohort) if cfg.lam is None else float(cfg.lam)
    step_max = float(min(cohort.grid.spacing)) if cfg.step is None else float(cfg.step)
    L = cohort.length_scale()
    scale = np.array([1.0 / L] * 3 + [1.0] * 3)

    xi = zero_bank(cohort) if xi0 is None else clip_rotations(np.asarray(xi0, dtype=float))
    values = np.stack([subject_values(cohort, s, xi[s]) for s in range(cohort.S)])
    loss, data, reg = objective(cohort, xi, lam, values)
    res = GroupwiseResult(xi.copy(), [(loss, data, reg)], "max_iters", lam)
    alpha = step_max
    for it in range(cfg.max_iters):
        mean = values.mean(axis=0) if cfg.frozen_mean else None
        if cfg.grad_mode == "fd":
            g = fd_gradient(cohort, xi, lam, values, mean=mean)
        else:
            g = analytic_gradient(cohort, xi, lam, mean=mean)
        gs = g * scale              # gradient in scaled coordinates
        gmax = float(np.abs(gs).max())
        if gmax == 0.0 or not np.isfinite(gmax):
            res.status = "converged"
            break
        direction = -gs / gmax * scale
        accepted = False
        a = alpha
        for _ in range(MAX_HALVINGS + 1):
            trial = clip_rotations(xi + a * direction)
            tv = np.stack([subject_values(cohort, s, trial[s]) for s in range(cohort.S)])
            if cfg.frozen_mean:
                t_loss = _data_term(tv, cohort.grid.voxel_volume, mean) + lam * float(np.sum(trial ** 2))
                ref = _data_term(values, cohort.grid.voxel_volume, mean) + reg
            else:
                t_loss, ref = objective(cohort, trial, lam, tv)[0], loss
            if t_loss < ref:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            res.status = "LineSearchStalled"
            break
        new_loss, data, reg = objective(cohort, trial, lam, tv)
        if new_loss > loss and cfg.frozen_mean:
            res.status = "LineSearchStalled"
            break
        rel = (loss - new_loss) / max(abs(loss), 1e-300)
        xi, values, loss = trial, tv, new_loss
        res.xi = xi.copy()
        res.trace.append((loss, data, reg))
        res.steps.append(a)
        log.debug("groupwise iter %d loss %.6g step %.3g", it, loss, a)
        alpha = min(2.0 * a, step_max)
        if rel < cfg.rel_tol:
            res.status = "converged"
            break
    return res


def relative_twists(xi, subject: int) -> np.ndarray:
    """Twist of one subject relative to the mean of the others, per part (K, 6)."""
    xi = np.asarray(xi, dtype=float)
    others = np.delete(xi, subject, axis=0)
    return xi[subject] - others.mean(axis=0)
