"""Synthetic articulated phantoms: capsule-limb bodies with organs.

A phantom bundles a kinematic tree, a closed surface mesh in T-pose, vertex
skinning weights, a four-mode analytic shape basis and canonical image / mask /
organ-label volumes on a cubic grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

from .deform import KTPOLYRIGID, DeformationField, invert_field, resample_image, resample_labels, sample_dense
from .errors import SpecInvalid
from .kinematics import KinematicTree, ShapeBasis, forward_kinematics
from .mesh import SurfaceMesh, voxelize
from .volume import GridSpec, VolumeGrid


@dataclass
class Organ:
    name: str
    center: tuple
    radius: float
    intensity: float


@dataclass
class PhantomSpec:
    preset: str = "chain"          # "chain" | "biped"
    parts: int = 2                 # chain only
    limb_length: float = 40.0      # chain only, mm
    limb_radius: float = 10.0      # chain only, mm
    scale: float = 1.0             # biped only
    blend_band: float | None = None
    organs: list | None = None
    resolution: int = 64
    margin: float = 0.08
    mesh_spacing: float | None = None
    smoothing: float = 0.75        # gaussian sigma in voxels for the image
    seed: int = 0

    def validate(self):
        if self.preset not in ("chain", "biped"):
            raise SpecInvalid(f"unknown preset {self.preset!r}")
        if self.preset == "chain":
            if self.parts < 1:
                raise SpecInvalid("chain needs at least one part")
            if not 0 < self.limb_radius < self.limb_length / 2:
                raise SpecInvalid("limb radius must be positive and below half the limb length")
        if self.scale <= 0:
            raise SpecInvalid("scale must be positive")
        if self.resolution < 8:
            raise SpecInvalid("resolution must be at least 8")


@dataclass
class Segment:
    name: str
    parent: int | None
    start: np.ndarray     # joint / pivot
    end: np.ndarray
    radius: float
    intensity: float

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.start
        return d / np.linalg.norm(d)


@dataclass
class Phantom:
    spec: PhantomSpec
    segments: list
    tree: KinematicTree
    mesh: SurfaceMesh
    vertex_weights: np.ndarray
    basis: ShapeBasis
    grid: GridSpec
    image: VolumeGrid
    mask: np.ndarray
    labels: VolumeGrid
    organs: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.tree.K


# =============================================================================
# layouts
# =============================================================================

def _chain_segments(spec: PhantomSpec) -> list:
    L, r, K = spec.limb_length, spec.limb_radius, spec.parts
    x0 = -0.5 * K * L
    segs = []
    for k in range(K):
        segs.append(Segment(f"link{k}", None if k == 0 else k - 1,
                            np.array([x0 + k * L, 0.0, 0.0]), np.array([x0 + (k + 1) * L, 0.0, 0.0]),
                            r, 80.0 + 25.0 * k))
    return segs


def _biped_segments(spec: PhantomSpec) -> list:
    s = spec.scale
    P = lambda *v: np.array(v, dtype=float) * s  # noqa: E731
    segs = [
        Segment("torso", None, P(0, 0, -30), P(0, 0, 40), 16 * s, 100.0),
        Segment("head", 0, P(0, 0, 46), P(0, 0, 62), 13 * s, 125.0),
    ]
    for side, sx in (("l", 1.0), ("r", -1.0)):
        base = len(segs)
        segs.append(Segment(f"{side}_upper_arm", 0, P(22 * sx, 0, 30), P(54 * sx, 0, 30), 7 * s, 80.0))
        segs.append(Segment(f"{side}_forearm", base, P(54 * sx, 0, 30), P(86 * sx, 0, 30), 6 * s, 90.0))
    for side, sx in (("l", 1.0), ("r", -1.0)):
        base = len(segs)
        segs.append(Segment(f"{side}_thigh", 0, P(12 * sx, 0, -36), P(12 * sx, 0, -72), 8 * s, 85.0))
        segs.append(Segment(f"{side}_shin", base, P(12 * sx, 0, -72), P(12 * sx, 0, -106), 7 * s, 95.0))
    return segs


def _default_organs(spec: PhantomSpec, segs: list) -> list:
    if spec.preset == "chain":
        return [Organ(f"organ{k}", tuple(0.5 * (sg.start + sg.end)), 0.45 * sg.radius, 200.0 - 20.0 * k)
                for k, sg in enumerate(segs)]
    s = spec.scale
    organs = [
        Organ("heart", (-4 * s, 0.0, 22 * s), 6.5 * s, 190.0),
        Organ("liver", (6 * s, 0.0, 2 * s), 8.0 * s, 150.0),
        Organ("bladder", (0.0, 0.0, -22 * s), 5.5 * s, 60.0),
        Organ("brain", (0.0, 0.0, 56 * s), 8.0 * s, 170.0),
    ]
    for sg in segs:
        if sg.name.endswith(("forearm", "shin")):
            organs.append(Organ(f"{sg.name}_bone", tuple(0.5 * (sg.start + sg.end)), 0.55 * sg.radius, 200.0))
    return organs


# =============================================================================
# geometry helpers
# =============================================================================

def _segment_distance(points, seg: Segment):
    """(distance to the segment axis, clamped axial parameter in [0, 1])."""
    d = seg.end - seg.start
    t = np.clip((points - seg.start) @ d / (d @ d), 0.0, 1.0)
    closest = seg.start + t[..., None] * d
    return np.linalg.norm(points - closest, axis=-1), t


def capsule_sdf(points, segs: list) -> np.ndarray:
    """Signed distance to each capsule, shape (..., K)."""
    return np.stack([_segment_distance(points, sg)[0] - sg.radius for sg in segs], axis=-1)


def _smooth_union(sdf: np.ndarray, k: float) -> np.ndarray:
    out = sdf[..., 0]
    for j in range(1, sdf.shape[-1]):
        b = sdf[..., j]
        h = np.maximum(k - np.abs(out - b), 0.0) / k
        out = np.minimum(out, b) - h * h * k * 0.25
    return out


def _blend_ramp(s, band):
    t = np.clip((s + 0.5 * band) / band, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * t)


def part_weights(points, segs: list, band: float) -> np.ndarray:
    """Simplex-valued skinning weights with a cosine ramp across each joint.

    Each point belongs to its nearest capsule; near a joint it is shared with
    the part on the other side, 0.5/0.5 exactly on the joint plane.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    K = len(segs)
    sdf = capsule_sdf(points, segs)
    owner = np.argmin(sdf, axis=1)
    W = np.zeros((len(points), K))
    children = [[c for c, sg in enumerate(segs) if sg.parent == k] for k in range(K)]
    for i, (x, p) in enumerate(zip(points, owner)):
        cands = []
        if segs[p].parent is not None:
            sp = (x - segs[p].start) @ segs[p].direction
            cands.append((np.linalg.norm(x - segs[p].start), segs[p].parent, p, sp))
        if children[p]:
            c = min(children[p], key=lambda c: sdf[i, c])
            sc = (x - segs[c].start) @ segs[c].direction
            cands.append((np.linalg.norm(x - segs[c].start), p, c, sc))
        if not cands:
            W[i, p] = 1.0
            continue
        _, a, b, s = min(cands, key=lambda c: c[0])
        wb = _blend_ramp(s, band)
        W[i, b] += wb
        W[i, a] += 1.0 - wb
    return W


def _marching_cubes_mesh(segs: list, spacing: float, union_k: float) -> SurfaceMesh:
    lo = np.min([np.minimum(sg.start, sg.end) - sg.radius for sg in segs], axis=0) - 3 * spacing
    hi = np.max([np.maximum(sg.start, sg.end) + sg.radius for sg in segs], axis=0) + 3 * spacing
    # irrational offset keeps lattice points off the zero level set
    lo = lo - spacing * (np.sqrt(2) - 1) * 0.37
    n = np.ceil((hi - lo) / spacing).astype(int) + 1
    axes = [lo[a] + np.arange(n[a]) * spacing for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    sdf = _smooth_union(capsule_sdf(pts, segs), union_k)
    verts, faces, _, _ = measure.marching_cubes(sdf, level=0.0, spacing=(spacing,) * 3,
                                                allow_degenerate=False)
    verts = verts + lo
    # drop unreferenced vertices
    used = np.unique(faces)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = SurfaceMesh(verts[used], remap[faces])
    if mesh.signed_volume() < 0:
        mesh = SurfaceMesh(mesh.vertices, mesh.faces[:, ::-1])
    mesh.validate()
    return mesh


def _shape_modes(mesh: SurfaceMesh, segs: list, rms: float = 2.0) -> np.ndarray:
    """Global scale, limb stretch, radius thickening and bend offset, orthogonalised."""
    V = mesh.vertices
    K = len(segs)
    centroid = V.mean(axis=0)
    scale = V - centroid

    owner = np.argmin(capsule_sdf(V, segs), axis=1)
    stretch = np.zeros_like(V)
    for i, (x, k) in enumerate(zip(V, owner)):
        j = k
        while segs[j].parent is not None:
            sg = segs[j]
            L = np.linalg.norm(sg.end - sg.start)
            a = np.clip((x - sg.start) @ sg.direction, 0.0, L)
            stretch[i] += a * sg.direction / L
            j = sg.parent
    if K == 1:
        sg = segs[0]
        L = np.linalg.norm(sg.end - sg.start)
        stretch = np.outer(((V - sg.start) @ sg.direction) / L - 0.5, sg.direction)

    thick = mesh.vertex_normals()

    ext = V.max(axis=0) - V.min(axis=0)
    long_axis = int(np.argmax(ext))
    side_axis = [a for a in range(3) if a != long_axis][int(np.argmin(np.delete(ext, long_axis)))]
    u = (V[:, long_axis] - centroid[long_axis]) / (0.5 * ext[long_axis])
    bend = np.zeros_like(V)
    bend[:, side_axis] = u * u

    modes = []
    for m in (scale, stretch, thick, bend):
        v = m.reshape(-1).astype(float)
        for _ in range(2):
            for q in modes:
                v = v - (v @ q) * q
        v = v / np.linalg.norm(v)
        modes.append(v)
    n = len(V)
    return np.stack([q * rms * np.sqrt(n) for q in modes]).reshape(len(modes), n, 3)


def grid_for(segs: list, resolution: int, margin: float) -> GridSpec:
    lo = np.min([np.minimum(sg.start, sg.end) - sg.radius for sg in segs], axis=0)
    hi = np.max([np.maximum(sg.start, sg.end) + sg.radius for sg in segs], axis=0)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max()) * (1.0 + 2.0 * margin)
    h = extent / (resolution - 1)
    origin = center - 0.5 * h * (resolution - 1)
    return GridSpec((resolution,) * 3, (h,) * 3, tuple(origin))


# =============================================================================
# public API
# =============================================================================

def default_band(spec: PhantomSpec) -> float:
    """Joint-blend band width (mm).

    Wide, body-model-like bands: several limb radii, but no wider than a limb
    so ramps from neighbouring joints do not overlap.
    """
    if spec.preset == "chain":
        return min(5.0 * spec.limb_radius, spec.limb_length)
    return 32.0 * spec.scale


def build_phantom(spec: PhantomSpec) -> Phantom:
    """Generate tree, mesh, vertex weights, shape basis and canonical volumes."""
    spec.validate()
    segs = _chain_segments(spec) if spec.preset == "chain" else _biped_segments(spec)
    rng = np.random.default_rng(spec.seed)
    tree = KinematicTree([sg.parent for sg in segs], [sg.start for sg in segs], [sg.name for sg in segs])
    min_r = min(sg.radius for sg in segs)
    band = spec.blend_band if spec.blend_band is not None else default_band(spec)
    mesh_h = spec.mesh_spacing if spec.mesh_spacing is not None else 0.15 * min_r
    mesh = _marching_cubes_mesh(segs, mesh_h, union_k=0.5 * min_r)
    W = part_weights(mesh.vertices, segs, band)
    basis = ShapeBasis(mesh.vertices, _shape_modes(mesh, segs))

    grid = grid_for(segs, spec.resolution, spec.margin)
    mask = voxelize(mesh, grid)
    X = grid.centers()
    owner = np.argmin(capsule_sdf(X, segs), axis=-1)
    base = np.array([sg.intensity for sg in segs])[owner]
    organs = spec.organs if spec.organs is not None else _default_organs(spec, segs)
    img = np.where(mask, base, 0.0)
    labels = np.zeros(grid.dims, dtype=np.float32)
    for i, og in enumerate(organs, start=1):
        inside = (np.linalg.norm(X - np.asarray(og.center), axis=-1) <= og.radius) & mask
        img[inside] = og.intensity
        labels[inside] = i
    # faint texture so intensity gradients exist inside uniform parts
    img = img + mask * rng.normal(0.0, 2.0, size=grid.dims)
    if spec.smoothing > 0:
        img = ndimage.gaussian_filter(img, spec.smoothing, mode="constant")
    image = VolumeGrid.on(grid, img, mask=mask)
    return Phantom(spec, segs, tree, mesh, W, basis, grid, image, mask,
                   VolumeGrid.on(grid, labels), list(organs))


def articulation_pose(model, magnitude: float, root_rotation=None) -> np.ndarray:
    """Pose bending elbows and hips (biped names) or every non-root joint (chain) by ``magnitude``.

    ``model`` is a Phantom or a KinematicTree.
    """
    tree = model.tree if isinstance(model, Phantom) else model
    names = list(tree.part_names)
    biped = "l_forearm" in names
    theta = np.zeros((tree.K, 3))
    for k, name in enumerate(names):
        if not biped:
            if tree.parent[k] is not None:
                theta[k] = (0.0, 0.0, magnitude)
        elif name == "l_forearm":
            theta[k] = (0.0, 0.0, magnitude)
        elif name == "r_forearm":
            theta[k] = (0.0, 0.0, -magnitude)
        elif name.endswith("_thigh"):
            theta[k] = (magnitude, 0.0, 0.0)
    if root_rotation is not None:
        theta[tree.root] = np.asarray(root_rotation, dtype=float)
    return theta


def pose_phantom(phantom: Phantom, theta, weights, method: str = KTPOLYRIGID,
                 max_iters: int = 50, tol: float = 0.05):
    """Synthesise a native image whose canonical->native map is known.

    Returns ``(native image, native labels, forward displacement, inverse displacement)``.
    """
    T = forward_kinematics(phantom.tree, theta)
    return synthesize_native(phantom, T, weights, method, max_iters, tol)


def synthesize_native(phantom: Phantom, transforms, weights, method: str = KTPOLYRIGID,
                      max_iters: int = 50, tol: float = 0.05, shape: VolumeGrid | None = None):
    """Native image for explicit part transforms (see pose_phantom).

    ``shape`` is an optional canonical -> subject-shape displacement applied
    before the pose.
    """
    field_ = DeformationField.articulated(method, transforms, weights, shape=shape)
    forward = sample_dense(field_, phantom.grid)
    inverse, _ = invert_field(forward, max_iters=max_iters, tol=tol, domain=phantom.mask)
    native = resample_image(phantom.image, inverse)
    labels = resample_labels(phantom.labels, inverse)
    return native, labels, forward, inverse
