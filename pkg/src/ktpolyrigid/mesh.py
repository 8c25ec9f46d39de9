"""Closed triangle meshes: validation, closest points, inside tests, voxelisation."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

from .errors import BadIndex, OpenMesh
from .volume import GridSpec

MIN_FACE_AREA = 1e-12


@dataclass
class SurfaceMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise BadIndex(f"face index out of range [0, {len(self.vertices)})")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "SurfaceMesh":
        return SurfaceMesh(vertices, self.faces)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def vertex_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        fn = np.cross(b - a, c - a)  # area weighted
        n = np.zeros_like(self.vertices)
        for i in range(3):
            np.add.at(n, self.faces[:, i], fn)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def validate(self) -> None:
        """Raise OpenMesh unless closed, consistently oriented and non-degenerate."""
        check_closed(self.faces, len(self.vertices))
        areas = self.face_areas()
        bad = np.flatnonzero(areas <= MIN_FACE_AREA)
        if bad.size:
            raise OpenMesh(f"{bad.size} degenerate face(s), first is face {bad[0]}")

    def is_closed(self) -> bool:
        try:
            self.validate()
        except OpenMesh:
            return False
        return True


def check_closed(faces: np.ndarray, n_vertices: int) -> None:
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        raise OpenMesh("mesh has no faces")
    src = faces.reshape(-1)
    dst = np.roll(faces, -1, axis=1).reshape(-1)
    key = src * n_vertices + dst
    uniq, counts = np.unique(key, return_counts=True)
    if np.any(counts > 1):
        e = uniq[np.argmax(counts > 1)]
        raise OpenMesh(f"directed edge ({e // n_vertices}, {e % n_vertices}) used by more than one face "
                       "(non-manifold or inconsistent orientation)")
    rev = dst * n_vertices + src
    missing = ~np.isin(rev, uniq)
    if np.any(missing):
        i = int(np.argmax(missing))
        raise OpenMesh(f"edge ({src[i]}, {dst[i]}) has no opposite half-edge (open boundary)")


# =============================================================================
# numba kernels
# =============================================================================

@numba.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Closest point on triangle abc to p; returns (barycentric u, v, w)."""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx, cpy, cpz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@numba.njit(cache=True)
def _closest_points(points, verts, faces, offsets, cand):
    """Exact nearest face per point among its candidate faces (ascending indices)."""
    n = points.shape[0]
    face_out = np.empty(n, np.int64)
    bary = np.empty((n, 3))
    dist = np.empty(n)
    for i in range(n):
        p = points[i]
        best = np.inf
        bf = -1
        bu = 0.0
        bv = 0.0
        bw = 0.0
        for j in range(offsets[i], offsets[i + 1]):
            f = cand[j]
            a = verts[faces[f, 0]]
            b = verts[faces[f, 1]]
            c = verts[faces[f, 2]]
            u, v, w = _closest_on_triangle(p, a, b, c)
            qx = u * a[0] + v * b[0] + w * c[0] - p[0]
            qy = u * a[1] + v * b[1] + w * c[1] - p[1]
            qz = u * a[2] + v * b[2] + w * c[2] - p[2]
            d2 = qx * qx + qy * qy + qz * qz
            if d2 < best:  # strict: smallest face index wins ties
                best = d2
                bf = f
                bu = u
                bv = v
                bw = w
        face_out[i] = bf
        bary[i, 0] = bu
        bary[i, 1] = bv
        bary[i, 2] = bw
        dist[i] = np.sqrt(best)
    return face_out, bary, dist


def _candidates(mesh: SurfaceMesh, pts, tree, radius_pad):
    """Faces whose bounding sphere can hold the nearest point.

    The nearest face centroid bounds the surface distance from above; any
    face within that bound has its centroid within bound + max face radius.
    """
    d0, _ = tree.query(pts)
    balls = tree.query_ball_point(pts, d0 + radius_pad)
    counts = np.fromiter((len(b) for b in balls), np.int64, len(balls))
    offsets = np.zeros(len(balls) + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    cand = np.empty(offsets[-1], np.int64)
    for i, b in enumerate(balls):
        cand[offsets[i]:offsets[i + 1]] = np.sort(b)
    return offsets, cand


def closest_points(mesh: SurfaceMesh, points, chunk: int = 4096):
    """Nearest surface point for each query: (face index, barycentrics, distance).

    Exact; ties go to the smallest face index.
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    tri = mesh.vertices[mesh.faces]
    centroids = tri.mean(axis=1)
    pad = float(np.linalg.norm(tri - centroids[:, None], axis=2).max()) * (1 + 1e-9) + 1e-9
    tree = cKDTree(centroids)
    face = np.empty(len(pts), np.int64)
    bary = np.empty((len(pts), 3))
    dist = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        sl = slice(s, s + chunk)
        offsets, cand = _candidates(mesh, pts[sl], tree, pad)
        face[sl], bary[sl], dist[sl] = _closest_points(pts[sl], mesh.vertices, mesh.faces, offsets, cand)
    return face, bary, dist


@numba.njit(cache=True)
def _solid_angle(u, i0, i1, i2):
    """Signed solid angle of a triangle seen through unit vectors u (Van Oosterom-Strackee)."""
    det = (u[i0, 0] * (u[i1, 1] * u[i2, 2] - u[i1, 2] * u[i2, 1])
           - u[i0, 1] * (u[i1, 0] * u[i2, 2] - u[i1, 2] * u[i2, 0])
           + u[i0, 2] * (u[i1, 0] * u[i2, 1] - u[i1, 1] * u[i2, 0]))
    d01 = u[i0, 0] * u[i1, 0] + u[i0, 1] * u[i1, 1] + u[i0, 2] * u[i1, 2]
    d12 = u[i1, 0] * u[i2, 0] + u[i1, 1] * u[i2, 1] + u[i1, 2] * u[i2, 2]
    d20 = u[i2, 0] * u[i0, 0] + u[i2, 1] * u[i0, 1] + u[i2, 2] * u[i0, 2]
    return 2.0 * np.arctan2(det, 1.0 + d01 + d12 + d20)


@numba.njit(cache=True)
def _unit_directions(p, verts, u):
    """Unit vectors from p to every vertex; returns False if p sits on a vertex."""
    for j in range(verts.shape[0]):
        dx = verts[j, 0] - p[0]
        dy = verts[j, 1] - p[1]
        dz = verts[j, 2] - p[2]
        d = np.sqrt(dx * dx + dy * dy + dz * dz)
        if d < 1e-300:
            return False
        u[j, 0] = dx / d
        u[j, 1] = dy / d
        u[j, 2] = dz / d
    return True


@numba.njit(cache=True)
def _winding(points, verts, faces):
    n = points.shape[0]
    out = np.empty(n)
    u = np.empty((verts.shape[0], 3))
    for i in range(n):
        if not _unit_directions(points[i], verts, u):
            out[i] = 0.5
            continue
        total = 0.0
        for f in range(faces.shape[0]):
            total += _solid_angle(u, faces[f, 0], faces[f, 1], faces[f, 2])
        out[i] = total / (4.0 * np.pi)
    return out


def winding_number(mesh: SurfaceMesh, points) -> np.ndarray:
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    return _winding(pts, mesh.vertices, mesh.faces)


def contains(mesh: SurfaceMesh, points) -> np.ndarray:
    """Inside test by generalised winding number (orientation agnostic)."""
    return np.abs(winding_number(mesh, points)) > 0.5


@numba.njit(cache=True)
def _voxelize(verts_idx, faces, nx, ny, nz, jx, jy):
    # verts_idx: vertex coordinates in (fractional) voxel index units.
    # Rays run along +k through (i + jx, j + jy); parity of crossings below k.
    nf = faces.shape[0]
    counts = np.zeros(nx * ny, np.int64)
    for pass_ in range(2):
        if pass_ == 1:
            offsets = np.zeros(nx * ny + 1, np.int64)
            for c in range(nx * ny):
                offsets[c + 1] = offsets[c] + counts[c]
            zs = np.empty(offsets[-1])
            fill = offsets[:-1].copy()
        for f in range(nf):
            a = verts_idx[faces[f, 0]]
            b = verts_idx[faces[f, 1]]
            c = verts_idx[faces[f, 2]]
            i0 = max(0, int(np.ceil(min(a[0], b[0], c[0]) - jx)))
            i1 = min(nx - 1, int(np.floor(max(a[0], b[0], c[0]) - jx)))
            j0 = max(0, int(np.ceil(min(a[1], b[1], c[1]) - jy)))
            j1 = min(ny - 1, int(np.floor(max(a[1], b[1], c[1]) - jy)))
            det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
            if det == 0.0:
                continue
            for i in range(i0, i1 + 1):
                px = i + jx
                for j in range(j0, j1 + 1):
                    py = j + jy
                    l1 = ((b[0] - px) * (c[1] - py) - (c[0] - px) * (b[1] - py)) / det
                    l2 = ((c[0] - px) * (a[1] - py) - (a[0] - px) * (c[1] - py)) / det
                    l3 = 1.0 - l1 - l2
                    if l1 < 0.0 or l2 < 0.0 or l3 < 0.0:
                        continue
                    col = i * ny + j
                    if pass_ == 0:
                        counts[col] += 1
                    else:
                        zs[fill[col]] = l1 * a[2] + l2 * b[2] + l3 * c[2]
                        fill[col] += 1
    out = np.zeros((nx, ny, nz), np.bool_)
    for i in range(nx):
        for j in range(ny):
            col = i * ny + j
            s = offsets[col]
            e = offsets[col + 1]
            if e - s < 2:
                continue
            z = np.sort(zs[s:e])
            for k in range(nz):
                below = 0
                for q in range(e - s):
                    if z[q] < k:
                        below += 1
                if below % 2 == 1:
                    out[i, j, k] = True
    return out


def voxelize(mesh: SurfaceMesh, grid: GridSpec) -> np.ndarray:
    """Boolean mask of voxel centres inside a closed mesh (ray parity along k).

    Rays are offset from the voxel centres by a tiny irrational jitter in i/j
    so axis-aligned meshes never graze an edge exactly.
    """
    vidx = np.ascontiguousarray(grid.to_index(mesh.vertices))
    jx, jy = 1e-7 * (np.sqrt(2) - 1), 1e-7 * (np.sqrt(3) - 1)
    nx, ny, nz = grid.dims
    return _voxelize(vidx, mesh.faces, nx, ny, nz, jx, jy)
