"""Mean value coordinates for closed triangle meshes.

Spherical-triangle construction with the usual guards: a query on a vertex
or inside a face plane gets exact interpolation, faces seen edge-on are
skipped. Queries within ``eps_surf`` of the surface raise OnSurface.
"""

from __future__ import annotations

import numba
import numpy as np

from .errors import OnSurface
from .mesh import SurfaceMesh, _solid_angle, closest_points

EPS_SURF = 1e-6
_EPS_ANGLE = 1e-10


@numba.njit(cache=True)
def _mvc_point(x, verts, faces, w, d, u):
    """Unnormalised MVC weights of x into w.

    Returns the winding number of the mesh around x, or NaN when x hits a
    vertex or a face (w then holds the exact interpolation weights).
    """
    n = verts.shape[0]
    for j in range(n):
        dx = verts[j, 0] - x[0]
        dy = verts[j, 1] - x[1]
        dz = verts[j, 2] - x[2]
        dj = np.sqrt(dx * dx + dy * dy + dz * dz)
        d[j] = dj
        w[j] = 0.0
        if dj < 1e-300:
            for k in range(n):
                w[k] = 0.0
            w[j] = 1.0
            return np.nan
        u[j, 0] = dx / dj
        u[j, 1] = dy / dj
        u[j, 2] = dz / dj
    th = np.empty(3)
    c = np.empty(3)
    s = np.empty(3)
    sn = np.empty(3)
    wind = 0.0
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        ids = (i0, i1, i2)
        for k in range(3):
            a = ids[(k + 1) % 3]
            b = ids[(k + 2) % 3]
            lx = u[a, 0] - u[b, 0]
            ly = u[a, 1] - u[b, 1]
            lz = u[a, 2] - u[b, 2]
            l = np.sqrt(lx * lx + ly * ly + lz * lz)
            th[k] = 2.0 * np.arcsin(min(l * 0.5, 1.0))
        h = 0.5 * (th[0] + th[1] + th[2])
        if np.pi - h < _EPS_ANGLE:
            # x lies in this face: planar barycentric interpolation
            for j in range(n):
                w[j] = 0.0
            w[i0] = np.sin(th[0]) * d[i1] * d[i2]
            w[i1] = np.sin(th[1]) * d[i2] * d[i0]
            w[i2] = np.sin(th[2]) * d[i0] * d[i1]
            return np.nan
        wind += _solid_angle(u, i0, i1, i2)
        det = (u[i0, 0] * (u[i1, 1] * u[i2, 2] - u[i1, 2] * u[i2, 1])
               - u[i0, 1] * (u[i1, 0] * u[i2, 2] - u[i1, 2] * u[i2, 0])
               + u[i0, 2] * (u[i1, 0] * u[i2, 1] - u[i1, 1] * u[i2, 0]))
        sg = 1.0 if det >= 0.0 else -1.0
        skip = False
        sh = np.sin(h)
        for k in range(3):
            sn[k] = np.sin(th[k])
        for k in range(3):
            c[k] = 2.0 * sh * np.sin(h - th[k]) / (sn[(k + 1) % 3] * sn[(k + 2) % 3]) - 1.0
            s[k] = sg * np.sqrt(max(1.0 - c[k] * c[k], 0.0))
            if abs(s[k]) <= _EPS_ANGLE:
                skip = True
        if skip:
            continue
        for k in range(3):
            kp = (k + 1) % 3
            km = (k + 2) % 3
            w[ids[k]] += (th[k] - c[kp] * th[km] - c[km] * th[kp]) / (d[ids[k]] * sn[kp] * s[km])
    return wind / (4.0 * np.pi)


@numba.njit(cache=True)
def _mvc_batch(points, verts, faces, values, want_weights, skip):
    """Per point: normalised weights (optional), interpolated values and winding number.

    ``skip`` rows keep zero values and winding 0.5.
    """
    P = points.shape[0]
    n = verts.shape[0]
    D = values.shape[1]
    W = np.zeros((P if want_weights else 0, n))
    out = np.zeros((P, D))
    wind = np.full(P, 0.5)
    w = np.empty(n)
    d = np.empty(n)
    u = np.empty((n, 3))
    for i in range(P):
        if skip[i]:
            continue
        wn = _mvc_point(points[i], verts, faces, w, d, u)
        if not np.isnan(wn):
            wind[i] = wn
        tot = 0.0
        for j in range(n):
            tot += w[j]
        for j in range(n):
            wj = w[j] / tot
            if want_weights:
                W[i, j] = wj
            for k in range(D):
                out[i, k] += wj * values[j, k]
    return W, out, wind


def _arrays(mesh, points):
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    return pts, np.ascontiguousarray(mesh.vertices), np.ascontiguousarray(mesh.faces)


def mvc_weights(x, mesh: SurfaceMesh, eps_surf: float = EPS_SURF) -> np.ndarray:
    """Mean value coordinates of one point (N,) or many points (P, N)."""
    x = np.asarray(x, dtype=float)
    pts, V, F = _arrays(mesh, x)
    _, _, dist = closest_points(mesh, pts)
    bad = np.flatnonzero(dist <= eps_surf)
    if bad.size:
        raise OnSurface(f"point {pts[bad[0]].tolist()} is within {eps_surf:g} mm of the surface "
                        f"(distance {dist[bad[0]]:.3g})")
    W, _, _ = _mvc_batch(pts, V, F, np.zeros((len(V), 1)), True, dist <= eps_surf)
    return W[0] if x.ndim == 1 else W


def mvc_interpolate(points, mesh: SurfaceMesh, values, eps_surf: float = EPS_SURF):
    """Interpolate per-vertex ``values`` (N, D) to points.

    Returns ``(values (P, D), surface distance (P,), winding number (P,))``.
    Points within ``eps_surf`` of the surface get zeros and winding 0.5;
    callers handle them.
    """
    pts, V, F = _arrays(mesh, points)
    vals = np.ascontiguousarray(np.asarray(values, dtype=float).reshape(len(V), -1))
    _, _, dist = closest_points(mesh, pts)
    _, out, wind = _mvc_batch(pts, V, F, vals, False, dist <= eps_surf)
    return out, dist, wind
