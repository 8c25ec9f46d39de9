"""File formats: raw volumes with JSON headers, OBJ meshes, tree/pose/manifest JSON.

Volume container
    ``name.json`` holds ``{"dims", "spacing", "origin", "channels", "dtype": "f32",
    "order": "x-fastest", "encoding": "raw-little-endian"}`` and ``name.raw`` holds
    the samples: x varies fastest, then y, then z, then channel.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import BadIndex, DimensionMismatch, IOFailure, MalformedHeader, NonTriangleFace, SizeMismatch
from .kinematics import KinematicTree, ShapeBasis
from .mesh import SurfaceMesh
from .volume import VolumeGrid

HEADER_KEYS = ("dims", "spacing", "origin", "channels", "dtype", "order", "encoding")


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror or exc}") from exc


def _load_json(path):
    text = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _dump_json(obj, path) -> None:
    _write_bytes(path, (json.dumps(obj, indent=1) + "\n").encode())


# =============================================================================
# volumes
# =============================================================================

def volume_header(vol: VolumeGrid) -> dict:
    return {"dims": [int(d) for d in vol.dims], "spacing": [float(s) for s in vol.spacing],
            "origin": [float(o) for o in vol.origin], "channels": int(vol.channels), "dtype": "f32",
            "order": "x-fastest", "encoding": "raw-little-endian"}


def _check_header(h, where) -> None:
    if not isinstance(h, dict):
        raise MalformedHeader(f"{where}: header must be a JSON object")
    missing = [k for k in HEADER_KEYS if k not in h]
    if missing:
        raise MalformedHeader(f"{where}: missing header field(s) {missing}")
    if h["dtype"] != "f32":
        raise MalformedHeader(f"{where}: dtype {h['dtype']!r} not supported (only 'f32')")
    if h["order"] != "x-fastest":
        raise MalformedHeader(f"{where}: order {h['order']!r} not supported (only 'x-fastest')")
    if h["encoding"] != "raw-little-endian":
        raise MalformedHeader(f"{where}: encoding {h['encoding']!r} not supported")
    for key in ("dims", "spacing", "origin"):
        v = h[key]
        if not (isinstance(v, list) and len(v) == 3 and all(isinstance(x, (int, float)) for x in v)):
            raise MalformedHeader(f"{where}: {key} must be a list of 3 numbers")
    if not all(isinstance(d, int) and d > 0 for d in h["dims"]):
        raise MalformedHeader(f"{where}: dims must be positive integers")
    if not all(s > 0 for s in h["spacing"]):
        raise MalformedHeader(f"{where}: spacing must be positive")
    if not (isinstance(h["channels"], int) and h["channels"] > 0):
        raise MalformedHeader(f"{where}: channels must be a positive integer")


def write_volume(vol: VolumeGrid, path) -> Path:
    """Write ``path``.json / ``path``.raw. Returns the header path."""
    hdr, raw = _paths(path)
    data = np.asarray(vol.data)
    if data.ndim == 3:
        data = data[..., None]
    payload = np.ascontiguousarray(np.transpose(data, (3, 2, 1, 0)), dtype="<f4").tobytes()
    _write_bytes(raw, payload)
    _dump_json(volume_header(vol), hdr)
    return hdr


def read_volume(path, mask=None) -> VolumeGrid:
    """Read a volume; 1-channel volumes come back 3-D, float32."""
    hdr, raw = _paths(path)
    h = _load_json(hdr)
    _check_header(h, hdr)
    nx, ny, nz = h["dims"]
    C = h["channels"]
    expected = nx * ny * nz * C * 4
    try:
        size = os.path.getsize(raw)
    except OSError as exc:
        raise IOFailure(f"cannot read {raw}: {exc.strerror or exc}") from exc
    if size != expected:
        raise SizeMismatch(f"{raw}: expected {expected} bytes for dims {h['dims']} x {C} channel(s), got {size}")
    try:
        flat = np.fromfile(raw, dtype="<f4")
    except OSError as exc:
        raise IOFailure(f"cannot read {raw}: {exc.strerror or exc}") from exc
    data = np.transpose(flat.reshape(C, nz, ny, nx), (3, 2, 1, 0)).astype(np.float32)
    if C == 1:
        data = data[..., 0]
    return VolumeGrid(np.ascontiguousarray(data), tuple(h["spacing"]), tuple(h["origin"]), mask=mask)


def read_mask(path) -> np.ndarray:
    vol = read_volume(path)
    return np.asarray(vol.data) > 0.5


# =============================================================================
# meshes
# =============================================================================

def read_mesh(path, validate: bool = True) -> SurfaceMesh:
    """Minimal OBJ: ``v x y z`` and triangular ``f a b c`` records (1-based, ``a/b/c`` tails ignored)."""
    verts, faces = [], []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MalformedHeader(f"{path}:{lineno}: vertex needs 3 coordinates")
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise NonTriangleFace(f"{path}:{lineno}: face with {len(parts) - 1} vertices (only triangles)")
            try:
                idx = [int(p.split("/")[0]) for p in parts[1:]]
            except ValueError as exc:
                raise BadIndex(f"{path}:{lineno}: non-integer face index") from exc
            faces.append(idx)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    n = len(verts)
    if F.size and (F.min() < 1 or F.max() > n):
        bad = F[(F < 1) | (F > n)][0]
        raise BadIndex(f"{path}: face index {bad} out of range 1..{n}")
    mesh = SurfaceMesh(np.array(verts, dtype=float).reshape(-1, 3), F - 1)
    if validate:
        mesh.validate()
    return mesh


def write_mesh(mesh: SurfaceMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    _write_bytes(path, ("\n".join(lines) + "\n").encode())


# =============================================================================
# tree, shape basis, pose, vertex weights
# =============================================================================

def tree_document(tree: KinematicTree, basis: ShapeBasis | None = None) -> dict:
    doc = {"parts": [{"name": n, "parent": (None if p is None or p < 0 else int(p)), "joint": [float(x) for x in j]}
                     for n, p, j in zip(tree.part_names, tree.parent, np.asarray(tree.rest_joint))]}
    if basis is not None:
        doc["shape"] = {"mean_vertices": basis.mean_vertices.tolist(), "components": basis.components.tolist()}
    return doc


def write_tree(tree: KinematicTree, path, basis: ShapeBasis | None = None) -> None:
    _dump_json(tree_document(tree, basis), path)


def read_tree(path) -> tuple[KinematicTree, ShapeBasis | None]:
    doc = _load_json(path)
    try:
        parts = doc["parts"]
        tree = KinematicTree([p["parent"] for p in parts], [p["joint"] for p in parts], [p["name"] for p in parts])
        basis = None
        if doc.get("shape") is not None:
            sh = doc["shape"]
            basis = ShapeBasis(np.array(sh["mean_vertices"], dtype=float), np.array(sh["components"], dtype=float))
    except (KeyError, TypeError) as exc:
        raise MalformedHeader(f"{path}: bad tree document ({exc})") from exc
    return tree, basis


def write_pose(theta, path) -> None:
    _dump_json(np.asarray(theta, dtype=float).reshape(-1, 3).tolist(), path)


def read_pose(path, K: int | None = None) -> np.ndarray:
    doc = _load_json(path)
    try:
        theta = np.array(doc, dtype=float)
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"{path}: pose must be a list of [x, y, z] triples") from exc
    if theta.ndim != 2 or theta.shape[1] != 3:
        raise MalformedHeader(f"{path}: pose must be a list of [x, y, z] triples")
    if K is not None and len(theta) != K:
        raise DimensionMismatch(f"{path}: pose has {len(theta)} joints, tree has {K}")
    return theta


def write_array(arr, path) -> None:
    _dump_json(np.asarray(arr, dtype=float).tolist(), path)


def read_array(path) -> np.ndarray:
    doc = _load_json(path)
    try:
        return np.array(doc, dtype=float)
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"{path}: expected a numeric array") from exc


# =============================================================================
# cohort manifest
# =============================================================================

MANIFEST_KEYS = ("image", "tree", "pose", "mesh")


def write_manifest(entries: list, path) -> None:
    _dump_json(entries, path)


def read_manifest(path) -> list:
    """Entries with paths resolved against the manifest's directory."""
    doc = _load_json(path)
    if not isinstance(doc, list) or not doc:
        raise MalformedHeader(f"{path}: manifest must be a non-empty JSON list")
    base = Path(path).parent
    out = []
    for i, e in enumerate(doc):
        if not isinstance(e, dict):
            raise MalformedHeader(f"{path}: entry {i} is not an object")
        missing = [k for k in MANIFEST_KEYS if k not in e]
        if missing:
            raise MalformedHeader(f"{path}: entry {i} lacks {missing}")
        r = dict(e)
        for k in MANIFEST_KEYS + ("weights",):
            if r.get(k) is not None:
                r[k] = str(base / r[k])
                probe = _paths(r[k])[0] if k in ("image", "weights") else Path(r[k])
                if not probe.exists():
                    raise IOFailure(f"{path}: entry {i} {k} file {probe} does not exist")
        r["beta"] = np.asarray(e.get("beta", []), dtype=float)
        out.append(r)
    return out
