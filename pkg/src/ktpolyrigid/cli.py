"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .deform import KTPOLYRIGID, METHODS, DeformationField, invert_field, resample_image, resample_labels, sample_dense
from .errors import DataError, NumericalError
from .flow import DEFAULT_STEPS, FlowSpec, flow_dense
from .kinematics import forward_kinematics
from .lie import as_matrices
from .metrics import compare_methods, regularity_report, rows_to_csv
from .volume import VolumeGrid

THREADS_ENV = "KTPR_THREADS"
log = logging.getLogger("ktpolyrigid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> np.ndarray:
    """Comma-separated numbers, or a path to a JSON array."""
    if text is None:
        return None
    if os.path.exists(text):
        return io.read_array(text).reshape(-1)
    try:
        return np.array([float(t) for t in text.split(",") if t.strip()], dtype=float)
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers or a JSON file, got {text!r}") from exc


def _set_threads(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# =============================================================================
# subcommands
# =============================================================================

def _mesh(a, path):
    return io.read_mesh(path, validate=not a.no_validate)


def cmd_phantom(a):
    from .phantom import PhantomSpec, articulation_pose, build_phantom, synthesize_native
    from .weights import solve_mesh_weights

    spec = PhantomSpec(preset=a.preset, parts=a.parts, limb_length=a.limb_length, limb_radius=a.limb_radius,
                       scale=a.scale, blend_band=a.blend_band, resolution=a.resolution,
                       mesh_spacing=a.mesh_spacing, seed=a.seed)
    ph = build_phantom(spec)
    out = Path(a.out)
    io.write_volume(ph.image, out / "image")
    io.write_volume(VolumeGrid.on(ph.grid, ph.mask.astype(np.float32)), out / "mask")
    io.write_volume(ph.labels, out / "labels")
    io.write_mesh(ph.mesh, out / "mesh.obj")
    io.write_tree(ph.tree, out / "tree.json", ph.basis)
    io.write_array(ph.vertex_weights, out / "vertex_weights.json")
    (out / "organs.json").write_text(json.dumps([{"label": i, "name": o.name, "center": list(map(float, o.center)),
                                                  "radius": float(o.radius), "intensity": float(o.intensity)}
                                                 for i, o in enumerate(ph.organs, start=1)], indent=1) + "\n")
    if a.subjects <= 0:
        return 0
    wf = solve_mesh_weights(ph.mesh, ph.vertex_weights, ph.grid, ph.mask)
    io.write_volume(wf.grid, out / "weights")
    rng = np.random.default_rng(a.seed + 1)
    entries = []
    for s in range(a.subjects):
        theta = articulation_pose(ph, a.pose_magnitude) + rng.normal(0.0, a.pose_jitter, (ph.tree.K, 3))
        beta = rng.normal(0.0, a.beta_scale, ph.basis.beta_dim) if a.beta_scale > 0 else np.zeros(ph.basis.beta_dim)
        shape = None
        if np.any(beta):
            shape, _ = flow_dense(FlowSpec(np.zeros_like(beta), beta, ph.basis, a.flow_steps), ph.mesh, ph.grid,
                                  ph.mask)
        T = forward_kinematics(ph.tree, theta)
        native, labels, _, _ = synthesize_native(ph, T, wf, a.method, shape=shape)
        d = out / f"subject_{s:03d}"
        io.write_volume(native, d / "image")
        io.write_volume(labels, d / "labels")
        io.write_pose(theta, d / "pose.json")
        entries.append({"image": f"{d.name}/image.json", "tree": "tree.json", "pose": f"{d.name}/pose.json",
                        "mesh": "mesh.obj", "weights": "weights.json", "beta": beta.tolist()})
    io.write_manifest(entries, out / "manifest.json")
    return 0


def cmd_weights(a):
    from .weights import solve_mesh_weights

    mesh = _mesh(a, a.mesh)
    vw = io.read_array(a.vertex_weights)
    maskvol = io.read_volume(a.mask)
    mask = np.asarray(maskvol.data) > 0.5
    wf = solve_mesh_weights(mesh, vw, maskvol.spec, mask, max_iters=a.max_iters, tol=a.tol)
    io.write_volume(wf.grid, a.out)
    print(f"iterations={wf.iterations} converged={wf.converged} energy={wf.energies[-1]:.6g}")
    return 0


def _shape_field(a, basis, mesh_path, grid, beta):
    if beta is None or not np.any(beta):
        return None
    if basis is None:
        raise UsageError("a non-zero beta needs a tree document with a shape basis")
    mesh = _mesh(a, mesh_path)
    shape, _ = flow_dense(FlowSpec(np.zeros_like(beta), beta, basis, a.steps), mesh, grid)
    return shape


def cmd_deform(a):
    tree, basis = io.read_tree(a.tree)
    theta = io.read_pose(a.pose, tree.K)
    weights = io.read_volume(a.weights)
    beta = _floats(a.beta)
    shape = _shape_field(a, basis, a.mesh, weights.spec, beta) if beta is not None else None
    field = DeformationField.articulated(a.method, forward_kinematics(tree, theta), weights, shape=shape)
    io.write_volume(sample_dense(field, weights.spec), a.out)
    return 0


def cmd_metrics(a):
    mask = io.read_mask(a.mask)
    if a.field:
        disp = io.read_volume(a.field)
        rep = regularity_report(disp, mask, include_folds=a.include_folds)
        rows = [rep.row(a.method, a.pose_magnitude)]
        if a.jacobian:
            io.write_volume(rep.jacobian_field, a.jacobian)
    else:
        if not (a.tree and a.weights):
            raise UsageError("metrics needs --field, or --tree and --weights for a method sweep")
        from .phantom import articulation_pose

        tree, _ = io.read_tree(a.tree)
        weights = io.read_volume(a.weights)
        rr = _floats(a.root_rotation)
        mags = _floats(a.magnitudes)
        rows, _ = compare_methods(lambda m: forward_kinematics(tree, articulation_pose(tree, m, rr)),
                                  weights, mask, mags, METHODS, timing=a.timing)
    text = rows_to_csv(rows, a.out)
    if not a.out:
        sys.stdout.write(text)
    return 0


def cmd_flow(a):
    tree, basis = io.read_tree(a.tree)
    if basis is None:
        raise UsageError("tree document has no shape basis")
    mesh = _mesh(a, a.mesh)
    ref = io.read_volume(a.grid)
    start = _floats(a.beta_start)
    end = np.zeros_like(start) if a.beta_end is None else _floats(a.beta_end)
    mask = io.read_mask(a.mask) if a.mask else None
    disp, flags = flow_dense(FlowSpec(start, end, basis, a.steps), mesh, ref.spec, mask, freeze=a.freeze)
    io.write_volume(disp, a.out)
    if a.flags:
        io.write_volume(VolumeGrid.on(ref.spec, flags.astype(np.float32)), a.flags)
    print(f"left_domain={int(flags.sum())}")
    return 0


def cmd_canonicalize(a):
    tree, basis = io.read_tree(a.tree)
    theta = io.read_pose(a.pose, tree.K)
    image = io.read_volume(a.image)
    weights = io.read_volume(a.weights)
    beta = _floats(a.beta)
    shape = _shape_field(a, basis, a.mesh, weights.spec, beta) if beta is not None else None
    field = DeformationField.articulated(a.method, forward_kinematics(tree, theta), weights, shape=shape)
    out = resample_labels(image, field, weights.spec) if a.labels else resample_image(image, field, weights.spec)
    io.write_volume(out, a.out)
    return 0


def cmd_groupwise(a):
    from .groupwise import Cohort, GroupwiseConfig, Subject, cohort_mean, optimize

    entries = io.read_manifest(a.manifest)
    subjects, grid = [], None
    for e in entries:
        tree, basis = io.read_tree(e["tree"])
        theta = io.read_pose(e["pose"], tree.K)
        if e.get("weights") is None:
            raise UsageError("every manifest entry needs a weights volume for groupwise")
        weights = io.read_volume(e["weights"])
        grid = grid or weights.spec
        if weights.spec != grid:
            raise DataError(f"{e['weights']}: grid differs from the first subject's")
        shape = None
        if np.any(e["beta"]):
            mesh = _mesh(a, e["mesh"])
            shape, _ = flow_dense(FlowSpec(np.zeros_like(e["beta"]), e["beta"], basis, a.steps), mesh, grid)
        subjects.append(Subject(io.read_volume(e["image"]), as_matrices(forward_kinematics(tree, theta)),
                                weights, shape, Path(e["image"]).parent.name))
    mask = io.read_mask(a.mask)
    cohort = Cohort(subjects, grid, mask)
    cfg = GroupwiseConfig(lam=a.lam, step=a.step, max_iters=a.max_iters, grad_mode=a.grad_mode,
                          frozen_mean=a.frozen_mean)
    res = optimize(cohort, cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "twists.json").write_text(json.dumps({"lambda": res.lam, "status": res.status,
                                                 "xi": res.xi.tolist()}, indent=1) + "\n")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "data", "reg"])
        for i, (l, d, r) in enumerate(res.trace):
            w.writerow([i, repr(l), repr(d), repr(r)])
    io.write_volume(cohort_mean(cohort, res.xi), out / "mean")
    print(f"status={res.status} iterations={len(res.trace) - 1} loss={res.trace[-1][0]:.6g}")
    return 0 if res.status != "LineSearchStalled" or len(res.trace) > 1 else 3


def cmd_invert(a):
    disp = io.read_volume(a.field)
    domain = io.read_mask(a.mask) if a.mask else None
    inv, valid = invert_field(disp, max_iters=a.max_iters, tol=a.tol, domain=domain)
    io.write_volume(inv, a.out)
    if a.valid:
        io.write_volume(VolumeGrid.on(inv.spec, valid.astype(np.float32)), a.valid)
    print(f"valid_fraction={valid.mean():.6f}")
    return 0


def cmd_warp_labels(a):
    labels = io.read_volume(a.labels)
    field = io.read_volume(a.field)
    io.write_volume(resample_labels(labels, field, field.spec), a.out)
    return 0


def cmd_render(a):
    from .render import render_png

    vol = io.read_volume(a.volume)
    index = [int(i) for i in _floats(a.index)] if a.index else None
    render_png(vol, a.out, a.window, a.level, index, a.channel)
    return 0


# =============================================================================
# parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ktpr", description="Articulated volumetric deformation toolkit.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on worker threads (default: ${THREADS_ENV} or all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    p.add_argument("--no-validate", action="store_true", help="skip the closed-mesh check when reading OBJ files")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("phantom", help="generate a phantom and optionally a posed cohort")
    s.add_argument("--preset", choices=("chain", "biped"), default="chain")
    s.add_argument("--parts", type=int, default=2, help="chain links")
    s.add_argument("--limb-length", type=float, default=40.0, help="chain link length (mm)")
    s.add_argument("--limb-radius", type=float, default=10.0, help="chain link radius (mm)")
    s.add_argument("--scale", type=float, default=1.0, help="biped size factor")
    s.add_argument("--blend-band", type=float, default=None, help="joint blend band width (mm)")
    s.add_argument("--resolution", type=int, default=64, help="voxels along each axis")
    s.add_argument("--mesh-spacing", type=float, default=None, help="surface extraction spacing (mm)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--subjects", type=int, default=0, help="posed subjects to synthesise (writes manifest.json)")
    s.add_argument("--pose-magnitude", type=float, default=0.3, help="joint bend for subjects (rad)")
    s.add_argument("--pose-jitter", type=float, default=0.05, help="per-joint rotation noise std (rad)")
    s.add_argument("--beta-scale", type=float, default=0.0, help="shape coefficient std for subjects")
    s.add_argument("--flow-steps", type=int, default=DEFAULT_STEPS)
    s.add_argument("--method", choices=METHODS, default=KTPOLYRIGID)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("weights", help="solve volumetric skinning weights")
    s.add_argument("--mesh", required=True, help="OBJ surface")
    s.add_argument("--vertex-weights", required=True, help="JSON (N, K) array")
    s.add_argument("--mask", required=True, help="interior mask volume (defines the grid)")
    s.add_argument("--max-iters", type=int, default=20000)
    s.add_argument("--tol", type=float, default=1e-9, help="stop when the largest weight change is below this")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("deform", help="sample a dense displacement field")
    s.add_argument("--tree", required=True)
    s.add_argument("--pose", required=True)
    s.add_argument("--weights", required=True, help="K-channel weight volume (defines the grid)")
    s.add_argument("--method", choices=METHODS, default=KTPOLYRIGID)
    s.add_argument("--beta", default=None, help="subject shape coefficients (comma list or JSON)")
    s.add_argument("--mesh", default=None, help="template OBJ, needed with --beta")
    s.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="Euler steps for the shape flow")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_deform)

    s = sub.add_parser("metrics", help="Jacobian regularity report as CSV")
    s.add_argument("--mask", required=True)
    s.add_argument("--field", default=None, help="displacement volume to report on")
    s.add_argument("--method", default="", help="method label for the CSV row")
    s.add_argument("--pose-magnitude", type=float, default=float("nan"))
    s.add_argument("--include-folds", action="store_true", help="include folded voxels in log2 stats")
    s.add_argument("--jacobian", default=None, help="write (log2|det|, sign) volume here")
    s.add_argument("--tree", default=None, help="sweep mode: tree document")
    s.add_argument("--weights", default=None, help="sweep mode: weight volume")
    s.add_argument("--magnitudes", default="1.0,2.0,2.6", help="sweep mode: bend magnitudes (rad)")
    s.add_argument("--root-rotation", default=None, help="sweep mode: root angle-axis x,y,z")
    s.add_argument("--timing", action="store_true", help="fill wall time / memory columns (not reproducible)")
    s.add_argument("--out", default=None, help="CSV path (default stdout)")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("flow", help="integrate the shape-standardising flow")
    s.add_argument("--tree", required=True, help="tree document with a shape basis")
    s.add_argument("--mesh", required=True, help="template OBJ (connectivity)")
    s.add_argument("--grid", required=True, help="any volume on the output grid")
    s.add_argument("--beta-start", required=True)
    s.add_argument("--beta-end", default=None, help="default: zeros (population shape)")
    s.add_argument("--mask", default=None, help="voxels to integrate (default: inside the start mesh)")
    s.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    s.add_argument("--freeze", action="store_true", help="compute coordinates once at t = 0")
    s.add_argument("--flags", default=None, help="write the left-domain flag volume here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("canonicalize", help="pull a native image back to canonical space")
    s.add_argument("--image", required=True)
    s.add_argument("--tree", required=True)
    s.add_argument("--pose", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--method", choices=METHODS, default=KTPOLYRIGID)
    s.add_argument("--beta", default=None)
    s.add_argument("--mesh", default=None)
    s.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    s.add_argument("--labels", action="store_true", help="nearest-neighbour resampling")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_canonicalize)

    s = sub.add_parser("groupwise", help="refine joint transforms across a cohort")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mask", required=True, help="canonical interior mask")
    s.add_argument("--lambda", dest="lam", type=float, default=None, help="default 1e-2 x image variance")
    s.add_argument("--step", type=float, default=None, help="largest coordinate move per iteration (mm)")
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--grad-mode", choices=("fd", "analytic"), default="fd")
    s.add_argument("--frozen-mean", action="store_true")
    s.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="Euler steps for shape flows")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_groupwise)

    s = sub.add_parser("invert", help="numerically invert a displacement field")
    s.add_argument("--field", required=True)
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--tol", type=float, default=0.05, help="residual tolerance (voxels)")
    s.add_argument("--mask", default=None, help="field domain (canonical interior); preferred preimages")
    s.add_argument("--valid", default=None, help="write the converged-voxel mask here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("warp-labels", help="nearest-neighbour pull-back of a label volume")
    s.add_argument("--labels", required=True)
    s.add_argument("--field", required=True, help="displacement volume on the output grid")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_warp_labels)

    s = sub.add_parser("render", help="PNG of three orthogonal slices")
    s.add_argument("--volume", required=True)
    s.add_argument("--window", type=float, default=None, help="display window width (default: full range)")
    s.add_argument("--level", type=float, default=None, help="display window centre")
    s.add_argument("--index", default=None, help="slice indices i,j,k (default: centre)")
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"ktpr {args.command}: usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"ktpr {args.command}: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError, ValueError) as exc:
        print(f"ktpr {args.command}: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
