import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ktpolyrigid.deform import (DeformationField, eval_ktpolyrigid, eval_lbs, eval_polyrigid, invert_field,
                                map_points, resample_image, resample_labels, roundtrip_error, sample_dense,
                                select_reference)
from ktpolyrigid.errors import BranchAmbiguity
from ktpolyrigid.kinematics import forward_kinematics
from ktpolyrigid.lie import RigidTransform, se3_exp
from ktpolyrigid.volume import GridSpec, VolumeGrid


def zrot(angle, pivot=(0, 0, 0)):
    """Rotation about the z axis through ``pivot`` (independent Rodrigues oracle)."""
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    p = np.asarray(pivot, float)
    return RigidTransform(R, p - R @ p)


def random_transforms(rng, K, max_w=2.0, max_v=10.0):
    out = []
    for _ in range(K):
        a = rng.normal(size=3)
        out.append(se3_exp(np.concatenate([a / np.linalg.norm(a) * rng.uniform(0, max_w),
                                           rng.uniform(-max_v, max_v, 3)])))
    return out


def random_simplex(rng, n, K):
    return rng.dirichlet(np.ones(K), size=n)


# -- pointwise evaluators ------------------------------------------------------

def test_lbs_examples():
    rng = np.random.default_rng(0)
    T = random_transforms(rng, 3)
    x = rng.normal(size=3) * 10
    for j in range(3):
        assert np.abs(eval_lbs(x, T, np.eye(3)[j]) - T[j].apply(x)).max() < 1e-12
    same = [T[0]] * 3
    assert np.abs(eval_lbs(x, same, [0.2, 0.3, 0.5]) - T[0].apply(x)).max() < 1e-12
    d1, d2 = np.array([1.0, 2, 3]), np.array([-3.0, 0, 5])
    out = eval_lbs(x, [RigidTransform(np.eye(3), d1), RigidTransform(np.eye(3), d2)], [0.5, 0.5])
    assert np.abs(out - (x + (d1 + d2) / 2)).max() < 1e-12


def test_polyrigid_examples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 3)) * 10
    W = random_simplex(rng, 20, 3)
    assert np.abs(eval_polyrigid(x, [RigidTransform.identity()] * 3, W) - x).max() < 1e-12
    T = random_transforms(rng, 3)
    for j in range(3):
        assert np.abs(eval_polyrigid(x, T, np.tile(np.eye(3)[j], (20, 1))) - T[j].apply(x)).max() < 1e-9
    pm = [zrot(0.5), zrot(-0.5)]
    assert np.abs(eval_polyrigid(x, pm, np.full((20, 2), 0.5)) - x).max() < 1e-12


def test_polyrigid_past_pi_takes_the_short_way():
    x = np.array([30.0, 5.0, 1.0])
    T = [RigidTransform.identity(), zrot(3.3)]
    # 3.3 rad has principal angle 2*pi - 3.3 about -z, so no ambiguity is raised
    out = eval_polyrigid(x, T, [0.5, 0.5])
    assert np.abs(out - zrot(-(2 * np.pi - 3.3) / 2).apply(x)).max() < 1e-9
    with pytest.raises(BranchAmbiguity):
        eval_polyrigid(x, [RigidTransform.identity(), zrot(np.pi)], [0.5, 0.5])


def test_ktpolyrigid_examples():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 3)) * 10
    T = random_transforms(rng, 3)
    W = random_simplex(rng, 30, 3)
    same = [T[1]] * 3
    assert np.abs(eval_ktpolyrigid(x, same, W) - T[1].apply(x)).max() < 1e-12
    for j in range(3):
        e = np.tile(np.eye(3)[j], (30, 1))
        assert np.abs(eval_ktpolyrigid(x, T, e) - T[j].apply(x)).max() < 1e-12


def test_elbow_large_bend():
    pivot = np.array([0.0, 40.0, 0.0])
    x = np.array([4.0, 40.0, 2.0])
    T = [RigidTransform.identity(), zrot(2.8, pivot)]
    out = eval_ktpolyrigid(x, T, [0.5, 0.5])
    # reference 0 (tie); half the relative rotation about the same pivot
    assert np.abs(out - zrot(1.4, pivot).apply(x)).max() < 1e-9
    # the same 2.8 rad bend under a rotated parent: PolyRigid logs a global angle past pi
    P = zrot(1.0)
    T2 = [P, RigidTransform.from_matrix(P.matrix @ zrot(2.8, pivot).matrix)]
    out2 = eval_ktpolyrigid(x, T2, [0.5, 0.5])
    assert np.abs(out2 - P.apply(zrot(1.4, pivot).apply(x))).max() < 1e-9
    with pytest.raises(BranchAmbiguity):
        eval_polyrigid(x, [P, RigidTransform.from_matrix(P.matrix @ zrot(np.pi - 1.0, pivot).matrix)], [0.5, 0.5])


def test_weight_floor_skips_negligible_parts():
    x = np.array([1.0, 2.0, 3.0])
    T = [RigidTransform.identity(), zrot(0.3), zrot(np.pi)]
    eval_ktpolyrigid(x, T, [0.7, 0.3 - 1e-7, 1e-7])
    with pytest.raises(BranchAmbiguity):
        eval_ktpolyrigid(x, T, [0.7, 0.3 - 1e-3, 1e-3])
    with pytest.raises(BranchAmbiguity):
        eval_ktpolyrigid(x, T, [0.7, 0.3 - 1e-7, 1e-7], weight_floor=1e-8)


def test_select_reference_examples():
    assert select_reference([0.1, 0.7, 0.2]) == 1
    assert select_reference([0.5, 0.5]) == 0
    assert select_reference(np.eye(4)[3]) == 3
    assert np.array_equal(select_reference(np.array([[0.2, 0.8], [0.6, 0.4]])), [1, 0])


@given(st.integers(0, 10 ** 6))
def test_rigid_motion_is_preserved_by_all_methods(seed):
    rng = np.random.default_rng(seed)
    T = random_transforms(rng, 1, 2.5, 20.0)[0]
    x = rng.normal(size=(10, 3)) * 20
    W = random_simplex(rng, 10, 4)
    ref = T.apply(x)
    for f in (eval_lbs, eval_polyrigid, eval_ktpolyrigid):
        assert np.abs(f(x, [T] * 4, W) - ref).max() < 1e-9


@given(st.integers(0, 10 ** 6))
def test_single_part_limit(seed):
    rng = np.random.default_rng(seed)
    T = random_transforms(rng, 3, 2.0)
    x = rng.normal(size=3) * 20
    j = int(rng.integers(3))
    w = np.full(3, 0.5e-9)
    w[j] = 1 - 1e-9
    assert np.abs(eval_ktpolyrigid(x, T, w) - T[j].apply(x)).max() <= 1e-6


def test_near_identity_agreement(chain):
    ph, wf = chain
    X = ph.grid.centers()[ph.mask]
    W = wf.grid.data[ph.mask]
    rng = np.random.default_rng(3)
    for _ in range(5):
        th = rng.normal(size=(2, 3))
        th *= rng.uniform(0, 0.05, (2, 1)) / np.linalg.norm(th, axis=1, keepdims=True)
        shift = RigidTransform(np.eye(3), rng.uniform(-0.5, 0.5, 3) / np.sqrt(3))
        T = [RigidTransform.from_matrix(shift.matrix @ t.matrix) for t in forward_kinematics(ph.tree, th)]
        a, b, c = eval_lbs(X, T, W), eval_polyrigid(X, T, W), eval_ktpolyrigid(X, T, W)
        for p, q in ((a, b), (a, c), (b, c)):
            assert np.linalg.norm(p - q, axis=1).max() <= 0.01


def test_pose_derivative_richardson(chain):
    ph, wf = chain
    rng = np.random.default_rng(4)
    X = ph.grid.centers()[ph.mask][rng.choice(ph.mask.sum(), 50, replace=False)]
    W = wf.grid.data[ph.mask][rng.choice(ph.mask.sum(), 50, replace=False)]
    theta = np.array([[0.1, -0.2, 0.05], [0.0, 0.3, 1.2]])

    def fd(j, c, h):
        tp, tm = theta.copy(), theta.copy()
        tp[j, c] += h
        tm[j, c] -= h
        return (eval_ktpolyrigid(X, forward_kinematics(ph.tree, tp), W)
                - eval_ktpolyrigid(X, forward_kinematics(ph.tree, tm), W)) / (2 * h)

    for j in range(2):
        for c in range(3):
            d1, d2 = fd(j, c, 1e-4), fd(j, c, 1e-5)
            assert np.isfinite(d1).all() and np.isfinite(d2).all()
            big = np.abs(d2) > 1e-3 * np.abs(d2).max()
            assert np.abs(d1[big] / d2[big] - 1).max() <= 0.15


# -- dense fields --------------------------------------------------------------

def small_grid():
    return GridSpec((9, 8, 7), (1.5, 1.0, 2.0), (-6.0, -4.0, -6.0))


def constant_weights(spec, w):
    return VolumeGrid.on(spec, np.broadcast_to(np.asarray(w, float), spec.dims + (len(w),)).copy())


def test_sample_dense_examples(chain):
    spec = small_grid()
    W = constant_weights(spec, [0.3, 0.7])
    ident = DeformationField.articulated("ktpolyrigid", [RigidTransform.identity()] * 2, W)
    assert np.array_equal(sample_dense(ident, spec).data, np.zeros(spec.dims + (3,)))
    d = np.array([1.5, -2.0, 0.25])
    tr = DeformationField.articulated("lbs", [RigidTransform(np.eye(3), d)], constant_weights(spec, [1.0]))
    assert np.abs(sample_dense(tr, spec).data - d).max() < 1e-12

    ph, wf = chain
    T = forward_kinematics(ph.tree, [[0.1, 0.2, 0.0], [0.0, 0.0, 1.5]])
    for method in ("lbs", "polyrigid", "ktpolyrigid"):
        f = DeformationField.articulated(method, T, wf)
        U = sample_dense(f, ph.grid)
        idx = np.random.default_rng(5).integers(0, 32, (100, 3))
        X = ph.grid.to_world(idx)
        pointwise = f(X) - X
        assert np.abs(U.data[tuple(idx.T)] - pointwise).max() <= 1e-9
        # the dense copy reproduces the analytic field at its own samples
        assert np.abs(map_points(U, X) - f(X)).max() <= 1e-9
        dense = DeformationField.dense(U)
        assert np.abs(dense(X) - f(X)).max() <= 1e-9


def test_articulated_rejects_unknown_method(chain):
    with pytest.raises(ValueError):
        DeformationField.articulated("dqs", [RigidTransform.identity()], chain[1])


def test_compose_and_shape_field():
    spec = small_grid()
    a = DeformationField.dense(VolumeGrid.on(spec, np.full(spec.dims + (3,), 1.0)))
    b = DeformationField.dense(VolumeGrid.on(spec, np.full(spec.dims + (3,), [0.0, 2.0, 0.0])))
    x = np.array([[0.0, 0.0, 0.0]])
    assert np.array_equal(DeformationField.compose(a, b)(x), [[1.0, 3.0, 1.0]])
    # shape displacement acts before the pose; weights are read at the canonical point
    W = VolumeGrid.on(spec, np.stack([np.ones(spec.dims), np.zeros(spec.dims)], -1))
    shape = VolumeGrid.on(spec, np.full(spec.dims + (3,), [0.5, 0.0, 0.0]))
    f = DeformationField.articulated("ktpolyrigid", [zrot(np.pi / 2), RigidTransform.identity()], W, shape=shape)
    assert np.abs(f(x) - zrot(np.pi / 2).apply([0.5, 0, 0])).max() < 1e-12


def test_invert_identity_and_translation():
    spec = small_grid()
    zero = VolumeGrid.on(spec, np.zeros(spec.dims + (3,)))
    inv, valid = invert_field(zero)
    assert valid.all() and np.array_equal(inv.data, zero.data)
    d = np.array([0.7, -1.3, 0.4])
    inv, valid = invert_field(VolumeGrid.on(spec, np.broadcast_to(d, spec.dims + (3,)).copy()))
    assert valid.all() and np.abs(inv.data + d).max() < 1e-9


def test_invert_smooth_phantom_field(chain):
    ph, wf = chain
    T = forward_kinematics(ph.tree, [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    fwd = sample_dense(DeformationField.articulated("ktpolyrigid", T, wf), ph.grid)
    inv, valid = invert_field(fwd, domain=ph.mask)
    err = roundtrip_error(fwd, inv) / ph.grid.spacing[0]
    native = resample_labels(VolumeGrid.on(ph.grid, ph.mask.astype(np.float32)), inv).data > 0.5
    assert native.sum() > 0.8 * ph.mask.sum()
    assert np.mean(err[native] <= 0.05) >= 0.99
    assert np.array_equal(valid, err <= 0.05 + 1e-9)


def test_resample_examples():
    spec = small_grid()
    rng = np.random.default_rng(6)
    img = VolumeGrid.on(spec, rng.normal(size=spec.dims))
    zero = VolumeGrid.on(spec, np.zeros(spec.dims + (3,)))
    assert np.array_equal(resample_image(img, zero).data, img.data)
    shift = VolumeGrid.on(spec, np.broadcast_to([spec.spacing[0], 0, 0], spec.dims + (3,)).copy())
    out = resample_image(img, shift).data
    assert np.array_equal(out[:-1], img.data[1:])
    assert np.array_equal(out[-1], np.zeros_like(out[-1]))

    X = spec.centers()
    ramp = VolumeGrid.on(spec, X @ [0.5, -1.0, 2.0] + 3.0)
    U = VolumeGrid.on(spec, rng.uniform(-1, 1, spec.dims + (3,)))
    Y = X + U.data
    inside = np.all((spec.to_index(Y) >= 0) & (spec.to_index(Y) <= np.array(spec.dims) - 1), axis=-1)
    out = resample_image(ramp, U).data
    assert np.abs(out[inside] - (Y[inside] @ [0.5, -1.0, 2.0] + 3.0)).max() <= 1e-6
    assert np.all(out[~inside & np.any(spec.to_index(Y) < -1e-6, axis=-1)] == 0)


def test_resample_labels_identity_is_bitwise():
    spec = small_grid()
    lab = VolumeGrid.on(spec, np.random.default_rng(7).integers(0, 5, spec.dims).astype(np.float32))
    out = resample_labels(lab, VolumeGrid.on(spec, np.zeros(spec.dims + (3,))))
    assert out.data.dtype == np.float32 and np.array_equal(out.data, lab.data)
