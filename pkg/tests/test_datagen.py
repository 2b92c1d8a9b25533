import numpy as np
import pytest

from aequigrasp import datagen as dg
from aequigrasp.flow import GraspState, rot_z
from aequigrasp.liegroup import Pose, sample_rotation_uniform
from aequigrasp.pointcloud import PointCloud


def test_single_box_surface_equation(rng):
    box = dg.ToyObject("box", [0.06, 0.05, 0.04], Pose())
    pts, normals = dg.sample_surface(box, rng, 800)
    assert np.abs(dg.sdf(box, pts)).max() <= 1e-9
    assert np.abs(np.linalg.norm(normals, axis=-1) - 1.0).max() <= 1e-12


def test_surface_samplers_all_shapes(rng):
    objs = [
        dg.ToyObject("sphere", [0.03, 0, 0], Pose(sample_rotation_uniform(rng), rng.normal(size=3))),
        dg.ToyObject("cylinder", [0.02, 0.07, 0], Pose(sample_rotation_uniform(rng), rng.normal(size=3))),
        dg.ToyObject("box", [0.05, 0.03, 0.06], Pose(sample_rotation_uniform(rng), rng.normal(size=3))),
    ]
    for obj in objs:
        pts, normals = dg.sample_surface(obj, rng, 500)
        assert np.abs(dg.sdf(obj, pts)).max() <= 1e-9
        # outward normals agree with the SDF gradient
        grad = dg.surface_normal(obj, pts + 1e-4 * normals)
        assert (grad * normals).sum(-1).min() > 0.9


def test_scene_object_count_range():
    rng = np.random.default_rng(0)
    cfg = dg.SceneConfig(min_objects=1, max_objects=7, workspace=0.3)
    counts = set()
    for _ in range(10):
        _, objects = dg.make_scene(rng, cfg)
        counts.add(len(objects))
        assert 1 <= len(objects) <= 7
    cfg_bad = dg.SceneConfig(min_objects=0)
    with pytest.raises(ValueError):
        dg.make_scene(rng, cfg_bad)


def test_scene_deterministic():
    cfg = dg.SceneConfig()
    a, objs_a = dg.make_scene(np.random.default_rng(42), cfg)
    b, objs_b = dg.make_scene(np.random.default_rng(42), cfg)
    assert np.array_equal(a.positions, b.positions)
    assert len(objs_a) == len(objs_b)


def test_scene_objects_do_not_overlap():
    rng = np.random.default_rng(9)
    cfg = dg.SceneConfig(min_objects=3, max_objects=3)
    _, objects = dg.make_scene(rng, cfg)
    for i in range(len(objects)):
        for j in range(i + 1, len(objects)):
            d = np.linalg.norm(objects[i].pose.p[:2] - objects[j].pose.p[:2])
            assert d > 0


# ---------------------------------------------------------------------------
# antipodal sampling


def test_antipodal_sphere_acceptance_fraction(trees):
    """Monte Carlo pair acceptance on a sphere matches the friction-cone cap
    fraction (1 - cos(theta_f)) / 2."""
    rng = np.random.default_rng(3)
    r = 0.02
    n = 60_000
    u1 = rng.normal(size=(n, 3))
    u1 /= np.linalg.norm(u1, axis=-1, keepdims=True)
    u2 = rng.normal(size=(n, 3))
    u2 /= np.linalg.norm(u2, axis=-1, keepdims=True)
    hits = sum(
        dg.antipodal_pair_ok(r * a, a, r * b, b) for a, b in zip(u1[:4000], u2[:4000])
    )
    frac = hits / 4000
    expect = (1.0 - np.cos(dg.FRICTION_ANGLE)) / 2.0
    assert frac == pytest.approx(expect, rel=0.25)


def test_antipodal_generates_on_sphere(trees):
    rng = np.random.default_rng(0)
    sph = dg.ToyObject("sphere", [0.025, 0, 0], Pose(np.eye(3), [0, 0, 0.025]))
    recs = dg.antipodal_grasps(sph, trees["jaw2"], rng, 25)
    assert len(recs) == 25
    for rec in recs:
        assert dg.validity_oracle(sph, trees["jaw2"], rec.state)


def test_antipodal_box_wider_than_stroke(trees):
    rng = np.random.default_rng(0)
    big = dg.ToyObject("box", [0.3, 0.3, 0.3], Pose())
    assert dg.antipodal_grasps(big, trees["jaw2"], rng, 5, max_attempts=1500) == []


def test_antipodal_rejects_non_jaw(trees):
    rng = np.random.default_rng(0)
    sph = dg.ToyObject("sphere", [0.02, 0, 0], Pose())
    with pytest.raises(ValueError):
        dg.antipodal_grasps(sph, trees["tri6"], rng, 3)


def test_antipodal_z_rotation_preserves_validity(trees):
    """The z-rotation augmentation cannot invalidate a grasp."""
    rng = np.random.default_rng(1)
    sph = dg.ToyObject("sphere", [0.025, 0, 0], Pose(np.eye(3), [0.05, -0.02, 0.025]))
    recs = dg.antipodal_grasps(sph, trees["jaw2"], rng, 30)
    Rz = rot_z(rng.uniform(0, 2 * np.pi))
    rot_obj = dg.ToyObject("sphere", sph.dims, Pose(Rz @ sph.pose.R, Rz @ sph.pose.p))
    kept = 0
    for rec in recs:
        st = GraspState(Pose(Rz @ rec.state.pose.R, Rz @ rec.state.pose.p), rec.state.q)
        kept += dg.validity_oracle(rot_obj, trees["jaw2"], st)
    assert kept == len(recs)


# ---------------------------------------------------------------------------
# contact optimization


def test_descent_monotone_without_normal_term(trees, rng):
    """lambda_n = 0: L_pos decreases monotonically under backtracking."""
    tree = trees["tri6"]
    sph = dg.ToyObject("sphere", [0.02, 0, 0], Pose(np.eye(3), [0.0, 0, 0.02]))
    pts, nrm = dg.sample_surface(sph, rng, 300)
    # three spread targets near the equator (reachable tripod)
    angles = np.arctan2(pts[:, 1], pts[:, 0])
    sel = []
    for want in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 - 2 * np.pi / 3):
        score = np.cos(angles - want) - 3 * np.abs(pts[:, 2] - 0.02)
        sel.append(int(np.argmax(score)))
    targets = pts[sel] + 0.003 * nrm[sel]
    R0 = np.diag([1.0, -1.0, -1.0])
    p0 = np.array([0.0, 0.0, 0.145])
    pose, q, l_pos, trace = dg._pose_q_descent(tree, sph, targets, nrm[sel], Pose(R0, p0),
                                               tree.mid_config(), steps=200, lambda_n=0.0)
    assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))
    assert l_pos <= 0.005**2


def test_lnorm_zero_at_perfect_alignment():
    # cos(theta_i) = 1 at every contact gives L_norm = 0 by definition
    cosines = np.ones(4)
    assert float((1.0 - cosines).mean()) == 0.0


def test_contact_optimize_recovers_sphere_pinch(trees):
    """On a 4 cm sphere the optimizer lands fingertips within 5 mm of the
    offset contact shell (the analytic antipodal solution family)."""
    rng = np.random.default_rng(4)
    tree = trees["tri6"]
    sph = dg.ToyObject("sphere", [0.02, 0, 0], Pose(np.eye(3), [0.0, 0.0, 0.02]))
    recs = dg.contact_optimize(tree, sph, rng, attempts=120, lambda_n=1e-4)
    assert recs, "no accepted grasps on the sphere"
    from aequigrasp.kinematics import fingertip_points

    best = np.inf
    for rec in recs:
        tips = fingertip_points(tree, rec.state.q) @ rec.state.pose.R.T + rec.state.pose.p
        shell_err = np.abs(np.linalg.norm(tips - sph.pose.p, axis=-1) - (0.02 + dg.CONTACT_OFFSET))
        best = min(best, shell_err.max())
    assert best <= 0.005


def test_force_closure_proxy_cases():
    assert dg.force_closure_proxy(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    # slightly within the friction cone still passes
    c, s = np.cos(0.3), np.sin(0.3)
    assert dg.force_closure_proxy(np.array([[1.0, 0, 0], [-c, s, 0]]))
    # same-side normals fail
    assert not dg.force_closure_proxy(np.array([[1.0, 0, 0], [0.9, 0.1, 0]]))
    # tripod passes
    tri = np.array([[1.0, 0, 0], [-0.5, np.sqrt(3) / 2, 0], [-0.5, -np.sqrt(3) / 2, 0]])
    assert dg.force_closure_proxy(tri)
    # orthogonal triad cannot resist the out-of-cone direction
    assert not dg.force_closure_proxy(np.array([[-1.0, 0, 0], [0.0, -1.0, 0], [0.0, 0, -1.0]]))
    assert not dg.force_closure_proxy(np.ones((1, 3)))


# ---------------------------------------------------------------------------
# collision filter


def test_collision_far_above_passes(trees, rng):
    cloud = PointCloud(rng.uniform(-0.2, 0.2, size=(300, 3)) * np.array([1, 1, 0.2]))
    st = GraspState(Pose(np.eye(3), np.array([0.0, 0.0, 1.0])), np.array([0.02, 0.02]))
    assert dg.collision_filter(cloud, trees["jaw2"], st)


def test_collision_point_inside_sphere_fails(trees):
    tree = trees["jaw2"]
    st = GraspState(Pose(np.eye(3), np.zeros(3)), np.array([0.02, 0.02]))
    centers, radii, _ = kin_spheres = __import__("aequigrasp.kinematics", fromlist=["posed_spheres"]).posed_spheres(tree, st.pose, st.q)
    cloud = PointCloud(centers[:1])  # a scene point at a sphere center
    assert not dg.collision_filter(cloud, tree, st)


def test_collision_matches_brute_force(trees, rng):
    from aequigrasp.kinematics import posed_spheres

    tree = trees["tri6"]
    cloud = PointCloud(rng.uniform(-0.15, 0.15, size=(200, 3)))
    agree = 0
    for _ in range(100):
        st = GraspState(Pose(sample_rotation_uniform(rng), rng.normal(scale=0.1, size=3)),
                        tree.clamp(rng.uniform(-0.3, 1.7, size=6)))
        got = dg.collision_filter(cloud, tree, st)
        centers, radii, owners = posed_spheres(tree, st.pose, st.q)
        naive = True
        for pt in cloud.positions:
            for c, r in zip(centers, radii):
                if np.linalg.norm(pt - c) < r:
                    naive = False
        if naive:  # also the self-collision pairs
            parents = [tree.joints[o].parent if o >= 0 else -2 for o in owners]
            for i in range(len(centers)):
                for j in range(i + 1, len(centers)):
                    if owners[i] == owners[j] or parents[i] == owners[j] or parents[j] == owners[i]:
                        continue
                    if np.linalg.norm(centers[i] - centers[j]) < radii[i] + radii[j]:
                        naive = False
        agree += got == naive
    assert agree == 100


# ---------------------------------------------------------------------------
# validity oracle


def test_oracle_generator_consistency(trees):
    rng = np.random.default_rng(8)
    box = dg.ToyObject("box", [0.05, 0.035, 0.045], Pose(np.eye(3), [0.0, 0.0, 0.0225]))
    recs = dg.antipodal_grasps(box, trees["jaw2"], rng, 20)
    assert recs
    ok = sum(dg.validity_oracle(box, trees["jaw2"], r.state) for r in recs)
    assert ok == len(recs)


def test_oracle_translated_grasp_invalid(trees):
    rng = np.random.default_rng(8)
    box = dg.ToyObject("box", [0.05, 0.035, 0.045], Pose(np.eye(3), [0.0, 0.0, 0.0225]))
    rec = dg.antipodal_grasps(box, trees["jaw2"], rng, 1)[0]
    st = rec.state
    far = GraspState(Pose(st.pose.R, st.pose.p + np.array([0.5, 0.0, 0.0])), st.q)
    assert not dg.validity_oracle(box, trees["jaw2"], far)


def test_oracle_agrees_with_dense_sweep(trees):
    """The 80-step sweep agrees with a 400-step reference on >= 95% of
    random perturbed grasps."""
    rng = np.random.default_rng(5)
    tree = trees["jaw2"]
    sph = dg.ToyObject("sphere", [0.025, 0, 0], Pose(np.eye(3), [0.0, 0.0, 0.025]))
    base = dg.antipodal_grasps(sph, tree, rng, 40)
    states = []
    for rec in base:
        st = rec.state
        for scale in (0.0, 0.01, 0.05):
            jitter = rng.normal(scale=scale, size=3)
            states.append(GraspState(Pose(st.pose.R.copy(), st.pose.p + jitter), st.q.copy()))
        if len(states) >= 200:
            break
    agree = 0
    for st in states[:200]:
        coarse = dg.validity_oracle(sph, tree, st, steps=80)
        dense = dg.validity_oracle(sph, tree, st, steps=400)
        agree += coarse == dense
    assert agree >= 0.95 * len(states[:200])


# ---------------------------------------------------------------------------
# dataset io


def _toy_entry(rng):
    cfg = dg.SceneConfig(max_objects=2, density=8000, table_density=800)
    cloud, objects = dg.make_scene(rng, cfg)
    grasps = [
        dg.GraspRecord("jaw2", GraspState(
            Pose(sample_rotation_uniform(rng), rng.normal(size=3)),
            rng.uniform(0, 0.04, size=2).astype(np.float32).astype(float)), True, 0),
        dg.GraspRecord("dummy", GraspState(
            Pose(sample_rotation_uniform(rng), rng.normal(size=3)), np.zeros(0)), False, -1),
    ]
    return dg.SceneEntry(cloud, objects, grasps)


def test_dataset_round_trip(tmp_path, rng):
    entries = [_toy_entry(rng), dg.SceneEntry(PointCloud(rng.normal(size=(10, 3))), [], [])]
    path = tmp_path / "data.aeqg"
    dg.write_dataset(path, entries, ["jaw2", "dummy"])
    ds = dg.Dataset(path)
    assert ds.scene_count == 2
    assert ds.gripper_names == ["jaw2", "dummy"]
    # clouds round-trip through f32 exactly
    a = ds.scene_cloud(0).positions
    assert np.array_equal(a, entries[0].cloud.positions.astype(np.float32).astype(float))
    # grasp records
    recs = ds.raw_grasps(0)
    assert len(recs) == 2
    assert recs[0].gripper == "jaw2" and recs[0].valid and recs[0].object_id == 0
    assert recs[1].gripper == "dummy" and not recs[1].valid
    assert np.array_equal(recs[0].state.q, entries[0].grasps[0].state.q)
    # empty scene allowed
    assert ds.raw_grasps(1) == []
    assert ds.objects(1) == []
    # training view hides invalid grasps
    assert len(ds.grasps(0)) == 1


def test_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.aeqg"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        dg.Dataset(path)


def test_dataset_byte_identical_rewrite(tmp_path, rng):
    entries = [_toy_entry(rng)]
    p1, p2 = tmp_path / "a.aeqg", tmp_path / "b.aeqg"
    dg.write_dataset(p1, entries, ["jaw2", "dummy"])
    ds = dg.Dataset(p1)
    # reading and rewriting the same content is byte-identical
    again = [dg.SceneEntry(ds.scene_cloud(0), ds.objects(0), ds.raw_grasps(0))]
    dg.write_dataset(p2, again, ds.gripper_names)
    assert p1.read_bytes() == p2.read_bytes()
