"""Toy-scale dataset generation.

Procedural scenes of analytic primitives (boxes, cylinders, spheres) on a
plane, antipodal grasp sampling for parallel jaws, contact-point
optimization for multi-finger grippers, a sphere-model collision filter,
and an analytic closing-sweep validity oracle standing in for physics
simulation. All generation is seed-deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .kinematics import (
    KinematicTree,
    closed_config,
    closing_signs,
    fingertip_points,
    fk_jacobian,
    forward_kinematics,
    posed_spheres,
)
from .liegroup import Pose, matrix_to_quat, quat_to_matrix, so3_exp
from .flow import GraspState
from .pointcloud import PointCloud, read_scene_block, write_scene_block

DATASET_MAGIC = b"AEQG"
DATASET_VERSION = 1

FRICTION_MU = 0.4
FRICTION_ANGLE = np.arctan(FRICTION_MU)
CONTACT_OFFSET = 0.003
REGION_RADIUS = 0.10

_SHAPES = ("box", "cylinder", "sphere")


@dataclass
class ToyObject:
    shape: str
    dims: np.ndarray  # box: full extents; cylinder: (radius, height, 0); sphere: (radius, 0, 0)
    pose: Pose

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        self.dims = np.asarray(self.dims, dtype=float)
        if np.any(self.dims < 0) or self.dims[0] <= 0:
            raise ValueError("object dimensions must be positive")

    @property
    def bounding_radius(self) -> float:
        if self.shape == "box":
            return float(np.linalg.norm(self.dims / 2.0))
        if self.shape == "cylinder":
            return float(np.hypot(self.dims[0], self.dims[1] / 2.0))
        return float(self.dims[0])


@dataclass
class GraspRecord:
    gripper: str
    state: GraspState
    valid: bool
    object_id: int


# ---------------------------------------------------------------------------
# analytic geometry


def sdf(obj: ToyObject, points: np.ndarray) -> np.ndarray:
    """Signed distance to the object surface, world-frame points (..., 3)."""
    points = np.asarray(points, dtype=float)
    local = (points - obj.pose.p) @ obj.pose.R
    if obj.shape == "sphere":
        return np.linalg.norm(local, axis=-1) - obj.dims[0]
    if obj.shape == "box":
        h = obj.dims / 2.0
        d = np.abs(local) - h
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside
    r, h = obj.dims[0], obj.dims[1]
    radial = np.linalg.norm(local[..., :2], axis=-1) - r
    vert = np.abs(local[..., 2]) - h / 2.0
    d = np.stack([radial, vert], axis=-1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    return outside + inside


def surface_normal(obj: ToyObject, points: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Outward normal via the SDF gradient (central differences)."""
    points = np.asarray(points, dtype=float)
    grad = np.empty_like(points)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[..., k] = sdf(obj, points + e) - sdf(obj, points - e)
    n = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.where(n < 1e-12, 1.0, n)


def sample_surface(obj: ToyObject, rng: np.random.Generator, count: int):
    """Area-weighted surface samples: (points (n,3), outward normals (n,3))."""
    if obj.shape == "sphere":
        u = rng.normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        local = obj.dims[0] * u
        normals = u
    elif obj.shape == "box":
        lx, ly, lz = obj.dims
        areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
        face = rng.choice(6, size=count, p=areas / areas.sum())
        uv = rng.uniform(-0.5, 0.5, size=(count, 2))
        local = np.empty((count, 3))
        normals = np.zeros((count, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for k in range(3):
            sel = axis == k
            other = [a for a in range(3) if a != k]
            local[sel, k] = sign[sel] * obj.dims[k] / 2.0
            local[sel, other[0]] = uv[sel, 0] * obj.dims[other[0]]
            local[sel, other[1]] = uv[sel, 1] * obj.dims[other[1]]
            normals[sel, k] = sign[sel]
    else:
        r, h = obj.dims[0], obj.dims[1]
        a_side = 2 * np.pi * r * h
        a_cap = np.pi * r * r
        which = rng.choice(3, size=count, p=np.array([a_side, a_cap, a_cap]) / (a_side + 2 * a_cap))
        theta = rng.uniform(0, 2 * np.pi, size=count)
        local = np.empty((count, 3))
        normals = np.zeros((count, 3))
        side = which == 0
        local[side] = np.stack([r * np.cos(theta[side]), r * np.sin(theta[side]),
                                rng.uniform(-h / 2, h / 2, size=side.sum())], axis=-1)
        normals[side] = np.stack([np.cos(theta[side]), np.sin(theta[side]), np.zeros(side.sum())], axis=-1)
        for cap, sign in ((which == 1, 1.0), (which == 2, -1.0)):
            n = cap.sum()
            rad = r * np.sqrt(rng.uniform(size=n))
            local[cap] = np.stack([rad * np.cos(theta[cap]), rad * np.sin(theta[cap]),
                                   np.full(n, sign * h / 2)], axis=-1)
            normals[cap, 2] = sign
    world = local @ obj.pose.R.T + obj.pose.p
    return world, normals @ obj.pose.R.T


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneConfig:
    min_objects: int = 1
    max_objects: int = 3
    workspace: float = 0.22
    density: float = 30000.0  # surface points per m^2
    table: bool = True
    table_density: float = 4000.0
    table_margin: float = 0.08


def _random_object(rng: np.random.Generator, cfg: SceneConfig) -> ToyObject:
    shape = _SHAPES[int(rng.integers(3))]
    if shape == "box":
        dims = rng.uniform(0.03, 0.075, size=3)
        height = dims[2]
    elif shape == "cylinder":
        dims = np.array([rng.uniform(0.015, 0.032), rng.uniform(0.04, 0.09), 0.0])
        height = dims[1]
    else:
        dims = np.array([rng.uniform(0.02, 0.035), 0.0, 0.0])
        height = 2 * dims[0]
    yaw = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return ToyObject(shape, dims, Pose(R, np.array([0.0, 0.0, height / 2.0])))


def surface_area(obj: ToyObject) -> float:
    if obj.shape == "box":
        lx, ly, lz = obj.dims
        return 2.0 * (lx * ly + ly * lz + lx * lz)
    if obj.shape == "cylinder":
        r, h = obj.dims[0], obj.dims[1]
        return 2 * np.pi * r * h + 2 * np.pi * r * r
    return 4 * np.pi * obj.dims[0] ** 2


def make_scene(rng: np.random.Generator, cfg: SceneConfig):
    """Non-overlapping objects resting on the z=0 plane, plus the sampled cloud."""
    if not (1 <= cfg.min_objects <= cfg.max_objects <= 7):
        raise ValueError("object count must stay within 1..7")
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[ToyObject] = []
    for _ in range(n_obj):
        placed = False
        for _attempt in range(1000):
            obj = _random_object(rng, cfg)
            xy = rng.uniform(-cfg.workspace, cfg.workspace, size=2)
            obj.pose.p[:2] = xy
            rad = obj.bounding_radius
            if all(np.linalg.norm(xy - o.pose.p[:2]) > rad + o.bounding_radius + 0.005 for o in objects):
                objects.append(obj)
                placed = True
                break
        if not placed:
            raise RuntimeError("object placement failed after 1000 rejections")
    clouds = []
    for obj in objects:
        n = max(30, int(np.ceil(surface_area(obj) * cfg.density)))
        pts, _ = sample_surface(obj, rng, n)
        clouds.append(pts)
    if cfg.table:
        half = cfg.workspace + cfg.table_margin
        n_t = int(np.ceil((2 * half) ** 2 * cfg.table_density))
        xy = rng.uniform(-half, half, size=(n_t, 2))
        clouds.append(np.concatenate([xy, np.zeros((n_t, 1))], axis=-1))
    return PointCloud(np.concatenate(clouds, axis=0)), objects


# ---------------------------------------------------------------------------
# antipodal grasps for parallel jaws


def _jaw_geometry(tree: KinematicTree):
    """Pad separation as a function of symmetric q, via the fingertips."""
    if tree.dof != 2 or len(tree.fingertips) != 2:
        raise ValueError("antipodal sampling needs a two-finger gripper")

    def separation(s):
        tips = fingertip_points(tree, np.array([s, s]))
        return float(np.linalg.norm(tips[0] - tips[1]))

    lo = max(j.limits[0] for j in tree.joints)
    hi = min(j.limits[1] for j in tree.joints)
    return separation, lo, hi


def _solve_opening(tree: KinematicTree, width: float):
    """Symmetric joint value giving pad separation `width`, or None."""
    separation, lo, hi = _jaw_geometry(tree)
    w_lo, w_hi = separation(lo), separation(hi)
    if not (min(w_lo, w_hi) - 1e-9 <= width <= max(w_lo, w_hi) + 1e-9):
        return None
    a, b = lo, hi
    for _ in range(60):
        m = 0.5 * (a + b)
        if (separation(m) - width) * (separation(a) - width) <= 0:
            b = m
        else:
            a = m
    return 0.5 * (a + b)


def _orthonormal_to(d: np.ndarray) -> np.ndarray:
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, ref)
    return u / np.linalg.norm(u)


def antipodal_pair_ok(p1, n1, p2, n2, mu: float = FRICTION_MU) -> bool:
    """Both contact normals oppose and the connecting line lies in both cones."""
    cos_f = np.cos(np.arctan(mu))
    d = p2 - p1
    gap = np.linalg.norm(d)
    if gap < 1e-9:
        return False
    d = d / gap
    if np.dot(n1, n2) > -cos_f:
        return False
    return np.dot(d, -n1) >= cos_f and np.dot(-d, -n2) >= cos_f


def antipodal_grasps(obj: ToyObject, tree: KinematicTree, rng: np.random.Generator,
                     count: int, clearance: float = 0.004, max_attempts: int | None = None):
    """Sample antipodal surface pairs and build centered pre-grasp states."""
    separation, lo, hi = _jaw_geometry(tree)
    w_min, w_max = sorted((separation(lo), separation(hi)))
    out: list[GraspRecord] = []
    attempts = max_attempts if max_attempts is not None else 600 * count
    batch = 256
    done = 0
    tips_mid = fingertip_points(tree, tree.mid_config())
    tip_center_z = float(tips_mid.mean(axis=0) @ np.array([0, 0, 1.0]))
    while len(out) < count and done < attempts:
        n = min(batch, attempts - done)
        done += n
        pts1, nrm1 = sample_surface(obj, rng, n)
        pts2, nrm2 = sample_surface(obj, rng, n)
        rolls = rng.uniform(0, 2 * np.pi, size=n)
        for i in range(n):
            p1, n1, p2, n2 = pts1[i], nrm1[i], pts2[i], nrm2[i]
            gap = np.linalg.norm(p2 - p1)
            width = gap + 2 * clearance
            if gap < max(w_min, 1e-6) or width > w_max:
                continue
            if not antipodal_pair_ok(p1, n1, p2, n2):
                continue
            s = _solve_opening(tree, width)
            if s is None or not (lo <= s <= hi):
                continue
            d = (p2 - p1) / gap
            u = _orthonormal_to(d)
            w = np.cross(d, u)
            approach = np.cos(rolls[i]) * u + np.sin(rolls[i]) * w
            x_axis = np.cross(d, approach)
            R = np.stack([x_axis, d, approach], axis=-1)
            center = 0.5 * (p1 + p2)
            base_p = center - R @ np.array([0.0, 0.0, tip_center_z])
            q = np.array([s, s])
            state = GraspState(Pose(R, base_p), q)
            # generator/checker closure: keep only grasps whose closing
            # motion actually produces opposing contacts
            _, normals, reached = closing_sweep(obj, tree, state)
            if reached.sum() < 2 or not force_closure_proxy(normals):
                continue
            out.append(GraspRecord(tree.name, state, True, -1))
            if len(out) >= count:
                break
    return out


# ---------------------------------------------------------------------------
# contact optimization for multi-finger grippers


def _pad_directions(tree: KinematicTree, q0: np.ndarray) -> list[np.ndarray]:
    """Per fingertip: the pad normal in the marker joint's frame, taken as the
    closing-direction of the tip (velocity under the closing motion)."""
    signs = closing_signs(tree)
    poses = forward_kinematics(tree, q0)
    n_f = len(tree.fingertips)
    J = fk_jacobian(tree, q0).reshape(n_f, 3, tree.dof)
    pads = []
    for i, (jidx, _off) in enumerate(tree.fingertips):
        v = J[i] @ signs
        nv = np.linalg.norm(v)
        v = v / nv if nv > 1e-9 else np.array([0.0, 0.0, 1.0])
        pads.append(poses[jidx].R.T @ v)
    return pads


def _pose_q_descent(tree: KinematicTree, obj: ToyObject, targets: np.ndarray,
                    target_normals: np.ndarray, base: Pose, q0: np.ndarray,
                    steps: int = 150, lambda_n: float = 0.1, lr0: float = 1.0):
    """Backtracking gradient descent of L_pos + lambda_n * L_norm over
    (base pose, q). Returns (pose, q, L_pos, trace of L values)."""
    R, p = base.R.copy(), base.p.copy()
    q = q0.copy()
    lo = np.array([j.limits[0] for j in tree.joints])
    hi = np.array([j.limits[1] for j in tree.joints])
    markers = tree.fingertips
    N = len(markers)
    pads = _pad_directions(tree, q0)
    marker_joint = [jidx for jidx, _ in markers]
    rev_ancestors = []
    for jidx, _ in markers:
        chain = set()
        k = jidx
        while k >= 0:
            if tree.joints[k].jtype == "revolute":
                chain.add(k)
            k = tree.joints[k].parent
        rev_ancestors.append(chain)

    def forward(R, p, q):
        poses = forward_kinematics(tree, q)
        tips_local = np.array([poses[j].R @ off + poses[j].p for j, off in markers])
        tips = tips_local @ R.T + p
        pad_w = np.array([R @ (poses[marker_joint[i]].R @ pads[i]) for i in range(N)])
        return poses, tips_local, tips, pad_w

    def losses(R, p, q):
        _, _, tips, pad_w = forward(R, p, q)
        r = tips - targets
        l_pos = float((r**2).sum(axis=-1).mean())
        cosines = (pad_w * (-target_normals)).sum(axis=-1)
        return l_pos, float((1.0 - cosines).mean())

    lp, ln = losses(R, p, q)
    total = lp + lambda_n * ln
    trace = [total]
    for _ in range(steps):
        poses, tips_local, tips, pad_w = forward(R, p, q)
        r = tips - targets  # (N, 3)
        v = tips_local @ R.T  # d(exp(w)R x)/dw = -[R x]_x
        Jl = fk_jacobian(tree, q, markers).reshape(N, 3, tree.dof)

        g_tip = 2.0 / N * r
        g_p = g_tip.sum(axis=0)
        g_w = np.cross(v, g_tip).sum(axis=0)
        g_q = np.einsum("ni,nik->k", g_tip @ R, Jl)

        # pad alignment: cos_i = pad_i . (-tn_i) with pad rigid on the marker
        # joint; rotations act as d(pad)/dw = -[pad]_x
        m = np.cross(pad_w, -target_normals)  # grad of cos wrt a world rotation
        g_w += -(lambda_n / N) * m.sum(axis=0)
        axes_w = []
        for k, joint in enumerate(tree.joints):
            parent = poses[joint.parent] if joint.parent >= 0 else None
            pre_r = (parent.R if parent is not None else np.eye(3)) @ joint.offset.R
            axes_w.append(R @ (pre_r @ joint.axis))
        for i in range(N):
            for k in rev_ancestors[i]:
                g_q[k] += -(lambda_n / N) * float(axes_w[k] @ m[i])

        c_p = 2.0
        c_w = 2.0 * float((v**2).sum(-1).mean()) + 1e-6
        c_q = 2.0 / N * np.einsum("nik,nik->k", Jl, Jl) + 1e-8
        d_p, d_w, d_q = g_p / c_p, g_w / c_w, g_q / c_q

        lr = lr0
        improved = False
        for _ in range(16):
            R_new = so3_exp(-lr * d_w) @ R
            p_new = p - lr * d_p
            q_new = np.clip(q - lr * d_q, lo, hi)
            lp2, ln2 = losses(R_new, p_new, q_new)
            if lp2 + lambda_n * ln2 < total - 1e-14:
                R, p, q = R_new, p_new, q_new
                total = lp2 + lambda_n * ln2
                lp = lp2
                improved = True
                break
            lr *= 0.5
        trace.append(total)
        stalled = len(trace) > 6 and trace[-7] - trace[-1] < 1e-12
        if not improved or stalled or lp < (0.002) ** 2:
            break
    return Pose(R, p), q, lp, trace


def force_closure_proxy(normals: np.ndarray, mu: float = FRICTION_MU) -> bool:
    """Contact normals positively span the origin in the best-fit plane,
    with friction widening each direction by the cone half-angle."""
    normals = np.asarray(normals, dtype=float)
    if len(normals) < 2:
        return False
    n = normals / np.linalg.norm(normals, axis=-1, keepdims=True)
    # grip forces push along -n; project them onto their principal plane
    forces = -n
    _, _, vt = np.linalg.svd(forces)
    basis = vt[:2]
    xy = forces @ basis.T
    norms = np.linalg.norm(xy, axis=-1)
    ok = norms > 1e-9
    if ok.sum() < 2:
        return False
    ang = np.sort(np.arctan2(xy[ok, 1], xy[ok, 0]))
    gaps = np.diff(np.concatenate([ang, ang[:1] + 2 * np.pi]))
    theta_f = np.arctan(mu)
    return float(gaps.max()) <= np.pi + 2 * theta_f + 1e-9


def contact_optimize(tree: KinematicTree, obj: ToyObject, rng: np.random.Generator,
                     attempts: int, lambda_n: float = 0.1, accept_pos: float = 0.005,
                     steps: int = 150):
    """Fingertip-to-target optimization over grasp regions; low yield is normal."""
    if len(tree.fingertips) < 2:
        raise ValueError("contact optimization needs at least two fingertips")
    n_f = len(tree.fingertips)
    surf_pts, surf_nrm = sample_surface(obj, rng, 600)
    from .pointcloud import PointCloud as _PC, fps as _fps

    region_order = _fps(_PC(surf_pts), min(len(surf_pts), max(attempts, 8)),
                        seed=int(rng.integers(2**31)))
    neutral = tree.clamp(np.zeros(tree.dof))
    closed = closed_config(tree)
    out: list[GraspRecord] = []
    for a in range(attempts):
        center = surf_pts[region_order[a % len(region_order)]]
        in_region = np.linalg.norm(surf_pts - center, axis=-1) <= REGION_RADIUS
        idx = np.flatnonzero(in_region)
        if len(idx) < n_f:
            continue
        n_bar = surf_nrm[idx].mean(axis=0)
        nn = np.linalg.norm(n_bar)
        n_bar = n_bar / nn if nn > 1e-6 else np.array([0.0, 0.0, 1.0])
        approach = -n_bar  # gripper z points at the region
        u = _orthonormal_to(approach)
        roll = rng.uniform(0, 2 * np.pi)
        x_axis = np.cos(roll) * u + np.sin(roll) * np.cross(approach, u)
        y_axis = np.cross(approach, x_axis)
        R0 = np.stack([x_axis, y_axis, approach], axis=-1)
        # pose a fingertip template over the region, then take the nearest
        # surface points as the corresponding finger targets
        frac = rng.uniform(0.2, 0.7)
        q0 = neutral + frac * (closed - neutral)
        tips_t = fingertip_points(tree, q0)
        depth = rng.uniform(-0.005, 0.02)
        c = surf_pts[idx].mean(axis=0)
        p0 = c + depth * approach - R0 @ tips_t.mean(axis=0)
        ideal = tips_t @ R0.T + p0
        d2 = ((surf_pts[None, :, :] - ideal[:, None, :]) ** 2).sum(-1)
        pick = np.argmin(d2, axis=1)
        if len(set(pick.tolist())) < n_f:
            continue
        if np.sqrt(d2[np.arange(n_f), pick]).max() > 0.04:
            continue
        targets = surf_pts[pick] + CONTACT_OFFSET * surf_nrm[pick]
        t_normals = surf_nrm[pick]
        sep = np.linalg.norm(targets[:, None] - targets[None], axis=-1)
        if n_f >= 2 and sep[np.triu_indices(n_f, 1)].min() < 0.006:
            continue
        pose, q, l_pos, _ = _pose_q_descent(tree, obj, targets, t_normals, Pose(R0, p0),
                                            q0, steps=steps, lambda_n=lambda_n)
        if l_pos > accept_pos**2:
            continue
        # back the fingers off until the pre-grasp is clear of the surface
        signs = closing_signs(tree)
        for _retract in range(6):
            tips = fingertip_points(tree, q) @ pose.R.T + pose.p
            if sdf(obj, tips).min() > 0.001:
                break
            q = tree.clamp(q - 0.04 * signs)
        else:
            continue
        # the contacts that count are the ones the closing motion produces
        state = GraspState(pose, q)
        _, normals, reached = closing_sweep(obj, tree, state)
        if reached.sum() < 2 or not force_closure_proxy(normals):
            continue
        out.append(GraspRecord(tree.name, state, True, -1))
    return out


def _assignment_order(tips: np.ndarray, targets: np.ndarray) -> np.ndarray:
    from itertools import permutations

    n = len(tips)
    best, best_cost = None, np.inf
    for perm in permutations(range(n)):
        cost = sum(np.sum((tips[i] - targets[perm[i]]) ** 2) for i in range(n))
        if cost < best_cost:
            best, best_cost = perm, cost
    return np.array(best)


# ---------------------------------------------------------------------------
# collision filter and validity oracle


def collision_filter(scene: PointCloud, tree: KinematicTree, state: GraspState) -> bool:
    """True iff no scene point is inside a gripper sphere and no non-adjacent
    sphere pair overlaps (self-collision)."""
    centers, radii, owners = posed_spheres(tree, state.pose, state.q)
    if len(centers) == 0:
        return True
    d2 = ((scene.positions[:, None, :] - centers[None]) ** 2).sum(-1)
    if np.any(d2 < (radii**2)[None]):
        return False
    parents = np.array([tree.joints[j].parent if j >= 0 else -2 for j in owners])
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            if owners[i] == owners[j]:
                continue
            if parents[i] == owners[j] or parents[j] == owners[i]:
                continue
            gap2 = ((centers[i] - centers[j]) ** 2).sum()
            if gap2 < (radii[i] + radii[j]) ** 2:
                return False
    return True


def _finger_chains(tree: KinematicTree):
    """Per fingertip: ordered joint indices from root to the marker joint."""
    chains = []
    for jidx, _off in tree.fingertips:
        chain = []
        k = jidx
        while k >= 0:
            chain.append(k)
            k = tree.joints[k].parent
        chains.append(list(reversed(chain)))
    return chains


def closing_sweep(obj: ToyObject, tree: KinematicTree, state: GraspState,
                  steps: int = 80, contact_tol: float = 0.002):
    """March each finger toward its closed limit until its pad region reaches
    the object surface; returns (contact points, contact normals, reached).

    Contact is probed at the marker and two points back along the distal
    link, approximating pad contact rather than a single tip point.
    """
    signs = closing_signs(tree)
    target = closed_config(tree)
    chains = _finger_chains(tree)
    contacts, normals, reached = [], [], []
    for f, (jidx, off) in enumerate(tree.fingertips):
        chain = [c for c in chains[f] if signs[c] != 0]
        probes = [off, 0.7 * off, 0.4 * off]
        q = state.q.copy()
        hit = False
        for s in range(steps + 1):
            frac = s / steps
            for c in chain:
                q[c] = state.q[c] + frac * (target[c] - state.q[c])
            poses = forward_kinematics(tree, q)
            pts = np.array([state.pose.R @ (poses[jidx].R @ pr + poses[jidx].p) + state.pose.p
                            for pr in probes])
            dists = sdf(obj, pts)
            k = int(np.argmin(dists))
            if dists[k] <= contact_tol:
                contacts.append(pts[k])
                normals.append(surface_normal(obj, pts[k][None])[0])
                hit = True
                break
        reached.append(hit)
    return np.array(contacts).reshape(-1, 3), np.array(normals).reshape(-1, 3), np.array(reached)


def validity_oracle(obj: ToyObject, tree: KinematicTree, state: GraspState,
                    scene: PointCloud | None = None, steps: int = 80,
                    min_contacts: int = 2) -> bool:
    """Analytic pre-grasp validity: the closing motion reaches the object
    with enough contacts, the contact normals pass the force-closure proxy,
    and the pre-grasp state is collision-free when a scene is given."""
    if not tree.fingertips:
        return False
    if scene is not None and not collision_filter(scene, tree, state):
        return False
    # fingertips must start outside the object
    tips = fingertip_points(tree, state.q) @ state.pose.R.T + state.pose.p
    if np.any(sdf(obj, tips) < 0):
        return False
    contacts, normals, reached = closing_sweep(obj, tree, state, steps=steps)
    if reached.sum() < min_contacts:
        return False
    return force_closure_proxy(normals)


# ---------------------------------------------------------------------------
# dataset serialization


@dataclass
class SceneEntry:
    cloud: PointCloud
    objects: list[ToyObject]
    grasps: list[GraspRecord] = field(default_factory=list)


class Dataset:
    """Random-access reader over the binary dataset format."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != DATASET_MAGIC:
                raise ValueError(f"bad dataset magic {magic!r}")
            (version,) = struct.unpack("<I", f.read(4))
            if version != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {version}")
            (n_names,) = struct.unpack("<H", f.read(2))
            self.gripper_names = []
            for _ in range(n_names):
                (ln,) = struct.unpack("<B", f.read(1))
                self.gripper_names.append(f.read(ln).decode())
            (self.scene_count,) = struct.unpack("<I", f.read(4))
            self.offsets = list(struct.unpack(f"<{self.scene_count}Q", f.read(8 * self.scene_count))) if self.scene_count else []
        self._cache: dict[int, SceneEntry] = {}

    def _load(self, i: int) -> SceneEntry:
        if i in self._cache:
            return self._cache[i]
        if not 0 <= i < self.scene_count:
            raise IndexError(i)
        with open(self.path, "rb") as f:
            f.seek(self.offsets[i])
            cloud = read_scene_block(f)
            (n_obj,) = struct.unpack("<B", f.read(1))
            objects = []
            for _ in range(n_obj):
                kind, = struct.unpack("<B", f.read(1))
                vals = struct.unpack("<10f", f.read(40))
                dims = np.array(vals[:3])
                quat = np.array(vals[3:7])
                pos = np.array(vals[7:10])
                objects.append(ToyObject(_SHAPES[kind], dims, Pose(quat_to_matrix(quat), pos)))
            (n_grasp,) = struct.unpack("<I", f.read(4))
            grasps = []
            for _ in range(n_grasp):
                gid, = struct.unpack("<H", f.read(2))
                vals = struct.unpack("<7f", f.read(28))
                quat = np.array(vals[:4])
                pos = np.array(vals[4:7])
                (dof,) = struct.unpack("<H", f.read(2))
                q = np.frombuffer(f.read(4 * dof), dtype="<f4").astype(float) if dof else np.zeros(0)
                (valid,) = struct.unpack("<B", f.read(1))
                oid = struct.unpack("<h", f.read(2))[0]
                grasps.append(GraspRecord(self.gripper_names[gid],
                                          GraspState(Pose(quat_to_matrix(quat), pos), q),
                                          bool(valid), oid))
        entry = SceneEntry(cloud, objects, grasps)
        self._cache[i] = entry
        return entry

    def scene_cloud(self, i: int) -> PointCloud:
        return self._load(i).cloud

    def objects(self, i: int) -> list[ToyObject]:
        return self._load(i).objects

    def raw_grasps(self, i: int) -> list[GraspRecord]:
        return self._load(i).grasps

    def grasps(self, i: int):
        """Valid grasps as (gripper name, Pose, q) tuples for training."""
        return [(g.gripper, g.state.pose, g.state.q) for g in self._load(i).grasps if g.valid]

    def grasp_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for i in range(self.scene_count):
            for g in self._load(i).grasps:
                counts[g.gripper] = counts.get(g.gripper, 0) + 1
        return counts


def write_dataset(path, scenes: list[SceneEntry], gripper_names: list[str]) -> None:
    """Serialize scenes with their objects and grasp records; random access by scene."""
    name_to_id = {n: i for i, n in enumerate(gripper_names)}
    import io

    blocks = []
    for entry in scenes:
        buf = io.BytesIO()
        write_scene_block(buf, entry.cloud)
        buf.write(struct.pack("<B", len(entry.objects)))
        for obj in entry.objects:
            buf.write(struct.pack("<B", _SHAPES.index(obj.shape)))
            quat = matrix_to_quat(obj.pose.R)
            vals = list(obj.dims) + list(quat) + list(obj.pose.p)
            buf.write(struct.pack("<10f", *vals))
        buf.write(struct.pack("<I", len(entry.grasps)))
        for g in entry.grasps:
            buf.write(struct.pack("<H", name_to_id[g.gripper]))
            quat = matrix_to_quat(g.state.pose.R)
            buf.write(struct.pack("<7f", *quat, *g.state.pose.p))
            buf.write(struct.pack("<H", len(g.state.q)))
            if len(g.state.q):
                buf.write(np.ascontiguousarray(g.state.q, dtype="<f4").tobytes())
            buf.write(struct.pack("<B", 1 if g.valid else 0))
            buf.write(struct.pack("<h", g.object_id))
        blocks.append(buf.getvalue())

    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<H", len(gripper_names)))
        for n in gripper_names:
            enc = n.encode()
            f.write(struct.pack("<B", len(enc)))
            f.write(enc)
        f.write(struct.pack("<I", len(blocks)))
        header_end = f.tell() + 8 * len(blocks)
        offsets = []
        pos = header_end
        for b in blocks:
            offsets.append(pos)
            pos += len(b)
        if blocks:
            f.write(struct.pack(f"<{len(blocks)}Q", *offsets))
        for b in blocks:
            f.write(b)
