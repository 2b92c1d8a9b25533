"""Flow matching on SE(3) x R^D: priors, conditional paths, the weighted
training loss, and the Euler sampler with optional dummy-class guidance.

Paths interpolate rotation along the geodesic with a constant body-frame
rate, translation and joints linearly. The prior is Haar-uniform in
orientation, normal around the scene centroid in position, and normal
around the joint-limit midpoints in configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as ly
from . import model as md
from .kinematics import KinematicTree
from .liegroup import Pose, sample_rotation_uniform, so3_exp, so3_log
from .pointcloud import PointCloud


class GeodesicAmbiguityError(ValueError):
    """Raised when the endpoint rotations are (numerically) antipodal."""


@dataclass
class GraspState:
    pose: Pose
    q: np.ndarray

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=float).reshape(-1)


@dataclass
class FlowConfig:
    sigma_p: float = 0.3
    lambda_omega: float = 1.0
    lambda_v: float = 10.0
    lambda_q: float = 1.0
    alpha_late: float = 2.0
    p_dummy: float = 0.1
    steps: int = 50
    guidance: float = 0.0


def sample_prior(rng: np.random.Generator, tree: KinematicTree, centroid: np.ndarray,
                 sigma_p: float = 0.3) -> GraspState:
    """Haar rotation, normal position around the scene centroid, normal joints."""
    R = sample_rotation_uniform(rng)
    p = np.asarray(centroid, dtype=float) + sigma_p * rng.normal(size=3)
    if tree.dof:
        mid = tree.mid_config()
        span = np.array([j.limits[1] - j.limits[0] for j in tree.joints])
        q = mid + (span / 4.0) * rng.normal(size=tree.dof)
    else:
        q = np.zeros(0)
    return GraspState(Pose(R, p), q)


def conditional_path(x0: GraspState, x1: GraspState, t: float):
    """Interpolant state and its constant target velocities.

    Rotation follows the geodesic R_t = R0 exp(t log(R0^T R1)) with constant
    body-frame rate; translation and joints are linear. Raises
    GeodesicAmbiguityError when the endpoints are a half-turn apart.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"path time {t} outside [0, 1]")
    rel = x0.pose.R.T @ x1.pose.R
    cos_angle = (np.trace(rel) - 1.0) / 2.0
    if cos_angle <= -1.0 + 1e-9:
        raise GeodesicAmbiguityError("endpoint rotations are antipodal; resample the prior")
    omega = so3_log(rel)
    R_t = x0.pose.R @ so3_exp(t * omega)
    v = x1.pose.p - x0.pose.p
    p_t = x0.pose.p + t * v
    qdot = x1.q - x0.q
    q_t = x0.q + t * qdot
    return GraspState(Pose(R_t, p_t), q_t), (omega, v, qdot)


# ---------------------------------------------------------------------------
# batches


@dataclass
class SceneGroup:
    """All flow targets for one (scene instance, gripper) pair in a batch."""

    cloud: PointCloud
    fps_seed: int
    gripper: str
    t: np.ndarray  # (B,)
    pose_R: np.ndarray  # (B, 3, 3) interpolant poses
    pose_p: np.ndarray  # (B, 3)
    q: np.ndarray  # (B, D)
    target_omega: np.ndarray  # (B, 3)
    target_v: np.ndarray  # (B, 3)
    target_qdot: np.ndarray  # (B, D)


@dataclass
class FlowBatch:
    groups: list[SceneGroup] = field(default_factory=list)

    @property
    def size(self) -> int:
        return sum(len(g.t) for g in self.groups)


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_training_batch(dataset, trees: dict[str, KinematicTree], rng: np.random.Generator,
                        fcfg: FlowConfig, scenes_per_batch: int, grasps_per_batch: int,
                        scene_indices=None, voxel_cell: float = 0.001,
                        cardinality: int = 2048) -> FlowBatch:
    """Sample scenes and grasps, apply z-rotation and FPS-seed augmentation,
    draw priors and times, and relabel a fraction to the dummy class.

    `dataset` provides scene_count, scene_cloud(i), grasps(i) -> list of
    (gripper name, Pose, q) records. Scene clouds are preprocessed here
    (voxel + FPS to the fixed cardinality) under a fresh seed per batch.
    """
    from .pointcloud import preprocess_cloud

    if scene_indices is None:
        scene_indices = np.arange(dataset.scene_count)
    scene_indices = np.asarray(scene_indices)
    nonempty = [i for i in scene_indices if dataset.grasps(int(i))]
    if not nonempty:
        raise ValueError("dataset has no grasps to train on")
    chosen = rng.choice(nonempty, size=min(scenes_per_batch, len(nonempty)), replace=False)
    per_scene = max(1, grasps_per_batch // len(chosen))

    batch = FlowBatch()
    for si in chosen:
        si = int(si)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        Rz = rot_z(angle)
        fps_seed = int(rng.integers(2**31))
        rotated = PointCloud(dataset.scene_cloud(si).positions @ Rz.T)
        cloud = preprocess_cloud(rotated, voxel_cell, cardinality, seed=fps_seed)
        centroid = cloud.positions.mean(axis=0)
        records = dataset.grasps(si)
        picks = rng.integers(0, len(records), size=per_scene)
        by_gripper: dict[str, list] = {}
        for pick in picks:
            name, pose, q = records[int(pick)]
            if fcfg.p_dummy > 0 and rng.uniform() < fcfg.p_dummy:
                name, q = "dummy", np.zeros(0)
            pose = Pose(Rz @ pose.R, Rz @ pose.p)
            by_gripper.setdefault(name, []).append((pose, q))
        for name, items in sorted(by_gripper.items()):
            tree = trees[name]
            t_s, R_s, p_s, q_s, to, tv, tq = [], [], [], [], [], [], []
            for pose1, q1 in items:
                x1 = GraspState(pose1, q1)
                for _ in range(100):
                    x0 = sample_prior(rng, tree, centroid, fcfg.sigma_p)
                    t = float(rng.uniform())
                    try:
                        x_t, (omega, v, qdot) = conditional_path(x0, x1, t)
                        break
                    except GeodesicAmbiguityError:
                        continue
                else:
                    raise RuntimeError("could not sample a non-antipodal prior")
                t_s.append(t)
                R_s.append(x_t.pose.R)
                p_s.append(x_t.pose.p)
                q_s.append(x_t.q)
                to.append(omega)
                tv.append(v)
                tq.append(qdot)
            batch.groups.append(
                SceneGroup(cloud, fps_seed, name, np.array(t_s),
                           np.stack(R_s), np.stack(p_s), np.stack(q_s),
                           np.stack(to), np.stack(tv), np.stack(tq))
            )
    return batch


# ---------------------------------------------------------------------------
# loss


def fm_loss(view, mcfg: md.ModelConfig, fcfg: FlowConfig, trees: dict[str, KinematicTree],
            batch: FlowBatch):
    """Late-time-weighted MSE between predicted and target velocities.

    loss = mean over elements of w(t) * [lw*|omega-omega*|^2 + lv*|v-v*|^2
    + lq*|qdot-qdot*|^2 / max(D,1)], with w(t) = 1 + alpha*t.
    """
    total = None
    count = 0
    prev_cloud = None
    pyramid = None
    for group in batch.groups:
        if prev_cloud is not group.cloud:
            pyramid = md.scene_encode(group.cloud, view, mcfg, seed=group.fps_seed)
            prev_cloud = group.cloud
        tree = trees[group.gripper]
        om, v, qd = md.model_forward(view, mcfg, pyramid, tree, group.pose_R,
                                     group.pose_p, group.q, group.t)
        w_t = 1.0 + fcfg.alpha_late * group.t
        r_om = ad.sub(om, group.target_omega)
        r_v = ad.sub(v, group.target_v)
        per = ad.add(ad.scale(ad.sum_(ad.mul(r_om, r_om), axis=-1), fcfg.lambda_omega),
                     ad.scale(ad.sum_(ad.mul(r_v, r_v), axis=-1), fcfg.lambda_v))
        if tree.dof > 0:
            r_q = ad.sub(qd, group.target_qdot)
            per = ad.add(per, ad.scale(ad.sum_(ad.mul(r_q, r_q), axis=-1), fcfg.lambda_q / tree.dof))
        weighted = ad.sum_(ad.mul(per, w_t))
        total = weighted if total is None else ad.add(total, weighted)
        count += len(group.t)
    return ad.scale(total, 1.0 / max(count, 1))


# ---------------------------------------------------------------------------
# sampling


def integrate(view, mcfg: md.ModelConfig, fcfg: FlowConfig, pyramid, tree: KinematicTree,
              rng: np.random.Generator, steps: int | None = None, guidance: float | None = None,
              count: int = 1, dummy_tree: KinematicTree | None = None,
              x0: list[GraspState] | None = None) -> list[GraspState]:
    """Euler-integrate the learned field from prior draws to grasp states.

    With nonzero guidance s the velocity is extrapolated away from the
    dummy-gripper prediction: v = v_dummy + (1+s) * (v_cond - v_dummy).
    The dummy branch is skipped entirely at s = 0.
    """
    steps = fcfg.steps if steps is None else steps
    guidance = fcfg.guidance if guidance is None else guidance
    if steps < 1:
        raise ValueError("need at least one integration step")
    centroid = pyramid.positions[0].mean(axis=0)
    if x0 is None:
        x0 = [sample_prior(rng, tree, centroid, fcfg.sigma_p) for _ in range(count)]
    count = len(x0)
    R = np.stack([s.pose.R for s in x0])
    p = np.stack([s.pose.p for s in x0])
    q = np.stack([s.q for s in x0]) if tree.dof else np.zeros((count, 0))

    dt = 1.0 / steps
    for i in range(steps):
        t = np.full(count, i / steps)
        om, v, qd = model_velocity(view, mcfg, pyramid, tree, R, p, q, t)
        if guidance != 0.0:
            if dummy_tree is None:
                raise ValueError("guidance requires the dummy gripper tree")
            om_u, v_u, _ = model_velocity(view, mcfg, pyramid, dummy_tree, R, p,
                                          np.zeros((count, 0)), t)
            om = om_u + (1.0 + guidance) * (om - om_u)
            v = v_u + (1.0 + guidance) * (v - v_u)
        if not (np.all(np.isfinite(om)) and np.all(np.isfinite(v)) and np.all(np.isfinite(qd))):
            raise FloatingPointError(f"non-finite velocity at step {i}")
        R = R @ so3_exp(dt * om)
        p = p + dt * v
        if tree.dof:
            q = q + dt * qd
        # guard orthogonality drift across steps
        u, _, vt = np.linalg.svd(R)
        det = np.linalg.det(u @ vt)
        u[det < 0, :, -1] *= -1.0
        R = u @ vt
    out = []
    for b in range(count):
        qb = tree.clamp(q[b]) if tree.dof else np.zeros(0)
        out.append(GraspState(Pose(R[b], p[b]), qb))
    return out


def model_velocity(view, mcfg, pyramid, tree, R, p, q, t):
    om, v, qd = md.model_forward(view, mcfg, pyramid, tree, R, p, q, t)
    return np.asarray(ad.value_of(om)), np.asarray(ad.value_of(v)), np.asarray(ad.value_of(qd))
