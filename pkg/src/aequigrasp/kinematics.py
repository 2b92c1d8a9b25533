"""Gripper kinematic trees: description files, forward kinematics, Jacobians.

A gripper is a topologically ordered list of revolute/prismatic joints with
fixed parent offsets. The description format is line oriented:

    name=<gripper name>
    irreps=<per-joint embedding spec, e.g. 8x0+4x1+2x2>
    joint <n> parent=<n|base> type=<revolute|prismatic> axis=<x,y,z> \
        offset_quat=<w,x,y,z> offset_pos=<x,y,z> limits=<lo,hi>
    fingertip joint=<n> offset=<x,y,z>
    sphere joint=<n|base> center=<x,y,z> radius=<r>

`sphere` lines give the per-link collision model used by the data pipeline.
Joint motion is applied after the fixed offset: T_i = T_parent * offset_i *
motion_i(q_i), so the axis is expressed in the joint's own frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .irreps import IrrepsSpec, parse_irreps
from .liegroup import Pose, compose, matrix_to_quat, quat_to_matrix, so3_exp

BASE = -1


class GripperParseError(ValueError):
    pass


@dataclass
class Joint:
    name: str
    parent: int  # joint index, or BASE
    jtype: str  # "revolute" | "prismatic"
    axis: np.ndarray
    offset: Pose
    limits: tuple[float, float]
    offset_quat: np.ndarray = None  # as parsed, so printing round-trips exactly


@dataclass
class KinematicTree:
    name: str
    joints: list[Joint]
    fingertips: list[tuple[int, np.ndarray]]
    spheres: list[tuple[int, np.ndarray, float]]
    embed_spec: IrrepsSpec

    @property
    def dof(self) -> int:
        return len(self.joints)

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(name)

    def mid_config(self) -> np.ndarray:
        return np.array([(j.limits[0] + j.limits[1]) / 2.0 for j in self.joints])

    def clamp(self, q: np.ndarray) -> np.ndarray:
        if self.dof == 0:
            return np.zeros(0)
        lo = np.array([j.limits[0] for j in self.joints])
        hi = np.array([j.limits[1] for j in self.joints])
        return np.clip(q, lo, hi)


def _parse_floats(text: str, n: int, what: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != n:
        raise GripperParseError(f"{what}: expected {n} comma-separated values, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as e:
        raise GripperParseError(f"{what}: bad number in {text!r}") from e


def _kv(tokens: list[str], line_no: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise GripperParseError(f"line {line_no}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def parse_gripper(text: str) -> KinematicTree:
    """Parse a gripper description; raises named errors on malformed input."""
    name = None
    spec = None
    joints: list[Joint] = []
    fingertips = []
    spheres = []
    names: dict[str, int] = {}
    tip_lines = []
    sphere_lines = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("name="):
            name = line[5:].strip()
            continue
        if line.startswith("irreps="):
            spec = parse_irreps(line[7:].strip())
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "joint":
            if len(tokens) < 2:
                raise GripperParseError(f"line {line_no}: joint needs a name")
            jname = tokens[1]
            if jname in names:
                raise GripperParseError(f"line {line_no}: duplicate joint {jname!r}")
            kv = _kv(tokens[2:], line_no)
            parent_name = kv.get("parent", "base")
            if parent_name == "base":
                parent = BASE
            elif parent_name in names:
                parent = names[parent_name]
            else:
                raise GripperParseError(
                    f"line {line_no}: joint {jname!r} references undeclared parent {parent_name!r}"
                )
            jtype = kv.get("type")
            if jtype not in ("revolute", "prismatic"):
                raise GripperParseError(f"line {line_no}: bad joint type {jtype!r}")
            axis = _parse_floats(kv["axis"], 3, f"line {line_no} axis")
            if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
                raise GripperParseError(f"line {line_no}: joint axis must be unit length")
            quat = _parse_floats(kv.get("offset_quat", "1,0,0,0"), 4, f"line {line_no} offset_quat")
            pos = _parse_floats(kv.get("offset_pos", "0,0,0"), 3, f"line {line_no} offset_pos")
            lims = _parse_floats(kv["limits"], 2, f"line {line_no} limits")
            if lims[0] > lims[1]:
                raise GripperParseError(f"line {line_no}: limits lo > hi")
            names[jname] = len(joints)
            joints.append(
                Joint(jname, parent, jtype, axis, Pose(quat_to_matrix(quat), pos), (lims[0], lims[1]), quat)
            )
        elif kind == "fingertip":
            tip_lines.append((line_no, _kv(tokens[1:], line_no)))
        elif kind == "sphere":
            sphere_lines.append((line_no, _kv(tokens[1:], line_no)))
        else:
            raise GripperParseError(f"line {line_no}: unknown record {kind!r}")
    for line_no, kv in tip_lines:
        jname = kv.get("joint")
        if jname not in names:
            raise GripperParseError(f"line {line_no}: fingertip references unknown joint {jname!r}")
        fingertips.append((names[jname], _parse_floats(kv["offset"], 3, f"line {line_no} offset")))
    for line_no, kv in sphere_lines:
        jname = kv.get("joint", "base")
        if jname == "base":
            jidx = BASE
        elif jname in names:
            jidx = names[jname]
        else:
            raise GripperParseError(f"line {line_no}: sphere references unknown joint {jname!r}")
        center = _parse_floats(kv["center"], 3, f"line {line_no} center")
        radius = float(kv["radius"])
        if radius <= 0:
            raise GripperParseError(f"line {line_no}: sphere radius must be positive")
        spheres.append((jidx, center, radius))
    if name is None:
        raise GripperParseError("missing name= line")
    if spec is None:
        spec = parse_irreps("8x0+4x1+2x2")
    return KinematicTree(name, joints, fingertips, spheres, spec)


def print_gripper(tree: KinematicTree) -> str:
    """Serialize a tree; parse(print(tree)) reproduces it exactly."""
    lines = [f"name={tree.name}", f"irreps={tree.embed_spec}"]
    fmt = lambda v: ",".join(repr(float(x)) for x in np.atleast_1d(v))
    for j in tree.joints:
        parent = "base" if j.parent == BASE else tree.joints[j.parent].name
        quat = j.offset_quat if j.offset_quat is not None else matrix_to_quat(j.offset.R)
        lines.append(
            f"joint {j.name} parent={parent} type={j.jtype} axis={fmt(j.axis)} "
            f"offset_quat={fmt(quat)} offset_pos={fmt(j.offset.p)} limits={fmt(j.limits)}"
        )
    for jidx, off in tree.fingertips:
        lines.append(f"fingertip joint={tree.joints[jidx].name} offset={fmt(off)}")
    for jidx, center, radius in tree.spheres:
        jname = "base" if jidx == BASE else tree.joints[jidx].name
        lines.append(f"sphere joint={jname} center={fmt(center)} radius={repr(float(radius))}")
    return "\n".join(lines) + "\n"


def load_gripper(name_or_path: str) -> KinematicTree:
    """Load a shipped gripper by name or an arbitrary description file by path."""
    import os

    if os.path.sep in name_or_path or name_or_path.endswith(".txt"):
        with open(name_or_path) as f:
            return parse_gripper(f.read())
    ref = resources.files("aequigrasp").joinpath(f"grippers/{name_or_path}.txt")
    return parse_gripper(ref.read_text())


def shipped_grippers() -> list[str]:
    return ["jaw2", "vx2", "tri6", "tri12", "hand16", "dummy"]


# ---------------------------------------------------------------------------
# forward kinematics


def _motion(joint: Joint, q: float) -> Pose:
    if joint.jtype == "revolute":
        return Pose(so3_exp(q * joint.axis), np.zeros(3))
    return Pose(np.eye(3), q * joint.axis)


def forward_kinematics(tree: KinematicTree, q: np.ndarray) -> list[Pose]:
    """Per-joint poses in the gripper base frame; T_i = T_parent * offset * motion."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if q.shape != (tree.dof,):
        raise ValueError(f"expected {tree.dof} joint values, got shape {q.shape}")
    poses: list[Pose] = []
    for i, joint in enumerate(tree.joints):
        parent = Pose.identity() if joint.parent == BASE else poses[joint.parent]
        poses.append(compose(compose(parent, joint.offset), _motion(joint, q[i])))
    return poses


def fk_batch(tree: KinematicTree, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized FK over a batch of configurations: q (B, D) -> (B, D, 3, 3), (B, D, 3)."""
    q = np.asarray(q, dtype=float)
    B = q.shape[0]
    R = np.zeros((B, tree.dof, 3, 3))
    p = np.zeros((B, tree.dof, 3))
    for i, joint in enumerate(tree.joints):
        if joint.parent == BASE:
            pr = np.broadcast_to(np.eye(3), (B, 3, 3))
            pp = np.zeros((B, 3))
        else:
            pr, pp = R[:, joint.parent], p[:, joint.parent]
        pre_r = pr @ joint.offset.R
        pre_p = (pr @ joint.offset.p) + pp
        if joint.jtype == "revolute":
            motion = so3_exp(q[:, i, None] * joint.axis)
            R[:, i] = pre_r @ motion
            p[:, i] = pre_p
        else:
            R[:, i] = pre_r
            p[:, i] = pre_p + pre_r @ (joint.axis) * q[:, i, None]
    return R, p


def fingertip_points(tree: KinematicTree, q: np.ndarray) -> np.ndarray:
    """Fingertip marker positions in the base frame, shape (n_tips, 3)."""
    poses = forward_kinematics(tree, q)
    return np.array([poses[j].R @ off + poses[j].p for j, off in tree.fingertips]).reshape(-1, 3)


def fk_jacobian(tree: KinematicTree, q: np.ndarray, markers=None) -> np.ndarray:
    """Analytic Jacobian of marker positions wrt joint values, (3*n_markers, D).

    Revolute columns are axis x (point - joint origin); prismatic columns are
    the world-frame axis.
    """
    markers = tree.fingertips if markers is None else markers
    poses = forward_kinematics(tree, q)
    # pre-motion frames carry the joint axes and origins
    origins = []
    axes = []
    for i, joint in enumerate(tree.joints):
        parent = Pose.identity() if joint.parent == BASE else poses[joint.parent]
        pre = compose(parent, joint.offset)
        origins.append(pre.p)
        axes.append(pre.R @ joint.axis)
    ancestors = []
    for i, joint in enumerate(tree.joints):
        chain = set()
        k = i
        while k != BASE:
            chain.add(k)
            k = tree.joints[k].parent
        ancestors.append(chain)
    J = np.zeros((3 * len(markers), tree.dof))
    for m, (jidx, off) in enumerate(markers):
        point = poses[jidx].R @ off + poses[jidx].p
        for i in range(tree.dof):
            if i not in ancestors[jidx]:
                continue
            if tree.joints[i].jtype == "revolute":
                J[3 * m : 3 * m + 3, i] = np.cross(axes[i], point - origins[i])
            else:
                J[3 * m : 3 * m + 3, i] = axes[i]
    return J


def _tip_spread(tree: KinematicTree, q: np.ndarray) -> float:
    tips = fingertip_points(tree, q)
    if len(tips) >= 2:
        d = tips[:, None, :] - tips[None, :, :]
        return float(np.sqrt((d**2).sum(-1) + 1e-18).mean())
    return float(np.linalg.norm(tips[0][:2]))


def closing_signs(tree: KinematicTree) -> np.ndarray:
    """Per-joint closing direction in {-1, 0, +1}.

    Derived geometrically at the neutral configuration: the direction that
    decreases the mean pairwise fingertip distance closes the gripper.
    Joints with negligible effect (abduction-style) get 0 and are held fixed
    during closing sweeps.
    """
    if tree.dof == 0 or not tree.fingertips:
        return np.zeros(tree.dof)
    neutral = tree.clamp(np.zeros(tree.dof))
    # nudge off limit boundaries so the spread metric is smooth at the probe
    q0 = neutral + 0.1 * (tree.mid_config() - neutral)
    h = 1e-5
    grads = np.empty(tree.dof)
    for i in range(tree.dof):
        qp, qm = q0.copy(), q0.copy()
        qp[i] += h
        qm[i] -= h
        grads[i] = (_tip_spread(tree, qp) - _tip_spread(tree, qm)) / (2 * h)
    scale = np.abs(grads).max()
    signs = -np.sign(grads)
    signs[np.abs(grads) < 0.05 * scale] = 0.0
    return signs


def closed_config(tree: KinematicTree) -> np.ndarray:
    """Limit endpoint per joint reached by closing; 0-direction joints keep neutral."""
    signs = closing_signs(tree)
    q0 = tree.clamp(np.zeros(tree.dof))
    out = q0.copy()
    for i, joint in enumerate(tree.joints):
        if signs[i] > 0:
            out[i] = joint.limits[1]
        elif signs[i] < 0:
            out[i] = joint.limits[0]
    return out


def posed_spheres(tree: KinematicTree, base: Pose, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World-frame collision spheres: (centers (S,3), radii (S,), joint ids (S,))."""
    poses = forward_kinematics(tree, q)
    centers = []
    radii = []
    owners = []
    for jidx, center, radius in tree.spheres:
        local = Pose.identity() if jidx == BASE else poses[jidx]
        world = base.R @ (local.R @ center + local.p) + base.p
        centers.append(world)
        radii.append(radius)
        owners.append(jidx)
    if not centers:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
    return np.array(centers), np.array(radii), np.array(owners)
