"""Equivariance and correctness audit: every architectural identity the
package relies on, executed as named checks with measured max errors.

Equivariance here is architectural, not learned, so freshly initialized
random parameters must pass every check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import datagen as dg
from . import layers as ly
from . import model as md
from .irreps import (
    IrrepsArray,
    cg_tensor,
    parse_irreps,
    spherical_harmonics,
    wigner_d,
)
from .kinematics import load_gripper, shipped_grippers
from .liegroup import sample_rotation_uniform
from .pointcloud import PointCloud


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol


def _rand_unit(rng):
    u = rng.normal(size=3)
    return u / np.linalg.norm(u)


def audit_model_config() -> md.ModelConfig:
    """Small widths keep the audit within its runtime budget."""
    return md.ModelConfig(
        scene_spec=parse_irreps("8x0+4x1+2x2"),
        query_spec=parse_irreps("8x0+4x1+2x2"),
        level_sizes=(96, 24),
        knn_k=8,
        pool_k=6,
        query_k=6,
        mp_layers=1,
        n_blocks=1,
        decode_layers=1,
        rbf_count=6,
        time_count=8,
        mlp_hidden=16,
    )


def check_wigner(rng) -> list[CheckResult]:
    homo = ortho = 0.0
    for _ in range(100):
        R1, R2 = sample_rotation_uniform(rng), sample_rotation_uniform(rng)
        for ell in (0, 1, 2):
            D1, D2 = wigner_d(ell, R1), wigner_d(ell, R2)
            homo = max(homo, np.abs(wigner_d(ell, R1 @ R2) - D1 @ D2).max())
            ortho = max(ortho, np.abs(D1.T @ D1 - np.eye(2 * ell + 1)).max())
    return [
        CheckResult("wigner_homomorphism", homo, 1e-10),
        CheckResult("wigner_orthogonality", ortho, 1e-10),
    ]


def check_sh_equivariance(rng) -> CheckResult:
    worst = 0.0
    for _ in range(100):
        R = sample_rotation_uniform(rng)
        u = _rand_unit(rng)
        for ell in (0, 1, 2):
            lhs = spherical_harmonics(ell, R @ u)
            rhs = wigner_d(ell, R) @ spherical_harmonics(ell, u)
            worst = max(worst, np.abs(lhs - rhs).max())
    return CheckResult("sh_equivariance", worst, 1e-9)


def check_cg_equivariance(rng) -> CheckResult:
    worst = 0.0
    for l1 in range(3):
        for l2 in range(3):
            for l3 in range(3):
                cg = cg_tensor(l1, l2, l3)
                for _ in range(12):
                    R = sample_rotation_uniform(rng)
                    x = rng.normal(size=2 * l1 + 1)
                    y = rng.normal(size=2 * l2 + 1)
                    lhs = wigner_d(l3, R) @ cg.contract(x, y)
                    rhs = cg.contract(wigner_d(l1, R) @ x, wigner_d(l2, R) @ y)
                    worst = max(worst, np.abs(lhs - rhs).max())
    return CheckResult("cg_equivariance", worst, 1e-9)


def check_so2_dense_equivalence(rng) -> CheckResult:
    """A dense tensor product against the direction's harmonics must be
    expressible with SO(2)-reduced weights (the sparsity theorem)."""
    spec = parse_irreps("2x0+1x1+1x2")
    sh_spec = parse_irreps("1x0+1x1+1x2")
    worst = 0.0
    for _ in range(3):
        d = _rand_unit(rng)
        ys = np.concatenate([spherical_harmonics(l, d) for l in (0, 1, 2)])
        yarr = IrrepsArray(sh_spec, ys)
        wd = rng.normal(size=ly.num_fctp_weights(spec, sh_spec, spec))
        dim = spec.dim
        dense = np.zeros((dim, dim))
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = 1.0
            dense[:, i] = ly.fctp(IrrepsArray(spec, e), yarr, wd, spec).data
        nr = ly.num_so2_weights(spec, spec)
        basis = np.zeros((dim * dim, nr))
        for qi in range(nr):
            wq = np.zeros(nr)
            wq[qi] = 1.0
            M = np.zeros((dim, dim))
            for i in range(dim):
                e = np.zeros(dim)
                e[i] = 1.0
                M[:, i] = ly.so2_tp(IrrepsArray(spec, e), d, wq).data
            basis[:, qi] = M.ravel()
        sol, *_ = np.linalg.lstsq(basis, dense.ravel(), rcond=None)
        worst = max(worst, np.abs(basis @ sol - dense.ravel()).max())
    return CheckResult("so2_dense_equivalence", worst, 1e-8)


def check_layer_equivariance(rng) -> list[CheckResult]:
    spec = parse_irreps("4x0+3x1+2x2")
    out_spec = parse_irreps("3x0+2x1+1x2")
    pt = ad.ParameterTape(seed=7)
    view = ad.ParamView(pt)
    w_f = rng.normal(size=ly.num_fctp_weights(spec, spec, out_spec))
    w_s = rng.normal(size=ly.num_so2_weights(spec, out_spec))
    w_l = rng.normal(size=ly.num_equiv_linear_weights(spec, out_spec))
    t_enc = ly.encode_scalars(np.array([0.4]), ly.ScalarEncoding("time", 8))
    errs = {"fctp": 0.0, "so2_tp": 0.0, "dir_mod": 0.0, "equiv_linear": 0.0, "equiv_film": 0.0, "equiv_gate": 0.0}
    for _ in range(50):
        R = sample_rotation_uniform(rng)
        x = IrrepsArray(spec, rng.normal(size=(4, spec.dim)))
        y = IrrepsArray(spec, rng.normal(size=(4, spec.dim)))
        d = np.stack([_rand_unit(rng) for _ in range(4)])
        s = rng.normal(size=(4, 5))
        xr, yr, dr = ly.rotate_irreps(x, R), ly.rotate_irreps(y, R), d @ R.T

        def err(a, b):
            return np.abs(a.data - ly.rotate_irreps(b, R).data).max()

        errs["fctp"] = max(errs["fctp"], err(ly.fctp(xr, yr, w_f, out_spec), ly.fctp(x, y, w_f, out_spec)))
        errs["so2_tp"] = max(errs["so2_tp"], err(ly.so2_tp(xr, dr, w_s, out_spec), ly.so2_tp(x, d, w_s, out_spec)))
        errs["dir_mod"] = max(errs["dir_mod"], err(ly.dir_mod(dr, s, view, "a/dm", out_spec), ly.dir_mod(d, s, view, "a/dm", out_spec)))
        errs["equiv_linear"] = max(errs["equiv_linear"], err(ly.equiv_linear(xr, w_l, out_spec), ly.equiv_linear(x, w_l, out_spec)))
        errs["equiv_film"] = max(errs["equiv_film"], err(ly.equiv_film(xr, t_enc, view, "a/film"), ly.equiv_film(x, t_enc, view, "a/film")))
        errs["equiv_gate"] = max(errs["equiv_gate"], err(ly.equiv_gate(xr, view, "a/gate"), ly.equiv_gate(x, view, "a/gate")))
    return [CheckResult(f"layer_equivariance/{k}", v, 1e-9) for k, v in errs.items()]


def check_scene_encoder(rng) -> list[CheckResult]:
    cfg = audit_model_config()
    pt = ad.ParameterTape(seed=11)
    view = ad.ParamView(pt)
    pc = PointCloud(rng.normal(scale=0.1, size=(cfg.level_sizes[0], 3)))
    pyr = md.scene_encode(pc, view, cfg, seed=5)
    rot_err = 0.0
    for _ in range(5):
        R = sample_rotation_uniform(rng)
        pyr_r = md.scene_encode(PointCloud(pc.positions @ R.T), view, cfg, seed=5)
        for lvl in range(pyr.levels):
            expect = ly.rotate_irreps(pyr.features[lvl], R).data
            rot_err = max(rot_err, float(np.abs(pyr_r.features[lvl].data - expect).max()))
    shift = rng.normal(size=3)
    pyr_t = md.scene_encode(PointCloud(pc.positions + shift), view, cfg, seed=5)
    tr_err = max(
        float(np.abs(pyr_t.features[lvl].data - pyr.features[lvl].data).max())
        for lvl in range(pyr.levels)
    )
    return [
        CheckResult("scene_encoder_rotation", rot_err, 1e-9),
        CheckResult("scene_encoder_translation", tr_err, 1e-9),
    ]


def check_model_equivariance(rng, trials: int = 20) -> list[CheckResult]:
    cfg = audit_model_config()
    pt = ad.ParameterTape(seed=13)
    view = ad.ParamView(pt)
    pc = PointCloud(rng.normal(scale=0.12, size=(cfg.level_sizes[0], 3)))
    results = []
    for gname in shipped_grippers():
        tree = load_gripper(gname)
        worst = 0.0
        for _ in range(trials):
            R_g = sample_rotation_uniform(rng)
            t_g = rng.normal(scale=0.1, size=3)
            pose_R = sample_rotation_uniform(rng)[None]
            pose_p = rng.normal(scale=0.1, size=(1, 3))
            q = (tree.mid_config() + 0.1 * rng.normal(size=tree.dof))[None] if tree.dof else np.zeros((1, 0))
            t = rng.uniform(size=1)
            pyr = md.scene_encode(pc, view, cfg, seed=5)
            om, v, qd = md.model_forward(view, cfg, pyr, tree, pose_R, pose_p, q, t)
            pyr2 = md.scene_encode(PointCloud(pc.positions @ R_g.T + t_g), view, cfg, seed=5)
            om2, v2, qd2 = md.model_forward(view, cfg, pyr2, tree, R_g @ pose_R[0][None],
                                            (pose_p @ R_g.T) + t_g, q, t)
            scale = max(1.0, float(np.abs(v).max()))
            worst = max(worst, float(np.abs(om2 - om).max()) / scale)
            worst = max(worst, float(np.abs(v2 - v @ R_g.T).max()) / scale)
            if tree.dof:
                worst = max(worst, float(np.abs(qd2 - qd).max()) / scale)
        results.append(CheckResult(f"model_equivariance/{gname}", worst, 1e-5))
    return results


def check_gradients(rng) -> CheckResult:
    spec = parse_irreps("3x0+2x1+1x2")
    out_spec = parse_irreps("2x0+2x1+1x2")
    pt = ad.ParameterTape(seed=3)
    y_fix = rng.normal(size=(4, spec.dim))
    dirs = rng.normal(size=(4, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    def loss_fn(view):
        x = IrrepsArray(spec, view.get("x", (4, spec.dim)))
        w = view.get("w", (ly.num_fctp_weights(spec, spec, out_spec),))
        ws = view.get("ws", (ly.num_so2_weights(spec, out_spec),))
        out = ly.fctp(x, IrrepsArray(spec, y_fix), w, out_spec)
        out2 = ly.so2_tp(x, dirs, ws, out_spec)
        g = ly.equiv_gate(out, view, "g")
        total = ad.add(ad.sum_(ad.mul(g.data, g.data)), ad.sum_(ad.mul(out2.data, out2.data)))
        return total

    loss, grads = ad.value_and_grad(loss_fn, pt)
    worst = 0.0
    for _ in range(6):
        direction = {k: rng.normal(size=p.shape) for k, p in pt.params.items()}
        norm = np.sqrt(sum((d**2).sum() for d in direction.values()))
        direction = {k: d / norm for k, d in direction.items()}
        an = sum((grads[k] * direction[k]).sum() for k in grads)
        h = 1e-6
        backup = {k: p.copy() for k, p in pt.params.items()}
        for k in pt.params:
            pt.params[k] += h * direction[k]
        lp, _ = ad.value_and_grad(loss_fn, pt)
        for k in pt.params:
            pt.params[k] = backup[k] - h * direction[k]
        lm, _ = ad.value_and_grad(loss_fn, pt)
        for k in pt.params:
            pt.params[k] = backup[k]
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - an) / max(1e-9, abs(an)))
    return CheckResult("gradient_directional", worst, 1e-6)


def check_force_closure(rng) -> CheckResult:
    # opposing pair passes, single-sided set fails
    good = dg.force_closure_proxy(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    bad = dg.force_closure_proxy(np.array([[1.0, 0, 0], [0.9, 0.1, 0]]))
    err = 0.0 if (good and not bad) else 1.0
    return CheckResult("force_closure_proxy", err, 0.5)


def run_audit(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    results += check_wigner(rng)
    results.append(check_sh_equivariance(rng))
    results.append(check_cg_equivariance(rng))
    results.append(check_so2_dense_equivalence(rng))
    results += check_layer_equivariance(rng)
    results += check_scene_encoder(rng)
    results += check_model_equivariance(rng, trials=trials)
    results.append(check_gradients(rng))
    results.append(check_force_closure(rng))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':42s} {'max_err':>12s} {'tol':>9s}  status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:42s} {r.max_err:12.3e} {r.tol:9.0e}  {status}")
    return "\n".join(lines)
