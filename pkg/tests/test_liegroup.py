import numpy as np
import pytest
from scipy import stats

from aequigrasp import liegroup as lg


def test_exp_zero_is_identity():
    assert np.allclose(lg.so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_z():
    R = lg.so3_exp(np.array([0.0, 0.0, np.pi / 2]))
    expect = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.abs(R - expect).max() < 1e-12


def test_exp_inverse(rng):
    for _ in range(50):
        w = rng.normal(size=3)
        assert np.abs(lg.so3_exp(w) @ lg.so3_exp(-w) - np.eye(3)).max() <= 1e-12


def test_exp_small_angle_branch():
    w = np.array([1e-10, -2e-10, 5e-11])
    R = lg.so3_exp(w)
    assert np.abs(R - (np.eye(3) + lg.skew(w))).max() < 1e-18


def test_log_identity():
    assert np.allclose(lg.so3_log(np.eye(3)), np.zeros(3))


def test_log_exp_round_trip(rng):
    worst = 0.0
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3.0) / max(np.linalg.norm(w), 1e-12)
        back = lg.so3_log(lg.so3_exp(w))
        worst = max(worst, np.abs(back - w).max())
    assert worst <= 1e-9


def test_log_half_turn_about_x():
    w = lg.so3_log(np.diag([1.0, -1.0, -1.0]))
    assert abs(np.linalg.norm(w) - np.pi) < 1e-12
    axis = w / np.linalg.norm(w)
    assert np.allclose(np.abs(axis), [1.0, 0.0, 0.0], atol=1e-9)


def test_log_near_pi_stable(rng):
    for _ in range(100):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        w = axis * (np.pi - 1e-5)
        back = lg.so3_log(lg.so3_exp(w))
        assert np.abs(back - w).max() < 1e-6


def test_haar_trace_mean():
    rng = np.random.default_rng(7)
    traces = [np.trace(lg.sample_rotation_uniform(rng)) for _ in range(100_000)]
    # E[1 + 2 cos(theta)] = 0 under the Haar angle density
    assert abs(np.mean(traces)) < 0.02


def test_haar_determinant(rng):
    for _ in range(100):
        assert np.linalg.det(lg.sample_rotation_uniform(rng)) == pytest.approx(1.0, abs=1e-10)


def test_haar_angle_density_ks():
    rng = np.random.default_rng(3)
    angles = []
    for _ in range(4000):
        R = lg.sample_rotation_uniform(rng)
        c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
        angles.append(np.arccos(c))
    cdf = lambda t: (np.asarray(t) - np.sin(t)) / np.pi
    result = stats.kstest(angles, cdf)
    assert result.pvalue > 0.01


def test_compose_identity(rng):
    a = lg.Pose(lg.sample_rotation_uniform(rng), rng.normal(size=3))
    e = lg.Pose.identity()
    for other in (lg.compose(a, e), lg.compose(e, a)):
        assert np.allclose(other.R, a.R) and np.allclose(other.p, a.p)


def test_apply_origin_gives_translation(rng):
    a = lg.Pose(lg.sample_rotation_uniform(rng), rng.normal(size=3))
    assert np.allclose(lg.apply(a, np.zeros(3)), a.p)


def test_compose_inverse(rng):
    for _ in range(50):
        a = lg.Pose(lg.sample_rotation_uniform(rng), rng.normal(size=3))
        b = lg.Pose(lg.sample_rotation_uniform(rng), rng.normal(size=3))
        ab_inv = lg.inverse(lg.compose(a, b))
        expect = lg.compose(lg.inverse(b), lg.inverse(a))
        assert np.abs(ab_inv.R - expect.R).max() <= 1e-12
        assert np.abs(ab_inv.p - expect.p).max() <= 1e-12
        ident = lg.compose(a, lg.inverse(a))
        assert np.abs(ident.R - np.eye(3)).max() <= 1e-12
        assert np.abs(ident.p).max() <= 1e-12


def test_chained_composition_orthogonality(rng):
    pose = lg.Pose.identity()
    for _ in range(1000):
        step = lg.Pose(lg.sample_rotation_uniform(rng), rng.normal(scale=0.01, size=3))
        pose = lg.compose(pose, step)
    assert np.abs(pose.R.T @ pose.R - np.eye(3)).max() <= 1e-10


def test_quat_matrix_round_trip(rng):
    for _ in range(100):
        R = lg.sample_rotation_uniform(rng)
        q = lg.matrix_to_quat(R)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12
        assert q[0] >= 0.0
        assert np.abs(lg.quat_to_matrix(q) - R).max() < 1e-12


def test_orthonormalize(rng):
    R = lg.sample_rotation_uniform(rng) + rng.normal(scale=1e-4, size=(3, 3))
    Rn = lg.orthonormalize(R)
    assert np.abs(Rn.T @ Rn - np.eye(3)).max() < 1e-12
    assert np.linalg.det(Rn) > 0
