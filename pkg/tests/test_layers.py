import time

import numpy as np
import pytest

from aequigrasp import autodiff as ad
from aequigrasp import layers as ly
from aequigrasp.irreps import IrrepsArray, parse_irreps, spherical_harmonics

SPEC = parse_irreps("3x0+2x1+1x2")
OUT = parse_irreps("2x0+2x1+1x2")


def unit(rng, n=None):
    u = rng.normal(size=(n, 3) if n else 3)
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# fctp


def test_fctp_scalar_multiplication():
    s = parse_irreps("1x0")
    out = ly.fctp(IrrepsArray(s, np.array([2.0])), IrrepsArray(s, np.array([3.0])),
                  np.array([5.0]), s)
    assert np.allclose(out.data, [30.0])


def test_fctp_zero_weights(rng):
    n = ly.num_fctp_weights(SPEC, SPEC, OUT)
    x = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    y = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    assert np.all(ly.fctp(x, y, np.zeros(n), OUT).data == 0.0)


def test_fctp_equivariance(rng, rand_rot):
    n = ly.num_fctp_weights(SPEC, SPEC, OUT)
    w = rng.normal(size=n)
    worst = 0.0
    for _ in range(100):
        R = rand_rot()
        x = IrrepsArray(SPEC, rng.normal(size=(2, SPEC.dim)))
        y = IrrepsArray(SPEC, rng.normal(size=(2, SPEC.dim)))
        a = ly.fctp(ly.rotate_irreps(x, R), ly.rotate_irreps(y, R), w, OUT).data
        b = ly.rotate_irreps(ly.fctp(x, y, w, OUT), R).data
        worst = max(worst, np.abs(a - b).max())
    assert worst <= 1e-9


def test_fctp_bilinear(rng):
    n = ly.num_fctp_weights(SPEC, SPEC, OUT)
    w = rng.normal(size=n)
    x1 = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    x2 = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    y = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    a, b = 0.7, -1.3
    lhs = ly.fctp(IrrepsArray(SPEC, a * x1.data + b * x2.data), y, w, OUT).data
    rhs = a * ly.fctp(x1, y, w, OUT).data + b * ly.fctp(x2, y, w, OUT).data
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_fctp_weight_count_mismatch(rng):
    x = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    with pytest.raises(ValueError, match="weights"):
        ly.fctp(x, x, np.zeros(3), OUT)


def test_tp_paths_obey_selection_rule():
    for p in ly.enumerate_tp_paths(SPEC, SPEC, OUT):
        assert abs(p.ell1 - p.ell2) <= p.ell3 <= p.ell1 + p.ell2
    # weight indices dense and contiguous
    paths = ly.enumerate_tp_paths(SPEC, SPEC, OUT)
    ends = [p.weight_start + p.weight_count for p in paths]
    starts = [p.weight_start for p in paths]
    assert starts[0] == 0
    assert all(e == s for e, s in zip(ends[:-1], starts[1:]))


# ---------------------------------------------------------------------------
# so2_tp


def test_so2_scalars_direction_independent(rng):
    s0 = parse_irreps("3x0")
    w = rng.normal(size=ly.num_so2_weights(s0, s0))
    x = IrrepsArray(s0, rng.normal(size=(4, 3)))
    a = ly.so2_tp(x, np.array([0.0, 0.0, 1.0]), w).data
    b = ly.so2_tp(x, unit(rng), w).data
    assert np.abs(a - b).max() <= 1e-12


def test_so2_equivariance(rng, rand_rot):
    w = rng.normal(size=ly.num_so2_weights(SPEC, OUT))
    worst = 0.0
    for _ in range(50):
        R = rand_rot()
        d = unit(rng, 4)
        x = IrrepsArray(SPEC, rng.normal(size=(4, SPEC.dim)))
        a = ly.so2_tp(ly.rotate_irreps(x, R), d @ R.T, w, OUT).data
        b = ly.rotate_irreps(ly.so2_tp(x, d, w, OUT), R).data
        worst = max(worst, np.abs(a - b).max())
    assert worst <= 1e-9


def test_so2_dense_equivalence(rng):
    """Any dense FCTP against the direction's harmonics has an exactly
    equivalent SO(2)-reduced weight setting (constructed numerically)."""
    spec = parse_irreps("2x0+1x1+1x2")
    sh_spec = parse_irreps("1x0+1x1+1x2")
    d = unit(rng)
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
    for q in range(nr):
        wq = np.zeros(nr)
        wq[q] = 1.0
        M = np.zeros((dim, dim))
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = 1.0
            M[:, i] = ly.so2_tp(IrrepsArray(spec, e), d, wq).data
        basis[:, q] = M.ravel()
    sol, *_ = np.linalg.lstsq(basis, dense.ravel(), rcond=None)
    assert np.abs(basis @ sol - dense.ravel()).max() <= 1e-8


def test_so2_rejects_zero_direction(rng):
    w = rng.normal(size=ly.num_so2_weights(SPEC, SPEC))
    x = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    with pytest.raises(ValueError, match="degenerate"):
        ly.so2_tp(x, np.zeros(3), w)


def test_so2_cost_scales_gently_with_lmax(rng):
    """Runtime at the degree-2 ceiling stays within 3x the degree-1 ceiling."""
    times = {}
    for lmax, text in ((1, "16x0+8x1"), (2, "16x0+8x1+4x2")):
        spec = parse_irreps(text)
        x = IrrepsArray(spec, rng.normal(size=(4096, spec.dim)))
        d = unit(rng, 4096)
        w = rng.normal(size=ly.num_so2_weights(spec, spec))
        ly.so2_tp(x, d, w, spec)  # warm up
        best = np.inf
        for _ in range(5):
            t0 = time.perf_counter()
            ly.so2_tp(x, d, w, spec)
            best = min(best, time.perf_counter() - t0)
        times[lmax] = best
    assert times[2] <= 3.0 * times[1], times


# ---------------------------------------------------------------------------
# dir_mod


def test_dir_mod_zero_mlp_gives_zero(rng):
    pt = ad.ParameterTape(seed=0)
    view = ad.ParamView(pt)
    d = unit(rng, 4)
    s = rng.normal(size=(4, 3))
    out = ly.dir_mod(d, s, view, "dm", OUT)
    for name in list(pt.params):
        pt.params[name][:] = 0.0
    out = ly.dir_mod(d, s, view, "dm", OUT)
    assert np.all(out.data == 0.0)


def test_dir_mod_scalar_part_direction_independent(rng):
    pt = ad.ParameterTape(seed=1)
    view = ad.ParamView(pt)
    s = rng.normal(size=(4, 3))
    out1 = ly.dir_mod(unit(rng, 4), s, view, "dm", OUT)
    out2 = ly.dir_mod(unit(rng, 4), s, view, "dm", OUT)
    sl = OUT.entry_slice(0)  # the degree-0 entry
    assert np.abs(out1.data[..., sl] - out2.data[..., sl]).max() <= 1e-12


def test_dir_mod_equivariance(rng, rand_rot):
    pt = ad.ParameterTape(seed=2)
    view = ad.ParamView(pt)
    s = rng.normal(size=(4, 3))
    worst = 0.0
    for _ in range(50):
        R = rand_rot()
        d = unit(rng, 4)
        a = ly.dir_mod(d @ R.T, s, view, "dm", OUT).data
        b = ly.rotate_irreps(ly.dir_mod(d, s, view, "dm", OUT), R).data
        worst = max(worst, np.abs(a - b).max())
    assert worst <= 1e-9


# ---------------------------------------------------------------------------
# equiv_linear


def test_equiv_linear_identity(rng):
    n = ly.num_equiv_linear_weights(SPEC, SPEC)
    w = np.zeros(n)
    # identity blocks per degree
    off = 0
    for mult, ell in SPEC.entries:
        mi = SPEC.mult_of_degree(ell)
        block = np.eye(mi).ravel()
        w[off : off + mi * mi] = block
        off += mi * mi
    x = IrrepsArray(SPEC, rng.normal(size=(3, SPEC.dim)))
    out = ly.equiv_linear(x, w, SPEC)
    assert np.abs(out.data - x.data).max() <= 1e-12


def test_equiv_linear_zero_block(rng):
    w = np.zeros(ly.num_equiv_linear_weights(SPEC, OUT))
    x = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    assert np.all(ly.equiv_linear(x, w, OUT).data == 0.0)


def test_equiv_linear_equivariance(rng, rand_rot):
    w = rng.normal(size=ly.num_equiv_linear_weights(SPEC, OUT))
    worst = 0.0
    for _ in range(50):
        R = rand_rot()
        x = IrrepsArray(SPEC, rng.normal(size=(2, SPEC.dim)))
        a = ly.equiv_linear(ly.rotate_irreps(x, R), w, OUT).data
        b = ly.rotate_irreps(ly.equiv_linear(x, w, OUT), R).data
        worst = max(worst, np.abs(a - b).max())
    assert worst <= 1e-10


# ---------------------------------------------------------------------------
# FiLM


def test_film_zero_params_identity(rng):
    pt = ad.ParameterTape(seed=3)
    view = ad.ParamView(pt)
    x = IrrepsArray(SPEC, rng.normal(size=(4, SPEC.dim)))
    t_enc = ly.encode_scalars(np.array([0.7]), ly.ScalarEncoding("time", 8))
    out = ly.equiv_film(x, t_enc, view, "film")
    assert np.abs(out.data - x.data).max() == 0.0


def test_film_scales_vector_channels_uniformly(rng):
    pt = ad.ParameterTape(seed=4)
    view = ad.ParamView(pt)
    x = IrrepsArray(SPEC, rng.normal(size=SPEC.dim))
    t_enc = ly.encode_scalars(np.array([0.3]), ly.ScalarEncoding("time", 8))
    _ = ly.equiv_film(x, t_enc, view, "film")
    # force a known scale on every channel
    pt.params["film/w1"][:] = 0.0
    pt.params["film/b1"][:] = 0.0
    pt.params["film/b1"][: SPEC.num_channels] = 0.5  # scale = 1.5 everywhere
    out = ly.equiv_film(x, t_enc, view, "film")
    sl = SPEC.entry_slice(1)  # degree-1 entry scales as a pure multiple
    assert np.allclose(out.data[sl], 1.5 * x.data[sl], atol=1e-12)
    v0 = x.data[sl][:3]
    v1 = out.data[sl][:3]
    cos = v0 @ v1 / (np.linalg.norm(v0) * np.linalg.norm(v1))
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_film_equivariance(rng, rand_rot):
    pt = ad.ParameterTape(seed=5)
    view = ad.ParamView(pt)
    t_enc = ly.encode_scalars(np.array([0.9]), ly.ScalarEncoding("time", 8))
    _ = ly.equiv_film(IrrepsArray(SPEC, np.zeros(SPEC.dim)), t_enc, view, "film")
    for name in pt.params:
        pt.params[name][:] = np.random.default_rng(0).normal(size=pt.params[name].shape)
    worst = 0.0
    for _ in range(50):
        R = rand_rot()
        x = IrrepsArray(SPEC, rng.normal(size=(2, SPEC.dim)))
        a = ly.equiv_film(ly.rotate_irreps(x, R), t_enc, view, "film").data
        b = ly.rotate_irreps(ly.equiv_film(x, t_enc, view, "film"), R).data
        worst = max(worst, np.abs(a - b).max())
    assert worst <= 1e-9


# ---------------------------------------------------------------------------
# attention


def test_attention_single_edge(rng):
    feats = rng.normal(size=(1, 1, 7))
    logits = rng.normal(size=(1, 1))
    out = ly.attention_aggregate(feats, logits)
    assert np.abs(out - feats[:, 0]).max() <= 1e-15


def test_attention_equal_logits_mean(rng):
    feats = rng.normal(size=(3, 2, 5))
    logits = np.full((3, 2), 1.7)
    out = ly.attention_aggregate(feats, logits)
    assert np.abs(out - feats.mean(axis=1)).max() <= 1e-14


def test_attention_logit_shift_invariance(rng):
    feats = rng.normal(size=(2, 6, 4))
    logits = rng.normal(size=(2, 6))
    a = ly.attention_aggregate(feats, logits)
    b = ly.attention_aggregate(feats, logits + 123.456)
    assert np.abs(a - b).max() <= 1e-12


def test_attention_requires_edges():
    with pytest.raises(ValueError):
        ly.attention_aggregate(np.zeros((2, 0, 3)), np.zeros((2, 0)))


# ---------------------------------------------------------------------------
# scalar encodings


def test_rbf_at_zero_starts_high_and_decays():
    enc = ly.ScalarEncoding("rbf", 8, r_cut=0.2)
    out = ly.encode_scalars(np.array([0.0]), enc)
    assert out[0] == pytest.approx(1.0)
    assert np.all(np.diff(out) < 0)
    assert np.all((out >= 0) & (out <= 1))


def test_time_encoding_at_zero_alternates():
    enc = ly.ScalarEncoding("time", 8)
    out = ly.encode_scalars(np.array([0.0]), enc)
    assert np.allclose(out, [0.0, 1.0] * 4)
    assert np.all(np.abs(ly.encode_scalars(np.array([0.63]), enc)) <= 1.0)


def test_rbf_clamps_beyond_cutoff():
    enc = ly.ScalarEncoding("rbf", 6, r_cut=0.1)
    at_cut = ly.encode_scalars(np.array([0.1]), enc)
    beyond = ly.encode_scalars(np.array([5.0]), enc)
    assert np.array_equal(at_cut, beyond)


def test_encoding_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ly.ScalarEncoding("fourier", 8)


# ---------------------------------------------------------------------------
# gate


def test_gate_equivariance(rng, rand_rot):
    pt = ad.ParameterTape(seed=6)
    view = ad.ParamView(pt)
    worst = 0.0
    for _ in range(50):
        R = rand_rot()
        x = IrrepsArray(SPEC, rng.normal(size=(2, SPEC.dim)))
        a = ly.equiv_gate(ly.rotate_irreps(x, R), view, "g").data
        b = ly.rotate_irreps(ly.equiv_gate(x, view, "g"), R).data
        worst = max(worst, np.abs(a - b).max())
    assert worst <= 1e-9
