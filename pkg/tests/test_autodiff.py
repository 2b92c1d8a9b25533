import os

import numpy as np
import pytest

from aequigrasp import autodiff as ad
from aequigrasp.irreps import cg_tensor, parse_irreps, IrrepsArray, rotate_features
from aequigrasp import layers as ly


def fd_check(fn, ptape, grads, rng, n_dirs=8, h=1e-6, tol=1e-6):
    """Directional finite-difference agreement over all parameter blocks."""
    worst = 0.0
    for _ in range(n_dirs):
        direction = {k: rng.normal(size=p.shape) for k, p in ptape.params.items()}
        norm = np.sqrt(sum((d**2).sum() for d in direction.values()))
        direction = {k: d / norm for k, d in direction.items()}
        an = sum((grads[k] * direction[k]).sum() for k in grads)
        backup = {k: p.copy() for k, p in ptape.params.items()}
        for k in ptape.params:
            ptape.params[k] += h * direction[k]
        lp, _ = ad.value_and_grad(fn, ptape)
        for k in ptape.params:
            ptape.params[k] = backup[k] - h * direction[k]
        lm, _ = ad.value_and_grad(fn, ptape)
        for k in ptape.params:
            ptape.params[k] = backup[k]
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - an) / max(1e-7, abs(fd), abs(an)))
    return worst


def test_quadratic_gradient():
    pt = ad.ParameterTape(seed=0)

    def loss(view):
        x = view.get("x", (6,))
        return ad.sum_(ad.mul(x, x))

    val, grads = ad.value_and_grad(loss, pt)
    assert np.allclose(grads["x"], 2.0 * pt.params["x"])
    assert val == pytest.approx(float((pt.params["x"] ** 2).sum()))


def test_unused_block_zero_gradient():
    pt = ad.ParameterTape(seed=0)

    def loss(view):
        x = view.get("x", (3,))
        _ = view.get("unused", (4,))
        return ad.sum_(ad.mul(x, x))

    _, grads = ad.value_and_grad(loss, pt)
    assert np.all(grads["unused"] == 0.0)
    assert grads["unused"].shape == (4,)


@pytest.mark.parametrize("prim", [
    "add", "sub", "mul", "scale", "reshape", "getitem", "concat", "gather0",
    "gather_last", "sum", "mean", "tanh", "sigmoid", "exp", "softmax",
    "einsum2", "cg_weighted", "affine",
])
def test_primitive_pullbacks(prim, rng):
    pt = ad.ParameterTape(seed=3)
    a_fix = rng.normal(size=(5, 4))
    idx0 = np.array([0, 2, 2, 4])
    idx1 = np.array([3, 0, 1])
    cg = cg_tensor(1, 1, 2).values

    def loss(view):
        x = view.get("x", (5, 4))
        y = view.get("y", (5, 4))
        if prim == "add":
            out = ad.add(x, y)
        elif prim == "sub":
            out = ad.sub(x, y)
        elif prim == "mul":
            out = ad.mul(x, ad.add(y, a_fix))
        elif prim == "scale":
            out = ad.scale(x, -2.5)
        elif prim == "reshape":
            out = ad.reshape(x, (2, 10))
        elif prim == "getitem":
            out = ad.getitem(x, (slice(1, 4), slice(None)))
        elif prim == "concat":
            out = ad.concat([x, y, a_fix], axis=-1)
        elif prim == "gather0":
            out = ad.gather(x, idx0, axis=0)
        elif prim == "gather_last":
            out = ad.gather(x, idx1, axis=-1)
        elif prim == "sum":
            out = ad.sum_(x, axis=0)
        elif prim == "mean":
            out = ad.mean(x, axis=-1)
        elif prim == "tanh":
            out = ad.tanh(x)
        elif prim == "sigmoid":
            out = ad.sigmoid(x)
        elif prim == "exp":
            out = ad.exp(ad.scale(x, 0.3))
        elif prim == "softmax":
            out = ad.softmax(x, axis=-1)
        elif prim == "einsum2":
            w = view.get("w", (4, 3))
            out = ad.einsum2("ni,io->no", x, w)
        elif prim == "cg_weighted":
            xr = ad.reshape(view.get("x3", (5, 2 * 3)), (5, 2, 3))
            yr = ad.reshape(view.get("y3", (5, 2 * 3)), (5, 2, 3))
            w = ad.reshape(view.get("w3", (2 * 2 * 2,)), (2, 2, 2))
            out = ad.cg_weighted(xr, yr, w, cg)
        elif prim == "affine":
            w = view.get("w", (4, 3))
            b = view.get("b", (3,))
            out = ad.affine(x, w, b)
        shifted = ad.add(out, 0.3)
        return ad.sum_(ad.mul(shifted, shifted))

    _, grads = ad.value_and_grad(loss, pt)
    worst = fd_check(loss, pt, grads, rng, n_dirs=10)
    assert worst <= 1e-6, f"{prim}: rel err {worst:.3e}"


def test_gradient_covariance_under_rotation(rng):
    # rotation-invariant loss: gradient at rotated inputs is the rotated gradient
    from aequigrasp.liegroup import sample_rotation_uniform

    spec = parse_irreps("2x0+2x1+1x2")
    R = sample_rotation_uniform(rng)
    x0 = rng.normal(size=spec.dim)

    def grad_at(xval):
        pt = ad.ParameterTape(seed=0)
        pt.params["x"] = xval.copy()

        def loss(view):
            x = view.get("x", (spec.dim,))
            dots = ly.channel_dot_nodes(IrrepsArray(spec, x), IrrepsArray(spec, x))
            return ad.sum_(ad.mul(dots, dots))

        _, grads = ad.value_and_grad(loss, pt)
        return grads["x"]

    g_plain = grad_at(x0)
    x_rot = rotate_features(IrrepsArray(spec, x0), R).data
    g_rot = grad_at(x_rot)
    expect = rotate_features(IrrepsArray(spec, g_plain), R).data
    assert np.abs(g_rot - expect).max() <= 1e-8


def test_determinism_bit_identical():
    def run():
        pt = ad.ParameterTape(seed=42)

        def loss(view):
            x = view.get("x", (8, 8))
            w = view.get("w", (8, 4))
            h = ad.tanh(ad.einsum2("ni,io->no", x, w))
            return ad.sum_(ad.mul(h, h))

        val, grads = ad.value_and_grad(loss, pt)
        return val, {k: g.copy() for k, g in grads.items()}

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_node_rejects_raw_numpy():
    pt = ad.ParameterTape(seed=0)

    def loss(view):
        x = view.get("x", (3,))
        return np.sin(x)  # not a registered primitive

    with pytest.raises(ad.AutodiffError, match="not registered"):
        ad.value_and_grad(loss, pt)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradients_no_change():
    params = {"a": np.array([1.0, -2.0])}
    grads = {"a": np.zeros(2)}
    state = ad.AdamState(lr=1e-3)
    new, state2 = ad.adam_step(params, grads, state)
    assert np.array_equal(new["a"], params["a"])
    assert state2.step == 1


def test_adam_constant_gradient_asymptote():
    params = {"a": np.array([0.0])}
    state = ad.AdamState(lr=1e-3)
    g = {"a": np.array([0.37])}
    for _ in range(600):
        params, state = ad.adam_step(params, g, state)
    # after many steps with a constant gradient the per-step move tends to lr
    params2, _ = ad.adam_step(params, g, state)
    step_size = abs(float(params2["a"][0]) - float(params["a"][0]))
    assert step_size == pytest.approx(1e-3, rel=1e-3)


def test_adam_zero_lr():
    params = {"a": np.array([1.0, 2.0])}
    state = ad.AdamState(lr=0.0)
    new, _ = ad.adam_step(params, {"a": np.array([5.0, -1.0])}, state)
    assert np.array_equal(new["a"], params["a"])


def test_adam_shape_mismatch():
    with pytest.raises(ad.AutodiffError):
        ad.adam_step({"a": np.zeros(3)}, {"a": np.zeros(2)}, ad.AdamState())


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    blocks = {
        "layer/w": rng.normal(size=(3, 5)).astype(np.float32).astype(float),
        "layer/b": rng.normal(size=(5,)).astype(np.float32).astype(float),
        "scalar": np.array([2.5]),
    }
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, blocks)
    loaded = ad.load_checkpoint(path)
    assert set(loaded) == set(blocks)
    for k in blocks:
        assert np.array_equal(loaded[k], blocks[k])
    # writing the loaded blocks again is byte-identical
    path2 = tmp_path / "model2.ckpt"
    ad.save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ad.AutodiffError, match="magic"):
        ad.load_checkpoint(path)


def test_checkpoint_truncation(tmp_path, rng):
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, {"w": rng.normal(size=(4, 4))})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ad.AutodiffError, match="truncated"):
        ad.load_checkpoint(path)
