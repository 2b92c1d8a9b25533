"""Reverse-mode differentiation over a fixed primitive vocabulary.

A training step traces the forward computation onto a tape of nodes created
in topological order; every primitive records a hand-derived pullback.
Primitives accept plain ndarrays or Node objects and only record when at
least one input is a node, so the same layer code serves inference (no tape)
and training (taped) without duplication.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

CHECKPOINT_MAGIC = b"AEQC"
CHECKPOINT_VERSION = 1


class AutodiffError(RuntimeError):
    pass


class Tape:
    """Topologically ordered operation records for one traced evaluation."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def add(self, node: "Node") -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)


class Node:
    """One taped value; `vjp` maps the output gradient to parent gradients."""

    __slots__ = ("value", "parents", "vjp", "tape", "index", "op")

    def __init__(self, value, tape, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.op = op
        tape.add(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __array__(self, *a, **k):
        raise AutodiffError(
            "operation not registered for autodiff: a Node was passed to a raw "
            "numpy function; use the primitives in aequigrasp.autodiff"
        )


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _tape_of(*args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(tape, value, parents, vjp, op):
    node_parents = tuple(p for p in parents if isinstance(p, Node))
    return Node(value, tape, node_parents, vjp, op)


# ---------------------------------------------------------------------------
# primitive vocabulary


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def vjp(g):
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g, av.shape))
        if isinstance(b, Node):
            grads.append(_unbroadcast(g, bv.shape))
        return grads

    return _record(tape, out, (a, b), vjp, "add")


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def vjp(g):
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g, av.shape))
        if isinstance(b, Node):
            grads.append(_unbroadcast(-g, bv.shape))
        return grads

    return _record(tape, out, (a, b), vjp, "sub")


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def vjp(g):
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Node):
            grads.append(_unbroadcast(g * av, bv.shape))
        return grads

    return _record(tape, out, (a, b), vjp, "mul")


def scale(a, c: float):
    av = value_of(a)
    out = av * c
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: [g * c], "scale")


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: [g.reshape(av.shape)], "reshape")


def getitem(a, idx):
    av = value_of(a)
    out = av[idx]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        gp = np.zeros_like(av)
        np.add.at(gp, idx, g)
        return [gp]

    return _record(tape, out, (a,), vjp, "getitem")


def concat(parts, axis=-1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return [p for p, part in zip(pieces, parts) if isinstance(part, Node)]

    return _record(tape, out, tuple(parts), vjp, "concat")


def gather(a, idx, axis=0):
    """Fancy gather along one axis (0, -1 or -2); pullback scatter-adds."""
    av = value_of(a)
    idx = np.asarray(idx)
    out = np.take(av, idx, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return out
    if axis == av.ndim - 1:
        axis = -1
    elif axis == av.ndim - 2:
        axis = -2
    if axis not in (0, -1, -2):
        raise AutodiffError("gather supports axis 0, -1 or -2")

    def vjp(g):
        gp = np.zeros_like(av)
        if axis == 0:
            np.add.at(gp, idx, g)
        elif axis == -1:
            np.add.at(gp, (Ellipsis, idx), g)
        else:
            np.add.at(gp, (Ellipsis, idx, slice(None)), g)
        return [gp]

    return _record(tape, out, (a,), vjp, "gather")


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return [np.broadcast_to(g, av.shape).copy()]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, av.shape).copy()]

    return _record(tape, out, (a,), vjp, "sum")


def mean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: [g * (1.0 - out * out)], "tanh")


def sigmoid(a):
    av = value_of(a)
    out = 1.0 / (1.0 + np.exp(-av))
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: [g * out * (1.0 - out)], "sigmoid")


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: [g * out], "exp")


def softmax(a, axis=-1):
    av = value_of(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [out * (g - dot)]

    return _record(tape, out, (a,), vjp, "softmax")


@lru_cache(maxsize=4096)
def _einsum_grad_specs(spec: str):
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    for ch in sa:
        if ch not in sb + out:
            raise AutodiffError(f"einsum2 index {ch!r} of first operand not recoverable in {spec!r}")
    for ch in sb:
        if ch not in sa + out:
            raise AutodiffError(f"einsum2 index {ch!r} of second operand not recoverable in {spec!r}")
    ga = f"{out},{sb}->{sa}"
    gb = f"{out},{sa}->{sb}"
    return ga, gb


def einsum2(spec: str, a, b):
    """Two-operand einsum with a mechanical pullback.

    Every index of each operand must appear in the other operand or the
    output (no internal traces), which holds for all contractions used here.
    """
    av, bv = value_of(a), value_of(b)
    out = np.einsum(spec, av, bv, optimize=True)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    ga_spec, gb_spec = _einsum_grad_specs(spec)

    def vjp(g):
        # ellipsis broadcasting inside the forward einsum produces gradients
        # at the broadcast shape; reduce them back to the operand shapes
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(np.einsum(ga_spec, g, bv, optimize=True), av.shape))
        if isinstance(b, Node):
            grads.append(_unbroadcast(np.einsum(gb_spec, g, av, optimize=True), bv.shape))
        return grads

    return _record(tape, out, (a, b), vjp, "einsum2")


def _cg_forward(xf, yf, wv, cg):
    """Staged BLAS contraction of sum_ijmn x[b,i,m] y[b,j,n] w[i,j,o] cg[m,n,k].

    xf (B, ci, m), yf (B, cj, n), w (ci, cj, co) -> out (B, co, k), plus the
    intermediates reused by the pullbacks.
    """
    B, ci, m = xf.shape
    cj = yf.shape[1]
    k = cg.shape[2]
    co = wv.shape[2]
    t1 = np.tensordot(yf, cg, axes=([2], [1]))  # (B, cj, m, k)
    t1r = t1.transpose(0, 2, 1, 3).reshape(B, m, cj * k)
    t2 = np.matmul(xf, t1r).reshape(B, ci, cj, k)  # sum over m
    out = np.tensordot(t2.reshape(B, ci * cj, k), wv.reshape(ci * cj, co),
                       axes=([1], [0])).swapaxes(1, 2)  # (B, co, k)
    return out, t1, t2


def cg_weighted(x, y, w, cg: np.ndarray):
    """One tensor-product path bundle: couple x (..., ci, mi) with y (..., cj, mj)
    through a constant CG tensor and mix channels with w (ci, cj, co).

    Returns (..., co, mk). Linear in each argument. Leading axes of x and y
    broadcast against each other; w is shared.
    """
    xv, yv, wv = value_of(x), value_of(y), value_of(w)
    if wv.ndim != 3:
        raise AutodiffError("cg_weighted expects shared (ci, cj, co) weights")
    lead = np.broadcast_shapes(xv.shape[:-2], yv.shape[:-2])
    ci, m = xv.shape[-2:]
    cj, n = yv.shape[-2:]
    k = cg.shape[2]
    co = wv.shape[2]
    B = int(np.prod(lead)) if lead else 1
    xf = np.broadcast_to(xv, lead + (ci, m)).reshape(B, ci, m)
    yf = np.broadcast_to(yv, lead + (cj, n)).reshape(B, cj, n)
    out_flat, t1, t2 = _cg_forward(xf, yf, wv, cg)
    out = out_flat.reshape(lead + (co, k))
    tape = _tape_of(x, y, w)
    if tape is None:
        return out

    def vjp(g):
        gf = np.ascontiguousarray(g.reshape(B, co, k))
        grads = []
        # gw[b,i,j,k] = sum_o g[b,o,k] w[i,j,o]
        gw = None
        if isinstance(x, Node) or isinstance(y, Node):
            gw = np.tensordot(gf.swapaxes(1, 2).reshape(B * k, co), wv.reshape(ci * cj, co),
                              axes=([1], [1])).reshape(B, k, ci, cj).transpose(0, 2, 3, 1)
        if isinstance(x, Node):
            # dx[b,i,m] = sum_jk gw[b,i,j,k] t1[b,j,m,k]
            t1r = t1.transpose(0, 1, 3, 2).reshape(B, cj * k, m)
            dx = np.matmul(gw.reshape(B, ci, cj * k), t1r)
            grads.append(_unbroadcast(dx.reshape(lead + (ci, m)), xv.shape))
        if isinstance(y, Node):
            # dy[b,j,n] = sum_imk gw[b,i,j,k] x[b,i,m] cg[m,n,k]
            xg = np.matmul(xf.swapaxes(1, 2), gw.reshape(B, ci, cj * k))  # (B, m, cj*k)
            xg = xg.reshape(B, m, cj, k).transpose(0, 2, 1, 3).reshape(B, cj, m * k)
            cgr = cg.transpose(0, 2, 1).reshape(m * k, n)
            dy = np.matmul(xg, cgr)
            grads.append(_unbroadcast(dy.reshape(lead + (cj, n)), yv.shape))
        if isinstance(w, Node):
            # dw[i,j,o] = sum_bk t2[b,i,j,k] g[b,o,k]
            t2r = t2.transpose(1, 2, 0, 3).reshape(ci * cj, B * k)
            gr = gf.transpose(0, 2, 1).reshape(B * k, co)
            grads.append((t2r @ gr).reshape(ci, cj, co))
        return grads

    return _record(tape, out, (x, y, w), vjp, "cg_weighted")


def rot_apply(D: np.ndarray, x):
    """Apply constant (batched) rotation blocks: out[..., c, i] = D[..., i, j] x[..., c, j]."""
    xv = value_of(x)
    Dt = np.swapaxes(D, -1, -2)
    out = np.matmul(xv, Dt)
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        return [_unbroadcast(np.matmul(g, D), xv.shape)]

    return _record(tape, out, (x,), vjp, "rot_apply")


def batch_matvec(x, W):
    """out[..., v] = sum_u x[..., u] W[..., u, v]; W shared (u, v) or batched."""
    xv, Wv = value_of(x), value_of(W)
    if Wv.ndim == 2:
        out = xv @ Wv
    else:
        out = np.matmul(xv[..., None, :], Wv)[..., 0, :]
    tape = _tape_of(x, W)
    if tape is None:
        return out

    def vjp(g):
        grads = []
        if isinstance(x, Node):
            if Wv.ndim == 2:
                grads.append(_unbroadcast(g @ Wv.T, xv.shape))
            else:
                grads.append(_unbroadcast(np.matmul(g[..., None, :], np.swapaxes(Wv, -1, -2))[..., 0, :], xv.shape))
        if isinstance(W, Node):
            if Wv.ndim == 2:
                gw = np.tensordot(xv.reshape(-1, xv.shape[-1]), g.reshape(-1, g.shape[-1]), axes=([0], [0]))
                grads.append(gw)
            else:
                grads.append(_unbroadcast(xv[..., :, None] * g[..., None, :], Wv.shape))
        return grads

    return _record(tape, out, (x, W), vjp, "batch_matvec")


def block_linear(x, w):
    """Channel mixing (..., ci, m) @ (ci, co) -> (..., co, m); w may be batched (..., ci, co)."""
    if value_of(w).ndim == 2:
        return einsum2("...im,io->...om", x, w)
    return einsum2("...im,...io->...om", x, w)


def affine(x, w, b):
    """x (..., i) -> x @ w + b with w (i, o), b (o,)."""
    return add(einsum2("...i,io->...o", x, w), b)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Node, seed: float = 1.0) -> dict[int, np.ndarray]:
    """Reverse sweep over the loss node's tape; returns grads keyed by node id."""
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=float)}
    for node in reversed(loss.tape.nodes[: loss.index + 1]):
        if node.vjp is None:
            continue  # leaves keep their accumulated gradient
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.vjp(np.asarray(g, dtype=float))
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return grads


# ---------------------------------------------------------------------------
# parameter storage


def _name_seed(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master, zlib.crc32(name.encode()))))


class ParameterTape:
    """Named parameter blocks plus gradient accumulators and the active tape.

    Parameters are created lazily by name with a deterministic per-name
    initializer, so creation order does not affect values.
    """

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def ensure(self, name: str, shape: tuple, init: str = "normal", scale_: float | None = None) -> np.ndarray:
        arr = self.params.get(name)
        if arr is not None:
            if arr.shape != tuple(shape):
                raise AutodiffError(f"parameter {name!r} has shape {arr.shape}, requested {shape}")
            return arr
        if init == "zeros":
            arr = np.zeros(shape)
        elif init == "normal":
            fan_in = shape[0] if len(shape) > 1 else max(shape[-1], 1)
            std = scale_ if scale_ is not None else 1.0 / np.sqrt(fan_in)
            arr = _name_seed(self.seed, name).normal(0.0, std, size=shape)
        else:
            raise AutodiffError(f"unknown initializer {init!r}")
        self.params[name] = arr
        return arr

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class ParamView:
    """Access to parameters during an evaluation; taped views return Nodes."""

    def __init__(self, ptape: ParameterTape, tape: Tape | None = None):
        self.ptape = ptape
        self.tape = tape
        self._leaves: dict[str, Node] = {}

    def get(self, name: str, shape: tuple, init: str = "normal", scale: float | None = None):
        arr = self.ptape.ensure(name, tuple(shape), init, scale)
        if self.tape is None:
            return arr
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = Node(arr, self.tape, (), None, op=f"param:{name}")
            self._leaves[name] = leaf
        return leaf


def value_and_grad(fn, ptape: ParameterTape, *args, **kwargs):
    """Evaluate fn(view, *args) and return (loss value, grads by block name).

    Blocks untouched by the computation get exact zero gradients.
    """
    tape = Tape()
    view = ParamView(ptape, tape)
    loss = fn(view, *args, **kwargs)
    if not isinstance(loss, Node):
        # loss did not depend on any parameter
        ptape.zero_grads()
        return float(np.asarray(loss)), dict(ptape.grads)
    node_grads = backward(loss)
    grads = {}
    for name, arr in ptape.params.items():
        leaf = view._leaves.get(name)
        g = node_grads.get(id(leaf)) if leaf is not None else None
        grads[name] = np.zeros_like(arr) if g is None else np.asarray(g)
    ptape.grads = grads
    return float(loss.value), grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Standard Adam update with bias correction; returns (params', state')."""
    new_params: dict[str, np.ndarray] = {}
    new_m, new_v = {}, {}
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise AutodiffError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, block count, then per block
# name (u16 length + utf8), ndim (u8), dims (u32 each), raw little-endian f32


def save_checkpoint(path, blocks: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blocks)))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype="<f4")
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise AutodiffError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise AutodiffError(f"unsupported checkpoint version {version}")
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise AutodiffError(f"truncated checkpoint block {name!r}")
            blocks[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(float)
    return blocks
