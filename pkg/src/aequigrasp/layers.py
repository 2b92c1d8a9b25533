"""Learnable equivariant layers.

All layers are pure functions of (features, geometry, weights) built from
the autodiff primitive vocabulary, so they can run taped (training) or on
plain arrays (inference). Geometry (directions, distances, times) always
enters as constant data; gradients flow through features and weights only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .irreps import (
    IrrepsArray,
    IrrepsError,
    IrrepsSpec,
    cg_tensor,
    wigner_d,
    _sh_unchecked,
)


# ---------------------------------------------------------------------------
# irreps-array plumbing that tolerates Node data


def entry_view(x: IrrepsArray, index: int):
    """(..., mult, 2l+1) view of one entry, Node-safe."""
    mult, ell = x.spec.entries[index]
    sl = x.spec.entry_slice(index)
    block = x.data[..., sl] if not isinstance(x.data, ad.Node) else ad.getitem(x.data, (Ellipsis, sl))
    shape = block.shape[:-1] + (mult, 2 * ell + 1)
    return block.reshape(shape) if not isinstance(block, ad.Node) else ad.reshape(block, shape)


def from_entries(spec: IrrepsSpec, entries: list) -> IrrepsArray:
    """Assemble an IrrepsArray from per-entry (..., mult, 2l+1) blocks."""
    flats = []
    for block, (mult, ell) in zip(entries, spec.entries):
        shape = block.shape[:-2] + (mult * (2 * ell + 1),)
        flats.append(ad.reshape(block, shape) if isinstance(block, ad.Node) else block.reshape(shape))
    return IrrepsArray(spec, ad.concat(flats, axis=-1))


def rotate_irreps(x: IrrepsArray, R: np.ndarray) -> IrrepsArray:
    """Wigner action of constant rotations R (single or batched) on x; Node-safe."""
    out_entries = []
    for i, (mult, ell) in enumerate(x.spec.entries):
        block = entry_view(x, i)
        if ell == 0:
            out_entries.append(block)
            continue
        D = wigner_d(ell, R, checked=False)
        out_entries.append(ad.rot_apply(D, block))
    return from_entries(x.spec, out_entries)


def channel_dot_nodes(x: IrrepsArray, y: IrrepsArray):
    """Per-channel inner products, Node-safe; shape (..., num_channels)."""
    if x.spec != y.spec:
        raise IrrepsError(f"spec mismatch: {x.spec} vs {y.spec}")
    parts = []
    for i in range(len(x.spec.entries)):
        parts.append(ad.einsum2("...cm,...cm->...c", entry_view(x, i), entry_view(y, i)))
    return ad.concat(parts, axis=-1)


def zeros_like_spec(spec: IrrepsSpec, lead: tuple) -> IrrepsArray:
    return IrrepsArray(spec, np.zeros(lead + (spec.dim,)))


# ---------------------------------------------------------------------------
# scalar encodings


@dataclass(frozen=True)
class ScalarEncoding:
    """Fixed scalar embedding: Gaussian radial basis, sinusoidal time, or identity."""

    kind: str
    count: int
    r_cut: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rbf", "time", "identity"):
            raise ValueError(f"unknown encoding kind {self.kind!r}")
        if self.kind == "time" and self.count % 2 != 0:
            raise ValueError("time encoding needs an even count")


def encode_scalars(values, encoding: ScalarEncoding):
    """Encode each scalar in the trailing axis; output (..., n * count)."""
    if encoding.kind == "identity":
        return values
    values = np.asarray(values, dtype=float)
    if encoding.kind == "rbf":
        centers = np.linspace(0.0, encoding.r_cut, encoding.count)
        width = centers[1] - centers[0] if encoding.count > 1 else encoding.r_cut
        v = np.clip(values, 0.0, encoding.r_cut)
        z = (v[..., None] - centers) / width
        out = np.exp(-z * z)
    else:  # time
        nfreq = encoding.count // 2
        freqs = np.pi * (2.0 ** np.arange(nfreq))
        phase = values[..., None] * freqs
        out = np.stack([np.sin(phase), np.cos(phase)], axis=-1).reshape(phase.shape[:-1] + (encoding.count,))
    return out.reshape(values.shape[:-1] + (-1,)) if values.ndim > 0 else out.reshape(-1)


# ---------------------------------------------------------------------------
# multi-layer perceptron on invariant scalars


def mlp(view, name: str, x, sizes: list[int], zero_last: bool = False):
    """tanh MLP; `sizes` are output widths per layer. Weights live in `view`."""
    h = x
    in_dim = (x.shape if not isinstance(x, ad.Node) else x.value.shape)[-1]
    for i, width in enumerate(sizes):
        last = i == len(sizes) - 1
        init = "zeros" if (zero_last and last) else "normal"
        w = view.get(f"{name}/w{i}", (in_dim, width), init=init)
        b = view.get(f"{name}/b{i}", (width,), init="zeros")
        h = ad.affine(h, w, b)
        if not last:
            h = ad.tanh(h)
        in_dim = width
    return h


# ---------------------------------------------------------------------------
# fully connected tensor product


@dataclass(frozen=True)
class TPPath:
    """One valid coupling block between spec entries; weights are dense per block."""

    in1_entry: int
    in2_entry: int
    out_entry: int
    ell1: int
    ell2: int
    ell3: int
    weight_start: int
    weight_count: int


def enumerate_tp_paths(spec1: IrrepsSpec, spec2: IrrepsSpec, out_spec: IrrepsSpec) -> list[TPPath]:
    paths = []
    offset = 0
    for o, (mo, lo) in enumerate(out_spec.entries):
        for i, (mi, li) in enumerate(spec1.entries):
            for j, (mj, lj) in enumerate(spec2.entries):
                if abs(li - lj) <= lo <= li + lj:
                    n = mi * mj * mo
                    paths.append(TPPath(i, j, o, li, lj, lo, offset, n))
                    offset += n
    return paths


def num_fctp_weights(spec1: IrrepsSpec, spec2: IrrepsSpec, out_spec: IrrepsSpec) -> int:
    paths = enumerate_tp_paths(spec1, spec2, out_spec)
    return paths[-1].weight_start + paths[-1].weight_count if paths else 0


def fctp(x: IrrepsArray, y: IrrepsArray, weights, out_spec: IrrepsSpec) -> IrrepsArray:
    """Fully connected tensor product: every selection-rule path has its own
    dense channel-mixing weight block. Linear in x, y and weights."""
    paths = enumerate_tp_paths(x.spec, y.spec, out_spec)
    expected = paths[-1].weight_start + paths[-1].weight_count if paths else 0
    wdim = (weights.shape if not isinstance(weights, ad.Node) else weights.value.shape)[-1]
    if wdim != expected:
        raise ValueError(f"fctp expects {expected} weights, got {wdim}")
    lead = None
    out_blocks: list = [None] * len(out_spec.entries)
    for path in paths:
        xi = entry_view(x, path.in1_entry)
        yj = entry_view(y, path.in2_entry)
        mi, _ = x.spec.entries[path.in1_entry]
        mj, _ = y.spec.entries[path.in2_entry]
        mo, _ = out_spec.entries[path.out_entry]
        wsl = slice(path.weight_start, path.weight_start + path.weight_count)
        wblock = weights[..., wsl] if not isinstance(weights, ad.Node) else ad.getitem(weights, (Ellipsis, wsl))
        wblock = ad.reshape(wblock, wblock.shape[:-1] + (mi, mj, mo)) if isinstance(wblock, ad.Node) else wblock.reshape(wblock.shape[:-1] + (mi, mj, mo))
        cg = cg_tensor(path.ell1, path.ell2, path.ell3).values
        contrib = ad.cg_weighted(xi, yj, wblock, cg)
        prev = out_blocks[path.out_entry]
        out_blocks[path.out_entry] = contrib if prev is None else ad.add(prev, contrib)
        if lead is None:
            lead = contrib.shape[:-2]
    for o, (mo, lo) in enumerate(out_spec.entries):
        if out_blocks[o] is None:
            out_blocks[o] = np.zeros((lead or ()) + (mo, 2 * lo + 1))
    return from_entries(out_spec, out_blocks)


# ---------------------------------------------------------------------------
# SO(2)-reduced tensor product


@dataclass(frozen=True)
class _SO2Block:
    in_entry: int
    out_entry: int
    m: int
    w_start: int  # start of the a-block; m>0 blocks have a b-block right after


def so2_layout(spec_in: IrrepsSpec, spec_out: IrrepsSpec) -> tuple[list[_SO2Block], int]:
    blocks = []
    offset = 0
    for o, (mo, lo) in enumerate(spec_out.entries):
        for i, (mi, li) in enumerate(spec_in.entries):
            for m in range(0, min(li, lo) + 1):
                blocks.append(_SO2Block(i, o, m, offset))
                offset += mi * mo * (1 if m == 0 else 2)
    return blocks, offset


def num_so2_weights(spec_in: IrrepsSpec, spec_out: IrrepsSpec) -> int:
    return so2_layout(spec_in, spec_out)[1]


def rotation_to_axis(d: np.ndarray) -> np.ndarray:
    """Rotation R with R @ z_hat = d, chosen deterministically (batched)."""
    d = np.asarray(d, dtype=float)
    c = d[..., 2]
    R = np.zeros(d.shape[:-1] + (3, 3))
    # Rodrigues from v = z x d; stable for c > -1
    vx, vy = -d[..., 1], d[..., 0]
    denom = np.where(1.0 + c < 1e-12, 1.0, 1.0 + c)
    R[..., 0, 0] = 1.0 - vy * vy / denom
    R[..., 0, 1] = vx * vy / denom
    R[..., 0, 2] = vy
    R[..., 1, 0] = vx * vy / denom
    R[..., 1, 1] = 1.0 - vx * vx / denom
    R[..., 1, 2] = -vx
    R[..., 2, 0] = -vy
    R[..., 2, 1] = vx
    R[..., 2, 2] = c
    flipped = 1.0 + c < 1e-12
    if np.any(flipped):
        R[flipped] = np.diag([1.0, -1.0, -1.0])
    return R


def _column(x_flat, idx):
    if isinstance(x_flat, ad.Node):
        return ad.gather(x_flat, idx, axis=-1)
    return np.take(x_flat, idx, axis=-1)


def so2_tp(
    x: IrrepsArray,
    edge_dir: np.ndarray,
    weights,
    out_spec: IrrepsSpec | None = None,
) -> IrrepsArray:
    """Edge-aligned tensor product: rotate into the frame where the edge is the
    canonical axis, mix only equal-|m| components, rotate back.

    `weights` is flat with length num_so2_weights, optionally with leading
    edge axes for per-edge conditioning.
    """
    out_spec = out_spec or x.spec
    edge_dir = np.asarray(edge_dir, dtype=float)
    norms = np.linalg.norm(edge_dir, axis=-1)
    if np.any(norms < 1e-9):
        raise ValueError("so2_tp: degenerate (zero) edge direction")
    edge_dir = edge_dir / norms[..., None]
    blocks, total = so2_layout(x.spec, out_spec)
    wdim = (weights.shape if not isinstance(weights, ad.Node) else weights.value.shape)[-1]
    if wdim != total:
        raise ValueError(f"so2_tp expects {total} weights, got {wdim}")

    R = rotation_to_axis(edge_dir)
    x_loc = rotate_irreps(x, np.swapaxes(R, -1, -2))

    in_offs = x.spec.offsets()

    def wslice(start, n, mi, mo):
        sl = slice(start, start + n)
        blk = weights[..., sl] if not isinstance(weights, ad.Node) else ad.getitem(weights, (Ellipsis, sl))
        shape = blk.shape[:-1] + (mi, mo)
        return ad.reshape(blk, shape) if isinstance(blk, ad.Node) else blk.reshape(shape)

    # columns[o][l + m] accumulates the (..., mult_o) output column at position m
    columns: list[list] = [[None] * (2 * lo + 1) for _, lo in out_spec.entries]

    def acc(o, pos, term):
        columns[o][pos] = term if columns[o][pos] is None else ad.add(columns[o][pos], term)

    for blk in blocks:
        mi, li = x.spec.entries[blk.in_entry]
        mo, lo = out_spec.entries[blk.out_entry]
        base_in = in_offs[blk.in_entry]
        if blk.m == 0:
            xi = _column(x_loc.data, base_in + np.arange(mi) * (2 * li + 1) + li)
            W = wslice(blk.w_start, mi * mo, mi, mo)
            acc(blk.out_entry, lo, ad.batch_matvec(xi, W))
        else:
            m = blk.m
            xm = _column(x_loc.data, base_in + np.arange(mi) * (2 * li + 1) + (li - m))
            xp = _column(x_loc.data, base_in + np.arange(mi) * (2 * li + 1) + (li + m))
            Wa = wslice(blk.w_start, mi * mo, mi, mo)
            Wb = wslice(blk.w_start + mi * mo, mi * mo, mi, mo)
            # commutant of in-plane rotations: out = a*x + b*(J x), J swaps the pair
            acc(blk.out_entry, lo - m, ad.add(ad.batch_matvec(xm, Wa), ad.batch_matvec(xp, Wb)))
            acc(blk.out_entry, lo + m, ad.sub(ad.batch_matvec(xp, Wa), ad.batch_matvec(xm, Wb)))

    lead = x_loc.data.shape[:-1]
    out_entries = []
    for o, (mo, lo) in enumerate(out_spec.entries):
        cols = []
        for pos in range(2 * lo + 1):
            col = columns[o][pos]
            if col is None:
                col = np.zeros(lead + (mo,))
            cols.append(ad.reshape(col, col.shape + (1,)) if isinstance(col, ad.Node) else col.reshape(col.shape + (1,)))
        out_entries.append(ad.concat(cols, axis=-1))
    out_loc = from_entries(out_spec, out_entries)
    return rotate_irreps(out_loc, R)


# ---------------------------------------------------------------------------
# directional modulation


def dir_mod_widths(spec: IrrepsSpec) -> list[int]:
    return [mult for mult, _ in spec.entries]


def dir_mod(edge_dir: np.ndarray, scalars, view, name: str, out_spec: IrrepsSpec,
            hidden: int = 32) -> IrrepsArray:
    """Spherical harmonics of the edge direction, scaled per degree by MLP
    outputs of the encoded scalars. Zero-length directions contribute only
    to degree 0 (higher harmonics are zeroed).
    """
    edge_dir = np.asarray(edge_dir, dtype=float)
    norms = np.linalg.norm(edge_dir, axis=-1)
    safe = np.where(norms[..., None] < 1e-12, np.array([0.0, 0.0, 1.0]), edge_dir)
    unit = safe / np.linalg.norm(safe, axis=-1, keepdims=True)
    degenerate = norms < 1e-12

    widths = [mult for mult, _ in out_spec.entries]
    h = mlp(view, name, scalars, [hidden, sum(widths)])
    out_entries = []
    start = 0
    for (mult, ell) in out_spec.entries:
        w = h[..., start : start + mult] if not isinstance(h, ad.Node) else ad.getitem(h, (Ellipsis, slice(start, start + mult)))
        start += mult
        Y = _sh_unchecked(ell, unit)
        if ell > 0 and np.any(degenerate):
            Y = np.where(degenerate[..., None], 0.0, Y)
        w2 = ad.reshape(w, w.shape + (1,)) if isinstance(w, ad.Node) else w.reshape(w.shape + (1,))
        out_entries.append(ad.mul(w2, Y[..., None, :]))
    return from_entries(out_spec, out_entries)


# ---------------------------------------------------------------------------
# equivariant linear / FiLM / gate


def num_equiv_linear_weights(spec_in: IrrepsSpec, spec_out: IrrepsSpec) -> int:
    return sum(
        spec_in.mult_of_degree(lo) * mo
        for mo, lo in spec_out.entries
    )


def equiv_linear(x: IrrepsArray, weights, out_spec: IrrepsSpec | None = None) -> IrrepsArray:
    """Mix channels within each degree independently; commutes with rotations."""
    out_spec = out_spec or x.spec
    offset = 0
    out_entries = []
    for (mo, lo) in out_spec.entries:
        mi = x.spec.mult_of_degree(lo)
        if mi == 0:
            raise IrrepsError(f"input spec {x.spec} has no degree-{lo} channels for output {out_spec}")
        stacked = _degree_stack(x, lo)
        sl = slice(offset, offset + mi * mo)
        offset += mi * mo
        W = weights[..., sl] if not isinstance(weights, ad.Node) else ad.getitem(weights, (Ellipsis, sl))
        W = ad.reshape(W, W.shape[:-1] + (mi, mo)) if isinstance(W, ad.Node) else W.reshape(W.shape[:-1] + (mi, mo))
        out_entries.append(ad.block_linear(stacked, W))
    return from_entries(out_spec, out_entries)


def _degree_stack(x: IrrepsArray, ell: int):
    parts = [entry_view(x, i) for i, (_, l) in enumerate(x.spec.entries) if l == ell]
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-2)


def equiv_film(x: IrrepsArray, t_enc, view, name: str, hidden: int = 32) -> IrrepsArray:
    """Feature-wise conditioning: every channel is scaled, degree-0 channels
    are also shifted. Zero parameters give the identity map.
    """
    n_ch = x.spec.num_channels
    n_scalar = x.spec.mult_of_degree(0)
    h = mlp(view, name, t_enc, [hidden, n_ch + n_scalar], zero_last=True)
    out_entries = []
    ch_off = 0
    sc_off = n_ch
    for i, (mult, ell) in enumerate(x.spec.entries):
        block = entry_view(x, i)
        s = _take_cols(h, ch_off, mult)
        ch_off += mult
        scale = ad.add(s, 1.0)
        scale = ad.reshape(scale, scale.shape + (1,)) if isinstance(scale, ad.Node) else scale.reshape(scale.shape + (1,))
        block = ad.mul(block, scale)
        if ell == 0:
            b = _take_cols(h, sc_off, mult)
            sc_off += mult
            b = ad.reshape(b, b.shape + (1,)) if isinstance(b, ad.Node) else b.reshape(b.shape + (1,))
            block = ad.add(block, b)
        out_entries.append(block)
    return from_entries(x.spec, out_entries)


def _take_cols(h, start, n):
    sl = slice(start, start + n)
    return ad.getitem(h, (Ellipsis, sl)) if isinstance(h, ad.Node) else h[..., sl]


def equiv_gate(x: IrrepsArray, view, name: str) -> IrrepsArray:
    """Pointwise nonlinearity: tanh on degree-0 channels, sigmoid gates
    (driven by the degree-0 channels) scaling each higher-degree channel."""
    n0 = x.spec.mult_of_degree(0)
    n_gates = sum(mult for mult, ell in x.spec.entries if ell > 0)
    scalars = _degree_stack(x, 0)
    scalars = ad.reshape(scalars, scalars.shape[:-1]) if isinstance(scalars, ad.Node) else scalars.reshape(scalars.shape[:-1])
    out_entries = []
    gates = None
    if n_gates:
        gw = view.get(f"{name}/gate_w", (n0, n_gates))
        gb = view.get(f"{name}/gate_b", (n_gates,), init="zeros")
        gates = ad.sigmoid(ad.affine(scalars, gw, gb))
    g_off = 0
    for i, (mult, ell) in enumerate(x.spec.entries):
        block = entry_view(x, i)
        if ell == 0:
            out_entries.append(ad.tanh(block))
        else:
            g = _take_cols(gates, g_off, mult)
            g_off += mult
            g = ad.reshape(g, g.shape + (1,)) if isinstance(g, ad.Node) else g.reshape(g.shape + (1,))
            out_entries.append(ad.mul(block, g))
    return from_entries(x.spec, out_entries)


# ---------------------------------------------------------------------------
# attention aggregation


def attention_aggregate(edge_feats, logits):
    """Softmax(logits)-weighted sum over the neighbor axis.

    edge_feats: (..., k, dim); logits: (..., k). Logits must be built from
    rotation-invariant scalars for the result to stay equivariant.
    """
    k = (logits.shape if not isinstance(logits, ad.Node) else logits.value.shape)[-1]
    if k < 1:
        raise ValueError("attention_aggregate requires at least one edge")
    w = ad.softmax(logits, axis=-1)
    return ad.einsum2("...k,...kd->...d", w, edge_feats)
