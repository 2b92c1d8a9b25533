"""The grasp synthesis network.

Pipeline: a hierarchical equivariant scene encoder over a point-cloud
pyramid, a kinematics-driven gripper query encoder, stacked query-scene
tensor-field blocks conditioned on flow time, kinematic-graph message
passing, and a linear flow readout.

All functions take a ParamView so the same code runs taped (training) or
untaped (sampling). Geometry (positions, FK transforms, times) is constant
with respect to differentiation; gradients flow through features and
weights only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .irreps import IrrepsArray, IrrepsSpec, parse_irreps, PERM_YZX
from .kinematics import BASE, KinematicTree, fk_batch
from .pointcloud import PointCloud, PyramidIndex, build_pyramid, knn


@dataclass
class ModelConfig:
    scene_spec: IrrepsSpec = field(default_factory=lambda: parse_irreps("16x0+8x1+4x2"))
    query_spec: IrrepsSpec = field(default_factory=lambda: parse_irreps("16x0+8x1+4x2"))
    level_sizes: tuple = (2048, 512, 128, 32)
    knn_k: int = 16
    pool_k: int = 8
    query_k: int = 8
    mp_layers: int = 2
    n_blocks: int = 2
    decode_layers: int = 2
    rbf_count: int = 8
    time_count: int = 16
    mlp_hidden: int = 32
    rbf_rcut: float = 0.12
    voxel_cell: float = 0.001

    @property
    def proj_spec(self) -> IrrepsSpec:
        # hierarchical features are projected to half multiplicity before edge ops
        return IrrepsSpec(tuple((max(1, m // 2), l) for m, l in self.scene_spec.entries))

    def rcut_level(self, k: int) -> float:
        return self.rbf_rcut * (2.0**k)

    def time_encoding(self) -> ly.ScalarEncoding:
        return ly.ScalarEncoding("time", self.time_count)


@dataclass
class ScenePyramid:
    positions: list[np.ndarray]
    features: list[IrrepsArray]
    index: PyramidIndex

    @property
    def levels(self) -> int:
        return len(self.positions)

    def ancestor_table(self) -> list[np.ndarray]:
        """ancestor_table()[k][i] = index at level k+1 of level-0 point i."""
        out = []
        idx = np.arange(len(self.positions[0]))
        for parent in self.index.parents:
            idx = parent[idx]
            out.append(idx.copy())
        return out


@dataclass
class GripperQueries:
    positions: np.ndarray  # (B, T, 3) in the gripper base frame
    features: IrrepsArray  # (B, T, dim)
    dof: int

    @property
    def count(self) -> int:
        return self.dof + 2


# ---------------------------------------------------------------------------
# scene encoder


def _edge_geometry(centers: np.ndarray, neighbors: np.ndarray):
    """Relative geometry from neighbor to center: directions, distances, mask."""
    rel = centers[:, None, :] - neighbors
    dist = np.linalg.norm(rel, axis=-1)
    ok = dist > 1e-9
    safe = np.where(ok[..., None], rel, np.array([0.0, 0.0, 1.0]))
    dirs = safe / np.linalg.norm(safe, axis=-1, keepdims=True)
    return dirs, dist, ok


def _masked(feats: IrrepsArray, ok: np.ndarray) -> IrrepsArray:
    return IrrepsArray(feats.spec, ad.mul(feats.data, ok[..., None].astype(float)))


def _message_layer(view, name: str, cfg: ModelConfig, feats: IrrepsArray,
                   pos: np.ndarray, nbr_idx: np.ndarray, rcut: float) -> IrrepsArray:
    """One within-level equivariant message-passing layer with attention."""
    spec = feats.spec
    nbr_pos = pos[nbr_idx]
    dirs, dist, ok = _edge_geometry(pos, nbr_pos)
    rbf = ly.encode_scalars(dist[..., None], ly.ScalarEncoding("rbf", cfg.rbf_count, rcut))
    f_nbr = IrrepsArray(spec, ad.gather(feats.data, nbr_idx, axis=0))
    f_ctr = IrrepsArray(spec, _expand_mid(feats.data))
    dots = ly.channel_dot_nodes(f_ctr, f_nbr)
    scalars = ad.concat([rbf, dots], axis=-1)
    logits = _squeeze_last(ly.mlp(view, f"{name}/att", scalars, [cfg.mlp_hidden, 1]))
    w = view.get(f"{name}/so2", (ly.num_so2_weights(spec, spec),),
                 scale=1.0 / np.sqrt(spec.num_channels))
    msgs = ly.so2_tp(f_nbr, dirs, w, spec)
    msgs = _masked(msgs, ok)
    agg = IrrepsArray(spec, ly.attention_aggregate(msgs.data, logits))
    upd = ly.equiv_gate(agg, view, f"{name}/gate")
    nw = ly.num_equiv_linear_weights(spec, spec)
    mixed = ly.equiv_linear(upd, view.get(f"{name}/mix", (nw,), scale=1.0 / np.sqrt(spec.num_channels)), spec)
    return IrrepsArray(spec, ad.add(feats.data, mixed.data))


def _expand_mid(data):
    shape = data.shape[:-1] + (1,) + data.shape[-1:]
    return ad.reshape(data, shape) if isinstance(data, ad.Node) else data.reshape(shape)


def _squeeze_last(x):
    shape = x.shape[:-1]
    return ad.reshape(x, shape) if isinstance(x, ad.Node) else x.reshape(shape)


def scene_encode(pc: PointCloud, view, cfg: ModelConfig, seed: int = 0) -> ScenePyramid:
    """Encode a preprocessed (fixed-cardinality) cloud into a feature pyramid."""
    sizes = [s for s in cfg.level_sizes if s <= len(pc)] or [len(pc)]
    if sizes[0] != len(pc):
        raise ValueError(f"cloud size {len(pc)} does not match level-0 size {sizes[0]}")
    index = build_pyramid(pc, sizes, seed=seed)
    positions = [pc.positions]
    for sel in index.selections:
        positions.append(positions[-1][sel])

    spec = cfg.scene_spec
    # initial features: attention-weighted directional encodings of neighborhoods
    k0 = min(cfg.knn_k, len(pc))
    nbr = knn(positions[0], positions[0], k0)
    dirs, dist, ok = _edge_geometry(positions[0], positions[0][nbr])
    rbf = ly.encode_scalars(dist[..., None], ly.ScalarEncoding("rbf", cfg.rbf_count, cfg.rcut_level(0)))
    logits = _squeeze_last(ly.mlp(view, "scene/init/att", rbf, [cfg.mlp_hidden, 1]))
    enc = ly.dir_mod(dirs, rbf, view, "scene/init/dir", spec, hidden=cfg.mlp_hidden)
    enc = _masked(enc, ok)
    feats = [IrrepsArray(spec, ly.attention_aggregate(enc.data, logits))]

    for layer in range(cfg.mp_layers):
        feats[0] = _message_layer(view, f"scene/l0/mp{layer}", cfg, feats[0], positions[0], nbr, cfg.rcut_level(0))

    for k, sel in enumerate(index.selections, start=1):
        fine_pos, fine_f = positions[k - 1], feats[k - 1]
        coarse_pos = positions[k]
        pk = min(cfg.pool_k, len(fine_pos))
        nbr_pool = knn(coarse_pos, fine_pos, pk)
        dirs, dist, ok = _edge_geometry(coarse_pos, fine_pos[nbr_pool])
        rbf = ly.encode_scalars(dist[..., None], ly.ScalarEncoding("rbf", cfg.rbf_count, cfg.rcut_level(k)))
        logits = _squeeze_last(ly.mlp(view, f"scene/pool{k}/att", rbf, [cfg.mlp_hidden, 1]))
        w = view.get(f"scene/pool{k}/so2", (ly.num_so2_weights(spec, spec),),
                     scale=1.0 / np.sqrt(spec.num_channels))
        msgs = ly.so2_tp(IrrepsArray(spec, ad.gather(fine_f.data, nbr_pool, axis=0)), dirs, w, spec)
        msgs = _masked(msgs, ok)
        agg = ly.attention_aggregate(msgs.data, logits)
        # the coarse point is itself a fine point; carry its feature explicitly
        self_f = ad.gather(fine_f.data, sel, axis=0)
        nw = ly.num_equiv_linear_weights(spec, spec)
        self_mix = ly.equiv_linear(IrrepsArray(spec, self_f),
                                   view.get(f"scene/pool{k}/self", (nw,), scale=1.0 / np.sqrt(spec.num_channels)), spec)
        pooled = IrrepsArray(spec, ad.add(agg, self_mix.data))
        pooled = ly.equiv_gate(pooled, view, f"scene/pool{k}/gate")
        f_k = pooled
        kk = min(cfg.knn_k, len(coarse_pos))
        nbr_k = knn(coarse_pos, coarse_pos, kk)
        for layer in range(cfg.mp_layers):
            f_k = _message_layer(view, f"scene/l{k}/mp{layer}", cfg, f_k, coarse_pos, nbr_k, cfg.rcut_level(k))
        feats.append(f_k)

    return ScenePyramid(positions, feats, index)


# ---------------------------------------------------------------------------
# gripper encoder


def _graph_edges(tree: KinematicTree) -> list[tuple[int, int]]:
    """Directed edges over joint tokens 0..D-1 and pose tokens D, D+1."""
    D = tree.dof
    edges = []
    for i, joint in enumerate(tree.joints):
        if joint.parent == BASE:
            for p in (D, D + 1):
                edges.append((p, i))
                edges.append((i, p))
        else:
            edges.append((joint.parent, i))
            edges.append((i, joint.parent))
    edges.append((D, D + 1))
    edges.append((D + 1, D))
    return edges


def gripper_queries(tree: KinematicTree, q: np.ndarray, view, cfg: ModelConfig) -> GripperQueries:
    """Configuration-aware query tokens: one per joint plus two pose tokens.

    Joint embeddings are rotated by their FK frames, conditioned on
    parent-child channel dot products, and exchanged once over the kinematic
    graph via directional messages on the relative joint positions.
    """
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[None, :]
    B = q.shape[0]
    D = tree.dof
    espec = cfg.query_spec
    dim = espec.dim

    pose0 = view.get(f"embed/{tree.name}/pose0", (dim,), scale=1.0)
    pose1 = view.get(f"embed/{tree.name}/pose1", (dim,), scale=1.0)

    positions = np.zeros((B, D + 2, 3))
    if D == 0:
        stacked = ad.concat([_expand_tok(pose0, B), _expand_tok(pose1, B)], axis=-2)
        return GripperQueries(positions, IrrepsArray(espec, stacked), 0)

    R, p = fk_batch(tree, q)
    positions[:, :D] = p

    embeds = ad.concat([_expand_tok(view.get(f"embed/{tree.name}/joint{j}", (dim,), scale=1.0), B)
                        for j in range(D)], axis=-2)
    z = IrrepsArray(espec, embeds)  # (B, D, dim)
    z_rot = ly.rotate_irreps(z, R)

    # relative-rotation conditioning: channel dots against the rotated parent
    # embedding (or the static anchor for chain roots)
    anchor = view.get("embed/anchor", (dim,), scale=1.0)
    parent_feats = []
    for j, joint in enumerate(tree.joints):
        if joint.parent == BASE:
            parent_feats.append(_expand_tok(anchor, B))
        else:
            sl = (slice(None), slice(joint.parent, joint.parent + 1), slice(None))
            parent_feats.append(ad.getitem(z_rot.data, sl) if isinstance(z_rot.data, ad.Node) else z_rot.data[sl])
    par = IrrepsArray(espec, ad.concat(parent_feats, axis=-2))
    dots = ly.channel_dot_nodes(z_rot, par)  # (B, D, C)
    s = ly.mlp(view, "gq/cond", dots, [cfg.mlp_hidden, espec.num_channels], zero_last=True)
    z_mod = _scale_channels(z_rot, ad.add(s, 1.0))

    # one directional message pass over the kinematic graph (parent/child and
    # root-origin edges) injecting the translational joint information
    tok_pos = positions
    feats = ad.concat([z_mod.data, _expand_tok(pose0, B), _expand_tok(pose1, B)], axis=-2)
    feats = IrrepsArray(espec, feats)
    feats = _graph_message_pass(tree, tok_pos, feats, view, "gq/graph", cfg, with_fctp=False)
    return GripperQueries(tok_pos, feats, D)


def _expand_tok(vec, B):
    node = isinstance(vec, ad.Node)
    v = ad.reshape(vec, (1, 1, vec.shape[-1])) if node else vec.reshape(1, 1, -1)
    if node:
        ones = np.ones((B, 1, 1))
        return ad.mul(v, ones)
    return np.broadcast_to(v, (B, 1, v.shape[-1])).copy()


def _scale_channels(x: IrrepsArray, scales) -> IrrepsArray:
    """Multiply each channel (uniformly over its m components) by a scalar."""
    out_entries = []
    off = 0
    for i, (mult, ell) in enumerate(x.spec.entries):
        block = ly.entry_view(x, i)
        s = ly._take_cols(scales, off, mult)
        off += mult
        s = ad.reshape(s, s.shape + (1,)) if isinstance(s, ad.Node) else s.reshape(s.shape + (1,))
        out_entries.append(ad.mul(block, s))
    return ly.from_entries(x.spec, out_entries)


def _graph_message_pass(tree: KinematicTree, tok_pos: np.ndarray, feats: IrrepsArray,
                        view, name: str, cfg: ModelConfig, with_fctp: bool) -> IrrepsArray:
    """Message passing over the kinematic graph including pose tokens."""
    edges = _graph_edges(tree)
    if not edges:
        return feats
    src = np.array([e[0] for e in edges])
    dst = np.array([e[1] for e in edges])
    B, T = tok_pos.shape[0], tok_pos.shape[1]
    rel = tok_pos[:, dst] - tok_pos[:, src]  # (B, E, 3)
    dist = np.linalg.norm(rel, axis=-1)
    rbf = ly.encode_scalars(dist[..., None], ly.ScalarEncoding("rbf", cfg.rbf_count, 0.2))
    dm = ly.dir_mod(rel, rbf, view, f"{name}/dir", cfg.query_spec, hidden=cfg.mlp_hidden)
    if with_fctp:
        f_src = IrrepsArray(feats.spec, ad.gather(feats.data, src, axis=-2) if isinstance(feats.data, ad.Node) else np.take(feats.data, src, axis=-2))
        nw = ly.num_fctp_weights(feats.spec, dm.spec, feats.spec)
        w = view.get(f"{name}/fctp", (nw,), scale=_fctp_scale(feats.spec, dm.spec, feats.spec))
        msgs = ly.fctp(f_src, dm, w, feats.spec)
    else:
        msgs = dm
    # mean-aggregate incoming messages per destination token
    inc = np.zeros((T, len(edges)))
    for e, d in enumerate(dst):
        inc[d, e] = 1.0
    counts = np.maximum(inc.sum(axis=1, keepdims=True), 1.0)
    agg = ad.einsum2("te,bed->btd", inc / counts, msgs.data)
    agg = IrrepsArray(feats.spec, agg)
    upd = ly.equiv_gate(agg, view, f"{name}/gate")
    nw2 = ly.num_equiv_linear_weights(feats.spec, feats.spec)
    mixed = ly.equiv_linear(upd, view.get(f"{name}/mix", (nw2,), scale=1.0 / np.sqrt(feats.spec.num_channels)), feats.spec)
    return IrrepsArray(feats.spec, ad.add(feats.data, mixed.data))


def _fctp_scale(s1: IrrepsSpec, s2: IrrepsSpec, so: IrrepsSpec) -> float:
    paths = ly.enumerate_tp_paths(s1, s2, so)
    fan = {}
    for p in paths:
        fan[p.out_entry] = fan.get(p.out_entry, 0) + s1.entries[p.in1_entry][0] * s2.entries[p.in2_entry][0]
    return 1.0 / np.sqrt(max(fan.values())) if fan else 1.0


# ---------------------------------------------------------------------------
# query-scene tensor field


def tensor_field_block(q_feats: IrrepsArray, q_pos_scene: np.ndarray,
                       pyramid: ScenePyramid, t_enc: np.ndarray, view,
                       cfg: ModelConfig, name: str, edge_cache=None) -> IrrepsArray:
    """One bipartite query-scene block in the scene frame.

    q_feats: (NQ, dim) scene-frame features; q_pos_scene: (NQ, 3);
    t_enc: (NQ, n_time) encoded flow times.
    """
    spec = q_feats.spec
    if edge_cache is None:
        edge_cache = tensor_field_edges(q_pos_scene, pyramid, cfg)
    nbr, dirs, dist, ok, gathered_idx = edge_cache

    # gather hierarchical features along the pyramid ancestors of each neighbor
    parts = [ad.gather(pyramid.features[0].data, nbr, axis=0)]
    entries = list(pyramid.features[0].spec.entries)
    for lvl, anc_idx in enumerate(gathered_idx, start=1):
        parts.append(ad.gather(pyramid.features[lvl].data, anc_idx, axis=0))
        entries.extend(pyramid.features[lvl].spec.entries)
    stack_spec = IrrepsSpec(tuple(entries))
    stacked = IrrepsArray(stack_spec, ad.concat(parts, axis=-1))

    proj = cfg.proj_spec
    nw = ly.num_equiv_linear_weights(stack_spec, proj)
    scene_f = ly.equiv_linear(stacked, view.get(f"{name}/proj", (nw,), scale=1.0 / np.sqrt(stack_spec.num_channels)), proj)
    scene_f = ly.equiv_film(scene_f, t_enc[:, None, :], view, f"{name}/film", hidden=cfg.mlp_hidden)

    # edge scalars: flow time, distance, and query-scene channel dots
    rbf = ly.encode_scalars(dist[..., None], ly.ScalarEncoding("rbf", cfg.rbf_count, cfg.rcut_level(0)))
    nq = proj.num_channels
    npj = ly.num_equiv_linear_weights(spec, proj)
    q_proj = ly.equiv_linear(q_feats, view.get(f"{name}/qproj", (npj,), scale=1.0 / np.sqrt(spec.num_channels)), proj)
    dots = ly.channel_dot_nodes(IrrepsArray(proj, _expand_mid(q_proj.data)), scene_f)
    t_edge = np.broadcast_to(t_enc[:, None, :], dist.shape + (t_enc.shape[-1],))
    scalars = ad.concat([t_edge, rbf, dots], axis=-1)

    # per-edge SO(2) tensor product conditioned on the scalars
    n_so2 = ly.num_so2_weights(proj, spec)
    wms = ly.mlp(view, f"{name}/so2mlp", scalars, [cfg.mlp_hidden, n_so2])
    wms = ad.scale(wms, 1.0 / np.sqrt(proj.num_channels))
    msgs = ly.so2_tp(scene_f, dirs, wms, spec)
    msgs = _masked(msgs, ok)

    logits = _squeeze_last(ly.mlp(view, f"{name}/att", scalars, [cfg.mlp_hidden, 1]))
    agg = IrrepsArray(spec, ly.attention_aggregate(msgs.data, logits))

    nfw = ly.num_fctp_weights(spec, spec, spec)
    w = view.get(f"{name}/fuse", (nfw,), scale=_fctp_scale(spec, spec, spec))
    fused = ly.fctp(q_feats, agg, w, spec)
    fused = ly.equiv_gate(fused, view, f"{name}/gate")
    return IrrepsArray(spec, ad.add(q_feats.data, fused.data))


def tensor_field_edges(q_pos_scene: np.ndarray, pyramid: ScenePyramid, cfg: ModelConfig):
    """KNN edges and gathered ancestor indices; shared across stacked blocks."""
    k = min(cfg.query_k, len(pyramid.positions[0]))
    nbr = knn(q_pos_scene, pyramid.positions[0], k)
    dirs, dist, ok = _edge_geometry(q_pos_scene, pyramid.positions[0][nbr])
    anc = pyramid.ancestor_table()
    gathered_idx = [a[nbr] for a in anc]
    return nbr, dirs, dist, ok, gathered_idx


# ---------------------------------------------------------------------------
# flow decode


def decode_flow(queries: GripperQueries, view, cfg: ModelConfig, pose_R=None):
    """Readout: body-frame angular rate from pose token 0, translation rate
    from pose token 1 (rotated to the scene frame when pose_R is given),
    joint rates from the scalar channels of the joint tokens."""
    spec = queries.features.spec
    D = queries.dof
    mult1 = spec.mult_of_degree(1)
    mult0 = spec.mult_of_degree(0)

    def deg_block(tok_slice, ell):
        sub = IrrepsArray(spec, _take_tokens(queries.features.data, tok_slice))
        return ly._degree_stack(sub, ell)

    w_w = view.get("decode/omega_mix", (mult1,), scale=1.0 / np.sqrt(mult1))
    w_v = view.get("decode/vel_mix", (mult1,), scale=1.0 / np.sqrt(mult1))
    tok_w = _squeeze_token(deg_block(slice(D, D + 1), 1))  # (B, mult1, 3)
    tok_v = _squeeze_token(deg_block(slice(D + 1, D + 2), 1))
    omega_yzx = ad.einsum2("bcm,c->bm", tok_w, w_w)
    vel_yzx = ad.einsum2("bcm,c->bm", tok_v, w_v)
    # degree-1 components are ordered (y, z, x); map back to xyz
    omega = ad.einsum2("bm,mx->bx", omega_yzx, PERM_YZX)
    vel = ad.einsum2("bm,mx->bx", vel_yzx, PERM_YZX)
    if pose_R is not None:
        vel = ad.einsum2("bij,bj->bi", pose_R, vel)
    if D > 0:
        w_q = view.get("decode/qdot_mix", (mult0,), scale=1.0 / np.sqrt(mult0))
        b_q = view.get("decode/qdot_bias", (1,), init="zeros")
        tok_q = deg_block(slice(0, D), 0)  # (B, D, mult0, 1)
        tok_q = ad.reshape(tok_q, tok_q.shape[:-1])
        qdot = ad.add(ad.einsum2("bdc,c->bd", tok_q, w_q), b_q)
    else:
        B = queries.positions.shape[0]
        qdot = np.zeros((B, 0))
    return omega, vel, qdot


def _take_tokens(data, sl):
    idx = (slice(None), sl, slice(None))
    return ad.getitem(data, idx) if isinstance(data, ad.Node) else data[idx]


def _squeeze_token(block):
    shape = block.shape[:1] + block.shape[2:]
    return ad.reshape(block, shape)


# ---------------------------------------------------------------------------
# full forward


def model_forward(view, cfg: ModelConfig, pyramid: ScenePyramid, tree: KinematicTree,
                  pose_R: np.ndarray, pose_p: np.ndarray, q: np.ndarray, t: np.ndarray):
    """Evaluate the flow field for a batch of grasp states against one scene.

    pose_R (B,3,3), pose_p (B,3), q (B,D), t (B,) -> omega (B,3) body frame,
    v (B,3) scene frame, qdot (B,D).
    """
    pose_R = np.asarray(pose_R, dtype=float)
    pose_p = np.asarray(pose_p, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    B = pose_R.shape[0]
    queries = gripper_queries(tree, q, view, cfg)
    T = queries.count

    # map queries into the scene frame with the current pose estimate
    pos_scene = np.einsum("bij,btj->bti", pose_R, queries.positions) + pose_p[:, None, :]
    f_scene = ly.rotate_irreps(queries.features, pose_R[:, None])

    flat_pos = pos_scene.reshape(B * T, 3)
    flat_f = IrrepsArray(cfg.query_spec, ad.reshape(f_scene.data, (B * T, cfg.query_spec.dim)))
    t_enc = ly.encode_scalars(t[:, None], cfg.time_encoding())
    t_flat = np.repeat(t_enc, T, axis=0)

    cache = tensor_field_edges(flat_pos, pyramid, cfg)
    for blk in range(cfg.n_blocks):
        flat_f = tensor_field_block(flat_f, flat_pos, pyramid, t_flat, view, cfg, f"tf{blk}", cache)

    # back to the gripper frame for decoding
    f_back = IrrepsArray(cfg.query_spec, ad.reshape(flat_f.data, (B, T, cfg.query_spec.dim)))
    f_local = ly.rotate_irreps(f_back, np.swapaxes(pose_R, -1, -2)[:, None])

    feats = f_local
    for layer in range(cfg.decode_layers):
        feats = _graph_message_pass(tree, queries.positions, feats, view, f"decode/graph{layer}", cfg, with_fctp=True)
    out_q = GripperQueries(queries.positions, feats, queries.dof)
    return decode_flow(out_q, view, cfg, pose_R=pose_R)
