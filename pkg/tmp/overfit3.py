import numpy as np, sys, time
sys.path.insert(0, "src")
from aequigrasp import autodiff as ad, datagen as dg, flow as fl, model as md, kinematics as kin
from aequigrasp.liegroup import Pose, rotation_between
from aequigrasp.irreps import parse_irreps
from aequigrasp.pointcloud import PointCloud, preprocess_cloud

variant = sys.argv[1]
steps_total = int(sys.argv[2]) if len(sys.argv) > 2 else 600
rng = np.random.default_rng(0)
box = dg.ToyObject("box", [0.05, 0.04, 0.045], Pose(np.eye(3), [0.0, 0.0, 0.0225]))
pts, _ = dg.sample_surface(box, rng, 800)
tree = kin.load_gripper("src/aequigrasp/grippers/jaw2.txt")
x1 = dg.antipodal_grasps(box, tree, rng, 1)[0].state

if variant == "A":
    cfg = md.ModelConfig(scene_spec=parse_irreps("8x0+4x1+2x2"), query_spec=parse_irreps("8x0+4x1+2x2"),
        level_sizes=(128, 32), knn_k=8, pool_k=6, query_k=6, mp_layers=1, n_blocks=2,
        decode_layers=1, rbf_count=8, time_count=12, mlp_hidden=24, rbf_rcut=0.5)
elif variant == "B":
    cfg = md.ModelConfig(scene_spec=parse_irreps("8x0+8x1+4x2"), query_spec=parse_irreps("8x0+8x1+4x2"),
        level_sizes=(128, 32), knn_k=8, pool_k=6, query_k=12, mp_layers=1, n_blocks=2,
        decode_layers=1, rbf_count=8, time_count=12, mlp_hidden=24, rbf_rcut=0.5)
elif variant == "C":
    cfg = md.ModelConfig(scene_spec=parse_irreps("8x0+8x1+4x2"), query_spec=parse_irreps("8x0+8x1+4x2"),
        level_sizes=(128, 32), knn_k=8, pool_k=6, query_k=12, mp_layers=1, n_blocks=2,
        decode_layers=1, rbf_count=8, time_count=12, mlp_hidden=24, rbf_rcut=0.12)
cloud = preprocess_cloud(PointCloud(pts), 0.001, 128, seed=0)
fcfg = fl.FlowConfig()
ptape = ad.ParameterTape(seed=1)
opt = ad.AdamState(lr=3e-3)


def make_batch(step, B=64):
    srng = np.random.default_rng(10_000 + step)
    t_s, R_s, p_s, q_s, to, tv, tq = [], [], [], [], [], [], []
    for _ in range(B):
        while True:
            x0 = fl.sample_prior(srng, tree, cloud.positions.mean(axis=0), fcfg.sigma_p)
            t = float(srng.uniform())
            try:
                x_t, (om, v, qd) = fl.conditional_path(x0, x1, t)
                break
            except fl.GeodesicAmbiguityError:
                continue
        t_s.append(t); R_s.append(x_t.pose.R); p_s.append(x_t.pose.p); q_s.append(x_t.q)
        to.append(om); tv.append(v); tq.append(qd)
    return fl.FlowBatch([fl.SceneGroup(cloud, 0, "jaw2", np.array(t_s), np.stack(R_s),
        np.stack(p_s), np.stack(q_s), np.stack(to), np.stack(tv), np.stack(tq))])


def decomp(view, batch):
    g = batch.groups[0]
    pyr = md.scene_encode(g.cloud, view, cfg, seed=g.fps_seed)
    om, v, qd = md.model_forward(view, cfg, pyr, tree, g.pose_R, g.pose_p, g.q, g.t)
    om, v, qd = (np.asarray(ad.value_of(z)) for z in (om, v, qd))
    w = 1 + 2 * g.t
    return ((w * ((om - g.target_omega) ** 2).sum(-1)).mean(),
            (w * ((v - g.target_v) ** 2).sum(-1)).mean() * 10,
            (w * ((qd - g.target_qdot) ** 2).sum(-1)).mean() / 2)


t0 = time.time()
reached = None
fixed_batch = make_batch(0, B=192) if len(sys.argv) > 3 and sys.argv[3] == "fixed" else None
for step in range(steps_total):
    opt.lr = 3e-3 * (0.1 ** (step / max(steps_total, 1)))
    batch = fixed_batch if fixed_batch is not None else make_batch(step)
    loss, grads = ad.value_and_grad(fl.fm_loss, ptape, cfg, fcfg, {"jaw2": tree}, batch)
    ptape.params, opt = ad.adam_step(ptape.params, grads, opt)
    if step % 150 == 0:
        e = decomp(ad.ParamView(ptape), make_batch(99999))
        print(f"[{variant}] step {step}: loss {loss:.4f} om={e[0]:.4f} v={e[1]:.4f} q={e[2]:.5f} ({time.time()-t0:.0f}s)", flush=True)
    if loss < 1e-4:
        reached = step
        break
e = decomp(ad.ParamView(ptape), make_batch(99999))
print(f"[{variant}] final: om={e[0]:.5f} v={e[1]:.5f} q={e[2]:.5f} reached={reached} ({time.time()-t0:.0f}s)", flush=True)
view = ad.ParamView(ptape)
pyr = md.scene_encode(cloud, view, cfg, seed=0)
out = fl.integrate(view, cfg, fcfg, pyr, tree, np.random.default_rng(5), steps=50, count=8)
for st in out:
    perr = np.linalg.norm(st.pose.p - x1.pose.p) * 1000
    rerr = np.degrees(rotation_between(st.pose.R, x1.pose.R))
    qerr = np.abs(st.q - x1.q).max()
    print(f"  pose {perr:.1f}mm rot {rerr:.2f}deg q {qerr:.4f}", flush=True)
