"""Two-phase overfit: fresh-sample field learning, then fixed-set fine-tune."""
import numpy as np, sys, time
sys.path.insert(0, "src")
from aequigrasp import autodiff as ad, datagen as dg, flow as fl, model as md, kinematics as kin
from aequigrasp.liegroup import Pose, rotation_between
from aequigrasp.irreps import parse_irreps
from aequigrasp.pointcloud import PointCloud, preprocess_cloud

phase1 = int(sys.argv[1]) if len(sys.argv) > 1 else 700
phase2 = int(sys.argv[2]) if len(sys.argv) > 2 else 1300
lr2 = float(sys.argv[3]) if len(sys.argv) > 3 else 5e-4

rng = np.random.default_rng(0)
box = dg.ToyObject("box", [0.05, 0.04, 0.045], Pose(np.eye(3), [0.0, 0.0, 0.0225]))
pts, _ = dg.sample_surface(box, rng, 800)
tree = kin.load_gripper("src/aequigrasp/grippers/jaw2.txt")
x1 = dg.antipodal_grasps(box, tree, rng, 1)[0].state
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


t0 = time.time()
step_reached = None
loss = None
for step in range(phase1):
    opt.lr = 3e-3 * (0.2 ** (step / phase1))
    batch = make_batch(step)
    loss, grads = ad.value_and_grad(fl.fm_loss, ptape, cfg, fcfg, {"jaw2": tree}, batch)
    ptape.params, opt = ad.adam_step(ptape.params, grads, opt)
    if step % 200 == 0:
        print(f"phase1 step {step}: loss {loss:.4f} ({time.time()-t0:.0f}s)", flush=True)

fixed = make_batch(777_777, B=192)
for step in range(phase2):
    opt.lr = lr2 * (0.05 ** (step / phase2))
    loss, grads = ad.value_and_grad(fl.fm_loss, ptape, cfg, fcfg, {"jaw2": tree}, fixed)
    ptape.params, opt = ad.adam_step(ptape.params, grads, opt)
    if step % 200 == 0:
        print(f"phase2 step {step}: loss {loss:.6f} ({time.time()-t0:.0f}s)", flush=True)
    if loss < 1e-4:
        step_reached = phase1 + step
        break
print(f"END loss {loss:.2e} total steps {phase1 + (step_reached - phase1 if step_reached else phase2)} reached={step_reached} ({time.time()-t0:.0f}s)", flush=True)

view = ad.ParamView(ptape)
pyr = md.scene_encode(cloud, view, cfg, seed=0)
out = fl.integrate(view, cfg, fcfg, pyr, tree, np.random.default_rng(5), steps=50, count=8)
worst = (0, 0, 0)
for st in out:
    perr = np.linalg.norm(st.pose.p - x1.pose.p) * 1000
    rerr = np.degrees(rotation_between(st.pose.R, x1.pose.R))
    qerr = np.abs(st.q - x1.q).max()
    worst = (max(worst[0], perr), max(worst[1], rerr), max(worst[2], qerr))
    print(f"  pose {perr:.1f}mm rot {rerr:.2f}deg q {qerr:.4f}", flush=True)
print(f"WORST pose {worst[0]:.1f}mm rot {worst[1]:.2f}deg q {worst[2]:.4f}", flush=True)
