import numpy as np, sys, time, cProfile, pstats
sys.path.insert(0, "src")
from aequigrasp import autodiff as ad, datagen as dg, flow as fl, model as md, kinematics as kin
from aequigrasp.liegroup import Pose
from aequigrasp.irreps import parse_irreps
from aequigrasp.pointcloud import PointCloud, preprocess_cloud

rng = np.random.default_rng(0)
box = dg.ToyObject("box", [0.05,0.04,0.045], Pose(np.eye(3), [0.0,0.0,0.0225]))
pts, _ = dg.sample_surface(box, rng, 800)
tree = kin.load_gripper("src/aequigrasp/grippers/jaw2.txt")
x1 = dg.antipodal_grasps(box, tree, rng, 1)[0].state
cfg = md.ModelConfig(scene_spec=parse_irreps("8x0+4x1+2x2"), query_spec=parse_irreps("8x0+4x1+2x2"),
    level_sizes=(128, 32), knn_k=8, pool_k=6, query_k=6, mp_layers=1, n_blocks=2,
    decode_layers=1, rbf_count=6, time_count=12, mlp_hidden=24)
cloud = preprocess_cloud(PointCloud(pts), 0.001, 128, seed=0)
fcfg = fl.FlowConfig()
ptape = ad.ParameterTape(seed=1)

srng = np.random.default_rng(10_000)
t_s, R_s, p_s, q_s, to, tv, tq = [], [], [], [], [], [], []
for _ in range(48):
    while True:
        x0 = fl.sample_prior(srng, tree, cloud.positions.mean(axis=0), fcfg.sigma_p)
        t = float(srng.uniform())
        try:
            x_t, (om, v, qd) = fl.conditional_path(x0, x1, t); break
        except fl.GeodesicAmbiguityError: continue
    t_s.append(t); R_s.append(x_t.pose.R); p_s.append(x_t.pose.p); q_s.append(x_t.q)
    to.append(om); tv.append(v); tq.append(qd)
batch = fl.FlowBatch([fl.SceneGroup(cloud, 0, "jaw2", np.array(t_s), np.stack(R_s),
    np.stack(p_s), np.stack(q_s), np.stack(to), np.stack(tv), np.stack(tq))])

t0=time.time()
for _ in range(3):
    loss, grads = ad.value_and_grad(fl.fm_loss, ptape, cfg, fcfg, {"jaw2": tree}, batch)
print("per step:", (time.time()-t0)/3)
prof = cProfile.Profile()
prof.enable()
loss, grads = ad.value_and_grad(fl.fm_loss, ptape, cfg, fcfg, {"jaw2": tree}, batch)
prof.disable()
stats = pstats.Stats(prof)
stats.sort_stats("tottime").print_stats(14)
