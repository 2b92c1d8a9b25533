"""Command-line entry point.

Subcommands: gen-data, train, sample, eval, audit, bench. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure. Every command
is deterministic under a fixed --seed.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import datagen as dg
from . import flow as fl
from . import model as md
from .audit import format_report, run_audit
from .config import ConfigError, RunConfig, load_config
from .kinematics import KinematicTree, load_gripper, shipped_grippers
from .pointcloud import preprocess_cloud

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DataError(RuntimeError):
    pass


def worker_cap(requested: int) -> int:
    cap = os.environ.get("AEQUIGRASP_THREADS")
    if cap is None:
        return requested
    try:
        return max(1, min(requested, int(cap)))
    except ValueError:
        return requested


def _load_tree(cfg: RunConfig, name: str) -> KinematicTree:
    if cfg.gripper_dir:
        return load_gripper(os.path.join(cfg.gripper_dir, f"{name}.txt"))
    return load_gripper(name)


def _trees(cfg: RunConfig) -> dict[str, KinematicTree]:
    trees = {name: _load_tree(cfg, name) for name in cfg.grippers}
    trees["dummy"] = _load_tree(cfg, "dummy")
    return trees


# ---------------------------------------------------------------------------
# gen-data


def _generate_scene(cfg: RunConfig, trees: dict, scene_seed: int) -> dg.SceneEntry:
    rng = np.random.default_rng(scene_seed)
    scene_cfg = dg.SceneConfig(
        min_objects=cfg.min_objects,
        max_objects=cfg.max_objects,
        workspace=cfg.workspace,
        density=cfg.density,
        table=cfg.table,
        table_density=cfg.table_density,
        table_margin=cfg.table_margin,
    )
    cloud, objects = dg.make_scene(rng, scene_cfg)
    grasps = []
    for name in cfg.grippers:
        tree = trees[name]
        if tree.dof == 0:
            continue
        for oid, obj in enumerate(objects):
            if tree.dof == 2 and all(j.jtype == "prismatic" for j in tree.joints):
                cands = dg.antipodal_grasps(obj, tree, rng, cfg.grasps_per_object)
            else:
                cands = dg.contact_optimize(
                    tree, obj, rng, attempts=cfg.contact_attempts,
                    lambda_n=cfg.contact_lambda_n, steps=cfg.contact_steps,
                )
            for rec in cands:
                if dg.validity_oracle(obj, tree, rec.state, scene=cloud):
                    grasps.append(dg.GraspRecord(name, rec.state, True, oid))
    return dg.SceneEntry(cloud, objects, grasps)


def cmd_gen_data(cfg: RunConfig, seed: int) -> int:
    t0 = time.time()
    trees = _trees(cfg)
    seeds = np.random.SeedSequence(seed).spawn(max(cfg.scenes, 1))
    entries = []
    for i in range(cfg.scenes):
        entry = _generate_scene(cfg, trees, int(seeds[i].generate_state(1)[0]))
        entries.append(entry)
        print(f"scene {i}: {len(entry.cloud)} points, {len(entry.objects)} objects, "
              f"{len(entry.grasps)} grasps")
    os.makedirs(os.path.dirname(cfg.dataset) or ".", exist_ok=True)
    names = list(cfg.grippers) + ["dummy"]
    dg.write_dataset(cfg.dataset, entries, names)
    ds = dg.Dataset(cfg.dataset)
    counts = ds.grasp_counts()
    print(f"\nwrote {cfg.dataset}: {ds.scene_count} scenes in {time.time()-t0:.1f}s")
    print(f"{'gripper':10s} {'grasps':>8s}")
    for name in names:
        print(f"{name:10s} {counts.get(name, 0):8d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _dataset(cfg: RunConfig) -> dg.Dataset:
    if not os.path.exists(cfg.dataset):
        raise DataError(f"dataset not found: {cfg.dataset}")
    return dg.Dataset(cfg.dataset)


def _train_indices(cfg: RunConfig, ds: dg.Dataset) -> np.ndarray:
    n_train = ds.scene_count - cfg.eval_scenes
    if n_train < 1:
        raise DataError("no training scenes left after the eval hold-out")
    return np.arange(n_train)


def eval_indices(cfg: RunConfig, ds: dg.Dataset) -> np.ndarray:
    return np.arange(ds.scene_count - cfg.eval_scenes, ds.scene_count)


def save_model_checkpoint(path, ptape: ad.ParameterTape, opt: ad.AdamState, step: int) -> None:
    blocks = dict(ptape.params)
    for k, v in opt.m.items():
        blocks[f"opt/m/{k}"] = v
    for k, v in opt.v.items():
        blocks[f"opt/v/{k}"] = v
    blocks["meta/step"] = np.array([float(step)])
    ad.save_checkpoint(path, blocks)


def load_model_checkpoint(path, cfg: RunConfig):
    blocks = ad.load_checkpoint(path)
    ptape = ad.ParameterTape(seed=cfg.seed)
    opt = ad.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    step = 0
    for name, arr in blocks.items():
        if name == "meta/step":
            step = int(arr[0])
        elif name.startswith("opt/m/"):
            opt.m[name[6:]] = arr
        elif name.startswith("opt/v/"):
            opt.v[name[6:]] = arr
        else:
            ptape.params[name] = arr
    opt.step = step
    return ptape, opt, step


def cmd_train(cfg: RunConfig, seed: int, checkpoint: str | None) -> int:
    ds = _dataset(cfg)
    trees = _trees(cfg)
    mcfg = cfg.model_config()
    fcfg = cfg.flow_config()
    train_idx = _train_indices(cfg, ds)

    if checkpoint:
        ptape, opt, start = load_model_checkpoint(checkpoint, cfg)
        print(f"resumed from {checkpoint} at step {start}")
    else:
        ptape = ad.ParameterTape(seed=cfg.seed)
        opt = ad.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        start = 0

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    log_path = os.path.join(cfg.checkpoint_dir, "train_log.csv")
    ckpt_path = os.path.join(cfg.checkpoint_dir, "model.ckpt")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7A41)))
    # skip ahead so a resumed run continues the same batch stream
    for _ in range(start):
        _ = rng.integers(2**31)

    mode = "a" if start else "w"
    with open(log_path, mode, newline="") as logf:
        writer = csv.writer(logf)
        if not start:
            writer.writerow(["step", "loss", "seconds"])
        t0 = time.time()
        for step in range(start, cfg.steps):
            batch_rng = np.random.default_rng(int(rng.integers(2**31)))
            batch = fl.make_training_batch(ds, trees, batch_rng, fcfg,
                                           cfg.scenes_per_batch, cfg.grasps_per_batch,
                                           scene_indices=train_idx,
                                           voxel_cell=mcfg.voxel_cell,
                                           cardinality=mcfg.level_sizes[0])
            loss, grads = ad.value_and_grad(fl.fm_loss, ptape, mcfg, fcfg, trees, batch)
            if not np.isfinite(loss):
                save_model_checkpoint(ckpt_path + ".abort", ptape, opt, step)
                print(f"non-finite loss at step {step}; aborting", file=sys.stderr)
                return EXIT_NUMERIC
            ptape.params, opt = ad.adam_step(ptape.params, grads, opt)
            writer.writerow([step, f"{loss:.8f}", f"{time.time()-t0:.2f}"])
            if (step + 1) % 50 == 0 or step == start:
                print(f"step {step}: loss {loss:.5f} ({time.time()-t0:.0f}s)")
                logf.flush()
            if (step + 1) % cfg.checkpoint_every == 0:
                save_model_checkpoint(ckpt_path, ptape, opt, step + 1)
    save_model_checkpoint(ckpt_path, ptape, opt, cfg.steps)
    print(f"saved {ckpt_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample / eval


def sample_scene(cfg: RunConfig, ptape: ad.ParameterTape, ds: dg.Dataset, scene_idx: int,
                 gripper: str, count: int, seed: int, guidance: float, filter_collisions: bool):
    """Sample grasps for one scene; returns (records, n_collision_free, n_valid)."""
    mcfg = cfg.model_config()
    fcfg = cfg.flow_config()
    tree = _load_tree(cfg, gripper)
    dummy = _load_tree(cfg, "dummy")
    raw = ds.scene_cloud(scene_idx)
    objects = ds.objects(scene_idx)
    view = ad.ParamView(ptape)
    master = np.random.SeedSequence((seed, scene_idx))
    pre_child, fps_child, prior_child = master.spawn(3)
    cloud = preprocess_cloud(raw, mcfg.voxel_cell, mcfg.level_sizes[0],
                             seed=int(pre_child.generate_state(1)[0]))
    pyramid = md.scene_encode(cloud, view, mcfg, seed=int(fps_child.generate_state(1)[0]))
    centroid = pyramid.positions[0].mean(axis=0)
    priors = [
        fl.sample_prior(np.random.default_rng(s), tree, centroid, fcfg.sigma_p)
        for s in prior_child.spawn(count)
    ]
    states = fl.integrate(view, mcfg, fcfg, pyramid, tree, np.random.default_rng(0),
                          guidance=guidance, dummy_tree=dummy, x0=priors)
    records = []
    n_free = n_valid = 0
    for st in states:
        free = dg.collision_filter(cloud, tree, st)
        valid = False
        if free:
            n_free += 1
            valid = any(dg.validity_oracle(obj, tree, st, scene=None) for obj in objects)
            n_valid += valid
        if free or not filter_collisions:
            records.append(dg.GraspRecord(gripper, st, bool(valid), -1))
    return records, n_free, n_valid, dg.SceneEntry(cloud, objects, records)


def cmd_sample(cfg: RunConfig, seed: int, checkpoint: str, scene_idx: int, gripper: str,
               count: int, guidance: float, no_filter: bool, out_path: str | None) -> int:
    if not os.path.exists(checkpoint):
        raise DataError(f"checkpoint not found: {checkpoint}")
    known = set(cfg.grippers) | set(shipped_grippers())
    if gripper not in known:
        raise DataError(f"unknown gripper {gripper!r}")
    ds = _dataset(cfg)
    if not 0 <= scene_idx < ds.scene_count:
        raise DataError(f"scene index {scene_idx} out of range (dataset has {ds.scene_count})")
    ptape, _, _ = load_model_checkpoint(checkpoint, cfg)
    t0 = time.time()
    records, n_free, n_valid, entry = sample_scene(
        cfg, ptape, ds, scene_idx, gripper, count, seed, guidance, not no_filter)
    dt = time.time() - t0
    out_path = out_path or os.path.join(cfg.checkpoint_dir, f"samples_scene{scene_idx}_{gripper}.aeqg")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    dg.write_dataset(out_path, [entry], list(cfg.grippers) + ["dummy", gripper])
    print(f"sampled {count} grasps for {gripper} on scene {scene_idx} in {dt:.1f}s")
    print(f"collision-free: {n_free}/{count} ({100.0*n_free/count:.1f}%)")
    denom = max(n_free, 1)
    print(f"validity-oracle rate (after filtering): {n_valid}/{n_free} ({100.0*n_valid/denom:.1f}%)")
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, seed: int, checkpoint: str, count: int, out_path: str | None) -> int:
    if not os.path.exists(checkpoint):
        raise DataError(f"checkpoint not found: {checkpoint}")
    ds = _dataset(cfg)
    idx = eval_indices(cfg, ds)
    if len(idx) == 0:
        raise DataError("config holds out zero eval scenes")
    ptape, _, _ = load_model_checkpoint(checkpoint, cfg)
    rows = []
    for gripper in cfg.grippers:
        tot = free = valid = 0
        for si in idx:
            _, n_free, n_valid, _ = sample_scene(cfg, ptape, ds, int(si), gripper,
                                                 count, seed, cfg.guidance, True)
            tot += count
            free += n_free
            valid += n_valid
        rows.append({
            "gripper": gripper,
            "n": tot,
            "collision_free_pct": round(100.0 * free / max(tot, 1), 2),
            "validity_pct": round(100.0 * valid / max(free, 1), 2),
        })
        print(f"{gripper}: sampled {tot}, collision-free {free} "
              f"({rows[-1]['collision_free_pct']}%), valid {valid} ({rows[-1]['validity_pct']}%)")
    out_path = out_path or os.path.join(cfg.checkpoint_dir, "eval_metrics.csv")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["gripper", "n", "validity_pct", "collision_free_pct"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"wrote {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# audit / bench


def cmd_audit(trials: int, seed: int) -> int:
    results = run_audit(trials=trials, seed=seed)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_bench(cfg: RunConfig, seed: int, checkpoint: str | None) -> int:
    import timeit

    from . import layers as ly
    from .irreps import IrrepsArray, parse_irreps

    rng = np.random.default_rng(seed)
    rows = []
    # SO(2) tensor product cost scaling in the degree ceiling
    for lmax, spec_text in ((1, "16x0+8x1"), (2, "16x0+8x1+4x2")):
        spec = parse_irreps(spec_text)
        x = IrrepsArray(spec, rng.normal(size=(4096, spec.dim)))
        d = rng.normal(size=(4096, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        w = rng.normal(size=ly.num_so2_weights(spec, spec))
        dt = min(timeit.repeat(lambda: ly.so2_tp(x, d, w, spec), number=3, repeat=3)) / 3
        rows.append((f"so2_tp_lmax{lmax}", dt))
        print(f"so2_tp lmax={lmax}: {dt*1000:.1f} ms / 4096 edges")
    ratio = rows[1][1] / rows[0][1]
    print(f"lmax 2 vs 1 ratio: {ratio:.2f} (linear-cost target <= 3)")
    if checkpoint and os.path.exists(cfg.dataset):
        ds = _dataset(cfg)
        ptape, _, _ = load_model_checkpoint(checkpoint, cfg)
        t0 = time.time()
        sample_scene(cfg, ptape, ds, 0, cfg.grippers[0], cfg.count, seed, 0.0, True)
        print(f"sampling {cfg.count} grasps ({cfg.grippers[0]}): {time.time()-t0:.1f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aequigrasp",
                                description="equivariant flow-matching grasp synthesis")
    p.add_argument("command", choices=["gen-data", "train", "sample", "eval", "audit", "bench"])
    p.add_argument("--config", default=None, help="run config file")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--gripper", default=None)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--trials", type=int, default=20)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "audit":
            return cmd_audit(args.trials, args.seed if args.seed is not None else 0)
        if args.config is None:
            print("error: --config is required for this command", file=sys.stderr)
            return EXIT_USAGE
        if not os.path.exists(args.config):
            print(f"error: config file not found: {args.config}", file=sys.stderr)
            return EXIT_USAGE
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.seed
        if args.command == "gen-data":
            return cmd_gen_data(cfg, seed)
        if args.command == "train":
            return cmd_train(cfg, seed, args.checkpoint)
        if args.command == "sample":
            if not args.checkpoint:
                print("error: sample requires --checkpoint", file=sys.stderr)
                return EXIT_USAGE
            gripper = args.gripper or cfg.grippers[0]
            count = args.count if args.count is not None else cfg.count
            guidance = args.guidance if args.guidance is not None else cfg.guidance
            return cmd_sample(cfg, seed, args.checkpoint, args.scene, gripper,
                              count, guidance, args.no_filter, args.out)
        if args.command == "eval":
            if not args.checkpoint:
                print("error: eval requires --checkpoint", file=sys.stderr)
                return EXIT_USAGE
            count = args.count if args.count is not None else cfg.count
            return cmd_eval(cfg, seed, args.checkpoint, count, args.out)
        if args.command == "bench":
            return cmd_bench(cfg, seed, args.checkpoint)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
