"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The verdict lines are printed in the terminal summary (see conftest.py) and
also emitted on stdout by each test.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from oracles import (
    conv3d_loops,
    devoxelize_nearest_oracle,
    devoxelize_trilinear_oracle,
    knn_sort,
    voxelize_bruteforce,
)
from pvconv import layers as L
from pvconv.bench import (
    AccessCounter,
    BenchReport,
    count_knn_path,
    count_voxel_path,
    knn_bruteforce,
    sweep_distinguishable,
)
from pvconv.cli import main, synthetic_splits
from pvconv.cloud import NormalizedCloud, PointCloud, SyntheticSpec, generate_synthetic, normalize
from pvconv.gradcheck import OP_GROUPS, run_battery
from pvconv.model import build_pvcnn, pvcnn_forward, toy_config
from pvconv.train import TrainConfig, evaluate, train
from pvconv.voxel import (
    VoxelGrid,
    devoxelize_nearest,
    devoxelize_nearest_backward,
    devoxelize_trilinear,
    devoxelize_trilinear_backward,
    trilinear_weights,
    voxelize,
    voxelize_backward,
)

TOY = {"generator": "two_part_shape", "n": 512, "train_clouds": 64, "val_clouds": 16, "epochs": 30}
TRAIN_LR = 3e-3
ABLATION_SEEDS = (1, 2, 3, 4, 5)


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    assert passed, line


def nc_of(coords, feats):
    return NormalizedCloud(np.asarray(coords, float), np.asarray(feats, float), np.zeros(3), 1.0)


# -- 1 ------------------------------------------------------------------------------------

def test_c01_gradient_battery():
    start = time.perf_counter()
    results = run_battery(tol=1e-4, eps=1e-5)
    elapsed = time.perf_counter() - start
    reports = [r for group in results.values() for r in group]
    failing = sorted({g for g, reps in results.items() if not all(r.passed for r in reps)})
    worst = max(r.max_rel_err for r in reports)
    passed = (set(results) == set(OP_GROUPS) and len(OP_GROUPS) == 10 and not failing
              and all(r.epsilon == 1e-5 for r in reports) and elapsed < 60)
    report(1, "gradient battery", passed,
           f"{len(results)} groups / {len(reports)} checks, failing={failing}, "
           f"max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f} s (limit 60 s)")


# -- 2 ------------------------------------------------------------------------------------

def test_c02_conservation():
    rng = np.random.default_rng(2)
    worst, cases = 0.0, 0
    for i in range(100):
        n = (1, 2, 17, 256, 2048)[i % 5]
        r = (1, 2, 7, 16)[(i // 5) % 4]
        nc = nc_of(rng.random((n, 3)), rng.standard_normal((n, 3)))
        grid = voxelize(nc, r)
        lhs = (grid.counts[..., None] * grid.values).reshape(-1, 3).sum(axis=0)
        worst = max(worst, float(np.max(np.abs(lhs - nc.features.sum(axis=0)))))
        cases += 1
    report(2, "voxelization conservation", worst <= 1e-9,
           f"{cases} clouds, max per-channel |sum counts*values - sum features| = {worst:.2e} (tol 1e-9)")


# -- 3 ------------------------------------------------------------------------------------

def test_c03_partition_of_unity():
    rng = np.random.default_rng(3)
    pts = rng.random((10_000, 3))
    # force exact boundary values on every axis for a slice of the points
    for axis in range(3):
        pts[axis * 1000:axis * 1000 + 500, axis] = 0.0
        pts[axis * 1000 + 500:(axis + 1) * 1000, axis] = 1.0
    pts[9000:9004] = [[0, 0, 0], [1, 1, 1], [0, 1, 0], [1, 0, 1]]
    resolutions = (1, 2, 3, 8, 16, 32)
    worst, bad_range = 0.0, 0
    for i, p in enumerate(pts):
        w = trilinear_weights(p, resolutions[i % len(resolutions)]).weights
        worst = max(worst, abs(float(w.sum()) - 1.0))
        bad_range += int(np.any((w < 0) | (w > 1)))
    report(3, "trilinear partition of unity", worst <= 1e-12 and bad_range == 0,
           f"10000 points incl. 0.0/1.0 boundaries, max |sum w - 1| = {worst:.2e} (tol 1e-12), "
           f"weights outside [0,1]: {bad_range}")


# -- 4 ------------------------------------------------------------------------------------

def test_c04_adjointness():
    rng = np.random.default_rng(4)
    worst = {"voxelize": 0.0, "devoxelize_trilinear": 0.0, "devoxelize_nearest": 0.0}
    for _ in range(30):
        n, c, r = int(rng.integers(1, 200)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        coords = rng.random((n, 3))
        x = rng.standard_normal((n, c))
        nc = nc_of(coords, x)
        grid = voxelize(nc, r)
        y = rng.standard_normal((r, r, r, c))
        err = abs(np.sum(grid.values * y) - np.sum(x * voxelize_backward(y, nc, grid)))
        worst["voxelize"] = max(worst["voxelize"], err)

        v = rng.standard_normal((r, r, r, c))
        g = VoxelGrid(r, v, grid.counts, grid.point_index)
        yp = rng.standard_normal((n, c))
        for name, fwd, bwd in (("devoxelize_trilinear", devoxelize_trilinear, devoxelize_trilinear_backward),
                               ("devoxelize_nearest", devoxelize_nearest, devoxelize_nearest_backward)):
            err = abs(np.sum(fwd(g, nc) * yp) - np.sum(v * bwd(yp, g, nc)))
            worst[name] = max(worst[name], err)
    passed = all(e <= 1e-9 for e in worst.values())
    report(4, "adjointness <Ax,y> == <x,A^T y>", passed,
           "30 instances, " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-9)")


# -- 5 ------------------------------------------------------------------------------------

def test_c05_bruteforce_equivalence():
    rng = np.random.default_rng(5)
    worst = {"voxelize": 0.0, "devox_trilinear": 0.0, "devox_nearest": 0.0, "conv3d": 0.0}
    count_mismatch, knn_mismatch, instances = 0, 0, 20
    for _ in range(instances):
        n, c, r = int(rng.integers(1, 40)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        nc = nc_of(rng.random((n, 3)), rng.standard_normal((n, c)))
        grid = voxelize(nc, r)
        values, counts = voxelize_bruteforce(nc.coords_hat, nc.features, r)
        count_mismatch += int(not np.array_equal(grid.counts, counts))
        worst["voxelize"] = max(worst["voxelize"], float(np.max(np.abs(grid.values - values))))

        table = rng.standard_normal((r, r, r, c))
        g = VoxelGrid(r, table, grid.counts, grid.point_index)
        worst["devox_trilinear"] = max(worst["devox_trilinear"], float(np.max(np.abs(
            devoxelize_trilinear(g, nc) - devoxelize_trilinear_oracle(table, nc.coords_hat, r)))))
        worst["devox_nearest"] = max(worst["devox_nearest"], float(np.max(np.abs(
            devoxelize_nearest(g, nc) - devoxelize_nearest_oracle(table, nc.coords_hat, r)))))

        rc = int(rng.integers(2, 4))
        x = rng.standard_normal((1, c, rc, rc, rc))
        p = L.Conv3dParams(rng.standard_normal((2, c, 3, 3, 3)), rng.standard_normal(2))
        worst["conv3d"] = max(worst["conv3d"], float(np.max(np.abs(
            L.conv3d(x, p) - conv3d_loops(x, p.weight, p.bias)))))

        k = int(rng.integers(1, n + 1))
        knn_mismatch += int(not np.array_equal(knn_bruteforce(nc, k).neighbors,
                                                knn_sort(nc.coords_hat.tolist(), k)))
    passed = count_mismatch == 0 and knn_mismatch == 0 and all(v <= 1e-10 for v in worst.values())
    report(5, "brute-force oracle equivalence", passed,
           f"{instances} instances, count mismatches {count_mismatch}, knn mismatches {knn_mismatch}, "
           + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-10)")


# -- 6 ------------------------------------------------------------------------------------

def test_c06_access_count_ratios():
    n = 2048
    nc = normalize(generate_synthetic(SyntheticSpec("uniform_cube", n, 0)))
    vox = count_voxel_path(nc, 16, 4, AccessCounter("voxel"))
    ok, parts = True, []
    for k in (16, 32, 64):
        knn = count_knn_path(nc, k, 4, AccessCounter("knn"))
        per_neighbor = Fraction(knn["random_gathers"], vox["random_scatters"])
        total = Fraction(knn["random_gathers"], vox["random_gathers"] + vox["random_scatters"])
        ok &= (knn["random_gathers"] == k * n and vox["random_scatters"] == n
               and vox["random_gathers"] == 8 * n and per_neighbor == k and total == Fraction(k, 9))
        parts.append(f"k={k}: {knn['random_gathers']}/{vox['random_scatters']} = {per_neighbor}, "
                     f"total {knn['random_gathers']}/{vox['random_gathers'] + vox['random_scatters']} = {total}")
    report(6, "indexed-access ratios (counts, not wall time)", ok, "; ".join(parts))


# -- 7 ------------------------------------------------------------------------------------

def test_c07_distinguishable_sweep():
    nc = normalize(generate_synthetic(SyntheticSpec("uniform_cube", 2048, 42)))
    res = [2, 4, 8, 16, 32, 64, 128, 256]
    rows = sweep_distinguishable(nc, res).rows
    fractions = [row["fraction"] for row in rows]
    mem_ratios = [rows[i + 1]["bytes_estimated"] / rows[i]["bytes_estimated"] for i in range(len(rows) - 1)]
    monotone = all(b >= a for a, b in zip(fractions, fractions[1:]))
    passed = monotone and fractions[-1] >= 0.99 and all(m == 8.0 for m in mem_ratios)
    report(7, "distinguishable-points sweep", passed,
           f"fractions {[round(f, 4) for f in fractions]}, monotone={monotone}, "
           f"memory ratios {sorted(set(mem_ratios))}")


# -- 8, 9, 10 -----------------------------------------------------------------------------

def toy_run(seed, devox_mode="trilinear", voxel_convs=2):
    train_set, val_set = synthetic_splits(TOY["generator"], TOY["n"], TOY["train_clouds"],
                                          TOY["val_clouds"], seed)
    start = time.perf_counter()
    tc = TrainConfig(epochs=TOY["epochs"], batch_size=8, lr=TRAIN_LR, seed=seed,
                     devox_mode=devox_mode, voxel_convs_per_block=voxel_convs)
    result = train(toy_config(), train_set, tc)
    iou, acc = evaluate(result.params, result.cfg, val_set)
    return {"miou": iou.mean_miou, "acc": acc, "seconds": time.perf_counter() - start}


@pytest.fixture(scope="module")
def ablation_runs():
    runs = {}
    for seed in ABLATION_SEEDS:
        for variant, (mode, convs) in {"trilinear": ("trilinear", 2), "nearest": ("nearest", 2),
                                       "L1": ("trilinear", 1)}.items():
            runs[(variant, seed)] = toy_run(seed, mode, convs)
    return runs


def test_c08_toy_training(ablation_runs):
    run = ablation_runs[("trilinear", 1)]
    passed = run["acc"] >= 0.95 and run["miou"] >= 0.85 and run["seconds"] < 300
    report(8, "toy end-to-end training (seed 1)", passed,
           f"val point accuracy {run['acc']:.4f} (>= 0.95), mean mIoU {run['miou']:.4f} (>= 0.85), "
           f"{run['seconds']:.0f} s (< 300 s)")


def _mean(runs, variant):
    return float(np.mean([runs[(variant, s)]["miou"] for s in ABLATION_SEEDS]))


def test_c09_trilinear_vs_nearest(ablation_runs):
    tri, near = _mean(ablation_runs, "trilinear"), _mean(ablation_runs, "nearest")
    report(9, "ablation: trilinear >= nearest devoxelization", tri >= near,
           f"mean val mIoU over {len(ABLATION_SEEDS)} seeds: trilinear {tri:.4f}, nearest {near:.4f}, "
           f"gap {tri - near:+.4f}")


def test_c10_two_vs_one_voxel_conv(ablation_runs):
    two, one = _mean(ablation_runs, "trilinear"), _mean(ablation_runs, "L1")
    report(10, "ablation: L=2 >= L=1 voxel convolutions", two >= one,
           f"mean val mIoU over {len(ABLATION_SEEDS)} seeds: L=2 {two:.4f}, L=1 {one:.4f}, "
           f"gap {two - one:+.4f}")


# -- 11 -----------------------------------------------------------------------------------

def test_c11_permutation_and_duplicates():
    cfg = toy_config()
    params = build_pvcnn(cfg, 11)
    rng = np.random.default_rng(11)
    for name, arr in params.trainable().items():
        if name.endswith(("bias", "beta")):
            arr[...] = rng.uniform(-0.3, 0.3, arr.shape)
    for _, bn in params.batch_norms():
        bn.running_mean[...] = rng.uniform(-0.2, 0.2, bn.running_mean.shape)
        bn.running_var[...] = rng.uniform(0.5, 2.0, bn.running_var.shape)
    params.set_mode("eval")
    worst_perm = worst_dup = 0.0
    for i in range(10):
        pc = generate_synthetic(SyntheticSpec("two_part_shape", int(rng.integers(64, 512)), 100 + i))
        base = pvcnn_forward(params, cfg, pc)
        order = rng.permutation(pc.n)
        worst_perm = max(worst_perm, float(np.max(np.abs(pvcnn_forward(params, cfg, pc.permuted(order))
                                                         - base[order]))))
        dup = PointCloud(np.concatenate([pc.coords, pc.coords]), np.concatenate([pc.features, pc.features]))
        both = pvcnn_forward(params, cfg, dup)
        worst_dup = max(worst_dup, float(np.max(np.abs(both[:pc.n] - base))),
                        float(np.max(np.abs(both[pc.n:] - base))))
    assert base.dtype == np.float32
    report(11, "permutation equivariance and duplicate consistency", worst_perm <= 1e-6 and worst_dup <= 1e-6,
           f"10 clouds, float32 eval mode, max permutation diff {worst_perm:.1e}, "
           f"max duplicate diff {worst_dup:.1e} (tol 1e-6)")


# -- 12 -----------------------------------------------------------------------------------

TIMED = {"bench.csv", "bench.json", "distinguishable.csv"}


def _artifacts(out):
    files = {}
    for path in sorted(p for p in out.rglob("*") if p.is_file()):
        rel = str(path.relative_to(out))
        if path.name in TIMED:
            text = path.read_text()
            rep = BenchReport.from_json(text) if path.suffix == ".json" else BenchReport.from_csv(text)
            files[rel] = rep.without_timings().to_json()
        else:
            files[rel] = path.read_bytes()
    return files


def test_c12_determinism(tmp_path):
    out = tmp_path / "out"
    data = ["--synthetic", "two_part_shape", "--n", "64", "--train-clouds", "4", "--val-clouds", "2",
            "--seed", "5"]
    commands = [
        ["train", *data, "--epochs", "2"],
        ["eval", *data, "--checkpoint", str(out / "checkpoint")],
        ["gradcheck", "--op", "voxelize", "--op", "cross_entropy"],
        ["voxel-analyze", "--seed", "42", "--resolutions", "2,8,32"],
        ["bench", "--n", "512", "--k", "16", "--c", "8", "--r", "8", "--seed", "3"],
    ]
    codes, snapshots = [], []
    for _ in range(2):
        for argv in commands:
            codes.append(main([*argv, "--out", str(out)]))
        snapshots.append(_artifacts(out))
    differing = sorted(k for k in set(snapshots[0]) | set(snapshots[1])
                       if snapshots[0].get(k) != snapshots[1].get(k))
    passed = all(c == 0 for c in codes) and not differing and len(snapshots[0]) >= 10
    report(12, "byte-identical reruns (wall time excluded)", passed,
           f"{len(commands)} commands x 2 runs, {len(snapshots[0])} artifacts, exit codes {sorted(set(codes))}, "
           f"differing {differing}")
