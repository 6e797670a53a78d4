"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import struct
import subprocess
import sys
import time

import numpy as np

from pointmlp import kernels
from pointmlp._accel import HAVE_NUMBA
from pointmlp.autodiff import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    fc,
    gather_rows,
    grad_check,
    max_over_neighbors,
    relu,
    softmax_cross_entropy,
)
from pointmlp.bench import bench_throughput
from pointmlp.checkpoint import decode_tensors, encode_tensors
from pointmlp.data import SynthSpec, decode_dataset, encode_dataset, generate_synthetic
from pointmlp.errors import BadMagicError, TruncatedError, VersionError
from pointmlp.model import (
    AffineParams,
    ResidualBlock,
    Stage,
    StageSpec,
    build_model,
    classify,
    count_layers,
    count_params,
    default_config,
    geometric_affine,
    stage_forward,
    stage_groupings,
    walk_layers,
)
from pointmlp.train import TrainConfig, evaluate, fit, nearest_centroid_baseline

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


# -- 1 ----------------------------------------------------------------------------


def test_c1_depth_formula(criterion):
    presets = {d: count_layers(default_config(depth=d)) for d in (24, 40, 56)}
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(20):
        cfg = default_config(pre_repeats=rng.integers(1, 4, 4).tolist(), pos_repeats=rng.integers(1, 4, 4).tolist(),
                             dims_divisor=16, points=64, k=4)
        mismatches += count_layers(cfg) != walk_layers(build_model(cfg))
    ok = presets == {24: 24, 40: 40, 56: 56} and mismatches == 0
    assert criterion(1, ok, f"depth presets {presets}, formula/walk mismatches {mismatches}/20")


# -- 2 ----------------------------------------------------------------------------


def test_c2_parameter_budgets(criterion):
    full = count_params(build_model(default_config("full")))
    elite = count_params(build_model(default_config("elite")))
    df, de = full / 12.6e6 - 1, elite / 0.68e6 - 1
    ok = abs(df) < 0.05 and abs(de) < 0.10 and (full, elite) == (12_555_688, 671_368)
    assert criterion(2, ok, f"full {full} ({df:+.2%} vs 12.6M), elite {elite} ({de:+.2%} vs 0.68M)")


# -- 3 ----------------------------------------------------------------------------


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _op_checks(seed):
    """Max grad_check error of every primitive op for one seed."""
    rng = np.random.default_rng(seed)
    errs = {}
    errs["fc"] = grad_check(fc, [_t(rng, 3, 4, 5), _t(rng, 5, 2), _t(rng, 2)], seed=seed)
    for training in (True, False):
        st = BatchNormState(4, dtype=np.float64)
        st.running_mean, st.running_var = rng.standard_normal(4), rng.random(4) + 0.5

        def bn(x, g, b):
            st.gamma, st.beta = g, b
            return batch_norm(x, st, training)

        errs[f"batch_norm[{training}]"] = grad_check(bn, [_t(rng, 5, 3, 4), _t(rng, 4), _t(rng, 4)], seed=seed)
    x = rng.standard_normal((4, 6))
    x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x)  # keep ReLU kinks away from +-h
    errs["relu"] = grad_check(relu, Tensor(x, dtype=np.float64), seed=seed)
    vals = rng.permutation(2 * 5 * 3).reshape(2, 5, 3) * 0.1  # distinct maxima, well separated
    errs["max"] = grad_check(max_over_neighbors, Tensor(vals, dtype=np.float64), seed=seed)
    idx = rng.integers(0, 6, (2, 4, 3))
    errs["gather"] = grad_check(lambda t: gather_rows(t, idx), _t(rng, 2, 6, 3), seed=seed)
    errs["add"] = grad_check(add, [_t(rng, 3, 4), _t(rng, 3, 4)], seed=seed)
    labels = rng.integers(0, 5, 6)
    errs["xent"] = grad_check(lambda t: softmax_cross_entropy(t, labels), _t(rng, 6, 5), seed=seed)
    p = AffineParams(3, dtype=np.float64)

    def aff(g, c, a, b):
        p.alpha, p.beta = a, b
        return geometric_affine(g, c, p)

    errs["affine"] = grad_check(aff, [_t(rng, 4, 5, 3), _t(rng, 4, 3), _t(rng, 3), _t(rng, 3)], seed=seed)
    blk = ResidualBlock(4, 2, rng, dtype=np.float64)
    errs["residual"] = grad_check(lambda t: blk(t, True), _t(rng, 3, 5, 4), seed=seed, skip_kinks=True)
    return errs


def _micro_model_check(seed, stats):
    cfg = default_config("full", num_classes=4, points=32, k=4, dims_divisor=8, dropout=0.0)
    m = build_model(cfg, rng=seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    coords = rng.standard_normal((3, 32, 3))
    labels = rng.integers(0, 4, 3)
    params = dict(m.named_parameters())
    names = list(params)
    pick = [names[j] for j in rng.choice(len(names), 3, replace=False)]

    def loss(*xs):
        for n, x in zip(pick, xs):
            m.set_parameter(n, x)
        return softmax_cross_entropy(m.forward(coords, training=True), labels)

    st = {}
    err = grad_check(loss, [params[n] for n in pick], seed=seed, n_coords=4, skip_kinks=True, stats=st)
    stats["checked"] += st["checked"]
    stats["skipped"] += st["skipped"]
    return err


def test_c3_gradient_correctness(criterion):
    start = time.perf_counter()
    worst_op = {}
    for seed in range(50):
        for k, v in _op_checks(seed).items():
            worst_op[k] = max(worst_op.get(k, 0.0), v)
    stats = {"checked": 0, "skipped": 0}
    worst_model = max(_micro_model_check(seed, stats) for seed in range(50))
    elapsed = time.perf_counter() - start
    op_max = max(worst_op.values())
    ok = op_max < 1e-3 and worst_model < 1e-3 and stats["checked"] >= 100
    assert criterion(3, ok, f"worst op error {op_max:.1e} ({max(worst_op, key=worst_op.get)}), micro model "
                            f"{worst_model:.1e} over {stats['checked']} kink-free coords "
                            f"({stats['skipped']} straddled a kink), 50 seeds, {elapsed:.0f}s")


# -- 4 ----------------------------------------------------------------------------


def _sqdist(c):
    d = c[:, None, :].astype(np.float64) - c[None, :, :]
    return (d ** 2).sum(-1)


def fps_oracle(c, m, seed):
    dist = _sqdist(c)
    chosen = [seed]
    while len(chosen) < m:
        dmin = dist[:, chosen].min(axis=1)
        chosen.append(int(np.flatnonzero(dmin == dmin.max())[0]))
    return chosen


def knn_oracle(c, q_idx, k):
    dist = _sqdist(c)[q_idx]
    return np.array([np.lexsort((np.arange(len(c)), row))[:k] for row in dist])


def test_c4_kernel_oracles(criterion):
    rng = np.random.default_rng(4)
    failures = 0
    for _ in range(100):
        n = int(rng.integers(4, 65))
        c = rng.random((n, 3))
        if rng.random() < 0.3:  # exercise ties on a coarse grid
            c = np.round(c * 3) / 3
        m, k, s = int(rng.integers(1, n + 1)), int(rng.integers(1, n + 1)), int(rng.integers(0, n))
        fo = fps_oracle(c, m, s)
        ko = knn_oracle(c, fo, k)
        for b in BACKENDS:
            fi = kernels.fps_indices(c, m, s, backend=b).tolist()
            ki = kernels.knn_indices(c, c[fi], k, backend=b)
            failures += fi != fo or not np.array_equal(ki, ko)
    assert criterion(4, failures == 0, f"{failures} mismatches over 100 clouds x backends {BACKENDS}")


# -- 5 ----------------------------------------------------------------------------


def test_c5_affine_properties(criterion):
    rng = np.random.default_rng(5)
    cent = rng.standard_normal((4, 3)).astype(np.float32)
    p = AffineParams(3)
    p.alpha.data = rng.standard_normal(3).astype(np.float32)
    p.beta.data = rng.standard_normal(3).astype(np.float32)
    zero_ok = np.array_equal(geometric_affine(np.repeat(cent[:, None], 5, 1), cent, p).data,
                             np.broadcast_to(p.beta.data, (4, 5, 3)))
    grouped = rng.standard_normal((8, 6, 5))
    centroids = rng.standard_normal((8, 5))
    y = geometric_affine(Tensor(grouped, dtype=np.float64), Tensor(centroids, dtype=np.float64),
                         AffineParams(5, dtype=np.float64)).data
    dev = grouped - centroids[:, None]
    sigma = np.sqrt((dev ** 2).mean())
    rms_gap = abs(np.sqrt((y ** 2).mean()) - sigma / (sigma + 1e-5))
    hp = AffineParams(1, dtype=np.float64)
    hp.alpha.data[:], hp.beta.data[:] = 2.0, 0.5
    hand = geometric_affine(Tensor([[[0.0], [2.0]], [[0.0], [2.0]]], dtype=np.float64),
                            Tensor([[1.0], [1.0]], dtype=np.float64), hp).data.reshape(-1)
    derived = np.array([-1.4999800001999980, 2.4999800001999980] * 2)
    hand_gap = np.abs(hand - derived).max()
    ok = zero_ok and rms_gap < 1e-3 and hand_gap < 1e-5
    assert criterion(5, ok, f"zero-deviation==beta {zero_ok}, RMS gap {rms_gap:.1e}, hand instance gap {hand_gap:.1e}")


# -- 6 ----------------------------------------------------------------------------


def test_c6_permutation_invariance(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    model = build_model(default_config("full", num_classes=10, points=128, k=16, dims_divisor=4,
                                       fps_seed="centroid"), rng=0)
    worst_logit = 0.0
    for _ in range(20):
        c = rng.standard_normal((128, 3))
        perm = rng.permutation(128)
        worst_logit = max(worst_logit, float(np.abs(classify(model, c).data - classify(model, c[perm]).data).max()))
    st = Stage(StageSpec(32, 8, 16, 32, 2, 2), 1, np.random.default_rng(1))
    worst_stage = 0.0
    for _ in range(20):
        coords = rng.random((2, 64, 3)).astype(np.float32)
        feats = Tensor(rng.standard_normal((2, 64, 16)))
        cidx, nidx = stage_groupings(coords, st.spec)
        shuffled = np.take_along_axis(nidx, np.argsort(rng.random(nidx.shape), axis=-1), axis=-1)
        a = stage_forward(feats, coords, st, grouping=(cidx, nidx))[1].data
        b = stage_forward(feats, coords, st, grouping=(cidx, shuffled))[1].data
        worst_stage = max(worst_stage, float(np.abs(a - b).max()))
    ok = worst_logit < 1e-4 and worst_stage < 1e-5
    assert criterion(6, ok, f"point permutation max |dlogit| {worst_logit:.1e}, neighbour permutation max "
                            f"|dstage| {worst_stage:.1e}, {time.perf_counter() - start:.0f}s")


# -- 7 ----------------------------------------------------------------------------

ABLATION_POINTS = 128
ABLATION_K = 16
ABLATION_BATCH = 8
ABLATION_LR = 0.02


def test_c7_ablation_monotonicity(criterion):
    start = time.perf_counter()
    classes = ["sphere", "cube", "cylinder", "torus"]
    train = generate_synthetic(SynthSpec(classes=classes, points_per_cloud=ABLATION_POINTS,
                                         samples_per_class=50, seed=1))
    test = generate_synthetic(SynthSpec(classes=classes, points_per_cloud=ABLATION_POINTS,
                                        samples_per_class=25, seed=2))
    baseline = nearest_centroid_baseline(train, test).overall_acc
    oa = {True: [], False: []}
    for seed in range(3):
        for affine in (True, False):
            cfg = default_config("full", num_classes=4, points=ABLATION_POINTS, k=ABLATION_K,
                                 dims_divisor=4, affine=affine)
            model = build_model(cfg, rng=seed)
            fit(model, train, None, TrainConfig(epochs=30, batch_size=ABLATION_BATCH, lr_max=ABLATION_LR, seed=seed))
            oa[affine].append(evaluate(model, test).overall_acc)
    on, off = float(np.median(oa[True])), float(np.median(oa[False]))
    ok = on > off and on >= 0.90 and baseline < 0.80
    assert criterion(7, ok, f"median OA affine on {on:.3f} {oa[True]} vs off {off:.3f} {oa[False]}, "
                            f"nearest-centroid {baseline:.3f}, {time.perf_counter() - start:.0f}s")


# -- 8 ----------------------------------------------------------------------------


BENCH_POINTS = 256  # default widths/params; 1024-point clouds take ~2 min per variant on one core


def test_c8_elite_faster_than_full(criterion):
    start = time.perf_counter()
    reports = {v: bench_throughput(build_model(default_config(v, points=BENCH_POINTS)), batch_size=16,
                                   warmup=1, iters=10)
               for v in ("full", "elite")}
    full, elite = reports["full"].samples_per_second, reports["elite"].samples_per_second
    assert criterion(8, elite > full, f"elite {elite:.1f} vs full {full:.1f} samples/s (batch 16, "
                                      f"{BENCH_POINTS} points, this machine), {time.perf_counter() - start:.0f}s")


# -- 9 ----------------------------------------------------------------------------


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "pointmlp.cli", *args], capture_output=True, text=True)


def test_c9_determinism(criterion, tmp_path):
    data = tmp_path / "train.pcds"
    assert _cli("gendata", "--per-class", "8", "--points", "64", "--seed", "3", "--out", str(data)).returncode == 0
    traces, blobs = [], []
    for run in range(2):
        ckpt, log = tmp_path / f"m{run}.pmlp", tmp_path / f"log{run}.jsonl"
        proc = _cli("train", "--train", str(data), "--out", str(ckpt), "--log", str(log), "--epochs", "5",
                    "--batch-size", "8", "--dims-divisor", "8", "--k", "8", "--seed", "11")
        assert proc.returncode == 0, proc.stderr
        traces.append([json.loads(line)["train_loss"] for line in log.read_text().splitlines()])
        blobs.append(ckpt.read_bytes())
    ok = traces[0] == traces[1] and blobs[0] == blobs[1] and len(traces[0]) == 5
    assert criterion(9, ok, f"loss traces equal {traces[0] == traces[1]}, checkpoint bytes equal {blobs[0] == blobs[1]}")


# -- 10 ----------------------------------------------------------------------------


def test_c10_format_fidelity(criterion):
    ds = generate_synthetic(SynthSpec(points_per_cloud=32, samples_per_class=3, seed=9))
    raw = encode_dataset(ds)
    pcds_ok = decode_dataset(raw) == ds and encode_dataset(decode_dataset(raw)) == raw
    state = build_model(default_config(num_classes=4, points=32, k=4, dims_divisor=8)).state_dict()
    blob = encode_tensors(state)
    back = decode_tensors(blob)
    pmlp_ok = list(back) == list(state) and all(back[k].tobytes() == np.asarray(state[k], np.float32).tobytes()
                                                for k in state) and encode_tensors(back) == blob

    def raises(fn, buf, exc):
        try:
            fn(buf)
        except exc:
            return True
        return False

    errors_ok = all([
        raises(decode_dataset, b"XXXX" + raw[4:], BadMagicError),
        raises(decode_tensors, b"XXXX" + blob[4:], BadMagicError),
        raises(decode_dataset, raw[:4] + struct.pack("<I", 7) + raw[8:], VersionError),
        raises(decode_tensors, blob[:4] + struct.pack("<I", 7) + blob[8:], VersionError),
        raises(decode_dataset, raw[:-5], TruncatedError),
        raises(decode_tensors, blob[:-5], TruncatedError),
    ])
    ok = pcds_ok and pmlp_ok and errors_ok
    assert criterion(10, ok, f"PCDS roundtrip {pcds_ok}, PMLP roundtrip {pmlp_ok}, error kinds {errors_ok}")
