"""``pointmlp`` command line: gendata, train, eval, inspect, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import _accel
from .bench import bench_kernels, bench_throughput
from .checkpoint import load_tensors, save_tensors
from .data import SHAPES, SynthSpec, generate_synthetic, read_dataset, write_dataset
from .errors import ConfigError, FormatError, NonFiniteError, ShapeError
from .geometry import AugmentConfig
from .model import ModelConfig, build_model, count_layers, count_params, default_config, walk_layers
from .train import TrainConfig, evaluate, fit, predict_proba

log = logging.getLogger("pointmlp")


class UsageError(Exception):
    pass


def _repeats(text):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an int or 4 comma-separated ints, got {text!r}")
    if len(vals) == 1:
        return vals[0]
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("repeat lists need four entries")
    return vals


def _add_model_flags(p, variants=("full", "elite"), default="full"):
    p.add_argument("--variant", choices=list(variants), default=default)
    p.add_argument("--depth", type=int, choices=[24, 40, 56])
    p.add_argument("--no-affine", action="store_true", help="disable the geometric affine module")
    p.add_argument("--pre-repeats", type=_repeats, help="blocks before aggregation (int or a,b,c,d)")
    p.add_argument("--pos-repeats", type=_repeats, help="blocks after aggregation (int or a,b,c,d)")
    p.add_argument("--k", type=int, default=24, help="neighbours per group")
    p.add_argument("--dims-divisor", type=int, default=1, help="divide every channel width by this")
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--fps-seed", choices=["first", "centroid"], default="first")


def _model_config(args, num_classes, points):
    try:
        return default_config(args.variant, num_classes=num_classes, depth=args.depth, points=points,
                              k=args.k, dims_divisor=args.dims_divisor, affine=not args.no_affine,
                              pre_repeats=args.pre_repeats, pos_repeats=args.pos_repeats,
                              fps_seed=args.fps_seed, dropout=args.dropout)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _config_path(ckpt):
    return Path(str(ckpt) + ".json")


def save_checkpoint(model, path):
    save_tensors(path, model.state_dict())
    _config_path(path).write_text(model.config.to_json())


def load_checkpoint(path):
    cfg_file = _config_path(path)
    if not cfg_file.exists():
        raise FileNotFoundError(f"missing model config {cfg_file}")
    model = build_model(ModelConfig.from_json(cfg_file.read_text()))
    model.load_state_dict(load_tensors(path))
    return model


# --------------------------------------------------------------------------
# commands


def cmd_gendata(args):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    spec = SynthSpec(classes=classes, points_per_cloud=args.points, samples_per_class=args.per_class,
                     noise_sigma=args.noise, seed=args.seed, rotate=not args.no_rotate)
    try:
        spec.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    ds = generate_synthetic(spec)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({len(classes)} classes x {args.per_class}, "
          f"{args.points} points) to {args.out}")
    return 0


def _run_paths(out, runs, i):
    if runs == 1:
        return Path(out)
    p = Path(out)
    return p.with_name(f"{p.stem}.run{i}{p.suffix}")


def cmd_train(args):
    train = read_dataset(args.train)
    test = read_dataset(args.test) if args.test else None
    if test is not None and test.class_names != train.class_names:
        raise ConfigError(f"train classes {train.class_names} != test classes {test.class_names}")
    if len(train) == 0:
        raise ConfigError("training set is empty")
    points = min(len(s) for s in train.samples)
    cfg = _model_config(args, train.num_classes, args.points or points)
    try:
        aug = AugmentConfig(args.scale_lo, args.scale_hi, args.shift)
        tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr_max=args.lr,
                           momentum=args.momentum, weight_decay=args.wd, seed=args.seed,
                           voting_repeats=args.vote, augment=aug).validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    final = []
    for i in range(args.runs):
        seed = args.seed + i
        tcfg.seed = seed
        model = build_model(cfg, rng=seed)
        echo = (lambda rec: print(json.dumps(rec), flush=True)) if args.verbose else None
        history = fit(model, train, test, tcfg, log_path=args.log, on_epoch=echo)
        out = _run_paths(args.out, args.runs, i)
        save_checkpoint(model, out)
        last = history[-1] if history else {}
        msg = f"run {i} seed {seed}: checkpoint {out}"
        if "test_OA" in last:
            msg += f", final test OA {last['test_OA']:.4f} mAcc {last['test_mAcc']:.4f}"
            final.append(last["test_OA"])
        print(msg)
    if len(final) > 1:
        print(f"test OA over {len(final)} runs: {np.mean(final):.4f} +- {np.std(final):.4f}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    if ds.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes, checkpoint {model.config.num_classes}")
    m = evaluate(model, ds, voting_repeats=args.vote, rng=args.seed)
    print(f"OA {m.overall_acc:.4f}")
    print(f"mAcc {m.class_mean_acc:.4f}")
    for name, r in zip(ds.class_names, m.per_class_recall):
        print(f"  {name}: {r:.4f}")
    if args.probs:
        np.save(args.probs, predict_proba(model, ds, voting_repeats=args.vote, rng=args.seed))
    return 0


def cmd_inspect(args):
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model = build_model(_model_config(args, args.classes, args.points), rng=args.seed)
    cfg = model.config
    print(f"variant {cfg.variant}")
    print(f"layers (formula) {count_layers(cfg)}")
    print(f"layers (walked)  {walk_layers(model)}")
    print(f"params {count_params(model)}")
    print(f"embedding 3 -> {cfg.embed_dim}")
    for i, st in enumerate(cfg.stages):
        print(f"stage {i}: {st.n_points_out} points, k={st.k}, {st.d_in} -> {st.d_out}, "
              f"pre={st.pre_repeats} pos={st.pos_repeats} affine={'on' if st.affine_enabled else 'off'}")
    widths = [cfg.stages[-1].d_out] + cfg.classifier_widths + [cfg.num_classes]
    print("classifier " + " -> ".join(str(w) for w in widths))
    return 0


def cmd_bench(args):
    if args.threads:
        _accel.set_threads(args.threads)
    results = {}
    variants = ["full", "elite"] if args.variant == "both" else [args.variant]
    for v in variants:
        args.variant = v
        model = build_model(_model_config(args, args.classes, args.points), rng=args.seed)
        rep = bench_throughput(model, args.batch_size, args.warmup, args.iters, seed=args.seed)
        results[v] = rep.to_dict()
        print(f"{v}: {rep.samples_per_second:.2f} samples/s (batch {rep.batch_size}, "
              f"{rep.timed_iters} timed iters, {rep.params} params, {rep.layers} layers)")
    if args.kernels:
        kb = bench_kernels(n=args.points, m=args.points // 2, k=args.k)
        results["kernels"] = kb
        for b, t in kb.items():
            print(f"kernels[{b}]: fps {t['fps'] * 1e3:.2f} ms, knn {t['knn'] * 1e3:.2f} ms")
    if args.json:
        Path(args.json).write_text(json.dumps(results, indent=2))
    return 0


# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="pointmlp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="write a synthetic PCDS dataset")
    p.add_argument("--classes", default="sphere,cube,cylinder,torus",
                   help=f"comma-separated subset of {','.join(SHAPES)}")
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--no-rotate", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gendata)

    p = sub.add_parser("train", help="train a classifier and write a checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--out", required=True, help="checkpoint path (config goes to <out>.json)")
    _add_model_flags(p)
    p.add_argument("--points", type=int, help="input points per cloud (default: smallest training cloud)")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--wd", type=float, default=2e-4)
    p.add_argument("--scale-lo", type=float, default=0.8)
    p.add_argument("--scale-hi", type=float, default=1.25)
    p.add_argument("--shift", type=float, default=0.1)
    p.add_argument("--vote", type=int, default=1, help="voting repeats for per-epoch test scoring")
    p.add_argument("--runs", type=int, default=1, help="independent runs with seeds seed, seed+1, ...")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="append per-epoch JSON lines here")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vote", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probs", help="save the (voted) class probabilities as .npy")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="print layer/parameter accounting")
    p.add_argument("--ckpt")
    _add_model_flags(p)
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("bench", help="inference throughput (and kernel backends)")
    _add_model_flags(p, variants=("full", "elite", "both"), default="both")
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--threads", type=int, help="cap numba worker threads")
    p.add_argument("--kernels", action="store_true", help="also time FPS/kNN under numba and numpy")
    p.add_argument("--json", help="write results as JSON here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"pointmlp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FormatError, ShapeError, NonFiniteError, OSError, ValueError) as exc:
        print(f"pointmlp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
