"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/contract error.  All
subcommands are deterministic for fixed seeds except ``bench``, which is
wall-clock and labeled as such.
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
import time

import numpy as np

from . import analysis, autodiff, dataio, fusion, graph, tensor
from .tensor import Shape5, Tensor5D

EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this toolkit reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def worker_count() -> int:
    cap = os.environ.get("LW3D_THREADS")
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


def _input_shape(text: str) -> Shape5:
    dims = graph.parse_shape_arg(text)
    if len(dims) != 4:
        raise ValueError(f"expected CxTxHxW, got {text!r}")
    return Shape5(1, *dims)


def _network_from_args(args) -> graph.ModuleGraph:
    if getattr(args, "config", None):
        cfg = graph.parse_network_config(args.config)
        arch = args.arch or cfg.arch
        shape = Shape5(1, *cfg.input) if args.input is None else _input_shape(args.input)
        classes = args.classes or cfg.classes
        mult = args.width_mult if args.width_mult is not None else cfg.width_mult
        overrides = cfg.width_overrides
    else:
        if not args.arch:
            raise ValueError("--arch is required without --config")
        arch = args.arch
        shape = _input_shape(args.input or "3x32x224x224")
        classes = args.classes or 60
        mult = args.width_mult if args.width_mult is not None else 1.0
        overrides = None
    return graph.build_network(arch, shape, classes, mult, overrides)


def cmd_analyze(args) -> int:
    if args.module:
        variant = args.arch or "i3d"
        cost = analysis.module_cost(variant, args.module)
        print(f"module {args.module} ({variant})")
        print(f"params {cost['params']}  flops {cost['flops']}")
        print(
            f"stage-one params {cost['stage_one_params']}  "
            f"stage-two params {cost['stage_two_params']}"
        )
        return 0
    g = _network_from_args(args)
    report = analysis.analyze(g, include_bn_params=args.include_bn_params)
    sys.stdout.write(analysis.emit_report(report, args.format))
    return 0


def cmd_compare_factorizations(args) -> int:
    sites = graph.parse_shape_arg(args.sites)
    if len(sites) != 3:
        raise ValueError(f"--sites must be TxHxW, got {args.sites!r}")
    candidates, best = analysis.compare_factorizations(
        args.in_channels, args.out_channels, args.k, sites
    )
    if args.format == "table":
        print("Structure | Params | Layer params | FLOPs")
        for c in candidates:
            parts = " + ".join(str(v) for v in c.layer_params)
            mark = "  <- fewest parameters" if c.label == best else ""
            print(f"{c.label} | {c.params} | {parts} | {c.flops}{mark}")
    else:
        import json

        print(
            json.dumps(
                {
                    "best": best,
                    "candidates": [
                        {
                            "label": c.label,
                            "params": c.params,
                            "layer_params": c.layer_params,
                            "flops": c.flops,
                        }
                        for c in candidates
                    ],
                },
                indent=2,
                sort_keys=True,
            )
        )
    return 0


def _read_scores_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = [[float(v) for v in row] for row in csv.reader(f) if row]
    return np.asarray(rows, dtype=np.float64)


def _read_labels_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        return np.asarray(
            [int(row[0]) for row in csv.reader(f) if row], dtype=np.int64
        )


def cmd_fuse(args) -> int:
    a = _read_scores_csv(args.scores_a)
    b = _read_scores_csv(args.scores_b)
    merged = fusion.merge(a, b, args.strategy, args.acc_a, args.acc_b)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    for row in merged:
        writer.writerow([f"{v:.6f}" for v in row])
    if args.labels:
        labels = _read_labels_csv(args.labels)
        acc = fusion.evaluate_accuracy(merged, labels)
        print(f"accuracy,{acc:.6f}")
    return 0


def cmd_synth_data(args) -> int:
    shape = graph.parse_shape_arg(args.shape)
    if len(shape) != 4:
        raise ValueError(f"--shape must be CxTxHxW, got {args.shape!r}")
    records = dataio.synth_dataset(
        args.classes, args.clips_per_class, shape, args.seed, args.out, args.stream
    )
    print(f"wrote {len(records)} clips under {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    err = gradcheck.check_op(args.op, trials=args.trials, seed=args.seed)
    print(f"op {args.op}: max relative gradient error {err:.3e} over {args.trials} trials")
    return 0 if err <= 1e-2 else EXIT_DATA


def cmd_train_toy(args) -> int:
    g = _network_from_args(args)
    shape = g.input_shape
    if args.data:
        records = dataio.read_manifest(args.data)
        dataset = [(dataio.load_clip(r), r.label) for r in records]
    else:
        rng_dir = args.out_dir or "toy-data"
        records = dataio.synth_dataset(
            g.num_classes, args.clips_per_class,
            (shape.c, shape.t, shape.h, shape.w), args.seed, rng_dir,
        )
        dataset = [(dataio.load_clip(r), r.label) for r in records]
    cfg = autodiff.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        plateau_patience=args.patience,
    )
    history, params = autodiff.train_toy(g, dataset, cfg, seed=args.seed)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["epoch", "loss", "accuracy", "lr"])
    for h in history:
        writer.writerow(
            [h["epoch"], f"{h['loss']:.6f}", f"{h['accuracy']:.4f}", h["lr"]]
        )
    if args.save_weights:
        autodiff.save_weights(args.save_weights, g, params)
    return 0


def cmd_infer(args) -> int:
    g = _network_from_args(args)
    params = (
        autodiff.load_weights(args.weights, g)
        if args.weights
        else autodiff.init_params(g, args.seed)
    )
    if args.manifest:
        records = dataio.read_manifest(args.manifest)
        clips = [dataio.load_clip(r) for r in records]
    elif args.tensor:
        clips = [tensor.load_tensor(args.tensor)]
    else:
        raise ValueError("infer needs --tensor or --manifest")
    rng = np.random.default_rng(args.seed)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    for clip in clips:
        windows = []
        for _ in range(args.windows):
            seed = int(rng.integers(0, 2**31 - 1))
            windows.append(dataio.sample_clip(clip, g.input_shape.t, seed))
        scores = np.zeros(g.num_classes, dtype=np.float64)
        for win in windows:
            acts = autodiff.forward(g, params, win)
            scores += autodiff.predict_scores(g, acts)[0]
        scores /= len(windows)
        writer.writerow([f"{v:.6f}" for v in scores])
    return 0


def cmd_bench(args) -> int:
    g = _network_from_args(args)
    shape = g.input_shape
    params = autodiff.init_params(g, args.seed)
    rng = np.random.default_rng(args.seed)
    x = Tensor5D(
        rng.standard_normal(
            (args.batch, shape.c, shape.t, shape.h, shape.w)
        ).astype(np.float32)
    )
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        autodiff.forward(g, params, x)
        times.append(time.perf_counter() - t0)
    print(
        f"arch {g.arch} batch {args.batch}: median forward "
        f"{statistics.median(times):.3f}s over {args.repeat} runs "
        "(wall clock, nondeterministic; no reference target)"
    )
    return 0


def _add_network_flags(p, require_arch=False):
    p.add_argument("--arch", choices=graph.ARCHS, required=require_arch)
    p.add_argument("--input", help="input shape CxTxHxW (batch implied 1)")
    p.add_argument("--classes", type=int)
    p.add_argument("--width-mult", type=float, dest="width_mult")
    p.add_argument("--config", help="architecture description file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lw3d")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[], help="parameter/FLOP report")
    _add_network_flags(p)
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--include-bn-params", action="store_true")
    p.add_argument("--module", help="analyze a single module (e.g. 4b) instead")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare-factorizations", help="factorization trade-offs")
    p.add_argument("--in", dest="in_channels", type=int, required=True)
    p.add_argument("--out", dest="out_channels", type=int, required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--sites", default="8x14x14", help="output sites TxHxW")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_compare_factorizations)

    p = sub.add_parser("fuse", help="merge two streams' score CSVs")
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--labels")
    p.add_argument("--strategy", choices=(fusion.MS1, fusion.MS2), default=fusion.MS1)
    p.add_argument("--acc-a", type=float)
    p.add_argument("--acc-b", type=float)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("synth-data", help="generate a synthetic labeled dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--clips-per-class", type=int, default=8)
    p.add_argument("--shape", default="3x8x32x32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stream", choices=("rgb", "depth"), default="rgb")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument(
        "--op",
        required=True,
        choices=(
            "conv3d", "conv3d_grouped", "pool_max", "pool_avg", "relu",
            "batchnorm", "shuffle", "softmax_xent",
        ),
    )
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="toy-scale training on synthetic clips")
    _add_network_flags(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--clips-per-class", type=int, default=8)
    p.add_argument("--data", help="manifest of an existing dataset")
    p.add_argument("--out-dir", help="where to place generated clips")
    p.add_argument("--save-weights")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="score clips with a weight file")
    _add_network_flags(p)
    p.add_argument("--weights")
    p.add_argument("--tensor", help="single clip tensor file")
    p.add_argument("--manifest", help="manifest of clips")
    p.add_argument("--windows", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="forward wall-clock timing")
    _add_network_flags(p)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"lw3d: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
