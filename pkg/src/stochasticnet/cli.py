"""Command-line entry point: realize, train, sweep, extract, bench.

Every command echoes its invocation and seeds into `# key=value` comment
lines at the top of its CSV outputs, so any result can be reproduced from
the file alone.  Exit codes: 0 success, 2 usage error, 1 runtime error.
The STOCHNET_THREADS environment variable caps parallelism across training
trials; benchmarks always run single-threaded.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import shlex
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import data_io, model_store, rng
from .network import (
    NetworkSpec,
    TrainConfig,
    lenet5_stochastic_spec,
    realize,
    train,
)
from .random_graph import ModelKind


class UsageError(ValueError):
    """Bad flag combination detected after argparse; exits with code 2."""


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def _parse_levels(text: str) -> list[float]:
    levels = [float(p) for p in text.split(",") if p.strip()]
    if not levels:
        raise argparse.ArgumentTypeError("need at least one level")
    for l in levels:
        if not 0.0 < l <= 1.0:
            raise argparse.ArgumentTypeError(f"level {l} outside (0, 1]")
    return levels


def _sparsity(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"sparsity must be in (0, 1], got {value}")
    return value


def _header_lines(args: argparse.Namespace, argv: list[str], extra: dict) -> list[str]:
    lines = [
        f"# cmd={shlex.join(['stochasticnet'] + argv)}",
        f"# timestamp={datetime.now(timezone.utc).isoformat()}",
    ]
    for key, value in extra.items():
        lines.append(f"# {key}={value}")
    return lines


def _write_lines(path, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n")


def _load_dataset(args: argparse.Namespace):
    """Build (train, test) datasets from the --data family of flags."""
    if not 0.0 < args.fraction <= 1.0:
        raise UsageError(f"--fraction must be in (0, 1], got {args.fraction}")
    test = None
    if args.data == "synth":
        shape = args.synth_shape
        train_set = data_io.synth_blobs(
            args.synth_classes, args.synth_per_class, shape, seed=args.seed
        )
        if args.synth_test_per_class > 0:
            test = data_io.synth_blobs(
                args.synth_classes, args.synth_test_per_class, shape,
                seed=rng.child_seed(args.seed, "test"),
            )
    elif args.data == "idx":
        if not (args.images and args.labels):
            raise UsageError("--data idx requires --images and --labels")
        train_set = data_io.load_idx(args.images, args.labels)
        if args.test_images and args.test_labels:
            test = data_io.load_idx(args.test_images, args.test_labels)
    else:  # cifar-bin
        if not args.batches:
            raise UsageError("--data cifar-bin requires --batches")
        train_set = data_io.load_cifar10_binary(args.batches)
        if args.test_batches:
            test = data_io.load_cifar10_binary(args.test_batches)
    if args.fraction < 1.0:
        train_set = data_io.subset(train_set, args.fraction, args.seed)
        print(f"using stratified {args.fraction:g} subset: {train_set.n} examples")
    return train_set, test


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", choices=["idx", "cifar-bin", "synth"], default="synth")
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--batches", nargs="+", help="CIFAR-10 binary batch files")
    p.add_argument("--test-batches", nargs="+")
    p.add_argument("--synth-classes", type=int, default=10)
    p.add_argument("--synth-per-class", type=int, default=64)
    p.add_argument("--synth-test-per-class", type=int, default=16)
    p.add_argument("--synth-shape", type=_parse_shape, default=(1, 16, 16))
    p.add_argument("--fraction", type=float, default=1.0,
                   help="stratified training subset fraction in (0, 1]")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def _build_spec(args: argparse.Namespace) -> NetworkSpec:
    if args.spec_file:
        data = json.loads(Path(args.spec_file).read_text())
        return NetworkSpec.from_dict(data)
    return lenet5_stochastic_spec(
        args.sparsity,
        ModelKind(args.model),
        seed=args.seed,
        input_shape=args.input_shape,
        num_classes=args.classes,
    )


def cmd_realize(args: argparse.Namespace, argv: list[str]) -> int:
    spec = _build_spec(args)
    net = realize(spec)
    model_store.save(net, args.out)
    realized, dense = net.connectivity_summary()
    print(f"wrote {args.out}")
    print(f"parameters: {net.param_count}")
    print(f"connectivity: {realized}/{dense} ({100.0 * realized / dense:.2f}%)")
    return 0


def _run_trial(model_path: str, trial: int, base_seed: int, train_seed: int,
               epochs: int, lr: float, momentum: float, batch_size: int,
               train_set, test_set):
    """One independent realization + training run; returns (report, model bytes)."""
    template = model_store.load(model_path)
    spec = template.spec
    if trial == 0:
        net = template
    else:
        realization_seed = rng.child_seed(base_seed, "trial", trial)
        net = realize(NetworkSpec(spec.layers, spec.input_shape, realization_seed))
    cfg = TrainConfig(
        learning_rate=lr, momentum=momentum, batch_size=batch_size,
        epochs=epochs, seed=rng.child_seed(train_seed, "trial", trial),
    )
    report = train(net, train_set, cfg, test=test_set)
    return report, model_store.dumps(net)


def cmd_train(args: argparse.Namespace, argv: list[str]) -> int:
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    train_set, test_set = _load_dataset(args)
    template = model_store.load(args.model_file)
    base_seed = template.spec.seed

    jobs = [
        (str(args.model_file), t, base_seed, args.seed, args.epochs, args.lr,
         args.momentum, args.batch_size, train_set, test_set)
        for t in range(args.trials)
    ]
    workers = int(os.environ.get("STOCHNET_THREADS", "1"))
    if workers > 1 and args.trials > 1:
        with ProcessPoolExecutor(max_workers=min(workers, args.trials)) as pool:
            results = list(pool.map(_run_trial, *zip(*jobs)))
    else:
        results = [_run_trial(*job) for job in jobs]

    lines = _header_lines(args, argv, {
        "seed": args.seed, "trials": args.trials, "epochs": args.epochs,
        "lr": args.lr, "data": train_set.name, "n": train_set.n,
    })
    lines.append("row,trial,epoch,train_loss,train_error,test_error")
    best_trial, best_error = 0, float("inf")
    for t, (report, _) in enumerate(results):
        for s in report.epochs:
            test_txt = "" if s.test_error is None else f"{s.test_error:.6f}"
            lines.append(
                f"epoch,{t},{s.epoch},{s.train_loss:.6f},{s.train_error:.6f},{test_txt}"
            )
        if report.final_train_error < best_error:
            best_trial, best_error = t, report.final_train_error
    best_report = results[best_trial][0]
    test_txt = ("" if best_report.final_test_error is None
                else f"{best_report.final_test_error:.6f}")
    lines.append(
        f"best,{best_trial},{best_report.epochs[-1].epoch},"
        f"{best_report.final_train_loss:.6f},{best_report.final_train_error:.6f},{test_txt}"
    )
    _write_lines(args.out_csv, lines)
    print(f"wrote {args.out_csv}")
    print(f"best trial {best_trial}: train error {best_error:.4f}")

    out_model = args.out_model or str(args.model_file) + ".best"
    model_store.atomic_write(out_model, results[best_trial][1])
    print(f"saved best model to {out_model}")
    return 0


def cmd_sweep(args: argparse.Namespace, argv: list[str]) -> int:
    train_set, test_set = _load_dataset(args)
    cfg = TrainConfig(
        learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size,
        epochs=args.epochs, seed=args.seed,
    )
    lines = _header_lines(args, argv, {
        "seed": args.seed, "levels": ",".join(f"{l:g}" for l in args.levels),
        "epochs": args.epochs, "data": train_set.name,
    })
    lines.append("level,train_error,test_error")
    for level in args.levels:
        spec = lenet5_stochastic_spec(
            level, ModelKind(args.model), seed=args.seed,
            input_shape=train_set.image_shape, num_classes=train_set.num_classes,
        )
        net = realize(spec)
        report = train(net, train_set, cfg, test=test_set)
        test_txt = ("" if report.final_test_error is None
                    else f"{report.final_test_error:.6f}")
        lines.append(f"{level:g},{report.final_train_error:.6f},{test_txt}")
        print(f"level {level:g}: train error {report.final_train_error:.4f}"
              + (f", test error {report.final_test_error:.4f}"
                 if report.final_test_error is not None else ""))
    _write_lines(args.out_csv, lines)
    print(f"wrote {args.out_csv}")
    return 0


def cmd_extract(args: argparse.Namespace, argv: list[str]) -> int:
    net = model_store.load(args.model_file)
    train_set, _ = _load_dataset(args)
    features = net.extract_features(train_set.images, args.layer)
    model_store.save_features(features, args.out)
    dims = "x".join(map(str, features.shape))
    print(f"wrote {args.out} ({dims} float32)")
    return 0


def cmd_bench(args: argparse.Namespace, argv: list[str]) -> int:
    from . import sparse_exec  # deferred: pulls in the JIT compiler

    if args.reps < 30:
        print(f"warning: {args.reps} reps gives weak statistics; 30+ recommended",
              file=sys.stderr)
    spec = lenet5_stochastic_spec(
        1.0, ModelKind(args.model), seed=args.seed, input_shape=args.input_shape,
    )
    report = sparse_exec.run_benchmark(
        spec, args.levels, input_shape=args.input_shape,
        reps=args.reps, warmup=args.warmup, seed=args.seed,
    )
    lines = _header_lines(args, argv, {
        "seed": args.seed, "reps": args.reps, "warmup": args.warmup,
        "input_shape": "x".join(map(str, args.input_shape)),
    })
    buf = io.StringIO()
    report.write_csv(buf)
    _write_lines(args.out_csv, lines + buf.getvalue().splitlines())
    with open(args.out_json, "w") as f:
        report.write_json(f)
    for lvl in report.connectivity_levels:
        print(f"connectivity {lvl:g}: relative time {report.relative_time[lvl]:.3f}")
    print(f"wrote {args.out_csv} and {args.out_json}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochasticnet",
        description="Realize, train, and benchmark sparsely-connected networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("realize", help="realize a network and write a model file")
    p.add_argument("--spec-preset", choices=["lenet5"], default="lenet5")
    p.add_argument("--spec-file", help="JSON network spec (overrides the preset)")
    p.add_argument("--sparsity", type=_sparsity, default=0.75)
    p.add_argument("--model", choices=["uniform", "gaussian"], default="gaussian")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-shape", type=_parse_shape, default=(3, 32, 32))
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_realize)

    p = sub.add_parser("train", help="train a realized model over N trials")
    p.add_argument("--model-file", required=True)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-model", help="where to save the best trial's model")
    _add_data_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-connectivity",
                       help="train one model per connectivity level")
    p.add_argument("--levels", type=_parse_levels, required=True)
    p.add_argument("--model", choices=["uniform", "gaussian"], default="gaussian")
    p.add_argument("--out-csv", required=True)
    _add_data_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("extract", help="extract features to a binary file")
    p.add_argument("--model-file", required=True)
    p.add_argument("--layer", type=int, default=None,
                   help="layer boundary (default: the flattened feature vector)")
    p.add_argument("--out", required=True)
    _add_data_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("bench", help="sparse vs dense extraction timing")
    p.add_argument("--levels", type=_parse_levels,
                   default=[1.0, 0.9, 0.75, 0.5, 0.25])
    p.add_argument("--model", choices=["uniform", "gaussian"], default="uniform")
    p.add_argument("--input-shape", type=_parse_shape, default=(3, 64, 64))
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, LookupError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
