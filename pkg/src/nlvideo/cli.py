"""``nlvideo`` command-line entry point.

Every subcommand reads the same flat config (``--config`` file, then
``--set key=value`` overrides, then the global flags).  Exit codes:
0 success, 1 verification failure, 2 config or usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, describe_keys, format_config, load_config

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_IO = 3

FAULT_ENV = "NLVIDEO_FAULT"

log = logging.getLogger("nlvideo")


class UsageError(Exception):
    pass


def _common_flags(defaults: bool) -> argparse.ArgumentParser:
    # The same flags are accepted before and after the subcommand; SUPPRESS
    # keeps the subcommand copy from clobbering a value given earlier.
    d = {} if defaults else {"default": argparse.SUPPRESS}
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="flat key = value config file", **d)
    g.add_argument("--seed", type=int, metavar="U64", help="override the seed key", **d)
    g.add_argument("--threads", type=int, metavar="N", help="override the threads key", **d)
    g.add_argument("--out", metavar="DIR", help="override the out key", **d)
    g.add_argument(
        "--set", dest="overrides", action="append", metavar="KEY=VALUE", help="override any config key", **d
    )
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr", **d)
    return p


def build_parser() -> argparse.ArgumentParser:
    keys = describe_keys()
    parser = argparse.ArgumentParser(
        prog="nlvideo",
        description="Non-local and relation attention blocks for video: checks, experiments, fusion.",
        parents=[_common_flags(True)],
        epilog=keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    common = _common_flags(False)

    def add(name, help_text):
        return sub.add_parser(
            name,
            help=help_text,
            description=help_text,
            parents=[common],
            epilog=keys,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )

    add("gradcheck", "compare every backward pass with central differences")
    add("oracle", "compare optimised forward paths with loop references")
    add("bench", "time dense against windowed masked attention (CSV)")
    add("synth", "write the synthetic train and test clips as NLT1 files")
    add("experiment", "train every block variant and print the accuracy table")
    add("config", "print the effective configuration")
    p = add("fuse", "average probability tables by video id and report top-1/top-5")
    p.add_argument("tables", nargs="+", metavar="CSV", help="score tables to fuse")
    p.add_argument("--weights", help="comma-separated weights (overrides fuse_weights)")
    p.add_argument("--labels", dest="labels_path", metavar="CSV", help="id,label file (overrides labels)")
    p.add_argument("-o", "--output", metavar="CSV", help="fused table path (default OUT/fused.csv)")
    p = add("inflate", "inflate a 2D kernel file to 3D")
    p.add_argument("input", help="(C_out, C_in, k, k) NLT1 kernel")
    p.add_argument("output", help="destination for the (C_out, C_in, t, k, k) kernel")
    p.add_argument("-t", type=int, dest="t", help="temporal extent (overrides inflate_t)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in getattr(args, "overrides", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in ("seed", "threads", "out"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return load_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .checks import run_gradcheck

    results = run_gradcheck(cfg.seed, cfg.grad_seeds, cfg.grad_eps, cfg.grad_threshold)
    for r in results:
        print(r.line("max_rel_err"))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    from .checks import run_oracle

    fault = os.environ.get(FAULT_ENV) or None
    try:
        results = run_oracle(
            cfg.seed, cfg.oracle_instances, cfg.oracle_max_extent, cfg.oracle_max_channels, cfg.oracle_threshold, fault
        )
    except ValueError as e:
        raise UsageError(f"{FAULT_ENV}: {e}") from None
    for r in results:
        print(r.line("max_abs_diff"))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"oracle failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    from .bench import format_bench_csv, machine_info, rank_correlation, run_bench

    rows = run_bench(
        (cfg.bench_T, cfg.bench_H, cfg.bench_W),
        cfg.bench_channels,
        cfg.bench_bottleneck,
        repeats=cfg.bench_repeats,
        seed=cfg.seed,
    )
    text = format_bench_csv(rows, machine_info())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"# spearman(time ratio, flop ratio) = {rank_correlation(rows):.3f}")
    return EXIT_OK


def _synth_config(cfg: RunConfig):
    from .synth import SynthConfig

    sc = SynthConfig(
        cfg.num_classes, cfg.T, cfg.H, cfg.W, cfg.object_size, cfg.speed, cfg.noise, cfg.n_train, cfg.n_test, cfg.seed
    )
    try:
        sc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return sc


def cmd_synth(cfg: RunConfig, args) -> int:
    from .synth import generate_synthetic, write_dataset

    train, test = generate_synthetic(_synth_config(cfg))
    root = Path(cfg.out) / "synth"
    write_dataset(train, root / "train", "train")
    write_dataset(test, root / "test", "test")
    print(f"wrote {len(train)} train and {len(test)} test clips to {root}")
    return EXIT_OK


def run_experiment(cfg: RunConfig) -> list[tuple[str, float | None]]:
    """Train each variant in ``cfg.variants``; ``None`` marks divergence.

    Writes per-variant parameter files, a trace CSV and a test-set score
    table under ``OUT/experiment``.
    """
    from .model import BLOCK_KINDS, build_model
    from .pipeline import ScoreTable, write_score_csv
    from .synth import generate_synthetic
    from .tensor import softmax_rows, write_tensor
    from .train import SGDConfig, TrainingDivergedError, format_trace_csv, predict, train_loop

    for kind in cfg.variants:
        if kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown variant {kind!r}; choose from {', '.join(BLOCK_KINDS)}")
    train, test = generate_synthetic(_synth_config(cfg))
    sgd = SGDConfig(
        cfg.lr, cfg.momentum, cfg.epochs, cfg.batch_size, cfg.seed, cfg.lr_decay, cfg.decay_epochs, cfg.clip_norm
    )
    root = Path(cfg.out) / "experiment"
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    rows = []
    for kind in cfg.variants:
        model = build_model(
            kind,
            num_classes=cfg.num_classes,
            stem_channels=cfg.stem_channels,
            stem_kernel=cfg.stem_kernel,
            stem_time=cfg.stem_time,
            bottleneck=cfg.bottleneck or None,
            mask=cfg.mask_spec() if kind == "mask_nonlocal" else None,
            receptive=cfg.receptive,
            output=cfg.output,
            residual_init=cfg.residual_init,
            stem_stride=cfg.stem_stride,
            rng=cfg.seed,
            dtype=np.dtype(cfg.dtype),
        )
        model.normalize_relations = cfg.normalize_relations
        t0 = time.perf_counter()
        try:
            result = train_loop(model, train, sgd, test, threads=cfg.threads)
        except TrainingDivergedError as e:
            log.warning("%s diverged: %s", kind, e)
            rows.append((kind, None))
            continue
        log.info("%s trained in %.1f s", kind, time.perf_counter() - t0)
        (root / f"{kind}_trace.csv").write_text(format_trace_csv(result.trace), encoding="utf-8")
        pdir = root / f"{kind}_params"
        pdir.mkdir(exist_ok=True)
        for name, value in result.model.params.items():
            write_tensor(value, pdir / f"{name}.nlt")
        probs = softmax_rows(predict(result.model, test.videos).astype(np.float64))
        ids = [f"test{i:05d}" for i in range(len(test))]
        write_score_csv(ScoreTable(ids, probs, test.labels.tolist()), root / f"{kind}_scores.csv")
        rows.append((kind, result.trace[-1].test_acc))
    return rows


def format_experiment_table(rows: list[tuple[str, float | None]]) -> str:
    lines = [f"{'model':<16}{'top-1':>8}"]
    for kind, acc in rows:
        lines.append(f"{kind:<16}{'diverged' if acc is None else f'{100 * acc:.1f}':>8}")
    return "\n".join(lines) + "\n"


def cmd_experiment(cfg: RunConfig, args) -> int:
    rows = run_experiment(cfg)
    text = format_experiment_table(rows)
    (Path(cfg.out) / "experiment" / "table.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    diverged = [k for k, acc in rows if acc is None]
    if diverged:
        print(f"diverged: {', '.join(diverged)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_fuse(cfg: RunConfig, args) -> int:
    from .pipeline import ScoreTable, fuse_scores, read_labels_csv, read_score_csv, topk_accuracy, write_score_csv

    tables = [read_score_csv(p) for p in args.tables]
    if args.weights is not None:
        try:
            weights = [float(w) for w in args.weights.split(",") if w.strip()]
        except ValueError as e:
            raise UsageError(f"--weights: {e}") from None
    else:
        weights = list(cfg.fuse_weights) or None
    labels_path = args.labels_path or cfg.labels or None
    if labels_path:
        mapping = read_labels_csv(labels_path)
        missing = [vid for vid in tables[0].ids if vid not in mapping]
        if missing:
            raise UsageError(f"{labels_path}: no label for id {missing[0]!r}")
        tables = [ScoreTable(t.ids, t.scores, [mapping[vid] for vid in t.ids]) for t in tables]
    fused = fuse_scores(tables, weights)
    output = Path(args.output) if args.output else Path(cfg.out) / "fused.csv"
    output.parent.mkdir(parents=True, exist_ok=True)
    write_score_csv(fused, output)
    if fused.has_labels():
        k5 = min(5, fused.num_classes)
        for path, t in zip(args.tables, tables):
            if t.has_labels():
                print(f"{path}: top-1 {100 * topk_accuracy(t, 1):.1f}%  top-{k5} {100 * topk_accuracy(t, k5):.1f}%")
        print(f"fused: top-1 {100 * topk_accuracy(fused, 1):.1f}%  top-{k5} {100 * topk_accuracy(fused, k5):.1f}%")
    else:
        print("fused table has no labels; accuracy not reported")
    print(f"wrote {output}")
    return EXIT_OK


def cmd_inflate(cfg: RunConfig, args) -> int:
    from .pipeline import inflate_kernel
    from .tensor import TensorFormatError, read_tensor, write_tensor

    t = cfg.inflate_t if args.t is None else args.t
    if t < 1:
        raise UsageError(f"temporal extent must be >= 1, got {t}")
    k2 = read_tensor(args.input)
    try:
        k3 = inflate_kernel(k2, t)
    except ValueError as e:
        # A readable file holding the wrong shape is bad input data.
        raise TensorFormatError(f"{args.input}: {e}") from None
    write_tensor(k3, args.output)
    print(f"wrote {args.output} with shape {tuple(k3.shape)}")
    return EXIT_OK


def cmd_config(cfg: RunConfig, args) -> int:
    sys.stdout.write(format_config(cfg))
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
    "bench": cmd_bench,
    "synth": cmd_synth,
    "experiment": cmd_experiment,
    "fuse": cmd_fuse,
    "inflate": cmd_inflate,
    "config": cmd_config,
}


def main(argv: list[str] | None = None) -> int:
    from .pipeline import ScoreTableError
    from .tensor import TensorFormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help and 2 for usage errors.
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as e:
        print(f"nlvideo: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, TensorFormatError, ScoreTableError) as e:
        print(f"nlvideo: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
