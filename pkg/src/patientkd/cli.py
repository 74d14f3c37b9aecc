"""Command-line entry point, inference benchmark and learning-curve export.

Subcommands: gen-data, train-teacher, finetune, distill, eval, grid, bench,
curves. All randomness flows from --seed. Results go to files under --out
(checkpoints, metrics.csv, run.json, grid.csv, bench.csv, curves.csv);
diagnostics go to stderr and failures exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    Batch,
    SyntheticTaskSpec,
    Vocabulary,
    build_vocab,
    encode_dataset,
    load_tsv,
    save_tsv,
    synthetic_generate,
)
from .distill import DistillConfig, DistillStrategy, build_layer_map
from .encoder import (
    EncoderConfig,
    build_model,
    count_params,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    GridSpec,
    GridTemplate,
    OptimizerConfig,
    RunRecord,
    TaskData,
    distill,
    evaluate,
    finetune_student,
    grid_search,
    load_run_record,
    train_teacher,
    write_metrics_csv,
    write_run_json,
)
from .autodiff import stop_recording

__all__ = ["main", "bench_inference", "emit_curves", "BenchReport", "BenchRow"]


# ---------------------------------------------------------------------------
# efficiency benchmark


@dataclass(frozen=True)
class BenchRow:
    num_layers: int
    emb_params: int
    trm_params: int
    total_params: int
    inference_seconds: float
    speedup_vs_deepest: float
    param_ratio_vs_deepest: float


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]   # sorted by depth, deepest first


def bench_inference(config_template: EncoderConfig, depths: list[int],
                    batch_size: int, seq_len: int, repeats: int,
                    seed: int = 0) -> BenchReport:
    """Time forward passes of same-width models at several depths.

    One synthetic batch is shared by all depths; a warmup pass is discarded
    and the median of ``repeats`` timed passes is reported. The deepest
    model anchors the speedup and parameter-ratio columns at exactly 1.0.
    No recording happens during timing, and no extra threads are spawned.
    """
    if not depths:
        raise ValueError("depths must be non-empty")
    if repeats < 3:
        raise ValueError(f"repeats must be at least 3, got {repeats}")
    if seq_len > config_template.max_seq_len:
        config_template = replace(config_template, max_seq_len=seq_len)

    rng = np.random.default_rng(seed)
    ids = rng.integers(0, config_template.vocab_size, size=(batch_size, seq_len))
    batch = Batch(token_ids=ids,
                  segment_ids=np.zeros_like(ids),
                  mask=np.ones((batch_size, seq_len)),
                  labels=np.zeros(batch_size, dtype=np.int64),
                  indices=np.arange(batch_size))

    ordered = sorted(set(depths), reverse=True)
    timings: dict[int, float] = {}
    totals: dict[int, int] = {}
    for depth in ordered:
        cfg = replace(config_template, num_layers=depth)
        model = build_model(cfg, seed)
        totals[depth] = count_params(cfg).total
        with stop_recording():
            forward(model, batch)  # warmup
            samples = []
            for _ in range(repeats):
                start = time.perf_counter()
                forward(model, batch)
                samples.append(time.perf_counter() - start)
        timings[depth] = statistics.median(samples)

    deepest = ordered[0]
    rows = []
    for depth in ordered:
        counts = count_params(replace(config_template, num_layers=depth))
        rows.append(BenchRow(
            num_layers=depth,
            emb_params=counts.emb_params,
            trm_params=counts.trm_params,
            total_params=counts.total,
            inference_seconds=timings[depth],
            speedup_vs_deepest=1.0 if depth == deepest else timings[deepest] / timings[depth],
            param_ratio_vs_deepest=1.0 if depth == deepest else totals[deepest] / totals[depth],
        ))
    return BenchReport(rows=tuple(rows))


def write_bench_csv(report: BenchReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["num_layers", "emb_params", "trm_params", "total_params",
                         "inference_seconds", "speedup_vs_deepest", "param_ratio_vs_deepest"])
        for r in report.rows:
            writer.writerow([r.num_layers, r.emb_params, r.trm_params, r.total_params,
                             repr(r.inference_seconds), repr(r.speedup_vs_deepest),
                             repr(r.param_ratio_vs_deepest)])


def emit_curves(run_records: list[tuple[str, RunRecord]], out_path) -> None:
    """Long-format learning curves: one row per (run, epoch, split)."""
    if not run_records:
        raise ValueError("at least one run record is required")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(out_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["run_id", "epoch", "split", "accuracy"])
            for run_id, record in run_records:
                for e in record.epochs:
                    writer.writerow([run_id, e.epoch, "train", repr(e.train_accuracy)])
                    writer.writerow([run_id, e.epoch, "dev", repr(e.dev_accuracy)])
    except OSError as exc:
        raise OSError(f"cannot write curves to {out_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# shared helpers


def _detect_schema(path) -> str:
    """'pair' when the first data row has three columns, else 'single'."""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        for row in csv.reader(handle, delimiter="\t"):
            if row:
                return "pair" if len(row) == 3 else "single"
    raise ValueError(f"{path}: file is empty")


def _load_examples(path):
    return load_tsv(path, _detect_schema(path))


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _encoder_config_from_json(path, train_examples) -> EncoderConfig:
    raw = _read_json(path)
    if "vocab_size" not in raw:
        raw["vocab_size"] = len(build_vocab(train_examples))
    if "num_classes" not in raw:
        raw["num_classes"] = max(ex.label for ex in train_examples) + 1
    return EncoderConfig.from_dict(raw)


def _save_vocab(vocab: Vocabulary, ckpt_dir) -> None:
    Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    (Path(ckpt_dir) / "vocab.json").write_text(
        json.dumps({"tokens": vocab.to_list()}, indent=2) + "\n", encoding="utf-8")


def _load_vocab(ckpt_dir) -> Vocabulary:
    path = Path(ckpt_dir) / "vocab.json"
    if not path.exists():
        raise FileNotFoundError(f"no vocab.json next to checkpoint in {ckpt_dir}")
    return Vocabulary(json.loads(path.read_text(encoding="utf-8"))["tokens"])


def _task_data(vocab: Vocabulary, max_seq_len: int, train_path, dev_path,
               test_path=None) -> TaskData:
    train = encode_dataset(vocab, _load_examples(train_path), max_seq_len)
    dev = encode_dataset(vocab, _load_examples(dev_path), max_seq_len)
    test = encode_dataset(vocab, _load_examples(test_path), max_seq_len) if test_path else None
    return TaskData(train=train, dev=dev, test=test)


def _save_run(out_dir, model, vocab, record) -> None:
    out = Path(out_dir)
    save_checkpoint(model, out / "checkpoint")
    _save_vocab(vocab, out / "checkpoint")
    write_metrics_csv(record, out / "metrics.csv")
    write_run_json(record, out / "run.json")


def _opt_from_args(args) -> OptimizerConfig:
    return OptimizerConfig(learning_rate=args.lr, batch_size=args.batch,
                           epochs=args.epochs, seed=args.seed)


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_data(args) -> int:
    spec = SyntheticTaskSpec(kind=args.task, vocab_size=args.vocab_size,
                             seq_len=args.seq_len, count=args.count, seed=args.seed)
    train, dev, test = synthetic_generate(spec)
    out = Path(args.out)
    save_tsv(train, out / "train.tsv")
    save_tsv(dev, out / "dev.tsv")
    save_tsv(test, out / "test.tsv")
    print(f"wrote {len(train)}/{len(dev)}/{len(test)} examples under {out}")
    return 0


def _cmd_train_teacher(args) -> int:
    train_examples = _load_examples(args.data)
    config = _encoder_config_from_json(args.config, train_examples)
    vocab = build_vocab(train_examples)
    data = _task_data(vocab, config.max_seq_len, args.data, args.dev, args.test)
    opt = _opt_from_args(args)
    model, record = train_teacher(config, opt, data)
    _save_run(args.out, model, vocab, record)
    best = record.best_dev_accuracy()
    print(f"teacher: best dev accuracy {best:.4f} (epoch {record.selected_epoch})")
    return 0


def _cmd_finetune(args) -> int:
    if args.teacher is None and args.config is None:
        raise ValueError("finetune needs --teacher or --config")
    opt = _opt_from_args(args)
    if args.teacher is not None:
        teacher = load_checkpoint(args.teacher)
        vocab = _load_vocab(args.teacher)
        data = _task_data(vocab, teacher.config.max_seq_len, args.data, args.dev, args.test)
        model, record = finetune_student(teacher, args.student_layers, None, opt, data)
    else:
        train_examples = _load_examples(args.data)
        config = _encoder_config_from_json(args.config, train_examples)
        vocab = build_vocab(train_examples)
        data = _task_data(vocab, config.max_seq_len, args.data, args.dev, args.test)
        model, record = finetune_student(None, args.student_layers, config, opt, data)
    _save_run(args.out, model, vocab, record)
    print(f"finetune: best dev accuracy {record.best_dev_accuracy():.4f} "
          f"(epoch {record.selected_epoch})")
    return 0


def _cmd_distill(args) -> int:
    teacher = load_checkpoint(args.teacher)
    strategy = DistillStrategy.parse(args.strategy)
    # fail fast on an unsatisfiable layer map, before any data or compute
    build_layer_map(teacher.config.num_layers, args.student_layers, strategy)
    beta = args.beta
    if beta is None:
        beta = 0.0 if strategy is DistillStrategy.NONE else 100.0
    dcfg = DistillConfig(alpha=args.alpha, beta=beta, temperature=args.temp,
                         strategy=strategy,
                         symmetric_temperature=args.symmetric_temperature)
    vocab = _load_vocab(args.teacher)
    data = _task_data(vocab, teacher.config.max_seq_len, args.data, args.dev, args.test)
    opt = _opt_from_args(args)
    model, record = distill(teacher, args.student_layers, dcfg, opt, data,
                            cache_teacher=args.cache_teacher)
    _save_run(args.out, model, vocab, record)
    print(f"distill[{strategy.value}]: best dev accuracy {record.best_dev_accuracy():.4f} "
          f"(epoch {record.selected_epoch})")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.teacher)
    vocab = _load_vocab(args.teacher)
    dataset = encode_dataset(vocab, _load_examples(args.data), model.config.max_seq_len)
    result = evaluate(model, dataset, batch_size=args.batch)
    print(f"accuracy {result.accuracy:.6f}")
    for cls in sorted(result.per_class_total):
        print(f"class {cls}: {result.per_class_correct[cls]}/{result.per_class_total[cls]}")
    return 0


def _cmd_grid(args) -> int:
    teacher = load_checkpoint(args.teacher)
    strategy = DistillStrategy.parse(args.strategy)
    build_layer_map(teacher.config.num_layers, args.student_layers, strategy)
    raw = _read_json(args.config)
    grid = GridSpec(temperatures=tuple(raw["temperatures"]),
                    alphas=tuple(raw["alphas"]),
                    betas=tuple(raw["betas"]),
                    learning_rates=tuple(raw["learning_rates"]))
    vocab = _load_vocab(args.teacher)
    data = _task_data(vocab, teacher.config.max_seq_len, args.data, args.dev)
    template = GridTemplate(
        teacher=teacher, student_layers=args.student_layers, strategy=strategy,
        opt=OptimizerConfig(learning_rate=raw["learning_rates"][0],
                            batch_size=args.batch, epochs=args.epochs, seed=args.seed),
        data=data, cache_teacher=args.cache_teacher)
    results = grid_search(grid, template, out_path=Path(args.out) / "grid.csv")
    ok = [r for r in results if r.record is not None]
    print(f"grid: {len(ok)}/{len(results)} runs succeeded; table in {args.out}/grid.csv")
    if ok:
        top = ok[0]
        print(f"best: T={top.temperature} alpha={top.alpha} beta={top.beta} "
              f"lr={top.learning_rate} dev={top.best_dev_accuracy:.4f}")
    return 0


_DEFAULT_BENCH_CONFIG = EncoderConfig(
    vocab_size=1000, max_seq_len=64, hidden_dim=128, num_layers=12,
    num_heads=8, ffn_dim=512, num_classes=2)


def _cmd_bench(args) -> int:
    if args.config:
        raw = _read_json(args.config)
        raw.setdefault("vocab_size", 1000)
        raw.setdefault("num_classes", 2)
        raw.setdefault("num_layers", max(args.depths_list))
        template = EncoderConfig.from_dict(raw)
    else:
        template = _DEFAULT_BENCH_CONFIG
    report = bench_inference(template, args.depths_list, batch_size=args.batch,
                             seq_len=template.max_seq_len, repeats=args.repeats,
                             seed=args.seed)
    out = Path(args.out)
    write_bench_csv(report, out / "bench.csv")
    print(f"{'layers':>6} {'total params':>14} {'seconds':>10} {'speedup':>8}")
    for r in report.rows:
        print(f"{r.num_layers:>6} {r.total_params:>14,} {r.inference_seconds:>10.4f} "
              f"{r.speedup_vs_deepest:>8.2f}")
    return 0


def _cmd_curves(args) -> int:
    records = [(Path(run).name, load_run_record(run)) for run in args.runs]
    emit_curves(records, args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_data_flags(sub, test: bool = True):
    sub.add_argument("--data", required=True, help="training TSV")
    sub.add_argument("--dev", required=True, help="dev TSV")
    if test:
        sub.add_argument("--test", default=None, help="optional test TSV")


def _add_opt_flags(sub, lr_default: float):
    sub.add_argument("--lr", type=float, default=lr_default, help="learning rate")
    sub.add_argument("--batch", type=int, default=32, help="batch size")
    sub.add_argument("--epochs", type=int, default=4, help="training epochs")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patientkd",
        description="Train, compress and benchmark miniature BERT-style classifiers.")
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen-data", help="generate a synthetic task as TSV splits")
    gen.add_argument("--task", required=True, choices=["parity", "majority", "pattern-pair"])
    gen.add_argument("--vocab-size", type=int, default=2)
    gen.add_argument("--seq-len", type=int, default=16)
    gen.add_argument("--count", type=int, default=2000, help="total examples across splits")
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(handler=_cmd_gen_data)

    teach = subs.add_parser("train-teacher", help="fine-tune a teacher on hard labels")
    teach.add_argument("--config", required=True, help="encoder config JSON")
    _add_data_flags(teach)
    teach.add_argument("--out", required=True)
    _add_opt_flags(teach, 1e-3)
    teach.set_defaults(handler=_cmd_train_teacher)

    ft = subs.add_parser("finetune", help="directly fine-tune a student (FT baseline)")
    ft.add_argument("--teacher", default=None, help="teacher checkpoint directory")
    ft.add_argument("--config", default=None, help="encoder config JSON (no-teacher mode)")
    ft.add_argument("--student-layers", type=int, required=True)
    _add_data_flags(ft)
    ft.add_argument("--out", required=True)
    _add_opt_flags(ft, 1e-3)
    ft.set_defaults(handler=_cmd_finetune)

    dist = subs.add_parser("distill", help="distill a teacher into a shallower student")
    dist.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    dist.add_argument("--student-layers", type=int, required=True)
    dist.add_argument("--strategy", required=True, choices=["skip", "last", "none"])
    dist.add_argument("--alpha", type=float, default=0.5, help="soft-label weight")
    dist.add_argument("--beta", type=float, default=None,
                      help="patient-loss weight (default 100, or 0 for strategy none)")
    dist.add_argument("--temp", type=float, default=5.0, help="soft-label temperature")
    _add_data_flags(dist)
    dist.add_argument("--out", required=True)
    _add_opt_flags(dist, 1e-3)
    dist.add_argument("--cache-teacher", action="store_true",
                      help="precompute teacher outputs once per example")
    dist.add_argument("--symmetric-temperature", action="store_true",
                      help="apply the temperature to the student too, with the "
                           "T^2 gradient correction")
    dist.set_defaults(handler=_cmd_distill)

    ev = subs.add_parser("eval", help="evaluate a checkpoint on a TSV split")
    ev.add_argument("--teacher", required=True, help="checkpoint directory to evaluate")
    ev.add_argument("--data", required=True, help="TSV split")
    ev.add_argument("--batch", type=int, default=256)
    ev.set_defaults(handler=_cmd_eval)

    grid = subs.add_parser("grid", help="grid search over distillation hyperparameters")
    grid.add_argument("--teacher", required=True)
    grid.add_argument("--student-layers", type=int, required=True)
    grid.add_argument("--strategy", required=True, choices=["skip", "last", "none"])
    grid.add_argument("--config", required=True,
                      help="grid JSON: temperatures, alphas, betas, learning_rates")
    _add_data_flags(grid, test=False)
    grid.add_argument("--out", required=True)
    grid.add_argument("--batch", type=int, default=32)
    grid.add_argument("--epochs", type=int, default=4)
    grid.add_argument("--cache-teacher", action="store_true")
    grid.set_defaults(handler=_cmd_grid)

    bench = subs.add_parser("bench", help="parameter counts and inference timing by depth")
    bench.add_argument("--config", default=None, help="encoder config JSON template")
    bench.add_argument("--depths", dest="depths_list", type=_csv_ints, default=[12, 6, 3],
                       help="comma-separated depths, e.g. 12,6,3")
    bench.add_argument("--batch", type=int, default=64)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--out", required=True)
    bench.set_defaults(handler=_cmd_bench)

    curves = subs.add_parser("curves", help="export learning curves from run directories")
    curves.add_argument("runs", nargs="+", help="run directories (with metrics.csv)")
    curves.add_argument("--out", required=True, help="output CSV path")
    curves.set_defaults(handler=_cmd_curves)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.handler(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
