"""Command-line driver.

Every subcommand works on one output directory laid out as::

    OUT/data/         raw inputs written by ``synth`` (annotations, videos, features)
    OUT/graph/        graph.json (graph + split), segments.csv, split CSVs
    OUT/checkpoints/  model-<variant>.ckpt
    OUT/reports/      training logs, metrics JSON/CSV, predictions

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import datafiles, synth
from .checkpoint import Checkpoint
from .dataset import DEFAULT_THRESHOLD, DEFAULT_WINDOW, build_graph, split_leave_last_video
from .errors import DataError, MissingFeatureError, NumericalError
from .evaluation import (
    InductiveScorer,
    embedding_distance_report,
    evaluate_checkpoint,
    sparsity_buckets,
    write_metrics_csv,
    write_metrics_json,
)
from .trainer import TrainConfig, Trainer

logger = logging.getLogger("highlightrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ensure(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_workspace(out: Path):
    path = out / "graph" / "graph.json"
    if not path.exists():
        raise DataError(f"{path} not found; run preprocess or synth first")
    graph, split = datafiles.read_graph(path)
    if split is None:
        raise DataError(f"{path} carries no split")
    return graph, split


def _features_path(args) -> Path:
    if args.features:
        return Path(args.features)
    default = Path(args.out) / "data" / "features.bin"
    if not default.exists():
        raise DataError("no --features given and no data/features.bin in the output directory")
    return default


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    annotations = datafiles.read_annotations(args.annotations)
    durations = datafiles.read_video_durations(args.videos)
    _preprocess(annotations, durations, args)
    return EXIT_OK


def _preprocess(annotations, durations, args) -> None:
    graph, _ = build_graph(annotations, durations, args.window, args.threshold)
    split = split_leave_last_video(graph, annotations, args.min_records, args.validation_fraction, args.seed)
    gdir = _ensure(Path(args.out) / "graph")
    datafiles.write_graph(gdir / "graph.json", graph, split)
    datafiles.write_segment_table(gdir / "segments.csv", graph)
    for name, edges in (("train", split.train_edges), ("validation", split.validation_edges), ("test", split.test_edges)):
        with (gdir / f"{name}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", "segment_key"])
            for a, i in edges:
                w.writerow([graph.user_ids[a], graph.segments[i].key])
    linked = len({int(i) for _, i in graph.edges})
    rows = [
        ("users", graph.num_users),
        ("videos", len(graph.video_segments)),
        ("segments", graph.num_segments),
        ("segments in graph", linked),
        ("annotations", len(annotations)),
        ("positive records", graph.num_edges),
        ("train records", len(split.train_edges)),
        ("validation records", len(split.validation_edges)),
        ("test records", len(split.test_edges)),
        ("test users", len(split.test_records)),
    ]
    for label, value in rows:
        print(f"{label:<20} {value}")


def cmd_synth(args) -> int:
    data = synth.generate(
        num_users=args.users, num_videos=args.videos, segments_per_video=args.segments_per_video,
        clusters=args.clusters, feature_dim=args.feature_dim, noise=args.noise, seed=args.seed, window=args.window,
    )
    ddir = _ensure(Path(args.out) / "data")
    datafiles.write_annotations(ddir / "annotations.csv", data.annotations)
    datafiles.write_video_durations(ddir / "videos.csv", data.durations)
    datafiles.write_features_binary(ddir / "features.bin", data.features)
    _preprocess(data.annotations, data.durations, args)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    doc = TrainConfig.read_file(args.config) if args.config else {}
    overrides = {
        "variant": args.variant, "seed": args.seed, "dim": args.dim, "depth": args.depth,
        "max_epochs": args.epochs, "patience": args.patience, "learning_rate": args.lr,
        "lambda_reg": args.lambda_reg, "lambda_transfer": args.lambda_transfer,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    out = Path(args.out)
    graph, split = _load_workspace(out)
    features = datafiles.read_features(_features_path(args))
    features.check_covers(graph)
    config = _train_config(args)
    trainer = Trainer(graph, features, split, config)
    rdir = _ensure(out / "reports")
    cdir = _ensure(out / "checkpoints")
    tag = config.variant
    try:
        ckpt, report = trainer.run(lambda epoch, _: logger.info("epoch %d done", epoch))
    except NumericalError as exc:
        if exc.last_good is not None:
            exc.last_good.save(cdir / f"model-{tag}.last-good.ckpt")
        raise
    ckpt.save(cdir / f"model-{tag}.ckpt")
    report.write_jsonl(rdir / f"train-{tag}.jsonl")
    summary = {"config": config.to_dict(), **report.summary()}
    (rdir / f"train-{tag}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for e in report.epochs:
        line = f"epoch {e.epoch:3d}  bpr {e.bpr_loss:.4f}  transfer {e.transfer_loss:.4f}"
        if e.disc_loss is not None:
            line += f"  disc {e.disc_loss:.4f}  acc {e.disc_accuracy:.3f}"
        if e.val_ndcg5 is not None:
            line += f"  val ndcg@5 {e.val_ndcg5:.4f}"
        print(line)
    print(f"best epoch {report.best_epoch}; checkpoint {cdir / f'model-{tag}.ckpt'}")
    return EXIT_OK


def _load_checkpoint(args) -> Checkpoint:
    ckpt = Checkpoint.load(args.checkpoint)
    if args.variant is not None:
        ckpt.require_variant(args.variant)
    return ckpt


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    graph, split = _load_workspace(out)
    features = datafiles.read_features(_features_path(args))
    ckpt = _load_checkpoint(args)
    metrics, runs = evaluate_checkpoint(ckpt, graph, split, features, args.split)
    train_graph = graph.restrict(split.train_edges)
    report = {
        "metrics": metrics,
        "sparsity": sparsity_buckets(runs, train_graph),
        "embedding_distances": embedding_distance_report(ckpt, train_graph, features, args.sample_size, args.seed),
        "variant": ckpt.variant,
        "split": args.split,
    }
    rdir = _ensure(out / "reports")
    stem = args.name or f"metrics-{ckpt.variant}-{args.split}"
    write_metrics_json(rdir / f"{stem}.json", report)
    write_metrics_csv(rdir / f"{stem}.csv", report)
    for key in sorted(metrics):
        print(f"{key:<10} {metrics[key]:.4f}" if isinstance(metrics[key], float) else f"{key:<10} {metrics[key]}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.topn < 1:
        raise UsageError("--topn must be >= 1")
    out = Path(args.out)
    graph, _ = _load_workspace(out)
    features = datafiles.read_features(_features_path(args))
    ckpt = _load_checkpoint(args)
    user = ckpt.user_index(args.user)
    if args.video not in graph.video_segments:
        raise DataError(f"unknown video {args.video!r}")
    segs = [graph.segments[i] for i in graph.video_segments[args.video]]
    missing = [s.key for s in segs if s.key not in features]
    if missing:
        raise MissingFeatureError(missing)
    scores = InductiveScorer(ckpt).scores(user, features.columns([s.key for s in segs]))
    order = sorted(range(len(segs)), key=lambda k: (-scores[k], segs[k].segment_id))[: args.topn]
    rows = [(rank, segs[k].key, segs[k].start, segs[k].end, float(scores[k])) for rank, k in enumerate(order, start=1)]
    for rank, key, start, end, score in rows:
        print(f"{rank}\t{key}\t{start:g}-{end:g}\t{score:.6f}")
    if args.save:
        rdir = _ensure(out / "reports")
        with (rdir / f"predict-{args.user}-{args.video}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "segment_key", "start", "end", "score"])
            w.writerows(rows)
    return EXIT_OK


def cmd_report(args) -> int:
    rdir = Path(args.out) / "reports"
    files = sorted(rdir.glob("metrics-*.json")) if rdir.exists() else []
    if not files:
        raise DataError(f"no metrics reports under {rdir}; run evaluate first")
    columns = ["map", "nmsd"] + [f"{m}@{n}" for m in ("hr", "ndcg") for n in (1, 3, 5)]
    print("report".ljust(28) + "".join(c.rjust(9) for c in columns))
    rows = []
    for path in files:
        doc = json.loads(path.read_text(encoding="utf-8"))
        metrics = doc.get("metrics", {})
        rows.append({"report": path.stem, **{c: metrics.get(c) for c in columns}})
        print(path.stem.ljust(28) + "".join(
            (f"{metrics[c]:.4f}" if metrics.get(c) is not None else "-").rjust(9) for c in columns))
    with (rdir / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["report"] + columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", required=True, help="output directory (graph/, checkpoints/, reports/)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="highlightrec", description="Personalized video highlight recommendation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def segmentation(p):
        p.add_argument("--window", type=float, default=DEFAULT_WINDOW, help="segment length in seconds")
        p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD, help="overlap needed for a positive")
        p.add_argument("--min-records", type=int, default=5, help="annotations needed to hold out a test video")
        p.add_argument("--validation-fraction", type=float, default=0.1)

    p = sub.add_parser("preprocess", parents=[common], help="annotations + durations -> graph and split")
    p.add_argument("--annotations", required=True)
    p.add_argument("--videos", required=True, help="CSV video_id,duration_seconds")
    segmentation(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset and preprocess it")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--videos", type=int, default=100)
    p.add_argument("--segments-per-video", type=int, default=8)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=1.0)
    segmentation(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--variant", choices=("E", "A"))
    p.add_argument("--config", help="JSON or key=value file with training settings")
    p.add_argument("--features")
    p.add_argument("--dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-reg", type=float)
    p.add_argument("--lambda-transfer", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a split with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", choices=("E", "A"), help="expected checkpoint variant")
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--features")
    p.add_argument("--sample-size", type=int, default=1000)
    p.add_argument("--name", help="report file stem")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="rank one video's segments for one user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", choices=("E", "A"))
    p.add_argument("--user", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--topn", type=int, default=5)
    p.add_argument("--features")
    p.add_argument("--save", action="store_true", help="also write reports/predict-<user>-<video>.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="tabulate every metrics report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
