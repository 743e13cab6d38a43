"""Command-line front end: ``airtime <command> [options]``.

Commands: synth, ingest, stats, train, finetune, eval, predict.

Every option can also come from ``--config FILE``, a text file of
``key = value`` lines (``#`` starts a comment, keys use the option names with
underscores). Unknown keys are rejected. Flags given on the command line
override the file.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .dataset import (
    FlightSpan, PoseFormatError, SpanError, TrackingError, VideoRecord, dataset_stats, parse_pose_output,
    read_jsonl, tags_to_string, track_skater, write_jsonl,
)
from .embedding import EmbeddingDataError, FixedEmbeddingTable
from .inference import flights_with_air_time, predict_tags
from .metrics import MetricsReport, evaluate
from .model import AirTimeModel, ModelConfig, ModelConfigError
from .numerics import ShapeError
from .synthetic import SynthConfig, SynthConfigError, generate_synthetic, to_pose_output
from .training import (
    CheckpointError, DataError, TrainConfig, TrainingDiverged, classification_accuracy, fine_tune,
    load_checkpoint, prepare, save_checkpoint, train,
)

log = logging.getLogger("airtime")

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    """Bad flags, bad config file, or missing required input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ options


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None
    flag: bool = False


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(s).replace(" ", "").split(",") if x)


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(s).replace(" ", "").split(",") if x)


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


SYNTH_OPTS = [
    Opt("n_videos", int, 200, "number of clips"),
    Opt("seed", int, 0, "generator seed"),
    Opt("fps", float, 30.0, "frame rate"),
    Opt("flights_per_video", _int_list, (1, 2, 3), "comma-separated flight counts"),
    Opt("flight_weights", _float_list, (0.5, 0.3, 0.2), "probability of each flight count"),
    Opt("combo_prob", float, 0.5, "chance that a follow-on jump is a combination"),
    Opt("max_frames", int, 200, "longest clip"),
    Opt("noise_px", float, 2.0, "keypoint noise (pixels, standard deviation)"),
    Opt("cue_jitter", float, 2.0, "frames between true take-off/landing and visible cues"),
    Opt("pose_dir", str, None, "also write pose-estimator JSON per clip plus annotations.jsonl here"),
    Opt("distractor", _bool, False, "add a second person to the pose JSON", flag=True),
]

MODEL_OPTS = [
    Opt("H", int, 64, "embedding and encoder width"),
    Opt("heads", int, 4, "attention heads"),
    Opt("layers", int, 2, "encoder layers"),
    Opt("ffn", int, None, "feed-forward width (default 4H)"),
    Opt("dropout", float, 0.1, "dropout rate during training"),
    Opt("gcn_layers", int, 2, "graph convolution layers"),
    Opt("embedding", str, "gcn", "frame embedding", choices=("gcn", "fixed")),
    Opt("fixed_width", int, 16, "width of fixed embeddings"),
    Opt("embeddings", str, None, "fixed embedding table (JSON Lines)"),
]

TRAIN_OPTS = [
    Opt("epochs", int, 60, "training epochs"),
    Opt("batch_size", int, 16, "batch size"),
    Opt("lr", float, 1e-3, "Adam learning rate"),
    Opt("seed", int, 0, "seed for initialization, shuffling and dropout"),
    Opt("max_len", int, 400, "longest accepted clip"),
    Opt("loss_log", str, None, "per-epoch loss CSV (default: <out>.loss.csv)"),
    Opt("val", str, None, "validation dataset (classification accuracy per epoch)"),
    Opt("stop_at", float, None, "stop when validation accuracy reaches this fraction"),
]

COMMANDS: dict[str, dict] = {
    "synth": dict(
        help="generate a synthetic dataset",
        positional=[("out", "output dataset (JSON Lines)")],
        opts=SYNTH_OPTS,
    ),
    "ingest": dict(
        help="track skaters in pose-estimator output and attach flight annotations",
        positional=[("poses", "pose JSON file or directory of <video_id>.json"),
                    ("annotations", "JSON Lines of {video_id, category, fps, flights}"),
                    ("out", "output dataset (JSON Lines)")],
        opts=[],
    ),
    "stats": dict(
        help="per-category dataset statistics",
        positional=[("dataset", "dataset (JSON Lines)")],
        opts=[Opt("json", _bool, False, "print JSON instead of a table", flag=True)],
    ),
    "train": dict(
        help="train a tagger (or classifier) from scratch",
        positional=[("dataset", "training dataset"), ("out", "checkpoint path")],
        opts=MODEL_OPTS + TRAIN_OPTS + [Opt("head", str, "crf", "output head", choices=("crf", "classification"))],
    ),
    "finetune": dict(
        help="start from a checkpoint's embedding and encoder with a fresh head",
        positional=[("checkpoint", "source checkpoint"), ("dataset", "training dataset"), ("out", "checkpoint path")],
        opts=TRAIN_OPTS + [
            Opt("head", str, "classification", "new output head", choices=("crf", "classification")),
            Opt("embeddings", str, None, "fixed embedding table (JSON Lines)"),
        ],
    ),
    "eval": dict(
        help="score checkpoints on datasets",
        positional=[("dataset", "evaluation dataset(s), comma-separated")],
        opts=[
            Opt("checkpoint", str, None, "checkpoint(s), comma-separated"),
            Opt("oracle", _bool, False, "score gold tags against themselves", flag=True),
            Opt("by_category", _bool, False, "also score each category separately (cross-category grid)", flag=True),
            Opt("report", str, None, "write the JSON report here"),
            Opt("predictions", str, None, "dump per-video predicted and gold tags (JSON Lines)"),
            Opt("embeddings", str, None, "fixed embedding table (JSON Lines)"),
            Opt("batch_size", int, 16, "inference batch size"),
        ],
    ),
    "predict": dict(
        help="predict flights and air times",
        positional=[("checkpoint", "checkpoint"), ("input", "dataset (JSON Lines) or pose JSON file/directory")],
        opts=[
            Opt("fps", float, None, "frame rate of pose JSON input"),
            Opt("out", str, None, "write JSON here instead of stdout"),
            Opt("embeddings", str, None, "fixed embedding table (JSON Lines)"),
            Opt("batch_size", int, 16, "inference batch size"),
        ],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="airtime", description="Jump air-time detection from skater poses.")
    parser.add_argument("--version", action="version", version=f"airtime {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"], description=spec["help"])
        for pos, helptext in spec["positional"]:
            p.add_argument(pos, help=helptext)
        p.add_argument("--config", help="key = value file of option defaults")
        for o in spec["opts"]:
            flag = "--" + o.name.replace("_", "-")
            default_note = "" if o.default is None else f" (default: {_fmt(o.default)})"
            if o.flag:
                p.add_argument(flag, dest=o.name, action="store_const", const=True, default=None,
                               help=o.help + default_note)
            else:
                p.add_argument(flag, dest=o.name, type=o.type, default=None, choices=o.choices,
                               help=o.help + default_note)
    return parser


def _fmt(v) -> str:
    return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def read_config_file(path: str | Path, opts: list[Opt]) -> dict[str, Any]:
    """Parse ``key = value`` lines, rejecting unknown keys and bad values."""
    known = {o.name: o for o in opts}
    out: dict[str, Any] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{n}: unknown key {key!r} (allowed: {', '.join(sorted(known))})")
        opt = known[key]
        try:
            parsed = opt.type(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: bad value for {key}: {exc}") from exc
        if opt.choices and parsed not in opt.choices:
            raise UsageError(f"{path}:{n}: {key} must be one of {opt.choices}")
        out[key] = parsed
    return out


def resolve_options(args: argparse.Namespace, opts: list[Opt]) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    values = {o.name: o.default for o in opts}
    if args.config:
        values.update(read_config_file(args.config, opts))
    for o in opts:
        given = getattr(args, o.name, None)
        if given is not None:
            values[o.name] = given
    return values


# ----------------------------------------------------------------- commands


def cmd_synth(args, opt) -> int:
    fields = {f.name for f in dataclasses.fields(SynthConfig)}
    cfg = SynthConfig(**{k: v for k, v in opt.items() if k in fields})
    records = generate_synthetic(cfg, opt["seed"])
    write_jsonl(records, args.out)
    _write_json(Path(str(args.out) + ".config.json"),
                {"command": "synth", "seed": opt["seed"], "config": _jsonable(dataclasses.asdict(cfg))})
    if opt["pose_dir"]:
        pose_dir = Path(opt["pose_dir"])
        pose_dir.mkdir(parents=True, exist_ok=True)
        with open(pose_dir / "annotations.jsonl", "w") as fh:
            for k, r in enumerate(records):
                frames = to_pose_output(r, seed=opt["seed"] * 1_000_003 + k, distractor=opt["distractor"])
                (pose_dir / f"{r.video_id}.json").write_text(json.dumps(frames))
                fh.write(json.dumps(_annotation(r)) + "\n")
    print(stats_table(records))
    return 0


def _annotation(r: VideoRecord) -> dict:
    return {"video_id": r.video_id, "category": r.category, "fps": r.fps,
            "flights": [{"start": f.start, "end": f.end} for f in r.flights]}


def cmd_ingest(args, opt) -> int:
    poses = Path(args.poses)
    if poses.is_dir():
        files = sorted(p for p in poses.glob("*.json"))
    elif poses.exists():
        files = [poses]
    else:
        raise UsageError(f"no such pose input: {poses}")
    annotations = {}
    with open(args.annotations) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    obj = json.loads(line)
                    annotations[str(obj["video_id"])] = obj
                except (json.JSONDecodeError, KeyError) as exc:
                    raise UsageError(f"{args.annotations}:{n}: bad annotation line ({exc})") from exc
    if not files:
        log.warning("no pose files found in %s; writing an empty dataset", poses)
    records, errors = [], []
    for path in files:
        vid = path.stem
        try:
            ann = annotations.get(vid)
            if ann is None:
                raise DataError("no annotation for this video")
            if "fps" not in ann:
                raise DataError("annotation lacks fps metadata")
            seq = track_skater(parse_pose_output(path), float(ann["fps"]), vid)
            flights = tuple(FlightSpan(int(f["start"]), int(f["end"])) for f in ann.get("flights", []))
            records.append(VideoRecord(vid, str(ann.get("category", "")), seq, flights))
            if seq.held and any(seq.held):
                log.info("%s: %d frames without detections held the previous pose", vid, sum(seq.held))
        except (PoseFormatError, TrackingError, SpanError, DataError, ValueError, KeyError, TypeError) as exc:
            errors.append((vid, str(exc)))
    write_jsonl(records, args.out)
    print(f"ingested {len(records)} of {len(files)} videos into {args.out}")
    for vid, msg in errors:
        print(f"error: {vid}: {msg}", file=sys.stderr)
    return RUNTIME_ERROR if errors else 0


def stats_table(records) -> str:
    stats = dataset_stats(records)
    width = max([len("category")] + [len(k) for k in stats])
    lines = [f"{'category':<{width}}  {'videos':>7}  {'multi-jump':>10}  {'avg frames':>10}"]
    for name, s in stats.items():
        lines.append(f"{name:<{width}}  {s['videos']:>7d}  {s['multi_jump']:>10d}  {s['avg_frames']:>10.1f}")
    return "\n".join(lines)


def cmd_stats(args, opt) -> int:
    records = read_jsonl(args.dataset)
    if opt["json"]:
        print(json.dumps(dataset_stats(records), indent=2))
    else:
        print(stats_table(records))
    return 0


def _load_table(path, width=16):
    return FixedEmbeddingTable.load(path, width) if path else None


def _train_config(opt, head: str) -> TrainConfig:
    return TrainConfig(batch_size=opt["batch_size"], lr=opt["lr"], epochs=opt["epochs"], seed=opt["seed"],
                       max_len=opt["max_len"], head=head)


def _run_training(args, opt, run: Callable[..., Any], effective: dict) -> int:
    log_path = Path(opt["loss_log"] or str(args.out) + ".loss.csv")
    with open(log_path, "w", newline="") as fh:
        fh.write("# " + json.dumps(effective, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])

        def on_epoch(epoch, loss):
            writer.writerow([epoch, repr(loss)])
            fh.flush()
            log.info("epoch %d loss %.6f", epoch, loss)

        try:
            ckpt = run(on_epoch)
        except TrainingDiverged as exc:
            print(f"error: training diverged: {exc}; partial loss log kept in {log_path}", file=sys.stderr)
            return RUNTIME_ERROR
    ckpt.extras["effective_config"] = effective
    save_checkpoint(ckpt, args.out)
    print(f"wrote {args.out} after {ckpt.epoch} epochs (final loss {ckpt.loss_history[-1] if ckpt.loss_history else float('nan'):.6f})")
    return 0


def cmd_train(args, opt) -> int:
    records = read_jsonl(args.dataset)
    if not records:
        raise DataError(f"{args.dataset} holds no videos")
    mcfg = ModelConfig(H=opt["H"], heads=opt["heads"], ffn=opt["ffn"], layers=opt["layers"],
                       dropout=opt["dropout"], gcn_layers=opt["gcn_layers"], embedding=opt["embedding"],
                       fixed_width=opt["fixed_width"], head=opt["head"])
    tcfg = _train_config(opt, opt["head"])
    table = _load_table(opt["embeddings"], opt["fixed_width"])
    val = read_jsonl(opt["val"]) if opt["val"] else None
    effective = {"command": "train", "dataset": str(args.dataset), **_jsonable(opt)}

    def run(on_epoch):
        return train(records, tcfg, mcfg, val_records=val, table=table, on_epoch=on_epoch,
                     stop_at_val_accuracy=opt["stop_at"])

    return _run_training(args, opt, run, effective)


def cmd_finetune(args, opt) -> int:
    source = load_checkpoint(args.checkpoint)
    records = read_jsonl(args.dataset)
    if not records:
        raise DataError(f"{args.dataset} holds no videos")
    tcfg = _train_config(opt, opt["head"])
    table = _load_table(opt["embeddings"], source.model_config.get("fixed_width", 16))
    val = read_jsonl(opt["val"]) if opt["val"] else None
    effective = {"command": "finetune", "source": str(args.checkpoint), "dataset": str(args.dataset),
                 **_jsonable(opt)}

    def run(on_epoch):
        return fine_tune(source, records, tcfg, head=opt["head"], val_records=val, table=table,
                         on_epoch=on_epoch, stop_at_val_accuracy=opt["stop_at"])

    return _run_training(args, opt, run, effective)


def _split_paths(s: str | None) -> list[str]:
    return [p for p in (s or "").split(",") if p]


def cmd_eval(args, opt) -> int:
    datasets = _split_paths(args.dataset)
    checkpoints = _split_paths(opt["checkpoint"])
    if not opt["oracle"] and not checkpoints:
        raise UsageError("eval needs --checkpoint or --oracle")
    sources = ["oracle"] if opt["oracle"] else checkpoints
    records = [r for path in datasets for r in read_jsonl(path)]
    if not records:
        raise DataError("evaluation datasets hold no videos")
    categories = sorted({r.category for r in records})
    results: dict[str, dict] = {}
    dumped = []
    for src in sources:
        if src == "oracle":
            preds = [r.tags() for r in records]
            model = None
        else:
            ckpt = load_checkpoint(src)
            model = ckpt.to_model()
            table = _load_table(opt["embeddings"], model.config.fixed_width)
            if model.config.head == "classification":
                results[src] = {"classification_accuracy": _class_accuracy(ckpt, model, records, table)}
                print(f"{src}: classification accuracy {100 * results[src]['classification_accuracy']['all']:.1f}%")
                continue
            preds = predict_tags(model, records, opt["batch_size"], table)
        golds = [r.tags() for r in records]
        report = evaluate(preds, golds, [r.video_id for r in records], [r.category for r in records])
        entry = {"all": report.to_json()}
        print(report.table(f"{src} on {', '.join(datasets)}"))
        if opt["by_category"]:
            for cat in categories:
                idx = [i for i, r in enumerate(records) if r.category == cat]
                sub = evaluate([preds[i] for i in idx], [golds[i] for i in idx],
                               [records[i].video_id for i in idx], [cat] * len(idx))
                entry[cat] = sub.to_json(include_videos=False)
        results[src] = entry
        for r, p in zip(records, preds):
            dumped.append({"source": src, "video_id": r.video_id, "category": r.category,
                           "predicted": tags_to_string(p), "gold": tags_to_string(r.tags())})
    if opt["by_category"]:
        print(grid_tables(results, categories))
    report_obj = {"command": "eval", "datasets": datasets, "options": _jsonable(opt), "results": results}
    if opt["report"]:
        _write_json(Path(opt["report"]), report_obj)
    if opt["predictions"]:
        with open(opt["predictions"], "w") as fh:
            for row in dumped:
                fh.write(json.dumps(row) + "\n")
    return 0


def _class_accuracy(ckpt, model, records, table) -> dict:
    names = ckpt.class_names or []
    usable = [r for r in records if r.category in names]
    if not usable:
        raise DataError(f"no evaluation video has one of the checkpoint's classes {names}")
    out = {"all": classification_accuracy(model, prepare(usable, model.config, 10**9, names, table))}
    for cat in sorted({r.category for r in usable}):
        sub = [r for r in usable if r.category == cat]
        out[cat] = classification_accuracy(model, prepare(sub, model.config, 10**9, names, table))
    return out


GRID_METRICS = (("accuracy", "Accuracy (%)", "{:.1f}"), ("macro_f1", "F1-score", "{:.3f}"),
                ("mean_error_percentage", "Mean Error Percentage (%)", "{:.2f}"),
                ("avg_edit_distance", "Edit Distance", "{:.3f}"))


def grid_tables(results: dict[str, dict], categories: list[str]) -> str:
    """One block per metric: rows are checkpoints, columns test categories."""
    rows = [src for src, entry in results.items() if "all" in entry]
    if not rows:
        return ""
    name_w = max(len(r) for r in rows + ["model"])
    col_w = max([10] + [len(c) for c in categories])
    blocks = []
    for key, title, fmt in GRID_METRICS:
        lines = [title, f"{'model':<{name_w}}  " + "  ".join(f"{c:>{col_w}}" for c in categories)]
        for src in rows:
            cells = []
            for c in categories:
                v = results[src][c][key]
                cells.append(f"{'n/a' if v is None else fmt.format(v):>{col_w}}")
            lines.append(f"{src:<{name_w}}  " + "  ".join(cells))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def cmd_predict(args, opt) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    if model.config.head != "crf":
        raise UsageError("predict needs a flight-tagging (crf head) checkpoint")
    records = _predict_inputs(Path(args.input), opt["fps"])
    table = _load_table(opt["embeddings"], model.config.fixed_width)
    out = []
    if records:
        for r, tags in zip(records, predict_tags(model, records, opt["batch_size"], table)):
            out.append({"video_id": r.video_id, "fps": r.fps, "tags": tags_to_string(tags),
                        "flights": flights_with_air_time(tags, r.fps)})
    text = json.dumps({"checkpoint": str(args.checkpoint), "videos": out}, indent=2)
    if opt["out"]:
        Path(opt["out"]).write_text(text + "\n")
    else:
        print(text)
    return 0


def _predict_inputs(path: Path, fps: float | None) -> list[VideoRecord]:
    if not path.exists():
        raise UsageError(f"no such input: {path}")
    if path.is_file() and path.suffix in (".jsonl", ".ndjson"):
        return read_jsonl(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    if fps is None:
        raise UsageError("pose JSON carries no frame rate: pass --fps (air time is I-frames / fps)")
    records = []
    for f in files:
        seq = track_skater(parse_pose_output(f), fps, f.stem)
        records.append(VideoRecord(f.stem, "", seq, ()))
    return records


# --------------------------------------------------------------------- main


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


HANDLERS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "stats": cmd_stats, "train": cmd_train,
    "finetune": cmd_finetune, "eval": cmd_eval, "predict": cmd_predict,
}

RUNTIME_FAILURES = (
    DataError, CheckpointError, PoseFormatError, TrackingError, SpanError, EmbeddingDataError, ShapeError,
    OSError, ValueError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        opt = resolve_options(args, COMMANDS[args.command]["opts"])
        return HANDLERS[args.command](args, opt)
    except (UsageError, SynthConfigError, ModelConfigError) as exc:
        print(f"airtime {args.command}: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except RUNTIME_FAILURES as exc:
        print(f"airtime {args.command}: error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
