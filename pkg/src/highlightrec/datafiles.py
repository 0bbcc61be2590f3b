"""Readers and writers for the on-disk formats.

Binary feature file layout (all integers little-endian)::

    b"CRFS" | u32 version=1 | u32 F | u64 count |
    count x ( u32 key_len | key bytes (utf-8) | F x float32 )
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .dataset import Annotation, FeatureStore, RatingGraph, Segment, Split, TestRecord
from .errors import DataError, InvalidInputError

FEATURE_MAGIC = b"CRFS"
FEATURE_VERSION = 1

ANNOTATION_COLUMNS = ["user_id", "video_id", "t_start", "t_end"]


def _parse_float(text: str, path, line: int, column: str) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise DataError(f"{path}:{line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}:{line}: column {column!r} is not finite: {text!r}")
    return value


def read_annotations(path) -> list[Annotation]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty annotations file")
        header = [h.strip() for h in header]
        if header[:4] != ANNOTATION_COLUMNS or len(header) > 5 or (len(header) == 5 and header[4] != "timestamp"):
            raise DataError(f"{path}:1: expected header user_id,video_id,t_start,t_end[,timestamp], got {','.join(header)}")
        has_ts = len(header) == 5
        out = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            ts = _parse_float(row[4], path, line, "timestamp") if has_ts else None
            try:
                out.append(
                    Annotation(
                        row[0].strip(),
                        row[1].strip(),
                        _parse_float(row[2], path, line, "t_start"),
                        _parse_float(row[3], path, line, "t_end"),
                        ts,
                    )
                )
            except InvalidInputError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    if not out:
        raise DataError(f"{path}: no annotation rows")
    return out


def write_annotations(path, annotations) -> None:
    has_ts = any(a.timestamp is not None for a in annotations)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_COLUMNS + (["timestamp"] if has_ts else []))
        for a in annotations:
            row = [a.user_id, a.video_id, repr(a.t_start), repr(a.t_end)]
            if has_ts:
                row.append(repr(a.timestamp))
            w.writerow(row)


def read_video_durations(path) -> dict[str, float]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["video_id", "duration_seconds"]:
            raise DataError(f"{path}:1: expected header video_id,duration_seconds")
        out: dict[str, float] = {}
        for row in reader:
            if not row:
                continue
            line = reader.line_num
            if len(row) != 2:
                raise DataError(f"{path}:{line}: expected 2 fields, got {len(row)}")
            dur = _parse_float(row[1], path, line, "duration_seconds")
            if dur <= 0:
                raise DataError(f"{path}:{line}: duration must be positive")
            out[row[0].strip()] = dur
    return out


def write_video_durations(path, durations: dict[str, float]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "duration_seconds"])
        for vid, dur in durations.items():
            w.writerow([vid, repr(float(dur))])


# ---------------------------------------------------------------------------
# features


def write_features_binary(path, store: FeatureStore) -> None:
    vecs = np.ascontiguousarray(store.vectors, dtype="<f4")
    with Path(path).open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIQ", FEATURE_VERSION, store.dim, len(store)))
        for key, row in zip(store.keys, vecs):
            raw = key.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(row.tobytes())


def read_features_binary(path) -> FeatureStore:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic bytes {data[:4]!r}")
    if len(data) < 20:
        raise DataError(f"{path}: truncated header")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    pos = 20
    keys, rows = [], []
    row_bytes = 4 * dim
    for n in range(count):
        if pos + 4 > len(data):
            raise DataError(f"{path}: truncated at record {n}")
        (klen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + klen + row_bytes > len(data):
            raise DataError(f"{path}: truncated at record {n}")
        keys.append(data[pos : pos + klen].decode("utf-8"))
        pos += klen
        rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=pos))
        pos += row_bytes
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes")
    vectors = np.stack(rows).astype(np.float64) if rows else np.zeros((0, dim))
    return FeatureStore(keys, vectors)


def write_features_csv(path, store: FeatureStore) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_key"] + [f"f_{k + 1}" for k in range(store.dim)])
        for key, row in zip(store.keys, store.vectors):
            w.writerow([key] + [repr(float(x)) for x in row])


def read_features_csv(path) -> FeatureStore:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "segment_key":
            raise DataError(f"{path}:1: expected header segment_key,f_1,...")
        dim = len(header) - 1
        keys, rows = [], []
        for row in reader:
            if not row:
                continue
            line = reader.line_num
            if len(row) != dim + 1:
                raise DataError(f"{path}:{line}: expected {dim + 1} fields, got {len(row)}")
            keys.append(row[0])
            rows.append([_parse_float(x, path, line, f"f_{k + 1}") for k, x in enumerate(row[1:])])
    try:
        return FeatureStore(keys, np.array(rows, dtype=np.float64).reshape(len(rows), dim))
    except InvalidInputError as exc:
        raise DataError(f"{path}: {exc}") from None


def read_features(path) -> FeatureStore:
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == FEATURE_MAGIC:
        return read_features_binary(path)
    return read_features_csv(path)


# ---------------------------------------------------------------------------
# graph dump


def graph_to_dict(graph: RatingGraph, split: Split | None = None) -> dict:
    doc = {
        "window": graph.window,
        "threshold": graph.threshold,
        "users": graph.user_ids,
        "segments": [
            {"id": s.segment_id, "key": s.key, "video_id": s.video_id, "ordinal": s.ordinal, "start": s.start, "end": s.end}
            for s in graph.segments
        ],
        "edges": graph.edges.tolist(),
    }
    if split is not None:
        doc["split"] = {
            "train": split.train_edges.tolist(),
            "validation": split.validation_edges.tolist(),
            "test": [{"user": r.user, "video_id": r.video_id, "positives": list(r.positives)} for r in split.test_records],
        }
    return doc


def graph_from_dict(doc: dict) -> tuple[RatingGraph, Split | None]:
    segments = [Segment(s["id"], s["video_id"], s["start"], s["end"], s["ordinal"]) for s in doc["segments"]]
    graph = RatingGraph(doc["users"], segments, [tuple(e) for e in doc["edges"]], doc["window"], doc["threshold"])
    split = None
    if "split" in doc:
        sp = doc["split"]
        split = Split(
            np.array(sp["train"], dtype=np.int64).reshape(-1, 2),
            np.array(sp["validation"], dtype=np.int64).reshape(-1, 2),
            [TestRecord(r["user"], r["video_id"], tuple(r["positives"])) for r in sp["test"]],
        )
    return graph, split


def write_graph(path, graph: RatingGraph, split: Split | None = None) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph, split), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_graph(path) -> tuple[RatingGraph, Split | None]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return graph_from_dict(doc)


def write_segment_table(path, graph: RatingGraph) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "segment_key", "video_id", "start", "end", "num_users"])
        for s in graph.segments:
            w.writerow([s.segment_id, s.key, s.video_id, repr(s.start), repr(s.end), len(graph.item_users[s.segment_id])])
