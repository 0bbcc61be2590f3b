"""Highlight annotations -> fixed-window segments -> user/segment rating graph.

Users annotate time intervals of videos.  Each video is cut into equal
windows, an annotation marks a window positive when it covers more than a
threshold fraction of that window, and the resulting binary user-segment
ratings form a bipartite graph.  This module also holds the leave-last-video
split and the BPR negative sampler.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from collections.abc import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, MissingFeatureError, MissingMetadataError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 5.0
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class Annotation:
    user_id: str
    video_id: str
    t_start: float
    t_end: float
    timestamp: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise InvalidInputError(f"non-finite interval in annotation {self}")
        if self.t_start < 0 or self.t_end <= self.t_start:
            raise InvalidInputError(
                f"annotation interval must satisfy 0 <= t_start < t_end, got [{self.t_start}, {self.t_end}]"
            )


@dataclass(frozen=True)
class Segment:
    segment_id: int
    video_id: str
    start: float
    end: float
    ordinal: int = 0

    @property
    def key(self) -> str:
        return segment_key(self.video_id, self.ordinal)

    @property
    def length(self) -> float:
        return self.end - self.start


def segment_key(video_id: str, ordinal: int) -> str:
    return f"{video_id}#{ordinal}"


def segment_video(video_id: str, video_duration: float, window: float = DEFAULT_WINDOW, first_id: int = 0) -> list[Segment]:
    """Cut ``[0, duration)`` into ``ceil(duration / window)`` windows; the last may be short."""
    if not (video_duration > 0) or not math.isfinite(video_duration):
        raise InvalidInputError(f"video {video_id!r}: duration must be positive, got {video_duration}")
    if not (window > 0) or not math.isfinite(window):
        raise InvalidInputError(f"segment window must be positive, got {window}")
    count = math.ceil(video_duration / window)
    # guard against float error producing an empty trailing window
    if (count - 1) * window >= video_duration:
        count -= 1
    return [
        Segment(first_id + k, video_id, k * window, min((k + 1) * window, video_duration), k)
        for k in range(count)
    ]


def overlap_fraction(t_start: float, t_end: float, seg: Segment) -> float:
    covered = min(t_end, seg.end) - max(t_start, seg.start)
    return max(covered, 0.0) / seg.length


def label_positives(annotation: Annotation, segments: Sequence[Segment], threshold: float = DEFAULT_THRESHOLD) -> set[int]:
    """Segments whose own length is covered by more than ``threshold``."""
    if not (0 < threshold <= 1):
        raise InvalidInputError(f"threshold must lie in (0, 1], got {threshold}")
    out = set()
    for seg in segments:
        if seg.video_id != annotation.video_id:
            raise InvalidInputError(f"segment {seg.key} does not belong to video {annotation.video_id!r}")
        if overlap_fraction(annotation.t_start, annotation.t_end, seg) > threshold:
            out.add(seg.segment_id)
    return out


class RatingGraph:
    """Bipartite user/segment graph with binary positive edges.

    Users and segments carry dense indices.  ``user_items[a]`` and
    ``item_users[i]`` are sorted index arrays and are exact transposes.
    Treat instances as immutable once built.
    """

    def __init__(
        self,
        user_ids: Sequence[str],
        segments: Sequence[Segment],
        edges: Iterable[tuple[int, int]],
        window: float = DEFAULT_WINDOW,
        threshold: float = DEFAULT_THRESHOLD,
    ):
        self.user_ids = list(user_ids)
        self.segments = list(segments)
        self.window = window
        self.threshold = threshold
        for idx, seg in enumerate(self.segments):
            if seg.segment_id != idx:
                raise InvalidInputError(f"segment ids must be dense; position {idx} holds id {seg.segment_id}")
        m, n = len(self.user_ids), len(self.segments)
        pairs = sorted({(int(a), int(i)) for a, i in edges})
        for a, i in pairs:
            if not (0 <= a < m and 0 <= i < n):
                raise InvalidInputError(f"edge ({a}, {i}) outside [0, {m}) x [0, {n})")
        self.edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)

        by_user: list[list[int]] = [[] for _ in range(m)]
        by_item: list[list[int]] = [[] for _ in range(n)]
        for a, i in pairs:
            by_user[a].append(i)
            by_item[i].append(a)
        self.user_items = [np.array(sorted(x), dtype=np.int64) for x in by_user]
        self.item_users = [np.array(sorted(x), dtype=np.int64) for x in by_item]

        self.user_index = {u: k for k, u in enumerate(self.user_ids)}
        self.segment_index = {s.key: s.segment_id for s in self.segments}
        videos: dict[str, list[int]] = {}
        for seg in self.segments:
            videos.setdefault(seg.video_id, []).append(seg.segment_id)
        self.video_segments = {v: np.array(ids, dtype=np.int64) for v, ids in videos.items()}

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def segment_keys(self) -> list[str]:
        return [s.key for s in self.segments]

    def degree(self, user: int) -> int:
        return len(self.user_items[user])

    def video_of(self, segment: int) -> str:
        return self.segments[segment].video_id

    def has_edge(self, user: int, segment: int) -> bool:
        items = self.user_items[user]
        k = np.searchsorted(items, segment)
        return bool(k < len(items) and items[k] == segment)

    def restrict(self, edges: np.ndarray) -> RatingGraph:
        """Subgraph over ``edges`` (indices into this graph).

        Keeps every user with its index; keeps only segments of videos that
        have at least one of the given edges, re-indexed densely.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        touched = {self.segments[i].video_id for i in edges[:, 1]}
        remap: dict[int, int] = {}
        kept: list[Segment] = []
        for vid, ids in self.video_segments.items():
            if vid not in touched:
                continue
            for old in ids:
                seg = self.segments[old]
                remap[int(old)] = len(kept)
                kept.append(Segment(len(kept), seg.video_id, seg.start, seg.end, seg.ordinal))
        new_edges = [(int(a), remap[int(i)]) for a, i in edges]
        return RatingGraph(self.user_ids, kept, new_edges, self.window, self.threshold)


def build_graph(
    annotations: Sequence[Annotation],
    durations: dict[str, float],
    window: float = DEFAULT_WINDOW,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[RatingGraph, list[Segment]]:
    """Segment every annotated video and collect deduplicated positive edges.

    Users and videos are indexed in order of first appearance.  All windows of
    an annotated video get indices, including ones nobody selected.
    """
    if not annotations:
        raise InvalidInputError("no annotations given")
    user_ids: list[str] = []
    seen_users: set[str] = set()
    video_order: list[str] = []
    seen_videos: set[str] = set()
    for ann in annotations:
        if ann.user_id not in seen_users:
            seen_users.add(ann.user_id)
            user_ids.append(ann.user_id)
        if ann.video_id not in seen_videos:
            if ann.video_id not in durations:
                raise MissingMetadataError(f"no duration known for video {ann.video_id!r}")
            seen_videos.add(ann.video_id)
            video_order.append(ann.video_id)

    segments: list[Segment] = []
    per_video: dict[str, list[Segment]] = {}
    for vid in video_order:
        segs = segment_video(vid, float(durations[vid]), window, first_id=len(segments))
        per_video[vid] = segs
        segments.extend(segs)

    uidx = {u: k for k, u in enumerate(user_ids)}
    edges = set()
    for ann in annotations:
        for i in label_positives(ann, per_video[ann.video_id], threshold):
            edges.add((uidx[ann.user_id], i))
    graph = RatingGraph(user_ids, segments, edges, window, threshold)
    return graph, segments


def annotation_positives(graph: RatingGraph, ann: Annotation) -> set[int]:
    ids = graph.video_segments.get(ann.video_id)
    if ids is None:
        raise MissingMetadataError(f"video {ann.video_id!r} is not part of the graph")
    return label_positives(ann, [graph.segments[i] for i in ids], graph.threshold)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class TestRecord:
    __test__ = False

    user: int
    video_id: str
    positives: tuple[int, ...]


@dataclass
class Split:
    """Edge partition; all indices refer to the full graph."""

    train_edges: np.ndarray
    validation_edges: np.ndarray
    test_records: list[TestRecord] = field(default_factory=list)

    @property
    def test_edges(self) -> np.ndarray:
        pairs = [(r.user, i) for r in self.test_records for i in r.positives]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _ordered_by_time(annotations: Sequence[Annotation]) -> list[Annotation]:
    # input order is temporal order unless every record carries a timestamp
    if annotations and all(a.timestamp is not None for a in annotations):
        order = sorted(range(len(annotations)), key=lambda k: (annotations[k].timestamp, k))
        return [annotations[k] for k in order]
    return list(annotations)


def split_leave_last_video(
    graph: RatingGraph,
    annotations: Sequence[Annotation],
    min_records: int = 5,
    validation_fraction: float = 0.1,
    rng_seed: int = 0,
) -> Split:
    """Hold out each eligible user's last annotated video, then sample validation edges.

    A user is eligible with at least ``min_records`` annotations.  The held-out
    video is the most recent one that produced at least one positive segment.
    Validation edges are drawn uniformly from the remaining edges.
    """
    if not (0 <= validation_fraction < 1):
        raise InvalidInputError(f"validation_fraction must lie in [0, 1), got {validation_fraction}")
    by_user: dict[int, list[Annotation]] = defaultdict(list)
    for ann in _ordered_by_time(annotations):
        by_user[graph.user_index[ann.user_id]].append(ann)

    held_out: dict[int, str] = {}
    for user, anns in by_user.items():
        if len(anns) < min_records:
            continue
        for ann in reversed(anns):
            if annotation_positives(graph, ann):
                held_out[user] = ann.video_id
                break

    test_pos: dict[int, list[int]] = defaultdict(list)
    remaining = []
    for a, i in graph.edges:
        a, i = int(a), int(i)
        if held_out.get(a) == graph.video_of(i):
            test_pos[a].append(i)
        else:
            remaining.append((a, i))
    records = [TestRecord(a, held_out[a], tuple(sorted(test_pos[a]))) for a in sorted(test_pos)]

    remaining_arr = np.array(remaining, dtype=np.int64).reshape(-1, 2)
    n_val = int(round(validation_fraction * len(remaining_arr)))
    rng = np.random.default_rng(rng_seed)
    val_mask = np.zeros(len(remaining_arr), dtype=bool)
    if n_val:
        val_mask[rng.choice(len(remaining_arr), size=n_val, replace=False)] = True
    return Split(remaining_arr[~val_mask], remaining_arr[val_mask], records)


# ---------------------------------------------------------------------------
# negative sampling


class TripletSampler:
    """Draws BPR negatives for positive (user, segment) edges.

    The negative pool for a positive (a, i) is every segment that some user
    rated plus the unrated segments of i's video, minus everything a rated.
    """

    def __init__(self, graph: RatingGraph, negatives_per_positive: int = 10, rng: np.random.Generator | None = None):
        if negatives_per_positive < 1:
            raise InvalidInputError("negatives_per_positive must be >= 1")
        self.graph = graph
        self.negatives = negatives_per_positive
        self.rng = rng if rng is not None else np.random.default_rng()
        degree = np.array([len(u) for u in graph.item_users])
        self.rated = np.flatnonzero(degree > 0)
        self.unrated_by_video = {
            vid: ids[degree[ids] == 0] for vid, ids in graph.video_segments.items()
        }
        self._user_sets = [set(map(int, items)) for items in graph.user_items]

    def pool_size(self, user: int, segment: int) -> int:
        unrated = self.unrated_by_video[self.graph.video_of(segment)]
        return len(self.rated) + len(unrated) - len(self._user_sets[user])

    def _draw(self, user: int, segment: int) -> np.ndarray | None:
        unrated = self.unrated_by_video[self.graph.video_of(segment)]
        total = len(self.rated) + len(unrated)
        size = total - len(self._user_sets[user])
        if size <= 0:
            return None
        exclude = self._user_sets[user]
        if size * 2 < total:
            pool = np.concatenate([self.rated, unrated])
            pool = pool[~np.isin(pool, self.graph.user_items[user])]
            return pool[self.rng.integers(0, len(pool), size=self.negatives)]
        out = np.empty(self.negatives, dtype=np.int64)
        filled = 0
        while filled < self.negatives:
            k = int(self.rng.integers(0, total))
            j = int(self.rated[k]) if k < len(self.rated) else int(unrated[k - len(self.rated)])
            if j not in exclude:
                out[filled] = j
                filled += 1
        return out

    def triplets(self, positives: np.ndarray) -> np.ndarray:
        """(B, 2) positive edges -> (B * negatives, 3) rows of (a, i, j)."""
        rows = []
        for a, i in np.asarray(positives, dtype=np.int64).reshape(-1, 2):
            neg = self._draw(int(a), int(i))
            if neg is None:
                logger.warning("empty negative pool for user %d, segment %d; positive skipped", a, i)
                continue
            rows.append(np.column_stack([np.full(len(neg), a), np.full(len(neg), i), neg]))
        if not rows:
            return np.zeros((0, 3), dtype=np.int64)
        return np.concatenate(rows).astype(np.int64)


def sample_triplets(
    graph: RatingGraph,
    batch_size: int,
    negatives_per_positive: int = 10,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, int, int]]:
    """Pick ``batch_size`` positive edges uniformly and attach negatives to each."""
    if graph.num_edges == 0:
        raise InvalidInputError("graph has no positive edges")
    rng = rng if rng is not None else np.random.default_rng()
    picks = graph.edges[rng.integers(0, graph.num_edges, size=batch_size)]
    sampler = TripletSampler(graph, negatives_per_positive, rng)
    return [tuple(map(int, row)) for row in sampler.triplets(picks)]


# ---------------------------------------------------------------------------
# content features


class FeatureStore:
    """Dense content vectors keyed by segment key."""

    def __init__(self, keys: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(keys):
            raise InvalidInputError(f"expected {len(keys)} feature rows, got array of shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise InvalidInputError("feature vectors contain NaN or Inf")
        self.keys = list(keys)
        self.index = {k: r for r, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise InvalidInputError("duplicate segment keys in feature store")
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: str) -> bool:
        return key in self.index

    def vector(self, key: str) -> np.ndarray:
        if key not in self.index:
            raise MissingFeatureError([key])
        return self.vectors[self.index[key]]

    def columns(self, keys: Sequence[str]) -> np.ndarray:
        """Features for ``keys`` as an (F, len(keys)) matrix."""
        missing = [k for k in keys if k not in self.index]
        if missing:
            raise MissingFeatureError(missing)
        rows = [self.index[k] for k in keys]
        return self.vectors[rows].T.copy()

    def check_covers(self, graph: RatingGraph) -> None:
        missing = [k for k in graph.segment_keys if k not in self.index]
        if missing:
            raise MissingFeatureError(missing)
