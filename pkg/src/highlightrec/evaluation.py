"""Inductive test-time scoring, ranking metrics and diagnostics.

A :class:`RankingRun` is one (user, video) candidate list with scores and
ground-truth positives.  Candidates are ranked by descending score with ties
broken by ascending segment index, and every metric reads only that order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from collections.abc import Iterable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .dataset import FeatureStore, RatingGraph, Split
from .errors import DataError, InvalidInputError
from .gnn import propagate
from .transfer import transfer_forward

logger = logging.getLogger(__name__)

DEFAULT_NS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class RankingRun:
    user: int
    video_id: str
    candidates: tuple[int, ...]
    scores: tuple[float, ...]
    positives: frozenset[int]

    def __post_init__(self):
        if len(self.candidates) < 1:
            raise InvalidInputError("a ranking run needs at least one candidate")
        if len(self.scores) != len(self.candidates):
            raise InvalidInputError("one score per candidate required")
        if not all(math.isfinite(s) for s in self.scores):
            raise InvalidInputError("scores must be finite")
        if not self.positives <= set(self.candidates):
            raise InvalidInputError("positives must be a subset of candidates")

    @classmethod
    def build(cls, user, video_id, candidates, scores, positives) -> RankingRun:
        return cls(int(user), str(video_id), tuple(int(c) for c in candidates),
                   tuple(float(s) for s in scores), frozenset(int(p) for p in positives))

    def ranked(self) -> list[int]:
        order = sorted(range(len(self.candidates)), key=lambda k: (-self.scores[k], self.candidates[k]))
        return [self.candidates[k] for k in order]

    def relevance(self) -> list[bool]:
        return [c in self.positives for c in self.ranked()]


def average_precision(run: RankingRun) -> float:
    """Mean of precision@r over the ranks r that hold a positive."""
    rel = run.relevance()
    g = sum(rel)
    if g == 0:
        raise InvalidInputError("average precision undefined without positives")
    hits, acc = 0, 0.0
    for r, is_pos in enumerate(rel, start=1):
        if is_pos:
            hits += 1
            acc += hits / r
    return acc / g


def nmsd(run: RankingRun) -> float:
    """Normalized depth at which a majority of positives has been shown.

    With g positives the majority is ``g // 2 + 1``; if k is the shortest
    ranking prefix holding that many positives, the score is
    ``(k - majority) / (n - majority)`` for n candidates (0 when n equals the
    majority).  0 is best, 1 is worst.
    """
    rel = run.relevance()
    g = sum(rel)
    if g == 0:
        raise InvalidInputError("NMSD undefined without positives")
    need = g // 2 + 1
    n = len(rel)
    hits = 0
    for k, is_pos in enumerate(rel, start=1):
        hits += is_pos
        if hits >= need:
            break
    if n <= need:
        return 0.0
    return (k - need) / (n - need)


def topn_metrics(run: RankingRun, n: int) -> tuple[float, float, float]:
    """(HR@N, Recall@N, NDCG@N) for one run.

    HR@N is hits / N (precision form); NDCG uses binary gains.
    """
    if n < 1:
        raise InvalidInputError("N must be >= 1")
    rel = run.relevance()
    g = sum(rel)
    if g == 0:
        raise InvalidInputError("top-N metrics undefined without positives")
    hits, dcg = 0, 0.0
    for r, is_pos in enumerate(rel[:n], start=1):
        if is_pos:
            hits += 1
            dcg += 1.0 / math.log2(r + 1)
    idcg = 0.0
    for r in range(1, min(n, g) + 1):
        idcg += 1.0 / math.log2(r + 1)
    return hits / n, hits / g, dcg / idcg


def ndcg_at(run: RankingRun, n: int) -> float:
    return topn_metrics(run, n)[2]


def mean_average_precision(runs: Iterable[RankingRun]) -> float:
    vals = [average_precision(r) for r in runs if r.positives]
    return float(np.mean(vals)) if vals else float("nan")


def summarize(runs: Sequence[RankingRun], ns: Sequence[int] = DEFAULT_NS) -> dict:
    """Averages of every metric over runs that have positives."""
    usable = [r for r in runs if r.positives]
    skipped = len(runs) - len(usable)
    if skipped:
        logger.warning("%d ranking runs without positives excluded from metrics", skipped)
    out: dict = {"runs": len(usable), "excluded": skipped}
    if not usable:
        return out
    out["map"] = float(np.mean([average_precision(r) for r in usable]))
    out["nmsd"] = float(np.mean([nmsd(r) for r in usable]))
    for n in ns:
        tri = np.array([topn_metrics(r, n) for r in usable])
        out[f"hr@{n}"] = float(tri[:, 0].mean())
        out[f"recall@{n}"] = float(tri[:, 1].mean())
        out[f"ndcg@{n}"] = float(tri[:, 2].mean())
    return out


# ---------------------------------------------------------------------------
# candidate records and inductive scoring


@dataclass(frozen=True)
class EvalRecord:
    user: int
    video_id: str
    candidates: tuple[int, ...]
    positives: frozenset[int]


def _train_sets(split: Split) -> dict[int, set[int]]:
    seen: dict[int, set[int]] = defaultdict(set)
    for a, i in split.train_edges:
        seen[int(a)].add(int(i))
    return seen


def eval_records(graph: RatingGraph, split: Split, which: str = "test") -> list[EvalRecord]:
    """Candidate lists over the full graph: every segment of the video the user
    did not rate positively in training."""
    train = _train_sets(split)
    grouped: dict[tuple[int, str], set[int]] = {}
    if which == "test":
        for rec in split.test_records:
            grouped[(rec.user, rec.video_id)] = set(rec.positives)
    elif which == "validation":
        for a, i in split.validation_edges:
            grouped.setdefault((int(a), graph.video_of(int(i))), set()).add(int(i))
    else:
        raise InvalidInputError(f"unknown split part {which!r}")
    out = []
    for (a, vid), pos in sorted(grouped.items()):
        cands = tuple(int(c) for c in graph.video_segments[vid] if int(c) not in train[a])
        if not cands:
            logger.warning("user %d video %s: empty candidate set, record skipped", a, vid)
            continue
        out.append(EvalRecord(a, vid, cands, frozenset(pos)))
    return out


class InductiveScorer:
    """Scores segments for trained users via T(W0 f) only, never the graph."""

    def __init__(self, checkpoint: Checkpoint):
        self.checkpoint = checkpoint
        self.users = checkpoint.user_embeddings
        self.w0 = checkpoint.w0
        self.tparams = checkpoint.transfer_params
        self.activation = checkpoint.config.get("activation", "relu")

    def item_embeddings(self, features: np.ndarray) -> np.ndarray:
        """(F, B) content -> (D, B) approximated graph embeddings."""
        return transfer_forward(self.w0 @ features, self.tparams, self.activation).value

    def scores(self, user: int, features: np.ndarray) -> np.ndarray:
        if not (0 <= user < self.users.shape[1]):
            raise DataError(f"unknown user index {user}")
        return self.users[:, user] @ self.item_embeddings(features)


def score_test_record(record: EvalRecord, scorer: InductiveScorer, features: FeatureStore, graph: RatingGraph) -> RankingRun:
    keys = [graph.segments[c].key for c in record.candidates]
    s = scorer.scores(record.user, features.columns(keys))
    return RankingRun.build(record.user, record.video_id, record.candidates, s, record.positives)


def score_records(records, checkpoint: Checkpoint, features: FeatureStore, graph: RatingGraph) -> list[RankingRun]:
    scorer = InductiveScorer(checkpoint)
    return [score_test_record(r, scorer, features, graph) for r in records]


def evaluate_checkpoint(checkpoint: Checkpoint, graph: RatingGraph, split: Split, features: FeatureStore,
                        which: str = "test", ns: Sequence[int] = DEFAULT_NS) -> tuple[dict, list[RankingRun]]:
    runs = score_records(eval_records(graph, split, which), checkpoint, features, graph)
    return summarize(runs, ns), runs


# ---------------------------------------------------------------------------
# diagnostics


def sparsity_buckets(runs: Sequence[RankingRun], train_graph: RatingGraph, edges: Sequence[int] = (8, 16),
                     ns: Sequence[int] = (5,)) -> list[dict]:
    """Metrics per user group split by training degree at ``edges``.

    With edges (8, 16) the groups are [0, 8), [8, 16) and [16, inf).  Empty
    groups are left out.
    """
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])) or any(e < 0 for e in edges):
        raise InvalidInputError(f"bucket edges must be non-negative and strictly increasing: {edges}")
    bounds = [0] + edges + [math.inf]
    out = []
    for lo, hi in zip(bounds, bounds[1:]):
        members = [r for r in runs if lo <= train_graph.degree(r.user) < hi]
        if not members:
            continue
        label = f"[{lo},{hi})" if hi != math.inf else f"[{lo},)"
        row = {"bucket": label, "lo": lo, "hi": None if hi == math.inf else hi}
        row.update(summarize(members, ns))
        out.append(row)
    return out


def embedding_distance_report(checkpoint: Checkpoint, train_graph: RatingGraph, features: FeatureStore,
                              sample_size: int = 1000, seed: int = 0) -> dict:
    """Mean per-item Euclidean distances between the layer-0 embedding v0,
    the graph output v and the transferred embedding v_hat."""
    feats = features.columns(train_graph.segment_keys)
    cfg = checkpoint.config
    state = propagate(train_graph, checkpoint.gnn_params, feats, cfg.get("pooling", "mean"), cfg.get("activation", "relu"))
    n = train_graph.num_segments
    if sample_size >= n:
        items = np.arange(n)
    else:
        items = np.sort(np.random.default_rng(seed).choice(n, size=sample_size, replace=False))
    v0 = state.V[0].value[:, items]
    v = state.items.value[:, items]
    source = state.V[0].value if cfg.get("transfer_input", "content") == "fused" else state.content.value
    vhat = transfer_forward(source[:, items], checkpoint.transfer_params, cfg.get("activation", "relu")).value

    def mean_dist(a, b):
        return float(np.mean(np.linalg.norm(a - b, axis=0)))

    return {
        "items": int(len(items)),
        "d_v0_v": mean_dist(v0, v),
        "d_v0_vhat": mean_dist(v0, vhat),
        "d_vhat_v": mean_dist(vhat, v),
    }


def transfer_error(checkpoint_or_params, train_graph: RatingGraph, feats: np.ndarray, config: dict) -> float:
    """Mean squared distance ||v_hat_i - v_i||^2 over all training items."""
    if isinstance(checkpoint_or_params, Checkpoint):
        gp, tp = checkpoint_or_params.gnn_params, checkpoint_or_params.transfer_params
    else:
        gp, tp = checkpoint_or_params
    state = propagate(train_graph, gp, feats, config.get("pooling", "mean"), config.get("activation", "relu"))
    source = state.V[0].value if config.get("transfer_input", "content") == "fused" else state.content.value
    vhat = transfer_forward(source, tp, config.get("activation", "relu")).value
    return float(np.mean(np.sum((vhat - state.items.value) ** 2, axis=0)))


# ---------------------------------------------------------------------------
# report files


def write_metrics_json(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_metrics_csv(path, report: dict) -> None:
    """Flat ``section,key,value`` rows for plotting."""
    rows = []
    for section, content in sorted(report.items()):
        if isinstance(content, dict):
            for k, v in sorted(content.items()):
                rows.append((section, k, v))
        elif isinstance(content, list):
            for entry in content:
                label = entry.get("bucket", "")
                for k, v in sorted(entry.items()):
                    if k != "bucket":
                        rows.append((f"{section}{label}", k, v))
        else:
            rows.append(("", section, content))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["section", "metric", "value"])
        w.writerows(rows)
