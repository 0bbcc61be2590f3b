"""Synthetic highlight data with planted user and segment clusters.

Every segment belongs to one of ``clusters`` content clusters and its feature
vector is that cluster's centroid plus Gaussian noise.  Every user belongs to
one of the same number of taste clusters and selects a segment with a high
probability when the clusters match and a low one otherwise.  Videos split
into an "old" pool, annotated during each user's history, and a "new" pool;
each user's final annotation is on a new video, so leave-last-video testing
ranks segments that carry no training links at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Annotation, FeatureStore, segment_key
from .errors import InvalidInputError


@dataclass
class SynthData:
    annotations: list[Annotation]
    durations: dict[str, float]
    features: FeatureStore
    user_cluster: dict[str, int]
    segment_cluster: dict[str, int]
    new_videos: set[str] = field(default_factory=set)


def generate(
    num_users: int = 200,
    num_videos: int = 100,
    segments_per_video: int = 8,
    clusters: int = 4,
    feature_dim: int = 32,
    noise: float = 1.0,
    seed: int = 0,
    window: float = 5.0,
    new_video_fraction: float = 0.2,
    min_history: int = 4,
    max_history: int = 12,
    match_prob: float = 0.8,
    mismatch_prob: float = 0.05,
) -> SynthData:
    for name, value in (("users", num_users), ("videos", num_videos), ("segments per video", segments_per_video),
                        ("clusters", clusters), ("feature dim", feature_dim)):
        if value < 1:
            raise InvalidInputError(f"{name} must be positive, got {value}")
    if noise < 0:
        raise InvalidInputError("noise must be non-negative")
    if clusters > min(num_users, num_videos * segments_per_video):
        raise InvalidInputError(f"clusters={clusters} exceeds min(users, segments)={min(num_users, num_videos * segments_per_video)}")
    n_new = max(1, int(round(new_video_fraction * num_videos)))
    n_old = num_videos - n_new
    if n_old < 1:
        raise InvalidInputError("need at least one non-held-out video")
    min_history = min(min_history, n_old)
    max_history = max(min_history, min(max_history, n_old))

    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((clusters, feature_dim))
    videos = [f"v{k:04d}" for k in range(num_videos)]
    old, new = videos[:n_old], videos[n_old:]
    durations = {v: float(segments_per_video * window) for v in videos}

    seg_cluster = {}
    keys, rows = [], []
    for v in videos:
        labels = rng.integers(0, clusters, size=segments_per_video)
        for k, c in enumerate(labels):
            key = segment_key(v, k)
            seg_cluster[key] = int(c)
            keys.append(key)
            rows.append(centroids[c] + noise * rng.standard_normal(feature_dim))
    features = FeatureStore(keys, np.array(rows))

    users = [f"u{k:04d}" for k in range(num_users)]
    user_cluster = {u: int(rng.integers(0, clusters)) for u in users}

    def annotate(user: str, video: str) -> list[Annotation]:
        taste = user_cluster[user]
        labels = np.array([seg_cluster[segment_key(video, k)] for k in range(segments_per_video)])
        prob = np.where(labels == taste, match_prob, mismatch_prob)
        chosen = rng.random(segments_per_video) < prob
        if not chosen.any():
            liked = np.flatnonzero(labels == taste)
            pick = liked if liked.size else np.arange(segments_per_video)
            chosen[rng.choice(pick)] = True
        out = []
        k = 0
        while k < segments_per_video:
            if not chosen[k]:
                k += 1
                continue
            end = k
            while end + 1 < segments_per_video and chosen[end + 1]:
                end += 1
            # shrink the interval a little so boundaries are not exact
            pad = rng.uniform(0.0, 0.2 * window, size=2)
            out.append(Annotation(user, video, k * window + pad[0], (end + 1) * window - pad[1]))
            k = end + 1
        return out

    history: list[Annotation] = []
    final: list[Annotation] = []
    for u in users:
        h = min(max_history, min_history + int(rng.geometric(0.3)) - 1)
        for v in rng.choice(n_old, size=h, replace=False):
            history.extend(annotate(u, old[v]))
        final.extend(annotate(u, new[int(rng.integers(0, n_new))]))
    order = rng.permutation(len(history))
    annotations = [history[k] for k in order] + final
    return SynthData(annotations, durations, features, user_cluster, seg_cluster, set(new))
