"""Shared oracles for the test suite: central finite differences and random
micro-instances of the full model objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from highlightrec import numkernel as nk
from highlightrec.dataset import RatingGraph, Segment
from highlightrec.evaluation import RankingRun
from highlightrec.gnn import bpr_loss, init_gnn_params, propagate
from highlightrec.transfer import (
    adversarial_losses,
    euclidean_transfer_loss,
    init_discriminator_params,
    init_transfer_params,
    transfer_forward,
)

FD_STEP = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class GradResult:
    errors: dict[str, float]
    margin: float

    @property
    def worst(self) -> float:
        return max(self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Per-tensor relative error in the Frobenius norm."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(loss_fn, params: dict[str, np.ndarray], step: float = FD_STEP) -> GradResult:
    """Compare tape gradients of ``loss_fn(params) -> Tensor`` with central differences.

    The kink monitor covers the analytic pass and every perturbed evaluation,
    so ``margin`` is the smallest distance to a non-differentiable point seen
    anywhere in the check.
    """
    with nk.kink_monitor() as mon:
        leaves = {k: nk.Tensor(v, requires_grad=True) for k, v in params.items()}
        with nk.Tape() as tape:
            loss = loss_fn(leaves)
        analytic = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
        errors = {}
        for name, value in params.items():
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                old = value[idx]
                value[idx] = old + step
                up = float(loss_fn(params).value)
                value[idx] = old - step
                down = float(loss_fn(params).value)
                value[idx] = old
                numeric[idx] = (up - down) / (2 * step)
            errors[name] = relative_error(analytic[name], numeric)
    return GradResult(errors, mon.margin)


def micro_graph(rng: np.random.Generator, max_users: int = 6, max_items: int = 6) -> RatingGraph:
    """Random bipartite graph with 2..max users/items and at least one edge."""
    m = int(rng.integers(2, max_users + 1))
    n = int(rng.integers(2, max_items + 1))
    segments = [Segment(i, f"v{i // 3}", 5.0 * (i % 3), 5.0 * (i % 3 + 1), i % 3) for i in range(n)]
    mask = rng.random((m, n)) < 0.4
    mask[int(rng.integers(m)), int(rng.integers(n))] = True
    edges = [(a, i) for a in range(m) for i in range(n) if mask[a, i]]
    return RatingGraph([f"u{a}" for a in range(m)], segments, edges)


def micro_triplets(graph: RatingGraph, rng: np.random.Generator, count: int = 6) -> np.ndarray:
    rows = []
    for _ in range(count * 4):
        a, i = graph.edges[int(rng.integers(len(graph.edges)))]
        free = [j for j in range(graph.num_segments) if j not in graph.user_items[a]]
        if free:
            rows.append((int(a), int(i), int(free[int(rng.integers(len(free)))])))
        if len(rows) == count:
            break
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


@dataclass
class MicroInstance:
    graph: RatingGraph
    features: np.ndarray
    triplets: np.ndarray
    params: dict[str, np.ndarray]
    pooling: str
    transfer_input: str
    depth: int
    dim: int

    def state(self, params):
        return propagate(self.graph, params, self.features, self.pooling, "relu")

    def source(self, state):
        return state.content if self.transfer_input == "content" else state.V[0]

    def joint_loss(self, params, lambda_reg=0.1, lambda_transfer=0.7, detach_target=False):
        state = self.state(params)
        loss = bpr_loss(self.triplets, state, params, lambda_reg)
        items = np.unique(self.triplets[:, 1:])
        vhat = transfer_forward(nk.gather_columns(self.source(state), items), params, "relu")
        lt = euclidean_transfer_loss(vhat, nk.gather_columns(state.items, items), detach_target)
        return nk.add(loss, nk.scale(lt, lambda_transfer))

    def _adversarial(self, params, non_saturating=False):
        state = self.state(params)
        pos = np.unique(self.triplets[:, :2], axis=0)
        users = np.concatenate([pos[:, 0], self.triplets[:, 0]])
        items = np.concatenate([pos[:, 1], self.triplets[:, 2]])
        ratings = np.concatenate([np.ones(len(pos)), np.zeros(len(self.triplets))])
        real = nk.gather_columns(state.items, items)
        fake = transfer_forward(nk.gather_columns(self.source(state), items), params, "relu")
        return adversarial_losses(real, fake, nk.gather_columns(state.users, users), ratings, params, non_saturating)

    def generator_loss(self, params, non_saturating=False):
        return self._adversarial(params, non_saturating).generator_loss

    def discriminator_loss(self, params):
        return self._adversarial(params).discriminator_loss


def micro_instance(seed: int, std: float = 0.6) -> MicroInstance:
    rng = np.random.default_rng(seed)
    while True:
        graph = micro_graph(rng)
        triplets = micro_triplets(graph, rng)
        if len(triplets):
            break
    f = int(rng.integers(1, 5))
    d = int(rng.integers(2, 5))
    k = int(rng.integers(0, 3))
    params = init_gnn_params(graph.num_users, graph.num_segments, f, d, k, rng, std).as_dict()
    params.update(init_transfer_params(d, rng, std=std))
    params.update(init_discriminator_params(d, rng, std=std))
    features = rng.standard_normal((f, graph.num_segments))
    pooling = "max" if rng.random() < 0.5 else "mean"
    source = "fused" if rng.random() < 0.3 else "content"
    return MicroInstance(graph, features, triplets, params, pooling, source, k, d)


# ---------------------------------------------------------------------------
# straight-line propagation oracle


def oracle_propagate(graph: RatingGraph, params: dict[str, np.ndarray], features: np.ndarray,
                     pooling: str = "mean", activation: str = "relu"):
    """Per-node loops over plain numpy vectors, no tape and no pooling matrices."""
    act = (lambda t: np.maximum(t, 0.0)) if activation == "relu" else (lambda t: t)
    d = params["X"].shape[0]
    u = [params["X"][:, a].copy() for a in range(graph.num_users)]
    v = [params["W0"] @ features[:, i] + params["Z"][:, i] for i in range(graph.num_segments)]
    layers_u, layers_v = [u], [v]
    k = 1
    while f"Wu{k}" in params:
        new_u, new_v = [], []
        for a in range(graph.num_users):
            nbrs = [v[j] for j in range(graph.num_segments) if graph.has_edge(a, j)]
            pooled = _pool(nbrs, d, pooling)
            new_u.append(act(params[f"Wu{k}"] @ (u[a] + pooled)))
        for i in range(graph.num_segments):
            nbrs = [u[b] for b in range(graph.num_users) if graph.has_edge(b, i)]
            pooled = _pool(nbrs, d, pooling)
            new_v.append(act(params[f"Wv{k}"] @ (v[i] + pooled)))
        u, v = new_u, new_v
        layers_u.append(u)
        layers_v.append(v)
        k += 1
    return [np.stack(x, axis=1) for x in layers_u], [np.stack(x, axis=1) for x in layers_v]


def _pool(vectors, d, mode):
    if not vectors:
        return np.zeros(d)
    out = vectors[0].copy()
    if mode == "mean":
        for vec in vectors[1:]:
            out = out + vec
        return out / len(vectors)
    for vec in vectors[1:]:
        out = np.maximum(out, vec)
    return out


@dataclass
class Testbed:
    data: object
    graph: RatingGraph
    split: object


def synth_testbed(seed: int, **kwargs) -> Testbed:
    """Synthetic workload (200 users, 100 videos x 8 segments, 4 clusters,
    32 feature dims by default) segmented, linked and split like real data."""
    from highlightrec import synth
    from highlightrec.dataset import build_graph, split_leave_last_video

    data = synth.generate(seed=seed, **kwargs)
    graph, _ = build_graph(data.annotations, data.durations)
    split = split_leave_last_video(graph, data.annotations, rng_seed=seed)
    return Testbed(data, graph, split)


# ---------------------------------------------------------------------------
# brute-force oracles: ranks from pairwise comparisons, metrics from ranks


def brute_ranks(run):
    ranks = {}
    for a, sa in zip(run.candidates, run.scores):
        beaten_by = sum(1 for b, sb in zip(run.candidates, run.scores) if sb > sa or (sb == sa and b < a))
        ranks[a] = beaten_by + 1
    return ranks


def brute_metrics(run, n):
    ranks = brute_ranks(run)
    pos_ranks = sorted(ranks[p] for p in run.positives)
    g = len(pos_ranks)
    ap = 0.0
    for k, r in enumerate(pos_ranks, start=1):
        ap += k / r
    ap /= g
    need = g // 2 + 1
    total = len(run.candidates)
    depth = next(k for k in range(1, total + 1) if sum(1 for r in pos_ranks if r <= k) >= need)
    ms = 0.0 if total <= need else (depth - need) / (total - need)
    hits = [r for r in pos_ranks if r <= n]
    dcg = 0.0
    for r in hits:
        dcg += 1.0 / math.log2(r + 1)
    idcg = 0.0
    for r in range(1, min(n, g) + 1):
        idcg += 1.0 / math.log2(r + 1)
    return ap, ms, len(hits) / n, len(hits) / g, dcg / idcg


def random_run(rng):
    n = int(rng.integers(1, 13))
    cands = rng.choice(40, size=n, replace=False)
    scores = rng.integers(0, 4, size=n).astype(float) if rng.random() < 0.5 else rng.standard_normal(n)
    g = int(rng.integers(1, n + 1))
    return RankingRun.build(int(rng.integers(5)), "v", cands, scores, rng.choice(cands, size=g, replace=False))
