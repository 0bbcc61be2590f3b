"""Graph encoder over the user/segment graph and the BPR preference loss.

Embeddings are stored column-wise: ``X`` is (D, M) for users, ``Z`` is
(D, N) for segments, and segment content features are an (F, N) matrix.
Every item's layer-0 embedding is its free embedding plus a linear
reduction of its content vector; K rounds of neighbor pooling followed by a
shared linear map and activation then refine users and items together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from collections.abc import Mapping

import numpy as np

from . import numkernel as nk
from .dataset import RatingGraph
from .numkernel import Tensor

logger = logging.getLogger(__name__)

SIGMOID_FLOOR = 1e-12
ACTIVATIONS = ("relu", "identity")


def activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return nk.relu(x)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def depth_of(params: Mapping[str, object]) -> int:
    k = 0
    while f"Wu{k + 1}" in params:
        k += 1
    return k


@dataclass
class GnnParams:
    """Shapes: X (D, M), Z (D, N), W0 (D, F), Wu[k] and Wv[k] (D, D)."""

    X: np.ndarray
    Z: np.ndarray
    W0: np.ndarray
    Wu: list[np.ndarray]
    Wv: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.Wu)

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {"X": self.X, "Z": self.Z, "W0": self.W0}
        for k, (wu, wv) in enumerate(zip(self.Wu, self.Wv), start=1):
            out[f"Wu{k}"] = wu
            out[f"Wv{k}"] = wv
        return out

    @classmethod
    def from_dict(cls, params: Mapping[str, np.ndarray]) -> GnnParams:
        k = depth_of(params)
        return cls(
            params["X"],
            params["Z"],
            params["W0"],
            [params[f"Wu{j}"] for j in range(1, k + 1)],
            [params[f"Wv{j}"] for j in range(1, k + 1)],
        )


def init_gnn_params(
    num_users: int,
    num_items: int,
    feature_dim: int,
    dim: int,
    depth: int,
    rng: np.random.Generator,
    std: float = 0.1,
    dtype=np.float64,
) -> GnnParams:
    def normal(*shape):
        return (rng.standard_normal(shape) * std).astype(dtype)

    return GnnParams(
        X=normal(dim, num_users),
        Z=normal(dim, num_items),
        W0=normal(dim, feature_dim),
        Wu=[normal(dim, dim) for _ in range(depth)],
        Wv=[normal(dim, dim) for _ in range(depth)],
    )


def fuse_item(f_i, z_i, w0) -> tuple[Tensor, Tensor]:
    """Return ``(y, g)`` with content embedding ``g = W0 f`` and ``y = g + z``.

    Works on single vectors or on column-stacked batches.
    """
    g = nk.matmul(w0, f_i)
    return nk.add(g, z_i), g


class GraphPools:
    """Neighbor pooling operators for one graph, built once and reused."""

    def __init__(self, graph: RatingGraph, mode: str = "mean"):
        self.mode = mode
        # users pool over their items; items pool over their users
        self.users = nk.ColumnPool(graph.user_items, graph.num_segments, mode)
        self.items = nk.ColumnPool(graph.item_users, graph.num_users, mode)


@dataclass
class PropagationState:
    """Per-layer embeddings; ``U[k]`` is (D, M) and ``V[k]`` is (D, N)."""

    U: list[Tensor]
    V: list[Tensor]
    content: Tensor

    @property
    def users(self) -> Tensor:
        return self.U[-1]

    @property
    def items(self) -> Tensor:
        return self.V[-1]

    @property
    def depth(self) -> int:
        return len(self.U) - 1


def propagate(
    graph: RatingGraph,
    params: Mapping[str, object],
    features: np.ndarray,
    pooling: str = "mean",
    activation: str = "relu",
    pools: GraphPools | None = None,
) -> PropagationState:
    """Synchronous K-layer propagation; ``features`` is the (F, N) content matrix.

    Layer k+1 of every node reads only layer-k values.  Nodes without
    neighbors pool to the zero vector.
    """
    if pools is None:
        pools = GraphPools(graph, pooling)
    elif pools.mode != pooling:
        raise ValueError(f"pools were built for {pools.mode!r} pooling, not {pooling!r}")
    x = nk.constant(params["X"])
    z = nk.constant(params["Z"])
    if x.shape[1] != graph.num_users or z.shape[1] != graph.num_segments:
        raise nk.ShapeError(
            f"embedding tables {x.shape}/{z.shape} do not match graph with "
            f"{graph.num_users} users and {graph.num_segments} segments"
        )
    y, g = fuse_item(nk.constant(features), z, params["W0"])
    us, vs = [x], [y]
    for k in range(1, depth_of(params) + 1):
        u, v = us[-1], vs[-1]
        u_next = activate(nk.matmul(params[f"Wu{k}"], nk.add(u, pools.users(v))), activation)
        v_next = activate(nk.matmul(params[f"Wv{k}"], nk.add(v, pools.items(u))), activation)
        us.append(u_next)
        vs.append(v_next)
    return PropagationState(us, vs, g)


def predict(u_a, v_i) -> float:
    """Inner-product preference score."""
    return float(np.dot(np.asarray(getattr(u_a, "value", u_a)), np.asarray(getattr(v_i, "value", v_i))))


def pair_scores(state: PropagationState, users, items) -> Tensor:
    """Scores for aligned index arrays of users and items, shape (B,)."""
    return nk.columnwise_dot(nk.gather_columns(state.users, users), nk.gather_columns(state.items, items))


def log_sigmoid(x: Tensor) -> Tensor:
    return nk.log(nk.clip(nk.sigmoid(x), SIGMOID_FLOOR, 1.0))


def bpr_loss(triplets, state: PropagationState, params: Mapping[str, object], lambda_reg: float) -> Tensor:
    """Summed pairwise ranking loss plus ``lambda_reg * (|X|^2 + |Z|^2)``."""
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(triplets) == 0:
        logger.warning("empty triplet batch; returning zero loss")
        return Tensor(np.asarray(0.0, dtype=state.users.value.dtype))
    users, pos, neg = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    u = nk.gather_columns(state.users, users)
    diff = nk.sub(
        nk.columnwise_dot(u, nk.gather_columns(state.items, pos)),
        nk.columnwise_dot(u, nk.gather_columns(state.items, neg)),
    )
    loss = nk.scale(nk.total(log_sigmoid(diff)), -1.0)
    if lambda_reg:
        reg = nk.add(nk.frobenius_sq(params["X"]), nk.frobenius_sq(params["Z"]))
        loss = nk.add(loss, nk.scale(reg, lambda_reg))
    return loss
