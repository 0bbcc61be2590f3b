"""Joint training of the graph encoder and the transfer network.

Variant ``E`` minimizes BPR + lambda_transfer * Euclidean transfer loss with a
single Adam optimizer.  Variant ``A`` runs three Adam updates per batch in a
fixed order: graph encoder on BPR, transfer network on the generator loss,
discriminator on its cross-entropy.  Both variants early-stop on validation
NDCG@5 computed through the inductive (content-only) scoring path.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from collections.abc import Callable

import numpy as np

from . import numkernel as nk
from .checkpoint import Checkpoint
from .dataset import FeatureStore, RatingGraph, Split, TripletSampler
from .errors import DataError, InvalidInputError, NumericalError
from .evaluation import eval_records, score_records, summarize
from .gnn import GraphPools, bpr_loss, init_gnn_params, propagate
from .transfer import (
    adversarial_losses,
    euclidean_transfer_loss,
    init_discriminator_params,
    init_transfer_params,
    transfer_forward,
)

logger = logging.getLogger(__name__)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from one root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))


@dataclass
class TrainConfig:
    variant: str = "E"
    dim: int = 128
    depth: int | None = None  # None: 2 for E, 1 for A
    lambda_reg: float = 1.0
    lambda_transfer: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 50
    negatives_per_positive: int = 10
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    pooling: str = "mean"
    activation: str = "relu"
    init_std: float = 0.1
    transfer_layers: int = 2
    transfer_hidden: int | None = None
    disc_layers: int = 2
    disc_hidden: int | None = None
    transfer_input: str = "content"
    detach_target: bool = True
    non_saturating: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.depth is None:
            self.depth = 2 if self.variant == "E" else 1
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("E", "A"):
            raise InvalidInputError(f"variant must be 'E' or 'A', got {self.variant!r}")
        for name in ("dim", "batch_size", "negatives_per_positive", "patience", "transfer_layers", "disc_layers"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("depth", "max_epochs", "seed"):
            if int(getattr(self, name)) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        for name in ("lambda_reg", "lambda_transfer"):
            if not (getattr(self, name) >= 0):
                raise InvalidInputError(f"{name} must be non-negative")
        if not (self.learning_rate > 0 and self.init_std > 0):
            raise InvalidInputError("learning_rate and init_std must be positive")
        if self.pooling not in ("mean", "max"):
            raise InvalidInputError(f"pooling must be 'mean' or 'max', got {self.pooling!r}")
        if self.activation not in ("relu", "identity"):
            raise InvalidInputError(f"activation must be 'relu' or 'identity', got {self.activation!r}")
        if self.transfer_input not in ("content", "fused"):
            raise InvalidInputError(f"transfer_input must be 'content' or 'fused', got {self.transfer_input!r}")
        if self.dtype not in ("float64", "float32"):
            raise InvalidInputError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        return cls.from_dict(cls.read_file(path))

    @classmethod
    def read_file(cls, path) -> dict:
        """Raw settings from a JSON object, or ``key=value`` lines (``#`` starts a comment)."""
        text = Path(path).read_text(encoding="utf-8")
        if text.lstrip().startswith("{"):
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(doc, dict):
                raise DataError(f"{path}: expected a JSON object")
            return doc
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        doc = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise InvalidInputError(f"{path}:{lineno}: unknown config key {key!r}")
            doc[key] = _coerce(value, types[key], f"{path}:{lineno}")
        return doc


def _coerce(text: str, annotation: str, where: str):
    if text.lower() in ("none", "null"):
        return None
    try:
        if "bool" in annotation:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if "int" in annotation:
            return int(text)
        if "float" in annotation:
            return float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse {text!r} as {annotation}") from None
    return text


@dataclass
class EpochStats:
    epoch: int
    bpr_loss: float
    transfer_loss: float
    disc_loss: float | None
    disc_accuracy: float | None
    val_ndcg5: float | None


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_ndcg5: float | None = None
    stopped_early: bool = False
    wall_clock: float = 0.0

    def __eq__(self, other) -> bool:
        # wall-clock time is not part of the reproducible record
        if not isinstance(other, TrainReport):
            return NotImplemented
        return (self.epochs, self.best_epoch, self.best_val_ndcg5, self.stopped_early) == (
            other.epochs, other.best_epoch, other.best_val_ndcg5, other.stopped_early
        )

    def to_jsonl(self) -> str:
        lines = [json.dumps(dataclasses.asdict(e), sort_keys=True) for e in self.epochs]
        return "".join(line + "\n" for line in lines)

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    def summary(self) -> dict:
        return {
            "epochs_run": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_ndcg5": self.best_val_ndcg5,
            "stopped_early": self.stopped_early,
        }


def _finite(value: float) -> bool:
    return math.isfinite(float(value))


class Trainer:
    """Holds graph, features, parameters and optimizer state for one run.

    ``use_transfer=False`` drops the transfer term from variant E entirely
    (a pure BPR run), which is useful as an ablation baseline.
    """

    def __init__(self, graph: RatingGraph, features: FeatureStore, split: Split, config: TrainConfig,
                 *, use_transfer: bool = True):
        if len(split.train_edges) == 0:
            raise InvalidInputError("split has no training edges")
        self.config = config
        self.use_transfer = use_transfer
        self.full_graph = graph
        self.graph = graph.restrict(split.train_edges)
        self.dtype = np.dtype(config.dtype)
        self.features = features
        self.feats = features.columns(self.graph.segment_keys).astype(self.dtype)
        self.pools = GraphPools(self.graph, config.pooling)
        self.val_records = eval_records(graph, split, "validation")

        init = rng_stream(config.seed, "init")
        cfg = config
        self.gnn = init_gnn_params(self.graph.num_users, self.graph.num_segments, features.dim, cfg.dim, cfg.depth,
                                   init, cfg.init_std, self.dtype).as_dict()
        self.tnet = init_transfer_params(cfg.dim, init, cfg.transfer_hidden, cfg.transfer_layers, cfg.init_std, self.dtype)
        self.disc = (
            init_discriminator_params(cfg.dim, init, cfg.disc_hidden, cfg.disc_layers, cfg.init_std, self.dtype)
            if cfg.variant == "A" else {}
        )
        self.sampler = TripletSampler(self.graph, cfg.negatives_per_positive, rng_stream(cfg.seed, "sampling"))
        self.order_rng = rng_stream(cfg.seed, "order")
        if cfg.variant == "E":
            self.opt = nk.Adam(cfg.learning_rate)
        else:
            self.opt_gnn = nk.Adam(cfg.learning_rate)
            self.opt_t = nk.Adam(cfg.learning_rate)
            self.opt_d = nk.Adam(cfg.learning_rate)

    # -- model pieces -----------------------------------------------------

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {**self.gnn, **self.tnet, **self.disc}

    def state(self, gnn=None):
        return propagate(self.graph, gnn if gnn is not None else self.gnn, self.feats,
                         self.config.pooling, self.config.activation, self.pools)

    def _transfer_source(self, state):
        return state.content if self.config.transfer_input == "content" else state.V[0]

    def checkpoint(self) -> Checkpoint:
        u_final = self.state().users.value
        tensors = {**self.params, "U_final": u_final}
        meta = {"segments": len(self.graph.segments), "feature_dim": self.features.dim}
        return Checkpoint(tensors, self.config.variant, self.config.seed, self.config.to_dict(),
                          list(self.graph.user_ids), meta)

    def validate(self, ckpt: Checkpoint | None = None) -> float | None:
        if not self.val_records:
            return None
        ckpt = ckpt or self.checkpoint()
        runs = score_records(self.val_records, ckpt, self.features, self.full_graph)
        return summarize(runs, (5,)).get("ndcg@5")

    # -- steps ------------------------------------------------------------

    def _step_e(self, trip: np.ndarray, batch_index: int) -> tuple[float, float]:
        cfg = self.config
        names = list(self.gnn) + (list(self.tnet) if self.use_transfer else [])
        leaves = {k: nk.Tensor(self.params[k], requires_grad=True) for k in names}
        with nk.Tape() as tape:
            state = self.state(leaves)
            bpr = bpr_loss(trip, state, leaves, cfg.lambda_reg)
            loss, lt_value = bpr, 0.0
            if self.use_transfer:
                items = np.unique(trip[:, 1:])
                vhat = transfer_forward(nk.gather_columns(self._transfer_source(state), items), leaves, cfg.activation)
                lt = euclidean_transfer_loss(vhat, nk.gather_columns(state.items, items), cfg.detach_target)
                loss = nk.add(bpr, nk.scale(lt, cfg.lambda_transfer))
                lt_value = float(lt.value)
        if not _finite(loss.value):
            raise NumericalError(f"non-finite loss at batch {batch_index}", batch_index)
        grads = tape.gradient(loss, [leaves[k] for k in names])
        self._apply(self.opt, self.params_view(names), dict(zip(names, grads)), batch_index)
        return float(bpr.value), lt_value

    def params_view(self, names) -> dict[str, np.ndarray]:
        pool = self.params
        return {k: pool[k] for k in names}

    def _apply(self, opt: nk.Adam, params, grads, batch_index: int) -> None:
        try:
            opt.step(params, grads)
        except FloatingPointError as exc:
            raise NumericalError(f"batch {batch_index}: {exc}", batch_index) from None

    def _step_a(self, trip: np.ndarray, batch_index: int) -> tuple[float, float, float, float]:
        cfg = self.config
        # 1) graph encoder on the preference loss
        leaves = {k: nk.Tensor(v, requires_grad=True) for k, v in self.gnn.items()}
        with nk.Tape() as tape:
            bpr = bpr_loss(trip, self.state(leaves), leaves, cfg.lambda_reg)
        if not _finite(bpr.value):
            raise NumericalError(f"non-finite BPR loss at batch {batch_index}", batch_index)
        grads = tape.gradient(bpr, list(leaves.values()))
        self._apply(self.opt_gnn, self.gnn, dict(zip(leaves, grads)), batch_index)

        # real/fake pairs from this batch: positives rated 1, sampled negatives rated 0
        state = self.state()
        pos = np.unique(trip[:, :2], axis=0)
        users = np.concatenate([pos[:, 0], trip[:, 0]])
        items = np.concatenate([pos[:, 1], trip[:, 2]])
        ratings = np.concatenate([np.ones(len(pos)), np.zeros(len(trip))])
        real = state.items.value[:, items]
        ue = state.users.value[:, users]
        src = self._transfer_source(state).value[:, items]

        # 2) transfer network against a fixed discriminator
        tleaves = {k: nk.Tensor(v, requires_grad=True) for k, v in self.tnet.items()}
        with nk.Tape() as tape:
            adv = adversarial_losses(real, transfer_forward(src, tleaves, cfg.activation), ue, ratings,
                                     self.disc, cfg.non_saturating)
        if not _finite(adv.generator_loss.value):
            raise NumericalError(f"non-finite generator loss at batch {batch_index}", batch_index)
        grads = tape.gradient(adv.generator_loss, list(tleaves.values()))
        self._apply(self.opt_t, self.tnet, dict(zip(tleaves, grads)), batch_index)

        # 3) discriminator against the updated transfer network
        fake = transfer_forward(src, self.tnet, cfg.activation).value
        dleaves = {k: nk.Tensor(v, requires_grad=True) for k, v in self.disc.items()}
        with nk.Tape() as tape:
            adv = adversarial_losses(real, fake, ue, ratings, dleaves, cfg.non_saturating)
        if not _finite(adv.discriminator_loss.value):
            raise NumericalError(f"non-finite discriminator loss at batch {batch_index}", batch_index)
        grads = tape.gradient(adv.discriminator_loss, list(dleaves.values()))
        self._apply(self.opt_d, self.disc, dict(zip(dleaves, grads)), batch_index)
        return float(bpr.value), float(adv.generator_loss.value), float(adv.discriminator_loss.value), adv.accuracy

    # -- loop -------------------------------------------------------------

    def run(self, callback: Callable[[int, Trainer], None] | None = None) -> tuple[Checkpoint, TrainReport]:
        cfg = self.config
        report = TrainReport()
        t0 = time.perf_counter()
        best = self.checkpoint()
        best_score = -math.inf
        since_best = 0
        edges = self.graph.edges
        batch_index = 0
        for epoch in range(1, cfg.max_epochs + 1):
            order = self.order_rng.permutation(len(edges))
            sums = np.zeros(4)
            counts = np.zeros(4)
            for lo in range(0, len(order), cfg.batch_size):
                trip = self.sampler.triplets(edges[order[lo : lo + cfg.batch_size]])
                if len(trip) == 0:
                    continue
                try:
                    if cfg.variant == "E":
                        vals = self._step_e(trip, batch_index) + (None, None)
                    else:
                        vals = self._step_a(trip, batch_index)
                except NumericalError as exc:
                    exc.last_good = best
                    raise
                except FloatingPointError as exc:
                    raise NumericalError(f"batch {batch_index}: {exc}", batch_index, best) from None
                for k, v in enumerate(vals):
                    if v is not None:
                        sums[k] += v
                        counts[k] += 1
                batch_index += 1
            means = [float(s / c) if c else None for s, c in zip(sums, counts)]
            ckpt = self.checkpoint()
            score = self.validate(ckpt)
            report.epochs.append(EpochStats(epoch, means[0] or 0.0, means[1] or 0.0, means[2], means[3], score))
            if callback is not None:
                callback(epoch, self)
            if score is None or score > best_score:
                best, best_score, since_best = ckpt, (score if score is not None else -math.inf), 0
                report.best_epoch = epoch
                report.best_val_ndcg5 = score
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    report.stopped_early = True
                    break
        report.wall_clock = time.perf_counter() - t0
        return best, report


def train(graph: RatingGraph, features: FeatureStore, split: Split, config: TrainConfig,
          callback: Callable[[int, Trainer], None] | None = None) -> tuple[Checkpoint, TrainReport]:
    """Train one model; returns the best-validation checkpoint and the report."""
    return Trainer(graph, features, split, config).run(callback)


def validate(checkpoint: Checkpoint, graph: RatingGraph, split: Split, features: FeatureStore) -> float | None:
    """Validation NDCG@5 via inductive scoring; None without validation records."""
    records = eval_records(graph, split, "validation")
    if not records:
        return None
    return summarize(score_records(records, checkpoint, features, graph), (5,)).get("ndcg@5")
