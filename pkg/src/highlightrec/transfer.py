"""Content -> graph-embedding transfer network and its two training losses.

The transfer network T is a bias-free MLP whose every layer applies the same
activation as the graph encoder, so its outputs live in the same range as
the graph's final item embeddings.  It learns either by squared Euclidean
distance to those embeddings, or adversarially against a conditional
discriminator that sees (item embedding, user embedding, rating).
"""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Mapping

import numpy as np

from . import numkernel as nk
from .errors import MissingFeatureError
from .gnn import activate
from .numkernel import Tensor

PROB_EPS = 1e-7


def _count(params: Mapping[str, object], prefix: str) -> int:
    n = 0
    while f"{prefix}{n + 1}" in params:
        n += 1
    return n


def init_transfer_params(dim: int, rng: np.random.Generator, hidden: int | None = None, layers: int = 2,
                         std: float = 0.1, dtype=np.float64) -> dict[str, np.ndarray]:
    """Weights ``P1..PL``; input and output width are ``dim``."""
    if layers < 1:
        raise ValueError("transfer network needs at least one layer")
    hidden = hidden or dim
    widths = [dim] + [hidden] * (layers - 1) + [dim]
    return {
        f"P{l}": (rng.standard_normal((widths[l], widths[l - 1])) * std).astype(dtype)
        for l in range(1, layers + 1)
    }


def init_discriminator_params(dim: int, rng: np.random.Generator, hidden: int | None = None, layers: int = 2,
                              std: float = 0.1, dtype=np.float64) -> dict[str, np.ndarray]:
    """Weights ``Q1..QL``; input is item (D) + user (D) + rating (1), output one logit."""
    if layers < 1:
        raise ValueError("discriminator needs at least one layer")
    hidden = hidden or dim
    widths = [2 * dim + 1] + [hidden] * (layers - 1) + [1]
    return {
        f"Q{l}": (rng.standard_normal((widths[l], widths[l - 1])) * std).astype(dtype)
        for l in range(1, layers + 1)
    }


def transfer_forward(x, params: Mapping[str, object], activation: str = "relu") -> Tensor:
    """Apply T to a vector (D,) or to column-stacked inputs (D, B)."""
    h = nk.constant(x)
    for l in range(1, _count(params, "P") + 1):
        h = activate(nk.matmul(params[f"P{l}"], h), activation)
    return h


def euclidean_transfer_loss(approx: Tensor, target: Tensor, detach_target: bool = True) -> Tensor:
    """Sum of squared distances between matching columns of ``approx`` and ``target``."""
    target = nk.constant(target)
    if detach_target:
        target = target.detach()
    return nk.frobenius_sq(nk.sub(approx, target))


def discriminator_logits(items, users, ratings, params: Mapping[str, object]) -> Tensor:
    """Logits (1, B) for item (D, B), user (D, B) and rating (B,) columns.

    Hidden layers use ReLU; the last layer is linear.
    """
    ratings = np.asarray(getattr(ratings, "value", ratings), dtype=np.float64).reshape(1, -1)
    h = nk.concat_rows([nk.constant(items), nk.constant(users), nk.Tensor(ratings.astype(nk.constant(items).value.dtype))])
    n = _count(params, "Q")
    for l in range(1, n + 1):
        h = nk.matmul(params[f"Q{l}"], h)
        if l < n:
            h = nk.relu(h)
    return h


def discriminator_prob(items, users, ratings, params) -> Tensor:
    return nk.clip(nk.sigmoid(discriminator_logits(items, users, ratings, params)), PROB_EPS, 1.0 - PROB_EPS)


def _one_minus(p: Tensor) -> Tensor:
    return nk.sub(nk.Tensor(np.ones_like(p.value)), p)


@dataclass
class AdversarialLosses:
    """``real_term`` = sum ln D(real), ``fake_term`` = sum ln(1 - D(fake)).

    ``discriminator_loss`` is ``-real_term + discriminator_fake_term``.
    """

    real_term: Tensor
    fake_term: Tensor
    discriminator_fake_term: Tensor
    generator_loss: Tensor
    discriminator_loss: Tensor
    real_prob: np.ndarray
    fake_prob: np.ndarray

    @property
    def accuracy(self) -> float:
        """Share of real samples scored > 0.5 and fake samples scored < 0.5."""
        hits = np.count_nonzero(self.real_prob > 0.5) + np.count_nonzero(self.fake_prob < 0.5)
        return hits / (self.real_prob.size + self.fake_prob.size)


def adversarial_losses(real_items, fake_items, users, ratings, dparams, non_saturating: bool = False) -> AdversarialLosses:
    """Discriminator and generator objectives on one batch of (a, i, r) pairs.

    ``discriminator_loss = -(real_term + fake_term)`` and, by default,
    ``generator_loss = fake_term`` (the saturating form).  With
    ``non_saturating`` the generator minimizes ``-sum ln D(fake)`` instead.
    """
    d_real = discriminator_prob(real_items, users, ratings, dparams)
    d_fake = discriminator_prob(fake_items, users, ratings, dparams)
    real_term = nk.total(nk.log(d_real))
    fake_term = nk.total(nk.log(_one_minus(d_fake)))
    disc_fake = nk.scale(fake_term, -1.0)
    disc = nk.add(nk.scale(real_term, -1.0), disc_fake)
    gen = nk.scale(nk.total(nk.log(d_fake)), -1.0) if non_saturating else fake_term
    return AdversarialLosses(real_term, fake_term, disc_fake, gen, disc,
                             d_real.value.ravel().copy(), d_fake.value.ravel().copy())


def inductive_item_embed(features, w0, tparams: Mapping[str, object], activation: str = "relu") -> Tensor:
    """Approximate graph embedding from content alone: T(W0 f).

    ``features`` is (F,) or (F, B).  No graph structure is consulted, so this
    works for segments that never received a rating.
    """
    if features is None:
        raise MissingFeatureError(["<item>"])
    return transfer_forward(nk.matmul(w0, nk.constant(features)), tparams, activation)
