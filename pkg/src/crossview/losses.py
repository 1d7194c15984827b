"""Objective terms for adversarial view adaptation with similarity learning.

Four losses cooperate:

* ``view_disc_loss`` trains the view discriminator to tell which view an
  embedding came from.
* ``view_confusion_loss`` trains the mappings to make that discriminator
  output 1/2 everywhere (cross-entropy against the uniform label).
* ``contrastive_sim_loss`` jointly trains mappings and the similarity
  discriminator: positive pairs are pulled to zero distance and scored high,
  negatives are pushed past a margin.
* ``weighted_sim_loss`` is the same objective with per-anchor softmax/softmin
  weights that concentrate the distance terms on hard pairs.

All probabilities are validated to lie strictly inside (0, 1) and clamped to
[1e-12, 1-1e-12] before any log, so saturated discriminators keep every loss
finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DomainError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Margin/trade-off knobs for the similarity losses.

    ``weight_inside_hinge`` switches the weighted negative term to the form
    where the softmin weight scales the distance inside the hinge argument,
    max(0, margin - w*d)^2, instead of scaling the hinge value itself.
    ``full_bce_sim`` extends the similarity score term to full binary
    cross-entropy (adds -log(1 - p) on negative pairs).
    """

    margin: float = 2.0
    gamma: float = 2.5
    weight_inside_hinge: bool = False
    full_bce_sim: bool = False

    def __post_init__(self):
        if not self.margin > 0:
            raise ContractError(f"margin must be > 0, got {self.margin}")
        if self.gamma < 0:
            raise ContractError(f"gamma must be >= 0, got {self.gamma}")


def _check_probs(t: ad.Tensor, what: str) -> None:
    vals = t.data
    if vals.size and (np.any(vals <= 0.0) or np.any(vals >= 1.0)):
        raise DomainError(f"{what} must lie strictly inside (0, 1)")


def _check_dists(t: ad.Tensor, what: str) -> None:
    vals = t.data
    if vals.size and (np.any(vals < 0.0) or not np.all(np.isfinite(vals))):
        raise DomainError(f"{what} must be finite and nonnegative")


def _clamped_log(p: ad.Tensor) -> ad.Tensor:
    return ad.log(ad.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def view_disc_loss(source_probs: ad.Tensor, target_probs: ad.Tensor) -> ad.Tensor:
    """Binary cross-entropy for the view discriminator: source embeddings are
    labelled 1, target embeddings 0. Zero iff the discriminator is perfect."""
    _check_probs(source_probs, "source-view probabilities")
    _check_probs(target_probs, "target-view probabilities")
    src = ad.scalar_mul(-1.0, ad.mean(_clamped_log(source_probs)))
    one_minus = ad.sub(1.0, target_probs)
    tgt = ad.scalar_mul(-1.0, ad.mean(_clamped_log(one_minus)))
    return ad.add(src, tgt)


def view_confusion_loss(probs: ad.Tensor) -> ad.Tensor:
    """Cross-entropy of discriminator outputs against the uniform (1/2, 1/2)
    label, averaged over both views' embeddings; minimised (= log 2 per
    sample) exactly when every output is 1/2."""
    _check_probs(probs, "view probabilities")
    term = ad.add(_clamped_log(probs), _clamped_log(ad.sub(1.0, probs)))
    return ad.scalar_mul(-0.5, ad.mean(term))


def contrastive_sim_loss(
    pos_probs: Optional[ad.Tensor],
    pos_dists: Optional[ad.Tensor],
    neg_dists: Optional[ad.Tensor],
    cfg: LossConfig,
    neg_probs: Optional[ad.Tensor] = None,
) -> ad.Tensor:
    """Similarity loss averaged over all pairs.

    Per positive pair: -log(sim_prob) + gamma * d^2.
    Per negative pair: gamma * max(0, margin - d)^2, plus -log(1 - sim_prob)
    when ``cfg.full_bce_sim`` is set (``neg_probs`` is then required).
    """
    npos = 0 if pos_dists is None else pos_dists.data.size
    nneg = 0 if neg_dists is None else neg_dists.data.size
    total = npos + nneg
    if total == 0:
        raise ContractError("similarity loss needs at least one pair")
    terms = []
    if npos:
        if pos_probs is None or pos_probs.data.size != npos:
            raise ContractError("positive pairs need matching similarity probabilities")
        _check_probs(pos_probs, "positive similarity probabilities")
        _check_dists(pos_dists, "positive distances")
        terms.append(ad.scalar_mul(-1.0, ad.sum(_clamped_log(pos_probs))))
        terms.append(ad.scalar_mul(cfg.gamma, ad.sum(ad.square(pos_dists))))
    if nneg:
        _check_dists(neg_dists, "negative distances")
        hinge = ad.relu(ad.sub(cfg.margin, neg_dists))
        terms.append(ad.scalar_mul(cfg.gamma, ad.sum(ad.square(hinge))))
        if cfg.full_bce_sim:
            if neg_probs is None or neg_probs.data.size != nneg:
                raise ContractError("full_bce_sim needs similarity probabilities for negatives")
            _check_probs(neg_probs, "negative similarity probabilities")
            terms.append(ad.scalar_mul(-1.0, ad.sum(_clamped_log(ad.sub(1.0, neg_probs)))))
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return ad.scalar_mul(1.0 / total, loss)


def adaptive_weights(pos_dists, neg_dists) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor hardness weights: softmax over positive distances (far
    positives are hard) and softmin over negative distances (close negatives
    are hard). Each vector sums to 1. The weights are plain arrays, treated
    as constants during backpropagation."""
    w_p = _softmax(np.asarray(pos_dists, dtype=np.float64), "positive distances")
    w_n = _softmax(-np.asarray(neg_dists, dtype=np.float64), "negative distances")
    return w_p, w_n


def adaptive_weights_batch(pos_dists: np.ndarray, neg_dists: np.ndarray):
    """Row-wise ``adaptive_weights`` for regular [anchors, pairs] grids."""
    w_p = _softmax_rows(np.asarray(pos_dists, dtype=np.float64), "positive distances")
    w_n = _softmax_rows(-np.asarray(neg_dists, dtype=np.float64), "negative distances")
    return w_p, w_n


def _softmax(scores: np.ndarray, what: str) -> np.ndarray:
    if scores.ndim != 1 or scores.size == 0:
        raise ContractError(f"{what}: need a nonempty flat list")
    if not np.all(np.isfinite(scores)):
        raise DomainError(f"{what} must be finite")
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def _softmax_rows(scores: np.ndarray, what: str) -> np.ndarray:
    if scores.ndim != 2 or scores.shape[1] == 0:
        raise ContractError(f"{what}: need a nonempty [anchors, pairs] grid")
    if not np.all(np.isfinite(scores)):
        raise DomainError(f"{what} must be finite")
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def weighted_sim_loss(
    pos_probs: ad.Tensor,
    pos_dists: ad.Tensor,
    neg_dists: ad.Tensor,
    pos_weights: np.ndarray,
    neg_weights: np.ndarray,
    num_anchors: int,
    cfg: LossConfig,
) -> ad.Tensor:
    """Hardness-weighted similarity loss, averaged over anchors.

    Pair tensors are flat concatenations over anchors; the weight arrays come
    from ``adaptive_weights`` over the same grouping (each anchor's slice sums
    to 1) and enter the graph as constants. Per anchor the contribution is
    sum_pos(-log p + gamma * w_p * d^2) + gamma * sum_neg(w_n * max(0, margin - d)^2);
    with ``cfg.weight_inside_hinge`` the negative term becomes
    gamma * sum_neg(max(0, margin - w_n * d)^2).
    """
    if num_anchors < 1:
        raise ContractError(f"num_anchors must be >= 1, got {num_anchors}")
    pos_weights = np.asarray(pos_weights, dtype=np.float64)
    neg_weights = np.asarray(neg_weights, dtype=np.float64)
    if pos_probs.data.size != pos_dists.data.size or pos_weights.size != pos_dists.data.size:
        raise ContractError("positive probabilities, distances, and weights must align")
    if neg_weights.size != neg_dists.data.size:
        raise ContractError("negative distances and weights must align")
    if pos_dists.data.size == 0 or neg_dists.data.size == 0:
        raise ContractError("weighted similarity loss needs positives and negatives")
    _check_probs(pos_probs, "positive similarity probabilities")
    _check_dists(pos_dists, "positive distances")
    _check_dists(neg_dists, "negative distances")
    if np.any(pos_weights < 0) or np.any(neg_weights < 0):
        raise DomainError("weights must be nonnegative")

    w_p = ad.Tensor(pos_weights)
    w_n = ad.Tensor(neg_weights)
    loss = ad.scalar_mul(-1.0, ad.sum(_clamped_log(pos_probs)))
    loss = ad.add(loss, ad.scalar_mul(cfg.gamma, ad.sum(ad.mul(w_p, ad.square(pos_dists)))))
    if cfg.weight_inside_hinge:
        hinge = ad.relu(ad.sub(cfg.margin, ad.mul(w_n, neg_dists)))
        neg_term = ad.sum(ad.square(hinge))
    else:
        hinge = ad.relu(ad.sub(cfg.margin, neg_dists))
        neg_term = ad.sum(ad.mul(w_n, ad.square(hinge)))
    loss = ad.add(loss, ad.scalar_mul(cfg.gamma, neg_term))
    return ad.scalar_mul(1.0 / num_anchors, loss)
