"""Training objectives for click and annotation supervision.

All objectives are graph builders: they take the scorer's output node (and
any side models) and return scalar loss nodes, so one ``backward`` call
yields every gradient. Weighting ratios that couple the ranker and the
propensity model are always computed from *detached* values: the ranker
term's gradient never flows into the propensity parameters through its
weights, and vice versa. The finite-difference harness relies on that
stop-gradient convention, as do the reduction identities between objectives.

Click objectives are variants of a weighted listwise cross entropy:

* naive           - weights are the raw clicks.
* inverse-prop    - weights are clicks / g(position).
* dual (ranker + propensity terms trained jointly against each other's
  softmax ratios), in four flavors: plain positional, click-context
  conditioned, confounder-stratified with a backdoor-marginalized
  propensity, and two disentangling add-ons (propensity-term dropout and a
  gradient-reversed auxiliary relevance head).

Annotation objectives are the graded listwise cross entropy and the
pairwise logistic (RankNet) loss. The frequency-gated combination weights
a click loss and an annotation loss per query by learned per-bin gates.
"""

from __future__ import annotations

import numpy as np

from . import ndiff
from .ndiff import Var
from .scorers import (
    AuxiliaryRelevanceHead,
    ContextualPropensity,
    FrequencyGate,
    PositionalPropensity,
    StratifiedPropensity,
)


class LossError(ValueError):
    pass


def _check_scores(scores: Var) -> int:
    if scores.value.ndim != 1:
        raise LossError(f"scores must be 1-D, got shape {scores.value.shape}")
    n = scores.value.shape[0]
    if n == 0:
        raise LossError("empty list")
    return n


def _weights(weights, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise LossError(f"weights shape {w.shape} does not match list length {n}")
    if (w < 0).any():
        raise LossError("negative weights")
    return w


# ---------------------------------------------------------------------------
# Base objectives
# ---------------------------------------------------------------------------


def listwise_ce(scores: Var, weights) -> Var:
    """Weighted listwise cross entropy: -sum_d w_d * log softmax(scores)_d.

    With weights = graded labels this is the graded softmax objective; with
    weights = clicks it is the naive click objective; reweighted variants
    pass adjusted click weights. All-zero weights give exactly zero loss.
    """
    n = _check_scores(scores)
    w = _weights(weights, n)
    return ndiff.neg(ndiff.vsum(ndiff.mul(ndiff.lift(w), ndiff.log_softmax(scores))))


def ranknet_loss(scores: Var, labels) -> Var:
    """Pairwise logistic loss over all label-ordered pairs.

    For every (i, j) with label_i < label_j the pair contributes
    log(1 + exp(score_i - score_j)). Lists with all-equal labels have no
    pairs and zero loss.
    """
    n = _check_scores(scores)
    lab = np.asarray(labels, dtype=np.float64)
    if lab.shape != (n,):
        raise LossError(f"labels shape {lab.shape} does not match list length {n}")
    mask = (lab[:, None] < lab[None, :]).astype(np.float64)
    if mask.sum() == 0:
        return ndiff.vsum(ndiff.mul(ndiff.lift(np.zeros((n, n))), ndiff.reshape(scores, (n, 1))))
    a = ndiff.reshape(scores, (n, 1))
    b = ndiff.reshape(scores, (1, n))
    return ndiff.vsum(ndiff.mul(ndiff.lift(mask), ndiff.softplus(ndiff.sub(a, b))))


def naive_click_loss(scores: Var, clicks) -> Var:
    """Clicks used directly as relevance weights (the biased baseline)."""
    return listwise_ce(scores, clicks)


def ipw_listwise(scores: Var, clicks, propensities) -> Var:
    """Inverse-propensity weighting: each click counts 1/g(position) times."""
    n = _check_scores(scores)
    g = np.asarray(propensities, dtype=np.float64)
    if g.shape != (n,):
        raise LossError(f"propensities shape {g.shape} does not match list")
    if (g <= 0).any():
        raise LossError("propensities must be strictly positive")
    c = np.asarray(clicks, dtype=np.float64)
    return listwise_ce(scores, c / g)


def relevance_ratios(score_values: np.ndarray) -> np.ndarray:
    """Detached softmax-score ratios f(d_1)/f(d), used to weight the
    propensity term of the dual objectives. Shift-invariant and stable."""
    s = np.asarray(score_values, dtype=np.float64)
    ls = s - s.max()
    ls = ls - np.log(np.exp(ls).sum())
    return np.exp(ls[0] - ls)


def _displayed(displayed, n: int) -> np.ndarray:
    if displayed is None:
        return np.ones(n, dtype=bool)
    d = np.asarray(displayed, dtype=bool)
    if d.shape != (n,):
        raise LossError("displayed mask shape mismatch")
    if not d.any():
        raise LossError("no displayed documents in list")
    if not d[0]:
        raise LossError("the top-ranked document must be a displayed one")
    return d


# ---------------------------------------------------------------------------
# Dual (ranker + propensity) objectives
# ---------------------------------------------------------------------------


def dla_losses(
    scores: Var,
    clicks,
    positions,
    prop_model: PositionalPropensity,
    displayed=None,
) -> tuple[Var, Var]:
    """Joint debiasing: ranker reweighted by propensity ratios, propensity
    model reweighted by (detached) relevance ratios.

    ``displayed`` masks out entries that were never shown (injected
    negatives): they keep zero weight in the ranker term and are excluded
    from the propensity term entirely, since they have no examination event.
    """
    n = _check_scores(scores)
    c = _weights(clicks, n)
    pos = np.asarray(positions, dtype=int)
    disp = _displayed(displayed, n)

    w = np.zeros(n)
    w[disp] = prop_model.ratios(pos[disp]) * c[disp]
    ranker = listwise_ce(scores, w)

    rel = relevance_ratios(scores.value)
    z = prop_model.logits_for(pos[disp])
    prop = listwise_ce(z, rel[disp] * c[disp])
    return ranker, prop


def iobm_losses(
    scores: Var,
    clicks,
    positions,
    prop_model: ContextualPropensity,
    displayed=None,
) -> tuple[Var, Var]:
    """Dual objective with the propensity conditioned on the click context.

    The session's own click vector (displayed entries only) is the context;
    with the context pathway zeroed this is bitwise identical to the plain
    dual objective.
    """
    n = _check_scores(scores)
    c = _weights(clicks, n)
    pos = np.asarray(positions, dtype=int)
    disp = _displayed(displayed, n)

    w = np.zeros(n)
    w[disp] = prop_model.ratios(pos[disp], c[disp]) * c[disp]
    ranker = listwise_ce(scores, w)

    rel = relevance_ratios(scores.value)
    z = prop_model.logits_for(pos[disp], c[disp])
    prop = listwise_ce(z, rel[disp] * c[disp])
    return ranker, prop


def upe_losses(
    scores: Var,
    clicks,
    positions,
    prop_model: StratifiedPropensity,
    strata=None,
    displayed=None,
) -> tuple[Var, Var]:
    """Dual objective with a backdoor-adjusted propensity.

    Ranker weights use the stratum-marginalized do-propensity ratios
    g_do(1)/g_do(k); the propensity term trains the conditional model at
    each document's (position, stratum). Strata default to the position's
    quantile stratum. With one stratum both terms agree with the plain dual
    objective to floating-point round-off.
    """
    n = _check_scores(scores)
    c = _weights(clicks, n)
    pos = np.asarray(positions, dtype=int)
    disp = _displayed(displayed, n)
    if strata is None:
        strata = np.asarray([prop_model.position_stratum(int(p)) for p in pos])
    else:
        strata = np.asarray(strata, dtype=int)

    w = np.zeros(n)
    w[disp] = prop_model.ratios(pos[disp]) * c[disp]
    ranker = listwise_ce(scores, w)

    rel = relevance_ratios(scores.value)
    z = prop_model.conditional_logits(pos[disp], strata[disp])
    prop = listwise_ce(z, rel[disp] * c[disp])
    return ranker, prop


def drop_losses(
    scores: Var,
    clicks,
    positions,
    prop_model: PositionalPropensity,
    rate: float,
    mode: str = "train",
    seed: int = 0,
    displayed=None,
) -> tuple[Var, Var]:
    """Dual objective with dropout on the propensity term's logits.

    Randomly silencing propensity logits keeps the propensity pathway from
    soaking up relevance signal. Rate 0 (or eval mode) is bitwise the plain
    dual objective.
    """
    n = _check_scores(scores)
    c = _weights(clicks, n)
    pos = np.asarray(positions, dtype=int)
    disp = _displayed(displayed, n)

    w = np.zeros(n)
    w[disp] = prop_model.ratios(pos[disp]) * c[disp]
    ranker = listwise_ce(scores, w)

    rel = relevance_ratios(scores.value)
    z = prop_model.logits_for(pos[disp])
    z = ndiff.dropout(z, rate, seed=seed, mode=mode)
    prop = listwise_ce(z, rel[disp] * c[disp])
    return ranker, prop


def gradrev_losses(
    scores: Var,
    clicks,
    positions,
    prop_model: PositionalPropensity,
    aux_head: AuxiliaryRelevanceHead,
    lam: float,
    displayed=None,
) -> tuple[Var, Var, Var]:
    """Dual objective plus a gradient-reversed auxiliary fitting loss.

    The auxiliary head learns to predict the (detached) score softmax from
    the propensity logits; the reversal node between them multiplies the
    gradient into the propensity parameters by -lam, pushing the propensity
    away from encoding relevance while the head itself trains normally. At
    lam = 0 the propensity and scorer gradients equal the plain dual
    objective's (the head still trains but injects nothing upstream).
    """
    n = _check_scores(scores)
    c = _weights(clicks, n)
    pos = np.asarray(positions, dtype=int)
    disp = _displayed(displayed, n)

    w = np.zeros(n)
    w[disp] = prop_model.ratios(pos[disp]) * c[disp]
    ranker = listwise_ce(scores, w)

    rel = relevance_ratios(scores.value)
    z = prop_model.logits_for(pos[disp])
    prop = listwise_ce(z, rel[disp] * c[disp])

    sv = scores.value[disp]
    target = np.exp(sv - sv.max())
    target = target / target.sum()
    aux_logits = aux_head.logits_from(z, lam)
    rev = listwise_ce(aux_logits, target)
    return ranker, prop, rev


# ---------------------------------------------------------------------------
# Gated hybrid objective
# ---------------------------------------------------------------------------


def famol_loss(
    gate: FrequencyGate,
    bin_idx: int,
    click_term: Var | None,
    annotation_term: Var | None,
) -> Var:
    """Frequency-gated mixture: w_click * L_click + w_ann * L_annotation.

    Both gate weights are sigmoid outputs of the bin's gating net; a query
    missing one supervision side simply contributes the other term. With
    the gate at its zero-initialized start both weights are exactly 0.5.
    """
    if click_term is None and annotation_term is None:
        raise LossError("query has neither click nor annotation supervision")
    w_click, w_ann = gate.weights(bin_idx)
    total: Var | None = None
    if click_term is not None:
        total = ndiff.vsum(ndiff.mul(w_click, click_term))
    if annotation_term is not None:
        ann = ndiff.vsum(ndiff.mul(w_ann, annotation_term))
        total = ann if total is None else ndiff.add(total, ann)
    return total


def batch_mean(terms: list[Var]) -> Var:
    """Mean over per-query loss terms (queries, not documents, are the unit)."""
    if not terms:
        raise LossError("empty batch")
    total = terms[0]
    for t in terms[1:]:
        total = ndiff.add(total, t)
    return ndiff.div(total, ndiff.lift(float(len(terms))))
