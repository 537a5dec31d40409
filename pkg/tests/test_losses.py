"""Training objectives: hand-computed values, identities between variants,
and finite-difference gradient checks.

The dual objectives weight each term by detached ratios computed from the
*other* model's values, so finite differences are run per term against the
parameters whose weights do not depend on them (perturbing the other
model's parameters would move the "constants"). The gradient-reversal term
is checked by hand instead: its analytic gradient into the propensity
logits is deliberately -lam times the true derivative.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrank import ndiff
from hybrank.losses import (
    LossError,
    batch_mean,
    dla_losses,
    drop_losses,
    famol_loss,
    gradrev_losses,
    iobm_losses,
    ipw_listwise,
    listwise_ce,
    naive_click_loss,
    ranknet_loss,
    relevance_ratios,
    upe_losses,
)
from hybrank.ndiff import ParamStore, backward, finite_diff_check
from hybrank.scorers import (
    AuxiliaryRelevanceHead,
    ContextualPropensity,
    FrequencyGate,
    PositionalPropensity,
    StratifiedPropensity,
)


def _leaf(values, store=None, name="scores"):
    store = store if store is not None else ParamStore()
    return store.add(name, np.asarray(values, dtype=np.float64))


def _log_softmax_oracle(s):
    s = np.asarray(s, dtype=np.float64)
    m = s.max()
    return s - (m + math.log(np.exp(s - m).sum()))


# ---------------------------------------------------------------------------
# listwise cross entropy
# ---------------------------------------------------------------------------


def test_listwise_ce_hand_value():
    scores = _leaf([1.0, 0.0, -1.0])
    loss = listwise_ce(scores, [2.0, 0.0, 1.0])
    ls = _log_softmax_oracle([1.0, 0.0, -1.0])
    assert loss.value == pytest.approx(-(2 * ls[0] + ls[2]), abs=1e-12)


def test_listwise_ce_zero_weights_zero_loss():
    scores = _leaf([3.0, -2.0])
    loss = listwise_ce(scores, [0.0, 0.0])
    assert loss.value == 0.0
    backward(loss)
    np.testing.assert_array_equal(scores.grad, np.zeros(2))


def test_listwise_ce_gradient_closed_form():
    s = np.array([0.5, -1.0, 2.0, 0.0])
    w = np.array([1.0, 0.0, 3.0, 0.5])
    scores = _leaf(s)
    loss = listwise_ce(scores, w)
    backward(loss)
    p = np.exp(_log_softmax_oracle(s))
    np.testing.assert_allclose(scores.grad, w.sum() * p - w, atol=1e-12)


def test_listwise_ce_validation():
    with pytest.raises(LossError, match="negative"):
        listwise_ce(_leaf([1.0, 2.0]), [-1.0, 0.0])
    with pytest.raises(LossError, match="shape"):
        listwise_ce(_leaf([1.0, 2.0]), [1.0])
    with pytest.raises(LossError, match="empty"):
        listwise_ce(_leaf([]), [])
    with pytest.raises(LossError, match="1-D"):
        listwise_ce(_leaf([[1.0], [2.0]]), [1.0, 1.0])


@settings(max_examples=80, deadline=None)
@given(
    data=st.lists(
        st.tuples(
            st.floats(-10, 10, allow_nan=False), st.floats(0, 5, allow_nan=False)
        ),
        min_size=2,
        max_size=8,
    ),
    seed=st.integers(0, 10_000),
)
def test_listwise_ce_permutation_invariant(data, seed):
    s = np.array([a for a, _ in data])
    w = np.array([b for _, b in data])
    perm = np.random.default_rng(seed).permutation(len(s))
    base = listwise_ce(_leaf(s), w).value
    shuffled = listwise_ce(_leaf(s[perm]), w[perm]).value
    assert abs(base - shuffled) <= 1e-12 * max(1.0, abs(base))


# ---------------------------------------------------------------------------
# pairwise logistic loss
# ---------------------------------------------------------------------------


def test_ranknet_hand_values():
    loss = ranknet_loss(_leaf([2.0, 1.0]), [0, 1])
    assert loss.value == pytest.approx(math.log(1 + math.e), abs=1e-12)
    loss = ranknet_loss(_leaf([2.0, 1.0]), [1, 0])
    assert loss.value == pytest.approx(math.log(1 + math.exp(-1.0)), abs=1e-12)
    loss = ranknet_loss(_leaf([1.0, 0.0, 2.0]), [2, 1, 1])
    expected = math.log(1 + math.exp(-1.0)) + math.log(1 + math.exp(1.0))
    assert loss.value == pytest.approx(expected, abs=1e-12)


def test_ranknet_no_pairs_is_flat_zero():
    scores = _leaf([1.0, 2.0, 3.0])
    loss = ranknet_loss(scores, [2, 2, 2])
    assert loss.value == 0.0
    backward(loss)
    np.testing.assert_array_equal(scores.grad, np.zeros(3))


def test_ranknet_prefers_label_order():
    """Loss drops when scores agree with labels."""
    good = ranknet_loss(_leaf([3.0, 1.0, -1.0]), [4, 2, 0]).value
    bad = ranknet_loss(_leaf([-1.0, 1.0, 3.0]), [4, 2, 0]).value
    assert good < bad


@settings(max_examples=60, deadline=None)
@given(
    data=st.lists(
        st.tuples(st.floats(-5, 5, allow_nan=False), st.integers(0, 4)),
        min_size=2,
        max_size=7,
    ),
    seed=st.integers(0, 10_000),
)
def test_ranknet_permutation_invariant(data, seed):
    s = np.array([a for a, _ in data])
    lab = np.array([b for _, b in data])
    perm = np.random.default_rng(seed).permutation(len(s))
    base = ranknet_loss(_leaf(s), lab).value
    shuffled = ranknet_loss(_leaf(s[perm]), lab[perm]).value
    assert abs(base - shuffled) <= 1e-12 * max(1.0, abs(base))


def test_ranknet_label_shape_checked():
    with pytest.raises(LossError, match="labels shape"):
        ranknet_loss(_leaf([1.0, 2.0]), [1, 2, 3])


# ---------------------------------------------------------------------------
# click reweighting identities
# ---------------------------------------------------------------------------


def test_ipw_with_unit_propensity_is_bitwise_naive():
    s = np.array([0.7, -0.3, 1.1, 0.0])
    c = np.array([1.0, 0.0, 1.0, 0.0])
    a_scores, b_scores = _leaf(s), _leaf(s)
    naive = naive_click_loss(a_scores, c)
    ipw = ipw_listwise(b_scores, c, np.ones(4))
    assert naive.value == ipw.value  # bitwise
    backward(naive)
    backward(ipw)
    np.testing.assert_array_equal(a_scores.grad, b_scores.grad)


def test_ipw_upweights_low_propensity_clicks():
    s = np.array([0.0, 0.0])
    ls = _log_softmax_oracle(s)
    loss = ipw_listwise(_leaf(s), [1.0, 1.0], [1.0, 0.25])
    assert loss.value == pytest.approx(-(1.0 * ls[0] + 4.0 * ls[1]), abs=1e-12)


def test_ipw_rejects_nonpositive_propensity():
    with pytest.raises(LossError, match="strictly positive"):
        ipw_listwise(_leaf([1.0, 2.0]), [1, 0], [1.0, 0.0])


def test_relevance_ratios_math():
    s = np.array([2.0, 0.0, -1.0])
    r = relevance_ratios(s)
    np.testing.assert_allclose(r, np.exp(s[0] - s), atol=1e-12)
    assert r[0] == 1.0
    np.testing.assert_allclose(relevance_ratios(s + 123.0), r, atol=1e-12)
    huge = relevance_ratios(np.array([1000.0, 999.0]))
    assert np.isfinite(huge).all()


# ---------------------------------------------------------------------------
# dual objectives
# ---------------------------------------------------------------------------

_POS = np.array([1, 2, 3, 4])
_CLICKS = np.array([1.0, 0.0, 1.0, 0.0])
_SCORES = np.array([0.4, -0.2, 0.9, 0.1])


def _dla_setup(max_len=10):
    store = ParamStore()
    scores = _leaf(_SCORES, store)
    prop = PositionalPropensity(max_len=max_len, store=store)
    return store, scores, prop


def test_dla_ranker_equals_naive_at_uniform_propensity():
    store, scores, prop = _dla_setup()
    ranker, _ = dla_losses(scores, _CLICKS, _POS, prop)
    naive = naive_click_loss(_leaf(_SCORES), _CLICKS)
    assert ranker.value == naive.value  # ratios are exactly 1.0


def test_dla_propensity_term_hand_value():
    store, scores, prop = _dla_setup()
    _, prop_loss = dla_losses(scores, _CLICKS, _POS, prop)
    # zero logits over the 4 gathered positions: log softmax = -log 4 each
    rel = relevance_ratios(_SCORES)
    expected = math.log(4) * float((rel * _CLICKS).sum())
    assert prop_loss.value == pytest.approx(expected, abs=1e-12)


def test_dla_ranker_uses_propensity_ratio_weights():
    store, scores, prop = _dla_setup()
    z = np.array([0.0, -0.5, -1.0, -1.5] + [0.0] * 6)
    prop.logits.value[:] = z
    ranker, _ = dla_losses(scores, _CLICKS, _POS, prop)
    w = np.exp(z[0] - z[_POS - 1]) * _CLICKS
    expected = listwise_ce(_leaf(_SCORES), w).value
    assert ranker.value == pytest.approx(expected, abs=1e-12)


def test_dla_gradient_isolation():
    """Ranker term never moves the propensity and vice versa."""
    store, scores, prop = _dla_setup()
    prop.logits.value[:4] = [0.0, -0.3, -0.8, -1.2]
    ranker, prop_loss = dla_losses(scores, _CLICKS, _POS, prop)
    store.zero_grads()
    backward(ranker)
    assert prop.logits.grad is None or not np.any(prop.logits.grad)
    assert np.abs(scores.grad).max() > 0
    store.zero_grads()
    backward(prop_loss)
    assert scores.grad is None or not np.any(scores.grad)
    assert np.abs(prop.logits.grad).max() > 0


def test_dla_displayed_mask_semantics():
    """Injected entries keep zero ranker weight but stay in the softmax;
    the propensity term sees only genuinely displayed entries."""
    store, scores, prop = _dla_setup()
    disp = np.array([True, True, False, False])
    clicks = np.array([1.0, 0.0, 1.0, 0.0])  # the injected click must be ignored
    ranker, prop_loss = dla_losses(scores, clicks, _POS, prop, displayed=disp)

    w = np.array([1.0, 0.0, 0.0, 0.0])
    assert ranker.value == pytest.approx(
        listwise_ce(_leaf(_SCORES), w).value, abs=1e-12
    )
    rel = relevance_ratios(_SCORES)
    expected_prop = math.log(2) * float(rel[0] * 1.0)  # two displayed positions
    assert prop_loss.value == pytest.approx(expected_prop, abs=1e-12)


def test_displayed_mask_validation():
    store, scores, prop = _dla_setup()
    with pytest.raises(LossError, match="top-ranked"):
        dla_losses(scores, _CLICKS, _POS, prop, displayed=[False, True, True, True])
    with pytest.raises(LossError, match="no displayed"):
        dla_losses(scores, _CLICKS, _POS, prop, displayed=[False] * 4)
    with pytest.raises(LossError, match="shape"):
        dla_losses(scores, _CLICKS, _POS, prop, displayed=[True])


def test_iobm_with_zeroed_context_is_bitwise_dla():
    store_a, scores_a, plain = _dla_setup()
    store_b = ParamStore()
    scores_b = _leaf(_SCORES, store_b)
    ctx = ContextualPropensity(max_len=10, store=store_b, seed=5)
    z = np.array([0.1, -0.4, -0.9, -1.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    plain.logits.value[:] = z
    ctx.logits.value[:] = z

    ranker_a, prop_a = dla_losses(scores_a, _CLICKS, _POS, plain)
    ranker_b, prop_b = iobm_losses(scores_b, _CLICKS, _POS, ctx)
    assert ranker_a.value == ranker_b.value
    assert prop_a.value == prop_b.value


def test_iobm_context_changes_the_objective_once_nonzero():
    store = ParamStore()
    scores = _leaf(_SCORES, store)
    ctx = ContextualPropensity(max_len=10, store=store, seed=5)
    rng = np.random.default_rng(0)
    for n in store.names():
        if ".ctx." in n:
            store[n].value += 0.4 * rng.standard_normal(store[n].value.shape)
    _, prop_click = iobm_losses(scores, _CLICKS, _POS, ctx)
    _, prop_quiet = iobm_losses(scores, np.zeros(4), _POS, ctx)
    # different click contexts produce different propensity logits; the
    # all-zero click list also zeroes the weights, so compare logits instead
    za = ctx.logits_for(_POS, _CLICKS).value
    zb = ctx.logits_for(_POS, np.zeros(4)).value
    assert not np.array_equal(za, zb)


def test_upe_single_stratum_matches_dla():
    store_a, scores_a, plain = _dla_setup()
    store_b = ParamStore()
    scores_b = _leaf(_SCORES, store_b)
    strat = StratifiedPropensity(max_len=10, n_strata=1, store=store_b)
    z = np.linspace(0.3, -1.5, 10)
    plain.logits.value[:] = z
    strat.logits.value[:, 0] = z

    ranker_a, prop_a = dla_losses(scores_a, _CLICKS, _POS, plain)
    ranker_b, prop_b = upe_losses(scores_b, _CLICKS, _POS, strat)
    assert abs(ranker_a.value - ranker_b.value) <= 1e-12
    assert abs(prop_a.value - prop_b.value) <= 1e-12

    store_a.zero_grads()
    store_b.zero_grads()
    backward(ndiff.add(ranker_a, prop_a))
    backward(ndiff.add(ranker_b, prop_b))
    np.testing.assert_allclose(scores_a.grad, scores_b.grad, atol=1e-12)
    np.testing.assert_allclose(
        plain.logits.grad, strat.logits.grad[:, 0], atol=1e-12
    )


def test_upe_conditional_term_uses_given_strata():
    store = ParamStore()
    scores = _leaf(_SCORES, store)
    strat = StratifiedPropensity(max_len=10, n_strata=2, store=store)
    strat.logits.value[:] = np.arange(20.0).reshape(10, 2)
    strata = np.array([0, 1, 1, 0])
    _, prop_loss = upe_losses(scores, _CLICKS, _POS, strat, strata=strata)
    z = strat.logits.value[_POS - 1, strata]
    rel = relevance_ratios(_SCORES)
    expected = listwise_ce(_leaf(z), rel * _CLICKS).value
    assert prop_loss.value == pytest.approx(expected, abs=1e-12)


def test_upe_default_strata_are_position_quantiles():
    store = ParamStore()
    scores = _leaf(_SCORES, store)
    strat = StratifiedPropensity(max_len=10, n_strata=3, store=store)
    strat.logits.value[:] = np.random.default_rng(1).standard_normal((10, 3))
    auto_r, auto_p = upe_losses(scores, _CLICKS, _POS, strat)
    explicit = np.array([strat.position_stratum(int(p)) for p in _POS])
    scores2 = _leaf(_SCORES)
    manual_r, manual_p = upe_losses(scores2, _CLICKS, _POS, strat, strata=explicit)
    assert auto_p.value == manual_p.value
    assert auto_r.value == manual_r.value


def test_drop_rate_zero_and_eval_are_bitwise_dla():
    store, scores, prop = _dla_setup()
    prop.logits.value[:] = np.linspace(0.5, -0.5, 10)
    ranker_d, prop_d = dla_losses(scores, _CLICKS, _POS, prop)
    for kwargs in (
        dict(rate=0.0, mode="train", seed=3),
        dict(rate=0.7, mode="eval", seed=3),
    ):
        ranker_z, prop_z = drop_losses(scores, _CLICKS, _POS, prop, **kwargs)
        assert ranker_z.value == ranker_d.value
        assert prop_z.value == prop_d.value


def test_drop_training_rate_perturbs_propensity_term_only():
    store, scores, prop = _dla_setup()
    prop.logits.value[:] = np.linspace(0.5, -0.5, 10)
    ranker_d, prop_d = dla_losses(scores, _CLICKS, _POS, prop)
    values = set()
    for seed in range(12):
        ranker_z, prop_z = drop_losses(
            scores, _CLICKS, _POS, prop, rate=0.5, mode="train", seed=seed
        )
        assert ranker_z.value == ranker_d.value
        values.add(float(prop_z.value))
        again = drop_losses(
            scores, _CLICKS, _POS, prop, rate=0.5, mode="train", seed=seed
        )[1]
        assert again.value == prop_z.value
    assert len(values) > 1


def test_gradrev_base_terms_match_dla_and_head_fits_score_softmax():
    store, scores, prop = _dla_setup()
    aux = AuxiliaryRelevanceHead(store=store, seed=1)
    ranker_g, prop_g, rev = gradrev_losses(
        scores, _CLICKS, _POS, prop, aux, lam=1.0
    )
    ranker_d, prop_d = dla_losses(scores, _CLICKS, _POS, prop)
    assert ranker_g.value == ranker_d.value
    assert prop_g.value == prop_d.value
    assert rev.value > 0


def test_gradrev_lambda_scales_reversed_gradient():
    def prop_grad(lam):
        store, scores, prop = _dla_setup()
        aux = AuxiliaryRelevanceHead(store=store, seed=1)
        _, _, rev = gradrev_losses(scores, _CLICKS, _POS, prop, aux, lam=lam)
        store.zero_grads()
        backward(rev)
        return prop.logits.grad.copy()

    g0 = prop_grad(0.0)
    g1 = prop_grad(1.0)
    g2 = prop_grad(2.0)
    np.testing.assert_array_equal(g0, np.zeros(10))
    assert np.abs(g1).max() > 0
    np.testing.assert_allclose(g2, 2.0 * g1, atol=1e-12)


def test_gradrev_reversal_negates_true_derivative():
    """Analytic gradient into the propensity logits = -lam * d(rev)/d(logit)."""
    store, scores, prop = _dla_setup()
    aux = AuxiliaryRelevanceHead(store=store, seed=1)
    lam = 1.5

    def rev_value() -> float:
        _, _, rev = gradrev_losses(scores, _CLICKS, _POS, prop, aux, lam=lam)
        return float(rev.value)

    _, _, rev = gradrev_losses(scores, _CLICKS, _POS, prop, aux, lam=lam)
    store.zero_grads()
    backward(rev)
    analytic = prop.logits.grad[1]

    h = 1e-6
    prop.logits.value[1] += h
    up = rev_value()
    prop.logits.value[1] -= 2 * h
    down = rev_value()
    prop.logits.value[1] += h
    numeric = (up - down) / (2 * h)
    assert analytic == pytest.approx(-lam * numeric, rel=1e-4)


# ---------------------------------------------------------------------------
# gated hybrid objective
# ---------------------------------------------------------------------------


def test_famol_opens_at_equal_halves():
    store = ParamStore()
    gate = FrequencyGate(store=store, seed=0)
    click = _leaf([0.8], store, "c")
    ann = _leaf([0.4], store, "a")
    click_term = ndiff.vsum(click)
    ann_term = ndiff.vsum(ann)
    total = famol_loss(gate, 1, click_term, ann_term)
    assert total.value == 0.5 * 0.8 + 0.5 * 0.4  # gate weights exactly 0.5


def test_famol_single_sided_queries():
    store = ParamStore()
    gate = FrequencyGate(store=store, seed=0)
    term = ndiff.vsum(_leaf([1.2], store, "t"))
    click_only = famol_loss(gate, 0, term, None)
    ann_only = famol_loss(gate, 0, None, term)
    assert click_only.value == pytest.approx(0.6, abs=1e-15)
    assert ann_only.value == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(LossError, match="neither"):
        famol_loss(gate, 0, None, None)


def test_famol_routes_gradients_into_gate_and_terms():
    store = ParamStore()
    gate = FrequencyGate(store=store, seed=0)
    c_leaf = _leaf([0.8], store, "c")
    a_leaf = _leaf([0.4], store, "a")
    total = famol_loss(gate, 2, ndiff.vsum(c_leaf), ndiff.vsum(a_leaf))
    store.zero_grads()
    backward(total)
    assert c_leaf.grad[0] == pytest.approx(0.5, abs=1e-12)
    assert a_leaf.grad[0] == pytest.approx(0.5, abs=1e-12)
    gate_grads = [store[n].grad for n in store.names() if n.startswith("gate.net")]
    assert any(np.abs(g).max() > 0 for g in gate_grads)


def test_batch_mean_values_and_identity():
    terms = [ndiff.vsum(_leaf([v])) for v in (1.0, 2.0, 4.0)]
    assert batch_mean(terms).value == pytest.approx(7.0 / 3.0, abs=1e-15)
    single = ndiff.vsum(_leaf([0.7]))
    assert batch_mean([single]).value == single.value  # x / 1.0 is bitwise x
    with pytest.raises(LossError, match="empty"):
        batch_mean([])


# ---------------------------------------------------------------------------
# finite-difference checks
# ---------------------------------------------------------------------------

_FD_TOL = 1e-4


def test_fd_listwise_ce():
    rng = np.random.default_rng(0)
    for trial in range(5):
        store = ParamStore()
        scores = store.add("s", rng.standard_normal(6))
        w = rng.uniform(0, 2, size=6)
        err = finite_diff_check(lambda: listwise_ce(scores, w), [scores])
        assert err < _FD_TOL


def test_fd_ranknet():
    rng = np.random.default_rng(1)
    for trial in range(5):
        store = ParamStore()
        scores = store.add("s", rng.standard_normal(5))
        labels = rng.integers(0, 5, size=5)
        err = finite_diff_check(lambda: ranknet_loss(scores, labels), [scores])
        assert err < _FD_TOL


def test_fd_ipw():
    rng = np.random.default_rng(2)
    store = ParamStore()
    scores = store.add("s", rng.standard_normal(5))
    clicks = rng.integers(0, 2, size=5).astype(float)
    g = rng.uniform(0.2, 1.0, size=5)
    err = finite_diff_check(lambda: ipw_listwise(scores, clicks, g), [scores])
    assert err < _FD_TOL


def test_fd_dla_terms():
    rng = np.random.default_rng(3)
    store = ParamStore()
    scores = store.add("s", rng.standard_normal(4))
    prop = PositionalPropensity(max_len=6, store=store)
    prop.logits.value[:] = 0.3 * rng.standard_normal(6)
    clicks = np.array([1.0, 1.0, 0.0, 1.0])
    pos = np.array([1, 2, 3, 5])

    # ranker vs scorer params (propensity-derived weights stay constant)
    err = finite_diff_check(
        lambda: dla_losses(scores, clicks, pos, prop)[0], [scores]
    )
    assert err < _FD_TOL
    # propensity term vs propensity params (score-derived weights constant)
    err = finite_diff_check(
        lambda: dla_losses(scores, clicks, pos, prop)[1], [prop.logits]
    )
    assert err < _FD_TOL


def test_fd_iobm_terms():
    rng = np.random.default_rng(4)
    store = ParamStore()
    scores = store.add("s", rng.standard_normal(4))
    ctx = ContextualPropensity(max_len=6, window=1, hidden=(4,), store=store, seed=0)
    for n in store.names():
        if n.startswith("prop."):
            store[n].value += 0.2 * rng.standard_normal(store[n].value.shape)
    clicks = np.array([1.0, 0.0, 1.0, 0.0])
    pos = np.array([1, 2, 4, 6])

    err = finite_diff_check(
        lambda: iobm_losses(scores, clicks, pos, ctx)[0], [scores]
    )
    assert err < _FD_TOL
    prop_params = [store[n] for n in store.names() if n.startswith("prop.")]
    err = finite_diff_check(
        lambda: iobm_losses(scores, clicks, pos, ctx)[1], prop_params
    )
    assert err < _FD_TOL


def test_fd_upe_terms():
    rng = np.random.default_rng(5)
    store = ParamStore()
    scores = store.add("s", rng.standard_normal(4))
    strat = StratifiedPropensity(max_len=8, n_strata=2, store=store)
    strat.logits.value[:] = 0.3 * rng.standard_normal((8, 2))
    clicks = np.array([1.0, 1.0, 0.0, 1.0])
    pos = np.array([1, 3, 5, 8])

    err = finite_diff_check(
        lambda: upe_losses(scores, clicks, pos, strat)[0], [scores]
    )
    assert err < _FD_TOL
    err = finite_diff_check(
        lambda: upe_losses(scores, clicks, pos, strat)[1], [strat.logits]
    )
    assert err < _FD_TOL


def test_fd_drop_with_fixed_mask():
    rng = np.random.default_rng(6)
    store = ParamStore()
    scores = store.add("s", rng.standard_normal(4))
    prop = PositionalPropensity(max_len=6, store=store)
    prop.logits.value[:] = 0.3 * rng.standard_normal(6)
    clicks = np.array([1.0, 0.0, 1.0, 1.0])
    pos = np.array([1, 2, 3, 4])

    err = finite_diff_check(
        lambda: drop_losses(scores, clicks, pos, prop, rate=0.5, mode="train", seed=7)[1],
        [prop.logits],
    )
    assert err < _FD_TOL


def test_fd_gradrev_head():
    rng = np.random.default_rng(7)
    store = ParamStore()
    scores = store.add("s", rng.standard_normal(4))
    prop = PositionalPropensity(max_len=6, store=store)
    aux = AuxiliaryRelevanceHead(hidden=(4,), store=store, seed=3)
    clicks = np.array([1.0, 1.0, 0.0, 0.0])
    pos = np.array([1, 2, 3, 4])
    aux_params = [store[n] for n in store.names() if n.startswith("aux.")]
    err = finite_diff_check(
        lambda: gradrev_losses(scores, clicks, pos, prop, aux, lam=1.0)[2],
        aux_params,
    )
    assert err < _FD_TOL


def test_fd_famol_gate():
    rng = np.random.default_rng(8)
    store = ParamStore()
    gate = FrequencyGate(store=store, seed=0)
    for n in store.names():
        if n.startswith("gate.net"):
            store[n].value += 0.2 * rng.standard_normal(store[n].value.shape)
    scores = store.add("s", rng.standard_normal(5))
    w = rng.uniform(0, 3, size=5)
    labels = rng.integers(0, 5, size=5)

    def build():
        click_term = listwise_ce(scores, w)
        ann_term = ranknet_loss(scores, labels)
        return famol_loss(gate, 1, click_term, ann_term)

    gate_params = [store[n] for n in store.names() if n.startswith("gate.")]
    err = finite_diff_check(build, gate_params + [scores])
    assert err < _FD_TOL
