"""Experiment setup: from a blank seed to a corpus ready for training.

Two preparations cover the experimental grid:

* ``prepare_click_corpus`` -- every training query gets simulated click
  sessions; used for the click-debiasing comparisons.
* ``prepare_hybrid_corpus`` -- the frequency-skewed setting: high-frequency
  bins log clicks in proportion to query frequency, low/mid bins get
  scripted annotations instead, and held-out queries get exact labels.

Both reserve an evaluation pool of queries up front and split it into
validation and test; training queries never overlap the pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .annotate import (
    OracleParams,
    annotate_corpus,
    uniform_noise_confusion,
)
from .clicksim import PBMParams, frequency_proportional, simulate_corpus
from .data import (
    AnnotationRecord,
    BIN_HIGH,
    BIN_LOW,
    BIN_MID,
    SOURCE_HUMAN,
    SOURCE_LIST,
    Corpus,
    DatasetSplit,
    RankedList,
    SyntheticConfig,
    assign_frequency_bins,
    generate_synthetic,
    split_dataset,
)
from .scorers import (
    FeatureVectorProvider,
    SyntheticRepConfig,
    SyntheticRepProvider,
)
from .seeds import substream


class PipelineError(ValueError):
    pass


def _reserve_eval_pool(
    corpus: Corpus, eval_fraction: float, ratio, seed: int
) -> DatasetSplit:
    ids = sorted(corpus.queries)
    if not 0.0 < eval_fraction < 1.0:
        raise PipelineError("eval_fraction must be in (0, 1)")
    n_eval = max(2, int(round(len(ids) * eval_fraction)))
    if n_eval >= len(ids):
        raise PipelineError("eval pool would swallow every query")
    rng = substream(seed, "evalpool")
    order = rng.permutation(len(ids))
    eval_ids = sorted(ids[int(i)] for i in order[:n_eval])
    train_ids = sorted(set(ids) - set(eval_ids))
    return split_dataset(eval_ids, ratio=ratio, seed=seed, train_ids=train_ids)


def _record_exact_labels(corpus: Corpus, query_ids) -> None:
    """Store ground-truth grades as human annotations for held-out queries."""
    for qid in sorted(query_ids):
        rl = corpus.lists[qid]
        for d in rl.doc_ids:
            t = corpus.truth[(qid, d)]
            corpus.annotations.append(
                AnnotationRecord(qid, d, t.grade, source=SOURCE_HUMAN)
            )


@dataclass(frozen=True)
class ClickSetupConfig:
    """A uniform click-logging world: same session count for every query."""

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    pbm: PBMParams = field(default_factory=PBMParams)
    sessions_per_query: int = 20
    eval_fraction: float = 0.3
    split_ratio: tuple[int, int] = (3, 7)
    seed: int = 0


def prepare_click_corpus(config: ClickSetupConfig) -> tuple[Corpus, DatasetSplit]:
    cfg = config
    corpus = generate_synthetic(replace(cfg.synthetic, seed=cfg.seed))
    assign_frequency_bins(corpus.queries.values())
    split = _reserve_eval_pool(corpus, cfg.eval_fraction, cfg.split_ratio, cfg.seed)
    corpus.sessions.extend(
        simulate_corpus(
            corpus,
            cfg.pbm,
            seed=cfg.seed,
            sessions_per_query=cfg.sessions_per_query,
            query_ids=list(split.train),
        )
    )
    _record_exact_labels(corpus, split.validation + split.test)
    return corpus, split


@dataclass(frozen=True)
class HybridSetupConfig:
    """The frequency-skewed supervision world.

    Training queries in ``click_bins`` log sessions proportional to their
    frequency; training queries in ``annotation_bins`` get oracle labels
    with a per-bin error rate (head bins noisier than tail bins reflects
    annotators degrading on ambiguous head intent only if configured so --
    the default puts more error on the high bin). Held-out queries carry
    exact labels.
    """

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    pbm: PBMParams = field(default_factory=PBMParams)
    session_rate: float = 1.0
    session_cap: int = 50
    session_floor: int = 1
    click_bins: tuple[int, ...] = (BIN_HIGH,)
    annotation_bins: tuple[int, ...] = (BIN_LOW, BIN_MID)
    annotation_strategy: str = SOURCE_LIST
    oracle_error: tuple[float, float, float] = (0.1, 0.1, 0.3)  # per bin low..high
    consistency_rho: float = 0.7
    annotate_click_bins: bool = False  # label the click bins too (gated runs)
    # Optional per-bin display-order noise (low..high). Head queries usually
    # have a well-tuned production ranking while tail queries get a rough
    # one, so e.g. (2.0, 0.5, 0.05) leaves high-bin lists near grade order
    # and scrambles low-bin lists; None keeps the generator's single level.
    logging_noise_by_bin: tuple[float, float, float] | None = None
    eval_fraction: float = 0.3
    split_ratio: tuple[int, int] = (3, 7)
    seed: int = 0


def _retilt_display_order(corpus, bins, noise_by_bin, seed) -> None:
    """Re-rank every impression list under a frequency-dependent policy:
    true grade plus bin-scaled noise, stable sort descending."""
    for qid in sorted(corpus.lists):
        rl = corpus.lists[qid]
        rng = substream(seed, "policy", qid)
        s = np.asarray(
            [corpus.truth[(qid, d)].grade for d in rl.doc_ids], dtype=np.float64
        )
        s += noise_by_bin[bins[qid]] * rng.standard_normal(len(s))
        order = np.argsort(-s, kind="stable")
        corpus.lists[qid] = RankedList(qid, tuple(rl.doc_ids[int(i)] for i in order))


def prepare_hybrid_corpus(config: HybridSetupConfig) -> tuple[Corpus, DatasetSplit]:
    cfg = config
    if len(cfg.oracle_error) != 3:
        raise PipelineError("oracle_error needs one rate per frequency bin")
    corpus = generate_synthetic(replace(cfg.synthetic, seed=cfg.seed))
    bins = assign_frequency_bins(corpus.queries.values())
    if cfg.logging_noise_by_bin is not None:
        if len(cfg.logging_noise_by_bin) != 3:
            raise PipelineError(
                "logging_noise_by_bin needs one level per frequency bin"
            )
        _retilt_display_order(corpus, bins, cfg.logging_noise_by_bin, cfg.seed)
    split = _reserve_eval_pool(corpus, cfg.eval_fraction, cfg.split_ratio, cfg.seed)

    click_qids = [q for q in split.train if bins[q] in cfg.click_bins]
    ann_qids = [q for q in split.train if bins[q] in cfg.annotation_bins]
    if cfg.annotate_click_bins:
        ann_qids = sorted(set(ann_qids) | set(click_qids))

    if click_qids:
        corpus.sessions.extend(
            simulate_corpus(
                corpus,
                cfg.pbm,
                seed=cfg.seed,
                sessions_per_query=frequency_proportional(
                    cfg.session_rate, cap=cfg.session_cap, floor=cfg.session_floor
                ),
                query_ids=click_qids,
            )
        )
    if ann_qids:
        params_by_bin = {
            b: OracleParams(
                confusion=uniform_noise_confusion(cfg.oracle_error[b]),
                consistency_rho=cfg.consistency_rho,
            )
            for b in (BIN_LOW, BIN_MID, BIN_HIGH)
        }
        corpus.annotations.extend(
            annotate_corpus(
                corpus,
                cfg.annotation_strategy,
                params_by_bin[BIN_LOW],
                seed=cfg.seed,
                query_ids=ann_qids,
                params_by_bin=params_by_bin,
            )
        )
    _record_exact_labels(corpus, split.validation + split.test)
    return corpus, split


def make_provider(
    corpus: Corpus,
    kind: str = "synthetic",
    rep_config: SyntheticRepConfig | None = None,
    feature_params=None,
    standardize_on=None,
):
    """Build the input-vector provider for training.

    ``synthetic`` yields the latent-structure vectors (fast, controlled);
    ``feature`` computes the classic lexical feature set, standardized over
    the given queries' displayed pairs when ``standardize_on`` is set.
    """
    if kind == "synthetic":
        return SyntheticRepProvider(corpus, rep_config or SyntheticRepConfig())
    if kind == "feature":
        if feature_params is not None:
            provider = FeatureVectorProvider(corpus, params=feature_params)
        else:
            provider = FeatureVectorProvider(corpus)
        if standardize_on:
            pairs = [
                (qid, d)
                for qid in sorted(standardize_on)
                for d in corpus.lists[qid].doc_ids
            ]
            provider.fit_standardizer(pairs)
        return provider
    raise PipelineError(f"unknown provider kind {kind!r}")
