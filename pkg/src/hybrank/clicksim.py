"""Position-based click model simulation.

Clicks follow the examination hypothesis: a click happens iff the position
is examined (probability ``(1/k)**eta``) and the document is perceived
relevant. Perceived relevance maps the hidden grade through the standard
exponential gain curve with a noise floor, plus an optional bonus from the
hidden per-document quality scalar. That bonus is the one channel visible
to clicks but never to the annotation oracle, which is what makes hybrid
supervision experiments interesting.

Randomness is drawn from per-session substreams keyed by (seed, query_id,
session index), so corpora of any size simulate identically regardless of
iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .data import Corpus, Query, RankedList, Session
from .seeds import substream


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class PBMParams:
    """Position-based model parameters.

    ``eta`` steepens position bias (examination = (1/k)**eta); ``epsilon``
    floors perceived relevance so even grade-0 documents attract noise
    clicks; ``quality_bonus`` scales how strongly the hidden quality scalar
    shifts click probability.
    """

    eta: float = 1.0
    epsilon: float = 0.1
    max_grade: int = 4
    quality_bonus: float = 0.0

    def __post_init__(self):
        if self.eta < 0:
            raise SimulationError("eta must be nonnegative")
        if not 0.0 <= self.epsilon < 1.0:
            raise SimulationError("epsilon must be in [0, 1)")


def examination_prob(position: int, params: PBMParams) -> float:
    """P(examined at 1-based position k) = (1/k)**eta."""
    if position < 1:
        raise SimulationError(f"position must be >= 1, got {position}")
    return (1.0 / position) ** params.eta


def relevance_prob(grade: int, quality: float, params: PBMParams) -> float:
    """Perceived relevance: floor + gain-curve share + quality bonus, clipped."""
    if not 0 <= grade <= params.max_grade:
        raise SimulationError(f"grade {grade} outside 0..{params.max_grade}")
    base = params.epsilon + (1.0 - params.epsilon) * (2.0**grade - 1.0) / (
        2.0**params.max_grade - 1.0
    )
    return float(np.clip(base + params.quality_bonus * quality, 0.0, 1.0))


def simulate_session(
    ranked_list: RankedList,
    grades: Mapping[str, int],
    qualities: Mapping[str, float],
    params: PBMParams,
    seed: int,
    session_index: int = 0,
) -> Session:
    """One impression of ``ranked_list`` under the PBM.

    ``grades``/``qualities`` map doc_id to hidden truth. Deterministic in
    (seed, query_id, session_index).
    """
    rng = substream(seed, "click", ranked_list.query_id, session_index)
    n = len(ranked_list)
    draws = rng.random((n, 2))
    clicks = []
    for i, doc_id in enumerate(ranked_list.doc_ids):
        if doc_id not in grades:
            raise SimulationError(
                f"no hidden grade for ({ranked_list.query_id}, {doc_id})"
            )
        exam = draws[i, 0] < examination_prob(i + 1, params)
        rel = draws[i, 1] < relevance_prob(
            grades[doc_id], qualities.get(doc_id, 0.0), params
        )
        clicks.append(1 if (exam and rel) else 0)
    return Session(ranked_list, tuple(clicks))


def frequency_proportional(
    rate: float = 1.0, cap: int = 50, floor: int = 0
) -> Callable[[Query], int]:
    """Session-count policy: round(frequency * rate), clamped to [floor, cap]."""

    def plan(query: Query) -> int:
        return int(np.clip(round(query.frequency * rate), floor, cap))

    return plan


def simulate_corpus(
    corpus: Corpus,
    params: PBMParams,
    seed: int,
    sessions_per_query: int | Callable[[Query], int] = 1,
    query_ids: list[str] | None = None,
) -> list[Session]:
    """Simulate sessions for every query list (or the given subset).

    Returns the sessions in (query_id, session_index) order; the caller
    decides whether to attach them to the corpus. Requires hidden truth.
    """
    if corpus.truth is None:
        raise SimulationError("corpus has no hidden truth to click on")
    plan = (
        sessions_per_query
        if callable(sessions_per_query)
        else (lambda q: int(sessions_per_query))
    )
    sessions: list[Session] = []
    ids = sorted(query_ids) if query_ids is not None else sorted(corpus.lists)
    for qid in ids:
        rl = corpus.lists[qid]
        grades = {
            d: corpus.truth[(qid, d)].grade for d in rl.doc_ids if (qid, d) in corpus.truth
        }
        quals = {
            d: corpus.truth[(qid, d)].quality
            for d in rl.doc_ids
            if (qid, d) in corpus.truth
        }
        for s_idx in range(plan(corpus.queries[qid])):
            sessions.append(
                simulate_session(rl, grades, quals, params, seed, s_idx)
            )
    return sessions
