"""Ranking metrics, annotation-quality reports, and the evaluation loop.

Metrics are implemented directly from their definitions (gain 2^grade - 1,
log2 discounts, midrank-based rank correlations) in plain float64 so they
can be checked against exact-arithmetic oracles. Ranking ties are broken by
original list order everywhere, which keeps every run reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import BIN_NAMES, Corpus, bin_name, inject_true_negatives


class EvalError(ValueError):
    pass


def rank_by_scores(scores) -> np.ndarray:
    """Indices in descending score order; equal scores keep list order."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise EvalError("scores must be 1-D")
    return np.argsort(-s, kind="stable")


def dcg_at_k(grades_in_rank_order, k: int) -> float:
    """Discounted cumulative gain with gains 2^grade - 1."""
    g = np.asarray(grades_in_rank_order, dtype=np.float64)
    top = g[: max(k, 0)]
    if top.size == 0:
        return 0.0
    gains = np.exp2(top) - 1.0
    discounts = np.log2(np.arange(2, top.size + 2, dtype=np.float64))
    return float(np.sum(gains / discounts))


def ndcg_at_k(scores, grades, k: int) -> tuple[float, bool]:
    """Normalized DCG of the score-induced ranking.

    Returns (value, degenerate). A query where even the ideal ordering has
    zero gain (all grades zero) scores 1.0 -- every ordering of worthless
    documents is equally perfect -- and is flagged so callers can count it.
    """
    if k <= 0:
        raise EvalError(f"k must be positive, got {k}")
    g = np.asarray(grades, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if g.shape != s.shape:
        raise EvalError("scores and grades must align")
    order = rank_by_scores(s)
    ideal = np.sort(g)[::-1]
    idcg = dcg_at_k(ideal, k)
    if idcg == 0.0:
        return 1.0, True
    return dcg_at_k(g[order], k) / idcg, False


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the mean of the positions they occupy."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b) -> tuple[float, bool]:
    """Spearman rank correlation (Pearson over midranks).

    Returns (rho, degenerate); degenerate means one side is constant, in
    which case rho is reported as 0.0.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EvalError("inputs must be equal-length 1-D sequences")
    if x.size < 2:
        raise EvalError("need at least two items")
    ra = _midranks(x)
    rb = _midranks(y)
    da = ra - ra.mean()
    db = rb - rb.mean()
    va = float(np.sum(da * da))
    vb = float(np.sum(db * db))
    if va == 0.0 or vb == 0.0:
        return 0.0, True
    return float(np.sum(da * db)) / float(np.sqrt(va * vb)), False


def kendall_tau(a, b) -> tuple[float, bool]:
    """Kendall correlation with the tie correction (tau-b).

    Returns (tau, degenerate); degenerate means one side has no untied
    pairs, in which case tau is reported as 0.0. O(n^2) pair counting --
    lists here are short.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EvalError("inputs must be equal-length 1-D sequences")
    n = x.size
    if n < 2:
        raise EvalError("need at least two items")
    concordant = discordant = tied_x = tied_y = tied_both = 0
    for i in range(n):
        for j in range(i + 1, n):
            ex = x[i] == x[j]
            ey = y[i] == y[j]
            if ex and ey:
                tied_both += 1
            elif ex:
                tied_x += 1
            elif ey:
                tied_y += 1
            elif (x[i] > x[j]) == (y[i] > y[j]):
                concordant += 1
            else:
                discordant += 1
    n0 = n * (n - 1) // 2
    denom_x = n0 - (tied_x + tied_both)
    denom_y = n0 - (tied_y + tied_both)
    if denom_x <= 0 or denom_y <= 0:
        return 0.0, True
    return (concordant - discordant) / float(np.sqrt(float(denom_x) * float(denom_y))), False


# ---------------------------------------------------------------------------
# Annotation-quality reporting
# ---------------------------------------------------------------------------


@dataclass
class SourceConsistency:
    source: str
    n_queries: int
    n_skipped_short: int
    n_skipped_degenerate: int
    mean_kendall: float
    mean_spearman: float
    label_counts: dict[int, int]

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "n_queries": self.n_queries,
            "n_skipped_short": self.n_skipped_short,
            "n_skipped_degenerate": self.n_skipped_degenerate,
            "mean_kendall": self.mean_kendall,
            "mean_spearman": self.mean_spearman,
            "label_counts": {str(k): v for k, v in sorted(self.label_counts.items())},
        }


def consistency_report(corpus: Corpus, sources, min_docs: int = 3) -> dict[str, SourceConsistency]:
    """Per-source agreement between stored labels and true grades.

    For each annotated query with more than ``min_docs - 1`` labeled
    documents, rank-correlate the labels against the true grades; queries
    where either side is constant are skipped (and counted). Macro averages
    over queries.
    """
    if not corpus.truth:
        raise EvalError("corpus has no true grades to compare against")
    truth = {key: t.grade for key, t in corpus.truth.items()}
    out: dict[str, SourceConsistency] = {}
    for source in sources:
        by_query = corpus.annotation_map((source,))
        taus: list[float] = []
        rhos: list[float] = []
        short = degen = 0
        counts: dict[int, int] = {}
        for qid in sorted(by_query):
            pairs = [
                (did, lab)
                for did, lab in sorted(by_query[qid].items())
                if (qid, did) in truth
            ]
            for _, lab in pairs:
                counts[lab] = counts.get(lab, 0) + 1
            if len(pairs) < min_docs:
                short += 1
                continue
            labels = [lab for _, lab in pairs]
            grades = [truth[(qid, did)] for did, _ in pairs]
            tau, tau_degen = kendall_tau(labels, grades)
            rho, rho_degen = spearman_rho(labels, grades)
            if tau_degen or rho_degen:
                degen += 1
                continue
            taus.append(tau)
            rhos.append(rho)
        out[source] = SourceConsistency(
            source=source,
            n_queries=len(taus),
            n_skipped_short=short,
            n_skipped_degenerate=degen,
            mean_kendall=float(np.mean(taus)) if taus else 0.0,
            mean_spearman=float(np.mean(rhos)) if rhos else 0.0,
            label_counts=counts,
        )
    return out


def label_distribution(corpus: Corpus, source: str) -> dict[int, int]:
    counts: dict[int, int] = {}
    for rec in corpus.annotations:
        if rec.source == source:
            counts[rec.label] = counts.get(rec.label, 0) + 1
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------------------
# Ranker evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    n_queries: int
    ks: tuple[int, ...]
    overall: dict[str, float]
    per_bin: dict[str, dict[str, float]] = field(default_factory=dict)
    bin_counts: dict[str, int] = field(default_factory=dict)
    degenerate_queries: int = 0
    injected_per_query: int = 0

    def metric(self, name: str) -> float:
        return self.overall[name]

    def to_json(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "ks": list(self.ks),
            "overall": self.overall,
            "per_bin": self.per_bin,
            "bin_counts": self.bin_counts,
            "degenerate_queries": self.degenerate_queries,
            "injected_per_query": self.injected_per_query,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EvalReport":
        return cls(
            n_queries=payload["n_queries"],
            ks=tuple(payload["ks"]),
            overall=dict(payload["overall"]),
            per_bin={k: dict(v) for k, v in payload.get("per_bin", {}).items()},
            bin_counts=dict(payload.get("bin_counts", {})),
            degenerate_queries=payload.get("degenerate_queries", 0),
            injected_per_query=payload.get("injected_per_query", 0),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def format_table(self) -> str:
        lines = ["metric\toverall" + "".join(f"\t{b}" for b in BIN_NAMES if b in self.per_bin)]
        bins = [b for b in BIN_NAMES if b in self.per_bin]
        for name in sorted(self.overall):
            row = [name, f"{self.overall[name]:.4f}"]
            row.extend(f"{self.per_bin[b][name]:.4f}" for b in bins)
            lines.append("\t".join(row))
        return "\n".join(lines)


def evaluate_ranker(
    score_fn,
    corpus: Corpus,
    query_ids,
    ks=(1, 3, 5, 10),
    inject_negatives: int = 0,
    inject_seed: int = 0,
) -> EvalReport:
    """Score each query's candidate list and aggregate nDCG over queries.

    ``score_fn(query_id, doc_ids)`` returns one score per document.
    ``inject_negatives`` appends that many displayed-elsewhere documents to
    every list before scoring; they count as grade 0 for this query, so the
    metric drops when the ranker mistakes foreign documents for relevant
    ones. Per-bin averages appear when queries carry frequency bins.
    """
    if not corpus.truth:
        raise EvalError("corpus has no true grades; cannot evaluate")
    truth = {key: t.grade for key, t in corpus.truth.items()}
    lists = corpus.lists
    qbin = {qid: q.freq_bin for qid, q in corpus.queries.items()}
    ids = sorted(query_ids)
    if not ids:
        raise EvalError("no queries to evaluate")
    pool = corpus.displayed_doc_pool() if inject_negatives else []

    per_query: dict[str, dict[str, float]] = {}
    degenerate = 0
    for qid in ids:
        if qid not in lists:
            raise EvalError(f"query {qid} has no candidate list")
        rl = lists[qid]
        if inject_negatives:
            own = set(rl.doc_ids)
            rl = inject_true_negatives(
                rl, [d for d in pool if d not in own], inject_negatives, inject_seed
            )
        grades = np.asarray([truth.get((qid, d), 0) for d in rl.doc_ids], dtype=np.float64)
        scores = np.asarray(score_fn(qid, list(rl.doc_ids)), dtype=np.float64)
        if scores.shape != grades.shape:
            raise EvalError(f"score_fn returned {scores.shape} for {len(grades)} documents")
        metrics: dict[str, float] = {}
        was_degenerate = False
        for k in ks:
            value, degen = ndcg_at_k(scores, grades, k)
            metrics[f"ndcg@{k}"] = value
            was_degenerate = was_degenerate or degen
        if was_degenerate:
            degenerate += 1
        per_query[qid] = metrics

    names = [f"ndcg@{k}" for k in ks]
    overall = {m: float(np.mean([per_query[q][m] for q in ids])) for m in names}
    per_bin: dict[str, dict[str, float]] = {}
    bin_counts: dict[str, int] = {}
    if all(qbin.get(q) is not None for q in ids):
        for b, bname in enumerate(BIN_NAMES):
            members = [q for q in ids if qbin[q] == b]
            if not members:
                continue
            bin_counts[bname] = len(members)
            per_bin[bname] = {
                m: float(np.mean([per_query[q][m] for q in members])) for m in names
            }
    return EvalReport(
        n_queries=len(ids),
        ks=tuple(ks),
        overall=overall,
        per_bin=per_bin,
        bin_counts=bin_counts,
        degenerate_queries=degenerate,
        injected_per_query=inject_negatives,
    )
