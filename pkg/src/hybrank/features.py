"""Classic learning-to-rank features over raw text plus link analysis.

Feature families, each computed over three fields (title, content, whole
document = title then content):

* summed term frequency, summed IDF, summed TF*IDF
* BM25 (k1=1.2, b=0.75) with IDF = ln(1 + (N - df + 0.5)/(df + 0.5))
* query log-likelihood under Jelinek-Mercer, Dirichlet, and absolute
  discounting smoothing (sums of log probabilities over unique query terms;
  terms unseen in the whole collection are skipped, as are degenerate
  non-positive probabilities when smoothing is disabled)

plus term-proximity features over the whole document, and document-level
features (field lengths, URL shape, domain PageRank).

All formulas operate on lowercased ``\\w+`` tokens. Proximity features come
in with- and without-stopword variants; the stopword list is configurable.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from urllib.parse import urlparse

import numpy as np

from .data import Corpus, Document


class FeatureError(ValueError):
    pass


class PageRankConvergenceError(RuntimeError):
    pass


_TOKEN_RE = re.compile(r"\w+")

DEFAULT_STOPWORDS = frozenset(
    """a an and are as at be by for from has he in is it its of on that the to
    was were will with this these those or not""".split()
)


@lru_cache(maxsize=1 << 16)
def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase word tokens. Cached: the same text is scored many times."""
    return tuple(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class FeatureParams:
    k1: float = 1.2
    b: float = 0.75
    jm_lambda: float = 0.1
    dirichlet_mu: float = 2000.0
    abs_delta: float = 0.7
    proximity_windows: tuple[int, int] = (5, 10)
    stopwords: frozenset[str] = DEFAULT_STOPWORDS


FIELDS = ("title", "content", "whole")

QD_FEATURE_NAMES: tuple[str, ...] = tuple(
    f"{fam}_{f}"
    for fam in ("tf", "idf", "tfidf", "bm25", "lmjm", "lmdir", "lmabs")
    for f in FIELDS
) + (
    "prox_pair_with_stop",
    "prox_pair_no_stop",
    "prox_firstpos_with_stop",
    "prox_firstpos_no_stop",
    "bigram_w5_with_stop",
    "bigram_w5_no_stop",
    "bigram_w10_with_stop",
    "bigram_w10_no_stop",
)

DOC_FEATURE_NAMES: tuple[str, ...] = (
    "len_title",
    "len_content",
    "len_whole",
    "len_url",
    "slash_count",
    "pagerank",
)

FEATURE_NAMES: tuple[str, ...] = QD_FEATURE_NAMES + DOC_FEATURE_NAMES


# ---------------------------------------------------------------------------
# Collection statistics
# ---------------------------------------------------------------------------


@dataclass
class FieldStats:
    """Aggregate statistics for one field across the collection."""

    df: dict[str, int] = field(default_factory=dict)
    cf: dict[str, int] = field(default_factory=dict)
    total_len: int = 0
    n_docs: int = 0

    @property
    def avg_len(self) -> float:
        return self.total_len / self.n_docs if self.n_docs else 0.0


@dataclass
class CollectionStats:
    fields: dict[str, FieldStats]
    n_docs: int

    @staticmethod
    def empty() -> "CollectionStats":
        return CollectionStats({f: FieldStats() for f in FIELDS}, 0)


def doc_field_tokens(doc: Document) -> dict[str, tuple[str, ...]]:
    title = tokenize(doc.title)
    content = tokenize(doc.content)
    return {"title": title, "content": content, "whole": title + content}


def compute_collection_stats(documents: Iterable[Document]) -> CollectionStats:
    stats = CollectionStats.empty()
    for doc in documents:
        stats.n_docs += 1
        for fname, toks in doc_field_tokens(doc).items():
            fs = stats.fields[fname]
            fs.n_docs += 1
            fs.total_len += len(toks)
            seen: set[str] = set()
            for t in toks:
                fs.cf[t] = fs.cf.get(t, 0) + 1
                if t not in seen:
                    seen.add(t)
                    fs.df[t] = fs.df.get(t, 0) + 1
    return stats


# ---------------------------------------------------------------------------
# Query-document features
# ---------------------------------------------------------------------------


def _idf(n_docs: int, df: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def _lm_scores(
    q_unique: Sequence[str],
    counts: Mapping[str, int],
    doc_len: int,
    unique_in_doc: int,
    fs: FieldStats,
    params: FeatureParams,
) -> tuple[float, float, float]:
    """Jelinek-Mercer, Dirichlet, and absolute-discounting log-likelihoods.

    Terms with zero collection frequency are skipped outright; a term whose
    smoothed probability still comes out non-positive (possible only when the
    smoothing parameter is zeroed) is skipped as well, so disabling smoothing
    degrades to scoring only the terms actually present.
    """
    jm = diri = absd = 0.0
    big_c = fs.total_len
    for t in q_unique:
        cf = fs.cf.get(t, 0)
        if cf == 0 or big_c == 0:
            continue
        p_c = cf / big_c
        tf = counts.get(t, 0)
        p_ml = tf / doc_len if doc_len > 0 else 0.0

        p = (1.0 - params.jm_lambda) * p_ml + params.jm_lambda * p_c
        if p > 0:
            jm += math.log(p)

        p = (tf + params.dirichlet_mu * p_c) / (doc_len + params.dirichlet_mu)
        if p > 0:
            diri += math.log(p)

        if doc_len > 0:
            p = max(tf - params.abs_delta, 0.0) / doc_len + (
                params.abs_delta * unique_in_doc / doc_len
            ) * p_c
        else:
            p = p_c
        if p > 0:
            absd += math.log(p)
    return jm, diri, absd


def _pair_proximity(tokens: Sequence[str], q_terms: Sequence[str]) -> tuple[float, float]:
    """(avg over matched-term pairs of 1/(1+min distance), mean first position).

    Positions are 1-based; both values are 0 when there is nothing to score
    (fewer than two matched terms for the pair part, none for the position
    part).
    """
    positions: dict[str, list[int]] = {}
    for i, t in enumerate(tokens):
        if t in q_terms:
            positions.setdefault(t, []).append(i + 1)
    matched = [t for t in q_terms if t in positions]
    first_pos = (
        sum(positions[t][0] for t in matched) / len(matched) if matched else 0.0
    )
    if len(matched) < 2:
        return 0.0, first_pos
    score = 0.0
    n_pairs = 0
    for i in range(len(matched)):
        for j in range(i + 1, len(matched)):
            best = min(
                abs(a - b)
                for a in positions[matched[i]]
                for b in positions[matched[j]]
            )
            score += 1.0 / (1.0 + best)
            n_pairs += 1
    return score / n_pairs, first_pos


def _bigram_window_counts(
    tokens: Sequence[str], q_tokens: Sequence[str], windows: tuple[int, int]
) -> tuple[int, int]:
    """How many distinct adjacent query-term pairs co-occur within each window."""
    positions: dict[str, list[int]] = {}
    qset = set(q_tokens)
    for i, t in enumerate(tokens):
        if t in qset:
            positions.setdefault(t, []).append(i)
    bigrams = {
        (a, b)
        for a, b in zip(q_tokens[:-1], q_tokens[1:])
        if a != b
    }
    counts = [0, 0]
    for a, b in sorted(bigrams):
        pa, pb = positions.get(a), positions.get(b)
        if not pa or not pb:
            continue
        best = min(abs(i - j) for i in pa for j in pb)
        for w, window in enumerate(windows):
            if best <= window:
                counts[w] += 1
    return counts[0], counts[1]


def extract_qd_features(
    query_text: str,
    doc: Document,
    stats: CollectionStats,
    params: FeatureParams = FeatureParams(),
) -> dict[str, float]:
    """All query-document features, keyed by ``QD_FEATURE_NAMES``."""
    q_tokens = tokenize(query_text)
    q_unique = list(dict.fromkeys(q_tokens))
    fields_toks = doc_field_tokens(doc)
    out: dict[str, float] = {}

    for fname in FIELDS:
        toks = fields_toks[fname]
        fs = stats.fields[fname]
        counts: dict[str, int] = {}
        for t in toks:
            counts[t] = counts.get(t, 0) + 1
        doc_len = len(toks)

        tf_sum = 0.0
        idf_sum = 0.0
        tfidf_sum = 0.0
        bm25_sum = 0.0
        for t in q_unique:
            tf = counts.get(t, 0)
            idf = _idf(stats.n_docs, fs.df.get(t, 0))
            tf_sum += tf
            idf_sum += idf
            tfidf_sum += tf * idf
            if tf > 0:
                norm = params.k1 * (
                    1.0 - params.b + params.b * doc_len / fs.avg_len
                    if fs.avg_len > 0
                    else 1.0 - params.b
                )
                bm25_sum += idf * tf * (params.k1 + 1.0) / (tf + norm)
        out[f"tf_{fname}"] = tf_sum
        out[f"idf_{fname}"] = idf_sum
        out[f"tfidf_{fname}"] = tfidf_sum
        out[f"bm25_{fname}"] = bm25_sum

        jm, diri, absd = _lm_scores(
            q_unique, counts, doc_len, len(counts), fs, params
        )
        out[f"lmjm_{fname}"] = jm
        out[f"lmdir_{fname}"] = diri
        out[f"lmabs_{fname}"] = absd

    whole = fields_toks["whole"]
    stop = params.stopwords
    whole_ns = tuple(t for t in whole if t not in stop)
    q_ns = [t for t in q_tokens if t not in stop]
    q_unique_ns = list(dict.fromkeys(q_ns))

    pair_w, first_w = _pair_proximity(whole, q_unique)
    pair_n, first_n = _pair_proximity(whole_ns, q_unique_ns)
    out["prox_pair_with_stop"] = pair_w
    out["prox_pair_no_stop"] = pair_n
    out["prox_firstpos_with_stop"] = first_w
    out["prox_firstpos_no_stop"] = first_n

    w5, w10 = _bigram_window_counts(whole, q_tokens, params.proximity_windows)
    n5, n10 = _bigram_window_counts(whole_ns, tuple(q_ns), params.proximity_windows)
    out["bigram_w5_with_stop"] = float(w5)
    out["bigram_w5_no_stop"] = float(n5)
    out["bigram_w10_with_stop"] = float(w10)
    out["bigram_w10_no_stop"] = float(n10)
    return out


# ---------------------------------------------------------------------------
# Document-level features
# ---------------------------------------------------------------------------


def url_domain(doc: Document) -> str:
    parsed = urlparse(doc.url)
    if not parsed.netloc:
        raise FeatureError(f"unparseable url for document {doc.doc_id}: {doc.url!r}")
    return parsed.netloc


def extract_doc_features(
    doc: Document, pagerank_scores: Mapping[str, float] | None = None
) -> dict[str, float]:
    """Document-only features; PageRank is looked up by URL domain (0 if absent)."""
    toks = doc_field_tokens(doc)
    domain = url_domain(doc)
    pr = float(pagerank_scores.get(domain, 0.0)) if pagerank_scores else 0.0
    return {
        "len_title": float(len(toks["title"])),
        "len_content": float(len(toks["content"])),
        "len_whole": float(len(toks["whole"])),
        "len_url": float(len(doc.url)),
        "slash_count": float(doc.url.count("/")),
        "pagerank": pr,
    }


def extract_features(
    query_text: str,
    doc: Document,
    stats: CollectionStats,
    params: FeatureParams = FeatureParams(),
    pagerank_scores: Mapping[str, float] | None = None,
) -> dict[str, float]:
    out = extract_qd_features(query_text, doc, stats, params)
    out.update(extract_doc_features(doc, pagerank_scores))
    return out


def feature_array(values: Mapping[str, float]) -> np.ndarray:
    """Project a feature dict onto the canonical schema order."""
    return np.asarray([values[name] for name in FEATURE_NAMES], dtype=np.float64)


# ---------------------------------------------------------------------------
# Link graph and PageRank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkGraph:
    """Directed domain graph with deduplicated edges, deterministic order."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        node_set = set(self.nodes)
        for s, t in self.edges:
            if s not in node_set or t not in node_set:
                raise FeatureError(f"edge ({s},{t}) references unknown node")


def build_link_graph(corpus: Corpus) -> LinkGraph:
    """Domains co-displayed in a session list are linked in both directions."""
    domains: set[str] = set()
    edges: set[tuple[str, str]] = set()
    lists = [s.ranked_list for s in corpus.sessions] or list(corpus.lists.values())
    for rl in lists:
        ds = []
        for doc_id in rl.doc_ids:
            d = url_domain(corpus.documents[doc_id])
            domains.add(d)
            ds.append(d)
        uniq = list(dict.fromkeys(ds))
        for i, a in enumerate(uniq):
            for b in uniq[i + 1 :]:
                if a != b:
                    edges.add((a, b))
                    edges.add((b, a))
    return LinkGraph(tuple(sorted(domains)), tuple(sorted(edges)))


def pagerank(
    graph: LinkGraph,
    damping: float = 0.85,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> dict[str, float]:
    """Power iteration with uniform teleport; dangling mass spread uniformly.

    Converges when the L1 change drops below ``tol``; failing to converge
    within ``max_iter`` raises rather than returning a half-baked vector.
    Scores sum to 1.
    """
    n = len(graph.nodes)
    if n == 0:
        raise FeatureError("pagerank on an empty graph")
    index = {node: i for i, node in enumerate(graph.nodes)}
    out_neighbors: list[list[int]] = [[] for _ in range(n)]
    for s, t in graph.edges:
        out_neighbors[index[s]].append(index[t])

    p = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        new = np.zeros(n)
        dangling = 0.0
        for i, nbrs in enumerate(out_neighbors):
            if nbrs:
                share = p[i] / len(nbrs)
                for j in nbrs:
                    new[j] += share
            else:
                dangling += p[i]
        new += dangling / n
        new = (1.0 - damping) / n + damping * new
        if np.abs(new - p).sum() < tol:
            return {node: float(new[i]) for node, i in index.items()}
        p = new
    raise PageRankConvergenceError(
        f"pagerank did not converge within {max_iter} iterations (tol={tol})"
    )


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def write_feature_file(
    path: str | Path, rows: Iterable[tuple[str, str, Mapping[str, float]]]
) -> None:
    """Tab-separated feature table: header row, then one row per (query, doc).

    Floats are written with ``repr`` so values round-trip exactly and the
    file is byte-stable across runs.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("query_id\tdoc_id\t" + "\t".join(FEATURE_NAMES) + "\n")
        for qid, did, values in rows:
            cells = [repr(float(values[name])) for name in FEATURE_NAMES]
            fh.write(f"{qid}\t{did}\t" + "\t".join(cells) + "\n")


def read_feature_file(path: str | Path) -> list[tuple[str, str, np.ndarray]]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["query_id", "doc_id"] or tuple(header[2:]) != FEATURE_NAMES:
            raise FeatureError(f"unexpected feature file header in {path}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(FEATURE_NAMES) + 2:
                raise FeatureError(f"{path.name}:{lineno}: wrong column count")
            out.append(
                (parts[0], parts[1], np.asarray([float(x) for x in parts[2:]]))
            )
    return out


def write_svmlight(
    path: str | Path,
    rows: Iterable[tuple[str, str, Mapping[str, float], int]],
) -> None:
    """SVMlight export: ``label qid:<n> <fid>:<val> ... # query_id doc_id``.

    Query ids are numbered by first appearance; feature ids are 1-based in
    schema order.
    """
    path = Path(path)
    qid_index: dict[str, int] = {}
    with path.open("w", encoding="utf-8") as fh:
        for qid, did, values, label in rows:
            n = qid_index.setdefault(qid, len(qid_index) + 1)
            feats = " ".join(
                f"{i + 1}:{repr(float(values[name]))}"
                for i, name in enumerate(FEATURE_NAMES)
            )
            fh.write(f"{label} qid:{n} {feats} # {qid} {did}\n")
