"""Relevance annotation: prompt rendering, response parsing, and a noisy oracle.

Four strategies are supported:

* ``PointAnn``  - grade one document at a time on the 0..4 scale.
* ``ListAnn``   - grade every document in the list on the 0..4 scale.
* ``ListRank``  - assign each document a rank (1 = most relevant); ranks
                  convert to training labels via ``label = 10 - rank``.
* ``ListSel``   - select the subset of relevant documents; labels are binary.

``oracle_annotate`` plays the role of an external annotator with a
configurable confusion matrix, so experiments control annotation noise
precisely. ``external_annotate`` runs the same strategies through a
file-based request/response exchange with quarantine for malformed
responses.

Response grammar (per strategy, after whitespace normalization):

    int_list  := JSON array of integers
               | integers separated by commas and/or whitespace
               | lines of "doc_<i>: <int>" (or "<i>: <int>") covering
                 each document exactly once

    PointAnn  := single integer in 0..4
    ListAnn   := int_list of exactly n integers, each in 0..4 (positional)
    ListRank  := int_list of exactly n integers forming a permutation of
                 1..n; entry i is the rank of document i
    ListSel   := int_list of 0..n distinct integers in 1..n (the selected
                 document numbers); "[]" or "none" selects nothing
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import (
    AnnotationRecord,
    Corpus,
    Document,
    RankedList,
    SOURCE_LIST,
    SOURCE_POINT,
    SOURCE_RANK,
    SOURCE_SEL,
)
from .seeds import substream

STRATEGIES = (SOURCE_POINT, SOURCE_LIST, SOURCE_RANK, SOURCE_SEL)

DEFAULT_GUIDELINES = (
    "Grade relevance on a 0-4 scale: 0 irrelevant, 1 marginal, 2 basic "
    "relevance, 3 highly relevant, 4 perfectly satisfies the query intent."
)


class PromptError(ValueError):
    pass


class ResponseParseError(ValueError):
    pass


class AnnotationCompletenessError(RuntimeError):
    """Responses are missing for some request ids; carries the id list."""

    def __init__(self, missing: Sequence[str]):
        self.missing = tuple(missing)
        super().__init__(
            f"{len(self.missing)} request(s) without responses: "
            + ", ".join(self.missing[:10])
            + ("..." if len(self.missing) > 10 else "")
        )


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------

_TASK_LINES = {
    SOURCE_POINT: "Grade the single document below. Answer with one integer 0-4.",
    SOURCE_LIST: (
        "Grade every document below. Answer with one integer 0-4 per document, "
        "in order, comma-separated."
    ),
    SOURCE_RANK: (
        "Rank the documents by relevance. Answer with one rank per document in "
        "order, comma-separated, where rank 1 is the most relevant; use each "
        "rank exactly once."
    ),
    SOURCE_SEL: (
        "Select the relevant documents. Answer with the document numbers of "
        "the relevant ones, comma-separated, or [] if none qualify."
    ),
}


def render_prompt(
    strategy: str,
    query_text: str,
    docs: Sequence[Document],
    guidelines: str = DEFAULT_GUIDELINES,
) -> str:
    """Deterministic prompt with numbered documents and verbatim guidelines."""
    if strategy not in STRATEGIES:
        raise PromptError(f"unknown strategy: {strategy}")
    if strategy == SOURCE_POINT and len(docs) != 1:
        raise PromptError("PointAnn prompts take exactly one document")
    if strategy != SOURCE_POINT and len(docs) < 2:
        raise PromptError(f"{strategy} prompts need at least two documents")
    blocks = []
    for i, d in enumerate(docs, start=1):
        if not d.title.strip() and not d.content.strip():
            raise PromptError(f"document {d.doc_id} has no text to annotate")
        blocks.append(f"Document {i}:\nTitle: {d.title}\nContent: {d.content}")
    return (
        f"{guidelines}\n\n{_TASK_LINES[strategy]}\n\n"
        f"Query: {query_text}\n\n" + "\n\n".join(blocks)
    )


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

_LINE_RE = re.compile(r"^\s*(?:doc[_\s]?)?(\d+)\s*[:=-]\s*(-?\d+)\s*$", re.IGNORECASE)
_INT_RE = re.compile(r"-?\d+")


def _extract_ints(text: str, n_docs: int) -> list[int]:
    """Pull an integer list out of any grammar-accepted response form."""
    stripped = text.strip()
    if not stripped or stripped.lower() == "none":
        return []
    # Labeled-lines form: every nonempty line "doc_i: v".
    lines = [ln for ln in stripped.splitlines() if ln.strip()]
    matches = [_LINE_RE.match(ln) for ln in lines]
    if len(lines) > 0 and all(m is not None for m in matches):
        pairs = [(int(m.group(1)), int(m.group(2))) for m in matches]
        indices = sorted(i for i, _ in pairs)
        if indices != list(range(1, len(pairs) + 1)):
            raise ResponseParseError(
                f"labeled lines must cover documents 1..{len(pairs)} exactly once"
            )
        if len(pairs) != n_docs:
            raise ResponseParseError(
                f"expected {n_docs} labeled lines, got {len(pairs)}"
            )
        by_index = dict(pairs)
        return [by_index[i] for i in range(1, n_docs + 1)]
    # JSON array form.
    if stripped.startswith("["):
        try:
            arr = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ResponseParseError(f"malformed JSON array: {exc.msg}") from exc
        if not isinstance(arr, list) or not all(isinstance(x, int) for x in arr):
            raise ResponseParseError("JSON answer must be an array of integers")
        return [int(x) for x in arr]
    # Separated-integers form; reject stray non-numeric tokens.
    leftovers = _INT_RE.sub("", stripped).replace(",", "").strip()
    if leftovers:
        raise ResponseParseError(f"unrecognized tokens in response: {leftovers!r}")
    return [int(x) for x in _INT_RE.findall(stripped)]


def parse_response(strategy: str, text: str, n_docs: int):
    """Parse an annotator response; see the module docstring for the grammar.

    Returns an int (PointAnn), a tuple of grades (ListAnn), a tuple of ranks
    aligned to document order (ListRank), or a frozenset of selected document
    numbers (ListSel). Violations raise ResponseParseError.
    """
    if strategy not in STRATEGIES:
        raise ResponseParseError(f"unknown strategy: {strategy}")
    if n_docs < 1:
        raise ResponseParseError("n_docs must be >= 1")
    values = _extract_ints(text, n_docs)
    if strategy == SOURCE_POINT:
        if len(values) != 1:
            raise ResponseParseError(f"expected 1 grade, got {len(values)}")
        if not 0 <= values[0] <= 4:
            raise ResponseParseError(f"grade {values[0]} outside 0..4")
        return values[0]
    if strategy == SOURCE_LIST:
        if len(values) != n_docs:
            raise ResponseParseError(f"expected {n_docs} grades, got {len(values)}")
        for v in values:
            if not 0 <= v <= 4:
                raise ResponseParseError(f"grade {v} outside 0..4")
        return tuple(values)
    if strategy == SOURCE_RANK:
        if len(values) != n_docs:
            raise ResponseParseError(f"expected {n_docs} ranks, got {len(values)}")
        if sorted(values) != list(range(1, n_docs + 1)):
            dupes = {v for v in values if values.count(v) > 1}
            if dupes:
                raise ResponseParseError(f"duplicate rank(s): {sorted(dupes)}")
            raise ResponseParseError(
                f"ranks must form a permutation of 1..{n_docs}, got {values}"
            )
        return tuple(values)
    # ListSel
    if len(set(values)) != len(values):
        raise ResponseParseError("selection contains duplicates")
    for v in values:
        if not 1 <= v <= n_docs:
            raise ResponseParseError(f"selected document {v} outside 1..{n_docs}")
    return frozenset(values)


# ---------------------------------------------------------------------------
# Label conversion
# ---------------------------------------------------------------------------


def ranks_to_labels(ranks: Sequence[int]) -> tuple[int, ...]:
    """Training labels from ranks: label = 10 - rank (rank 1 -> 9).

    Lists are capped at 10 documents, so labels stay nonnegative and
    strictly decrease as rank worsens.
    """
    n = len(ranks)
    if n > 10:
        raise ValueError(f"rank labels support at most 10 documents, got {n}")
    if sorted(ranks) != list(range(1, n + 1)):
        raise ValueError(f"ranks must form a permutation of 1..{n}")
    return tuple(10 - r for r in ranks)


def selection_to_labels(selection: frozenset[int] | set[int], n_docs: int) -> tuple[int, ...]:
    """Binary labels from a ListSel selection of 1-based document numbers."""
    for v in selection:
        if not 1 <= v <= n_docs:
            raise ValueError(f"selected document {v} outside 1..{n_docs}")
    return tuple(1 if (i + 1) in selection else 0 for i in range(n_docs))


# ---------------------------------------------------------------------------
# Noisy oracle
# ---------------------------------------------------------------------------


def identity_confusion() -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(1.0 if i == j else 0.0 for j in range(5)) for i in range(5))


def uniform_noise_confusion(error_rate: float) -> tuple[tuple[float, ...], ...]:
    """Diagonal 1-e; the error mass spread evenly over the other four grades."""
    if not 0.0 <= error_rate < 1.0:
        raise ValueError("error_rate must be in [0, 1)")
    return tuple(
        tuple(
            1.0 - error_rate if i == j else error_rate / 4.0 for j in range(5)
        )
        for i in range(5)
    )


@dataclass(frozen=True)
class OracleParams:
    """Noise model for the scripted annotator.

    ``confusion`` is a row-stochastic 5x5 matrix over true -> labeled grade.
    ``consistency_rho`` is the probability that a ListAnn list gets a
    monotone-repair pass (sampled labels reassigned so they respect the
    true-grade order; the label multiset is unchanged). ``rank_temperature``
    scales Gumbel noise in ListRank's noisy sort; at 0 the permutation is
    the exact stable argsort of the true grades. ``quality_blind`` keeps the
    hidden quality scalar out of the oracle's view (it grades the semantic
    component only).
    """

    confusion: tuple[tuple[float, ...], ...] = identity_confusion()
    consistency_rho: float = 0.7
    rank_temperature: float = 0.0
    selection_threshold: int = 2
    quality_blind: bool = True

    def __post_init__(self):
        if len(self.confusion) != 5 or any(len(r) != 5 for r in self.confusion):
            raise ValueError("confusion must be 5x5")
        for r, row in enumerate(self.confusion):
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise ValueError(f"confusion row {r} is not a distribution")
        if not 0.0 <= self.consistency_rho <= 1.0:
            raise ValueError("consistency_rho must be in [0, 1]")
        if self.rank_temperature < 0:
            raise ValueError("rank_temperature must be >= 0")


def _sample_grade(rng: np.random.Generator, confusion, true_grade: int) -> int:
    return int(rng.choice(5, p=np.asarray(confusion[true_grade])))


def oracle_annotate(
    strategy: str,
    ranked_list: RankedList,
    grades: Mapping[str, int],
    params: OracleParams,
    seed: int,
) -> list[AnnotationRecord]:
    """Annotate one list with the configured noise; returns one record per doc.

    ``grades`` is whatever the oracle is allowed to see (the semantic grade
    when quality-blind). Deterministic in (seed, strategy, query_id).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy: {strategy}")
    qid = ranked_list.query_id
    docs = ranked_list.doc_ids
    true = [int(grades[d]) for d in docs]
    rng = substream(seed, "oracle", strategy, qid)
    n = len(docs)

    if strategy == SOURCE_POINT:
        labels = [_sample_grade(rng, params.confusion, g) for g in true]
    elif strategy == SOURCE_LIST:
        labels = [_sample_grade(rng, params.confusion, g) for g in true]
        if rng.random() < params.consistency_rho:
            order = np.argsort(-np.asarray(true), kind="stable")
            ranked_labels = sorted(labels, reverse=True)
            repaired = [0] * n
            for slot, doc_idx in enumerate(order):
                repaired[int(doc_idx)] = ranked_labels[slot]
            labels = repaired
    elif strategy == SOURCE_RANK:
        utilities = np.asarray(true, dtype=float)
        if params.rank_temperature > 0:
            utilities = utilities + params.rank_temperature * rng.gumbel(size=n)
        order = np.argsort(-utilities, kind="stable")
        ranks = [0] * n
        for slot, doc_idx in enumerate(order):
            ranks[int(doc_idx)] = slot + 1
        labels = list(ranks_to_labels(ranks))
    else:  # ListSel
        noisy = [_sample_grade(rng, params.confusion, g) for g in true]
        selection = frozenset(
            i + 1 for i, g in enumerate(noisy) if g >= params.selection_threshold
        )
        labels = list(selection_to_labels(selection, n))

    return [
        AnnotationRecord(qid, d, label, strategy)
        for d, label in zip(docs, labels)
    ]


def annotate_corpus(
    corpus: Corpus,
    strategy: str,
    params: OracleParams,
    seed: int,
    query_ids: Sequence[str] | None = None,
    params_by_bin: Mapping[int, OracleParams] | None = None,
) -> list[AnnotationRecord]:
    """Oracle-annotate query lists using the corpus's hidden truth.

    Respects ``quality_blind`` by feeding the oracle the semantic grade
    rather than the full grade. ``params_by_bin`` overrides the noise model
    per frequency bin, which is how the per-bin annotation-quality profile
    of hybrid experiments is configured.
    """
    if corpus.truth is None:
        raise ValueError("corpus has no hidden truth to annotate against")
    ids = sorted(query_ids) if query_ids is not None else sorted(corpus.lists)
    records: list[AnnotationRecord] = []
    for qid in ids:
        rl = corpus.lists[qid]
        p = params
        if params_by_bin is not None:
            b = corpus.queries[qid].freq_bin
            if b is not None and b in params_by_bin:
                p = params_by_bin[b]
        grades = {}
        for d in rl.doc_ids:
            t = corpus.truth[(qid, d)]
            grades[d] = t.semantic if p.quality_blind else t.grade
        records.extend(oracle_annotate(strategy, rl, grades, p, seed))
    return records


# ---------------------------------------------------------------------------
# External request/response exchange
# ---------------------------------------------------------------------------


@dataclass
class ExternalAnnotationResult:
    records: list[AnnotationRecord]
    rejected_ids: tuple[str, ...]
    request_count: int


def write_annotation_requests(
    strategy: str,
    items: Sequence[tuple[str, str, Sequence[Document]]],
    path: str | Path,
    guidelines: str = DEFAULT_GUIDELINES,
) -> int:
    """Render and write requests.jsonl; returns the request count.

    ``items`` holds (query_id, query_text, documents-in-display-order)
    triples. PointAnn fans out to one request per document; the other
    strategies issue one request per query. Request ids are deterministic
    functions of (strategy, query, doc), so re-running is idempotent.
    """
    rows: list[dict] = []
    for qid, qtext, docs in items:
        if strategy == SOURCE_POINT:
            for d in docs:
                rows.append(
                    {
                        "id": f"{strategy.lower()}-{qid}-{d.doc_id}",
                        "strategy": strategy,
                        "query_id": qid,
                        "doc_ids": [d.doc_id],
                        "prompt": render_prompt(strategy, qtext, [d], guidelines),
                    }
                )
        else:
            rows.append(
                {
                    "id": f"{strategy.lower()}-{qid}",
                    "strategy": strategy,
                    "query_id": qid,
                    "doc_ids": [d.doc_id for d in docs],
                    "prompt": render_prompt(strategy, qtext, list(docs), guidelines),
                }
            )
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=True) + "\n")
    return len(rows)


def ingest_annotation_responses(
    requests_path: str | Path,
    responses_path: str | Path,
    rejects_path: str | Path,
) -> ExternalAnnotationResult:
    """Match responses to requests, parse labels, quarantine failures.

    Responses are keyed by request id; exact duplicates are ignored,
    conflicting duplicates quarantined. Every malformed response lands in
    rejects.jsonl with its error, and valid ones still go through. Missing
    responses raise AnnotationCompletenessError listing the ids.
    """
    requests: dict[str, dict] = {}
    with Path(requests_path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                requests[row["id"]] = row

    responses: dict[str, str] = {}
    rejects: list[dict] = []
    with Path(responses_path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rid, text = str(row["id"]), str(row["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                rejects.append(
                    {"id": f"<line {lineno}>", "text": line.rstrip("\n"), "error": f"bad response row: {exc}"}
                )
                continue
            if rid in responses:
                if responses[rid] != text:
                    rejects.append(
                        {"id": rid, "text": text, "error": "conflicting duplicate response"}
                    )
                continue
            responses[rid] = text

    records: list[AnnotationRecord] = []
    answered: set[str] = set()
    for rid, req in requests.items():
        if rid not in responses:
            continue
        answered.add(rid)
        text = responses[rid]
        strategy = req["strategy"]
        doc_ids = list(req["doc_ids"])
        try:
            parsed = parse_response(strategy, text, len(doc_ids))
            if strategy == SOURCE_POINT:
                labels = [int(parsed)]
            elif strategy == SOURCE_LIST:
                labels = list(parsed)
            elif strategy == SOURCE_RANK:
                labels = list(ranks_to_labels(parsed))
            else:
                labels = list(selection_to_labels(parsed, len(doc_ids)))
        except (ResponseParseError, ValueError) as exc:
            rejects.append({"id": rid, "text": text, "error": str(exc)})
            continue
        for d, lab in zip(doc_ids, labels):
            records.append(AnnotationRecord(req["query_id"], d, lab, strategy))

    with Path(rejects_path).open("w", encoding="utf-8") as fh:
        for row in rejects:
            fh.write(json.dumps(row, ensure_ascii=True) + "\n")

    missing = sorted(set(requests) - answered)
    if missing:
        raise AnnotationCompletenessError(missing)
    rejected_ids = tuple(r["id"] for r in rejects)
    return ExternalAnnotationResult(records, rejected_ids, len(requests))


def external_annotate(
    strategy: str,
    items: Sequence[tuple[str, str, Sequence[Document]]],
    requests_path: str | Path,
    responses_path: str | Path,
    rejects_path: str | Path,
    guidelines: str = DEFAULT_GUIDELINES,
) -> ExternalAnnotationResult:
    """Write requests, then ingest the responses file an annotator filled in.

    The responses file must already exist (the annotator runs between the
    two halves; tests script one). Missing responses raise; malformed ones
    are quarantined to ``rejects_path``.
    """
    write_annotation_requests(strategy, items, requests_path, guidelines)
    if not Path(responses_path).exists():
        raise FileNotFoundError(
            f"no responses file at {responses_path}; run the annotator over "
            f"{requests_path} first"
        )
    return ingest_annotation_responses(requests_path, responses_path, rejects_path)
