"""Core data model: documents, queries, ranked lists, sessions, annotations.

Serialization is JSON Lines with a fixed field order per record type, so a
corpus round-trips byte-identically and can be fingerprinted. A synthetic
corpus generator with hidden graded relevance lives here too; click and
annotation synthesis build on it from their own modules.

On-disk layout (one directory per corpus):

    documents.jsonl    {"doc_id","title","content","url"}
    queries.jsonl      {"query_id","text","frequency"}
    lists.jsonl        {"query_id","docs":[doc ids in display order]}
    sessions.jsonl     {"query_id","docs":[...],"clicks":[0/1,...]}
    annotations.jsonl  {"query_id","doc_id","label","source"}
    truth.jsonl        {"query_id","doc_id","grade","semantic","quality"}

``truth.jsonl`` exists only for corpora with hidden ground truth (synthetic
ones); ``semantic`` is the quality-blind portion of the grade that the
annotation oracle is allowed to see.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeds import substream


class CorpusFormatError(ValueError):
    """A serialized record failed to parse; message carries file and line."""


class CorpusIntegrityError(ValueError):
    """Cross-references between records are inconsistent."""


class SyntheticConfigError(ValueError):
    pass


class BinningError(ValueError):
    pass


class InjectionError(ValueError):
    pass


class SplitError(ValueError):
    pass


# Frequency bins, ordered by query frequency.
BIN_LOW, BIN_MID, BIN_HIGH = 0, 1, 2
BIN_NAMES = ("Low", "Mid", "High")


def bin_name(b: int) -> str:
    return BIN_NAMES[b] if 0 <= b < len(BIN_NAMES) else str(b)


# ---------------------------------------------------------------------------
# Record types
# ---------------------------------------------------------------------------


@dataclass
class Document:
    doc_id: str
    title: str
    content: str
    url: str


@dataclass
class Query:
    query_id: str
    text: str
    frequency: int
    freq_bin: int | None = None

    def __post_init__(self):
        if self.frequency < 0:
            raise ValueError(f"negative frequency for {self.query_id}")


@dataclass
class RankedList:
    """An ordered display list; positions are implicitly 1..n.

    ``injected`` marks entries appended by true-negative injection; when
    None, every entry is an original.
    """

    query_id: str
    doc_ids: tuple[str, ...]
    injected: tuple[bool, ...] | None = None

    def __post_init__(self):
        self.doc_ids = tuple(self.doc_ids)
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError(f"duplicate doc_ids in list for {self.query_id}")
        if self.injected is not None:
            self.injected = tuple(bool(b) for b in self.injected)
            if len(self.injected) != len(self.doc_ids):
                raise ValueError("injected flags must align with doc_ids")

    def __len__(self):
        return len(self.doc_ids)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(1, len(self.doc_ids) + 1)

    def injected_mask(self) -> np.ndarray:
        if self.injected is None:
            return np.zeros(len(self.doc_ids), dtype=bool)
        return np.asarray(self.injected, dtype=bool)


@dataclass
class Session:
    """One impression of a ranked list with binary click feedback."""

    ranked_list: RankedList
    clicks: tuple[int, ...]

    def __post_init__(self):
        self.clicks = tuple(int(c) for c in self.clicks)
        if len(self.clicks) != len(self.ranked_list):
            raise ValueError(
                f"clicks length {len(self.clicks)} != list length "
                f"{len(self.ranked_list)} for {self.ranked_list.query_id}"
            )
        if any(c not in (0, 1) for c in self.clicks):
            raise ValueError("clicks must be 0/1")

    @property
    def query_id(self) -> str:
        return self.ranked_list.query_id


SOURCE_HUMAN = "Human"
SOURCE_ORACLE = "Oracle"
SOURCE_POINT = "PointAnn"
SOURCE_LIST = "ListAnn"
SOURCE_RANK = "ListRank"
SOURCE_SEL = "ListSel"

# Label ranges depend on the annotation source: graded sources use 0..4,
# selection is binary, and rank-derived labels span 0..9 (label = 10 - rank).
_LABEL_RANGE = {
    SOURCE_HUMAN: (0, 4),
    SOURCE_ORACLE: (0, 4),
    SOURCE_POINT: (0, 4),
    SOURCE_LIST: (0, 4),
    SOURCE_SEL: (0, 1),
    SOURCE_RANK: (0, 9),
}


@dataclass
class AnnotationRecord:
    query_id: str
    doc_id: str
    label: int
    source: str

    def __post_init__(self):
        self.label = int(self.label)
        if self.source not in _LABEL_RANGE:
            raise ValueError(f"unknown annotation source: {self.source}")
        lo, hi = _LABEL_RANGE[self.source]
        if not lo <= self.label <= hi:
            raise ValueError(
                f"label {self.label} out of range [{lo},{hi}] for source {self.source}"
            )


@dataclass
class TruthRecord:
    """Hidden ground truth for one (query, doc) pair.

    ``grade`` is the full relevance grade used for evaluation; ``semantic``
    is the component visible to the annotation oracle; ``quality`` is a
    per-document scalar visible only to the click channel.
    """

    query_id: str
    doc_id: str
    grade: int
    semantic: int
    quality: float


@dataclass
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    empty_validation_warning: bool = False

    def __post_init__(self):
        parts = [set(self.train), set(self.validation), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise SplitError("split partitions overlap")


# ---------------------------------------------------------------------------
# Corpus container
# ---------------------------------------------------------------------------


class Corpus:
    """In-memory corpus: documents, queries, display lists, sessions, annotations.

    ``truth`` is present only when hidden ground truth exists (synthetic data).
    """

    def __init__(
        self,
        documents: dict[str, Document] | None = None,
        queries: dict[str, Query] | None = None,
        lists: dict[str, RankedList] | None = None,
        sessions: list[Session] | None = None,
        annotations: list[AnnotationRecord] | None = None,
        truth: dict[tuple[str, str], TruthRecord] | None = None,
    ):
        self.documents = documents or {}
        self.queries = queries or {}
        self.lists = lists or {}
        self.sessions = sessions or []
        self.annotations = annotations or []
        self.truth = truth

    # -- lookups ------------------------------------------------------------

    def annotation_map(self, sources: Sequence[str] | None = None) -> dict[str, dict[str, int]]:
        """query_id -> doc_id -> label, optionally filtered by source."""
        out: dict[str, dict[str, int]] = {}
        allowed = set(sources) if sources is not None else None
        for rec in self.annotations:
            if allowed is not None and rec.source not in allowed:
                continue
            out.setdefault(rec.query_id, {})[rec.doc_id] = rec.label
        return out

    def sessions_by_query(self) -> dict[str, list[Session]]:
        out: dict[str, list[Session]] = {}
        for s in self.sessions:
            out.setdefault(s.query_id, []).append(s)
        return out

    def doc_quality(self) -> dict[str, float]:
        """Per-document quality scalar, harvested from truth records."""
        if self.truth is None:
            return {}
        return {doc_id: t.quality for (_, doc_id), t in self.truth.items()}

    def displayed_doc_pool(self, exclude_query: str | None = None) -> list[str]:
        """Doc ids displayed for queries other than ``exclude_query``, sorted."""
        pool: set[str] = set()
        for qid, rl in self.lists.items():
            if qid == exclude_query:
                continue
            mask = rl.injected_mask()
            pool.update(d for d, inj in zip(rl.doc_ids, mask) if not inj)
        return sorted(pool)

    def validate(self) -> None:
        """Check cross-references; raises CorpusIntegrityError on danglers."""
        bad: list[str] = []
        for qid, rl in self.lists.items():
            if qid not in self.queries:
                bad.append(f"list for unknown query {qid}")
            for d in rl.doc_ids:
                if d not in self.documents:
                    bad.append(f"list {qid} references unknown doc {d}")
        for s in self.sessions:
            if s.query_id not in self.queries:
                bad.append(f"session for unknown query {s.query_id}")
            for d in s.ranked_list.doc_ids:
                if d not in self.documents:
                    bad.append(f"session {s.query_id} references unknown doc {d}")
        for rec in self.annotations:
            if rec.query_id not in self.queries:
                bad.append(f"annotation for unknown query {rec.query_id}")
            if rec.doc_id not in self.documents:
                bad.append(f"annotation references unknown doc {rec.doc_id}")
        if bad:
            preview = "; ".join(bad[:5])
            raise CorpusIntegrityError(
                f"{len(bad)} dangling reference(s), e.g.: {preview}"
            )

    # -- serialization ------------------------------------------------------

    def _payloads(self) -> dict[str, str]:
        def dump(obj) -> str:
            return json.dumps(obj, ensure_ascii=True, separators=(",", ":"))

        docs = "".join(
            dump(
                {
                    "doc_id": d.doc_id,
                    "title": d.title,
                    "content": d.content,
                    "url": d.url,
                }
            )
            + "\n"
            for d in (self.documents[k] for k in sorted(self.documents))
        )
        queries = "".join(
            dump(
                {
                    "query_id": q.query_id,
                    "text": q.text,
                    "frequency": q.frequency,
                }
            )
            + "\n"
            for q in (self.queries[k] for k in sorted(self.queries))
        )
        lists = "".join(
            dump({"query_id": qid, "docs": list(self.lists[qid].doc_ids)}) + "\n"
            for qid in sorted(self.lists)
        )
        sessions = "".join(
            dump(
                {
                    "query_id": s.query_id,
                    "docs": list(s.ranked_list.doc_ids),
                    "clicks": list(s.clicks),
                }
            )
            + "\n"
            for s in self.sessions
        )
        annotations = "".join(
            dump(
                {
                    "query_id": r.query_id,
                    "doc_id": r.doc_id,
                    "label": r.label,
                    "source": r.source,
                }
            )
            + "\n"
            for r in self.annotations
        )
        payloads = {
            "documents.jsonl": docs,
            "queries.jsonl": queries,
            "lists.jsonl": lists,
            "sessions.jsonl": sessions,
            "annotations.jsonl": annotations,
        }
        if self.truth is not None:
            payloads["truth.jsonl"] = "".join(
                dump(
                    {
                        "query_id": t.query_id,
                        "doc_id": t.doc_id,
                        "grade": t.grade,
                        "semantic": t.semantic,
                        "quality": t.quality,
                    }
                )
                + "\n"
                for t in (self.truth[k] for k in sorted(self.truth))
            )
        return payloads

    def fingerprint(self) -> str:
        """sha256 over the canonical serialization of every component."""
        h = hashlib.sha256()
        for name, payload in sorted(self._payloads().items()):
            h.update(name.encode())
            h.update(b"\x00")
            h.update(payload.encode())
        return h.hexdigest()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, payload in self._payloads().items():
            (directory / name).write_text(payload, encoding="utf-8")


def _parse_jsonl(path: Path, required: Sequence[str]):
    """Yield (line_number, record) pairs; malformed lines raise with location."""
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(
                    f"{path.name}:{lineno}: invalid JSON ({exc.msg})"
                ) from exc
            if not isinstance(rec, dict):
                raise CorpusFormatError(f"{path.name}:{lineno}: record is not an object")
            missing = [k for k in required if k not in rec]
            if missing:
                raise CorpusFormatError(
                    f"{path.name}:{lineno}: missing field(s) {', '.join(missing)}"
                )
            yield lineno, rec


def load_corpus(directory: str | Path, validate: bool = True) -> Corpus:
    """Load a corpus directory written by ``Corpus.save`` (or hand-authored).

    ``lists.jsonl`` and ``truth.jsonl`` are optional; when lists are absent,
    each query's display list is derived from its first session.
    """
    directory = Path(directory)
    corpus = Corpus()
    p = directory / "documents.jsonl"
    if p.exists():
        for lineno, rec in _parse_jsonl(p, ("doc_id", "title", "content", "url")):
            d = Document(str(rec["doc_id"]), str(rec["title"]), str(rec["content"]), str(rec["url"]))
            if d.doc_id in corpus.documents:
                raise CorpusFormatError(f"documents.jsonl:{lineno}: duplicate doc_id {d.doc_id}")
            corpus.documents[d.doc_id] = d
    p = directory / "queries.jsonl"
    if p.exists():
        for lineno, rec in _parse_jsonl(p, ("query_id", "text", "frequency")):
            try:
                q = Query(str(rec["query_id"]), str(rec["text"]), int(rec["frequency"]))
            except (ValueError, TypeError) as exc:
                raise CorpusFormatError(f"queries.jsonl:{lineno}: {exc}") from exc
            if q.query_id in corpus.queries:
                raise CorpusFormatError(f"queries.jsonl:{lineno}: duplicate query_id {q.query_id}")
            corpus.queries[q.query_id] = q
    p = directory / "lists.jsonl"
    if p.exists():
        for lineno, rec in _parse_jsonl(p, ("query_id", "docs")):
            try:
                rl = RankedList(str(rec["query_id"]), tuple(str(d) for d in rec["docs"]))
            except ValueError as exc:
                raise CorpusFormatError(f"lists.jsonl:{lineno}: {exc}") from exc
            corpus.lists[rl.query_id] = rl
    p = directory / "sessions.jsonl"
    if p.exists():
        for lineno, rec in _parse_jsonl(p, ("query_id", "docs", "clicks")):
            try:
                rl = RankedList(str(rec["query_id"]), tuple(str(d) for d in rec["docs"]))
                s = Session(rl, tuple(int(c) for c in rec["clicks"]))
            except (ValueError, TypeError) as exc:
                raise CorpusFormatError(f"sessions.jsonl:{lineno}: {exc}") from exc
            corpus.sessions.append(s)
            if s.query_id not in corpus.lists:
                corpus.lists[s.query_id] = s.ranked_list
    p = directory / "annotations.jsonl"
    if p.exists():
        for lineno, rec in _parse_jsonl(p, ("query_id", "doc_id", "label", "source")):
            try:
                r = AnnotationRecord(
                    str(rec["query_id"]), str(rec["doc_id"]), int(rec["label"]), str(rec["source"])
                )
            except (ValueError, TypeError) as exc:
                raise CorpusFormatError(f"annotations.jsonl:{lineno}: {exc}") from exc
            corpus.annotations.append(r)
    p = directory / "truth.jsonl"
    if p.exists():
        corpus.truth = {}
        for lineno, rec in _parse_jsonl(
            p, ("query_id", "doc_id", "grade", "semantic", "quality")
        ):
            t = TruthRecord(
                str(rec["query_id"]),
                str(rec["doc_id"]),
                int(rec["grade"]),
                int(rec["semantic"]),
                float(rec["quality"]),
            )
            corpus.truth[(t.query_id, t.doc_id)] = t
    if validate:
        corpus.validate()
    return corpus


# ---------------------------------------------------------------------------
# Frequency binning
# ---------------------------------------------------------------------------


def assign_frequency_bins(queries: Iterable[Query], n_bins: int = 3) -> dict[str, int]:
    """Equal-frequency binning: sort by (frequency, query_id), cut into n_bins.

    Bin 0 holds the lowest frequencies. Bin sizes differ by at most one; any
    remainder goes to the lower bins first. Sets ``freq_bin`` on the query
    objects and returns the mapping.
    """
    qs = sorted(queries, key=lambda q: (q.frequency, q.query_id))
    n = len(qs)
    if n_bins < 1:
        raise BinningError("n_bins must be >= 1")
    if n < n_bins:
        raise BinningError(f"{n} queries cannot fill {n_bins} bins")
    base, rem = divmod(n, n_bins)
    sizes = [base + 1 if i < rem else base for i in range(n_bins)]
    out: dict[str, int] = {}
    idx = 0
    for b, size in enumerate(sizes):
        for q in qs[idx : idx + size]:
            q.freq_bin = b
            out[q.query_id] = b
        idx += size
    return out


# ---------------------------------------------------------------------------
# True-negative injection
# ---------------------------------------------------------------------------


def inject_true_negatives(
    target: RankedList, pool: Sequence[str], count: int, seed: int
) -> RankedList:
    """Append ``count`` docs sampled from ``pool`` (minus the target's own docs).

    Injected entries extend the position range contiguously and are marked in
    the returned list's ``injected`` flags; callers treat them as grade 0.
    Sampling is deterministic per (seed, query_id).
    """
    if count < 0:
        raise InjectionError("count must be nonnegative")
    own = set(target.doc_ids)
    candidates = sorted(set(pool) - own)
    if len(candidates) < count:
        raise InjectionError(
            f"pool exhausted for {target.query_id}: need {count}, "
            f"have {len(candidates)} (short by {count - len(candidates)})"
        )
    rng = substream(seed, "inject", target.query_id)
    picked = [candidates[int(i)] for i in rng.choice(len(candidates), size=count, replace=False)]
    base_injected = list(target.injected_mask())
    return RankedList(
        target.query_id,
        target.doc_ids + tuple(picked),
        injected=tuple(base_injected) + (True,) * count,
    )


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_dataset(
    annotated_query_ids: Sequence[str],
    ratio: tuple[int, int] = (3, 7),
    seed: int = 0,
    train_ids: Sequence[str] = (),
) -> DatasetSplit:
    """Partition annotated queries into validation:test at ``ratio``.

    The default 3:7 mirrors the evaluation protocol. An empty validation
    share is permitted but flagged, since early stopping then has nothing to
    watch.
    """
    ids = list(dict.fromkeys(annotated_query_ids))
    if len(ids) < 2:
        raise SplitError(f"need at least 2 annotated queries, got {len(ids)}")
    v, t = ratio
    if v < 0 or t <= 0:
        raise SplitError(f"invalid ratio {ratio}")
    rng = substream(seed, "split")
    order = rng.permutation(len(ids))
    shuffled = [ids[int(i)] for i in order]
    n_val = (len(ids) * v) // (v + t)
    val = tuple(shuffled[:n_val])
    test = tuple(shuffled[n_val:])
    return DatasetSplit(
        train=tuple(train_ids),
        validation=val,
        test=test,
        empty_validation_warning=(n_val == 0),
    )


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic corpus generator.

    Relevance of a (query, doc) pair has two hidden parts: an integer
    semantic grade drawn from ``grade_prior``, and a per-document quality
    scalar. The full grade shown to evaluation is
    ``clip(round(semantic + quality_weight * quality), 0, 4)``; the
    annotation oracle is only ever shown the semantic part. Display order
    comes from a noisy logging policy over the full grade, so position
    correlates with relevance.
    """

    n_queries: int = 100
    docs_per_query: int = 10
    n_topics: int = 25
    terms_per_topic: int = 40
    n_common_terms: int = 30
    n_domains: int = 40
    grade_prior: tuple[float, ...] = (0.40, 0.25, 0.16, 0.12, 0.07)
    quality_weight: float = 0.0
    logging_noise: float = 0.5
    freq_pareto_shape: float = 1.2
    freq_scale: float = 3.0
    query_len: tuple[int, int] = (2, 4)
    title_len: tuple[int, int] = (4, 8)
    content_len: tuple[int, int] = (25, 60)
    seed: int = 0


def generate_synthetic(config: SyntheticConfig) -> Corpus:
    """Build a corpus with hidden graded truth. Deterministic in config.seed.

    Documents are query-specific (each appears in exactly one display list),
    with query-term overlap in titles/contents increasing with the semantic
    grade so that lexical features carry signal. No sessions or annotations
    are generated here; those are separate, seeded steps.
    """
    cfg = config
    if cfg.n_queries <= 0 or cfg.docs_per_query <= 0:
        raise SyntheticConfigError("n_queries and docs_per_query must be positive")
    if abs(sum(cfg.grade_prior) - 1.0) > 1e-9 or any(p < 0 for p in cfg.grade_prior):
        raise SyntheticConfigError("grade_prior must be a distribution over grades 0..4")
    if len(cfg.grade_prior) != 5:
        raise SyntheticConfigError("grade_prior must have 5 entries")

    rng = substream(cfg.seed, "synth")
    topics = [
        [f"t{t:02d}w{i:03d}" for i in range(cfg.terms_per_topic)]
        for t in range(cfg.n_topics)
    ]
    common = [f"common{i:03d}" for i in range(cfg.n_common_terms)]
    prior = np.asarray(cfg.grade_prior) / sum(cfg.grade_prior)

    corpus = Corpus(truth={})
    for qi in range(cfg.n_queries):
        qid = f"q{qi:05d}"
        topic = int(rng.integers(0, cfg.n_topics))
        qlen = int(rng.integers(cfg.query_len[0], cfg.query_len[1] + 1))
        qterms = [topics[topic][int(i)] for i in rng.choice(cfg.terms_per_topic, size=qlen, replace=False)]
        freq = int(1 + math.floor(cfg.freq_scale * rng.pareto(cfg.freq_pareto_shape)))
        corpus.queries[qid] = Query(qid, " ".join(qterms), freq)

        doc_ids: list[str] = []
        grades: list[int] = []
        for dj in range(cfg.docs_per_query):
            doc_id = f"{qid}d{dj:02d}"
            semantic = int(rng.choice(5, p=prior))
            quality = float(rng.normal())
            grade = int(np.clip(round(semantic + cfg.quality_weight * quality), 0, 4))

            def _field(length: int, overlap_frac: float) -> str:
                n_q = min(length, int(round(length * overlap_frac)))
                toks = [qterms[int(i)] for i in rng.integers(0, len(qterms), size=n_q)]
                for _ in range(length - n_q):
                    if rng.random() < 0.2:
                        toks.append(common[int(rng.integers(0, len(common)))])
                    else:
                        toks.append(topics[topic][int(rng.integers(0, cfg.terms_per_topic))])
                perm = rng.permutation(len(toks))
                return " ".join(toks[int(i)] for i in perm)

            t_len = int(rng.integers(cfg.title_len[0], cfg.title_len[1] + 1))
            c_len = int(rng.integers(cfg.content_len[0], cfg.content_len[1] + 1))
            title = _field(t_len, 0.35 * semantic / 4.0)
            content = _field(c_len, 0.04 + 0.10 * semantic / 4.0)
            domain = f"d{int(rng.integers(0, cfg.n_domains)):03d}.example"
            url = f"http://{domain}/doc/{doc_id}"
            corpus.documents[doc_id] = Document(doc_id, title, content, url)
            corpus.truth[(qid, doc_id)] = TruthRecord(qid, doc_id, grade, semantic, quality)
            doc_ids.append(doc_id)
            grades.append(grade)

        logging_scores = np.asarray(grades, dtype=float) + cfg.logging_noise * rng.normal(
            size=len(grades)
        )
        order = np.argsort(-logging_scores, kind="stable")
        corpus.lists[qid] = RankedList(qid, tuple(doc_ids[int(i)] for i in order))

    return corpus
