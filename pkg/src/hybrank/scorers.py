"""Scoring heads, propensity models, the frequency gate, and input providers.

Two scoring head shapes are supported:

* ``dense``   - externally supplied representation vectors through a
                [512, 256, 128] ELU tower to a scalar score.
* ``feature`` - hand-crafted feature vectors linearly mapped to 64
                dimensions, then through a [32, 16, 8] ELU tower.

Propensity models estimate how likely each display position is to be
examined. The plain positional table is the workhorse; the contextual
variant conditions on the session's click pattern around each position, and
the stratified variant conditions on a confounder stratum and exposes the
stratum-marginalized ("do") propensity. Both reduce exactly to the plain
table when their extra pathways are zeroed, which the loss reductions rely
on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ndiff
from .data import Corpus
from .features import (
    FEATURE_NAMES,
    CollectionStats,
    FeatureParams,
    compute_collection_stats,
    extract_features,
    feature_array,
)
from .ndiff import NetSpec, ParamStore, Var
from .seeds import substream

DENSE_HIDDEN = (512, 256, 128)
FEATURE_HIDDEN = (64, 32, 16, 8)


class ProviderError(KeyError):
    pass


# ---------------------------------------------------------------------------
# Scoring heads
# ---------------------------------------------------------------------------


class RankingScorer:
    """A feed-forward scoring head over fixed-size input vectors."""

    def __init__(
        self,
        input_dim: int,
        mode: str = "dense",
        hidden: tuple[int, ...] | None = None,
        dropout: float = 0.0,
        seed: int = 0,
        store: ParamStore | None = None,
        prefix: str = "scorer",
    ):
        if mode not in ("dense", "feature"):
            raise ValueError(f"unknown scorer mode: {mode}")
        if hidden is None:
            hidden = DENSE_HIDDEN if mode == "dense" else FEATURE_HIDDEN
        self.mode = mode
        self.prefix = prefix
        self.spec = NetSpec(input_dim, tuple(hidden), 1, "elu", dropout)
        self.store = store if store is not None else ParamStore()
        ndiff.init_mlp(self.store, self.spec, prefix, substream(seed, "init", prefix))

    def score_list(self, vectors: np.ndarray, mode: str = "eval", seed: int = 0) -> Var:
        """Score a list: (n, input_dim) -> Var of shape (n,)."""
        out = ndiff.mlp_forward(
            self.store, self.spec, self.prefix, vectors, mode=mode, seed=seed
        )
        return ndiff.reshape(out, (out.value.shape[0],))

    def score_values(self, vectors: np.ndarray) -> np.ndarray:
        return self.score_list(vectors).value


# ---------------------------------------------------------------------------
# Propensity models
# ---------------------------------------------------------------------------


class PositionalPropensity:
    """One learnable logit per display position; g = softmax over positions.

    Only propensity ratios matter to the reweighted losses, and softmax
    keeps every g strictly positive without constraining the logits.
    """

    def __init__(self, max_len: int = 10, store: ParamStore | None = None, prefix: str = "prop"):
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.max_len = max_len
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        self.store.add(f"{prefix}.logits", np.zeros(max_len))

    @property
    def logits(self) -> Var:
        return self.store[f"{self.prefix}.logits"]

    def _check_positions(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=int)
        if positions.min(initial=1) < 1 or positions.max(initial=1) > self.max_len:
            raise ValueError(
                f"positions outside 1..{self.max_len}: {positions.tolist()}"
            )
        return positions

    def logits_for(self, positions, click_context=None) -> Var:
        """Graph node of the logits at the given 1-based positions."""
        positions = self._check_positions(positions)
        return ndiff.gather(self.logits, positions - 1)

    def values(self) -> np.ndarray:
        """g(k) for every position as a probability vector (softmax)."""
        z = self.logits.value
        e = np.exp(z - z.max())
        return e / e.sum()

    def propensity(self, position: int) -> tuple[float, float]:
        """(g at position, ratio g(1)/g(position))."""
        if not 1 <= position <= self.max_len:
            raise ValueError(f"position {position} outside 1..{self.max_len}")
        g = self.values()
        return float(g[position - 1]), float(g[0] / g[position - 1])

    def ratios(self, positions, click_context=None) -> np.ndarray:
        """Detached g(1)/g(k) weights for inverse-propensity reweighting."""
        positions = self._check_positions(positions)
        z = self.logits.value
        return np.exp(z[0] - z[positions - 1])


class ContextualPropensity:
    """Positional logits plus a learned correction from the click context.

    For each document the correction net sees the position's embedding and
    the session's click indicators in a +/- ``window`` neighborhood (own
    click included). The correction pathway's output layer starts at zero,
    so an untrained model is exactly the positional table; zeroing those
    weights restores that identity at any time.
    """

    def __init__(
        self,
        max_len: int = 10,
        window: int = 2,
        pos_embed_dim: int = 4,
        hidden: tuple[int, ...] = (8,),
        store: ParamStore | None = None,
        prefix: str = "prop",
        seed: int = 0,
    ):
        self.max_len = max_len
        self.window = window
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        self.store.add(f"{prefix}.logits", np.zeros(max_len))
        rng = substream(seed, "init", prefix)
        self.store.add(
            f"{prefix}.pos_embed", 0.1 * rng.standard_normal((max_len, pos_embed_dim))
        )
        self.ctx_spec = NetSpec(
            pos_embed_dim + 2 * window + 1, tuple(hidden), 1, "elu", final_zero=True
        )
        ndiff.init_mlp(self.store, self.ctx_spec, f"{prefix}.ctx", rng)

    @property
    def logits(self) -> Var:
        return self.store[f"{self.prefix}.logits"]

    def context_features(self, positions, clicks, at=None) -> np.ndarray:
        """Click indicators at offsets -window..window, zero-padded at edges.

        ``positions``/``clicks`` lay out the session; ``at`` picks where the
        windows are read (defaults to the session's own positions).
        """
        positions = np.asarray(positions, dtype=int)
        clicks = np.asarray(clicks, dtype=float)
        at = positions if at is None else np.asarray(at, dtype=int)
        by_pos = np.zeros(self.max_len + 2 * self.window)
        for p, c in zip(positions, clicks):
            by_pos[p - 1 + self.window] = c
        feats = np.stack(
            [
                by_pos[p - 1 : p + 2 * self.window]
                for p in at
            ]
        )
        return feats

    def _forward(self, positions, click_context, at) -> Var:
        at = np.asarray(at, dtype=int)
        if at.min(initial=1) < 1 or at.max(initial=1) > self.max_len:
            raise ValueError(f"positions outside 1..{self.max_len}")
        base = ndiff.gather(self.logits, at - 1)
        emb = ndiff.gather(self.store[f"{self.prefix}.pos_embed"], at - 1)
        ctx = self.context_features(positions, click_context, at=at)
        x = ndiff.hconcat(emb, ndiff.lift(ctx))
        corr = ndiff.mlp_forward(self.store, self.ctx_spec, f"{self.prefix}.ctx", x)
        return base + ndiff.reshape(corr, (len(at),))

    def logits_for(self, positions, click_context) -> Var:
        positions = np.asarray(positions, dtype=int)
        return self._forward(positions, click_context, positions)

    def ratios(self, positions, click_context) -> np.ndarray:
        """Detached g(1)/g(k), with rank 1 read under the same context."""
        z = self.logits_for(positions, click_context).value
        z1 = self._forward(positions, click_context, np.asarray([1])).value[0]
        return np.exp(z1 - z)


class StratifiedPropensity:
    """Per-stratum positional propensity with a backdoor-adjusted marginal.

    ``logits`` is a (position, stratum) table; each stratum column defines a
    conditional examination distribution g(k | x) via softmax over
    positions. The deconfounded propensity marginalizes the strata under
    the empirical stratum distribution:

        g_do(k) = sum_x g(k | x) P(x)

    With a single stratum this collapses to the plain positional model.
    """

    def __init__(
        self,
        max_len: int = 10,
        n_strata: int = 3,
        store: ParamStore | None = None,
        prefix: str = "prop",
    ):
        if n_strata < 1:
            raise ValueError("n_strata must be >= 1")
        self.max_len = max_len
        self.n_strata = n_strata
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        self.store.add(f"{prefix}.logits", np.zeros((max_len, n_strata)))
        self.stratum_probs = np.full(n_strata, 1.0 / n_strata)

    @property
    def logits(self) -> Var:
        return self.store[f"{self.prefix}.logits"]

    def set_stratum_probs(self, probs) -> None:
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (self.n_strata,) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("stratum_probs must be a distribution over strata")
        self.stratum_probs = probs

    def position_stratum(self, position: int) -> int:
        """Quantile stratum of a display position (equal position buckets)."""
        if not 1 <= position <= self.max_len:
            raise ValueError(f"position {position} outside 1..{self.max_len}")
        return min(self.n_strata - 1, (position - 1) * self.n_strata // self.max_len)

    def conditional_logits(self, positions, strata) -> Var:
        positions = np.asarray(positions, dtype=int)
        strata = np.asarray(strata, dtype=int)
        return ndiff.gather2d(self.logits, positions - 1, strata)

    def do_propensity(self) -> np.ndarray:
        """g_do over all positions (detached)."""
        z = self.logits.value
        e = np.exp(z - z.max(axis=0, keepdims=True))
        cond = e / e.sum(axis=0, keepdims=True)  # g(k | x) per column
        return cond @ self.stratum_probs

    def ratios(self, positions, click_context=None) -> np.ndarray:
        g = self.do_propensity()
        positions = np.asarray(positions, dtype=int)
        return g[0] / g[positions - 1]


def empirical_strata(
    positions_seen: Sequence[int], model: StratifiedPropensity
) -> np.ndarray:
    """Empirical stratum distribution over observed display positions."""
    counts = np.zeros(model.n_strata)
    for p in positions_seen:
        counts[model.position_stratum(int(p))] += 1
    if counts.sum() == 0:
        raise ValueError("no positions to estimate stratum distribution from")
    return counts / counts.sum()


class AuxiliaryRelevanceHead:
    """Small net that tries to predict relevance from propensity logits.

    Used by the gradient-reversal objective: its input passes through a
    reversal node, so the better this head gets, the harder the propensity
    logits are pushed *away* from encoding relevance.
    """

    def __init__(
        self,
        hidden: tuple[int, ...] = (8,),
        store: ParamStore | None = None,
        prefix: str = "aux",
        seed: int = 0,
    ):
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        self.spec = NetSpec(1, tuple(hidden), 1, "elu")
        ndiff.init_mlp(self.store, self.spec, prefix, substream(seed, "init", prefix))

    def logits_from(self, z: Var, lam: float) -> Var:
        """Per-position auxiliary logits from (reversed) propensity logits."""
        n = z.value.shape[0]
        x = ndiff.reshape(ndiff.grad_reverse(z, lam), (n, 1))
        out = ndiff.mlp_forward(self.store, self.spec, self.prefix, x)
        return ndiff.reshape(out, (n,))


# ---------------------------------------------------------------------------
# Frequency gate
# ---------------------------------------------------------------------------


class FrequencyGate:
    """Per-frequency-bin supervision weights (w_click, w_annotation).

    A 16-dimensional embedding of the query's frequency bin runs through a
    [64, 2] net and a sigmoid. The output layer starts at zero, so every
    bin opens at exactly (0.5, 0.5).
    """

    def __init__(
        self,
        n_bins: int = 3,
        embed_dim: int = 16,
        hidden: tuple[int, ...] = (64,),
        store: ParamStore | None = None,
        prefix: str = "gate",
        seed: int = 0,
    ):
        self.n_bins = n_bins
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        rng = substream(seed, "init", prefix)
        self.store.add(
            f"{prefix}.embed", 0.1 * rng.standard_normal((n_bins, embed_dim))
        )
        self.spec = NetSpec(embed_dim, tuple(hidden), 2, "elu", final_zero=True)
        ndiff.init_mlp(self.store, self.spec, f"{prefix}.net", rng)

    def weights(self, bin_idx: int) -> tuple[Var, Var]:
        """(w_click, w_annotation) as scalar graph nodes for ``bin_idx``."""
        if not 0 <= bin_idx < self.n_bins:
            raise ValueError(f"bin {bin_idx} outside 0..{self.n_bins - 1}")
        emb = ndiff.gather(self.store[f"{self.prefix}.embed"], np.asarray([bin_idx]))
        out = ndiff.mlp_forward(self.store, self.spec, f"{self.prefix}.net", emb)
        w = ndiff.sigmoid(ndiff.reshape(out, (2,)))
        return ndiff.gather(w, np.asarray([0])), ndiff.gather(w, np.asarray([1]))

    def weight_values(self, bin_idx: int) -> tuple[float, float]:
        w1, w2 = self.weights(bin_idx)
        return float(w1.value[0]), float(w2.value[0])


# ---------------------------------------------------------------------------
# Input providers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticRepConfig:
    """Shape of synthetic representation vectors.

    The first ``sem_dims`` dimensions carry the pair's semantic grade (scaled
    to [0, 1]) with additive noise; the next ``qual_dims`` carry the
    document's quality scalar; the remainder is distractor noise. Pairs
    absent from the corpus truth (injected cross-query negatives) fall back
    to semantic grade 0 while keeping the document's true quality, which is
    precisely what an off-topic but high-quality document should look like.
    """

    dim: int = 16
    sem_dims: int = 4
    qual_dims: int = 2
    sem_noise: float = 0.5
    qual_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.sem_dims + self.qual_dims > self.dim:
            raise ValueError("sem_dims + qual_dims exceed total dim")


class SyntheticRepProvider:
    """Deterministic per-(query, doc) representation vectors for experiments."""

    def __init__(self, corpus: Corpus, config: SyntheticRepConfig):
        if corpus.truth is None:
            raise ValueError("synthetic representations need corpus truth")
        self.config = config
        self._semantic = {
            (t.query_id, t.doc_id): t.semantic for t in corpus.truth.values()
        }
        self._quality = corpus.doc_quality()
        self.dim = config.dim

    def vector(self, query_id: str, doc_id: str) -> np.ndarray:
        cfg = self.config
        rng = substream(cfg.seed, "rep", query_id, doc_id)
        sem = self._semantic.get((query_id, doc_id), 0) / 4.0
        qual = self._quality.get(doc_id, 0.0)
        v = np.empty(cfg.dim)
        v[: cfg.sem_dims] = sem + cfg.sem_noise * rng.standard_normal(cfg.sem_dims)
        v[cfg.sem_dims : cfg.sem_dims + cfg.qual_dims] = (
            qual + cfg.qual_noise * rng.standard_normal(cfg.qual_dims)
        )
        rest = cfg.dim - cfg.sem_dims - cfg.qual_dims
        if rest:
            v[cfg.sem_dims + cfg.qual_dims :] = rng.standard_normal(rest)
        return v

    def vectors(self, query_id: str, doc_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(query_id, d) for d in doc_ids])


def write_representations(
    path: str | Path, rows, dim: int
) -> None:
    """Representation vector file: a header record {"dim": D}, then one row
    {"query_id","doc_id","vec"} per pair."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": dim}) + "\n")
        for qid, did, vec in rows:
            fh.write(
                json.dumps(
                    {"query_id": qid, "doc_id": did, "vec": [float(x) for x in vec]},
                    ensure_ascii=True,
                )
                + "\n"
            )


class FileRepProvider:
    """Representation vectors loaded from the JSONL format above."""

    def __init__(self, path: str | Path):
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if "dim" not in header:
                raise ProviderError(f"{path}: missing dimension header record")
            self.dim = int(header["dim"])
            self._vecs: dict[tuple[str, str], np.ndarray] = {}
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                row = json.loads(line)
                vec = np.asarray(row["vec"], dtype=np.float64)
                if vec.shape != (self.dim,):
                    raise ProviderError(
                        f"{path.name}:{lineno}: vector of dim {vec.shape[0]}, "
                        f"expected {self.dim}"
                    )
                self._vecs[(str(row["query_id"]), str(row["doc_id"]))] = vec

    def vector(self, query_id: str, doc_id: str) -> np.ndarray:
        try:
            return self._vecs[(query_id, doc_id)]
        except KeyError:
            raise ProviderError(f"no representation for ({query_id}, {doc_id})")

    def vectors(self, query_id: str, doc_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(query_id, d) for d in doc_ids])


class FeatureVectorProvider:
    """Extracts (and caches) the classic feature vector for any pair.

    Optionally standardizes each column with moments fitted on a reference
    pair set; the fitted moments are exposed for checkpointing so that
    evaluation reproduces training-time inputs exactly.
    """

    def __init__(
        self,
        corpus: Corpus,
        params: FeatureParams = FeatureParams(),
        stats: CollectionStats | None = None,
        pagerank_scores: Mapping[str, float] | None = None,
    ):
        self.corpus = corpus
        self.params = params
        self.stats = stats if stats is not None else compute_collection_stats(
            corpus.documents.values()
        )
        self.pagerank_scores = pagerank_scores or {}
        self.dim = len(FEATURE_NAMES)
        self._cache: dict[tuple[str, str], np.ndarray] = {}
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None

    def _raw(self, query_id: str, doc_id: str) -> np.ndarray:
        key = (query_id, doc_id)
        if key not in self._cache:
            q = self.corpus.queries[query_id]
            d = self.corpus.documents[doc_id]
            values = extract_features(
                q.text, d, self.stats, self.params, self.pagerank_scores
            )
            self._cache[key] = feature_array(values)
        return self._cache[key]

    def fit_standardizer(self, pairs: Sequence[tuple[str, str]]) -> None:
        X = np.stack([self._raw(q, d) for q, d in pairs])
        self.mean = X.mean(axis=0)
        self.std = np.maximum(X.std(axis=0), 1e-9)

    def set_standardizer(self, mean, std) -> None:
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    def vector(self, query_id: str, doc_id: str) -> np.ndarray:
        v = self._raw(query_id, doc_id)
        if self.mean is not None:
            v = (v - self.mean) / self.std
        return v

    def vectors(self, query_id: str, doc_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(query_id, d) for d in doc_ids])
