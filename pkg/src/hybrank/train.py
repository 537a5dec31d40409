"""Training loops for click-, annotation-, and hybrid-supervised rankers.

One ``Trainer`` covers three modes, selected by ``TrainConfig.method``:

* a single objective (any click objective or annotation objective),
* ``schedule``: warm start on annotation batches, then alternating blocks
  of click batches and annotation batches per epoch,
* ``famol``: per-query gated mixture of a click loss and an annotation
  loss, with the gate conditioned on the query's frequency bin.

Every random decision (shuffles, dropout masks, negative sampling) is
drawn from a named substream keyed by the run seed and the loop indices,
never from shared mutable RNG state. Together with the serialized
optimizer slots this makes checkpoint resume bit-for-bit identical to an
uninterrupted run, and two runs with the same config and seed produce
identical manifests and parameters.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import losses, ndiff
from .clicksim import PBMParams, examination_prob
from .data import BIN_NAMES, Corpus
from .evaluation import evaluate_ranker
from .ndiff import AdamWConfig, CheckpointError, ParamStore, Var
from .scorers import (
    AuxiliaryRelevanceHead,
    ContextualPropensity,
    FrequencyGate,
    PositionalPropensity,
    RankingScorer,
    StratifiedPropensity,
    empirical_strata,
)
from .seeds import subseed, substream

CLICK_METHODS = ("naive", "ipw", "dla", "iobm", "upe", "drop", "gradrev")
ANNOTATION_METHODS = ("listwise", "ranknet")
HYBRID_METHODS = ("schedule", "famol")


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on (hashable into the manifest).

    ``method`` picks the objective; for the hybrid methods the click and
    annotation sides are picked by ``click_method``/``annotation_method``.
    ``prop_lr`` covers the propensity model and its auxiliary head;
    ``gate_lr`` covers the frequency gate; both default to ``lr``.
    """

    method: str = "naive"
    representation: str = "dense"
    hidden: tuple[int, ...] | None = None
    lr: float = 3e-5
    prop_lr: float | None = None
    gate_lr: float | None = None
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: int = 8
    patience: int = 3
    scorer_dropout: float = 0.0
    prop_dropout: float = 0.5
    grad_rev_weight: float = 1.0
    ipw_eta: float = 1.0
    n_strata: int = 3
    context_window: int = 2
    max_positions: int = 10
    annotation_sources: tuple[str, ...] = ("ListAnn", "Human")
    train_negatives: int = 0
    eval_k: int = 10
    # hybrid-only knobs
    click_method: str = "dla"
    annotation_method: str = "listwise"
    warm_epochs: int = 2
    fine_grained: bool = False
    seed: int = 0

    def __post_init__(self):
        known = CLICK_METHODS + ANNOTATION_METHODS + HYBRID_METHODS
        if self.method not in known:
            raise TrainError(f"unknown method {self.method!r}; expected one of {known}")
        if self.method in HYBRID_METHODS:
            if self.click_method not in CLICK_METHODS:
                raise TrainError(f"unknown click method {self.click_method!r}")
            if self.annotation_method not in ANNOTATION_METHODS:
                raise TrainError(
                    f"unknown annotation method {self.annotation_method!r}"
                )
        if self.representation not in ("dense", "feature"):
            raise TrainError(f"unknown representation {self.representation!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise TrainError("lr, batch_size and max_epochs must be positive")
        if self.patience < 1:
            raise TrainError("patience must be >= 1")
        if not 0.0 <= self.prop_dropout < 1.0:
            raise TrainError("prop_dropout must be in [0, 1)")
        if self.warm_epochs < 0:
            raise TrainError("warm_epochs must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden) if self.hidden is not None else None
        d["annotation_sources"] = list(self.annotation_sources)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("hidden") is not None:
            d["hidden"] = tuple(d["hidden"])
        if "annotation_sources" in d:
            d["annotation_sources"] = tuple(d["annotation_sources"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Training examples
# ---------------------------------------------------------------------------


@dataclass
class ClickExample:
    query_id: str
    doc_ids: tuple[str, ...]
    clicks: np.ndarray
    positions: np.ndarray
    displayed: np.ndarray  # False for injected never-shown entries


@dataclass
class AnnotationExample:
    query_id: str
    doc_ids: tuple[str, ...]
    labels: np.ndarray


@dataclass
class HybridExample:
    query_id: str
    bin_idx: int
    clicks: tuple[ClickExample, ...]  # all of the query's sessions, may be empty
    annotation: AnnotationExample | None


def build_click_examples(
    corpus: Corpus, query_ids, max_positions: int
) -> list[ClickExample]:
    wanted = set(query_ids)
    out: list[ClickExample] = []
    for session in corpus.sessions:
        if session.query_id not in wanted:
            continue
        rl = session.ranked_list
        n = len(rl.doc_ids)
        if n > max_positions:
            raise TrainError(
                f"query {rl.query_id} list has {n} positions; "
                f"raise max_positions (currently {max_positions})"
            )
        out.append(
            ClickExample(
                query_id=rl.query_id,
                doc_ids=rl.doc_ids,
                clicks=np.asarray(session.clicks, dtype=np.float64),
                positions=np.arange(1, n + 1),
                displayed=np.ones(n, dtype=bool),
            )
        )
    out.sort(key=lambda e: e.query_id)
    return out


def build_annotation_examples(
    corpus: Corpus, query_ids, sources
) -> list[AnnotationExample]:
    amap = corpus.annotation_map(tuple(sources))
    out: list[AnnotationExample] = []
    for qid in sorted(set(query_ids)):
        rl = corpus.lists.get(qid)
        labels_by_doc = amap.get(qid)
        if rl is None or not labels_by_doc:
            continue
        docs = [d for d in rl.doc_ids if d in labels_by_doc]
        if len(docs) < 2:
            continue
        labels = np.asarray([labels_by_doc[d] for d in docs], dtype=np.float64)
        out.append(AnnotationExample(qid, tuple(docs), labels))
    return out


def build_hybrid_examples(
    corpus: Corpus, query_ids, sources, max_positions: int
) -> list[HybridExample]:
    """One example per query: all its sessions on the click side (the loss
    averages over them, so heavily-logged queries don't outweigh sparse
    ones) plus its annotation side when present. Clickless annotated
    queries become annotation-only examples."""
    bins = {qid: q.freq_bin for qid, q in corpus.queries.items()}
    missing = sorted(q for q in query_ids if bins.get(q) is None)
    if missing:
        raise TrainError(
            f"hybrid training needs frequency bins; missing for {missing[:5]}"
        )
    by_query: dict[str, list[ClickExample]] = {}
    for ce in build_click_examples(corpus, query_ids, max_positions):
        by_query.setdefault(ce.query_id, []).append(ce)
    anns = {e.query_id: e for e in build_annotation_examples(corpus, query_ids, sources)}
    out: list[HybridExample] = []
    for qid in sorted(by_query):
        out.append(
            HybridExample(qid, bins[qid], tuple(by_query[qid]), anns.get(qid))
        )
    for qid in sorted(set(query_ids) - set(by_query)):
        if qid in anns:
            out.append(HybridExample(qid, bins[qid], (), anns[qid]))
    return out


def _inject_batch_negatives(
    batch: list[ClickExample], count: int, rng: np.random.Generator
) -> list[ClickExample]:
    """Extend each example with never-displayed documents sampled from the
    other examples in the same batch (zero clicks, excluded from the
    propensity term)."""
    pool_by_ex: list[list[str]] = []
    for i, ex in enumerate(batch):
        own = set(ex.doc_ids)
        pool = sorted(
            {d for j, other in enumerate(batch) if j != i for d in other.doc_ids} - own
        )
        pool_by_ex.append(pool)
    out = []
    for ex, pool in zip(batch, pool_by_ex):
        take = min(count, len(pool))
        if take == 0:
            out.append(ex)
            continue
        picked = [pool[k] for k in rng.choice(len(pool), size=take, replace=False)]
        n = len(ex.doc_ids)
        out.append(
            ClickExample(
                query_id=ex.query_id,
                doc_ids=ex.doc_ids + tuple(picked),
                clicks=np.concatenate([ex.clicks, np.zeros(take)]),
                positions=np.concatenate([ex.positions, np.zeros(take, dtype=int)]),
                displayed=np.concatenate([ex.displayed, np.zeros(take, dtype=bool)]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


class Trainer:
    """Builds the model stack for the configured method and runs the loop."""

    def __init__(
        self,
        corpus: Corpus,
        provider,
        config: TrainConfig,
        train_queries,
        val_queries=(),
    ):
        self.corpus = corpus
        self.provider = provider
        self.config = config
        self.train_queries = sorted(set(train_queries))
        self.val_queries = sorted(set(val_queries))
        if not self.train_queries:
            raise TrainError("no training queries")

        cfg = config
        self.store = ParamStore()
        self.scorer = RankingScorer(
            provider.dim,
            mode=cfg.representation,
            hidden=cfg.hidden,
            dropout=cfg.scorer_dropout,
            seed=subseed(cfg.seed, "scorer"),
            store=self.store,
        )
        self.prop: PositionalPropensity | ContextualPropensity | StratifiedPropensity | None = None
        self.aux: AuxiliaryRelevanceHead | None = None
        self.gate: FrequencyGate | None = None

        click_method = self._click_method()
        if click_method in ("dla", "drop", "gradrev"):
            self.prop = PositionalPropensity(cfg.max_positions, store=self.store)
        elif click_method == "iobm":
            self.prop = ContextualPropensity(
                cfg.max_positions,
                window=cfg.context_window,
                store=self.store,
                seed=subseed(cfg.seed, "prop"),
            )
        elif click_method == "upe":
            self.prop = StratifiedPropensity(
                cfg.max_positions, n_strata=cfg.n_strata, store=self.store
            )
        if click_method == "gradrev":
            self.aux = AuxiliaryRelevanceHead(
                store=self.store, seed=subseed(cfg.seed, "aux")
            )
        if cfg.method == "famol":
            self.gate = FrequencyGate(store=self.store, seed=subseed(cfg.seed, "gate"))

        self.click_examples: list[ClickExample] = []
        self.annotation_examples: list[AnnotationExample] = []
        self.hybrid_examples: list[HybridExample] = []
        if cfg.method in CLICK_METHODS:
            self.click_examples = build_click_examples(
                corpus, self.train_queries, cfg.max_positions
            )
            if not self.click_examples:
                raise TrainError("no click sessions for the training queries")
        elif cfg.method in ANNOTATION_METHODS:
            self.annotation_examples = build_annotation_examples(
                corpus, self.train_queries, cfg.annotation_sources
            )
            if not self.annotation_examples:
                raise TrainError(
                    f"no annotations from sources {cfg.annotation_sources} "
                    "for the training queries"
                )
        elif cfg.method == "schedule":
            self.click_examples = build_click_examples(
                corpus, self.train_queries, cfg.max_positions
            )
            self.annotation_examples = build_annotation_examples(
                corpus, self.train_queries, cfg.annotation_sources
            )
            if not self.annotation_examples:
                raise TrainError("scheduled training needs annotation examples")
        else:  # famol
            self.hybrid_examples = build_hybrid_examples(
                corpus, self.train_queries, cfg.annotation_sources, cfg.max_positions
            )
            if not self.hybrid_examples:
                raise TrainError("gated training found no usable examples")

        if isinstance(self.prop, StratifiedPropensity):
            seen = [
                int(p)
                for ex in (self.click_examples or [])
                for p in ex.positions[ex.displayed]
            ]
            if seen:
                self.prop.set_stratum_probs(empirical_strata(seen, self.prop))

        self._adam = AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self._lr_override: dict[str, float] = {}
        if cfg.prop_lr is not None:
            self._lr_override["prop"] = cfg.prop_lr
            self._lr_override["aux"] = cfg.prop_lr
        if cfg.gate_lr is not None:
            self._lr_override["gate"] = cfg.gate_lr

        self._feature_cache: dict[tuple, np.ndarray] = {}

        # loop state (mutated by run/resume)
        self.epochs_run = 0
        self.best_val: float | None = None
        self.best_epoch: int | None = None
        self.best_params: dict[str, np.ndarray] | None = None
        self.bad_epochs = 0
        self.val_history: list[float] = []
        self.stopped_early = False
        self.epoch_blocks: list[dict] = []

    # -- method plumbing ---------------------------------------------------

    def _click_method(self) -> str | None:
        cfg = self.config
        if cfg.method in CLICK_METHODS:
            return cfg.method
        if cfg.method in HYBRID_METHODS:
            return cfg.click_method
        return None

    def _annotation_method(self) -> str | None:
        cfg = self.config
        if cfg.method in ANNOTATION_METHODS:
            return cfg.method
        if cfg.method in HYBRID_METHODS:
            return cfg.annotation_method
        return None

    # -- features ----------------------------------------------------------

    def _vectors(self, query_id: str, doc_ids) -> np.ndarray:
        key = (query_id, tuple(doc_ids))
        hit = self._feature_cache.get(key)
        if hit is None:
            hit = np.stack([self.provider.vector(query_id, d) for d in doc_ids])
            self._feature_cache[key] = hit
        return hit

    def score_fn(self, query_id: str, doc_ids) -> np.ndarray:
        """Deterministic eval-mode scores for a candidate list."""
        return self.scorer.score_values(self._vectors(query_id, doc_ids))

    # -- per-example losses ------------------------------------------------

    def _click_loss(self, ex: ClickExample, scores: Var, drop_seed: int) -> Var:
        cfg = self.config
        method = self._click_method()
        if method == "naive":
            return losses.naive_click_loss(scores, ex.clicks)
        if method == "ipw":
            w = np.zeros(len(ex.doc_ids))
            disp = ex.displayed
            pbm = PBMParams(eta=cfg.ipw_eta)
            g = np.asarray(
                [examination_prob(int(k), pbm) for k in ex.positions[disp]]
            )
            w[disp] = ex.clicks[disp] / g
            return losses.listwise_ce(scores, w)
        if method == "dla":
            ranker, prop = losses.dla_losses(
                scores, ex.clicks, ex.positions, self.prop, displayed=ex.displayed
            )
            return ndiff.add(ranker, prop)
        if method == "iobm":
            ranker, prop = losses.iobm_losses(
                scores, ex.clicks, ex.positions, self.prop, displayed=ex.displayed
            )
            return ndiff.add(ranker, prop)
        if method == "upe":
            ranker, prop = losses.upe_losses(
                scores, ex.clicks, ex.positions, self.prop, displayed=ex.displayed
            )
            return ndiff.add(ranker, prop)
        if method == "drop":
            ranker, prop = losses.drop_losses(
                scores,
                ex.clicks,
                ex.positions,
                self.prop,
                rate=cfg.prop_dropout,
                mode="train",
                seed=drop_seed,
                displayed=ex.displayed,
            )
            return ndiff.add(ranker, prop)
        if method == "gradrev":
            ranker, prop, rev = losses.gradrev_losses(
                scores,
                ex.clicks,
                ex.positions,
                self.prop,
                self.aux,
                cfg.grad_rev_weight,
                displayed=ex.displayed,
            )
            return ndiff.add(ndiff.add(ranker, prop), rev)
        raise TrainError(f"no click objective configured (method={cfg.method})")

    def _annotation_loss(self, ex: AnnotationExample, scores: Var) -> Var:
        method = self._annotation_method()
        if method == "listwise":
            return losses.listwise_ce(scores, ex.labels)
        if method == "ranknet":
            return losses.ranknet_loss(scores, ex.labels)
        raise TrainError(f"no annotation objective configured")

    def _example_loss(self, kind: str, ex, epoch: int, bidx: int, k: int) -> Var:
        seed = subseed(self.config.seed, "fwd", str(epoch), str(bidx), str(k))
        if kind == "click":
            scores = self.scorer.score_list(
                self._vectors(ex.query_id, ex.doc_ids), mode="train", seed=seed
            )
            return self._click_loss(ex, scores, drop_seed=subseed(seed, "propdrop"))
        if kind == "ann":
            scores = self.scorer.score_list(
                self._vectors(ex.query_id, ex.doc_ids), mode="train", seed=seed
            )
            return self._annotation_loss(ex, scores)
        # hybrid example: gate-weighted sum of both sides, the click side
        # averaged over the query's sessions
        click_term = None
        ann_term = None
        if ex.clicks:
            per_session = []
            for si, ce in enumerate(ex.clicks):
                sseed = subseed(seed, "sess", str(si))
                s = self.scorer.score_list(
                    self._vectors(ce.query_id, ce.doc_ids), mode="train", seed=sseed
                )
                per_session.append(
                    self._click_loss(ce, s, drop_seed=subseed(sseed, "propdrop"))
                )
            click_term = per_session[0]
            for term in per_session[1:]:
                click_term = ndiff.add(click_term, term)
            if len(per_session) > 1:
                click_term = ndiff.mul(
                    click_term, ndiff.lift(1.0 / len(per_session))
                )
        if ex.annotation is not None:
            s = self.scorer.score_list(
                self._vectors(ex.annotation.query_id, ex.annotation.doc_ids),
                mode="train",
                seed=subseed(seed, "ann"),
            )
            ann_term = self._annotation_loss(ex.annotation, s)
        return losses.famol_loss(self.gate, ex.bin_idx, click_term, ann_term)

    # -- batching ----------------------------------------------------------

    def _chunks(self, kind: str, examples: list, epoch: int) -> list[tuple[str, list]]:
        if not examples:
            return []
        order = substream(
            self.config.seed, "shuffle", kind, str(epoch)
        ).permutation(len(examples))
        bs = self.config.batch_size
        return [
            (kind, [examples[i] for i in order[j : j + bs]])
            for j in range(0, len(order), bs)
        ]

    def _epoch_batches(self, epoch: int) -> list[tuple[str, list]]:
        cfg = self.config
        if cfg.method in CLICK_METHODS:
            return self._chunks("click", self.click_examples, epoch)
        if cfg.method in ANNOTATION_METHODS:
            return self._chunks("ann", self.annotation_examples, epoch)
        if cfg.method == "famol":
            return self._chunks("hybrid", self.hybrid_examples, epoch)
        # schedule
        ann = self._chunks("ann", self.annotation_examples, epoch)
        if epoch < cfg.warm_epochs:
            self.epoch_blocks.append(
                {"epoch": epoch, "blocks": [{"kind": "warm_ann", "n_batches": len(ann)}]}
            )
            return ann
        click = self._chunks("click", self.click_examples, epoch)
        if cfg.fine_grained:
            merged = click + ann
            order = substream(
                cfg.seed, "interleave", str(epoch)
            ).permutation(len(merged))
            self.epoch_blocks.append(
                {
                    "epoch": epoch,
                    "blocks": [{"kind": "mixed", "n_batches": len(merged)}],
                }
            )
            return [merged[i] for i in order]
        self.epoch_blocks.append(
            {
                "epoch": epoch,
                "blocks": [
                    {"kind": "click", "n_batches": len(click)},
                    {"kind": "ann", "n_batches": len(ann)},
                ],
            }
        )
        return click + ann

    def _run_batch(self, kind: str, batch: list, epoch: int, bidx: int) -> float:
        cfg = self.config
        if kind == "click" and cfg.train_negatives > 0:
            rng = substream(cfg.seed, "negatives", str(epoch), str(bidx))
            batch = _inject_batch_negatives(batch, cfg.train_negatives, rng)
        terms = [
            self._example_loss(kind, ex, epoch, bidx, k) for k, ex in enumerate(batch)
        ]
        loss = losses.batch_mean(terms)
        self.store.zero_grads()
        ndiff.backward(loss)
        ndiff.adamw_step(self.store, self._adam, lr_override=self._lr_override or None)
        return float(loss.value)

    # -- validation / the loop --------------------------------------------

    def validate_now(self) -> float | None:
        if not self.val_queries:
            return None
        report = evaluate_ranker(
            self.score_fn, self.corpus, self.val_queries, ks=(self.config.eval_k,)
        )
        return report.overall[f"ndcg@{self.config.eval_k}"]

    def _after_epoch(self, epoch: int) -> bool:
        """Validation + early-stop bookkeeping; returns True to stop."""
        val = self.validate_now()
        self.epochs_run = epoch + 1
        if val is None:
            self.best_params = self.store.copy_values()
            self.best_epoch = epoch
            return False
        self.val_history.append(val)
        if self.best_val is None or val > self.best_val:
            self.best_val = val
            self.best_epoch = epoch
            self.best_params = self.store.copy_values()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.config.patience:
                self.stopped_early = True
                return True
        return False

    def run(self, checkpoint_dir=None, resume: bool = False) -> dict:
        """Train to completion (or early stop) and return the manifest.

        With ``checkpoint_dir`` set, a full snapshot lands there after every
        epoch; ``resume=True`` picks up after the last snapshot and finishes
        identically to a run that was never interrupted.
        """
        start = 0
        if resume:
            if checkpoint_dir is None:
                raise TrainError("resume requires a checkpoint directory")
            start = self._load_latest_checkpoint(checkpoint_dir)
            if self.stopped_early:
                start = self.config.max_epochs
        for epoch in range(start, self.config.max_epochs):
            for bidx, (kind, batch) in enumerate(self._epoch_batches(epoch)):
                self._run_batch(kind, batch, epoch, bidx)
            stop = self._after_epoch(epoch)
            if checkpoint_dir is not None:
                self._write_checkpoint(checkpoint_dir, epoch)
            if stop:
                break
        if self.best_params is not None:
            self.store.load_values(self.best_params)
        return self.manifest()

    # -- snapshots ---------------------------------------------------------

    def _loop_state(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "val_history": list(self.val_history),
            "stopped_early": self.stopped_early,
            "epoch_blocks": list(self.epoch_blocks),
        }

    def _write_checkpoint(self, checkpoint_dir, epoch: int) -> None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        state = {
            "format": "ltr-checkpoint-v1",
            "config_hash": self.config.config_hash(),
            "epoch": epoch,
            "store": ndiff.store_state(self.store),
            "best_params": (
                {k: ndiff.encode_array(v) for k, v in sorted(self.best_params.items())}
                if self.best_params is not None
                else None
            ),
            "loop": self._loop_state(),
        }
        path = os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(state, fh, sort_keys=True)
        os.replace(tmp, path)

    def _load_latest_checkpoint(self, checkpoint_dir) -> int:
        names = sorted(
            n
            for n in os.listdir(checkpoint_dir)
            if n.startswith("epoch_") and n.endswith(".json")
        )
        if not names:
            raise CheckpointError(f"no checkpoints in {checkpoint_dir}")
        with open(os.path.join(checkpoint_dir, names[-1]), encoding="utf-8") as fh:
            state = json.load(fh)
        if state.get("format") != "ltr-checkpoint-v1":
            raise CheckpointError("unrecognized checkpoint format")
        if state["config_hash"] != self.config.config_hash():
            raise CheckpointError(
                "checkpoint was written by a different configuration"
            )
        stored = state["store"]
        if sorted(stored["params"]) != self.store.names():
            raise CheckpointError("checkpoint parameters do not match this model")
        for name in self.store.names():
            self.store.params[name].value = ndiff.decode_array(stored["params"][name])
            self.store.adam_m[name] = ndiff.decode_array(stored["adam_m"][name])
            self.store.adam_v[name] = ndiff.decode_array(stored["adam_v"][name])
        self.store.step = int(stored["step"])
        if state["best_params"] is not None:
            self.best_params = {
                k: ndiff.decode_array(v) for k, v in state["best_params"].items()
            }
        loop = state["loop"]
        self.epochs_run = loop["epochs_run"]
        self.best_val = loop["best_val"]
        self.best_epoch = loop["best_epoch"]
        self.bad_epochs = loop["bad_epochs"]
        self.val_history = list(loop["val_history"])
        self.stopped_early = loop["stopped_early"]
        self.epoch_blocks = list(loop["epoch_blocks"])
        return int(state["epoch"]) + 1

    # -- outputs -----------------------------------------------------------

    def param_digest(self) -> str:
        blob = json.dumps(ndiff.store_state(self.store), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def gate_summary(self) -> dict[str, list[float]] | None:
        if self.gate is None:
            return None
        return {
            BIN_NAMES[b]: list(self.gate.weight_values(b))
            for b in range(self.gate.n_bins)
        }

    def manifest(self) -> dict:
        m = {
            "config": self.config.to_json(),
            "config_hash": self.config.config_hash(),
            "method": self.config.method,
            "n_parameters": self.store.n_parameters(),
            "n_click_examples": len(self.click_examples),
            "n_annotation_examples": len(self.annotation_examples),
            "n_hybrid_examples": len(self.hybrid_examples),
            "n_train_queries": len(self.train_queries),
            "n_val_queries": len(self.val_queries),
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "val_history": list(self.val_history),
            "param_digest": self.param_digest(),
        }
        if self.config.method == "schedule":
            m["epoch_blocks"] = list(self.epoch_blocks)
        gates = self.gate_summary()
        if gates is not None:
            m["gate_weights"] = gates
        return m

    def save_model(self, path) -> None:
        payload = {
            "format": "ltr-model-v1",
            "config": self.config.to_json(),
            "config_hash": self.config.config_hash(),
            "input_dim": self.provider.dim,
            "scorer_spec": self.scorer.spec.to_json(),
            "scorer_prefix": self.scorer.prefix,
            "store": ndiff.store_state(self.store),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")


class SavedScorer:
    """A scoring head restored from a saved model file."""

    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != "ltr-model-v1":
            raise CheckpointError(f"{path} is not a saved model")
        self.config = TrainConfig.from_json(payload["config"])
        self.spec = ndiff.NetSpec.from_json(payload["scorer_spec"])
        self.prefix = payload["scorer_prefix"]
        self.input_dim = int(payload["input_dim"])
        self.store = ndiff.load_store_state(payload["store"])

    def score_values(self, vectors: np.ndarray) -> np.ndarray:
        out = ndiff.mlp_forward(self.store, self.spec, self.prefix, vectors)
        return out.value.reshape(-1)

    def score_fn(self, provider):
        def fn(query_id, doc_ids):
            x = np.stack([provider.vector(query_id, d) for d in doc_ids])
            return self.score_values(x)

        return fn


def train(
    corpus: Corpus,
    provider,
    config: TrainConfig,
    train_queries,
    val_queries=(),
    checkpoint_dir=None,
    resume: bool = False,
) -> tuple[Trainer, dict]:
    """Convenience wrapper: build a Trainer, run it, return it + manifest."""
    trainer = Trainer(corpus, provider, config, train_queries, val_queries)
    manifest = trainer.run(checkpoint_dir=checkpoint_dir, resume=resume)
    return trainer, manifest
