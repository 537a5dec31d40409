"""Command-line entry points for the whole experiment workflow.

Subcommands::

    gen        build a synthetic corpus (+ split) into a directory
    features   export lexical feature vectors for the displayed pairs
    simulate   add simulated click sessions to an existing corpus
    annotate   add oracle (or external) annotations to an existing corpus
    train      fit a single-objective ranker
    schedule   fit the alternating click/annotation ranker
    famol      fit the frequency-gated multi-objective ranker
    eval       score a saved model on a query split
    compare    line up several evaluation reports side by side

Every command accepts ``--config FILE`` (TOML, tables keyed like the config
dataclasses) and ``--set key=value`` overrides; values parse as JSON with a
string fallback. ``HYBRANK_DATA`` and ``HYBRANK_OUT`` provide defaults for
``--data``/``--out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import evaluation
from .annotate import (
    STRATEGIES,
    OracleParams,
    annotate_corpus,
    external_annotate,
    uniform_noise_confusion,
)
from .clicksim import PBMParams, frequency_proportional, simulate_corpus
from .data import (
    Corpus,
    DatasetSplit,
    SyntheticConfig,
    assign_frequency_bins,
    load_corpus,
)
from .features import (
    FeatureParams,
    build_link_graph,
    compute_collection_stats,
    extract_features,
    pagerank,
    write_feature_file,
    write_svmlight,
)
from .pipelines import (
    ClickSetupConfig,
    HybridSetupConfig,
    make_provider,
    prepare_click_corpus,
    prepare_hybrid_corpus,
)
from .scorers import FileRepProvider, SyntheticRepConfig
from .train import SavedScorer, TrainConfig, train


def _fail(message: str):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(2)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build_dataclass(cls, table: dict, context: str):
    known = {f.name for f in dataclass_fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        _fail(f"unknown {context} option(s): {', '.join(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in table.items()})


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        _fail(f"config file not found: {p}")
    with p.open("rb") as fh:
        return tomllib.load(fh)


_RESERVED_TABLES = ("synthetic", "pbm", "setup", "features", "train")


def _table(config: dict, name: str) -> dict:
    """Merge bare top-level keys under the named table (named table wins)."""
    root = {
        k: v
        for k, v in config.items()
        if k not in _RESERVED_TABLES and not isinstance(v, dict)
    }
    return {**root, **config.get(name, {})}


def _apply_sets(config: dict, sets: list[str]) -> dict:
    for item in sets or []:
        if "=" not in item:
            _fail(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        target = config
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                _fail(f"--set {key}: {part} is not a table")
        target[parts[-1]] = _coerce(raw)
    return config


def _data_dir(args) -> Path:
    data = args.data or os.environ.get("HYBRANK_DATA")
    if not data:
        _fail("no corpus directory; pass --data or set HYBRANK_DATA")
    p = Path(data)
    if not p.is_dir():
        _fail(f"corpus directory not found: {p}")
    return p


def _out_path(args, default_env: str = "HYBRANK_OUT") -> Path:
    out = args.out or os.environ.get(default_env)
    if not out:
        _fail("no output path; pass --out or set HYBRANK_OUT")
    return Path(out)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _save_split(path: Path, split: DatasetSplit) -> None:
    _write_json(
        path,
        {
            "train": list(split.train),
            "validation": list(split.validation),
            "test": list(split.test),
        },
    )


def _load_split(path: Path) -> DatasetSplit:
    if not path.exists():
        _fail(f"split file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        d = json.load(fh)
    return DatasetSplit(
        train=tuple(d.get("train", ())),
        validation=tuple(d.get("validation", ())),
        test=tuple(d.get("test", ())),
    )


def _load_binned(data: Path) -> Corpus:
    """Load a corpus and re-derive frequency bins (not stored; a pure
    function of the stored query frequencies)."""
    corpus = load_corpus(data)
    if len(corpus.queries) >= 3:
        assign_frequency_bins(corpus.queries.values())
    return corpus


def _provider_for(corpus: Corpus, representation: str, split: DatasetSplit, rep_file):
    if rep_file:
        return FileRepProvider(rep_file)
    if representation == "dense":
        return make_provider(corpus, "synthetic")
    return make_provider(corpus, "feature", standardize_on=split.train)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    config = _apply_sets(_load_config(args.config), args.set)
    out = _out_path(args)
    synthetic = _build_dataclass(
        SyntheticConfig, config.get("synthetic", {}), "synthetic"
    )
    pbm = _build_dataclass(PBMParams, config.get("pbm", {}), "pbm")
    setup_table = _table(config, "setup")
    if args.seed is not None:
        setup_table["seed"] = args.seed
    if args.preset == "click":
        setup = _build_dataclass(
            ClickSetupConfig,
            {**setup_table, "synthetic": synthetic, "pbm": pbm},
            "setup",
        )
        corpus, split = prepare_click_corpus(setup)
    else:
        setup = _build_dataclass(
            HybridSetupConfig,
            {**setup_table, "synthetic": synthetic, "pbm": pbm},
            "setup",
        )
        corpus, split = prepare_hybrid_corpus(setup)
    corpus.save(out)
    _save_split(out / "split.json", split)
    _write_json(
        out / "setup_manifest.json",
        {
            "preset": args.preset,
            "seed": setup.seed,
            "corpus_fingerprint": corpus.fingerprint(),
            "n_queries": len(corpus.queries),
            "n_documents": len(corpus.documents),
            "n_sessions": len(corpus.sessions),
            "n_annotations": len(corpus.annotations),
            "split_sizes": {
                "train": len(split.train),
                "validation": len(split.validation),
                "test": len(split.test),
            },
        },
    )
    print(f"wrote corpus to {out} (fingerprint {corpus.fingerprint()[:12]})")
    return 0


def cmd_features(args) -> int:
    data = _data_dir(args)
    out = _out_path(args)
    corpus = load_corpus(data)
    stats = compute_collection_stats(corpus.documents.values())
    params = _build_dataclass(
        FeatureParams,
        _apply_sets(_load_config(args.config), args.set).get("features", {}),
        "features",
    )
    pr = None
    if args.pagerank:
        pr = pagerank(build_link_graph(corpus))
    rows = []
    for qid in sorted(corpus.lists):
        qtext = corpus.queries[qid].text
        for did in corpus.lists[qid].doc_ids:
            values = extract_features(
                qtext, corpus.documents[did], stats, params, pr
            )
            rows.append((qid, did, values))
    if args.format == "svmlight":
        truth = corpus.truth or {}
        labeled = [
            (qid, did, values, truth[(qid, did)].grade if (qid, did) in truth else 0)
            for qid, did, values in rows
        ]
        write_svmlight(out, labeled)
    else:
        write_feature_file(out, rows)
    print(f"wrote {len(rows)} feature rows to {out}")
    return 0


def cmd_simulate(args) -> int:
    data = _data_dir(args)
    config = _apply_sets(_load_config(args.config), args.set)
    pbm = _build_dataclass(PBMParams, config.get("pbm", {}), "pbm")
    corpus = load_corpus(data)
    if args.per_frequency:
        plan = frequency_proportional(args.rate, cap=args.cap)
    else:
        plan = args.sessions
    qids = list(args.queries) if args.queries else None
    sessions = simulate_corpus(
        corpus, pbm, seed=args.seed, sessions_per_query=plan, query_ids=qids
    )
    corpus.sessions.extend(sessions)
    corpus.save(data)
    _write_json(
        data / "simulate_manifest.json",
        {
            "seed": args.seed,
            "eta": pbm.eta,
            "epsilon": pbm.epsilon,
            "new_sessions": len(sessions),
            "total_sessions": len(corpus.sessions),
            "corpus_fingerprint": corpus.fingerprint(),
        },
    )
    print(f"added {len(sessions)} sessions (total {len(corpus.sessions)})")
    return 0


def cmd_annotate(args) -> int:
    data = _data_dir(args)
    corpus = _load_binned(data)
    strategy = args.strategy
    if strategy not in STRATEGIES:
        _fail(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    qids = sorted(args.queries) if args.queries else sorted(corpus.lists)
    if args.responses:
        items = [
            (qid, corpus.queries[qid].text,
             [corpus.documents[d] for d in corpus.lists[qid].doc_ids])
            for qid in qids
        ]
        result = external_annotate(
            strategy,
            items,
            requests_path=args.requests or (data / "annotation_requests.jsonl"),
            responses_path=args.responses,
            rejects_path=args.rejects or (data / "annotation_rejects.jsonl"),
        )
        records = result.records
        if result.rejected_ids:
            print(
                f"quarantined {len(result.rejected_ids)} response(s)",
                file=sys.stderr,
            )
    else:
        params = OracleParams(
            confusion=uniform_noise_confusion(args.error),
            consistency_rho=args.rho,
        )
        records = annotate_corpus(
            corpus, strategy, params, seed=args.seed, query_ids=qids
        )
    corpus.annotations.extend(records)
    corpus.save(data)
    manifest = {
        "strategy": strategy,
        "seed": args.seed,
        "n_new": len(records),
        "n_total": len(corpus.annotations),
        "external": bool(args.responses),
        "corpus_fingerprint": corpus.fingerprint(),
    }
    _write_json(data / "annotate_manifest.json", manifest)
    if args.report:
        report = evaluation.consistency_report(corpus, (strategy,))
        _write_json(
            Path(args.report),
            {s: r.to_json() for s, r in report.items()},
        )
    print(f"added {len(records)} annotations from {strategy}")
    return 0


def _train_common(args, method_override: str | None = None) -> int:
    data = _data_dir(args)
    out = _out_path(args)
    config = _apply_sets(_load_config(args.config), args.set)
    table = _table(config, "train")
    for key in (
        "method",
        "lr",
        "seed",
        "batch_size",
        "max_epochs",
        "representation",
    ):
        value = getattr(args, key, None)
        if value is not None:
            table[key] = value
    if method_override is not None:
        table["method"] = method_override
    if "method" not in table:
        _fail("no training method; pass --method or set [train].method")
    cfg = _build_dataclass(TrainConfig, table, "train")

    corpus = _load_binned(data)
    split = _load_split(Path(args.split) if args.split else data / "split.json")
    provider = _provider_for(corpus, cfg.representation, split, args.rep_file)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = str(out / "checkpoints") if args.checkpoints or args.resume else None
    trainer, manifest = train(
        corpus,
        provider,
        cfg,
        train_queries=split.train,
        val_queries=split.validation,
        checkpoint_dir=ckpt_dir,
        resume=args.resume,
    )
    manifest["corpus_fingerprint"] = corpus.fingerprint()
    trainer.save_model(out / "model.json")
    _write_json(out / "manifest.json", manifest)
    best = manifest["best_val"]
    shown = "n/a" if best is None else f"{best:.4f}"
    print(
        f"{cfg.method}: {manifest['epochs_run']} epoch(s), "
        f"best val ndcg@{cfg.eval_k} {shown}; model in {out}"
    )
    return 0


def cmd_train(args) -> int:
    return _train_common(args)


def cmd_schedule(args) -> int:
    return _train_common(args, method_override="schedule")


def cmd_famol(args) -> int:
    return _train_common(args, method_override="famol")


def cmd_eval(args) -> int:
    data = _data_dir(args)
    model_path = Path(args.model)
    if not model_path.exists():
        _fail(f"model file not found: {model_path}")
    scorer = SavedScorer(model_path)
    corpus = _load_binned(data)
    split = _load_split(Path(args.split) if args.split else data / "split.json")
    provider = _provider_for(
        corpus, scorer.config.representation, split, args.rep_file
    )
    if provider.dim != scorer.input_dim:
        _fail(
            f"provider dimension {provider.dim} does not match the model's "
            f"expected input {scorer.input_dim}"
        )
    queries = getattr(split, args.on)
    if not queries:
        _fail(f"split has no {args.on} queries")
    report = evaluation.evaluate_ranker(
        scorer.score_fn(provider),
        corpus,
        queries,
        ks=tuple(args.k),
        inject_negatives=args.inject,
        inject_seed=args.seed,
    )
    print(report.format_table())
    if args.out:
        report.save(args.out)
        print(f"report written to {args.out}")
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        p = Path(path)
        if not p.exists():
            _fail(f"report not found: {p}")
        with p.open(encoding="utf-8") as fh:
            reports.append((p.stem, evaluation.EvalReport.from_json(json.load(fh))))
    names = args.names.split(",") if args.names else [n for n, _ in reports]
    if len(names) != len(reports):
        _fail("--names must match the number of reports")
    metric = args.metric
    for (_, rep) in reports:
        if metric not in rep.overall:
            _fail(f"metric {metric!r} missing from one of the reports")
    width = max(len(n) for n in names)
    print(f"{'run'.ljust(width)}\t{metric}")
    best = max(rep.overall[metric] for _, rep in reports)
    for name, (_, rep) in zip(names, reports):
        mark = " *" if rep.overall[metric] == best else ""
        print(f"{name.ljust(width)}\t{rep.overall[metric]:.4f}{mark}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, data=True, out=True) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config value (repeatable; dotted keys open tables)",
    )
    if data:
        p.add_argument("--data", help="corpus directory (default: $HYBRANK_DATA)")
    if out:
        p.add_argument("--out", help="output path (default: $HYBRANK_OUT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybrank",
        description="Learning-to-rank experiments over clicks and annotations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    _add_common(p, data=False)
    p.add_argument("--preset", choices=("click", "hybrid"), default="hybrid")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("features", help="export feature vectors")
    _add_common(p)
    p.add_argument("--format", choices=("tsv", "svmlight"), default="tsv")
    p.add_argument("--pagerank", action="store_true", help="include link-graph scores")
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("simulate", help="simulate click sessions")
    _add_common(p, out=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sessions", type=int, default=20, help="sessions per query")
    p.add_argument(
        "--per-frequency",
        action="store_true",
        help="scale session counts with query frequency",
    )
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--cap", type=int, default=50)
    p.add_argument("--queries", nargs="*", help="restrict to these query ids")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("annotate", help="annotate query lists")
    _add_common(p, out=False)
    p.add_argument("--strategy", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--error", type=float, default=0.0, help="oracle grade error rate")
    p.add_argument("--rho", type=float, default=0.7, help="list-order consistency")
    p.add_argument("--queries", nargs="*")
    p.add_argument("--requests", help="write prompts here (external mode)")
    p.add_argument("--responses", help="ingest annotator responses from this file")
    p.add_argument("--rejects", help="quarantine malformed responses here")
    p.add_argument("--report", help="write a label-vs-truth consistency report")
    p.set_defaults(fn=cmd_annotate)

    for name, fn, with_method in (
        ("train", cmd_train, True),
        ("schedule", cmd_schedule, False),
        ("famol", cmd_famol, False),
    ):
        p = sub.add_parser(name, help=f"{name} a ranker")
        _add_common(p)
        if with_method:
            p.add_argument("--method")
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
        p.add_argument(
            "--representation", choices=("dense", "feature"), default=None
        )
        p.add_argument("--split", help="split file (default: DATA/split.json)")
        p.add_argument("--rep-file", help="representation vectors file")
        p.add_argument("--checkpoints", action="store_true")
        p.add_argument("--resume", action="store_true")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="evaluate a saved model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", help="split file (default: DATA/split.json)")
    p.add_argument("--on", choices=("validation", "test", "train"), default="test")
    p.add_argument("--k", type=int, nargs="+", default=[1, 3, 5, 10])
    p.add_argument("--inject", type=int, default=0, help="true negatives per query")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rep-file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="compare evaluation reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--metric", default="ndcg@10")
    p.add_argument("--names", help="comma-separated run names")
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
