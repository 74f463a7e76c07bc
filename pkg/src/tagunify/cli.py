"""Command-line entry point: ``tagunify <command> [flags]``.

Exit status is 0 on success, 1 on a usage error (bad flag, missing input
file) and 2 when the work itself fails.  Logs go to standard error; data
goes only to the files named on the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .corpus import (AnnotatedCorpus, CorpusFormatError, GeneratorSpec,
                     generate_synthetic, read_conll, read_tokens, relabel_types, selective_retag,
                     write_conll)
from .evalmetrics import aggregate_labels, micro_prf
from .features import Model
from .objectives import DistillConfig, Instance
from .tagspace import HierarchyError, TagHierarchy, TagSet, load_hierarchy
from .trainer import TrainConfig, TrainingDiverged, decode, train
from .unify import ScenarioConfig, ScenarioError, TeacherHandle, distill, merge_corpus, unify_labels

log = logging.getLogger("tagunify")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ helpers

def _split_spec(spec: str) -> tuple[Path, str | None]:
    """``path[:tagset]``; a colon is only a separator when the rest is a plain id."""
    head, sep, tail = spec.rpartition(":")
    if sep and head and tail and "/" not in tail and "\\" not in tail:
        return Path(head), tail
    return Path(spec), None


def _require(paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"no such file: {p}")


def _hierarchy(args) -> TagHierarchy | None:
    return load_hierarchy(args.hierarchy) if getattr(args, "hierarchy", None) else None


def _labeled(spec: str, hierarchy: TagHierarchy | None) -> AnnotatedCorpus:
    path, ts_id = _split_spec(spec)
    ts_id = ts_id or path.stem
    tagset = None
    if hierarchy is not None:
        if ts_id not in hierarchy.tagsets:
            raise UsageError(f"{path}: tag set {ts_id!r} is not declared in the hierarchy "
                             f"(declared: {sorted(hierarchy.tagsets)})")
        tagset = hierarchy.tagsets[ts_id]
    return read_conll(path, tagset=tagset, tagset_id=ts_id)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, lr_decay=args.lr_decay,
                       max_epochs=args.epochs, patience=args.patience, l2=args.l2, seed=args.seed,
                       optimizer=args.optimizer, workers=args.workers)


def _dev(args, hierarchy: TagHierarchy | None):
    if not args.dev:
        return None
    corpus = read_conll(args.dev)
    if hierarchy is None:
        return corpus.sentences, corpus.labels
    return corpus.sentences, unify_labels(corpus, hierarchy)


def _write_tagged(sentences, labels, tagset: TagSet, path) -> None:
    write_conll(AnnotatedCorpus(sentences, labels, tagset), path)


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> None:
    spec_kw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.types:
        spec_kw["entity_types"] = args.types.split(",")
    if "entity_types" not in spec_kw:
        raise UsageError("entity types are required (--types or 'entity_types' in --spec)")
    known = {f.name for f in fields(GeneratorSpec)}
    unknown = set(spec_kw) - known
    if unknown:
        raise UsageError(f"unknown generator fields: {sorted(unknown)}")
    spec_kw["seed"] = args.seed
    if args.domain is not None:
        spec_kw["domain"] = args.domain
    corpus = generate_synthetic(GeneratorSpec(**spec_kw), args.n, tagset_id=args.tagset_id)
    if args.relabel:
        mapping = dict(item.split("=", 1) for item in args.relabel.split(","))
        corpus = relabel_types(corpus, mapping, args.tagset_id)
    if args.keep:
        corpus = selective_retag(corpus, args.keep.split(","), args.tagset_id)
    write_conll(corpus, args.out)
    log.info("wrote %d sentences (%s) to %s", len(corpus), ",".join(corpus.tagset.entity_types),
             args.out)


def cmd_hierarchy_check(args) -> None:
    h = load_hierarchy(args.hierarchy)
    print(f"{len(h.leaves)} leaves: {' '.join(h.leaves)}")
    for ts in h.tagsets.values():
        print(f"tagset {ts.id}: {len(ts.entity_types)} types, O covers "
              f"{len(h.projection_for(ts)('O')) - 1} unified labels")


def cmd_train(args) -> None:
    h = _hierarchy(args)
    corpora = [_labeled(spec, h) for spec in args.data]
    if args.mode == "supervised":
        if len(corpora) != 1:
            raise UsageError("supervised training takes exactly one --data file")
        corpus = corpora[0]
        model = Model(corpus.tagset, kind=args.kind)
        model.add_features(corpus.sentences)
        instances = [Instance(model.featurize(s), labels=corpus.tagset.encode(l)) for s, l in corpus]
        dev = _dev(args, None)
    else:
        if h is None:
            raise UsageError("marginal training needs --hierarchy")
        model = Model(h.unified, hierarchy_id=h.name, kind=args.kind)
        for c in corpora:
            model.add_features(c.sentences)
        instances = []
        for c in corpora:
            proj = h.projection_for(c.tagset)
            instances += [Instance(model.featurize(s), allowed=proj.constraint(l)) for s, l in c]
        dev = _dev(args, h)
    best, report = train(model, instances, _train_config(args), dev, args.log)
    best.save(args.model_out)
    log.info("saved %s model %s (best epoch %d) to %s", args.mode, best.fingerprint(),
             report.best_epoch, args.model_out)


def cmd_distill(args) -> None:
    h = _hierarchy(args)
    teachers = [TeacherHandle.from_model(Model.load(p), h, name=Path(p).stem) for p in args.teacher]
    cfg = ScenarioConfig(
        mode=args.mode, hierarchy=h, teachers=teachers,
        unlabeled=[s for p in args.unlabeled for s in read_tokens(p)],
        labeled=[_labeled(spec, h) for spec in args.labeled],
        source_unlabeled=[s for p in args.source_unlabeled for s in read_tokens(p)],
        dev=read_conll(args.dev) if args.dev else None,
        distill=DistillConfig(tau=args.tau, alpha=args.alpha), train=_train_config(args),
        student_kind=args.kind, init=Model.load(args.init) if args.init else None,
        cache_dir=args.cache_dir, log_path=args.log)
    best, report = distill(cfg)
    best.save(args.model_out)
    log.info("saved %s student %s (best epoch %d) to %s", args.mode, best.fingerprint(),
             report.best_epoch, args.model_out)


def cmd_merge(args) -> None:
    h = _hierarchy(args)
    teachers = [TeacherHandle.from_model(Model.load(p), h, name=Path(p).stem) for p in args.teacher]
    sentences = read_tokens(args.input)
    labels = merge_corpus(teachers, sentences, h, bio_mask=not args.no_bio_mask)
    _write_tagged(sentences, labels, h.unified, args.out)


def cmd_tag(args) -> None:
    model = Model.load(args.model)
    sentences = read_tokens(args.input)
    labels = [model.tagset.decode(decode(model, model.featurize(s), not args.no_bio_mask))
              for s in sentences]
    _write_tagged(sentences, labels, model.tagset, args.out)


def _eval_mapping(args, gold: AnnotatedCorpus, pred: AnnotatedCorpus) -> dict[str, str] | None:
    mapping: dict[str, str] = {}
    if args.coarse:
        h = _hierarchy(args)
        if h is None:
            raise UsageError("--coarse needs --hierarchy")
        for t in set(gold.tagset.entity_types) | set(pred.tagset.entity_types):
            mapping[t] = h.root_of(t) if t in h.parents else t
    for item in args.map:
        if "=" not in item:
            raise UsageError(f"--map expects TYPE=NEW, got {item!r}")
        src, dst = item.split("=", 1)
        mapping[src] = dst
    if not mapping:
        return None
    for t in set(gold.tagset.entity_types) | set(pred.tagset.entity_types):
        mapping.setdefault(t, t)
    return mapping


def cmd_eval(args) -> None:
    gold, pred = read_conll(args.gold), read_conll(args.pred)
    if gold.sentences != pred.sentences:
        raise ValueError("gold and predicted files hold different token sequences")
    g, p = gold.labels, pred.labels
    mapping = _eval_mapping(args, gold, pred)
    if mapping:
        g = [aggregate_labels(s, mapping) for s in g]
        p = [aggregate_labels(s, mapping) for s in p]
    result = micro_prf(g, p)
    print(result.table())
    print(f"F1 = {result.f1:.3f}")
    if args.json:
        Path(args.json).write_text(result.to_json() + "\n", encoding="utf-8")


# ------------------------------------------------------------------ parser

def _add_common(p) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="gradient worker threads; results do not depend on it (default: CPU count)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")


def _add_training(p) -> None:
    g = p.add_argument_group("optimisation")
    g.add_argument("--kind", choices=("crf", "local"), default="crf",
                   help="model family: linear-chain CRF or per-token softmax")
    g.add_argument("--lr", type=float, default=0.015, help="initial learning rate")
    g.add_argument("--lr-decay", type=float, default=0.05,
                   help="inverse-time decay: lr / (1 + decay * epoch)")
    g.add_argument("--epochs", type=int, default=20, help="maximum epochs")
    g.add_argument("--patience", type=int, default=5, help="epochs without dev improvement before stopping")
    g.add_argument("--batch-size", type=int, default=10, help="sentences per update")
    g.add_argument("--l2", type=float, default=1e-6, help="L2 penalty on weights and transitions")
    g.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd", help="update rule")
    g.add_argument("--dev", help="CoNLL dev file for early stopping (unified labels)")
    g.add_argument("--log", help="JSON-lines training log")
    g.add_argument("--model-out", required=True, help="where to write the model")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tagunify", description="Train, distil, merge and score taggers "
                     "across heterogeneous tag sets.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic CoNLL corpus")
    p.add_argument("--spec", help="JSON file with generator fields (entity_types, entity_vocab, ...)")
    p.add_argument("--types", help="comma-separated entity types (overrides the spec)")
    p.add_argument("-n", type=int, default=1000, help="number of sentences")
    p.add_argument("--domain", type=int, help="vocabulary domain (overrides the spec)")
    p.add_argument("--relabel", help="rename types, e.g. CITY=GPE,STATE=GPE")
    p.add_argument("--keep", help="keep only these types; the rest become O")
    p.add_argument("--tagset-id", default="synthetic", help="tag set id stored with the corpus")
    p.add_argument("--out", required=True, help="output CoNLL file")
    _add_common(p)
    p.set_defaults(func=cmd_generate, inputs=lambda a: [a.spec])

    p = sub.add_parser("hierarchy-check", help="validate a hierarchy file and list its leaves")
    p.add_argument("--hierarchy", required=True, help="hierarchy text file")
    _add_common(p)
    p.set_defaults(func=cmd_hierarchy_check, inputs=lambda a: [a.hierarchy])

    p = sub.add_parser("train", help="supervised CRF or marginal CRF over several tag sets")
    p.add_argument("--mode", choices=("supervised", "marginal"), default="supervised")
    p.add_argument("--data", action="append", required=True,
                   help="CoNLL file, optionally FILE:TAGSET (tag set id defaults to the file stem)")
    p.add_argument("--hierarchy", help="hierarchy file (required for marginal)")
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_train, inputs=lambda a: [_split_spec(d)[0] for d in a.data]
                   + [a.hierarchy, a.dev])

    p = sub.add_parser("distill", help="distil frozen teachers into a unified student")
    p.add_argument("--mode", choices=("mardi", "mardi-data", "progressive"), default="mardi")
    p.add_argument("--hierarchy", required=True, help="hierarchy file")
    p.add_argument("--teacher", action="append", required=True, help="teacher model file (repeatable)")
    p.add_argument("--unlabeled", action="append", default=[],
                   help="text to distil over; any CoNLL-like file, first column used (repeatable)")
    p.add_argument("--labeled", action="append", default=[],
                   help="partially annotated CoNLL file FILE[:TAGSET] (mardi-data, progressive)")
    p.add_argument("--source-unlabeled", action="append", default=[],
                   help="source-domain text for progressive mode (repeatable)")
    p.add_argument("--tau", type=float, default=1.0, help="temperature dividing all lattice scores")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="weight of the labelled-data loss; 0 ignores labels entirely")
    p.add_argument("--init", help="initial student model (unified label space)")
    p.add_argument("--cache-dir", default=os.environ.get("TAGUNIFY_CACHE_DIR"),
                   help="teacher marginal cache (default $TAGUNIFY_CACHE_DIR)")
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_distill, inputs=lambda a: [a.hierarchy, a.dev, a.init] + a.teacher
                   + a.unlabeled + a.source_unlabeled + [_split_spec(d)[0] for d in a.labeled])

    p = sub.add_parser("merge", help="post-processing baseline: merge teacher decodes")
    p.add_argument("--hierarchy", required=True, help="hierarchy file")
    p.add_argument("--teacher", action="append", required=True,
                   help="teacher model file; earlier teachers win ties (repeatable)")
    p.add_argument("--input", required=True, help="text to tag (first column used)")
    p.add_argument("--out", required=True, help="output CoNLL file")
    p.add_argument("--no-bio-mask", action="store_true", help="decode without BIO constraints")
    _add_common(p)
    p.set_defaults(func=cmd_merge, inputs=lambda a: [a.hierarchy, a.input] + a.teacher)

    p = sub.add_parser("tag", help="decode a corpus with a model")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--input", required=True, help="text to tag (first column used)")
    p.add_argument("--out", required=True, help="output CoNLL file")
    p.add_argument("--no-bio-mask", action="store_true", help="decode without BIO constraints")
    _add_common(p)
    p.set_defaults(func=cmd_tag, inputs=lambda a: [a.model, a.input])

    p = sub.add_parser("eval", help="exact-match span precision, recall and F1")
    p.add_argument("--gold", required=True, help="gold CoNLL file")
    p.add_argument("--pred", required=True, help="predicted CoNLL file (same tokens)")
    p.add_argument("--map", action="append", default=[],
                   help="rename a type before scoring, TYPE=NEW (repeatable)")
    p.add_argument("--coarse", action="store_true",
                   help="score at top-level granularity (needs --hierarchy)")
    p.add_argument("--hierarchy", help="hierarchy file for --coarse")
    p.add_argument("--json", help="also write the metric record as JSON")
    _add_common(p)
    p.set_defaults(func=cmd_eval, inputs=lambda a: [a.gold, a.pred, a.hierarchy])
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        _require(args.inputs(args))
    except UsageError as exc:
        print(f"tagunify: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"tagunify: error: {exc}", file=sys.stderr)
        return 1
    except (HierarchyError, ScenarioError, CorpusFormatError, TrainingDiverged, ValueError,
            KeyError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
