"""Command-line entry point: config handling, run directories with
content-addressed names and provenance records, and one subcommand per
pipeline stage (term mining, corpus construction, specialization,
fine-tuning, evaluation, experiment harnesses, gradient checking).

Config precedence: JSON file via --config supplies defaults, explicit flags
win. Every run writes provenance.json (config digest, seed, input file
digests, library versions) so artifacts are reproducible from the record.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import (
    FusionWeights,
    freeze_base,
    init_adapter_bank,
    inject,
    load_adapter_bank,
    save_adapter_bank,
)
from .checkpoint import load_container, load_encoder, save_container, save_encoder
from .corpus import (
    CleaningReport,
    build_flat_corpus,
    build_thread_triples,
)
from .data import (
    Ontology,
    load_corpus_lines,
    load_dialogs,
    load_thread_dump,
    load_triples,
    ontology_from_dialogs,
    save_corpus_lines,
    save_triples,
)
from .downstream import (
    DEFAULT_POOL_SIZE,
    DSTHead,
    EvalReport,
    ScoringHead,
    config_digest,
    cross_domain_matrix,
    dialogs_to_dst_items,
    dialogs_to_rr_pairs,
    dst_forward,
    few_shot_curve,
    finetune,
    joint_goal_accuracy,
    multi_domain_run,
    recall_at_1,
)
from .encoder import EncoderConfig, EncoderModel
from .gradcheck import GROUPS, run_gradcheck
from .objectives import DUAL_ENCODER_DOT, LR_GRID, TrainSchedule, specialize
from .terms import DomainTermSet, extract_terms
from .tokenization import build_vocab
from .validation import ensure

ENV_DATA_ROOT = "TODADAPT_DATA_ROOT"


# -- plumbing


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_input(path) -> str:
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(p.rglob("*")):
            if f.is_file():
                h.update(f.name.encode())
                h.update(bytes.fromhex(_sha256_file(f)))
        return h.hexdigest()
    return _sha256_file(p)


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


class RunContext:
    """Content-addressed run directory with a single-writer lock."""

    def __init__(self, root, name: str, config: dict):
        self.config = config
        self.digest = config_digest(config)
        self.dir = Path(root) / f"{name}-{self.digest}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = self.dir / ".lock"
        self.inputs: dict[str, str] = {}
        try:
            self._fh = open(self._lock, "x")
        except FileExistsError:
            raise RuntimeError(
                f"run directory {self.dir} is locked by another writer "
                f"(remove {self._lock} if that run is dead)"
            )

    def record_input(self, path) -> None:
        if path is not None:
            self.inputs[str(path)] = _digest_input(path)

    def artifact(self, default_name: str, out=None) -> Path:
        return Path(out) if out else self.dir / default_name

    def finish(self, seed=None) -> None:
        _write_json(
            self.dir / "provenance.json",
            {
                "config": self.config,
                "config_digest": self.digest,
                "seed": seed,
                "inputs": self.inputs,
                "versions": {
                    "python": ".".join(map(str, sys.version_info[:3])),
                    "numpy": np.__version__,
                    "todadapt": __version__,
                },
            },
        )

    def close(self) -> None:
        self._fh.close()
        self._lock.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _config_of(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if hasattr(args, k)}


def _load_terms(path) -> DomainTermSet:
    with open(path, encoding="utf-8") as fh:
        return DomainTermSet.from_obj(json.load(fh))


def _schedule_from(args, lr_grid_default=None) -> TrainSchedule:
    grid = lr_grid_default if getattr(args, "lr_grid", False) else None
    return TrainSchedule(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        lr_grid=grid,
        patience=args.patience,
        dev_fraction=getattr(args, "dev_fraction", 0.05),
        seed=args.seed,
    )


def _save_head(head, directory, kind: str) -> None:
    config: dict = {}
    if isinstance(head, DSTHead):
        config = {
            "hidden": head.hidden,
            "ontology": {f"{d}::{s}": list(v) for (d, s), v in sorted(head.ontology.values.items())},
        }
    elif isinstance(head, ScoringHead):
        config = {"mode": head.mode}
    if head.named_parameters():
        save_container(directory, kind=kind, config=config, params=head.named_parameters())
    elif config:
        _write_json(Path(directory) / "manifest.json", {"kind": kind, "config": config, "params": []})


def _load_dst_head(directory) -> DSTHead:
    manifest, params = load_container(directory)
    ensure(manifest["kind"] == "dst-head", f"{directory}: expected a dst-head checkpoint")
    values = {
        tuple(key.split("::", 1)): tuple(vals)
        for key, vals in manifest["config"]["ontology"].items()
    }
    head = DSTHead(Ontology(values), manifest["config"]["hidden"])
    for name, p in params.items():
        head.params[name].data = p.data
    return head


def _load_scoring_head(directory, hidden: int) -> ScoringHead:
    path = Path(directory) / "manifest.json"
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    ensure(manifest["kind"] == "scoring-head", f"{directory}: expected a scoring-head checkpoint")
    head = ScoringHead(manifest["config"]["mode"], hidden=hidden)
    if head.named_parameters():
        _, params = load_container(directory)
        for name, p in params.items():
            head.params[name].data = p.data
    return head


def _load_splits(args, ontology=None) -> dict:
    if args.train and args.dev and args.test:
        return {
            "train": load_dialogs(args.train, ontology),
            "dev": load_dialogs(args.dev, ontology),
            "test": load_dialogs(args.test, ontology),
        }
    ensure(args.data is not None, "provide either --train/--dev/--test or --data")
    dialogs = load_dialogs(args.data, ontology)
    ensure(len(dialogs) >= 3, "need at least three dialogs to split")
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(len(dialogs))
    n_dev = max(1, int(len(dialogs) * 0.1))
    n_test = max(1, int(len(dialogs) * 0.1))
    dev = [dialogs[int(i)] for i in perm[:n_dev]]
    test = [dialogs[int(i)] for i in perm[n_dev : n_dev + n_test]]
    train = [dialogs[int(i)] for i in perm[n_dev + n_test :]]
    return {"train": train, "dev": dev, "test": test}


def _parse_mapping(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        ensure("=" in item, f"expected name=path, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = path
    return out


# -- subcommand handlers


def _cmd_extract_terms(args) -> int:
    root = args.run_root
    config = _config_of(args, ("dialogs", "domain", "top_n", "exclude", "exclude_file",
                               "backfill", "include_multi_domain", "seed"))
    with RunContext(root, "extract-terms", config) as run:
        run.record_input(args.dialogs)
        dialogs = load_dialogs(args.dialogs)
        exclusion = list(args.exclude or [])
        if args.exclude_file:
            run.record_input(args.exclude_file)
            with open(args.exclude_file, encoding="utf-8") as fh:
                exclusion.extend(line.strip() for line in fh if line.strip())
        term_set = extract_terms(
            dialogs,
            domain=args.domain,
            top_n=args.top_n,
            exclusion=exclusion,
            backfill=args.backfill,
            single_domain_only=not args.include_multi_domain,
        )
        artifact = run.artifact("terms.json", args.out)
        _write_json(artifact, term_set.to_obj())
        for warning in term_set.warnings:
            print(f"warning: {warning}", file=sys.stderr)
        run.finish(seed=args.seed)
        print(f"{len(term_set.terms)} terms -> {artifact}")
    return 0


def _cmd_build_corpus(args) -> int:
    # --in is mode-agnostic shorthand for --lines (cc) / --threads (reddit)
    if getattr(args, "infile", None):
        if args.mode == "cc" and not args.lines:
            args.lines = args.infile
        if args.mode == "reddit" and not args.threads:
            args.threads = args.infile
    config = _config_of(args, ("mode", "lines", "threads", "terms", "target", "domain", "seed"))
    with RunContext(args.run_root, f"build-corpus-{args.mode}", config) as run:
        run.record_input(args.terms)
        term_set = _load_terms(args.terms)
        report = CleaningReport()
        if args.mode == "cc":
            ensure(args.lines is not None, "cc mode needs --lines or --in")
            run.record_input(args.lines)
            with open(args.lines, encoding="utf-8") as fh:
                kept = list(build_flat_corpus(fh, term_set, args.target, report))
            artifact = run.artifact("corpus.jsonl", args.out)
            save_corpus_lines(artifact, kept)
            if len(kept) < args.target:
                print(
                    f"warning: stream exhausted at {len(kept)} of {args.target} lines",
                    file=sys.stderr,
                )
            summary = {"mode": "cc", "lines": len(kept), "cleaning": report.to_obj()}
        else:
            ensure(args.threads is not None, "reddit mode needs --threads or --in")
            run.record_input(args.threads)
            threads, orphans = load_thread_dump(args.threads)
            triples, dropped = build_thread_triples(
                threads, term_set, domain=args.domain, rng_seed=args.seed, report=report
            )
            artifact = run.artifact("triples.jsonl", args.out)
            save_triples(artifact, triples)
            summary = {
                "mode": "reddit",
                "triples": len(triples),
                "pairs_dropped_no_false_candidate": dropped,
                "orphan_comments": orphans,
                "cleaning": report.to_obj(),
            }
        _write_json(run.dir / "build_report.json", summary)
        run.finish(seed=args.seed)
        print(f"{summary.get('lines', summary.get('triples'))} records -> {artifact}")
    return 0


def _objective_key(name: str) -> str:
    return name.replace("-", "_")


def _cmd_pretrain(args) -> int:
    config = _config_of(args, (
        "objective", "corpus", "base", "layers", "hidden", "heads", "ffn", "max_len",
        "dropout", "min_freq", "use_adapters", "bottleneck", "adapter_activation",
        "epochs", "batch", "lr", "lr_grid", "patience", "dev_fraction", "seed",
        "scoring", "domain",
    ))
    with RunContext(args.run_root, "pretrain", config) as run:
        run.record_input(args.corpus)
        objective = _objective_key(args.objective)
        if objective == "mlm":
            if args.corpus.endswith(".txt"):
                with open(args.corpus, encoding="utf-8") as fh:
                    corpus = [line.rstrip("\n") for line in fh if line.strip()]
            else:
                corpus = load_corpus_lines(args.corpus)
            texts = [c.text if hasattr(c, "text") else c for c in corpus]
        else:
            corpus = load_triples(args.corpus)
            texts = [t for tr in corpus for t in (tr.context, tr.response, tr.false_response)]

        if args.base:
            run.record_input(args.base)
            model = load_encoder(args.base)
        else:
            vocab = build_vocab(texts, min_frequency=args.min_freq)
            cfg = EncoderConfig(
                layers=args.layers,
                hidden=args.hidden,
                heads=args.heads,
                ffn=args.ffn,
                max_len=args.max_len,
                vocab_size=len(vocab),
                dropout=args.dropout,
            )
            model = EncoderModel.init(cfg, vocab, seed=args.seed)

        bank = None
        if args.use_adapters:
            m = args.bottleneck or max(1, model.config.hidden // 16)
            bank = init_adapter_bank(
                n_layers=model.config.layers,
                hidden=model.config.hidden,
                bottleneck=m,
                seed=args.seed,
                domain=args.domain or "",
                activation=args.adapter_activation,
                dtype=model.config.np_dtype,
                provenance={"objective": objective, "corpus": str(args.corpus), "seed": args.seed},
            )
            model = inject(model, [bank])
            freeze_base(model)

        schedule = _schedule_from(args, lr_grid_default=LR_GRID)
        result = specialize(model, objective, corpus, schedule, scoring=args.scoring)

        out_dir = run.artifact("checkpoint", args.out)
        provenance = {
            "objective": objective,
            "corpus": str(args.corpus),
            "config_digest": run.digest,
            "best_lr": result.best_lr,
            "best_metric": result.best_metric,
            "metric_name": result.metric_name,
        }
        save_encoder(result.model, out_dir, seed=args.seed, provenance=provenance)
        if bank is not None:
            save_adapter_bank(bank, Path(out_dir) / "adapter", seed=args.seed)
        if objective == "mlm":
            _save_head(result.head, Path(out_dir) / "head", "mlm-head")
        else:
            _save_head(result.head, Path(out_dir) / "head", "scoring-head")
        _write_json(run.dir / "log.json", {"runs": result.log,
                                           "diverged_rates": list(result.diverged_rates)})
        run.finish(seed=args.seed)
        print(
            f"{objective} best {result.metric_name}={result.best_metric:.6f} "
            f"at lr={result.best_lr:g} -> {out_dir}"
        )
    return 0


def _compose_model(args, model):
    banks = []
    if args.adapters:
        for path in args.adapters.split(","):
            banks.append(load_adapter_bank(path.strip()))
        fusion = None
        if args.compose == "fuse":
            fusion = FusionWeights(model.config.layers, len(banks), dtype=model.config.np_dtype)
        mode = args.compose if len(banks) > 1 else "single"
        model = inject(model, banks, compose=mode, fusion=fusion)
        freeze_base(model)
    return model, banks


def _cmd_finetune(args) -> int:
    config = _config_of(args, (
        "task", "ckpt", "adapters", "compose", "data", "train", "dev", "test",
        "epochs", "batch", "lr", "patience", "pool_size", "train_negatives",
        "scoring", "train_head_only", "seed",
    ))
    with RunContext(args.run_root, "finetune", config) as run:
        for path in (args.ckpt, args.data, args.train, args.dev, args.test):
            run.record_input(path)
        model = load_encoder(args.ckpt)
        model, _banks = _compose_model(args, model)
        splits = _load_splits(args)
        ontology = None
        if args.task == "dst":
            ontology = ontology_from_dialogs(
                splits["train"] + splits["dev"] + splits["test"]
            )
        batch = args.batch if args.batch else (6 if args.task == "dst" else 24)
        schedule = TrainSchedule(
            epochs=args.epochs, batch_size=batch, lr=args.lr,
            patience=args.patience, seed=args.seed,
        )
        result = finetune(
            model,
            args.task,
            splits,
            schedule=schedule,
            ontology=ontology,
            scoring=args.scoring,
            pool_size=args.pool_size,
            train_negatives=args.train_negatives,
            train_head_only=args.train_head_only,
        )
        out_dir = run.artifact("checkpoint", args.out)
        save_encoder(result.model, out_dir, seed=args.seed,
                     provenance={"task": args.task, "config_digest": run.digest})
        kind = "dst-head" if args.task == "dst" else "scoring-head"
        _save_head(result.head, Path(out_dir) / "head", kind)
        _write_json(run.dir / "report.json", result.report.to_obj())
        _write_json(run.dir / "log.json", result.log)
        run.finish(seed=args.seed)
        print(f"{args.task} test {result.report.metric}={result.report.value:.4f} -> {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _config_of(args, ("task", "ckpt", "head", "adapters", "compose",
                               "data", "pool_size", "seed"))
    with RunContext(args.run_root, "evaluate", config) as run:
        for path in (args.ckpt, args.head, args.data):
            run.record_input(path)
        model = load_encoder(args.ckpt)
        model, _banks = _compose_model(args, model)
        dialogs = load_dialogs(args.data)
        if args.task == "dst":
            ensure(args.head is not None, "dst evaluation needs --head")
            head = _load_dst_head(args.head)
            items = dialogs_to_dst_items(dialogs)
            predictions = dst_forward(
                model, head, [it.history for it in items], head.ontology
            )
            value = joint_goal_accuracy(predictions, [it.gold for it in items], head.ontology)
            metric, n_items = "jga", len(items)
        else:
            head = (
                _load_scoring_head(args.head, model.config.hidden)
                if args.head
                else ScoringHead(DUAL_ENCODER_DOT, hidden=model.config.hidden)
            )
            items = dialogs_to_rr_pairs(dialogs)
            value, _ranks = recall_at_1(
                model, head, items, pool_size=args.pool_size, seed=args.seed
            )
            metric, n_items = f"r{args.pool_size}@1", len(items)
        domains = tuple(sorted({d for dlg in dialogs for d in dlg.domains}))
        report = EvalReport(
            task=args.task, domains=domains, metric=metric, value=value,
            n_items=n_items, seed=args.seed, config_digest=run.digest,
        )
        artifact = run.artifact("report.json", args.out)
        _write_json(artifact, report.to_obj())
        run.finish(seed=args.seed)
        print(f"{args.task} {metric}={value:.4f} over {n_items} items -> {artifact}")
    return 0


def _cmd_few_shot(args) -> int:
    config = _config_of(args, (
        "task", "ckpt", "adapters", "compose", "data", "train", "dev", "test",
        "fractions", "epochs", "batch", "lr", "patience", "pool_size",
        "train_negatives", "seed",
    ))
    with RunContext(args.run_root, "few-shot", config) as run:
        for path in (args.ckpt, args.data, args.train, args.dev, args.test):
            run.record_input(path)
        model = load_encoder(args.ckpt)
        model, _banks = _compose_model(args, model)
        splits = _load_splits(args)
        fractions = tuple(float(f) / 100.0 for f in args.fractions.split(","))
        ontology = None
        if args.task == "dst":
            ontology = ontology_from_dialogs(
                splits["train"] + splits["dev"] + splits["test"]
            )
        batch = args.batch if args.batch else (6 if args.task == "dst" else 24)
        schedule = TrainSchedule(
            epochs=args.epochs, batch_size=batch, lr=args.lr,
            patience=args.patience, seed=args.seed,
        )
        reports = few_shot_curve(
            model, args.task, splits,
            fractions=fractions, schedule=schedule, seed=args.seed,
            ontology=ontology, pool_size=args.pool_size,
            train_negatives=args.train_negatives,
        )
        artifact = run.artifact("reports.json", args.out)
        _write_json(artifact, [r.to_obj() for r in reports])
        tsv_lines = ["fraction\tmetric\tvalue\tn_items"]
        for r in reports:
            tsv_lines.append(f"{r.fraction:g}\t{r.metric}\t{r.value:.6f}\t{r.n_items}")
        (run.dir / "curve.tsv").write_text("\n".join(tsv_lines) + "\n", encoding="utf-8")
        run.finish(seed=args.seed)
        for r in reports:
            print(f"fraction {r.fraction:g}: {r.metric}={r.value:.4f}")
    return 0


def _cmd_cross_domain(args) -> int:
    specialized_paths = _parse_mapping(args.specialized)
    split_paths = _parse_mapping(args.splits)
    config = _config_of(args, ("task", "baseline", "epochs", "batch", "lr", "patience",
                               "pool_size", "train_negatives", "seed"))
    config["specialized"] = specialized_paths
    config["splits"] = split_paths
    with RunContext(args.run_root, "cross-domain", config) as run:
        ensure(len(specialized_paths) > 0, "need at least one --specialized domain=ckpt")
        ensure(len(split_paths) > 0, "need at least one --splits domain=train:dev:test")
        run.record_input(args.baseline)
        specialized = {}
        for domain, path in sorted(specialized_paths.items()):
            run.record_input(path)
            specialized[domain] = load_encoder(path)
        splits_by_domain = {}
        ontology = None
        all_dialogs = []
        for domain, spec in sorted(split_paths.items()):
            parts = spec.split(":")
            ensure(len(parts) == 3, f"--splits {domain} needs train:dev:test paths")
            splits_by_domain[domain] = {
                "train": load_dialogs(parts[0]),
                "dev": load_dialogs(parts[1]),
                "test": load_dialogs(parts[2]),
            }
            for piece in splits_by_domain[domain].values():
                all_dialogs.extend(piece)
        if args.task == "dst":
            ontology = ontology_from_dialogs(all_dialogs)
        baseline = load_encoder(args.baseline)
        batch = args.batch if args.batch else (6 if args.task == "dst" else 24)
        schedule = TrainSchedule(
            epochs=args.epochs, batch_size=batch, lr=args.lr,
            patience=args.patience, seed=args.seed,
        )
        matrix = cross_domain_matrix(
            specialized, baseline, args.task, splits_by_domain,
            schedule=schedule, ontology=ontology,
            pool_size=args.pool_size, train_negatives=args.train_negatives,
        )
        artifact = run.artifact("matrix.json", args.out)
        _write_json(artifact, matrix.to_obj())
        tsv = ["source\ttarget\tdelta\tspecialized\tbaseline"]
        for s in matrix.sources:
            for t in matrix.targets:
                tsv.append(
                    f"{s}\t{t}\t{matrix.delta[s][t]:.6f}"
                    f"\t{matrix.specialized[s][t]:.6f}\t{matrix.baseline[t]:.6f}"
                )
        (run.dir / "matrix.tsv").write_text("\n".join(tsv) + "\n", encoding="utf-8")
        run.finish(seed=args.seed)
        for line in tsv[1:]:
            print(line)
    return 0


def _cmd_multi_domain(args) -> int:
    bank_paths = _parse_mapping(args.banks)
    triple_paths = _parse_mapping(args.triples)
    config = _config_of(args, ("domains", "variant", "task", "ckpt", "train", "dev", "test",
                               "data", "epochs", "batch", "lr", "patience", "pool_size",
                               "train_negatives", "seed"))
    config["banks"] = bank_paths
    config["triples"] = triple_paths
    with RunContext(args.run_root, "multi-domain", config) as run:
        run.record_input(args.ckpt)
        domains = tuple(d.strip() for d in args.domains.split(","))
        model = load_encoder(args.ckpt)
        splits = _load_splits(args)
        banks = None
        triples_by_domain = None
        if args.variant in ("stack", "fuse"):
            ensure(
                all(d in bank_paths for d in domains),
                f"missing banks for: {', '.join(d for d in domains if d not in bank_paths)}",
            )
            banks = []
            for d in domains:
                run.record_input(bank_paths[d])
                banks.append(load_adapter_bank(bank_paths[d]))
        else:
            ensure(
                all(d in triple_paths for d in domains),
                f"missing triples for: {', '.join(d for d in domains if d not in triple_paths)}",
            )
            triples_by_domain = {}
            for d in domains:
                run.record_input(triple_paths[d])
                triples_by_domain[d] = load_triples(triple_paths[d])
        ontology = None
        if args.task == "dst":
            ontology = ontology_from_dialogs(
                splits["train"] + splits["dev"] + splits["test"]
            )
        batch = args.batch if args.batch else (6 if args.task == "dst" else 24)
        finetune_schedule = TrainSchedule(
            epochs=args.epochs, batch_size=batch, lr=args.lr,
            patience=args.patience, seed=args.seed,
        )
        specialize_schedule = TrainSchedule(
            epochs=args.spec_epochs, batch_size=args.spec_batch, lr=args.spec_lr,
            patience=args.patience, seed=args.seed,
        )
        result = multi_domain_run(
            model, domains, args.variant, args.task, splits,
            banks=banks, triples_by_domain=triples_by_domain,
            specialize_schedule=specialize_schedule,
            finetune_schedule=finetune_schedule,
            ontology=ontology, pool_size=args.pool_size,
            train_negatives=args.train_negatives,
        )
        artifact = run.artifact("report.json", args.out)
        _write_json(artifact, result.report.to_obj())
        run.finish(seed=args.seed)
        print(
            f"{args.variant} on {'+'.join(domains)}: "
            f"{result.report.metric}={result.report.value:.4f} -> {artifact}"
        )
    return 0


def _cmd_grad_check(args) -> int:
    config = _config_of(args, ("groups", "tolerance", "seed"))
    with RunContext(args.run_root, "grad-check", config) as run:
        groups = tuple(g.strip() for g in args.groups.split(",")) if args.groups else GROUPS
        reports = run_gradcheck(groups, tolerance=args.tolerance, seed=args.seed)
        artifact = run.artifact("gradcheck.json", args.out)
        _write_json(artifact, [r.to_obj() for r in reports])
        run.finish(seed=args.seed)
        failures = []
        for r in reports:
            status = "PASS" if r.passed else "FAIL"
            print(f"{r.group}: {status} (max relative error {r.max_rel_err:.3e}, "
                  f"{len(r.rows)} tensors)")
            if not r.passed:
                failures.append(r.group)
        if failures:
            print(
                json.dumps({"error": "GradCheckFailure", "groups": failures}),
                file=sys.stderr,
            )
            return 1
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    candidates = ("report.json", "reports.json", "matrix.json", "gradcheck.json")
    found = None
    for name in candidates:
        if (run_dir / name).exists():
            found = run_dir / name
            break
    ensure(found is not None, f"no report artifact in {run_dir} (looked for {candidates})")
    with open(found, encoding="utf-8") as fh:
        payload = json.load(fh)
    if args.format == "json":
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0
    rows = payload if isinstance(payload, list) else [payload]
    if found.name == "matrix.json":
        print("source\ttarget\tdelta\tspecialized\tbaseline")
        for s in payload["sources"]:
            for t in payload["targets"]:
                print(
                    f"{s}\t{t}\t{payload['delta'][s][t]:.6f}"
                    f"\t{payload['specialized'][s][t]:.6f}\t{payload['baseline'][t]:.6f}"
                )
        return 0
    columns = sorted({k for row in rows for k in row if not isinstance(row[k], (dict, list))})
    print("\t".join(columns))
    for row in rows:
        print("\t".join(str(row.get(c, "")) for c in columns))
    return 0


# -- parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="todadapt",
        description="Domain specialization pipeline for task-oriented dialog encoders",
    )
    parser.add_argument("--config", help="JSON config file; explicit flags override it")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def new(name, handler, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(handler=handler)
        p.add_argument("--config", help="JSON config file; explicit flags override it")
        p.add_argument("--run-root", default=os.environ.get(ENV_DATA_ROOT, "runs"),
                       help="directory for run outputs (env TODADAPT_DATA_ROOT)")
        p.add_argument("--out", help="primary artifact path (default: inside the run directory)")
        p.add_argument("--seed", type=int, default=13)
        subparsers[name] = p
        return p

    p = new("extract-terms", _cmd_extract_terms, help="mine domain terms from dialogs")
    p.add_argument("--dialogs", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--top-n", type=int, default=80)
    p.add_argument("--exclude", action="append", help="term to exclude (repeatable)")
    p.add_argument("--exclude-file", help="file with one excluded term per line")
    p.add_argument("--backfill", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--include-multi-domain", action="store_true",
                   help="mine from all dialogs, not only single-domain ones")

    p = new("build-corpus", _cmd_build_corpus, help="build flat or triple corpora")
    p.add_argument("mode", choices=("cc", "reddit"))
    p.add_argument("--terms", required=True)
    p.add_argument("--in", dest="infile",
                   help="input dump for either mode (same as --lines / --threads)")
    p.add_argument("--lines", help="flat text dump, one line per sentence (cc)")
    p.add_argument("--threads", help="comment dump jsonl (reddit)")
    p.add_argument("--target", type=int, default=100000, help="cc: lines to keep")
    p.add_argument("--domain", default="", help="reddit: domain label for triples")

    p = new("pretrain", _cmd_pretrain, help="specialize an encoder on a domain corpus")
    p.add_argument("--objective", required=True, choices=("mlm", "rs-class", "rs-contrast"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--base", help="encoder checkpoint to continue from")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=256)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--use-adapters", action="store_true")
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--adapter-activation", default="relu", choices=("relu", "gelu"))
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--lr-grid", action="store_true",
                   help="grid-search {1e-4, 5e-5, 1e-5, 1e-6} instead of --lr")
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--dev-fraction", type=float, default=0.05)
    p.add_argument("--scoring", default=DUAL_ENCODER_DOT,
                   choices=(DUAL_ENCODER_DOT, "linear_on_cls"))
    p.add_argument("--domain", default="", help="domain label for adapter provenance")

    def _shared_task_flags(p, with_fractions=False):
        p.add_argument("--ckpt", required=True, help="base encoder checkpoint")
        p.add_argument("--adapters", help="comma-separated adapter bank checkpoints")
        p.add_argument("--compose", default="stack", choices=("stack", "fuse"))
        p.add_argument("--data", help="single dialog file, split 80/10/10 by seed")
        p.add_argument("--train")
        p.add_argument("--dev")
        p.add_argument("--test")
        p.add_argument("--epochs", type=int, default=300)
        p.add_argument("--batch", type=int, help="default 6 for dst, 24 for rr")
        p.add_argument("--lr", type=float, default=5e-5)
        p.add_argument("--patience", type=int, default=10)
        p.add_argument("--pool-size", type=int, default=DEFAULT_POOL_SIZE)
        p.add_argument("--train-negatives", type=int, default=7)
        if with_fractions:
            p.add_argument("--fractions", default="5,10,20,30,50,70,100",
                           help="comma-separated training percentages")

    p = new("finetune", _cmd_finetune, help="fine-tune on a downstream dialog task")
    p.add_argument("--task", required=True, choices=("dst", "rr"))
    _shared_task_flags(p)
    p.add_argument("--scoring", default=DUAL_ENCODER_DOT,
                   choices=(DUAL_ENCODER_DOT, "linear_on_cls"))
    p.add_argument("--train-head-only", action="store_true")

    p = new("evaluate", _cmd_evaluate, help="evaluate a checkpoint without training")
    p.add_argument("--task", required=True, choices=("dst", "rr"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--head", help="head checkpoint (required for dst)")
    p.add_argument("--adapters", help="comma-separated adapter bank checkpoints")
    p.add_argument("--compose", default="stack", choices=("stack", "fuse"))
    p.add_argument("--data", required=True)
    p.add_argument("--pool-size", type=int, default=DEFAULT_POOL_SIZE)

    p = new("few-shot", _cmd_few_shot, help="fine-tune on nested training fractions")
    p.add_argument("--task", required=True, choices=("dst", "rr"))
    _shared_task_flags(p, with_fractions=True)

    p = new("cross-domain", _cmd_cross_domain, help="source-by-target transfer deltas")
    p.add_argument("--task", required=True, choices=("dst", "rr"))
    p.add_argument("--baseline", required=True, help="unspecialized encoder checkpoint")
    p.add_argument("--specialized", action="append",
                   help="domain=ckpt (repeatable)")
    p.add_argument("--splits", action="append",
                   help="domain=train.jsonl:dev.jsonl:test.jsonl (repeatable)")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--pool-size", type=int, default=DEFAULT_POOL_SIZE)
    p.add_argument("--train-negatives", type=int, default=7)

    p = new("multi-domain", _cmd_multi_domain, help="composed specialization for domain sets")
    p.add_argument("--task", required=True, choices=("dst", "rr"))
    p.add_argument("--domains", required=True, help="comma-separated domain set")
    p.add_argument("--variant", required=True, choices=("full_ft", "stack", "fuse"))
    p.add_argument("--banks", action="append", help="domain=bank-ckpt (stack/fuse)")
    p.add_argument("--triples", action="append", help="domain=triples.jsonl (full_ft)")
    _shared_task_flags(p)
    p.add_argument("--spec-epochs", type=int, default=30)
    p.add_argument("--spec-batch", type=int, default=32)
    p.add_argument("--spec-lr", type=float, default=5e-5)

    p = new("grad-check", _cmd_grad_check, help="finite-difference gradient verification")
    p.add_argument("--groups", help=f"comma-separated subset of {', '.join(GROUPS)}")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = new("report", _cmd_report, help="print a run's report as json or tsv")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--format", default="json", choices=("json", "tsv"))

    return parser, subparsers


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _rest = pre.parse_known_args(argv)
    parser, subparsers = build_parser()
    try:
        if known.config:
            with open(known.config, encoding="utf-8") as fh:
                overrides = json.load(fh)
            ensure(isinstance(overrides, dict), "--config must hold a JSON object")
            for sp in subparsers.values():
                sp.set_defaults(**overrides)
        args = parser.parse_args(argv)
        return args.handler(args)
    except Exception as exc:  # structured error contract on stderr
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
