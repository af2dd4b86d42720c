"""End-to-end pipeline and experiment orchestration.

Every run flows from a single JSON config: split the task corpus, train the
victim, autolabel the candidate pool with the final model, build the
projected gradient store, select with every configured method, retrain each
selection from the base checkpoint, and score recovery. Stage artifacts
(checkpoints, stores, selections) are content-addressed under
``<out_dir>/cache`` so experiment grids reuse shared upstream work.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .corpus import (
    Document,
    DocumentSet,
    Vocab,
    build_vocab,
    encode_documents,
    load_jsonl,
    mix_leakage,
    split,
)
from .gradstore import GradientStore, Projection, build_store, direction
from .metrics import MetricsReport, embed, ot_distance, retrain_and_eval, vocab_containment
from .model import (
    TASK_CLASSIFICATION,
    TASK_NEXT_TOKEN,
    ModelConfig,
    ModelParams,
    OptimizerConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .selector import (
    ALL_METHODS,
    SelectionResult,
    autolabel,
    load_selection,
    select_baseline,
    select_batch,
    select_greedy,
    synth_checkpoints,
    write_selection,
)

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = (
    "pipeline",
    "scaling",
    "leakage",
    "crossseed",
    "projection_dim",
    "optimizer",
    "metric_ablation",
)

_METRIC_FIELDS = (
    "accuracy",
    "mean_loss",
    "perplexity",
    "vocab_containment",
    "ot_distance",
    "leaked_selected",
)


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, original: Exception):
        super().__init__(f"[{stage}] {original}")
        self.stage = stage
        self.original = original


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    corpus: str
    out_dir: str
    seeds: tuple[int, ...]
    model: dict
    victim_opt: OptimizerConfig
    retrain_opt: OptimizerConfig
    selection_size: int
    seed_corpus: str | None = None
    num_checkpoints: int = 1
    projection_dim: int = 4096
    scoring_rule: str = "cosine_sum"
    batch_window: int = 1000
    seq_len: int = 64
    vocab_max_size: int = 8192
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    validation_fraction: float = 0.1
    pool_size: int | None = None
    methods: tuple[str, ...] | None = None
    chunk_rows: int = 1024
    ot_max_points: int = 512
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.experiment!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.selection_size < 1:
            raise ValueError("selection_size must be positive")
        if self.num_checkpoints < 1:
            raise ValueError("num_checkpoints must be positive")

    @property
    def task(self) -> str:
        return self.model.get("task", TASK_CLASSIFICATION)

    def method_list(self) -> tuple[str, ...]:
        if self.methods is not None:
            return self.methods
        if self.task == TASK_NEXT_TOKEN:
            return ("select", "select_batch", "random", "topk", "pmin", "pmax")
        return ALL_METHODS

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "corpus": self.corpus,
            "seed_corpus": self.seed_corpus,
            "out_dir": self.out_dir,
            "seeds": list(self.seeds),
            "model": dict(self.model),
            "victim_opt": self.victim_opt.to_dict(),
            "retrain_opt": self.retrain_opt.to_dict(),
            "selection_size": self.selection_size,
            "num_checkpoints": self.num_checkpoints,
            "projection_dim": self.projection_dim,
            "scoring_rule": self.scoring_rule,
            "batch_window": self.batch_window,
            "seq_len": self.seq_len,
            "vocab_max_size": self.vocab_max_size,
            "fractions": list(self.fractions),
            "validation_fraction": self.validation_fraction,
            "pool_size": self.pool_size,
            "methods": None if self.methods is None else list(self.methods),
            "chunk_rows": self.chunk_rows,
            "ot_max_points": self.ot_max_points,
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, data: dict, check_paths: bool = True) -> "ExperimentConfig":
        known = dict(data)
        config = cls(
            experiment=known["experiment"],
            corpus=known["corpus"],
            out_dir=known.get("out_dir", "runs"),
            seeds=tuple(int(s) for s in known["seeds"]),
            model=dict(known.get("model", {})),
            victim_opt=OptimizerConfig.from_dict(known.get("victim_opt", {})),
            retrain_opt=OptimizerConfig.from_dict(known.get("retrain_opt", {})),
            selection_size=int(known["selection_size"]),
            seed_corpus=known.get("seed_corpus"),
            num_checkpoints=int(known.get("num_checkpoints", 1)),
            projection_dim=int(known.get("projection_dim", 4096)),
            scoring_rule=known.get("scoring_rule", "cosine_sum"),
            batch_window=int(known.get("batch_window", 1000)),
            seq_len=int(known.get("seq_len", 64)),
            vocab_max_size=int(known.get("vocab_max_size", 8192)),
            fractions=tuple(known.get("fractions", (0.6, 0.2, 0.2))),
            validation_fraction=float(known.get("validation_fraction", 0.1)),
            pool_size=known.get("pool_size"),
            methods=None
            if known.get("methods") is None
            else tuple(known["methods"]),
            chunk_rows=int(known.get("chunk_rows", 1024)),
            ot_max_points=int(known.get("ot_max_points", 512)),
            params=dict(known.get("params", {})),
        )
        if check_paths:
            config.check_paths()
        return config

    def check_paths(self) -> None:
        missing = [p for p in self._referenced_paths() if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"config references missing paths: {missing}")

    def _referenced_paths(self) -> list[str]:
        paths = [self.corpus]
        if self.seed_corpus:
            paths.append(self.seed_corpus)
        for key in ("seed_corpora", "task_corpora"):
            paths.extend((self.params.get(key) or {}).values())
        return paths

    @classmethod
    def from_json(cls, path: str | Path, check_paths: bool = True) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()), check_paths)

    def config_hash(self) -> str:
        return _digest(self.to_dict())


@dataclass
class ReportBundle:
    rows: list[dict]
    aggregates: list[dict]
    provenance: dict

    def to_json(self, path: str | Path) -> None:
        payload = {
            "rows": self.rows,
            "aggregates": self.aggregates,
            "provenance": self.provenance,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, self.rows)

    @classmethod
    def from_json(cls, path: str | Path) -> "ReportBundle":
        data = json.loads(Path(path).read_text())
        return cls(data["rows"], data["aggregates"], data["provenance"])


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def aggregate_rows(rows: Sequence[dict]) -> list[dict]:
    """Mean of numeric metric fields over seeds, grouped by all other keys."""
    groups: dict[tuple, list[dict]] = {}
    order: list[tuple] = []
    for row in rows:
        key = tuple(
            (k, v) for k, v in row.items() if k != "seed" and k not in _METRIC_FIELDS
        )
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    out = []
    for key in order:
        members = groups[key]
        agg = dict(key)
        agg["num_seeds"] = len(members)
        for metric in _METRIC_FIELDS:
            values = [m[metric] for m in members if m.get(metric) is not None]
            if values:
                agg[metric] = float(np.mean(values))
        out.append(agg)
    return out


def _digest(obj: Any) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def _file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _docs_digest(docs: DocumentSet) -> str:
    digest = hashlib.sha256()
    for d in docs:
        digest.update(d.text.encode())
        digest.update(str(d.label).encode())
    return digest.hexdigest()[:16]


def carve_validation(
    docs: DocumentSet, fraction: float, seed: int
) -> tuple[DocumentSet, DocumentSet]:
    """Split off a validation slice; returns (rest, validation)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("validation fraction must be in (0, 1)")
    n = len(docs)
    n_val = max(1, int(round(fraction * n)))
    perm = np.random.default_rng(seed).permutation(n)
    return docs.subset(perm[n_val:]), docs.subset(perm[:n_val])


@dataclass
class RunContext:
    """Per-(config, seed) artifacts shared by every selection method."""

    config: ExperimentConfig
    run_seed: int
    vocab: Vocab
    train_docs: DocumentSet
    validation_docs: DocumentSet
    test_docs: DocumentSet
    seed_split: DocumentSet
    theta0: ModelParams
    theta_f: ModelParams
    victim_key: str


class Workspace:
    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.cache_dir = self.out_dir / "cache"
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.cache_dir / name


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def model_config_for(config: ExperimentConfig, vocab: Vocab) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab.size,
        embed_dim=int(config.model.get("embed_dim", 32)),
        num_classes=int(config.model.get("num_classes", 2)),
        hidden_layer=bool(config.model.get("hidden_layer", False)),
        task=config.task,
    )


def prepare_run(
    config: ExperimentConfig,
    run_seed: int,
    workspace: Workspace,
    corpus_docs: DocumentSet | None = None,
    corpus_path: str | None = None,
) -> RunContext:
    """Split, build vocab and train (or reuse) the victim for one seed."""
    corpus_path = corpus_path or config.corpus
    if corpus_docs is None:
        corpus_docs = _stage("load-corpus", load_jsonl, corpus_path)
    train_all, seed_split, test_docs = _stage(
        "split", split, corpus_docs, tuple(config.fractions), run_seed
    )
    train_docs, validation_docs = _stage(
        "split", carve_validation, train_all, config.validation_fraction, run_seed
    )
    vocab = _stage("vocab", build_vocab, train_docs, config.vocab_max_size, run_seed)
    model_cfg = model_config_for(config, vocab)
    victim_key = _digest(
        [
            "victim",
            _file_digest(corpus_path),
            list(config.fractions),
            config.validation_fraction,
            config.vocab_max_size,
            config.seq_len,
            model_cfg.to_dict(),
            config.victim_opt.to_dict(),
            run_seed,
        ]
    )
    theta0_path = workspace.path(f"victim-{victim_key}.theta0.ckpt")
    thetaf_path = workspace.path(f"victim-{victim_key}.thetaf.ckpt")
    if theta0_path.exists() and thetaf_path.exists():
        theta0 = load_checkpoint(theta0_path)
        theta_f = load_checkpoint(thetaf_path)
    else:
        theta0 = init_params(model_cfg, run_seed)
        theta_f, _ = _stage(
            "train-victim",
            train,
            theta0,
            train_docs,
            config.victim_opt,
            vocab,
            config.seq_len,
            validation_docs,
        )
        meta = {
            "optimizer": config.victim_opt.kind,
            "seed": config.victim_opt.seed,
            "epochs": config.victim_opt.epochs,
        }
        save_checkpoint(theta0, theta0_path, meta)
        save_checkpoint(theta_f, thetaf_path, meta)
    return RunContext(
        config=config,
        run_seed=run_seed,
        vocab=vocab,
        train_docs=train_docs,
        validation_docs=validation_docs,
        test_docs=test_docs,
        seed_split=seed_split,
        theta0=theta0,
        theta_f=theta_f,
        victim_key=victim_key,
    )


def build_candidate_pool(
    config: ExperimentConfig, ctx: RunContext
) -> DocumentSet:
    """Candidate documents, unlabeled, ids reassigned to pool positions."""
    if config.seed_corpus:
        docs = _stage("load-pool", load_jsonl, config.seed_corpus)
    else:
        docs = ctx.seed_split
    if config.pool_size is not None and config.pool_size < len(docs):
        rng = np.random.default_rng(ctx.run_seed + 10_000)
        keep = rng.choice(len(docs), size=config.pool_size, replace=False)
        docs = docs.subset(np.sort(keep))
    return docs.without_labels().reindexed()


@dataclass
class GradientArtifacts:
    store: GradientStore
    dirs: list[np.ndarray]
    pseudolabels: np.ndarray | None


def gradient_stage(
    config: ExperimentConfig,
    ctx: RunContext,
    pool: DocumentSet,
    workspace: Workspace,
    projection_dim: int | None = None,
) -> GradientArtifacts:
    """Autolabel the pool, build (or reuse) the store, compute directions.

    The directions handed to the selector are the projected last-layer diffs
    oriented from the final model toward each synthetic checkpoint
    (-(theta_f - theta_hat_j)): the loss gradient of training-consistent
    data points away from the final model, so this orientation ranks such
    data highest.
    """
    k = projection_dim or config.projection_dim
    batch = encode_documents(pool, ctx.vocab, config.seq_len)
    pseudolabels = _stage("autolabel", autolabel, batch, ctx.theta_f)
    schedule = _stage(
        "synth-checkpoints",
        synth_checkpoints,
        ctx.theta0,
        ctx.theta_f,
        config.num_checkpoints,
    )
    model_cfg = ctx.theta0.config
    proj = Projection(model_cfg.last_layer_dim, k, seed=ctx.run_seed)
    store_key = _digest(
        [
            "store",
            ctx.victim_key,
            _docs_digest(pool),
            config.num_checkpoints,
            k,
            proj.seed,
            config.chunk_rows,
            config.seq_len,
        ]
    )
    store_path = workspace.path(f"store-{store_key}.selg")
    if store_path.exists():
        store = GradientStore(store_path)
    else:
        store = _stage(
            "build-store",
            build_store,
            schedule.checkpoints,
            batch,
            pseudolabels,
            ctx.theta_f,
            proj,
            store_path,
            config.chunk_rows,
        )
    dirs = [
        -direction(ckpt, ctx.theta_f, proj) for ckpt in schedule.checkpoints
    ]
    return GradientArtifacts(store=store, dirs=dirs, pseudolabels=pseudolabels)


def run_selection(
    config: ExperimentConfig,
    ctx: RunContext,
    artifacts: GradientArtifacts,
    method: str,
    workspace: Workspace,
    num_select: int | None = None,
) -> SelectionResult:
    num_select = num_select or config.selection_size
    key = _digest(
        [
            "selection",
            artifacts.store.header,
            method,
            config.scoring_rule,
            num_select,
            config.batch_window,
            ctx.run_seed,
        ]
    )
    path = workspace.path(f"sel-{key}.json")
    if path.exists():
        return load_selection(path)
    if method == "select":
        result = select_greedy(
            artifacts.store, artifacts.dirs, num_select, config.scoring_rule
        )
    elif method == "select_batch":
        result = select_batch(
            artifacts.store,
            artifacts.dirs,
            num_select,
            min(config.batch_window, artifacts.store.num_examples),
        )
    else:
        result = select_baseline(
            artifacts.store, artifacts.dirs, num_select, method, seed=ctx.run_seed
        )
    write_selection(
        result, path, config.num_checkpoints, artifacts.store.k, [ctx.run_seed]
    )
    return result


def selected_documents(
    pool: DocumentSet,
    result: SelectionResult,
    pseudolabels: np.ndarray | None,
) -> DocumentSet:
    docs = pool.subset(result.indices)
    if pseudolabels is not None:
        docs = docs.with_labels(pseudolabels[list(result.indices)])
    return docs


def score_selection(
    config: ExperimentConfig,
    ctx: RunContext,
    selected: DocumentSet,
    reference: DocumentSet,
) -> MetricsReport:
    """Retrain on the selection and compare it to the reference set."""
    eval_metrics = _stage(
        "retrain",
        retrain_and_eval,
        ctx.theta0,
        selected,
        config.retrain_opt,
        ctx.test_docs,
        ctx.validation_docs,
        ctx.vocab,
        config.seq_len,
    )
    containment = _stage("metrics", vocab_containment, selected, reference)
    ot = _stage(
        "metrics",
        recovery_ot,
        selected,
        reference,
        ctx,
        config.ot_max_points,
    )
    return MetricsReport(eval_metrics, containment, ot)


def recovery_ot(
    selected: DocumentSet,
    reference: DocumentSet,
    ctx: RunContext,
    max_points: int,
):
    """Exact OT between equal-size subsamples of the two sets.

    Equal sizes keep the exact assignment path affordable at every scale the
    harness produces; the subsample is seeded by the run seed so repeated
    calls in one run are comparable.
    """
    n = min(len(selected), len(reference), max_points)
    rng = np.random.default_rng(ctx.run_seed + 77_000)
    sel = selected.subset(np.sort(rng.choice(len(selected), n, replace=False)))
    ref = reference.subset(np.sort(rng.choice(len(reference), n, replace=False)))
    ea = embed(sel, ctx.theta0, ctx.vocab, ctx.config.seq_len, source="selected")
    eb = embed(ref, ctx.theta0, ctx.vocab, ctx.config.seq_len, source="reference")
    return ot_distance(ea, eb, mode="auto")


def _method_row(
    config: ExperimentConfig,
    ctx: RunContext,
    method: str,
    report: MetricsReport,
    num_select: int,
) -> dict:
    return {
        "experiment": config.experiment,
        "method": method,
        "seed": ctx.run_seed,
        "M": num_select,
        "P": config.num_checkpoints,
        "k": config.projection_dim,
        "rule": config.scoring_rule if method == "select" else "",
        "accuracy": report.eval_metrics.accuracy,
        "mean_loss": report.eval_metrics.mean_loss,
        "perplexity": report.eval_metrics.perplexity,
        "vocab_containment": report.vocab_containment,
        "ot_distance": report.ot.distance,
    }


def _seed_rows(config: ExperimentConfig, run_seed: int) -> tuple[list[dict], dict]:
    """All method rows for one pipeline seed; returns (rows, checksums)."""
    workspace = Workspace(config.out_dir)
    ctx = prepare_run(config, run_seed, workspace)
    pool = build_candidate_pool(config, ctx)
    if config.selection_size > len(pool):
        raise StageError(
            "pool",
            ValueError(
                f"selection_size {config.selection_size} exceeds pool size {len(pool)}"
            ),
        )
    artifacts = gradient_stage(config, ctx, pool, workspace)
    rows = []
    for method in config.method_list():
        if method == "expert":
            selected = ctx.train_docs
            num_select = len(selected)
        else:
            result = run_selection(config, ctx, artifacts, method, workspace)
            selected = selected_documents(pool, result, artifacts.pseudolabels)
            num_select = len(result.indices)
        report = score_selection(config, ctx, selected, ctx.train_docs)
        rows.append(_method_row(config, ctx, method, report, num_select))
    checksums = {
        "theta0": ctx.theta0.fingerprint(),
        "theta_f": ctx.theta_f.fingerprint(),
    }
    return rows, checksums


def _seed_job(config_dict: dict, run_seed: int) -> tuple[int, list[dict], dict, str]:
    config = ExperimentConfig.from_dict(config_dict)
    try:
        rows, checksums = _seed_rows(config, run_seed)
        return run_seed, rows, checksums, ""
    except StageError as exc:
        return run_seed, [], {}, str(exc)


def _run_jobs(
    job_fn: Callable, jobs: list[tuple], parallel: int
) -> list:
    if parallel <= 1 or len(jobs) <= 1:
        return [job_fn(*args) for args in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        futures = [pool.submit(job_fn, *args) for args in jobs]
        return [f.result() for f in futures]


def _bundle(config: ExperimentConfig, rows: list[dict], checksums: dict, errors: list[str]) -> ReportBundle:
    return ReportBundle(
        rows=rows,
        aggregates=aggregate_rows(rows),
        provenance={
            "config_hash": config.config_hash(),
            "toolkit_version": __version__,
            "checkpoint_checksums": checksums,
            "errors": errors,
            "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
    )


def run_pipeline(config: ExperimentConfig, parallel: int = 1) -> ReportBundle:
    """Full per-seed pipeline over every configured method."""
    results = _run_jobs(
        _seed_job, [(config.to_dict(), s) for s in config.seeds], parallel
    )
    rows: list[dict] = []
    checksums: dict = {}
    errors: list[str] = []
    for run_seed, seed_rows, sums, error in results:
        if error:
            logger.error("seed %d failed: %s", run_seed, error)
            errors.append(f"seed {run_seed}: {error}")
            continue
        rows.extend(seed_rows)
        checksums[str(run_seed)] = sums
    rows.sort(key=lambda r: (config.method_list().index(r["method"]), r["seed"]))
    return _bundle(config, rows, checksums, errors)


def experiment_scaling(
    config: ExperimentConfig, m_list: Sequence[int] | None = None, parallel: int = 1
) -> ReportBundle:
    """Accuracy-vs-selection-size series on shared checkpoints and stores."""
    m_list = list(m_list or config.params.get("m_list") or [100, 500, 1000])
    rows: list[dict] = []
    checksums: dict = {}
    errors: list[str] = []
    workspace = Workspace(config.out_dir)
    for run_seed in config.seeds:
        try:
            ctx = prepare_run(config, run_seed, workspace)
            pool = build_candidate_pool(config, ctx)
            artifacts = gradient_stage(config, ctx, pool, workspace)
            for m in m_list:
                for method in config.method_list():
                    result = run_selection(
                        config, ctx, artifacts, method, workspace, num_select=m
                    )
                    selected = selected_documents(pool, result, artifacts.pseudolabels)
                    report = score_selection(config, ctx, selected, ctx.train_docs)
                    row = _method_row(config, ctx, method, report, m)
                    rows.append(row)
            checksums[str(run_seed)] = {
                "theta0": ctx.theta0.fingerprint(),
                "theta_f": ctx.theta_f.fingerprint(),
            }
        except StageError as exc:
            errors.append(f"seed {run_seed}: {exc}")
    return _bundle(config, rows, checksums, errors)


def experiment_leakage(
    config: ExperimentConfig,
    leak_fractions: Sequence[float] | None = None,
    parallel: int = 1,
) -> ReportBundle:
    """SELECT quality as a controlled fraction of the pool is true data."""
    fractions = list(
        leak_fractions or config.params.get("leak_fractions") or [0.1, 0.5, 0.9]
    )
    pool_size = int(config.params.get("leak_pool_size") or config.pool_size or 1000)
    rows: list[dict] = []
    checksums: dict = {}
    errors: list[str] = []
    workspace = Workspace(config.out_dir)
    for run_seed in config.seeds:
        try:
            ctx = prepare_run(config, run_seed, workspace)
            if config.seed_corpus:
                distractors = load_jsonl(config.seed_corpus)
            else:
                distractors = ctx.seed_split
            for frac in fractions:
                seed_pool = mix_leakage(
                    ctx.train_docs,
                    distractors,
                    frac,
                    pool_size,
                    seed=run_seed + int(frac * 1000),
                )
                pool = seed_pool.documents
                artifacts = gradient_stage(config, ctx, pool, workspace)
                result = run_selection(config, ctx, artifacts, "select", workspace)
                selected = selected_documents(pool, result, artifacts.pseudolabels)
                report = score_selection(config, ctx, selected, ctx.train_docs)
                row = _method_row(
                    config, ctx, "select", report, len(result.indices)
                )
                row["leak_fraction"] = frac
                row["leaked_selected"] = int(
                    seed_pool.leak_mask[list(result.indices)].sum()
                )
                rows.append(row)
            checksums[str(run_seed)] = {
                "theta0": ctx.theta0.fingerprint(),
                "theta_f": ctx.theta_f.fingerprint(),
            }
        except StageError as exc:
            errors.append(f"seed {run_seed}: {exc}")
    return _bundle(config, rows, checksums, errors)


def experiment_crossseed(
    config: ExperimentConfig,
    seed_corpora: dict[str, str] | None = None,
    task_corpora: dict[str, str] | None = None,
    parallel: int = 1,
) -> ReportBundle:
    """SELECT accuracy matrix over (seed corpus, task corpus) pairs."""
    seed_corpora = seed_corpora or config.params.get("seed_corpora") or {}
    task_corpora = task_corpora or config.params.get("task_corpora") or {
        "task": config.corpus
    }
    if not seed_corpora:
        raise ValueError("crossseed needs params.seed_corpora")
    rows: list[dict] = []
    checksums: dict = {}
    errors: list[str] = []
    workspace = Workspace(config.out_dir)
    for task_name, task_path in task_corpora.items():
        for seed_name, seed_path in seed_corpora.items():
            cell_config = replace(
                config, corpus=task_path, seed_corpus=seed_path
            )
            for run_seed in config.seeds:
                try:
                    ctx = prepare_run(cell_config, run_seed, workspace)
                    pool = build_candidate_pool(cell_config, ctx)
                    artifacts = gradient_stage(cell_config, ctx, pool, workspace)
                    result = run_selection(
                        cell_config, ctx, artifacts, "select", workspace
                    )
                    selected = selected_documents(
                        pool, result, artifacts.pseudolabels
                    )
                    report = score_selection(
                        cell_config, ctx, selected, ctx.train_docs
                    )
                    row = _method_row(
                        cell_config, ctx, "select", report, len(result.indices)
                    )
                    row["task"] = task_name
                    row["seed_corpus"] = seed_name
                    rows.append(row)
                    checksums[f"{task_name}/{seed_name}/{run_seed}"] = {
                        "theta_f": ctx.theta_f.fingerprint()
                    }
                except StageError as exc:
                    errors.append(f"{task_name}/{seed_name}/{run_seed}: {exc}")
    return _bundle(config, rows, checksums, errors)


def experiment_projection_dim(
    config: ExperimentConfig, k_list: Sequence[int] | None = None, parallel: int = 1
) -> ReportBundle:
    """SELECT vs Random across sketch dimensions."""
    k_list = list(k_list or config.params.get("k_list") or [512, 4096])
    methods = config.methods or ("select", "random")
    rows: list[dict] = []
    checksums: dict = {}
    errors: list[str] = []
    workspace = Workspace(config.out_dir)
    for run_seed in config.seeds:
        try:
            ctx = prepare_run(config, run_seed, workspace)
            pool = build_candidate_pool(config, ctx)
            for k in k_list:
                artifacts = gradient_stage(
                    config, ctx, pool, workspace, projection_dim=k
                )
                k_config = replace(config, projection_dim=k, methods=tuple(methods))
                for method in methods:
                    result = run_selection(
                        k_config, ctx, artifacts, method, workspace
                    )
                    selected = selected_documents(
                        pool, result, artifacts.pseudolabels
                    )
                    report = score_selection(
                        k_config, ctx, selected, ctx.train_docs
                    )
                    rows.append(
                        _method_row(
                            k_config, ctx, method, report, len(result.indices)
                        )
                    )
            checksums[str(run_seed)] = {"theta_f": ctx.theta_f.fingerprint()}
        except StageError as exc:
            errors.append(f"seed {run_seed}: {exc}")
    return _bundle(config, rows, checksums, errors)


def experiment_optimizer(
    config: ExperimentConfig,
    optimizer_pairs: Sequence[tuple[dict, dict]] | None = None,
    parallel: int = 1,
) -> ReportBundle:
    """Full cross of victim optimizer x retrain optimizer for SELECT and Random."""
    if optimizer_pairs is None:
        victims = config.params.get("victim_optimizers") or [{"kind": "adam"}]
        retrains = config.params.get("retrain_optimizers") or [{"kind": "adam"}]
        optimizer_pairs = [(v, r) for v in victims for r in retrains]
    methods = config.methods or ("select", "random")
    rows: list[dict] = []
    checksums: dict = {}
    errors: list[str] = []
    workspace = Workspace(config.out_dir)
    for victim_over, retrain_over in optimizer_pairs:
        cell_config = replace(
            config,
            victim_opt=OptimizerConfig.from_dict(
                {**config.victim_opt.to_dict(), **victim_over}
            ),
            retrain_opt=OptimizerConfig.from_dict(
                {**config.retrain_opt.to_dict(), **retrain_over}
            ),
            methods=tuple(methods),
        )
        for run_seed in config.seeds:
            try:
                ctx = prepare_run(cell_config, run_seed, workspace)
                pool = build_candidate_pool(cell_config, ctx)
                artifacts = gradient_stage(cell_config, ctx, pool, workspace)
                for method in methods:
                    result = run_selection(
                        cell_config, ctx, artifacts, method, workspace
                    )
                    selected = selected_documents(
                        pool, result, artifacts.pseudolabels
                    )
                    report = score_selection(
                        cell_config, ctx, selected, ctx.train_docs
                    )
                    row = _method_row(
                        cell_config, ctx, method, report, len(result.indices)
                    )
                    row["victim_optimizer"] = cell_config.victim_opt.kind
                    row["retrain_optimizer"] = cell_config.retrain_opt.kind
                    rows.append(row)
            except StageError as exc:
                errors.append(
                    f"{cell_config.victim_opt.kind}/{cell_config.retrain_opt.kind}"
                    f"/{run_seed}: {exc}"
                )
    return _bundle(config, rows, checksums, errors)


def experiment_metric_ablation(
    config: ExperimentConfig,
    replace_steps: Sequence[float] | None = None,
    trials: int | None = None,
    parallel: int = 1,
) -> ReportBundle:
    """Swap recovered documents for ground truth stepwise, watch both metrics."""
    steps = list(
        replace_steps
        or config.params.get("replace_steps")
        or [round(0.1 * i, 1) for i in range(11)]
    )
    trials = int(trials or config.params.get("trials") or 5)
    run_seed = config.seeds[0]
    workspace = Workspace(config.out_dir)
    ctx = prepare_run(config, run_seed, workspace)
    pool = build_candidate_pool(config, ctx)
    artifacts = gradient_stage(config, ctx, pool, workspace)
    result = run_selection(config, ctx, artifacts, "select", workspace)
    recovered = selected_documents(pool, result, artifacts.pseudolabels)
    reference = ctx.train_docs
    num_select = len(recovered)
    rows: list[dict] = []
    for step in steps:
        n_replace = int(round(step * num_select))
        for trial in range(trials):
            rng = np.random.default_rng(run_seed * 1000 + trial)
            replace_pos = rng.choice(num_select, size=n_replace, replace=False)
            truth_pos = rng.choice(len(reference), size=n_replace, replace=False)
            texts = [d.text for d in recovered]
            for p, t in zip(replace_pos, truth_pos):
                texts[int(p)] = reference[int(t)].text
            mixed = DocumentSet(
                Document(i, text, None) for i, text in enumerate(texts)
            )
            containment = vocab_containment(mixed, reference)
            ot = recovery_ot(mixed, reference, ctx, config.ot_max_points)
            rows.append(
                {
                    "experiment": config.experiment,
                    "method": "select",
                    "seed": run_seed,
                    "replace_fraction": step,
                    "trial": trial,
                    "vocab_containment": containment,
                    "ot_distance": ot.distance,
                }
            )
    checksums = {str(run_seed): {"theta_f": ctx.theta_f.fingerprint()}}
    bundle = _bundle(config, rows, checksums, [])
    return bundle


def run_experiment(
    config: ExperimentConfig, kind: str | None = None, parallel: int = 1
) -> ReportBundle:
    kind = kind or config.experiment
    if kind == "pipeline":
        return run_pipeline(config, parallel)
    if kind == "scaling":
        return experiment_scaling(config, parallel=parallel)
    if kind == "leakage":
        return experiment_leakage(config, parallel=parallel)
    if kind == "crossseed":
        return experiment_crossseed(config, parallel=parallel)
    if kind == "projection_dim":
        return experiment_projection_dim(config, parallel=parallel)
    if kind == "optimizer":
        return experiment_optimizer(config, parallel=parallel)
    if kind == "metric_ablation":
        return experiment_metric_ablation(config, parallel=parallel)
    raise ValueError(f"unknown experiment kind {kind!r}")


_FIGURE_AXES = {
    "scaling": ("M", ("accuracy", "perplexity")),
    "leakage": ("leak_fraction", ("accuracy", "ot_distance", "leaked_selected")),
    "projection_dim": ("k", ("accuracy", "perplexity")),
    "metric_ablation": ("replace_fraction", ("vocab_containment", "ot_distance")),
}


def emit_reports(config: ExperimentConfig, bundle: ReportBundle) -> None:
    """Write report.json/report.csv and per-figure CSV (plus SVG when possible)."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle.to_json(out / "report.json")
    bundle.to_csv(out / "report.csv")
    axes = _FIGURE_AXES.get(config.experiment)
    if axes is None or not bundle.aggregates:
        return
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    x_field, y_fields = axes
    write_csv(fig_dir / f"{config.experiment}.csv", bundle.aggregates)
    for y_field in y_fields:
        points = [
            a for a in bundle.aggregates if a.get(x_field) is not None and a.get(y_field) is not None
        ]
        if points:
            _write_svg(
                fig_dir / f"{config.experiment}_{y_field}.svg", points, x_field, y_field
            )


def _write_svg(path: Path, points: list[dict], x_field: str, y_field: str) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # pragma: no cover
        logger.warning("matplotlib unavailable, skipping %s", path)
        return
    groups: dict[str, list[tuple[float, float]]] = {}
    for p in points:
        groups.setdefault(str(p.get("method", "series")), []).append(
            (float(p[x_field]), float(p[y_field]))
        )
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, pts in sorted(groups.items()):
        pts.sort()
        ax.plot([x for x, _ in pts], [y for _, y in pts], marker="o", label=name)
    ax.set_xlabel(x_field)
    ax.set_ylabel(y_field)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
