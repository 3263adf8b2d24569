"""Orchestration: corpus preparation, classifier and generator training, sweep, evaluation, report."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .classifier import NodeClassifier, compute_multilabel_metrics
from .config import ExperimentConfig
from .corpus import (
    build_node_vocabulary,
    corrupt_labels,
    generate_corpus,
    image_batch,
    label_matrix,
    read_corpus,
    read_manifest,
    select,
    split_corpus,
    write_corpus,
    write_graph,
    write_manifest,
)
from .exceptions import ConfigError
from .generator import TRAIN_LOG_COLUMNS, ReportGenerator
from .nlg_metrics import METRIC_COLUMNS, evaluate_corpus

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SWEEP_COLUMNS = ("accuracy",) + METRIC_COLUMNS
# distinct corruption streams per split so train and test noise are independent
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(row.get(k)) for k in columns})
    return path


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- corpus -----------------------------------------------------------------
@dataclass
class CorpusSplits:
    train: list
    val: list
    test: list

    def get(self, name: str) -> list:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def make_corpus(cfg: ExperimentConfig) -> CorpusSplits:
    samples = generate_corpus(cfg.n, cfg.corpus_seed, cfg.imbalance_exponent,
                              noise_sd=cfg.noise_sd)
    return CorpusSplits(*split_corpus(samples, cfg.ratios, cfg.split_seed))


def write_corpus_dir(cfg: ExperimentConfig, out_dir) -> Path:
    """corpus.jsonl, graph.tsv, and one id manifest per split."""
    out = Path(out_dir)
    graph = build_node_vocabulary()
    splits = make_corpus(cfg)
    everything = sorted(splits.train + splits.val + splits.test, key=lambda s: s.id)
    write_corpus(out / "corpus.jsonl", everything, graph)
    write_graph(graph, out / "graph.tsv")
    for name in SPLITS:
        write_manifest(out / f"{name}.txt", splits.get(name))
    return out


def load_corpus_dir(corpus_dir) -> CorpusSplits:
    d = Path(corpus_dir)
    path = d / "corpus.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no corpus at {path}; run gen-corpus first")
    samples = read_corpus(path, build_node_vocabulary())
    return CorpusSplits(*[select(samples, read_manifest(d / f"{n}.txt")) for n in SPLITS])


# -- knowledge sources ------------------------------------------------------
@dataclass(frozen=True)
class KnowledgeSource:
    """Where the node labels fed to the knowledge encoder come from."""

    kind: str  # ground_truth | corrupted | classifier
    accuracy: float = 1.0
    checkpoint: str | None = None

    def __str__(self) -> str:
        if self.kind == "corrupted":
            return f"corrupted({self.accuracy:g})"
        if self.kind == "classifier":
            return f"classifier({self.checkpoint})"
        return "ground_truth"


def parse_knowledge_source(source: str) -> KnowledgeSource:
    """``ground_truth``, ``corrupted(0.8)`` / ``corrupted:0.8``, ``classifier(path)`` / ``classifier:path``."""
    text = source.strip()
    if text == "ground_truth":
        return KnowledgeSource("ground_truth")
    for kind in ("corrupted", "classifier"):
        arg = None
        if text.startswith(kind + "(") and text.endswith(")"):
            arg = text[len(kind) + 1:-1]
        elif text.startswith(kind + ":"):
            arg = text[len(kind) + 1:]
        if arg is None:
            continue
        if kind == "classifier":
            if not arg:
                raise ConfigError("classifier source needs a checkpoint path")
            return KnowledgeSource("classifier", checkpoint=arg)
        try:
            a = float(arg)
        except ValueError as exc:
            raise ConfigError(f"bad accuracy in knowledge source {source!r}") from exc
        if not 0.0 < a <= 1.0:
            raise ConfigError(f"knowledge accuracy must be in (0, 1], got {a}")
        return KnowledgeSource("corrupted", accuracy=a)
    raise ConfigError(f"unknown knowledge source {source!r}")


def knowledge_labels(source: KnowledgeSource, samples, split: str, seed: int) -> np.ndarray:
    labels = label_matrix(samples)
    if source.kind == "ground_truth":
        return labels
    if source.kind == "corrupted":
        return corrupt_labels(labels, source.accuracy, [seed, _SPLIT_CODE[split]])
    path = Path(source.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"classifier checkpoint not found: {path}")
    return NodeClassifier.load(path).predict(image_batch(samples))


# -- classifier -------------------------------------------------------------
def train_classifier(cfg: ExperimentConfig, splits: CorpusSplits, out_dir=None):
    """Fit on train, select by validation aF1, report test metrics."""
    clf = NodeClassifier(**cfg.classifier_params())
    clf.fit(image_batch(splits.train), label_matrix(splits.train),
            eval_set=(image_batch(splits.val), label_matrix(splits.val)))
    probs = clf.predict_proba(image_batch(splits.test))
    metrics = compute_multilabel_metrics(probs, label_matrix(splits.test), cfg.threshold)
    if out_dir is not None:
        out = Path(out_dir)
        clf.save(out / "classifier.npz")
        cols = list(clf.history_[0]) if clf.history_ else ["epoch"]
        write_csv(out / "classifier_history.csv", clf.history_, cols)
        write_csv(out / "classifier_metrics.csv", [metrics.as_dict()], list(metrics.as_dict()))
        write_jsonl(out / "classifier_predictions.jsonl",
                    [{"id": s.id, "probabilities": [float(p) for p in row]}
                     for s, row in zip(splits.test, probs)])
    return clf, metrics


# -- generator --------------------------------------------------------------
def train_generator(cfg: ExperimentConfig, splits: CorpusSplits, source: KnowledgeSource,
                    out_dir=None, seed: int | None = None) -> ReportGenerator:
    seed = cfg.seed if seed is None else seed
    params = cfg.generator_params()
    params["seed"] = seed
    gen = ReportGenerator(**params)
    k_train = knowledge_labels(source, splits.train, "train", seed)
    eval_set = None
    if splits.val:
        eval_set = (image_batch(splits.val), [s.report for s in splits.val],
                    knowledge_labels(source, splits.val, "val", seed))
    gen.fit(image_batch(splits.train), [s.report for s in splits.train], k_train,
            eval_set=eval_set, log=lambda row: log.info("epoch %s", row))
    if out_dir is not None:
        out = Path(out_dir)
        gen.save(out / "generator.npz")
        write_csv(out / "train_log.csv", gen.train_log_, TRAIN_LOG_COLUMNS)
        cols = sorted({k for row in gen.history_ for k in row}, key=lambda c: (c != "epoch", c))
        write_csv(out / "generator_history.csv", gen.history_, cols)
        (out / "knowledge_source.txt").write_text(str(source) + "\n")
    return gen


def evaluate(gen: ReportGenerator, source: KnowledgeSource, samples, split: str = "test",
             seed: int = 0, out_dir=None, cider_variant: str = "d") -> dict:
    """Generate for ``samples`` and score against their reports."""
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    K = knowledge_labels(source, samples, split, seed)
    preds = gen.predict(image_batch(samples), K)
    refs = [s.report for s in samples]
    summary, rows = evaluate_corpus(preds, refs, cider_variant)
    if out_dir is not None:
        out = Path(out_dir)
        write_jsonl(out / f"predictions_{split}.jsonl",
                    [{"id": s.id, "report": p} for s, p in zip(samples, preds)])
        write_csv(out / f"per_sample_{split}.csv",
                  [{"id": s.id, **r} for s, r in zip(samples, rows)], ("id",) + METRIC_COLUMNS)
        write_csv(out / f"summary_{split}.csv", [summary], METRIC_COLUMNS)
    return summary


def evaluate_files(predictions_path, references_path, out_dir=None, cider_variant: str = "d"):
    """Score a predictions JSONL against a references JSONL, both keyed by ``id``.

    Each record holds ``report`` (or ``text``); a reference may hold a list
    under ``references``.
    """
    preds = {r["id"]: r.get("report", r.get("text")) for r in read_jsonl(predictions_path)}
    refs = {}
    for r in read_jsonl(references_path):
        refs[r["id"]] = r["references"] if "references" in r else [r.get("report", r.get("text"))]
    ids = sorted(refs)
    missing = [i for i in ids if i not in preds]
    if missing:
        raise ValueError(f"{len(missing)} reference ids lack a prediction, e.g. {missing[:3]}")
    summary, rows = evaluate_corpus([preds[i] for i in ids], [refs[i] for i in ids], cider_variant)
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "per_sample.csv", [{"id": i, **r} for i, r in zip(ids, rows)],
                  ("id",) + METRIC_COLUMNS)
        write_csv(out / "summary.csv", [summary], METRIC_COLUMNS)
    return summary, rows


# -- sweep ------------------------------------------------------------------
@dataclass
class SweepResult:
    rows: list = field(default_factory=list)  # one dict per (seed, accuracy)

    def seeds(self) -> list:
        return sorted({r["seed"] for r in self.rows})

    def levels(self) -> list:
        return sorted({r["accuracy"] for r in self.rows})

    def per_seed(self, seed: int) -> list:
        return sorted((r for r in self.rows if r["seed"] == seed), key=lambda r: r["accuracy"])

    def mean_rows(self) -> list:
        """One row per accuracy, metrics averaged over seeds."""
        out = []
        for a in self.levels():
            sel = [r for r in self.rows if r["accuracy"] == a]
            out.append({"accuracy": a, **{m: float(np.mean([r[m] for r in sel]))
                                          for m in METRIC_COLUMNS}})
        return out


def run_accuracy_sweep(cfg: ExperimentConfig, splits: CorpusSplits | None = None,
                       out_dir=None, progress=None) -> SweepResult:
    """Train and evaluate one fresh generator per (seed, accuracy level).

    Knowledge is corrupted at the same rate for training, validation and test.
    """
    splits = splits or make_corpus(cfg)
    result = SweepResult()
    for seed in cfg.sweep_seeds:
        for a in cfg.sweep_levels:
            source = KnowledgeSource("corrupted", accuracy=a)
            sub = None if out_dir is None else Path(out_dir) / f"seed{seed}" / f"acc{a:g}"
            gen = train_generator(cfg, splits, source, sub, seed=seed)
            summary = evaluate(gen, source, splits.test, "test", seed, sub, cfg.cider_variant)
            row = {"seed": seed, "accuracy": a, **summary}
            result.rows.append(row)
            if progress is not None:
                progress(row)
    if out_dir is not None:
        emit_report(result, out_dir)
    return result


@dataclass
class TrendCheck:
    metric: str
    spearman_per_seed: dict
    mean_at_max: float
    mean_at_min: float

    @property
    def passed(self) -> bool:
        rhos = list(self.spearman_per_seed.values())
        return all(r > 0 for r in rhos) and self.mean_at_max > self.mean_at_min


def check_trend(result: SweepResult, metric: str, low: float | None = None,
                high: float = 1.0) -> TrendCheck:
    """Spearman(accuracy, metric) per seed, and the seed-mean at ``high`` vs ``low``."""
    low = min(result.levels()) if low is None else low
    rhos = {}
    for seed in result.seeds():
        rows = result.per_seed(seed)
        ys = [r[metric] for r in rows]
        if len(set(ys)) < 2:
            rhos[seed] = 0.0  # no ordering information
            continue
        rhos[seed] = float(spearmanr([r["accuracy"] for r in rows], ys).statistic)
    means = {r["accuracy"]: r[metric] for r in result.mean_rows()}
    return TrendCheck(metric, rhos, means[high], means[low])


def emit_report(result: SweepResult, out_dir) -> list:
    """sweep.csv (seed-mean per accuracy), sweep_by_seed.csv, and one line plot per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not result.rows:
        raise ValueError("no sweep results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_csv(out / "sweep.csv", result.mean_rows(), SWEEP_COLUMNS),
               write_csv(out / "sweep_by_seed.csv", sorted(result.rows, key=lambda r: (r["seed"], r["accuracy"])),
                         ("seed",) + SWEEP_COLUMNS)]
    means = result.mean_rows()
    xs = [r["accuracy"] for r in means]
    for metric in METRIC_COLUMNS:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(xs, [r[metric] for r in means], marker="o")
        ax.set_xlabel("node accuracy")
        ax.set_ylabel(metric)
        ax.set_xticks(xs)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out / f"sweep_{metric}.png"
        fig.savefig(path, dpi=80, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def load_sweep(out_dir) -> SweepResult:
    path = Path(out_dir) / "sweep_by_seed.csv"
    if not path.exists():
        raise FileNotFoundError(f"no sweep results at {path}")
    rows = []
    for r in read_csv(path):
        rows.append({"seed": int(r["seed"]), "accuracy": float(r["accuracy"]),
                     **{m: float(r[m]) for m in METRIC_COLUMNS}})
    return SweepResult(rows)
