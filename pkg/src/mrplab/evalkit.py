"""Accuracy, normalized unlearning scores, gradient-conflict tables and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, UndefinedScoreError, UndefinedSimilarityError
from .linalg import cosine_similarity
from .nanomodel.model import answer_logits
from .taskgen import LABEL_TOKENS, to_batch

REPORT_FORMAT_VERSION = 1


def fmt6(x):
    """Round to 6 significant digits (None passes through)."""
    if x is None:
        return None
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return int(x)
    return float(f"{float(x):.6g}")


def qa_accuracy(model, examples, chunk: int = 1024) -> float:
    """Fraction of examples whose true label token strictly outscores the other three.

    Only the four option-label logits at the answer position are compared; ties
    count as wrong.
    """
    examples = list(examples)
    if not examples:
        raise InvalidInputError("qa_accuracy needs a non-empty test set")
    label_ids = list(LABEL_TOKENS)
    correct = 0
    for s in range(0, len(examples), chunk):
        part = examples[s:s + chunk]
        scores = answer_logits(model, to_batch(part))[:, label_ids]
        truth = np.array([e.answer_index for e in part])
        rows = np.arange(len(part))
        true_score = scores[rows, truth]
        scores[rows, truth] = -np.inf
        correct += int(np.sum(true_score > scores.max(axis=1)))
    return correct / len(examples)


def random_baseline(examples) -> float:
    """Expected accuracy of a uniform guesser: mean over examples of 1 / option count."""
    examples = list(examples)
    if not examples:
        raise InvalidInputError("random_baseline needs a non-empty test set")
    return float(np.mean([1.0 / len(e.options) for e in examples]))


def task_score(acc: float, acc_low: float, acc_up: float) -> float:
    """``(acc - low) / (up - low)``, deliberately unclamped."""
    denom = acc_up - acc_low
    if not denom > 1e-9:
        raise UndefinedScoreError(f"upper bound {acc_up} does not exceed lower bound {acc_low}")
    return (acc - acc_low) / denom


@dataclass
class TopicScore:
    topic: str
    role: str  # "unlearned", "pending" or "retain"
    acc: float
    acc_low: float
    acc_up: float
    score: float | None


@dataclass
class ScoreReport:
    stage: int
    method: str
    seed: int
    config_hash: str
    topics: list[TopicScore]
    s_unl: float | None
    s_ret: float | None
    final_score: float | None
    trainable_params: int
    score_all: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["format_version"] = REPORT_FORMAT_VERSION
        for t in d["topics"]:
            for k in ("acc", "acc_low", "acc_up", "score"):
                t[k] = fmt6(t[k])
        for k in ("s_unl", "s_ret", "final_score", "score_all"):
            d[k] = fmt6(d[k])
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def build_report(model, test_sets: dict, acc_up: dict, unlearned, retain, *, stage: int, method: str,
                 seed: int, config_hash: str, trainable_params: int) -> ScoreReport:
    """Score every topic in ``test_sets``; ``acc_up`` holds the pretrained accuracies."""
    unlearned, retain = list(unlearned), list(retain)
    topics = []
    for name, examples in test_sets.items():
        acc = qa_accuracy(model, examples)
        low = random_baseline(examples)
        up = acc_up[name]
        try:
            s = task_score(acc, low, up)
        except UndefinedScoreError:
            s = None
        role = "unlearned" if name in unlearned else "retain" if name in retain else "pending"
        topics.append(TopicScore(name, role, acc, low, up, s))
    by = {t.topic: t for t in topics}
    s_unl = _mean([by[n].score for n in unlearned]) if unlearned else None
    s_ret = _mean([by[n].score for n in retain]) if retain else None
    final = s_ret - s_unl if (s_ret is not None and s_unl is not None) else None
    return ScoreReport(stage, method, seed, config_hash, topics, s_unl, s_ret, final, trainable_params)


def _mean(vals):
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


def continual_scores(stage_unlearn_scores, retain_scores) -> float:
    """``mean(retain scores) - mean(unlearned-task scores)`` after one stage."""
    if not retain_scores:
        raise InvalidInputError("retain scores are required")
    s_unl = float(np.mean(stage_unlearn_scores)) if len(stage_unlearn_scores) else 0.0
    return float(np.mean(retain_scores)) - s_unl


def score_series(reports) -> list[float | None]:
    """``Score_n`` for each stage report in order."""
    return [r.final_score for r in reports]


def aggregate(values) -> tuple[float, float]:
    """Mean and half a standard deviation across runs."""
    v = np.asarray(list(values), dtype=np.float64)
    return float(v.mean()), float(0.5 * v.std())


def gradient_conflict_report(model, task_a, task_b, batch_size: int = 50):
    """Per-block cosine between the unlearning gradients of two tasks.

    Rows are ``{"block": i, "cosine": value or None}``; None marks a block whose
    gradient vanished on either task.
    """
    from .nanomodel.diagnostics import layer_avg_gradients

    task_a, task_b = list(task_a), list(task_b)
    if not task_a or not task_b:
        raise InvalidInputError("both tasks must be non-empty")
    ga = layer_avg_gradients(model, task_a, batch_size)
    gb = layer_avg_gradients(model, task_b, batch_size)
    rows = []
    for i, (a, b) in enumerate(zip(ga, gb)):
        try:
            c = cosine_similarity(a, b)
        except UndefinedSimilarityError:
            c = None
        rows.append({"block": i, "cosine": c})
    return rows


def meta_comment(meta: dict) -> str:
    return "# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n"


def read_csv_rows(path) -> list[list[str]]:
    """CSV rows with ``#`` comment lines skipped."""
    with open(Path(path), newline="") as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def write_conflict_csv(path, rows, meta: dict | None = None) -> None:
    with open(Path(path), "w", newline="") as fh:
        if meta:
            fh.write(meta_comment(meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "cosine"])
        for r in rows:
            w.writerow([r["block"], "undefined" if r["cosine"] is None else fmt6(r["cosine"])])


def trainable_param_count(hooks) -> int:
    from .mrp import trainable_param_count as _count

    return _count(hooks)


def finite_or_none(x):
    return None if x is None or not math.isfinite(x) else x
