"""
Scoring, threshold selection, ROC/AUROC and the latent-space diagnostics.

Positive class = feasible. An input is classified infeasible iff its score is strictly
below the threshold delta, so "score >= delta" means feasible everywhere in this module.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from feasiflow.app.coupling_flow import FlowModel, flow_log_prob_batch
from feasiflow.app.data_pipeline import Label, LabeledDataset, format_float, parse_label
from feasiflow.app.errors import (
    DomainError,
    MetricError,
    ParseError,
    ShapeError,
    SimilarityError,
    ThresholdError,
    UsageError,
)
from feasiflow.app.parallel import map_row_chunks
from feasiflow.app.schemas import EvalSummary, ThresholdRecord

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["id", "label", "total", "base_term", "logdet_term", "verdict"]


# ============================================================================
# SCORE REPORTS
# ============================================================================

@dataclass
class ScoreReport:
    ids: List[str]
    labels: List[Optional[Label]]
    total: np.ndarray
    base_term: np.ndarray
    logdet_term: np.ndarray
    latents: Optional[np.ndarray] = None
    verdicts: Optional[List[Label]] = None
    checkpoint: Optional[str] = None
    threshold: Optional[float] = None

    def __post_init__(self):
        n = len(self.ids)
        for name in ("total", "base_term", "logdet_term"):
            values = np.asarray(getattr(self, name), dtype=np.float64)
            if values.shape != (n,):
                raise ShapeError(f"{name} has shape {values.shape}, expected ({n},)")
            setattr(self, name, values)
        if len(self.labels) != n:
            raise ShapeError(f"report has {n} ids but {len(self.labels)} labels")
        if self.verdicts is not None and len(self.verdicts) != n:
            raise ShapeError(f"report has {n} ids but {len(self.verdicts)} verdicts")

    def __len__(self) -> int:
        return len(self.ids)

    def with_threshold(self, threshold: float) -> "ScoreReport":
        return replace(self, threshold=float(threshold), verdicts=classify_batch(self.total, threshold))


def score_dataset(
    model: FlowModel,
    data: LabeledDataset,
    threads: Optional[int] = None,
    checkpoint: Optional[str] = None,
) -> ScoreReport:
    """Decomposed log-likelihood per sample, in dataset order."""
    if data.dim != model.dim:
        raise ShapeError(
            f"embedding dimension {data.dim} does not match model dimension {model.dim}",
            sample_id=data.ids[0] if len(data) else None,
        )
    finite = np.all(np.isfinite(data.embeddings), axis=1)
    if not finite.all():
        raise DomainError("embedding contains non-finite values", sample_id=data.ids[int(np.argmin(finite))])

    if len(data) == 0:
        empty = np.zeros(0)
        return ScoreReport([], [], empty, empty, empty, np.zeros((0, model.dim)), checkpoint=checkpoint)

    chunks = map_row_chunks(lambda rows: flow_log_prob_batch(model, rows, exact=True), data.embeddings, threads)
    return ScoreReport(
        ids=list(data.ids),
        labels=list(data.labels),
        total=np.concatenate([c.total for c in chunks]),
        base_term=np.concatenate([c.base_term for c in chunks]),
        logdet_term=np.concatenate([c.logdet_term for c in chunks]),
        latents=np.concatenate([c.latent for c in chunks]),
        checkpoint=checkpoint,
    )


def scores_to_report(
    ids: Sequence[str], labels: Sequence[Optional[Label]], scores: np.ndarray, checkpoint: Optional[str] = None
) -> ScoreReport:
    """Wrap a plain score vector (e.g. a baseline) in the score-report layout: base_term = total."""
    scores = np.asarray(scores, dtype=np.float64)
    return ScoreReport(list(ids), list(labels), scores, scores.copy(), np.zeros_like(scores), checkpoint=checkpoint)


def latent_norm_score(report: ScoreReport) -> ScoreReport:
    """-|z|^2 / 2 per sample, a score computed in latent space alone."""
    if report.latents is None:
        raise UsageError("latent_norm_score needs a report that carries latents")
    score = -0.5 * np.sum(report.latents * report.latents, axis=1)
    return replace(
        report,
        total=score,
        base_term=score.copy(),
        logdet_term=np.zeros_like(score),
        verdicts=None,
        threshold=None,
    )


# ============================================================================
# THRESHOLD & CLASSIFICATION
# ============================================================================

def classify(score: float, threshold: float) -> Label:
    return Label.INFEASIBLE if score < threshold else Label.FEASIBLE


def classify_batch(scores: np.ndarray, threshold: float) -> List[Label]:
    return [classify(float(s), threshold) for s in np.asarray(scores, dtype=np.float64)]


def _positive(labels: Sequence, error=MetricError) -> np.ndarray:
    values = list(labels)
    if any(label is None for label in values):
        raise error("every scored row needs a label")
    if values and isinstance(values[0], (Label, str)):
        return np.array([Label(label) is Label.FEASIBLE for label in values], dtype=bool)
    return np.asarray(values, dtype=bool)


def _class_scores(scores, labels, error):
    scores = np.asarray(scores, dtype=np.float64)
    positive = _positive(labels, error)
    if scores.shape != positive.shape:
        raise ShapeError(f"{scores.shape[0]} scores but {positive.shape[0]} labels")
    if not np.all(np.isfinite(scores)):
        raise error("scores must be finite")
    pos, neg = np.sort(scores[positive]), np.sort(scores[~positive])
    if pos.size == 0 or neg.size == 0:
        raise error(f"need both classes, got {pos.size} feasible and {neg.size} infeasible")
    return scores, pos, neg


def _rates(pos_sorted: np.ndarray, neg_sorted: np.ndarray, thresholds: np.ndarray):
    """Fraction of each class with score >= threshold."""
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg_sorted.size - np.searchsorted(neg_sorted, thresholds, side="left")
    return tp / pos_sorted.size, fp / neg_sorted.size


def youden_threshold(scores: np.ndarray, labels: Sequence) -> ThresholdRecord:
    """
    Threshold maximizing J = TPR - FPR over the midpoints between adjacent distinct scores.
    Ties go to the largest midpoint. With a single distinct score that score is returned.
    """
    scores, pos, neg = _class_scores(scores, labels, ThresholdError)
    unique = np.unique(scores)
    candidates = 0.5 * unique[:-1] + 0.5 * unique[1:] if unique.size > 1 else unique
    tpr, fpr = _rates(pos, neg, candidates)
    j = tpr - fpr
    best = int(np.flatnonzero(j == j.max())[-1])
    return ThresholdRecord(
        threshold=float(candidates[best]),
        youden_j=float(j[best]),
        tpr=float(tpr[best]),
        fpr=float(fpr[best]),
        n_feasible=int(pos.size),
        n_infeasible=int(neg.size),
    )


def select_threshold(val_report: ScoreReport) -> float:
    return youden_threshold(val_report.total, val_report.labels).threshold


# ============================================================================
# ROC / AUROC
# ============================================================================

@dataclass
class RocResult:
    thresholds: np.ndarray  # +inf, then distinct scores descending
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float


def roc_curve(scores: np.ndarray, labels: Sequence) -> RocResult:
    scores, pos, neg = _class_scores(scores, labels, MetricError)
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    tpr, fpr = _rates(pos, neg, thresholds)
    return RocResult(thresholds=thresholds, fpr=fpr, tpr=tpr, auroc=float(np.trapezoid(tpr, fpr)))


def auroc(scores: np.ndarray, labels: Sequence) -> float:
    return roc_curve(scores, labels).auroc


def evaluate_scores(report: ScoreReport, threshold: Optional[float] = None) -> EvalSummary:
    positive = _positive(report.labels)
    summary = dict(
        auroc=auroc(report.total, positive),
        n=len(report),
        n_feasible=int(positive.sum()),
        n_infeasible=int((~positive).sum()),
        checkpoint=report.checkpoint,
    )
    if threshold is not None:
        if not math.isfinite(threshold):
            raise ThresholdError(f"threshold must be finite, got {threshold}")
        predicted = ~(report.total < threshold)
        tp = int(np.sum(predicted & positive))
        fp = int(np.sum(predicted & ~positive))
        tn = int(np.sum(~predicted & ~positive))
        fn = int(np.sum(~predicted & positive))
        summary.update(
            threshold=float(threshold), tp=tp, fp=fp, tn=tn, fn=fn,
            tpr=tp / max(tp + fn, 1),
            fpr=fp / max(fp + tn, 1),
            accuracy=(tp + tn) / max(len(report), 1),
        )
    return EvalSummary(**summary)


# ============================================================================
# DIAGNOSTICS
# ============================================================================

def _class_stats(values: np.ndarray) -> Dict[str, Optional[float]]:
    if values.size == 0:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(values)), "std": float(np.std(values))}


def decomposition_summary(report: ScoreReport) -> Dict[str, object]:
    """Per-class statistics of total, base_term and logdet_term, and which term separates the classes."""
    groups = {
        label.value: np.array([l is label for l in report.labels], dtype=bool)
        for label in Label
    }
    per_class = {
        name: {
            "count": int(mask.sum()),
            "total": _class_stats(report.total[mask]),
            "base_term": _class_stats(report.base_term[mask]),
            "logdet_term": _class_stats(report.logdet_term[mask]),
        }
        for name, mask in groups.items()
    }
    summary: Dict[str, object] = {
        "classes": per_class,
        "mean_abs_logdet": float(np.mean(np.abs(report.logdet_term))) if len(report) else None,
        "base_spread": None,
        "logdet_spread": None,
    }
    feasible, infeasible = per_class[Label.FEASIBLE.value], per_class[Label.INFEASIBLE.value]
    if feasible["count"] and infeasible["count"]:
        summary["base_spread"] = abs(feasible["base_term"]["mean"] - infeasible["base_term"]["mean"])
        summary["logdet_spread"] = abs(feasible["logdet_term"]["mean"] - infeasible["logdet_term"]["mean"])
    return summary


def cosine_similarity_matrix(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"expected a list of equal-length vectors, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise SimilarityError("zero vector has no direction", index=int(zero[0]))
    unit = v / norms[:, None]
    m = unit @ unit.T
    return 0.5 * (m + m.T)


def similarity_summary(matrix: np.ndarray, labels: Sequence[Optional[Label]]) -> Dict[str, Optional[float]]:
    """Mean off-diagonal cosine similarity within each class and across classes."""
    feasible = np.array([l is Label.FEASIBLE for l in labels], dtype=bool)
    infeasible = np.array([l is Label.INFEASIBLE for l in labels], dtype=bool)
    off_diag = ~np.eye(len(labels), dtype=bool)

    def block_mean(rows: np.ndarray, cols: np.ndarray) -> Optional[float]:
        cells = np.outer(rows, cols) & off_diag
        return float(matrix[cells].mean()) if cells.any() else None

    return {
        "within_feasible": block_mean(feasible, feasible),
        "within_infeasible": block_mean(infeasible, infeasible),
        "cross_class": block_mean(feasible, infeasible),
    }


def covariance_distance_to_identity(x: np.ndarray, standardize: bool = True) -> float:
    """Frobenius norm of cov(x) - I; `standardize` centres and rescales so the mean variance is 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"need at least two rows to estimate a covariance, got shape {x.shape}")
    if standardize:
        x = x - x.mean(axis=0)
        mean_var = float(np.mean(np.var(x, axis=0, ddof=1)))
        if mean_var > 0:
            x = x / math.sqrt(mean_var)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return float(np.linalg.norm(cov - np.eye(cov.shape[0]), ord="fro"))


def export_latents(model: FlowModel, data: LabeledDataset, threads: Optional[int] = None) -> LabeledDataset:
    report = score_dataset(model, data, threads=threads)
    return LabeledDataset(report.latents, list(report.labels), list(report.ids))


# ============================================================================
# CSV I/O
# ============================================================================

def _writer(path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = path.open("w", encoding="utf-8", newline="")
    return handle, csv.writer(handle, lineterminator="\n")


def write_score_report(path: Union[str, Path], report: ScoreReport) -> Path:
    handle, writer = _writer(path)
    with handle:
        writer.writerow(SCORE_COLUMNS)
        for i, row_id in enumerate(report.ids):
            label = report.labels[i]
            verdict = report.verdicts[i].value if report.verdicts is not None else ""
            writer.writerow([
                row_id,
                "" if label is None else label.value,
                format_float(report.total[i]),
                format_float(report.base_term[i]),
                format_float(report.logdet_term[i]),
                verdict,
            ])
    return Path(path)


def read_score_report(path: Union[str, Path]) -> ScoreReport:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"score file not found: {path}")
    ids, labels, values, verdicts = [], [], [], []
    try:
        with path.open("r", encoding="utf-8-sig", newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:5]] != SCORE_COLUMNS[:5]:
                raise ParseError(f"score file header must start with {','.join(SCORE_COLUMNS[:5])}", line=1, path=str(path))
            for row in reader:
                if not row:
                    continue
                line = reader.line_num
                if len(row) not in (5, 6):
                    raise ParseError(f"expected 5 or 6 cells, found {len(row)}", line=line, path=str(path))
                try:
                    labels.append(parse_label(row[1]))
                    verdicts.append(parse_label(row[5]) if len(row) == 6 else None)
                    values.append([float(cell) for cell in row[2:5]])
                except ValueError:
                    raise ParseError("malformed score row", line=line, path=str(path)) from None
                ids.append(row[0])
    except UnicodeDecodeError:
        raise ParseError("score file is not valid UTF-8", path=str(path)) from None
    matrix = np.array(values, dtype=np.float64).reshape(len(values), 3)
    has_verdicts = bool(verdicts) and all(v is not None for v in verdicts)
    return ScoreReport(
        ids=ids,
        labels=labels,
        total=matrix[:, 0],
        base_term=matrix[:, 1],
        logdet_term=matrix[:, 2],
        verdicts=verdicts if has_verdicts else None,
    )


def write_roc_csv(path: Union[str, Path], roc: RocResult) -> Path:
    handle, writer = _writer(path)
    with handle:
        writer.writerow(["threshold", "fpr", "tpr"])
        for threshold, fpr, tpr in zip(roc.thresholds, roc.fpr, roc.tpr):
            writer.writerow([format_float(threshold), format_float(fpr), format_float(tpr)])
    return Path(path)


def write_latents(path: Union[str, Path], data: LabeledDataset, prefix: str = "z") -> Path:
    handle, writer = _writer(path)
    with handle:
        writer.writerow(["id", "label"] + [f"{prefix}{k}" for k in range(data.dim)])
        for row_id, label, values in zip(data.ids, data.labels, data.embeddings):
            writer.writerow([row_id, "" if label is None else label.value] + [format_float(v) for v in values])
    return Path(path)


def write_similarity_matrix(path: Union[str, Path], matrix: np.ndarray, ids: Sequence[str]) -> Path:
    handle, writer = _writer(path)
    with handle:
        writer.writerow(["id"] + list(ids))
        for row_id, row in zip(ids, matrix):
            writer.writerow([row_id] + [format_float(v) for v in row])
    return Path(path)
