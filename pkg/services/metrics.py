"""
Evaluation metrics: negative log-likelihood, Mann-Whitney AUC for
terminal prediction and Recall@k for next-visit prediction.
"""
import logging
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import ModelParams, SplitEnum, TaskEnum
from schemas import EvalReport, PatientRecord
from services.errors import ArgumentError, DimensionError, UndefinedMetricError
from services.nn_core import cross_entropy
from services.registry import model_for
from services.sequence_model import prediction_steps

logger = logging.getLogger(__name__)

DEFAULT_KS = (5, 10)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """(concordant pairs + 0.5 * tied pairs) / (positives * negatives)"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("scores and labels must be aligned vectors", scores.shape, labels.shape)
    positives = scores[labels == 1]
    negatives = np.sort(scores[labels != 1])
    if len(positives) == 0 or len(negatives) == 0:
        raise UndefinedMetricError("AUC needs at least one case and one control")
    below = np.searchsorted(negatives, positives, side="left")
    at_or_below = np.searchsorted(negatives, positives, side="right")
    concordant = int(below.sum())
    tied = int((at_or_below - below).sum())
    return (concordant + 0.5 * tied) / (len(positives) * len(negatives))


def recall_at_k(y_hat: Sequence[float], y: Sequence[float], k: int) -> Optional[float]:
    """|top-k(y_hat) & nonzero(y)| / |nonzero(y)|; None when y has no positives.

    Ranking is by descending score, ties to the lower index.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise DimensionError("scores and labels differ in length", y_hat.shape, y.shape)
    if k < 1:
        raise ArgumentError(f"k must be positive, got {k}")
    true = set(np.flatnonzero(y).tolist())
    if not true:
        return None
    top = set(np.argsort(-y_hat, kind="stable")[:k].tolist())
    return len(top & true) / len(true)


def mean_recall_at_k(patients: Sequence[Sequence[Tuple[np.ndarray, np.ndarray]]], k: int) -> Optional[float]:
    """Average over each patient's steps, then over patients; steps without positives are skipped"""
    per_patient = []
    for steps in patients:
        values = [r for r in (recall_at_k(y_hat, y, k) for y_hat, y in steps) if r is not None]
        if values:
            per_patient.append(sum(values) / len(values))
    if not per_patient:
        return None
    return sum(per_patient) / len(per_patient)


def predict_records(params: ModelParams, records: Sequence[PatientRecord]) -> List[List[np.ndarray]]:
    """Inference-mode predictions at every prediction step of every record, in record order"""
    return model_for(params).predict_records(params, list(records))


def score_records(params: ModelParams, records: Sequence[PatientRecord], label: int = 0) -> np.ndarray:
    """Terminal probability of one label per record"""
    predictions = model_for(params).predict_records(params, list(records), terminal=True)
    return np.array([steps[-1][label] for steps in predictions])


def evaluate(records: Sequence[PatientRecord], params: ModelParams, task: Optional[TaskEnum] = None,
             ks: Sequence[int] = DEFAULT_KS, split: Optional[SplitEnum] = None,
             train_seconds: Optional[float] = None) -> EvalReport:
    """NLL for every task, AUC for terminal prediction, Recall@k for next-visit prediction"""
    if not records:
        raise ArgumentError("cannot evaluate an empty split")
    task = TaskEnum(task) if task else params.task
    started = time.perf_counter()
    predictions = predict_records(params, records)

    y_hats, ys, steps = [], [], []
    for record, preds in zip(records, predictions):
        labels = record.label_matrix()
        if labels.shape[1] != len(prediction_steps(record, task)):
            raise DimensionError(f"labels of {record.patient_id} do not match the task", labels.shape)
        y_hats.extend(preds)
        ys.extend(labels[:, i] for i in range(labels.shape[1]))
        steps.append(len(preds))
    nll = cross_entropy(y_hats, ys, len(records), steps)

    auc_value = None
    recalls: Dict[int, float] = {}
    if task == TaskEnum.l2d:
        auc_value = auc([p[-1][0] for p in predictions], [int(r.label_matrix()[0, -1]) for r in records])
    else:
        for k in ks:
            pairs = [list(zip(preds, r.label_matrix().T)) for r, preds in zip(records, predictions)]
            value = mean_recall_at_k(pairs, k)
            if value is not None:
                recalls[k] = value
    test_seconds = time.perf_counter() - started

    report = EvalReport(
        model_kind=params.kind,
        task=task,
        split=split,
        n_patients=len(records),
        neg_log_likelihood=nll,
        auc=auc_value,
        recall_at_k=recalls,
        train_seconds=train_seconds,
        test_seconds=test_seconds,
    )
    logger.info("evaluated %s on %d patients: nll %.5f auc %s recall %s",
                params.kind.value, len(records), nll, auc_value, recalls)
    return report
