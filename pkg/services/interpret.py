"""
Contribution analysis for RETAIN predictions.

With the attention weights of a trace held fixed, the pre-activation output
at step i is linear in the inputs:

    W_out c_i + b_out = sum_j sum_k x_jk * alpha_j * W_out (beta_j * W_emb[:, k]) + b_out

so every (visit, code) pair gets an exact additive contribution and the
prediction is rebuilt from the contributions alone.
"""
import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Union

import numpy as np

from models import ActivationEnum, ModelKindEnum, ModelParams
from schemas import PatientRecord, Vocabulary, sanitize_code_name
from services.errors import ArgumentError, DimensionError, IntegrityError, TapeStateError
from services.nn_core import GradientTape
from services.retain import ForwardTrace, model_from_params

logger = logging.getLogger(__name__)

RECONSTRUCTION_TOLERANCE = 1e-8


@dataclass
class ContributionMatrix:
    prediction_step: int
    omega: np.ndarray  # (i, r, s): visit j, code k, label d
    b_out: np.ndarray
    inputs: np.ndarray  # r x i values the contributions were computed from
    y_hat: np.ndarray  # prediction of the trace the attention came from
    activation: ActivationEnum
    counterfactual: bool = False

    @property
    def n_visits(self) -> int:
        return self.omega.shape[0]

    @property
    def n_labels(self) -> int:
        return self.omega.shape[2]

    def logits(self) -> np.ndarray:
        return self.omega.sum(axis=(0, 1)) + self.b_out


class Contributor(NamedTuple):
    visit: int  # 1-based
    code: int
    value: float


def _require_retain(params: ModelParams) -> None:
    if params.kind not in (ModelKindEnum.retain, ModelKindEnum.retain_ts):
        raise ArgumentError(f"contributions are defined for RETAIN only, got {params.kind.value}")


def contribution_coefficients(trace: ForwardTrace, params: ModelParams) -> np.ndarray:
    """alpha_j * W_out (beta_j * W_emb[:, k]) for every visit j <= i and code k; shape (i, r, s)"""
    if trace.training:
        raise TapeStateError("contributions need a trace computed with dropout off")
    _require_retain(params)
    alphas = trace.attention.alphas
    betas = trace.attention.betas
    W_emb, W_out = params["W_emb"], params["W_out"]
    if betas.shape != (alphas.shape[0], W_emb.shape[0]):
        raise DimensionError("trace attention does not match parameters", betas.shape, W_emb.shape)
    return np.einsum("j,sm,jm,mk->jks", alphas, W_out, betas, W_emb)


def contributions(trace: ForwardTrace, params: ModelParams,
                  record: Optional[Union[PatientRecord, np.ndarray]] = None) -> ContributionMatrix:
    """Weight the coefficients by the input values.

    record defaults to the trace's own inputs. A different record (or r x T
    matrix) is evaluated with the trace's attention held fixed, and the
    result is flagged as counterfactual.
    """
    coefficients = contribution_coefficients(trace, params)
    i = trace.step
    if record is None:
        X = trace.inputs
    elif isinstance(record, PatientRecord):
        X = record.input_matrix(params.dims.r)[:, :i]
    else:
        X = np.asarray(record, dtype=np.float64)[:, :i]
    if X.shape != trace.inputs.shape:
        raise DimensionError("input does not cover the traced visits", X.shape, trace.inputs.shape)
    omega = coefficients * X.T[:, :, None]
    return ContributionMatrix(
        prediction_step=i,
        omega=omega,
        b_out=params["b_out"].copy(),
        inputs=X.copy(),
        y_hat=trace.y_hat.copy(),
        activation=trace.activation,
        counterfactual=not np.array_equal(X, trace.inputs),
    )


def reconstruct_prediction(cm: ContributionMatrix, mode: Optional[ActivationEnum] = None,
                           tolerance: float = RECONSTRUCTION_TOLERANCE) -> np.ndarray:
    """activation(sum of contributions + b_out), checked against the traced prediction"""
    mode = ActivationEnum(mode) if mode else cm.activation
    tape = GradientTape(record=False)
    logits = cm.logits()
    y = (tape.softmax(logits) if mode == ActivationEnum.softmax else tape.sigmoid(logits)).value
    if not cm.counterfactual and mode == cm.activation:
        error = float(np.max(np.abs(y - cm.y_hat)))
        if error > tolerance:
            raise IntegrityError(
                f"reconstruction differs from the forward prediction by {error:.3e} at step {cm.prediction_step}"
            )
    return y


def verify_reconstruction(trace: ForwardTrace, params: ModelParams,
                          record: Optional[PatientRecord] = None) -> float:
    """Infinity-norm gap between the rebuilt and the forward prediction; raises on mismatch"""
    cm = contributions(trace, params, record)
    y = reconstruct_prediction(cm)
    return float(np.max(np.abs(y - trace.y_hat)))


def top_contributors(cm: ContributionMatrix, d: int = 0, n: int = 10) -> List[Contributor]:
    """Present codes ranked by contribution to label d; ties go to the earlier visit, then the lower code"""
    if not 0 <= d < cm.n_labels:
        raise ArgumentError(f"label index {d} outside 0..{cm.n_labels - 1}")
    if n <= 0:
        return []
    visits, codes = np.nonzero(cm.inputs.T)
    entries = [Contributor(int(j) + 1, int(k), float(cm.omega[j, k, d])) for j, k in zip(visits, codes)]
    entries.sort(key=lambda c: (-c.value, c.visit, c.code))
    return entries[:n]


def visit_contributions(cm: ContributionMatrix, d: int = 0) -> np.ndarray:
    """Per-visit total contribution to label d"""
    if not 0 <= d < cm.n_labels:
        raise ArgumentError(f"label index {d} outside 0..{cm.n_labels - 1}")
    return cm.omega[:, :, d].sum(axis=1)


def timeline_rows(cm: ContributionMatrix, record: PatientRecord, vocab: Vocabulary) -> List[list]:
    names = vocab.names()
    rows = []
    for j in range(cm.n_visits):
        day = record.visits[j].day
        for k in np.flatnonzero(cm.inputs[:, j]):
            rows.append([j + 1, day, sanitize_code_name(names[k]), int(k)]
                        + [float(v) for v in cm.omega[j, k, :]])
    return rows


def timeline_header(cm: ContributionMatrix) -> List[str]:
    return ["visit_index", "day_offset", "code_name", "code_index"] + [
        f"contribution_{d}" for d in range(cm.n_labels)
    ]


def export_contribution_timeline(cm: ContributionMatrix, record: PatientRecord, vocab: Vocabulary,
                                 out) -> List[list]:
    """Write the timeline CSV (sorted by visit then code) and return its data rows"""
    from services.storage import write_csv

    if vocab.size < cm.inputs.shape[0]:
        raise DimensionError("vocabulary is smaller than the model input", (vocab.size,), cm.inputs.shape)
    rows = timeline_rows(cm, record, vocab)
    write_csv(out, timeline_header(cm), rows)
    logger.info("exported %d contribution rows for %s", len(rows), record.patient_id)
    return rows


def reverse_visits(record: PatientRecord) -> PatientRecord:
    """Same visit contents in reverse order, keeping the original day offsets in place"""
    visits = [
        v.copy(update={"day": day})
        for v, day in zip(reversed(record.visits), record.days)
    ]
    return record.copy(update={"visits": visits})


def explain(record: PatientRecord, params: ModelParams, step: Optional[int] = None) -> ContributionMatrix:
    """Trace the record with dropout off and decompose the prediction at step (default: last)"""
    _require_retain(params)
    step = record.n_visits if step is None else step
    if not 1 <= step <= record.n_visits:
        raise ArgumentError(f"prediction step {step} outside 1..{record.n_visits}")
    X = record.input_matrix(params.dims.r)
    trace = model_from_params(params).traces(params, X, record.days, [step])[0]
    cm = contributions(trace, params)
    reconstruct_prediction(cm)
    return cm
