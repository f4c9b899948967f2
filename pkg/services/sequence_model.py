"""
Contract shared by RETAIN and the baselines: parameter initialisation,
batched per-step predictions on a tape, the summed cross-entropy loss with
the model-specific L2 penalty, and gradient checking against finite
differences.

Records are evaluated together in a SequenceBatch: visits are left-aligned
and zero-padded into a (T, r, B) block, and every prediction slot names the
last visit each record may see. Nothing past that visit reaches the
slot's prediction.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from models import DEFAULT_ACTIVATION, ActivationEnum, ModelKindEnum, ModelParams, TaskEnum
from schemas import ModelDims, PatientRecord
from services.errors import ArgumentError, DimensionError
from services.nn_core import (
    GradientTape,
    Var,
    dense,
    finite_diff_gradient,
    relative_error,
    weighted_nll,
)

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
EVAL_BATCH = 256  # records per inference pass


def prediction_steps(record: PatientRecord, task: TaskEnum) -> List[int]:
    """1-based prediction steps: every visit for ESM, the last visit for L2D"""
    if record.n_visits < 1:
        raise ArgumentError(f"record {record.patient_id} has no visits")
    if task == TaskEnum.esm:
        return list(range(1, record.n_visits + 1))
    return [record.n_visits]


def timestamp_feature(days: Sequence[int]) -> np.ndarray:
    """log(1 + days since the first visit); zero at the first visit"""
    days = np.asarray(days, dtype=np.float64)
    return np.log1p(days - days[0])


def _uniform_ends(steps: Sequence[int], n_visits: int, width: int) -> np.ndarray:
    if not steps:
        raise ArgumentError("no prediction steps requested")
    for i in steps:
        if not 1 <= i <= n_visits:
            raise ArgumentError(f"prediction step {i} outside 1..{n_visits}")
    return np.repeat(np.asarray(steps, dtype=np.int64)[:, None] - 1, width, axis=1)


@dataclass
class SequenceBatch:
    inputs: np.ndarray  # (T, r, B) visit vectors, zero past each record's last visit
    lengths: np.ndarray  # (B,) visits per record
    taus: np.ndarray  # (T, B) log(1 + days since the first visit)
    ends: np.ndarray  # (K, B) 0-based last visible visit of each prediction slot
    mask: np.ndarray  # (K, B) 1 where the slot is a real prediction of that record
    labels: Optional[np.ndarray] = None  # (K, s, B)

    @property
    def size(self) -> int:
        return self.inputs.shape[2]

    @property
    def n_slots(self) -> int:
        return self.ends.shape[0]

    @property
    def horizon(self) -> int:
        """Visits any slot can see"""
        return int(self.ends.max()) + 1

    def slot_weights(self, n_patients: Optional[int] = None) -> np.ndarray:
        """Per-slot weights that average over each record's steps, then over n_patients"""
        steps = self.mask.sum(axis=0)
        return self.mask / steps / float(n_patients or self.size)

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord], r: int, task: TaskEnum,
                     steps: Optional[Sequence[int]] = None, terminal: bool = False,
                     n_labels: Optional[int] = None) -> "SequenceBatch":
        """Pad records into one batch.

        Slots are the explicit 1-based steps when given, the last visit of
        each record for L2D or terminal=True, and every visit for ESM.
        Labels are attached when n_labels is given.
        """
        if not records:
            raise ArgumentError("cannot batch an empty list of records")
        lengths = np.array([record.n_visits for record in records], dtype=np.int64)
        T, B = int(lengths.max()), len(records)
        inputs = np.zeros((T, r, B))
        taus = np.zeros((T, B))
        for b, record in enumerate(records):
            inputs[:record.n_visits, :, b] = record.input_matrix(r).T
            taus[:record.n_visits, b] = timestamp_feature(record.days)

        if steps is not None:
            ends = _uniform_ends(list(steps), int(lengths.min()), B)
            mask = np.ones(ends.shape)
        elif terminal or task == TaskEnum.l2d:
            ends = (lengths - 1)[None, :]
            mask = np.ones(ends.shape)
        else:
            ends = np.repeat(np.arange(T)[:, None], B, axis=1)
            mask = (ends < lengths[None, :]).astype(np.float64)

        labels = None
        if n_labels is not None:
            labels = np.zeros((ends.shape[0], n_labels, B))
            for b, record in enumerate(records):
                y = record.label_matrix()
                expected = (n_labels, int(mask[:, b].sum()))
                if y.shape != expected:
                    raise DimensionError(f"labels of {record.patient_id} do not fit the model", y.shape, expected)
                labels[:y.shape[1], :, b] = y.T
        return cls(inputs, lengths, taus, ends, mask, labels)

    @classmethod
    def from_matrix(cls, X: np.ndarray, days: Optional[Sequence[int]], steps: Sequence[int]) -> "SequenceBatch":
        """A batch of one from a raw r x T input matrix"""
        n_visits = X.shape[1]
        taus = np.zeros((n_visits, 1))
        if days is not None:
            taus[:, 0] = timestamp_feature(days)
        ends = _uniform_ends(list(steps), n_visits, 1)
        return cls(np.ascontiguousarray(X.T[:, :, None]), np.array([n_visits]), taus, ends, np.ones(ends.shape))


class SequenceModel(ABC):
    """A model that maps batches of visit sequences to per-step probabilities"""

    kind: ModelKindEnum
    default_l2: float = 1e-4

    def __init__(self, dims: ModelDims, task: TaskEnum = TaskEnum.l2d,
                 activation: Optional[ActivationEnum] = None):
        self.dims = dims
        self.task = TaskEnum(task)
        self.activation = ActivationEnum(activation) if activation else DEFAULT_ACTIVATION[self.task]

    # parameters
    @abstractmethod
    def init_tensors(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        ...

    @abstractmethod
    def penalized_names(self) -> List[str]:
        """Weights that receive the L2 penalty"""

    def init_params(self, seed: int = 0) -> ModelParams:
        rng = np.random.default_rng(seed)
        return ModelParams(
            kind=self.kind,
            dims=self.dims,
            task=self.task,
            activation=self.activation,
            tensors=self.init_tensors(rng),
        )

    def check_params(self, params: ModelParams) -> None:
        expected = self.init_tensors(np.random.default_rng(0))
        if set(expected) != set(params.tensors):
            missing = sorted(set(expected) - set(params.tensors))
            extra = sorted(set(params.tensors) - set(expected))
            raise ArgumentError(f"{self.kind.value} parameters mismatch (missing {missing}, unexpected {extra})")
        for name, tensor in expected.items():
            if params.tensors[name].shape != tensor.shape:
                raise DimensionError(f"parameter {name} has the wrong shape", params.tensors[name].shape, tensor.shape)

    # forward
    @abstractmethod
    def batch_predictions(self, tape: GradientTape, pv: Mapping[str, Var], batch: SequenceBatch,
                          training: bool, rng: Optional[np.random.Generator]) -> List[Var]:
        """One s x B probability matrix per prediction slot"""

    def make_batch(self, records: Sequence[PatientRecord], steps: Optional[Sequence[int]] = None,
                   terminal: bool = False, with_labels: bool = False) -> SequenceBatch:
        return SequenceBatch.from_records(records, self.dims.r, self.task, steps, terminal,
                                          self.dims.s if with_labels else None)

    def activate(self, tape: GradientTape, logits: Var) -> Var:
        if self.activation == ActivationEnum.softmax:
            return tape.softmax(logits)
        return tape.sigmoid(logits)

    def output_layer(self, tape: GradientTape, pv: Mapping[str, Var], c: Var) -> Var:
        return self.activate(tape, dense(tape, pv["W_out"], c, pv["b_out"]))

    def predict(self, params: ModelParams, record: PatientRecord,
                steps: Optional[Sequence[int]] = None) -> List[np.ndarray]:
        """Inference-mode probabilities, one vector per step"""
        tape = GradientTape(record=False)
        pv = tape.watch(params.tensors)
        batch = self.make_batch([record], steps)
        return [y.value[:, 0].copy() for y in self.batch_predictions(tape, pv, batch, False, None)]

    def predict_records(self, params: ModelParams, records: Sequence[PatientRecord],
                        terminal: bool = False) -> List[List[np.ndarray]]:
        """Inference-mode probabilities for many records, EVAL_BATCH at a time"""
        tape = GradientTape(record=False)
        pv = tape.watch(params.tensors)
        results: List[List[np.ndarray]] = []
        for start in range(0, len(records), EVAL_BATCH):
            batch = self.make_batch(records[start:start + EVAL_BATCH], terminal=terminal)
            outputs = [y.value for y in self.batch_predictions(tape, pv, batch, False, None)]
            for b in range(batch.size):
                results.append([y[:, b].copy() for k, y in enumerate(outputs) if batch.mask[k, b]])
        return results

    # loss
    def _nll(self, tape: GradientTape, pv: Mapping[str, Var], records: Sequence[PatientRecord],
             training: bool, rng: Optional[np.random.Generator], n_patients: int) -> Var:
        batch = self.make_batch(records, with_labels=True)
        y_hats = self.batch_predictions(tape, pv, batch, training, rng)
        return weighted_nll(tape, y_hats, batch.labels, batch.slot_weights(n_patients))

    def l2_penalty(self, tape: GradientTape, pv: Mapping[str, Var], coefficient: float) -> Optional[Var]:
        if not coefficient:
            return None
        squares = [tape.sum(tape.mul(pv[name], pv[name])) for name in self.penalized_names()]
        total = squares[0] if len(squares) == 1 else tape.add(*squares)
        return tape.mul(total, coefficient)

    def batch_loss(self, tape: GradientTape, pv: Mapping[str, Var], records: Sequence[PatientRecord],
                   training: bool = False, rng: Optional[np.random.Generator] = None,
                   l2: Optional[float] = None) -> Var:
        """Mean per-patient NLL plus the L2 penalty, in one pass over the batch"""
        nll = self._nll(tape, pv, records, training, rng, len(records))
        penalty = self.l2_penalty(tape, pv, self.default_l2 if l2 is None else l2)
        return nll if penalty is None else tape.add(nll, penalty)

    def loss_and_gradients(self, params: ModelParams, records: Sequence[PatientRecord],
                           training: bool = False, rng: Optional[np.random.Generator] = None,
                           l2: Optional[float] = None):
        tape = GradientTape()
        pv = tape.watch(params.tensors)
        loss = self.batch_loss(tape, pv, records, training, rng, l2)
        return float(loss.value[0]), tape.backward(loss)

    def loss_value(self, tensors: Mapping[str, np.ndarray], records: Sequence[PatientRecord],
                   l2: Optional[float] = None) -> float:
        """Inference-mode batch_loss, evaluated EVAL_BATCH records at a time"""
        if not records:
            raise ArgumentError("cannot average an empty list")
        tape = GradientTape(record=False)
        pv = tape.watch(tensors)
        total = 0.0
        for start in range(0, len(records), EVAL_BATCH):
            chunk = records[start:start + EVAL_BATCH]
            total += float(self._nll(tape, pv, chunk, False, None, len(records)).value[0])
        penalty = self.l2_penalty(tape, pv, self.default_l2 if l2 is None else l2)
        return total if penalty is None else total + float(penalty.value[0])


def gradient_check(model: SequenceModel, params: ModelParams, records: Sequence[PatientRecord],
                   l2: Optional[float] = None, h: float = 1e-5) -> Dict[str, float]:
    """Max element-wise relative error between backward and central differences, per parameter"""
    _, analytic = model.loss_and_gradients(params, records, l2=l2)
    numeric = finite_diff_gradient(lambda tensors: model.loss_value(tensors, records, l2), params.tensors, h)
    errors = {name: float(relative_error(analytic[name], numeric[name]).max()) for name in params.names()}
    worst = max(errors.values()) if errors else 0.0
    logger.debug("gradient check for %s: worst relative error %.3e", model.kind.value, worst)
    return errors
