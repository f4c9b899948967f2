"""
Mini-batch training with Adam, global-norm clipping, the per-model L2
penalty and early stopping on validation NLL; plus a random hyper-parameter
search over the YAML grids.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models import ModelParams, SplitEnum
from schemas import Cohort, EpochRecord, ModelDims, PatientRecord, TrainConfig
from services.errors import ArgumentError, NumericalError, TrainingDivergedError
from services.registry import build_model, resolve_dims
from services.search_space import SearchSpace
from services.sequence_model import SequenceModel
from services.structured_logger import structured_logger

logger = logging.getLogger(__name__)


class AdamOptimizer:
    """Bias-corrected Adam over a dict of named tensors"""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AdamOptimizer":
        return cls(config.learning_rate, config.beta1, config.beta2, config.epsilon)

    def step(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Return updated copies; the inputs are left untouched"""
        self.t += 1
        updated = {}
        for name, value in tensors.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(value))
            v = self.v.get(name, np.zeros_like(value))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            updated[name] = value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
        return updated


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or not math.isfinite(norm):
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    train_seconds: float = 0.0
    max_grad_norm: float = 0.0
    stopped_early: bool = False


def split_records(cohort: Union[Cohort, Sequence[PatientRecord]]) -> Tuple[List[PatientRecord], List[PatientRecord]]:
    """(train, valid); records without a split assignment all count as training data"""
    records = cohort.records if isinstance(cohort, Cohort) else list(cohort)
    if all(r.split is None for r in records):
        return records, []
    return ([r for r in records if r.split == SplitEnum.train],
            [r for r in records if r.split == SplitEnum.valid])


def infer_dims(records: Sequence[PatientRecord], r: Optional[int] = None, full_dims: bool = False,
               size: Optional[int] = None) -> ModelDims:
    """Dims from the data: r from the largest code unless given, s from the records' label count"""
    if not records:
        raise ArgumentError("cannot infer dimensions from an empty cohort")
    r = r or max(v.codes[-1] for rec in records for v in rec.visits) + 1
    return resolve_dims(r, records[0].n_labels, full_dims, size)


def train(cohort: Union[Cohort, Sequence[PatientRecord]], config: TrainConfig,
          dims: Optional[ModelDims] = None, model: Optional[SequenceModel] = None) -> TrainResult:
    """Mini-batch Adam on the training split, early stopping on the validation split"""
    train_records, valid_records = split_records(cohort)
    if not train_records:
        raise ArgumentError("training split is empty")
    if model is None:
        dims = dims or infer_dims(train_records)
        model = build_model(config.model_kind, dims, config.task, config.activation, config)
    l2 = config.l2_coefficient

    rng = np.random.default_rng(config.seed)
    params = model.init_params(config.seed)
    optimizer = AdamOptimizer.from_config(config)
    result = TrainResult(params=params)
    best_valid, best_params, waited = math.inf, None, 0
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_records))
        total, seen = 0.0, 0
        for batch, start in enumerate(range(0, len(order), config.batch_size), start=1):
            records = [train_records[i] for i in order[start:start + config.batch_size]]
            try:
                loss, grads = model.loss_and_gradients(params, records, training=True, rng=rng, l2=l2)
            except NumericalError as e:
                raise TrainingDivergedError(epoch, batch, result.max_grad_norm) from e
            grads, norm = clip_by_global_norm(grads, config.clip_norm)
            if math.isfinite(norm):
                result.max_grad_norm = max(result.max_grad_norm, norm)
            if not (math.isfinite(loss) and math.isfinite(norm)):
                raise TrainingDivergedError(epoch, batch, result.max_grad_norm if math.isfinite(norm) else norm)
            params = params.replace(optimizer.step(params.tensors, grads))
            total += loss * len(records)
            seen += len(records)

        valid_nll = model.loss_value(params.tensors, valid_records, l2=0.0) if valid_records else None
        record = EpochRecord(epoch=epoch, train_nll=total / seen, valid_nll=valid_nll)
        result.history.append(record)
        structured_logger.log_epoch(model.kind.value, epoch, record.train_nll, valid_nll)

        if valid_nll is None:
            continue
        if valid_nll < best_valid:
            best_valid, best_params, waited = valid_nll, params.copy(), 0
            result.best_epoch = epoch
        else:
            waited += 1
            if config.patience is not None and waited >= config.patience:
                result.stopped_early = True
                logger.info("early stop after epoch %d (best epoch %s)", epoch, result.best_epoch)
                break

    result.params = best_params if best_params is not None else params
    if result.best_epoch is None:
        result.best_epoch = len(result.history)
    result.train_seconds = time.perf_counter() - started
    return result


def random_search(cohort: Cohort, base_config: TrainConfig, space: SearchSpace, n_trials: int,
                  seed: int = 0, r: Optional[int] = None) -> List[Dict[str, Any]]:
    """Train one model per sampled grid point; trials ranked by best validation NLL"""
    if n_trials < 1:
        raise ArgumentError("n_trials must be at least 1")
    train_records, valid_records = split_records(cohort)
    if not valid_records:
        raise ArgumentError("random search needs a validation split")
    rng = np.random.default_rng(seed)
    trials = []
    for trial in range(n_trials):
        sample = space.sample(rng)
        update = {k: sample[k] for k in ("l2_coefficient", "dropout_v", "dropout_c")}
        if space.epochs:
            update["epochs"] = int(space.epochs)
        config = base_config.copy(update=update)
        dims = infer_dims(train_records, r=r, size=sample["size"])
        result = train(cohort, config, dims)
        best = min(h.valid_nll for h in result.history if h.valid_nll is not None)
        trials.append({"trial": trial, **sample, "valid_nll": best, "best_epoch": result.best_epoch})
        logger.info("trial %d: %s -> valid nll %.5f", trial, sample, best)
    return sorted(trials, key=lambda t: (t["valid_nll"], t["trial"]))
