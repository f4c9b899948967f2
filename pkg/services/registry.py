"""
Model registry: one place that maps a model kind to its implementation so
training, evaluation, checkpoints and the CLI stay model-agnostic.
"""
import logging
from typing import List, Optional

import numpy as np

from models import ActivationEnum, ModelKindEnum, ModelParams, TaskEnum
from schemas import ModelDims, PatientRecord, TrainConfig, Visit
from services.baselines import BASELINES
from services.errors import ArgumentError
from services.retain import RetainModel
from services.sequence_model import SequenceModel

logger = logging.getLogger(__name__)

DESK_DIMS = 32
FULL_DIMS = 128
FULL_HIDDEN = 256


def available_kinds() -> List[str]:
    return [kind.value for kind in ModelKindEnum]


def resolve_dims(r: int, s: int, full_dims: bool = False, size: Optional[int] = None) -> ModelDims:
    """Desk-scale dims (32) unless full-scale dims (128, baseline hidden 256) are requested"""
    if size is not None:
        return ModelDims(r=r, m=size, p=size, q=size, s=s, hidden=size)
    if full_dims:
        return ModelDims(r=r, m=FULL_DIMS, p=FULL_DIMS, q=FULL_DIMS, s=s, hidden=FULL_HIDDEN)
    return ModelDims(r=r, m=DESK_DIMS, p=DESK_DIMS, q=DESK_DIMS, s=s, hidden=DESK_DIMS)


def build_model(kind: ModelKindEnum, dims: ModelDims, task: TaskEnum = TaskEnum.l2d,
                activation: Optional[ActivationEnum] = None,
                config: Optional[TrainConfig] = None) -> SequenceModel:
    """Instantiate a model; RETAIN reads its two dropout rates from the training config"""
    try:
        kind = ModelKindEnum(kind)
    except ValueError:
        raise ArgumentError(f"unknown model kind {kind!r}; expected one of {available_kinds()}") from None
    if kind in (ModelKindEnum.retain, ModelKindEnum.retain_ts):
        rates = {}
        if config is not None:
            rates = {"dropout_v": config.dropout_v, "dropout_c": config.dropout_c}
        return RetainModel(dims, task, activation, timestamped=kind == ModelKindEnum.retain_ts, **rates)
    return BASELINES[kind](dims, task, activation)


def model_for(params: ModelParams, config: Optional[TrainConfig] = None) -> SequenceModel:
    model = build_model(params.kind, params.dims, params.task, params.activation, config)
    model.check_params(params)
    return model


GRADCHECK_DIMS = {"r": 10, "m": 4, "p": 4, "q": 4, "hidden": 4}
GRADCHECK_VISITS = 5


def gradient_check_case(kind: ModelKindEnum, task: TaskEnum = TaskEnum.l2d, seed: int = 0,
                        n_visits: int = GRADCHECK_VISITS):
    """A tiny model, seeded parameters and one random patient for finite-difference checks"""
    task = TaskEnum(task)
    rng = np.random.default_rng(seed)
    s = 1 if task == TaskEnum.l2d else 3
    dims = ModelDims(s=s, **GRADCHECK_DIMS)
    visits = []
    for j in range(n_visits):
        codes = sorted(int(k) for k in rng.choice(dims.r, size=int(rng.integers(1, 4)), replace=False))
        visits.append(Visit(day=7 * j + int(rng.integers(0, 7)), codes=codes))
    if task == TaskEnum.l2d:
        labels = [[0]]
    else:
        labels = [sorted(int(d) for d in rng.choice(s, size=int(rng.integers(1, s + 1)), replace=False))
                  for _ in range(n_visits)]
    record = PatientRecord(patient_id="gradcheck", task=task, n_labels=s, visits=visits, labels=labels)
    model = build_model(kind, dims, task)
    params = model.init_params(seed)
    # shift every tensor off its initial value so zero biases are exercised too
    params = params.replace({name: t + rng.normal(0.0, 0.1, size=t.shape) for name, t in params})
    return model, params, [record]
