import math
import re
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, validator, root_validator

from models import ActivationEnum, ModelKindEnum, RoleEnum, SplitEnum, TaskEnum

CODE_NAME_PATTERN = re.compile(r"^[A-Za-z0-9_ ]+$")


def sanitize_code_name(name: str) -> str:
    """Map a display name onto the CSV-safe alphabet [A-Za-z0-9_ ]"""
    cleaned = re.sub(r"[^A-Za-z0-9_ ]", "_", name).strip()
    return cleaned or "_"


# Model configuration
class ModelDims(BaseModel):
    r: int  # input vocabulary size
    m: int = 128  # embedding size
    p: int = 128  # RNN_alpha hidden size
    q: int = 128  # RNN_beta hidden size
    s: int = 1  # label count
    hidden: int = 256  # baseline hidden layers

    class Config:
        allow_mutation = False

    @validator("r", "m", "p", "q", "s", "hidden")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("dimensions must be positive")
        return value


# Records
class Visit(BaseModel):
    day: int
    codes: List[int]
    values: Optional[List[float]] = None

    @validator("day")
    def _nonnegative_day(cls, value):
        if value < 0:
            raise ValueError("day offsets must be non-negative")
        return value

    @validator("codes")
    def _canonical_codes(cls, codes):
        if not codes:
            raise ValueError("every visit needs at least one code")
        if any(c < 0 for c in codes):
            raise ValueError("code indices must be non-negative")
        if any(b <= a for a, b in zip(codes, codes[1:])):
            raise ValueError("codes must be sorted ascending without duplicates")
        return codes

    @validator("values")
    def _values_match_codes(cls, value, values):
        if value is None:
            return value
        codes = values.get("codes") or []
        if len(value) != len(codes):
            raise ValueError("values must align with codes")
        if not all(math.isfinite(v) for v in value):
            raise ValueError("values must be finite")
        return value


class PatientRecord(BaseModel):
    patient_id: str
    task: TaskEnum = TaskEnum.l2d
    n_labels: int = 1
    visits: List[Visit]
    labels: List[List[int]] = []
    role: Optional[RoleEnum] = None
    sex: Optional[str] = None
    age_band: Optional[str] = None
    index_day: Optional[int] = None
    case_id: Optional[str] = None
    split: Optional[SplitEnum] = None

    @validator("visits")
    def _ordered_visits(cls, visits):
        if not visits:
            raise ValueError("a record needs at least one visit")
        days = [v.day for v in visits]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise ValueError("visit days must be strictly increasing")
        return visits

    @root_validator(skip_on_failure=True)
    def _labels_fit_task(cls, values):
        labels = values.get("labels") or []
        n_labels = values.get("n_labels")
        task = values.get("task")
        visits = values.get("visits") or []
        if labels:
            expected = 1 if task == TaskEnum.l2d else len(visits)
            if len(labels) != expected:
                raise ValueError(f"{task.value} records need {expected} label sets, got {len(labels)}")
            for step in labels:
                if any(b <= a for a, b in zip(step, step[1:])):
                    raise ValueError("label indices must be sorted ascending without duplicates")
                if any(d < 0 or d >= n_labels for d in step):
                    raise ValueError("label index outside n_labels")
        return values

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    @property
    def days(self) -> List[int]:
        return [v.day for v in self.visits]

    def input_matrix(self, r: int) -> np.ndarray:
        """Dense r x T input; binary unless a visit carries explicit values"""
        from services.errors import DimensionError

        x = np.zeros((r, self.n_visits), dtype=np.float64)
        for j, visit in enumerate(self.visits):
            if visit.codes[-1] >= r:
                raise DimensionError(
                    f"record {self.patient_id} uses code {visit.codes[-1]} outside vocabulary", (r,)
                )
            x[visit.codes, j] = visit.values if visit.values is not None else 1.0
        return x

    def label_matrix(self) -> np.ndarray:
        """Dense s x steps label matrix (one column for L2D, T for ESM)"""
        y = np.zeros((self.n_labels, len(self.labels)), dtype=np.float64)
        for i, step in enumerate(self.labels):
            y[step, i] = 1.0
        return y


class Vocabulary(BaseModel):
    groups: Dict[str, List[str]]

    @validator("groups")
    def _names_are_safe(cls, groups):
        for names in groups.values():
            for name in names:
                if not CODE_NAME_PATTERN.match(name):
                    raise ValueError(f"code name {name!r} is not CSV-safe")
        return groups

    @classmethod
    def default(cls, diagnosis: int = 283, medication: int = 96, procedure: int = 238) -> "Vocabulary":
        return cls(groups={
            "diagnosis": [f"DX_{i:03d}" for i in range(diagnosis)],
            "medication": [f"RX_{i:03d}" for i in range(medication)],
            "procedure": [f"PX_{i:03d}" for i in range(procedure)],
        })

    @property
    def size(self) -> int:
        return sum(len(names) for names in self.groups.values())

    def names(self) -> List[str]:
        return [name for names in self.groups.values() for name in names]

    def name(self, index: int) -> str:
        return self.names()[index]

    def group_range(self, group: str) -> Tuple[int, int]:
        start = 0
        for key, names in self.groups.items():
            if key == group:
                return start, start + len(names)
            start += len(names)
        raise KeyError(group)


# Cohort generation
class CohortConfig(BaseModel):
    n_cases: int = 100
    controls_per_case: int = 10
    diagnosis_codes: int = 283
    medication_codes: int = 96
    procedure_codes: int = 238
    min_visits: int = 5
    max_visits: int = 30
    codes_per_visit: Tuple[int, int] = (1, 6)
    power_law_exponent: float = 1.1
    risk_codes: List[int] = [5, 17, 42]
    motif_kind: str = "recency"
    motif_window: int = 5
    gap_days: int = 90
    decoy_rate: float = 0.5
    decoy_window: int = 10
    carryover_rate: float = 0.3  # chance a background code recurs at the next visit
    max_span_days: int = 540
    task: TaskEnum = TaskEnum.l2d
    seed: int = 0

    @validator("motif_kind")
    def _known_motif(cls, value):
        if value not in ("recency", "gap"):
            raise ValueError("motif_kind must be 'recency' or 'gap'")
        return value

    @validator("max_visits")
    def _visit_range(cls, value, values):
        min_visits = values.get("min_visits", 1)
        if value < min_visits or min_visits < 1:
            raise ValueError("visit range must satisfy 1 <= min_visits <= max_visits")
        return value

    @property
    def vocab_size(self) -> int:
        return self.diagnosis_codes + self.medication_codes + self.procedure_codes


# Training
class TrainConfig(BaseModel):
    batch_size: int = 100
    epochs: int = 30
    l2_coefficient: Optional[float] = None  # None selects the per-model default
    dropout_v: float = 0.6
    dropout_c: float = 0.6
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: Optional[float] = 5.0
    patience: Optional[int] = 5
    seed: int = 0
    model_kind: ModelKindEnum = ModelKindEnum.retain
    task: TaskEnum = TaskEnum.l2d
    activation: Optional[ActivationEnum] = None

    @validator("batch_size", "epochs")
    def _at_least_one(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @validator("dropout_v", "dropout_c")
    def _dropout_rate(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")
        return value


class EpochRecord(BaseModel):
    epoch: int
    train_nll: float
    valid_nll: Optional[float] = None


class EvalReport(BaseModel):
    model_kind: ModelKindEnum
    task: TaskEnum
    split: Optional[SplitEnum] = None
    n_patients: int
    neg_log_likelihood: float
    auc: Optional[float] = None
    recall_at_k: Dict[int, float] = {}
    train_seconds: Optional[float] = None
    test_seconds: float = 0.0

    @validator("neg_log_likelihood", "auc", "train_seconds", "test_seconds")
    def _finite(cls, value):
        if value is not None and not math.isfinite(value):
            raise ValueError("metrics must be finite")
        return value

    @validator("recall_at_k")
    def _recall_range(cls, recalls):
        for value in recalls.values():
            if not 0.0 <= value <= 1.0:
                raise ValueError("recall values must lie in [0, 1]")
        return recalls


# Files
class CheckpointDocument(BaseModel):
    format_version: int = 1
    model_kind: ModelKindEnum
    dims: ModelDims
    task: TaskEnum
    activation: ActivationEnum
    timestamped: bool = False
    params: Dict[str, Any]


class CliConfig(BaseModel):
    subcommand: str
    data_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    output_path: Optional[str] = None
    model_kind: ModelKindEnum = ModelKindEnum.retain
    task: TaskEnum = TaskEnum.l2d
    seed: int = 0
    full_dims: bool = False
    train: TrainConfig = Field(default_factory=TrainConfig)
    cohort: CohortConfig = Field(default_factory=CohortConfig)
    options: Dict[str, Any] = {}


class RunManifest(BaseModel):
    subcommand: str
    seed: int
    config: Dict[str, Any]
    outputs: Dict[str, str] = {}


class Cohort(BaseModel):
    records: List[PatientRecord] = []
    vocab: Optional[Vocabulary] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def patient_ids(self) -> List[str]:
        return [r.patient_id for r in self.records]

    @property
    def roles(self) -> Dict[str, Optional[RoleEnum]]:
        return {r.patient_id: r.role for r in self.records}

    @property
    def matching(self) -> Dict[str, str]:
        """control id -> case id"""
        return {r.patient_id: r.case_id for r in self.records if r.role == RoleEnum.control and r.case_id}

    @property
    def splits(self) -> Dict[str, Optional[SplitEnum]]:
        return {r.patient_id: r.split for r in self.records}

    def get(self, patient_id: str) -> PatientRecord:
        for record in self.records:
            if record.patient_id == patient_id:
                return record
        raise KeyError(patient_id)

    def subset(self, split: SplitEnum) -> List[PatientRecord]:
        return [r for r in self.records if r.split == split]
