"""
Model vocabulary: enums shared across services plus the parameter containers
every sequence model reads and the optimizer updates.
"""
import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, Tuple

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from schemas import ModelDims


class TaskEnum(str, enum.Enum):
    l2d = "l2d"  # one terminal label set per patient
    esm = "esm"  # next-visit diagnosis codes at every step


class ActivationEnum(str, enum.Enum):
    sigmoid = "sigmoid"
    softmax = "softmax"


class ModelKindEnum(str, enum.Enum):
    retain = "retain"
    retain_ts = "retain-ts"
    lr = "lr"
    mlp = "mlp"
    rnn = "rnn"
    rnn_attn_mlp = "rnn-attn-mlp"
    rnn_attn_rnn = "rnn-attn-rnn"


class RoleEnum(str, enum.Enum):
    case = "case"
    control = "control"


class SplitEnum(str, enum.Enum):
    train = "train"
    valid = "valid"
    test = "test"


DEFAULT_ACTIVATION = {
    TaskEnum.l2d: ActivationEnum.sigmoid,
    TaskEnum.esm: ActivationEnum.softmax,
}

GRU_MATRICES = ("W_update", "W_reset", "W_cand", "U_update", "U_reset", "U_cand")
GRU_BIASES = ("b_update", "b_reset", "b_cand")
GRU_FIELDS = GRU_MATRICES + GRU_BIASES


def gru_names(prefix: str) -> List[str]:
    return [f"{prefix}.{name}" for name in GRU_FIELDS]


@dataclass(frozen=True)
class GruCellParams:
    """The nine tensors of one GRU cell. W_* are hidden x input, U_* hidden x hidden."""
    W_update: np.ndarray
    W_reset: np.ndarray
    W_cand: np.ndarray
    U_update: np.ndarray
    U_reset: np.ndarray
    U_cand: np.ndarray
    b_update: np.ndarray
    b_reset: np.ndarray
    b_cand: np.ndarray

    def __post_init__(self):
        from services.errors import DimensionError

        w_shape = self.W_update.shape
        u_shape = self.U_update.shape
        if self.W_reset.shape != w_shape or self.W_cand.shape != w_shape:
            raise DimensionError("GRU input matrices differ", w_shape, self.W_reset.shape, self.W_cand.shape)
        if self.U_reset.shape != u_shape or self.U_cand.shape != u_shape:
            raise DimensionError("GRU recurrent matrices differ", u_shape, self.U_reset.shape, self.U_cand.shape)
        hidden = u_shape[0]
        if u_shape != (hidden, hidden) or w_shape[0] != hidden:
            raise DimensionError("GRU matrices are not hidden-sized", w_shape, u_shape)
        for bias in (self.b_update, self.b_reset, self.b_cand):
            if bias.shape != (hidden,):
                raise DimensionError("GRU bias length differs from hidden size", bias.shape, (hidden,))

    @property
    def input_size(self) -> int:
        return self.W_update.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.U_update.shape[0]

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], prefix: str) -> "GruCellParams":
        return cls(**{name: tensors[f"{prefix}.{name}"] for name in GRU_FIELDS})

    def to_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.{name}": getattr(self, name) for name in GRU_FIELDS}


@dataclass
class ModelParams:
    """Named learnable tensors of one model plus the settings needed to run it."""
    kind: ModelKindEnum
    dims: "ModelDims"
    task: TaskEnum
    activation: ActivationEnum
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def timestamped(self) -> bool:
        return self.kind == ModelKindEnum.retain_ts

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def names(self) -> List[str]:
        return list(self.tensors)

    def cell(self, prefix: str) -> GruCellParams:
        return GruCellParams.from_tensors(self.tensors, prefix)

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            kind=self.kind,
            dims=self.dims,
            task=self.task,
            activation=self.activation,
            tensors={name: t.copy() for name, t in self.tensors.items()},
        )

    def replace(self, tensors: Dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.kind, self.dims, self.task, self.activation, dict(tensors))
