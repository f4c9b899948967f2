"""
Comparison models: logistic regression and an MLP over a windowed sum of
past visits, a two-layer forward GRU, a forward GRU with MLP-generated
visit attention, and a visit GRU read through reverse-time scalar
attention without the variable-level gates.
"""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from models import ActivationEnum, GRU_MATRICES, ModelKindEnum, ModelParams, TaskEnum
from schemas import ModelDims, PatientRecord
from services.errors import ArgumentError
from services.nn_core import (
    GradientTape,
    Var,
    cell_vars,
    check_dropout_rate,
    dense,
    dropout,
    forward_rnn,
    init_dense,
    init_gru_cell,
    visibility,
)
from services.retain import ALPHA_CELL, context_op, embed_op, leading, positions, visit_attention_op
from services.sequence_model import SequenceBatch, SequenceModel

logger = logging.getLogger(__name__)

PSEUDO_CONTEXT_WINDOW = 10
VISIT_CELL = "visit"


def pseudo_context(record: PatientRecord, i: int, r: int, window: int = PSEUDO_CONTEXT_WINDOW) -> np.ndarray:
    """Sum of x_{max(1, i-window+1)} .. x_i as a length-r vector"""
    if window < 1:
        raise ArgumentError("pseudo-context window must be at least 1")
    batch = SequenceBatch.from_matrix(record.input_matrix(r), None, [i])
    return window_sums(batch.inputs, batch.ends[0], window)[:, 0]


def window_sums(inputs: np.ndarray, ends: np.ndarray, window: int) -> np.ndarray:
    """r x B sums of the visits ends[b]-window+1 .. ends[b] of every column"""
    if np.all(ends == ends[0]):
        end = int(ends[0])
        return inputs[max(0, end - window + 1):end + 1].sum(axis=0)
    sums = np.empty(inputs.shape[1:])
    for b, end in enumerate(ends):
        sums[:, b] = inputs[max(0, end - window + 1):end + 1, :, b].sum(axis=0)
    return sums


class LogisticRegressionModel(SequenceModel):
    kind = ModelKindEnum.lr
    default_l2 = 0.01

    def __init__(self, dims: ModelDims, task: TaskEnum = TaskEnum.l2d,
                 activation: Optional[ActivationEnum] = None, window: int = PSEUDO_CONTEXT_WINDOW):
        super().__init__(dims, task, activation)
        self.window = window

    def init_tensors(self, rng):
        return {
            "W_out": init_dense(rng, (self.dims.s, self.dims.r)),
            "b_out": np.zeros(self.dims.s),
        }

    def penalized_names(self):
        return ["W_out"]

    def batch_predictions(self, tape, pv, batch, training, rng):
        return [self.output_layer(tape, pv, tape.constant(window_sums(batch.inputs, ends, self.window)))
                for ends in batch.ends]


class MlpModel(SequenceModel):
    kind = ModelKindEnum.mlp

    def __init__(self, dims: ModelDims, task: TaskEnum = TaskEnum.l2d,
                 activation: Optional[ActivationEnum] = None,
                 window: int = PSEUDO_CONTEXT_WINDOW, dropout_hidden: float = 0.6):
        super().__init__(dims, task, activation)
        check_dropout_rate(dropout_hidden)
        self.window = window
        self.dropout_hidden = dropout_hidden

    def init_tensors(self, rng):
        d = self.dims
        return {
            "W_hidden": init_dense(rng, (d.hidden, d.r)),
            "b_hidden": np.zeros(d.hidden),
            "W_out": init_dense(rng, (d.s, d.hidden)),
            "b_out": np.zeros(d.s),
        }

    def penalized_names(self):
        return ["W_hidden", "W_out"]

    def batch_predictions(self, tape, pv, batch, training, rng):
        outputs = []
        for ends in batch.ends:
            sums = window_sums(batch.inputs, ends, self.window)
            hidden = tape.tanh(dense(tape, pv["W_hidden"], sums, pv["b_hidden"]))
            outputs.append(self.output_layer(tape, pv, dropout(tape, hidden, self.dropout_hidden, training, rng)))
        return outputs


class RnnModel(SequenceModel):
    """Two stacked forward-time GRUs over the raw visit vectors"""
    kind = ModelKindEnum.rnn

    def __init__(self, dims: ModelDims, task: TaskEnum = TaskEnum.l2d,
                 activation: Optional[ActivationEnum] = None, dropout_hidden: float = 0.6):
        super().__init__(dims, task, activation)
        check_dropout_rate(dropout_hidden)
        self.dropout_hidden = dropout_hidden

    def init_tensors(self, rng):
        d = self.dims
        tensors = {}
        tensors.update(init_gru_cell(rng, d.r, d.hidden, "rnn1"))
        tensors.update(init_gru_cell(rng, d.hidden, d.hidden, "rnn2"))
        tensors["W_out"] = init_dense(rng, (d.s, d.hidden))
        tensors["b_out"] = np.zeros(d.s)
        return tensors

    def penalized_names(self):
        return ["W_out"]

    def layer_states(self, tape: GradientTape, pv, batch: SequenceBatch, training: bool, rng) -> List[Var]:
        """Second-layer states (hidden x B) for every visit any slot can see"""
        seq = list(batch.inputs[:batch.horizon])
        first = [dropout(tape, h, self.dropout_hidden, training, rng)
                 for h in forward_rnn(tape, seq, cell_vars(pv, "rnn1"))]
        return [dropout(tape, h, self.dropout_hidden, training, rng)
                for h in forward_rnn(tape, first, cell_vars(pv, "rnn2"))]

    def batch_predictions(self, tape, pv, batch, training, rng):
        # forward states at visit j only depend on visits 1..j
        states = self.layer_states(tape, pv, batch, training, rng)
        return [self.output_layer(tape, pv, tape.select_columns(states, ends)) for ends in batch.ends]


class RnnAttentionMlpModel(SequenceModel):
    """Forward GRU whose states are scored by a one-hidden-layer MLP"""
    kind = ModelKindEnum.rnn_attn_mlp

    def __init__(self, dims: ModelDims, task: TaskEnum = TaskEnum.l2d,
                 activation: Optional[ActivationEnum] = None,
                 dropout_hidden: float = 0.4, dropout_c: float = 0.6):
        super().__init__(dims, task, activation)
        check_dropout_rate(dropout_hidden)
        check_dropout_rate(dropout_c)
        self.dropout_hidden = dropout_hidden
        self.dropout_c = dropout_c

    def init_tensors(self, rng):
        d = self.dims
        tensors = {"W_emb": init_dense(rng, (d.m, d.r))}
        tensors.update(init_gru_cell(rng, d.m, d.hidden, "rnn"))
        tensors["W_att"] = init_dense(rng, (d.hidden, d.hidden))
        tensors["b_att"] = np.zeros(d.hidden)
        tensors["w_score"] = init_dense(rng, (d.hidden,))
        tensors["b_score"] = np.zeros(1)
        tensors["W_out"] = init_dense(rng, (d.s, d.m))
        tensors["b_out"] = np.zeros(d.s)
        return tensors

    def penalized_names(self):
        return ["W_att", "W_out"]

    def attention_scores(self, tape: GradientTape, pv, states: Sequence[Var]) -> Var:
        """(n, B) scores w_score^T tanh(W_att g_j + b_att) + b_score"""
        G = tape.stack(states, axis=0)
        hidden = tape.tanh(tape.add(tape.einsum("ij,tjb->tib", pv["W_att"], G),
                                    tape.reshape(pv["b_att"], (1, self.dims.hidden, 1))))
        return tape.add(tape.einsum("i,tib->tb", pv["w_score"], hidden), pv["b_score"])

    def attention(self, tape: GradientTape, pv, states: Sequence[Var], ends: Optional[np.ndarray] = None) -> Var:
        return tape.softmax(self.attention_scores(tape, pv, states), mask=visibility(ends, len(states)))

    def batch_predictions(self, tape, pv, batch, training, rng):
        V = embed_op(tape, pv["W_emb"], batch.inputs[:batch.horizon])
        states = [dropout(tape, g, self.dropout_hidden, training, rng)
                  for g in forward_rnn(tape, positions(tape, V), cell_vars(pv, "rnn"))]
        scores = self.attention_scores(tape, pv, states)
        outputs = []
        for ends in batch.ends:
            n = int(ends.max()) + 1
            alphas = tape.softmax(leading(tape, scores, n), mask=visibility(ends, n))
            c = context_op(tape, leading(tape, V, n), alphas)
            outputs.append(self.output_layer(tape, pv, dropout(tape, c, self.dropout_c, training, rng)))
        return outputs


class RnnAttentionRnnModel(SequenceModel):
    """A forward visit GRU read through RETAIN's reverse-time scalar attention.

    One GRU embeds the visit sequence, a second runs newest-first over the
    visit embeddings and generates the alphas; the context is the
    alpha-weighted sum of the visit GRU states, with no variable-level gates.
    """
    kind = ModelKindEnum.rnn_attn_rnn

    def __init__(self, dims: ModelDims, task: TaskEnum = TaskEnum.l2d,
                 activation: Optional[ActivationEnum] = None,
                 dropout_hidden: float = 0.4, dropout_c: float = 0.6):
        super().__init__(dims, task, activation)
        check_dropout_rate(dropout_hidden)
        check_dropout_rate(dropout_c)
        self.dropout_hidden = dropout_hidden
        self.dropout_c = dropout_c

    def init_tensors(self, rng):
        d = self.dims
        tensors = {"W_emb": init_dense(rng, (d.m, d.r))}
        tensors.update(init_gru_cell(rng, d.m, d.hidden, VISIT_CELL))
        tensors.update(init_gru_cell(rng, d.m, d.hidden, ALPHA_CELL))
        tensors["w_alpha"] = init_dense(rng, (d.hidden,))
        tensors["b_alpha"] = np.zeros(1)
        tensors["W_out"] = init_dense(rng, (d.s, d.hidden))
        tensors["b_out"] = np.zeros(d.s)
        return tensors

    def penalized_names(self):
        # the alpha-generating GRU and the output layer
        return [f"{ALPHA_CELL}.{name}" for name in GRU_MATRICES] + ["W_out"]

    def batch_predictions(self, tape, pv, batch, training, rng):
        V = embed_op(tape, pv["W_emb"], batch.inputs[:batch.horizon])
        inputs = positions(tape, V)
        states = [dropout(tape, h, self.dropout_hidden, training, rng)
                  for h in forward_rnn(tape, inputs, cell_vars(pv, VISIT_CELL))]
        alpha_cell = cell_vars(pv, ALPHA_CELL)
        outputs = []
        for ends in batch.ends:
            n = int(ends.max()) + 1
            alphas, _ = visit_attention_op(tape, inputs[:n], alpha_cell, pv["w_alpha"], pv["b_alpha"], ends)
            c = context_op(tape, tape.stack(states[:n], axis=0), alphas)
            outputs.append(self.output_layer(tape, pv, dropout(tape, c, self.dropout_c, training, rng)))
        return outputs


BASELINES: Dict[ModelKindEnum, type] = {
    ModelKindEnum.lr: LogisticRegressionModel,
    ModelKindEnum.mlp: MlpModel,
    ModelKindEnum.rnn: RnnModel,
    ModelKindEnum.rnn_attn_mlp: RnnAttentionMlpModel,
    ModelKindEnum.rnn_attn_rnn: RnnAttentionRnnModel,
}


def _step_forward(kind: ModelKindEnum, record: PatientRecord, i: int, params: ModelParams,
                  training: bool, rng: Optional[np.random.Generator], **rates) -> np.ndarray:
    if params.kind != kind:
        raise ArgumentError(f"expected {kind.value} parameters, got {params.kind.value}")
    model = BASELINES[kind](params.dims, params.task, params.activation, **rates)
    tape = GradientTape(record=False)
    pv = tape.watch(params.tensors)
    batch = model.make_batch([record], steps=[i])
    return model.batch_predictions(tape, pv, batch, training, rng)[0].value[:, 0].copy()


def lr_forward(record: PatientRecord, i: int, params: ModelParams) -> np.ndarray:
    return _step_forward(ModelKindEnum.lr, record, i, params, False, None)


def mlp_forward(record: PatientRecord, i: int, params: ModelParams, training: bool = False,
                rng: Optional[np.random.Generator] = None, dropout_hidden: float = 0.6) -> np.ndarray:
    return _step_forward(ModelKindEnum.mlp, record, i, params, training, rng, dropout_hidden=dropout_hidden)


def rnn_forward(record: PatientRecord, i: int, params: ModelParams, training: bool = False,
                rng: Optional[np.random.Generator] = None, dropout_hidden: float = 0.6) -> np.ndarray:
    return _step_forward(ModelKindEnum.rnn, record, i, params, training, rng, dropout_hidden=dropout_hidden)


def rnn_attention_mlp_forward(record: PatientRecord, i: int, params: ModelParams, training: bool = False,
                              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return _step_forward(ModelKindEnum.rnn_attn_mlp, record, i, params, training, rng)


def rnn_attention_rnn_forward(record: PatientRecord, i: int, params: ModelParams, training: bool = False,
                              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return _step_forward(ModelKindEnum.rnn_attn_rnn, record, i, params, training, rng)
