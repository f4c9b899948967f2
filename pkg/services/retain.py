"""
RETAIN: reverse-time two-level attention over visit embeddings.

For a prediction at step i the model embeds visits 1..i, runs two GRUs over
them newest-first, turns the first into one scalar weight per visit (alpha)
and the second into one gate vector per visit (beta), and predicts from the
context vector sum_j alpha_j * beta_j * v_j. The timestamped variant feeds
[v_j, log(1 + days since first visit)] to both attention GRUs while the
context vector keeps using v_j.

A whole batch runs at once: embeddings are a (T, m, B) block and each
prediction slot runs the two reverse-time GRUs from its own last visit.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from models import ActivationEnum, ModelKindEnum, ModelParams, TaskEnum
from schemas import ModelDims, PatientRecord
from services.errors import ArgumentError, DimensionError
from services.nn_core import (
    GradientTape,
    Var,
    cell_vars,
    check_dropout_rate,
    dense,
    dropout,
    init_dense,
    init_gru_cell,
    reverse_rnn,
    visibility,
)
from services.sequence_model import SequenceBatch, SequenceModel

logger = logging.getLogger(__name__)

ALPHA_CELL = "alpha"
BETA_CELL = "beta"
DEFAULT_DROPOUT_V = 0.6
DEFAULT_DROPOUT_C = 0.6


@dataclass
class AttentionProfile:
    alphas: np.ndarray  # (i,), sums to one
    betas: np.ndarray  # (i, m), row j is beta_j
    prediction_step: int


@dataclass
class ForwardTrace:
    """Every intermediate of one prediction at 1-based step i"""
    step: int
    inputs: np.ndarray  # x_1..x_i as an r x i matrix
    embeddings: np.ndarray  # v_1..v_i as an m x i matrix (after dropout when training)
    alpha_states: np.ndarray  # g_1..g_i, p x i
    beta_states: np.ndarray  # h_1..h_i, q x i
    attention: AttentionProfile
    context: np.ndarray
    logits: np.ndarray
    y_hat: np.ndarray
    activation: ActivationEnum
    training: bool = False
    timestamps: Optional[np.ndarray] = field(default=None)


class SlotVars(NamedTuple):
    """One prediction slot over a batch; position-major blocks are (n, width, B)"""
    embeddings: Var  # (n, m, B)
    alphas: Var  # (n, B)
    betas: Var  # (n, m, B)
    alpha_states: Var  # (n, p, B)
    beta_states: Var  # (n, q, B)
    context: Var  # (m, B)
    logits: Var
    y_hat: Var


# Tape-level building blocks, shared with the attention baselines

def embed_op(tape: GradientTape, W_emb: Var, X: np.ndarray) -> Var:
    """(T, r, B) visit vectors to (T, m, B) embeddings"""
    return tape.einsum("mr,trb->tmb", W_emb, X)


def positions(tape: GradientTape, block: Var) -> List[Var]:
    """Split a (T, width, B) block into T (width, B) inputs"""
    return [tape.index(block, t) for t in range(block.shape[0])]


def leading(tape: GradientTape, block: Var, n: int) -> Var:
    return block if block.shape[0] == n else tape.index(block, slice(0, n))


def visit_attention_op(tape: GradientTape, inputs: Sequence[Var], cell: Mapping[str, Var],
                       w_alpha: Var, b_alpha: Var, ends: Optional[np.ndarray] = None):
    """alpha = softmax(w_alpha^T g_j + b_alpha) over reverse-time GRU states g_j.

    Returns alphas as (n, B) and the stacked states as (n, p, B).
    """
    G = tape.stack(reverse_rnn(tape, inputs, cell, ends), axis=0)
    e = tape.add(tape.einsum("p,tpb->tb", w_alpha, G), b_alpha)
    return tape.softmax(e, mask=visibility(ends, len(inputs))), G


def variable_attention_op(tape: GradientTape, inputs: Sequence[Var], cell: Mapping[str, Var],
                          W_beta: Var, b_beta: Var, ends: Optional[np.ndarray] = None):
    """beta_j = tanh(W_beta h_j + b_beta) as an (n, m, B) block, with the stacked states"""
    H = tape.stack(reverse_rnn(tape, inputs, cell, ends), axis=0)
    m = W_beta.shape[0]
    betas = tape.tanh(tape.add(tape.einsum("mq,tqb->tmb", W_beta, H), tape.reshape(b_beta, (1, m, 1))))
    return betas, H


def context_op(tape: GradientTape, V: Var, alphas: Var, betas: Optional[Var] = None) -> Var:
    """sum_j alpha_j (beta_j * v_j); beta is taken as all ones when betas is None"""
    gated = V if betas is None else tape.mul(betas, V)
    return tape.einsum("tb,tmb->mb", alphas, gated)


class RetainModel(SequenceModel):
    kind = ModelKindEnum.retain

    def __init__(self, dims: ModelDims, task: TaskEnum = TaskEnum.l2d,
                 activation: Optional[ActivationEnum] = None,
                 dropout_v: float = DEFAULT_DROPOUT_V, dropout_c: float = DEFAULT_DROPOUT_C,
                 timestamped: bool = False):
        super().__init__(dims, task, activation)
        check_dropout_rate(dropout_v)
        check_dropout_rate(dropout_c)
        self.dropout_v = dropout_v
        self.dropout_c = dropout_c
        self.timestamped = timestamped
        if timestamped:
            self.kind = ModelKindEnum.retain_ts

    @property
    def attention_input_size(self) -> int:
        return self.dims.m + (1 if self.timestamped else 0)

    def init_tensors(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        d = self.dims
        tensors = {"W_emb": init_dense(rng, (d.m, d.r))}
        tensors.update(init_gru_cell(rng, self.attention_input_size, d.p, ALPHA_CELL))
        tensors["w_alpha"] = init_dense(rng, (d.p,))
        tensors["b_alpha"] = np.zeros(1)
        tensors.update(init_gru_cell(rng, self.attention_input_size, d.q, BETA_CELL))
        tensors["W_beta"] = init_dense(rng, (d.m, d.q))
        tensors["b_beta"] = np.zeros(d.m)
        tensors["W_out"] = init_dense(rng, (d.s, d.m))
        tensors["b_out"] = np.zeros(d.s)
        return tensors

    def penalized_names(self) -> List[str]:
        # the attention GRUs are left unregularised
        return ["W_emb", "w_alpha", "W_beta", "W_out"]

    def forward_batch(self, tape: GradientTape, pv: Mapping[str, Var], batch: SequenceBatch,
                      training: bool, rng: Optional[np.random.Generator]) -> List[SlotVars]:
        """Embed once, then run both reverse-time RNNs from the end of every slot"""
        if batch.inputs.shape[1] != self.dims.r:
            raise DimensionError("input matrix does not match vocabulary size", batch.inputs.shape, (self.dims.r,))
        T = batch.horizon
        V = dropout(tape, embed_op(tape, pv["W_emb"], batch.inputs[:T]), self.dropout_v, training, rng)
        if self.timestamped:
            inputs = positions(tape, tape.concat([V, batch.taus[:T, None, :]], axis=1))
        else:
            inputs = positions(tape, V)
        alpha_cell = cell_vars(pv, ALPHA_CELL)
        beta_cell = cell_vars(pv, BETA_CELL)

        outputs = []
        for ends in batch.ends:
            n = int(ends.max()) + 1
            alphas, G = visit_attention_op(tape, inputs[:n], alpha_cell, pv["w_alpha"], pv["b_alpha"], ends)
            betas, H = variable_attention_op(tape, inputs[:n], beta_cell, pv["W_beta"], pv["b_beta"], ends)
            Vn = leading(tape, V, n)
            c = dropout(tape, context_op(tape, Vn, alphas, betas), self.dropout_c, training, rng)
            logits = dense(tape, pv["W_out"], c, pv["b_out"])
            outputs.append(SlotVars(Vn, alphas, betas, G, H, c, logits, self.activate(tape, logits)))
        return outputs

    def batch_predictions(self, tape, pv, batch, training, rng) -> List[Var]:
        return [out.y_hat for out in self.forward_batch(tape, pv, batch, training, rng)]

    def traces(self, params: ModelParams, X: np.ndarray, days: Optional[Sequence[int]],
               steps: Sequence[int], training: bool = False,
               rng: Optional[np.random.Generator] = None) -> List[ForwardTrace]:
        """Every intermediate of the predictions at the given 1-based steps of one r x T matrix"""
        if X.ndim != 2 or X.shape[0] != self.dims.r:
            raise DimensionError("input matrix does not match vocabulary size", X.shape, (self.dims.r,))
        n_visits = X.shape[1]
        if n_visits < 1:
            raise ArgumentError("cannot run RETAIN on an empty record")
        if self.timestamped and (days is None or len(days) != n_visits):
            raise ArgumentError("the timestamped model needs one timestamp per visit")
        if training and rng is None:
            raise ArgumentError("training-mode forward passes need a random generator")
        batch = SequenceBatch.from_matrix(X, days if self.timestamped else None, steps)

        tape = GradientTape(record=False)
        outputs = self.forward_batch(tape, tape.watch(params.tensors), batch, training, rng)
        taus = batch.taus[:, 0] if self.timestamped else None
        traces = []
        for i, out in zip(steps, outputs):
            traces.append(ForwardTrace(
                step=i,
                inputs=X[:, :i].copy(),
                embeddings=out.embeddings.value[:, :, 0].T.copy(),
                alpha_states=out.alpha_states.value[:, :, 0].T.copy(),
                beta_states=out.beta_states.value[:, :, 0].T.copy(),
                attention=AttentionProfile(
                    alphas=out.alphas.value[:, 0].copy(),
                    betas=out.betas.value[:, :, 0].copy(),
                    prediction_step=i,
                ),
                context=out.context.value[:, 0].copy(),
                logits=out.logits.value[:, 0].copy(),
                y_hat=out.y_hat.value[:, 0].copy(),
                activation=self.activation,
                training=training,
                timestamps=None if taus is None else taus[:i].copy(),
            ))
        return traces


def model_from_params(params: ModelParams, dropout_v: float = DEFAULT_DROPOUT_V,
                      dropout_c: float = DEFAULT_DROPOUT_C) -> RetainModel:
    if params.kind not in (ModelKindEnum.retain, ModelKindEnum.retain_ts):
        raise ArgumentError(f"{params.kind.value} parameters are not RETAIN parameters")
    return RetainModel(params.dims, params.task, params.activation, dropout_v, dropout_c,
                       timestamped=params.timestamped)


# Array-level operations

def embed_visit(x: np.ndarray, params: ModelParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    W_emb = params["W_emb"]
    if x.shape != (W_emb.shape[1],):
        raise DimensionError("visit vector does not match vocabulary size", x.shape, (W_emb.shape[1],))
    return W_emb @ x


def _as_columns(v_seq: Sequence[np.ndarray], width: int) -> List[np.ndarray]:
    """Vectors as (width, 1) inputs of a batch of one"""
    if len(v_seq) == 0:
        raise ArgumentError("attention needs a non-empty sequence")
    seq = []
    for v in v_seq:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (width,):
            raise DimensionError("sequence vector length mismatch", v.shape, (width,))
        seq.append(v[:, None])
    return seq


def visit_attention(v_seq: Sequence[np.ndarray], params: ModelParams) -> np.ndarray:
    """alpha_1..alpha_i for attention inputs v_1..v_i ([v, tau] for the timestamped model)"""
    tape = GradientTape(record=False)
    pv = tape.watch(params.tensors)
    width = params[f"{ALPHA_CELL}.W_update"].shape[1]
    alphas, _ = visit_attention_op(tape, _as_columns(v_seq, width), cell_vars(pv, ALPHA_CELL),
                                   pv["w_alpha"], pv["b_alpha"])
    return alphas.value[:, 0].copy()


def variable_attention(v_seq: Sequence[np.ndarray], params: ModelParams) -> List[np.ndarray]:
    """beta_1..beta_i, each of embedding length"""
    tape = GradientTape(record=False)
    pv = tape.watch(params.tensors)
    width = params[f"{BETA_CELL}.W_update"].shape[1]
    betas, _ = variable_attention_op(tape, _as_columns(v_seq, width), cell_vars(pv, BETA_CELL),
                                     pv["W_beta"], pv["b_beta"])
    return [betas.value[j, :, 0].copy() for j in range(betas.shape[0])]


def context_vector(v_seq: Sequence[np.ndarray], alphas: Sequence[float],
                   betas: Sequence[np.ndarray]) -> np.ndarray:
    if not (len(v_seq) == len(alphas) == len(betas)) or len(v_seq) == 0:
        raise DimensionError("visits, alphas and betas are misaligned", (len(v_seq),), (len(alphas),), (len(betas),))
    V = np.stack([np.asarray(v, dtype=np.float64) for v in v_seq])
    B = np.stack([np.asarray(b, dtype=np.float64) for b in betas])
    if V.shape != B.shape:
        raise DimensionError("beta and embedding lengths differ", V.shape, B.shape)
    tape = GradientTape(record=False)
    a = np.asarray(alphas, dtype=np.float64)[:, None]
    return context_op(tape, tape.constant(V[:, :, None]), tape.constant(a), tape.constant(B[:, :, None])).value[:, 0]


def predict(c: np.ndarray, params: ModelParams, mode: Optional[ActivationEnum] = None) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    W_out = params["W_out"]
    if c.shape != (W_out.shape[1],):
        raise DimensionError("context length does not match output layer", c.shape, W_out.shape)
    mode = ActivationEnum(mode) if mode else params.activation
    tape = GradientTape(record=False)
    logits = dense(tape, W_out, c, params["b_out"])
    return (tape.softmax(logits) if mode == ActivationEnum.softmax else tape.sigmoid(logits)).value


def forward_sequence(record: PatientRecord, params: ModelParams, task: Optional[TaskEnum] = None,
                     training: bool = False, rng: Optional[np.random.Generator] = None,
                     dropout_v: float = DEFAULT_DROPOUT_V, dropout_c: float = DEFAULT_DROPOUT_C) -> List[ForwardTrace]:
    """One trace per ESM step, or a single terminal trace for L2D"""
    if params.timestamped:
        return forward_with_timestamps(record, params, task, training, rng, dropout_v, dropout_c)
    model = model_from_params(params, dropout_v, dropout_c)
    return _forward(model, record.input_matrix(params.dims.r), None, params, task, training, rng)


def forward_with_timestamps(record: PatientRecord, params_ts: ModelParams, task: Optional[TaskEnum] = None,
                            training: bool = False, rng: Optional[np.random.Generator] = None,
                            dropout_v: float = DEFAULT_DROPOUT_V, dropout_c: float = DEFAULT_DROPOUT_C,
                            days: Optional[Sequence[int]] = None) -> List[ForwardTrace]:
    if not params_ts.timestamped:
        raise ArgumentError("forward_with_timestamps needs parameters of the timestamped model")
    days = record.days if days is None else list(days)
    model = model_from_params(params_ts, dropout_v, dropout_c)
    return _forward(model, record.input_matrix(params_ts.dims.r), days, params_ts, task, training, rng)


def forward_matrix(X: np.ndarray, params: ModelParams, days: Optional[Sequence[int]] = None,
                   task: Optional[TaskEnum] = None, training: bool = False,
                   rng: Optional[np.random.Generator] = None,
                   dropout_v: float = DEFAULT_DROPOUT_V, dropout_c: float = DEFAULT_DROPOUT_C) -> List[ForwardTrace]:
    """forward_sequence on a raw r x T input matrix"""
    model = model_from_params(params, dropout_v, dropout_c)
    return _forward(model, np.asarray(X, dtype=np.float64), days, params, task, training, rng)


def _forward(model: RetainModel, X: np.ndarray, days, params: ModelParams, task, training, rng) -> List[ForwardTrace]:
    """Traces at the task's steps, with dropout at the model's own rates"""
    if X.ndim != 2 or X.shape[1] < 1:
        raise ArgumentError("cannot run RETAIN on an empty record")
    task = TaskEnum(task) if task else params.task
    n_visits = X.shape[1]
    steps = list(range(1, n_visits + 1)) if task == TaskEnum.esm else [n_visits]
    return model.traces(params, X, days, steps, training, rng)
