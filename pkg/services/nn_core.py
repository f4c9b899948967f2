"""
Numerical kernel shared by every model.

All arithmetic is float64 numpy. Model code is written once against a
GradientTape: a recording tape keeps a Wengert list of vector-Jacobian
closures for the reverse pass, a non-recording tape evaluates the same code
path for inference. Sequence ops work on whole batches: a recurrent state
is a (hidden, B) matrix and a sequence of them can be stacked into a
(T, hidden, B) block, so one pass over a mini-batch is one walk of the tape.
The array-level functions at the bottom of this module (affine, softmax,
gru_cell, ...) are thin wrappers over a non-recording tape.
"""
import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from models import GRU_BIASES, GRU_FIELDS, GRU_MATRICES, GruCellParams
from services.errors import (
    ArgumentError,
    DimensionError,
    NumericalError,
    TapeStateError,
)

logger = logging.getLogger(__name__)

EPSILON = 1e-8  # probability clamp inside logs
FINITE_DIFF_STEP = 1e-5

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


def as_tensor(value: ArrayLike, name: str = "tensor") -> np.ndarray:
    """Return a float64 copy of value; scalars become length-1 vectors"""
    array = np.array(value, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1)
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{name} contains non-finite values")
    return array


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def visibility(ends: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    """(n, B) mask of the positions each column may see, None when every column sees all n"""
    if ends is None:
        return None
    ends = np.asarray(ends)
    if np.all(ends == n - 1):
        return None
    return (np.arange(n)[:, None] <= ends[None, :]).astype(np.float64)


class Var:
    """A value on a tape; index is -1 for constants and for anything off the gradient path"""
    __slots__ = ("value", "index", "name")

    def __init__(self, value: np.ndarray, index: int, name: Optional[str] = None):
        self.value = value
        self.index = index
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.index >= 0

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Var{label} #{self.index} shape={self.value.shape}>"


Operand = Union[Var, np.ndarray, float, int]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradientTape:
    """Single-owner reverse-mode tape.

    Every op that depends on a watched parameter appends (parent indices, vjp)
    in execution order; ``backward`` replays the list in reverse and
    accumulates gradients per node. Ops on constants only are evaluated
    but never recorded.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._entries: List[Tuple[Tuple[int, ...], Optional[VJP]]] = []
        self._params: Dict[str, Var] = {}

    def __len__(self):
        return len(self._entries)

    @property
    def params(self) -> Dict[str, Var]:
        return dict(self._params)

    # leaves
    def _emit(self, value: np.ndarray, parents: Tuple[Var, ...], vjp: Optional[VJP], name: Optional[str] = None) -> Var:
        if not self.record or not any(p.tracked for p in parents):
            return Var(value, -1, name)
        self._entries.append((tuple(p.index for p in parents), vjp))
        return Var(value, len(self._entries) - 1, name)

    def constant(self, value: ArrayLike) -> Var:
        if isinstance(value, Var):
            return value
        array = np.asarray(value, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        return Var(array, -1)

    def watch(self, params: Mapping[str, np.ndarray]) -> Dict[str, Var]:
        """Register parameters as named leaves and return their variables"""
        watched = {}
        for name, value in params.items():
            value = np.asarray(value, dtype=np.float64)
            if self.record:
                self._entries.append(((), None))
                var = Var(value, len(self._entries) - 1, name)
            else:
                var = Var(value, -1, name)
            self._params[name] = var
            watched[name] = var
        return watched

    def lift(self, operand: Operand) -> Var:
        return operand if isinstance(operand, Var) else self.constant(operand)

    # linear algebra
    def matmul(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        A, B = a.value, b.value
        if A.ndim not in (1, 2) or B.ndim not in (1, 2) or A.shape[-1] != B.shape[0]:
            raise DimensionError("matmul shape mismatch", A.shape, B.shape)

        def vjp(g):
            if A.ndim == 2 and B.ndim == 1:
                return np.outer(g, B), A.T @ g
            if A.ndim == 1 and B.ndim == 2:
                return B @ g, np.outer(A, g)
            if A.ndim == 2:
                return (g @ B.T if a.tracked else None), (A.T @ g if b.tracked else None)
            return g * B, g * A

        return self._emit(np.asarray(A @ B, dtype=np.float64), (a, b), vjp)

    def einsum(self, spec: str, a: Operand, b: Operand) -> Var:
        """Two-operand einsum; every input index must reach the output or the other operand"""
        a, b = self.lift(a), self.lift(b)
        spec = spec.replace(" ", "")
        inputs, output = spec.split("->")
        left, right = inputs.split(",")
        try:
            value = np.einsum(spec, a.value, b.value, optimize=True)
        except ValueError:
            raise DimensionError(f"einsum {spec} shape mismatch", a.shape, b.shape) from None
        A, B = a.value, b.value

        def vjp(g):
            grad_a = np.einsum(f"{output},{right}->{left}", g, B, optimize=True) if a.tracked else None
            grad_b = np.einsum(f"{output},{left}->{right}", g, A, optimize=True) if b.tracked else None
            return grad_a, grad_b

        return self._emit(np.asarray(value, dtype=np.float64), (a, b), vjp)

    def _broadcast_shape(self, op: str, *vars_: Var) -> Tuple[int, ...]:
        try:
            return np.broadcast_shapes(*(v.shape for v in vars_))
        except ValueError:
            raise DimensionError(f"{op} shape mismatch", *(v.shape for v in vars_)) from None

    def add(self, a: Operand, b: Operand, *more: Operand) -> Var:
        terms = tuple(self.lift(t) for t in (a, b) + more)
        self._broadcast_shape("add", *terms)
        value = terms[0].value
        for term in terms[1:]:
            value = value + term.value
        shapes = [t.shape for t in terms]

        def vjp(g):
            return [_unbroadcast(g, shape) for shape in shapes]

        return self._emit(value, terms, vjp)

    def sub(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        self._broadcast_shape("sub", a, b)

        def vjp(g):
            return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

        return self._emit(a.value - b.value, (a, b), vjp)

    def mul(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        self._broadcast_shape("mul", a, b)
        A, B = a.value, b.value

        def vjp(g):
            return (_unbroadcast(g * B, A.shape) if a.tracked else None,
                    _unbroadcast(g * A, B.shape) if b.tracked else None)

        return self._emit(A * B, (a, b), vjp)

    def dot(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        if a.value.ndim != 1 or a.shape != b.shape:
            raise DimensionError("dot needs equal-length vectors", a.shape, b.shape)
        A, B = a.value, b.value

        def vjp(g):
            return g[0] * B, g[0] * A

        return self._emit(np.array([A @ B]), (a, b), vjp)

    def sum(self, a: Operand) -> Var:
        a = self.lift(a)
        shape = a.shape

        def vjp(g):
            return (np.full(shape, g[0]),)

        return self._emit(np.array([a.value.sum()]), (a,), vjp)

    # activations
    def sigmoid(self, a: Operand) -> Var:
        a = self.lift(a)
        y = _stable_sigmoid(a.value)

        def vjp(g):
            return (g * y * (1.0 - y),)

        return self._emit(y, (a,), vjp)

    def tanh(self, a: Operand) -> Var:
        a = self.lift(a)
        y = np.tanh(a.value)

        def vjp(g):
            return (g * (1.0 - y * y),)

        return self._emit(y, (a,), vjp)

    def softmax(self, a: Operand, mask: Optional[np.ndarray] = None) -> Var:
        """Softmax along the first axis (a vector, or every column of a matrix).

        Entries where mask is 0 get probability exactly 0.
        """
        a = self.lift(a)
        x = a.value
        if x.ndim not in (1, 2) or x.size == 0:
            raise ArgumentError("softmax needs a non-empty vector or matrix")
        if mask is None:
            shifted = np.exp(x - x.max(axis=0, keepdims=True))
        else:
            keep = np.asarray(mask) > 0
            if keep.shape != x.shape:
                raise DimensionError("softmax mask shape mismatch", keep.shape, x.shape)
            if not keep.any(axis=0).all():
                raise ArgumentError("softmax mask hides every entry of a column")
            top = np.where(keep, x, -np.inf).max(axis=0, keepdims=True)
            shifted = np.exp(np.where(keep, x - top, -np.inf))
        y = shifted / shifted.sum(axis=0, keepdims=True)

        def vjp(g):
            return (y * (g - (g * y).sum(axis=0, keepdims=True)),)

        return self._emit(y, (a,), vjp)

    def log_clamped(self, a: Operand, eps: float = EPSILON) -> Var:
        """log(clip(a, eps, 1 - eps)); zero gradient where the clamp is active"""
        a = self.lift(a)
        clipped = np.clip(a.value, eps, 1.0 - eps)
        inside = (a.value >= eps) & (a.value <= 1.0 - eps)

        def vjp(g):
            return (np.where(inside, g / clipped, 0.0),)

        return self._emit(np.log(clipped), (a,), vjp)

    # structure
    def concat(self, parts: Sequence[Operand], axis: int = 0) -> Var:
        parts = tuple(self.lift(p) for p in parts)
        if not parts or any(p.value.ndim == 0 or p.value.ndim != parts[0].value.ndim for p in parts):
            raise DimensionError("concat needs arrays of one rank", *(p.shape for p in parts))
        try:
            value = np.concatenate([p.value for p in parts], axis=axis)
        except ValueError:
            raise DimensionError("concat shape mismatch", *(p.shape for p in parts)) from None
        bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

        def vjp(g):
            return np.split(g, bounds, axis=axis)

        return self._emit(value, parts, vjp)

    def stack(self, parts: Sequence[Operand], axis: int = 0) -> Var:
        parts = tuple(self.lift(p) for p in parts)
        if not parts:
            raise ArgumentError("stack needs at least one array")
        if any(p.shape != parts[0].shape for p in parts):
            raise DimensionError("stack needs equal shapes", *(p.shape for p in parts))

        def vjp(g):
            return [np.take(g, j, axis=axis) for j in range(len(parts))]

        return self._emit(np.stack([p.value for p in parts], axis=axis), parts, vjp)

    def index(self, a: Operand, key) -> Var:
        """Basic slicing a[key]"""
        a = self.lift(a)
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape)
            full[key] = g
            return (full,)

        return self._emit(np.array(a.value[key], dtype=np.float64), (a,), vjp)

    def select_columns(self, states: Sequence[Var], positions: np.ndarray) -> Var:
        """Column b of the result is column b of states[positions[b]]"""
        positions = np.asarray(positions)
        if np.all(positions == positions[0]):
            return states[int(positions[0])]
        used = sorted(set(int(t) for t in positions))
        parts = tuple(self.lift(states[t]) for t in used)
        picks = [np.nonzero(positions == t)[0] for t in used]
        value = np.empty_like(parts[0].value)
        for part, cols in zip(parts, picks):
            value[:, cols] = part.value[:, cols]

        def vjp(g):
            grads = []
            for cols in picks:
                grad = np.zeros_like(g)
                grad[:, cols] = g[:, cols]
                grads.append(grad)
            return grads

        return self._emit(value, parts, vjp)

    def reshape(self, a: Operand, shape: Tuple[int, ...]) -> Var:
        a = self.lift(a)
        original = a.shape
        try:
            value = a.value.reshape(shape)
        except ValueError:
            raise DimensionError("reshape size mismatch", original, shape) from None

        def vjp(g):
            return (g.reshape(original),)

        return self._emit(value, (a,), vjp)

    # reverse pass
    def backward(self, loss: Var) -> Dict[str, np.ndarray]:
        """Exact gradients of a scalar loss for every watched parameter"""
        if not self.record or not self._entries or loss.index < 0:
            raise TapeStateError("backward called before any forward pass was recorded")
        if loss.value.size != 1:
            raise ArgumentError(f"loss must be scalar, got shape {loss.shape}")

        pending: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        leaves: Dict[int, np.ndarray] = {}
        for index in range(loss.index, -1, -1):
            grad = pending.pop(index, None)
            if grad is None:
                continue
            parents, vjp = self._entries[index]
            if vjp is None:
                leaves[index] = grad
                continue
            for parent, parent_grad in zip(parents, vjp(grad)):
                if parent < 0 or parent_grad is None:
                    continue
                if parent in pending:
                    pending[parent] = pending[parent] + parent_grad
                else:
                    pending[parent] = parent_grad

        gradients = {}
        for name, var in self._params.items():
            grad = leaves.get(var.index)
            gradients[name] = np.zeros_like(var.value) if grad is None else grad.reshape(var.shape)
            if not np.all(np.isfinite(gradients[name])):
                raise NumericalError(f"non-finite gradient for {name}")
        return gradients


# Layer functions written against a tape

def dense(tape: GradientTape, W: Operand, x: Operand, b: Operand) -> Var:
    """W x + b; x may be a vector or a matrix of column inputs"""
    y = tape.matmul(W, x)
    if y.value.ndim == 2:
        b = tape.reshape(b, (-1, 1))
    return tape.add(y, b)


def cell_vars(params: Mapping[str, Var], prefix: str) -> Dict[str, Var]:
    return {name: params[f"{prefix}.{name}"] for name in GRU_FIELDS}


def gru_step(tape: GradientTape, x: Operand, h_prev: Operand, cell: Mapping[str, Operand]) -> Var:
    """One GRU transition; z gates toward the candidate state"""
    h_prev = tape.lift(h_prev)
    z = tape.sigmoid(tape.add(tape.matmul(cell["W_update"], x), tape.matmul(cell["U_update"], h_prev), cell["b_update"]))
    r = tape.sigmoid(tape.add(tape.matmul(cell["W_reset"], x), tape.matmul(cell["U_reset"], h_prev), cell["b_reset"]))
    candidate = tape.tanh(tape.add(
        tape.matmul(cell["W_cand"], x),
        tape.matmul(cell["U_cand"], tape.mul(r, h_prev)),
        cell["b_cand"],
    ))
    return tape.add(tape.mul(tape.sub(1.0, z), h_prev), tape.mul(z, candidate))


def _hidden_size(cell: Mapping[str, Operand]) -> int:
    u = cell["U_update"]
    return (u.value if isinstance(u, Var) else np.asarray(u)).shape[0]


def _prepare(tape: GradientTape, sequence: Sequence[Operand], cell: Mapping[str, Operand]):
    """Zero start state, with biases as columns when the inputs are (n, B) matrices"""
    if not sequence:
        raise ArgumentError("cannot run an RNN over an empty sequence")
    first = sequence[0].value if isinstance(sequence[0], Var) else np.asarray(sequence[0])
    size = _hidden_size(cell)
    if first.ndim == 1:
        return tape.constant(np.zeros(size)), cell
    prepared = dict(cell)
    for name in GRU_BIASES:
        prepared[name] = tape.reshape(cell[name], (size, 1))
    return tape.constant(np.zeros((size, first.shape[1]))), prepared


def reverse_rnn(tape: GradientTape, sequence: Sequence[Operand], cell: Mapping[str, Operand],
                ends: Optional[np.ndarray] = None) -> List[Var]:
    """Run the cell newest-first from a zero state; states re-aligned to input positions.

    With ends, column b starts from zero at position ends[b] and its states
    after that position are zero.
    """
    h, cell = _prepare(tape, sequence, cell)
    keep = visibility(ends, len(sequence))
    states: List[Optional[Var]] = [None] * len(sequence)
    for j in range(len(sequence) - 1, -1, -1):
        h = gru_step(tape, sequence[j], h, cell)
        if keep is not None and not keep[j].all():
            h = tape.mul(h, keep[j])
        states[j] = h
    return states


def forward_rnn(tape: GradientTape, sequence: Sequence[Operand], cell: Mapping[str, Operand]) -> List[Var]:
    """Run the cell oldest-first from a zero state"""
    h, cell = _prepare(tape, sequence, cell)
    states = []
    for x in sequence:
        h = gru_step(tape, x, h, cell)
        states.append(h)
    return states


def check_dropout_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must lie in [0, 1), got {rate}")


def dropout(tape: GradientTape, x: Operand, rate: float, training: bool,
            rng: Optional[np.random.Generator]) -> Var:
    """Inverted dropout: survivors are scaled by 1/(1-rate), inference is identity"""
    check_dropout_rate(rate)
    x = tape.lift(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ArgumentError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return tape.mul(x, mask)


def step_log_likelihood(tape: GradientTape, y_hat: Operand, y: np.ndarray) -> Var:
    """y^T log y_hat + (1-y)^T log(1-y_hat), summed over every label dimension"""
    y_hat = tape.lift(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError("label and prediction lengths differ", y.shape, y_hat.shape)
    positive = tape.dot(y, tape.log_clamped(y_hat))
    negative = tape.dot(1.0 - y, tape.log_clamped(tape.sub(1.0, y_hat)))
    return tape.add(positive, negative)


def sequence_nll(tape: GradientTape, y_hats: Sequence[Operand], ys: Sequence[np.ndarray]) -> Var:
    """Negative log-likelihood of one patient, averaged over its prediction steps"""
    if len(y_hats) != len(ys) or not ys:
        raise DimensionError("prediction and label sequences differ", (len(y_hats),), (len(ys),))
    terms = [step_log_likelihood(tape, y_hat, y) for y_hat, y in zip(y_hats, ys)]
    total = terms[0] if len(terms) == 1 else tape.add(*terms)
    return tape.mul(total, -1.0 / len(terms))


def weighted_nll(tape: GradientTape, y_hats: Sequence[Var], labels: np.ndarray, weights: np.ndarray) -> Var:
    """-sum over slots k, labels and columns b of weights[k, b] * log-likelihood.

    y_hats holds one (s, B) prediction matrix per slot, labels is (K, s, B)
    and weights is (K, B).
    """
    if len(y_hats) != labels.shape[0] or weights.shape != (labels.shape[0], labels.shape[2]):
        raise DimensionError("predictions, labels and weights are misaligned",
                             (len(y_hats),), labels.shape, weights.shape)
    terms = []
    for y_hat, y, w in zip(y_hats, labels, weights):
        if y_hat.shape != y.shape:
            raise DimensionError("label and prediction shapes differ", y.shape, y_hat.shape)
        ll = tape.add(tape.mul(y, tape.log_clamped(y_hat)), tape.mul(1.0 - y, tape.log_clamped(tape.sub(1.0, y_hat))))
        terms.append(tape.sum(tape.mul(ll, w)))
    total = terms[0] if len(terms) == 1 else tape.add(*terms)
    return tape.mul(total, -1.0)


def mean_of(tape: GradientTape, values: Sequence[Var]) -> Var:
    if not values:
        raise ArgumentError("cannot average an empty list")
    total = values[0] if len(values) == 1 else tape.add(*values)
    return tape.mul(total, 1.0 / len(values))


# Initialisation

def init_dense(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Glorot-uniform matrix (a vector counts as a 1 x n matrix)"""
    fan_out, fan_in = (shape if len(shape) == 2 else (1, shape[0]))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_recurrent(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-0.01, 0.01, size=shape)


def init_gru_cell(rng: np.random.Generator, input_size: int, hidden_size: int, prefix: str) -> Dict[str, np.ndarray]:
    tensors = {}
    for name in GRU_MATRICES:
        if name.startswith("W_"):
            tensors[f"{prefix}.{name}"] = init_dense(rng, (hidden_size, input_size))
        else:
            tensors[f"{prefix}.{name}"] = init_recurrent(rng, (hidden_size, hidden_size))
    for name in GRU_BIASES:
        tensors[f"{prefix}.{name}"] = np.zeros(hidden_size)
    return tensors


# Array-level operations

def _finite_result(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op} produced non-finite values")
    return value


def affine(W: ArrayLike, x: ArrayLike, b: ArrayLike) -> np.ndarray:
    """Return W x + b"""
    W, x, b = np.asarray(W, dtype=np.float64), np.asarray(x, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape != (W.shape[1],):
        raise DimensionError("affine input does not match matrix", W.shape, x.shape)
    if b.shape != (W.shape[0],):
        raise DimensionError("affine bias does not match matrix", W.shape, b.shape)
    tape = GradientTape(record=False)
    return _finite_result(dense(tape, W, x, b).value, "affine")


def softmax(e: ArrayLike) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise ArgumentError("softmax needs a non-empty vector")
    return _finite_result(GradientTape(record=False).softmax(e).value, "softmax")


def _check_cell_input(x: np.ndarray, h_prev: np.ndarray, p: GruCellParams) -> None:
    if x.shape != (p.input_size,):
        raise DimensionError("GRU input length mismatch", x.shape, (p.input_size,))
    if h_prev.shape != (p.hidden_size,):
        raise DimensionError("GRU state length mismatch", h_prev.shape, (p.hidden_size,))


def gru_cell(x: ArrayLike, h_prev: ArrayLike, p: GruCellParams) -> np.ndarray:
    x, h_prev = np.asarray(x, dtype=np.float64), np.asarray(h_prev, dtype=np.float64)
    _check_cell_input(x, h_prev, p)
    cell = {name: getattr(p, name) for name in GRU_FIELDS}
    return _finite_result(gru_step(GradientTape(record=False), x, h_prev, cell).value, "gru_cell")


def run_rnn_reversed(v_seq: Sequence[ArrayLike], p: GruCellParams) -> List[np.ndarray]:
    if len(v_seq) == 0:
        raise ArgumentError("cannot run an RNN over an empty sequence")
    seq = [np.asarray(v, dtype=np.float64) for v in v_seq]
    for v in seq:
        if v.shape != (p.input_size,):
            raise DimensionError("sequence vector length mismatch", v.shape, (p.input_size,))
    cell = {name: getattr(p, name) for name in GRU_FIELDS}
    return [state.value for state in reverse_rnn(GradientTape(record=False), seq, cell)]


def run_rnn_forward(v_seq: Sequence[ArrayLike], p: GruCellParams) -> List[np.ndarray]:
    if len(v_seq) == 0:
        raise ArgumentError("cannot run an RNN over an empty sequence")
    seq = [np.asarray(v, dtype=np.float64) for v in v_seq]
    cell = {name: getattr(p, name) for name in GRU_FIELDS}
    return [state.value for state in forward_rnn(GradientTape(record=False), seq, cell)]


def cross_entropy(y_hat_seq: Sequence[ArrayLike], y_seq: Sequence[ArrayLike],
                  n_patients: int, steps_per_patient: Sequence[int]) -> float:
    """Summed-over-labels cross entropy, averaged over steps then patients"""
    if len(y_hat_seq) != len(y_seq):
        raise DimensionError("prediction and label sequences differ", (len(y_hat_seq),), (len(y_seq),))
    if len(steps_per_patient) != n_patients or sum(steps_per_patient) != len(y_seq):
        raise DimensionError("step counts do not cover the sequence", (n_patients, sum(steps_per_patient)), (len(y_seq),))
    if n_patients < 1 or any(t < 1 for t in steps_per_patient):
        raise ArgumentError("every patient needs at least one step")
    tape = GradientTape(record=False)
    per_patient, start = [], 0
    for steps in steps_per_patient:
        y_hats = [np.asarray(v, dtype=np.float64) for v in y_hat_seq[start:start + steps]]
        ys = [np.asarray(v, dtype=np.float64) for v in y_seq[start:start + steps]]
        per_patient.append(sequence_nll(tape, y_hats, ys))
        start += steps
    return float(_finite_result(mean_of(tape, per_patient).value, "cross_entropy")[0])


def apply_dropout(x: ArrayLike, rate: float, training: bool,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return dropout(GradientTape(record=False), x, rate, training, rng).value.copy()


def backward(tape: GradientTape, loss: Var) -> Dict[str, np.ndarray]:
    return tape.backward(loss)


def finite_diff_gradient(f: Callable[[Dict[str, np.ndarray]], float],
                         params: Mapping[str, np.ndarray],
                         h: float = FINITE_DIFF_STEP) -> Dict[str, np.ndarray]:
    """Central differences (f(theta+h) - f(theta-h)) / 2h, one coordinate at a time"""
    if h <= 0:
        raise ArgumentError("finite-difference step must be positive")
    working = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    gradients = {}
    for name, tensor in working.items():
        grad = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            original = tensor[idx]
            tensor[idx] = original + h
            upper = float(f(working))
            tensor[idx] = original - h
            lower = float(f(working))
            tensor[idx] = original
            if not (np.isfinite(upper) and np.isfinite(lower)):
                raise NumericalError(f"objective is not finite around {name}{list(idx)}")
            grad[idx] = (upper - lower) / (2.0 * h)
        gradients[name] = grad
    return gradients


def relative_error(a: ArrayLike, b: ArrayLike) -> np.ndarray:
    """|a-b| / max(1, |a|, |b|), element-wise"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
