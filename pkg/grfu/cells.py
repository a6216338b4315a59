"""
Recurrent fusion cells as pure step functions:
(parameters, sensor inputs at t, prior state) -> (new state, trace).

Inputs are either single vectors (rank 1) or row batches (rank 2); the same
code serves both.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError
from .tensorgrad import (
    Tensor, activation, concat, elementwise, matmul, ones, repeat_rows, slice_cols,
    transpose, zeros, clamp, divide,
)

logger = logging.getLogger("grfu.cells")

GATE_NAMES = ("f", "i", "o", "g")
RESIDUAL_STRATEGIES = ("sum_complement", "product_complement", "softmax")
ERF_MODES = ("add", "concat")
LATE_MODES = ("concat_out", "add_out")
# summed forget gates at initialisation for lrs/lgrf
SUMMED_STATE_RETENTION = 0.8


# ====== PARAMETER CONTAINERS ======

class LstmParams:
    """W_*: d_h x d_in, U_*: d_h x d_h, b_*: d_h for each gate * in f, i, o, g."""

    def __init__(self, W: Dict[str, Tensor], U: Dict[str, Tensor], b: Dict[str, Tensor]):
        self.W = W
        self.U = U
        self.b = b
        d_h, d_in = W["f"].shape
        for gate in GATE_NAMES:
            if W[gate].shape != (d_h, d_in) or U[gate].shape != (d_h, d_h) or b[gate].shape != (d_h,):
                raise DimensionError(f"gate '{gate}' block disagrees with the forget block",
                                     W[gate].shape, (d_h, d_in))

    @property
    def d_h(self) -> int:
        return self.W["f"].shape[0]

    @property
    def d_in(self) -> int:
        return self.W["f"].shape[1]


class PackedLstm:
    """The four gate blocks stacked and transposed once, reused across time steps."""

    def __init__(self, W_t: Tensor, U_t: Tensor, b: Tensor, d_h: int):
        self.W_t = W_t
        self.U_t = U_t
        self.b = b
        self.d_h = d_h
        self.d_in = W_t.shape[0]


def pack_lstm(params: LstmParams) -> PackedLstm:
    W_t = transpose(concat([params.W[k] for k in GATE_NAMES], axis=0))
    U_t = transpose(concat([params.U[k] for k in GATE_NAMES], axis=0))
    b = concat([params.b[k] for k in GATE_NAMES], axis=0)
    return PackedLstm(W_t, U_t, b, params.d_h)


class EncoderParams:
    """Per-sensor W_e^i: d_e x d_{s_i}. No bias."""

    def __init__(self, weights: List[Tensor]):
        d_e = {w.shape[0] for w in weights}
        if len(d_e) != 1:
            raise DimensionError("all encoders must output the same dimension",
                                 *[w.shape for w in weights])
        self.weights = weights

    @property
    def d_e(self) -> int:
        return self.weights[0].shape[0]


class FusionGateParams:
    """W_p^{k,i}: d_e x d_e for gate k in [0, M-2] and sensor i in [0, M-1]."""

    def __init__(self, weights: List[List[Tensor]], strategy: str = "sum_complement"):
        if strategy not in RESIDUAL_STRATEGIES:
            raise ContractError(f"unknown residual strategy '{strategy}'")
        self.weights = weights
        self.strategy = strategy

    @property
    def num_gates(self) -> int:
        return len(self.weights)


class MultiCellParams:
    def __init__(self, lstm: List[LstmParams], encoders: Optional[EncoderParams] = None,
                 gates: Optional[FusionGateParams] = None):
        d_h = {p.d_h for p in lstm}
        if len(d_h) != 1:
            raise DimensionError("all recurrent blocks must share d_h", *[(p.d_h,) for p in lstm])
        self.lstm = lstm
        self.encoders = encoders
        self.gates = gates

    @property
    def d_h(self) -> int:
        return self.lstm[0].d_h


class CellState:
    def __init__(self, h: Tensor, c: Tensor):
        if h.shape != c.shape:
            raise DimensionError("h and c must have equal shape", h.shape, c.shape)
        self.h = h
        self.c = c

    def detach(self) -> "CellState":
        return CellState(self.h.detach(), self.c.detach())


def zero_state(d_h: int, batch: Optional[int] = None) -> CellState:
    shape = (d_h,) if batch is None else (batch, d_h)
    return CellState(zeros(shape), zeros(shape))


class StepTrace:
    """
    Detached per-step diagnostics. `gates` holds one dict of f/i/o/g activations
    per recurrent core; gated cells also fill pre_gates (p^k), fusion_gates (q^i),
    encodings (e^i) and fused (a_t, or a_t^i per sensor).
    """

    def __init__(self, gates: Optional[List[Dict[str, np.ndarray]]] = None):
        self.gates: List[Dict[str, np.ndarray]] = gates or []
        self.pre_gates: List[np.ndarray] = []
        self.fusion_gates: List[np.ndarray] = []
        self.encodings: List[np.ndarray] = []
        self.fused: List[np.ndarray] = []


# ====== INITIALISATION ======

def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape))


def summed_forget_bias(num_cores: int) -> float:
    """
    Forget-gate bias for cores whose cell states are summed into one shared state.

    A single core keeps the usual 1.0. With M summed cores the prior state is
    multiplied by the sum of M forget gates, so each gate starts at
    SUMMED_STATE_RETENTION / M and the sum stays below 1.
    """
    if num_cores <= 1:
        return 1.0
    p = SUMMED_STATE_RETENTION / num_cores
    return float(np.log(p / (1.0 - p)))


def init_lstm_params(rng: np.random.Generator, d_in: int, d_h: int,
                     scale: Optional[float] = None, forget_bias: float = 1.0) -> LstmParams:
    """
    Weights uniform in ±1/sqrt(fan_in), forget bias `forget_bias`, other biases 0.
    With `scale`, every entry (biases included) is uniform in ±scale.
    """
    W, U, b = {}, {}, {}
    for gate in GATE_NAMES:
        W[gate] = _uniform(rng, (d_h, d_in), scale or 1.0 / np.sqrt(d_in))
        U[gate] = _uniform(rng, (d_h, d_h), scale or 1.0 / np.sqrt(d_h))
        if scale:
            b[gate] = _uniform(rng, (d_h,), scale)
        else:
            b[gate] = Tensor(np.full(d_h, forget_bias if gate == "f" else 0.0))
    return LstmParams(W, U, b)


def init_encoder_params(rng: np.random.Generator, sensor_dims: Sequence[int], d_e: int,
                        scale: Optional[float] = None) -> EncoderParams:
    return EncoderParams([_uniform(rng, (d_e, d), scale or 1.0 / np.sqrt(d)) for d in sensor_dims])


def init_fusion_gate_params(rng: np.random.Generator, num_sensors: int, d_e: int,
                            strategy: str = "sum_complement",
                            scale: Optional[float] = None) -> FusionGateParams:
    bound = scale or 1.0 / np.sqrt(d_e * num_sensors)
    weights = [[_uniform(rng, (d_e, d_e), bound) for _ in range(num_sensors)]
               for _ in range(num_sensors - 1)]
    return FusionGateParams(weights, strategy)


# ====== STEP FUNCTIONS ======

def _project(x: Tensor, W: Tensor) -> Tensor:
    """W · x for a vector, x · Wᵀ for a row batch."""
    return matmul(x, transpose(W))


def _bias(b: Tensor, like: Tensor) -> Tensor:
    return b if like.ndim == 1 else repeat_rows(b, like.shape[0])


def _gate_trace(f: Tensor, i: Tensor, o: Tensor, g: Tensor) -> Dict[str, np.ndarray]:
    return {"f": f.values, "i": i.values, "o": o.values, "g": g.values}


def lstm_step(params: Union[LstmParams, PackedLstm], x_t: Tensor,
              state: CellState) -> Tuple[CellState, StepTrace]:
    """Standard LSTM update: gates from (x_t, h_{t-1}), then c_t and h_t."""
    packed = params if isinstance(params, PackedLstm) else pack_lstm(params)
    d_h = packed.d_h
    if x_t.shape[-1] != packed.d_in:
        raise DimensionError("lstm input width differs from d_in", x_t.shape, (packed.d_in,))
    if state.h.shape[-1] != d_h or state.h.shape[:-1] != x_t.shape[:-1]:
        raise DimensionError("lstm state does not match input batch / d_h", state.h.shape, x_t.shape)

    pre = matmul(x_t, packed.W_t) + matmul(state.h, packed.U_t) + _bias(packed.b, x_t)
    f = activation("sigmoid", slice_cols(pre, 0, d_h))
    i = activation("sigmoid", slice_cols(pre, d_h, 2 * d_h))
    o = activation("sigmoid", slice_cols(pre, 2 * d_h, 3 * d_h))
    g = activation("tanh", slice_cols(pre, 3 * d_h, 4 * d_h))

    c = state.c * f + i * g
    h = o * activation("tanh", c)
    return CellState(h, c), StepTrace([_gate_trace(f, i, o, g)])


def _sum(tensors: Sequence[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t
    return total


def erf_fuse(encodings: Sequence[Tensor], mode: str) -> Tensor:
    """Early fusion input: elementwise sum or concatenation in sensor order."""
    if mode not in ERF_MODES:
        raise ContractError(f"unknown early fusion mode '{mode}'")
    if len(encodings) == 1:
        return encodings[0]
    if mode == "add":
        return _sum(encodings)
    return concat(encodings, axis=-1)


def erf_step(params: Union[LstmParams, PackedLstm], encodings: Sequence[Tensor], mode: str,
             state: CellState) -> Tuple[CellState, StepTrace]:
    return lstm_step(params, erf_fuse(encodings, mode), state)


def late_parallel_step(params: MultiCellParams, encodings: Sequence[Tensor],
                       states: Sequence[CellState], mode: str,
                       packed: Optional[List[PackedLstm]] = None
                       ) -> Tuple[List[CellState], Tensor, StepTrace]:
    """Independent per-sensor LSTMs; outputs joined by concatenation or sum."""
    if mode not in LATE_MODES:
        raise ContractError(f"unknown late fusion mode '{mode}'")
    if len(states) != len(params.lstm) or len(encodings) != len(params.lstm):
        raise ContractError(f"late fusion needs one state and one input per sensor "
                            f"({len(params.lstm)}), got {len(states)} states, {len(encodings)} inputs")
    cores = packed or params.lstm
    new_states, trace = [], StepTrace()
    for core, x, state in zip(cores, encodings, states):
        new_state, sub_trace = lstm_step(core, x, state)
        new_states.append(new_state)
        trace.gates.extend(sub_trace.gates)

    hs = [s.h for s in new_states]
    if len(hs) == 1:
        combined = hs[0]
    elif mode == "concat_out":
        combined = concat(hs, axis=-1)
    else:
        combined = _sum(hs)
    return new_states, combined, trace


def lrs_step(params: MultiCellParams, encodings: Sequence[Tensor], shared: CellState,
             packed: Optional[List[PackedLstm]] = None) -> Tuple[CellState, StepTrace]:
    """
    Late recurrent summation: every sensor core reads the shared (h, c) and its
    own input; the per-sensor c and h are summed into the next shared state.
    """
    if len(encodings) != len(params.lstm):
        raise ContractError(f"lrs needs {len(params.lstm)} inputs, got {len(encodings)}")
    cores = packed or params.lstm
    cs, hs, trace = [], [], StepTrace()
    for core, x in zip(cores, encodings):
        state, sub_trace = lstm_step(core, x, shared)
        cs.append(state.c)
        hs.append(state.h)
        trace.gates.extend(sub_trace.gates)
    return CellState(_sum(hs), _sum(cs)), trace


def encode(sensor_input: Tensor, W_e: Tensor) -> Tensor:
    """relu(W_e · s); no bias term."""
    if sensor_input.shape[-1] != W_e.shape[1]:
        raise DimensionError("encoder weight does not match sensor width", W_e.shape, sensor_input.shape)
    return activation("relu", _project(sensor_input, W_e))


def fusion_gate_logits(encodings: Sequence[Tensor], params: FusionGateParams) -> List[Tensor]:
    """Pre-sigmoid gate values z^k = Σ_i W_p^{k,i} · e^i."""
    if len(encodings) < 2:
        raise ContractError("fusion gates need at least two sensors")
    if params.num_gates != len(encodings) - 1:
        raise ContractError(f"{len(encodings)} sensors need {len(encodings) - 1} gates, "
                            f"parameters hold {params.num_gates}")
    return [_sum([_project(e, W) for e, W in zip(encodings, row)]) for row in params.weights]


def fusion_gates(encodings: Sequence[Tensor], params: FusionGateParams) -> List[Tensor]:
    """p^k = sigmoid(Σ_i W_p^{k,i} · e^i) for k = 1..M-1."""
    return [activation("sigmoid", z) for z in fusion_gate_logits(encodings, params)]


def effective_gates(gates: Sequence[Tensor], strategy: str,
                    logits: Optional[Sequence[Tensor]] = None,
                    shape: Tuple[int, ...] = ()) -> List[Tensor]:
    """
    Resolve M-1 pre-gates into M per-sensor weights q^i that sum to 1 elementwise.

    Args:
        gates: p^1..p^{M-1}
        strategy: sum_complement, product_complement or softmax
        logits: pre-sigmoid values, required by softmax
        shape: shape of the single all-ones gate returned when M = 1

    Returns:
        q^1..q^M
    """
    if strategy not in RESIDUAL_STRATEGIES:
        raise ContractError(f"unknown residual strategy '{strategy}'")
    if not gates:
        return [ones(shape)]

    one = ones(gates[0].shape)
    if strategy == "softmax":
        if logits is None or len(logits) != len(gates):
            raise ContractError("softmax strategy needs the pre-sigmoid logits")
        # last sensor's logit is pinned at 0
        shift = Tensor(np.maximum(0.0, np.max([z.values for z in logits], axis=0)))
        raw = [activation("exp", z - shift) for z in logits]
        raw.append(activation("exp", zeros(shift.shape) - shift))
    else:
        if strategy == "sum_complement":
            residual = clamp(one - _sum(gates), 0.0, 1.0)
        else:
            product = gates[0]
            for p in gates[1:]:
                product = product * p
            residual = one - product
        raw = list(gates) + [residual]

    total = _sum(raw)
    return [divide(q, total) for q in raw]


def _gate_encodings(params: MultiCellParams, raw_inputs: Sequence[Tensor],
                    trace: StepTrace) -> Tuple[List[Tensor], List[Tensor]]:
    if params.encoders is None:
        raise ContractError("gated cells need encoder parameters")
    if len(raw_inputs) != len(params.encoders.weights):
        raise ContractError(f"expected {len(params.encoders.weights)} sensors, got {len(raw_inputs)}")
    enc = [encode(s, W) for s, W in zip(raw_inputs, params.encoders.weights)]
    if len(enc) == 1:
        q = [ones(enc[0].shape)]
    else:
        if params.gates is None:
            raise ContractError("gated cells with more than one sensor need fusion gate parameters")
        logits = fusion_gate_logits(enc, params.gates)
        p = [activation("sigmoid", z) for z in logits]
        q = effective_gates(p, params.gates.strategy, logits)
        trace.pre_gates = [t.values for t in p]
    trace.encodings = [e.values for e in enc]
    trace.fusion_gates = [t.values for t in q]
    return enc, q


def egrf_step(params: MultiCellParams, raw_inputs: Sequence[Tensor], state: CellState,
              packed: Optional[PackedLstm] = None) -> Tuple[CellState, StepTrace]:
    """
    Early gated fusion: a_t = Σ_i q^i ⊙ e^i feeds a single recurrent core.
    """
    if len(params.lstm) != 1:
        raise ContractError(f"egrf uses exactly one recurrent core, got {len(params.lstm)}")
    trace = StepTrace()
    enc, q = _gate_encodings(params, raw_inputs, trace)
    a = enc[0] if len(enc) == 1 else _sum([qi * ei for qi, ei in zip(q, enc)])
    new_state, core_trace = lstm_step(packed or params.lstm[0], a, state)
    trace.gates = core_trace.gates
    trace.fused = [a.values]
    return new_state, trace


def lgrf_step(params: MultiCellParams, raw_inputs: Sequence[Tensor], shared: CellState,
              packed: Optional[List[PackedLstm]] = None) -> Tuple[CellState, StepTrace]:
    """
    Late gated fusion: a^i = q^i ⊙ e^i enters sensor i's core; the cores share
    the prior state and their outputs are summed, exactly as in lrs_step.
    """
    trace = StepTrace()
    enc, q = _gate_encodings(params, raw_inputs, trace)
    gated = enc if len(enc) == 1 else [qi * ei for qi, ei in zip(q, enc)]
    new_state, core_trace = lrs_step(MultiCellParams(params.lstm), gated, shared, packed)
    trace.gates = core_trace.gates
    trace.fused = [a.values for a in gated]
    return new_state, trace
