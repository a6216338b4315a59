"""
Sequence models: per-sensor encoders, one recurrent fusion cell and an output head,
plus binary checkpoint persistence.
"""

import logging
import math
import struct
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cells import (
    GATE_NAMES, RESIDUAL_STRATEGIES, CellState, EncoderParams, FusionGateParams, LstmParams,
    MultiCellParams, StepTrace, egrf_step, encode, erf_step, late_parallel_step, lgrf_step,
    lrs_step, lstm_step, pack_lstm, summed_forget_bias, zero_state,
)
from .errors import ContractError, DimensionError, LoadError
from .tensorgrad import Tensor, activation, concat, matmul, repeat_rows, transpose

logger = logging.getLogger("grfu.model")

CELL_KINDS = (
    "lstm_single_sensor", "early_concat", "early_add", "late_concat", "late_add",
    "lrs", "egrf", "lgrf",
)
HEAD_KINDS = ("classifier", "regressor")
GATED_CELLS = ("egrf", "lgrf")
# cells with one recurrent core per sensor
PER_SENSOR_CELLS = ("late_concat", "late_add", "lrs", "lgrf")
# cells whose cores' c and h are summed into one shared state
SUMMED_STATE_CELLS = ("lrs", "lgrf")

CHECKPOINT_MAGIC = b"GRFU"
CHECKPOINT_VERSION = 1

State = Union[CellState, List[CellState]]


class ModelSpec:
    """
    Architecture description. `out_dim` is K for a classifier and the action
    dimension for a regressor.
    """

    def __init__(self, cell: str, sensor_dims: Sequence[int], d_e: int, d_h: int,
                 head: str = "classifier", out_dim: int = 2,
                 residual_strategy: Optional[str] = None, sensor_index: int = 0):
        self.cell = cell
        self.sensor_dims = tuple(int(d) for d in sensor_dims)
        self.d_e = int(d_e)
        self.d_h = int(d_h)
        self.head = head
        self.out_dim = int(out_dim)
        if residual_strategy is None:
            residual_strategy = "product_complement" if len(self.sensor_dims) == 3 else "sum_complement"
        self.residual_strategy = residual_strategy
        self.sensor_index = int(sensor_index)
        self._validate()

    def _validate(self) -> None:
        if self.cell not in CELL_KINDS:
            raise ContractError(f"unknown cell kind '{self.cell}'")
        if self.head not in HEAD_KINDS:
            raise ContractError(f"unknown head kind '{self.head}'")
        if self.residual_strategy not in RESIDUAL_STRATEGIES:
            raise ContractError(f"unknown residual strategy '{self.residual_strategy}'")
        if not self.sensor_dims or min(self.sensor_dims) < 1:
            raise ContractError(f"sensor dims must be positive, got {self.sensor_dims}")
        if self.d_e < 1 or self.d_h < 1:
            raise ContractError(f"d_e and d_h must be positive, got {self.d_e}, {self.d_h}")
        if self.head == "classifier" and self.out_dim < 2:
            raise ContractError(f"a classifier needs K >= 2, got {self.out_dim}")
        if self.out_dim < 1:
            raise ContractError(f"output dimension must be positive, got {self.out_dim}")
        if not 0 <= self.sensor_index < self.num_sensors:
            raise ContractError(f"sensor_index {self.sensor_index} outside [0, {self.num_sensors})")

    @property
    def num_sensors(self) -> int:
        return len(self.sensor_dims)

    @property
    def is_gated(self) -> bool:
        return self.cell in GATED_CELLS and self.num_sensors >= 2

    @property
    def num_cores(self) -> int:
        return self.num_sensors if self.cell in PER_SENSOR_CELLS else 1

    @property
    def encoded_sensors(self) -> List[int]:
        if self.cell == "lstm_single_sensor":
            return [self.sensor_index]
        return list(range(self.num_sensors))

    @property
    def core_input_dim(self) -> int:
        if self.cell == "early_concat":
            return self.num_sensors * self.d_e
        return self.d_e

    @property
    def head_input_dim(self) -> int:
        if self.cell == "late_concat":
            return self.num_sensors * self.d_h
        return self.d_h

    def to_dict(self) -> Dict:
        return {
            "cell": self.cell, "sensor_dims": list(self.sensor_dims), "d_e": self.d_e,
            "d_h": self.d_h, "head": self.head, "out_dim": self.out_dim,
            "residual_strategy": self.residual_strategy, "sensor_index": self.sensor_index,
        }

    def __eq__(self, other) -> bool:
        return isinstance(other, ModelSpec) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"ModelSpec({self.to_dict()})"


# ====== PARAMETER LAYOUT ======

def parameter_shapes(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape map; the order is the checkpoint record order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for i in spec.encoded_sensors:
        shapes[f"enc.{i}.W"] = (spec.d_e, spec.sensor_dims[i])
    if spec.is_gated:
        for k in range(spec.num_sensors - 1):
            for i in range(spec.num_sensors):
                shapes[f"gate.{k}.{i}.W"] = (spec.d_e, spec.d_e)
    for j in range(spec.num_cores):
        for gate in GATE_NAMES:
            shapes[f"lstm.{j}.W_{gate}"] = (spec.d_h, spec.core_input_dim)
            shapes[f"lstm.{j}.U_{gate}"] = (spec.d_h, spec.d_h)
            shapes[f"lstm.{j}.b_{gate}"] = (spec.d_h,)
    shapes["head.W"] = (spec.out_dim, spec.head_input_dim)
    shapes["head.b"] = (spec.out_dim,)
    return shapes


def parameter_breakdown(spec: ModelSpec) -> Dict[str, int]:
    """Scalar parameter counts per block: encoders, gates, recurrent, head."""
    counts = {"encoders": 0, "gates": 0, "recurrent": 0, "head": 0}
    block = {"enc": "encoders", "gate": "gates", "lstm": "recurrent", "head": "head"}
    for name, shape in parameter_shapes(spec).items():
        counts[block[name.split(".")[0]]] += int(np.prod(shape))
    return counts


def count_parameters(spec: ModelSpec) -> int:
    return sum(parameter_breakdown(spec).values())


def forget_bias(spec: ModelSpec) -> float:
    """Initial forget-gate bias: 1.0, lowered for cells that sum their cores' states."""
    if spec.cell in SUMMED_STATE_CELLS:
        return summed_forget_bias(spec.num_cores)
    return 1.0


def init_params(spec: ModelSpec, seed: int, scale: Optional[float] = None) -> Dict[str, Tensor]:
    """
    Seeded initialisation. Weights are uniform in ±1/sqrt(fan_in), the forget-gate
    bias is `forget_bias(spec)` and all other biases 0. With `scale`, every entry is
    uniform in ±scale.
    """
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    b_f = forget_bias(spec)
    for name, shape in parameter_shapes(spec).items():
        if scale is not None:
            params[name] = Tensor(rng.uniform(-scale, scale, size=shape))
        elif len(shape) == 1:
            fill = b_f if name.endswith(".b_f") else 0.0
            params[name] = Tensor(np.full(shape, fill))
        else:
            fan_in = shape[1]
            if name.startswith("gate."):
                fan_in = spec.d_e * spec.num_sensors
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return params


def zero_params(spec: ModelSpec) -> Dict[str, Tensor]:
    return {name: Tensor(np.zeros(shape)) for name, shape in parameter_shapes(spec).items()}


def check_params(spec: ModelSpec, params: Dict[str, Tensor]) -> None:
    expected = parameter_shapes(spec)
    missing = [name for name in expected if name not in params]
    if missing:
        raise ContractError(f"missing parameters: {', '.join(missing)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DimensionError(f"parameter '{name}' has the wrong shape", params[name].shape, shape)


def cell_params(spec: ModelSpec, params: Dict[str, Tensor]) -> MultiCellParams:
    """Group flat named parameters into the cell containers."""
    lstm = []
    for j in range(spec.num_cores):
        lstm.append(LstmParams(
            W={g: params[f"lstm.{j}.W_{g}"] for g in GATE_NAMES},
            U={g: params[f"lstm.{j}.U_{g}"] for g in GATE_NAMES},
            b={g: params[f"lstm.{j}.b_{g}"] for g in GATE_NAMES},
        ))
    encoders = None
    if spec.cell != "lstm_single_sensor":
        encoders = EncoderParams([params[f"enc.{i}.W"] for i in range(spec.num_sensors)])
    gates = None
    if spec.is_gated:
        gates = FusionGateParams(
            [[params[f"gate.{k}.{i}.W"] for i in range(spec.num_sensors)]
             for k in range(spec.num_sensors - 1)],
            spec.residual_strategy,
        )
    return MultiCellParams(lstm, encoders, gates)


# ====== FORWARD ======

class SequenceOutput:
    """
    Per-step head outputs (one Tensor per time step, [out] or [B x out]), the
    per-step traces and the final state(s).
    """

    def __init__(self, outputs: List[Tensor], traces: List[StepTrace], final_state: State):
        self.outputs = outputs
        self.traces = traces
        self.final_state = final_state

    def __len__(self) -> int:
        return len(self.outputs)

    def stacked(self) -> np.ndarray:
        """Head outputs as a numpy array with time on the leading axis."""
        return np.stack([o.values for o in self.outputs])


def initial_state(spec: ModelSpec, batch: Optional[int] = None) -> State:
    if spec.cell in ("late_concat", "late_add"):
        return [zero_state(spec.d_h, batch) for _ in range(spec.num_sensors)]
    return zero_state(spec.d_h, batch)


def detach_state(state: State) -> State:
    """Cut the gradient path at a window boundary; values are kept."""
    if isinstance(state, list):
        return [s.detach() for s in state]
    return state.detach()


def _head(spec: ModelSpec, params: Dict[str, Tensor], h: Tensor) -> Tensor:
    b = params["head.b"] if h.ndim == 1 else repeat_rows(params["head.b"], h.shape[0])
    out = matmul(h, transpose(params["head.W"])) + b
    if spec.head == "regressor":
        return activation("tanh", out)
    return out


def forward_sequence(spec: ModelSpec, params: Dict[str, Tensor], sequences: Sequence,
                     state: Optional[State] = None) -> SequenceOutput:
    """
    Step the cell over t = 1..T and apply the head to the combined h_t each step.

    Args:
        spec: model architecture
        params: flat named parameters (may be linked to an active GradGraph)
        sequences: one array per sensor, time-major: [T x d_i] or [T x B x d_i]
        state: carried state; zeros when omitted

    Returns:
        SequenceOutput with T per-step outputs
    """
    if len(sequences) != spec.num_sensors:
        raise ContractError(f"model expects {spec.num_sensors} sensors, got {len(sequences)}")
    arrays = [s.values if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64) for s in sequences]
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ContractError(f"sensor sequences differ in length: {sorted(lengths)}")
    for i, a in enumerate(arrays):
        if a.shape[-1] != spec.sensor_dims[i]:
            raise DimensionError(f"sensor {i} width differs from the model spec", a.shape, (spec.sensor_dims[i],))
    T = lengths.pop()
    batch = arrays[0].shape[1] if arrays[0].ndim == 3 else None

    cell = cell_params(spec, params)
    packed = [pack_lstm(p) for p in cell.lstm]
    if state is None:
        state = initial_state(spec, batch)

    outputs, traces = [], []
    for t in range(T):
        raw = [Tensor._wrap(a[t]) for a in arrays]
        if spec.cell == "lstm_single_sensor":
            x = encode(raw[spec.sensor_index], params[f"enc.{spec.sensor_index}.W"])
            state, trace = lstm_step(packed[0], x, state)
            h = state.h
        elif spec.cell in ("early_concat", "early_add"):
            enc = [encode(s, W) for s, W in zip(raw, cell.encoders.weights)]
            mode = "concat" if spec.cell == "early_concat" else "add"
            state, trace = erf_step(packed[0], enc, mode, state)
            h = state.h
        elif spec.cell in ("late_concat", "late_add"):
            enc = [encode(s, W) for s, W in zip(raw, cell.encoders.weights)]
            mode = "concat_out" if spec.cell == "late_concat" else "add_out"
            state, h, trace = late_parallel_step(cell, enc, state, mode, packed)
        elif spec.cell == "lrs":
            enc = [encode(s, W) for s, W in zip(raw, cell.encoders.weights)]
            state, trace = lrs_step(cell, enc, state, packed)
            h = state.h
        elif spec.cell == "egrf":
            state, trace = egrf_step(cell, raw, state, packed[0])
            h = state.h
        else:
            state, trace = lgrf_step(cell, raw, state, packed)
            h = state.h
        outputs.append(_head(spec, params, h))
        traces.append(trace)

    return SequenceOutput(outputs, traces, state)


class FusionModel:
    """A ModelSpec with its named parameters, plus any extra tensors carried by a checkpoint."""

    def __init__(self, spec: ModelSpec, params: Dict[str, Tensor],
                 extras: Optional[Dict[str, Tensor]] = None):
        check_params(spec, params)
        self.spec = spec
        self.params = {name: params[name] for name in parameter_shapes(spec)}
        self.extras = extras or {}

    @classmethod
    def initialise(cls, spec: ModelSpec, seed: int, scale: Optional[float] = None) -> "FusionModel":
        return cls(spec, init_params(spec, seed, scale))

    def forward(self, sequences: Sequence, state: Optional[State] = None) -> SequenceOutput:
        return forward_sequence(self.spec, self.params, sequences, state)

    def count_parameters(self) -> int:
        return count_parameters(self.spec)


# ====== CHECKPOINTS ======
# Layout: magic, u32 version, spec block of u32 codes, u32 parameter count, parameter
# records, u32 extra count, extra records. Record: u32 name length, name bytes,
# u32 rank, rank x u32 shape, row-major float64 little-endian values.

def _spec_block(spec: ModelSpec) -> bytes:
    codes = [CELL_KINDS.index(spec.cell), spec.num_sensors, *spec.sensor_dims, spec.d_e, spec.d_h,
             HEAD_KINDS.index(spec.head), spec.out_dim,
             RESIDUAL_STRATEGIES.index(spec.residual_strategy), spec.sensor_index]
    return struct.pack(f"<{len(codes)}I", *codes)


def _record(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    shape = values.shape
    head = struct.pack("<I", len(encoded)) + encoded + struct.pack(f"<I{len(shape)}I", len(shape), *shape)
    return head + np.ascontiguousarray(values, dtype="<f8").tobytes()


def save_checkpoint(model: FusionModel, path, extras: Optional[Dict[str, Tensor]] = None) -> None:
    extras = {**model.extras, **(extras or {})}
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _spec_block(model.spec),
             struct.pack("<I", len(model.params))]
    parts.extend(_record(name, t.values) for name, t in model.params.items())
    parts.append(struct.pack("<I", len(extras)))
    parts.extend(_record(name, np.asarray(t.values if isinstance(t, Tensor) else t)) for name, t in extras.items())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))
    logger.debug(f"checkpoint written to {path} ({len(model.params)} parameters, {len(extras)} extras)")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, field: str) -> bytes:
        if self.offset + size > len(self.data):
            raise LoadError(f"file truncated while reading {field}", field=field)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]

    def u32s(self, count: int, field: str) -> Tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count, field))

    def record(self, field: str) -> Tuple[str, np.ndarray]:
        name_len = self.u32(f"{field} name length")
        try:
            name = self.take(name_len, f"{field} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise LoadError(f"{field} name is not valid utf-8", field=field) from e
        rank = self.u32(f"{name} rank")
        shape = self.u32s(rank, f"{name} shape")
        # exact integer product; a corrupted shape must not wrap around
        count = math.prod(shape)
        raw = self.take(8 * count, name)
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        return name, values


def _decode(code: int, table: Tuple[str, ...], field: str) -> str:
    if code >= len(table):
        raise LoadError(f"unknown {field} code {code}", field=field)
    return table[code]


def load_checkpoint(path) -> FusionModel:
    """Read a checkpoint; extra tensors land in `model.extras`."""
    with open(path, "rb") as fh:
        data = fh.read()
    reader = _Reader(data)
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise LoadError("bad magic", field="magic")
    reader.offset = 4
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"unsupported checkpoint version {version}", field="version")

    cell = _decode(reader.u32("cell kind"), CELL_KINDS, "cell kind")
    num_sensors = reader.u32("sensor count")
    dims = reader.u32s(num_sensors, "sensor dims")
    d_e, d_h = reader.u32s(2, "dims")
    head = _decode(reader.u32("head kind"), HEAD_KINDS, "head kind")
    out_dim = reader.u32("output dim")
    strategy = _decode(reader.u32("residual strategy"), RESIDUAL_STRATEGIES, "residual strategy")
    sensor_index = reader.u32("sensor index")
    try:
        spec = ModelSpec(cell, dims, d_e, d_h, head, out_dim, strategy, sensor_index)
    except ContractError as e:
        raise LoadError(f"invalid spec block: {e}", field="spec") from e

    expected = parameter_shapes(spec)
    count = reader.u32("parameter count")
    if count != len(expected):
        raise LoadError(f"spec expects {len(expected)} parameters, file holds {count}", field="parameter count")
    params: Dict[str, Tensor] = {}
    for _ in range(count):
        name, values = reader.record("parameter")
        if name not in expected:
            raise LoadError(f"unexpected parameter '{name}'", field=name)
        if name in params:
            raise LoadError(f"parameter '{name}' appears twice", field=name)
        if values.shape != expected[name]:
            raise LoadError(f"parameter '{name}' has shape {values.shape}, spec says {expected[name]}", field=name)
        params[name] = Tensor._wrap(values)

    extras: Dict[str, Tensor] = {}
    for _ in range(reader.u32("extra count")):
        name, values = reader.record("extra")
        if name in extras:
            raise LoadError(f"extra '{name}' appears twice", field=name)
        extras[name] = Tensor._wrap(values)
    if reader.offset != len(data):
        raise LoadError(f"{len(data) - reader.offset} trailing bytes after the last record", field="trailer")

    logger.debug(f"checkpoint loaded from {path}: {spec.cell}, {len(params)} parameters")
    return FusionModel(spec, params, extras)
