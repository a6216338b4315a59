"""
Deterministic synthetic multimodal benchmarks.

Classification: a latent Markov chain over K classes drives class-conditional means in
each sensor; each sensor maps classes onto its own regimes so that some class pairs are
only separable by combining sensors. Regression: a latent curvature process drives
LiDAR-like rays, odometry and a feature stream; the target is a squashed steering action.

All randomness comes from counter-based Philox streams keyed on
(seed, sequence, sensor, purpose), so a sequence's content does not depend on the
order in which sequences are generated.
"""

import json
import logging
import struct
import zlib
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, LoadError

logger = logging.getLogger("grfu.synthdata")

TASKS = ("classify", "regress")
CORRUPTION_MODES = ("noise_replace", "freeze", "bias_shift")
# annotation code per frame and sensor; 0 means clean
ANNOTATION_CODES = {"clean": 0, "noise_replace": 1, "freeze": 2, "bias_shift": 3}

DATASET_MAGIC = b"GRFD"
DATASET_VERSION = 1

# stream purposes mixed into the Philox key
_LABELS, _MEANS, _NOISE, _CORRUPT, _CURVE, _PROJECTION = range(6)

# regression constants
RAY_COUNT = 19
RAY_BASE_DISTANCE = 10.0
RAY_CURVE_RESPONSE = 1.0
ODOMETRY_SPEED = 1.0
YAW_SCALE = 0.5
CURVE_RATE_STEP = 0.02
CURVE_RATE_MAX = 0.05
FEATURE_HISTORY = 4


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


class CorruptionWindow:
    """Sensor `sensor` (0-based) is corrupted on frames start..end (1-based, inclusive)."""

    def __init__(self, sensor: int, start: int, end: int, mode: str = "noise_replace"):
        self.sensor = int(sensor)
        self.start = int(start)
        self.end = int(end)
        self.mode = mode

    def to_dict(self) -> Dict:
        return {"sensor": self.sensor, "start": self.start, "end": self.end, "mode": self.mode}

    def __repr__(self) -> str:
        return f"CorruptionWindow({self.sensor}, {self.start}, {self.end}, '{self.mode}')"


class ScenarioSpec:
    """
    Everything a generated dataset depends on.

    `views[i]` maps class id -> regime of sensor i (None: sensor i carries no label
    signal). `first_index` offsets the per-sequence random keys so that a test split
    shares the class-mean tables of its train split but none of its noise.
    """

    def __init__(self, task: str = "classify", sensor_dims: Sequence[int] = (8, 16), T: int = 120,
                 num_sequences: int = 200, num_classes: int = 6,
                 windows: Sequence[CorruptionWindow] = (),
                 views: Optional[Sequence[Optional[Sequence[int]]]] = None,
                 sigma: float = 1.0, amp: float = 2.0, seed: int = 0, first_index: int = 0,
                 curvature_scale: float = 1.0, gain: float = 1.5, self_transition: float = 0.9):
        self.task = task
        self.sensor_dims = tuple(int(d) for d in sensor_dims)
        self.T = int(T)
        self.num_sequences = int(num_sequences)
        self.num_classes = int(num_classes)
        self.windows = [w if isinstance(w, CorruptionWindow) else CorruptionWindow(**w) for w in windows]
        if views is None:
            views = [list(range(self.num_classes)) for _ in self.sensor_dims]
        self.views = [None if v is None else [int(r) for r in v] for v in views]
        self.sigma = float(sigma)
        self.amp = float(amp)
        self.seed = int(seed)
        self.first_index = int(first_index)
        self.curvature_scale = float(curvature_scale)
        self.gain = float(gain)
        self.self_transition = float(self_transition)
        self._validate()

    def _validate(self) -> None:
        if self.task not in TASKS:
            raise ContractError(f"unknown task '{self.task}'")
        if not self.sensor_dims or min(self.sensor_dims) < 1:
            raise ContractError(f"sensor dims must be >= 1, got {self.sensor_dims}")
        if self.T < 1 or self.num_sequences < 0:
            raise ContractError(f"need T >= 1 and a non-negative sequence count, got {self.T}, {self.num_sequences}")
        if self.sigma < 0:
            raise ContractError(f"sigma must be non-negative, got {self.sigma}")
        for w in self.windows:
            if w.mode not in CORRUPTION_MODES:
                raise ContractError(f"unknown corruption mode '{w.mode}'")
            if not 0 <= w.sensor < self.num_sensors:
                raise ContractError(f"corruption window names sensor {w.sensor}, only {self.num_sensors} exist")
            if not 1 <= w.start <= w.end <= self.T:
                raise ContractError(f"corruption window [{w.start}, {w.end}] outside [1, {self.T}]")
        if self.task == "regress":
            if self.sensor_dims[:2] != (RAY_COUNT, 3) or self.num_sensors != 3:
                raise ContractError(f"regression sensors are ({RAY_COUNT}, 3, d), got {self.sensor_dims}")
            return
        if self.num_classes < 2:
            raise ContractError(f"K must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.self_transition <= 1.0:
            raise ContractError(f"self-transition must be a probability, got {self.self_transition}")
        if len(self.views) != self.num_sensors:
            raise ContractError(f"{self.num_sensors} sensors need {self.num_sensors} views, got {len(self.views)}")
        for i, view in enumerate(self.views):
            if view is None:
                continue
            if len(view) != self.num_classes or min(view) < 0:
                raise ContractError(f"view of sensor {i} must map all {self.num_classes} classes to regimes >= 0")
            if max(view) + 1 > self.sensor_dims[i]:
                raise ContractError(f"sensor {i} has {max(view) + 1} regimes but only {self.sensor_dims[i]} dims")
        # regime means sit on orthogonal axes at distance amp * sqrt(2)
        if self.amp * np.sqrt(2.0) < 2.0 * self.sigma:
            raise ContractError(f"regime separation {self.amp * np.sqrt(2.0):.3f} is below 2 sigma")

    @property
    def num_sensors(self) -> int:
        return len(self.sensor_dims)

    def to_dict(self) -> Dict:
        return {
            "task": self.task, "sensor_dims": list(self.sensor_dims), "T": self.T,
            "num_sequences": self.num_sequences, "num_classes": self.num_classes,
            "windows": [w.to_dict() for w in self.windows], "views": self.views,
            "sigma": self.sigma, "amp": self.amp, "seed": self.seed, "first_index": self.first_index,
            "curvature_scale": self.curvature_scale, "gain": self.gain,
            "self_transition": self.self_transition,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ScenarioSpec":
        return cls(**data)

    def split(self, num_sequences: int, first_index: int) -> "ScenarioSpec":
        data = self.to_dict()
        data.update(num_sequences=num_sequences, first_index=first_index)
        return ScenarioSpec.from_dict(data)


def default_classification_spec(seed: int = 0, num_sequences: int = 200, **overrides) -> ScenarioSpec:
    """Two sensors, each confusing a different class pair, each with one noise window."""
    params = dict(
        task="classify", sensor_dims=(8, 16), T=120, num_sequences=num_sequences, num_classes=6,
        views=[[0, 1, 2, 3, 4, 4], [0, 1, 2, 2, 3, 4]],
        windows=[CorruptionWindow(1, 31, 60, "noise_replace"), CorruptionWindow(0, 81, 100, "noise_replace")],
        sigma=1.0, amp=2.0, seed=seed,
    )
    params.update(overrides)
    return ScenarioSpec(**params)


def default_regression_spec(seed: int = 0, num_sequences: int = 160, **overrides) -> ScenarioSpec:
    """LiDAR rays, odometry and a 24-d feature stream, with the rays corrupted mid-sequence."""
    params = dict(
        task="regress", sensor_dims=(RAY_COUNT, 3, 24), T=100, num_sequences=num_sequences,
        num_classes=1, windows=[CorruptionWindow(0, 41, 70, "noise_replace")],
        views=[None, None, None], sigma=0.1, seed=seed,
    )
    params.update(overrides)
    return ScenarioSpec(**params)


class LabeledSequence:
    """
    streams: one [T x d_i] array per sensor. labels: [T] class ids (classification)
    or None. targets: [T] actions in (-1, 1) (regression) or None. annotations:
    [T x M] corruption codes.
    """

    def __init__(self, streams: List[np.ndarray], annotations: np.ndarray,
                 labels: Optional[np.ndarray] = None, targets: Optional[np.ndarray] = None):
        self.streams = streams
        self.annotations = annotations
        self.labels = labels
        self.targets = targets

    @property
    def T(self) -> int:
        return self.annotations.shape[0]


class Dataset:
    def __init__(self, spec: ScenarioSpec, sequences: List[LabeledSequence]):
        self.spec = spec
        self.sequences = sequences

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, index) -> LabeledSequence:
        return self.sequences[index]

    @property
    def num_frames(self) -> int:
        return sum(s.T for s in self.sequences)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.spec, [self.sequences[i] for i in indices])


# ====== CORRUPTION ======

def _apply_windows(spec: ScenarioSpec, index: int, streams: List[np.ndarray],
                   moments: Dict[int, Tuple[np.ndarray, np.ndarray]],
                   log_sensors: Sequence[int] = ()) -> np.ndarray:
    """Overwrite the scenario's corruption windows in place and return the annotation codes.

    For sensors in `log_sensors` the moments describe log values and replacement
    noise is drawn log-normally so the stream stays positive.
    """
    annotations = np.zeros((spec.T, spec.num_sensors), dtype=np.uint8)
    for w_id, w in enumerate(spec.windows):
        stream = streams[w.sensor]
        lo, hi = w.start - 1, w.end
        mean, std = moments[w.sensor]
        if w.mode == "noise_replace":
            eps = _stream(spec.seed, index, w.sensor, _CORRUPT, w_id).standard_normal((hi - lo, stream.shape[1]))
            noise = mean + std * eps
            stream[lo:hi] = np.exp(noise) if w.sensor in log_sensors else noise
        elif w.mode == "freeze":
            stream[lo:hi] = stream[lo - 1] if lo > 0 else mean
        else:
            stream[lo:hi] = stream[lo:hi] + 3.0 * spec.sigma
        annotations[lo:hi, w.sensor] = ANNOTATION_CODES[w.mode]
    return annotations


# ====== CLASSIFICATION ======

def class_means(spec: ScenarioSpec) -> List[Optional[np.ndarray]]:
    """Per sensor, a [regimes x d_i] table of regime means on orthogonal axes scaled by amp."""
    tables: List[Optional[np.ndarray]] = []
    for i, (dim, view) in enumerate(zip(spec.sensor_dims, spec.views)):
        if view is None:
            tables.append(None)
            continue
        q, _ = np.linalg.qr(_stream(spec.seed, 0, i, _MEANS).standard_normal((dim, dim)))
        tables.append(spec.amp * q[:, :max(view) + 1].T)
    return tables


def _marginal_moments(spec: ScenarioSpec, tables) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Label-free mean and std of each clean stream under the uniform class mix."""
    moments = {}
    for i, (dim, view, table) in enumerate(zip(spec.sensor_dims, spec.views, tables)):
        if view is None:
            moments[i] = (np.zeros(dim), np.full(dim, spec.sigma))
            continue
        per_class = table[view]
        mean = per_class.mean(axis=0)
        var = ((per_class - mean) ** 2).mean(axis=0) + spec.sigma ** 2
        moments[i] = (mean, np.sqrt(var))
    return moments


def _label_chain(spec: ScenarioSpec, index: int) -> np.ndarray:
    rng = _stream(spec.seed, index, 0, _LABELS)
    K = spec.num_classes
    labels = np.empty(spec.T, dtype=np.int64)
    labels[0] = rng.integers(K)
    stay = rng.random(spec.T)
    jump = rng.integers(K - 1, size=spec.T)
    for t in range(1, spec.T):
        prev = labels[t - 1]
        if stay[t] < spec.self_transition:
            labels[t] = prev
        else:
            # uniform over the other K-1 classes
            labels[t] = jump[t] + (jump[t] >= prev)
    return labels


def generate_classification(spec: ScenarioSpec) -> Dataset:
    """Per-frame labelled sequences; fully determined by the scenario."""
    if spec.task != "classify":
        raise ContractError(f"generate_classification needs a classify spec, got '{spec.task}'")
    tables = class_means(spec)
    moments = _marginal_moments(spec, tables)
    sequences = []
    for n in range(spec.num_sequences):
        index = spec.first_index + n
        labels = _label_chain(spec, index)
        streams = []
        for i, (dim, view, table) in enumerate(zip(spec.sensor_dims, spec.views, tables)):
            noise = spec.sigma * _stream(spec.seed, index, i, _NOISE).standard_normal((spec.T, dim))
            clean = np.zeros((spec.T, dim)) if view is None else table[np.asarray(view)[labels]]
            streams.append(clean + noise)
        annotations = _apply_windows(spec, index, streams, moments)
        sequences.append(LabeledSequence(streams, annotations, labels=labels))
    logger.debug(f"generated {len(sequences)} classification sequences (seed {spec.seed})")
    return Dataset(spec, sequences)


# ====== REGRESSION ======

def curvature_process(spec: ScenarioSpec, index: int) -> np.ndarray:
    """Integrated bounded random walk in [-curvature_scale, curvature_scale]."""
    steps = _stream(spec.seed, index, 0, _CURVE).standard_normal(spec.T)
    rate, k = 0.0, 0.0
    kappa = np.empty(spec.T)
    for t in range(spec.T):
        rate = float(np.clip(rate + CURVE_RATE_STEP * steps[t], -CURVE_RATE_MAX, CURVE_RATE_MAX))
        k = float(np.clip(k + rate, -1.0, 1.0))
        kappa[t] = spec.curvature_scale * k
    return kappa


def ray_angles() -> np.ndarray:
    return np.linspace(-np.pi / 2, np.pi / 2, RAY_COUNT)


def _feature_projection(spec: ScenarioSpec) -> np.ndarray:
    dim = spec.sensor_dims[2]
    return _stream(spec.seed, 0, 2, _PROJECTION).standard_normal((dim, FEATURE_HISTORY)) / np.sqrt(FEATURE_HISTORY)


def generate_regression(spec: ScenarioSpec) -> Dataset:
    """Steering-style sequences: rays, odometry (one-step lag) and a feature stream from κ history."""
    if spec.task != "regress":
        raise ContractError(f"generate_regression needs a regress spec, got '{spec.task}'")
    angles = ray_angles()
    projection = _feature_projection(spec)
    sequences = []
    for n in range(spec.num_sequences):
        index = spec.first_index + n
        kappa = curvature_process(spec, index)
        prev = np.concatenate([[0.0], kappa[:-1]])
        targets = np.tanh(spec.gain * kappa)

        ray_noise = _stream(spec.seed, index, 0, _NOISE).standard_normal((spec.T, RAY_COUNT))
        rays = RAY_BASE_DISTANCE * np.exp(-RAY_CURVE_RESPONSE * np.outer(kappa, np.sin(angles))
                                          + spec.sigma * ray_noise)

        odometry = np.stack([ODOMETRY_SPEED * np.cos(prev),
                             ODOMETRY_SPEED * np.tanh(spec.gain * prev),
                             YAW_SCALE * prev], axis=1)
        odometry = odometry + spec.sigma * _stream(spec.seed, index, 1, _NOISE).standard_normal(odometry.shape)

        padded = np.concatenate([np.zeros(FEATURE_HISTORY - 1), kappa])
        history = np.stack([padded[t:t + FEATURE_HISTORY][::-1] for t in range(spec.T)])
        features = history @ projection.T
        features = features + spec.sigma * _stream(spec.seed, index, 2, _NOISE).standard_normal(features.shape)

        streams = [rays, odometry, features]
        logged = [np.log(rays), odometry, features]
        moments = {i: (s.mean(axis=0), s.std(axis=0)) for i, s in enumerate(logged)}
        annotations = _apply_windows(spec, index, streams, moments, log_sensors=(0,))
        sequences.append(LabeledSequence(streams, annotations, targets=targets))
    logger.debug(f"generated {len(sequences)} regression sequences (seed {spec.seed})")
    return Dataset(spec, sequences)


def generate(spec: ScenarioSpec) -> Dataset:
    return generate_classification(spec) if spec.task == "classify" else generate_regression(spec)


# ====== BATCHING ======

class MultiSensorBatch:
    """
    Time-major batch: sensors[i] is [T x B x d_i]; labels [T x B] or targets
    [T x B x 1]; annotations [T x B x M]; indices are dataset positions.
    """

    def __init__(self, sensors: List[np.ndarray], annotations: np.ndarray, indices: np.ndarray,
                 labels: Optional[np.ndarray] = None, targets: Optional[np.ndarray] = None):
        self.sensors = sensors
        self.annotations = annotations
        self.indices = indices
        self.labels = labels
        self.targets = targets

    @property
    def T(self) -> int:
        return self.annotations.shape[0]

    @property
    def size(self) -> int:
        return self.annotations.shape[1]

    def window(self, start: int, stop: int) -> "MultiSensorBatch":
        return MultiSensorBatch(
            [s[start:stop] for s in self.sensors], self.annotations[start:stop], self.indices,
            None if self.labels is None else self.labels[start:stop],
            None if self.targets is None else self.targets[start:stop],
        )


def stack_batch(dataset: Dataset, indices: Sequence[int]) -> MultiSensorBatch:
    seqs = [dataset[i] for i in indices]
    if len({s.T for s in seqs}) != 1:
        raise ContractError("sequences in one batch must share T")
    sensors = [np.stack([s.streams[i] for s in seqs], axis=1) for i in range(len(seqs[0].streams))]
    annotations = np.stack([s.annotations for s in seqs], axis=1)
    labels = targets = None
    if seqs[0].labels is not None:
        labels = np.stack([s.labels for s in seqs], axis=1)
    else:
        targets = np.stack([s.targets for s in seqs], axis=1)[..., None]
    return MultiSensorBatch(sensors, annotations, np.asarray(indices), labels, targets)


def make_batches(dataset: Dataset, batch_size: int, seed: Optional[int] = None,
                 epoch: int = 0) -> List[MultiSensorBatch]:
    """
    Split the dataset into batches. With a seed the order is a permutation that
    depends only on (seed, epoch); without one the dataset order is kept. The last
    batch may be short.
    """
    if batch_size < 1:
        raise ContractError(f"batch size must be positive, got {batch_size}")
    order = np.arange(len(dataset))
    if seed is not None:
        order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(len(dataset))
    return [stack_batch(dataset, order[i:i + batch_size]) for i in range(0, len(dataset), batch_size)]


# ====== SUMMARIES ======

def class_histogram(dataset: Dataset) -> np.ndarray:
    K = dataset.spec.num_classes
    counts = np.zeros(K, dtype=np.int64)
    for seq in dataset:
        if seq.labels is not None:
            counts += np.bincount(seq.labels, minlength=K)
    return counts


def mutual_information_bits(x: np.ndarray, labels: np.ndarray, bins: int = 8) -> float:
    """Plug-in MI estimate between a scalar signal (equal-frequency bins) and discrete labels."""
    x = np.asarray(x, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if x.shape != labels.shape:
        raise ContractError(f"signal and labels differ in length: {x.shape} vs {labels.shape}")
    edges = np.quantile(x, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    x_bin = np.searchsorted(edges, x, side="right")
    _, y_bin = np.unique(labels, return_inverse=True)
    joint = np.zeros((bins, y_bin.max() + 1))
    np.add.at(joint, (x_bin, y_bin), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (px @ py)[nz])))


# ====== PERSISTENCE ======
# Layout: magic, u32 version, u32 spec length, spec JSON, u32 sequence count, then per
# sequence every sensor stream, labels (i64) or targets (f64), annotations (u8), all
# little-endian; a trailing CRC-32 covers everything after the version.

def save_dataset(dataset: Dataset, path) -> None:
    spec_bytes = json.dumps(dataset.spec.to_dict(), sort_keys=True).encode("utf-8")
    payload = [struct.pack("<I", len(spec_bytes)), spec_bytes, struct.pack("<I", len(dataset))]
    for seq in dataset:
        for stream in seq.streams:
            payload.append(np.ascontiguousarray(stream, dtype="<f8").tobytes())
        if seq.labels is not None:
            payload.append(np.ascontiguousarray(seq.labels, dtype="<i8").tobytes())
        else:
            payload.append(np.ascontiguousarray(seq.targets, dtype="<f8").tobytes())
        payload.append(np.ascontiguousarray(seq.annotations, dtype=np.uint8).tobytes())
    body = b"".join(payload)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<I", DATASET_VERSION) + body
                 + struct.pack("<I", zlib.crc32(body)))
    logger.debug(f"dataset with {len(dataset)} sequences written to {path}")


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != DATASET_MAGIC:
        raise LoadError("bad magic", field="magic")
    if len(data) < 12:
        raise LoadError("file truncated before the payload", field="header")
    (version,) = struct.unpack("<I", data[4:8])
    if version != DATASET_VERSION:
        raise LoadError(f"unsupported dataset version {version}", field="version")
    body, (crc,) = data[8:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise LoadError("checksum mismatch", field="checksum")

    offset = 0

    def take(size: int, field: str) -> bytes:
        nonlocal offset
        if offset + size > len(body):
            raise LoadError(f"file truncated while reading {field}", field=field)
        chunk = body[offset:offset + size]
        offset += size
        return chunk

    (spec_len,) = struct.unpack("<I", take(4, "spec length"))
    try:
        spec = ScenarioSpec.from_dict(json.loads(take(spec_len, "spec").decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise LoadError(f"spec block is invalid: {e}", field="spec") from e
    (count,) = struct.unpack("<I", take(4, "sequence count"))

    T, M = spec.T, spec.num_sensors
    sequences = []
    for n in range(count):
        streams = [np.frombuffer(take(8 * T * d, f"sequence {n} sensor {i}"), dtype="<f8")
                   .astype(np.float64).reshape(T, d) for i, d in enumerate(spec.sensor_dims)]
        labels = targets = None
        if spec.task == "classify":
            labels = np.frombuffer(take(8 * T, f"sequence {n} labels"), dtype="<i8").astype(np.int64)
        else:
            targets = np.frombuffer(take(8 * T, f"sequence {n} targets"), dtype="<f8").astype(np.float64)
        annotations = np.frombuffer(take(T * M, f"sequence {n} annotations"), dtype=np.uint8).reshape(T, M).copy()
        sequences.append(LabeledSequence(streams, annotations, labels, targets))
    if offset != len(body):
        raise LoadError(f"{len(body) - offset} unread bytes after the last sequence", field="trailer")
    return Dataset(spec, sequences)
