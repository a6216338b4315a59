"""
Losses, the Adam optimizer, truncated BPTT training and the evaluation metrics
(per-frame mAP for classification, MSE for regression).
"""

import asyncio
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, TrainingError
from .model import FusionModel, detach_state, forward_sequence, initial_state
from .synthdata import Dataset, MultiSensorBatch, make_batches
from .tensorgrad import (
    GradGraph, Tensor, backward, concat, log_softmax, mean_all, scale, select, sum_all,
)

logger = logging.getLogger("grfu.train")


# ====== LOSSES ======

def cross_entropy_per_frame(logits: Tensor, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    """
    Mean (or sum) over frames of -log softmax(logits_t)[label_t].

    Args:
        logits: [N x K] per-frame logits
        labels: N class ids in [0, K)
        reduction: "mean" or "sum"
    """
    if logits.ndim != 2:
        raise DimensionError("logits must be [frames x classes]", logits.shape)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError("one label per frame", logits.shape, labels.shape)
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    total = sum_all(select(log_softmax(logits), labels))
    if reduction == "sum":
        return scale(total, -1.0)
    return scale(total, -1.0 / labels.shape[0])


def mse_loss(pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Mean (or sum) of squared differences."""
    if pred.shape != target.shape:
        raise DimensionError("prediction and target shapes differ", pred.shape, target.shape)
    diff = pred - target
    if reduction == "sum":
        return sum_all(diff * diff)
    return mean_all(diff * diff)


# ====== OPTIMISER ======

class AdamState:
    """First/second moments per parameter, step count and hyperparameters."""

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def to_extras(self) -> Dict[str, Tensor]:
        extras = {f"adam.m.{k}": Tensor(v) for k, v in self.m.items()}
        extras.update({f"adam.v.{k}": Tensor(v) for k, v in self.v.items()})
        extras["adam.t"] = Tensor(float(self.t))
        return extras

    @classmethod
    def from_extras(cls, extras: Dict[str, Tensor], lr: float) -> "AdamState":
        state = cls(lr=lr)
        for name, t in extras.items():
            if name.startswith("adam.m."):
                state.m[name[len("adam.m."):]] = t.values.copy()
            elif name.startswith("adam.v."):
                state.v[name[len("adam.v."):]] = t.values.copy()
        if "adam.t" in extras:
            state.t = int(extras["adam.t"].item())
        return state


def adam_step(state: AdamState, params: Dict[str, Tensor],
              grads: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """
    One bias-corrected Adam update. The moments and step count in `state` advance;
    a fresh parameter dict is returned.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient of '{name}' has the wrong shape", g.shape, params[name].shape)
        if not np.all(np.isfinite(g.values)):
            raise TrainingError(f"non-finite gradient for '{name}'", parameter=name)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    updated = dict(params)
    for name, g in grads.items():
        gv = g.values
        m = b1 * state.m.get(name, np.zeros_like(gv)) + (1.0 - b1) * gv
        v = b2 * state.v.get(name, np.zeros_like(gv)) + (1.0 - b2) * gv * gv
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        updated[name] = Tensor._wrap(params[name].values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated


def clip_by_global_norm(grads: Dict[str, Tensor], max_norm: Optional[float]) -> Tuple[Dict[str, Tensor], float]:
    """Rescale all gradients together when their joint L2 norm exceeds max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g.values * g.values)) for g in grads.values())))
    if max_norm is None or norm <= max_norm or not np.isfinite(norm):
        return grads, norm
    factor = max_norm / norm
    return {k: Tensor._wrap(g.values * factor) for k, g in grads.items()}, norm


# ====== METRICS ======

class MetricReport:
    """
    Evaluation result. Classification fills per_class (class id -> AP), mean_ap and
    skipped (classes without positives); regression fills mse. loss_curve holds one
    loss per epoch when the report comes out of training.
    """

    def __init__(self, task: str, loss: float, per_class: Optional[Dict[int, float]] = None,
                 mean_ap: Optional[float] = None, mse: Optional[float] = None,
                 skipped: Optional[List[int]] = None, frames: int = 0):
        self.task = task
        self.loss = loss
        self.per_class = per_class or {}
        self.mean_ap = mean_ap
        self.mse = mse
        self.skipped = skipped or []
        self.frames = frames
        self.loss_curve: List[float] = []

    @property
    def metric(self) -> float:
        return self.mean_ap if self.task == "classify" else self.mse

    @property
    def metric_name(self) -> str:
        return "mAP" if self.task == "classify" else "MSE"

    def __repr__(self) -> str:
        return f"MetricReport({self.task}, loss={self.loss:.6f}, {self.metric_name}={self.metric})"


def average_precision(scores: Sequence[float], positives: Sequence[bool], ties: str = "index") -> float:
    """
    Rank-based (all-point) average precision.

    Frames are sorted by descending score. With ties="index" equal scores keep their
    original order; with ties="average" every member of a tied group is scored at the
    precision reached at the end of its group.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    if scores.shape != positives.shape:
        raise DimensionError("scores and positives differ in length", scores.shape, positives.shape)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ContractError("average precision needs at least one positive")
    if ties not in ("index", "average"):
        raise ContractError(f"unknown tie rule '{ties}'")

    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    if ties == "average":
        sorted_scores = scores[order]
        # index of the last member of each frame's tie group
        last = np.searchsorted(-sorted_scores, -sorted_scores, side="right") - 1
        precision = cum_hits[last] / ranks[last]
    else:
        precision = cum_hits / ranks
    return float(precision[hits].sum() / n_pos)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mean_ap(per_frame_scores, labels: Sequence[int], background: Optional[int] = 0,
            ties: str = "index") -> MetricReport:
    """
    One-vs-rest AP for every class except `background` (pass None to keep all).
    Classes without a positive frame are skipped, listed in `skipped` and left out
    of the unweighted mean.
    """
    scores = per_frame_scores.values if isinstance(per_frame_scores, Tensor) else np.asarray(per_frame_scores)
    labels = np.asarray(labels).ravel()
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0] or scores.shape[0] < 1:
        raise DimensionError("scores must be [N x K] with one label per frame", scores.shape, labels.shape)
    per_class: Dict[int, float] = {}
    skipped: List[int] = []
    for k in range(scores.shape[1]):
        if k == background:
            continue
        positives = labels == k
        if not positives.any():
            skipped.append(k)
            continue
        per_class[k] = average_precision(scores[:, k], positives, ties)
    if skipped:
        logger.info(f"classes without positives skipped in mAP: {skipped}")
    value = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return MetricReport("classify", float("nan"), per_class, value, skipped=skipped, frames=labels.shape[0])


# ====== TRAINING ======

class TrainConfig:
    """
    Truncated-BPTT settings. With reset_state the recurrent state restarts at zero
    in every window (fixed history windows) instead of carrying over.
    """

    def __init__(self, seq_len: int = 30, batch_size: int = 40, epochs: int = 20, lr: float = 5e-4,
                 seed: int = 0, clip_norm: Optional[float] = 5.0, reset_state: bool = False,
                 threads: int = 1):
        self.seq_len = int(seq_len)
        self.batch_size = int(batch_size)
        self.epochs = int(epochs)
        self.lr = float(lr)
        self.seed = int(seed)
        self.clip_norm = clip_norm
        self.reset_state = bool(reset_state)
        self.threads = max(1, int(threads))
        if self.seq_len < 1 or self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ContractError("seq_len and batch_size must be positive; epochs and lr non-negative")
        if clip_norm is not None and clip_norm <= 0:
            raise ContractError(f"clip norm must be positive, got {clip_norm}")


def _task(model: FusionModel) -> str:
    return "classify" if model.spec.head == "classifier" else "regress"


def _window_loss_sum(model: FusionModel, outputs: List[Tensor], batch: MultiSensorBatch) -> Tensor:
    frames = concat(outputs, axis=0)
    if model.spec.head == "classifier":
        return cross_entropy_per_frame(frames, batch.labels.reshape(-1), reduction="sum")
    target = Tensor._wrap(batch.targets.reshape(-1, batch.targets.shape[-1]))
    return mse_loss(frames, target, reduction="sum")


def truncation_windows(T: int, seq_len: int) -> List[Tuple[int, int]]:
    return [(start, min(start + seq_len, T)) for start in range(0, T, seq_len)]


def batch_gradients(model: FusionModel, batch: MultiSensorBatch,
                    config: TrainConfig) -> Tuple[float, Dict[str, Tensor]]:
    """
    Mean per-frame loss of one batch and its truncated-BPTT gradient.

    Each window is recorded on its own graph; the state entering a window is a
    detached copy of the state leaving the previous one. Every window contributes
    its frame-loss sum divided by the batch's total frame count, so short tail windows
    count by their frames and a single full-length window is plain BPTT.
    """
    total_frames = batch.T * batch.size
    state = initial_state(model.spec, batch.size)
    loss_total = 0.0
    grads: Dict[str, np.ndarray] = {}
    for start, stop in truncation_windows(batch.T, config.seq_len):
        window = batch.window(start, stop)
        if config.reset_state:
            state = initial_state(model.spec, batch.size)
        with GradGraph() as graph:
            linked = {name: graph.parameter(p, name) for name, p in model.params.items()}
            out = forward_sequence(model.spec, linked, window.sensors, state)
            loss = scale(_window_loss_sum(model, out.outputs, window), 1.0 / total_frames)
        window_grads = backward(graph, loss)
        for name, g in window_grads.items():
            grads[name] = grads[name] + g.values if name in grads else g.values
        loss_total += loss.item()
        state = detach_state(out.final_state)
    return loss_total, {name: Tensor._wrap(g) for name, g in grads.items()}


def _forward_batch(model: FusionModel, batch: MultiSensorBatch,
                   config: TrainConfig) -> Tuple[float, np.ndarray]:
    """Frame-loss sum and [T·B x out] outputs of a batch, windowed as in training."""
    state = initial_state(model.spec, batch.size)
    loss_sum, outputs = 0.0, []
    for start, stop in truncation_windows(batch.T, config.seq_len):
        window = batch.window(start, stop)
        if config.reset_state:
            state = initial_state(model.spec, batch.size)
        out = forward_sequence(model.spec, model.params, window.sensors, state)
        loss_sum += _window_loss_sum(model, out.outputs, window).item()
        outputs.append(np.concatenate([o.values for o in out.outputs], axis=0))
        state = out.final_state
    return loss_sum, np.concatenate(outputs, axis=0)


async def _evaluate_batches(model: FusionModel, batches: List[MultiSensorBatch],
                            config: TrainConfig) -> List[Tuple[float, np.ndarray]]:
    semaphore = asyncio.Semaphore(config.threads)

    async def run(batch: MultiSensorBatch):
        async with semaphore:
            return await asyncio.to_thread(_forward_batch, model, batch, config)

    return await asyncio.gather(*(run(b) for b in batches))


def evaluate(model: FusionModel, dataset: Dataset, config: TrainConfig) -> MetricReport:
    """
    Loss and task metric over a dataset. Batches run on up to `config.threads`
    worker threads; results are combined in dataset order.
    """
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    batches = make_batches(dataset, config.batch_size)
    if config.threads > 1 and len(batches) > 1:
        results = asyncio.run(_evaluate_batches(model, batches, config))
    else:
        results = [_forward_batch(model, b, config) for b in batches]

    frames = sum(b.T * b.size for b in batches)
    loss = sum(r[0] for r in results) / frames
    outputs = np.concatenate([r[1] for r in results], axis=0)
    if _task(model) == "classify":
        labels = np.concatenate([b.labels.reshape(-1) for b in batches])
        report = mean_ap(softmax_rows(outputs), labels)
        report.loss = loss
    else:
        targets = np.concatenate([b.targets.reshape(-1, b.targets.shape[-1]) for b in batches])
        report = MetricReport("regress", loss, mse=float(np.mean((outputs - targets) ** 2)), frames=frames)
    return report


class TrainResult:
    """Trained model, optimiser state and one {split: MetricReport} dict per epoch."""

    def __init__(self, model: FusionModel, adam: AdamState, history: List[Dict[str, MetricReport]]):
        self.model = model
        self.adam = adam
        self.history = history

    @property
    def report(self) -> Optional[MetricReport]:
        """Final train-split report with the per-epoch loss curve attached."""
        if not self.history or "train" not in self.history[-1]:
            return None
        report = self.history[-1]["train"]
        report.loss_curve = [epoch["train"].loss for epoch in self.history]
        return report


EpochCallback = Callable[[int, FusionModel, AdamState, Dict[str, MetricReport]], None]


def train_tbptt(model: FusionModel, dataset: Dataset, config: TrainConfig,
                eval_sets: Optional[Dict[str, Dataset]] = None,
                on_epoch: Optional[EpochCallback] = None,
                start_epoch: int = 0, adam: Optional[AdamState] = None,
                eval_train: bool = True) -> TrainResult:
    """
    Train with truncated BPTT and one Adam update per batch.

    Args:
        model: initial model (not modified)
        dataset: training split
        config: TrainConfig
        eval_sets: extra named splits evaluated after every epoch
        on_epoch: called as on_epoch(epoch, model, adam, reports) after every epoch
        start_epoch: epochs already completed when resuming
        adam: optimiser state to resume from
        eval_train: also re-evaluate the training split after every epoch

    Returns:
        TrainResult
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")

    adam = adam or AdamState(lr=config.lr)
    adam.lr = config.lr
    current = FusionModel(model.spec, dict(model.params))
    history: List[Dict[str, MetricReport]] = []

    for epoch in range(start_epoch + 1, config.epochs + 1):
        batches = make_batches(dataset, config.batch_size, config.seed, epoch)
        running = 0.0
        for b, batch in enumerate(batches, start=1):
            loss, grads = batch_gradients(current, batch, config)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            grads, norm = clip_by_global_norm(grads, config.clip_norm)
            try:
                params = adam_step(adam, current.params, grads)
            except TrainingError as e:
                raise TrainingError(f"{e} at epoch {epoch}, batch {b}",
                                    parameter=e.parameter, epoch=epoch, batch=b) from e
            current = FusionModel(current.spec, params)
            running += loss
            logger.debug(f"epoch {epoch} batch {b}/{len(batches)}: loss {loss:.6f}, grad norm {norm:.4f}")

        reports = {"train": evaluate(current, dataset, config)} if eval_train else {}
        for name, split in (eval_sets or {}).items():
            reports[name] = evaluate(current, split, config)
        history.append(reports)
        logger.info(f"epoch {epoch}: mean batch loss {running / len(batches):.6f}, "
                    + ", ".join(f"{k} {r.metric_name} {r.metric:.4f}" for k, r in reports.items()))
        if on_epoch is not None:
            on_epoch(epoch, current, adam, reports)

    return TrainResult(current, adam, history)


class CrossValidationResult:
    def __init__(self, fold_reports: List[MetricReport]):
        self.fold_reports = fold_reports

    @property
    def metrics(self) -> List[float]:
        return [r.metric for r in self.fold_reports]

    @property
    def best_fold(self) -> int:
        values = self.metrics
        if self.fold_reports[0].task == "classify":
            return int(np.nanargmax(values))
        return int(np.nanargmin(values))


def cross_validate(model: FusionModel, dataset: Dataset, config: TrainConfig,
                   folds: int = 5) -> CrossValidationResult:
    """
    K-fold cross-validation over contiguous folds of the training split; every fold
    trains from the same initial model.
    """
    if folds < 2 or folds > len(dataset):
        raise ContractError(f"need 2 <= folds <= {len(dataset)}, got {folds}")
    bounds = np.linspace(0, len(dataset), folds + 1).astype(int)
    reports = []
    for f in range(folds):
        held = list(range(bounds[f], bounds[f + 1]))
        kept = [i for i in range(len(dataset)) if not bounds[f] <= i < bounds[f + 1]]
        result = train_tbptt(model, dataset.subset(kept), config)
        reports.append(evaluate(result.model, dataset.subset(held), config))
        logger.info(f"fold {f + 1}/{folds}: {reports[-1].metric_name} {reports[-1].metric:.4f}")
    return CrossValidationResult(reports)
