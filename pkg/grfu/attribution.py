"""
Gate attribution: global average pooling of the effective fusion gates q^i over
encoding positions, reported per time step, per sequence and overall, and split by
the dataset's corruption annotations.
"""

import logging
from typing import Dict, List

import numpy as np
import pandas as pd

from .errors import ContractError
from .model import FusionModel, forward_sequence, initial_state
from .synthdata import Dataset, make_batches
from .train import TrainConfig, truncation_windows

logger = logging.getLogger("grfu.attribution")


class GateReport:
    """
    per_step: [N x T x M] pooled gate weight of each sensor at each frame.
    annotations: [N x T x M] corruption codes aligned with per_step.
    """

    def __init__(self, per_step: np.ndarray, annotations: np.ndarray, windows: List = ()):
        self.per_step = per_step
        self.annotations = annotations
        self.windows = list(windows)

    @property
    def num_sensors(self) -> int:
        return self.per_step.shape[2]

    @property
    def per_sequence(self) -> np.ndarray:
        return self.per_step.mean(axis=1)

    @property
    def pooled(self) -> np.ndarray:
        """Overall contribution per sensor; sums to 1."""
        return self.per_step.mean(axis=(0, 1))

    def breakdown(self) -> Dict[int, Dict[str, float]]:
        """Mean weight of each sensor over the frames where it is clean vs corrupted."""
        result = {}
        for i in range(self.num_sensors):
            weights = self.per_step[:, :, i]
            corrupted = self.annotations[:, :, i] != 0
            result[i] = {
                "clean": float(weights[~corrupted].mean()) if (~corrupted).any() else float("nan"),
                "corrupted": float(weights[corrupted].mean()) if corrupted.any() else float("nan"),
            }
        return result

    def window_breakdown(self) -> List[Dict]:
        """For each corruption window: the corrupted sensor's weight inside vs outside it."""
        rows = []
        T = self.per_step.shape[1]
        for w in self.windows:
            inside = np.zeros(T, dtype=bool)
            inside[w.start - 1:w.end] = True
            weights = self.per_step[:, :, w.sensor]
            rows.append({
                "sensor": w.sensor, "start": w.start, "end": w.end, "mode": w.mode,
                "inside": float(weights[:, inside].mean()),
                "outside": float(weights[:, ~inside].mean()) if (~inside).any() else float("nan"),
            })
        return rows

    def to_frame(self) -> pd.DataFrame:
        """
        Rows (sequence, timestep, sensor, gate_pooled). Timesteps are 1-based; per-sequence
        summaries use timestep -1 and the overall summary uses sequence -1, timestep -1.
        """
        N, T, M = self.per_step.shape
        seq_idx, t_idx, s_idx = np.meshgrid(np.arange(N), np.arange(1, T + 1), np.arange(M), indexing="ij")
        steps = pd.DataFrame({
            "sequence": seq_idx.ravel(), "timestep": t_idx.ravel(),
            "sensor": s_idx.ravel(), "gate_pooled": self.per_step.ravel(),
        })
        seq_rows = pd.DataFrame({
            "sequence": np.repeat(np.arange(N), M), "timestep": -1,
            "sensor": np.tile(np.arange(M), N), "gate_pooled": self.per_sequence.ravel(),
        })
        overall = pd.DataFrame({
            "sequence": -1, "timestep": -1, "sensor": np.arange(M), "gate_pooled": self.pooled,
        })
        return pd.concat([steps, seq_rows, overall], ignore_index=True)


def pool_gates(model: FusionModel, dataset: Dataset, config: TrainConfig) -> GateReport:
    """Run the model over the dataset (windowed as in training) and pool its fusion gates."""
    if not model.spec.is_gated:
        raise ContractError("model has no fusion gates")
    N, T, M = len(dataset), dataset.spec.T, model.spec.num_sensors
    per_step = np.zeros((N, T, M))
    annotations = np.zeros((N, T, M), dtype=np.uint8)
    for batch in make_batches(dataset, config.batch_size):
        state = initial_state(model.spec, batch.size)
        for start, stop in truncation_windows(batch.T, config.seq_len):
            if config.reset_state:
                state = initial_state(model.spec, batch.size)
            out = forward_sequence(model.spec, model.params, [s[start:stop] for s in batch.sensors], state)
            state = out.final_state
            for offset, trace in enumerate(out.traces):
                # each q^i is [B x d_e]; pool over encoding positions
                pooled = np.stack([q.mean(axis=-1) for q in trace.fusion_gates], axis=-1)
                per_step[batch.indices, start + offset] = pooled
        annotations[batch.indices] = np.transpose(batch.annotations, (1, 0, 2))
    logger.debug(f"pooled gates over {N} sequences: {per_step.mean(axis=(0, 1))}")
    return GateReport(per_step, annotations, dataset.spec.windows)
