"""
Offload acceptance, performance-weighted local aggregation, and the miner's
plain-average global aggregation.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import astuple, dataclass
from typing import Final

import numpy as np
import numpy.typing as npt

from aggchain.errors import AggregationError
from aggchain.training import ModelParams

logger = logging.getLogger(__name__)

WEIGHT_FLOOR: Final[float] = 1e-6
# open lower bounds (0, hi] are realized as [OPEN_BOUND_EPS, hi]
OPEN_BOUND_EPS: Final[float] = 1e-3

ACTION_FIELDS: Final[tuple[str, ...]] = ("f_i", "h_i1", "a_i", "w_i0", "w_i1", "b_i")


@dataclass(frozen=True)
class StrategyParams:
    f_i: float
    h_i1: float
    a_i: float
    w_i0: float
    w_i1: float
    b_i: float

    def check(self, block_interval: float) -> StrategyParams:
        lo, hi = action_bounds(block_interval)
        for name, value, low, high in zip(ACTION_FIELDS, astuple(self), lo, hi, strict=True):
            if not (low - 1e-12 <= value <= high + 1e-12):
                raise AggregationError(f"{name}={value} outside [{low}, {high}]")
        return self

    def as_vector(self) -> npt.NDArray[np.float64]:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_vector(cls, values: Sequence[float]) -> StrategyParams:
        if len(values) != len(ACTION_FIELDS):
            raise AggregationError(f"expected {len(ACTION_FIELDS)} action values, got {len(values)}")
        return cls(*(float(v) for v in values))

    @classmethod
    def fedavg(cls, block_interval: float) -> StrategyParams:
        """The fixed baseline: every coefficient 1 (f_i capped at F)."""
        return cls(min(1.0, block_interval), 1.0, 1.0, 1.0, 1.0, 1.0)


def action_bounds(block_interval: float) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Effective closed bounds of the six strategy parameters."""
    if block_interval <= 0:
        raise AggregationError(f"block interval must be > 0, got {block_interval}")
    lo = np.array([OPEN_BOUND_EPS, OPEN_BOUND_EPS, -1.0, OPEN_BOUND_EPS, OPEN_BOUND_EPS, -1.0])
    hi = np.array([block_interval, 1.0, 1.0, 1.0, 1.0, 1.0])
    return lo, hi


def decision_factor(
    sigma: float, upload_size: float, trainer_metric: float, h_i1: float, a_i: float
) -> float:
    return sigma * upload_size + h_i1 * trainer_metric + a_i


def offload_decision(
    sigma: float, upload_size: float, trainer_metric: float, h_i1: float, a_i: float
) -> bool:
    """Accept a trainer's untrained remainder iff the decision factor is non-negative."""
    if upload_size < 0:
        raise AggregationError(f"upload_size must be >= 0, got {upload_size}")
    return decision_factor(sigma, upload_size, trainer_metric, h_i1, a_i) >= 0.0


def normalize_weights(raw: Sequence[float]) -> npt.NDArray[np.float64]:
    raw_arr = np.asarray(raw, dtype=np.float64)
    if raw_arr.size == 0:
        raise AggregationError("no trainer reported this round")
    if np.all(raw_arr <= 0.0):
        logger.warning(
            "every raw aggregation weight is <= 0 (%s); falling back to uniform weights",
            np.array2string(raw_arr, precision=4),
        )
        return np.full(raw_arr.size, 1.0 / raw_arr.size)
    clamped = np.maximum(raw_arr, WEIGHT_FLOOR)
    return clamped / clamped.sum()


def local_weights(
    kept_sizes: Sequence[float],
    trainer_metrics: Sequence[float],
    w_i0: float,
    w_i1: float,
    b_i: float,
) -> npt.NDArray[np.float64]:
    """
    Raw weight per participant: w_i0 * kept-data fraction + w_i1 * metric + b_i,
    then clamped at WEIGHT_FLOOR and normalized onto the simplex.
    """
    sizes = np.asarray(kept_sizes, dtype=np.float64)
    metrics = np.asarray(trainer_metrics, dtype=np.float64)
    if sizes.shape != metrics.shape:
        raise AggregationError(f"{sizes.size} sizes but {metrics.size} metrics")
    if sizes.size == 0:
        raise AggregationError("no trainer reported this round")
    total = sizes.sum()
    fractions = sizes / total if total > 0 else np.full(sizes.size, 1.0 / sizes.size)
    return normalize_weights(w_i0 * fractions + w_i1 * metrics + b_i)


def _stack(models: Sequence[ModelParams]) -> npt.NDArray[np.float64]:
    if not models:
        raise AggregationError("nothing to aggregate")
    dims = {len(m) for m in models}
    if len(dims) != 1:
        raise AggregationError(f"model dimension mismatch: {sorted(dims)}")
    return np.vstack(models)


def local_aggregate(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    stacked = _stack(models)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),):
        raise AggregationError(f"{len(models)} models but {w.size} weights")
    if np.any(w < 0) or not math.isclose(float(w.sum()), 1.0, abs_tol=1e-9):
        raise AggregationError(f"weights are not on the simplex: {w}")
    return w @ stacked


def global_aggregate(local_models: Sequence[ModelParams]) -> ModelParams:
    """
    Unweighted elementwise mean. Offsets from the coordinate-wise minimum are
    summed in sorted order, so the result does not depend on input order and
    identical inputs come back bit-for-bit.
    """
    stacked = _stack(local_models)
    base = stacked.min(axis=0)
    offsets = np.sort(stacked - base, axis=0)
    return base + offsets.sum(axis=0) / len(stacked)
