"""One Euro filter (Casiez et al.) over vectors of independent scalar lanes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ContractError

Stage = Literal["keypoints", "local3d", "global3d"]
FRAME_RATE_HZ = 30.0


@dataclass(frozen=True)
class OneEuroParams:
    fc_min: float
    beta: float
    d_cutoff: float = 1.0

    def __post_init__(self):
        if not (self.fc_min > 0 and self.beta >= 0 and self.d_cutoff > 0):
            raise ContractError(f"invalid One Euro parameters {self}")


_DEFAULTS = {
    "keypoints": OneEuroParams(1.7, 0.3),
    "local3d": OneEuroParams(0.8, 0.4),
    "global3d": OneEuroParams(20.0, 0.4),
}


def default_params(stage: Stage) -> OneEuroParams:
    try:
        return _DEFAULTS[stage]
    except KeyError:
        raise ContractError(f"unknown filter stage {stage!r}") from None


def smoothing_factor(cutoff_hz, dt: float):
    tau = 1.0 / (2.0 * math.pi * cutoff_hz)
    return 1.0 / (1.0 + tau / dt)


@dataclass
class FilterState:
    """Per-lane filter memory; lanes with ``active == False`` restart on the next sample."""

    size: int
    value: np.ndarray = field(init=False)
    derivative: np.ndarray = field(init=False)
    active: np.ndarray = field(init=False)
    last_time: float | None = None

    def __post_init__(self):
        self.value = np.zeros(self.size)
        self.derivative = np.zeros(self.size)
        self.active = np.zeros(self.size, dtype=bool)


def filter_step(state: FilterState, params: OneEuroParams, sample, timestamp_s: float, present=None) -> np.ndarray:
    """Advance every lane by one sample and return the filtered vector.

    ``present`` masks lanes with a valid sample; absent lanes return the raw
    sample and have their memory cleared.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if x.shape != (state.size,):
        raise ContractError(f"sample has {x.size} lanes, filter has {state.size}")
    present = np.ones(state.size, dtype=bool) if present is None else np.asarray(present, dtype=bool).ravel()
    if state.last_time is not None and not timestamp_s > state.last_time:
        raise ContractError(f"timestamps must increase ({timestamp_s} after {state.last_time})")

    out = x.copy()
    warm = state.active & present
    if state.last_time is not None and np.any(warm):
        dt = timestamp_s - state.last_time
        dx = (x[warm] - state.value[warm]) / dt
        a_d = smoothing_factor(params.d_cutoff, dt)
        dx_hat = a_d * dx + (1.0 - a_d) * state.derivative[warm]
        cutoff = params.fc_min + params.beta * np.abs(dx_hat)
        a = smoothing_factor(cutoff, dt)
        # x_prev + a (x - x_prev): same recurrence, exact on constant input
        out[warm] = state.value[warm] + a * (x[warm] - state.value[warm])
        state.derivative[warm] = dx_hat

    fresh = present & ~state.active
    state.derivative[fresh] = 0.0
    state.value = np.where(present, out, 0.0)
    state.derivative[~present] = 0.0
    state.active = present.copy()
    state.last_time = float(timestamp_s)
    return out


class OneEuroFilter:
    """Stateful convenience wrapper: one filter per stream."""

    def __init__(self, params: OneEuroParams, size: int):
        self.params = params
        self.state = FilterState(size)

    def __call__(self, sample, timestamp_s: float, present=None) -> np.ndarray:
        shape = np.shape(sample)
        out = filter_step(self.state, self.params, sample, timestamp_s, present)
        return out.reshape(shape)
