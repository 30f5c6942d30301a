"""Trajectory records shared by the SME, P-function and analysis modules."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .operators import SystemParams

CSV_HEADER = "t_us,i_hom_mhz,y_mean,p_plus,entropy_s,xi"
CSV_FMT = "%.8e"  # 9 significant digits


class Direction(str, enum.Enum):
    UP = "UP"
    DOWN = "DOWN"

    def flipped(self) -> "Direction":
        return Direction.DOWN if self is Direction.UP else Direction.UP


@dataclass(frozen=True)
class SwitchEvent:
    t: float
    direction: Direction
    filtered_level_before: float
    filtered_level_after: float


@dataclass
class TrajectoryRecord:
    """Sampled output of one conditional trajectory.

    Samples are taken every ``stride`` integration steps.  ``xi`` holds the
    noise averaged over each stride block, so its variance is ``1/dt`` with
    ``dt`` the record spacing, and
    ``photocurrent = 2*kappa*eta*y_mean + sqrt(2*kappa*eta)*xi`` holds exactly.
    """

    times: np.ndarray
    photocurrent: np.ndarray
    y_mean: np.ndarray
    p_plus: np.ndarray
    entropy_s: np.ndarray
    xi: np.ndarray
    params: SystemParams
    dt_step: float
    stride: int = 1
    source: str = "sme"
    delta_y: np.ndarray | None = None
    switch_events: list[SwitchEvent] = field(default_factory=list)
    error: str | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return self.dt_step * self.stride

    @property
    def duration(self) -> float:
        return len(self) * self.dt

    @property
    def ok(self) -> bool:
        return self.error is None

    def columns(self) -> np.ndarray:
        return np.column_stack(
            [self.times, self.photocurrent, self.y_mean, self.p_plus, self.entropy_s, self.xi]
        )

    def to_csv(self, path) -> None:
        np.savetxt(path, self.columns(), delimiter=",", header=CSV_HEADER, comments="", fmt=CSV_FMT)

    def truncated(self, n: int) -> "TrajectoryRecord":
        """First ``n`` samples (used for partial records after a failure)."""
        dy = None if self.delta_y is None else self.delta_y[:n]
        return TrajectoryRecord(
            self.times[:n], self.photocurrent[:n], self.y_mean[:n], self.p_plus[:n],
            self.entropy_s[:n], self.xi[:n], self.params, self.dt_step, self.stride,
            self.source, dy, list(self.switch_events), self.error, dict(self.meta),
        )


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def photocurrent_from(params: SystemParams, y_mean, xi) -> np.ndarray:
    gain = 2.0 * params.kappa * params.eta
    return gain * np.asarray(y_mean) + np.sqrt(gain) * np.asarray(xi)
