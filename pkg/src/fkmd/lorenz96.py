"""Lorenz-96 trajectory generation (classical RK4) for benchmarks and tests.

The model couples n periodic coordinates through
d theta_j / dt = (theta_{j+1} - theta_{j-2}) theta_{j-1} - theta_j + forcing,
a standard chaotic testbed from climate analysis.
"""

from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import IntegrationError
from .tseries import TimeSeries


@dataclass(frozen=True)
class Lorenz96Params:
    n_coords: int = 40
    forcing: float = 8.0
    dt: float = 1e-2
    sample_lag: float = 0.05
    n_samples: int = 1000

    def __post_init__(self):
        if self.n_coords < 4:
            raise ValueError(
                f"need at least 4 coordinates for the j-2..j+1 stencil, got {self.n_coords}"
            )
        if self.n_samples < 2:
            raise ValueError(f"n_samples must be >= 2, got {self.n_samples}")
        if not (self.dt > 0 and self.sample_lag > 0):
            raise ValueError("dt and sample_lag must be positive")
        ratio = self.sample_lag / self.dt
        if abs(ratio - round(ratio)) > 1e-12 * max(ratio, 1.0):
            raise ValueError(
                f"dt {self.dt} must divide sample_lag {self.sample_lag} evenly"
            )

    @property
    def steps_per_sample(self):
        return int(round(self.sample_lag / self.dt))


def default_initial(params):
    """Forcing everywhere, bumped by +1 at every fifth coordinate (1-based)."""
    theta = np.full(params.n_coords, params.forcing)
    theta[4::5] += 1.0
    return theta


def rhs(theta, forcing=8.0):
    """Right-hand side with periodic indexing."""
    theta = np.asarray(theta, dtype=np.float64)
    return (np.roll(theta, -1) - np.roll(theta, 2)) * np.roll(theta, 1) - theta + forcing


def simulate(params, initial=None, burn_in=0.0):
    """Integrate with RK4 at step dt, recording every sample_lag time units.

    Row k of the result is the state at time burn_in + k * sample_lag; row 0
    is the (possibly burned-in) initial condition. No burn-in is applied by
    default.
    """
    if initial is None:
        theta = default_initial(params)
    else:
        theta = np.asarray(initial, dtype=np.float64).reshape(-1).copy()
        if theta.shape[0] != params.n_coords:
            raise ValueError(
                f"initial state has {theta.shape[0]} coordinates, expected {params.n_coords}"
            )
    if burn_in < 0:
        raise ValueError(f"burn_in must be >= 0, got {burn_in}")
    if burn_in > 0:
        n_burn = int(round(burn_in / params.dt))
        theta = _accel.lorenz96_advance(theta, float(params.forcing), params.dt, n_burn)
        if not np.all(np.isfinite(theta)):
            raise IntegrationError("state became non-finite during burn-in")

    traj, bad = _accel.lorenz96_trajectory(
        theta,
        float(params.forcing),
        params.dt,
        params.steps_per_sample,
        params.n_samples,
    )
    if bad >= 0:
        raise IntegrationError(
            f"state became non-finite at sample {bad} "
            f"(integrator step {bad * params.steps_per_sample})"
        )
    names = tuple(f"theta_{j + 1}" for j in range(params.n_coords))
    return TimeSeries(values=traj, lag=params.sample_lag, channel_names=names)
