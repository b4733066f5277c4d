"""Discretization grid for the latent process."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time points tau_0..tau_T with an observation mask.

    ``obs_mask[i]`` is True when an observation is attached to tau_i; dataset
    observation times must coincide with grid times.
    """

    times: np.ndarray
    obs_mask: np.ndarray = None
    deltas: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("times must be a 1-D array with at least one point")
        if times[0] != 0.0:
            raise ValueError("grid must start at tau_0 = 0")
        deltas = np.diff(times)
        if times.size > 1 and not np.all(deltas > 0):
            raise ValueError("grid times must be strictly increasing")
        mask = self.obs_mask
        if mask is None:
            mask = np.ones(times.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != times.shape:
            raise ValueError("obs_mask must have one entry per grid time")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "obs_mask", mask)
        object.__setattr__(self, "deltas", deltas)

    @property
    def num_steps(self):
        """T, the number of transition intervals."""
        return self.times.size - 1

    @property
    def t_max(self):
        return float(self.times[-1])

    @classmethod
    def regular(cls, dt, t_max, obs_mask=None):
        n = int(round(t_max / dt))
        times = np.arange(n + 1) * dt
        times[-1] = t_max
        return cls(times=times, obs_mask=obs_mask)

    def require_contains(self, obs_times, tol=1e-9):
        """Check every observation timestamp coincides with a grid time."""
        obs_times = np.atleast_1d(np.asarray(obs_times, dtype=float))
        idx = np.searchsorted(self.times, obs_times)
        idx = np.clip(idx, 0, self.times.size - 1)
        left = np.clip(idx - 1, 0, self.times.size - 1)
        ok = (np.abs(self.times[idx] - obs_times) <= tol) | (
            np.abs(self.times[left] - obs_times) <= tol
        )
        if not np.all(ok):
            bad = obs_times[~ok]
            raise ValueError(f"observation times not on the grid: {bad[:5]}")

    def with_mask(self, obs_mask):
        return TimeGrid(times=self.times.copy(), obs_mask=obs_mask)
