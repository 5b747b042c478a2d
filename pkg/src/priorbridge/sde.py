"""Noise schedules, time grids and the Euler-Maruyama integrator.

All simulation uses scalar-times-identity diffusion: ``dZ = drift(Z, t) dt +
sigma(t) dW``.  Drift callables receive a batch of states with a leading path
axis, ``drift(z, t) -> array`` with ``z.shape == (n_paths, *state_shape)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

Drift = Callable[[np.ndarray, float], np.ndarray]
# (z, t_prev, dt) -> deterministic displacement for the step that lands on T
TerminalStep = Callable[[np.ndarray, float, float], np.ndarray]

NOISE_STREAM = 0
INIT_STREAM = 1

# cap on the size of one block of pre-drawn noise (float64 entries)
_NOISE_BLOCK_ENTRIES = 4_000_000


class DomainError(ValueError):
    pass


class IntegrationError(FloatingPointError):
    """Non-finite drift or state during integration."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Scalar diffusion scale sigma_t on [0, T].

    kinds:
      constant    sigma_t = sigma_start
      linear      sigma_t = sigma_start + (sigma_end - sigma_start) t / T
      polynomial  sigma_t = sigma_start (1 - t/T)^power + sigma_end
    """

    kind: str = "constant"
    sigma_start: float = 1.0
    sigma_end: float = 1.0
    horizon: float = 1.0
    power: float = 2.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "polynomial"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.sigma_start < 0:
            raise ValueError("sigma must be nonnegative")
        if self.kind != "constant" and self.sigma_end < 0:
            raise ValueError("sigma_end must be nonnegative")

    @property
    def T(self) -> float:
        return self.horizon

    def sigma(self, t):
        t = np.asarray(t, dtype=float)
        T = self.horizon
        if self.kind == "constant":
            out = np.full_like(t, self.sigma_start)
        elif self.kind == "linear":
            out = self.sigma_start + (self.sigma_end - self.sigma_start) * t / T
        else:
            out = self.sigma_start * (1.0 - t / T) ** self.power + self.sigma_end
        return out if out.ndim else float(out)

    def beta(self, t):
        """Vectorised ``beta_integral``."""
        t_arr = np.asarray(t, dtype=float)
        vals = np.array([beta_integral(self, float(s)) for s in t_arr.ravel()])
        return vals.reshape(t_arr.shape) if t_arr.ndim else float(vals[0])

    @property
    def beta_T(self) -> float:
        return beta_integral(self, self.horizon)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sigma_start": self.sigma_start,
            "sigma_end": self.sigma_end,
            "horizon": self.horizon,
            "power": self.power,
        }


def beta_integral(schedule: NoiseSchedule, t: float) -> float:
    """beta_t = int_0^t sigma_s^2 ds."""
    T = schedule.horizon
    if not (0.0 <= t <= T):
        raise DomainError(f"t={t} outside [0, {T}]")
    if t == 0.0:
        return 0.0
    a = schedule.sigma_start
    if schedule.kind == "constant":
        return a * a * t
    if schedule.kind == "linear":
        b = (schedule.sigma_end - a) / T
        return a * a * t + a * b * t * t + b * b * t**3 / 3.0
    val, _ = integrate.quad(lambda s: schedule.sigma(s) ** 2, 0.0, t,
                            epsabs=0.0, epsrel=1e-12, limit=200)
    return float(val)


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a time grid needs at least two points")
        if pts[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return self.points.size - 1

    @property
    def T(self) -> float:
        return float(self.points[-1])

    def __len__(self):
        return self.points.size


def make_grid(steps: int, T: float = 1.0) -> TimeGrid:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    pts = np.linspace(0.0, T, steps + 1)
    pts[-1] = T
    return TimeGrid(pts)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), *state_shape)
    seed: int
    path_index: int = 0

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_columns(self) -> str:
        """Columnar text: time followed by the flattened state."""
        flat = self.states.reshape(len(self.times), -1)
        rows = np.column_stack([self.times, flat])
        lines = [f"# seed={self.seed} path={self.path_index} dim={flat.shape[1]}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in rows]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_columns())


def path_rng(seed: int, index: int, stream: int = NOISE_STREAM) -> np.random.Generator:
    """Counter-based generator for one path; independent of batching."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index), int(stream)])))


@dataclass
class _NoiseSource:
    seed: int
    offset: int
    n: int
    state_shape: tuple
    n_steps: int
    rngs: list = field(init=False)
    _block: Optional[np.ndarray] = field(init=False, default=None)
    _start: int = field(init=False, default=0)

    def __post_init__(self):
        self.rngs = [path_rng(self.seed, self.offset + i) for i in range(self.n)]
        per_step = self.n * max(1, int(np.prod(self.state_shape)))
        self.block_steps = max(1, min(self.n_steps, _NOISE_BLOCK_ENTRIES // per_step))

    def draw(self, step: int) -> np.ndarray:
        if self._block is None or step >= self._start + self._block.shape[1]:
            c = min(self.block_steps, self.n_steps - step)
            self._block = np.stack([r.standard_normal((c, *self.state_shape)) for r in self.rngs])
            self._start = step
        return self._block[:, step - self._start]


def simulate_paths(
    drift: Drift,
    schedule: NoiseSchedule,
    z0: np.ndarray,
    grid: TimeGrid,
    seed: int,
    *,
    path_offset: int = 0,
    terminal_step: Optional[TerminalStep] = None,
    step_move: Optional[TerminalStep] = None,
    keep_path: bool = False,
    record: Optional[Sequence[int]] = None,
    stop_index: Optional[int] = None,
    final_noise: bool = True,
) -> np.ndarray:
    """Integrate a batch of paths; ``z0`` has shape ``(n_paths, *state)``.

    Path ``i`` draws its increments from ``path_rng(seed, path_offset + i)``,
    so results do not depend on how paths are grouped into batches.  The drift
    is never evaluated at ``t_N``; when ``terminal_step`` is given it replaces
    ``drift * dt`` on the final step; ``step_move(z, t, dt)`` likewise replaces
    it on every other step (for schemes such as tamed increments), and ``final_noise=False`` drops the
    Brownian increment of that step.  Returns the final states, the full
    ``(n_paths, len(grid), *state)`` array when ``keep_path`` is set, or only
    the grid indices listed in ``record``.
    """
    z = np.array(z0, dtype=float, copy=True)
    if z.ndim < 1:
        raise ValueError("z0 must have a leading path axis")
    n = z.shape[0]
    t = grid.points
    last = grid.N if stop_index is None else int(stop_index)
    if not 0 <= last <= grid.N:
        raise ValueError("stop_index outside grid")
    if not np.all(np.isfinite(z)):
        raise IntegrationError("non-finite initial state", 0)
    sig = np.asarray(schedule.sigma(t), dtype=float) * np.ones_like(t)
    noise = _NoiseSource(seed, path_offset, n, z.shape[1:], grid.N)
    if keep_path:
        record = range(last + 1)
    slots = {} if record is None else {int(j): k for k, j in enumerate(record)}
    path = None
    if slots:
        path = np.empty((n, len(slots), *z.shape[1:]))
        if 0 in slots:
            path[:, slots[0]] = z
    for i in range(last):
        dt = t[i + 1] - t[i]
        if terminal_step is not None and i == grid.N - 1:
            move = terminal_step(z, t[i], dt)
        elif step_move is not None:
            move = step_move(z, t[i], dt)
        else:
            move = drift(z, t[i]) * dt
        if not np.all(np.isfinite(move)):
            raise IntegrationError("non-finite drift", i)
        xi = noise.draw(i)
        if final_noise or i < grid.N - 1:
            move = move + sig[i] * math.sqrt(dt) * xi
        z = z + move
        if not np.all(np.isfinite(z)):
            raise IntegrationError("non-finite state", i + 1)
        if i + 1 in slots:
            path[:, slots[i + 1]] = z
    return z if record is None else path


def euler_maruyama(
    drift: Drift,
    schedule: NoiseSchedule,
    z0: np.ndarray,
    grid: TimeGrid,
    seed: int,
    *,
    path_index: int = 0,
    terminal_step: Optional[TerminalStep] = None,
) -> Trajectory:
    """Single-path Euler-Maruyama; the drift still sees a batch of one."""
    z0 = np.asarray(z0, dtype=float)
    states = simulate_paths(drift, schedule, z0[None], grid, seed,
                            path_offset=path_index, terminal_step=terminal_step,
                            keep_path=True)[0]
    return Trajectory(times=grid.points.copy(), states=states, seed=seed, path_index=path_index)


def sample_variance_at(paths: np.ndarray, grid: TimeGrid, times: Sequence[float]) -> dict:
    """Per-coordinate sample variance of simulated paths at selected grid times."""
    out = {}
    for s in times:
        i = int(np.argmin(np.abs(grid.points - s)))
        out[float(s)] = float(np.mean(np.var(paths[:, i], axis=0, ddof=1)))
    return out
