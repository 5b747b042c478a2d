"""Bridge processes pinned at a data point and numerical checks of pinning.

Three drift families are provided:

* ``brownian``: ``sigma_t^2 (x - z) / (beta_T - beta_t)``
* ``forced``:   ``sigma_t f(z) + brownian``, with ``f = -grad E`` from a prior
* ``lyapunov``: ``-alpha_t grad U_t(z) + nu_t(z)``

Pinning is checked statistically (Monte Carlo with tolerances tied to the step
size) and the growth conditions on ``zeta_t = exp(int alpha)`` are checked on a
grid that accumulates towards ``T``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .sde import (
    INIT_STREAM,
    DomainError,
    IntegrationError,
    NoiseSchedule,
    TimeGrid,
    beta_integral,
    make_grid,
    path_rng,
    simulate_paths,
)

log = logging.getLogger(__name__)

Force = Callable[[np.ndarray], np.ndarray]


class SingularityError(DomainError):
    """Drift requested at (or beyond) the terminal time."""


class ForceError(FloatingPointError):
    def __init__(self, z):
        super().__init__("non-finite prior force")
        self.z = z


@lru_cache(maxsize=1 << 16)
def _beta(schedule: NoiseSchedule, t: float) -> float:
    return beta_integral(schedule, t)


@dataclass
class Lyapunov:
    """U_t with its spatial gradient, a step size alpha_t and a perturbation nu_t.

    ``value`` and ``grad`` take a batch of states ``(n, *state)`` and a time.
    """

    grad: Callable[[np.ndarray, float], np.ndarray]
    alpha: Callable[[float], float]
    value: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    nu: Optional[Callable[[np.ndarray, float], np.ndarray]] = None


def quadratic_potential(pin):
    """U(z) = |x - z|^2 / 2 as a (value, grad) pair over batched states."""
    pin = np.asarray(pin, dtype=float)

    def value(z, t):
        diff = np.asarray(z) - pin
        return 0.5 * np.sum(diff.reshape(diff.shape[0], -1) ** 2, axis=1)

    def grad(z, t):
        return np.asarray(z) - pin

    return value, grad


def brownian_lyapunov(pin, schedule: NoiseSchedule) -> Lyapunov:
    """The Brownian bridge written in Lyapunov form."""
    value, grad = quadratic_potential(pin)
    beta_T = _beta(schedule, schedule.T)

    def alpha(t):
        return schedule.sigma(t) ** 2 / (beta_T - _beta(schedule, float(t)))

    return Lyapunov(grad=grad, alpha=alpha, value=value)


@dataclass
class BridgeSpec:
    kind: str
    pin: np.ndarray
    schedule: NoiseSchedule
    force: Optional[Force] = None
    lyap: Optional[Lyapunov] = None
    # initial law N(mu0_mean, mu0_var I); mean None means the pin, var None means beta_T
    mu0_mean: Optional[np.ndarray] = None
    mu0_var: Optional[float] = None

    def __post_init__(self):
        self.pin = np.asarray(self.pin, dtype=float)
        if self.kind not in ("brownian", "forced", "lyapunov"):
            raise ValueError(f"unknown bridge kind {self.kind!r}")
        if self.pin.size == 0:
            raise DomainError("pin must have at least one coordinate")
        if not self.schedule.sigma_start > 0:
            # every schedule kind is positive on [0, T) exactly when sigma_start > 0
            raise DomainError("bridges need sigma_t > 0 on [0, T)")
        if self.kind == "forced":
            if self.force is None:
                raise ValueError("forced bridge needs a force")
        if self.kind == "lyapunov" and self.lyap is None:
            raise ValueError("lyapunov bridge needs (U, alpha, nu)")

    @property
    def T(self) -> float:
        return self.schedule.T

    @property
    def beta_T(self) -> float:
        return _beta(self.schedule, self.schedule.T)

    @property
    def init_mean(self) -> np.ndarray:
        return self.pin if self.mu0_mean is None else np.broadcast_to(self.mu0_mean, self.pin.shape)

    @property
    def init_var(self) -> float:
        return self.beta_T if self.mu0_var is None else float(self.mu0_var)


def _check_time(spec: BridgeSpec, t: float):
    if t >= spec.T:
        raise SingularityError(f"bridge drift is singular at t={t} >= T={spec.T}")
    if t < 0:
        raise DomainError(f"t={t} < 0")


def brownian_drift(spec: BridgeSpec, z, t: float) -> np.ndarray:
    _check_time(spec, t)
    sched = spec.schedule
    scale = sched.sigma(t) ** 2 / (spec.beta_T - _beta(sched, float(t)))
    return scale * (spec.pin - np.asarray(z, dtype=float))


def _eval_force(spec: BridgeSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    single = z.shape == spec.pin.shape
    f = np.asarray(spec.force(z[None] if single else z), dtype=float)
    if single:
        f = f[0]
    if not np.all(np.isfinite(f)):
        raise ForceError(z)
    return f


def forced_drift(spec: BridgeSpec, z, t: float) -> np.ndarray:
    _check_time(spec, t)
    return spec.schedule.sigma(t) * _eval_force(spec, z) + brownian_drift(spec, z, t)


def lyapunov_drift(spec: BridgeSpec, z, t: float) -> np.ndarray:
    _check_time(spec, t)
    z = np.asarray(z, dtype=float)
    single = z.shape == spec.pin.shape
    zb = z[None] if single else z
    g = np.asarray(spec.lyap.grad(zb, t), dtype=float)
    out = -spec.lyap.alpha(t) * g
    if spec.lyap.nu is not None:
        out = out + spec.lyap.nu(zb, t)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite Lyapunov drift at t={t}")
    return out[0] if single else out


_DRIFTS = {"brownian": brownian_drift, "forced": forced_drift, "lyapunov": lyapunov_drift}


def drift_fn(spec: BridgeSpec):
    fn = _DRIFTS[spec.kind]
    return lambda z, t: fn(spec, z, t)


def tamed_increment(f: np.ndarray, dt: float) -> np.ndarray:
    """Per-point tamed Euler increment ``f dt / (1 + dt |f|)``.

    Equal to ``f dt`` to first order, but bounded by one unit of length per
    step, which keeps explicit stepping stable for forces that grow faster
    than linearly (the KNN and Riesz energies do).
    """
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    return f * (dt / (1.0 + dt * norm))


def forced_step(spec: BridgeSpec):
    """Step hook for forced bridges: Euler for the Brownian part, tamed increment for the force."""
    def move(z, t, dt):
        return brownian_drift(spec, z, t) * dt + tamed_increment(spec.schedule.sigma(t) * _eval_force(spec, z), dt)
    return move


def terminal_step(spec: BridgeSpec):
    """Final-step hook: exact conditional-mean jump of the Brownian part.

    Only the brownian and forced kinds provide one; the force adds its tamed
    increment.
    """
    if spec.kind == "brownian":
        return lambda z, t, dt: spec.pin - z
    if spec.kind == "forced":
        return lambda z, t, dt: spec.pin - z + tamed_increment(spec.schedule.sigma(t) * _eval_force(spec, z), dt)
    return None


def sample_initial(spec: BridgeSpec, n: int, seed: int, offset: int = 0) -> np.ndarray:
    std = math.sqrt(spec.init_var)
    mean = spec.init_mean
    out = np.empty((n, *spec.pin.shape))
    for i in range(n):
        out[i] = mean + std * path_rng(seed, offset + i, INIT_STREAM).standard_normal(spec.pin.shape)
    return out


def simulate_bridge(spec: BridgeSpec, grid: TimeGrid, n_paths: int, seed: int, *,
                    offset: int = 0, keep_path: bool = False, record=None,
                    stop_index: Optional[int] = None) -> np.ndarray:
    if abs(grid.T - spec.T) > 1e-12 * spec.T:
        raise ValueError("grid must end at the bridge horizon")
    z0 = sample_initial(spec, n_paths, seed, offset)
    step = forced_step(spec) if spec.kind == "forced" else None
    return simulate_paths(drift_fn(spec), spec.schedule, z0, grid, seed,
                          path_offset=offset, terminal_step=terminal_step(spec), step_move=step,
                          keep_path=keep_path, record=record, stop_index=stop_index)


def brownian_marginal_moments(spec: BridgeSpec, t: float):
    """Mean and per-coordinate variance of Z_t for the Brownian bridge."""
    if not 0 <= t <= spec.T:
        raise DomainError(f"t={t} outside [0, {spec.T}]")
    bT = spec.beta_T
    bt = _beta(spec.schedule, float(t))
    r = bt / bT
    mean = (1 - r) * spec.init_mean + r * spec.pin
    var = (1 - r) ** 2 * spec.init_var + bt * (bT - bt) / bT
    return mean, var


def sample_bridge_marginal(spec: BridgeSpec, t: float, seed: int, n: Optional[int] = None,
                           *, offset: int = 0, fallback_steps: int = 1000) -> np.ndarray:
    """Draw Z_t under the bridge; ``n=None`` returns a single state.

    Brownian bridges are sampled exactly from their Gaussian marginal.  Other
    kinds are simulated up to ``t`` with Euler-Maruyama.
    """
    count = 1 if n is None else int(n)
    if not 0 <= t <= spec.T:
        raise DomainError(f"t={t} outside [0, {spec.T}]")
    if spec.kind == "brownian":
        mean, var = brownian_marginal_moments(spec, t)
        draws = np.empty((count, *spec.pin.shape))
        for i in range(count):
            rng = path_rng(seed, offset + i, INIT_STREAM)
            draws[i] = mean + math.sqrt(var) * rng.standard_normal(spec.pin.shape)
    elif t == 0:
        draws = sample_initial(spec, count, seed, offset)
    elif t == spec.T:
        draws = simulate_bridge(spec, make_grid(fallback_steps, spec.T), count, seed, offset=offset)
    else:
        k = max(1, int(round(fallback_steps * t / spec.T)))
        grid = TimeGrid(np.linspace(0.0, t, k + 1))
        z0 = sample_initial(spec, count, seed, offset)
        draws = simulate_paths(drift_fn(spec), spec.schedule, z0, grid, seed, path_offset=offset)
    return draws[0] if n is None else draws


# ---------------------------------------------------------------------------
# pinning


@dataclass
class PinningLevel:
    steps: int
    mean_error: float
    max_error: float
    tolerance: float


@dataclass
class PinningReport:
    passed: bool
    levels: list
    monotone: bool
    message: str = ""

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_json(self) -> str:
        d = asdict(self)
        d["status"] = self.status
        return json.dumps(d, indent=2, sort_keys=True)


def terminal_errors(final: np.ndarray, pin: np.ndarray) -> np.ndarray:
    """Per-path terminal error |Z_T - x| / sqrt(d) (root-mean-square per coordinate)."""
    diff = (final - pin).reshape(final.shape[0], -1)
    return np.sqrt(np.mean(diff**2, axis=1))


def verify_pinning(spec: BridgeSpec, steps_list: Sequence[int], n_paths: int, seed: int, *,
                   tol_factor: float = 1.5, batch: int = 256) -> PinningReport:
    """Monte Carlo check that the bridge lands on its pin as the grid is refined.

    PASS needs the mean terminal error to decrease strictly across
    ``steps_list`` and the finest level to sit below
    ``tol_factor * sqrt(beta_T / steps)``.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    steps_list = sorted(int(s) for s in steps_list)
    levels = []
    for steps in steps_list:
        grid = make_grid(steps, spec.T)
        errs = []
        try:
            for start in range(0, n_paths, batch):
                n = min(batch, n_paths - start)
                final = simulate_bridge(spec, grid, n, seed, offset=start)
                errs.append(terminal_errors(final, spec.pin))
        except (IntegrationError, ForceError, FloatingPointError) as exc:
            levels.append(PinningLevel(steps, math.inf, math.inf, math.nan))
            return PinningReport(False, levels, False, f"simulation blew up at steps={steps}: {exc}")
        e = np.concatenate(errs)
        tol = tol_factor * math.sqrt(spec.beta_T / steps)
        levels.append(PinningLevel(steps, float(e.mean()), float(e.max()), tol))
    means = [lv.mean_error for lv in levels]
    monotone = all(b < a for a, b in zip(means, means[1:]))
    finest_ok = levels[-1].mean_error <= levels[-1].tolerance
    msg = []
    if not monotone:
        msg.append("mean terminal error is not strictly decreasing")
    if not finest_ok:
        msg.append(f"finest error {levels[-1].mean_error:.4g} above tolerance {levels[-1].tolerance:.4g}")
    return PinningReport(monotone and finest_ok, levels, monotone, "; ".join(msg))


# ---------------------------------------------------------------------------
# growth conditions


def accumulating_grid(T: float = 1.0, decades: int = 6, per_decade: int = 200) -> TimeGrid:
    """Grid with points T(1 - 10^-u), u uniform in [0, decades], plus T itself."""
    u = np.linspace(0.0, decades, decades * per_decade + 1)
    pts = T * (1.0 - 10.0 ** (-u))
    pts[0] = 0.0
    return TimeGrid(np.append(pts, T))


@dataclass
class GronwallSeries:
    alpha_t: Callable[[float], float]
    pl_beta_t: Callable[[float], float]
    pl_gamma_t: Callable[[float], float]
    grid: TimeGrid = field(default_factory=accumulating_grid)


@dataclass
class GronwallResult:
    passed: bool
    times: np.ndarray
    zeta_trace: np.ndarray
    ratio_trace: np.ndarray
    message: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "status": "PASS" if self.passed else "FAIL",
            "message": self.message,
            "zeta_final": float(self.zeta_trace[-1]),
            "ratio_final": float(self.ratio_trace[-1]),
            "t_final": float(self.times[-1]),
        }, indent=2, sort_keys=True)


def _cumtrapz(y, x):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
    return out


def gronwall_check(series: GronwallSeries, *, threshold: float = 1e3,
                   min_decade_growth: float = 2.0) -> GronwallResult:
    """Check that zeta_t and zeta_t / int zeta (beta + gamma) both diverge as t -> T.

    Evaluated on every grid point except T.  Divergence is proxied by: both
    traces reach ``threshold`` at the last point, are nondecreasing over the
    last decade (points with T - t within 10x of the last gap), and grow by at
    least ``min_decade_growth`` across that decade.
    """
    t = series.grid.points[:-1]
    T = series.grid.T
    with np.errstate(all="ignore"):
        alpha = np.array([series.alpha_t(s) for s in t], dtype=float)
        src = np.array([series.pl_beta_t(s) + series.pl_gamma_t(s) for s in t], dtype=float)
        log_zeta = _cumtrapz(alpha, t)
        zeta = np.exp(log_zeta)
        denom = _cumtrapz(zeta * src, t)
        ratio = np.where(denom > 0, zeta / np.where(denom > 0, denom, 1.0), np.inf)
    ratio[0] = np.inf
    bad = ~np.isfinite(alpha) | ~np.isfinite(src) | ~np.isfinite(zeta)
    if bad.any():
        i = int(np.argmax(bad))
        return GronwallResult(False, t, zeta, ratio, f"non-finite value at t={t[i]:.6g} (index {i})")
    gap = T - t[-1]
    window = T - t <= 10.0 * gap * (1 + 1e-9)
    if window.sum() < 2:
        window[-2:] = True
    start = int(np.argmax(window))
    msgs = []
    for name, tr in (("zeta", zeta), ("ratio", ratio)):
        seg = tr[start:]
        if tr[-1] < threshold:
            msgs.append(f"{name} = {tr[-1]:.4g} below threshold {threshold:g}")
        finite = seg[np.isfinite(seg)]
        if finite.size == seg.size:
            if np.any(np.diff(seg) < 0):
                msgs.append(f"{name} not increasing over the last decade")
            if seg[-1] < min_decade_growth * seg[0]:
                msgs.append(f"{name} grows only {seg[-1] / seg[0]:.3g}x over the last decade")
    return GronwallResult(not msgs, t, zeta, ratio, "; ".join(msgs))


def brownian_gronwall_series(schedule: NoiseSchedule, dim: int, grid: Optional[TimeGrid] = None) -> GronwallSeries:
    """Series for the Brownian bridge with U = |x - z|^2 / 2: alpha = sigma^2/(beta_T - beta_t),
    no perturbation, Ito correction d sigma_t^2 / 2."""
    beta_T = _beta(schedule, schedule.T)
    return GronwallSeries(
        alpha_t=lambda t: schedule.sigma(t) ** 2 / (beta_T - _beta(schedule, float(t))),
        pl_beta_t=lambda t: 0.0,
        pl_gamma_t=lambda t: 0.5 * dim * schedule.sigma(t) ** 2,
        grid=grid if grid is not None else accumulating_grid(schedule.T),
    )


# ---------------------------------------------------------------------------
# PL probe


@dataclass
class PLProbeResult:
    margin: float
    times: np.ndarray
    trace: np.ndarray
    pathwise_max: float

    @property
    def passed(self) -> bool:
        return self.margin <= 0.0


def pl_condition_probe(U, spec: BridgeSpec, n_paths: int, grid: TimeGrid, seed: int) -> PLProbeResult:
    """Estimate E[U_t(Z_t)] - E[|grad U_t(Z_t)|^2] along simulated bridge paths.

    ``U`` is a ``(value, grad)`` pair (or an object with those attributes).
    Returns the worst (largest) margin over grid times before T; the pathwise
    reading max over paths of U - |grad U|^2 is reported alongside.
    """
    if spec.pin.size == 0:
        raise DomainError("state dimension must be positive")
    value, grad = (U.value, U.grad) if hasattr(U, "grad") else U
    paths = simulate_bridge(spec, grid, n_paths, seed, keep_path=True)
    times = grid.points[:-1]
    trace = np.empty(times.size)
    pathwise = -np.inf
    for i, s in enumerate(times):
        z = paths[:, i]
        u = np.asarray(value(z, s), dtype=float)
        g = np.asarray(grad(z, s), dtype=float).reshape(z.shape[0], -1)
        gap = u - np.sum(g**2, axis=1)
        trace[i] = gap.mean()
        pathwise = max(pathwise, float(gap.max()))
    return PLProbeResult(float(trace.max()), times, trace, pathwise)
