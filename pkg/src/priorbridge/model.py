"""Learnable drift alpha * f_t(z) + net(z, t), bridge score matching, training, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import bridges
from .bridges import BridgeSpec
from .energies import AMBER_TERMS, EnergyForce
from .geometry import AtomTables, DatasetStats, MarkedPointSet, load_tables
from .nn import NetArch, SetNet, time_embedding
from .sde import NoiseSchedule, make_grid, path_rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PBRIDGE\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    # discretisation and optimisation
    steps: int = 100
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-4
    optimizer: str = "sgd"  # sgd | adam
    momentum: float = 0.0
    lr_decay: str = "none"  # none | cosine
    seed: int = 0
    times_per_item: int = 4
    # noise schedule
    schedule_kind: str = "constant"
    sigma_start: float = 1.0
    sigma_end: float = 1.0
    horizon: float = 1.0
    schedule_power: float = 2.0
    # bridge and prior force
    bridge: str = "brownian"  # brownian | forced
    energy: str = "none"  # none | amber | statistical | riesz | knn_uniform
    K: int = 4
    energy_weight: float = 1.0
    force_clip: float = 1e3
    term_mask: str = "bond,angle,lj,coulomb"
    # drift parameterisation
    alpha_mode: str = "learnable"  # learnable | scheduled | off
    alpha_init: float = 0.1
    hidden: int = 64
    depth: int = 2
    temb_dim: int = 16
    activation: str = "silu"
    # per-coordinate data variance used to normalise network inputs; < 0 means estimate at train time
    data_var: float = -1.0
    # molecules
    type_names: str = ""  # comma separated; empty for untyped clouds
    feature_scaling: bool = True
    type_scale: float = 0.25
    charge_scale: float = 0.1

    def __post_init__(self):
        for name in ("steps", "epochs", "batch_size", "times_per_item", "hidden", "depth", "temb_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.bridge not in ("brownian", "forced"):
            raise ValueError(f"unknown bridge {self.bridge!r}")
        if self.bridge == "forced" and self.energy == "none":
            raise ValueError("forced bridge needs an energy")
        if self.alpha_mode not in ("learnable", "scheduled", "off"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def types(self) -> Tuple[str, ...]:
        return tuple(s.strip() for s in self.type_names.split(",") if s.strip())

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule_kind, self.sigma_start, self.sigma_end, self.horizon, self.schedule_power)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def build_force(cfg: TrainConfig, stats: Optional[DatasetStats], tables: Optional[AtomTables]) -> Optional[EnergyForce]:
    if cfg.energy == "none":
        return None
    mask = frozenset(s.strip() for s in cfg.term_mask.split(",") if s.strip()) or AMBER_TERMS
    return EnergyForce(cfg.energy, stats, tables, cfg.K, mask, cfg.force_clip, cfg.energy_weight)


@dataclass
class DriftModel:
    """s_t(z) = alpha(t) f(z) + scale(t) net(features(z), t).

    ``scale(t) = sigma_t^2 / sqrt(beta_T - beta_t)`` is the typical size of the
    Brownian-bridge drift, so the network output stays O(1) across time; the
    state is divided by ``sqrt(beta_T - beta_t + data_var)`` on the way in.
    """

    arch: NetArch
    params: np.ndarray
    schedule: NoiseSchedule
    alpha_mode: str = "learnable"
    alpha: float = 0.0
    force: Optional[EnergyForce] = None
    k_types: int = 0
    charges: Optional[np.ndarray] = None  # per type, already multiplied by charge_scale
    data_var: float = 1.0
    _net: Optional[SetNet] = field(default=None, repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        self._net = SetNet(self.arch, self.params)
        self._beta_T = self.schedule.beta_T

    @property
    def net(self) -> SetNet:
        return self._net

    def alpha_at(self, t: float) -> float:
        if self.alpha_mode == "off" or self.force is None:
            return 0.0
        if self.alpha_mode == "scheduled":
            return self.alpha * (1.0 - t / self.schedule.T)
        return self.alpha

    def out_scale(self, t: float) -> float:
        rem = self._beta_T - bridges._beta(self.schedule, float(t))
        return self.schedule.sigma(t) ** 2 / math.sqrt(rem)

    def in_scale(self, t: float) -> float:
        rem = self._beta_T - bridges._beta(self.schedule, float(t))
        return 1.0 / math.sqrt(rem + self.data_var)

    def features(self, z: np.ndarray, t) -> np.ndarray:
        """Network inputs per point: rescaled state plus an optional charge channel."""
        tb = np.broadcast_to(np.asarray(t, dtype=float), (z.shape[0],))
        zin = z * np.array([self.in_scale(s) for s in tb])[:, None, None]
        if self.charges is None or self.k_types == 0:
            return zin
        idx = np.argmax(z[..., 3:3 + self.k_types], axis=-1)
        return np.concatenate([zin, self.charges[idx][..., None]], axis=-1)

    def force_at(self, z: np.ndarray) -> np.ndarray:
        if self.force is None:
            return np.zeros_like(z)
        return self.force(z)

    def forward(self, z: np.ndarray, t) -> Tuple[np.ndarray, np.ndarray]:
        """Network part and prior force for a batch ``(B, m, c)`` at times ``t`` (scalar or (B,))."""
        z = np.asarray(z, dtype=float)
        tb = np.broadcast_to(np.asarray(t, dtype=float), (z.shape[0],))
        scale = np.array([self.out_scale(s) for s in tb])
        temb = time_embedding(tb, self.arch.temb_dim, self.schedule.T)
        net_out = self.net.forward(self.features(z, tb), temb) * scale[:, None, None]
        return net_out, scale

    def __call__(self, z: np.ndarray, t: float) -> np.ndarray:
        return drift_eval(self, z, t)


def drift_eval(model: DriftModel, z, t: float) -> np.ndarray:
    """Learned drift for one state ``(m, c)`` or a batch ``(B, m, c)``."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 2
    zb = z[None] if single else z
    if not 0 <= t < model.schedule.T:
        raise bridges.SingularityError(f"drift requested at t={t} outside [0, T)")
    out, _ = model.forward(zb, t)
    a = model.alpha_at(t)
    if a != 0.0:
        f = model.force_at(zb)
        if not np.all(np.isfinite(f)):
            raise FloatingPointError(f"non-finite prior force at t={t}")
        out = out + a * f
    return out[0] if single else out


def drift_step(model: DriftModel, z: np.ndarray, t: float, dt: float) -> np.ndarray:
    """Sampler increment over ``dt``: Euler for the network part, tamed for the prior force."""
    if not 0 <= t < model.schedule.T:
        raise bridges.SingularityError(f"drift requested at t={t} outside [0, T)")
    out, _ = model.forward(z, t)
    out = out * dt
    a = model.alpha_at(t)
    if a != 0.0:
        f = model.force_at(z)
        if not np.all(np.isfinite(f)):
            raise FloatingPointError(f"non-finite prior force at t={t}")
        out = out + bridges.tamed_increment(a * f, dt)
    return out


def make_model(cfg: TrainConfig, state_dim: int, force: Optional[EnergyForce] = None,
               tables: Optional[AtomTables] = None, params: Optional[np.ndarray] = None,
               alpha: Optional[float] = None) -> DriftModel:
    k = len(cfg.types)
    charges = None
    in_dim = state_dim
    if k and tables is not None and cfg.feature_scaling:
        charges = tables.charge * cfg.charge_scale
        in_dim += 1
    arch = NetArch(in_dim, state_dim, cfg.hidden, cfg.depth, cfg.temb_dim, cfg.activation)
    if params is None:
        params = SetNet.init_params(arch, path_rng(cfg.seed, 0, 7))
    if alpha is None:
        alpha = cfg.alpha_init if cfg.alpha_mode != "off" else 0.0
    data_var = cfg.data_var if cfg.data_var >= 0 else 1.0
    return DriftModel(arch, params, cfg.schedule(), cfg.alpha_mode, alpha, force, k, charges, data_var)


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    grad_alpha: float


def _bridge_spec(cfg_bridge: str, x: np.ndarray, schedule: NoiseSchedule, force) -> BridgeSpec:
    if cfg_bridge == "forced":
        return BridgeSpec("forced", x, schedule, force=force)
    return BridgeSpec("brownian", x, schedule)


def item_times(rng: np.random.Generator, n_steps: int, count: int) -> np.ndarray:
    """Grid indices drawn uniformly from 0..N-1 (t_N is excluded)."""
    return rng.integers(0, n_steps, size=count)


def sm_loss(model: DriftModel, batch: Sequence[np.ndarray], schedule: NoiseSchedule, bridge: str,
            seed: int, *, steps: int = 100, times_per_item: int = 4, item_ids: Optional[Sequence[int]] = None,
            paths: Optional[Sequence[np.ndarray]] = None, samples=None) -> LossResult:
    """Monte Carlo bridge score-matching loss and its gradient.

    For each item ``x`` and each sampled grid time ``t``:
    ``0.5 * |(s_t(Z_t) - b_t(Z_t | x)) / sigma_t|^2 * T``, averaged over times
    and items.  ``Z_t`` comes from the exact Brownian marginal, from ``paths``
    (cached forced paths, one ``(N+1, m, c)`` array per item), or directly from
    ``samples`` (a list of ``(indices, states)`` per item).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    grid = make_grid(steps, schedule.T)
    T = schedule.T
    ids = list(range(len(batch))) if item_ids is None else list(item_ids)
    net = model.net
    net.zero_grad()
    total = 0.0
    g_alpha = 0.0
    learn_alpha = model.alpha_mode == "learnable" and model.force is not None
    for b, x in enumerate(batch):
        x = np.asarray(x, dtype=float)
        spec = _bridge_spec(bridge, x, schedule, model.force)
        if samples is not None:
            idx, Z = samples[b]
        else:
            rng = path_rng(seed, ids[b], 11)
            idx = item_times(rng, grid.N, times_per_item)
            if paths is not None:
                Z = paths[b][idx]
            elif bridge == "brownian":
                Z = np.stack([bridges.sample_bridge_marginal(spec, grid.points[i], seed, offset=ids[b] * 1000 + k)
                              for k, i in enumerate(idx)])
            else:
                raise ValueError("forced bridges need cached paths")
        ts = grid.points[idx]
        net_out, scale = model.forward(Z, ts)
        f = model.force_at(Z) if model.force is not None else None
        alphas = np.array([model.alpha_at(s) for s in ts])
        s = net_out if f is None else net_out + alphas[:, None, None] * f
        target = np.stack([bridges.drift_fn(spec)(Z[k], ts[k]) for k in range(len(ts))])
        sig = np.asarray(schedule.sigma(ts), dtype=float) * np.ones(len(ts))
        resid = s - target
        w = T / (len(ts) * len(batch))
        total += 0.5 * w * float(np.sum((resid / sig[:, None, None]) ** 2))
        ds = w * resid / (sig**2)[:, None, None]
        net.backward(ds * scale[:, None, None])
        if learn_alpha:
            g_alpha += float(np.sum(ds * f))
    return LossResult(total, net.grads.copy(), g_alpha)


# ---------------------------------------------------------------------------
# optimisation


class Optimizer:
    def __init__(self, cfg: TrainConfig, n: int, total_steps: int = 1):
        self.cfg = cfg
        self.total = max(1, total_steps)
        self.k = 0
        self.v = np.zeros(n)
        self.m = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        lr = self.cfg.learning_rate
        if self.cfg.lr_decay == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * min(self.k, self.total) / self.total))
        self.k += 1
        if self.cfg.optimizer == "adam":
            b1, b2, eps = 0.9, 0.999, 1e-8
            self.t += 1
            self.m = b1 * self.m + (1 - b1) * grad
            self.v = b2 * self.v + (1 - b2) * grad * grad
            mh = self.m / (1 - b1**self.t)
            vh = self.v / (1 - b2**self.t)
            theta -= lr * mh / (np.sqrt(vh) + eps)
        else:
            self.v = self.cfg.momentum * self.v + grad
            theta -= lr * self.v


@dataclass
class Checkpoint:
    params: np.ndarray
    alpha: float
    config: TrainConfig
    arch: NetArch
    stats_json: str = ""
    loss_trace: List[float] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @property
    def stats_fingerprint(self) -> str:
        if not self.stats_json:
            return ""
        return hashlib.sha256(self.stats_json.encode()).hexdigest()[:16]

    @property
    def stats(self) -> Optional[DatasetStats]:
        return DatasetStats.from_json(self.stats_json) if self.stats_json else None

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.params.tobytes())
        h.update(struct.pack("<d", self.alpha))
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def model(self, tables: Optional[AtomTables] = None) -> DriftModel:
        cfg = self.config
        if tables is None and cfg.types:
            tables = load_tables(types=cfg.types)
        force = build_force(cfg, self.stats, tables)
        m = make_model(cfg, self.arch.out_dim, force, tables, params=self.params.copy(), alpha=self.alpha)
        if m.arch != self.arch:
            raise CheckpointError("checkpoint architecture does not match its config")
        return m


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = json.dumps({
        "alpha": ckpt.alpha,
        "config": ckpt.config.to_dict(),
        "arch": ckpt.arch.to_dict(),
        "stats_json": ckpt.stats_json,
        "stats_fingerprint": ckpt.stats_fingerprint,
        "loss_trace": list(ckpt.loss_trace),
        "n_params": int(ckpt.params.size),
    }, sort_keys=True).encode()
    body = (CHECKPOINT_MAGIC + struct.pack("<IQ", ckpt.version, len(header)) + header
            + np.ascontiguousarray(ckpt.params, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected_config: Optional[TrainConfig] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < head + 32 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (or truncated)")
    version, hlen = struct.unpack("<IQ", blob[len(CHECKPOINT_MAGIC):head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity check failed (truncated or corrupted)")
    meta = json.loads(body[head:head + hlen])
    params = np.frombuffer(body[head + hlen:], dtype="<f8").astype(float)
    if params.size != meta["n_params"]:
        raise CheckpointError("parameter block has the wrong length")
    cfg = TrainConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expected_config.to_dict().items() if cfg.to_dict().get(k) != v)
        warnings.warn(f"checkpoint config differs from expected in {diff}", stacklevel=2)
    return Checkpoint(params, float(meta["alpha"]), cfg, NetArch(**meta["arch"]),
                      meta["stats_json"], list(meta["loss_trace"]), version)


# ---------------------------------------------------------------------------
# training


def prepare_items(dataset: Sequence[MarkedPointSet], cfg: TrainConfig) -> List[np.ndarray]:
    """Centre every item and convert it to a diffusion state (types scaled)."""
    scale = cfg.type_scale if cfg.feature_scaling else 1.0
    return [item.centered().to_state(scale) for item in dataset]


def check_init_scale(schedule: NoiseSchedule, states: Sequence[np.ndarray]) -> None:
    var = float(np.mean([np.var(s[:, :3]) for s in states]))
    if schedule.beta_T < 4.0 * var:
        log.warning("beta_T=%.3g is below 4x the data variance %.3g; the sampler's N(0, beta_T) start "
                    "is far from the training marginal", schedule.beta_T, var)


def simulate_training_paths(states, cfg: TrainConfig, force, epoch: int) -> List[np.ndarray]:
    """One forced-bridge path per item, cached for the epoch."""
    grid = make_grid(cfg.steps, cfg.horizon)
    out = []
    for i, x in enumerate(states):
        spec = BridgeSpec("forced", x, cfg.schedule(), force=force)
        out.append(bridges.simulate_bridge(spec, grid, 1, cfg.seed + 7919 * (epoch + 1), offset=i,
                                           keep_path=True)[0])
    return out


def train(cfg: TrainConfig, dataset: Sequence[MarkedPointSet], force: Optional[EnergyForce] = None,
          *, stats: Optional[DatasetStats] = None, tables: Optional[AtomTables] = None,
          callback=None) -> Checkpoint:
    """Fit the drift by stochastic gradient descent on the bridge score-matching loss."""
    states = prepare_items(dataset, cfg)
    if not states:
        raise ValueError("empty dataset")
    if cfg.data_var < 0:
        cfg = replace(cfg, data_var=float(np.mean([np.mean(s**2) for s in states])))
    schedule = cfg.schedule()
    check_init_scale(schedule, states)
    model = make_model(cfg, states[0].shape[1], force, tables)
    n = len(states)
    opt = Optimizer(cfg, model.params.size + 1, cfg.epochs * math.ceil(n / cfg.batch_size))
    theta = np.concatenate([model.params, [model.alpha]])
    learn_alpha = cfg.alpha_mode == "learnable" and force is not None
    stats_json = stats.to_json() if stats is not None else ""
    trace: List[float] = []

    def snapshot():
        return Checkpoint(model.params.copy(), float(model.alpha), replace(cfg), model.arch, stats_json, list(trace))

    for epoch in range(cfg.epochs):
        paths = simulate_training_paths(states, cfg, force, epoch) if cfg.bridge == "forced" else None
        order = path_rng(cfg.seed, epoch, 3).permutation(n)
        epoch_loss = []
        for start in range(0, n, cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            res = sm_loss(model, [states[i] for i in ids], schedule, cfg.bridge,
                          seed=cfg.seed * 1_000_003 + epoch, steps=cfg.steps,
                          times_per_item=cfg.times_per_item, item_ids=[int(i) for i in ids],
                          paths=None if paths is None else [paths[i] for i in ids])
            if not math.isfinite(res.loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", snapshot())
            grad = np.concatenate([res.grad, [res.grad_alpha if learn_alpha else 0.0]])
            opt.step(theta, grad)
            model.params[...] = theta[:-1]
            model.alpha = float(theta[-1])
            epoch_loss.append(res.loss)
        trace.append(float(np.mean(epoch_loss)))
        log.info("epoch %d loss %.6g alpha %.4g", epoch, trace[-1], model.alpha)
        if callback is not None:
            callback(epoch, trace[-1], model)
    return snapshot()
