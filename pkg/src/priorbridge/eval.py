"""Sampling from a trained drift and set-level evaluation metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import sde
from .geometry import AtomTables, MarkedPointSet, infer_bonds, knn_dists, molecule_stable, atom_stability
from .model import Checkpoint, DriftModel, drift_eval, drift_step
from .sde import INIT_STREAM, make_grid, path_rng

log = logging.getLogger(__name__)

EMD_MAX_POINTS = 512


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampleBatch:
    items: List[MarkedPointSet]
    steps: int
    seed: int
    fingerprint: str = ""
    trajectories: Optional[np.ndarray] = None  # (n_items, steps + 1, m, c) when kept
    times: Optional[np.ndarray] = None


def initial_states(n_items: int, m_points: int, dim: int, beta_T: float, seed: int) -> np.ndarray:
    """Draws from N(0, beta_T I); item i uses its own counter-based stream."""
    out = np.empty((n_items, m_points, dim))
    for i in range(n_items):
        out[i] = path_rng(seed, i, INIT_STREAM).standard_normal((m_points, dim))
    return out * np.sqrt(beta_T)


def sample_model(model: DriftModel, n_items: int, m_points: int, steps: int, seed: int, *,
                 type_names=(), type_scale: float = 1.0, keep_trajectories: bool = False,
                 batch: int = 32) -> SampleBatch:
    """Euler-Maruyama integration of the learned drift from the Gaussian start.

    The last step carries no Brownian increment: the process is pinned at T,
    so the sample is the drift-only jump onto the predicted endpoint.  The
    prior force enters through tamed increments (see ``tamed_increment``).
    """
    if n_items < 1 or m_points < 1 or steps < 1:
        raise ValueError("n_items, m_points and steps must be positive")
    schedule = model.schedule
    grid = make_grid(steps, schedule.T)
    dim = model.arch.out_dim
    z0 = initial_states(n_items, m_points, dim, schedule.beta_T, seed)
    finals, paths = [], []
    for start in range(0, n_items, batch):
        chunk = z0[start:start + batch]
        step = lambda z, t, dt: drift_step(model, z, t, dt)
        res = sde.simulate_paths(lambda z, t: drift_eval(model, z, t), schedule, chunk, grid, seed,
                                 path_offset=start, terminal_step=step, step_move=step,
                                 keep_path=keep_trajectories, final_noise=False)
        if keep_trajectories:
            paths.append(res)
            finals.append(res[:, -1])
        else:
            finals.append(res)
    final = np.concatenate(finals)
    k = model.k_types
    items = [MarkedPointSet.from_state(s, k, type_names, type_scale, round_output=True).centered()
             for s in final]
    traj = np.concatenate(paths) if keep_trajectories else None
    return SampleBatch(items, steps, seed, trajectories=traj, times=grid.points.copy())


def sample(checkpoint: Checkpoint, n_items: int, m_points: int, steps: int, seed: int, *,
           tables: Optional[AtomTables] = None, keep_trajectories: bool = False) -> SampleBatch:
    cfg = checkpoint.config
    model = checkpoint.model(tables)
    scale = cfg.type_scale if cfg.feature_scaling else 1.0
    out = sample_model(model, n_items, m_points, steps, seed, type_names=cfg.types, type_scale=scale,
                       keep_trajectories=keep_trajectories)
    out.fingerprint = checkpoint.fingerprint()
    return out


# ---------------------------------------------------------------------------
# cloud distances


def _coords(a) -> np.ndarray:
    if isinstance(a, MarkedPointSet):
        return a.coords
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] == 0:
        raise MetricError("clouds must be nonempty (m, d) arrays")
    return a


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbour distance from a to b plus from b to a."""
    a, b = _coords(a), _coords(b)
    d2 = cdist(a, b, "sqeuclidean")
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def _resample(a: np.ndarray, size: int, seed: int) -> np.ndarray:
    idx = np.random.default_rng(seed).choice(a.shape[0], size=size, replace=False)
    return a[np.sort(idx)]


def emd(a, b, seed: int = 0) -> float:
    """Mean Euclidean cost of the optimal perfect matching.

    Clouds of different size are reduced to the smaller size by a seeded
    subsample without replacement.
    """
    a, b = _coords(a), _coords(b)
    if a.shape[0] != b.shape[0]:
        n = min(a.shape[0], b.shape[0])
        a = _resample(a, n, seed) if a.shape[0] > n else a
        b = _resample(b, n, seed) if b.shape[0] > n else b
    if a.shape != b.shape:
        raise MetricError("cloud shapes differ after resampling")
    if a.shape[0] > EMD_MAX_POINTS:
        raise MetricError(f"exact EMD is limited to {EMD_MAX_POINTS} points")
    cost = cdist(a, b)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].mean())


METRICS = {"cd": chamfer, "emd": emd}


def distance_matrix(generated: Sequence, reference: Sequence, metric) -> np.ndarray:
    fn = METRICS[metric] if isinstance(metric, str) else metric
    D = np.empty((len(generated), len(reference)))
    for i, g in enumerate(generated):
        for j, r in enumerate(reference):
            D[i, j] = fn(g, r)
    return D


def mmd_cov(generated: Sequence, reference: Sequence, metric="cd", D: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """MMD: mean over reference items of the distance to the closest generated item.
    COV: fraction of reference items that are the nearest reference of some generated item.
    """
    if len(generated) == 0 or len(reference) == 0:
        raise MetricError("mmd_cov needs nonempty generated and reference sets")
    if D is None:
        D = distance_matrix(generated, reference, metric)
    mmd = float(D.min(axis=0).mean())
    covered = np.unique(np.argmin(D, axis=1))
    return mmd, covered.size / D.shape[1]


# ---------------------------------------------------------------------------
# uniformity and molecules


def uniformity_stats(cloud, K: int = 4) -> Tuple[float, float]:
    """Mean and variance of the per-point knn-dist."""
    d = knn_dists(_coords(cloud), K)
    return float(d.mean()), float(d.var())


def fingerprint(mol: MarkedPointSet, tables: AtomTables) -> tuple:
    """Sorted multiset of (type, sorted neighbour types, degree); rigid-motion invariant."""
    idx = mol.type_index()
    nbrs = [[] for _ in range(mol.m)]
    for i, j in infer_bonds(mol.coords, idx, tables):
        nbrs[i].append(int(idx[j]))
        nbrs[j].append(int(idx[i]))
    return tuple(sorted((int(idx[i]), tuple(sorted(n)), len(n)) for i, n in enumerate(nbrs)))


def uniqueness(items: Sequence[MarkedPointSet], tables: AtomTables) -> float:
    if not items:
        raise MetricError("uniqueness of an empty batch")
    return len({fingerprint(m, tables) for m in items}) / len(items)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    n_generated: int
    n_reference: int
    mmd_cd: Optional[float] = None
    cov_cd: Optional[float] = None
    mmd_emd: Optional[float] = None
    cov_emd: Optional[float] = None
    knn_dist_mean: Optional[float] = None
    knn_dist_var: Optional[float] = None
    atom_stability: Optional[float] = None
    mol_stability: Optional[float] = None
    uniqueness: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "extra" and v is not None]
        rows += sorted(self.extra.items())
        width = max(len(k) for k, _ in rows)
        lines = []
        for k, v in rows:
            val = f"{v:.6g}" if isinstance(v, float) else str(v)
            lines.append(f"{k:<{width}}  {val}")
        return "\n".join(lines)


def evaluate(generated: Sequence[MarkedPointSet], reference: Optional[Sequence[MarkedPointSet]] = None, *,
             tables: Optional[AtomTables] = None, K: int = 4, use_emd: bool = True) -> MetricReport:
    """Every metric that applies to the inputs: set metrics need a reference,
    stability and uniqueness need atom tables and typed items."""
    if not generated:
        raise MetricError("no generated items")
    rep = MetricReport(len(generated), len(reference) if reference else 0)
    if reference:
        rep.mmd_cd, rep.cov_cd = mmd_cov(generated, reference, "cd")
        if use_emd:
            rep.mmd_emd, rep.cov_emd = mmd_cov(generated, reference, "emd")
    stats = [uniformity_stats(g, K) for g in generated if g.m > K]
    if stats:
        rep.knn_dist_mean = float(np.mean([s[0] for s in stats]))
        rep.knn_dist_var = float(np.mean([s[1] for s in stats]))
    if tables is not None and generated[0].k > 0:
        rep.atom_stability = float(np.mean([atom_stability(g, tables) for g in generated]))
        rep.mol_stability = float(np.mean([molecule_stable(g, tables) for g in generated]))
        rep.uniqueness = uniqueness(generated, tables)
    return rep
