"""Synthetic datasets and the sphere uniformity benchmark."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .eval import mmd_cov, sample_model, uniformity_stats
from .geometry import MarkedPointSet, extract_stats
from .model import TrainConfig, build_force, train

log = logging.getLogger(__name__)


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """Nearly uniform points on a sphere from the golden-angle spiral."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * k
    return radius * np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def sphere_dataset(n_items: int, n_points: int, seed: int, *, radius: float = 1.0,
                   jitter: float = 0.01) -> List[MarkedPointSet]:
    """Randomly rotated Fibonacci spheres with small Gaussian jitter, centred."""
    rng = np.random.default_rng(seed)
    base = fibonacci_sphere(n_points, radius)
    out = []
    for _ in range(n_items):
        rot = Rotation.random(random_state=rng)
        pts = rot.apply(base) + jitter * rng.standard_normal(base.shape)
        out.append(MarkedPointSet(pts).centered())
    return out


def circle_dataset(n_items: int, n_points: int, seed: int, radius: float = 1.0) -> List[MarkedPointSet]:
    """Points on a circle in the z = 0 plane, random phase per item."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_items):
        ang = rng.uniform(0, 2 * math.pi) + 2 * math.pi * np.arange(n_points) / n_points
        out.append(MarkedPointSet(np.column_stack([radius * np.cos(ang), radius * np.sin(ang),
                                                   np.zeros(n_points)])))
    return out


@dataclass
class UniformityResult:
    label: str
    steps: int
    knn_var: float
    knn_mean: float
    mmd_cd: float
    cov_cd: float
    alpha: float
    train_seconds: float
    per_item_var: List[float] = field(default_factory=list)

    def row(self) -> str:
        return (f"{self.label:<9} steps={self.steps:<4d} knn_var={self.knn_var:.4e} knn_mean={self.knn_mean:.4e} "
                f"mmd_cd={self.mmd_cd:.4e} cov_cd={self.cov_cd:.3f} alpha={self.alpha:.4g}")


@dataclass
class SphereBenchmark:
    n_points: int = 128
    n_train: int = 20
    n_eval: int = 20
    n_generated: int = 20
    data_seed: int = 11
    eval_seed: int = 12
    sample_seed: int = 13
    K: int = 4
    sample_steps: Sequence[int] = (100, 10)
    base: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=100, epochs=150, batch_size=4, learning_rate=1e-3, optimizer="adam", lr_decay="cosine",
        seed=5, times_per_item=8, schedule_kind="constant", sigma_start=1.5, sigma_end=1.5,
        hidden=64, depth=2, alpha_init=0.1))

    def configs(self) -> Dict[str, TrainConfig]:
        return {
            "no-force": replace(self.base, bridge="brownian", energy="none", alpha_mode="off"),
            "knn-force": replace(self.base, bridge="forced", energy="knn_uniform", K=self.K,
                                 alpha_mode="learnable"),
        }

    def datasets(self):
        train_set = sphere_dataset(self.n_train, self.n_points, self.data_seed)
        eval_set = sphere_dataset(self.n_eval, self.n_points, self.eval_seed)
        return train_set, eval_set, extract_stats(train_set, self.K)

    def train_all(self) -> Dict[str, tuple]:
        """Train every configuration; returns label -> (checkpoint, seconds)."""
        train_set, _, stats = self.datasets()
        out = {}
        for label, cfg in self.configs().items():
            force = build_force(cfg, stats, None)
            t0 = time.perf_counter()
            ckpt = train(cfg, train_set, force, stats=stats)
            out[label] = (ckpt, time.perf_counter() - t0)
        return out

    def score(self, trained: Dict[str, tuple]) -> Dict[str, List[UniformityResult]]:
        """Sample each checkpoint at every step count and score against the eval set."""
        _, eval_set, stats = self.datasets()
        results: Dict[str, List[UniformityResult]] = {}
        for label, (ckpt, elapsed) in trained.items():
            model = ckpt.model()
            rows = []
            for steps in self.sample_steps:
                batch = sample_model(model, self.n_generated, self.n_points, steps, self.sample_seed)
                us = [uniformity_stats(c, self.K) for c in batch.items]
                mmd, cov = mmd_cov(batch.items, eval_set, "cd")
                rows.append(UniformityResult(label, steps, float(np.mean([u[1] for u in us])),
                                             float(np.mean([u[0] for u in us])), mmd, cov, ckpt.alpha,
                                             elapsed, [u[1] for u in us]))
                log.info(rows[-1].row())
            results[label] = rows
        return results

    def run(self) -> Dict[str, List[UniformityResult]]:
        return self.score(self.train_all())


def degradation(results: Dict[str, List[UniformityResult]], metric: str = "mmd_cd") -> Dict[str, float]:
    """Metric at the fewest sampling steps minus the metric at the most steps."""
    out = {}
    for label, rows in results.items():
        by_steps = {r.steps: getattr(r, metric) for r in rows}
        out[label] = by_steps[min(by_steps)] - by_steps[max(by_steps)]
    return out
