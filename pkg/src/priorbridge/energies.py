"""Prior energies on point sets and their coordinate gradients.

Every energy is evaluated in two stages: ``EnergyForce.frozen(x)`` fixes the
discrete structure (rounded types, bond set, kNN graph) at ``x``; the frozen
object then evaluates the energy and its analytic gradient at arbitrary
coordinates with that structure held constant.  The force handed to bridges
and to the drift model is ``-grad E`` on the coordinate columns only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Optional

import numpy as np

from .geometry import (
    AtomTables,
    DatasetStats,
    GeometryError,
    MarkedPointSet,
    angle_triples,
    effective_k,
    infer_bonds,
    knn_edges,
    knn_graph,
    pair_key,
    triple_key,
)

log = logging.getLogger(__name__)

EPS_DIST = 1e-6
KINDS = ("amber", "statistical", "riesz", "knn_uniform")
AMBER_TERMS = frozenset({"bond", "angle", "lj", "coulomb"})


class SingularityError(GeometryError):
    pass


def _pairs_upper(m):
    i, j = np.triu_indices(m, k=1)
    return i, j


def _lengths(coords, i, j):
    d = coords[i] - coords[j]
    return d, np.sqrt(np.sum(d * d, axis=1))


def _check_separation(lengths, what):
    if lengths.size and lengths.min() < EPS_DIST:
        raise SingularityError(f"{what}: points closer than {EPS_DIST}")


def _length_term(coords, i, j, target, weight, grad):
    """sum w (|x_i - x_j| - target)^2, accumulating the gradient into ``grad``."""
    if i.size == 0:
        return 0.0
    d, ln = _lengths(coords, i, j)
    _check_separation(ln, "length term")
    r = ln - target
    if grad is not None:
        g = (2.0 * weight * r / ln)[:, None] * d
        np.add.at(grad, i, g)
        np.add.at(grad, j, -g)
    return float(np.sum(weight * r * r))


def _angle_term(coords, tri, target, weight, grad):
    """sum w (angle_ijk - target)^2 with the angle at the middle vertex."""
    if tri.shape[0] == 0:
        return 0.0
    i, j, k = tri[:, 0], tri[:, 1], tri[:, 2]
    u = coords[i] - coords[j]
    v = coords[k] - coords[j]
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    if min(nu.min(), nv.min()) < EPS_DIST:
        raise SingularityError("angle term: zero-length arm")
    uh = u / nu[:, None]
    vh = v / nv[:, None]
    cos = np.clip(np.sum(uh * vh, axis=1), -1.0, 1.0)
    theta = np.arccos(cos)
    r = theta - target
    if grad is not None:
        sin = np.maximum(np.linalg.norm(np.cross(uh, vh), axis=1), 1e-12)
        c = 2.0 * weight * r
        gu = (c / (nu * sin))[:, None] * (cos[:, None] * uh - vh)
        gv = (c / (nv * sin))[:, None] * (cos[:, None] * vh - uh)
        np.add.at(grad, i, gu)
        np.add.at(grad, k, gv)
        np.add.at(grad, j, -(gu + gv))
    return float(np.sum(weight * r * r))


def _riesz(coords, grad):
    i, j = _pairs_upper(coords.shape[0])
    d, ln = _lengths(coords, i, j)
    _check_separation(ln, "Riesz energy")
    if grad is not None:
        g = (-2.0 / ln**4)[:, None] * d
        np.add.at(grad, i, g)
        np.add.at(grad, j, -g)
    return float(np.sum(ln**-2.0))


def _lennard_jones(coords, sigma, grad):
    i, j = _pairs_upper(coords.shape[0])
    d, ln = _lengths(coords, i, j)
    _check_separation(ln, "Lennard-Jones energy")
    s6 = (sigma / ln) ** 6
    if grad is not None:
        # de/dl = (-12 s^12 + 12 s^6) / l
        g = ((-12.0 * s6 * s6 + 12.0 * s6) / ln**2)[:, None] * d
        np.add.at(grad, i, g)
        np.add.at(grad, j, -g)
    return float(np.sum(s6 * s6 - 2.0 * s6))


def _coulomb(coords, q, kappa, grad):
    i, j = _pairs_upper(coords.shape[0])
    d, ln = _lengths(coords, i, j)
    _check_separation(ln, "Coulomb energy")
    qq = kappa * q[i] * q[j]
    if grad is not None:
        g = (-qq / ln**3)[:, None] * d
        np.add.at(grad, i, g)
        np.add.at(grad, j, -g)
    return float(np.sum(qq / ln))


def _knn_uniform(coords, nbrs, mu, grad):
    K = nbrs.shape[1]
    diff = coords[:, None, :] - coords[nbrs]
    kd = np.mean(np.sum(diff * diff, axis=-1), axis=1)
    r = kd - mu
    if grad is not None:
        g = (4.0 / K) * r[:, None, None] * diff
        grad += g.sum(axis=1)
        np.add.at(grad, nbrs.ravel(), -g.reshape(-1, 3))
    return float(np.sum(r * r))


@dataclass
class FrozenEnergy:
    """An energy with its discrete structure fixed; coordinates stay free."""

    ef: "EnergyForce"
    type_idx: np.ndarray
    nbrs: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None
    edge_mu: Optional[np.ndarray] = None
    edge_w: Optional[np.ndarray] = None
    triples: Optional[np.ndarray] = None
    tri_mu: Optional[np.ndarray] = None
    tri_w: Optional[np.ndarray] = None

    def _evaluate(self, coords, want_grad):
        coords = np.asarray(coords, dtype=float)
        grad = np.zeros_like(coords) if want_grad else None
        kind = self.ef.kind
        if kind == "riesz":
            e = _riesz(coords, grad)
        elif kind == "knn_uniform":
            e = _knn_uniform(coords, self.nbrs, self.ef.stats.knn_mean, grad)
        else:
            e = 0.0
            mask = self.ef.term_mask if kind == "amber" else {"bond", "angle"}
            if "bond" in mask and self.edges.size:
                e += _length_term(coords, self.edges[:, 0], self.edges[:, 1], self.edge_mu, self.edge_w, grad)
            if "angle" in mask:
                e += _angle_term(coords, self.triples, self.tri_mu, self.tri_w, grad)
            if kind == "amber":
                tables = self.ef.tables
                if "lj" in mask:
                    e += _lennard_jones(coords, tables.lj_sigma, grad)
                if "coulomb" in mask:
                    e += _coulomb(coords, tables.charges(self.type_idx), tables.coulomb_kappa, grad)
        return e, grad

    def value(self, coords) -> float:
        return self.ef.weight * self._evaluate(coords, False)[0]

    def grad(self, coords) -> np.ndarray:
        return self.ef.weight * self._evaluate(coords, True)[1]

    def value_and_grad(self, coords):
        e, g = self._evaluate(coords, True)
        return self.ef.weight * e, self.ef.weight * g


@dataclass
class EnergyForce:
    """Energy configuration: kind, side information, neighbour count, clipping.

    ``weight`` multiplies the energy (1 reproduces the plain definitions);
    ``clip`` bounds the per-point force norm handed to the SDE.
    """

    kind: str
    stats: Optional[DatasetStats] = None
    tables: Optional[AtomTables] = None
    K: int = 4
    term_mask: FrozenSet[str] = field(default_factory=lambda: AMBER_TERMS)
    clip: float = 1e3
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown energy kind {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        self.term_mask = frozenset(self.term_mask)
        if not self.term_mask <= AMBER_TERMS:
            raise ValueError(f"unknown amber terms {sorted(self.term_mask - AMBER_TERMS)}")
        if self.kind in ("amber", "statistical", "knn_uniform") and self.stats is None:
            raise ValueError(f"{self.kind} energy needs dataset statistics")
        if self.kind == "amber" and self.tables is None:
            raise ValueError("amber energy needs atom tables")
        if self.stats is not None and self.kind in ("statistical", "knn_uniform") and self.stats.k_used != self.K:
            log.warning("energy K=%d differs from statistics K=%d", self.K, self.stats.k_used)
        self._warned = set()

    def _warn_absent(self, what, key):
        if (what, key) not in self._warned:
            self._warned.add((what, key))
            log.warning("no %s statistics for type key %s; term contributes zero", what, key)

    def _lookup_pairs(self, pairs, idx, table, var):
        keep, mu, w = [], [], []
        for a, b in pairs:
            key = pair_key(int(idx[a]), int(idx[b]))
            if key not in table:
                self._warn_absent("length", key)
                continue
            keep.append((a, b))
            if var:
                mu.append(table[key][0])
                w.append(1.0 / table[key][1])
            else:
                mu.append(table[key])
                w.append(1.0)
        return np.array(keep, dtype=int).reshape(-1, 2), np.array(mu), np.array(w)

    def _lookup_triples(self, triples, idx, table, var):
        keep, mu, w = [], [], []
        for i, j, k in triples:
            key = triple_key(int(idx[i]), int(idx[j]), int(idx[k]))
            if key not in table:
                self._warn_absent("angle", key)
                continue
            keep.append((i, j, k))
            if var:
                mu.append(table[key][0])
                w.append(1.0 / table[key][1])
            else:
                mu.append(table[key])
                w.append(1.0)
        return np.array(keep, dtype=int).reshape(-1, 3), np.array(mu), np.array(w)

    def frozen(self, x) -> FrozenEnergy:
        """Fix the graph, bonds and rounded types at ``x`` (a MarkedPointSet)."""
        coords = x.coords
        idx = x.type_index()
        fe = FrozenEnergy(self, idx)
        if self.kind == "knn_uniform":
            fe.nbrs = knn_graph(coords, self.K)
        elif self.kind == "statistical":
            edges = knn_edges(knn_graph(coords, effective_k(self.K, x.m)))
            fe.edges, fe.edge_mu, fe.edge_w = self._lookup_pairs(edges, idx, self.stats.edge, True)
            fe.triples, fe.tri_mu, fe.tri_w = self._lookup_triples(
                angle_triples(edges, x.m), idx, self.stats.angle, True)
        elif self.kind == "amber":
            bonds = sorted(infer_bonds(coords, idx, self.tables))
            fe.edges, fe.edge_mu, fe.edge_w = self._lookup_pairs(bonds, idx, self.stats.ref_bond_len, False)
            fe.triples, fe.tri_mu, fe.tri_w = self._lookup_triples(
                angle_triples(bonds, x.m), idx, self.stats.ref_angle, False)
        return fe

    def energy(self, x) -> float:
        return self.frozen(x).value(x.coords)

    def grad(self, x) -> np.ndarray:
        return self.frozen(x).grad(x.coords)

    def __call__(self, states) -> np.ndarray:
        """Clipped force -grad E for a batch of states ``(n, m, 3 + k)``."""
        states = np.asarray(states, dtype=float)
        out = np.zeros_like(states)
        if self.kind == "knn_uniform" and states.shape[1] > self.K:
            f = -self.weight * _knn_uniform_batch_grad(states[..., :3], self.K, self.stats.knn_mean)
        else:
            f = np.empty(states.shape[:2] + (3,))
            for b in range(states.shape[0]):
                s = states[b]
                x = MarkedPointSet(s[:, :3], s[:, 3:] if s.shape[1] > 3 else None)
                f[b] = -self.grad(x)
        if self.clip is not None and np.isfinite(self.clip):
            norms = np.linalg.norm(f, axis=-1, keepdims=True)
            f = f * np.minimum(1.0, self.clip / np.maximum(norms, 1e-300))
        out[..., :3] = f
        return out


def _knn_uniform_batch_grad(coords: np.ndarray, K: int, mu: float) -> np.ndarray:
    """Gradient of the KNN-uniform energy for a batch ``(B, m, 3)``, graph frozen per item."""
    B, m, _ = coords.shape
    sq = np.einsum("bij,bij->bi", coords, coords)
    d2 = np.maximum(sq[:, :, None] + sq[:, None, :] - 2.0 * np.einsum("bid,bjd->bij", coords, coords), 0.0)
    d2[:, np.arange(m), np.arange(m)] = np.inf
    nbrs = np.argsort(d2, axis=-1, kind="stable")[..., :K]
    rows = np.arange(B)[:, None, None]
    diff = coords[:, :, None, :] - coords[rows, nbrs]
    r = np.mean(np.sum(diff * diff, axis=-1), axis=-1) - mu
    g = (4.0 / K) * r[..., None, None] * diff
    grad = g.sum(axis=2)
    flat = grad.reshape(-1, 3)
    np.add.at(flat, (nbrs + m * np.arange(B)[:, None, None]).ravel(), -g.reshape(-1, 3))
    return flat.reshape(B, m, 3)


def amber_energy(x, ef: EnergyForce) -> float:
    """Bond + angle + Lennard-Jones + Coulomb terms enabled in ``ef.term_mask``."""
    return EnergyForce("amber", ef.stats, ef.tables, ef.K, ef.term_mask, ef.clip, ef.weight).energy(x)


def stat_energy(x, ef: EnergyForce) -> float:
    return EnergyForce("statistical", ef.stats, ef.tables, ef.K, ef.term_mask, ef.clip, ef.weight).energy(x)


def riesz_energy(x) -> float:
    coords = x.coords if hasattr(x, "coords") else np.asarray(x, dtype=float)
    return _riesz(coords, None)


def knn_energy(x, ef: EnergyForce) -> float:
    return EnergyForce("knn_uniform", ef.stats, ef.tables, ef.K, ef.term_mask, ef.clip, ef.weight).energy(x)


def energy_grad(x, ef: EnergyForce) -> np.ndarray:
    """Analytic coordinate gradient with the discrete structure frozen at ``x``."""
    return ef.grad(x)


def fd_gradient(x, ef: EnergyForce, h: float = 1e-5) -> np.ndarray:
    """Central differences, with the graph frozen at the base point for every probe."""
    if h <= 0:
        raise ValueError("h must be positive")
    fe = ef.frozen(x)
    base = np.array(x.coords, dtype=float)
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        g[idx] = (fe.value(plus) - fe.value(minus)) / (2.0 * h)
    return g
