"""Marked point sets, neighbourhood graphs, dataset statistics and stability."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

BOND_FACTOR = 1.15
VAR_FLOOR = 1e-6
STATS_FORMAT = "priorbridge-dataset-stats"
STATS_VERSION = 1


class GeometryError(ValueError):
    pass


class TableError(KeyError):
    pass


@dataclass
class MarkedPointSet:
    """Coordinates ``(m, 3)`` plus continuous type vectors ``(m, k)``; k may be 0."""

    coords: np.ndarray
    types: Optional[np.ndarray] = None
    type_names: Tuple[str, ...] = ()

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)
        if self.coords.shape[0] < 1:
            raise GeometryError("a point set needs at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise GeometryError("coordinates must be finite")
        if self.types is None:
            self.types = np.zeros((self.m, 0))
        self.types = np.asarray(self.types, dtype=float).reshape(self.m, -1)
        self.type_names = tuple(self.type_names)

    @property
    def m(self) -> int:
        return self.coords.shape[0]

    @property
    def k(self) -> int:
        return self.types.shape[1]

    def type_index(self) -> np.ndarray:
        """Rounded type of every point (all zeros for untyped clouds)."""
        if self.k == 0:
            return np.zeros(self.m, dtype=int)
        return np.argmax(round_types(self.types), axis=1)

    def symbols(self) -> List[str]:
        idx = self.type_index()
        if not self.type_names:
            return ["X"] * self.m
        return [self.type_names[i] for i in idx]

    def centered(self) -> "MarkedPointSet":
        return MarkedPointSet(self.coords - self.coords.mean(axis=0), self.types.copy(), self.type_names)

    def permuted(self, perm) -> "MarkedPointSet":
        perm = np.asarray(perm)
        return MarkedPointSet(self.coords[perm], self.types[perm], self.type_names)

    def to_state(self, type_scale: float = 1.0) -> np.ndarray:
        return np.concatenate([self.coords, type_scale * self.types], axis=1)

    @classmethod
    def from_state(cls, state, k: int, type_names=(), type_scale: float = 1.0, round_output: bool = False):
        state = np.asarray(state, dtype=float)
        types = state[:, 3:3 + k] / type_scale if k else None
        if round_output and k:
            types = round_types(types)
        return cls(state[:, :3], types, type_names)


# ---------------------------------------------------------------------------
# tables


@dataclass
class AtomTables:
    type_names: Tuple[str, ...]
    covalent_radius: np.ndarray
    valency: np.ndarray
    charge: np.ndarray
    lj_sigma: float
    coulomb_kappa: float

    def __post_init__(self):
        for name, arr in (("covalent_radius", self.covalent_radius), ("charge", self.charge)):
            if np.any(np.asarray(arr) <= 0):
                raise TableError(f"{name} entries must be positive")
        if self.lj_sigma <= 0 or self.coulomb_kappa <= 0:
            raise TableError("lj_sigma and coulomb_kappa must be positive")

    @property
    def k(self) -> int:
        return len(self.type_names)

    def _lookup(self, arr, idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.type_names)):
            raise TableError(f"type index outside table of {len(self.type_names)} types")
        return np.asarray(arr)[idx]

    def radius(self, idx):
        return self._lookup(self.covalent_radius, idx)

    def valence(self, idx):
        return self._lookup(self.valency, idx)

    def charges(self, idx):
        return self._lookup(self.charge, idx)


def load_tables(path=None, types: Optional[Sequence[str]] = None) -> AtomTables:
    """Load atom tables; ``types`` selects (and orders) the one-hot columns."""
    if path is None:
        text = resources.files("priorbridge").joinpath("data/atom_tables.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    entries = raw["types"]
    names = list(types) if types is not None else list(entries)
    missing = [n for n in names if n not in entries]
    if missing:
        raise TableError(f"no table entry for types {missing}")
    return AtomTables(
        type_names=tuple(names),
        covalent_radius=np.array([entries[n]["covalent_radius"] for n in names], dtype=float),
        valency=np.array([entries[n]["valency"] for n in names], dtype=int),
        charge=np.array([entries[n]["charge"] for n in names], dtype=float),
        lj_sigma=float(raw.get("lj_sigma", 1.0)),
        coulomb_kappa=float(raw.get("coulomb_kappa", 1.0)),
    )


# ---------------------------------------------------------------------------
# basic operations


def round_types(xh) -> np.ndarray:
    """Row-wise indicator of the maximal entry; ties go to the lowest index."""
    xh = np.asarray(xh, dtype=float)
    if xh.ndim != 2 or xh.shape[1] < 1:
        raise GeometryError("round_types needs an (m, k) array with k >= 1")
    nan_rows = np.all(np.isnan(xh), axis=1)
    if nan_rows.any():
        raise GeometryError(f"all-NaN type row at index {int(np.argmax(nan_rows))}")
    filled = np.where(np.isnan(xh), -np.inf, xh)
    out = np.zeros_like(xh)
    out[np.arange(xh.shape[0]), np.argmax(filled, axis=1)] = 1.0
    return out


def pairwise_distances(coords) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def infer_bonds(coords, type_idx, tables: AtomTables) -> set:
    """Unordered pairs (i < j) closer than 1.15 x the sum of covalent radii."""
    coords = np.asarray(coords, dtype=float)
    r = tables.radius(np.asarray(type_idx, dtype=int))
    d = pairwise_distances(coords)
    limit = BOND_FACTOR * (r[:, None] + r[None, :])
    i, j = np.nonzero(np.triu(d < limit, k=1))
    return set(zip(i.tolist(), j.tolist()))


def knn_graph(coords, K: int) -> np.ndarray:
    """``(m, K)`` neighbour indices ordered by distance; ties go to the lower index."""
    coords = np.asarray(coords, dtype=float)
    m = coords.shape[0]
    if K < 1 or K >= m:
        raise GeometryError(f"K={K} must satisfy 1 <= K < m={m}")
    sq = np.einsum("ij,ij->i", coords, coords)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (coords @ coords.T), 0.0)
    np.fill_diagonal(d2, np.inf)
    if K >= m - 1:
        return np.argsort(d2, axis=1, kind="stable")[:, :K]
    # partial selection, then an exact (distance, index) order among the K winners
    cand = np.argpartition(d2, K - 1, axis=1)[:, :K]
    cd = np.take_along_axis(d2, cand, axis=1)
    order = np.argsort(cd, axis=1, kind="stable")
    cand = np.take_along_axis(cand, order, axis=1)
    cd = np.take_along_axis(cd, order, axis=1)
    # rows with ties at or across the K-th distance fall back to a full stable sort
    kth = cd[:, -1]
    n_le = np.count_nonzero(d2 <= kth[:, None], axis=1)
    dup = np.any(cd[:, 1:] == cd[:, :-1], axis=1)
    redo = np.nonzero((n_le > K) | dup)[0]
    if redo.size:
        cand[redo] = np.argsort(d2[redo], axis=1, kind="stable")[:, :K]
    return cand


def knn_edges(nbrs) -> List[Tuple[int, int]]:
    """Symmetrised kNN graph as a sorted list of unordered pairs."""
    nbrs = np.asarray(nbrs)
    i = np.repeat(np.arange(nbrs.shape[0]), nbrs.shape[1])
    j = nbrs.ravel()
    pairs = np.stack([np.minimum(i, j), np.maximum(i, j)], axis=1)
    return [tuple(p) for p in np.unique(pairs, axis=0).tolist()]


def angle_triples(edges: Iterable[Tuple[int, int]], m: int) -> List[Tuple[int, int, int]]:
    """All (i, j, k) with i < k both adjacent to the vertex j."""
    adj: Dict[int, list] = {v: [] for v in range(m)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    out = []
    for j in range(m):
        nb = sorted(adj[j])
        for p in range(len(nb)):
            for q in range(p + 1, len(nb)):
                out.append((nb[p], j, nb[q]))
    return out


def _cos_angles(u, v):
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    return np.sum(u * v, axis=-1) / (nu * nv), nu, nv


def angle(xi, xj, xk) -> float:
    """Angle at vertex ``xj`` between the arms to ``xi`` and ``xk``, in [0, pi]."""
    u = np.asarray(xi, dtype=float) - np.asarray(xj, dtype=float)
    v = np.asarray(xk, dtype=float) - np.asarray(xj, dtype=float)
    if np.linalg.norm(u) == 0 or np.linalg.norm(v) == 0:
        raise GeometryError("degenerate angle: zero-length arm")
    c, _, _ = _cos_angles(u, v)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def triple_angles(coords, triples) -> np.ndarray:
    if len(triples) == 0:
        return np.zeros(0)
    t = np.asarray(triples)
    u = coords[t[:, 0]] - coords[t[:, 1]]
    v = coords[t[:, 2]] - coords[t[:, 1]]
    c, nu, nv = _cos_angles(u, v)
    if np.any(nu == 0) or np.any(nv == 0):
        raise GeometryError("degenerate angle: zero-length arm")
    return np.arccos(np.clip(c, -1.0, 1.0))


def knn_dists(coords, K: int, nbrs=None) -> np.ndarray:
    """Mean squared distance from each point to its K nearest neighbours."""
    coords = np.asarray(coords, dtype=float)
    if nbrs is None:
        nbrs = knn_graph(coords, K)
    diff = coords[:, None, :] - coords[nbrs]
    return np.mean(np.sum(diff**2, axis=-1), axis=1)


def pair_key(r: int, c: int) -> Tuple[int, int]:
    return (r, c) if r <= c else (c, r)


def triple_key(r: int, c: int, rp: int) -> Tuple[int, int, int]:
    return (r, c, rp) if r <= rp else (rp, c, r)


# ---------------------------------------------------------------------------
# dataset statistics


@dataclass
class RunningStat:
    """Count/mean/sum-of-squares accumulator with an associative merge."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add_many(self, values) -> "RunningStat":
        values = np.asarray(values, dtype=float).ravel()
        if values.size:
            other = RunningStat(values.size, float(values.mean()), float(np.sum((values - values.mean()) ** 2)))
            self.merge(other)
        return self

    def merge(self, other: "RunningStat") -> "RunningStat":
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / n
        self.m2 += other.m2 + delta * delta * self.count * other.count / n
        self.count = n
        return self

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count else math.nan


@dataclass
class DatasetStats:
    """Per-type Gaussian statistics of knn lengths/angles and bond references.

    ``edge[(r, c)]`` and ``angle[(r, c, r')]`` hold ``(mean, var)`` with the
    variance floored at ``var_floor``; ``ref_bond_len`` and ``ref_angle`` hold
    mean bond lengths and bond angles.  Keys are sorted type indices (for
    triples, the centre type sits in the middle).
    """

    edge: Dict[Tuple[int, int], Tuple[float, float]]
    angle: Dict[Tuple[int, int, int], Tuple[float, float]]
    ref_bond_len: Dict[Tuple[int, int], float]
    ref_angle: Dict[Tuple[int, int, int], float]
    knn_mean: float
    k_used: int
    type_names: Tuple[str, ...] = ()
    var_floor: float = VAR_FLOOR
    counts: Dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        def enc(d, scalar=False):
            return {",".join(map(str, k)): (float(v) if scalar else [float(v[0]), float(v[1])])
                    for k, v in sorted(d.items())}

        return json.dumps({
            "format": STATS_FORMAT,
            "version": STATS_VERSION,
            "k_used": self.k_used,
            "type_names": list(self.type_names),
            "var_floor": self.var_floor,
            "knn_mean": self.knn_mean,
            "edge": enc(self.edge),
            "angle": enc(self.angle),
            "ref_bond_len": enc(self.ref_bond_len, True),
            "ref_angle": enc(self.ref_angle, True),
            "counts": dict(sorted(self.counts.items())),
        }, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetStats":
        raw = json.loads(text)
        if raw.get("format") != STATS_FORMAT:
            raise ValueError("not a dataset statistics file")
        if raw.get("version") != STATS_VERSION:
            raise ValueError(f"unsupported stats version {raw.get('version')}")

        def dec(d, scalar=False):
            return {tuple(int(x) for x in k.split(",")): (float(v) if scalar else (float(v[0]), float(v[1])))
                    for k, v in d.items()}

        return cls(
            edge=dec(raw["edge"]),
            angle=dec(raw["angle"]),
            ref_bond_len=dec(raw["ref_bond_len"], True),
            ref_angle=dec(raw["ref_angle"], True),
            knn_mean=float(raw["knn_mean"]),
            k_used=int(raw["k_used"]),
            type_names=tuple(raw["type_names"]),
            var_floor=float(raw["var_floor"]),
            counts={k: int(v) for k, v in raw.get("counts", {}).items()},
        )

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def effective_k(K: int, m: int) -> int:
    """Neighbour count used for molecules smaller than K + 1 atoms."""
    return max(1, min(K, m - 1))


class StatsAccumulator:
    """Streaming fold behind ``extract_stats``; ``merge`` is associative."""

    def __init__(self, K: int, tables: Optional[AtomTables] = None):
        self.K = K
        self.tables = tables
        self.edge: Dict[tuple, RunningStat] = {}
        self.angle: Dict[tuple, RunningStat] = {}
        self.bond: Dict[tuple, RunningStat] = {}
        self.bond_angle: Dict[tuple, RunningStat] = {}
        self.knn = RunningStat()
        self.items = 0
        self.type_names: Tuple[str, ...] = ()

    @staticmethod
    def _bucket(store, key, values):
        store.setdefault(key, RunningStat()).add_many(values)

    def _pairs(self, store, coords, idx, edges, keyf):
        if not edges:
            return
        e = np.asarray(sorted(edges))
        lens = np.linalg.norm(coords[e[:, 0]] - coords[e[:, 1]], axis=1)
        keys = [keyf(idx[a], idx[b]) for a, b in e]
        for key in sorted(set(keys)):
            self._bucket(store, key, lens[[k == key for k in keys]])

    def _angles(self, store, coords, idx, triples):
        if not triples:
            return
        ang = triple_angles(coords, triples)
        keys = [triple_key(idx[i], idx[j], idx[k]) for i, j, k in triples]
        for key in sorted(set(keys)):
            self._bucket(store, key, ang[[k == key for k in keys]])

    def add(self, item: MarkedPointSet) -> "StatsAccumulator":
        if item.m < 2:
            raise GeometryError("statistics need at least two points per item")
        coords = item.coords
        idx = item.type_index().tolist()
        if item.type_names and not self.type_names:
            self.type_names = item.type_names
        nbrs = knn_graph(coords, effective_k(self.K, item.m))
        edges = knn_edges(nbrs)
        self._pairs(self.edge, coords, idx, edges, pair_key)
        self._angles(self.angle, coords, idx, angle_triples(edges, item.m))
        self.knn.add_many(knn_dists(coords, self.K, nbrs))
        if self.tables is not None and item.k > 0:
            bonds = sorted(infer_bonds(coords, idx, self.tables))
            self._pairs(self.bond, coords, idx, bonds, pair_key)
            self._angles(self.bond_angle, coords, idx, angle_triples(bonds, item.m))
        self.items += 1
        return self

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        for mine, theirs in ((self.edge, other.edge), (self.angle, other.angle),
                             (self.bond, other.bond), (self.bond_angle, other.bond_angle)):
            for key, st in theirs.items():
                mine.setdefault(key, RunningStat()).merge(RunningStat(st.count, st.mean, st.m2))
        self.knn.merge(RunningStat(other.knn.count, other.knn.mean, other.knn.m2))
        self.items += other.items
        self.type_names = self.type_names or other.type_names
        return self

    def finalize(self, var_floor: float = VAR_FLOOR) -> DatasetStats:
        if self.items == 0:
            raise GeometryError("empty dataset")

        def mv(store):
            return {k: (s.mean, max(s.var, var_floor)) for k, s in sorted(store.items())}

        return DatasetStats(
            edge=mv(self.edge),
            angle=mv(self.angle),
            ref_bond_len={k: s.mean for k, s in sorted(self.bond.items())},
            ref_angle={k: s.mean for k, s in sorted(self.bond_angle.items())},
            knn_mean=self.knn.mean,
            k_used=self.K,
            type_names=self.type_names,
            var_floor=var_floor,
            counts={"items": self.items, "points": self.knn.count},
        )


def extract_stats(dataset: Sequence[MarkedPointSet], K: int, tables: Optional[AtomTables] = None,
                  var_floor: float = VAR_FLOOR) -> DatasetStats:
    """Gaussian length/angle statistics over kNN graphs, bond references, and mean knn-dist."""
    if len(dataset) == 0:
        raise GeometryError("empty dataset")
    acc = StatsAccumulator(K, tables)
    for item in dataset:
        acc.add(item)
    return acc.finalize(var_floor)


# ---------------------------------------------------------------------------
# stability


def bond_counts(mol: MarkedPointSet, tables: AtomTables) -> np.ndarray:
    counts = np.zeros(mol.m, dtype=int)
    for i, j in infer_bonds(mol.coords, mol.type_index(), tables):
        counts[i] += 1
        counts[j] += 1
    return counts


def atom_stability(mol: MarkedPointSet, tables: AtomTables) -> float:
    """Fraction of atoms whose inferred bond count equals their valency."""
    ok = bond_counts(mol, tables) == tables.valence(mol.type_index())
    return float(ok.mean())


def molecule_stable(mol: MarkedPointSet, tables: AtomTables) -> bool:
    return atom_stability(mol, tables) == 1.0
