import itertools
import logging
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from priorbridge.energies import (EnergyForce, SingularityError, amber_energy, energy_grad, fd_gradient, knn_energy,
                                  riesz_energy, stat_energy)
from priorbridge.geometry import DatasetStats, MarkedPointSet, angle, extract_stats, infer_bonds, load_tables

NAMES = ("A", "B", "X")


def tables():
    return load_tables(types=NAMES)


def cloud(x):
    return MarkedPointSet(np.asarray(x, dtype=float))


def manual_stats(edge=None, angle=None, bond=None, bond_angle=None, knn=1.0, K=1):
    return DatasetStats(edge or {}, angle or {}, bond or {}, bond_angle or {}, knn, K)


# ---------------------------------------------------------------------------
# values


def test_riesz_examples():
    assert riesz_energy(cloud([[0, 0, 0], [1, 0, 0]])) == 1.0
    assert riesz_energy(cloud([[0, 0, 0], [2, 0, 0]])) == 0.25


def test_riesz_cube_double_loop():
    cube = np.array(list(itertools.product([0.0, 2.0], repeat=3)))
    brute = 0.5 * sum(1.0 / np.sum((cube[i] - cube[j]) ** 2) for i in range(8) for j in range(8) if i != j)
    assert riesz_energy(cloud(cube)) == pytest.approx(brute, rel=1e-14)


def test_riesz_singular():
    with pytest.raises(SingularityError):
        riesz_energy(cloud([[0, 0, 0], [0, 0, 1e-9]]))


def typed(coords, idx):
    return MarkedPointSet(np.asarray(coords, dtype=float), np.eye(3)[idx], NAMES)


def amber_force(mask, stats=None):
    t = tables()
    return EnergyForce("amber", stats or manual_stats(), t, term_mask=mask)


def test_lj_at_sigma_is_minus_one():
    sigma = tables().lj_sigma
    x = typed([[0, 0, 0], [sigma, 0, 0]], [0, 0])
    assert amber_energy(x, amber_force({"lj"})) == pytest.approx(-1.0, abs=1e-15)


def test_lj_lower_bound():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = typed(rng.uniform(-2, 2, (6, 3)), [0] * 6)
        assert amber_energy(x, amber_force({"lj"})) >= -15.0


def test_coulomb_unit_charges():
    x = typed([[0, 0, 0], [1, 0, 0]], [0, 0])
    assert amber_energy(x, amber_force({"coulomb"})) == pytest.approx(1.0, abs=1e-15)


def triangle(side=1.0):
    h = side * math.sqrt(3) / 2
    return np.array([[0, 0, 0], [side, 0, 0], [side / 2, h, 0]])


def test_amber_bond_angle_zero_at_reference():
    x = typed(triangle(), [1, 1, 1])
    stats = extract_stats([x], K=2, tables=tables())
    assert len(infer_bonds(x.coords, x.type_index(), tables())) == 3
    ef = EnergyForce("amber", stats, tables(), K=2, term_mask={"bond", "angle"})
    assert amber_energy(x, ef) == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(energy_grad(x, ef), 0.0, atol=1e-12)


def test_stat_energy_zero_at_means():
    x = typed(triangle(1.3), [0, 0, 0])
    stats = extract_stats([x], K=2)
    ef = EnergyForce("statistical", stats, K=2)
    assert stat_energy(x, ef) == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(energy_grad(x, ef), 0.0, atol=1e-9)


def test_stat_energy_single_edge():
    delta, v = 0.3, 0.05
    stats = manual_stats(edge={(0, 0): (1.0, v)})
    x = typed([[0, 0, 0], [1.0 + delta, 0, 0]], [0, 0])
    ef = EnergyForce("statistical", stats, K=1)
    assert stat_energy(x, ef) == pytest.approx(delta**2 / v, rel=1e-13)


def brute_stat_energy(x, stats, K):
    coords, idx = x.coords, x.type_index()
    m = x.m
    k = max(1, min(K, m - 1))
    order = [sorted(range(m), key=lambda j: (np.sum((coords[i] - coords[j]) ** 2), j)) for i in range(m)]
    nbrs = [[j for j in order[i] if j != i][:k] for i in range(m)]
    edges = {(min(i, j), max(i, j)) for i in range(m) for j in nbrs[i]}
    e = 0.0
    for i, j in edges:
        key = tuple(sorted((idx[i], idx[j])))
        if key in stats.edge:
            mu, var = stats.edge[key]
            e += (np.linalg.norm(coords[i] - coords[j]) - mu) ** 2 / var
    for j in range(m):
        adj = sorted({a for a, b in edges if b == j} | {b for a, b in edges if a == j})
        for i, k2 in itertools.combinations(adj, 2):
            key = (min(idx[i], idx[k2]), idx[j], max(idx[i], idx[k2]))
            if key in stats.angle:
                mu, var = stats.angle[key]
                e += (angle(coords[i], coords[j], coords[k2]) - mu) ** 2 / var
    return e


def test_stat_energy_brute_force():
    rng = np.random.default_rng(1)
    train = [typed(rng.standard_normal((10, 3)), rng.integers(0, 3, 10)) for _ in range(30)]
    stats = extract_stats(train, K=4)
    ef = EnergyForce("statistical", stats, K=4)
    for _ in range(5):
        x = typed(rng.standard_normal((10, 3)), rng.integers(0, 3, 10))
        assert stat_energy(x, ef) == pytest.approx(brute_stat_energy(x, stats, 4), rel=1e-10)


def test_absent_keys_contribute_zero(caplog):
    stats = manual_stats(edge={(1, 1): (1.0, 1.0)})
    ef = EnergyForce("statistical", stats, K=1)
    x = typed([[0, 0, 0], [2.0, 0, 0]], [0, 0])
    with caplog.at_level(logging.WARNING):
        assert ef.energy(x) == 0.0
        ef.energy(x)
    assert sum("no length statistics" in r.message for r in caplog.records) == 1


def grid_cloud(n=4, h=1.0):
    return np.array(list(itertools.product(range(n), repeat=3)), dtype=float) * h


def test_knn_energy_zero_on_uniform_ring():
    ang = 2 * math.pi * np.arange(12) / 12
    ring = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(12)])
    # every point has the same two nearest neighbours at the same distance
    stats = extract_stats([cloud(ring)], K=2)
    assert knn_energy(cloud(ring), EnergyForce("knn_uniform", stats, K=2)) == pytest.approx(0.0, abs=1e-25)


def test_knn_energy_outlier_monotone():
    rng = np.random.default_rng(2)
    base = rng.standard_normal((20, 3))
    stats = extract_stats([cloud(base)], K=4)
    ef = EnergyForce("knn_uniform", stats, K=4)
    vals = []
    for r in (3.0, 5.0, 8.0, 12.0):
        x = base.copy()
        x[0] = [r, 0, 0]
        vals.append(knn_energy(cloud(x), ef))
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_knn_energy_brute_force():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((64, 3))
    stats = manual_stats(knn=0.4, K=4)
    ef = EnergyForce("knn_uniform", stats, K=4)
    e = 0.0
    for i in range(64):
        d = sorted(float(np.sum((x[i] - x[j]) ** 2)) for j in range(64) if j != i)
        e += (np.mean(d[:4]) - 0.4) ** 2
    assert knn_energy(cloud(x), ef) == pytest.approx(e, rel=1e-12)


def test_knn_energy_needs_k_below_m():
    stats = manual_stats(knn=1.0, K=4)
    with pytest.raises(Exception):
        knn_energy(cloud(np.eye(3)), EnergyForce("knn_uniform", stats, K=4))


# ---------------------------------------------------------------------------
# gradients


def test_riesz_two_point_gradient():
    g = energy_grad(cloud([[0, 0, 0], [1, 0, 0]]), EnergyForce("riesz"))
    assert np.allclose(g, [[2, 0, 0], [-2, 0, 0]], atol=1e-14)


def energy_zoo(rng):
    t = tables()
    train = [typed(rng.uniform(-1.5, 1.5, (8, 3)), rng.integers(0, 3, 8)) for _ in range(20)]
    stats = extract_stats(train, K=3, tables=t)
    return {
        "amber": EnergyForce("amber", stats, t, K=3),
        "statistical": EnergyForce("statistical", stats, K=3),
        "riesz": EnergyForce("riesz"),
        "knn_uniform": EnergyForce("knn_uniform", stats, K=3),
    }


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.mark.parametrize("kind", ["amber", "statistical", "riesz", "knn_uniform"])
def test_gradient_matches_fd(kind):
    rng = np.random.default_rng(4)
    ef = energy_zoo(rng)[kind]
    for _ in range(5):
        x = typed(rng.uniform(-1.5, 1.5, (8, 3)), rng.integers(0, 3, 8))
        assert rel_err(energy_grad(x, ef), fd_gradient(x, ef, 1e-5)) <= 1e-5


@pytest.mark.parametrize("kind", ["amber", "statistical", "riesz", "knn_uniform"])
def test_invariances(kind):
    rng = np.random.default_rng(5)
    ef = energy_zoo(rng)[kind]
    x = typed(rng.uniform(-1.5, 1.5, (8, 3)), rng.integers(0, 3, 8))
    e = ef.energy(x)
    R = Rotation.random(random_state=6).as_matrix()
    moved = MarkedPointSet(x.coords @ R.T + np.array([0.7, -2.0, 1.1]), x.types, NAMES)
    perm = rng.permutation(8)
    scale = max(1.0, abs(e))
    assert abs(ef.energy(moved) - e) <= 1e-10 * scale
    assert abs(ef.energy(x.permuted(perm)) - e) <= 1e-10 * scale
    g = ef.grad(x)
    assert np.allclose(g.sum(axis=0), 0.0, atol=1e-10 * max(1.0, np.abs(g).max()))


def test_quadratic_fd_exact_and_h_sweep():
    # one edge, no angles: E = (d - 1)^2 / v is smooth, so fd error falls with h until roundoff
    stats = manual_stats(edge={(0, 0): (1.0, 0.5)})
    ef = EnergyForce("statistical", stats, K=1)
    x = typed([[0, 0, 0], [1.7, 0.2, -0.1]], [0, 0])
    g = energy_grad(x, ef)
    errs = [rel_err(fd_gradient(x, ef, h), g) for h in (1e-2, 1e-3, 1e-4, 1e-5)]
    assert errs[1] < errs[0] and errs[2] < errs[1]
    assert errs[-1] < 1e-8
    with pytest.raises(ValueError):
        fd_gradient(x, ef, 0.0)


def test_force_call_clips_and_leaves_types():
    ef = EnergyForce("riesz", clip=5.0)
    state = np.array([[[0, 0, 0, 1.0], [0.1, 0, 0, 1.0], [3, 0, 0, 1.0]]])
    f = ef(state)
    assert f.shape == state.shape
    assert np.all(f[..., 3] == 0.0)
    assert np.all(np.linalg.norm(f[0, :, :3], axis=1) <= 5.0 + 1e-12)


def test_batched_knn_force_matches_per_item():
    rng = np.random.default_rng(9)
    stats = manual_stats(knn=0.5, K=3)
    ef = EnergyForce("knn_uniform", stats, K=3, clip=4.0)
    states = rng.standard_normal((6, 12, 3))
    states[0, 1] = states[0, 0] + 1e-3
    batched = ef(states)
    for b in range(6):
        g = -ef.grad(cloud(states[b]))
        g *= np.minimum(1.0, 4.0 / np.linalg.norm(g, axis=1, keepdims=True))
        assert np.allclose(batched[b], g, rtol=1e-12, atol=1e-14)


def test_weight_scales_energy():
    x = cloud([[0, 0, 0], [1, 0, 0]])
    assert EnergyForce("riesz", weight=3.0).energy(x) == pytest.approx(3.0)


def test_config_errors():
    with pytest.raises(ValueError):
        EnergyForce("torsion")
    with pytest.raises(ValueError):
        EnergyForce("knn_uniform")
    with pytest.raises(ValueError):
        EnergyForce("amber", manual_stats())
    with pytest.raises(ValueError):
        EnergyForce("riesz", term_mask={"dihedral"})
