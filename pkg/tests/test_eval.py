import itertools
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from priorbridge.eval import (MetricError, chamfer, emd, evaluate, fingerprint, initial_states, mmd_cov,
                              sample_model, uniformity_stats, uniqueness)
from priorbridge.geometry import MarkedPointSet, load_tables
from priorbridge.model import TrainConfig, make_model
from priorbridge.nn import SetNet


def brute_chamfer(a, b):
    ab = np.mean([min(np.sum((p - q) ** 2) for q in b) for p in a])
    ba = np.mean([min(np.sum((p - q) ** 2) for q in a) for p in b])
    return ab + ba


def brute_emd(a, b):
    best = math.inf
    for perm in itertools.permutations(range(len(b))):
        best = min(best, np.mean([np.linalg.norm(a[i] - b[j]) for i, j in enumerate(perm)]))
    return best


def test_chamfer_double_loop():
    rng = np.random.default_rng(0)
    for m, n in ((5, 7), (10, 10), (1, 4)):
        a, b = rng.standard_normal((m, 3)), rng.standard_normal((n, 3))
        assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12)
    assert chamfer(a, a) == 0.0


def test_emd_exhaustive_permutations():
    rng = np.random.default_rng(1)
    for _ in range(3):
        a, b = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
        assert emd(a, b) == pytest.approx(brute_emd(a, b), rel=1e-12)


def test_emd_unequal_sizes_seeded():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((12, 3)), rng.standard_normal((9, 3))
    assert emd(a, b, seed=4) == emd(a, b, seed=4)
    assert emd(a, b) >= 0.0
    with pytest.raises(MetricError):
        emd(np.zeros((0, 3)), b)


def test_emd_size_limit():
    x = np.zeros((513, 3))
    with pytest.raises(MetricError):
        emd(x, x)


def brute_mmd_cov(gen, ref):
    D = [[chamfer(g, r) for r in ref] for g in gen]
    mmd = np.mean([min(D[i][j] for i in range(len(gen))) for j in range(len(ref))])
    covered = {min(range(len(ref)), key=lambda j: D[i][j]) for i in range(len(gen))}
    return mmd, len(covered) / len(ref)


def test_mmd_cov_brute_force():
    rng = np.random.default_rng(3)
    gen = [rng.standard_normal((6, 3)) for _ in range(5)]
    ref = [rng.standard_normal((6, 3)) for _ in range(5)]
    mmd, cov = mmd_cov(gen, ref)
    bm, bc = brute_mmd_cov(gen, ref)
    assert mmd == pytest.approx(bm, rel=1e-12) and cov == bc


def test_mmd_cov_identical_sets():
    rng = np.random.default_rng(4)
    X = [rng.standard_normal((10, 3)) for _ in range(6)]
    assert mmd_cov(X, X, "cd") == (0.0, 1.0)
    assert mmd_cov(X, X, "emd") == (0.0, 1.0)


def test_mmd_cov_empty():
    with pytest.raises(MetricError):
        mmd_cov([], [np.zeros((2, 3))])


def test_uniformity_grid_and_outlier():
    grid = np.array(list(itertools.product(range(5), repeat=2)), dtype=float)
    # every point of a regular ring sees the same two neighbours
    ang = 2 * math.pi * np.arange(16) / 16
    ring = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(16)])
    mean, var = uniformity_stats(ring, K=2)
    assert var == pytest.approx(0.0, abs=1e-28)
    assert mean == pytest.approx(4 * math.sin(math.pi / 16) ** 2, rel=1e-12)
    g3 = np.column_stack([grid, np.zeros(25)])
    base = uniformity_stats(g3, K=4)[1]
    moved = g3.copy()
    moved[0] = [-6.0, -6.0, 0.0]
    assert uniformity_stats(moved, K=4)[1] > base


def tables():
    return load_tables(types=("H", "C", "O"))


def water(R=None, shift=(0.0, 0.0, 0.0)):
    x = np.array([[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]])
    if R is not None:
        x = x @ R.T
    return MarkedPointSet(x + np.asarray(shift), np.eye(3)[[2, 0, 0]], ("H", "C", "O"))


def test_fingerprint_rigid_invariant():
    t = tables()
    R = Rotation.random(random_state=0).as_matrix()
    assert fingerprint(water(), t) == fingerprint(water(R, (3.0, -1.0, 2.0)), t)
    perm = water().permuted(np.array([2, 0, 1]))
    assert fingerprint(perm, t) == fingerprint(water(), t)


def test_uniqueness():
    t = tables()
    apart = MarkedPointSet(np.array([[0, 0, 0], [5.0, 0, 0], [0, 5.0, 0]]), np.eye(3)[[2, 0, 0]], ("H", "C", "O"))
    assert uniqueness([water(), water()], t) == 0.5
    assert uniqueness([water(), apart], t) == 1.0
    with pytest.raises(MetricError):
        uniqueness([], t)


def test_evaluate_report():
    rng = np.random.default_rng(5)
    X = [MarkedPointSet(rng.standard_normal((8, 3))) for _ in range(4)]
    rep = evaluate(X, X)
    assert rep.mmd_cd == 0.0 and rep.cov_cd == 1.0 and rep.mmd_emd == 0.0
    assert rep.knn_dist_var == pytest.approx(np.mean([uniformity_stats(x)[1] for x in X]))
    assert rep.atom_stability is None
    assert "mmd_cd" in rep.table() and '"cov_cd": 1.0' in rep.to_json()
    with pytest.raises(MetricError):
        evaluate([])


def zero_model(alpha=0.0):
    cfg = TrainConfig(hidden=8, temb_dim=8, energy="riesz")
    arch = make_model(cfg, 3).arch
    return make_model(cfg, 3, params=np.zeros(SetNet.n_params(arch)), alpha=alpha)


def test_sampling_deterministic_and_seeded():
    m = zero_model()
    a = sample_model(m, 3, 5, 10, seed=7)
    b = sample_model(m, 3, 5, 10, seed=7)
    c = sample_model(m, 3, 5, 10, seed=8)
    for x, y in zip(a.items, b.items):
        assert np.array_equal(x.coords, y.coords)
    assert not np.array_equal(a.items[0].coords, c.items[0].coords)


def test_sampling_independent_of_batch_size():
    m = zero_model()
    a = sample_model(m, 5, 4, 6, seed=1, batch=2)
    b = sample_model(m, 5, 4, 6, seed=1)
    for x, y in zip(a.items, b.items):
        assert np.array_equal(x.coords, y.coords)


def test_one_step_zero_net_returns_initial_draws():
    # zero drift and a noise-free final step: samples are the (centred) draws from N(0, beta_T I)
    m = zero_model()
    out = sample_model(m, 50, 10, 1, seed=3)
    z0 = initial_states(50, 10, 3, m.schedule.beta_T, 3)
    for item, z in zip(out.items, z0):
        assert np.array_equal(item.coords, z - z.mean(axis=0))
    pts = np.concatenate([x.coords for x in out.items])
    assert np.var(pts) == pytest.approx(m.schedule.beta_T * 0.9, rel=0.1)


def test_trajectories_kept():
    out = sample_model(zero_model(), 2, 4, 5, seed=0, keep_trajectories=True)
    assert out.trajectories.shape == (2, 6, 4, 3)
    assert np.allclose(out.trajectories[0, 0], initial_states(1, 4, 3, 1.0, 0)[0])
    assert np.allclose(out.items[1].coords, out.trajectories[1, -1] - out.trajectories[1, -1].mean(axis=0))
