"""
Tests for the latent matching model trainer
"""

import math
import time

import numpy as np
import psutil
import pytest
import scipy.sparse as sp

from conftest import random_cov, random_knowledge, spectrum_cov
from latentmatch.corpus import CrossCovariance
from latentmatch.exceptions import ConfigError, DataError, DivergenceError, NumericalError
from latentmatch.knowledge import KnowledgeMatrix
from latentmatch.parallel import worker_pool
from latentmatch.trainer import (MODEL_MAGIC, MappingPair, Method, Sweep, TrainConfig, TrainReport,
                                 cd_sweep, gd_step, gradient, init_mappings, load_model, objective,
                                 save_model, solve_spd_multi_rhs, system_matrices, train,
                                 write_trace)


def scalar_setup():
    L = MappingPair(np.array([[1.0]]), np.array([[1.0]]))
    C = CrossCovariance.from_dense([[1.0]])
    config = TrainConfig(d=1, theta2=1.0, lambda2=1.0, rho2=1.0, gamma=0.1, sweep=Sweep.JACOBI)
    return L, C, config


def random_mappings(rng, d, d_x, d_y):
    return MappingPair(rng.normal(size=(d, d_x)), rng.normal(size=(d, d_y)))


# ---------------------------------------------------------------------------
# Configuration and initialization
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda2=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(d=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(method="newton")
    assert TrainConfig(method="gd").method is Method.GRADIENT
    assert TrainConfig(method="cd").method is Method.COORDINATE


def test_config_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# run settings\nd = 7\ntheta2=0.5\n\nmethod=gd\ntheta1=0\nsweep=jacobi\n",
                    encoding='utf-8')
    config = TrainConfig.from_file(str(path), seed=3)
    assert config.d == 7
    assert config.theta2 == 0.5
    assert config.method is Method.GRADIENT
    assert config.sweep is Sweep.JACOBI
    assert config.seed == 3


def test_config_file_rejects_l1_and_unknown_keys(tmp_path):
    l1 = tmp_path / "l1.cfg"
    l1.write_text("lambda1=0.2\n", encoding='utf-8')
    with pytest.raises(ConfigError, match="l1"):
        TrainConfig.from_file(str(l1))
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("dimension=5\n", encoding='utf-8')
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_file(str(unknown))


def test_init_is_seeded_and_bounded():
    config = TrainConfig(d=4, seed=9)
    first = init_mappings(config, (5, 6))
    second = init_mappings(config, (5, 6))
    assert np.array_equal(first.Lx, second.Lx)
    assert np.array_equal(first.Ly, second.Ly)
    assert first.Lx.shape == (4, 5) and first.Ly.shape == (4, 6)
    assert np.all(np.abs(first.Lx) <= 0.5) and np.all(np.abs(first.Ly) <= 0.5)


def test_init_warm_start_is_copied():
    rng = np.random.default_rng(0)
    warm = random_mappings(rng, 3, 4, 4)
    start = init_mappings(TrainConfig(d=3), (4, 4), warm)
    assert np.array_equal(start.Lx, warm.Lx)
    start.Lx[0, 0] += 1
    assert start.Lx[0, 0] != warm.Lx[0, 0]
    with pytest.raises(DataError):
        init_mappings(TrainConfig(d=3), (5, 4), warm)
    with pytest.raises(ConfigError):
        init_mappings(TrainConfig(d=0), (4, 4))


# ---------------------------------------------------------------------------
# Objective and gradient
# ---------------------------------------------------------------------------

def test_objective_examples():
    L, C, config = scalar_setup()
    assert objective(L, C, config=config) == pytest.approx(0.5)
    zero = MappingPair(np.zeros((2, 3)), np.zeros((2, 3)))
    assert objective(zero, CrossCovariance.from_dense(np.ones((3, 3))), config=config) == 0.0


def test_knowledge_pair_lowers_objective():
    L = MappingPair(np.array([[1.0, 1.0]]), np.array([[0.0, 0.0]]))
    C = CrossCovariance.from_dense(np.zeros((2, 2)))
    Rx = KnowledgeMatrix(sp.csr_matrix(np.array([[0.0, 0.5], [0.5, 0.0]])), 1)
    config = TrainConfig(d=1, alpha=0.1)
    assert objective(L, C, Rx, None, config) < objective(L, C, None, None, config)


def test_objective_matches_dense_formula():
    rng = np.random.default_rng(4)
    L = random_mappings(rng, 3, 5, 4)
    C = random_cov(rng, 5, 4)
    Rx, Ry = random_knowledge(rng, 5), random_knowledge(rng, 4)
    config = TrainConfig(d=3, theta2=0.3, lambda2=0.2, rho2=0.4, alpha=0.7, beta=0.5)
    Lx, Ly, c = L.Lx, L.Ly, C.toarray()
    expected = (-np.trace(Lx @ c @ Ly.T)
                - 0.35 * np.sum(Rx.toarray() * (Lx.T @ Lx))
                - 0.25 * np.sum(Ry.toarray() * (Ly.T @ Ly))
                + 0.15 * np.sum((Lx.T @ Ly) ** 2)
                + 0.1 * np.sum(Lx ** 2) + 0.2 * np.sum(Ly ** 2))
    assert objective(L, C, Rx, Ry, config) == pytest.approx(expected, rel=1e-9)


def test_objective_rejects_non_finite():
    L = MappingPair(np.array([[np.inf]]), np.array([[1.0]]))
    with pytest.raises(NumericalError):
        objective(L, CrossCovariance.from_dense([[1.0]]), config=TrainConfig(d=1))


def test_gradient_matches_finite_differences():
    h = 1e-5
    for seed in range(25):
        rng = np.random.default_rng(seed)
        d, d_x, d_y = int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        L = random_mappings(rng, d, d_x, d_y)
        C = random_cov(rng, d_x, d_y)
        with_knowledge = seed % 2 == 0
        Rx = random_knowledge(rng, d_x) if with_knowledge else None
        Ry = random_knowledge(rng, d_y) if with_knowledge else None
        config = TrainConfig(d=d, theta2=rng.random(), lambda2=rng.random() + 0.1,
                             rho2=rng.random() + 0.1, alpha=rng.random(), beta=rng.random())
        G_x, G_y = gradient(L, C, Rx, Ry, config)

        numeric_x = np.zeros_like(L.Lx)
        for idx in np.ndindex(*L.Lx.shape):
            plus, minus = L.copy(), L.copy()
            plus.Lx[idx] += h
            minus.Lx[idx] -= h
            numeric_x[idx] = (objective(plus, C, Rx, Ry, config) - objective(minus, C, Rx, Ry, config)) / (2 * h)
        numeric_y = np.zeros_like(L.Ly)
        for idx in np.ndindex(*L.Ly.shape):
            plus, minus = L.copy(), L.copy()
            plus.Ly[idx] += h
            minus.Ly[idx] -= h
            numeric_y[idx] = (objective(plus, C, Rx, Ry, config) - objective(minus, C, Rx, Ry, config)) / (2 * h)

        # the update directions are the negative gradient
        analytic = np.concatenate([-G_x.ravel(), -G_y.ravel()])
        numeric = np.concatenate([numeric_x.ravel(), numeric_y.ravel()])
        scale = max(np.max(np.abs(analytic)), 1.0)
        assert np.max(np.abs(analytic - numeric)) / scale < 1e-4, seed


# ---------------------------------------------------------------------------
# Linear solves
# ---------------------------------------------------------------------------

def test_solve_identity_and_scaling():
    B = np.arange(12.0).reshape(3, 4)
    np.testing.assert_allclose(solve_spd_multi_rhs(np.eye(3), B), B)
    np.testing.assert_allclose(solve_spd_multi_rhs(2 * np.eye(3), np.ones((3, 5))), 0.5 * np.ones((3, 5)))


def test_solve_random_spd_against_inverse():
    rng = np.random.default_rng(8)
    M = rng.normal(size=(8, 8))
    A = M @ M.T + 0.5 * np.eye(8)
    B = rng.normal(size=(8, 30))
    X = solve_spd_multi_rhs(A, B, workers=3, block_size=7)
    assert np.linalg.norm(A @ X - B) / np.linalg.norm(B) < 1e-10
    np.testing.assert_allclose(X, np.linalg.inv(A) @ B, atol=1e-9)


def test_solve_block_layout_does_not_change_results():
    rng = np.random.default_rng(12)
    M = rng.normal(size=(5, 5))
    A = M @ M.T + np.eye(5)
    B = rng.normal(size=(5, 41))
    reference = solve_spd_multi_rhs(A, B, workers=1, block_size=8)
    assert np.array_equal(solve_spd_multi_rhs(A, B, workers=4, block_size=8), reference)


def test_solve_rejects_bad_input():
    with pytest.raises(NumericalError):
        solve_spd_multi_rhs(np.array([[np.nan]]), np.ones((1, 1)))
    with pytest.raises(NumericalError):
        solve_spd_multi_rhs(-np.eye(2), np.ones((2, 1)))


def test_system_matrices_are_positive_definite():
    rng = np.random.default_rng(1)
    L = random_mappings(rng, 4, 6, 6)
    config = TrainConfig(d=4, theta2=0.3, lambda2=0.2, rho2=0.05)
    for A in system_matrices(L, config):
        assert np.min(np.linalg.eigvalsh(A)) >= min(config.lambda2, config.rho2) - 1e-12


# ---------------------------------------------------------------------------
# Coordinate and gradient steps
# ---------------------------------------------------------------------------

def test_cd_scalar_example():
    L, C, config = scalar_setup()
    updated = cd_sweep(L, C, None, None, config)
    assert updated.Lx[0, 0] == pytest.approx(0.5)
    assert updated.Ly[0, 0] == pytest.approx(0.5)


def test_gd_scalar_example():
    L, C, config = scalar_setup()
    updated = gd_step(L, C, None, None, config)
    assert updated.Lx[0, 0] == pytest.approx(0.9)
    assert updated.Ly[0, 0] == pytest.approx(0.9)


def test_gd_zero_step_is_identity():
    rng = np.random.default_rng(2)
    L = random_mappings(rng, 2, 3, 3)
    config = TrainConfig(d=2, gamma=0.0)
    updated = gd_step(L, random_cov(rng, 3, 3), None, None, config)
    assert np.array_equal(updated.Lx, L.Lx) and np.array_equal(updated.Ly, L.Ly)


def test_gd_divergence():
    rng = np.random.default_rng(2)
    L = random_mappings(rng, 2, 3, 3)
    config = TrainConfig(d=2, gamma=1e7, method=Method.GRADIENT)
    with pytest.raises(DivergenceError, match="gamma"):
        gd_step(L, random_cov(rng, 3, 3), None, None, config)


def test_cd_knowledge_enters_right_hand_side():
    Lx = np.array([[1.0, 0.0], [0.0, 2.0]])
    L = MappingPair(Lx, np.zeros((2, 2)))
    C = CrossCovariance.from_dense(np.zeros((2, 2)))
    Rx = KnowledgeMatrix(sp.csr_matrix(np.eye(2)), 1)
    config = TrainConfig(d=2, theta2=0.0, lambda2=0.5, rho2=0.5, alpha=0.2, sweep=Sweep.JACOBI)
    updated = cd_sweep(L, C, Rx, None, config)
    np.testing.assert_allclose(updated.Lx, 0.2 * Lx / 0.5)


def test_power_iteration_identity():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        d, d_x, d_y = 3, 6, 5
        C = random_cov(rng, d_x, d_y)
        config = TrainConfig(d=d, theta2=0.0, lambda2=0.7, rho2=1.3, sweep=Sweep.JACOBI)
        L0 = random_mappings(rng, d, d_x, d_y)
        L2 = cd_sweep(cd_sweep(L0, C, None, None, config), C, None, None, config)
        c = C.toarray()
        expected = L0.Lx @ c @ c.T / (config.lambda2 * config.rho2)
        np.testing.assert_allclose(L2.Lx, expected, atol=1e-10, rtol=0)


def test_gauss_seidel_sweeps_never_increase_objective():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        d, d_x, d_y = int(rng.integers(1, 5)), int(rng.integers(2, 8)), int(rng.integers(2, 8))
        C = random_cov(rng, d_x, d_y)
        config = TrainConfig(d=d, theta2=rng.random(), lambda2=rng.random() + 0.05,
                             rho2=rng.random() + 0.05, sweep=Sweep.GAUSS_SEIDEL)
        L = random_mappings(rng, d, d_x, d_y)
        previous = objective(L, C, config=config)
        for _ in range(10):
            L = cd_sweep(L, C, None, None, config)
            current = objective(L, C, config=config)
            assert current <= previous + 1e-9 * max(1.0, abs(previous)), seed
            previous = current


def test_cd_fixed_point_is_stationary():
    rng = np.random.default_rng(21)
    C = spectrum_cov(rng, [1.0, 0.6, 0.3, 0.02], 8)
    Rx = random_knowledge(rng, 8, density=0.2)
    config = TrainConfig(d=3, theta2=0.1, lambda2=0.1, rho2=0.1, alpha=0.01, seed=4)
    L = init_mappings(config, C.shape)
    for _ in range(3000):
        L = cd_sweep(L, C, Rx, None, config)

    G_x, G_y = gradient(L, C, Rx, None, config)
    assert np.sqrt(np.sum(G_x ** 2) + np.sum(G_y ** 2)) < 1e-6

    before = objective(L, C, Rx, None, config)
    stepped = gd_step(L, C, Rx, None, TrainConfig(d=3, theta2=0.1, lambda2=0.1, rho2=0.1,
                                                  alpha=0.01, gamma=1e-3))
    assert abs(objective(stepped, C, Rx, None, config) - before) < 1e-8


def test_jacobi_fixed_point_is_stationary():
    rng = np.random.default_rng(21)
    C = spectrum_cov(rng, [1.0, 0.6, 0.3, 0.02], 8)
    Rx = random_knowledge(rng, 8, density=0.2)
    config = TrainConfig(d=3, theta2=0.1, lambda2=0.1, rho2=0.1, alpha=0.01, seed=4,
                         sweep=Sweep.JACOBI)
    L = init_mappings(config, C.shape)
    for _ in range(8000):
        L = cd_sweep(L, C, Rx, None, config)
    after = cd_sweep(L, C, Rx, None, config)

    # a Jacobi sweep advances two interleaved alternating chains; consecutive
    # halves of one chain form a stationary pair
    for pair in (MappingPair(L.Lx, after.Ly), MappingPair(after.Lx, L.Ly)):
        G_x, G_y = gradient(pair, C, Rx, None, config)
        assert np.sqrt(np.sum(G_x ** 2) + np.sum(G_y ** 2)) < 1e-6

    two_steps = cd_sweep(after, C, Rx, None, config)
    assert objective(two_steps, C, Rx, None, config) == pytest.approx(
        objective(L, C, Rx, None, config), abs=1e-9)


def test_cd_and_gd_reach_the_same_objective():
    rng = np.random.default_rng(31)
    C = spectrum_cov(rng, [1.0, 0.6, 0.3, 0.02, 0.02, 0.02, 0.02, 0.02], 8)
    cd_config = TrainConfig(d=3, theta2=0.1, lambda2=0.1, rho2=0.1, tol=1e-10, max_iters=5000, seed=1)
    _, cd_report = train(C, config=cd_config)

    gd_config = TrainConfig(d=3, theta2=0.1, lambda2=0.1, rho2=0.1, gamma=0.1, seed=2,
                            method=Method.GRADIENT)
    L = init_mappings(gd_config, C.shape)
    for _ in range(20000):
        L = gd_step(L, C, None, None, gd_config)
    assert objective(L, C, config=gd_config) == pytest.approx(cd_report.objective_trace[-1], abs=1e-6)


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------

def test_huge_tolerance_stops_after_one_iteration():
    rng = np.random.default_rng(0)
    C = random_cov(rng, 4, 4)
    _, report = train(C, config=TrainConfig(d=2, tol=1e9))
    assert report.iterations == 1
    assert report.converged
    assert len(report.objective_trace) == 1
    assert len(report.wall_clock_per_iter) == 1


def test_iteration_limit():
    rng = np.random.default_rng(0)
    C = random_cov(rng, 4, 4)
    _, report = train(C, config=TrainConfig(d=2, tol=0.0, max_iters=7))
    assert report.iterations == 7
    assert not report.converged
    assert report.objective_trace[0] <= report.initial_objective


def _singular_ratio(M):
    s = np.linalg.svd(M, compute_uv=False)
    return s[1] / s[0]


def test_unregularized_matching_collapses_to_rank_one():
    rng = np.random.default_rng(17)
    C = spectrum_cov(rng, [0.3, 0.2, 0.15, 0.12, 0.05], 10)
    # Jacobi sweeps grow the unregularized mappings by sigma_1 / sqrt(lambda2 rho2) = 3 per
    # sweep, which stays finite over 200 sweeps
    degenerate, _ = train(C, config=TrainConfig(d=5, theta2=0.0, lambda2=0.1, rho2=0.1, tol=0.0,
                                                max_iters=200, seed=0, sweep=Sweep.JACOBI))
    assert _singular_ratio(degenerate.Lx) < 1e-3

    regularized, _ = train(C, config=TrainConfig(d=5, theta2=0.1, lambda2=0.1, rho2=0.1, tol=0.0,
                                                 max_iters=200, seed=0, sweep=Sweep.JACOBI))
    assert _singular_ratio(regularized.Lx) > 0.1


@pytest.mark.parametrize("sweep", [Sweep.JACOBI, Sweep.GAUSS_SEIDEL])
def test_unregularized_matching_overflows_on_unscaled_counts(sweep):
    # sigma_1 of a uniform [0, 1) 10x10 matrix is about 5, so every update grows
    # the mappings about sigma_1 / 0.1 = 50 fold and they overflow within 200 sweeps
    rng = np.random.default_rng(17)
    C = CrossCovariance.from_dense(rng.random((10, 10)))
    with pytest.raises(NumericalError):
        train(C, config=TrainConfig(d=5, theta2=0.0, lambda2=0.1, rho2=0.1, tol=0.0,
                                    max_iters=200, seed=0, sweep=sweep))


def _cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_synonym_knowledge_pulls_terms_together():
    # terms A=0, B=1 click only to a'=2 and b'=3 respectively; A and B are declared synonyms
    c = np.zeros((4, 4))
    c[0, 2] = c[1, 3] = 0.5
    C = CrossCovariance.from_dense(c)
    Rx = KnowledgeMatrix(sp.csr_matrix(np.array([[0, 0.5, 0, 0], [0.5, 0, 0, 0],
                                                 [0, 0, 0, 0], [0, 0, 0, 0]])), 1)
    with_knowledge, without = [], []
    for seed in range(10):
        base = dict(d=2, theta2=0.1, lambda2=0.1, rho2=0.1, tol=1e-12, max_iters=3000, seed=seed)
        L, _ = train(C, Rx, None, TrainConfig(alpha=0.1, **base))
        with_knowledge.append(_cosine(L.Lx[:, 0], L.Lx[:, 1]))
        L, _ = train(C, None, None, TrainConfig(alpha=0.0, **base))
        without.append(_cosine(L.Lx[:, 0], L.Lx[:, 1]))
    assert np.mean(with_knowledge) - np.mean(without) >= 0.2
    assert np.mean(with_knowledge) == pytest.approx(0.327, abs=0.02)


def test_warm_start_needs_fewer_iterations():
    ratios = []
    for seed in range(5):
        rng = np.random.default_rng(40 + seed)
        C = spectrum_cov(rng, [1.0, 0.9, 0.8, 0.7, 0.6, 0.3], 30)
        Rx = random_knowledge(rng, 30, density=0.05)
        base = dict(d=5, theta2=0.1, lambda2=0.1, rho2=0.1, seed=seed)
        warm, _ = train(C, config=TrainConfig(tol=1e-10, max_iters=2000, **base))
        knowledge = TrainConfig(alpha=0.001, tol=1e-5, max_iters=2000, **base)
        _, cold_report = train(C, Rx, None, knowledge)
        _, warm_report = train(C, Rx, None, knowledge, warm_start=warm)
        assert cold_report.converged and warm_report.converged
        ratios.append(warm_report.iterations / cold_report.iterations)
    assert np.mean(ratios) <= 0.5


def test_training_is_identical_across_worker_counts(tmp_path):
    rng = np.random.default_rng(6)
    C = random_cov(rng, 23, 19, density=0.3)
    Rx = random_knowledge(rng, 23, density=0.1)
    blobs = []
    for workers in (1, 2, 4):
        config = TrainConfig(d=4, theta2=0.05, alpha=0.05, max_iters=15, tol=0.0, seed=3,
                             workers=workers, block_size=5)
        L, report = train(C, Rx, None, config)
        path = tmp_path / f"model_{workers}.lmm"
        save_model(str(path), L, "vocab.txt")
        blobs.append((path.read_bytes(), report.objective_trace))
    assert blobs[0] == blobs[1] == blobs[2]


@pytest.mark.skipif((psutil.cpu_count(logical=False) or 1) < 4, reason="needs 4 physical cores")
def test_four_workers_speed_up_a_sweep():
    C = CrossCovariance(sp.random(5000, 5000, density=0.02, format='csr', random_state=8))
    seconds = {}
    for workers in (1, 4):
        config = TrainConfig(d=100, workers=workers, block_size=250, seed=0)
        L = init_mappings(config, C.shape)
        best = math.inf
        with worker_pool(workers):
            for _ in range(4):
                started = time.perf_counter()
                L = cd_sweep(L, C, None, None, config)
                best = min(best, time.perf_counter() - started)
        seconds[workers] = best
    assert seconds[4] <= 0.6 * seconds[1], seconds


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def test_model_file_layout(tmp_path):
    rng = np.random.default_rng(0)
    L = random_mappings(rng, 2, 3, 4)
    path = str(tmp_path / "model.lmm")
    save_model(path, L, "/data/corpus/vocab.txt")
    with open(path, 'rb') as f:
        data = f.read()
    assert data[:4] == MODEL_MAGIC
    assert len(data) == 4 + 4 + 24 + 8 * (6 + 8) + 8 + len("/data/corpus/vocab.txt")

    loaded, vocab_path = load_model(path)
    assert vocab_path == "/data/corpus/vocab.txt"
    assert np.array_equal(loaded.Lx, L.Lx) and np.array_equal(loaded.Ly, L.Ly)


def test_model_file_truncated(tmp_path):
    path = tmp_path / "model.lmm"
    save_model(str(path), MappingPair(np.ones((2, 2)), np.ones((2, 2))), "v")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataError):
        load_model(str(path))


def test_write_trace(tmp_path):
    report = TrainReport(objective_trace=[-1.5, -1.75], wall_clock_per_iter=[0.01, 0.02],
                         iterations=2, initial_objective=0.25)
    path = tmp_path / "trace.csv"
    write_trace(str(path), report, header="config_hash=abc")
    lines = path.read_text(encoding='utf-8').splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "iteration,objective,seconds"
    assert lines[2].startswith("0,0.25,")
    assert lines[4].startswith("2,-1.75,")
