import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from perturbmc import densities as de
from perturbmc import finite_oracle as fo
from perturbmc import samplers as sm
from perturbmc.errors import NonReversibleError, QuadratureError, ReducibleChainError, SizeLimitError


def second_eigen_modulus(P):
    ev = np.sort(np.abs(np.linalg.eigvals(P)))[::-1]
    return ev[1]


# -- stationary ---------------------------------------------------------------


def test_stationary_doubly_stochastic_is_uniform(rng):
    W = rng.random((6, 6))
    W = W + W.T
    # Sinkhorn to a symmetric doubly stochastic matrix
    for _ in range(500):
        W /= W.sum(axis=1, keepdims=True)
        W = 0.5 * (W + W.T)
    W /= W.sum(axis=1, keepdims=True)
    assert np.allclose(fo.stationary(W), 1 / 6, atol=1e-10)


def test_stationary_two_state():
    assert np.allclose(fo.stationary(fo.two_state_chain(0.2, 0.4)), [2 / 3, 1 / 3], atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_stationary_recovers_constructed_pi(seed):
    c = fo.random_reversible_chain(30, np.random.default_rng(seed))
    pi = fo.stationary(c.P)
    assert np.abs(pi - c.pi).max() <= 1e-10
    assert np.abs(pi @ c.P - pi).sum() <= 1e-10


def test_stationary_reducible():
    with pytest.raises(ReducibleChainError):
        fo.stationary(np.eye(3))


def test_finite_chain_validation():
    with pytest.raises(ValueError):
        fo.FiniteChain(np.array([[0.5, 0.4], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        fo.FiniteChain(np.array([[1.2, -0.2], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        fo.FiniteChain(np.array([[0.8, 0.2], [0.4, 0.6]]), pi=np.array([0.5, 0.5]))


def test_size_limit():
    with pytest.raises(SizeLimitError):
        fo.stationary(np.full((2001, 2001), 1 / 2001))


# -- spectral gap ---------------------------------------------------------------


def test_gap_independent_chain():
    assert fo.spectral_gap(fo.independent_chain([0.1, 0.2, 0.7])).kappa == pytest.approx(1.0, abs=1e-12)


def test_gap_two_state():
    assert fo.spectral_gap(fo.two_state_chain(0.2, 0.4)).kappa == pytest.approx(0.84, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gap_rayleigh_oracle(seed):
    g = np.random.default_rng(seed)
    c = fo.random_reversible_chain(20, g)
    P, pi = c.P, c.pi
    kappa = fo.spectral_gap(c).kappa

    def quotient(f):
        f = f - pi @ f
        Pf = P @ f
        return fo.pi_norm(Pf, pi) ** 2 / fo.pi_norm(f, pi) ** 2

    # every Rayleigh quotient of P^2 on mean-zero f lies below 1 - kappa
    F = g.standard_normal((10_000, 20))
    best = max(quotient(f) for f in F)
    assert 1 - best >= kappa - 1e-12
    # power iteration on P^2 from the best random f climbs to the sup
    f = F[int(np.argmax([quotient(f) for f in F[:100]]))]
    for _ in range(5000):
        f = P @ (P @ (f - pi @ f))
        f /= fo.pi_norm(f, pi)
    assert -1e-12 <= (1 - quotient(f)) - kappa <= 1e-3


def test_gap_nonreversible():
    P = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]) * 0.5 + np.eye(3) * 0.5
    with pytest.raises(NonReversibleError):
        fo.spectral_gap(P)


@pytest.mark.parametrize("seed", range(5))
def test_eigenreality_and_gap_range(seed):
    c = fo.random_reversible_chain(15, np.random.default_rng(seed), spread=2.0)
    rep = fo.spectral_gap(c)
    assert 0 <= rep.kappa <= 1 and rep.reversibility_residual >= 0
    ev = np.linalg.eigvals(fo.symmetrized(c.P, c.pi))
    assert np.max(np.abs(ev.imag)) <= 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_gap_definition_and_contraction(seed):
    g = np.random.default_rng(seed)
    c = fo.random_reversible_chain(25, g)
    P, pi = c.P, c.pi
    kappa = fo.spectral_gap(c).kappa
    for _ in range(100):
        f = g.standard_normal(25)
        fc = f - pi @ f
        lhs = fo.pi_norm(P @ f - pi @ f, pi) ** 2
        assert lhs <= (1 - kappa) * fo.pi_norm(fc, pi) ** 2 + 1e-9
        assert fo.pi_norm(P @ f, pi) <= fo.pi_norm(f, pi) + 1e-10


# -- distances --------------------------------------------------------------------


def test_op_norm_examples(rng):
    c = fo.random_reversible_chain(8, rng)
    assert fo.op_norm_diff(c.P, c.P, c.pi) == 0.0
    with pytest.raises(ValueError):
        fo.op_norm_diff(c.P, c.P[:7, :7], c.pi)


def test_op_norm_two_state_brute_force():
    P = np.array([[0.7, 0.3], [0.4, 0.6]])
    d = 0.15
    Phat = P + np.array([[d, -d], [0.0, 0.0]])
    pi = np.array([0.5, 0.5])
    t = np.linspace(0, 2 * math.pi, 1_000_001)
    # unit pi-norm f = (cos t, sin t) / sqrt(pi_i)
    F = np.stack([np.cos(t) / math.sqrt(0.5), np.sin(t) / math.sqrt(0.5)])
    G = (P - Phat) @ F
    brute = np.sqrt(0.5 * G[0] ** 2 + 0.5 * G[1] ** 2).max()
    assert fo.op_norm_diff(P, Phat, pi) == pytest.approx(brute, abs=1e-6)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_op_norm_at_most_two(seed):
    g = np.random.default_rng(seed)
    pi = g.dirichlet(np.ones(6))
    R = fo.random_symmetric_proposal(6, g)
    R2 = fo.random_symmetric_proposal(6, g)
    P = fo.metropolis_matrix(R, np.log(pi))
    Phat = fo.metropolis_matrix(R2, np.log(pi))
    assert fo.op_norm_diff(P, Phat, pi) <= 2 + 1e-12


def test_vnorm_and_tv_examples():
    assert fo.tv_dist([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert fo.tv_dist([1, 0], [0, 1]) == 2.0
    assert fo.v_norm_dist([0.7, 0.3], [0.5, 0.5], [2, 3]) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        fo.v_norm_dist([1, 0], [0, 1, 0], [1, 1])
    with pytest.raises(ValueError):
        fo.v_norm_dist([1, 0], [0, 1], [0.5, 1])


def test_chi2_examples():
    assert fo.chi2_div([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert fo.chi2_div([0.6, 0.4], [0.5, 0.5]) == pytest.approx(0.04, abs=1e-15)
    assert fo.chi2_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ZeroDivisionError):
        fo.chi2_div([0.5, 0.5], [1.0, 0.0])


@given(st.integers(0, 10_000))
def test_chi2_matches_definition(seed):
    g = np.random.default_rng(seed)
    nu, mu = g.dirichlet(np.ones(5)), g.dirichlet(np.ones(5))
    assert fo.chi2_div(nu, mu) == pytest.approx(np.sum(nu ** 2 / mu) - 1, abs=1e-10)


def test_kernel_distances(rng):
    c = fo.random_reversible_chain(5, rng)
    d = fo.random_reversible_chain(5, rng)
    V = 1 + rng.random(5)
    brute_tv = max(fo.tv_dist(c.P[i], d.P[i]) for i in range(5))
    brute_v = max(fo.v_norm_dist(c.P[i], d.P[i], V) / V[i] for i in range(5))
    assert fo.tv_kernel(c.P, d.P) == pytest.approx(brute_tv, abs=1e-15)
    assert fo.v_norm_kernel(c.P, d.P, V) == pytest.approx(brute_v, abs=1e-15)


# -- discretization -------------------------------------------------------------------


def test_discretize_uniform_reversible():
    c = fo.discretize_kernel(sm.random_walk(de.uniform_box([0.0], [1.0]), 0.01), np.linspace(0, 1, 201))
    assert fo.reversibility_residual(c.P, np.full(201, 1 / 201)) <= 1e-8


def test_discretize_truncated_gaussian_and_refinement():
    t = de.truncated_gaussian([-4.0], [4.0], 0.0, 1.0)
    k = sm.random_walk(t, 0.5)
    grid = np.linspace(-4, 4, 201)
    c = fo.discretize_kernel(k, grid)
    w = np.exp(-0.5 * grid ** 2)
    assert np.abs(fo.stationary(c.P) - w / w.sum()).sum() <= 1e-3
    fine = fo.discretize_kernel(k, np.linspace(-4, 4, 401))
    k1, k2 = fo.spectral_gap(c).kappa, fo.spectral_gap(fine).kappa
    assert abs(k2 - k1) / k1 < 0.05


def test_discretize_mala_reversible():
    t = de.truncated_gaussian([-4.0], [4.0], 0.0, 1.0)
    c = fo.discretize_kernel(sm.langevin(t, 0.3), np.linspace(-4, 4, 121))
    assert fo.reversibility_residual(c.P, c.pi) <= 1e-12


def test_discretize_coarse_grid_error():
    t = de.uniform_box([0.0, 0.0], [20.0, 20.0])
    a = np.linspace(0, 20, 21)
    k = sm.random_walk(t, 1.0, precond=np.array([[1.0, 0.99], [0.99, 1.0]]))
    with pytest.raises(QuadratureError):
        fo.discretize_kernel(k, [a, a])


def test_discretize_grid_validation():
    k = sm.random_walk(de.uniform_box([0.0], [1.0]), 0.1)
    with pytest.raises(ValueError):
        fo.discretize_kernel(k, np.array([0.0, 0.1, 0.5]))


# -- Lyapunov and ergodicity --------------------------------------------------------


def test_lyapunov_examples(rng):
    c = fo.random_reversible_chain(6, rng)
    assert fo.lyapunov_fit(c, np.ones(6)) == (0.0, 1.0)
    pi = np.array([0.2, 0.3, 0.5])
    V = np.array([1.0, 4.0, 9.0])
    lam, L = fo.lyapunov_fit(fo.independent_chain(pi), V)
    assert lam == 0.0 and L == pytest.approx(pi @ V)


def test_lyapunov_two_state_exhaustive():
    c = fo.two_state_chain(0.2, 0.4)
    V = np.array([1.0, 2.0])
    lam, L = fo.lyapunov_fit(c, V)
    PV = c.P @ V
    assert np.all(PV <= lam * V + L + 1e-15)
    # minimality: any smaller lam violates one of the two states
    assert np.any(PV > (lam - 1e-9) * V + L) or lam == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_drift_transfer_property(seed):
    g = np.random.default_rng(seed)
    n = 12
    R = fo.random_symmetric_proposal(n, g)
    lp = g.standard_normal(n)
    P = fo.metropolis_matrix(R, lp)
    Phat = fo.metropolis_matrix(R, lp + 0.05 * g.standard_normal(n))
    V = 1 + 5 * g.random(n)
    lam, L = fo.lyapunov_fit(P, V)
    eps = fo.v_norm_kernel(P, Phat, V) * V.max() / V.min()
    lam_hat, _ = fo.lyapunov_fit(Phat, V, L=L)
    assert lam_hat <= lam + eps + 1e-9


def test_ergodicity_examples():
    assert fo.ergodicity_rate(fo.independent_chain([0.2, 0.8]), np.ones(2)).rate == 0.0
    fit = fo.ergodicity_rate(fo.two_state_chain(0.1, 0.1), np.ones(2))
    assert fit.rate == pytest.approx(0.8, abs=1e-3)


@pytest.mark.parametrize("seed", range(3))
def test_ergodicity_rate_matches_eigenvalue(seed):
    c = fo.random_reversible_chain(20, np.random.default_rng(seed))
    fit = fo.ergodicity_rate(c, np.ones(20), n_max=200)
    assert fit.rate == pytest.approx(second_eigen_modulus(c.P), abs=1e-2)


@pytest.mark.parametrize("seed", range(3))
def test_geometric_bound(seed):
    g = np.random.default_rng(seed)
    c = fo.random_reversible_chain(10, g)
    P, pi = c.P, c.pi
    one_minus = 1 - fo.spectral_gap(c).kappa
    nu = g.dirichlet(np.ones(10))
    chi = fo.chi2_div(nu, pi)
    for _ in range(20):
        f = g.uniform(-1, 1, 10)
        var = pi @ f ** 2 - (pi @ f) ** 2
        mu = nu.copy()
        for n in range(1, 51):
            mu = mu @ P
            assert (mu @ f - pi @ f) ** 2 <= one_minus ** n * var * (chi + 1) + 1e-15


# -- parallel tempering ------------------------------------------------------------


def test_pt_product_identical_levels():
    pi = np.array([0.2, 0.3, 0.5])
    M = fo.metropolis_matrix(np.full((3, 3), 1 / 3), np.log(pi))
    prod = fo.pt_product_kernel([M, M], [pi, pi])
    assert np.abs(prod.pi @ prod.P - prod.pi).sum() <= 1e-12
    # all swap probabilities are 1: Q is the pure coordinate exchange
    Q = fo.swap_kernel([pi, pi], 0)
    perm = np.array([0, 3, 6, 1, 4, 7, 2, 5, 8])
    assert np.array_equal(Q, np.eye(9)[perm])


@pytest.mark.parametrize("seed", range(3))
def test_pt_product_stationary(seed):
    g = np.random.default_rng(seed)
    pis = [g.dirichlet(np.ones(3)) for _ in range(2)]
    Ms = [fo.metropolis_matrix(fo.random_symmetric_proposal(3, g), np.log(p)) for p in pis]
    prod = fo.pt_product_kernel(Ms, pis)
    assert np.allclose(fo.stationary(prod.P), np.kron(pis[0], pis[1]), atol=1e-10)


def test_pt_product_size_limit():
    pis = [np.full(22, 1 / 22)] * 3
    with pytest.raises(SizeLimitError):
        fo.pt_product_kernel([np.full((22, 22), 1 / 22)] * 3, pis)


def test_pt_product_matches_simulation_k2():
    g = np.random.default_rng(3)
    pis = [g.dirichlet(2 * np.ones(3)) for _ in range(3)]
    Ms = [fo.metropolis_matrix(fo.random_symmetric_proposal(3, g), np.log(p)) for p in pis]
    exact = fo.pt_product_kernel(Ms, pis).P
    targets = [sm.discrete_target(p) for p in pis]
    cfg = sm.PTConfig(targets, [(sm.DiscreteKernel(M, t), 1) for M, t in zip(Ms, targets)])
    state = sm.PTState.initial(cfg, [np.zeros(1)] * 3)
    streams = sm.PTStreams.from_seed(21, 2)
    counts = np.zeros((27, 27))
    prev = 0
    for _ in range(100_000):
        state, _ = sm.pt_step(cfg, state, streams)
        cur = int(np.ravel_multi_index(tuple(int(v) for v in state.replicas[:, 0]), (3, 3, 3)))
        counts[prev, cur] += 1
        prev = cur
    n = counts.sum(axis=1, keepdims=True)
    assert np.all(counts[exact == 0] == 0)
    # row-wise multinomial goodness of fit over all 27 rows; a per-entry 4 SE
    # rule over 729 entries has no fixed false-alarm rate
    mask = exact > 0
    expected = (n * exact)[mask]
    stat = float(np.sum((counts[mask] - expected) ** 2 / expected))
    dof = int(mask.sum()) - 27
    assert stats.chi2.sf(stat, dof) > 1e-3


# -- sweeps -------------------------------------------------------------------------


def test_sweep_zero_eps_row(rng):
    R = fo.random_symmetric_proposal(8, rng)
    lp = rng.standard_normal(8)
    build = fo.metropolis_family(R, lp, rng.uniform(-1, 1, 8))
    rep = fo.perturbation_report(*build(0.0), 0.0)
    assert rep.op_norm == rep.chi2 == rep.tv_kernel == rep.v_norm_kernel == 0.0
    assert rep.kappa_pert == rep.kappa_base and rep.kappa_deficit == 0.0


def test_sweep_scaling_laws():
    t = de.truncated_gaussian([-4.0], [4.0], 0.0, 1.0)
    grid = np.linspace(-4, 4, 81)
    base = fo.discretize_kernel(sm.random_walk(t, 0.5), grid)

    def build(eps, sign=1.0):
        pert = de.truncated_gaussian([-4.0], [4.0], 0.0, 1.0)
        lp = lambda x, s=sign * eps: pert.log_density(x) + s * math.sin(x[0])
        tt = de.LogTarget(1, lp, None, pert.support)
        return base, fo.discretize_kernel(sm.random_walk(tt, 0.5), grid)

    sweep, _ = fo.gap_degrading_sweep(build, [0.2, 0.1, 0.05, 0.025])
    assert 1.7 <= sweep.exponents["chi2"] <= 2.3
    assert sweep.exponents["kappa_deficit"] >= 0.8
    assert max(r.kappa_deficit / r.eps for r in sweep.reports) <= 10


def test_sweep_eps_validation():
    with pytest.raises(ValueError):
        fo._check_eps_list([0.1, 0.05, 0.025])
    with pytest.raises(ValueError):
        fo._check_eps_list([0.1, 0.08, 0.06, 0.04])


def test_steepest_bump_shrinks_gap(rng):
    R = fo.random_symmetric_proposal(10, rng)
    lp = rng.standard_normal(10)
    bump = fo.steepest_gap_bump(R, lp)
    assert set(np.unique(bump)) <= {-1.0, 0.0, 1.0}
    base = fo.spectral_gap(fo.metropolis_matrix(R, lp)).kappa
    assert fo.spectral_gap(fo.metropolis_matrix(R, lp + 1e-3 * bump)).kappa < base


# -- CSV ----------------------------------------------------------------------------


def test_chain_csv_roundtrip(tmp_path, rng):
    c = fo.random_reversible_chain(7, rng)
    p = tmp_path / "chain.csv"
    fo.write_chain_csv(c, p)
    assert np.array_equal(fo.read_chain_csv(p).P, c.P)


def test_chain_csv_bad_shape(tmp_path):
    p = tmp_path / "chain.csv"
    p.write_text("3\n0.5,0.5\n0.5,0.5\n")
    with pytest.raises(ValueError):
        fo.read_chain_csv(p)
