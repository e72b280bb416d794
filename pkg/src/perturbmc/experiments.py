"""Experiments behind the acceptance checks.

Each function is deterministic in its seed and returns plain rows or small
dataclasses; :mod:`perturbmc.criteria` turns those into pass/fail verdicts
and :mod:`perturbmc.runner` persists them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.signal import lfilter

from . import densities as de
from . import diagnostics as dg
from . import finite_oracle as fo
from . import inverse_problem as ip
from . import samplers as sm
from .rng import make_rng, seed_sequence, spawn_seeds

EPS_SWEEP = (0.2, 0.1, 0.05, 0.025)
MC_LENGTHS = (100, 1000, 10000)
WARMUP_H_STEP = 0.32  # random-walk step scale for warm-up moves


# -- gap degradation and chi-square law -----------------------------------------


@dataclass(frozen=True)
class SweepInstance:
    label: str
    family: str
    sign: float
    sweep: fo.SweepResult


def _sine_bump(x):
    return math.sin(x[0])


def _sine_bump_grad(x):
    return np.array([math.cos(x[0])])


def _grid_target():
    return de.truncated_gaussian([-4.0], [4.0])


def discretized_family(kind: str, h: float, n_grid: int = 81):
    """``build(eps, sign)`` for grid chains of RWM/MALA on a truncated N(0,1).

    The perturbed target is ``log pi + sign * eps * sin(x)``.
    """
    base = _grid_target()
    grid = np.linspace(-4.0, 4.0, n_grid)
    make = sm.random_walk if kind == sm.RWM else sm.langevin
    P = fo.discretize_kernel(make(base, h), grid)

    def build(eps, sign=1.0):
        bump = _sine_bump if sign > 0 else de.negate(_sine_bump)

        def grad(x):
            return sign * _sine_bump_grad(x)

        pair = de.make_perturbed(base, bump, eps, bump_gradient=grad, bump_gradient_bound=1.0)
        return P, fo.discretize_kernel(make(pair.perturbed, h), grid)

    return build


def random_chain_sweeps(seed, n_chains: int = 20, eps=EPS_SWEEP, sizes=(10, 50), density: float = 0.5) -> list[SweepInstance]:
    """MH chains on random sparse graphs, perturbed along the steepest gap-degrading bump."""
    rng = make_rng(seed)
    out = []
    for i in range(n_chains):
        n = int(rng.integers(sizes[0], sizes[1] + 1))
        R = fo.random_symmetric_proposal(n, rng, density)
        lp = rng.standard_normal(n)
        bump = fo.steepest_gap_bump(R, lp)
        sweep = fo.perturbation_sweep(fo.metropolis_family(R, lp, bump), eps)
        out.append(SweepInstance(f"random-{i:02d}", f"metropolis(n={n})", 1.0, sweep))
    return out


def discretized_sweeps(eps=EPS_SWEEP, cases=((sm.RWM, 0.5), (sm.RWM, 0.1), (sm.MALA, 0.5), (sm.MALA, 0.1))) -> list[SweepInstance]:
    out = []
    for kind, h in cases:
        sweep, sign = fo.gap_degrading_sweep(discretized_family(kind, h), eps)
        out.append(SweepInstance(f"grid-{kind}-h{h:g}", f"discretized-{kind}", sign, sweep))
    return out


def oracle_sweep(seed, eps=EPS_SWEEP, n_chains: int = 20) -> list[SweepInstance]:
    return random_chain_sweeps(seed, n_chains, eps) + discretized_sweeps(eps)


# -- explicit-constant inequality ------------------------------------------------


def explicit_constant_instances(seed, n_instances: int = 50) -> list[dict]:
    """``||P - Phat||_pi`` against ``sqrt(2(1+a^2)) sqrt(eps)`` with ``V = 1``.

    ``eps`` is the measured kernel TV distance and ``a`` the larger of
    ``max pi/pihat`` and ``max pihat/pi``.
    """
    rng = make_rng(seed)
    rows = []
    for i in range(n_instances):
        n = int(rng.integers(5, 41))
        R = fo.random_symmetric_proposal(n, rng, float(rng.uniform(0.3, 1.0)))
        lp = rng.standard_normal(n) * float(rng.uniform(0.5, 2.0))
        bump = rng.uniform(-1.0, 1.0, n)
        eps_log = float(rng.uniform(0.01, 0.5))
        P, Phat = fo.metropolis_family(R, lp, bump)(eps_log)
        eps = fo.tv_kernel(P, Phat)
        a = float(max(np.max(P.pi / Phat.pi), np.max(Phat.pi / P.pi)))
        op = fo.op_norm_diff(P, Phat, P.pi)
        bound = math.sqrt(2.0 * (1.0 + a * a)) * math.sqrt(eps)
        rows.append({"instance": i, "n": n, "eps_tv": eps, "a": a, "op_norm": op, "bound": bound})
    return rows


# -- Monte Carlo error bound ---------------------------------------------------------


def _simulate_averages(P: np.ndarray, pi: np.ndarray, F: np.ndarray, M: int, replicates: int, rng) -> np.ndarray:
    """Time averages of each row of ``F`` over ``M`` steps, started from ``pi``."""
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    cpi = np.cumsum(pi)
    cpi[-1] = 1.0
    x = np.searchsorted(cpi, rng.random(replicates), side="right")
    acc = np.zeros((F.shape[0], replicates))
    for _ in range(M):
        u = rng.random(replicates)
        x = (cum[x] < u[:, None]).sum(axis=1)
        acc += F[:, x]
    return acc / M


def mc_error_chains(seed) -> list[tuple[str, fo.FiniteChain]]:
    """Perturbed chains ``Phat`` with exactly known gap and stationary law."""
    rng = make_rng(seed)
    chains = []
    for i in range(3):
        n = int(rng.integers(8, 31))
        R = fo.random_symmetric_proposal(n, rng, 0.5)
        lp = rng.standard_normal(n)
        _, Phat = fo.metropolis_family(R, lp, rng.uniform(-1, 1, n))(0.1)
        chains.append((f"metropolis-{i}", Phat))
    _, Phat = discretized_family(sm.RWM, 0.5, n_grid=41)(0.1)
    chains.append(("grid-rwm", Phat))
    return chains


def mc_error_experiment(seed, lengths=MC_LENGTHS, replicates: int = 200, n_functions: int = 10) -> list[dict]:
    """Empirical MSE of ``f_hat_M`` against ``mc_error_bound`` on exact chains."""
    ss = seed_sequence(seed)
    chain_ss, f_ss, sim_ss = ss.spawn(3)
    f_rng = make_rng(f_ss)
    rows = []
    for (name, chain), sim in zip(mc_error_chains(chain_ss), sim_ss.spawn(4)):
        pi = chain.pi
        kappa = fo.spectral_gap(chain).kappa
        F = f_rng.uniform(-1.0, 1.0, (n_functions, chain.n))
        means = F @ pi
        var = (F * F) @ pi - means ** 2
        for M, s in zip(lengths, sim.spawn(len(lengths))):
            avg = _simulate_averages(chain.P, pi, F, int(M), replicates, make_rng(s))
            mse = np.mean((avg - means[:, None]) ** 2, axis=1)
            for j in range(n_functions):
                rows.append({"chain": name, "f": j, "M": int(M), "kappa_hat": kappa, "var_f": float(var[j]),
                             "mse": float(mse[j]), "bound": dg.mc_error_bound(kappa, float(var[j]), int(M))})
    return rows


# -- drift transfer -----------------------------------------------------------------


def drift_transfer_instances(seed, n_instances: int = 20) -> list[dict]:
    """Lyapunov constants and ergodicity rates before and after perturbation.

    Half the instances are grid RWM chains with ``V = 1 + x^2``, half are
    random MH chains with random ``V``. ``eps`` is the measured kernel V-norm
    distance, and the perturbed chain's ``lam`` is fitted with the base ``L``.
    """
    rng = make_rng(seed)
    grid = np.linspace(-4.0, 4.0, 61)
    base = _grid_target()
    rows = []
    for i in range(n_instances):
        eps_log = float(rng.choice(EPS_SWEEP))
        if i % 2 == 0:
            h = float(rng.uniform(0.05, 0.5))
            a, b = rng.uniform(0.5, 3.0), rng.uniform(0.0, 2 * math.pi)

            def bump(x, a=a, b=b):
                return math.sin(a * x[0] + b)

            P = fo.discretize_kernel(sm.random_walk(base, h), grid)
            Phat = fo.discretize_kernel(sm.random_walk(de.make_perturbed(base, bump, eps_log).perturbed, h), grid)
            V = 1.0 + grid ** 2
            family = "grid-rwm"
        else:
            n = int(rng.integers(10, 41))
            R = fo.random_symmetric_proposal(n, rng, 0.5)
            P, Phat = fo.metropolis_family(R, rng.standard_normal(n), rng.uniform(-1, 1, n))(eps_log)
            V = 1.0 + rng.uniform(0.0, 5.0, n)
            family = "metropolis"
        lam, L = fo.lyapunov_fit(P, V)
        lam_hat, _ = fo.lyapunov_fit(Phat, V, L)
        eps = fo.v_norm_kernel(P, Phat, V)
        rate = fo.ergodicity_rate(P, V).rate
        rate_hat = fo.ergodicity_rate(Phat, V).rate
        rows.append({"instance": i, "family": family, "eps": eps, "lam": lam, "lam_hat": lam_hat, "L": L,
                     "rate": rate, "rate_hat": rate_hat})
    return rows


# -- MH correctness -------------------------------------------------------------------


def detailed_balance_residuals() -> list[dict]:
    """Max ``|pi_i P_ij - pi_j P_ji|`` for grid RWM and MALA chains."""
    rows = []
    grid = np.linspace(-4.0, 4.0, 81)
    for kind, h in ((sm.RWM, 0.5), (sm.RWM, 0.1), (sm.MALA, 0.5), (sm.MALA, 0.1)):
        make = sm.random_walk if kind == sm.RWM else sm.langevin
        chain = fo.discretize_kernel(make(_grid_target(), h), grid)
        rows.append({"kind": kind, "h": h, "residual": fo.reversibility_residual(chain.P, chain.pi)})
    return rows


def stationary_acceptance_quadrature(kind: str, h: float, half_width: float = 10.0, n: int = 2001) -> float:
    """``E[alpha(X, Y)]`` for X ~ N(0,1) and Y from the proposal, by 2-d trapezoid."""
    x = np.linspace(-half_width, half_width, n)
    z = np.linspace(-half_width, half_width, n)
    X, Z = np.meshgrid(x, z, indexing="ij")
    s = math.sqrt(2.0 * h)
    if kind == sm.RWM:
        Y = X + s * Z
        log_alpha = -0.5 * Y ** 2 + 0.5 * X ** 2
    else:
        # grad log pi = -x, so the drifted centre is (1-h) x
        Y = (1.0 - h) * X + s * Z
        log_q_fwd = -(Y - (1.0 - h) * X) ** 2 / (4 * h)
        log_q_bwd = -(X - (1.0 - h) * Y) ** 2 / (4 * h)
        log_alpha = -0.5 * Y ** 2 + 0.5 * X ** 2 + log_q_bwd - log_q_fwd
    alpha = np.exp(np.minimum(0.0, log_alpha))
    w = np.exp(-0.5 * X ** 2 - 0.5 * Z ** 2) / (2 * math.pi)
    return float(trapezoid(trapezoid(alpha * w, z, axis=1), x))


def acceptance_rate_check(seed, n: int = 100_000, cases=((sm.RWM, 0.5), (sm.MALA, 0.1))) -> list[dict]:
    """Simulated stationary acceptance rate versus the quadrature oracle.

    The standard error inflates the binomial one by the IAT of the
    acceptance indicators.
    """
    rows = []
    for (kind, h), s in zip(cases, spawn_seeds(seed, len(cases))):
        ss = seed_sequence(s)
        init, run = ss.spawn(2)
        x0 = make_rng(init).standard_normal(1)
        make = sm.random_walk if kind == sm.RWM else sm.langevin
        trace = sm.run_chain(make(de.gaussian(0.0, 1.0), h), x0, n, run)
        ind = trace.accepted.astype(float)
        p = float(ind.mean())
        tau = dg.autocorr_time(ind).tau
        se = math.sqrt(p * (1 - p) / n * max(tau, 1.0))
        q = stationary_acceptance_quadrature(kind, h)
        rows.append({"kind": kind, "h": h, "empirical": p, "quadrature": q, "se": se, "z": abs(p - q) / se})
    return rows


# -- PT kernel exactness --------------------------------------------------------------


@dataclass(frozen=True)
class PTExactness:
    K: int
    n_states: int
    stationarity_residual: float
    max_z: float
    min_expected_count: float
    impossible_moves: int
    ratios: list[float]
    steps: int


def _pt_levels(base: np.ndarray, K: int, alpha: float):
    betas = sm.tempering_ladder(K, alpha)
    pis = [base ** b / np.sum(base ** b) for b in betas]
    n = base.size
    Ms = [fo.metropolis_matrix(np.full((n, n), 1.0 / n), np.log(p)) for p in pis]
    return pis, Ms


def pt_exactness(K: int, n_states: int, seed, steps: int = 500_000, eps=EPS_SWEEP, alpha: float = 1.3) -> PTExactness:
    """Exact PT kernel versus simulation and versus perturbed level targets.

    Level targets are a random base law raised to the ladder powers; level
    kernels are independence-proposal MH chains. Perturbed levels multiply
    every target by ``exp(eps * bump)``.
    """
    ss = seed_sequence(seed)
    build_ss, sim_ss = ss.spawn(2)
    rng = make_rng(build_ss)
    base = rng.dirichlet(np.full(n_states, 3.0))
    pis, Ms = _pt_levels(base, K, alpha)
    prod = fo.pt_product_kernel(Ms, pis)
    resid = float(np.abs(prod.pi @ prod.P - prod.pi).sum())

    targets = [sm.discrete_target(p) for p in pis]
    config = sm.PTConfig(targets, [(sm.DiscreteKernel(M, t), 1) for M, t in zip(Ms, targets)])
    state = sm.PTState.initial(config, [np.zeros(1)] * (K + 1))
    streams = sm.PTStreams.from_seed(sim_ss, K)
    sizes = (n_states,) * (K + 1)
    N = prod.n
    counts = np.zeros((N, N))
    prev = int(np.ravel_multi_index(tuple(state.replicas[:, 0].astype(int)), sizes))
    for _ in range(steps):
        state, _ = sm.pt_step(config, state, streams)
        cur = int(np.ravel_multi_index(tuple(state.replicas[:, 0].astype(int)), sizes))
        counts[prev, cur] += 1
        prev = cur
    visits = counts.sum(axis=1)
    P = prod.P
    pos = P > 0
    expected = P * visits[:, None]
    se = np.sqrt(P * (1 - P) / np.maximum(visits, 1)[:, None])
    emp = counts / np.maximum(visits, 1)[:, None]
    z = np.where(pos & (se > 0), np.abs(emp - P) / np.where(se > 0, se, 1.0), 0.0)
    impossible = int(np.sum(counts[~pos]))

    bump = rng.uniform(-1.0, 1.0, n_states)
    ratios = []
    for e in eps:
        w = np.exp(e * bump)
        pis_hat = [p * w / np.sum(p * w) for p in pis]
        Ms_hat = [fo.metropolis_matrix(np.full((n_states, n_states), 1.0 / n_states), np.log(p)) for p in pis_hat]
        prod_hat = fo.pt_product_kernel(Ms_hat, pis_hat)
        ratios.append(fo.op_norm_diff(prod, prod_hat, prod.pi) / e)
    return PTExactness(K, n_states, resid, float(z.max()), float(expected[pos].min()), impossible, ratios, steps)


# -- forward model convergence ------------------------------------------------------


def forward_convergence(theta=ip.THETA_TRUE, h0: float = ip.H0, levels=range(5), ref_level: int = 6) -> list[dict]:
    """``||F_h - F_ref||_2`` at ``h = h0 2^-j`` and log2 ratios of consecutive errors."""
    ref = ip.forward(theta, ip.ForwardSpec(ip.h_level(ref_level, h0)))
    rows = []
    prev = None
    for j in levels:
        h = ip.h_level(j, h0)
        err = float(np.linalg.norm(ip.forward(theta, ip.ForwardSpec(h)) - ref))
        order = math.log2(prev / err) if prev else math.nan
        rows.append({"j": int(j), "h": h, "error": err, "log2_ratio": order})
        prev = err
    return rows


# -- IAT estimator sanity -------------------------------------------------------------


def ar1_series(phi: float, n: int, rng) -> np.ndarray:
    """Stationary Gaussian AR(1) with unit innovations."""
    e = rng.standard_normal(n)
    e[0] /= math.sqrt(1.0 - phi * phi)
    return lfilter([1.0], [1.0, -phi], e)


def iat_sanity(seed, n: int = 1_000_000) -> dict:
    r_ar, r_iid = (make_rng(s) for s in seed_sequence(seed).spawn(2))
    return {"tau_ar1": dg.autocorr_time(ar1_series(0.5, n, r_ar)).tau,
            "tau_iid": dg.autocorr_time(r_iid.standard_normal(n)).tau, "n": n}


# -- predator-prey posterior sampling ---------------------------------------------------


@dataclass(frozen=True)
class PosteriorSetup:
    """Synthetic data plus a Laplace preconditioner, shared by every h level."""

    data: ip.ObservedData
    x_map: np.ndarray
    cov: np.ndarray
    h0: float

    @property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.cov)


def posterior_setup(data_seed: int, h0: float = ip.H0) -> PosteriorSetup:
    h_ref = ip.h_level(6, h0)
    data = ip.synth_data(ip.THETA_TRUE, h_ref, data_seed)
    x_map, cov = ip.laplace_approximation(ip.ForwardSpec(h_ref), data)
    return PosteriorSetup(data, x_map, cov, h0)


@dataclass(frozen=True)
class ChainTask:
    kind: str
    level: int
    h: float
    replicate: int
    seed: int
    n_iter: int
    h_step: float
    setup: PosteriorSetup
    K: int = 4
    alpha: float = 1.3
    t_k: int = 1
    warmup: int = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.level, self.replicate)


@dataclass
class ChainOutcome:
    task_key: tuple[int, int]
    h: float
    seed: int
    status: str
    samples: np.ndarray | None = None
    taus: np.ndarray | None = None
    ess: np.ndarray | None = None
    burn_in: int = 0
    acceptance_rate: float = math.nan
    swap_rate: float = math.nan
    extra: dict = field(default_factory=dict)


def run_posterior_chain(task: ChainTask) -> ChainOutcome:
    """One replicate: sample, discard burn-in, compute per-coordinate IAT.

    Any failure is caught and reported in ``status`` so a sweep never aborts.
    """
    try:
        return _run_posterior_chain(task)
    except Exception as exc:  # crash isolation: record and move on
        return ChainOutcome(task.key, task.h, task.seed, f"error:{type(exc).__name__}:{exc}")


def _run_posterior_chain(task: ChainTask) -> ChainOutcome:
    st = task.setup
    spec = ip.ForwardSpec(task.h)
    # the third stream only feeds the warm-up, so the first two match runs without one
    init_ss, run_ss, warm_ss = seed_sequence(task.seed).spawn(3)
    z = make_rng(init_ss).standard_normal(st.x_map.size)
    L = st.chol
    swap_rate = math.nan
    if task.kind in (sm.RWM, sm.MALA):
        target = ip.posterior_target(spec, st.data)
        x0 = st.x_map + L @ z
        if task.warmup > 0:
            warm = sm.run_chain(sm.random_walk(target, WARMUP_H_STEP, st.cov), x0, task.warmup, warm_ss)
            x0 = warm.states[-1]
        make = sm.random_walk if task.kind == sm.RWM else sm.langevin
        trace = sm.run_chain(make(target, task.h_step, st.cov), x0, task.n_iter, run_ss)
    elif task.kind == "pt":
        betas = sm.tempering_ladder(task.K, task.alpha)
        targets = [ip.posterior_target(spec, st.data, float(b)) for b in betas]
        kernels = [(sm.random_walk(t, task.h_step, st.cov / b), task.t_k) for t, b in zip(targets, betas)]
        config = sm.PTConfig(targets, kernels)
        x0s = [st.x_map + (L @ z) / math.sqrt(b) for b in betas]
        res = sm.run_pt(config, x0s, task.n_iter, run_ss)
        trace = res.target_trace
        swap_rate = float(res.swap_accepts.sum() / max(res.swap_attempts.sum(), 1))
    else:
        raise ValueError(f"unknown sampler kind {task.kind!r}")
    burn = dg.burn_in(trace.states)
    kept = trace.states[burn:]
    iats = [dg.autocorr_time(kept[:, j]) for j in range(kept.shape[1])]
    return ChainOutcome(
        task.key, task.h, task.seed, "ok", kept,
        np.array([r.tau for r in iats]), np.array([r.ess for r in iats]),
        burn, trace.acceptance_rate, swap_rate,
    )
