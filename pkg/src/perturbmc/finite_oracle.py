"""Exact computations on finite-state Markov chains.

Conventions:

* ``kappa`` is one minus the largest squared nontrivial eigenvalue, i.e. the
  gap of ``P^2``. This is the quantity bounded by the perturbation theorems.
* Total variation is the ``sup_{|f| <= 1}`` form, equal to the full L1
  distance (range ``[0, 2]``).

Dense linear algebra only; state counts are capped at :data:`MAX_STATES`
(:data:`MAX_PRODUCT_STATES` for PT product chains).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import NonReversibleError, QuadratureError, ReducibleChainError, SizeLimitError

MAX_STATES = 2000
MAX_PRODUCT_STATES = 10_000


@dataclass
class FiniteChain:
    P: np.ndarray
    labels: np.ndarray | None = None
    pi: np.ndarray | None = None

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if np.any(P < 0):
            raise ValueError("P has negative entries")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("rows of P must sum to 1 within 1e-12")
        self.P = P
        if self.pi is not None:
            pi = np.asarray(self.pi, dtype=float)
            if pi.shape != (P.shape[0],) or abs(pi.sum() - 1.0) > 1e-12:
                raise ValueError("pi must be a probability vector of length n")
            if np.abs(pi @ P - pi).sum() > 1e-10:
                raise ValueError("pi is not stationary for P")
            self.pi = pi

    @property
    def n(self) -> int:
        return self.P.shape[0]


def _matrix(chain) -> np.ndarray:
    return chain.P if isinstance(chain, FiniteChain) else np.asarray(chain, dtype=float)


def is_irreducible(P: np.ndarray) -> bool:
    ncomp, _ = connected_components(P > 0, directed=True, connection="strong")
    return ncomp == 1


def stationary(chain: FiniteChain | np.ndarray) -> np.ndarray:
    """Unique stationary distribution via a dense linear solve."""
    P = _matrix(chain)
    n = P.shape[0]
    if n > MAX_STATES:
        raise SizeLimitError(f"{n} states exceeds dense limit {MAX_STATES}")
    if not is_irreducible(P):
        raise ReducibleChainError("chain is not irreducible")
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    # one round of iterative refinement keeps the residual near rounding level
    pi += np.linalg.solve(A, b - A @ pi)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def reversibility_residual(P: np.ndarray, pi: np.ndarray) -> float:
    F = pi[:, None] * P
    return float(np.max(np.abs(F - F.T)))


@dataclass(frozen=True)
class SpectralReport:
    kappa: float
    eigenvalues: np.ndarray
    reversibility_residual: float


def symmetrized(P: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """``D^{1/2} P D^{-1/2}`` with ``D = diag(pi)``."""
    s = np.sqrt(pi)
    return s[:, None] * P / s[None, :]


def spectral_gap(chain: FiniteChain | np.ndarray, pi: np.ndarray | None = None) -> SpectralReport:
    """Gap ``1 - max_{i>=2} lambda_i^2`` of a reversible chain."""
    P = _matrix(chain)
    if pi is None:
        pi = chain.pi if isinstance(chain, FiniteChain) and chain.pi is not None else stationary(P)
    resid = reversibility_residual(P, pi)
    if resid > 1e-8:
        raise NonReversibleError(f"detailed-balance residual {resid:.3g} > 1e-8; use op_norm_diff instead")
    S = symmetrized(P, pi)
    S = 0.5 * (S + S.T)
    eig = np.sort(np.linalg.eigvalsh(S))[::-1]
    # Deflate the constant direction (eigenvector sqrt(pi) of eigenvalue 1).
    v = np.sqrt(pi)
    rest = np.linalg.eigvalsh(S - np.outer(v, v))
    kappa = 1.0 - float(np.max(rest ** 2))
    return SpectralReport(min(max(kappa, 0.0), 1.0), eig, resid)


def op_norm_diff(P, Phat, pi: np.ndarray) -> float:
    """``||P - Phat||_pi``: largest singular value of ``D^{1/2}(P - Phat)D^{-1/2}``."""
    A, B = _matrix(P), _matrix(Phat)
    pi = np.asarray(pi, dtype=float)
    if A.shape != B.shape or A.shape[0] != pi.size:
        raise ValueError("dimension mismatch")
    if np.any(pi <= 0):
        raise ValueError("pi must be strictly positive")
    return float(np.linalg.norm(symmetrized(A - B, pi), 2))


def pi_norm(f: np.ndarray, pi: np.ndarray) -> float:
    return float(np.sqrt(np.sum(pi * f * f)))


def v_norm_dist(mu, nu, V) -> float:
    """``||mu - nu||_V = sum_i |mu_i - nu_i| V_i``."""
    mu, nu, V = (np.asarray(a, dtype=float) for a in (mu, nu, V))
    if not (mu.shape == nu.shape == V.shape):
        raise ValueError("dimension mismatch")
    if np.any(V < 1):
        raise ValueError("V must be >= 1")
    return float(np.sum(np.abs(mu - nu) * V))


def tv_dist(mu, nu) -> float:
    """Total variation in the ``sup_{|f|<=1}`` (full L1) convention."""
    return v_norm_dist(mu, nu, np.ones(np.asarray(mu).shape))


def chi2_div(nu, mu) -> float:
    """``D_chi2(nu || mu) = sum nu^2 / mu - 1``."""
    nu, mu = np.asarray(nu, dtype=float), np.asarray(mu, dtype=float)
    if nu.shape != mu.shape:
        raise ValueError("dimension mismatch")
    if np.any(mu <= 0):
        raise ZeroDivisionError("mu must be strictly positive")
    # Same value as sum nu^2/mu - 1, without cancellation. The mass corrections
    # only matter for unnormalized input; at rounding level they are dropped.
    corr = 2.0 * (nu.sum() - 1.0) - (mu.sum() - 1.0)
    if abs(corr) <= 1e-12:
        corr = 0.0
    return float(np.sum((nu - mu) ** 2 / mu) + corr)


def tv_kernel(P, Phat) -> float:
    """``max_x ||delta_x P - delta_x Phat||_TV``."""
    return float(np.max(np.abs(_matrix(P) - _matrix(Phat)).sum(axis=1)))


def v_norm_kernel(P, Phat, V) -> float:
    """``max_x ||delta_x P - delta_x Phat||_V / V(x)``."""
    V = np.asarray(V, dtype=float)
    return float(np.max((np.abs(_matrix(P) - _matrix(Phat)) @ V) / V))


# -- builders -------------------------------------------------------------------


def metropolis_matrix(R: np.ndarray, log_pi: np.ndarray) -> np.ndarray:
    """MH chain for target ``exp(log_pi)`` with symmetric proposal matrix ``R``."""
    R = np.asarray(R, dtype=float)
    lp = np.asarray(log_pi, dtype=float)
    acc = np.exp(np.minimum(0.0, lp[None, :] - lp[:, None]))
    P = R * acc
    np.fill_diagonal(P, 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return P


def random_symmetric_proposal(n: int, rng: np.random.Generator, density: float = 1.0) -> np.ndarray:
    """Random symmetric row-substochastic proposal, remainder on the diagonal."""
    W = rng.random((n, n))
    if density < 1.0:
        W *= rng.random((n, n)) < density
    W = np.triu(W, 1)
    W = W + W.T
    # keep connected: add a ring
    ring = np.roll(np.eye(n), 1, axis=1)
    W += 0.1 * (ring + ring.T)
    W /= W.sum(axis=1).max() * 1.05
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return W


def random_reversible_chain(n: int, rng: np.random.Generator, spread: float = 1.0) -> FiniteChain:
    """Random chain reversible w.r.t. a random positive ``pi``.

    Built as ``P_ij = W_ij / c_i`` for symmetric weights ``W``; the
    stationary law is ``pi_i`` proportional to the row sums ``c_i``.
    """
    W = rng.random((n, n)) * np.exp(spread * rng.standard_normal((n, n)))
    W = W + W.T
    c = W.sum(axis=1)
    P = W / c[:, None]
    pi = c / c.sum()
    P[np.arange(n), np.arange(n)] += 1.0 - P.sum(axis=1)
    return FiniteChain(P, pi=pi)


def independent_chain(pi) -> FiniteChain:
    """``P = 1 pi^T``: every step resamples from ``pi``."""
    pi = np.asarray(pi, dtype=float)
    return FiniteChain(np.tile(pi, (pi.size, 1)), pi=pi)


def two_state_chain(p: float, q: float) -> FiniteChain:
    return FiniteChain(np.array([[1 - p, p], [q, 1 - q]]))


def _grid_points(grid) -> tuple[np.ndarray, float]:
    if isinstance(grid, np.ndarray) and grid.ndim == 1:
        axes = [grid]
    elif isinstance(grid, (list, tuple)) and all(np.ndim(a) == 1 for a in grid) and len(grid) and np.ndim(grid[0]) == 1:
        axes = [np.asarray(a, dtype=float) for a in grid]
    else:
        axes = [np.asarray(grid, dtype=float)]
    vol = 1.0
    for a in axes:
        d = np.diff(a)
        if a.size < 2 or np.any(d <= 0) or np.ptp(d) > 1e-9 * d.mean():
            raise ValueError("grid axes must be increasing and uniformly spaced")
        vol *= d.mean()
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts, vol


def _log_proposal_matrix(kernel, pts: np.ndarray) -> np.ndarray:
    # log R(x_i, x_j) for all grid pairs, normalized on R^d
    d = pts.shape[1]
    if kernel.kind == "mala":
        centres = np.array([kernel.drift(p, kernel.target.grad(p)) for p in pts])
    else:
        centres = pts
    diff = pts[None, :, :] - centres[:, None, :]
    if kernel.chol_inv is not None:
        diff = diff @ kernel.chol_inv.T
    logdet = 0.0 if kernel.chol is None else 2.0 * float(np.sum(np.log(np.diag(kernel.chol))))
    const = -0.5 * d * math.log(4.0 * math.pi * kernel.h) - 0.5 * logdet
    return -np.sum(diff * diff, axis=2) / (4.0 * kernel.h) + const


def discretize_kernel(kernel, grid, renorm_tol: float = 1e-6) -> FiniteChain:
    """Midpoint-quadrature chain of an MH kernel on a uniform grid.

    Off-diagonal ``P_ij = beta(x_i, x_j) * cell_volume``; rejection and
    self-proposal mass go to the diagonal. A row whose off-diagonal mass
    exceeds one by at most ``renorm_tol`` is rescaled; larger excess raises
    :class:`QuadratureError`. The attached ``pi`` is the grid-normalized target.
    """
    pts, vol = _grid_points(grid)
    N = pts.shape[0]
    if N > MAX_STATES:
        raise SizeLimitError(f"{N} grid points exceeds dense limit {MAX_STATES}")
    t = kernel.target
    lp = np.array([t.logp(p) for p in pts])
    if np.any(lp == -np.inf):
        raise ValueError("grid points must lie in the target's support")
    logR = _log_proposal_matrix(kernel, pts)
    # log beta(x_i, x_j) = min{log pi_j + log R_ji - log pi_i, log R_ij}
    log_beta = np.minimum(lp[None, :] + logR.T - lp[:, None], logR)
    P = np.exp(log_beta) * vol
    np.fill_diagonal(P, 0.0)
    off = P.sum(axis=1)
    excess = off - 1.0
    if np.any(excess > renorm_tol):
        raise QuadratureError(f"off-diagonal mass exceeds 1 by {excess.max():.3g}; grid too coarse")
    over = excess > 0
    P[over] /= off[over, None]
    np.fill_diagonal(P, np.maximum(0.0, 1.0 - P.sum(axis=1)))
    w = np.exp(lp - lp.max())
    return FiniteChain(P, labels=pts, pi=w / w.sum())


# -- Lyapunov drift and ergodicity ------------------------------------------------


def lyapunov_fit(chain: FiniteChain | np.ndarray, V, L: float | None = None) -> tuple[float, float]:
    """Drift pair ``(lam, L)`` with ``PV <= lam V + L`` componentwise.

    For a given ``L`` the smallest valid ``lam`` is
    ``max_i ((PV)_i - L)_+ / V_i``, attained at the binding state. When ``L``
    is omitted it is taken as ``pi V``, the stationary mean of ``V``; pass
    the base chain's ``L`` to compare a perturbed chain on equal terms.
    """
    P = _matrix(chain)
    V = np.asarray(V, dtype=float)
    if np.any(V < 1):
        raise ValueError("V must be >= 1")
    if L is None:
        pi = chain.pi if isinstance(chain, FiniteChain) and chain.pi is not None else stationary(P)
        L = float(pi @ V)
    lam = float(np.max(np.maximum(P @ V - L, 0.0) / V))
    return lam, float(L)


@dataclass(frozen=True)
class RateFit:
    rate: float | None
    distances: np.ndarray


def _tail_rate(r: np.ndarray, floor: float = 1e-13) -> float | None:
    if r.size < 2:
        return None
    if r[0] <= floor:
        return 0.0
    valid = np.flatnonzero(r > floor)
    last = valid[-1] + 1 if valid.size else 1
    # stop at the first sub-floor value; what follows is rounding noise
    below = np.flatnonzero(r <= floor)
    if below.size:
        last = min(last, below[0])
    if last < 2:
        return 0.0
    n = np.arange(1, last + 1)
    lo = last // 2
    if last - lo < 2:
        lo = last - 2
    slope = np.polyfit(n[lo:], np.log(r[lo:last]), 1)[0]
    return float(math.exp(slope))


def ergodicity_rate(chain: FiniteChain | np.ndarray, V, n_max: int = 60) -> RateFit:
    """Contraction ``r_n = max_{x != y} ||delta_x P^n - delta_y P^n||_V / d_V(x, y)``.

    The rate is ``exp`` of the log-linear slope over the tail half of the
    sequence (terms below ``1e-13`` are treated as exhausted).
    """
    P = _matrix(chain)
    V = np.asarray(V, dtype=float)
    n = P.shape[0]
    denom = V[:, None] + V[None, :]
    np.fill_diagonal(denom, np.inf)
    Pn = np.eye(n)
    r = np.empty(n_max)
    for k in range(n_max):
        Pn = Pn @ P
        best = 0.0
        for x in range(n):
            d = (np.abs(Pn[x] - Pn) @ V) / denom[x]
            best = max(best, float(d.max()))
        r[k] = best
    return RateFit(_tail_rate(r), r)


# -- parallel tempering product kernel ------------------------------------------


def pt_product_kernel(level_chains: Sequence[FiniteChain | np.ndarray], targets: Sequence[np.ndarray]) -> FiniteChain:
    """Exact PT kernel ``(M_0 x ... x M_K) (1/K) sum_k Q_k`` on the product space.

    Product states are ordered like ``np.kron`` (row-major multi-index,
    level 0 most significant). The attached ``pi`` is the product of the
    level targets.
    """
    Ms = [_matrix(c) for c in level_chains]
    pis = [np.asarray(p, dtype=float) for p in targets]
    K = len(Ms) - 1
    if K < 1 or len(pis) != K + 1:
        raise ValueError("need K+1 >= 2 level chains and targets")
    sizes = tuple(m.shape[0] for m in Ms)
    total = int(np.prod(sizes))
    if total > MAX_PRODUCT_STATES:
        raise SizeLimitError(f"product space of {total} states exceeds {MAX_PRODUCT_STATES}")
    if any(np.any(p <= 0) for p in pis):
        raise ValueError("level targets must be strictly positive")
    M = Ms[0]
    for m in Ms[1:]:
        M = np.kron(M, m)
    Q = sum(swap_kernel(pis, k) for k in range(K)) / K
    P = M @ Q
    pi = pis[0]
    for p in pis[1:]:
        pi = np.kron(pi, p)
    return FiniteChain(P, pi=pi)


def swap_kernel(targets: Sequence[np.ndarray], k: int) -> np.ndarray:
    """Dense ``Q_k`` for the product space of the given level targets."""
    pis = [np.asarray(p, dtype=float) for p in targets]
    sizes = tuple(p.size for p in pis)
    total = int(np.prod(sizes))
    idx = np.array(np.unravel_index(np.arange(total), sizes))
    a, b = idx[k], idx[k + 1]
    log_alpha = (np.log(pis[k][b]) + np.log(pis[k + 1][a])) - (np.log(pis[k][a]) + np.log(pis[k + 1][b]))
    alpha = np.exp(np.minimum(0.0, log_alpha))
    swapped = idx.copy()
    swapped[[k, k + 1]] = swapped[[k + 1, k]]
    target = np.ravel_multi_index(tuple(swapped), sizes)
    Q = np.zeros((total, total))
    rows = np.arange(total)
    np.add.at(Q, (rows, rows), 1.0 - alpha)
    np.add.at(Q, (rows, target), alpha)
    return Q


# -- perturbation sweeps ------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationReport:
    """Distances and gaps for one perturbation size.

    ``tv_kernel`` uses the full-L1 TV convention; ``kappa_deficit`` is
    ``kappa_base - kappa_pert`` and may be negative.
    """

    eps: float
    op_norm: float
    kappa_base: float
    kappa_pert: float
    chi2: float
    tv_kernel: float
    v_norm_kernel: float

    @property
    def kappa_deficit(self) -> float:
        return self.kappa_base - self.kappa_pert

    def row(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["kappa_deficit"] = self.kappa_deficit
        return d


@dataclass(frozen=True)
class SweepResult:
    reports: list[PerturbationReport]
    exponents: dict[str, float]


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` on ``log x`` over positive pairs (NaN if < 2)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _check_eps_list(eps_list: Sequence[float]) -> np.ndarray:
    eps = np.asarray(eps_list, dtype=float)
    pos = eps[eps > 0]
    if pos.size < 4 or np.unique(pos).size < 4:
        raise ValueError("eps sweep needs at least 4 distinct positive values")
    if pos.max() / pos.min() < 8.0 - 1e-12:
        raise ValueError("eps sweep must span a factor of at least 8")
    return eps


def perturbation_report(P: FiniteChain, Phat: FiniteChain, eps: float, V=None) -> PerturbationReport:
    pi = P.pi if P.pi is not None else stationary(P)
    pihat = Phat.pi if Phat.pi is not None else stationary(Phat)
    V = np.ones(P.n) if V is None else np.asarray(V, dtype=float)
    try:
        kb = spectral_gap(P, pi).kappa
        kp = spectral_gap(Phat, pihat).kappa
    except NonReversibleError:
        kb = kp = math.nan
    return PerturbationReport(
        eps=float(eps),
        op_norm=op_norm_diff(P, Phat, pi),
        kappa_base=kb,
        kappa_pert=kp,
        chi2=chi2_div(pihat, pi),
        tv_kernel=tv_kernel(P, Phat),
        v_norm_kernel=v_norm_kernel(P, Phat, V),
    )


def perturbation_sweep(build: Callable[[float], tuple[FiniteChain, FiniteChain]], eps_list: Sequence[float], V=None) -> SweepResult:
    """Run ``build(eps) -> (P, Phat)`` over a sweep and fit log-log slopes.

    Exponents are fitted for the positive part of the gap deficit, the
    chi-square divergence of the stationary laws, the operator norm and
    the kernel TV distance.
    """
    eps = _check_eps_list(eps_list)
    reports = [perturbation_report(*build(float(e)), e, V) for e in eps]
    e = [r.eps for r in reports]
    exponents = {
        "kappa_deficit": loglog_slope(e, [max(r.kappa_deficit, 0.0) for r in reports]),
        "chi2": loglog_slope(e, [r.chi2 for r in reports]),
        "op_norm": loglog_slope(e, [r.op_norm for r in reports]),
        "tv_kernel": loglog_slope(e, [r.tv_kernel for r in reports]),
    }
    return SweepResult(reports, exponents)


def gap_degrading_sweep(build_signed: Callable[[float, float], tuple[FiniteChain, FiniteChain]], eps_list: Sequence[float], V=None) -> tuple[SweepResult, float]:
    """Sweep in whichever bump direction (+1 or -1) shrinks the gap.

    The direction is chosen at the smallest positive eps, where the first
    order term dominates. Returns the sweep and the chosen sign.
    """
    eps = _check_eps_list(eps_list)
    e0 = float(eps[eps > 0].min())
    deficits = {}
    for sign in (1.0, -1.0):
        P, Phat = build_signed(e0, sign)
        deficits[sign] = spectral_gap(P).kappa - spectral_gap(Phat).kappa
    sign = max(deficits, key=deficits.get)
    return perturbation_sweep(lambda e: build_signed(e, sign), eps, V), sign


def steepest_gap_bump(R: np.ndarray, log_pi: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Sup-norm-unit bump on ``log_pi`` that shrinks the MH gap fastest.

    Returns ``-sign(d kappa / d log_pi)`` using central differences. A random
    bump can be nearly orthogonal to the gap's sensitivity, leaving only
    second-order change; this one realizes the worst first-order case.
    """
    lp = np.asarray(log_pi, dtype=float)
    g = np.empty(lp.size)
    e = np.zeros(lp.size)
    for i in range(lp.size):
        e[i] = step
        up = spectral_gap(metropolis_matrix(R, lp + e)).kappa
        dn = spectral_gap(metropolis_matrix(R, lp - e)).kappa
        g[i] = (up - dn) / (2.0 * step)
        e[i] = 0.0
    return -np.sign(g)


def metropolis_family(R: np.ndarray, log_pi: np.ndarray, bump: np.ndarray):
    """``build(eps, sign)`` for MH chains on ``log_pi + sign*eps*bump``."""
    R = np.asarray(R, dtype=float)
    base_lp = np.asarray(log_pi, dtype=float)
    bump = np.asarray(bump, dtype=float)

    def _chain(lp):
        w = np.exp(lp - lp.max())
        return FiniteChain(metropolis_matrix(R, lp), pi=w / w.sum())

    base = _chain(base_lp)

    def build(eps: float, sign: float = 1.0):
        return base, _chain(base_lp + sign * eps * bump)

    return build


# -- CSV ---------------------------------------------------------------------------

CHAIN_SCHEMA = "perturbmc.chain/1"


def write_chain_csv(chain: FiniteChain | np.ndarray, path) -> None:
    """Row-major dense matrix: schema comment, a line holding ``n``, then ``n`` rows."""
    P = _matrix(chain)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {CHAIN_SCHEMA}\n")
        fh.write(f"{P.shape[0]}\n")
        for row in P:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def read_chain_csv(path) -> FiniteChain:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    n = int(lines[0].split(",")[0])
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1 : n + 1]]
    P = np.array(rows)
    if P.shape != (n, n):
        raise ValueError(f"expected a {n}x{n} matrix, got {P.shape}")
    return FiniteChain(P)
