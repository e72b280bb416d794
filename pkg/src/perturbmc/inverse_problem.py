"""Predator-prey Bayesian inverse problem with an RK2 forward model.

Dynamics (prey ``p``, predator ``q``)::

    dp/dt = r p (1 - p/K) - s p q / (w + p)
    dq/dt = u p q / (w + p) - v q

Parameter vector ``theta = (p(0), q(0), r, K, s, w, u, v)``. The reference
value ``THETA_TRUE`` puts 1.2 on the interaction rate ``s`` and 25 on the
half-saturation constant ``w``; the other assignment drives the prey
extinct within one observation interval.

Sampling happens in ``x``-space, where each coordinate has a standard
normal prior and ``theta_i = a + (b - a) Phi(x_i)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr, ndtri

from .densities import FD_STEP, LogTarget, Tempering
from .errors import BlowupError
from .rng import SeedLike, make_rng

LOWER = 1e-3
UPPER = 2e2
THETA_TRUE = np.array([50.0, 5.0, 0.6, 100.0, 1.2, 25.0, 0.5, 0.3])
PARAM_NAMES = ("prey0", "predator0", "r", "K", "s", "w", "u", "v")
H0 = 0.5
H_REF = H0 * 2.0 ** -6
BLOWUP = 1e12
RK2_FLAVOR = "heun"

_OK = 0
_BLOWN = 1


# -- numba kernels --------------------------------------------------------------


@numba.njit
def _pp_rhs(t, y, args, out):
    p = y[0]
    q = y[1]
    r, K, s, w, u, v = args[0], args[1], args[2], args[3], args[4], args[5]
    g = p * q / (w + p)
    out[0] = r * p * (1.0 - p / K) - s * g
    out[1] = u * g - v * q


@numba.njit
def _decay_rhs(t, y, args, out):
    for i in range(y.size):
        out[i] = -args[0] * y[i]


@numba.njit
def _heun(rhs, y0, args, h, record_idx, out):
    """Heun's method; stores the state at each step index in ``record_idx``.

    ``record_idx`` must be nondecreasing. Returns a status code.
    """
    d = y0.size
    y = y0.copy()
    k1 = np.empty(d)
    k2 = np.empty(d)
    ytmp = np.empty(d)
    step = 0
    t = 0.0
    for r in range(record_idx.size):
        target = record_idx[r]
        while step < target:
            rhs(t, y, args, k1)
            for i in range(d):
                ytmp[i] = y[i] + h * k1[i]
            rhs(t + h, ytmp, args, k2)
            for i in range(d):
                y[i] = y[i] + 0.5 * h * (k1[i] + k2[i])
                if not (abs(y[i]) <= BLOWUP):
                    return _BLOWN
            step += 1
            t = step * h
        for i in range(d):
            out[r, i] = y[i]
    return _OK


@numba.njit
def _theta_from_x(x, lo, hi):
    th = np.empty(x.size)
    for i in range(x.size):
        th[i] = lo + (hi - lo) * 0.5 * math.erfc(-x[i] / math.sqrt(2.0))
    return th


@numba.njit
def _forward_theta(theta, h, record_idx, out):
    y0 = np.empty(2)
    y0[0] = theta[0]
    y0[1] = theta[1]
    return _heun(_pp_rhs, y0, theta[2:], h, record_idx, out)


@numba.njit
def _misfit_x(x, y, h, record_idx, lo, hi):
    theta = _theta_from_x(x, lo, hi)
    out = np.empty((record_idx.size, 2))
    if _forward_theta(theta, h, record_idx, out) != _OK:
        return np.inf
    s = 0.0
    for i in range(record_idx.size):
        s += (out[i, 0] - y[2 * i]) ** 2 + (out[i, 1] - y[2 * i + 1]) ** 2
    return s


@numba.njit
def _log_post(x, y, h, record_idx, lo, hi, beta, scale):
    m = _misfit_x(x, y, h, record_idx, lo, hi)
    if not math.isfinite(m):
        return -np.inf
    return -0.5 * np.dot(x, x) - beta * scale * m


@numba.njit
def _misfit_batch(thetas, y, h, record_idx):
    """Misfits of many parameter rows, integrated in lockstep.

    Per row the arithmetic matches ``_misfit_x`` exactly; a row that blows up
    is frozen and gets ``inf``.
    """
    B = thetas.shape[0]
    p = thetas[:, 0].copy()
    q = thetas[:, 1].copy()
    alive = np.ones(B, dtype=np.bool_)
    m = np.zeros(B)
    step = 0
    for r in range(record_idx.size):
        target = record_idx[r]
        while step < target:
            for b in range(B):
                if not alive[b]:
                    continue
                rr = thetas[b, 2]
                K = thetas[b, 3]
                s = thetas[b, 4]
                w = thetas[b, 5]
                u = thetas[b, 6]
                v = thetas[b, 7]
                g = p[b] * q[b] / (w + p[b])
                k10 = rr * p[b] * (1.0 - p[b] / K) - s * g
                k11 = u * g - v * q[b]
                pt = p[b] + h * k10
                qt = q[b] + h * k11
                g = pt * qt / (w + pt)
                k20 = rr * pt * (1.0 - pt / K) - s * g
                k21 = u * g - v * qt
                p[b] = p[b] + 0.5 * h * (k10 + k20)
                q[b] = q[b] + 0.5 * h * (k11 + k21)
                if not (abs(p[b]) <= BLOWUP and abs(q[b]) <= BLOWUP):
                    alive[b] = False
            step += 1
        for b in range(B):
            if alive[b]:
                m[b] += (p[b] - y[2 * r]) ** 2 + (q[b] - y[2 * r + 1]) ** 2
    for b in range(B):
        if not alive[b]:
            m[b] = np.inf
    return m


@numba.njit
def _log_post_grad_fd(x, y, h, record_idx, lo, hi, beta, scale, step):
    # all 2d perturbed solves run in one batch
    d = x.size
    thetas = np.empty((2 * d, d))
    priors = np.empty(2 * d)
    xp = x.copy()
    for i in range(d):
        xp[i] = x[i] + step
        thetas[2 * i] = _theta_from_x(xp, lo, hi)
        priors[2 * i] = -0.5 * np.dot(xp, xp)
        xp[i] = x[i] - step
        thetas[2 * i + 1] = _theta_from_x(xp, lo, hi)
        priors[2 * i + 1] = -0.5 * np.dot(xp, xp)
        xp[i] = x[i]
    m = _misfit_batch(thetas, y, h, record_idx)
    f = np.empty(2 * d)
    for j in range(2 * d):
        f[j] = priors[j] - beta * scale * m[j] if math.isfinite(m[j]) else -np.inf
    g = np.empty(d)
    for i in range(d):
        g[i] = (f[2 * i] - f[2 * i + 1]) / (2.0 * step)
    return g


# -- domain types -----------------------------------------------------------------


@dataclass(frozen=True)
class PPParams:
    theta: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float).reshape(8)
        object.__setattr__(self, "theta", th)

    def in_box(self) -> bool:
        return bool(np.all(self.theta > LOWER) and np.all(self.theta < UPPER))

    def __getattr__(self, name):
        if name in PARAM_NAMES:
            return float(self.theta[PARAM_NAMES.index(name)])
        raise AttributeError(name)


@dataclass(frozen=True)
class ForwardSpec:
    """Observation design: ``m`` times evenly spaced on ``[t_first, t_final]``."""

    h: float
    t_final: float = 40.0
    m: int = 20
    t_first: float = 2.0
    noise_var: float = 4.0
    misfit_scale: float = 1.0 / 8.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")

    @property
    def obs_times(self) -> np.ndarray:
        return np.linspace(self.t_first, self.t_final, self.m)

    @property
    def record_idx(self) -> np.ndarray:
        # observation i is taken at the nearest grid time
        return np.rint(self.obs_times / self.h).astype(np.int64)


@dataclass(frozen=True)
class ObservedData:
    y: np.ndarray
    seed: object = None
    h_ref: float = H_REF

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        if y.size % 2:
            raise ValueError("observations come in (prey, predator) pairs")
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    prey: np.ndarray
    predator: np.ndarray


# -- operations ----------------------------------------------------------------------


def _as_params(params) -> PPParams:
    return params if isinstance(params, PPParams) else PPParams(params)


def rk2_solve(params, h: float, t_final: float = 40.0) -> Trajectory:
    """Heun RK2 trajectory on the grid ``0, h, ..., t_final``.

    Raises :class:`BlowupError` if a state leaves ``[-1e12, 1e12]`` or turns non-finite.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    p = _as_params(params)
    n = int(round(t_final / h))
    idx = np.arange(n + 1, dtype=np.int64)
    out = np.empty((n + 1, 2))
    if _forward_theta(p.theta, float(h), idx, out) != _OK:
        raise BlowupError("predator-prey solve blew up")
    return Trajectory(idx * h, out[:, 0].copy(), out[:, 1].copy())


def rk2_integrate_decay(rate: float, y0, h: float, t_final: float) -> np.ndarray:
    """``dy/dt = -rate * y`` through the same Heun harness; returns ``y(t_final)``."""
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    n = int(round(t_final / h))
    out = np.empty((1, y0.size))
    _heun(_decay_rhs, y0, np.array([float(rate)]), float(h), np.array([n], dtype=np.int64), out)
    return out[0]


def forward(params, spec: ForwardSpec) -> np.ndarray:
    """Interleaved ``(prey, predator)`` values at the observation times."""
    p = _as_params(params)
    idx = spec.record_idx
    out = np.empty((idx.size, 2))
    if _forward_theta(p.theta, float(spec.h), idx, out) != _OK:
        raise BlowupError("predator-prey solve blew up")
    return out.ravel()


def probit_transform(x) -> PPParams:
    """``theta_i = a + (b - a) Phi(x_i)`` coordinatewise."""
    x = np.asarray(x, dtype=float)
    return PPParams(LOWER + (UPPER - LOWER) * ndtr(x))


def inverse_probit(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return ndtri((theta - LOWER) / (UPPER - LOWER))


def tempered_log_posterior(x, spec: ForwardSpec, data: ObservedData, beta: float) -> float:
    """``-|x|^2/2 - beta * misfit_scale * |G(x) - y|^2``; ``-inf`` on blowup."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    x = np.asarray(x, dtype=float)
    return float(_log_post(x, data.y, float(spec.h), spec.record_idx, LOWER, UPPER, float(beta), spec.misfit_scale))


def log_posterior(x, spec: ForwardSpec, data: ObservedData) -> float:
    return tempered_log_posterior(x, spec, data, 1.0)


def posterior_gradient(x, spec: ForwardSpec, data: ObservedData, beta: float = 1.0, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of the (tempered) log-posterior."""
    x = np.asarray(x, dtype=float)
    return _log_post_grad_fd(x, data.y, float(spec.h), spec.record_idx, LOWER, UPPER, float(beta), spec.misfit_scale, step)


def posterior_target(spec: ForwardSpec, data: ObservedData, beta: float = 1.0) -> LogTarget:
    """The (tempered) posterior as a :class:`LogTarget` on R^8."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    y, h, idx, sc, b = data.y, float(spec.h), spec.record_idx, spec.misfit_scale, float(beta)

    def log_density(x):
        return _log_post(x, y, h, idx, LOWER, UPPER, b, sc)

    def gradient(x):
        return _log_post_grad_fd(x, y, h, idx, LOWER, UPPER, b, sc, FD_STEP)

    return LogTarget(8, log_density, gradient, name=f"pp-posterior(h={h:g},beta={b:.6g})",
                     tempering=Tempering(b, _log_prior))


def _log_prior(x):
    # the same expression as the prior term inside _log_post
    return -0.5 * np.dot(x, x)


def synth_data(theta_true=THETA_TRUE, h_ref: float = H_REF, seed: SeedLike = 0, spec: ForwardSpec | None = None) -> ObservedData:
    """Forward solve at ``h_ref`` plus iid ``N(0, noise_var)`` noise."""
    spec = spec or ForwardSpec(h=h_ref)
    if spec.h != h_ref:
        spec = ForwardSpec(h_ref, spec.t_final, spec.m, spec.t_first, spec.noise_var, spec.misfit_scale)
    clean = forward(theta_true, spec)
    rng = make_rng(seed)
    y = clean + math.sqrt(spec.noise_var) * rng.standard_normal(clean.size)
    return ObservedData(y, seed, h_ref)


def h_level(j: int, h0: float = H0) -> float:
    return h0 * 2.0 ** (-j)


def laplace_approximation(spec: ForwardSpec, data: ObservedData, x_init=None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mode and inverse negative Hessian (finite differences)."""
    x_init = inverse_probit(THETA_TRUE) if x_init is None else np.asarray(x_init, dtype=float)
    target = posterior_target(spec, data)
    res = minimize(lambda x: -target.log_density(x), x_init, jac=lambda x: -target.gradient(x), method="BFGS",
                   options={"gtol": 1e-8, "maxiter": 2000})
    x_map = res.x
    d = x_map.size
    H = np.empty((d, d))
    step = 1e-4
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        H[i] = (target.gradient(x_map + e) - target.gradient(x_map - e)) / (2 * step)
    H = -0.5 * (H + H.T)
    w, U = np.linalg.eigh(H)
    w = np.maximum(w, 1e-8 * w.max())
    cov = (U / w) @ U.T
    return x_map, 0.5 * (cov + cov.T)


# -- CSV ------------------------------------------------------------------------------

DATA_SCHEMA = "perturbmc.observed/1"
TRAJ_SCHEMA = "perturbmc.trajectory/1"


def write_observed_csv(data: ObservedData, spec: ForwardSpec, path) -> None:
    times = spec.obs_times
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {DATA_SCHEMA}; seed={data.seed}; h_ref={data.h_ref!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "species", "value"])
        for i, t in enumerate(times):
            w.writerow([format(t, ".17g"), "prey", format(data.y[2 * i], ".17g")])
            w.writerow([format(t, ".17g"), "predator", format(data.y[2 * i + 1], ".17g")])


def read_observed_csv(path) -> ObservedData:
    seed, h_ref = None, H_REF
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                for part in line[1:].split(";"):
                    k, _, v = part.strip().partition("=")
                    if k == "seed" and v not in ("", "None"):
                        seed = int(v)
                    elif k == "h_ref":
                        h_ref = float(v)
                continue
            rows.append(line)
    reader = csv.DictReader(rows)
    vals = [float(r["value"]) for r in reader]
    return ObservedData(np.array(vals), seed, h_ref)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {TRAJ_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "prey", "predator"])
        for t, p, q in zip(traj.times, traj.prey, traj.predator):
            w.writerow([format(t, ".17g"), format(p, ".17g"), format(q, ".17g")])
