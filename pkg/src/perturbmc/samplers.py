"""Metropolis-Hastings kernels (RWM, MALA) and parallel tempering.

Both proposals use covariance ``2h * C`` where ``C`` is an optional fixed
preconditioner (identity by default)::

    RWM:  x' = x + sqrt(2h) L xi
    MALA: x' = x + h C grad log pi(x) + sqrt(2h) L xi,     C = L L^T

and the MALA correction uses ``log q(x, x') = -|L^-1 (x' - x - h C grad)|^2 / (4h)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np

from .densities import Box, LogTarget, log_ratio
from .errors import DomainError
from .rng import SeedLike, make_rng, seed_sequence

RWM = "rwm"
MALA = "mala"

_BLOCK = 1 << 14


def acceptance_prob(log_alpha: float) -> float:
    """``min{1, exp(log_alpha)}``; NaN and -inf give 0."""
    if log_alpha != log_alpha:
        return 0.0
    return math.exp(min(0.0, log_alpha))


def _log_uniform(rng: np.random.Generator) -> float:
    u = rng.random()
    return math.log(u) if u > 0.0 else -math.inf


@dataclass(frozen=True)
class MHKernel:
    """An MH kernel on ``target`` with a random-walk or Langevin proposal."""

    target: LogTarget
    kind: str
    h: float
    precond: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (RWM, MALA):
            raise ValueError(f"unknown proposal kind {self.kind!r}")
        if not self.h > 0:
            raise ValueError("step scale h must be positive")
        if self.precond is not None:
            c = np.atleast_2d(np.asarray(self.precond, dtype=float))
            if c.shape != (self.target.dim, self.target.dim):
                raise ValueError("preconditioner shape does not match target dim")
            object.__setattr__(self, "precond", c)

    @cached_property
    def chol(self) -> np.ndarray | None:
        return None if self.precond is None else np.linalg.cholesky(self.precond)

    @cached_property
    def chol_inv(self) -> np.ndarray | None:
        return None if self.chol is None else np.linalg.inv(self.chol)

    def describe(self) -> dict:
        return {"kind": self.kind, "h": self.h, "preconditioned": self.precond is not None,
                "target": self.target.name}

    # shared proposal machinery --------------------------------------------

    def noise(self, xi: np.ndarray) -> np.ndarray:
        scaled = xi if self.chol is None else self.chol @ xi
        return math.sqrt(2.0 * self.h) * scaled

    def drift(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = grad if self.precond is None else self.precond @ grad
        return x + self.h * g

    def log_q(self, drift_from: np.ndarray, to: np.ndarray) -> float:
        """Langevin proposal log-density up to a constant."""
        r = to - drift_from
        if self.chol_inv is not None:
            r = self.chol_inv @ r
        return -float(np.dot(r, r)) / (4.0 * self.h)

    def log_proposal_density(self, x: np.ndarray, y: np.ndarray) -> float:
        """Normalized ``log R(x, y)`` (used by grid discretization)."""
        d = self.target.dim
        centre = x if self.kind == RWM else self.drift(x, self.target.grad(x))
        logdet = 0.0 if self.chol is None else 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        return self.log_q(centre, y) - 0.5 * d * math.log(4.0 * math.pi * self.h) - 0.5 * logdet

    def step(self, x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
        return rwm_step(self, x, rng) if self.kind == RWM else mala_step(self, x, rng)

    def step_cached(self, x, lp, grad, rng):
        """One step reusing cached ``log pi(x)`` (and gradient for MALA)."""
        xi = rng.standard_normal(self.target.dim)
        log_u = _log_uniform(rng)
        if self.kind == RWM:
            y, lp_y, acc = _rwm_move(self, x, lp, xi, log_u)
            return y, lp_y, None, acc
        if grad is None:
            grad = self.target.grad(x)
        return _mala_move(self, x, lp, grad, xi, log_u)


def random_walk(target: LogTarget, h: float, precond=None) -> MHKernel:
    return MHKernel(target, RWM, h, precond)


def langevin(target: LogTarget, h: float, precond=None) -> MHKernel:
    return MHKernel(target, MALA, h, precond)


def _rwm_move(kernel: MHKernel, x, lp, xi, log_u):
    y = x + kernel.noise(xi)
    lp_y = kernel.target.logp(y)
    if log_u < lp_y - lp:
        return y, lp_y, True
    return x, lp, False


def _mala_move(kernel: MHKernel, x, lp, grad, xi, log_u):
    t = kernel.target
    fwd_centre = kernel.drift(x, grad)
    y = fwd_centre + kernel.noise(xi)
    lp_y = t.logp(y)
    if lp_y == -math.inf:
        return x, lp, grad, False
    grad_y = t.grad(y)
    if not np.all(np.isfinite(grad_y)):
        return x, lp, grad, False
    log_alpha = lp_y - lp + kernel.log_q(kernel.drift(y, grad_y), x) - kernel.log_q(fwd_centre, y)
    if log_u < log_alpha:
        return y, lp_y, grad_y, True
    return x, lp, grad, False


def _start(kernel: MHKernel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(kernel.target.dim)
    if not kernel.target.in_support(x) or kernel.target.logp(x) == -math.inf:
        raise DomainError(f"start point {x} outside support")
    return x


def rwm_step(kernel: MHKernel, x, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """One random-walk Metropolis step from ``x``."""
    x = _start(kernel, x)
    xi = rng.standard_normal(kernel.target.dim)
    log_u = _log_uniform(rng)
    y, _, accepted = _rwm_move(kernel, x, kernel.target.logp(x), xi, log_u)
    return y, accepted


def mala_step(kernel: MHKernel, x, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """One Metropolis-adjusted Langevin step from ``x``.

    Raises ``FloatingPointError`` if the gradient at ``x`` is not finite.
    """
    x = _start(kernel, x)
    grad = kernel.target.grad(x)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient at {x}")
    xi = rng.standard_normal(kernel.target.dim)
    log_u = _log_uniform(rng)
    y, _, _, accepted = _mala_move(kernel, x, kernel.target.logp(x), grad, xi, log_u)
    return y, accepted


def mh_acceptance_prob(kernel: MHKernel, x, y) -> float:
    """Acceptance probability of moving ``x -> y`` under ``kernel``."""
    t = kernel.target
    if t.logp(np.asarray(y, float)) == -math.inf:
        return 0.0
    lr = log_ratio(t, x, y)
    if kernel.kind == MALA:
        lr += kernel.log_q(kernel.drift(y, t.grad(y)), x) - kernel.log_q(kernel.drift(x, t.grad(x)), y)
    return acceptance_prob(lr)


@dataclass
class Trace:
    states: np.ndarray
    acceptance_count: int
    seed: object
    kernel: dict
    accepted: np.ndarray = field(repr=False, default=None)
    proposals: int | None = None

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.acceptance_count / (self.proposals or self.n)


def run_chain(kernel: MHKernel, x0, n: int, seed: SeedLike) -> Trace:
    """Iterate ``kernel`` ``n`` times from ``x0``; deterministic in all inputs.

    The returned states exclude ``x0``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = make_rng(seed)
    t = kernel.target
    d = t.dim
    x = _start(kernel, x0)
    lp = t.logp(x)
    grad = None
    if kernel.kind == MALA:
        grad = t.grad(x)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient at {x}")
    states = np.empty((n, d))
    accepted = np.zeros(n, dtype=bool)
    for start in range(0, n, _BLOCK):
        m = min(_BLOCK, n - start)
        xis = rng.standard_normal((m, d))
        log_us = np.log(rng.random(m))
        for i in range(m):
            if kernel.kind == RWM:
                x, lp, acc = _rwm_move(kernel, x, lp, xis[i], log_us[i])
            else:
                x, lp, grad, acc = _mala_move(kernel, x, lp, grad, xis[i], log_us[i])
            states[start + i] = x
            accepted[start + i] = acc
    return Trace(states, int(accepted.sum()), seed, kernel.describe(), accepted)


# -- finite-state kernels (for exact PT checks) -------------------------------


class DiscreteKernel:
    """Kernel on state indices ``0..n-1`` given by a row-stochastic matrix.

    States are carried as length-1 float arrays so they fit the PT machinery.
    """

    def __init__(self, P: np.ndarray, target: LogTarget):
        self.P = np.asarray(P, dtype=float)
        self.cum = np.cumsum(self.P, axis=1)
        self.cum[:, -1] = 1.0
        self.target = target

    def step(self, x, rng):
        i = int(x[0])
        j = int(self.cum[i].searchsorted(rng.random(), side="right"))
        return np.array([float(j)]), j != i

    def step_cached(self, x, lp, grad, rng):
        y, moved = self.step(x, rng)
        return y, (self.target.logp(y) if moved else lp), None, moved


def discrete_target(pi: Sequence[float], name: str = "discrete") -> LogTarget:
    """Log of a probability vector, evaluated at ``x[0]`` as a state index."""
    logpi = np.log(np.asarray(pi, dtype=float))
    n = logpi.size

    def log_density(x):
        return float(logpi[int(x[0])])

    return LogTarget(1, log_density, support=Box([0.0], [n - 1.0]), name=name)


# -- parallel tempering ---------------------------------------------------------


class LevelKernel(Protocol):
    target: LogTarget

    def step_cached(self, x, lp, grad, rng): ...


def tempering_ladder(K: int, alpha: float) -> np.ndarray:
    """``beta_k = 1 + alpha^-K - alpha^-k`` for ``k = 0..K``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    k = np.arange(K + 1)
    return 1.0 + alpha ** (-float(K)) - alpha ** (-k.astype(float))


def _swap_log_alpha(pi_k: LogTarget, pi_k1: LogTarget, x, x1) -> float:
    return (pi_k.logp(x1) + pi_k1.logp(x)) - (pi_k.logp(x) + pi_k1.logp(x1))


def pt_swap_prob(pi_k: LogTarget, pi_k1: LogTarget, x, x1) -> float:
    """Probability of exchanging replicas ``x`` (level k) and ``x1`` (level k+1)."""
    x = np.asarray(x, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    for t in (pi_k, pi_k1):
        for p in (x, x1):
            if not t.in_support(p):
                raise DomainError(f"point {p} outside support of {t.name or 'level target'}")
    return acceptance_prob(_swap_log_alpha(pi_k, pi_k1, x, x1))


@dataclass(frozen=True)
class PTConfig:
    targets: tuple[LogTarget, ...]
    level_kernels: tuple[tuple[LevelKernel, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        lk = tuple((k, int(t)) for k, t in self.level_kernels)
        object.__setattr__(self, "level_kernels", lk)
        if len(self.targets) < 2 or len(lk) != len(self.targets):
            raise ValueError("need K+1 >= 2 targets and one level kernel per target")
        for i, (kern, t_k) in enumerate(lk):
            if kern.target is not self.targets[i]:
                raise ValueError(f"level {i} kernel targets a different density")
            if t_k < 1:
                raise ValueError("t_k must be at least 1")

    @property
    def K(self) -> int:
        return len(self.targets) - 1


@dataclass
class PTState:
    replicas: np.ndarray
    logp: np.ndarray
    iteration: int = 0
    swap_attempts: np.ndarray = None
    swap_accepts: np.ndarray = None
    grads: list = None

    @classmethod
    def initial(cls, config: PTConfig, x0s) -> "PTState":
        reps = np.array([np.asarray(x, dtype=float).reshape(config.targets[0].dim) for x in x0s])
        if reps.shape[0] != config.K + 1:
            raise ValueError("need one start point per level")
        lps = np.array([t.logp(x) for t, x in zip(config.targets, reps)])
        if np.any(lps == -np.inf):
            raise DomainError("a replica starts outside its level's support")
        grads = [kern.target.grad(x) if getattr(kern, "kind", None) == MALA else None
                 for (kern, _), x in zip(config.level_kernels, reps)]
        return cls(reps, lps, 0, np.zeros(config.K, dtype=np.int64), np.zeros(config.K, dtype=np.int64), grads)


@dataclass(frozen=True)
class PTStreams:
    """One generator per level plus one for the swap sub-step."""

    levels: tuple[np.random.Generator, ...]
    swap: np.random.Generator

    @classmethod
    def from_seed(cls, seed: SeedLike, K: int) -> "PTStreams":
        children = seed_sequence(seed).spawn(K + 2)
        gens = [make_rng(c) for c in children]
        return cls(tuple(gens[:-1]), gens[-1])


def pt_step(config: PTConfig, state: PTState, rng) -> tuple[PTState, np.ndarray]:
    """One PT iteration: local moves at every level, then one neighbour swap.

    ``rng`` is a :class:`PTStreams` or a single generator used for everything.
    Returns the new state and per-level local acceptance counts.
    """
    streams = rng if isinstance(rng, PTStreams) else PTStreams((rng,) * (config.K + 1), rng)
    reps = state.replicas.copy()
    lps = state.logp.copy()
    grads = list(state.grads) if state.grads is not None else [None] * (config.K + 1)
    local_acc = np.zeros(config.K + 1, dtype=np.int64)
    # Level updates are independent (own stream each); the swap below is the barrier.
    for k, (kern, t_k) in enumerate(config.level_kernels):
        x, lp, g = reps[k], lps[k], grads[k]
        for _ in range(t_k):
            x, lp, g, acc = kern.step_cached(x, lp, g, streams.levels[k])
            local_acc[k] += acc
        reps[k], lps[k], grads[k] = x, lp, g

    attempts = state.swap_attempts.copy()
    accepts = state.swap_accepts.copy()
    k = int(streams.swap.integers(config.K))
    u = streams.swap.random()
    lo, hi = config.targets[k], config.targets[k + 1]
    lp_lo_at_hi = lo.logp_from(reps[k + 1], lps[k + 1], hi)
    lp_hi_at_lo = hi.logp_from(reps[k], lps[k], lo)
    attempts[k] += 1
    if u < acceptance_prob((lp_lo_at_hi + lp_hi_at_lo) - (lps[k] + lps[k + 1])):
        accepts[k] += 1
        reps[[k, k + 1]] = reps[[k + 1, k]]
        lps[k], lps[k + 1] = lp_lo_at_hi, lp_hi_at_lo
        # Cached Langevin gradients belong to the old level; refresh lazily.
        grads[k] = grads[k + 1] = None
    new = PTState(reps, lps, state.iteration + 1, attempts, accepts, grads)
    return new, local_acc


@dataclass
class PTResult:
    traces: list[Trace]
    swap_attempts: np.ndarray
    swap_accepts: np.ndarray
    final: PTState

    @property
    def target_trace(self) -> Trace:
        return self.traces[-1]


def run_pt(config: PTConfig, x0s, n: int, seed: SeedLike) -> PTResult:
    """Run ``n`` PT iterations; one trace of length ``n`` per level."""
    if n < 1:
        raise ValueError("n must be at least 1")
    streams = PTStreams.from_seed(seed, config.K)
    state = PTState.initial(config, x0s)
    d = state.replicas.shape[1]
    out = np.empty((config.K + 1, n, d))
    acc = np.zeros(config.K + 1, dtype=np.int64)
    for i in range(n):
        state, local = pt_step(config, state, streams)
        out[:, i, :] = state.replicas
        acc += local
    traces = []
    for k, (kern, t_k) in enumerate(config.level_kernels):
        desc = kern.describe() if hasattr(kern, "describe") else {"kind": "discrete"}
        desc = dict(desc, level=k, t_k=t_k)
        traces.append(Trace(out[k], int(acc[k]), seed, desc, proposals=n * t_k))
    return PTResult(traces, state.swap_attempts, state.swap_accepts, state)
