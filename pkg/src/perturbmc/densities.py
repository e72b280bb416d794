"""Target log-densities and controlled perturbations of them.

A :class:`LogTarget` is an unnormalized log-density on R^d. Only differences
of log-densities are ever consumed (MH ratios, swap ratios), so additive
constants are irrelevant throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError

FD_STEP = 1e-5

LogDensityFn = Callable[[np.ndarray], float]
GradientFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``lower <= x <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box needs matching bounds with upper > lower")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "_bounds", tuple(zip(lo.tolist(), hi.tolist())))

    def contains(self, x: np.ndarray) -> bool:
        # plain float comparisons; numpy reductions dominate for the tiny x used here
        vals = np.asarray(x, dtype=float).ravel().tolist()
        if len(vals) != len(self._bounds):
            return bool(np.all(np.asarray(x) >= self.lower) and np.all(np.asarray(x) <= self.upper))
        for v, (lo, hi) in zip(vals, self._bounds):
            if not lo <= v <= hi:
                return False
        return True


@dataclass(frozen=True)
class Tempering:
    """Marks ``log_density = reference + beta * loglik``.

    Two targets tempered against the same ``reference`` callable can convert
    a log-density value from one to the other without a fresh evaluation.
    """

    beta: float
    reference: LogDensityFn


@dataclass(frozen=True)
class LogTarget:
    """Unnormalized log-density with optional analytic gradient.

    ``support=None`` means all of R^dim. Outside a box support
    :meth:`logp` returns ``-inf`` without calling ``log_density``.
    Targets without ``gradient`` fall back to central differences with
    step :data:`FD_STEP`.
    """

    dim: int
    log_density: LogDensityFn
    gradient: GradientFn | None = None
    support: Box | None = None
    name: str = ""
    tempering: Tempering | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.support is not None and self.support.lower.shape != (self.dim,):
            raise ValueError("support dimension does not match dim")

    def in_support(self, x: np.ndarray) -> bool:
        return self.support is None or self.support.contains(x)

    def logp(self, x: np.ndarray) -> float:
        if not self.in_support(x):
            return -math.inf
        return float(self.log_density(x))

    def grad(self, x: np.ndarray) -> np.ndarray:
        if self.gradient is not None:
            return np.asarray(self.gradient(x), dtype=float)
        return fd_gradient(self.log_density, x)

    @property
    def has_gradient(self) -> bool:
        return self.gradient is not None

    def logp_from(self, x: np.ndarray, lp: float, source: "LogTarget") -> float:
        """``self.logp(x)`` given ``lp = source.logp(x)``, reusing ``lp`` when both are tempered alike."""
        a, b = self.tempering, source.tempering
        if (a is None or b is None or a.reference is not b.reference or b.beta <= 0.0
                or self.support is not None or source.support is not None or not math.isfinite(lp)):
            return self.logp(x)
        ref = float(a.reference(x))
        return ref + (a.beta / b.beta) * (lp - ref)


def fd_gradient(f: LogDensityFn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    e = np.zeros_like(x)
    for i in range(x.size):
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2.0 * step)
        e[i] = 0.0
    return g


def _check_in_support(target: LogTarget, *points: np.ndarray) -> None:
    for p in points:
        if not target.in_support(np.asarray(p, dtype=float)):
            raise DomainError(f"point {np.asarray(p)} outside support of {target.name or 'target'}")


def log_ratio(target: LogTarget, x: np.ndarray, y: np.ndarray) -> float:
    """``log pi(y) - log pi(x)``; the normalizing constant cancels."""
    _check_in_support(target, x, y)
    return target.logp(np.asarray(y, dtype=float)) - target.logp(np.asarray(x, dtype=float))


# -- perturbations -----------------------------------------------------------


class Negated:
    """``-bump``; lets a perturbation be undone exactly with a nonnegative eps."""

    def __init__(self, bump: Callable[[np.ndarray], float]):
        self.bump = bump

    def __call__(self, x):
        return -self.bump(x)


def negate(bump: Callable[[np.ndarray], float]) -> Callable[[np.ndarray], float]:
    if isinstance(bump, Negated):
        return bump.bump
    return Negated(bump)


class _PerturbedDensity:
    # Keeps the root density and the bump coefficients separate so that
    # opposite perturbations cancel exactly instead of up to rounding.
    def __init__(self, root: LogDensityFn, terms: tuple[tuple[Callable, float], ...]):
        self.root = root
        self.terms = terms

    def __call__(self, x):
        val = self.root(x)
        for bump, coef in self.terms:
            val = val + coef * bump(x)
        return val


def _add_term(log_density: LogDensityFn, bump: Callable, eps: float) -> LogDensityFn:
    sign = 1.0
    if isinstance(bump, Negated):
        bump, sign = bump.bump, -1.0
    if isinstance(log_density, _PerturbedDensity):
        root, terms = log_density.root, list(log_density.terms)
    else:
        root, terms = log_density, []
    for i, (b, c) in enumerate(terms):
        if b is bump:
            terms[i] = (b, c + sign * eps)
            break
    else:
        terms.append((bump, sign * eps))
    terms = [(b, c) for b, c in terms if c != 0.0]
    if not terms:
        return root
    return _PerturbedDensity(root, tuple(terms))


@dataclass(frozen=True)
class PerturbedPair:
    base: LogTarget
    perturbed: LogTarget
    eps_log: float
    eps_grad: float | None = None


def make_perturbed(
    base: LogTarget,
    bump: Callable[[np.ndarray], float],
    eps: float,
    bump_gradient: GradientFn | None = None,
    bump_gradient_bound: float | None = None,
) -> PerturbedPair:
    """Build ``log pi_hat = log pi + eps * bump`` with ``|bump| <= 1``.

    The gradient is composed only when both the base and the bump supply
    one; ``eps_grad`` is ``eps * bump_gradient_bound`` when the bound is given.
    """
    if not eps >= 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    log_density = _add_term(base.log_density, bump, eps)

    gradient = None
    if base.gradient is not None and bump_gradient is not None:
        base_grad = base.gradient

        def gradient(x):
            return np.asarray(base_grad(x), dtype=float) + eps * np.asarray(bump_gradient(x), dtype=float)

    perturbed = LogTarget(
        dim=base.dim,
        log_density=log_density,
        gradient=gradient,
        support=base.support,
        name=f"{base.name}+{eps:g}*bump" if base.name else "",
    )
    eps_grad = None if bump_gradient_bound is None else eps * bump_gradient_bound
    return PerturbedPair(base=base, perturbed=perturbed, eps_log=float(eps), eps_grad=eps_grad)


@dataclass(frozen=True)
class RatioBoundReport:
    max_deviation: float
    offset: float
    eps_log: float
    passed: bool


def verify_ratio_bound(pair: PerturbedPair, points: Sequence[np.ndarray], atol: float = 1e-12) -> RatioBoundReport:
    """Check ``pi/pi_hat`` within ``[e^-eps, e^eps]`` on a sample of points.

    The unknown normalization difference is absorbed by the offset that
    minimizes the worst deviation, the midrange of the sampled log
    differences.
    """
    pts = [np.asarray(p, dtype=float) for p in points]
    if not pts:
        raise ValueError("need at least one point")
    _check_in_support(pair.base, *pts)
    _check_in_support(pair.perturbed, *pts)
    diffs = np.array([pair.perturbed.logp(p) - pair.base.logp(p) for p in pts])
    offset = 0.5 * (diffs.max() + diffs.min())
    dev = float(np.max(np.abs(diffs - offset)))
    return RatioBoundReport(dev, float(offset), pair.eps_log, dev <= pair.eps_log + atol)


# -- stock targets -------------------------------------------------------------


def gaussian(mean: Sequence[float] | float = 0.0, sd: Sequence[float] | float = 1.0, dim: int | None = None) -> LogTarget:
    """Diagonal Gaussian with analytic gradient."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    sd = np.atleast_1d(np.asarray(sd, dtype=float))
    d = dim or max(mean.size, sd.size)
    mean = np.broadcast_to(mean, (d,)).copy()
    prec = 1.0 / np.broadcast_to(sd, (d,)) ** 2

    def log_density(x):
        z = x - mean
        return -0.5 * float(np.dot(z * prec, z))

    def gradient(x):
        return -(x - mean) * prec

    return LogTarget(d, log_density, gradient, name="gaussian")


def truncated_gaussian(lower, upper, mean=0.0, sd=1.0) -> LogTarget:
    g = gaussian(mean, sd, dim=np.atleast_1d(lower).size)
    return LogTarget(g.dim, g.log_density, g.gradient, Box(lower, upper), name="truncated-gaussian")


def uniform_box(lower, upper) -> LogTarget:
    box = Box(lower, upper)
    d = box.lower.size
    return LogTarget(d, lambda x: 0.0, lambda x: np.zeros(d), box, name="uniform")
