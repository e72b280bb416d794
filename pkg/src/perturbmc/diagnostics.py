"""Chain-output statistics: autocorrelation time, ESS, error bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateSeriesError
from .finite_oracle import FiniteChain, _matrix, _tail_rate, stationary

MIN_LENGTH = 100


@dataclass(frozen=True)
class IATResult:
    tau: float
    window: int
    ess: float
    autocovariances: np.ndarray


def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased (divide-by-n) sample autocovariance at all lags, via FFT."""
    n = x.size
    z = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(z, m)
    return np.fft.irfft(f * np.conj(f), m)[:n] / n


def autocorr_time(series) -> IATResult:
    """Integrated autocorrelation time with Geyer's initial positive sequence.

    Sums autocorrelation pairs ``rho(2k) + rho(2k+1)`` until the first pair
    that is not positive, so ``tau = 1 + 2 * sum_{t=1}^{W} rho(t)``, floored
    at ``1 / log10(n)``.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < MIN_LENGTH:
        raise ValueError(f"series needs at least {MIN_LENGTH} values, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    acov = autocovariance(x)
    if acov[0] <= 0:
        raise DegenerateSeriesError("series has zero variance")
    rho = acov / acov[0]
    half = n // 2
    tau = -1.0
    k = 0
    while 2 * k + 1 < half:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        k += 1
    window = max(2 * k - 1, 0)
    # antithetic series can drive the truncated sum negative; floor as Stan does
    tau = max(tau, 1.0 / math.log10(n))
    ess = min(n / tau, float(n))
    return IATResult(float(tau), window, float(ess), acov[: window + 1].copy())


def ess(series) -> float:
    """Effective sample size ``n / tau`` (capped at ``n``)."""
    return autocorr_time(series).ess


def autocorr_times(states: np.ndarray) -> np.ndarray:
    """Per-coordinate ``tau`` for an ``(n, d)`` trace."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    return np.array([autocorr_time(states[:, j]).tau for j in range(states.shape[1])])


def burn_in(states: np.ndarray, factor: float = 10.0, pilot_fraction: float = 0.1) -> int:
    """Default burn-in: ``factor`` times the largest pilot ``tau``.

    The pilot estimate uses the first ``pilot_fraction`` of the chain. The
    result is capped at half the chain.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    n = states.shape[0]
    m = max(int(n * pilot_fraction), MIN_LENGTH)
    if m > n:
        return 0
    taus = []
    for j in range(states.shape[1]):
        try:
            taus.append(autocorr_time(states[:m, j]).tau)
        except DegenerateSeriesError:
            # stuck pilot: discard all of it
            taus.append(m / factor)
    return int(min(math.ceil(factor * max(taus)), n // 2))


def mc_error_bound(kappa_hat: float, var_f: float, M: int) -> float:
    """``2 var_f / (M (1 - (1 - kappa_hat)^{1/2}))``: MSE bound for an M-step average."""
    if not 0 < kappa_hat <= 1:
        raise ValueError("kappa_hat must lie in (0, 1]")
    if var_f < 0 or M < 1:
        raise ValueError("need var_f >= 0 and M >= 1")
    return 2.0 * var_f / (M * (1.0 - math.sqrt(1.0 - kappa_hat)))


@dataclass(frozen=True)
class DecayResult:
    distances: np.ndarray
    rate: float | None


def tv_decay(chain: FiniteChain | np.ndarray, x0: int, n_max: int) -> DecayResult:
    """Exact ``||delta_x0 P^n - pi||_TV`` for ``n = 1..n_max`` and its geometric rate.

    TV is the full-L1 form. With ``n_max == 1`` no rate is fitted.
    """
    P = _matrix(chain)
    pi = chain.pi if isinstance(chain, FiniteChain) and chain.pi is not None else stationary(P)
    mu = np.zeros(P.shape[0])
    mu[x0] = 1.0
    d = np.empty(n_max)
    for k in range(n_max):
        mu = mu @ P
        d[k] = np.abs(mu - pi).sum()
    return DecayResult(d, _tail_rate(d) if n_max > 1 else None)


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    return float(stats.ks_2samp(np.ravel(a), np.ravel(b)).statistic)


def pooled_sd(a, b) -> float:
    """Pooled standard deviation of two samples (ddof=1 within each)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    return math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
