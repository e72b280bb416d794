"""Pass/fail checks over experiment rows.

Every check takes plain rows (dicts, as produced by :mod:`perturbmc.experiments`
or read back from CSV) and returns a :class:`CriterionResult`.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .diagnostics import pooled_sd
from .finite_oracle import loglog_slope


@dataclass(frozen=True)
class CriterionResult:
    name: str
    measured: str
    expected: str
    passed: bool

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: measured {self.measured}; expected {self.expected}"


def _group(rows, key):
    out = defaultdict(list)
    for r in rows:
        out[r[key]].append(r)
    return out


def gap_degradation(rows, max_ratio: float = 10.0, min_slope: float = 0.8) -> CriterionResult:
    """Per instance: ``max deficit/eps <= max_ratio`` and positive-part slope ``>= min_slope``."""
    worst_ratio, worst_slope = -math.inf, math.inf
    for _, rs in sorted(_group(rows, "instance").items()):
        eps = [float(r["eps"]) for r in rs]
        deficit = [float(r["kappa_deficit"]) for r in rs]
        worst_ratio = max(worst_ratio, max(d / e for d, e in zip(deficit, eps)))
        slope = loglog_slope(eps, [max(d, 0.0) for d in deficit])
        worst_slope = min(worst_slope, slope) if not math.isnan(slope) else -math.inf
    ok = worst_ratio <= max_ratio and worst_slope >= min_slope
    return CriterionResult("gap-degradation", f"max deficit/eps={worst_ratio:.4g}, min slope={worst_slope:.4g}",
                           f"ratio<={max_ratio:g}, slope>={min_slope:g}", ok)


def chi2_law(rows, lo: float = 1.7, hi: float = 2.3) -> CriterionResult:
    slopes = []
    for _, rs in sorted(_group(rows, "instance").items()):
        slopes.append(loglog_slope([float(r["eps"]) for r in rs], [float(r["chi2"]) for r in rs]))
    s = np.array(slopes)
    ok = bool(np.all((s >= lo) & (s <= hi)))
    return CriterionResult("chi2-quadratic-law", f"slopes in [{np.nanmin(s):.4g}, {np.nanmax(s):.4g}]", f"[{lo:g}, {hi:g}]", ok)


def explicit_constant(rows) -> CriterionResult:
    worst = max(float(r["op_norm"]) / float(r["bound"]) for r in rows)
    ok = all(float(r["op_norm"]) <= float(r["bound"]) for r in rows)
    return CriterionResult("explicit-constant", f"max op_norm/bound={worst:.4g} over {len(rows)} instances", "<= 1", ok)


def mc_error(rows, lo: float = -1.15, hi: float = -0.85) -> CriterionResult:
    worst = max(float(r["mse"]) / float(r["bound"]) for r in rows)
    slopes = []
    series = _group([dict(r, series=(str(r["chain"]), int(r["f"]))) for r in rows], "series")
    for _, rs in sorted(series.items()):
        slopes.append(loglog_slope([float(r["M"]) for r in rs], [float(r["mse"]) for r in rs]))
    s = np.array(slopes)
    ok = worst <= 1.0 and bool(np.all((s >= lo) & (s <= hi)))
    return CriterionResult("mc-error-bound", f"max mse/bound={worst:.4g}, slopes in [{s.min():.4g}, {s.max():.4g}]",
                           f"mse/bound<=1, slope in [{lo:g}, {hi:g}]", ok)


def drift_transfer(rows, rate_factor: float = 5.0) -> CriterionResult:
    lam_gap = max(float(r["lam_hat"]) - float(r["lam"]) - float(r["eps"]) for r in rows)
    rate_gap = max(float(r["rate_hat"]) - float(r["rate"]) - rate_factor * float(r["eps"]) for r in rows)
    ok = lam_gap <= 1e-9 and rate_gap <= 0.0
    return CriterionResult("drift-transfer",
                           f"max(lam_hat-lam-eps)={lam_gap:.3g}, max(rate_hat-rate-{rate_factor:g}eps)={rate_gap:.3g}",
                           "<= 1e-9 and <= 0", ok)


def mh_correctness(balance_rows, acceptance_rows, tol: float = 1e-10, max_z: float = 3.0) -> CriterionResult:
    resid = max(float(r["residual"]) for r in balance_rows)
    z = max(float(r["z"]) for r in acceptance_rows)
    ok = resid <= tol and z <= max_z
    return CriterionResult("mh-correctness", f"max balance residual={resid:.3g}, max |acc-quad|/SE={z:.3g}",
                           f"residual<={tol:g}, z<={max_z:g}", ok)


def pt_exactness(results, tol: float = 1e-10, max_z: float = 4.0, max_ratio: float = 10.0) -> CriterionResult:
    resid = max(r.stationarity_residual for r in results)
    z = max(r.max_z for r in results)
    bad = sum(r.impossible_moves for r in results)
    ratio = max(max(r.ratios) for r in results)
    ok = resid <= tol and z <= max_z and bad == 0 and ratio <= max_ratio
    return CriterionResult("pt-kernel-exactness",
                           f"stationarity={resid:.3g}, max z={z:.3g}, impossible moves={bad}, max op/eps={ratio:.3g}",
                           f"<= {tol:g}, <= {max_z:g}, 0, <= {max_ratio:g}", ok)


def rk2_order(rows, lo: float = 1.8, hi: float = 2.2) -> CriterionResult:
    orders = [float(r["log2_ratio"]) for r in rows if not math.isnan(float(r["log2_ratio"]))]
    ok = bool(orders) and all(lo <= o <= hi for o in orders)
    return CriterionResult("rk2-order", "log2 ratios " + ", ".join(f"{o:.4f}" for o in orders), f"each in [{lo:g}, {hi:g}]", ok)


def finest_levels(iat_rows) -> tuple[float, float]:
    hs = sorted({float(r["h"]) for r in iat_rows})
    if len(hs) < 2:
        raise ValueError("need at least two h levels")
    return hs[0], hs[1]


def iat_stability(iat_rows, n_sd: float = 2.0, label: str = "") -> CriterionResult:
    """Mean replicate IAT at the two finest h differs by < ``n_sd`` pooled SDs, per coordinate."""
    ok_rows = [r for r in iat_rows if r.get("status", "ok") == "ok"]
    h_a, h_b = finest_levels(ok_rows)
    worst = 0.0
    ok = True
    for c in sorted({int(r["coordinate"]) for r in ok_rows}):
        a = [float(r["tau"]) for r in ok_rows if int(r["coordinate"]) == c and float(r["h"]) == h_a]
        b = [float(r["tau"]) for r in ok_rows if int(r["coordinate"]) == c and float(r["h"]) == h_b]
        if len(a) < 2 or len(b) < 2:
            ok = False
            continue
        sd = pooled_sd(a, b)
        score = abs(np.mean(a) - np.mean(b)) / sd if sd > 0 else math.inf
        worst = max(worst, score)
        ok = ok and score < n_sd
    name = f"iat-stability{'-' + label if label else ''}"
    return CriterionResult(name, f"max |mean diff|/pooled SD={worst:.3g} (h={h_b:g} vs {h_a:g})", f"< {n_sd:g}", ok)


def marginal_stability(ks_rows, tol: float = 0.05, label: str = "") -> CriterionResult:
    worst = max(float(r["ks"]) for r in ks_rows) if ks_rows else math.inf
    name = f"marginal-stability{'-' + label if label else ''}"
    return CriterionResult(name, f"max KS={worst:.4g} over {len(ks_rows)} coordinates", f"<= {tol:g}", worst <= tol)


def iat_sanity(result: dict) -> CriterionResult:
    a, b = float(result["tau_ar1"]), float(result["tau_iid"])
    ok = abs(a - 3.0) <= 0.15 and abs(b - 1.0) <= 0.1
    return CriterionResult("iat-estimator-sanity", f"AR(1) tau={a:.4f}, iid tau={b:.4f}", "3 +- 0.15 and 1 +- 0.1", ok)


def sweep_rows(instances) -> list[dict]:
    """Flatten :class:`~perturbmc.experiments.SweepInstance` objects into CSV-ready rows."""
    rows = []
    for inst in instances:
        for rep in inst.sweep.reports:
            rows.append({"instance": inst.label, "family": inst.family, "sign": inst.sign, **rep.row()})
    return rows
