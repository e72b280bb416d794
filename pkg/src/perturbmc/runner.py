"""Config-driven experiment runs with deterministic, self-describing outputs.

A run reads a TOML config, writes CSV files (each starting with a
``# schema: ...; seed=...`` comment line) plus ``manifest.json``, and can be
re-checked later with :func:`summarize`. See ``configs/`` for examples.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import criteria as cr
from . import diagnostics as dg
from . import experiments as ex
from . import inverse_problem as ip
from . import samplers as sm
from .errors import ConfigError, MissingOutputError
from .rng import seed_sequence, spawn_seeds

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

KINDS = ("oracle-sweep", "rwm", "mala", "pt", "forward-convergence", "mc-error")
SAMPLER_KINDS = ("rwm", "mala", "pt")
OUTPUT_ENV = "PERTURBMC_OUTPUT"
MANIFEST = "manifest.json"

# Step scales tuned for the Laplace-preconditioned posterior.
DEFAULT_H_STEP = {"rwm": 0.32, "mala": 0.25, "pt": 0.32}
# random-walk steps before MALA starts: Laplace-draw starts can sit where the
# Langevin drift overshoots so far that no proposal is ever accepted
DEFAULT_WARMUP = {"mala": 1000}


# -- config ------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int = 2026
    output_dir: str = "runs/out"
    iterations: int = 100_000
    replicates: int = 20
    workers: int = 1
    thin: int = 100
    # target
    data_seed: int | None = None
    h0: float = ip.H0
    h_levels: tuple[int, ...] = (1, 2)
    ref_level: int = 6
    # kernel
    h_step: float | None = None
    t_k: int = 1
    warmup: int | None = None
    K: int = 4
    alpha: float = 1.3
    # sweeps
    eps: tuple[float, ...] = ex.EPS_SWEEP
    n_chains: int = 20
    lengths: tuple[int, ...] = ex.MC_LENGTHS

    @property
    def warmup_steps(self) -> int:
        return self.warmup if self.warmup is not None else DEFAULT_WARMUP.get(self.kind, 0)

    @property
    def step_scale(self) -> float:
        return self.h_step if self.h_step is not None else DEFAULT_H_STEP.get(self.kind, 0.32)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("h_levels", "eps", "lengths"):
            d[k] = list(d[k])
        return d

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


_SECTIONS = {
    "target": ("data_seed", "h0", "h_levels", "ref_level"),
    "kernel": ("h_step", "t_k", "warmup", "K", "alpha"),
    "sweep": ("eps", "n_chains", "lengths"),
}
_TOP = ("kind", "seed", "output_dir", "iterations", "replicates", "workers", "thin")


def config_hash(d: dict) -> str:
    """SHA-256 of the canonical (key-sorted) JSON form; stable under field reordering."""
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _flatten(raw: dict, problems: dict) -> dict:
    flat = {}
    for k, v in raw.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                problems[k] = "must be a table"
                continue
            for kk, vv in v.items():
                if kk not in _SECTIONS[k]:
                    problems[f"{k}.{kk}"] = "unknown field"
                else:
                    flat[kk] = vv
        elif k in _TOP:
            flat[k] = v
        else:
            problems[k] = "unknown field"
    return flat


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def parse_config(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a nested config mapping; collects every problem before raising."""
    problems: dict[str, str] = {}
    flat = _flatten(raw, problems)
    if seed_override is not None:
        flat["seed"] = seed_override
    kind = flat.get("kind")
    if kind not in KINDS:
        problems["kind"] = f"must be one of {', '.join(KINDS)}"

    def need(name, ok, msg):
        if name in flat and not ok(flat[name]):
            problems[name] = msg

    need("seed", lambda v: _is_int(v) and v >= 0, "must be a nonnegative integer")
    need("data_seed", lambda v: _is_int(v) and v >= 0, "must be a nonnegative integer")
    need("output_dir", lambda v: isinstance(v, str) and v != "", "must be a nonempty string")
    need("iterations", lambda v: _is_int(v) and v >= dg.MIN_LENGTH, f"must be an integer >= {dg.MIN_LENGTH}")
    need("replicates", lambda v: _is_int(v) and v >= 1, "must be an integer >= 1")
    need("workers", lambda v: _is_int(v) and v >= 1, "must be an integer >= 1")
    need("thin", lambda v: _is_int(v) and v >= 1, "must be an integer >= 1")
    need("h0", lambda v: _is_num(v) and v > 0, "must be positive")
    need("h_levels", lambda v: isinstance(v, list) and len(v) > 0 and all(_is_int(j) and j >= 0 for j in v)
         and len(set(v)) == len(v), "must be a nonempty list of distinct nonnegative integers")
    need("ref_level", lambda v: _is_int(v) and v >= 0, "must be a nonnegative integer")
    need("h_step", lambda v: _is_num(v) and v > 0, "must be positive")
    need("t_k", lambda v: _is_int(v) and v >= 1, "must be an integer >= 1")
    need("warmup", lambda v: _is_int(v) and v >= 0, "must be a nonnegative integer")
    need("K", lambda v: _is_int(v) and v >= 1, "must be an integer >= 1")
    need("alpha", lambda v: _is_num(v) and v > 1, "must exceed 1")
    need("eps", lambda v: isinstance(v, list) and len(v) > 0 and all(_is_num(e) and e > 0 for e in v),
         "must be a nonempty list of positive numbers")
    need("n_chains", lambda v: _is_int(v) and v >= 1, "must be an integer >= 1")
    need("lengths", lambda v: isinstance(v, list) and len(v) > 0 and all(_is_int(m) and m >= 1 for m in v),
         "must be a nonempty list of positive integers")

    if not problems:
        if kind in SAMPLER_KINDS and len(flat.get("h_levels", ExperimentConfig.h_levels)) < 2:
            problems["h_levels"] = "sampler runs compare levels, so give at least two"
        if kind == "forward-convergence":
            levels = flat.get("h_levels", ExperimentConfig.h_levels)
            if flat.get("ref_level", ExperimentConfig.ref_level) <= max(levels):
                problems["ref_level"] = "must be finer (larger) than every h level"
        if kind == "oracle-sweep":
            try:
                ex.fo._check_eps_list(flat.get("eps", ex.EPS_SWEEP))
            except ValueError as e:
                problems["eps"] = str(e)
    if problems:
        raise ConfigError(problems)
    for k in ("h_levels", "eps", "lengths"):
        if k in flat:
            flat[k] = tuple(flat[k])
    for k in ("h0", "alpha", "h_step"):
        if k in flat:
            flat[k] = float(flat[k])
    return ExperimentConfig(**flat)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError({"<file>": f"not valid TOML: {e}"}) from None
    return parse_config(raw, seed_override)


# -- CSV helpers --------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_rows(path: Path, schema: str, seed, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}; seed={seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- manifest -----------------------------------------------------------------------


@dataclass
class RunManifest:
    kind: str
    config: dict
    config_hash: str
    version: str
    wall_clock_seconds: float
    seeds: dict
    files: list[str]
    metadata: dict = field(default_factory=dict)
    directory: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("directory")
        d["schema"] = "perturbmc.manifest/1"
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.is_file():
            raise MissingOutputError(f"manifest {path} does not exist")
        d = json.loads(path.read_text())
        d.pop("schema", None)
        return cls(**d, directory=str(path.parent))

    def path_of(self, name: str) -> Path:
        return Path(self.directory) / name


def resolve_output_dir(output_dir: str) -> Path:
    p = Path(output_dir)
    root = os.environ.get(OUTPUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


# -- experiment kinds -----------------------------------------------------------------


def _run_oracle_sweep(cfg: ExperimentConfig, out: Path) -> tuple[list[str], dict]:
    instances = ex.random_chain_sweeps(cfg.seed, cfg.n_chains, cfg.eps) + ex.discretized_sweeps(cfg.eps)
    rows = cr.sweep_rows(instances)
    cols = ["instance", "family", "sign", "eps", "op_norm", "kappa_base", "kappa_pert", "kappa_deficit",
            "chi2", "tv_kernel", "v_norm_kernel"]
    write_rows(out / "sweep.csv", "perturbmc.sweep/1", cfg.seed, cols, rows)
    exps = {i.label: i.sweep.exponents for i in instances}
    (out / "exponents.json").write_text(json.dumps(exps, indent=2, sort_keys=True))
    return ["sweep.csv", "exponents.json"], {}


def _run_mc_error(cfg: ExperimentConfig, out: Path) -> tuple[list[str], dict]:
    rows = ex.mc_error_experiment(cfg.seed, cfg.lengths, replicates=cfg.replicates)
    cols = ["chain", "f", "M", "kappa_hat", "var_f", "mse", "bound"]
    write_rows(out / "mc_error.csv", "perturbmc.mc-error/1", cfg.seed, cols, rows)
    return ["mc_error.csv"], {}


def _run_forward(cfg: ExperimentConfig, out: Path) -> tuple[list[str], dict]:
    rows = ex.forward_convergence(ip.THETA_TRUE, cfg.h0, sorted(cfg.h_levels), cfg.ref_level)
    write_rows(out / "forward.csv", "perturbmc.forward-convergence/1", cfg.seed, ["j", "h", "error", "log2_ratio"], rows)
    ip.write_trajectory_csv(ip.rk2_solve(ip.THETA_TRUE, ip.h_level(cfg.ref_level, cfg.h0)), out / "trajectory_ref.csv")
    return ["forward.csv", "trajectory_ref.csv"], {"metadata": {"rk2": ip.RK2_FLAVOR}}


def _posterior_tasks(cfg: ExperimentConfig, setup: ex.PosteriorSetup) -> list[ex.ChainTask]:
    level_ss = seed_sequence(cfg.seed).spawn(max(cfg.h_levels) + 1)
    tasks = []
    for j in sorted(cfg.h_levels):
        for r, s in enumerate(spawn_seeds(level_ss[j], cfg.replicates)):
            tasks.append(ex.ChainTask(cfg.kind, j, ip.h_level(j, cfg.h0), r, s, cfg.iterations, cfg.step_scale,
                                      setup, cfg.K, cfg.alpha, cfg.t_k, cfg.warmup_steps))
    return tasks


def _execute(tasks, workers: int) -> list[ex.ChainOutcome]:
    if workers == 1:
        results = []
        for t in tasks:
            log.info("chain %s level=%d replicate=%d", t.kind, t.level, t.replicate)
            results.append(ex.run_posterior_chain(t))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(ex.run_posterior_chain, tasks))
    # aggregation must not depend on completion order
    return sorted(results, key=lambda o: o.task_key)


def _run_sampler(cfg: ExperimentConfig, out: Path) -> tuple[list[str], dict]:
    data_seed = cfg.data_seed if cfg.data_seed is not None else cfg.seed
    setup = ex.posterior_setup(data_seed, cfg.h0)
    ip.write_observed_csv(setup.data, ip.ForwardSpec(ip.h_level(6, cfg.h0)), out / "observed.csv")
    write_rows(out / "laplace.csv", "perturbmc.laplace/1", cfg.seed, ["coordinate", "x_map", "sd"],
               [{"coordinate": i, "x_map": setup.x_map[i], "sd": math.sqrt(setup.cov[i, i])} for i in range(8)])
    tasks = _posterior_tasks(cfg, setup)
    outcomes = _execute(tasks, cfg.workers)
    files = ["observed.csv", "laplace.csv"]

    iat_rows, sample_rows, pooled = [], [], {}
    for o, t in zip(outcomes, sorted(tasks, key=lambda t: t.key)):
        for c in range(8):
            ok = o.status == "ok"
            iat_rows.append({
                "experiment": cfg.kind, "h": t.h, "coordinate": c, "replicate": t.replicate,
                "tau": o.taus[c] if ok else math.nan, "ess": o.ess[c] if ok else math.nan,
                "burn_in": o.burn_in, "acceptance_rate": o.acceptance_rate, "swap_rate": o.swap_rate,
                "seed": t.seed, "status": o.status,
            })
        if o.status == "ok":
            pooled.setdefault(t.h, []).append(o.samples)
            for i in range(0, o.samples.shape[0], cfg.thin):
                row = {"experiment": cfg.kind, "h": t.h, "replicate": t.replicate, "index": i}
                row.update({f"x{c}": o.samples[i, c] for c in range(8)})
                sample_rows.append(row)
    write_rows(out / "iat.csv", "perturbmc.iat/1", cfg.seed,
               ["experiment", "h", "coordinate", "replicate", "tau", "ess", "burn_in", "acceptance_rate",
                "swap_rate", "seed", "status"], iat_rows)
    write_rows(out / "samples.csv", "perturbmc.samples/1", cfg.seed,
               ["experiment", "h", "replicate", "index"] + [f"x{c}" for c in range(8)], sample_rows)
    files += ["iat.csv", "samples.csv"]

    hs = sorted(pooled)
    ks_rows = []
    for h_a, h_b in zip(hs, hs[1:]):
        A, B = np.concatenate(pooled[h_a]), np.concatenate(pooled[h_b])
        for c in range(8):
            ks_rows.append({"experiment": cfg.kind, "coordinate": c, "h_a": h_a, "h_b": h_b,
                            "ks": dg.ks_distance(A[:, c], B[:, c]), "n_a": A.shape[0], "n_b": B.shape[0]})
    write_rows(out / "ks.csv", "perturbmc.ks/1", cfg.seed, ["experiment", "coordinate", "h_a", "h_b", "ks", "n_a", "n_b"], ks_rows)
    files.append("ks.csv")

    if cfg.kind == "pt":
        betas = sm.tempering_ladder(cfg.K, cfg.alpha)
        write_rows(out / "ladder.csv", "perturbmc.ladder/1", cfg.seed, ["k", "beta"],
                   [{"k": k, "beta": b} for k, b in enumerate(betas)])
        files.append("ladder.csv")
    seeds = {"data_seed": data_seed, "chains": [{"h": t.h, "replicate": t.replicate, "seed": t.seed} for t in tasks]}
    meta = {"rk2": ip.RK2_FLAVOR, "preconditioner": "laplace@h_ref", "h_step": cfg.step_scale,
            "warmup": cfg.warmup_steps}
    return files, {"seeds": seeds, "metadata": meta}


_DISPATCH = {
    "oracle-sweep": _run_oracle_sweep,
    "mc-error": _run_mc_error,
    "forward-convergence": _run_forward,
    "rwm": _run_sampler,
    "mala": _run_sampler,
    "pt": _run_sampler,
}


def run(cfg: ExperimentConfig) -> RunManifest:
    """Execute ``cfg`` and write its outputs and ``manifest.json``."""
    out = resolve_output_dir(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    files, extra = _DISPATCH[cfg.kind](cfg, out)
    seeds = {"master": cfg.seed, **extra.get("seeds", {})}
    manifest = RunManifest(cfg.kind, cfg.to_dict(), cfg.config_hash(), __version__,
                           round(time.perf_counter() - t0, 3), seeds, files, extra.get("metadata", {}), str(out))
    (out / MANIFEST).write_text(manifest.to_json() + "\n")
    return manifest


# -- summary --------------------------------------------------------------------------


def evaluate(manifest: RunManifest) -> list[cr.CriterionResult]:
    """Criteria applicable to the manifest's experiment kind."""
    if not manifest.files:
        raise MissingOutputError("manifest lists no output files")
    for f in manifest.files:
        if not manifest.path_of(f).is_file():
            raise MissingOutputError(f"output {f} listed in manifest is missing")
    kind = manifest.kind
    if kind == "oracle-sweep":
        rows = read_rows(manifest.path_of("sweep.csv"))
        return [cr.gap_degradation(rows), cr.chi2_law(rows)]
    if kind == "mc-error":
        return [cr.mc_error(read_rows(manifest.path_of("mc_error.csv")))]
    if kind == "forward-convergence":
        return [cr.rk2_order(read_rows(manifest.path_of("forward.csv")))]
    iat = read_rows(manifest.path_of("iat.csv"))
    ks = read_rows(manifest.path_of("ks.csv"))
    failed = [r for r in iat if r["status"] != "ok"]
    results = [cr.iat_stability(iat, label=kind)]
    if ks:
        h_a, h_b = cr.finest_levels([r for r in iat if r["status"] == "ok"])
        finest = [r for r in ks if float(r["h_a"]) == h_a and float(r["h_b"]) == h_b]
        results.append(cr.marginal_stability(finest, label=kind))
    else:
        results.append(cr.CriterionResult(f"marginal-stability-{kind}", "no pooled samples", "KS rows", False))
    if failed:
        n = len({(r["h"], r["replicate"]) for r in failed})
        results.append(cr.CriterionResult(f"replicates-{kind}", f"{n} failed replicate(s)", "0", False))
    return results


def summarize(manifest_path) -> tuple[str, int]:
    """Human-readable pass/fail table and exit status (1 on any failure)."""
    manifest = RunManifest.load(manifest_path)
    results = evaluate(manifest)
    lines = [f"{manifest.kind} run {manifest.config_hash[:12]} (seed {manifest.seeds.get('master')})"]
    lines += [r.line() for r in results]
    return "\n".join(lines), 0 if all(r.passed for r in results) else 1
