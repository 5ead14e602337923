"""Monte Carlo experiments: convergence, variance, PRIV and timing studies.

Every replication draws from its own stream, derived from
``(master_seed, grid index, allocator index, rep)``. Results therefore do
not depend on how replications are spread over worker processes.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .allocators import DEFAULT_MAX_ITERS, DEFAULT_Q, CamParams, RerandParams, allocate_cam, allocate_cr, allocate_rr
from .balance import mahalanobis_from_whitened
from .errors import BalancerError, InsufficientData, InvalidInput
from .inference import OutcomeModel, ols, design_matrix, priv, simulate_outcomes, tau_hat, tau_tilde
from .model import UnitTable, estimate_covariance, whiten_array

RECORD_FIELDS = ("m", "tau_hat", "tau_tilde", "iterations", "wall_time", "failed")


@dataclass(frozen=True)
class AllocatorSpec:
    method: str
    q: float = DEFAULT_Q
    threshold: float | None = None
    acceptance: float | None = None
    max_iters: int = DEFAULT_MAX_ITERS
    label: str | None = None

    def __post_init__(self):
        if self.method not in ("CAM", "CR", "RR"):
            raise InvalidInput(f"unknown allocator {self.method!r}")
        if self.method == "RR":
            RerandParams(threshold=self.threshold, acceptance=self.acceptance, max_iters=self.max_iters)
        if self.method == "CAM":
            CamParams(q=self.q)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.method == "RR":
            if self.acceptance is not None:
                return f"RR(pa={self.acceptance:g})"
            return f"RR(M<{self.threshold:g})"
        return self.method

    def allocate(self, table: UnitTable, cov, seed: int):
        """Returns ``(allocation, iterations)``."""
        if self.method == "CR":
            return allocate_cr(table, seed), 1
        if self.method == "CAM":
            alloc, _ = allocate_cam(table, cov, CamParams(q=self.q, seed=seed))
            return alloc, 1
        return allocate_rr(table, cov, RerandParams(threshold=self.threshold, acceptance=self.acceptance,
                                                    max_iters=self.max_iters, seed=seed))


CAM = AllocatorSpec("CAM")
CR = AllocatorSpec("CR")


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run.

    ``generator`` is ``"normal"`` (fresh iid N(0, I) covariates every
    replication) or ``"fixed"`` (reuse ``table``; the grid must then hold its
    shape). ``regress`` turns on the covariate-adjusted estimator.
    """

    name: str
    grid: tuple
    reps: int
    allocators: tuple = (CAM,)
    generator: str = "normal"
    outcome: OutcomeModel | None = None
    master_seed: int = 0
    table: UnitTable | None = None
    regress: bool = False

    def __post_init__(self):
        grid = tuple((int(n), int(p)) for n, p in self.grid)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "allocators", tuple(self.allocators))
        if self.reps < 1:
            raise InvalidInput("reps must be >= 1")
        if not grid:
            raise InvalidInput("grid is empty")
        if not self.allocators:
            raise InvalidInput("no allocators given")
        if self.generator not in ("normal", "fixed"):
            raise InvalidInput(f"unknown generator {self.generator!r}")
        if self.generator == "fixed":
            if self.table is None:
                raise InvalidInput("fixed generator needs a table")
            if any((n, p) != (self.table.n, self.table.p) for n, p in grid):
                raise InvalidInput("grid cells must match the fixed table's shape")
        for n, p in grid:
            if n < 2 or p < 1:
                raise InvalidInput(f"bad grid cell {(n, p)}")
            if self.outcome is not None and self.regress and n <= p + 2:
                raise InvalidInput(f"cell {(n, p)} too small for regression")

    def cells(self) -> list[tuple[int, int, int]]:
        """(grid index, allocator index, cell index) in aggregation order."""
        out = []
        for gi in range(len(self.grid)):
            for ai in range(len(self.allocators)):
                out.append((gi, ai, len(out)))
        return out


def replication_streams(master_seed: int, grid_index: int, alloc_index: int, rep: int):
    """Independent ``(data, allocation, outcome)`` seed sequences for one replication."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(grid_index, alloc_index, rep))
    return ss.spawn(3)


def seed64(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


def mc_mean(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float(x.mean()) if x.size else math.nan, math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def mc_var(x) -> tuple[float, float]:
    """Sample variance and its standard error ``sqrt((m4 - s^4) / R)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return math.nan, math.nan
    v = float(x.var(ddof=1))
    c = x - x.mean()
    m4 = float(np.mean(c ** 4))
    return v, math.sqrt(max(m4 - v * v, 0.0) / x.size)


@dataclass
class CellResult:
    n: int
    p: int
    allocator: str
    reps: int
    records: dict
    mean_diff: np.ndarray
    failures: int = 0
    errors: list = field(default_factory=list)

    def ok(self) -> np.ndarray:
        return ~self.records["failed"]

    def values(self, key: str) -> np.ndarray:
        return self.records[key][self.ok()]

    def mean(self, key: str) -> tuple[float, float]:
        return mc_mean(self.values(key))

    def var(self, key: str) -> tuple[float, float]:
        return mc_var(self.values(key))

    def n_var(self, key: str) -> tuple[float, float]:
        v, se = self.var(key)
        return self.n * v, self.n * se

    def mse(self, key: str, truth: float) -> tuple[float, float]:
        return mc_mean((self.values(key) - truth) ** 2)

    def aggregates(self) -> dict:
        out = {"n": self.n, "p": self.p, "allocator": self.allocator, "reps": self.reps,
               "failures": self.failures}
        for key in ("m", "iterations", "tau_hat", "tau_tilde"):
            vals = self.values(key)
            if vals.size == 0 or np.all(np.isnan(vals)):
                continue
            m, se = mc_mean(vals)
            v, vse = mc_var(vals)
            out[key] = {"mean": m, "mean_se": se, "var": v, "var_se": vse}
        if self.errors:
            out["errors"] = list(self.errors)
        return out

    def timing(self) -> dict:
        w = self.values("wall_time")
        if w.size == 0:
            return {}
        return {"median": float(np.median(w)), "mean": float(w.mean()), "total": float(w.sum())}


def _generate(spec: ExperimentSpec, n: int, p: int, ss) -> UnitTable:
    if spec.generator == "fixed":
        return spec.table
    rng = np.random.default_rng(ss)
    return UnitTable(ids=(), X=rng.standard_normal((n, p)))


def _run_block(spec: ExperimentSpec, gi: int, ai: int, lo: int, hi: int) -> dict:
    n, p = spec.grid[gi]
    allocator = spec.allocators[ai]
    outcome = spec.outcome.resolve(p) if spec.outcome is not None else None
    size = hi - lo
    rec = {k: np.full(size, np.nan) for k in ("m", "tau_hat", "tau_tilde", "wall_time")}
    rec["iterations"] = np.zeros(size, dtype=np.int64)
    rec["failed"] = np.zeros(size, dtype=bool)
    mean_diff = np.full((size, p), np.nan)
    errors = []
    fixed_cov = estimate_covariance(spec.table) if spec.generator == "fixed" else None
    for k, rep in enumerate(range(lo, hi)):
        data_ss, alloc_ss, out_ss = replication_streams(spec.master_seed, gi, ai, rep)
        try:
            table = _generate(spec, n, p, data_ss)
            cov = fixed_cov or estimate_covariance(table)
            t0 = time.perf_counter()
            alloc, iters = allocator.allocate(table, cov, seed64(alloc_ss))
            rec["wall_time"][k] = time.perf_counter() - t0
            rec["iterations"][k] = iters
            arms = alloc.arms
            rec["m"][k] = mahalanobis_from_whitened(whiten_array(table.X, cov), arms)
            mean_diff[k] = table.X[arms == 1].mean(axis=0) - table.X[arms == 2].mean(axis=0)
            if outcome is not None:
                y = simulate_outcomes(table, alloc, outcome, seed64(out_ss))
                rec["tau_hat"][k] = tau_hat(y, alloc)
                if spec.regress:
                    rec["tau_tilde"][k] = tau_tilde(y, table, alloc)[0]
        except BalancerError as exc:
            rec["failed"][k] = True
            if len(errors) < 5:
                errors.append(f"rep {rep}: {exc}")
    return {"records": rec, "mean_diff": mean_diff, "errors": errors}


def _blocks(reps: int, jobs: int) -> list[tuple[int, int]]:
    size = reps if jobs <= 1 else max(1, math.ceil(reps / (4 * jobs)))
    return [(lo, min(reps, lo + size)) for lo in range(0, reps, size)]


def run_experiment(spec: ExperimentSpec, jobs: int = 1,
                   on_cell: Callable[[CellResult], None] | None = None) -> list[CellResult]:
    """Run every (grid cell, allocator) combination; one CellResult each."""
    results = []
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for gi, ai, _ in spec.cells():
            blocks = _blocks(spec.reps, jobs)
            if pool is None:
                parts = [_run_block(spec, gi, ai, lo, hi) for lo, hi in blocks]
            else:
                futures = [pool.submit(_run_block, spec, gi, ai, lo, hi) for lo, hi in blocks]
                parts = [f.result() for f in futures]
            rec = {key: np.concatenate([pt["records"][key] for pt in parts]) for key in RECORD_FIELDS}
            errors = [e for pt in parts for e in pt["errors"]][:5]
            n, p = spec.grid[gi]
            cell = CellResult(
                n=n, p=p, allocator=spec.allocators[ai].name, reps=spec.reps, records=rec,
                mean_diff=np.concatenate([pt["mean_diff"] for pt in parts]),
                failures=int(rec["failed"].sum()), errors=errors,
            )
            results.append(cell)
            if on_cell is not None:
                on_cell(cell)
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    return results


def find_cell(results: Sequence[CellResult], n: int, p: int, allocator: str) -> CellResult:
    for c in results:
        if (c.n, c.p, c.allocator) == (n, p, allocator):
            return c
    raise KeyError((n, p, allocator))


@dataclass(frozen=True)
class ConvergenceFit:
    slope: float
    intercept: float
    r2: float
    intercept_se: float
    intercept_se_regression: float


def convergence_fit(ns, means, ses=None) -> ConvergenceFit:
    """Least-squares line of mean M against 1/n.

    ``intercept_se`` propagates the per-point Monte Carlo errors ``ses``
    through the fit when given, else falls back to the residual-based error.
    """
    ns = np.asarray(ns, dtype=np.float64)
    y = np.asarray(means, dtype=np.float64)
    if ns.size < 4:
        raise InsufficientData("need at least 4 grid points")
    A = np.column_stack([np.ones_like(ns), 1.0 / ns])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    s2 = float(resid @ resid) / (ns.size - 2)
    reg_se = math.sqrt(s2 * np.linalg.inv(A.T @ A)[0, 0])
    if ses is not None:
        H = np.linalg.pinv(A)
        mc_se = math.sqrt(float((H[0] ** 2 * np.asarray(ses, dtype=np.float64) ** 2).sum()))
    else:
        mc_se = reg_se
    return ConvergenceFit(slope=float(coef[1]), intercept=float(coef[0]), r2=r2,
                          intercept_se=mc_se, intercept_se_regression=reg_se)


# ---------------------------------------------------------------------------
# Canned experiments
# ---------------------------------------------------------------------------

TABLE3_OUTCOME = OutcomeModel(mu1=0.0, mu2=1.0, beta=np.ones(4), noise_sd=6.0)


@dataclass(frozen=True)
class Table3Result:
    """n * Var of the unadjusted / adjusted estimators under CR and CAM."""

    cells: dict
    reps: int
    n: int

    def rows(self) -> list[tuple[str, str, float, float]]:
        return [(m, e, v, se) for (m, e), (v, se) in self.cells.items()]


def table3_experiment(reps: int = 2000, seed: int = 0, jobs: int = 1, n: int = 5000,
                      on_cell=None) -> Table3Result:
    if reps < 500:
        raise InvalidInput("table3 needs at least 500 replications")
    spec = ExperimentSpec(name="table3", grid=((n, 4),), reps=reps, allocators=(CR, CAM),
                          outcome=TABLE3_OUTCOME, master_seed=seed, regress=True)
    results = run_experiment(spec, jobs=jobs, on_cell=on_cell)
    cells = {}
    for c in results:
        cells[(c.allocator, "tau_hat")] = c.n_var("tau_hat")
        cells[(c.allocator, "tau_tilde")] = c.n_var("tau_tilde")
    return Table3Result(cells=cells, reps=reps, n=n)


def figure3_experiment(ns=(100, 200, 400, 800), ps=(4,), reps: int = 2000, seed: int = 0,
                       jobs: int = 1, on_cell=None) -> tuple[list[CellResult], dict]:
    """Mean CAM imbalance against 1/n, with a line fit per p."""
    spec = ExperimentSpec(name="figure3", grid=tuple((n, p) for p in ps for n in ns), reps=reps,
                          allocators=(CAM,), master_seed=seed)
    results = run_experiment(spec, jobs=jobs, on_cell=on_cell)
    fits = {}
    for p in ps:
        cells = [find_cell(results, n, p, "CAM") for n in ns]
        stats = [c.mean("m") for c in cells]
        fits[p] = convergence_fit(ns, [s[0] for s in stats], [s[1] for s in stats])
    return results, fits


def histogram(values, bins: int = 40, upper: float | None = None) -> dict:
    values = np.asarray(values, dtype=np.float64)
    hi = upper if upper is not None else float(np.quantile(values, 0.995)) if values.size else 1.0
    counts, edges = np.histogram(values, bins=bins, range=(0.0, max(hi, 1e-12)))
    return {"edges": edges.tolist(), "counts": counts.tolist(),
            "overflow": int(np.count_nonzero(values > hi))}


def figure1_experiment(ns=(50, 100, 500, 1000), ps=(2, 5, 10), reps: int = 1000, seed: int = 0,
                       acceptance: float = 0.3, jobs: int = 1, on_cell=None) -> tuple[list[CellResult], dict]:
    """M distributions for CAM and rerandomization across (n, p)."""
    rr = AllocatorSpec("RR", acceptance=acceptance)
    spec = ExperimentSpec(name="figure1", grid=tuple((n, p) for p in ps for n in ns), reps=reps,
                          allocators=(CAM, rr), master_seed=seed)
    results = run_experiment(spec, jobs=jobs, on_cell=on_cell)
    hists = {}
    for p in ps:
        upper = max(float(np.quantile(c.values("m"), 0.995)) for c in results if c.p == p)
        for c in results:
            if c.p == p:
                hists[(c.n, c.p, c.allocator)] = histogram(c.values("m"), upper=upper)
    return results, hists


def priv_surface(spec: ExperimentSpec, jobs: int = 1, on_cell=None) -> dict:
    """PRIV of the unadjusted estimator per (n, p, allocator) against CR.

    Returns ``{(n, p, allocator): (priv, se)}``; ``se`` comes from the delta
    method on the two independent variance estimates.
    """
    if spec.outcome is None:
        raise InvalidInput("priv_surface needs an outcome model")
    names = [a.name for a in spec.allocators]
    if "CR" not in names:
        spec = replace(spec, allocators=spec.allocators + (CR,))
    results = run_experiment(spec, jobs=jobs, on_cell=on_cell)
    out = {}
    for n, p in spec.grid:
        v_cr, se_cr = find_cell(results, n, p, "CR").var("tau_hat")
        for a in spec.allocators:
            if a.name == "CR":
                continue
            v, se = find_cell(results, n, p, a.name).var("tau_hat")
            ratio = v / v_cr
            ratio_se = ratio * math.sqrt((se / v) ** 2 + (se_cr / v_cr) ** 2)
            out[(n, p, a.name)] = (priv(v, v_cr), 100.0 * ratio_se)
    return out


def figure4_spec(ns=(100, 400, 1600), ps=(4,), reps: int = 2000, seed: int = 0,
                 acceptance: float = 0.1, noise_sd: float = 0.5) -> ExperimentSpec:
    """Default PRIV surface: beta = 1 per covariate, small noise (R^2 near 1)."""
    return ExperimentSpec(
        name="figure4", grid=tuple((n, p) for p in ps for n in ns), reps=reps,
        allocators=(CAM, AllocatorSpec("RR", acceptance=acceptance), CR),
        outcome=OutcomeModel(mu1=0.0, mu2=1.0, beta=np.ones(1), noise_sd=noise_sd),
        master_seed=seed,
    )


def figure2_experiment(grid=((100, 2), (200, 4), (400, 6)), reps: int = 100, seed: int = 0,
                       max_iters: int = 100_000) -> list[dict]:
    """Iterations and time rerandomization needs to match CAM's balance.

    The RR threshold for each cell is CAM's realized median M in that cell;
    medians are reported because capped RR runs count as failures.
    """
    out = []
    for n, p in grid:
        cam_spec = ExperimentSpec(name="figure2-cam", grid=((n, p),), reps=reps, master_seed=seed)
        cam = run_experiment(cam_spec)[0]
        target = float(np.median(cam.values("m")))
        rr = AllocatorSpec("RR", threshold=target, max_iters=max_iters)
        rr_spec = ExperimentSpec(name="figure2-rr", grid=((n, p),), reps=reps, allocators=(rr,),
                                 master_seed=seed + 1)
        rr_cell = run_experiment(rr_spec)[0]
        iters = np.where(rr_cell.records["failed"], max_iters, rr_cell.records["iterations"])
        t_cam = float(np.median(cam.values("wall_time")))
        t_rr = float(np.median(rr_cell.records["wall_time"][~np.isnan(rr_cell.records["wall_time"])])) \
            if rr_cell.failures < reps else math.inf
        out.append({"n": n, "p": p, "threshold": target,
                    "median_iterations": float(np.median(iters)),
                    "rr_failures": rr_cell.failures,
                    "median_time_cam": t_cam, "median_time_rr": t_rr,
                    "time_ratio": t_cam / t_rr if t_rr > 0 else math.nan})
    return out


def surrogate_real_data(n_units: int = 186, p: int = 50, seed: int = 0, replicate: int = 1,
                        n_continuous: int | None = None, target_r2: float = 0.33,
                        effect: float = -0.5) -> tuple[UnitTable, OutcomeModel, np.ndarray]:
    """Synthetic stand-in for a clinical covariate table and its fitted outcome.

    About 60% of the columns are 0-10 rating scales and the rest binary
    indicators, all loading on three shared factors so they correlate
    mildly. An outcome with roughly ``target_r2`` explained variance is drawn
    under a complete-randomization allocation, the linear model is refit by
    OLS, and the residuals become the resampling pool. ``replicate`` stacks
    the table that many times.
    """
    if n_units < p + 10:
        raise InsufficientData(f"need n_units >= p + 10 = {p + 10}, got {n_units}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    n_cont = int(round(0.6 * p)) if n_continuous is None else n_continuous
    n_bin = p - n_cont
    factors = rng.standard_normal((n_units, 3))
    load = rng.uniform(0.2, 0.6, size=(3, p)) * rng.choice([-1.0, 1.0], size=(3, p))
    latent = factors @ load + rng.standard_normal((n_units, p))
    latent /= latent.std(axis=0)
    X = np.empty((n_units, p))
    centers = rng.uniform(3.0, 7.0, size=n_cont)
    X[:, :n_cont] = np.clip(np.round(centers + 2.0 * latent[:, :n_cont]), 0, 10)
    prevalence = rng.uniform(0.25, 0.6, size=n_bin)
    cut = np.array([np.quantile(latent[:, n_cont + j], 1.0 - prevalence[j]) for j in range(n_bin)])
    X[:, n_cont:] = (latent[:, n_cont:] > cut).astype(np.float64)
    columns = tuple(f"score{j + 1}" for j in range(n_cont)) + tuple(f"flag{j + 1}" for j in range(n_bin))
    ids = tuple(f"P{i + 1:04d}" for i in range(n_units))
    table = UnitTable(ids=ids, X=X, columns=columns)

    beta = rng.normal(0.0, 1.0, size=p) * (rng.random(p) < 0.5)
    signal = (X - X.mean(axis=0)) @ beta
    sd_signal = float(signal.std())
    if sd_signal == 0.0:
        beta[0] = 1.0
        signal = (X - X.mean(axis=0)) @ beta
        sd_signal = float(signal.std())
    noise_sd = sd_signal * math.sqrt((1.0 - target_r2) / target_r2)
    original = allocate_cr(table, seed64(np.random.SeedSequence(seed, spawn_key=(8,))))
    t = original.treatment
    y = 5.0 + effect * t + X @ beta - X.mean(axis=0) @ beta + rng.normal(0.0, noise_sd, size=n_units)

    coef, _ = ols(design_matrix(original, table), y, ridge_policy="forbid")
    resid = y - design_matrix(original, table) @ coef
    model = OutcomeModel(mu1=float(coef[0]), mu2=float(coef[1]), beta=coef[2:],
                         noise_sd=float(resid.std(ddof=p + 2) if n_units > p + 2 else resid.std()),
                         noise_law="resample", residuals=resid)
    return table.replicate(replicate), model, resid


def surrogate_experiment(n_units: int = 186, replicate: int = 1, reps: int = 2000, seed: int = 0,
                         thresholds=(30.0, 40.0), jobs: int = 1, on_cell=None) -> list[dict]:
    """MSE and PRIV of the unadjusted estimator on the fixed surrogate table."""
    table, model, _ = surrogate_real_data(n_units=n_units, seed=seed, replicate=replicate)
    allocators = (CAM,) + tuple(AllocatorSpec("RR", threshold=a) for a in thresholds) + (CR,)
    spec = ExperimentSpec(name="surrogate", grid=((table.n, table.p),), reps=reps,
                          allocators=allocators, generator="fixed", table=table,
                          outcome=model, master_seed=seed)
    results = run_experiment(spec, jobs=jobs, on_cell=on_cell)
    cr = find_cell(results, table.n, table.p, "CR")
    mse_cr, _ = cr.mse("tau_hat", model.tau)
    rows = []
    for c in results:
        mse, se = c.mse("tau_hat", model.tau)
        row = {"n": c.n, "allocator": c.allocator, "mse": mse, "mse_se": se,
               "mean_m": c.mean("m")[0], "mean_iterations": c.mean("iterations")[0]}
        if c.allocator != "CR":
            row["priv"] = priv(mse, mse_cr)
        rows.append(row)
    return rows
