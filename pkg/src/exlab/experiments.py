"""Replicated simulation experiments: variance scaling, interpolation
covariance curves, sigma^2 estimation, and level derivatives of the mean
component density.

Replications are independent tasks with per-replication seeds derived from
the master seed, merged in replication index order, so outputs are
bit-identical for any worker count.  Quantities defined as differences or
covariances (the interpolation curve, the level derivative) use common
random numbers across the compared arms.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import field as field_mod
from . import kernels, topology
from .errors import SynthesisError


@dataclass(frozen=True)
class ExperimentConfig:
    kernel: kernels.KernelSpec
    level: float = 0.0
    star: str = topology.ES
    sizes: tuple[float, ...] = (20.0, 40.0, 80.0, 160.0)
    replications: int = 400
    t_grid: tuple[float, ...] = (0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)
    master_seed: int = 0
    spacing: float = 0.25
    padding: float = 8.0
    workers: int = 1
    n_waves: int = 1024
    dl: float = 0.1

    def __post_init__(self):
        if self.star not in topology.STARS:
            raise ValueError(f"star must be one of {topology.STARS}")
        sizes = tuple(float(s) for s in self.sizes)
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("sizes must be strictly increasing")
        if self.replications < 50:
            raise ValueError("replications must be >= 50 for variance estimates")
        t = tuple(float(v) for v in self.t_grid)
        if t != tuple(sorted(t)) or t[0] != 0.0 or t[-1] != 1.0:
            raise ValueError("t_grid must be sorted and include 0 and 1")
        if not 0.02 <= self.dl <= 0.2:
            raise ValueError("dl must lie in [0.02, 0.2]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def grid(self, size: float) -> field_mod.GridSpec:
        return field_mod.GridSpec(
            dimension=self.kernel.dimension,
            side_length=float(size),
            spacing=self.spacing,
            padding=self.padding,
        )


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    slope_ci_95: tuple[float, float]
    r_squared: float

    def __post_init__(self):
        lo, hi = self.slope_ci_95
        if not lo <= self.slope <= hi:
            raise ValueError("confidence interval must contain the slope")
        if not 0.0 <= self.r_squared <= 1.0 + 1e-12:
            raise ValueError("r_squared must lie in [0, 1]")


@dataclass
class VarianceScan:
    """Rows (R, mean_N, var_N, se_var) plus the raw counts per size."""

    rows: list[dict]
    counts: dict[float, np.ndarray] | None = None


@dataclass
class InterpolationScan:
    """Rows (t, cov_hat, se) plus the raw count matrix (replications x t)."""

    rows: list[dict]
    base_counts: np.ndarray | None = None
    interp_counts: np.ndarray | None = None


# ---------------------------------------------------------------------------
# replication plumbing
# ---------------------------------------------------------------------------


def _draw(kernel, grid, seed, n_waves):
    if kernel.family == "random_plane_wave":
        return field_mod.sample_rpw(grid, n_waves=n_waves, seed=seed)
    return field_mod.sample_field(kernel, grid, seed)


def _count_replication(args):
    kernel, grid, level, star, seed, n_waves = args
    sample = _draw(kernel, grid, seed, n_waves)
    return topology.count_components(sample, level, star)


def _interp_replication(args):
    kernel, grid, level, star, t_grid, seed_a, seed_b, n_waves = args
    base = _draw(kernel, grid, seed_a, n_waves)
    copy = _draw(kernel, grid, seed_b, n_waves)
    n_base = topology.count_components(base, level, star)
    row = []
    for t in t_grid:
        interp = field_mod.make_interpolation(base, copy, t)
        row.append(topology.count_components(interp, level, star))
    return n_base, row


def _mu_derivative_replication(args):
    kernel, grid, level, dl, star, seed, n_waves = args
    sample = _draw(kernel, grid, seed, n_waves)
    n_hi = topology.count_components(sample, level + dl, star)
    n_lo = topology.count_components(sample, level - dl, star)
    return n_hi, n_lo


def _parallel_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunk = max(1, len(items) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def _jackknife_se(values: np.ndarray, stat) -> float:
    n = len(values)
    loo = np.array([stat(np.delete(values, i)) for i in range(n)])
    return float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


# ---------------------------------------------------------------------------
# variance scaling
# ---------------------------------------------------------------------------


def run_variance_scan(config: ExperimentConfig) -> VarianceScan:
    """Component count mean/variance over replications for every box size."""
    rows = []
    counts = {}
    for size in config.sizes:
        grid = config.grid(size)
        tasks = [
            (
                config.kernel,
                grid,
                config.level,
                config.star,
                field_mod.derive_seed(config.master_seed, i),
                config.n_waves,
            )
            for i in range(config.replications)
        ]
        try:
            values = np.array(_parallel_map(_count_replication, tasks, config.workers), dtype=float)
        except SynthesisError as exc:
            raise RuntimeError(f"synthesis failed during variance scan at R={size}: {exc}") from exc
        var = float(values.var(ddof=1))
        se_var = _jackknife_se(values, lambda v: v.var(ddof=1))
        rows.append(
            {
                "R": float(size),
                "mean_N": float(values.mean()),
                "var_N": var,
                "se_var": se_var,
            }
        )
        counts[float(size)] = values
    return VarianceScan(rows=rows, counts=counts)


def fit_scaling(scan: VarianceScan, n_boot: int = 1000, seed: int = 0) -> ScalingFit:
    """OLS of log var_N on log R, with a bootstrap CI over replications."""
    rows = scan.rows
    if len(rows) < 4:
        raise ValueError("scaling fit needs at least 4 sizes")
    for row in rows:
        if row["var_N"] <= 0.0:
            raise ValueError(f"zero variance at R={row['R']}; cannot fit a log-log slope")
    log_r = np.log([row["R"] for row in rows])
    log_v = np.log([row["var_N"] for row in rows])
    slope, intercept = np.polyfit(log_r, log_v, 1)
    fitted = slope * log_r + intercept
    ss_res = float(np.sum((log_v - fitted) ** 2))
    ss_tot = float(np.sum((log_v - log_v.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - ss_res / ss_tot)

    if scan.counts is None:
        ci = (float(slope), float(slope))
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        slopes = np.empty(n_boot)
        arrays = [scan.counts[row["R"]] for row in rows]
        for b in range(n_boot):
            log_vb = []
            for arr in arrays:
                resampled = arr[rng.integers(0, len(arr), len(arr))]
                v = resampled.var(ddof=1)
                log_vb.append(np.log(v) if v > 0 else -np.inf)
            log_vb = np.array(log_vb)
            if np.any(~np.isfinite(log_vb)):
                slopes[b] = np.nan
                continue
            slopes[b] = np.polyfit(log_r, log_vb, 1)[0]
        good = slopes[np.isfinite(slopes)]
        ci = (float(np.quantile(good, 0.025)), float(np.quantile(good, 0.975)))
        ci = (min(ci[0], float(slope)), max(ci[1], float(slope)))
    return ScalingFit(
        slope=float(slope), intercept=float(intercept), slope_ci_95=ci, r_squared=float(r_squared)
    )


# ---------------------------------------------------------------------------
# interpolation covariance curve
# ---------------------------------------------------------------------------


def run_interpolation_scan(config: ExperimentConfig) -> InterpolationScan:
    """cov(N(f), N(f^t)) over the t grid at the first size, with common
    random numbers across t (one (f, f~) pair per replication)."""
    grid = config.grid(config.sizes[0])
    tasks = [
        (
            config.kernel,
            grid,
            config.level,
            config.star,
            config.t_grid,
            field_mod.derive_seed(config.master_seed, 2 * i),
            field_mod.derive_seed(config.master_seed, 2 * i + 1),
            config.n_waves,
        )
        for i in range(config.replications)
    ]
    try:
        results = _parallel_map(_interp_replication, tasks, config.workers)
    except SynthesisError as exc:
        raise RuntimeError(f"synthesis failed during interpolation scan: {exc}") from exc
    base = np.array([r[0] for r in results], dtype=float)
    interp = np.array([r[1] for r in results], dtype=float)

    rows = []
    m = len(base)
    for j, t in enumerate(config.t_grid):
        col = interp[:, j]
        cov = float(np.cov(base, col, ddof=1)[0, 1])
        paired = np.stack([base, col], axis=1)
        loo = np.array(
            [np.cov(np.delete(base, i), np.delete(col, i), ddof=1)[0, 1] for i in range(m)]
        )
        se = float(math.sqrt((m - 1) / m * np.sum((loo - loo.mean()) ** 2)))
        rows.append({"t": float(t), "cov_hat": cov, "se": se})
    return InterpolationScan(rows=rows, base_counts=base, interp_counts=interp)


@dataclass
class MonotoneConvexReport:
    monotonicity_violations: list[dict]
    convexity_violations: list[dict]

    @property
    def passed(self) -> bool:
        return not self.monotonicity_violations and not self.convexity_violations


def check_monotone_convex(rows: list[dict]) -> MonotoneConvexReport:
    """Flag first differences (monotonicity) and second differences
    (convexity) that are negative beyond twice their pooled standard error."""
    if len(rows) < 5:
        raise ValueError("monotonicity/convexity check needs at least 5 t points")
    t = np.array([row["t"] for row in rows])
    c = np.array([row["cov_hat"] for row in rows])
    se = np.array([row["se"] for row in rows])
    mono = []
    for j in range(len(c) - 1):
        diff = c[j + 1] - c[j]
        tol = 2.0 * math.sqrt(se[j] ** 2 + se[j + 1] ** 2)
        if diff < -tol:
            mono.append({"t_lo": float(t[j]), "t_hi": float(t[j + 1]), "diff": float(diff), "tol": tol})
    convex = []
    for j in range(len(c) - 2):
        second = c[j + 2] - 2.0 * c[j + 1] + c[j]
        tol = 2.0 * math.sqrt(se[j] ** 2 + 4.0 * se[j + 1] ** 2 + se[j + 2] ** 2)
        if second < -tol:
            convex.append({"t": float(t[j + 1]), "second_diff": float(second), "tol": tol})
    return MonotoneConvexReport(monotonicity_violations=mono, convexity_violations=convex)


# ---------------------------------------------------------------------------
# sigma^2 and the level derivative of the mean density
# ---------------------------------------------------------------------------


def estimate_sigma_squared(scan: VarianceScan, d: int) -> tuple[float, float]:
    """sigma^2 from the two largest sizes, extrapolating an R^(d-1) boundary term.

    With var = sigma^2 R^d + c R^(d-1), the pair (R1, R2) gives
    sigma^2 = (v2 / R2^(d-1) - v1 / R1^(d-1)) / (R2 - R1).
    """
    rows = sorted(scan.rows, key=lambda row: row["R"])
    if len(rows) < 2:
        raise ValueError("sigma^2 estimation needs at least two sizes")
    r1, v1, s1 = rows[-2]["R"], rows[-2]["var_N"], rows[-2]["se_var"]
    r2, v2, s2 = rows[-1]["R"], rows[-1]["var_N"], rows[-1]["se_var"]
    dr = r2 - r1
    sigma2 = (v2 / r2 ** (d - 1) - v1 / r1 ** (d - 1)) / dr
    se = math.sqrt((s2 / (r2 ** (d - 1) * dr)) ** 2 + (s1 / (r1 ** (d - 1) * dr)) ** 2)
    return float(sigma2), float(se)


def estimate_mu_derivative(
    kernel: kernels.KernelSpec,
    grid: field_mod.GridSpec,
    level: float,
    dl: float,
    replications: int,
    star: str = topology.ES,
    master_seed: int = 0,
    workers: int = 1,
    n_waves: int = 1024,
) -> tuple[float, float]:
    """Central difference of the mean component density in the level.

    Counts at level +/- dl share the same field per replication (common
    random numbers), so the difference is estimated with far smaller error
    than the two means.
    """
    if not 0.02 <= dl <= 0.2:
        raise ValueError("dl must lie in [0.02, 0.2]")
    tasks = [
        (kernel, grid, level, dl, star, field_mod.derive_seed(master_seed, i), n_waves)
        for i in range(replications)
    ]
    results = _parallel_map(_mu_derivative_replication, tasks, workers)
    volume = grid.side_length**grid.dimension
    per_rep = np.array([(hi - lo) for hi, lo in results], dtype=float) / (2.0 * dl * volume)
    return float(per_rep.mean()), float(per_rep.std(ddof=1) / math.sqrt(len(per_rep)))


# ---------------------------------------------------------------------------
# lattice refinement study
# ---------------------------------------------------------------------------


def run_h_refinement_study(config: ExperimentConfig, h_values) -> dict:
    """Mean component density versus lattice spacing, with Richardson
    extrapolation to h -> 0 from the three finest spacings."""
    h_values = sorted(float(h) for h in h_values)
    for coarse, fine in zip(h_values[1:], h_values[:-1]):
        if abs(coarse / fine - 2.0) > 1e-9:
            raise ValueError("h values must halve")
    size = config.sizes[0]
    volume = size**config.kernel.dimension
    rows = []
    for h in sorted(h_values, reverse=True):
        grid = field_mod.GridSpec(
            dimension=config.kernel.dimension,
            side_length=size,
            spacing=h,
            padding=config.padding,
        )
        tasks = [
            (
                config.kernel,
                grid,
                config.level,
                config.star,
                field_mod.derive_seed(config.master_seed, i),
                config.n_waves,
            )
            for i in range(config.replications)
        ]
        values = np.array(_parallel_map(_count_replication, tasks, config.workers), dtype=float)
        rows.append(
            {
                "h": h,
                "mean_density": float(values.mean() / volume),
                "se": float(values.std(ddof=1) / math.sqrt(len(values)) / volume),
            }
        )
    report = {"rows": rows, "extrapolated": None, "converged_h": None}
    dens = [row["mean_density"] for row in rows]  # coarse -> fine
    if len(dens) >= 3:
        d0, d1, d2 = dens[-3], dens[-2], dens[-1]
        if (d0 - d1) != 0 and (d1 - d2) / (d0 - d1) > 0:
            p = math.log2(abs((d0 - d1) / (d1 - d2)))
            if p > 0:
                report["extrapolated"] = d2 + (d2 - d1) / (2.0**p - 1.0)
    if report["extrapolated"] is None and len(dens) >= 2:
        report["extrapolated"] = dens[-1] + (dens[-1] - dens[-2])
    for coarse, fine in zip(rows[:-1], rows[1:]):
        if fine["mean_density"] != 0 and abs(
            coarse["mean_density"] - fine["mean_density"]
        ) < 0.01 * abs(fine["mean_density"]):
            report["converged_h"] = coarse["h"]
            break
    return report
