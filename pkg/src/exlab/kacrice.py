"""Gaussian jet covariances, the determinant-of-covariance algebra, and
Kac-Rice critical/pivotal intensities under interpolation.

Jets are labeled lists of (point, field tag, multi-index) entries, where the
tag is "f" for the base field and "ft" for the interpolated field
t f + sqrt(1 - t^2) f~.  Covariance entries follow

    Cov(d^a f(x), d^b f(y)) = (-1)^|a| d^(a+b) K(y - x),

with an extra factor t between different tags.  Expectations of absolute
Hessian determinants have no closed form for correlated Gaussian matrices,
so they are estimated by antithetic Monte Carlo over the conditional law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import field as field_mod
from . import kernels, topology
from .errors import AssemblyError, ConditioningError, ReliabilityError

TAG_BASE = "f"
TAG_INTERP = "ft"


@dataclass(frozen=True)
class JetLabel:
    point: tuple[float, ...]
    tag: str
    alpha: tuple[int, ...]


@dataclass
class JetCovariance:
    labels: list[JetLabel]
    matrix: np.ndarray
    t: float

    def index_of(self, label: JetLabel) -> int:
        return self.labels.index(label)


@dataclass
class IntensityEstimate:
    value: float
    std_error: float
    n_samples: int
    level: float
    unstable_fraction: float | None = None

    def __post_init__(self):
        if self.value < 0 or self.std_error < 0:
            raise ValueError("intensity and standard error must be nonnegative")


def make_label(point, tag, alpha, dimension: int) -> JetLabel:
    point = tuple(float(c) for c in np.atleast_1d(np.asarray(point, dtype=float)))
    if len(point) != dimension:
        raise ValueError(f"point {point} has wrong dimension")
    if tag not in (TAG_BASE, TAG_INTERP):
        raise ValueError(f"field tag must be {TAG_BASE!r} or {TAG_INTERP!r}")
    return JetLabel(point, tag, kernels.normalize_multi_index(alpha, dimension))


def hessian_index_pairs(d: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(d) for j in range(i, d)]


def jet_entries(point, tag, dimension: int, *, value=True, gradient=False, hessian=False):
    """Labels for the requested jet pieces at one point, in canonical order."""
    out = []
    if value:
        out.append(make_label(point, tag, 0, dimension))
    if gradient:
        for axis in range(dimension):
            alpha = [0] * dimension
            alpha[axis] = 1
            out.append(make_label(point, tag, tuple(alpha), dimension))
    if hessian:
        for i, j in hessian_index_pairs(dimension):
            alpha = [0] * dimension
            alpha[i] += 1
            alpha[j] += 1
            out.append(make_label(point, tag, tuple(alpha), dimension))
    return out


def jet_covariance(kernel: kernels.KernelSpec, entries, t: float) -> JetCovariance:
    """Assemble the covariance matrix of a labeled Gaussian jet.

    Requires |alpha| <= 2 per entry (so |alpha| + |beta| <= 4 pairwise) and
    t in [0, 1]; validates positive semidefiniteness against a relative
    eigenvalue floor.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    labels = [
        e if isinstance(e, JetLabel) else make_label(e[0], e[1], e[2], kernel.dimension)
        for e in entries
    ]
    for lab in labels:
        if sum(lab.alpha) > 2:
            raise ValueError("jet entries support multi-indices of order <= 2")
    n = len(labels)
    mat = np.empty((n, n))
    for i, a in enumerate(labels):
        for j in range(i, n):
            b = labels[j]
            cross = 1.0 if a.tag == b.tag else t
            alpha_sum = tuple(x + y for x, y in zip(a.alpha, b.alpha))
            diff = np.array(b.point) - np.array(a.point)
            val = cross * (-1.0) ** sum(a.alpha) * kernels.eval_kernel_derivative(
                kernel, alpha_sum, diff
            )
            mat[i, j] = mat[j, i] = val
    mat = 0.5 * (mat + mat.T)
    floor = -1e-10 * max(np.trace(mat), 1.0)
    min_eig = float(np.linalg.eigvalsh(mat)[0])
    if min_eig < floor:
        raise AssemblyError(
            f"jet covariance not PSD: min eigenvalue {min_eig:.3e} below floor {floor:.3e}"
        )
    return JetCovariance(labels=labels, matrix=mat, t=float(t))


# ---------------------------------------------------------------------------
# DC algebra
# ---------------------------------------------------------------------------


def dc(cov: np.ndarray) -> float:
    """Determinant of a covariance matrix via its symmetric eigenfactorization.

    Computed in log-space; returns 0 when any pivot falls below
    1e-14 * trace (degenerate vector).
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("dc expects a square matrix")
    if cov.shape[0] == 0:
        return 1.0
    if not np.allclose(cov, cov.T, atol=1e-10 * max(1.0, np.abs(cov).max())):
        raise ValueError("dc expects a symmetric matrix")
    eigs = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    floor = 1e-14 * max(np.trace(cov), 0.0)
    if np.any(eigs <= floor):
        return 0.0
    return float(math.exp(np.sum(np.log(eigs))))


def conditional_moments(joint: JetCovariance, condition_labels, condition_values):
    """Gaussian regression: moments of the remaining jet given conditions.

    Returns (mean, covariance) of the non-conditioned entries given that the
    conditioned entries equal condition_values (all jets are centered).
    """
    cond_idx = [joint.index_of(lab) for lab in condition_labels]
    rest_idx = [i for i in range(len(joint.labels)) if i not in cond_idx]
    values = np.asarray(condition_values, dtype=float)
    if values.shape != (len(cond_idx),):
        raise ValueError("condition_values must match condition_labels")
    sigma = joint.matrix
    s_cc = sigma[np.ix_(cond_idx, cond_idx)]
    s_rc = sigma[np.ix_(rest_idx, cond_idx)]
    s_rr = sigma[np.ix_(rest_idx, rest_idx)]
    eigs = np.linalg.eigvalsh(s_cc)
    if eigs[0] <= 1e-12 * max(np.trace(s_cc), 1e-300):
        raise ConditioningError(
            f"conditioning block singular: min eigenvalue {eigs[0]:.3e} of trace {np.trace(s_cc):.3e}"
        )
    solve = linalg.cho_solve(linalg.cho_factor(s_cc), np.concatenate([values[:, None], s_rc.T], axis=1))
    mean = s_rc @ solve[:, 0]
    cov = s_rr - s_rc @ solve[:, 1:]
    return mean, 0.5 * (cov + cov.T)


def _gaussian_density(sigma: np.ndarray, values: np.ndarray) -> float:
    det = dc(sigma)
    if det == 0.0:
        raise ConditioningError("degenerate Gaussian vector has no density")
    quad = float(values @ np.linalg.solve(sigma, values))
    k = sigma.shape[0]
    return math.exp(-0.5 * quad) / math.sqrt((2.0 * math.pi) ** k * det)


def _vech_to_matrices(draws: np.ndarray, d: int) -> np.ndarray:
    """(n, d(d+1)/2) vech draws -> (n, d, d) symmetric matrices."""
    n = draws.shape[0]
    out = np.empty((n, d, d))
    for col, (i, j) in enumerate(hessian_index_pairs(d)):
        out[:, i, j] = draws[:, col]
        out[:, j, i] = draws[:, col]
    return out


def _sample_conditional(mean, cov, n: int, rng) -> np.ndarray:
    """Antithetic draws (2n rows) from N(mean, cov)."""
    eigs, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.maximum(eigs, 0.0))
    z = rng.standard_normal((n, len(mean)))
    shifted = z @ root.T
    return np.concatenate([mean + shifted, mean - shifted], axis=0)


def _antithetic_stats(weights: np.ndarray) -> tuple[float, float]:
    """(mean, standard error) treating antithetic halves as paired."""
    n = weights.shape[0] // 2
    pair = 0.5 * (weights[:n] + weights[n:])
    return float(pair.mean()), float(pair.std(ddof=1) / math.sqrt(n))


def one_point_critical_intensity(
    kernel: kernels.KernelSpec,
    level: float,
    restrict="all",
    n_samples: int = 200_000,
    seed: int = 0,
) -> IntensityEstimate:
    """Kac-Rice one-point critical intensity at a level, per unit volume and level.

    density of (f, grad f)(0) at (level, 0) times the conditional Monte Carlo
    mean of |det Hessian|, optionally restricted to one Morse index.
    """
    d = kernel.dimension
    origin = (0.0,) * d
    entries = jet_entries(origin, TAG_BASE, d, value=True, gradient=True, hessian=True)
    joint = jet_covariance(kernel, entries, t=1.0)
    cond_labels = entries[: 1 + d]
    values = np.zeros(1 + d)
    values[0] = level
    mean, cov = conditional_moments(joint, cond_labels, values)
    phi = _gaussian_density(joint.matrix[: 1 + d, : 1 + d], values)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws = _sample_conditional(mean, cov, n_samples // 2, rng)
    hess = _vech_to_matrices(draws, d)
    dets = np.linalg.det(hess)
    weights = np.abs(dets)
    if restrict != "all":
        index = int(restrict)
        if not 0 <= index <= d:
            raise ValueError("restrict must be 'all' or a Morse index in [0, d]")
        n_neg = np.sum(np.linalg.eigvalsh(hess) < 0.0, axis=1)
        weights = weights * (n_neg == index)
    mean_w, se_w = _antithetic_stats(weights)
    return IntensityEstimate(
        value=phi * mean_w, std_error=phi * se_w, n_samples=len(weights), level=float(level)
    )


def integrated_critical_intensity(
    kernel: kernels.KernelSpec,
    n_samples: int = 50_000,
    seed: int = 0,
    level_range: tuple[float, float] = (-6.0, 6.0),
    n_levels: int = 121,
) -> IntensityEstimate:
    """Total critical point density (intensity integrated over all levels).

    One set of conditional draws is reused across the level grid: the
    conditional Hessian mean is linear in the level while its covariance is
    level-free, so each draw yields a full level profile.
    """
    d = kernel.dimension
    origin = (0.0,) * d
    entries = jet_entries(origin, TAG_BASE, d, value=True, gradient=True, hessian=True)
    joint = jet_covariance(kernel, entries, t=1.0)
    cond_labels = entries[: 1 + d]
    unit = np.zeros(1 + d)
    unit[0] = 1.0
    mean_slope, cov = conditional_moments(joint, cond_labels, unit)  # mean at level=1
    sigma_vg = joint.matrix[: 1 + d, : 1 + d]

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws0 = _sample_conditional(np.zeros_like(mean_slope), cov, n_samples // 2, rng)
    levels = np.linspace(*level_range, n_levels)
    phis = np.array([_gaussian_density(sigma_vg, unit * ell) for ell in levels])
    profile = np.empty((draws0.shape[0], n_levels))
    for k, ell in enumerate(levels):
        hess = _vech_to_matrices(draws0 + ell * mean_slope, d)
        profile[:, k] = np.abs(np.linalg.det(hess))
    integrated = np.trapezoid(profile * phis, levels, axis=1)
    mean_w, se_w = _antithetic_stats(integrated)
    return IntensityEstimate(
        value=mean_w, std_error=se_w, n_samples=len(integrated), level=math.nan
    )


# ---------------------------------------------------------------------------
# two-point intensities and DC bounds
# ---------------------------------------------------------------------------


def _pair_entries(kernel, u, hessian: bool):
    d = kernel.dimension
    origin = (0.0,) * d
    labels = []
    labels += jet_entries(origin, TAG_BASE, d, value=True)
    labels += jet_entries(u, TAG_INTERP, d, value=True)
    labels += jet_entries(origin, TAG_BASE, d, value=False, gradient=True)
    labels += jet_entries(u, TAG_INTERP, d, value=False, gradient=True)
    if hessian:
        labels += jet_entries(origin, TAG_BASE, d, value=False, hessian=True)
        labels += jet_entries(u, TAG_INTERP, d, value=False, hessian=True)
    return labels


def two_point_critical_intensity(
    kernel: kernels.KernelSpec,
    level: float,
    t: float,
    u,
    k: int = 1,
    n_samples: int = 20_000,
    seed: int = 0,
) -> IntensityEstimate:
    """Two-point critical intensity I_t(0, u) of the pair (f, f^t) at a level.

    Density of (f(0), f^t(u), grad f(0), grad f^t(u)) at (level, level, 0, 0)
    times the conditional Monte Carlo estimate of
    E[|det H_f(0) det H_{f^t}(u)|^k]^(1/k).
    """
    d = kernel.dimension
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    if t == 1.0 and np.allclose(u_arr, 0.0):
        raise ValueError("singular configuration: t = 1 with u = 0 (diagonal excluded)")
    entries = _pair_entries(kernel, tuple(u_arr), hessian=True)
    joint = jet_covariance(kernel, entries, t=t)
    n_cond = 2 + 2 * d
    cond_labels = entries[:n_cond]
    values = np.zeros(n_cond)
    values[0] = values[1] = level
    mean, cov = conditional_moments(joint, cond_labels, values)
    phi = _gaussian_density(joint.matrix[:n_cond, :n_cond], values)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws = _sample_conditional(mean, cov, n_samples // 2, rng)
    m = d * (d + 1) // 2
    h1 = _vech_to_matrices(draws[:, :m], d)
    h2 = _vech_to_matrices(draws[:, m:], d)
    weights = np.abs(np.linalg.det(h1) * np.linalg.det(h2)) ** k
    mean_w, se_w = _antithetic_stats(weights)
    if mean_w <= 0.0:
        return IntensityEstimate(value=0.0, std_error=0.0, n_samples=len(weights), level=level)
    value = phi * mean_w ** (1.0 / k)
    se = phi * (1.0 / k) * mean_w ** (1.0 / k - 1.0) * se_w
    return IntensityEstimate(value=value, std_error=se, n_samples=len(weights), level=float(level))


def pair_jet_dc(kernel: kernels.KernelSpec, t: float, u) -> float:
    """F(t, u) = DC(f(0), f^t(u), grad f(0), grad f^t(u))."""
    entries = _pair_entries(kernel, tuple(np.atleast_1d(np.asarray(u, dtype=float))), hessian=False)
    return dc(jet_covariance(kernel, entries, t=t).matrix)


@dataclass
class DcBoundReport:
    """Numerical check of the near-diagonal DC lower bound."""

    min_ratio_near: float
    min_ratio_near_refined: float
    min_dc_far: float
    min_dc_far_refined: float

    @property
    def stable(self) -> bool:
        def close(a, b):
            return abs(a - b) <= 0.2 * max(abs(a), abs(b), 1e-300)

        return close(self.min_ratio_near, self.min_ratio_near_refined) and close(
            self.min_dc_far, self.min_dc_far_refined
        )

    @property
    def passed(self) -> bool:
        return (
            self.min_ratio_near > 0.0
            and self.min_dc_far > 0.0
            and self.stable
        )


def _dc_ratio_scan(kernel, t_grid, u_near, u_far):
    d = kernel.dimension
    near = math.inf
    for t in t_grid:
        for r in u_near:
            u = (r,) + (0.0,) * (d - 1)
            f_val = pair_jet_dc(kernel, t, u)
            bound = max((1.0 - t) ** 0.5, r) ** (2 * d) * (1.0 - t)
            near = min(near, f_val / bound)
    far = math.inf
    for t in t_grid:
        for r in u_far:
            u = (r,) + (0.0,) * (d - 1)
            far = min(far, pair_jet_dc(kernel, t, u))
    return near, far


def _refine_grid(values: np.ndarray) -> np.ndarray:
    mids = 0.5 * (values[:-1] + values[1:])
    return np.sort(np.concatenate([values, mids]))


def dc_lower_bound_check(
    kernel: kernels.KernelSpec,
    t_grid=None,
    u_near=None,
    u_far=None,
) -> DcBoundReport:
    """Scan F(t,u) / (max{(1-t)^(1/2), |u|}^(2d) (1-t)) for |u| <= 1 and
    F(t,u) for |u| >= 1; both minima must stay positive and move < 20%
    under a twofold grid refinement.
    """
    if t_grid is None:
        t_grid = np.concatenate([np.linspace(0.0, 0.9, 10), 1.0 - np.geomspace(0.1, 1e-3, 11)[1:]])
    if u_near is None:
        u_near = np.geomspace(0.01, 1.0, 12)
    if u_far is None:
        u_far = np.linspace(1.0, 5.0, 9)
    t_grid = np.asarray(t_grid, dtype=float)
    u_near = np.asarray(u_near, dtype=float)
    u_far = np.asarray(u_far, dtype=float)
    near, far = _dc_ratio_scan(kernel, t_grid, u_near, u_far)
    near2, far2 = _dc_ratio_scan(
        kernel, _refine_grid(t_grid), _refine_grid(u_near), _refine_grid(u_far)
    )
    return DcBoundReport(
        min_ratio_near=near,
        min_ratio_near_refined=near2,
        min_dc_far=far,
        min_dc_far_refined=far2,
    )


# ---------------------------------------------------------------------------
# pivotal intensities by conditional simulation
# ---------------------------------------------------------------------------


def discrete_jet_gram(kernel: kernels.KernelSpec, grid) -> np.ndarray:
    """Covariance of (f(0), discrete gradient at 0) used by the conditional sampler."""
    origin = (0.0,) * grid.dimension
    constraints = [(origin, 0, 0.0)]
    for axis in range(grid.dimension):
        alpha = [0] * grid.dimension
        alpha[axis] = 1
        constraints.append((origin, tuple(alpha), 0.0))
    return field_mod.constraint_gram(kernel, grid, constraints)


@dataclass
class PivotalScan:
    """Per-class one-point pivotal intensities from one conditional ensemble.

    difference_value is the signed estimate of (plus intensity - minus
    intensity) with a coupled standard error (both classes share the same
    conditional draws).
    """

    estimates: dict[str, IntensityEstimate]
    difference_value: float
    difference_se: float
    unstable_fraction: float
    excluded_weight: float  # intensity mass carried by excluded samples
    n_samples: int
    level: float

    @property
    def total_intensity(self) -> float:
        """Class sum plus excluded weight; estimates the full critical intensity."""
        return sum(e.value for e in self.estimates.values()) + self.excluded_weight


def one_point_pivotal_scan(
    kernel: kernels.KernelSpec,
    grid,
    level: float,
    star: str,
    n_samples: int,
    master_seed: int = 0,
    max_unstable_fraction: float = 0.2,
) -> PivotalScan:
    """Estimate all one-point pivotal intensities at a level from one ensemble.

    Draws conditional fields (f | f(0) = level, grad f(0) = 0), classifies
    the critical point at the origin with its stabilized pivotal class, and
    weights by |det Hessian|.  The density factor and the jet use the same
    4th-order discrete derivatives, so the estimator is self-consistent on
    the lattice.  Samples whose class never stabilizes are excluded and
    their fraction reported.
    """
    d = grid.dimension
    origin = (0.0,) * d
    constraints = [(origin, 0, level)]
    for axis in range(d):
        alpha = [0] * d
        alpha[axis] = 1
        constraints.append((origin, tuple(alpha), 0.0))
    gram = discrete_jet_gram(kernel, grid)
    values = np.zeros(1 + d)
    values[0] = level
    phi = _gaussian_density(gram, values)

    # per-sample weight |det H| and class; excluded samples keep weight 0 in
    # every class so that class intensities stay weight-faithful (dividing
    # the resolved subset instead would inflate all classes, because samples
    # that fail to stabilize have systematically small determinants)
    w = np.zeros(n_samples)
    excluded_w = np.zeros(n_samples)
    cls_arr = np.full(n_samples, topology.UNRESOLVED, dtype=object)
    n_unstable = 0
    for i in range(n_samples):
        seed_i = field_mod.derive_seed(master_seed, i)
        sample = field_mod.sample_conditional_field(kernel, grid, constraints, seed_i)
        _, _, hess = field_mod.jet_extraction(sample, origin)
        det = float(np.linalg.det(hess))
        cp = topology.CriticalPoint(
            location=np.zeros(d),
            value=float(level),
            gradient_residual=0.0,
            hessian=hess,
            morse_index=int(np.sum(np.linalg.eigvalsh(hess) < 0.0)),
        )
        if abs(det) <= 1e-8:
            n_unstable += 1
            excluded_w[i] = abs(det)
            continue
        cls, radius = topology.stabilized_class(sample, cp, star)
        if radius == topology.UNSTABLE or cls == topology.UNRESOLVED:
            n_unstable += 1
            excluded_w[i] = abs(det)
            continue
        w[i] = abs(det)
        cls_arr[i] = cls

    unstable_fraction = n_unstable / n_samples
    if unstable_fraction > max_unstable_fraction:
        raise ReliabilityError(
            f"unstable fraction {unstable_fraction:.2%} exceeds {max_unstable_fraction:.0%}; "
            "use a larger grid"
        )
    estimates = {}
    for cls in (topology.PLUS, topology.MINUS, topology.ZERO):
        contrib = w * (cls_arr == cls)
        estimates[cls] = IntensityEstimate(
            value=phi * float(contrib.mean()),
            std_error=phi * float(contrib.std(ddof=1) / math.sqrt(n_samples)),
            n_samples=n_samples,
            level=float(level),
            unstable_fraction=unstable_fraction,
        )
    signed = w * ((cls_arr == topology.PLUS).astype(float) - (cls_arr == topology.MINUS))
    return PivotalScan(
        estimates=estimates,
        difference_value=phi * float(signed.mean()),
        difference_se=phi * float(signed.std(ddof=1) / math.sqrt(n_samples)),
        unstable_fraction=unstable_fraction,
        excluded_weight=phi * float(excluded_w.mean()),
        n_samples=n_samples,
        level=float(level),
    )


def one_point_pivotal_intensity(
    kernel: kernels.KernelSpec,
    grid,
    level: float,
    star: str,
    sign: str,
    n_samples: int,
    master_seed: int = 0,
) -> IntensityEstimate:
    """One-point stationary pivotal intensity for one sign (PLUS or MINUS)."""
    if sign not in (topology.PLUS, topology.MINUS):
        raise ValueError("sign must be topology.PLUS or topology.MINUS")
    scan = one_point_pivotal_scan(kernel, grid, level, star, n_samples, master_seed)
    return scan.estimates[sign]


# ---------------------------------------------------------------------------
# variance upper bound integral
# ---------------------------------------------------------------------------


def variance_upper_bound(kernel: kernels.KernelSpec, R: float) -> float:
    """R^d times the integral of the mollified sup kernel over Lambda_{2R}.

    Tensor midpoint rule with cells <= 0.5, refined until the integral moves
    by < 1% (the unspecified theorem constant is not estimated, so only the
    growth exponent in R is meaningful).
    """
    if R < 1.0:
        raise ValueError("R must be >= 1")
    d = kernel.dimension
    r_max = R * math.sqrt(d) + 1.0
    radii, sup = kernels.sup_mollified_radial_table(kernel, r_max)

    def midpoint_integral(cell: float) -> float:
        n = int(math.ceil(2.0 * R / cell))
        cell_eff = 2.0 * R / n
        ax = -R + cell_eff * (np.arange(n) + 0.5)
        grids = np.meshgrid(*([ax] * d), indexing="ij")
        r = np.sqrt(sum(g * g for g in grids))
        vals = np.interp(r.ravel(), radii, sup)
        return float(vals.sum()) * cell_eff**d

    cell = 0.5
    integral = midpoint_integral(cell)
    for _ in range(3):
        cell /= 2.0
        refined = midpoint_integral(cell)
        if abs(refined - integral) <= 0.01 * abs(refined):
            integral = refined
            break
        integral = refined
    return R**d * integral
