"""Covariance kernel families for smooth stationary Gaussian fields.

Every built-in family is isotropic with unit variance (K(0) = 1) and unit
correlation length, and can be written as K(x) = g(|x|^2) for a smooth radial
profile g.  Partial derivatives of K up to total order 4 are therefore exact:
each family supplies closed forms for g, g', ..., g'''' and a shared
chain-rule expansion turns those into arbitrary multi-index partials.

Families
--------
bargmann_fock       g(s) = exp(-s/2); spectral density is Gaussian.
cauchy              g(s) = (1+s)^(-beta/2), 0 < beta < d; heavy tails.
random_plane_wave   planar field with K(x) = J_0(|x|) (spectral mass on the
                    unit circle).
monochromatic       general-d analogue with spectral mass on a sphere of
                    radius `wave_number`.
table               cubic interpolation of a user-supplied radial table;
                    derivatives limited to total order 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, interpolate, special

FAMILIES = ("bargmann_fock", "cauchy", "random_plane_wave", "monochromatic", "table")

MAX_DERIVATIVE_ORDER = 4
TABLE_DERIVATIVE_ORDER = 2


class _Singular:
    """Marker returned by spectral_density for measures with no density."""

    __slots__ = ()

    def __repr__(self):
        return "SINGULAR"


SINGULAR = _Singular()


@dataclass(frozen=True)
class KernelSpec:
    """A covariance family with parameters.

    Immutable; all operations on it are pure, so instances are safe to share
    across threads and processes.
    """

    family: str
    dimension: int = 2
    beta: float | None = None
    wave_number: float = 1.0
    table: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.family == "cauchy":
            if self.beta is None or not 0.0 < self.beta < self.dimension:
                raise ValueError("cauchy kernel needs 0 < beta < dimension")
        if self.family == "random_plane_wave" and self.dimension != 2:
            raise ValueError("random_plane_wave is defined in dimension 2")
        if self.family in ("monochromatic", "random_plane_wave") and self.wave_number <= 0:
            raise ValueError("wave_number must be positive")
        if self.family == "table":
            if self.table is None:
                raise ValueError("table kernel needs a (radii, values) table")
            r = np.asarray(self.table[0], dtype=float)
            if r[0] != 0.0 or np.any(np.diff(r) <= 0):
                raise ValueError("table radii must increase strictly from 0")

    # ---- constructors ----

    @classmethod
    def bargmann_fock(cls, dimension: int = 2) -> "KernelSpec":
        return cls("bargmann_fock", dimension=dimension)

    @classmethod
    def cauchy(cls, beta: float, dimension: int = 2) -> "KernelSpec":
        return cls("cauchy", dimension=dimension, beta=beta)

    @classmethod
    def random_plane_wave(cls) -> "KernelSpec":
        return cls("random_plane_wave", dimension=2)

    @classmethod
    def monochromatic(cls, dimension: int = 2, wave_number: float = 1.0) -> "KernelSpec":
        return cls("monochromatic", dimension=dimension, wave_number=wave_number)

    @classmethod
    def from_table(cls, radii, values, dimension: int = 2) -> "KernelSpec":
        """Build a table kernel, normalizing to K(0) = 1."""
        r = np.asarray(radii, dtype=float)
        v = np.asarray(values, dtype=float)
        if r.shape != v.shape or r.ndim != 1 or r.size < 4:
            raise ValueError("table needs matching 1-d radii/values with >= 4 rows")
        if v[0] == 0.0:
            raise ValueError("table value at radius 0 must be nonzero")
        v = v / v[0]
        return cls("table", dimension=dimension, table=(tuple(r), tuple(v)))

    @classmethod
    def from_table_file(cls, path, dimension: int = 2) -> "KernelSpec":
        data = np.loadtxt(path)
        if data.ndim != 2 or data.shape[1] != 2:
            raise ValueError("table file must have two columns: radius, K-value")
        return cls.from_table(data[:, 0], data[:, 1], dimension=dimension)


# ---------------------------------------------------------------------------
# radial profiles: K(x) = g(s) with s = |x|^2
# ---------------------------------------------------------------------------


def _bessel_ratio(nu: float, r: np.ndarray) -> np.ndarray:
    """Gamma(nu+1) (2/r)^nu J_nu(r), continued to 1 at r = 0."""
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    small = r < 0.5
    if np.any(small):
        # power series in q = r^2/4; 10 terms give ~1e-16 for r < 0.5
        q = r[small] ** 2 / 4.0
        term = np.ones_like(q)
        acc = np.ones_like(q)
        for m in range(1, 11):
            term = term * (-q) / (m * (nu + m))
            acc += term
        out[small] = acc
    if np.any(~small):
        rl = r[~small]
        out[~small] = special.gamma(nu + 1.0) * (2.0 / rl) ** nu * special.jv(nu, rl)
    return out


@lru_cache(maxsize=64)
def _table_splines(spec: KernelSpec):
    r = np.asarray(spec.table[0])
    v = np.asarray(spec.table[1])
    base = interpolate.CubicSpline(r * r, v)
    return base, base.derivative(1), base.derivative(2)


def _radial_derivatives(spec: KernelSpec, s: np.ndarray, order: int) -> list[np.ndarray]:
    """[g(s), g'(s), ..., g^(order)(s)] for the family's radial profile."""
    s = np.asarray(s, dtype=float)
    if spec.family == "bargmann_fock":
        e = np.exp(-0.5 * s)
        return [(-0.5) ** k * e for k in range(order + 1)]
    if spec.family == "cauchy":
        b = spec.beta
        out = []
        coef = 1.0
        for k in range(order + 1):
            out.append(coef * (1.0 + s) ** (-b / 2.0 - k))
            coef *= -b / 2.0 - k
        return out
    if spec.family in ("random_plane_wave", "monochromatic"):
        nu = spec.dimension / 2.0 - 1.0
        a2 = spec.wave_number**2
        r = spec.wave_number * np.sqrt(np.maximum(s, 0.0))
        out = []
        coef = 1.0
        for k in range(order + 1):
            out.append(coef * _bessel_ratio(nu + k, r))
            coef *= -a2 / (4.0 * (nu + k + 1.0))
        return out
    if spec.family == "table":
        if order > TABLE_DERIVATIVE_ORDER:
            raise ValueError("table kernels support derivatives up to total order 2")
        splines = _table_splines(spec)
        s_max = spec.table[0][-1] ** 2
        inside = s <= s_max
        out = []
        for k in range(order + 1):
            vals = np.where(inside, splines[k](np.minimum(s, s_max)), 0.0)
            out.append(vals)
        return out
    raise AssertionError(spec.family)


# ---------------------------------------------------------------------------
# multi-index derivatives via the chain rule for g(|x|^2)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=512)
def _chain_terms(alpha: tuple[int, ...]) -> tuple[tuple[tuple[int, ...], int, float], ...]:
    """Expand d^alpha g(|x|^2) as sum of coeff * x^expo * g^(k)(|x|^2).

    Built by repeated application of d/dx_i [x^e g^(k)] =
    e_i x^(e - delta_i) g^(k) + 2 x^(e + delta_i) g^(k+1).
    """
    d = len(alpha)
    terms: dict[tuple[tuple[int, ...], int], float] = {((0,) * d, 0): 1.0}
    for axis, times in enumerate(alpha):
        for _ in range(times):
            new: dict[tuple[tuple[int, ...], int], float] = {}
            for (expo, k), c in terms.items():
                if expo[axis] > 0:
                    lower = list(expo)
                    lower[axis] -= 1
                    key = (tuple(lower), k)
                    new[key] = new.get(key, 0.0) + c * expo[axis]
                upper = list(expo)
                upper[axis] += 1
                key = (tuple(upper), k + 1)
                new[key] = new.get(key, 0.0) + 2.0 * c
            terms = new
    return tuple((expo, k, c) for (expo, k), c in sorted(terms.items()))


def normalize_multi_index(alpha, dimension: int) -> tuple[int, ...]:
    """Accept 0 (plain value) or a length-d tuple of nonnegative ints."""
    if isinstance(alpha, (int, np.integer)):
        if alpha != 0:
            raise ValueError("integer multi-index must be 0 (meaning no derivative)")
        return (0,) * dimension
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != dimension or any(a < 0 for a in alpha):
        raise ValueError(f"multi-index {alpha} invalid for dimension {dimension}")
    return alpha


def _as_points(x, dimension: int) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0 and dimension == 1:
        pts = pts.reshape(1)
    if pts.shape[-1] != dimension:
        raise ValueError(f"point shape {pts.shape} does not end in dimension {dimension}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def eval_radial(spec: KernelSpec, s) -> np.ndarray:
    """K as a function of squared radius s = |x|^2 (vectorized)."""
    return _radial_derivatives(spec, np.asarray(s, dtype=float), 0)[0]


def eval_kernel(spec: KernelSpec, x):
    """K(x); x may be a single point or an array of shape (..., d)."""
    pts = _as_points(x, spec.dimension)
    s = np.sum(pts * pts, axis=-1)
    val = eval_radial(spec, s)
    return float(val) if val.ndim == 0 else val


def eval_kernel_derivative(spec: KernelSpec, alpha, x):
    """Exact partial derivative d^alpha K at x, |alpha| <= 4.

    Table kernels are limited to |alpha| <= 2 (spline differentiation).
    """
    alpha = normalize_multi_index(alpha, spec.dimension)
    order = sum(alpha)
    if order > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"unsupported derivative order {order} > {MAX_DERIVATIVE_ORDER}")
    if spec.family == "table" and order > TABLE_DERIVATIVE_ORDER:
        raise ValueError("table kernels support derivatives up to total order 2")
    pts = _as_points(x, spec.dimension)
    s = np.sum(pts * pts, axis=-1)
    gs = _radial_derivatives(spec, s, order)
    total = np.zeros_like(s)
    for expo, k, coeff in _chain_terms(alpha):
        mono = coeff * np.ones_like(s)
        for axis, e in enumerate(expo):
            if e:
                mono = mono * pts[..., axis] ** e
        total = total + mono * gs[k]
    return float(total) if total.ndim == 0 else total


# ---------------------------------------------------------------------------
# spectral density
# ---------------------------------------------------------------------------


def _hankel_zeros(nu: float, q: float, count: int) -> np.ndarray:
    """First `count` positive zeros of J_nu(q r) in r."""
    if abs(nu - round(nu)) < 1e-12:
        z = special.jn_zeros(int(round(nu)), count)
    else:
        # half-integer orders: J_{1/2}(z) ~ sin(z), zeros near n*pi; refine by bisection
        z = np.pi * np.arange(1, count + 1)
        for _ in range(60):
            f = special.jv(nu, z)
            df = special.jvp(nu, z)
            z = z - f / df
    return z / q


@lru_cache(maxsize=4096)
def _radial_spectral_density(spec: KernelSpec, q: float) -> float:
    """Density of the spectral measure at |xi| = q via a radial Hankel transform.

    rho(q) = (2 pi)^(-d/2) q^(1-d/2) int_0^inf k(r) J_{d/2-1}(q r) r^(d/2) dr.
    The oscillatory tail is summed cycle-by-cycle between Bessel zeros with
    repeated averaging (Euler acceleration) so that slowly decaying kernels
    like Cauchy converge.
    """
    d = spec.dimension
    nu = d / 2.0 - 1.0

    def radial(r):
        return eval_radial(spec, np.asarray(r) ** 2)

    if spec.family == "table":
        r_max = spec.table[0][-1]
        if q == 0.0:
            val, _ = integrate.quad(lambda r: radial(r) * r ** (d - 1), 0.0, r_max, limit=200)
            return (2.0 * np.pi) ** (-d / 2.0) * 2.0 ** (1.0 - d / 2.0) / special.gamma(d / 2.0) * val
        val, _ = integrate.quad(
            lambda r: radial(r) * special.jv(nu, q * r) * r ** (d / 2.0), 0.0, r_max, limit=400
        )
        return (2.0 * np.pi) ** (-d / 2.0) * q ** (1.0 - d / 2.0) * val

    if q == 0.0:
        # for beta < d the integral int k(r) r^(d-1) dr diverges: density blows up at 0
        return math.inf

    def integrand(r):
        return radial(r) * special.jv(nu, q * r) * r ** (d / 2.0)

    n_cycles = 120
    cuts = np.concatenate([[0.0], _hankel_zeros(nu, q, n_cycles)])
    pieces = np.array(
        [integrate.quad(integrand, a, b, limit=50)[0] for a, b in zip(cuts[:-1], cuts[1:])]
    )
    partial = np.cumsum(pieces)
    tail = partial[-40:]
    for _ in range(12):  # repeated pairwise averaging of the alternating tail
        tail = 0.5 * (tail[:-1] + tail[1:])
    val = float(tail[-1])
    return (2.0 * np.pi) ** (-d / 2.0) * q ** (1.0 - d / 2.0) * val


def spectral_density(spec: KernelSpec, xi):
    """Density of the spectral measure at xi, or SINGULAR for sphere-supported measures."""
    if spec.family in ("random_plane_wave", "monochromatic"):
        return SINGULAR
    pts = _as_points(xi, spec.dimension)
    if pts.ndim != 1:
        raise ValueError("spectral_density takes a single point")
    q = float(np.linalg.norm(pts))
    if spec.family == "bargmann_fock":
        return (2.0 * np.pi) ** (-spec.dimension / 2.0) * math.exp(-0.5 * q * q)
    if spec.dimension not in (2, 3):
        raise ValueError("numeric spectral density implemented for d in {2, 3}")
    return _radial_spectral_density(spec, round(q, 12))


# ---------------------------------------------------------------------------
# mollified sup kernel
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _unit_ball_lattice(dimension: int) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, 7)
    grids = np.meshgrid(*([axis] * dimension), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    return pts[np.sum(pts * pts, axis=-1) <= 1.0 + 1e-12]


@lru_cache(maxsize=8)
def _shrink_offsets(dimension: int) -> np.ndarray:
    axis = np.array([-1.0, 0.0, 1.0])
    grids = np.meshgrid(*([axis] * dimension), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def kernel_sup_mollified(spec: KernelSpec, x):
    """K~(x) = sup of |K| over the closed unit ball around x.

    Maximizes |K| over a deterministic lattice in the unit ball (>= 5^d
    points) and then refines locally with a shrinking 3^d stencil, keeping
    candidates projected into the ball.  Guarantees K~(x) >= |K(x)|.
    """
    pts = _as_points(x, spec.dimension)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    lattice = _unit_ball_lattice(spec.dimension)  # (k, d)
    cand = pts[:, None, :] + lattice[None, :, :]  # (m, k, d)
    vals = np.abs(eval_radial(spec, np.sum(cand * cand, axis=-1)))
    best = np.argmax(vals, axis=1)
    best_val = vals[np.arange(len(pts)), best]
    offset = lattice[best]  # (m, d)

    stencil = _shrink_offsets(spec.dimension)  # (3^d, d)
    step = 1.0 / 3.0
    for _ in range(10):
        trial = offset[:, None, :] + step * stencil[None, :, :]
        norms = np.linalg.norm(trial, axis=-1, keepdims=True)
        trial = np.where(norms > 1.0, trial / np.maximum(norms, 1e-300), trial)
        cand = pts[:, None, :] + trial
        vals = np.abs(eval_radial(spec, np.sum(cand * cand, axis=-1)))
        pick = np.argmax(vals, axis=1)
        improved = vals[np.arange(len(pts)), pick] > best_val
        best_val = np.where(improved, vals[np.arange(len(pts)), pick], best_val)
        offset = np.where(improved[:, None], trial[np.arange(len(pts)), pick], offset)
        step *= 0.5

    return float(best_val[0]) if single else best_val


def sup_mollified_radial_table(spec: KernelSpec, r_max: float, step: float = 1e-3):
    """(radii, K~ values) on a fine radial grid.

    For isotropic kernels the sup over the unit ball around x equals the sup
    of |k| over radii [max(0, |x|-1), |x|+1]; this computes it with a sliding
    window maximum, which is what variance-bound integrals use for speed.
    """
    from scipy.ndimage import maximum_filter1d

    r = np.arange(0.0, r_max + 1.0 + step, step)
    vals = np.abs(eval_radial(spec, r * r))
    half = int(round(1.0 / step))
    sup = maximum_filter1d(vals, size=2 * half + 1, mode="constant", cval=-np.inf)
    return r, sup
