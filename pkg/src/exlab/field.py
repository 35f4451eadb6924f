"""Grid realizations of stationary Gaussian fields.

Synthesis is by circulant embedding of the covariance on a padded torus,
which reproduces the target covariance exactly on the lattice whenever the
embedding circulant is nonnegative definite (Dietrich & Newsam).  The random
plane wave has a singular spectral measure and is synthesized instead as a
superposition of random plane waves.

All sampling operations are pure functions of (inputs, seed); samples are
immutable after creation.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from . import kernels
from .errors import ConditioningError, SynthesisError

log = logging.getLogger(__name__)

GRADIENT_STENCIL = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))  # /(12h)
SECOND_STENCIL = ((-2, -1.0), (-1, 16.0), (0, -30.0), (1, 16.0), (2, -1.0))  # /(12h^2)


@dataclass(frozen=True)
class GridSpec:
    """Simulation lattice for the box Lambda_R = [-R/2, R/2]^d.

    `padding` is extra margin (in correlation lengths) simulated beyond the
    box on every side so that torus wraparound cannot leak into Lambda_R.
    """

    dimension: int
    side_length: float
    spacing: float = 0.25
    padding: float = 8.0

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if not 0.0 < self.spacing <= 0.5:
            raise ValueError("spacing must be in (0, 0.5]")
        cells = self.side_length / self.spacing
        if abs(cells - round(cells)) > 1e-9 or round(cells) < 8:
            raise ValueError("side_length / spacing must be an integer >= 8")
        if self.padding < 0:
            raise ValueError("padding must be nonnegative")

    @property
    def n_cells(self) -> int:
        return int(round(self.side_length / self.spacing))

    @property
    def pad_cells(self) -> int:
        return int(math.ceil(self.padding / self.spacing - 1e-9))

    @property
    def n_sites(self) -> int:
        return self.n_cells + 2 * self.pad_cells + 1

    @property
    def origin(self) -> float:
        """Coordinate of lattice index 0 along every axis."""
        return -0.5 * self.side_length - self.pad_cells * self.spacing

    def axis(self) -> np.ndarray:
        return self.origin + self.spacing * np.arange(self.n_sites)

    def box(self) -> tuple[tuple[float, float], ...]:
        half = 0.5 * self.side_length
        return tuple((-half, half) for _ in range(self.dimension))

    def box_slices(self, box=None) -> tuple[slice, ...]:
        """Lattice slices covering a physical box, snapped inward."""
        if box is None:
            box = self.box()
        h = self.spacing
        out = []
        for lo, hi in box:
            i_lo = int(math.ceil((lo - self.origin) / h - 1e-9))
            i_hi = int(math.floor((hi - self.origin) / h + 1e-9))
            if i_lo < 0 or i_hi >= self.n_sites or i_hi - i_lo < 1:
                raise ValueError(f"box {box} exceeds the simulated region")
            out.append(slice(i_lo, i_hi + 1))
        return tuple(out)

    def index_of(self, point) -> tuple[int, ...]:
        """Lattice index of a point that must lie on the lattice."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        idx = (point - self.origin) / self.spacing
        snapped = np.round(idx)
        if np.max(np.abs(idx - snapped)) > 1e-6:
            raise ValueError(f"point {point} is not on the lattice")
        if np.any(snapped < 0) or np.any(snapped >= self.n_sites):
            raise ValueError(f"point {point} outside the simulated region")
        return tuple(int(i) for i in snapped)


@dataclass(frozen=True)
class FieldSample:
    """One realization on the simulated lattice (box plus padding)."""

    grid: GridSpec
    values: np.ndarray
    seed: int
    kernel: kernels.KernelSpec
    interpolation_t: float | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        self.values.setflags(write=False)

    def box_values(self, box=None) -> np.ndarray:
        return self.values[self.grid.box_slices(box)]


# ---------------------------------------------------------------------------
# circulant embedding
# ---------------------------------------------------------------------------

_EMBED_CACHE: dict = {}


def _embedding_spectrum(kernel: kernels.KernelSpec, grid: GridSpec):
    """sqrt(lambda / M_total) for the embedding circulant, with padding retries."""
    key = (kernel, grid)
    cached = _EMBED_CACHE.get(key)
    if cached is not None:
        return cached

    h = grid.spacing
    n = grid.n_sites
    tried = []
    for factor in (1, 2, 4):
        extra = grid.pad_cells * (factor - 1)
        m = sfft.next_fast_len(2 * (n - 1 + extra))
        idx = np.arange(m)
        wrap = np.minimum(idx, m - idx) * h
        s = np.zeros((m,) * grid.dimension)
        for axis in range(grid.dimension):
            shape = [1] * grid.dimension
            shape[axis] = m
            s = s + (wrap**2).reshape(shape)
        c = kernels.eval_radial(kernel, s)
        lam = np.fft.fftn(c).real
        del c, s
        lam_max = lam.max()
        lam_min = lam.min()
        tried.append((factor * grid.padding, lam_min))
        if lam_min >= -1e-8 * lam_max:
            break
    else:
        if lam_min < -1e-4 * lam_max:
            raise SynthesisError(
                f"circulant embedding for {kernel.family} kernel not nonnegative definite; "
                f"paddings tried: {[(p, f'{mn:.3e}') for p, mn in tried]}"
            )
        log.warning(
            "clipping negative embedding eigenvalues (min %.3e of max %.3e) for %s",
            lam_min, lam_max, kernel.family,
        )
    root = np.sqrt(np.maximum(lam, 0.0) / lam.size)
    if len(_EMBED_CACHE) >= 8:
        _EMBED_CACHE.pop(next(iter(_EMBED_CACHE)))
    _EMBED_CACHE[key] = root
    return root


def sample_field(kernel: kernels.KernelSpec, grid: GridSpec, seed: int) -> FieldSample:
    """Draw one realization with the kernel's exact lattice covariance.

    Deterministic in (kernel, grid, seed).  Random plane waves have a
    singular spectral measure; use sample_rpw for them.
    """
    if kernel.family == "random_plane_wave":
        raise ValueError("random_plane_wave has a singular spectral measure; use sample_rpw")
    if kernel.dimension != grid.dimension:
        raise ValueError("kernel and grid dimensions differ")
    root = _embedding_spectrum(kernel, grid)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    noise = rng.standard_normal(root.shape) + 1j * rng.standard_normal(root.shape)
    e = np.fft.fftn(root * noise)
    n = grid.n_sites
    del noise
    values = np.ascontiguousarray(e.real[(slice(0, n),) * grid.dimension])
    return FieldSample(grid=grid, values=values, seed=int(seed), kernel=kernel)


def sample_rpw(grid: GridSpec, n_waves: int = 1024, seed: int = 0) -> FieldSample:
    """Random plane wave: superposition of n_waves unit-wavelength plane waves.

    f(x) = n^{-1/2} sum_k [a_k cos(theta_k . x) + b_k sin(theta_k . x)] with
    theta_k uniform on the unit circle and a_k, b_k standard normal, so that
    Var f = 1 and the covariance converges to J_0 as n_waves grows.
    """
    if grid.dimension != 2:
        raise ValueError("sample_rpw is defined in dimension 2")
    if n_waves < 64:
        raise ValueError("n_waves must be >= 64")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
    a = rng.standard_normal(n_waves)
    b = rng.standard_normal(n_waves)
    ax = grid.axis()
    # a cos(k.x) + b sin(k.x) = Re[(a - i b) e^{i kx x1} e^{i ky x2}]
    u = np.exp(1j * np.outer(np.cos(angles), ax))  # (n_waves, n1)
    v = np.exp(1j * np.outer(np.sin(angles), ax))  # (n_waves, n2)
    coeff = (a - 1j * b) / math.sqrt(n_waves)
    values = np.ascontiguousarray(((coeff[:, None] * u).T @ v).real)
    return FieldSample(
        grid=grid, values=values, seed=int(seed), kernel=kernels.KernelSpec.random_plane_wave()
    )


def make_interpolation(base: FieldSample, copy: FieldSample, t: float) -> FieldSample:
    """Pointwise interpolation t * base + sqrt(1 - t^2) * copy.

    t = 1 returns the base values exactly and t = 0 the copy values exactly;
    for independent base/copy the result is equal in law to either.
    """
    if base.grid != copy.grid:
        raise ValueError("base and copy must share the same grid")
    if base.kernel != copy.kernel:
        raise ValueError("base and copy must share the same kernel")
    if base.seed == copy.seed:
        raise ValueError("base and copy must be independent (distinct seeds)")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 1.0:
        values = base.values
    elif t == 0.0:
        values = copy.values
    else:
        values = t * base.values + math.sqrt(1.0 - t * t) * copy.values
    return FieldSample(
        grid=base.grid, values=values, seed=base.seed, kernel=base.kernel, interpolation_t=float(t)
    )


# ---------------------------------------------------------------------------
# discrete jets and conditional (kriged) sampling
# ---------------------------------------------------------------------------


def _constraint_stencil(grid: GridSpec, point, alpha) -> list[tuple[tuple[int, ...], float]]:
    """(lattice index, weight) pairs realizing a value or 4th-order gradient functional."""
    base = grid.index_of(point)
    alpha = kernels.normalize_multi_index(alpha, grid.dimension)
    order = sum(alpha)
    if order == 0:
        return [(base, 1.0)]
    if order != 1:
        raise ValueError("constraints support multi-indices of order <= 1")
    axis = alpha.index(1)
    h = grid.spacing
    out = []
    for off, w in GRADIENT_STENCIL:
        idx = list(base)
        idx[axis] += off
        if not 0 <= idx[axis] < grid.n_sites:
            raise ValueError("gradient constraint stencil leaves the simulated region")
        out.append((tuple(idx), w / (12.0 * h)))
    return out


def _stencil_covariance(kernel, grid, st_a, st_b) -> float:
    """Cov(L_a f, L_b f) for two lattice stencil functionals."""
    h = grid.spacing
    total = 0.0
    for ia, wa in st_a:
        for ib, wb in st_b:
            s = sum((h * (x - y)) ** 2 for x, y in zip(ia, ib))
            total += wa * wb * float(kernels.eval_radial(kernel, s))
    return total


def constraint_gram(kernel: kernels.KernelSpec, grid: GridSpec, constraints) -> np.ndarray:
    """Covariance matrix of the discrete constraint functionals."""
    stencils = [_constraint_stencil(grid, p, a) for p, a, _ in constraints]
    m = len(stencils)
    gram = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            gram[i, j] = gram[j, i] = _stencil_covariance(kernel, grid, stencils[i], stencils[j])
    return gram


def _apply_stencil(values: np.ndarray, stencil) -> float:
    return float(sum(w * values[idx] for idx, w in stencil))


def sample_conditional_field(
    kernel: kernels.KernelSpec, grid: GridSpec, constraints, seed: int
) -> FieldSample:
    """Kriging residual sampler for jet constraints.

    constraints is a list of (point, multi_index, value) with |multi_index|
    <= 1; points must be lattice points and gradient functionals are the same
    4th-order stencils as jet_extraction, so the returned sample satisfies
    every constraint in the discrete sense to ~1e-10.
    """
    g = sample_field(kernel, grid, seed)
    if not constraints:
        return g
    stencils = [_constraint_stencil(grid, p, a) for p, a, _ in constraints]
    targets = np.array([float(v) for _, _, v in constraints])
    gram = constraint_gram(kernel, grid, constraints)
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e10:
        raise ConditioningError(f"constraint Gram matrix ill-conditioned (cond={cond:.3e})")

    observed = np.array([_apply_stencil(g.values, st) for st in stencils])
    weights = np.linalg.solve(gram, targets - observed)

    # regression functions c_j(x) = Cov(f(x), L_j f), evaluated on the lattice
    ax = grid.axis()
    values = np.array(g.values)
    h = grid.spacing
    for w_j, st in zip(weights, stencils):
        if w_j == 0.0:
            continue
        cov = np.zeros_like(values)
        for idx, w in st:
            s = np.zeros_like(values)
            for axis in range(grid.dimension):
                shape = [1] * grid.dimension
                shape[axis] = grid.n_sites
                s = s + ((ax - ax[idx[axis]]) ** 2).reshape(shape)
            cov += w * kernels.eval_radial(kernel, s)
        values += w_j * cov

    achieved = np.array([_apply_stencil(values, st) for st in stencils])
    if np.max(np.abs(achieved - targets)) > 1e-8:
        raise ConditioningError("kriging residual correction failed to meet constraints")
    return FieldSample(grid=grid, values=values, seed=int(seed), kernel=kernel)


def jet_extraction(sample: FieldSample, point):
    """(value, gradient, Hessian) at a lattice point by 4th-order differences.

    Exact for polynomials of degree <= 4; the point must be at least 2
    lattice steps from the simulated-region edge.
    """
    grid = sample.grid
    idx = grid.index_of(point)
    if any(i < 2 or i >= grid.n_sites - 2 for i in idx):
        raise ValueError("point too close to the simulated-region edge for a 5-point stencil")
    d = grid.dimension
    h = grid.spacing
    v = sample.values

    def at(offsets):
        return v[tuple(i + o for i, o in zip(idx, offsets))]

    value = float(at((0,) * d))
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    for axis in range(d):
        acc = 0.0
        for off, w in GRADIENT_STENCIL:
            o = [0] * d
            o[axis] = off
            acc += w * at(o)
        grad[axis] = acc / (12.0 * h)
        acc = 0.0
        for off, w in SECOND_STENCIL:
            o = [0] * d
            o[axis] = off
            acc += w * at(o)
        hess[axis, axis] = acc / (12.0 * h * h)
    for a in range(d):
        for b in range(a + 1, d):
            acc = 0.0
            for oa, wa in GRADIENT_STENCIL:
                for ob, wb in GRADIENT_STENCIL:
                    o = [0] * d
                    o[a], o[b] = oa, ob
                    acc += wa * wb * at(o)
            hess[a, b] = hess[b, a] = acc / (144.0 * h * h)
    return value, grad, hess


# ---------------------------------------------------------------------------
# flat binary dump
# ---------------------------------------------------------------------------

_MAGIC = b"EXLB"
_VERSION = 1


def write_sample(sample: FieldSample, path) -> None:
    """Dump to the flat binary format: EXLB header + row-major little-endian f64."""
    grid = sample.grid
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, grid.dimension))
        fh.write(struct.pack(f"<{grid.dimension}I", *sample.values.shape))
        fh.write(struct.pack("<d", grid.spacing))
        fh.write(struct.pack("<Q", sample.seed % 2**64))
        fh.write(np.ascontiguousarray(sample.values, dtype="<f8").tobytes())


def read_sample_raw(path):
    """Read a dump back as (dims, spacing, seed, values)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not an EXLB field dump")
        version, d = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported EXLB version {version}")
        dims = struct.unpack(f"<{d}I", fh.read(4 * d))
        (spacing,) = struct.unpack("<d", fh.read(8))
        (seed,) = struct.unpack("<Q", fh.read(8))
        values = np.frombuffer(fh.read(), dtype="<f8").reshape(dims)
    return dims, spacing, seed, values


def derive_seed(master_seed: int, index: int) -> int:
    """Deterministic per-replication seed from a master seed."""
    ss = np.random.SeedSequence([int(master_seed) % 2**64, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])
