"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the code paths they check: kernel
derivatives are verified against Richardson-extrapolated central
differences, and component counts against a hand-rolled breadth-first flood
fill with the same containment rule.
"""

import numpy as np
import pytest

from exlab import field as field_mod
from exlab import kernels


# ---------------------------------------------------------------------------
# finite-difference oracle for kernel derivatives
# ---------------------------------------------------------------------------


def fd_derivative(fn, alpha, x, h=1e-4):
    """Central finite difference of a scalar field for a multi-index, with
    one Richardson extrapolation step (h and h/2)."""

    def central(alpha, x, step):
        alpha = list(alpha)
        if sum(alpha) == 0:
            return fn(np.asarray(x, dtype=float))
        axis = next(i for i, a in enumerate(alpha) if a > 0)
        alpha[axis] -= 1
        xp = np.array(x, dtype=float)
        xm = np.array(x, dtype=float)
        xp[axis] += step
        xm[axis] -= step
        return (central(alpha, xp, step) - central(alpha, xm, step)) / (2.0 * step)

    coarse = central(alpha, x, h)
    fine = central(alpha, x, h / 2.0)
    return (4.0 * fine - coarse) / 3.0


def fd_kernel_derivative(spec, alpha, x, h=1e-4):
    return fd_derivative(lambda p: kernels.eval_kernel(spec, p), alpha, x, h)


# ---------------------------------------------------------------------------
# flood-fill oracle for excursion component counts
# ---------------------------------------------------------------------------


def flood_fill_count(mask):
    """(contained, boundary-touching) components of a binary mask, by BFS
    with face adjacency; a component touching the outermost layer is not
    contained."""
    mask = np.asarray(mask, dtype=bool)
    visited = np.zeros_like(mask)
    shape = mask.shape
    contained = touching = 0
    for start in np.argwhere(mask):
        start = tuple(start)
        if visited[start]:
            continue
        stack = [start]
        visited[start] = True
        touches = False
        while stack:
            cell = stack.pop()
            if any(c == 0 or c == n - 1 for c, n in zip(cell, shape)):
                touches = True
            for axis in range(mask.ndim):
                for step in (-1, 1):
                    nbr = list(cell)
                    nbr[axis] += step
                    if not 0 <= nbr[axis] < shape[axis]:
                        continue
                    nbr = tuple(nbr)
                    if mask[nbr] and not visited[nbr]:
                        visited[nbr] = True
                        stack.append(nbr)
        if touches:
            touching += 1
        else:
            contained += 1
    return contained, touching


def contour_count_oracle(sub, level):
    """Closed-contour count via excursion/complement duality: every
    contained contour bounds either a contained superlevel component or a
    contained sublevel component."""
    above, _ = flood_fill_count(sub >= level)
    below, _ = flood_fill_count(sub < level)
    return above + below


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def bf_kernel():
    return kernels.KernelSpec.bargmann_fock(2)


@pytest.fixture(scope="session")
def small_grid():
    return field_mod.GridSpec(2, 10.0, spacing=0.25, padding=2.0)


@pytest.fixture(scope="session")
def synthetic_field(bf_kernel, small_grid):
    """Factory turning an array-valued function of (X, Y) into a FieldSample."""
    ax = small_grid.axis()
    X, Y = np.meshgrid(ax, ax, indexing="ij")

    def make(fn):
        return field_mod.FieldSample(
            grid=small_grid, values=fn(X, Y), seed=0, kernel=bf_kernel
        )

    make.coords = (X, Y)
    return make
