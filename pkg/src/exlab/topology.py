"""Component counting and pivotal classification of critical points.

Counting conventions: a component counts toward a box when it intersects the
box but not its boundary.  On the lattice that means no component cell lies
in the outermost cell layer of the box (excursion sets, face adjacency), and
no contour vertex comes within one lattice cell of the box edge (level sets,
marching squares with the center-average saddle rule).

Pivotal classification is literal: perturb the field by a compactly
supported bump at the critical point, at its critical value, and recount.
A class is accepted only if it is reproduced for three halvings of the bump
amplitude.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import interpolate, ndimage, spatial

from .field import FieldSample

log = logging.getLogger(__name__)

PLUS = "plus"
MINUS = "minus"
ZERO = "zero"
UNRESOLVED = "unresolved"
UNSTABLE = "unstable"

ES = "ES"
LS = "LS"

STARS = (ES, LS)


@dataclass
class ComponentCount:
    """Counts of components contained in a box at one level."""

    box: tuple[tuple[float, float], ...]
    level: float
    n_excursion: int
    n_level: int | None = None
    n_boundary_touching: int = 0


@dataclass
class CriticalPoint:
    location: np.ndarray
    value: float
    gradient_residual: float
    hessian: np.ndarray
    morse_index: int
    pivotal_es: str = UNRESOLVED
    pivotal_ls: str = UNRESOLVED
    stabilization_radius: float | str | None = None

    @property
    def degenerate(self) -> bool:
        return abs(float(np.linalg.det(self.hessian))) <= 1e-8


# ---------------------------------------------------------------------------
# excursion components (union-find labeling, face adjacency)
# ---------------------------------------------------------------------------


def _excursion_counts(mask: np.ndarray) -> tuple[int, int]:
    """(contained components, boundary-touching components) of a binary mask."""
    labels, total = ndimage.label(mask)  # default structure = face adjacency
    if total == 0:
        return 0, 0
    edge_labels = set()
    for axis in range(mask.ndim):
        edge_labels.update(np.unique(labels.take(0, axis=axis)))
        edge_labels.update(np.unique(labels.take(-1, axis=axis)))
    edge_labels.discard(0)
    return total - len(edge_labels), len(edge_labels)


def count_excursion_components(sample: FieldSample, level: float, box=None) -> ComponentCount:
    """Components of {f >= level} contained in the box (2d-neighbor connectivity)."""
    if box is None:
        box = sample.grid.box()
    sub = sample.box_values(box)
    n_in, n_edge = _excursion_counts(sub >= level)
    n_level = None
    if sample.grid.dimension == 2:
        n_level = _count_level_loops(sub, level)
    return ComponentCount(
        box=tuple(tuple(b) for b in box),
        level=float(level),
        n_excursion=n_in,
        n_level=n_level,
        n_boundary_touching=n_edge,
    )


# ---------------------------------------------------------------------------
# level components (marching squares)
# ---------------------------------------------------------------------------


def _marching_segments(sub: np.ndarray, level: float):
    """Segments as pairs of global edge ids; center-average rule at saddles.

    Edge ids: (0, i, j) crosses sites (i, j)-(i+1, j); (1, i, j) crosses
    (i, j)-(i, j+1).
    """
    b = sub > level
    c00 = b[:-1, :-1]
    c10 = b[1:, :-1]
    c01 = b[:-1, 1:]
    c11 = b[1:, 1:]
    code = c00.astype(np.int8) + 2 * c10 + 4 * c11 + 8 * c01
    segments = []
    cells = np.argwhere((code > 0) & (code < 15))
    for i, j in cells:
        pattern = int(code[i, j])
        bottom = (0, i, j)        # p00-p10
        top = (0, i, j + 1)       # p01-p11
        left = (1, i, j)          # p00-p01
        right = (1, i + 1, j)     # p10-p11
        if pattern in (1, 14):
            segments.append((bottom, left))
        elif pattern in (2, 13):
            segments.append((bottom, right))
        elif pattern in (4, 11):
            segments.append((top, right))
        elif pattern in (8, 7):
            segments.append((top, left))
        elif pattern in (3, 12):
            segments.append((left, right))
        elif pattern in (6, 9):
            segments.append((bottom, top))
        else:  # 5 or 10: saddle cell, resolve with the cell-center average
            center_high = (sub[i, j] + sub[i + 1, j] + sub[i, j + 1] + sub[i + 1, j + 1]) / 4.0 > level
            diag_00_11 = pattern == 5  # p00 and p11 on the high side
            if diag_00_11 == center_high:
                segments.append((bottom, right))
                segments.append((top, left))
            else:
                segments.append((bottom, left))
                segments.append((top, right))
    return segments


def _edge_vertex(sub: np.ndarray, level: float, edge) -> tuple[float, float]:
    kind, i, j = edge
    if kind == 0:
        v0, v1 = sub[i, j], sub[i + 1, j]
        frac = (level - v0) / (v1 - v0)
        return (i + frac, float(j))
    v0, v1 = sub[i, j], sub[i, j + 1]
    frac = (level - v0) / (v1 - v0)
    return (float(i), j + frac)


def _count_level_loops(sub: np.ndarray, level: float) -> int:
    """Closed marching-squares contours staying a cell away from the box edge."""
    while np.any(sub == level):  # avoid lattice-value collisions
        level += 1e-12
    segments = _marching_segments(sub, level)
    if not segments:
        return 0
    adjacency: dict = {}
    for a, b in segments:
        adjacency.setdefault(a, []).append(b)
        adjacency.setdefault(b, []).append(a)

    n0, n1 = sub.shape
    count = 0
    visited = set()
    for start in adjacency:
        if start in visited or len(adjacency[start]) != 2:
            continue
        # walk the cycle (open paths contain a degree-1 edge and are skipped)
        loop = [start]
        prev, cur = None, start
        closed = True
        while True:
            nbrs = adjacency[cur]
            if len(nbrs) != 2:
                closed = False
                break
            nxt = nbrs[0] if nbrs[0] != prev else nbrs[1]
            if nxt == start:
                break
            loop.append(nxt)
            prev, cur = cur, nxt
        visited.update(loop)
        if not closed:
            continue
        ok = True
        for edge in loop:
            x, y = _edge_vertex(sub, level, edge)
            if x < 1.0 or y < 1.0 or x > n0 - 2.0 or y > n1 - 2.0:
                ok = False
                break
        if ok:
            count += 1
    return count


def count_level_components(sample: FieldSample, level: float, box=None) -> int:
    """Number of closed level-set contours contained in the box (d = 2 only)."""
    if sample.grid.dimension != 2:
        raise ValueError("level-set counting is implemented for d = 2 only")
    if box is None:
        box = sample.grid.box()
    return _count_level_loops(sample.box_values(box), float(level))


def count_components(sample: FieldSample, level: float, star: str, box=None) -> int:
    if star == ES:
        return count_excursion_components(sample, level, box).n_excursion
    if star == LS:
        return count_level_components(sample, level, box)
    raise ValueError(f"star must be one of {STARS}")


def _count_array(sub: np.ndarray, level: float, star: str) -> int:
    if star == ES:
        return _excursion_counts(sub >= level)[0]
    return _count_level_loops(sub, level)


# ---------------------------------------------------------------------------
# critical points
# ---------------------------------------------------------------------------


def _cell_sign_change(arr: np.ndarray) -> np.ndarray:
    corners = (arr[:-1, :-1], arr[1:, :-1], arr[:-1, 1:], arr[1:, 1:])
    lo = np.minimum.reduce(corners)
    hi = np.maximum.reduce(corners)
    # non-strict so that zeros exactly on lattice lines still seed a cell
    return (lo <= 0.0) & (hi >= 0.0) & ((lo < 0.0) | (hi > 0.0))


def find_critical_points(sample: FieldSample, level_window, box=None) -> list[CriticalPoint]:
    """Locate critical points with value in (lo, hi) by Newton refinement.

    Lattice cells where both discrete gradient components change sign seed
    Newton iterations on a bicubic spline of the array (steps clamped to one
    cell, max 30 iterations); points closer than h/2 are deduplicated.
    """
    grid = sample.grid
    if grid.dimension != 2:
        raise ValueError("critical point search is implemented for d = 2 only")
    lo, hi = level_window
    if not lo < hi:
        raise ValueError("level window must be nonempty")
    if box is None:
        box = grid.box()
    slices = grid.box_slices(box)
    h = grid.spacing
    margin = 4
    ext = tuple(
        slice(max(s.start - margin, 0), min(s.stop + margin, grid.n_sites)) for s in slices
    )
    arr = sample.values[ext]
    ax = grid.axis()
    x_ax = ax[ext[0]]
    y_ax = ax[ext[1]]

    gx, gy = np.gradient(arr, h)
    cand = _cell_sign_change(gx) & _cell_sign_change(gy)
    cells = np.argwhere(cand)
    if len(cells) == 0:
        return []

    spline = interpolate.RectBivariateSpline(x_ax, y_ax, arr, kx=3, ky=3, s=0)
    px = x_ax[cells[:, 0]] + 0.5 * h
    py = y_ax[cells[:, 1]] + 0.5 * h

    for _ in range(30):
        gx_v = spline.ev(px, py, dx=1)
        gy_v = spline.ev(px, py, dy=1)
        hxx = spline.ev(px, py, dx=2)
        hxy = spline.ev(px, py, dx=1, dy=1)
        hyy = spline.ev(px, py, dy=2)
        det = hxx * hyy - hxy * hxy
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        sx = -(hyy * gx_v - hxy * gy_v) / det
        sy = -(-hxy * gx_v + hxx * gy_v) / det
        sx = np.clip(sx, -h, h)
        sy = np.clip(sy, -h, h)
        px = np.clip(px + sx, x_ax[0], x_ax[-1])
        py = np.clip(py + sy, y_ax[0], y_ax[-1])

    gx_v = spline.ev(px, py, dx=1)
    gy_v = spline.ev(px, py, dy=1)
    residual = np.hypot(gx_v, gy_v)
    values = spline.ev(px, py)
    (bx0, bx1), (by0, by1) = box
    keep = (
        (residual < 1e-6)
        & (values > lo)
        & (values < hi)
        & (px >= bx0) & (px <= bx1) & (py >= by0) & (py <= by1)
    )
    if not np.any(keep):
        return []
    pts = np.stack([px[keep], py[keep]], axis=1)
    res = residual[keep]
    vals = values[keep]

    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts, res, vals = pts[order], res[order], vals[order]
    tree = spatial.cKDTree(pts)
    taken = np.zeros(len(pts), dtype=bool)
    out = []
    for i in range(len(pts)):
        if taken[i]:
            continue
        group = tree.query_ball_point(pts[i], r=0.5 * h)
        rep = min(group, key=lambda j: res[j])
        taken[group] = True
        x, y = pts[rep]
        hxx = float(spline.ev(x, y, dx=2))
        hxy = float(spline.ev(x, y, dx=1, dy=1))
        hyy = float(spline.ev(x, y, dy=2))
        hess = np.array([[hxx, hxy], [hxy, hyy]])
        index = int(np.sum(np.linalg.eigvalsh(hess) < 0.0))
        out.append(
            CriticalPoint(
                location=pts[rep].copy(),
                value=float(vals[rep]),
                gradient_residual=float(res[rep]),
                hessian=hess,
                morse_index=index,
            )
        )
    return out


# ---------------------------------------------------------------------------
# pivotal classification by direct perturbation
# ---------------------------------------------------------------------------


def _bump_patch(grid, slices, cp_location, width: float):
    """(index arrays, bump values) for lattice sites of the sub-box within the bump."""
    ax = grid.axis()
    h = grid.spacing
    coords = [ax[s] for s in slices]
    lo_idx = []
    hi_idx = []
    for c, x0 in zip(coords, cp_location):
        lo_idx.append(int(np.searchsorted(c, x0 - width, side="left")))
        hi_idx.append(int(np.searchsorted(c, x0 + width, side="right")))
    ranges = [np.arange(lo, hi) for lo, hi in zip(lo_idx, hi_idx)]
    if any(r.size == 0 for r in ranges):
        return None, None
    mesh = np.meshgrid(*[coords[i][r] for i, r in enumerate(ranges)], indexing="ij")
    r2 = sum((m - x0) ** 2 for m, x0 in zip(mesh, cp_location)) / width**2
    inside = r2 < 1.0
    bump = np.zeros_like(r2)
    bump[inside] = np.exp(1.0 / (r2[inside] - 1.0))
    if not np.any(inside):
        return None, None
    return tuple(np.ix_(*ranges)), bump


def classify_pivotal(
    sample: FieldSample,
    cp: CriticalPoint,
    star: str,
    box=None,
    delta0: float = 0.05,
    width_cells: float = 2.0,
    ladder_retries: int = 1,
) -> str:
    """Perturbation class of a critical point for the component count on a box.

    Recounts with the field shifted by +/- delta * bump at the critical
    value, for delta0 and two halvings; a class is accepted only when all
    three amplitudes agree on a change of +1/-1/0.  A disagreeing triple is
    retried once on a 4x smaller amplitude ladder (the class is defined in
    the small-delta limit) before returning UNRESOLVED.
    """
    if star not in STARS:
        raise ValueError(f"star must be one of {STARS}")
    if cp.degenerate:
        raise ValueError("cannot classify a degenerate critical point (|det Hess| <= 1e-8)")
    grid = sample.grid
    if box is None:
        box = grid.box()
    slices = grid.box_slices(box)
    sub = np.array(sample.values[slices])
    width = width_cells * grid.spacing
    patch_ix, bump = _bump_patch(grid, slices, cp.location, width)
    if patch_ix is None:
        return UNRESOLVED
    # classify at the lattice-realized critical value: the support site whose
    # value is closest to the refined critical value.  An off-lattice
    # extremum clips its peak by O(|H| h^2) on the lattice, which would
    # otherwise swallow the perturbation entirely.
    patch_values = sub[patch_ix]
    nearest = np.unravel_index(np.argmin(np.abs(patch_values - cp.value)), patch_values.shape)
    level = float(patch_values[nearest])

    base = delta0
    for _ in range(1 + ladder_retries):
        diffs = []
        for k in range(3):
            delta = base / 2**k
            perturbed = sub.copy()
            perturbed[patch_ix] += delta * bump
            n_plus = _count_array(perturbed, level, star)
            perturbed = sub.copy()
            perturbed[patch_ix] -= delta * bump
            n_minus = _count_array(perturbed, level, star)
            diffs.append(n_plus - n_minus)
        if diffs[0] == diffs[1] == diffs[2] and diffs[0] in (-1, 0, 1):
            return {1: PLUS, -1: MINUS, 0: ZERO}[diffs[0]]
        base /= 4.0
    log.debug("unresolved pivotal class at %s: count changes %s", cp.location, diffs)
    return UNRESOLVED


def _nested_radii(sample: FieldSample, cp: CriticalPoint, r_start: float = 4.0) -> list[float]:
    grid = sample.grid
    ax = grid.axis()
    radii = []
    r = r_start
    while True:
        lo = cp.location - 0.5 * r
        hi = cp.location + 0.5 * r
        if np.any(lo < ax[0] - 1e-9) or np.any(hi > ax[-1] + 1e-9):
            break
        radii.append(r)
        r *= 2.0
    return radii


def stabilized_class(sample: FieldSample, cp: CriticalPoint, star: str) -> tuple[str, float | str]:
    """(class, radius) where radius is the smallest nested box side from which
    the pivotal class stays constant; (UNRESOLVED, UNSTABLE) if it never settles.

    Nested boxes are cp + Lambda_r for r in {4, 8, 16, ...} up to the
    simulated region; settling requires agreement on at least the two
    largest boxes.
    """
    radii = _nested_radii(sample, cp)
    if not radii:
        raise ValueError("simulated region too small for the smallest classification box")
    classes = []
    for r in radii:
        box = tuple((c - 0.5 * r, c + 0.5 * r) for c in cp.location)
        classes.append(classify_pivotal(sample, cp, star, box=box))
    final = classes[-1]
    if final == UNRESOLVED:
        return UNRESOLVED, UNSTABLE
    start = len(classes) - 1
    while start > 0 and classes[start - 1] == final:
        start -= 1
    if start == len(classes) - 1 and len(classes) > 1:
        return UNRESOLVED, UNSTABLE  # only the largest box agrees with itself
    return final, radii[start]


def stabilization_radius(sample: FieldSample, cp: CriticalPoint, star: str) -> float | str:
    """Smallest box side from which the class is constant, or UNSTABLE."""
    return stabilized_class(sample, cp, star)[1]


def morse_index_crosscheck(cp: CriticalPoint, star: str, d: int = 2) -> set[str]:
    """Classes consistent with the Morse index in 2-D, for property tests.

    An interior minimum fills a hole (excursion count unchanged, one level
    loop lost), a maximum creates a component and its contour, and a saddle
    reconnects global structure whose count change depends on containment.
    """
    if d != 2:
        raise ValueError("Morse crosscheck is implemented for d = 2 only")
    if star not in STARS:
        raise ValueError(f"star must be one of {STARS}")
    index = cp.morse_index
    if index == 0:
        return {ZERO} if star == ES else {MINUS}
    if index == 2:
        return {PLUS}
    if index == 1:
        return {MINUS, ZERO} if star == ES else {PLUS, MINUS, ZERO}
    raise ValueError(f"invalid Morse index {index} in 2-D")


def critical_point_table(points: list[CriticalPoint]) -> list[dict]:
    """Rows for the CSV emitter (x, y, value, index, classes, radius)."""
    rows = []
    for cp in points:
        rows.append(
            {
                "x": float(cp.location[0]),
                "y": float(cp.location[1]),
                "value": cp.value,
                "index": cp.morse_index,
                "es_class": cp.pivotal_es,
                "ls_class": cp.pivotal_ls,
                "stab_radius": cp.stabilization_radius,
            }
        )
    return rows
