import numpy as np
import pytest

from exlab import field as field_mod
from exlab import kernels, topology
from exlab.topology import ES, LS, MINUS, PLUS, UNRESOLVED, UNSTABLE, ZERO

from conftest import contour_count_oracle, flood_fill_count

BF = kernels.KernelSpec.bargmann_fock(2)


# ---------------------------------------------------------------------------
# excursion counting against the flood-fill oracle
# ---------------------------------------------------------------------------


def test_excursion_fixtures(synthetic_field):
    X, Y = synthetic_field.coords

    bump = synthetic_field(lambda X, Y: np.exp(-(X**2 + Y**2)))
    cc = topology.count_excursion_components(bump, 0.5)
    assert (cc.n_excursion, cc.n_boundary_touching) == (1, 0)

    edge = synthetic_field(lambda X, Y: np.exp(-((X - 5.0) ** 2 + Y**2)))
    cc = topology.count_excursion_components(edge, 0.5)
    assert cc.n_excursion == 0 and cc.n_boundary_touching == 1

    two = synthetic_field(
        lambda X, Y: np.exp(-((X - 2) ** 2 + Y**2)) + np.exp(-((X + 2) ** 2 + Y**2))
    )
    assert topology.count_excursion_components(two, 0.5).n_excursion == 2

    below = synthetic_field(lambda X, Y: np.zeros_like(X))
    assert topology.count_excursion_components(below, 1.0).n_excursion == 0


def test_excursion_matches_flood_fill_on_random_masks():
    rng = np.random.default_rng(2)
    for _ in range(30):
        mask = rng.random((24, 24)) < 0.45
        ours = topology._excursion_counts(mask)
        assert ours == flood_fill_count(mask)
    # d = 3 as well
    for _ in range(10):
        mask = rng.random((10, 10, 10)) < 0.25
        assert topology._excursion_counts(mask) == flood_fill_count(mask)


def test_excursion_counts_on_gaussian_samples_match_oracle():
    g = field_mod.GridSpec(2, 16.0, padding=4.0)
    for seed in range(5):
        s = field_mod.sample_field(BF, g, 40 + seed)
        sub = s.box_values()
        cc = topology.count_excursion_components(s, 0.3)
        assert (cc.n_excursion, cc.n_boundary_touching) == flood_fill_count(sub >= 0.3)


def test_box_outside_region_raises():
    g = field_mod.GridSpec(2, 12.0, padding=2.0)
    s = field_mod.sample_field(BF, g, 0)
    with pytest.raises(ValueError):
        topology.count_excursion_components(s, 0.0, box=((-20.0, 20.0), (-20.0, 20.0)))


# ---------------------------------------------------------------------------
# level-set counting (marching squares)
# ---------------------------------------------------------------------------


def test_level_fixtures(synthetic_field):
    bump = synthetic_field(lambda X, Y: np.exp(-(X**2 + Y**2)))
    assert topology.count_level_components(bump, 0.5) == 1

    const = synthetic_field(lambda X, Y: np.zeros_like(X))
    assert topology.count_level_components(const, 0.5) == 0

    annulus = synthetic_field(lambda X, Y: np.exp(-((np.hypot(X, Y) - 3.0) ** 2)))
    assert topology.count_level_components(annulus, 0.5) == 2

    nested = synthetic_field(
        lambda X, Y: np.exp(-((np.hypot(X, Y) - 3.0) ** 2)) + np.exp(-(X**2 + Y**2))
    )
    assert topology.count_level_components(nested, 0.5) == 3


def test_level_count_requires_2d():
    g3 = field_mod.GridSpec(3, 6.0, spacing=0.5, padding=1.0)
    s = field_mod.sample_field(kernels.KernelSpec.bargmann_fock(3), g3, 1)
    with pytest.raises(ValueError):
        topology.count_level_components(s, 0.0)


def _has_ambiguous_saddle_cell(sub, level):
    b = sub > level
    c00, c10, c01, c11 = b[:-1, :-1], b[1:, :-1], b[:-1, 1:], b[1:, 1:]
    code = c00.astype(np.int8) + 2 * c10 + 4 * c11 + 8 * c01
    return bool(np.any((code == 5) | (code == 10)))


def test_level_counts_match_duality_oracle_boundary_free(synthetic_field):
    # every contained contour bounds a contained excursion or complement
    # component; exact away from the box edge (the containment rules differ
    # by one lattice layer there) and away from ambiguous saddle cells
    # (where the center-average rule may connect a diagonal that face
    # adjacency keeps apart)
    rng = np.random.default_rng(17)
    compared = 0
    for _ in range(40):
        n_bumps = rng.integers(4, 10)
        centers = rng.uniform(-2.0, 2.0, size=(n_bumps, 2))
        widths = rng.uniform(0.7, 1.3, size=n_bumps)
        signs = rng.choice([-1.0, 1.0], size=n_bumps)

        def fn(X, Y, c=centers, w=widths, s=signs):
            total = np.zeros_like(X)
            for (cx, cy), wi, si in zip(c, w, s):
                total += si * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / wi**2)
            return total

        sample = synthetic_field(fn)
        sub = sample.box_values()
        for level in (-0.25, 0.25):
            if _has_ambiguous_saddle_cell(sub, level):
                continue
            compared += 1
            assert topology.count_level_components(sample, level) == contour_count_oracle(
                sub, level
            )
    assert compared >= 25


def test_level_count_lattice_value_collision(synthetic_field):
    bump = synthetic_field(lambda X, Y: np.exp(-(X**2 + Y**2)))
    exact_value = float(bump.values[bump.grid.index_of((1.0, 0.0))])
    assert topology.count_level_components(bump, exact_value) in (1, 2)


# ---------------------------------------------------------------------------
# critical points
# ---------------------------------------------------------------------------


def test_find_critical_points_quadratics(synthetic_field):
    quad = synthetic_field(lambda X, Y: X**2 + Y**2)
    pts = topology.find_critical_points(quad, (-0.1, 0.1))
    assert len(pts) == 1
    assert pts[0].morse_index == 0
    assert np.allclose(pts[0].location, 0.0, atol=1e-8)
    assert pts[0].gradient_residual < 1e-6

    saddle = synthetic_field(lambda X, Y: X**2 - Y**2)
    pts = topology.find_critical_points(saddle, (-0.1, 0.1))
    assert len(pts) == 1 and pts[0].morse_index == 1


def test_find_critical_points_empty_window(synthetic_field):
    quad = synthetic_field(lambda X, Y: X**2 + Y**2)
    assert topology.find_critical_points(quad, (5.0, 6.0)) == []
    with pytest.raises(ValueError):
        topology.find_critical_points(quad, (1.0, 1.0))


def test_critical_point_gradient_residuals_on_samples():
    g = field_mod.GridSpec(2, 16.0, padding=4.0)
    s = field_mod.sample_field(BF, g, 77)
    pts = topology.find_critical_points(s, (-np.inf, np.inf))
    assert len(pts) > 20
    assert all(cp.gradient_residual < 1e-6 for cp in pts)
    assert all(0 <= cp.morse_index <= 2 for cp in pts)
    # morse index consistent with hessian eigenvalues
    for cp in pts:
        eigs = np.linalg.eigvalsh(cp.hessian)
        assert cp.morse_index == int(np.sum(eigs < 0))


# ---------------------------------------------------------------------------
# pivotal classification (the paper's perturbation picture)
# ---------------------------------------------------------------------------


def test_classify_isolated_max(synthetic_field):
    sample = synthetic_field(lambda X, Y: 1.05 * np.exp(-(X**2 + Y**2)))
    cp = topology.find_critical_points(sample, (1.0, 1.1))[0]
    assert topology.classify_pivotal(sample, cp, ES) == PLUS
    assert topology.classify_pivotal(sample, cp, LS) == PLUS


def test_classify_saddle_joining_lobes(synthetic_field):
    sample = synthetic_field(
        lambda X, Y: np.exp(-((X - 1.5) ** 2 + Y**2)) + np.exp(-((X + 1.5) ** 2 + Y**2))
    )
    saddle = [
        cp for cp in topology.find_critical_points(sample, (0.1, 0.4)) if cp.morse_index == 1
    ][0]
    assert topology.classify_pivotal(sample, saddle, ES) == MINUS
    assert topology.classify_pivotal(sample, saddle, LS) == MINUS


def test_classify_min_inside_filled_component(synthetic_field):
    sample = synthetic_field(lambda X, Y: 1.0 - 0.5 * np.exp(-(X**2 + Y**2)))
    cp = topology.find_critical_points(sample, (0.4, 0.6))[0]
    assert cp.morse_index == 0
    assert topology.classify_pivotal(sample, cp, ES) == ZERO
    assert topology.classify_pivotal(sample, cp, LS) == MINUS


def test_classify_rejects_degenerate(synthetic_field):
    sample = synthetic_field(lambda X, Y: X**2 + Y**2)
    cp = topology.find_critical_points(sample, (-0.1, 0.1))[0]
    cp.hessian = np.zeros((2, 2))
    with pytest.raises(ValueError):
        topology.classify_pivotal(sample, cp, ES)


def test_classify_near_boundary_still_runs(synthetic_field):
    # boundary-stratum critical points are classified, not skipped
    sample = synthetic_field(lambda X, Y: 1.05 * np.exp(-((X - 4.9) ** 2 + Y**2)))
    cp = topology.find_critical_points(sample, (1.0, 1.1))[0]
    cls = topology.classify_pivotal(sample, cp, ES)
    assert cls in (PLUS, MINUS, ZERO, UNRESOLVED)


def test_classify_delta_halving_insensitivity(synthetic_field):
    sample = synthetic_field(lambda X, Y: 1.05 * np.exp(-(X**2 + Y**2)))
    cp = topology.find_critical_points(sample, (1.0, 1.1))[0]
    assert topology.classify_pivotal(sample, cp, ES, delta0=0.05) == topology.classify_pivotal(
        sample, cp, ES, delta0=0.025
    )


def test_stabilization_radius_bump(synthetic_field):
    sample = synthetic_field(lambda X, Y: 1.05 * np.exp(-(X**2 + Y**2)))
    cp = topology.find_critical_points(sample, (1.0, 1.1))[0]
    cls, radius = topology.stabilized_class(sample, cp, ES)
    assert cls == PLUS and radius == 4.0
    assert topology.stabilization_radius(sample, cp, ES) == 4.0


def test_stabilization_on_gaussian_samples():
    # resolved fraction and r vs 2r agreement on real samples
    g = field_mod.GridSpec(2, 32.0, padding=8.0)
    n_total = n_unstable = n_checked = n_agree = 0
    for seed in range(4):
        s = field_mod.sample_field(BF, g, 800 + seed)
        pts = topology.find_critical_points(s, (0.8, 1.2), box=((-8, 8), (-8, 8)))
        for cp in pts:
            if cp.degenerate:
                continue
            n_total += 1
            cls, radius = topology.stabilized_class(s, cp, ES)
            if radius == UNSTABLE:
                n_unstable += 1
                continue
            a = topology.classify_pivotal(s, cp, ES, box=tuple((c - 4.0, c + 4.0) for c in cp.location))
            b = topology.classify_pivotal(s, cp, ES, box=tuple((c - 8.0, c + 8.0) for c in cp.location))
            n_checked += 1
            n_agree += a == b
    assert n_total >= 20
    assert n_unstable / n_total < 0.05
    assert n_agree / n_checked >= 0.95


def test_morse_index_crosscheck_sets():
    def cp_with_index(idx):
        hess = {0: np.eye(2), 1: np.diag([1.0, -1.0]), 2: -np.eye(2)}[idx]
        return topology.CriticalPoint(
            location=np.zeros(2), value=0.0, gradient_residual=0.0, hessian=hess, morse_index=idx
        )

    # index 0: the level loop around the vanishing hole must die: never Zero
    assert ZERO not in topology.morse_index_crosscheck(cp_with_index(0), LS)
    # index 1: the excursion count may be unchanged
    assert ZERO in topology.morse_index_crosscheck(cp_with_index(1), ES)
    # index 2: a maximum creates a component
    assert topology.morse_index_crosscheck(cp_with_index(2), ES) <= {PLUS, MINUS}
    with pytest.raises(ValueError):
        topology.morse_index_crosscheck(cp_with_index(0), ES, d=3)


def test_classification_consistent_with_morse_crosscheck():
    g = field_mod.GridSpec(2, 24.0, padding=8.0)
    checked = violations = 0
    for seed in range(3):
        s = field_mod.sample_field(BF, g, 4200 + seed)
        pts = topology.find_critical_points(s, (0.3, 1.0), box=((-6, 6), (-6, 6)))
        for cp in pts:
            if cp.degenerate:
                continue
            for star in (ES, LS):
                cls, radius = topology.stabilized_class(s, cp, star)
                if radius == UNSTABLE:
                    continue
                checked += 1
                if cls not in topology.morse_index_crosscheck(cp, star):
                    violations += 1
    assert checked >= 30
    assert violations / checked <= 0.05


# ---------------------------------------------------------------------------
# stability invariants
# ---------------------------------------------------------------------------


def test_counts_stable_without_nearby_critical_values():
    g = field_mod.GridSpec(2, 16.0, padding=4.0)
    s = field_mod.sample_field(BF, g, 99)
    pts = topology.find_critical_points(s, (-np.inf, np.inf))
    values = np.sort([cp.value for cp in pts])
    # pick a level at least 1e-3 away from every critical value
    gaps = np.diff(values)
    pick = int(np.argmax(gaps))
    level = 0.5 * (values[pick] + values[pick + 1])
    assert min(abs(values - level)) > 1e-3
    for star in (ES, LS):
        base = topology.count_components(s, level, star)
        for sign in (+1.0, -1.0):
            bumped = field_mod.FieldSample(
                grid=g, values=s.values + sign * 1e-6, seed=0, kernel=BF
            )
            assert topology.count_components(bumped, level, star) == base


def test_level_negation_symmetry(synthetic_field):
    # components of {f >= l} match the contained complement structure of
    # {-f >= -l} on fixtures
    two = synthetic_field(
        lambda X, Y: np.exp(-((X - 2) ** 2 + Y**2)) + np.exp(-((X + 2) ** 2 + Y**2))
    )
    level = 0.5
    direct = topology.count_excursion_components(two, level).n_excursion
    neg = synthetic_field(
        lambda X, Y: -(np.exp(-((X - 2) ** 2 + Y**2)) + np.exp(-((X + 2) ** 2 + Y**2)))
    )
    complement_mask = neg.box_values() < -level
    assert direct == flood_fill_count(complement_mask)[0]


def test_critical_point_table_rows(synthetic_field):
    sample = synthetic_field(lambda X, Y: 1.05 * np.exp(-(X**2 + Y**2)))
    pts = topology.find_critical_points(sample, (1.0, 1.1))
    pts[0].pivotal_es = PLUS
    rows = topology.critical_point_table(pts)
    assert rows[0]["es_class"] == PLUS
    assert set(rows[0]) == {"x", "y", "value", "index", "es_class", "ls_class", "stab_radius"}
