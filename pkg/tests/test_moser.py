import numpy as np
import pytest

from symptower.linalg import ModelSpace, SkewForm, darboux_constant_form
from symptower.moser import (
    ChartConstructionError,
    FormField,
    IntegratorConfig,
    LeftValidityRegionError,
    MoserFamily,
    MoserReport,
    StabilityError,
    assemble_projective_darboux,
    exterior_derivative_residual,
    flow_map,
    moser_flow,
    moser_vector_field,
    radial_primitive,
    uniform_bound_check,
    validity_radius,
    verify_darboux_chart,
)
from symptower.tower import LinearMap, build_tower

OMEGA2 = darboux_constant_form(1).matrix  # [[0,-1],[1,0]]

# Hand-computed values for the frozen examples below.
ALPHA_CONSTANT = np.array([1.0, -0.5])        # alpha = C^T x / 2 at x=(1,2)
ALPHA_LINEAR = np.array([2.0 / 3.0, -1.0 / 3.0])
MOSER_X = np.array([1.0 / 9.0, 2.0 / 9.0])    # eps=0.2, t=0.5, x=(1,2)
IDENTITY_OFFSET_RESIDUAL = 0.3


def constant_field(matrix, dim=2, radius=4.0):
    return FormField.constant(SkewForm(ModelSpace(dim), matrix), np.zeros(dim), radius)


def quadratic_perturbation_field(dim, epsilon, seed, radius=1.0):
    """Darboux plus epsilon * d(beta) for quadratic beta; closed by construction."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((dim, dim, dim))
    q = 0.5 * (q + np.swapaxes(q, 1, 2))
    base = darboux_constant_form(dim // 2).matrix

    def d_beta(pts):
        j = np.einsum("ijk,...k->...ij", q, pts)
        return np.swapaxes(j, -1, -2) - j

    def eval_fn(pts):
        return base + epsilon * d_beta(np.asarray(pts, dtype=float))

    def derivative(x, h):
        return epsilon * d_beta(np.asarray(h, dtype=float))

    return FormField(
        ModelSpace(dim), np.zeros(dim), radius, eval_fn=eval_fn, derivative=derivative
    )


def sphere_degenerating_field(rho=0.8, radius=0.96):
    """First Darboux block scaled by (1 - |x|^2 / rho^2): singular shell at |x|=rho."""

    def eval_fn(pts):
        pts = np.asarray(pts, dtype=float)
        factor = 1.0 - np.sum(pts**2, axis=-1) / rho**2
        out = np.zeros(pts.shape[:-1] + (4, 4))
        out[..., :2, :2] = factor[..., None, None] * OMEGA2
        out[..., 2:, 2:] = OMEGA2
        return out

    return FormField(ModelSpace(4), np.zeros(4), radius, eval_fn=eval_fn)


# ---------------------------------------------------------------------------
# radial primitive
# ---------------------------------------------------------------------------


def test_radial_primitive_zero_field():
    field = constant_field(np.zeros((2, 2)))
    np.testing.assert_array_equal(radial_primitive(field, [1.0, 2.0]), np.zeros(2))


def test_radial_primitive_constant_field():
    field = constant_field(OMEGA2)
    alpha = radial_primitive(field, [1.0, 2.0])
    np.testing.assert_allclose(alpha, ALPHA_CONSTANT, atol=1e-14)
    # alpha_x(v) = omega_bar(x, v) / 2
    v = np.array([0.3, -1.1])
    x = np.array([1.0, 2.0])
    assert alpha @ v == pytest.approx(0.5 * x @ OMEGA2 @ v)


def test_radial_primitive_linear_field():
    w = np.array([1.0, 0.0])

    def eval_fn(pts):
        pts = np.asarray(pts, dtype=float)
        return (pts @ w)[..., None, None] * OMEGA2

    field = FormField(ModelSpace(2), np.zeros(2), 4.0, eval_fn=eval_fn)
    alpha = radial_primitive(field, [1.0, 2.0])
    np.testing.assert_allclose(alpha, ALPHA_LINEAR, atol=1e-14)


def test_radial_primitive_rejects_outside_point():
    field = constant_field(OMEGA2, radius=1.0)
    with pytest.raises(ValueError, match="star-shaped"):
        radial_primitive(field, [3.0, 0.0])


# ---------------------------------------------------------------------------
# vector field
# ---------------------------------------------------------------------------


def test_moser_vector_field_frozen_2d():
    omega0 = darboux_constant_form(1)
    field = constant_field(0.2 * (-OMEGA2))
    family = MoserFamily(omega0, field)
    x = moser_vector_field(family, None, 0.5, [1.0, 2.0])
    np.testing.assert_allclose(x, MOSER_X, atol=1e-14)
    # cross-check against the explicit 2x2 inverse
    omega_t = family.omega_t(0.5, [1.0, 2.0])
    alpha = radial_primitive(field, [1.0, 2.0])
    explicit = -np.linalg.inv(omega_t.T) @ alpha
    np.testing.assert_allclose(x, explicit, atol=1e-14)


def test_moser_vector_field_vanishes_for_zero_bar_and_at_base():
    omega0 = darboux_constant_form(1)
    family = MoserFamily(omega0, constant_field(np.zeros((2, 2))))
    np.testing.assert_array_equal(
        moser_vector_field(family, None, 0.7, [0.5, -0.2]), np.zeros(2)
    )
    field = quadratic_perturbation_field(4, 0.05, seed=5)
    centered = MoserFamily.darboux_target(field, np.zeros(4))
    np.testing.assert_array_equal(
        moser_vector_field(centered, None, 0.3, np.zeros(4)), np.zeros(4)
    )


def test_moser_vector_field_flags_singular_flat():
    omega0 = darboux_constant_form(1)
    family = MoserFamily(omega0, constant_field(-OMEGA2))
    with pytest.raises(LeftValidityRegionError, match="left validity region") as err:
        moser_vector_field(family, None, 1.0, [1.0, 0.0])
    assert err.value.t == 1.0
    assert err.value.sigma_min <= 1e-12


# ---------------------------------------------------------------------------
# exterior derivative
# ---------------------------------------------------------------------------


def test_exterior_derivative_constant_field_is_closed():
    field = constant_field(OMEGA2)
    assert exterior_derivative_residual(field, samples=20, seed=1) <= 1e-12


def test_exterior_derivative_quadratic_perturbation_is_closed():
    analytic = quadratic_perturbation_field(4, 1.0, seed=2)
    assert exterior_derivative_residual(analytic, samples=40, seed=3) <= 1e-12
    fd_only = FormField(
        analytic.space, analytic.center, analytic.radius, eval_fn=analytic.eval_fn
    )
    assert exterior_derivative_residual(fd_only, samples=40, seed=3) <= 1e-8


def test_exterior_derivative_detects_non_closed_field():
    base = darboux_constant_form(2).matrix

    def eval_fn(pts):
        pts = np.asarray(pts, dtype=float)
        return (1.0 + pts[..., 0])[..., None, None] * base

    field = FormField(ModelSpace(4), np.zeros(4), 0.5, eval_fn=eval_fn)
    assert exterior_derivative_residual(field, samples=60, seed=0) >= 0.1


# ---------------------------------------------------------------------------
# validity radius
# ---------------------------------------------------------------------------


def test_validity_radius_constant_family_fills_region():
    omega0 = darboux_constant_form(1)
    family = MoserFamily(omega0, constant_field(0.5 * OMEGA2, radius=2.0))
    assert validity_radius(family, np.zeros(2)) == pytest.approx(2.0)


def test_validity_radius_finds_thin_degenerate_shell():
    rho = 0.8
    family = MoserFamily.darboux_target(sphere_degenerating_field(rho), np.zeros(4))
    r = validity_radius(family, np.zeros(4))
    assert r < rho
    assert r == pytest.approx(rho, rel=2e-2)


def test_validity_radius_zero_when_base_fails():
    omega0 = SkewForm(ModelSpace(2), np.zeros((2, 2)))
    family = MoserFamily(omega0, constant_field(OMEGA2))
    assert validity_radius(family, np.zeros(2)) == 0.0


# ---------------------------------------------------------------------------
# flow and chart verification
# ---------------------------------------------------------------------------


def test_moser_flow_zero_bar_short_circuits_to_identity():
    omega0 = darboux_constant_form(2)
    family = MoserFamily(omega0, constant_field(np.zeros((4, 4)), dim=4))
    report = moser_flow(family, np.zeros(4), 1.5)
    assert report.steps == 0
    assert report.chart_radius == 1.5
    assert report.pullback_residual == 0.0
    pt = np.array([0.3, -0.2, 0.1, 0.4])
    np.testing.assert_array_equal(report.chart(pt), pt)


def test_moser_flow_quadratic_perturbation_builds_chart():
    field = quadratic_perturbation_field(4, 0.05, seed=7)
    family = MoserFamily.darboux_target(field, np.zeros(4))
    report = moser_flow(
        family, np.zeros(4), 0.5, IntegratorConfig(dt=0.02), verify_samples=8
    )
    assert report.fixed_point_error <= 1e-12
    assert report.chart_radius == pytest.approx(0.5)
    assert 0.0 < report.pullback_residual <= 1e-4
    assert report.lipschitz_estimate > 0.0


def test_moser_flow_is_reversible():
    field = quadratic_perturbation_field(4, 0.05, seed=7)
    family = MoserFamily.darboux_target(field, np.zeros(4))
    config = IntegratorConfig(dt=0.02)
    rng = np.random.default_rng(11)
    pts = 0.3 * rng.standard_normal((6, 4))
    fwd, alive = flow_map(family, pts, config)
    assert alive.all()
    back, alive2 = flow_map(family, fwd, config, t_start=1.0, t_end=0.0)
    assert alive2.all()
    np.testing.assert_allclose(back, pts, atol=1e-5)


def test_moser_flow_records_trajectories():
    field = quadratic_perturbation_field(4, 0.05, seed=7)
    family = MoserFamily.darboux_target(field, np.zeros(4))
    config = IntegratorConfig(dt=0.1, record_trajectories=True)
    report = moser_flow(family, np.zeros(4), 0.4, config, verify_samples=0)
    assert report.trajectories is not None
    n_seeds = report.seed_points.shape[0]
    assert report.trajectories.shape == (n_seeds, report.steps + 1, 4)


def test_moser_flow_rejects_r_start_beyond_validity():
    family = MoserFamily.darboux_target(sphere_degenerating_field(0.8), np.zeros(4))
    with pytest.raises(ValueError, match="validity radius"):
        moser_flow(family, np.zeros(4), 0.9, IntegratorConfig(dt=0.05),
                   closed_tol=np.inf)


def test_moser_flow_rejects_non_closed_family():
    base = darboux_constant_form(2).matrix

    def eval_fn(pts):
        pts = np.asarray(pts, dtype=float)
        return (1.0 + pts[..., 0])[..., None, None] * base - base

    field = FormField(ModelSpace(4), np.zeros(4), 0.5, eval_fn=eval_fn)
    family = MoserFamily(darboux_constant_form(2), field)
    with pytest.raises(ValueError, match="not closed"):
        moser_flow(family, np.zeros(4), 0.2, IntegratorConfig(dt=0.05))


def test_moser_flow_no_chart_when_base_trajectory_escapes():
    # the primitive is anchored at the region center, so an off-center base
    # point drifts; this family expands it through the region boundary
    omega0 = darboux_constant_form(1)
    family = MoserFamily(omega0, constant_field(-0.5 * OMEGA2, radius=1.0))
    with pytest.raises(ChartConstructionError, match="no chart"):
        moser_flow(
            family, np.array([0.9, 0.0]), 0.05, IntegratorConfig(dt=0.02)
        )


def test_moser_flow_lipschitz_guard():
    field = quadratic_perturbation_field(4, 60.0, seed=3, radius=1.0)
    family = MoserFamily.darboux_target(field, np.zeros(4))
    with pytest.raises(StabilityError, match="Lipschitz"):
        moser_flow(family, np.zeros(4), 0.45, IntegratorConfig(dt=0.5),
                   closed_tol=np.inf, skip_validity_radius=True)


def test_verify_darboux_chart_identity_cases():
    omega0 = darboux_constant_form(1)
    field = constant_field(OMEGA2)
    report = verify_darboux_chart(
        lambda x: x, field, omega0, samples=10, tol=1e-9,
        center=np.zeros(2), radius=1.0,
    )
    assert report.ok
    assert report.residual <= 1e-10
    assert report.used == 10

    offset = OMEGA2 + 0.3 * np.array([[0.0, 1.0], [-1.0, 0.0]])
    shifted = constant_field(offset)
    report = verify_darboux_chart(
        lambda x: x, shifted, omega0, samples=5, tol=1e-9,
        center=np.zeros(2), radius=1.0,
    )
    assert not report.ok
    assert report.residual == pytest.approx(IDENTITY_OFFSET_RESIDUAL)


# ---------------------------------------------------------------------------
# uniform bounds and assembly
# ---------------------------------------------------------------------------


def test_uniform_bound_check_darboux_levels():
    families = []
    for _ in range(3):
        omega0 = darboux_constant_form(2)
        families.append(
            MoserFamily(omega0, constant_field(np.zeros((4, 4)), dim=4))
        )
    bases = [np.zeros(4)] * 3
    report = uniform_bound_check(families, bases, K=1.01)
    assert report.forward_ok and report.inverse_ok and report.kumar_ok
    for row in report.per_level:
        assert row.forward == pytest.approx(1.0)
        assert row.inverse == pytest.approx(1.0)
        assert row.kumar == 0.0


def test_uniform_bound_check_detects_inverse_growth():
    families = []
    for k in range(1, 4):
        matrix = np.zeros((4, 4))
        matrix[:2, :2] = OMEGA2
        matrix[2:, 2:] = OMEGA2 / k**2
        omega0 = SkewForm(ModelSpace(4), matrix)
        families.append(MoserFamily(omega0, constant_field(np.zeros((4, 4)), dim=4)))
    bases = [np.zeros(4)] * 3
    report = uniform_bound_check(families, bases, K=4.0)
    assert report.forward_ok
    assert not report.inverse_ok
    inverses = [row.inverse for row in report.per_level]
    assert inverses == pytest.approx([1.0, 4.0, 9.0])
    # enlarging K can only relax the verdicts
    relaxed = uniform_bound_check(families, bases, K=100.0)
    assert relaxed.forward_ok and relaxed.inverse_ok and relaxed.kumar_ok


def radius_report(radius):
    return MoserReport(
        base_point=np.zeros(2),
        chart=None,
        validity_radius=radius,
        chart_radius=radius,
        pullback_residual=0.0,
        steps=0,
        step_size=0.0,
        fixed_point_error=0.0,
        lipschitz_estimate=0.0,
    )


def coordinate_tower(dims):
    levels = [ModelSpace(d) for d in dims]
    bondings = [
        LinearMap(
            levels[i + 1],
            levels[i],
            np.hstack([np.eye(dims[i]), np.zeros((dims[i], dims[i + 1] - dims[i]))]),
        )
        for i in range(len(dims) - 1)
    ]
    return build_tower(levels, bondings)


def test_assemble_constant_radii_passes():
    tower = coordinate_tower([2, 4, 6])
    reports = [radius_report(0.5) for _ in range(3)]
    out = assemble_projective_darboux(reports, tower, min_radius=0.3)
    assert out.ok
    assert out.limiting_radius_by_level == pytest.approx((0.5, 0.5, 0.5))
    assert "retain" in out.diagnosis


def test_assemble_detects_power_law_decay():
    tower = coordinate_tower([2, 4, 6, 8, 10])
    radii = [1.0, 1.0, 0.5, 1.0 / 3.0, 0.25]
    out = assemble_projective_darboux(
        [radius_report(r) for r in radii], tower, min_radius=0.3
    )
    assert not out.ok
    assert out.limiting_radius_by_level[0] == pytest.approx(0.25)
    assert out.fitted_exponent == pytest.approx(-1.0, abs=1e-6)
    assert "decay" in out.diagnosis


def test_assemble_single_level_and_missing_report():
    tower = coordinate_tower([2])
    out = assemble_projective_darboux([radius_report(0.1)], tower, min_radius=0.05)
    assert out.ok
    assert out.fitted_exponent is None
    with pytest.raises(ValueError, match="missing level report"):
        assemble_projective_darboux([], tower, min_radius=0.05)
