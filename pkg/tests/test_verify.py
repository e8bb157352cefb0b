import math

import numpy as np
import pytest

from homog_uc import cell, equad, homogop as ho, verify
from homog_uc import polyalg as pa
from homog_uc.polyalg import Ellipsoid, Polynomial


@pytest.fixture(scope="module")
def laminate_setup():
    field = cell.make_builtin_field("laminate", 2, 64, {"a": 1.0, "b": 2.0})
    table = cell.compute_correctors(field, 6)
    op = ho.HomogenizedOperator.from_table(table)
    return table, op


def make_psi(table, op, m, seed=0, negative=False):
    rng = np.random.default_rng(seed)
    raw = verify.draw_seed_polynomial(table.d, m, rng)
    pulled = raw if op.leading_is_identity() else verify._pullback(raw, op)
    q = ho.AHarmonicPolynomial(pulled, op, pulled) if negative \
        else ho.build_a_harmonic(op, pulled)
    return ho.build_heterogeneous(q, table)


# ---------------------------------------------------------------------------
# quadrature paths
# ---------------------------------------------------------------------------


def test_midpoint_matches_closed_form_polynomial():
    E = Ellipsoid(np.eye(2), 10.0)
    x1 = Polynomial.variable(2, 0)
    closed = pa.l2_norm_ellipsoid(x1, E)
    total, vol, err = equad.midpoint_sq_norm(x1.evaluate, E, 512)
    assert math.sqrt(total) == pytest.approx(closed, rel=1e-4)
    assert abs(vol - E.volume()) / E.volume() < 1e-4


def test_midpoint_error_estimate_brackets_truth():
    E = Ellipsoid(np.diag([2.0, 1.0]), 5.0)
    p = Polynomial(2, {(2, 0): 1.0, (0, 1): 0.5})
    exact = pa.l2_sq_inner_ellipsoid(p, p, E)
    total, _, err = equad.midpoint_sq_norm(p.evaluate, E, 256)
    assert abs(total - exact) <= 5 * err + 1e-9 * exact


def test_norm_on_ellipsoid_constant_is_one():
    one = Polynomial.one(2)
    for abar in (np.eye(2), np.diag([3.0, 1.5])):
        for r in (1.0, 20.0):
            val, err = verify.norm_on_ellipsoid(one, Ellipsoid(abar, r), 64)
            assert val == pytest.approx(1.0, rel=1e-12)
            assert err == 0.0


def test_norm_on_ellipsoid_polynomial_matches_closed_form():
    E = Ellipsoid(np.eye(2), 10.0)
    x1 = Polynomial.variable(2, 0)
    exact = pa.l2_norm_ellipsoid(x1, E) / math.sqrt(E.volume())
    val, err = verify.norm_on_ellipsoid(x1, E, 2048)
    assert val == pytest.approx(exact, rel=1e-4)

    def raw(points):
        return x1.evaluate(points)

    val2, err2 = verify.norm_on_ellipsoid(raw, E, 2048)
    assert val2 == pytest.approx(exact, rel=1e-4)


def test_norm_on_ellipsoid_refusal(laminate_setup):
    table, op = laminate_setup
    psi = make_psi(table, op, 2)
    E = Ellipsoid(op.matrix(), 64.0)
    with pytest.raises(equad.QuadratureRefusal):
        verify.norm_on_ellipsoid(psi, E, 128)  # far below 8 per unit cell


def test_psi_constant_coefficient_norm_matches_poly(laminate_setup):
    # with constant coefficients psi == q, so the quadrature norm must
    # match the closed form of the polynomial within its error estimate
    table = cell.compute_correctors(cell.constant_field(2, 16, np.eye(2)), 3)
    op = ho.HomogenizedOperator.from_table(table)
    psi = make_psi(table, op, 2, seed=5)
    E = Ellipsoid(op.matrix(), 8.0)
    val, err = verify.norm_on_ellipsoid(psi, E, 2048)
    exact = pa.l2_norm_ellipsoid(psi.polynomial, E) / math.sqrt(E.volume())
    assert val == pytest.approx(exact, rel=2e-4)


def test_mc_and_midpoint_paths_agree(laminate_setup):
    table, op = laminate_setup
    psi = make_psi(table, op, 4, seed=1)
    abar = op.matrix()
    r = 16.0
    mp = equad.psi_sq_norms(psi, [r], abar, quadrature_n=512)[r]
    mc = equad.psi_sq_norms(psi, [r], abar, rng=np.random.default_rng(4),
                            n_samples=200_000)[r]
    tol = 5 * (mc.err_estimate + mp.err_estimate) + 1e-6 * mp.sq_integral
    assert abs(mc.sq_integral - mp.sq_integral) <= tol


def test_unnormalized_vs_normalized_conversion():
    # || f ||^2 = |E_r| * volume-normalized^2 with |E_r| = r^d sqrt(det) |B_1|
    p = Polynomial(2, {(2, 0): 1.0, (1, 1): -0.5})
    abar = np.diag([2.0, 1.0])
    for r in (3.0, 17.0):
        E = Ellipsoid(abar, r)
        unnorm = pa.l2_norm_ellipsoid(p, E)
        vol = r ** 2 * math.sqrt(np.linalg.det(abar)) * pa.ball_volume(2)
        assert E.volume() == pytest.approx(vol, rel=1e-12)
        normalized, _ = verify.norm_on_ellipsoid(p, E, 64)
        assert unnorm == pytest.approx(normalized * math.sqrt(vol), rel=1e-10)


# ---------------------------------------------------------------------------
# ratio operations
# ---------------------------------------------------------------------------


def test_three_ratio_one_for_homogeneous_polynomials():
    for abar in (np.eye(2), np.diag([2.0, 1.2])):
        E_matrix = abar
        for n in (1, 3):
            h = pa.harmonic_basis(2, n)[0]
            # make the polynomial abar-harmonic homogeneous by pullback
            B = np.linalg.inv(pa.matrix_sqrt(abar))
            p = pa.change_of_variables(h, B)
            ratio = verify.three_ellipsoid_ratio(p, 12.0, 0.5, E_matrix)
            assert ratio == pytest.approx(1.0, rel=1e-12)


def test_three_ratio_constant_function():
    one = Polynomial.one(2)
    ratio = verify.three_ellipsoid_ratio(one, 10.0, 0.5, np.eye(2))
    assert ratio == pytest.approx(1.0, rel=1e-12)


def test_three_ratio_zero_function_raises():
    zero = Polynomial.zero(2)
    with pytest.raises(ZeroDivisionError):
        verify.three_ellipsoid_ratio(zero, 10.0, 0.5, np.eye(2))


def test_doubling_profile_power_law():
    one = Polynomial.one(2)
    prof = verify.doubling_profile(one, [8.0, 16.0], 0.5, np.eye(2))
    assert prof == pytest.approx([1.0, 1.0], rel=1e-12)
    for n in (1, 2, 4):
        h = pa.harmonic_basis(2, n)[0]
        prof = verify.doubling_profile(h, [8.0, 32.0], 0.5, np.eye(2))
        assert prof == pytest.approx([2.0 ** n] * 2, rel=1e-12)


def test_psi_doubling_near_power_law(laminate_setup):
    table, op = laminate_setup
    psi = make_psi(table, op, 2, seed=2)
    prof = verify.doubling_profile(psi, [64.0, 256.0], 0.5, op.matrix(),
                                   mc_samples=50_000,
                                   rng=np.random.default_rng(11))
    for v in prof:
        assert v == pytest.approx(4.0, rel=5e-3)


# ---------------------------------------------------------------------------
# the study
# ---------------------------------------------------------------------------


def test_scaling_config_validation():
    with pytest.raises(ValueError):
        verify.ScalingConfig(theta=0.7)
    with pytest.raises(ValueError):
        verify.ScalingConfig(r_list=(64.0, 32.0))
    with pytest.raises(ValueError):
        verify.ScalingConfig(m_list=(4,), r_list=(8.0, 64.0))


@pytest.fixture(scope="module")
def small_study(laminate_setup):
    table, _ = laminate_setup
    cfg = verify.ScalingConfig(theta=0.5, m_list=(2, 4), r_list=(64.0, 128.0, 256.0),
                               seed=3, mc_samples=60_000)
    return verify.run_scaling_study(cfg, table), cfg, table


def test_study_passes_and_reports(small_study):
    report, cfg, _ = small_study
    assert report.passed, report.notes
    assert report.flags["poly_distance_shape"]
    assert report.flags["doubling_flat"]
    assert report.flags["residual_refines"]
    assert len(report.rows) == len(cfg.m_list) * len(cfg.r_list)
    for m in cfg.m_list:
        info = report.per_degree[m]
        assert info["poly_distance_slope"] == pytest.approx(-1.0, abs=0.3)
        assert info["doubling_variation"] <= 0.10


def test_study_rows_sane(small_study):
    report, cfg, _ = small_study
    for row in report.rows:
        assert row.norm_inner > 0 and row.norm_mid > 0 and row.norm_outer > 0
        assert row.three_ratio >= 1.0 - (3.0 * row.quad_err + 1e-4)
        # doubling of a degree-m object sits near theta^-m
        assert row.doubling_ratio == pytest.approx(2.0 ** row.m, rel=0.02)


def test_study_csv_json_deterministic(small_study):
    report, cfg, table = small_study
    again = verify.run_scaling_study(cfg, table)
    assert report.to_csv() == again.to_csv()
    assert report.to_json() == again.to_json()
    header = report.to_csv().splitlines()[0]
    assert header == verify.CSV_HEADER


def test_study_negative_control_detected(laminate_setup):
    table, _ = laminate_setup
    cfg = verify.ScalingConfig(theta=0.5, m_list=(4,), r_list=(64.0, 128.0),
                               seed=3, mc_samples=30_000, negative_control=True)
    report = verify.run_scaling_study(cfg, table)
    assert not report.passed
    assert not report.flags["residual_refines"]


def test_study_requires_enough_orders(laminate_setup):
    table, _ = laminate_setup
    cfg = verify.ScalingConfig(m_list=(8,), r_list=(64.0, 128.0), seed=0,
                               mc_samples=1000)
    with pytest.raises(ValueError):
        verify.run_scaling_study(cfg, table.truncated(4))


def test_flatness_radii_windows():
    assert verify._flatness_radii(2, [64.0, 128.0, 256.0]) == [64.0, 128.0, 256.0]
    assert verify._flatness_radii(4, [64.0, 128.0, 256.0, 512.0]) == [256.0, 512.0]
    # degree 6: m^4 = 1296 clears the list, use the dyadic window
    assert verify._flatness_radii(6, [64.0, 1024.0]) == [1296.0, 2592.0, 5184.0]


# ---------------------------------------------------------------------------
# minimal-scale probe
# ---------------------------------------------------------------------------


def test_probe_constant_coefficients_no_crossing():
    table = cell.compute_correctors(cell.constant_field(2, 16, np.eye(2)), 3)
    cfg = verify.ScalingConfig(m_list=(2,), r_list=(16.0, 32.0), seed=1,
                               mc_samples=20_000)
    probe = verify.minimal_scale_probe(cfg, table, m=2)
    assert all(v is None for v in probe["crossings"].values())
    for entry in probe["sweep"]:
        assert entry["three_ratio"] == pytest.approx(1.0, abs=1e-9)


def test_probe_laminate_reproducible_across_seeds(laminate_setup):
    table, _ = laminate_setup
    crossings = []
    for seed in (1, 2):
        cfg = verify.ScalingConfig(m_list=(2,), r_list=(16.0, 32.0), seed=seed,
                                   mc_samples=20_000)
        probe = verify.minimal_scale_probe(cfg, table, m=2)
        crossings.append(probe["crossings"])
    for thr in ("0.5", "1.0", "2.0"):
        a, b = crossings[0][thr], crossings[1][thr]
        if a is None or b is None:
            assert a == b
        else:
            assert 0.5 <= a / b <= 2.0


def test_probe_json_serializable(laminate_setup):
    import json

    table, _ = laminate_setup
    cfg = verify.ScalingConfig(m_list=(2,), r_list=(16.0, 32.0), seed=1,
                               mc_samples=10_000)
    probe = verify.minimal_scale_probe(cfg, table, m=2)
    json.dumps(probe)
