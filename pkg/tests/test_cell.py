import numpy as np
import pytest

from homog_uc import cell
from homog_uc.cell import (
    CoefficientField,
    CompatibilityError,
    SolverError,
    checkerboard_field,
    compute_correctors,
    constant_field,
    check_identities,
    homogenized_matrix,
    laminate_field,
    smooth_field,
    solve_periodic,
    validate_coefficients,
)


def laminate_phi1_profile(x, a=1.0, b=2.0):
    """Closed form of the first corrector of the half-period laminate:
    slope c/alpha - 1 with c the harmonic mean, mean-zero."""
    c = 2.0 / (1.0 / a + 1.0 / b)
    x = np.mod(x, 1.0)
    up = (c / a - 1.0) * np.minimum(x, 0.5)
    down = (c / b - 1.0) * np.maximum(x - 0.5, 0.0)
    prof = up + down
    # subtract the exact mean of the tent profile
    peak = (c / a - 1.0) * 0.5
    mean = peak / 2.0
    return prof - mean


# ---------------------------------------------------------------------------
# fields and validation
# ---------------------------------------------------------------------------


def test_validate_identity_and_diag():
    f = constant_field(2, 8, np.eye(2))
    rep = validate_coefficients(f)
    assert rep["ok"] and rep["min_eig"] == pytest.approx(1.0)
    f2 = constant_field(2, 8, np.diag([1.0, 4.0]))
    rep2 = validate_coefficients(f2)
    assert rep2["ok"] and rep2["max_eig"] == pytest.approx(4.0)


def test_validate_rejects_small_eigenvalue():
    f = constant_field(2, 8, np.diag([0.5, 2.0]))
    rep = validate_coefficients(f)
    assert not rep["ok"]
    assert "offending_cell" in rep


def test_builtin_fields_elliptic():
    for d in (2, 3):
        for field in (laminate_field(d, 16, 1.0, 2.0),
                      checkerboard_field(d, 16, 1.0, 4.0),
                      smooth_field(d, 16, 2.0)):
            rep = field.validate()
            assert rep["ok"], rep


def test_checkerboard_cell_means_exact_range():
    f = checkerboard_field(2, 32, 1.0, 4.0)
    vals = f.component(0, 0)
    assert vals.min() >= 1.0 - 1e-12 and vals.max() <= 4.0 + 1e-12
    # mean of the indicator is exactly one half, so the mean coefficient
    # is the arithmetic average of the phases
    assert vals.mean() == pytest.approx(2.5, rel=1e-12)


def test_builtin_registry_and_rebuild():
    f = cell.make_builtin_field("checkerboard", 2, 16, {"a": 1.0, "b": 4.0})
    g = f.rebuild(32)
    assert g.N == 32 and g.d == 2
    with pytest.raises(ValueError):
        cell.make_builtin_field("nope", 2, 16, {})


# ---------------------------------------------------------------------------
# periodic solves
# ---------------------------------------------------------------------------


def test_solve_zero_sources():
    f = constant_field(2, 16, np.eye(2))
    phi = solve_periodic(f, flux_source=None, scalar_source=np.zeros((16, 16)))
    assert np.all(phi == 0.0)


def test_solve_fourier_mode_oracle():
    # for a = I and g = sin(2 pi x1), phi = sin(2 pi x1)/(4 pi^2); the
    # discrete error must shrink at second order
    errs = {}
    for N in (32, 64):
        f = constant_field(2, N, np.eye(2))
        xc = (np.arange(N) + 0.5) / N
        g = np.sin(2 * np.pi * xc)[:, None] * np.ones((N, N))
        phi = solve_periodic(f, scalar_source=g)
        xn = np.arange(N) / N
        exact = np.sin(2 * np.pi * xn)[:, None] / (4 * np.pi ** 2) * np.ones((N, N))
        errs[N] = np.linalg.norm(phi - exact) / np.linalg.norm(exact)
    assert errs[32] < 5e-3
    assert errs[32] / errs[64] > 3.0


def test_solve_fourier_mode_3d():
    N = 16
    f = constant_field(3, N, np.eye(3))
    xc = (np.arange(N) + 0.5) / N
    g = np.sin(2 * np.pi * xc)[:, None, None] * np.ones((N, N, N))
    phi = solve_periodic(f, scalar_source=g)
    xn = np.arange(N) / N
    exact = np.sin(2 * np.pi * xn)[:, None, None] / (4 * np.pi ** 2) * np.ones((N, N, N))
    assert np.linalg.norm(phi - exact) / np.linalg.norm(exact) < 3e-2


def test_solve_laminate_corrector_oracle():
    # first-order corrector source: flux a e_1; nodally exact for the
    # aligned laminate
    N = 64
    f = laminate_field(2, N, 1.0, 2.0)
    V = [f.component(i, 0) for i in range(2)]
    phi = solve_periodic(f, flux_source=V)
    xn = np.arange(N) / N
    exact = laminate_phi1_profile(xn)[:, None] * np.ones((N, N))
    assert np.max(np.abs(phi - exact)) < 1e-9


def test_solve_incompatible_source():
    f = constant_field(2, 16, np.eye(2))
    with pytest.raises(CompatibilityError):
        solve_periodic(f, scalar_source=np.ones((16, 16)))


def test_solver_failure_reports_residuals():
    f = constant_field(2, 8, np.eye(2))
    xc = (np.arange(8) + 0.5) / 8
    g = np.sin(2 * np.pi * xc)[:, None] * np.ones((8, 8))
    with pytest.raises(SolverError) as err:
        solve_periodic(f, scalar_source=g, tol=1e-300)
    assert len(err.value.residuals) > 0


def test_operator_symmetry_full_matrix():
    rng = np.random.default_rng(8)
    N = 8
    vals = np.zeros((N, N, 2, 2))
    vals[..., 0, 0] = 2.0 + rng.uniform(-0.5, 0.5, (N, N))
    vals[..., 1, 1] = 2.0 + rng.uniform(-0.5, 0.5, (N, N))
    off = rng.uniform(-0.3, 0.3, (N, N))
    vals[..., 0, 1] = off
    vals[..., 1, 0] = off
    f = CoefficientField(2, N, vals, lambda_max=3.0)
    assert f.validate()["ok"]
    op = cell.PeriodicOperator(f)
    u = rng.standard_normal((N, N))
    v = rng.standard_normal((N, N))
    assert float(np.vdot(v, op.apply(u))) == pytest.approx(
        float(np.vdot(u, op.apply(v))), rel=1e-12)
    w = u - u.mean()
    assert float(np.vdot(w, op.apply(w))) > 0


# ---------------------------------------------------------------------------
# corrector recursion
# ---------------------------------------------------------------------------


def test_constant_field_collapse():
    A = np.array([[2.0, 0.4], [0.4, 1.5]])
    table = compute_correctors(constant_field(2, 16, A), 4)
    for m in range(1, 5):
        for arr in table.phi[m].values():
            assert np.max(np.abs(arr)) == 0.0
    assert np.allclose(homogenized_matrix(table), A, atol=1e-14)
    for m in (1, 3, 4):
        assert table.abar[m].norm() <= 1e-14


def test_constant_field_collapse_3d():
    A = np.diag([1.0, 2.0, 3.0])
    table = compute_correctors(constant_field(3, 8, A), 3)
    assert np.allclose(homogenized_matrix(table), A, atol=1e-14)
    for m in (1, 2, 3):
        for arr in table.phi[m].values():
            assert np.max(np.abs(arr)) == 0.0


def test_laminate_homogenized_matrix_and_profile():
    N = 64
    table = compute_correctors(laminate_field(2, N, 1.0, 2.0), 2)
    M = homogenized_matrix(table)
    assert M[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-12)
    assert M[1, 1] == pytest.approx(1.5, abs=1e-12)
    assert abs(M[0, 1]) < 1e-13
    xn = np.arange(N) / N
    exact = laminate_phi1_profile(xn)[:, None] * np.ones((N, N))
    got = table.phi[1][(1, 0)]
    assert np.max(np.abs(got - exact)) < 1e-9
    assert np.max(np.abs(table.phi[1][(0, 1)])) < 1e-12


def test_corrector_means_are_zero():
    table = compute_correctors(checkerboard_field(2, 32, 1.0, 4.0), 4)
    for m in range(1, 5):
        for arr in table.phi[m].values():
            assert abs(arr.mean()) <= 1e-12 * max(np.max(np.abs(arr)), 1.0)


def test_homogenized_matrix_symmetric_and_bounded():
    table = compute_correctors(checkerboard_field(2, 64, 1.0, 4.0), 2)
    M = homogenized_matrix(table)
    assert np.allclose(M, M.T, atol=1e-12)
    eigs = np.linalg.eigvalsh(M)
    h = 1.0 / 64
    assert eigs.min() >= 1.0 - 10 * h
    assert eigs.max() <= 4.0 + 10 * h
    # duality: the checkerboard homogenizes to sqrt(ab) I
    assert M[0, 0] == pytest.approx(2.0, abs=0.1)
    assert M[0, 0] == pytest.approx(M[1, 1], rel=1e-10)


def test_smooth_field_second_order_convergence():
    vals = {}
    for N in (16, 32, 64):
        table = compute_correctors(smooth_field(2, N, 2.0), 2)
        vals[N] = homogenized_matrix(table)
    d1 = np.abs(vals[16] - vals[32]).max()
    d2 = np.abs(vals[32] - vals[64]).max()
    assert d1 / d2 > 3.0


def test_checkerboard_first_order_convergence():
    vals = {}
    for N in (32, 64, 128):
        table = compute_correctors(checkerboard_field(2, N, 1.0, 4.0), 2)
        vals[N] = homogenized_matrix(table)
    d1 = np.abs(vals[32] - vals[64]).max()
    d2 = np.abs(vals[64] - vals[128]).max()
    assert 1.3 < d1 / d2 < 3.5


def test_odd_tensor_decay_under_refinement():
    ratios = {}
    for N in (32, 64):
        table = compute_correctors(checkerboard_field(2, N, 1.0, 4.0), 3)
        ratios[N] = table.abar[3].norm() / table.abar[2].norm()
    assert ratios[32] < 1e-4
    assert ratios[64] < ratios[32]


def test_abar_invariant_under_rotated_labels():
    # swapping the two axes of the isotropic checkerboard leaves the
    # order-2 tensor isotropic
    table = compute_correctors(checkerboard_field(2, 32, 1.0, 4.0), 2)
    M = homogenized_matrix(table)
    assert M[0, 0] == pytest.approx(M[1, 1], rel=1e-10)


def test_truncated_view():
    table = compute_correctors(laminate_field(2, 32, 1.0, 2.0), 4)
    short = table.truncated(2)
    assert short.m_max == 2
    assert short.phi[1] is table.phi[1]
    with pytest.raises(ValueError):
        table.truncated(9)


def test_compute_correctors_thread_pool(monkeypatch):
    monkeypatch.setenv("HOMOG_UC_THREADS", "4")
    f = laminate_field(2, 32, 1.0, 2.0)
    parallel = compute_correctors(f, 3)
    monkeypatch.setenv("HOMOG_UC_THREADS", "1")
    serial = compute_correctors(f, 3)
    for m in range(1, 4):
        for key in serial.phi[m]:
            assert np.array_equal(parallel.phi[m][key], serial.phi[m][key])


# ---------------------------------------------------------------------------
# identity checks
# ---------------------------------------------------------------------------


def test_identities_constant_field_exact():
    table = compute_correctors(constant_field(2, 16, np.diag([2.0, 1.0])), 4)
    rep = check_identities(table)
    assert rep.passed
    assert rep.worst().relative < 1e-13


def test_identities_laminate_exact():
    table = compute_correctors(laminate_field(2, 32, 1.0, 2.0), 4)
    rep = check_identities(table)
    assert rep.passed
    assert rep.worst().relative < 1e-12


def test_identities_refine_on_rough_fields():
    worst = {}
    for N in (32, 64):
        table = compute_correctors(checkerboard_field(2, N, 1.0, 4.0), 4)
        rep = check_identities(table)
        assert rep.passed
        worst[N] = rep.worst().relative
    assert worst[64] < worst[32]


def test_identities_exchange_rows_present():
    table = compute_correctors(smooth_field(2, 32, 2.0), 4)
    rep = check_identities(table)
    names = {(r.name, r.orders) for r in rep.rows}
    assert ("exchange", (1, 2)) in names
    assert ("exchange", (1, 3)) in names
    assert ("exchange", (2, 2)) in names
    assert ("even_order", (2,)) in names
    assert ("even_order", (4,)) in names
    assert ("odd_vanishes", (3,)) in names
    assert ("tensor_chain", (2,)) in names


def test_identities_require_enough_orders():
    table = compute_correctors(laminate_field(2, 16, 1.0, 2.0), 2)
    with pytest.raises(ValueError):
        check_identities(table)


def test_identity_report_serializable():
    import json

    table = compute_correctors(laminate_field(2, 16, 1.0, 2.0), 3)
    rep = check_identities(table)
    blob = json.dumps(rep.to_dict())
    assert "rows" in blob
