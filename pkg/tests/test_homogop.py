import math
from fractions import Fraction as F

import numpy as np
import pytest

from homog_uc import cell
from homog_uc import homogop as ho
from homog_uc import multiindex as mi
from homog_uc import polyalg as pa
from homog_uc.polyalg import Polynomial, SymTensor


def rational_tensor(d, order, rng, denom=100):
    entries = {g: F(int(rng.integers(-10, 11)), denom)
               for g in mi.indices_of_order(d, order)}
    return SymTensor(d, order, entries)


@pytest.fixture(scope="module")
def laminate_table():
    field = cell.laminate_field(2, 64, 1.0, 2.0)
    return cell.compute_correctors(field, 6)


@pytest.fixture(scope="module")
def laminate_op(laminate_table):
    return ho.HomogenizedOperator.from_table(laminate_table)


# ---------------------------------------------------------------------------
# the operator
# ---------------------------------------------------------------------------


def test_apply_leading_order_is_trace():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    op = ho.HomogenizedOperator.leading_order(A)
    p = Polynomial(2, {(2, 0): F(1), (1, 1): F(3), (0, 2): F(2)})
    out = op.apply(p)
    assert out.coeffs == {(0, 0): pytest.approx(-(2 * 2 + 2 * 0.5 * 3 + 1 * 2 * 2))}


def test_apply_kills_low_degree():
    op = ho.HomogenizedOperator.leading_order(np.eye(2))
    assert op.apply(Polynomial.variable(2, 0)).is_zero()
    assert op.apply(Polynomial.one(2)).is_zero()


def test_apply_synthetic_quartic_pin():
    # oracle: hand expansion of the weighted pairing; grad^4(x1^4) has a
    # single entry 24 at (4,0), so the order-4 term contributes -24 t
    t = F(1, 10)
    op = ho.HomogenizedOperator(2, {2: SymTensor.identity(2),
                                    4: SymTensor(2, 4, {(4, 0): t})})
    out = op.apply(Polynomial.monomial(2, (4, 0)))
    assert out == Polynomial(2, {(2, 0): F(-12), (0, 0): -24 * t})


def test_operator_validation():
    with pytest.raises(ValueError):
        ho.HomogenizedOperator(2, {4: SymTensor(2, 4)})  # missing order 2
    with pytest.raises(ValueError):
        ho.HomogenizedOperator(2, {2: SymTensor.from_matrix(np.diag([1.0, -1.0]))})


def test_from_table_collects_even_orders(laminate_table, laminate_op):
    assert set(laminate_op.tensors) == {2, 4, 6}
    assert np.allclose(laminate_op.matrix(), np.diag([4.0 / 3.0, 1.5]), atol=1e-12)


# ---------------------------------------------------------------------------
# kernel construction
# ---------------------------------------------------------------------------


def test_build_passthrough_without_higher_tensors():
    op = ho.HomogenizedOperator(2, {2: SymTensor.identity(2)})
    for n in (1, 2, 3, 5):
        for h in pa.harmonic_basis(2, n):
            assert ho.build_a_harmonic(op, h).poly == h


def test_build_passthrough_below_degree_four():
    rng = np.random.default_rng(1)
    op = ho.HomogenizedOperator(2, {2: SymTensor.identity(2),
                                    4: rational_tensor(2, 4, rng)})
    for n in (0, 1, 2, 3):
        for h in pa.harmonic_basis(2, n):
            assert ho.build_a_harmonic(op, h).poly == h


def test_build_worked_quartic_example():
    t = F(1, 10)
    op = ho.HomogenizedOperator(2, {2: SymTensor.identity(2),
                                    4: SymTensor(2, 4, {(4, 0): t})})
    p = Polynomial(2, {(4, 0): F(1), (2, 2): F(-6), (0, 4): F(1)})
    built = ho.build_a_harmonic(op, p)
    # one recursion step: correction is the Laplacian inverse of the
    # constant contraction, a multiple of |x|^2
    c = 24 * t  # binom(4,(4,0)) * t * d^4/dx1^4 (x1^4)
    expected = p - pa.invert_laplacian(Polynomial.constant(2, c))
    assert built.poly == expected
    assert op.apply(built.poly).is_zero()
    assert (built.poly - p).degree == 2  # the correction drops two degrees


def test_build_exact_contract_random_ops():
    rng = np.random.default_rng(7)
    for _ in range(4):
        op = ho.HomogenizedOperator(2, {2: SymTensor.identity(2),
                                        4: rational_tensor(2, 4, rng),
                                        6: rational_tensor(2, 6, rng)})
        for n in range(0, 9):
            for h in pa.harmonic_basis(2, n):
                built = ho.build_a_harmonic(op, h)
                assert op.apply(built.poly).is_zero()
                diff = built.poly - h
                assert diff.is_zero() or diff.degree <= n - 2


def test_build_exact_contract_3d():
    rng = np.random.default_rng(9)
    op = ho.HomogenizedOperator(3, {2: SymTensor.identity(3),
                                    4: rational_tensor(3, 4, rng)})
    for n in (4, 5, 6):
        for h in pa.harmonic_basis(3, n)[:3]:
            built = ho.build_a_harmonic(op, h)
            assert op.apply(built.poly).is_zero()


def test_build_linearity():
    rng = np.random.default_rng(13)
    op = ho.HomogenizedOperator(2, {2: SymTensor.identity(2),
                                    4: rational_tensor(2, 4, rng)})
    h1, h2 = pa.harmonic_basis(2, 6)
    q1 = ho.build_a_harmonic(op, h1).poly
    q2 = ho.build_a_harmonic(op, h2).poly
    q12 = ho.build_a_harmonic(op, h1 + h2).poly
    assert q12 == q1 + q2


def test_build_rejects_nonharmonic_seed():
    op = ho.HomogenizedOperator(2, {2: SymTensor.identity(2)})
    with pytest.raises(ValueError):
        ho.build_a_harmonic(op, Polynomial.monomial(2, (2, 0)))


def test_build_float_path_with_table_operator(laminate_op):
    for n in (2, 4, 5):
        for seed in ho.a_harmonic_seed_basis(laminate_op, n):
            built = ho.build_a_harmonic(laminate_op, seed)
            resid = pa.poly_norm(laminate_op.apply(built.poly))
            assert resid <= 1e-10 * max(pa.poly_norm(built.poly), 1.0)


def test_seed_basis_rank(laminate_op):
    # kernel images of a harmonic basis stay linearly independent
    for n in (3, 4):
        seeds = ho.a_harmonic_seed_basis(laminate_op, n)
        built = [ho.build_a_harmonic(laminate_op, s).poly for s in seeds]
        monomials = sorted({a for q in built for a in q.coeffs})
        M = np.array([[float(q.coeffs.get(a, 0.0)) for a in monomials] for q in built])
        assert np.linalg.matrix_rank(M, tol=1e-8) == len(seeds)
        assert len(seeds) == pa.harmonic_space_dim(2, n)


def test_harmonic_approximation_trivial_and_decay():
    op0 = ho.HomogenizedOperator(2, {2: SymTensor.identity(2)})
    h = pa.harmonic_basis(2, 5)[0]
    built = ho.build_a_harmonic(op0, h)
    _, err = ho.harmonic_approximation(built, 10.0)
    assert err == 0.0

    rng = np.random.default_rng(17)
    op = ho.HomogenizedOperator(2, {2: SymTensor.identity(2),
                                    4: rational_tensor(2, 4, rng)})
    p = Polynomial(2, {(4, 0): F(1), (2, 2): F(-6), (0, 4): F(1)})
    built = ho.build_a_harmonic(op, p)
    _, e1 = ho.harmonic_approximation(built, 8.0)
    _, e2 = ho.harmonic_approximation(built, 16.0)
    assert e1 > 0
    # the quartic correction is a constant times |x|^2: one quarter per
    # radius doubling
    assert e1 / e2 == pytest.approx(4.0, rel=0.2)


# ---------------------------------------------------------------------------
# heterogeneous polynomials
# ---------------------------------------------------------------------------


def test_psi_equals_q_for_constant_coefficients():
    table = cell.compute_correctors(cell.constant_field(2, 16, np.eye(2)), 4)
    op = ho.HomogenizedOperator.from_table(table)
    h = pa.harmonic_basis(2, 3)[1]
    built = ho.build_a_harmonic(op, h)
    psi = ho.build_heterogeneous(built, table)
    pts = np.random.default_rng(2).uniform(-4, 4, (40, 2))
    assert np.max(np.abs(psi.evaluate(pts) - built.poly.evaluate(pts))) == 0.0
    assert np.max(np.abs(psi.eval_correction(pts))) == 0.0


def test_psi_constant_seed_is_constant(laminate_table, laminate_op):
    one = Polynomial.one(2)
    built = ho.build_a_harmonic(laminate_op, one)
    psi = ho.build_heterogeneous(built, laminate_table)
    pts = np.random.default_rng(3).uniform(-2, 2, (20, 2))
    assert np.max(np.abs(psi.evaluate(pts) - 1.0)) < 1e-14


def test_psi_laminate_first_order_oracle(laminate_table, laminate_op):
    from .test_cell import laminate_phi1_profile

    x1 = Polynomial.variable(2, 0)
    built = ho.build_a_harmonic(laminate_op, x1)
    assert built.poly == x1
    psi = ho.build_heterogeneous(built, laminate_table)
    xs = np.linspace(0.0, 2.0, 23)
    pts = np.stack([xs, 0.37 * np.ones_like(xs)], axis=-1)
    expected = xs + laminate_phi1_profile(xs)
    assert np.max(np.abs(psi.evaluate(pts) - expected)) < 1e-9


def test_build_heterogeneous_truncation_guard(laminate_table, laminate_op):
    seed = ho.a_harmonic_seed_basis(laminate_op, 4)[0]
    built = ho.build_a_harmonic(laminate_op, seed)
    short = laminate_table.truncated(2)
    with pytest.raises(ValueError):
        ho.build_heterogeneous(built, short)
    psi = ho.build_heterogeneous(built, short, allow_truncation=True)
    assert psi.n_max == 2


def test_window_samples_cached(laminate_table, laminate_op):
    seed = ho.a_harmonic_seed_basis(laminate_op, 2)[0]
    psi = ho.build_heterogeneous(ho.build_a_harmonic(laminate_op, seed), laminate_table)
    w1 = psi.window_samples(0, 1)
    w2 = psi.window_samples(0, 1)
    assert w1 is w2
    assert w1.shape == (64, 64)


# ---------------------------------------------------------------------------
# residual and polynomial distance
# ---------------------------------------------------------------------------


def test_residual_constant_coefficients_at_floor():
    table = cell.compute_correctors(cell.constant_field(2, 16, np.eye(2)), 4)
    op = ho.HomogenizedOperator.from_table(table)
    built = ho.build_a_harmonic(op, pa.harmonic_basis(2, 3)[0])
    psi = ho.build_heterogeneous(built, table)
    assert ho.residual_psi(psi) < 1e-12


def test_residual_refines_and_truncation_defeats():
    res, res_trunc = {}, {}
    for N in (32, 64):
        table = cell.compute_correctors(cell.laminate_field(2, N, 1.0, 2.0), 4)
        op = ho.HomogenizedOperator.from_table(table)
        seed = ho.a_harmonic_seed_basis(op, 4)[0]
        built = ho.build_a_harmonic(op, seed)
        res[N] = ho.residual_psi(ho.build_heterogeneous(built, table))
        res_trunc[N] = ho.residual_psi(
            ho.build_heterogeneous(built, table.truncated(2), allow_truncation=True))
    assert res[32] / res[64] >= 1.7
    assert res_trunc[32] / res_trunc[64] < 1.7
    assert res_trunc[64] > 50 * res[64]


def test_psi_poly_error_trivial_and_slope(laminate_table, laminate_op):
    # constant coefficients: psi == q, distance zero
    const = cell.compute_correctors(cell.constant_field(2, 16, np.eye(2)), 3)
    cop = ho.HomogenizedOperator.from_table(const)
    built_c = ho.build_a_harmonic(cop, pa.harmonic_basis(2, 2)[0])
    assert ho.psi_poly_error(ho.build_heterogeneous(built_c, const), 8.0,
                             quadrature_n=256) == 0.0

    x1 = Polynomial.variable(2, 0)
    built = ho.build_a_harmonic(laminate_op, x1)
    psi = ho.build_heterogeneous(built, laminate_table)
    radii = [8.0, 16.0, 32.0]
    errs = [ho.psi_poly_error(psi, r, quadrature_n=int(r * 26)) for r in radii]
    slope = np.polyfit(np.log(radii), np.log(errs), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.2)


def test_a_harmonic_dim_values():
    assert ho.a_harmonic_dim(2, 3) == 7
    assert ho.a_harmonic_dim(3, 2) == 9
