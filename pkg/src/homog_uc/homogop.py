"""The homogenized operator, its harmonic polynomials, and heterogeneous
polynomials built from corrector tables.

The operator acts on polynomials as minus the sum of the even-order
homogenized tensors contracted against the matching derivative tensors.
Its kernel inside degree-m polynomials has the same dimension as the
harmonic polynomials of degree m, and members are produced from harmonic
seeds by a lower-order correction recursion: repeatedly push the
higher-tensor contributions through the exact Laplacian inverse.  With
rational tensors and the identity as leading matrix the construction and
the kernel test are exact; a general SPD leading matrix is handled by
conjugating with its square root.

A heterogeneous polynomial pairs an operator-harmonic polynomial q with
a corrector table: psi(x) = sum_n grad^n q(x) : phi_n(x).  It solves the
variable-coefficient equation globally (up to discretization error), and
the residual and polynomial-distance measurements quantify exactly that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import multiindex as mi
from .cell import CorrectorTable, PeriodicOperator, _corners
from .polyalg import (
    Ellipsoid,
    Polynomial,
    SymTensor,
    change_of_variables,
    contract_grad,
    grad_tensor,
    harmonic_basis,
    invert_laplacian,
    l2_norm_ellipsoid,
    laplacian,
    matrix_sqrt,
    poly_norm,
)

__all__ = [
    "HomogenizedOperator",
    "AHarmonicPolynomial",
    "HeterogeneousPolynomial",
    "a_harmonic_dim",
    "apply_operator",
    "build_a_harmonic",
    "a_harmonic_seed_basis",
    "build_heterogeneous",
    "harmonic_approximation",
    "residual_psi",
    "psi_poly_error",
]

from .polyalg import a_harmonic_dim  # noqa: E402  (re-export, same contract)


@dataclass
class HomogenizedOperator:
    """Constant-coefficient operator -sum_k abar_{2k} : grad^{2k}.

    tensors maps even orders to SymTensors; order 2 is mandatory and its
    matrix form must be SPD.  Odd orders are absent by construction.
    """

    d: int
    tensors: dict
    provenance: str = "synthetic"

    def __post_init__(self):
        if 2 not in self.tensors:
            raise ValueError("the order-2 tensor is mandatory")
        for k, T in self.tensors.items():
            if k % 2 or k < 2:
                raise ValueError("tensor orders must be even and >= 2")
            if T.dim != self.d or T.order != k:
                raise ValueError(f"tensor at order {k} has wrong shape")
        w = np.linalg.eigvalsh(self.matrix())
        if np.any(w <= 0):
            raise ValueError("leading matrix is not SPD")

    @classmethod
    def from_table(cls, table: CorrectorTable, max_order: int | None = None,
                   drop_tol: float = 1e-6) -> "HomogenizedOperator":
        """Collect the even-order tensors of a corrector table.

        Odd tensors must already be negligible relative to order 2 (they
        vanish in the continuum); a loud failure here beats a silently
        lopsided operator.
        """
        m_top = table.m_max if max_order is None else min(max_order, table.m_max)
        a2 = table.abar[2].norm()
        tensors = {}
        for k in range(2, m_top + 1):
            if k % 2:
                if table.abar[k].norm() > drop_tol * a2:
                    raise ValueError(
                        f"odd-order tensor {k} is not negligible "
                        f"({table.abar[k].norm():.3e} vs {a2:.3e})")
                continue
            tensors[k] = table.abar[k]
        return cls(table.d, tensors, provenance=f"table(N={table.N})")

    @classmethod
    def leading_order(cls, matrix, provenance: str = "synthetic") -> "HomogenizedOperator":
        return cls(len(matrix), {2: SymTensor.from_matrix(np.asarray(matrix, dtype=float))},
                   provenance=provenance)

    def matrix(self) -> np.ndarray:
        return self.tensors[2].to_matrix()

    @property
    def max_order(self) -> int:
        return max(self.tensors)

    def is_exact(self) -> bool:
        """True when every tensor entry is rational (exact arithmetic)."""
        return all(isinstance(v, (int, Fraction))
                   for T in self.tensors.values() for v in T.entries.values())

    def leading_is_identity(self) -> bool:
        a2 = self.tensors[2]
        expected = {mi.increment(mi.increment((0,) * self.d, i), i): 1 for i in range(self.d)}
        return {k: Fraction(v) if isinstance(v, (int, Fraction)) else v
                for k, v in a2.entries.items()} == {k: Fraction(1) for k in expected}

    def apply(self, p: Polynomial) -> Polynomial:
        """-sum_k abar_{2k} : grad^{2k} p (degree drops by at least 2)."""
        if p.dim != self.d:
            raise ValueError("dimension mismatch")
        out = Polynomial.zero(self.d)
        for k, T in self.tensors.items():
            if p.degree >= k:
                out = out - contract_grad(T, p)
        return out


def apply_operator(op: HomogenizedOperator, p: Polynomial) -> Polynomial:
    return op.apply(p)


@dataclass
class AHarmonicPolynomial:
    """A polynomial in the kernel of a homogenized operator, remembering
    the harmonic seed it was grown from."""

    poly: Polynomial
    op: HomogenizedOperator
    seed: Polynomial

    @property
    def degree(self):
        return self.poly.degree


def _transform_tensors(op: HomogenizedOperator, B) -> dict:
    """Push tensors through x -> Bx via their polynomial avatars: the
    transformed symbol is t(B^T xi)."""
    BT = [list(row) for row in np.asarray(B, dtype=float).T] if isinstance(B, np.ndarray) \
        else [list(col) for col in zip(*B)]
    out = {}
    for k, T in op.tensors.items():
        if k == 2:
            continue
        avatar = T.avatar()
        moved = change_of_variables(avatar, BT)
        out[k] = SymTensor.from_avatar(moved, k)
    return out


def _correction_recursion(p: Polynomial, higher: dict) -> Polynomial:
    """Kernel construction with identity leading matrix: starting from a
    harmonic homogeneous seed, accumulate q = sum q_k where

        p_k = sum_{j>=2} abar_{2j} : grad^{2j} q_{k+1-j},   q_k = -Sinv(p_k)

    and Sinv is the harmonic-orthogonal Laplacian inverse.  Terminates
    because each step drops the degree by two.
    """
    if p.is_zero():
        return p
    m = int(p.degree)
    q_list = [p]
    total = p
    k = 1
    while 2 * k <= m:
        pk = Polynomial.zero(p.dim)
        for j in range(2, k + 2):
            if not higher or 2 * j not in higher:
                continue
            idx = k + 1 - j
            if idx < 0 or idx >= len(q_list):
                continue
            src = q_list[idx]
            if src.degree >= 2 * j:
                pk = pk + contract_grad(higher[2 * j], src)
        qk = -invert_laplacian(pk) if not pk.is_zero() else Polynomial.zero(p.dim)
        q_list.append(qk)
        total = total + qk
        k += 1
    return total


def build_a_harmonic(op: HomogenizedOperator, p: Polynomial,
                     seed_tol: float = 1e-8) -> AHarmonicPolynomial:
    """Grow the kernel polynomial of op whose leading part is the seed p.

    p must be harmonic after the change of variables that turns the
    leading matrix into the identity (i.e. p is leading-matrix-harmonic).
    With rational data and identity leading matrix everything is exact
    and op.apply(result) == 0 holds with zero tolerance; the float path
    checks it to 1e-10 relative.  The correction q - p has degree at most
    deg(p) - 2 and vanishes when no higher tensors are present.
    """
    if p.dim != op.d:
        raise ValueError("dimension mismatch")
    if p.is_zero():
        return AHarmonicPolynomial(p, op, p)
    exact = op.is_exact() and op.leading_is_identity() and all(
        isinstance(c, (int, Fraction)) for c in p.coeffs.values())

    if op.leading_is_identity():
        transformed = p
        back = None
    else:
        S = matrix_sqrt(op.matrix())
        transformed = change_of_variables(p, S)
        back = np.linalg.inv(S)

    lap = laplacian(transformed)
    if not lap.is_zero():
        scale = poly_norm(transformed)
        if exact or poly_norm(lap) > seed_tol * max(scale, 1.0):
            raise ValueError("seed is not harmonic in transformed coordinates")

    higher = (_transform_tensors(op, back) if back is not None
              else {k: T for k, T in op.tensors.items() if k != 2})
    out = Polynomial.zero(op.d)
    for _, part in transformed.homogeneous_parts().items():
        out = out + _correction_recursion(part, higher)
    if back is not None:
        out = change_of_variables(out, back)

    residual = op.apply(out)
    if exact:
        if not residual.is_zero():
            raise AssertionError("exact kernel construction left a residual")
    else:
        scale = poly_norm(out)
        if poly_norm(residual) > 1e-10 * max(scale, 1.0):
            raise AssertionError(
                f"kernel residual {poly_norm(residual):.3e} vs scale {scale:.3e}")
    return AHarmonicPolynomial(out, op, p)


def a_harmonic_seed_basis(op: HomogenizedOperator, n: int):
    """Homogeneous degree-n seeds adapted to the leading matrix: exact
    harmonics pulled back through the square root when it is not the
    identity."""
    basis = harmonic_basis(op.d, n)
    if op.leading_is_identity():
        return basis
    Binv = np.linalg.inv(matrix_sqrt(op.matrix()))
    return [change_of_variables(h, Binv) for h in basis]


def harmonic_approximation(q: AHarmonicPolynomial, r: float):
    """The leading-matrix-harmonic part of q and the relative L2 distance
    on the ellipsoid of radius r (exact polynomial norms)."""
    if r <= 0:
        raise ValueError("radius must be positive")
    E = Ellipsoid(q.op.matrix(), r)
    diff = q.poly - q.seed
    if diff.is_zero():
        return q.seed, 0.0
    denom = l2_norm_ellipsoid(q.poly, E)
    return q.seed, l2_norm_ellipsoid(diff, E) / denom


# ---------------------------------------------------------------------------
# heterogeneous polynomials
# ---------------------------------------------------------------------------


class HeterogeneousPolynomial:
    """psi(x) = sum_n grad^n q(x) : phi_n(x), with periodic multilinear
    interpolation of the corrector components off the grid.

    Collapses to q itself when every corrector of order >= 1 vanishes
    (constant coefficients)."""

    def __init__(self, q: AHarmonicPolynomial, table: CorrectorTable,
                 n_max: int | None = None):
        self.q = q
        self.table = table
        deg = 0 if q.poly.is_zero() else int(q.poly.degree)
        self.n_max = deg if n_max is None else n_max
        # per order: list of (weight, derivative polynomial, corrector grid)
        self._terms = []
        for n in range(1, self.n_max + 1):
            derivs = grad_tensor(q.poly, n)
            for alpha, dq in derivs.items():
                grid = table.phi[n].get(alpha) if n <= table.m_max else None
                if grid is None:
                    continue
                self._terms.append((float(mi.multinomial(alpha)), dq, grid))
        self._window_cache = {}

    @property
    def degree(self):
        return self.q.poly.degree

    @property
    def polynomial(self) -> Polynomial:
        return self.q.poly

    def _interp(self, grid: np.ndarray, points: np.ndarray) -> np.ndarray:
        N = self.table.N
        d = self.table.d
        scaled = np.mod(points, 1.0) * N
        base = np.floor(scaled).astype(np.int64)
        frac = scaled - base
        base = np.mod(base, N)
        out = np.zeros(points.shape[0])
        for corner in _corners(d):
            w = np.ones(points.shape[0])
            idx = []
            for i, c in enumerate(corner):
                w = w * (frac[:, i] if c else 1.0 - frac[:, i])
                idx.append(np.mod(base[:, i] + c, N))
            out += w * grid[tuple(idx)]
        return out

    def eval_correction(self, points: np.ndarray) -> np.ndarray:
        """The oscillating part psi - q at the given points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(points.shape[0])
        for w, dq, grid in self._terms:
            out += w * dq.evaluate(points) * self._interp(grid, points)
        return out

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self.q.poly.evaluate(points) + self.eval_correction(points)

    def window_samples(self, lo: int, hi: int) -> np.ndarray:
        """Nodal samples on the integer-cell window [lo, hi)^d at the
        corrector grid resolution (cached per window)."""
        key = (lo, hi)
        if key not in self._window_cache:
            N = self.table.N
            d = self.table.d
            axis = np.arange(lo * N, hi * N) / N
            grids = np.meshgrid(*([axis] * d), indexing="ij")
            pts = np.stack([g.ravel() for g in grids], axis=-1)
            side = (hi - lo) * N
            self._window_cache[key] = self.evaluate(pts).reshape((side,) * d)
        return self._window_cache[key]


def build_heterogeneous(q: AHarmonicPolynomial, table: CorrectorTable,
                        allow_truncation: bool = False) -> HeterogeneousPolynomial:
    deg = 0 if q.poly.is_zero() else int(q.poly.degree)
    if table.m_max < deg and not allow_truncation:
        raise ValueError(f"corrector table holds orders <= {table.m_max}, "
                         f"polynomial has degree {deg}")
    return HeterogeneousPolynomial(q, table, n_max=min(deg, table.m_max))


def residual_psi(psi: HeterogeneousPolynomial) -> float:
    """Relative discrete residual of the variable-coefficient equation
    over one period.

    Samples psi on the nodes of a one-period window (plus a guard ring)
    and applies the interior stiffness stencil.  The nodal values are
    normalized by h^2 times the absolute-valued stencil action, which
    measures the residual density relative to the size of a grad(a grad)
    term: an interpolated true solution scores O(h^p) and keeps
    shrinking under refinement, while a defective construction (wrong
    polynomial, truncated corrector table) levels off at O(1).
    """
    table = psi.table
    N, d = table.N, table.d
    h = 1.0 / N
    axis = np.arange(-1, N + 1) / N
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    u = psi.evaluate(pts).reshape(*(N + 2,) * d)

    op = PeriodicOperator(table.field)
    # cells covering the stencils of the interior nodes: offsets -1 .. N-1
    rho = np.zeros((N,) * d)
    scale = np.zeros((N,) * d)
    corners = _corners(d)
    for (cp, cq), W in op.weights.items():
        # cell at index k (grid coords k-1 .. ) contributes to node k-1+cp
        Wx = np.roll(W, shift=(1,) * d, axis=tuple(range(d)))  # cell -1 wraps from N-1
        Wpad = _pad_cells(Wx, N, d)
        uq = _window_slice(u, cq, N, d)
        contrib = Wpad * uq
        acontrib = np.abs(Wpad) * np.abs(uq)
        rho += _scatter_interior(contrib, cp, N, d)
        scale += _scatter_interior(acontrib, cp, N, d)
    num = float(np.linalg.norm(rho))
    den = h ** 2 * float(np.linalg.norm(scale))
    return num / den if den > 0 else 0.0


def _pad_cells(W: np.ndarray, N: int, d: int) -> np.ndarray:
    """Periodic cell weights on the (N+1)^d window with origin cell -1."""
    out = W
    for axis in range(d):
        idx = np.mod(np.arange(N + 1), N)
        out = np.take(out, idx, axis=axis)
    return out


def _window_slice(u: np.ndarray, corner, N: int, d: int) -> np.ndarray:
    slices = tuple(slice(c, c + N + 1) for c in corner)
    return u[slices]


def _scatter_interior(cellvals: np.ndarray, corner, N: int, d: int) -> np.ndarray:
    """Accumulate cell contributions onto interior nodes 0..N-1; the cell
    window starts at -1, so node index = cell index - 1 + corner."""
    lo = []
    for c in corner:
        start = 1 - c
        lo.append(slice(start, start + N))
    return cellvals[tuple(lo)]


def psi_poly_error(psi: HeterogeneousPolynomial, r: float,
                   quadrature_n: int = 0, rng=None, n_samples: int = 200_000) -> float:
    """|| psi - q ||_{L2(E_r)} / || psi ||_{L2(E_r)} by ellipsoid quadrature."""
    from .equad import psi_sq_norms

    E = Ellipsoid(psi.q.op.matrix(), r)
    res = psi_sq_norms(psi, [r], E.abar, rng=rng, n_samples=n_samples,
                       quadrature_n=quadrature_n)[r]
    return math.sqrt(max(res.correction_sq, 0.0) / res.total) if res.total > 0 else 0.0
