"""Exact multivariate polynomial and symmetric-tensor algebra.

Polynomials are sparse maps from multi-indices to coefficients.  The
algebraic operations (Laplacian, multiplication by ``|x|^2``, harmonic
decomposition, Laplacian inversion, the monomial inner product) are exact
whenever the coefficients are exact, e.g. ``fractions.Fraction``; nothing
here forces a conversion to float.  Floats only enter when a norm is
evaluated, and the closed-form ball moments are kept as exact rational
multiples of pi**(d//2) so that even the L2 inner products on balls have
an exact code path.

The monomial inner product is <x^a, x^b> = a! 1{a=b}.  Multiplication by
``|x|^2`` and the Laplacian are mutually adjoint for it, which is what
makes the harmonic decomposition orthogonal and the Laplacian inverse
below well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import multiindex as mi

_NEG_INF = float("-inf")


class Polynomial:
    """Sparse real polynomial on R^d keyed by multi-indices.

    Zero coefficients are never stored.  Coefficient types are left
    alone: Fractions stay Fractions, floats stay floats.
    """

    __slots__ = ("dim", "coeffs")

    def __init__(self, dim: int, coeffs=None):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = dim
        self.coeffs = {}
        if coeffs:
            for alpha, c in coeffs.items():
                if len(alpha) != dim:
                    raise ValueError(f"index {alpha} does not have length {dim}")
                if c != 0:
                    self.coeffs[tuple(alpha)] = c

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, dim: int) -> "Polynomial":
        return cls(dim)

    @classmethod
    def constant(cls, dim: int, c) -> "Polynomial":
        return cls(dim, {(0,) * dim: c})

    @classmethod
    def one(cls, dim: int) -> "Polynomial":
        return cls.constant(dim, Fraction(1))

    @classmethod
    def monomial(cls, dim: int, alpha, c=Fraction(1)) -> "Polynomial":
        return cls(dim, {tuple(alpha): c})

    @classmethod
    def variable(cls, dim: int, i: int) -> "Polynomial":
        alpha = tuple(1 if j == i else 0 for j in range(dim))
        return cls(dim, {alpha: Fraction(1)})

    @classmethod
    def radius_sq(cls, dim: int) -> "Polynomial":
        """The polynomial |x|^2."""
        return cls(dim, {mi.increment(mi.increment((0,) * dim, i), i): Fraction(1)
                         for i in range(dim)})

    # -- structure ---------------------------------------------------------

    @property
    def degree(self):
        """Max stored order, or -inf for the zero polynomial."""
        if not self.coeffs:
            return _NEG_INF
        return max(sum(a) for a in self.coeffs)

    def is_zero(self) -> bool:
        return not self.coeffs

    def is_homogeneous(self) -> bool:
        orders = {sum(a) for a in self.coeffs}
        return len(orders) <= 1

    def homogeneous_part(self, m: int) -> "Polynomial":
        return Polynomial(self.dim, {a: c for a, c in self.coeffs.items() if sum(a) == m})

    def homogeneous_parts(self):
        """Dict order -> homogeneous component, ascending order."""
        parts = {}
        for a, c in self.coeffs.items():
            parts.setdefault(sum(a), {})[a] = c
        return {m: Polynomial(self.dim, cs) for m, cs in sorted(parts.items())}

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        out = dict(self.coeffs)
        for a, c in other.coeffs.items():
            s = out.get(a, 0) + c
            if s == 0:
                out.pop(a, None)
            else:
                out[a] = s
        p = Polynomial(self.dim)
        p.coeffs = out
        return p

    def __neg__(self):
        p = Polynomial(self.dim)
        p.coeffs = {a: -c for a, c in self.coeffs.items()}
        return p

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, Polynomial):
            if other.dim != self.dim:
                raise ValueError("dimension mismatch")
            out = {}
            for a, ca in self.coeffs.items():
                for b, cb in other.coeffs.items():
                    g = mi.index_add(a, b)
                    s = out.get(g, 0) + ca * cb
                    if s == 0:
                        out.pop(g, None)
                    else:
                        out[g] = s
            p = Polynomial(self.dim)
            p.coeffs = out
            return p
        return self.scale(other)

    def __rmul__(self, other):
        return self.scale(other)

    def scale(self, c):
        if c == 0:
            return Polynomial(self.dim)
        p = Polynomial(self.dim)
        p.coeffs = {a: c * v for a, v in self.coeffs.items()}
        return p

    def __eq__(self, other):
        return (isinstance(other, Polynomial) and other.dim == self.dim
                and other.coeffs == self.coeffs)

    def __repr__(self):
        if not self.coeffs:
            return f"Polynomial({self.dim}, 0)"
        terms = ", ".join(f"{a}: {c}" for a, c in sorted(self.coeffs.items()))
        return f"Polynomial({self.dim}, {{{terms}}})"

    # -- calculus ----------------------------------------------------------

    def partial(self, i: int) -> "Polynomial":
        out = {}
        for a, c in self.coeffs.items():
            if a[i] > 0:
                out[mi.decrement(a, i)] = c * a[i]
        p = Polynomial(self.dim)
        p.coeffs = out
        return p

    def gradient(self):
        return tuple(self.partial(i) for i in range(self.dim))

    # -- evaluation --------------------------------------------------------

    def __call__(self, x):
        """Evaluate at a single point (sequence of d scalars)."""
        total = 0
        for a, c in self.coeffs.items():
            t = c
            for xi, ai in zip(x, a):
                if ai:
                    t = t * xi ** ai
            total = total + t
        return total

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation at an (n, d) float array of points."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        n = points.shape[0]
        if not self.coeffs:
            return np.zeros(n)
        maxdeg = [0] * self.dim
        for a in self.coeffs:
            for i, ai in enumerate(a):
                maxdeg[i] = max(maxdeg[i], ai)
        powers = []
        for i in range(self.dim):
            tab = np.ones((maxdeg[i] + 1, n))
            for e in range(1, maxdeg[i] + 1):
                tab[e] = tab[e - 1] * points[:, i]
            powers.append(tab)
        out = np.zeros(n)
        for a, c in self.coeffs.items():
            term = np.full(n, float(c))
            for i, ai in enumerate(a):
                if ai:
                    term = term * powers[i][ai]
            out += term
        return out

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        """{"d": d, "terms": [{"alpha": [...], "num": p, "den": q}]}.

        Rational coefficients use num/den, others a float "value".
        Terms are emitted in canonical (graded-lex) order.
        """
        terms = []
        for a in sorted(self.coeffs, key=lambda t: (sum(t), tuple(-e for e in t))):
            c = self.coeffs[a]
            if isinstance(c, (int, Fraction)):
                f = Fraction(c)
                terms.append({"alpha": list(a), "num": f.numerator, "den": f.denominator})
            else:
                terms.append({"alpha": list(a), "value": float(c)})
        return {"d": self.dim, "terms": terms}

    @classmethod
    def from_json_dict(cls, data: dict) -> "Polynomial":
        coeffs = {}
        for t in data["terms"]:
            alpha = tuple(int(e) for e in t["alpha"])
            if "num" in t:
                coeffs[alpha] = Fraction(int(t["num"]), int(t["den"]))
            else:
                coeffs[alpha] = float(t["value"])
        return cls(int(data["d"]), coeffs)


# ---------------------------------------------------------------------------
# symmetric tensors
# ---------------------------------------------------------------------------


class SymTensor:
    """Symmetric tensor of order m on R^d, stored per canonical multi-index.

    The pairing (S : T) = sum_{|a|=m} binom(m, a) S_a T_a is the inner
    product used everywhere a ":" contraction appears.
    """

    __slots__ = ("dim", "order", "entries")

    def __init__(self, dim: int, order: int, entries=None):
        if order < 0:
            raise ValueError("order must be >= 0")
        self.dim = dim
        self.order = order
        self.entries = {}
        if entries:
            for a, v in entries.items():
                a = tuple(a)
                if len(a) != dim or sum(a) != order:
                    raise ValueError(f"index {a} not of order {order} in dim {dim}")
                if v != 0:
                    self.entries[a] = v

    @classmethod
    def zero(cls, dim: int, order: int) -> "SymTensor":
        return cls(dim, order)

    @classmethod
    def from_matrix(cls, M) -> "SymTensor":
        """Order-2 tensor with T_{e_i+e_j} = M_ij (M symmetric)."""
        M = np.asarray(M)
        d = M.shape[0]
        entries = {}
        for i in range(d):
            for j in range(i, d):
                idx = mi.increment(mi.increment((0,) * d, i), j)
                entries[idx] = M[i, j]
        return cls(d, 2, entries)

    @classmethod
    def identity(cls, d: int) -> "SymTensor":
        """Order-2 identity with exact rational entries."""
        return cls(d, 2, {mi.increment(mi.increment((0,) * d, i), i): Fraction(1)
                          for i in range(d)})

    @classmethod
    def power_of_point(cls, x, m: int) -> "SymTensor":
        """x^{(x) m}: entries x^alpha over |alpha| = m."""
        d = len(x)
        entries = {}
        for a in mi.indices_of_order(d, m):
            v = 1
            for xi, ai in zip(x, a):
                v = v * xi ** ai
            entries[a] = v
        return cls(d, m, entries)

    def get(self, alpha):
        return self.entries.get(tuple(alpha), 0)

    def pair(self, other: "SymTensor"):
        if other.order != self.order or other.dim != self.dim:
            raise ValueError("tensor order/dimension mismatch")
        total = 0
        for a, v in self.entries.items():
            w = other.entries.get(a)
            if w is not None:
                total = total + mi.multinomial(a) * v * w
        return total

    def norm(self) -> float:
        return math.sqrt(float(self.pair(self)))

    def to_matrix(self) -> np.ndarray:
        if self.order != 2:
            raise ValueError("matrix form only defined for order 2")
        M = np.zeros((self.dim, self.dim))
        for i in range(self.dim):
            for j in range(self.dim):
                idx = mi.increment(mi.increment((0,) * self.dim, i), j)
                M[i, j] = float(self.get(idx))
        return M

    def scale(self, c) -> "SymTensor":
        return SymTensor(self.dim, self.order, {a: c * v for a, v in self.entries.items()})

    def __add__(self, other):
        if not isinstance(other, SymTensor):
            return NotImplemented
        if other.order != self.order or other.dim != self.dim:
            raise ValueError("tensor order/dimension mismatch")
        out = dict(self.entries)
        for a, v in other.entries.items():
            s = out.get(a, 0) + v
            if s == 0:
                out.pop(a, None)
            else:
                out[a] = s
        return SymTensor(self.dim, self.order, out)

    def __eq__(self, other):
        return (isinstance(other, SymTensor) and other.dim == self.dim
                and other.order == self.order and other.entries == self.entries)

    def __repr__(self):
        return f"SymTensor(d={self.dim}, m={self.order}, {self.entries})"

    # A degree-m homogeneous polynomial carries the same data: the avatar
    # of T is sum binom(m,a) T_a x^a, and (T : grad^m p) for degree-m p is
    # the pairing of T with the derivative tensor of p.

    def avatar(self) -> Polynomial:
        return Polynomial(self.dim, {a: mi.multinomial(a) * v
                                     for a, v in self.entries.items()})

    @classmethod
    def from_avatar(cls, p: Polynomial, order: int) -> "SymTensor":
        if not p.is_zero() and (not p.is_homogeneous() or p.degree != order):
            raise ValueError("avatar must be homogeneous of the given order")
        entries = {a: Fraction(1, mi.multinomial(a)) * c if isinstance(c, (int, Fraction))
                   else c / mi.multinomial(a)
                   for a, c in p.coeffs.items()}
        return cls(p.dim, order, entries)


def tensor_pair(S: SymTensor, T: SymTensor):
    """Weighted pairing (S : T); symmetric, positive definite."""
    return S.pair(T)


# ---------------------------------------------------------------------------
# Laplacian, |x|^2 multiplication, inner product
# ---------------------------------------------------------------------------


def laplacian(p: Polynomial) -> Polynomial:
    out = Polynomial(p.dim)
    acc = {}
    for a, c in p.coeffs.items():
        for i in range(p.dim):
            if a[i] >= 2:
                b = mi.decrement(mi.decrement(a, i), i)
                s = acc.get(b, 0) + c * a[i] * (a[i] - 1)
                if s == 0:
                    acc.pop(b, None)
                else:
                    acc[b] = s
    out.coeffs = acc
    return out


def mult_r2(p: Polynomial) -> Polynomial:
    """Multiply by |x|^2, the adjoint of the Laplacian for poly_inner."""
    acc = {}
    for a, c in p.coeffs.items():
        for i in range(p.dim):
            b = mi.increment(mi.increment(a, i), i)
            s = acc.get(b, 0) + c
            if s == 0:
                acc.pop(b, None)
            else:
                acc[b] = s
    out = Polynomial(p.dim)
    out.coeffs = acc
    return out


def poly_inner(p: Polynomial, q: Polynomial):
    """<p, q> = sum_a a! p_a q_a (monomials are orthogonal, <x^a,x^a> = a!)."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    total = 0
    small, big = (p.coeffs, q.coeffs) if len(p.coeffs) <= len(q.coeffs) else (q.coeffs, p.coeffs)
    for a, c in small.items():
        w = big.get(a)
        if w is not None:
            total = total + mi.index_factorial(a) * c * w
    return total


def poly_norm(p: Polynomial) -> float:
    return math.sqrt(float(poly_inner(p, p)))


def grad_tensor(p: Polynomial, n: int):
    """Derivative tensor grad^n p as {alpha: d^alpha p} over |alpha| = n.

    Zero derivatives are dropped; grad_tensor(p, 0) = {0: p}.
    """
    if n < 0:
        raise ValueError("derivative order must be >= 0")
    level = {(0,) * p.dim: p}
    for _ in range(n):
        nxt = {}
        for a, q in level.items():
            for i in range(p.dim):
                b = mi.increment(a, i)
                if b in nxt:
                    continue
                # reuse: d^b p = d_i (d^a p), independent of the path
                dq = q.partial(i)
                if not dq.is_zero():
                    nxt[b] = dq
        level = nxt
        if not level:
            break
    return {a: q for a, q in level.items() if not q.is_zero()}


def contract_grad(T: SymTensor, p: Polynomial) -> Polynomial:
    """T : grad^m p with the multinomial-weighted pairing, a polynomial."""
    out = Polynomial(p.dim)
    derivs = grad_tensor(p, T.order)
    for a, v in T.entries.items():
        q = derivs.get(a)
        if q is not None:
            out = out + q.scale(mi.multinomial(a) * v)
    return out


# ---------------------------------------------------------------------------
# harmonic decomposition and Laplacian inversion
# ---------------------------------------------------------------------------


def _radial_lowering_constant(k: int, deg_harm: int, d: int) -> int:
    """Laplacian of |x|^{2k} h for harmonic homogeneous h:

        Lap(|x|^{2k} h) = 2k (d + 2 deg(h) + 2k - 2) |x|^{2k-2} h.
    """
    return 2 * k * (d + 2 * deg_harm + 2 * k - 2)


def harmonic_decompose(p: Polynomial):
    """Split homogeneous p of degree m into (p_0, ..., p_{m//2}) with
    p = sum_k |x|^{2k} p_k and every p_k harmonic homogeneous of degree
    m - 2k.  Components are mutually orthogonal for poly_inner and for
    L2 on every centered ball.

    The top component is extracted by repeated Laplacian application
    (each pass is exact), then peeled off; no linear solves.
    """
    if p.is_zero():
        return [Polynomial.zero(p.dim)]
    if not p.is_homogeneous():
        raise ValueError("harmonic_decompose requires a homogeneous polynomial")
    m = p.degree
    d = p.dim
    K = m // 2
    out = [Polynomial.zero(d)] * (K + 1)
    residual = p
    for k in range(K, -1, -1):
        q = residual
        for _ in range(k):
            q = laplacian(q)
        c = 1
        for i in range(k):
            c *= _radial_lowering_constant(k - i, m - 2 * k, d)
        pk = q.scale(Fraction(1, c)) if c != 1 else q
        out[k] = pk
        if not pk.is_zero():
            lifted = pk
            for _ in range(k):
                lifted = mult_r2(lifted)
            residual = residual - lifted
    return out


def invert_laplacian(p: Polynomial) -> Polynomial:
    """The right inverse of the Laplacian whose range is orthogonal to
    harmonic polynomials: laplacian(invert_laplacian(p)) == p exactly and
    <invert_laplacian(p), h> = 0 for every harmonic h.

    On a homogeneous part of degree m with decomposition sum |x|^{2k} p_k
    the inverse is sum |x|^{2k+2} p_k / b_k with
    b_k = (2k+2)(d + 2m - 2k); it extends to all of P by linearity.
    """
    d = p.dim
    out = Polynomial.zero(d)
    for m, part in p.homogeneous_parts().items():
        comps = harmonic_decompose(part)
        for k, pk in enumerate(comps):
            if pk.is_zero():
                continue
            b = (2 * k + 2) * (d + 2 * m - 2 * k)
            lifted = pk
            for _ in range(k + 1):
                lifted = mult_r2(lifted)
            out = out + lifted.scale(Fraction(1, b))
    return out


# ---------------------------------------------------------------------------
# harmonic polynomial bases
# ---------------------------------------------------------------------------


def harmonic_space_dim(d: int, n: int) -> int:
    """Dimension of the homogeneous harmonics of degree n on R^d."""
    if n < 0:
        return 0
    if n == 0:
        return 1

    def homdim(k):
        return math.comb(k + d - 1, d - 1) if k >= 0 else 0

    return homdim(n) - homdim(n - 2)


def a_harmonic_dim(d: int, m: int) -> int:
    """Dimension of harmonic polynomials of degree at most m (the space of
    operator-harmonic polynomials has the same dimension)."""
    return sum(harmonic_space_dim(d, n) for n in range(m + 1))


@lru_cache(maxsize=None)
def harmonic_basis(d: int, n: int):
    """Exact orthogonal basis of the degree-n homogeneous harmonics
    (rational coefficients, not normalized).

    Built by projecting monomials onto their harmonic part and running
    Gram-Schmidt until the known dimension is reached.  The monomial
    inner product is used for speed; on harmonics of equal degree it is
    proportional to the spherical pairing, so the basis is orthogonal in
    L2 on every centered ball as well.  Cached; treat the returned
    polynomials as immutable.
    """
    target = harmonic_space_dim(d, n)
    basis = []
    for alpha in mi.indices_of_order(d, n):
        h = harmonic_decompose(Polynomial.monomial(d, alpha))[0]
        for b in basis:
            coef = Fraction(poly_inner(h, b), poly_inner(b, b))
            h = h - b.scale(coef)
        if not h.is_zero():
            basis.append(h)
        if len(basis) == target:
            break
    return tuple(basis)


# ---------------------------------------------------------------------------
# L2 norms on balls (closed-form monomial moments)
# ---------------------------------------------------------------------------

_MOMENT_CACHE: dict = {}


def ball_moment_coeff(alpha, d: int) -> Fraction:
    """Exact rational c with  int_{B_r} x^alpha dx = c * pi^(d//2) * r^(|a|+d).

    Zero when any entry of alpha is odd.  Derived from the Gamma-function
    formula for sphere moments; the pi power depends only on d, so ratios
    of same-dimension moments are exact rationals.
    """
    key = (tuple(alpha), d)
    cached = _MOMENT_CACHE.get(key)
    if cached is not None:
        return cached
    if any(a % 2 for a in alpha):
        _MOMENT_CACHE[key] = Fraction(0)
        return Fraction(0)
    ks = [a // 2 for a in alpha]
    K = sum(ks)
    total = sum(alpha)
    c = Fraction(2, total + d)
    for k in ks:
        c *= Fraction(math.factorial(2 * k), 4 ** k * math.factorial(k))
    e = d // 2
    if d % 2 == 0:
        c /= math.factorial(K + e - 1)
    else:
        c *= Fraction(4 ** (K + e) * math.factorial(K + e), math.factorial(2 * (K + e)))
    _MOMENT_CACHE[key] = c
    return c


def ball_inner_exact(p: Polynomial, q: Polynomial, r=1) -> Fraction:
    """int_{B_r} p q dx in units of pi^(d//2), exact.

    Coefficients and r must be rational.  Mainly used by exact
    orthogonality tests and the harmonic basis construction.
    """
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    d = p.dim
    r = Fraction(r)
    total = Fraction(0)
    for a, ca in p.coeffs.items():
        for b, cb in q.coeffs.items():
            g = mi.index_add(a, b)
            m = ball_moment_coeff(g, d)
            if m:
                total += Fraction(ca) * Fraction(cb) * m * r ** (sum(g) + d)
    return total


def l2_sq_inner_ball(p: Polynomial, q: Polynomial, r: float) -> float:
    """int_{B_r} p q dx as a float (moments exact, one final rounding)."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    if r <= 0:
        raise ValueError("radius must be positive")
    d = p.dim
    by_degree: dict = {}
    for a, ca in p.coeffs.items():
        for b, cb in q.coeffs.items():
            g = mi.index_add(a, b)
            m = ball_moment_coeff(g, d)
            if m:
                deg = sum(g)
                by_degree[deg] = by_degree.get(deg, 0) + ca * cb * m
    pi_pow = math.pi ** (d // 2)
    return float(sum(float(c) * r ** (deg + d) * pi_pow for deg, c in by_degree.items()))


def l2_norm_ball(p: Polynomial, r: float) -> float:
    return math.sqrt(max(l2_sq_inner_ball(p, p, r), 0.0))


def l2_norm_ball_grad(p: Polynomial, r: float) -> float:
    """L2(B_r) norm of the gradient vector of p."""
    s = sum(l2_sq_inner_ball(g, g, r) for g in p.gradient())
    return math.sqrt(max(s, 0.0))


def ball_volume(d: int, r: float = 1.0) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r ** d


# ---------------------------------------------------------------------------
# change of variables and ellipsoids
# ---------------------------------------------------------------------------


def change_of_variables(p: Polynomial, L) -> Polynomial:
    """x -> p(Lx), expanded exactly; obeys (p o L) o M = p o (LM).

    L is a d x d matrix given as nested sequences (rational entries keep
    the result rational) or a numpy array.
    """
    d = p.dim
    rows = [list(row) for row in (L.tolist() if isinstance(L, np.ndarray) else L)]
    if len(rows) != d or any(len(row) != d for row in rows):
        raise ValueError("matrix shape must match the polynomial dimension")
    if _is_singular(rows):
        raise ValueError("singular change of variables")
    forms = []
    for i in range(d):
        coeffs = {}
        for j, v in enumerate(rows[i]):
            if v != 0:
                alpha = tuple(1 if k == j else 0 for k in range(d))
                coeffs[alpha] = v
        forms.append(Polynomial(d, coeffs))
    powers = [[Polynomial.one(d)] for _ in range(d)]
    out = Polynomial.zero(d)
    for a, c in p.coeffs.items():
        term = Polynomial.constant(d, c)
        for i, ai in enumerate(a):
            while len(powers[i]) <= ai:
                powers[i].append(powers[i][-1] * forms[i])
            term = term * powers[i][ai]
        out = out + term
    return out


def _is_singular(rows) -> bool:
    n = len(rows)
    exact = all(isinstance(v, (int, Fraction)) for row in rows for v in row)
    if exact:
        m = [[Fraction(v) for v in row] for row in rows]
        det = Fraction(1)
        for col in range(n):
            piv = next((r for r in range(col, n) if m[r][col] != 0), None)
            if piv is None:
                return True
            if piv != col:
                m[col], m[piv] = m[piv], m[col]
                det = -det
            det *= m[col][col]
            for r in range(col + 1, n):
                f = m[r][col] / m[col][col]
                for c2 in range(col, n):
                    m[r][c2] -= f * m[col][c2]
        return det == 0
    arr = np.array([[float(v) for v in row] for row in rows])
    return abs(np.linalg.det(arr)) < 1e-14


def matrix_sqrt(A: np.ndarray) -> np.ndarray:
    """Symmetric positive-definite square root via eigendecomposition."""
    A = np.asarray(A, dtype=float)
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    if np.any(w <= 0):
        raise ValueError("matrix is not positive definite")
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class Ellipsoid:
    """E_r = {x : x . abar^{-1} x <= r^2} for a SPD matrix abar."""

    abar: np.ndarray
    r: float
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = np.asarray(self.abar, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("abar must be a square matrix")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12):
            raise ValueError("abar must be symmetric")
        w = np.linalg.eigvalsh(A)
        if np.any(w <= 0):
            raise ValueError("abar is not SPD")
        if self.r <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "abar", A)
        object.__setattr__(self, "_chol", np.linalg.inv(np.linalg.cholesky(A)))

    @property
    def dim(self) -> int:
        return self.abar.shape[0]

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        y = points @ self._chol.T
        return np.einsum("ij,ij->i", y, y) <= self.r ** 2

    def metric_radius(self, points: np.ndarray) -> np.ndarray:
        """sqrt(x . abar^{-1} x) per point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        y = points @ self._chol.T
        return np.sqrt(np.einsum("ij,ij->i", y, y))

    def bounding_halfwidths(self) -> np.ndarray:
        return self.r * np.sqrt(np.diag(self.abar))

    def volume(self) -> float:
        return ball_volume(self.dim, self.r) * math.sqrt(np.linalg.det(self.abar))

    def scaled(self, factor: float) -> "Ellipsoid":
        return Ellipsoid(self.abar, self.r * factor)


def l2_sq_inner_ellipsoid(p: Polynomial, q: Polynomial, E: Ellipsoid) -> float:
    """int_E p q dx via the substitution x = abar^{1/2} y, which maps B_r
    onto E_r and contributes det(abar)^{1/2} from the Jacobian."""
    S = matrix_sqrt(E.abar)
    pS = change_of_variables(p, S)
    qS = change_of_variables(q, S)
    return math.sqrt(np.linalg.det(E.abar)) * l2_sq_inner_ball(pS, qS, E.r)


def l2_norm_ellipsoid(p: Polynomial, E: Ellipsoid) -> float:
    return math.sqrt(max(l2_sq_inner_ellipsoid(p, p, E), 0.0))
