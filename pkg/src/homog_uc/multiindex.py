"""Multi-index bookkeeping shared by the polynomial and tensor code.

A multi-index is a plain tuple of d non-negative integers.  Polynomial
coefficient maps and symmetric tensor components key on these tuples, so
the canonical ordering matters: graded lexicographic (total order first,
then lexicographic with the leading axis dominant).  All iteration
helpers return indices in that order, which keeps reductions and
serialized output reproducible.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache


def index_order(alpha) -> int:
    """Total order |alpha| = sum of the entries."""
    return sum(alpha)


def index_factorial(alpha) -> int:
    """alpha! = prod_i alpha_i!."""
    out = 1
    for a in alpha:
        out *= math.factorial(a)
    return out


def multinomial(alpha) -> int:
    """binom(|alpha|, alpha) = |alpha|! / alpha!."""
    return math.factorial(sum(alpha)) // index_factorial(alpha)


@lru_cache(maxsize=None)
def indices_of_order(d: int, m: int):
    """All multi-indices of dimension d with order exactly m, graded-lex."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if m < 0:
        return ()
    if d == 1:
        return ((m,),)
    out = []
    for first in range(m, -1, -1):
        for rest in indices_of_order(d - 1, m - first):
            out.append((first,) + rest)
    return tuple(out)


def indices_up_to(d: int, m: int):
    """Indices of all orders 0..m, grouped by order, canonical within each."""
    for n in range(m + 1):
        yield from indices_of_order(d, n)


def increment(alpha, i: int):
    return alpha[:i] + (alpha[i] + 1,) + alpha[i + 1:]


def decrement(alpha, i: int):
    return alpha[:i] + (alpha[i] - 1,) + alpha[i + 1:]


def dominates(alpha, beta) -> bool:
    """True when alpha_i >= beta_i for every axis."""
    return all(a >= b for a, b in zip(alpha, beta))


def index_sub(alpha, beta):
    return tuple(a - b for a, b in zip(alpha, beta))


def index_add(alpha, beta):
    return tuple(a + b for a, b in zip(alpha, beta))


@lru_cache(maxsize=None)
def split_weights(d: int, na: int, nb: int):
    """Interleaving weights of the symmetrized tensor product.

    For gamma of order na+nb the symmetrization of T (order na) with
    U (order nb) has components

        Sym(T ox U)_gamma = sum_{alpha+beta=gamma} w(alpha, beta) T_alpha U_beta

    with w = binom(na, alpha) binom(nb, beta) / binom(na+nb, gamma).
    Returns {gamma: ((alpha, beta, w), ...)} with w exact Fractions.
    """
    table = {}
    for gamma in indices_of_order(d, na + nb):
        triples = []
        denom = multinomial(gamma)
        for alpha in indices_of_order(d, na):
            if not dominates(gamma, alpha):
                continue
            beta = index_sub(gamma, alpha)
            w = Fraction(multinomial(alpha) * multinomial(beta), denom)
            triples.append((alpha, beta, w))
        table[gamma] = tuple(triples)
    return table
