"""Periodic homogenization correctors, homogenized tensors, and
large-scale doubling / three-ellipsoid measurements."""

__version__ = "0.1.0"

from .polyalg import (  # noqa: F401
    Ellipsoid,
    Polynomial,
    SymTensor,
    change_of_variables,
    harmonic_decompose,
    invert_laplacian,
    l2_norm_ball,
    l2_norm_ellipsoid,
    laplacian,
    mult_r2,
    poly_inner,
    tensor_pair,
)
