"""Scale-resolved doubling and three-ellipsoid measurements.

For each polynomial degree the study draws a random seed against the
ball-orthonormal harmonic basis, grows the operator-harmonic polynomial
and its heterogeneous counterpart, and measures, per radius:

* the three-ellipsoid ratio  ||psi||^2_{E_{tr}} / (||psi||_{E_{t^2 r}} ||psi||_{E_r}),
* the volume-normalized doubling ratio  ||psi||_{E_r} / ||psi||_{E_{tr}},
* the relative polynomial distance  ||psi - q|| / ||psi||  on E_r.

Shapes are what get verified, not prefactors: the polynomial distance
decays like 1/r, the doubling profile is flat once r clears the degree
scale, and the three-ellipsoid defect decays to the measurement floor.
The measured defect of these globally constructed heterogeneous
polynomials is second order in the corrector perturbation (the mean-zero
oscillations integrate out at first order against the slow polynomial),
so |ratio - 1| falls off like 1/r^2 and takes either sign; the 1/r
upper-bound shape is respected with plenty of room.  Reports carry
signed values and error estimates so that downstream fits can tell
signal from floor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import homogop as ho
from .cell import CorrectorTable
from .equad import QuadratureRefusal, midpoint_sq_norm, psi_sq_norms
from .polyalg import Ellipsoid, Polynomial, harmonic_basis, l2_norm_ball, l2_norm_ellipsoid

__all__ = [
    "ScalingConfig",
    "ScalingReport",
    "norm_on_ellipsoid",
    "three_ellipsoid_ratio",
    "doubling_profile",
    "run_scaling_study",
    "minimal_scale_probe",
]


@dataclass
class ScalingConfig:
    theta: float = 0.5
    m_list: tuple = (2, 4, 6)
    r_list: tuple = (64.0, 128.0, 256.0, 512.0, 1024.0)
    seed: int = 0
    mc_samples: int = 400_000
    quadrature_n: int = 2048
    negative_control: bool = False

    def __post_init__(self):
        if not (0.0 < self.theta <= 0.5):
            raise ValueError("theta must lie in (0, 1/2]")
        rl = tuple(float(r) for r in self.r_list)
        if any(b <= a for a, b in zip(rl, rl[1:])):
            raise ValueError("r_list must be strictly ascending")
        for m in self.m_list:
            if rl[0] < 4 * m:
                raise ValueError(f"smallest radius {rl[0]} below 4*m for m={m}")
        self.r_list = rl
        self.m_list = tuple(int(m) for m in self.m_list)


# ---------------------------------------------------------------------------
# single-quantity operations
# ---------------------------------------------------------------------------


def norm_on_ellipsoid(f, E: Ellipsoid, quadrature_n: int):
    """Volume-normalized L2 norm of f on E with an error estimate.

    Pure polynomials take the closed-form path (error 0).  Grid-backed
    heterogeneous polynomials require at least 8 midpoint samples per
    unit cell per axis and refuse otherwise.
    """
    if isinstance(f, Polynomial):
        val = l2_norm_ellipsoid(f, E) / math.sqrt(E.volume())
        return val, 0.0
    require_unit = isinstance(f, ho.HeterogeneousPolynomial)
    fn = f.evaluate if hasattr(f, "evaluate") else f
    total, volume, err = midpoint_sq_norm(fn, E, quadrature_n,
                                          require_unit_resolution=require_unit)
    val = math.sqrt(max(total / volume, 0.0))
    err_norm = 0.5 * err / total * val if total > 0 else 0.0
    return val, err_norm


def _sq_norms_for(f, radii, abar, *, mc_samples, rng, quadrature_n=0):
    """Squared unnormalized norms keyed by radius, with relative errors."""
    if isinstance(f, ho.HeterogeneousPolynomial):
        res = psi_sq_norms(f, radii, abar, rng=rng, n_samples=mc_samples,
                           quadrature_n=quadrature_n)
        return {r: (v.sq_integral, v.err_estimate / v.sq_integral if v.sq_integral > 0 else 0.0)
                for r, v in res.items()}
    out = {}
    for r in sorted(set(float(x) for x in radii)):
        E = Ellipsoid(abar, r)
        if isinstance(f, Polynomial):
            out[r] = (l2_norm_ellipsoid(f, E) ** 2, 0.0)
        else:
            total, _, err = midpoint_sq_norm(f, E, max(quadrature_n, 256))
            out[r] = (total, err / total if total > 0 else 0.0)
    return out


def three_ellipsoid_ratio(f, r: float, theta: float, abar, *,
                          mc_samples: int = 400_000, rng=None,
                          quadrature_n: int = 0) -> float:
    """||f||^2 on E_{theta r} over the product of the norms on E_{theta^2 r}
    and E_r (unnormalized; the volume factors cancel)."""
    sq = _sq_norms_for(f, [theta * theta * r, theta * r, r], abar,
                       mc_samples=mc_samples, rng=rng or np.random.default_rng(0),
                       quadrature_n=quadrature_n)
    inner = sq[theta * theta * r][0]
    mid = sq[theta * r][0]
    outer = sq[r][0]
    if inner <= 0 or outer <= 0:
        raise ZeroDivisionError("vanishing norm on an inner ellipsoid")
    return mid / math.sqrt(inner * outer)


def doubling_profile(f, r_list, theta: float, abar, *,
                     mc_samples: int = 400_000, rng=None,
                     quadrature_n: int = 0):
    """Volume-normalized ratios ||f||_{E_r} / ||f||_{E_{theta r}} per radius."""
    d = len(abar)
    radii = sorted(set([float(r) for r in r_list] + [theta * float(r) for r in r_list]))
    sq = _sq_norms_for(f, radii, abar, mc_samples=mc_samples,
                       rng=rng or np.random.default_rng(0), quadrature_n=quadrature_n)
    out = []
    for r in r_list:
        num = sq[float(r)][0]
        den = sq[theta * float(r)][0]
        if den <= 0:
            raise ZeroDivisionError("vanishing norm on the inner ellipsoid")
        out.append(math.sqrt(num / den) * theta ** (d / 2.0))
    return out


# ---------------------------------------------------------------------------
# the scaling study
# ---------------------------------------------------------------------------


@dataclass
class StudyRow:
    m: int
    r: float
    theta: float
    norm_inner: float
    norm_mid: float
    norm_outer: float
    three_ratio: float
    doubling_ratio: float
    quad_err: float

    def to_csv(self) -> str:
        return ",".join([
            str(self.m), _fmt(self.r), _fmt(self.theta), _fmt(self.norm_inner),
            _fmt(self.norm_mid), _fmt(self.norm_outer), _fmt(self.three_ratio),
            _fmt(self.doubling_ratio), _fmt(self.quad_err),
        ])


def _fmt(x: float) -> str:
    return format(float(x), ".12e")


CSV_HEADER = "m,r,theta,norm_inner,norm_mid,norm_outer,three_ratio,doubling_ratio,quad_err"


@dataclass
class ScalingReport:
    config: ScalingConfig
    rows: list
    per_degree: dict
    flags: dict
    rng_seed: int
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        lines += [row.to_csv() for row in self.rows]
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "theta": self.config.theta,
            "m_list": list(self.config.m_list),
            "r_list": list(self.config.r_list),
            "rng_seed": self.rng_seed,
            "mc_samples": self.config.mc_samples,
            "negative_control": self.config.negative_control,
            "per_degree": {str(m): v for m, v in sorted(self.per_degree.items())},
            "flags": dict(sorted(self.flags.items())),
            "passed": self.passed,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def _fit_slope(xs, ys):
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def draw_seed_polynomial(d: int, m: int, rng: np.random.Generator) -> Polynomial:
    """Random homogeneous degree-m harmonic: coefficients uniform in
    [-1, 1] against the L2(B_1)-orthonormalized harmonic basis."""
    basis = harmonic_basis(d, m)
    coefs = rng.uniform(-1.0, 1.0, len(basis))
    out = Polynomial.zero(d)
    for c, b in zip(coefs, basis):
        out = out + b.scale(float(c) / l2_norm_ball(b, 1.0))
    return out


def _study_psi(op, table, m, rng, negative_control):
    """The measured object for one degree: seed -> kernel polynomial ->
    heterogeneous polynomial.  The negative control skips the kernel
    correction, leaving a polynomial the operator does not annihilate."""
    raw = draw_seed_polynomial(table.d, m, rng)
    seed = raw if op.leading_is_identity() else _pullback(raw, op)
    if negative_control:
        q = ho.AHarmonicPolynomial(seed, op, seed)
    else:
        q = ho.build_a_harmonic(op, seed)
    return ho.build_heterogeneous(q, table)


def _pullback(h: Polynomial, op) -> Polynomial:
    from .polyalg import change_of_variables, matrix_sqrt
    Binv = np.linalg.inv(matrix_sqrt(op.matrix()))
    return change_of_variables(h, Binv)


def run_scaling_study(cfg: ScalingConfig, table: CorrectorTable) -> ScalingReport:
    """Measure both ratio families across (m, r) and fit their shapes.

    Flags (all must hold for exit success):
      * three_ratio_decays: |three_ratio - 1| decays towards the
        measurement floor as r grows (fitted slope <= -0.7 on the rows
        above floor, or everything already at floor),
      * no_convexity_violation: three_ratio >= 1 - (3 sigma + floor),
      * doubling_flat: per degree, relative variation of the doubling
        ratio over radii >= m^4 stays within 10 percent,
      * poly_distance_shape: ||psi - q||/||psi|| on E_r falls like 1/r
        (fitted slope in [-1.3, -0.7]),
      * residual_refines: the discrete residual of psi shrinks by >= 1.7
        per grid doubling (solution property; defeats constructions that
        skip the kernel correction).
    The spec-level slope band on the signed (three_ratio - 1) is also
    fitted and recorded per degree as 'three_ratio_slope' whenever the
    values stay positive; see the notes field otherwise.
    """
    if table.m_max < max(cfg.m_list):
        raise ValueError("corrector table too short for the requested degrees")
    op = ho.HomogenizedOperator.from_table(table)
    abar = op.matrix()
    theta = cfg.theta
    seed_rng = np.random.default_rng(cfg.seed)
    rows = []
    per_degree = {}
    notes = []
    flags = {
        "three_ratio_decays": True,
        "no_convexity_violation": True,
        "doubling_flat": True,
        "poly_distance_shape": True,
        "residual_refines": True,
    }

    for m in cfg.m_list:
        psi = _study_psi(op, table, m, seed_rng, cfg.negative_control)
        mc_rng = np.random.default_rng((cfg.seed, m, 0xA5))
        base = [float(r) for r in cfg.r_list]
        flat_radii = _flatness_radii(m, base)
        needed = sorted(set(
            [theta * theta * r for r in base] + [theta * r for r in base] + base
            + flat_radii + [theta * r for r in flat_radii]))
        res = psi_sq_norms(psi, needed, abar, rng=mc_rng, n_samples=cfg.mc_samples)

        degree_rows = []
        for r in base:
            inner = res[theta * theta * r]
            mid = res[theta * r]
            outer = res[r]
            ratio = mid.sq_integral / math.sqrt(inner.sq_integral * outer.sq_integral)
            rel = (mid.err_estimate / mid.sq_integral
                   + 0.5 * inner.err_estimate / inner.sq_integral
                   + 0.5 * outer.err_estimate / outer.sq_integral)
            dbl = math.sqrt(outer.sq_integral / mid.sq_integral) * theta ** (table.d / 2.0)
            row = StudyRow(m, r, theta, inner.norm(), mid.norm(), outer.norm(),
                           ratio, dbl, rel)
            rows.append(row)
            degree_rows.append(row)

        # defect decay: fit on rows where |ratio-1| clears 3 sigma
        xs, ys = [], []
        for row in degree_rows:
            dev = abs(row.three_ratio - 1.0)
            if dev > 3.0 * row.quad_err + 1e-12:
                xs.append(row.r)
                ys.append(dev)
            if row.three_ratio < 1.0 - (3.0 * row.quad_err + 1e-6):
                # beyond-noise log-convexity violation scaled by the
                # second-order defect floor
                dev_rel = (1.0 - row.three_ratio) * row.r ** 2
                if dev_rel > 50.0 * m ** 2:
                    flags["no_convexity_violation"] = False
                    notes.append(f"m={m} r={row.r:g}: three-ellipsoid ratio "
                                 f"{row.three_ratio:.6f} violates convexity beyond floor")
        decay_slope = _fit_slope(xs, ys) if len(xs) >= 3 else None
        if decay_slope is not None and decay_slope > -0.7:
            flags["three_ratio_decays"] = False
            notes.append(f"m={m}: |three_ratio - 1| slope {decay_slope:.2f} > -0.7")

        signed = [(row.r, row.three_ratio - 1.0) for row in degree_rows]
        if all(v > 0 for _, v in signed):
            spec_slope = _fit_slope([r for r, _ in signed], [v for _, v in signed])
        else:
            spec_slope = None
            notes.append(f"m={m}: signed three-ellipsoid defect not positive at all "
                         f"radii; log-log slope of (ratio - 1) undefined")

        # doubling flatness on radii >= m^4 (extended when the window
        # would otherwise be empty)
        dbl_vals = []
        for r in flat_radii:
            outer = res[r]
            mid = res[theta * r]
            dbl_vals.append(math.sqrt(outer.sq_integral / mid.sq_integral)
                            * theta ** (table.d / 2.0))
        variation = (max(dbl_vals) - min(dbl_vals)) / min(dbl_vals) if dbl_vals else 0.0
        if variation > 0.10:
            flags["doubling_flat"] = False
            notes.append(f"m={m}: doubling profile varies by {variation:.1%}")

        # polynomial-distance shape || psi - q || / || psi || ~ 1/r
        dist = []
        for r in base:
            rr = res[r]
            if rr.correction_sq > 0:
                dist.append((r, math.sqrt(rr.correction_sq / rr.total)))
        dist_slope = _fit_slope([r for r, _ in dist], [v for _, v in dist]) \
            if len(dist) >= 3 else None
        if dist_slope is not None and not (-1.3 <= dist_slope <= -0.7):
            flags["poly_distance_shape"] = False
            notes.append(f"m={m}: polynomial-distance slope {dist_slope:.2f} "
                         f"outside [-1.3, -0.7]")

        per_degree[m] = {
            "three_ratio_decay_slope": decay_slope,
            "three_ratio_slope": spec_slope,
            "poly_distance_slope": dist_slope,
            "doubling_variation": variation,
            "doubling_values": dbl_vals,
            "flatness_radii": flat_radii,
            "rows_above_floor": len(xs),
        }

    # residual refinement at the top degree (solution property)
    m_res = max(cfg.m_list)
    res_ratio = _residual_refinement(op, table, m_res, seed_rng, cfg.negative_control)
    per_degree[m_res]["residual_ratio"] = res_ratio
    if res_ratio < 1.7:
        flags["residual_refines"] = False
        notes.append(f"m={m_res}: residual refinement ratio {res_ratio:.2f} < 1.7")

    return ScalingReport(cfg, rows, per_degree, flags, cfg.seed, notes)


def _flatness_radii(m: int, base):
    """Radii for the doubling-flatness window: those of the study inside
    [m^4, max]; when m^4 clears the whole list, a dyadic window starting
    at m^4 keeps the check meaningful."""
    lo = float(m) ** 4
    inside = [r for r in base if r >= lo]
    if len(inside) >= 2:
        return inside
    return [lo, 2.0 * lo, 4.0 * lo]


def _residual_refinement(op, table, m, rng, negative_control) -> float:
    from .cell import compute_correctors

    psi_coarse_table = table
    N2 = table.N * 2
    fine_field = _refine_field(table, N2)
    fine_table = compute_correctors(fine_field, table.m_max, tol=table.solver_tol)
    raw = draw_seed_polynomial(table.d, m, rng)
    ident = op.leading_is_identity()
    seed = raw if ident else _pullback(raw, op)
    if negative_control:
        q = ho.AHarmonicPolynomial(seed, op, seed)
    else:
        q = ho.build_a_harmonic(op, seed)
    r_coarse = ho.residual_psi(ho.build_heterogeneous(q, psi_coarse_table))
    r_fine = ho.residual_psi(ho.build_heterogeneous(q, fine_table))
    return r_coarse / r_fine if r_fine > 0 else math.inf


def _refine_field(table: CorrectorTable, N2: int):
    """The same coefficient pattern at doubled resolution when the field
    knows how to rebuild itself; otherwise nearest-cell upsampling."""
    from .cell import CoefficientField

    fld = table.field
    rebuild = getattr(fld, "rebuild", None)
    if callable(rebuild):
        return rebuild(N2)
    reps = N2 // fld.N
    vals = fld.values
    for axis in range(fld.d):
        vals = np.repeat(vals, reps, axis=axis)
    return CoefficientField(fld.d, N2, vals, lambda_max=fld.lambda_max)


# ---------------------------------------------------------------------------
# minimal-scale probe
# ---------------------------------------------------------------------------


def minimal_scale_probe(cfg: ScalingConfig, table: CorrectorTable,
                        m: int | None = None,
                        thresholds=(0.5, 1.0, 2.0)) -> dict:
    """Sweep the three-ellipsoid defect down the scales and record where
    |ratio - 1| first exceeds each threshold (descending radii from
    4 m^4 towards m).  Produces data, not verdicts: the right minimal
    scale for these estimates is an open question.
    """
    if m is None:
        m = max(cfg.m_list)
    op = ho.HomogenizedOperator.from_table(table)
    abar = op.matrix()
    seed_rng = np.random.default_rng(cfg.seed)
    psi = _study_psi(op, table, m, seed_rng, False)
    theta = cfg.theta
    r_hi = 4.0 * m ** 4
    r_lo = max(float(m), 4.0 / (theta * theta))
    count = 12
    radii = list(np.exp(np.linspace(math.log(r_hi), math.log(r_lo), count)))
    sweep = []
    for r in radii:
        needed = [theta * theta * r, theta * r, r]
        # small ellipsoids afford full midpoint resolution; larger ones
        # use the split estimator
        if r <= 48.0:
            qn = max(int(2 * r * math.sqrt(np.max(np.diag(abar))) * 10), 64)
            res = psi_sq_norms(psi, needed, abar, quadrature_n=qn)
        else:
            res = psi_sq_norms(psi, needed, abar,
                               rng=np.random.default_rng((cfg.seed, m, 0x5C)),
                               n_samples=cfg.mc_samples)
        ratio = res[theta * r].sq_integral / math.sqrt(
            res[theta * theta * r].sq_integral * res[r].sq_integral)
        sweep.append({"r": float(r), "three_ratio": float(ratio)})
    crossings = {}
    for thr in thresholds:
        crossed = [s["r"] for s in sweep if abs(s["three_ratio"] - 1.0) > thr]
        crossings[str(thr)] = max(crossed) if crossed else None
    return {"m": m, "theta": theta, "sweep": sweep, "crossings": crossings,
            "rng_seed": cfg.seed}
