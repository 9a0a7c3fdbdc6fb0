"""Canonical positions: the balanced diagonal scaling and John-position checks.

The determinant-maximizing scaling of an unconditional body (among all
linear images with E|G|^2 = 1, the one of largest volume) is diagonal in
the standard basis, and is characterized first-order by vanishing balance
residuals r_i = n E(v g_i x_i)/E(v^2) - 1.  The solver drives those
residuals to zero with a damped multiplicative fixed-point iteration on
the diagonal, renormalizing the second moment each step.

Residuals are only ever known to Monte Carlo accuracy, so "converged"
means statistically indistinguishable from zero: every coordinate within
z_crit(n) standard errors, where z_crit is the 3-sigma rate Bonferroni
adjusted across the n coordinates (z_crit(1) = 3).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

from . import bodies as bd
from . import estimators as est
from .sampler import SeedSpec, gaussian_matrix, split_seed


def z_crit(n: int) -> float:
    """Family-wise 3-sigma threshold for n simultaneous residual tests."""
    return float(ndtri(1.0 - 0.00135 / n))


@dataclass(frozen=True)
class EllSolveOptions:
    step: float = 0.5
    max_iters: int = 200
    samples_schedule: tuple[int, ...] = (2000, 4000, 8000, 16000, 32000)
    seed: SeedSpec = SeedSpec(0, 0)
    workers: int = 1
    diag_bounds: tuple[float, float] = (1e-8, 1e8)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    samples: int
    max_abs_residual: float
    max_z: float
    log_det_diag: float
    second_moment: float


@dataclass(frozen=True)
class EllPositionResult:
    diag: np.ndarray
    residuals: np.ndarray
    std_errors: np.ndarray
    iterations: int
    converged: bool
    ell_value: float
    seed: SeedSpec
    trace: tuple[IterationRecord, ...]

    def to_json_dict(self) -> dict:
        return {
            "diag": self.diag.tolist(),
            "residuals": self.residuals.tolist(),
            "std_errors": self.std_errors.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "ell_value": self.ell_value,
            "seed": {"master": self.seed.master, "stream": self.seed.stream},
        }


def ell_norm_normalize(body: bd.BodySpec, n_samples: int, seed: SeedSpec,
                       workers: int = 1) -> bd.BodySpec:
    """Scale the diagonal by the scalar making E|G|_B^2 = 1 (estimated)."""
    m2 = est.second_moment(body, n_samples, seed, workers)
    return bd.apply_diagonal(body, np.full(body.dim, np.sqrt(m2.value)))


def solve_ell_position(body: bd.BodySpec,
                       opts: EllSolveOptions | None = None) -> EllPositionResult:
    """Damped stochastic fixed point on the diagonal scaling.

    Per iteration: estimate balance residuals on a fresh split stream
    (numerator and denominator share the stream), stop if all residuals
    are within z_crit(n) standard errors of zero and the second moment is
    within 3 SE of one, otherwise update d_i <- d_i (1 + r_i)^(step/2)
    and renormalize the second moment.  The exponent sign makes the map
    contract: inflating d_i deflates coordinate i's balance share, so
    positive residuals call for larger d_i.

    Sample budgets follow `samples_schedule` (last entry repeats).
    Divergence (a diagonal entry leaving `diag_bounds`) reports
    converged=False with the trace; it never raises.
    """
    opts = opts or EllSolveOptions()
    if any(s <= 0 for s in opts.samples_schedule) or \
            any(a > b for a, b in zip(opts.samples_schedule, opts.samples_schedule[1:])):
        raise ValueError("samples_schedule must be positive and nondecreasing")
    if not 0.0 < opts.step <= 2.0:
        raise ValueError(f"step must be in (0, 2], got {opts.step}")

    current = ell_norm_normalize(body, opts.samples_schedule[0],
                                 split_seed(opts.seed, 0), opts.workers)
    zc = z_crit(body.dim)
    lo, hi = opts.diag_bounds
    trace: list[IterationRecord] = []
    rb = None
    converged = False
    iters = 0
    for t in range(opts.max_iters):
        budget = opts.samples_schedule[min(t, len(opts.samples_schedule) - 1)]
        rb = est.balance_residuals(current, budget, split_seed(opts.seed, t + 1),
                                   opts.workers)
        iters = t + 1
        trace.append(IterationRecord(
            iteration=t, samples=budget,
            max_abs_residual=rb.max_abs(), max_z=rb.max_z(),
            log_det_diag=float(np.log(current.diag).sum()),
            second_moment=rb.second_moment.value,
        ))
        if np.any(current.diag < lo) or np.any(current.diag > hi):
            break
        m2 = rb.second_moment
        if rb.max_z() <= zc and abs(m2.value - 1.0) <= 3.0 * m2.std_error:
            converged = True
            break
        factors = np.clip(1.0 + rb.residuals, 0.05, 20.0) ** (opts.step / 2.0)
        current = replace(current, diag=current.diag * factors * np.sqrt(m2.value))

    return EllPositionResult(
        diag=current.diag,
        residuals=rb.residuals,
        std_errors=rb.std_errors,
        iterations=iters,
        converged=converged,
        ell_value=rb.second_moment.value,
        seed=opts.seed,
        trace=tuple(trace),
    )


@dataclass(frozen=True)
class JohnCylinderReport:
    contains_ball: bool
    contact_points_ok: bool
    max_sphere_norm: float
    max_contact_deviation: float


def verify_john_cylinder(body: bd.BodySpec, n_points: int = 1000,
                         seed: SeedSpec | None = None) -> JohnCylinderReport:
    """Check the John-position contact structure of the cylinder body.

    Contact points: every signed basis vector lies on the boundary.
    Ball containment: the gauge is at most 1 + 1e-12 on a random sphere
    sample plus all signed basis vectors.
    """
    if body.family != bd.CYLINDER_JOHN:
        raise ValueError(f"expected a cylinder_john body, got {body.family}")
    seed = seed if seed is not None else SeedSpec(0, 0x6A6F686E)
    n = body.dim
    tol = 1e-12

    contact = np.empty(n)
    chunk = max(1, (1 << 20) // n)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        eye = np.zeros((stop - start, n))
        eye[np.arange(stop - start), np.arange(start, stop)] = 1.0
        contact[start:stop] = bd.norm_batch(body, eye)
    max_contact_dev = float(np.abs(contact - 1.0).max())

    g = gaussian_matrix(seed, n_points, n)
    u = g / np.linalg.norm(g, axis=1, keepdims=True)
    sphere_norms = bd.norm_batch(body, u)
    max_norm = float(max(sphere_norms.max(), contact.max()))
    return JohnCylinderReport(
        contains_ball=max_norm <= 1.0 + tol,
        contact_points_ok=max_contact_dev <= tol,
        max_sphere_norm=max_norm,
        max_contact_deviation=max_contact_dev,
    )
