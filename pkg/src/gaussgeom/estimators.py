"""Monte Carlo measurement of Gaussian functionals of body norms.

Every estimator here consumes a SeedSpec and is a pure function of its
arguments: samples are drawn in 64 seed-split batches (fewer for tiny
budgets), each batch is reduced to sums, and batch results are combined
in a fixed order.  The same numbers come out for any worker count.

Ratio-type estimators feed numerator and denominator from one stream
(common random numbers); standard errors come from the spread of batch
means.  Two-pass estimators (deviation curves, flat/spiky thresholds)
use distinct split streams for the two passes.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import bodies as bd
from .sampler import SeedSpec, philox_generator, normal_fill, split_seed

CHUNK_ELEMS = 1 << 22
MAX_BATCHES = 64
MAX_P = 8.0  # larger p is statistically useless at desk-scale budgets

# pass indices for hierarchical seed splitting
_MAIN, _THRESHOLD, _MEDIAN, _COUNT = 0, 1, 2, 3

_WILSON_Z = float(ndtri(0.975))


@dataclass(frozen=True)
class McEstimate:
    """Point value with standard error and sample/seed provenance."""

    value: float
    std_error: float
    n_samples: int
    seed: SeedSpec


@dataclass(frozen=True)
class NormMoments:
    mean_p: McEstimate
    var_p: McEstimate
    median: float
    mean_1: McEstimate
    mean_2: McEstimate


@dataclass(frozen=True)
class SuperconcentrationReport:
    p: float
    variance: McEstimate
    gradient_energy: McEstimate
    ratio: float
    talagrand_rhs: float
    flat_energy: float
    spiky_energy: float


@dataclass(frozen=True)
class FlatSpikyStats:
    flat_energy: float
    spiky_energy: float
    spiky_prob_per_coord: float
    threshold: float
    norm_mean: float


@dataclass(frozen=True)
class BalanceResiduals:
    """Per-coordinate balance residuals r_i = n E(v g_i x_i)/E(v^2) - 1.

    `second_moment` is the shared denominator E|G|_B^2 from the same
    sample stream; the position solver uses it for renormalization.
    """

    residuals: np.ndarray
    std_errors: np.ndarray
    second_moment: McEstimate
    n_samples: int
    seed: SeedSpec

    def max_abs(self) -> float:
        return float(np.abs(self.residuals).max())

    def max_z(self) -> float:
        se = np.where(self.std_errors > 0, self.std_errors, np.inf)
        return float((np.abs(self.residuals) / se).max())


@dataclass(frozen=True)
class GradientRatioReport:
    lhs: McEstimate
    rhs: McEstimate
    holds: bool


@dataclass(frozen=True)
class DeviationCurve:
    n: int
    eps_grid: np.ndarray
    median: float
    probs: np.ndarray
    wilson_low: np.ndarray
    wilson_high: np.ndarray
    counts: np.ndarray
    n_samples: int
    seed: SeedSpec


@dataclass(frozen=True)
class L1GradientReport:
    lhs: McEstimate
    rhs: McEstimate
    margin: float
    holds: bool


def wilson_interval(k: int, n: int, z: float = _WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion; valid at k = 0 or n."""
    if n <= 0:
        raise ValueError("n must be positive")
    phat = k / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _validate(body: bd.BodySpec, p: float, n_samples: int, min_samples: int = 100):
    if not 1.0 <= p <= MAX_P:
        raise ValueError(f"p must be in [1, {MAX_P}], got {p}")
    if n_samples < min_samples:
        raise ValueError(f"n_samples must be >= {min_samples}, got {n_samples}")


def _batch_layout(n_samples: int) -> list[int]:
    n_batches = min(MAX_BATCHES, max(2, n_samples // 4))
    base, rem = divmod(n_samples, n_batches)
    return [base + 1] * rem + [base] * (n_batches - rem)


def _map_ordered(fn, tasks, workers: int):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


@dataclass(frozen=True)
class _KernelSpec:
    """What one pass over the Gaussian stream should accumulate."""

    p: float
    want: frozenset
    threshold: float = 0.0
    median: float = 0.0
    eps_grid: tuple = ()


def _power_weights(v: np.ndarray, p: float):
    """(v^p, p v^(p-1), p^2 v^(2p-2)) with fast paths for p = 1."""
    if p == 1.0:
        ones = np.ones_like(v)
        return v, ones, ones
    w1 = p * v ** (p - 1.0)
    return v ** p, w1, w1 * w1


def _run_batch(body: bd.BodySpec, spec: _KernelSpec, seed: SeedSpec, size: int) -> dict:
    """One batch: draw `size` Gaussians, reduce to the requested sums."""
    n = body.dim
    want = spec.want
    gen = philox_generator(seed)
    rows = max(1, CHUNK_ELEMS // n)
    buf = np.empty((rows, n))
    needs_grad = bool(want & {"energy", "coord", "flatspiky", "balance",
                              "gradnorm", "l1grad"})
    sparse = needs_grad and bd.gradient_support(body) is not None

    acc: dict = {"size": size}
    for key in ("v", "v2", "vp", "v2p", "energy", "gn", "gn2", "l1p", "l12p"):
        acc[key] = 0.0
    if "coord" in want:
        acc["s1"] = np.zeros(n)
        acc["s2"] = np.zeros(n)
    if "flatspiky" in want:
        acc.setdefault("s2", np.zeros(n))
        acc["sp2"] = np.zeros(n)
        acc["spike_counts"] = np.zeros(n)
    if "balance" in want:
        acc["bal"] = np.zeros(n)
    if "devcount" in want:
        acc["dev_counts"] = np.zeros(len(spec.eps_grid))
        eps = np.asarray(spec.eps_grid)
    if "values" in want:
        acc["values"] = np.empty(size)

    p = spec.p
    done = 0
    while done < size:
        r = min(rows, size - done)
        x = normal_fill(gen, buf[:r])
        idx = gv = grad = None
        if needs_grad:
            if sparse:
                v, idx, gv = bd.gradient_indexed_batch(body, x)
            else:
                v, grad = bd.gradient_batch(body, x)
        else:
            v = bd.norm_batch(body, x)

        acc["v"] += float(v.sum())
        acc["v2"] += float((v * v).sum())
        vp, w1, w2 = _power_weights(v, p)
        if "power" in want or "values" in want:
            acc["vp"] += float(vp.sum())
            acc["v2p"] += float((vp * vp).sum())
        if "values" in want:
            acc["values"][done:done + r] = v
        if "devcount" in want:
            dv = np.abs(v - spec.median)
            acc["dev_counts"] += (dv[None, :] >= (eps[:, None] * spec.median)).sum(axis=1)

        if needs_grad and sparse:
            valid = idx >= 0
            fidx = idx[valid]
            gval = gv[valid]
            if "energy" in want:
                acc["energy"] += float((w2 * (gv * gv).sum(axis=1)).sum())
            if "gradnorm" in want:
                gn = np.sqrt((gv * gv).sum(axis=1))
                acc["gn"] += float(gn.sum())
                acc["gn2"] += float((gn * gn).sum())
            if "l1grad" in want:
                l1 = np.abs(gv).sum(axis=1)
                l1p = l1 if p == 1.0 else l1 ** p
                acc["l1p"] += float(l1p.sum())
                acc["l12p"] += float((l1p * l1p).sum())
            w1r = np.broadcast_to(w1[:, None], gv.shape)[valid]
            w2r = np.broadcast_to(w2[:, None], gv.shape)[valid]
            if "coord" in want:
                acc["s1"] += np.bincount(fidx, weights=w1r * np.abs(gval), minlength=n)
            if "coord" in want or "flatspiky" in want:
                acc["s2"] += np.bincount(fidx, weights=w2r * gval * gval, minlength=n)
            if "flatspiky" in want:
                spiky = np.abs(gval) > spec.threshold
                if np.any(spiky):
                    si = fidx[spiky]
                    acc["sp2"] += np.bincount(si, weights=(w2r * gval * gval)[spiky],
                                              minlength=n)
                    acc["spike_counts"] += np.bincount(si, minlength=n)
            if "balance" in want:
                xg = np.take_along_axis(x, np.maximum(idx, 0), axis=1)
                vals = (v[:, None] * gv * xg)[valid]
                acc["bal"] += np.bincount(fidx, weights=vals, minlength=n)
        elif needs_grad:
            if "energy" in want:
                acc["energy"] += float((w2 * np.einsum("ij,ij->i", grad, grad)).sum())
            if "gradnorm" in want:
                gn = np.linalg.norm(grad, axis=1)
                acc["gn"] += float(gn.sum())
                acc["gn2"] += float((gn * gn).sum())
            if "l1grad" in want:
                l1 = np.abs(grad).sum(axis=1)
                l1p = l1 if p == 1.0 else l1 ** p
                acc["l1p"] += float(l1p.sum())
                acc["l12p"] += float((l1p * l1p).sum())
            if "coord" in want or "flatspiky" in want:
                ag = np.abs(grad)
                if "coord" in want:
                    acc["s1"] += ag.T @ w1
                g2 = ag * ag
                acc["s2"] += g2.T @ w2
                if "flatspiky" in want:
                    mask = ag > spec.threshold
                    if np.any(mask):
                        acc["sp2"] += (g2 * mask).T @ w2
                        acc["spike_counts"] += mask.sum(axis=0)
            if "balance" in want:
                acc["bal"] += (grad * x).T @ v
        done += r
    return acc


def _run_pass(body: bd.BodySpec, spec: _KernelSpec, seed: SeedSpec,
              n_samples: int, workers: int) -> list[dict]:
    sizes = _batch_layout(n_samples)
    tasks = [(split_seed(seed, b), sizes[b]) for b in range(len(sizes))]
    return _map_ordered(lambda t: _run_batch(body, spec, t[0], t[1]), tasks, workers)


def _mean_stat(batches: list[dict], key: str, n_samples: int, seed: SeedSpec) -> McEstimate:
    sums = np.array([b[key] for b in batches])
    sizes = np.array([b["size"] for b in batches], dtype=float)
    value = float(sums.sum() / sizes.sum())
    means = sums / sizes
    se = float(means.std(ddof=1) / math.sqrt(len(batches)))
    return McEstimate(value, se, n_samples, seed)


def _var_stat(batches: list[dict], key1: str, key2: str, n_samples: int,
              seed: SeedSpec) -> McEstimate:
    """Variance statistic as the mean of per-batch unbiased variances."""
    pv = []
    for b in batches:
        m = b["size"]
        pv.append((b[key2] - b[key1] ** 2 / m) / (m - 1))
    pv = np.array(pv)
    return McEstimate(float(pv.mean()),
                      float(pv.std(ddof=1) / math.sqrt(len(pv))),
                      n_samples, seed)


def _coord_total(batches: list[dict], key: str) -> np.ndarray:
    return np.sum([b[key] for b in batches], axis=0)


def _talagrand_from_sums(s1: np.ndarray, s2: np.ndarray, n_samples: int) -> float:
    """Sum_i E2_i / (1 + log(sqrt(E2_i)/E1_i)); zero-moment coordinates drop out."""
    e1 = s1 / n_samples
    e2 = s2 / n_samples
    total = 0.0
    pos = e2 > 0.0
    ratio = np.sqrt(e2[pos]) / e1[pos]
    total = float((e2[pos] / (1.0 + np.log(np.maximum(ratio, 1.0)))).sum())
    return total


def norm_moments(body: bd.BodySpec, p: float, n_samples: int, seed: SeedSpec,
                 workers: int = 1) -> NormMoments:
    """Moments of the norm of a standard Gaussian vector.

    Streams batch sums for E|G|, E|G|^2, E|G|^p and Var(|G|^p); the median
    is the sample median (midpoint convention for even counts).
    """
    _validate(body, p, n_samples)
    spec = _KernelSpec(p=p, want=frozenset({"power", "values"}))
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    values = np.concatenate([b["values"] for b in batches])
    return NormMoments(
        mean_p=_mean_stat(batches, "vp", n_samples, seed),
        var_p=_var_stat(batches, "vp", "v2p", n_samples, seed),
        median=float(np.median(values)),
        mean_1=_mean_stat(batches, "v", n_samples, seed),
        mean_2=_mean_stat(batches, "v2", n_samples, seed),
    )


def gradient_energy(body: bd.BodySpec, p: float, n_samples: int, seed: SeedSpec,
                    workers: int = 1) -> McEstimate:
    """E of p^2 |G|_B^(2p-2) |grad(G)|_2^2, the Dirichlet energy of the
    p-th power of the norm."""
    _validate(body, p, n_samples)
    spec = _KernelSpec(p=p, want=frozenset({"energy"}))
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    return _mean_stat(batches, "energy", n_samples, seed)


def mean_norm(body: bd.BodySpec, n_samples: int, seed: SeedSpec,
              workers: int = 1) -> McEstimate:
    """E |G|_B."""
    _validate(body, 1.0, n_samples)
    spec = _KernelSpec(p=1.0, want=frozenset())
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    return _mean_stat(batches, "v", n_samples, seed)


def second_moment(body: bd.BodySpec, n_samples: int, seed: SeedSpec,
                  workers: int = 1) -> McEstimate:
    """E |G|_B^2, the square of the ell functional at the identity."""
    _validate(body, 1.0, n_samples)
    spec = _KernelSpec(p=1.0, want=frozenset())
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    return _mean_stat(batches, "v2", n_samples, seed)


def superconcentration_ratio(body: bd.BodySpec, p: float, n_samples: int,
                             seed: SeedSpec, workers: int = 1,
                             threshold_exponent: float = 1.0 / 8.0,
                             threshold_samples: int | None = None
                             ) -> SuperconcentrationReport:
    """Var(|G|^p) over Dirichlet energy, with the flat/spiky split and the
    L1-L2 variance bound computed from the same sample stream.

    The flat/spiky threshold n^(-threshold_exponent) E|G|_B uses an
    independent split stream for the norm mean (two-pass contract).
    """
    _validate(body, p, n_samples)
    thr_n = threshold_samples if threshold_samples is not None else max(1000, n_samples // 8)
    m1 = mean_norm(body, thr_n, split_seed(seed, _THRESHOLD), workers)
    threshold = body.dim ** (-threshold_exponent) * m1.value

    spec = _KernelSpec(p=p, want=frozenset({"power", "energy", "coord", "flatspiky"}),
                       threshold=threshold)
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)

    variance = _var_stat(batches, "vp", "v2p", n_samples, seed)
    energy = _mean_stat(batches, "energy", n_samples, seed)
    if energy.value <= 3.0 * energy.std_error:
        raise ValueError("gradient energy indistinguishable from zero; degenerate body")

    s1 = _coord_total(batches, "s1")
    s2 = _coord_total(batches, "s2")
    sp2 = _coord_total(batches, "sp2")
    flat = float((s2.sum() - sp2.sum()) / n_samples)
    spiky = float(sp2.sum() / n_samples)
    return SuperconcentrationReport(
        p=p,
        variance=variance,
        gradient_energy=energy,
        ratio=variance.value / energy.value,
        talagrand_rhs=_talagrand_from_sums(s1, s2, n_samples),
        flat_energy=flat,
        spiky_energy=spiky,
    )


def talagrand_rhs(body: bd.BodySpec, p: float, n_samples: int, seed: SeedSpec,
                  workers: int = 1) -> float:
    """Raw L1-L2 variance bound (universal constant omitted) for |.|_B^p."""
    _validate(body, p, n_samples)
    spec = _KernelSpec(p=p, want=frozenset({"coord"}))
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    return _talagrand_from_sums(_coord_total(batches, "s1"),
                                _coord_total(batches, "s2"), n_samples)


def flat_spiky_stats(body: bd.BodySpec, p: float, n_samples: int, seed: SeedSpec,
                     threshold_exponent: float = 1.0 / 8.0, workers: int = 1,
                     threshold_samples: int | None = None) -> FlatSpikyStats:
    """Split of gradient coordinates at n^(-threshold_exponent) E|G|_B into a
    bounded (flat) part and a rare large (spiky) part, with p-weighted
    energies; flat + spiky equals the total gradient energy by construction."""
    _validate(body, p, n_samples)
    thr_n = threshold_samples if threshold_samples is not None else max(1000, n_samples // 8)
    m1 = mean_norm(body, thr_n, split_seed(seed, _THRESHOLD), workers)
    threshold = body.dim ** (-threshold_exponent) * m1.value
    spec = _KernelSpec(p=p, want=frozenset({"flatspiky"}), threshold=threshold)
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    s2 = _coord_total(batches, "s2")
    sp2 = _coord_total(batches, "sp2")
    counts = _coord_total(batches, "spike_counts")
    return FlatSpikyStats(
        flat_energy=float((s2.sum() - sp2.sum()) / n_samples),
        spiky_energy=float(sp2.sum() / n_samples),
        spiky_prob_per_coord=float(counts.max() / n_samples),
        threshold=threshold,
        norm_mean=m1.value,
    )


def balance_residuals(body: bd.BodySpec, n_samples: int, seed: SeedSpec,
                      workers: int = 1) -> BalanceResiduals:
    """Per-coordinate first-order optimality residuals of the determinant-
    maximizing diagonal scaling: r_i = n E(v g_i x_i)/E(v^2) - 1, with
    delta-method standard errors from batch means."""
    _validate(body, 1.0, n_samples, min_samples=1000)
    spec = _KernelSpec(p=1.0, want=frozenset({"balance"}))
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    n = body.dim
    nb = len(batches)
    sizes = np.array([b["size"] for b in batches], dtype=float)
    bal = np.stack([b["bal"] for b in batches])          # nb x n, batch sums
    m2 = np.array([b["v2"] for b in batches])

    a_tot = bal.sum(axis=0) / sizes.sum()
    b_tot = m2.sum() / sizes.sum()
    r = n * a_tot / b_tot - 1.0

    a_means = bal / sizes[:, None]
    b_means = m2 / sizes
    var_a = a_means.var(axis=0, ddof=1) / nb
    var_b = b_means.var(ddof=1) / nb
    cov_ab = ((a_means - a_means.mean(axis=0)) *
              (b_means - b_means.mean())[:, None]).sum(axis=0) / (nb - 1) / nb
    ratio = a_tot / b_tot
    var_r = (n / b_tot) ** 2 * np.maximum(
        var_a + ratio ** 2 * var_b - 2.0 * ratio * cov_ab, 0.0)
    ell = McEstimate(float(b_tot), float(b_means.std(ddof=1) / math.sqrt(nb)),
                     n_samples, seed)
    return BalanceResiduals(residuals=r, std_errors=np.sqrt(var_r),
                            second_moment=ell, n_samples=n_samples, seed=seed)


def dvoretzky_dimension(body: bd.BodySpec, n_samples: int, seed: SeedSpec,
                        workers: int = 1) -> McEstimate:
    """Critical dimension (E|G|_B / Lip)^2 with delta-method standard error."""
    m1 = mean_norm(body, n_samples, seed, workers)
    lip = bd.lipschitz_constant(body)
    value = (m1.value / lip) ** 2
    se = 2.0 * m1.value / lip ** 2 * m1.std_error
    return McEstimate(value, se, n_samples, seed)


def gradient_ratio_condition(body: bd.BodySpec, c: float, n_samples: int,
                             seed: SeedSpec, workers: int = 1) -> GradientRatioReport:
    """Compare E|G|_B against n^c E|grad(G)|_2 with a 3-SE guard band.

    Reports the two margins from one common-random-number pass; `holds`
    is the small-norm branch of the gradient dichotomy.
    """
    if not 0.0 < c <= 0.5:
        raise ValueError(f"c must be in (0, 1/2], got {c}")
    _validate(body, 1.0, n_samples)
    spec = _KernelSpec(p=1.0, want=frozenset({"gradnorm"}))
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    lhs = _mean_stat(batches, "v", n_samples, seed)
    g = _mean_stat(batches, "gn", n_samples, seed)
    scale = body.dim ** c
    rhs = McEstimate(scale * g.value, scale * g.std_error, n_samples, seed)
    guard = 3.0 * math.hypot(lhs.std_error, rhs.std_error)
    return GradientRatioReport(lhs=lhs, rhs=rhs, holds=lhs.value <= rhs.value + guard)


def deviation_curve(body: bd.BodySpec, eps_grid, n_samples: int, seed: SeedSpec,
                    workers: int = 1) -> DeviationCurve:
    """Empirical P{ |v - Med| >= eps Med } on an eps grid.

    Two-pass: the median comes from one split stream, deviation counts
    from an independent one; Wilson intervals quantify the counts.
    """
    eps = np.asarray(eps_grid, dtype=float)
    if eps.size == 0:
        raise ValueError("eps grid is empty")
    if np.any(eps <= 0.0) or np.any(np.diff(eps) <= 0.0):
        raise ValueError("eps grid must be ascending and positive")
    _validate(body, 1.0, n_samples, min_samples=10_000)

    spec_med = _KernelSpec(p=1.0, want=frozenset({"values"}))
    med_batches = _run_pass(body, spec_med, split_seed(seed, _MEDIAN), n_samples, workers)
    median = float(np.median(np.concatenate([b["values"] for b in med_batches])))

    spec_cnt = _KernelSpec(p=1.0, want=frozenset({"devcount"}), median=median,
                           eps_grid=tuple(eps))
    cnt_batches = _run_pass(body, spec_cnt, split_seed(seed, _COUNT), n_samples, workers)
    counts = _coord_total(cnt_batches, "dev_counts")
    probs = counts / n_samples
    lows = np.empty_like(probs)
    highs = np.empty_like(probs)
    for j, k in enumerate(counts):
        lows[j], highs[j] = wilson_interval(int(k), n_samples)
    return DeviationCurve(n=body.dim, eps_grid=eps, median=median, probs=probs,
                          wilson_low=lows, wilson_high=highs,
                          counts=counts.astype(int), n_samples=n_samples, seed=seed)


def l1_gradient_check(body: bd.BodySpec, p: float, n_samples: int, seed: SeedSpec,
                      workers: int = 1) -> L1GradientReport:
    """Check E|grad(G)|_1^p <= (pi/2)^(p/2) E|G|_B^p for unconditional bodies.

    Both sides come from one stream; `holds` allows a 3-SE guard band, so
    the equality case (the l1 ball at p = 1) passes under noise.
    """
    _validate(body, p, n_samples)
    spec = _KernelSpec(p=p, want=frozenset({"l1grad", "power"}))
    batches = _run_pass(body, spec, split_seed(seed, _MAIN), n_samples, workers)
    lhs = _mean_stat(batches, "l1p", n_samples, seed)
    vp = _mean_stat(batches, "vp", n_samples, seed)
    scale = (math.pi / 2.0) ** (p / 2.0)
    rhs = McEstimate(scale * vp.value, scale * vp.std_error, n_samples, seed)
    guard = 3.0 * math.hypot(lhs.std_error, rhs.std_error)
    return L1GradientReport(lhs=lhs, rhs=rhs, margin=rhs.value - lhs.value,
                            holds=lhs.value <= rhs.value + guard)


def csv_record(body: bd.BodySpec, operation: str, params: dict,
               est: McEstimate) -> str:
    """One-line CSV record: body hash, operation, params, value, SE, n, seed."""
    pjson = json.dumps(params, sort_keys=True, separators=(",", ":"))
    return ",".join([
        bd.body_hash(body), operation, f'"{pjson.replace(chr(34), chr(39))}"',
        repr(est.value), repr(est.std_error), str(est.n_samples), str(est.seed.master),
    ])
