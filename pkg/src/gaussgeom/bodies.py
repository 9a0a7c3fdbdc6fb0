"""Norm and gradient oracles for unconditional symmetric convex bodies.

A body is its Minkowski gauge.  Every supported family is 1-unconditional
in the standard basis, and every instance carries a positive diagonal
scaling d acting as ``|x|_{D(B)} = |x/d|_B`` (the unit ball is d * B).

Families
--------
cube            max_i |y_i|                       (l-infinity ball)
lp_ball         (sum_i |y_i|^p)^(1/p),  p >= 1
weighted_lp     (sum_i w_i |y_i|^p)^(1/p)
euclidean       alias of lp_ball(2)
cylinder_john   max( max_{i<=n-m} |y_i|, (sum_{i>n-m} y_i^2)^(1/2) ),
                the intersection of an l-infinity cylinder on the first
                n-m coordinates with a Euclidean cylinder on the last m;
                with unit diag it is in John position (the unit ball is
                the maximal inscribed ellipsoid, touching at +-e_i).

where y = x / d componentwise.

Gradients are subgradient selections: exact gradients wherever the
boundary is smooth, and at ties (equal maximal coordinates, or the
cylinder's crossover) the lowest-index achieving coordinate wins.  Those
tie sets have Gaussian measure zero, so Monte Carlo functionals are
unaffected by the selection.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .sampler import SeedSpec, normal_fill, philox_generator

CUBE = "cube"
LP_BALL = "lp_ball"
WEIGHTED_LP = "weighted_lp"
EUCLIDEAN = "euclidean"
CYLINDER_JOHN = "cylinder_john"

_FAMILIES = (CUBE, LP_BALL, WEIGHTED_LP, EUCLIDEAN, CYLINDER_JOHN)


@dataclass(frozen=True, eq=False)
class BodySpec:
    """Immutable description of one scaled body; all oracle calls are pure."""

    family: str
    dim: int
    diag: np.ndarray
    p: float | None = None
    weights: np.ndarray | None = None
    m: int | None = None

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        d = np.asarray(self.diag, dtype=float)
        if d.shape != (self.dim,):
            raise ValueError(f"diag must have length {self.dim}, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
            raise ValueError("diag entries must be strictly positive and finite")
        object.__setattr__(self, "diag", d)
        if self.family in (LP_BALL, WEIGHTED_LP):
            if self.p is None or not np.isfinite(self.p) or self.p < 1.0:
                raise ValueError(f"p must be a finite real >= 1, got {self.p}")
        if self.family == WEIGHTED_LP:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.dim,) or not np.all(np.isfinite(w)) or np.any(w <= 0.0):
                raise ValueError("weights must be positive finite reals of length dim")
            object.__setattr__(self, "weights", w)
        if self.family == CYLINDER_JOHN:
            if self.m is None or not 1 <= self.m < self.dim:
                raise ValueError(f"cylinder_john needs 1 <= m < n, got m={self.m}")


@dataclass(frozen=True)
class NormEvaluation:
    """Gauge value and a subgradient selection at one point."""

    value: float
    gradient: np.ndarray


def cube(n: int, diag=None) -> BodySpec:
    return BodySpec(CUBE, n, np.ones(n) if diag is None else diag)


def lp_ball(n: int, p: float, diag=None) -> BodySpec:
    return BodySpec(LP_BALL, n, np.ones(n) if diag is None else diag, p=float(p))


def euclidean(n: int, diag=None) -> BodySpec:
    return BodySpec(EUCLIDEAN, n, np.ones(n) if diag is None else diag)


def weighted_lp(n: int, p: float, weights, diag=None) -> BodySpec:
    return BodySpec(WEIGHTED_LP, n, np.ones(n) if diag is None else diag,
                    p=float(p), weights=weights)


def cylinder_john(n: int, m: int, diag=None) -> BodySpec:
    return BodySpec(CYLINDER_JOHN, n, np.ones(n) if diag is None else diag, m=int(m))


def make_cylinder_john_body(n: int, seed: SeedSpec, trials: int = 20000,
                            n_floor: int = 64) -> BodySpec:
    """Build the John-position counterexample body at dimension n.

    m is estimated once as floor(median of max_i g_i^2) over `trials`
    Gaussian vectors drawn from `seed`, then frozen into the spec so
    downstream experiments are reproducible.
    """
    if n < n_floor:
        raise ValueError(f"n={n} below configured floor {n_floor}")
    if trials < 100:
        raise ValueError(f"trials must be >= 100, got {trials}")
    gen = philox_generator(seed)
    maxima = np.empty(trials)
    chunk_rows = max(1, (1 << 22) // n)
    buf = np.empty((chunk_rows, n))
    done = 0
    while done < trials:
        r = min(chunk_rows, trials - done)
        x = normal_fill(gen, buf[:r] if r == chunk_rows else np.empty((r, n)))
        maxima[done:done + r] = np.abs(x).max(axis=1)
        done += r
    m = int(np.floor(np.median(maxima) ** 2))
    if m < 1:
        raise ValueError(f"estimated m={m} < 1 at n={n}; increase n")
    return cylinder_john(n, m)


def _check_points(body: BodySpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != body.dim:
        raise ValueError(f"point dimension {x.shape[-1]} != body dim {body.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite components")
    return x


def _stable_power_norm(ay: np.ndarray, p: float, w: np.ndarray | None) -> np.ndarray:
    """Rowwise (sum w |y|^p)^(1/p), scaled by the row max to avoid overflow."""
    mx = ay.max(axis=1)
    safe = np.where(mx > 0.0, mx, 1.0)
    ratios = ay / safe[:, None]
    if w is None:
        s = (ratios ** p).sum(axis=1)
    else:
        s = (ratios ** p) @ w
    return mx * s ** (1.0 / p)


def norm_batch(body: BodySpec, x: np.ndarray) -> np.ndarray:
    """Gauge values for one point (1-D) or a batch of row points (2-D)."""
    x = _check_points(body, x)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    y = pts / body.diag
    fam = body.family
    if fam == CUBE:
        v = np.abs(y).max(axis=1)
    elif fam == EUCLIDEAN:
        v = np.linalg.norm(y, axis=1)
    elif fam == LP_BALL:
        if body.p == 1.0:
            v = np.abs(y).sum(axis=1)
        elif body.p == 2.0:
            v = np.linalg.norm(y, axis=1)
        else:
            v = _stable_power_norm(np.abs(y), body.p, None)
    elif fam == WEIGHTED_LP:
        if body.p == 1.0:
            v = np.abs(y) @ body.weights
        elif body.p == 2.0:
            v = np.sqrt((y * y) @ body.weights)
        else:
            v = _stable_power_norm(np.abs(y), body.p, body.weights)
    else:  # cylinder_john
        h = body.dim - body.m
        head = np.abs(y[:, :h]).max(axis=1)
        tail = np.linalg.norm(y[:, h:], axis=1)
        v = np.maximum(head, tail)
    return float(v[0]) if single else v


def norm(body: BodySpec, x: np.ndarray) -> float:
    """Gauge |x|_{D(B)}; zero iff x = 0, positively homogeneous of degree 1."""
    return float(norm_batch(body, np.asarray(x, dtype=float)))


def gradient_batch(body: BodySpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and subgradient rows for a batch of nonzero points."""
    x = _check_points(body, x)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    rows, n = pts.shape
    y = pts / body.diag
    fam = body.family
    if fam == CUBE:
        ay = np.abs(y)
        j = ay.argmax(axis=1)
        v = ay[np.arange(rows), j]
        g = np.zeros_like(pts)
        g[np.arange(rows), j] = np.sign(y[np.arange(rows), j]) / body.diag[j]
    elif fam in (EUCLIDEAN, LP_BALL, WEIGHTED_LP):
        p = 2.0 if fam == EUCLIDEAN else body.p
        w = body.weights if fam == WEIGHTED_LP else None
        if p == 1.0:
            v = np.abs(y).sum(axis=1) if w is None else np.abs(y) @ w
            g = np.sign(y) / body.diag
            if w is not None:
                g *= w
        else:
            ay = np.abs(y)
            v = _stable_power_norm(ay, p, w)
            safe = np.where(v > 0.0, v, 1.0)
            g = np.sign(y) * (ay / safe[:, None]) ** (p - 1.0) / body.diag
            if w is not None:
                g *= w
    else:  # cylinder_john
        h = body.dim - body.m
        ay = np.abs(y[:, :h])
        j = ay.argmax(axis=1)
        head = ay[np.arange(rows), j]
        tail = np.linalg.norm(y[:, h:], axis=1)
        v = np.maximum(head, tail)
        g = np.zeros_like(pts)
        hm = head >= tail  # tie goes to the head block (lower indices)
        idx = np.flatnonzero(hm)
        g[idx, j[idx]] = np.sign(y[idx, j[idx]]) / body.diag[j[idx]]
        tm = np.flatnonzero(~hm)
        if tm.size:
            g[np.ix_(tm, np.arange(h, n))] = (
                y[tm, h:] / (tail[tm][:, None] * body.diag[h:])
            )
    if np.any(v == 0.0):
        raise ValueError("gradient is undefined at the origin")
    if single:
        return float(v[0]), g[0]
    return v, g


def gradient(body: BodySpec, x: np.ndarray) -> NormEvaluation:
    """Gauge value and subgradient at a nonzero point.

    The selection satisfies <g, x> = |x|_B exactly, the sign structure of
    unconditional bodies (g_i x_i >= 0 componentwise), and g(lambda x) =
    g(x) for lambda > 0, g(-x) = -g(x).
    """
    v, g = gradient_batch(body, np.asarray(x, dtype=float))
    return NormEvaluation(value=float(v), gradient=g)


def gradient_support(body: BodySpec) -> int | None:
    """Max nonzeros in any subgradient row, if small; None means dense."""
    if body.family == CUBE:
        return 1
    if body.family == CYLINDER_JOHN:
        return max(1, body.m)
    return None


def gradient_indexed_batch(body: BodySpec, x: np.ndarray):
    """Sparse subgradients as (values, idx rows x s, gvals rows x s).

    idx entries of -1 are padding with gval 0.  Only available when
    gradient_support(body) is not None.
    """
    s = gradient_support(body)
    if s is None:
        raise ValueError(f"family {body.family} has dense gradients")
    pts = _check_points(body, x)
    rows, n = pts.shape
    y = pts / body.diag
    if body.family == CUBE:
        ay = np.abs(y)
        j = ay.argmax(axis=1)
        v = ay[np.arange(rows), j]
        idx = j[:, None]
        gv = (np.sign(y[np.arange(rows), j]) / body.diag[j])[:, None]
    else:
        h = body.dim - body.m
        ay = np.abs(y[:, :h])
        j = ay.argmax(axis=1)
        head = ay[np.arange(rows), j]
        tail = np.linalg.norm(y[:, h:], axis=1)
        v = np.maximum(head, tail)
        idx = np.full((rows, s), -1, dtype=np.int64)
        gv = np.zeros((rows, s))
        hm = head >= tail
        idx[hm, 0] = j[hm]
        gv[hm, 0] = np.sign(y[hm, j[hm]]) / body.diag[j[hm]]
        tm = ~hm
        if np.any(tm):
            idx[tm, :] = np.arange(h, n)
            gv[tm, :] = y[tm, h:] / (tail[tm][:, None] * body.diag[h:])
    if np.any(v == 0.0):
        raise ValueError("gradient is undefined at the origin")
    return v, idx, gv


def lipschitz_constant(body: BodySpec) -> float:
    """Max of the gauge over the Euclidean unit sphere, in closed form.

    With a_i the coordinatewise scale of the gauge (a_i = w_i^(1/p)/d_i),
    the maximizer over the sphere gives |a|_{2p/(2-p)} for p < 2 and
    max_i a_i for p >= 2; both cube blocks of the cylinder reduce to
    max_i 1/d_i.
    """
    d = body.diag
    fam = body.family
    if fam in (CUBE, CYLINDER_JOHN, EUCLIDEAN):
        return float((1.0 / d).max())
    p = body.p
    if fam == LP_BALL:
        a = 1.0 / d
    else:
        a = body.weights ** (1.0 / p) / d
    if p >= 2.0:
        return float(a.max())
    r = 2.0 * p / (2.0 - p)
    mx = a.max()
    return float(mx * (((a / mx) ** r).sum()) ** (1.0 / r))


def apply_diagonal(body: BodySpec, d) -> BodySpec:
    """Compose a further diagonal scaling: norm(new, x) = norm(old, x/d)."""
    d = np.asarray(d, dtype=float)
    if d.shape != (body.dim,):
        raise ValueError(f"d must have length {body.dim}, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
        raise ValueError("d entries must be strictly positive and finite")
    return replace(body, diag=body.diag * d)


def to_json_dict(body: BodySpec) -> dict:
    """JSON object with fixed field order: family, dim, m?, p?, weights?, diag."""
    out: dict = {"family": body.family, "dim": body.dim}
    if body.m is not None:
        out["m"] = body.m
    if body.p is not None:
        out["p"] = body.p
    if body.weights is not None:
        out["weights"] = body.weights.tolist()
    out["diag"] = body.diag.tolist()
    return out


def from_json_dict(obj: dict) -> BodySpec:
    return BodySpec(
        family=obj["family"],
        dim=int(obj["dim"]),
        diag=np.asarray(obj["diag"], dtype=float),
        p=obj.get("p"),
        weights=None if obj.get("weights") is None else np.asarray(obj["weights"], float),
        m=obj.get("m"),
    )


def body_hash(body: BodySpec) -> str:
    """Short stable digest of the serialized body, for CSV records."""
    blob = json.dumps(to_json_dict(body), separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
