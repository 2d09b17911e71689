"""Radial weights phi, psi(t) and t ^ phi, their ball averages and A2 ratios.

phi(x) = sqrt(|x|^2 + 1), psi(t, x) = phi (1 - exp(-t / phi)).  For t >= 2 the
sandwich (1 - 1/e)(t ^ phi) <= psi(t) <= t ^ phi holds pointwise, so A2
bounds for the piecewise weight t ^ phi transfer to psi(t).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .spectral import Grid

SANDWICH_LOWER = 1.0 - np.exp(-1.0)


def phi(r):
    r = np.asarray(r, dtype=float)
    return np.sqrt(r * r + 1.0)


def eval_psi(t: float, r) -> np.ndarray:
    """psi(t) at radius r = |x|.  Zero at t = 0 and increasing in both arguments."""
    if t < 0:
        raise ValueError("psi is defined for t >= 0")
    p = phi(r)
    return -p * np.expm1(-t / p)


def eval_psi_points(t: float, x) -> np.ndarray:
    """psi(t) at points of shape (..., 2)."""
    x = np.asarray(x, dtype=float)
    return eval_psi(t, np.hypot(x[..., 0], x[..., 1]))


def min_weight(t: float, r) -> np.ndarray:
    """The piecewise weight t ^ phi."""
    return np.minimum(t, phi(r))


def _weight(kind: str):
    if kind == "psi":
        return eval_psi
    if kind == "min":
        return min_weight
    raise ValueError(f"unknown weight {kind!r}")


# ---------------------------------------------------------------------------
# closed forms for the centred ball

def saturation_radius(t: float) -> float:
    """Radius sqrt(t^2 - 1) at which phi reaches t."""
    if t < 1:
        raise ValueError("t ^ phi saturates only for t >= 1")
    return float(np.sqrt(t * t - 1.0))


def closed_form_integrals(t: float, R: float) -> tuple[float, float]:
    """Exact integrals of (t ^ phi)^-1 and t ^ phi over the disc B(0, R)."""
    if R <= 0:
        raise ValueError("ball radius must be positive")
    R0 = saturation_radius(t)
    if R >= R0:
        inv = np.pi / t * (R * R + (t - 1.0) ** 2)
        fwd = 2.0 * np.pi * (-(t**3) / 6.0 + t / 2.0 - 1.0 / 3.0 + t * R * R / 2.0)
    else:
        x = R * R
        inv = 2.0 * np.pi * (x / (np.sqrt(1.0 + x) + 1.0))
        fwd = 2.0 * np.pi / 3.0 * np.expm1(1.5 * np.log1p(x))
    return float(inv), float(fwd)


def closed_form_ratio(t: float, R: float) -> float:
    inv, fwd = closed_form_integrals(t, R)
    area = np.pi * R * R
    return inv * fwd / (area * area)


def g_function(R) -> np.ndarray:
    """Centred A2 ratio of phi on B(0, R); tends to 1 at 0 and to 4/3 at infinity."""
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0):
        raise ValueError("g_function needs R > 0")
    x = R * R
    a = x / (np.sqrt(1.0 + x) + 1.0)
    b = np.expm1(1.5 * np.log1p(x))
    return 4.0 / 3.0 * a * b / (x * x)


def type_i_bound(t: float, x0_norm: float) -> tuple[float, str]:
    """Bound on the A2 ratio of t ^ phi over any ball B(x0, R) with |x0| >= 3R.

    Such a ball lies in the annulus 2|x0|/3 <= |x| <= 4|x0|/3, so the ratio is
    at most the oscillation of the weight across that annulus.
    """
    lo = phi(2.0 * x0_norm / 3.0)
    hi = phi(4.0 * x0_norm / 3.0)
    if lo >= t:
        return 1.0, "saturated"
    if hi <= t:
        return float(hi / lo), "unsaturated"
    return float(t / lo), "mixed"


# ---------------------------------------------------------------------------
# quadrature

def _polar_rule(R: float, n: int, breaks=()):
    """Gauss-Legendre radial nodes on [0, R], split at interior break points."""
    edges = [0.0] + sorted(b for b in breaks if 0.0 < b < R) + [R]
    xg, wg = np.polynomial.legendre.leggauss(n)
    rs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        rs.append(0.5 * (b - a) * (xg + 1.0) + a)
        ws.append(0.5 * (b - a) * wg)
    return np.concatenate(rs), np.concatenate(ws)


def ball_integrals(
    weight: str,
    t: float,
    center,
    R: float,
    quadrature_n: int = 512,
    method: str = "polar",
) -> tuple[float, float, float]:
    """Integrals of w^-1, w and 1 over B(center, R) by numerical quadrature.

    ``polar``: Gauss-Legendre in the radius about the ball centre times the
    periodic trapezoid rule in angle (``quadrature_n // 2`` nodes).  For a
    centred ball the radial rule is split where t ^ phi saturates.
    ``cartesian``: midpoint rule over the bounding square, masked to the ball.
    """
    if not R > 0:
        raise ValueError("ball radius must be positive")
    if quadrature_n < 64:
        raise ValueError("quadrature_n must be at least 64")
    w = _weight(weight)
    c = np.asarray(center, dtype=float).reshape(2)
    if method == "polar":
        c_norm = float(np.hypot(*c))
        breaks = ()
        if c_norm == 0.0 and t >= 1.0:
            breaks = (saturation_radius(t),)
        r, wr = _polar_rule(R, quadrature_n, breaks)
        nth = quadrature_n // 2
        th = 2.0 * np.pi * (np.arange(nth) + 0.5) / nth
        x1 = c[0] + r[:, None] * np.cos(th)
        x2 = c[1] + r[:, None] * np.sin(th)
        jac = np.broadcast_to((wr * r)[:, None] * (2.0 * np.pi / nth), x1.shape)
    elif method == "cartesian":
        h = 2.0 * R / quadrature_n
        s = -R + h * (np.arange(quadrature_n) + 0.5)
        d1, d2 = np.meshgrid(s, s, indexing="ij")
        inside = d1 * d1 + d2 * d2 < R * R
        x1 = c[0] + d1[inside]
        x2 = c[1] + d2[inside]
        jac = np.full(x1.shape, h * h)
    else:
        raise ValueError(f"unknown quadrature method {method!r}")
    vals = w(t, np.hypot(x1, x2))
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise FloatingPointError("weight is non-finite or non-positive on the ball")
    return float((jac / vals).sum()), float((jac * vals).sum()), float(jac.sum())


def a2_ball_ratio(
    t: float,
    center,
    R: float,
    weight: str = "psi",
    quadrature_n: int = 512,
    method: str = "polar",
) -> float:
    """(avg_B w^-1)(avg_B w) for the ball B(center, R)."""
    inv, fwd, area = ball_integrals(weight, t, center, R, quadrature_n, method)
    return inv * fwd / (area * area)


@dataclass
class BallFamily:
    """Stratified balls: log-spaced radii times centre offsets |x0| / R."""

    radii: np.ndarray = field(default_factory=lambda: np.logspace(-2, 3, 41))
    offsets: tuple = (0.0, 1.0, 3.0, 10.0)

    def balls(self):
        for R in np.asarray(self.radii, dtype=float):
            for f in self.offsets:
                yield float(f * R), float(R)


def branch_label(t: float, x0_norm: float, R: float) -> str:
    if x0_norm >= 3.0 * R:
        return "type1"
    if x0_norm == 0.0:
        return "central-outer" if R >= saturation_radius(max(t, 1.0)) else "central-inner"
    return "type2"


@dataclass
class A2Estimate:
    t: float
    value: float
    x0_norm: float
    R: float
    rows: list = field(default_factory=list, repr=False)


def a2_characteristic_estimate(
    t: float,
    family: BallFamily | None = None,
    weight: str = "psi",
    quadrature_n: int = 256,
) -> A2Estimate:
    """Maximum A2 ratio over the family, with the maximising ball and all rows."""
    family = family or BallFamily()
    best = A2Estimate(t, -np.inf, np.nan, np.nan)
    for x0, R in family.balls():
        r = a2_ball_ratio(t, (x0, 0.0), R, weight, quadrature_n)
        best.rows.append((t, R, x0, r, branch_label(t, x0, R)))
        if r > best.value:
            best.value, best.x0_norm, best.R = r, x0, R
    return best


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "R", "x0_norm", "ratio", "branch"])
        for t, R, x0, r, br in rows:
            wr.writerow([repr(float(t)), repr(float(R)), repr(float(x0)), repr(float(r)), br])


# ---------------------------------------------------------------------------
# probes on the periodic grid

def grid_weight(grid: Grid, t: float, kind: str = "psi") -> np.ndarray:
    return _weight(kind)(t, grid.radius)


def weighted_l2(grid: Grid, weight: np.ndarray, f: np.ndarray, ncomp_axes: int = 0) -> np.ndarray:
    """||weight * f|| for physical arrays; sums ``ncomp_axes`` component axes."""
    dens = (weight * f) ** 2
    axes = tuple(range(-2 - ncomp_axes, 0))
    return np.sqrt(dens.sum(axis=axes) * grid.dx**2)


def weighted_leray_probe(grid: Grid, t: float, fields_hat: np.ndarray) -> np.ndarray:
    """Ratios ||psi(t) Pi f|| / ||psi(t) f|| for a batch of raw vector fields."""
    w = grid_weight(grid, t)
    f = grid.to_physical(fields_hat)
    pf = grid.to_physical(grid.leray(fields_hat))
    return weighted_l2(grid, w, pf, 1) / weighted_l2(grid, w, f, 1)


def weighted_second_derivative_probe(grid: Grid, t: float, uh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (||psi D^2 u||, ||grad u|| + ||psi grad curl u||) per field."""
    w = grid_weight(grid, t)
    k = (grid.k1, grid.k2)
    hess = np.stack([np.stack([-k[i] * k[j] * uh for j in range(2)], axis=-4) for i in range(2)], axis=-5)
    lhs = weighted_l2(grid, w, grid.to_physical(hess), 3)
    wh = grid.curl(uh)
    gw = grid.to_physical(grid.gradient(wh))
    rhs = grid.grad_norm(uh) + weighted_l2(grid, w, gw, 1)
    return lhs, rhs
