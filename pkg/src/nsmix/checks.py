"""Registry of invariant checks with measured constants and pass/fail status."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from .coupling import gaussian_tv, maximal_couple_step_rng
from .dynamics import IntegratorConfig, Stepper
from .ensemble import simulate_paths
from .ledger import ledger_rows
from .noise import CounterStream, NoiseConfig, build_spec, girsanov_shift, girsanov_unshift, sample_increment
from .spectral import Grid, basis_for
from .weights import (
    SANDWICH_LOWER,
    a2_ball_ratio,
    ball_integrals,
    closed_form_integrals,
    eval_psi,
    g_function,
    min_weight,
    saturation_radius,
    type_i_bound,
)


@dataclass
class CheckResult:
    name: str
    group: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(r) for r in self.results]}

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


@dataclass
class VerifySettings:
    """Knobs for the check suite; the grid is the one under test."""

    M: int = 64
    L: float = 8.0
    dealias_fraction: float = 2.0 / 3.0
    n_fields: int = 20
    seed: int = 0

    def grid(self) -> Grid:
        return Grid(self.M, self.L, self.dealias_fraction)


CHECKS: dict[str, tuple[str, callable]] = {}
GROUPS = ("weights", "operators", "noise", "dynamics", "ledger", "coupling")


def register(group: str):
    def deco(fn):
        CHECKS[fn.__name__] = (group, fn)
        return fn

    return deco


def _result(fn, group, value, tol, detail="", below=True):
    ok = bool(np.isfinite(value) and (value <= tol if below else value >= tol))
    return CheckResult(fn, group, ok, float(value), float(tol), detail)


def grid_quadrature_tolerance(grid: Grid, r_min: float) -> float:
    """Documented tolerance for masked-cell ball integrals: half a cell over the smallest radius."""
    return 0.5 * grid.dx / r_min


# ---------------------------------------------------------------------------
# weights


@register("weights")
def closed_forms_vs_quadrature(cfg: VerifySettings) -> CheckResult:
    worst = 0.0
    for t in (2.0, 4.0, 16.0, 128.0):
        Rs = saturation_radius(t) * np.array([0.05, 0.5, 0.99, 1.5, 4.0])
        for R in Rs:
            cm, cp = closed_form_integrals(t, R)
            qm, qp, _ = ball_integrals("min", t, (0.0, 0.0), R, 256)
            worst = max(worst, abs(qm / cm - 1), abs(qp / cp - 1))
    return _result("closed_forms_vs_quadrature", "weights", worst, 1e-6, "20 (t, R) points, both branches")


@register("weights")
def g_function_limits(cfg: VerifySettings) -> CheckResult:
    # G approaches 4/3 like 4/(3R), so the large-R limit is probed far out and
    # the rate is checked separately at R = 1e3
    err = max(abs(g_function(1e-3) - 1.0), abs(g_function(1e6) - 4.0 / 3.0))
    rate = abs((4.0 / 3.0 - g_function(1e3)) * 1e3 / (4.0 / 3.0) - 1.0)
    return _result("g_function_limits", "weights", max(err, 1e-3 * rate), 1e-3,
                   "|G(1e-3) - 1|, |G(1e6) - 4/3| and the 4/(3R) approach at R = 1e3")


@register("weights")
def central_ball_ratio_bound(cfg: VerifySettings) -> CheckResult:
    worst = 0.0
    for t in (2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0):
        r0 = saturation_radius(t)
        for R in r0 * np.array([1.0, 1.5, 3.0, 10.0, 100.0]):
            worst = max(worst, a2_ball_ratio(t, (0.0, 0.0), R, "min", 256))
    return _result("central_ball_ratio_bound", "weights", worst, 2.0, "max ratio of t ^ phi on centred balls past saturation")


@register("weights")
def psi_sandwich(cfg: VerifySettings) -> CheckResult:
    g = Grid(512, cfg.L)
    worst = -np.inf
    for t in (2.0, 8.0, 32.0, 128.0):
        psi = eval_psi(t, g.radius)
        m = min_weight(t, g.radius)
        worst = max(worst, float(np.max(SANDWICH_LOWER * m - psi)), float(np.max(psi - m)))
    return _result("psi_sandwich", "weights", worst, 1e-12, "max violation of the pointwise sandwich")


@register("weights")
def a2_ratio_at_least_one(cfg: VerifySettings) -> CheckResult:
    rng = np.random.default_rng(cfg.seed)
    worst = np.inf
    for _ in range(20):
        t = float(rng.uniform(2, 64))
        R = float(10 ** rng.uniform(-1, 2))
        x0 = float(rng.uniform(0, 5)) * R
        worst = min(worst, a2_ball_ratio(t, (x0, 0.0), R, "psi", 128) - 1.0)
    return _result("a2_ratio_at_least_one", "weights", worst, -1e-10, "min(ratio - 1)", below=False)


@register("weights")
def type_i_balls_within_bound(cfg: VerifySettings) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 1)
    worst = -np.inf
    for _ in range(20):
        t = float(rng.choice([2.0, 8.0, 32.0]))
        R = float(10 ** rng.uniform(-1, 2))
        x0 = float(rng.uniform(3, 20)) * R
        bound, _ = type_i_bound(t, x0)
        worst = max(worst, a2_ball_ratio(t, (x0, 0.0), R, "min", 128) - bound)
    return _result("type_i_balls_within_bound", "weights", worst, 1e-8, "max(ratio - bound) over type-I balls")


@register("weights")
def grid_ball_quadrature(cfg: VerifySettings) -> CheckResult:
    g = cfg.grid()
    radii = [r for r in (2.0, 4.0, 6.0) if r < g.L]
    worst = 0.0
    for t in (2.0, 8.0, 32.0):
        w = min_weight(t, g.radius)
        for R in radii:
            inside = g.radius <= R
            cm, cp = closed_form_integrals(t, R)
            im = float((inside / w).sum()) * g.dx**2
            ip = float((inside * w).sum()) * g.dx**2
            worst = max(worst, abs(im / cm - 1), abs(ip / cp - 1))
    tol = grid_quadrature_tolerance(g, min(radii))
    return _result("grid_ball_quadrature", "weights", worst, tol, f"masked-cell sums on M={g.M}; tolerance dx/(2 R_min)")


# ---------------------------------------------------------------------------
# spectral operators


def _fields(cfg: VerifySettings, n=None, band="dealiased"):
    g = cfg.grid()
    return g, g.random_solenoidal(np.random.default_rng(cfg.seed), n or cfg.n_fields, band=band)


def _raw(g: Grid, n: int, seed: int):
    rng = np.random.default_rng(seed)
    f = g.to_spectral(rng.standard_normal((n, 2, g.M, g.M)))
    return f * g.representable


@register("operators")
def leray_idempotence(cfg: VerifySettings) -> CheckResult:
    g = cfg.grid()
    f = _raw(g, cfg.n_fields, cfg.seed)
    p = g.leray(f)
    err = float(np.max(np.abs(g.leray(p) - p)) / np.max(np.abs(p)))
    return _result("leray_idempotence", "operators", err, 1e-14)


@register("operators")
def leray_divergence(cfg: VerifySettings) -> CheckResult:
    g = cfg.grid()
    f = _raw(g, cfg.n_fields, cfg.seed + 1)
    p = g.leray(f)
    err = float(np.max(np.abs(g.k1 * p[:, 0] + g.k2 * p[:, 1])) / np.max(np.abs(p)))
    return _result("leray_divergence", "operators", err, 1e-13)


@register("operators")
def gradient_equals_curl(cfg: VerifySettings) -> CheckResult:
    g, u = _fields(cfg, band="full")
    a = g.grad_norm(u) ** 2
    b = g.norm(g.curl(u), vector=False) ** 2
    return _result("gradient_equals_curl", "operators", float(np.max(np.abs(a / b - 1))), 1e-12)


@register("operators")
def parseval(cfg: VerifySettings) -> CheckResult:
    g, u = _fields(cfg, band="full")
    phys = (g.to_physical(u) ** 2).sum(axis=(-3, -2, -1)) * g.dx**2
    return _result("parseval", "operators", float(np.max(np.abs(phys / g.inner(u, u) - 1))), 1e-12)


@register("operators")
def nonlinear_cancellation(cfg: VerifySettings) -> CheckResult:
    g, u = _fields(cfg)
    val = np.abs(g.inner(g.nonlinear(u), u)) / (g.norm(u) * g.sobolev_norm(u, 1.0))
    return _result("nonlinear_cancellation", "operators", float(np.max(val)), 1e-10,
                   f"dealias_fraction={g.dealias_fraction:.6g}")


@register("operators")
def pressure_poisson(cfg: VerifySettings) -> CheckResult:
    g, u = _fields(cfg, n=4)
    p = g.pressure(u)
    # -Lap p = div div (u (x) u): compare against the dealiased stress divergence
    uu = g.to_physical(u)
    k = (g.k1, g.k2)
    rhs = 0.0
    for i in range(2):
        for j in range(2):
            rhs = rhs - k[i] * k[j] * g.to_spectral(uu[:, i] * uu[:, j])
    rhs = rhs * g.dealias_mask * g.representable
    lhs = g.ksq * p
    err = float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
    return _result("pressure_poisson", "operators", err, 1e-12, "-Lap p = div div(u u)")


@register("operators")
def projector_orthogonality(cfg: VerifySettings) -> CheckResult:
    g, u = _fields(cfg, n=4)
    basis = basis_for(g)
    N = min(40, basis.size)
    v = u[::-1]
    val = np.abs(g.inner(basis.project(u, N), basis.complement(v, N))) / (g.norm(u) * g.norm(v))
    return _result("projector_orthogonality", "operators", float(np.max(val)), 1e-12)


# ---------------------------------------------------------------------------
# noise


def _spec(cfg: VerifySettings, **kw):
    g = cfg.grid()
    nc = NoiseConfig(**{"J": 16, "s": 2.0, "b0": 1.0, "N_active": 8, "seed": cfg.seed, **kw})
    return g, build_spec(g, nc)


@register("noise")
def basis_orthonormality(cfg: VerifySettings) -> CheckResult:
    g = cfg.grid()
    basis = basis_for(g)
    J = min(64, basis.size)
    E = np.stack([basis.field(j) for j in range(J)])
    gram = g.inner(E[:, None], E[None, :])
    return _result("basis_orthonormality", "noise", float(np.max(np.abs(gram - np.eye(J)))), 1e-12)


@register("noise")
def coefficient_sums(cfg: VerifySettings) -> CheckResult:
    g, spec = _spec(cfg)
    b0 = sum(float(x) ** 2 for x in spec.b)
    return _result("coefficient_sums", "noise", abs(spec.B0 - b0) / b0, 1e-12)


@register("noise")
def girsanov_shift_roundtrip(cfg: VerifySettings) -> CheckResult:
    g, spec = _spec(cfg)
    inc = sample_increment(spec, 1e-2, CounterStream(cfg.seed, "verify/shift", spec.J), 0)
    drift = np.random.default_rng(cfg.seed).standard_normal(spec.N_active) * 0.3
    back = girsanov_unshift(girsanov_shift(inc, drift, spec), drift, spec)
    same = back.shift is None and np.array_equal(back.value(), inc.value())
    return _result("girsanov_shift_roundtrip", "noise", 0.0 if same else 1.0, 0.0, "bit-identical after unshift")


@register("noise")
def stream_determinism(cfg: VerifySettings) -> CheckResult:
    a = CounterStream(cfg.seed, "verify/det", 16).normals(3, 5, 7, 16)
    b = CounterStream(cfg.seed, "verify/det", 16).normals(3, 0, 12, 16)[5:]
    return _result("stream_determinism", "noise", 0.0 if np.array_equal(a, b) else 1.0, 0.0,
                   "lane blocks independent of batch layout")


# ---------------------------------------------------------------------------
# dynamics


def _stepper(cfg: VerifySettings, **icfg):
    g, spec = _spec(cfg, h_coeffs=[0.2, 0.1])
    return Stepper(g, spec, IntegratorConfig(**icfg))


@register("dynamics")
def single_mode_linear_decay(cfg: VerifySettings) -> CheckResult:
    st = _stepper(cfg)
    g = st.grid
    e = basis_for(g).field(3)
    u = e.copy()
    n = 200
    for _ in range(n):
        u = st.step_primal(u, 0.0) - st.Phi_h
    lam = st.cfg.a + st.cfg.nu * basis_for(g).ksq[3]
    exact = np.exp(-lam * n * st.cfg.dt) * e
    return _result("single_mode_linear_decay", "dynamics", float(g.norm(u - exact) / g.norm(exact)), 1e-12)


@register("dynamics")
def low_mode_exact_decay(cfg: VerifySettings) -> CheckResult:
    st = _stepper(cfg)
    g = st.grid
    rng = np.random.default_rng(cfg.seed)
    u = g.random_solenoidal(rng, 2) * 2.0
    v = g.random_solenoidal(rng, 2) * 2.0
    N = 8
    gh = u - v
    P0 = st.project(gh, N)
    s = CounterStream(cfg.seed, "verify/decay", st.spec.J)
    n = 200
    for k in range(n):
        noise = st.noise_field(st.spec.b * np.sqrt(st.cfg.dt) * s.normals(k, 0, 2, st.spec.J))
        Nu, Nv = st.nonlinear(u), st.nonlinear(v)
        gh = st.step_difference_g(gh, u, v, N, Nu, Nv)
        v = st.step_auxiliary_v(v, u, noise, N, Nu, Nv)
        u = st.step_primal(u, noise, Nu)
    target = np.exp(-st.cfg.a * n * st.cfg.dt) * P0
    err = float(np.max(g.norm(st.project(gh, N) - target) / g.norm(target)))
    return _result("low_mode_exact_decay", "dynamics", err, 1e-8)


@register("dynamics")
def controlled_equals_auxiliary(cfg: VerifySettings) -> CheckResult:
    st = _stepper(cfg)
    g = st.grid
    rng = np.random.default_rng(cfg.seed + 3)
    u = g.random_solenoidal(rng, 2)
    v = g.random_solenoidal(rng, 2)
    noise = st.noise_field(st.spec.b * np.sqrt(st.cfg.dt) * rng.standard_normal((2, st.spec.J)))
    N = 8
    a = st.step_auxiliary_v(v, u, noise, N)
    d = st.drift_coords(u, v, N)
    inc = st.control_increment(v, noise + st.basis.synth(d), N)
    b = st.step_controlled(v, inc, N)
    return _result("controlled_equals_auxiliary", "dynamics", float(np.max(g.norm(a - b) / g.norm(a))), 1e-12)


@register("dynamics")
def energy_balance(cfg: VerifySettings) -> CheckResult:
    dt = 1e-3
    st = _stepper(cfg, dt=dt)
    g = st.grid
    u = g.random_solenoidal(np.random.default_rng(cfg.seed), 1)[0] * 2.0

    def rate(x):
        return 2 * st.cfg.a * g.inner(x, x) + 2 * st.cfg.nu * g.grad_norm(x) ** 2 - 2 * g.inner(st.h, x)

    e0 = g.inner(u, u)
    n = int(round(0.25 / dt))
    acc = 0.5 * rate(u)
    for k in range(n):
        u = st.step_primal(u, 0.0)
        acc += rate(u) if k < n - 1 else 0.5 * rate(u)
    res = abs(g.inner(u, u) - e0 + acc * dt) / e0 / (n * dt)
    return _result("energy_balance", "dynamics", float(res), 5 * dt, "relative residual per unit time")


@register("dynamics")
def divergence_preserved(cfg: VerifySettings) -> CheckResult:
    st = _stepper(cfg)
    g = st.grid
    u = g.random_solenoidal(np.random.default_rng(cfg.seed), 2)
    s = CounterStream(cfg.seed, "verify/div", st.spec.J)
    for k in range(100):
        u = st.step_primal(u, st.noise_field(st.spec.b * np.sqrt(st.cfg.dt) * s.normals(k, 0, 2, st.spec.J)))
    err = float(np.max(np.abs(g.divergence(u))) / np.max(np.abs(u)))
    return _result("divergence_preserved", "dynamics", err, 1e-12)


# ---------------------------------------------------------------------------
# ledger


def _ledger_run(cfg: VerifySettings):
    g, spec = _spec(cfg)
    small = Grid(32, cfg.L)
    spec = build_spec(small, NoiseConfig(J=16, b0=1.0, N_active=8, seed=cfg.seed))
    st = Stepper(small, spec, IntegratorConfig(dt=1e-2, T_horizon=2.0))
    u0 = small.random_solenoidal(np.random.default_rng(cfg.seed), 4)
    return simulate_paths(st, u0, CounterStream(cfg.seed, "verify/ledger", spec.J))


@register("ledger")
def composite_identity(cfg: VerifySettings) -> CheckResult:
    res = _ledger_run(cfg)
    worst = 0.0
    for r in ledger_rows(res.ledger):
        parts = r["E1"] + r["E3"] + r["Etilde_psi"] + r["E11"] + r["Etilde_1psi"]
        worst = max(worst, float(np.max(np.abs(r["E_psi"] - parts) / np.maximum(r["E_psi"], 1e-300))))
    return _result("composite_identity", "ledger", worst, 1e-10)


@register("ledger")
def quadratic_variation_bound(cfg: VerifySettings) -> CheckResult:
    res = _ledger_run(cfg)
    st = res.ledger
    excess = float(np.max(st.QV1 - st.QV_bound * (1 + 1e-12)))
    return _result("quadratic_variation_bound", "ledger", excess, 0.0, "max(QV1 - 4 B0 int |u|^2)")


@register("ledger")
def integrals_monotone(cfg: VerifySettings) -> CheckResult:
    res = _ledger_run(cfg)
    I = np.stack([row[2] for row in res.ledger.unweighted_rows])
    J = np.stack([row[2] for row in res.ledger.offset_rows])
    worst = max(float(-np.min(np.diff(I, axis=0))), float(-np.min(np.diff(J, axis=0))))
    return _result("integrals_monotone", "ledger", worst, 0.0, "largest decrease of any integral term")


# ---------------------------------------------------------------------------
# coupling


@register("coupling")
def maximal_coupling_rate(cfg: VerifySettings) -> CheckResult:
    rng = np.random.default_rng(cfg.seed)
    n = 20000
    mp = np.zeros((n, 1))
    mq = np.ones((n, 1))
    _, _, agreed = maximal_couple_step_rng(mp, mq, np.ones(1), rng)
    p = 2.0 * ndtr(0.5) - 1.0
    z = abs((1.0 - agreed.mean()) - p) / np.sqrt(p * (1 - p) / n)
    return _result("maximal_coupling_rate", "coupling", float(z), 4.0, "|z| of the disagreement frequency")


@register("coupling")
def maximal_coupling_marginals(cfg: VerifySettings) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 1)
    n = 20000
    mp = np.full((n, 2), 0.4)
    mq = np.zeros((n, 2))
    X, Y, _ = maximal_couple_step_rng(mp, mq, np.ones(2), rng)
    z = max(float(np.max(np.abs(X.mean(0) - 0.4))), float(np.max(np.abs(Y.mean(0))))) * np.sqrt(n)
    return _result("maximal_coupling_marginals", "coupling", z, 4.0, "max |z| of marginal means")


@register("coupling")
def gaussian_tv_closed_form(cfg: VerifySettings) -> CheckResult:
    val = float(gaussian_tv(np.array([1.0]), np.array([0.0]), 1.0))
    return _result("gaussian_tv_closed_form", "coupling", abs(val - 0.3829249225480262), 1e-12)


# ---------------------------------------------------------------------------


def verify_suite(settings: VerifySettings | None = None, groups=GROUPS) -> VerifyReport:
    settings = settings or VerifySettings()
    rep = VerifyReport()
    for name, (group, fn) in CHECKS.items():
        if group not in groups:
            continue
        try:
            rep.results.append(fn(settings))
        except Exception as exc:  # a crashing check is a failing check
            rep.results.append(CheckResult(name, group, False, float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"))
    return rep


def write_report(out_dir, report: VerifyReport) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "verify_report.json")
    report.write(path)
    return path
