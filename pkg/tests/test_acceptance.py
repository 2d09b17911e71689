"""Release criteria.  Each test prints one PASS/FAIL line and asserts the verdict.

Monte Carlo criteria are marked ``slow``; deselect them with ``-m "not slow"``.
"""

import time

import numpy as np
import pytest
from scipy.special import ndtr

from nsmix.cli import EXIT_OK, main
from nsmix.coupling import maximal_couple_step_rng, run_coupling
from nsmix.dynamics import IntegratorConfig, Stepper
from nsmix.ensemble import simulate_paths
from nsmix.experiments import (
    ExperimentConfig,
    difference_slopes,
    fit_mixing_rate,
    initial_pair,
    run_mixing,
    squeezing_threshold,
)
from nsmix.noise import CounterStream, NoiseConfig, build_spec
from nsmix.spectral import Grid, basis_for, truncated_poincare_epsilon
from nsmix.weights import (
    SANDWICH_LOWER,
    a2_ball_ratio,
    a2_characteristic_estimate,
    ball_integrals,
    closed_form_integrals,
    eval_psi,
    g_function,
    min_weight,
    saturation_radius,
)

T_LADDER = (2.0, 8.0, 32.0, 128.0)


class TestCriterion1Weights:
    def test_closed_forms_vs_quadrature(self, report):
        t0 = time.perf_counter()
        worst = 0.0
        for t in (2.0, 8.0, 32.0, 128.0):
            # two radii inside the saturation radius, three outside
            for R in saturation_radius(t) * np.array([0.1, 0.7, 1.2, 3.0, 20.0]):
                cm, cp = closed_form_integrals(t, R)
                qm, qp, _ = ball_integrals("min", t, (0.0, 0.0), R, quadrature_n=512)
                worst = max(worst, abs(qm / cm - 1), abs(qp / cp - 1))
        dt = time.perf_counter() - t0
        assert report("1a", worst <= 1e-6 and dt < 10, f"closed forms vs quadrature, 20 (t,R) points: max rel err {worst:.2e} (tol 1e-6), {dt:.1f}s")

    def test_g_small_radius(self, report):
        err = abs(float(g_function(1e-3)) - 1.0)
        assert report("1b", err <= 1e-3, f"|G(1e-3) - 1| = {err:.3e} (tol 1e-3)")

    def test_g_large_radius(self, report):
        # G(R) = 4/3 - 4/(3R) + O(R^-2), so at R = 1e3 the gap is about 1.33e-3
        err = abs(float(g_function(1e3)) - 4.0 / 3.0)
        assert report("1c", err <= 1e-3, f"|G(1e3) - 4/3| = {err:.4e} (tol 1e-3)")

    def test_central_ball_ratio(self, report):
        t0 = time.perf_counter()
        worst = 0.0
        for t in 2.0 ** np.arange(1, 8):
            R0 = saturation_radius(t)
            for R in R0 * np.array([1.0, 1.1, 1.5, 2.0, 4.0, 10.0, 100.0, 1e4]):
                worst = max(worst, a2_ball_ratio(t, (0.0, 0.0), R, "min", 256))
        dt = time.perf_counter() - t0
        assert report("1d", worst <= 2.0 and dt < 10, f"centred-ball A2 ratio past saturation, t in 2..128: max {worst:.4f} (bound 2), {dt:.1f}s")


class TestCriterion2PsiAndA2:
    def test_sandwich(self, report):
        t0 = time.perf_counter()
        g = Grid(512, 160.0)
        worst = -np.inf
        for t in T_LADDER:
            psi = eval_psi(t, g.radius)
            m = min_weight(t, g.radius)
            worst = max(worst, float(np.max(SANDWICH_LOWER * m - psi)), float(np.max(psi - m)))
        dt = time.perf_counter() - t0
        assert report("2a", worst <= 1e-12 and dt < 60, f"psi sandwich on 512^2: max violation {worst:.2e} (slack 1e-12), {dt:.1f}s")

    def test_a2_uniformity(self, report):
        t0 = time.perf_counter()
        sup = {t: a2_characteristic_estimate(t).value for t in T_LADDER}
        vals = np.array(list(sup.values()))
        spread = float(vals.max() / vals.min() - 1.0)
        dt = time.perf_counter() - t0
        detail = ", ".join(f"t={t:g}: {v:.4f}" for t, v in sup.items())
        assert report("2b", spread < 0.05 and dt < 60, f"A2 estimate spread {spread:.1%} (tol 5%) [{detail}], {dt:.1f}s")


class TestCriterion3Spectral:
    def test_identities(self, report):
        t0 = time.perf_counter()
        g = Grid(64, 8.0)
        rng = np.random.default_rng(0)
        raw = g.to_spectral(rng.standard_normal((100, 2, 64, 64))) * g.representable
        p = g.leray(raw)
        idem = float(np.max(np.abs(g.leray(p) - p)) / np.max(np.abs(p)))
        div = float(np.max(np.abs(g.k1 * p[:, 0] + g.k2 * p[:, 1])) / np.max(np.abs(p)))
        u = g.random_solenoidal(rng, 100, band="full")
        curl = float(np.max(np.abs(g.grad_norm(u) / g.norm(g.curl(u), vector=False) - 1)))
        pars = float(np.max(np.abs((g.to_physical(u) ** 2).sum(axis=(-3, -2, -1)) * g.dx**2 / g.inner(u, u) - 1)))
        ud = g.random_solenoidal(rng, 100)
        canc = float(np.max(np.abs(g.inner(g.nonlinear(ud), ud)) / (g.norm(ud) * g.sobolev_norm(ud, 1.0))))
        dt = time.perf_counter() - t0
        ok = idem <= 1e-14 and div <= 1e-13 and curl <= 1e-12 and canc <= 1e-10 and pars <= 1e-12 and dt < 10
        assert report("3", ok, f"Leray idempotence {idem:.1e}, divergence {div:.1e}, |grad u|=|curl u| {curl:.1e}, "
                               f"cancellation {canc:.1e}, Parseval {pars:.1e}; M=64, 100 fields, {dt:.1f}s")


class TestCriterion4Linear:
    def test_exact_decay(self, report):
        t0 = time.perf_counter()
        g = Grid(32, 8.0)
        spec = build_spec(g, NoiseConfig(J=16, b0=1.0, N_active=8, h_coeffs=[0.2, 0.1]))
        st = Stepper(g, spec, IntegratorConfig(dt=1e-2))
        rng = np.random.default_rng(1)
        z0 = g.random_solenoidal(rng, band="full")
        z = z0.copy()
        for _ in range(1000):
            z = st.step_linear_truncation(z)
        lam = st.cfg.a + st.cfg.nu * g.ksq
        lin = float(np.max(np.abs(z - np.exp(-lam * 10.0) * z0)) / np.max(np.abs(z0)))

        N = 8
        u = g.random_solenoidal(rng, 2) * 2.0
        v = g.random_solenoidal(rng, 2) * 2.0
        gh = u - v
        P0 = st.project(gh, N)
        s = CounterStream(1, "acceptance/decay", spec.J)
        for k in range(1000):
            noise = st.noise_field(spec.b * np.sqrt(st.cfg.dt) * s.normals(k, 0, 2, spec.J))
            Nu, Nv = st.nonlinear(u), st.nonlinear(v)
            gh = st.step_difference_g(gh, u, v, N, Nu, Nv)
            v = st.step_auxiliary_v(v, u, noise, N, Nu, Nv)
            u = st.step_primal(u, noise, Nu)
        target = np.exp(-st.cfg.a * 10.0) * P0
        low = float(np.max(g.norm(st.project(gh, N) - target) / g.norm(target)))
        dt = time.perf_counter() - t0
        ok = lin <= 1e-14 and low <= 1e-8 and dt < 10
        assert report("4", ok, f"linear truncation per-mode err {lin:.1e} (tol 1e-14), P_N g decay err {low:.1e} (tol 1e-8), 1000 steps, {dt:.1f}s")


@pytest.mark.slow
class TestCriterion5Energy:
    def test_energy_identities(self, report):
        t0 = time.perf_counter()
        # deterministic balance: d|u|^2/dt = -2a|u|^2 - 2nu|grad u|^2 + 2<h, u>
        g = Grid(64, 8.0)
        spec = build_spec(g, NoiseConfig(J=16, b0=1.0, N_active=8, h_coeffs=[0.5, 0.3]))
        dt = 1e-3
        st = Stepper(g, spec, IntegratorConfig(dt=dt))
        u = g.random_solenoidal(np.random.default_rng(1), 1)[0] * 3.0

        def rate(x):
            return 2 * st.cfg.a * g.inner(x, x) + 2 * st.cfg.nu * g.grad_norm(x) ** 2 - 2 * g.inner(st.h, x)

        e0 = g.inner(u, u)
        n = 1000
        acc = 0.5 * rate(u)
        for k in range(n):
            u = st.step_primal(u, 0.0)
            acc += rate(u) if k < n - 1 else 0.5 * rate(u)
        balance = float(abs(g.inner(u, u) - e0 + acc * dt) / e0 / (n * dt))

        # Ito drift at u0 = 0: d/dt E|u|^2 = B0
        cfg = ExperimentConfig()
        cfg.integrator.dt = 0.01
        sto = cfg.build_stepper()
        gs, J = sto.grid, sto.spec.J
        x = gs.zeros(1000)
        s = CounterStream(5, "acceptance/ito", J)
        ts, m2 = [], []
        for k in range(10):
            x = sto.step_primal(x, sto.noise_field(sto.spec.b * np.sqrt(0.01) * s.normals(k, 0, 1000, J)))
            ts.append((k + 1) * 0.01)
            m2.append(float(np.mean(gs.norm(x) ** 2)))
        ts = np.array(ts)
        coef, *_ = np.linalg.lstsq(np.stack([ts, ts**2], axis=1), np.array(m2), rcond=None)
        drift_err = abs(coef[0] / sto.spec.B0 - 1)

        # mean-square dissipativity: E|u(T)|^2 <= e^{-aT}|u0|^2 + C with C fitted at u0 = 0
        T = 2.0
        direction = gs.random_solenoidal(np.random.default_rng(2), 1)
        direction /= gs.norm(direction)[:, None, None, None]
        means = {}
        for r0 in (0.0, 5.0, 10.0):
            u0 = np.repeat(direction * r0, 200, axis=0)
            res = simulate_paths(sto, u0, CounterStream(6, "acceptance/me1", J), n_steps=int(T / 0.01), with_ledger=False)
            means[r0] = float(np.mean(gs.norm(res.final) ** 2))
        C = means[0.0]
        env = {r0: np.exp(-sto.cfg.a * T) * r0**2 + C for r0 in means}
        envelope_ok = all(means[r0] <= 1.1 * env[r0] for r0 in means)
        runtime = time.perf_counter() - t0
        ok = balance <= 5 * dt and drift_err <= 0.1 and envelope_ok and runtime < 600
        ladder = ", ".join(f"|u0|={r0:g}: {means[r0]:.2f} vs {env[r0]:.2f}" for r0 in means)
        assert report("5", ok, f"energy residual {balance:.2e}/unit time (tol {5 * dt:.0e}); Ito drift {coef[0]:.3f} vs B0 {sto.spec.B0:.3f} "
                               f"({drift_err:.1%}); E|u(T)|^2 vs envelope [{ladder}], C={C:.2f}; {runtime:.0f}s")


@pytest.mark.slow
class TestCriterion6FoiasProdi:
    def test_epsilon_ladder(self, report):
        t0 = time.perf_counter()
        M, L = 512, 4.4
        g = Grid(M, L)
        Ns = (16384, 36864, 65536)
        eps = [truncated_poincare_epsilon(g, N, L / 4, tol=1e-8, max_iter=3000, method="lanczos") for N in Ns]
        dt = time.perf_counter() - t0
        monotone = all(b <= a for a, b in zip(eps, eps[1:]))
        below = any(e < 0.1 for e in eps) and max(Ns) <= M * M // 4
        detail = ", ".join(f"N={N}: {e:.4f}" for N, e in zip(Ns, eps))
        assert report("6a", monotone and below and dt < 600, f"epsilon(N) at M=512, L=4.4, A=L/4 [{detail}], {dt:.0f}s")

    def test_difference_slopes(self, report):
        t0 = time.perf_counter()
        cfg = ExperimentConfig()
        cfg.grid.M, cfg.grid.L = 32, float(np.pi)
        cfg.integrator.nu, cfg.integrator.a, cfg.integrator.dt = 0.005, 0.05, 0.005
        cfg.noise.h_coeffs = [0.1] * 8
        cfg.noise.b0 = 0.3
        cfg.ensemble.init_norm = 2.0
        st = cfg.build_stepper()
        g, J = st.grid, st.spec.J
        u0, _ = initial_pair(cfg, g, 20)
        spun = simulate_paths(st, u0, CounterStream(1, "spin", J), n_steps=8000, with_ledger=False).final
        pert = g.random_solenoidal(np.random.default_rng(3), 20) * 0.5
        slopes = difference_slopes(st, spun, spun + pert, [0, 2, 4, 8, 16], 5.0)
        target = -st.cfg.a / 2
        N_star = squeezing_threshold(slopes, target)
        dt = time.perf_counter() - t0
        worst = ", ".join(f"N={N}: {np.max(s):+.3f}" for N, s in slopes.items())
        ok = N_star is not None and N_star < max(slopes) and dt < 600
        assert report("6b", ok, f"worst per-pair slope of log|u-v| over 20 pairs [{worst}] vs -a/2 = {target}; threshold N*={N_star}; {dt:.0f}s")


@pytest.mark.slow
class TestCriterion7Coupling:
    def test_maximal_coupling_frequency(self, report):
        rng = np.random.default_rng(11)
        n = 100_000
        rows = []
        ok = True
        for dmu, sigma in ((0.3, 1.0), (1.0, 0.5), (0.2, 0.05)):
            _, _, agreed = maximal_couple_step_rng(np.zeros((n, 1)), np.full((n, 1), dmu), np.array([sigma]), rng)
            p = 2 * ndtr(dmu / (2 * sigma)) - 1
            z = ((1 - agreed.mean()) - p) / np.sqrt(p * (1 - p) / n)
            ok &= abs(z) <= 3
            rows.append(f"dmu/sigma={dmu / sigma:g}: z={z:+.2f}")
        assert report("7a", ok, f"disagreement frequency at 1e5 trials [{', '.join(rows)}] (|z| <= 3)")

    def test_marginal_preservation(self, report):
        t0 = time.perf_counter()
        cfg = ExperimentConfig()
        cfg.coupling.d = 0.5
        cfg.coupling.n_blocks = 2
        st = cfg.build_stepper()
        g, J = st.grid, st.spec.J
        n = 500
        u0, up0 = initial_pair(cfg, g, n)
        T = cfg.coupling.n_blocks * cfg.coupling.T_block
        run = run_coupling(st, u0, up0, cfg.coupling_config(), seed=21, snapshot_times=[T])
        coupled_up = run.snapshots[T][1]
        plain = simulate_paths(st, up0, CounterStream(22, "plain", J), n_steps=int(round(T / st.cfg.dt)), with_ledger=False).final
        basis = basis_for(g)

        def stats(x):
            return np.column_stack([g.norm(x) ** 2, basis.coords(x, 4)])

        a, b = stats(coupled_up), stats(plain)
        z = (a.mean(0) - b.mean(0)) / np.sqrt(a.var(0, ddof=1) / n + b.var(0, ddof=1) / n)
        dt = time.perf_counter() - t0
        frac = float(run.coupled[:, -1].mean())
        assert report("7b", np.all(np.abs(z) <= 3), f"coupled u' vs plain solver, 500 members, |u|^2 and 4 low modes: z = "
                                                   f"{np.array2string(z, precision=2)}; coupled fraction {frac:.2f}; {dt:.0f}s")

    def test_novikov_scaling(self, report):
        t0 = time.perf_counter()
        cfg = ExperimentConfig()
        st = cfg.build_stepper()
        cc = cfg.coupling_config()
        cc.n_blocks = 1
        ds = np.array([0.1, 0.05, 0.025])
        nov = []
        for d in ds:
            cfg.coupling.d = float(d)
            u0, up0 = initial_pair(cfg, st.grid, 50)
            nov.append(run_coupling(st, u0, up0, cc, seed=0).novikov[:, 0].mean())
        slope = np.polyfit(np.log(ds), np.log(nov), 1)[0]
        dt = time.perf_counter() - t0
        assert report("7c", abs(slope - 2) <= 0.3, f"first-block Novikov integral vs d on {ds.tolist()}: log-log slope {slope:.3f} (2 +- 0.3); {dt:.0f}s")


@pytest.mark.slow
class TestCriterion8Mixing:
    def test_mixing(self, report, tmp_path):
        t0 = time.perf_counter()
        cfg = ExperimentConfig()
        cfg.ensemble.n_pairs = 500
        cfg.coupling.d = 4.0
        cfg.coupling.K = cfg.coupling.L_rate = 200.0
        cfg.coupling.rho = 1000.0
        cfg.mixing.t_ladder = [0.0, 1.0, 2.0, 4.0, 8.0]
        out = run_mixing(cfg, tmp_path)
        D, reps, fit = out["D"], out["reps"], out["fit"]
        diffs = reps[:, :-1] - reps[:, 1:]
        z = (D[:-1] - D[1:]) / diffs.std(axis=0, ddof=1)
        lo, hi = fit.ci
        tl = np.array(cfg.mixing.t_ladder)
        synth = abs(fit_mixing_rate(tl, (1 + tl) ** -3.0).q_hat - 3.0)
        dt = time.perf_counter() - t0
        ok = np.all(z > 3) and fit.q_hat > 0 and lo > 0 and synth <= 1e-6 and dt < 7200
        assert report("8", ok, f"D = {np.array2string(D, precision=4)}, step z = {np.array2string(z, precision=1)}; "
                               f"q = {fit.q_hat:.2f}, CI ({lo:.2f}, {hi:.2f}); synthetic q err {synth:.1e}; {dt:.0f}s")


class TestCriterion9Determinism:
    def test_verify_all_twice(self, report, tmp_path):
        codes = [main(["verify-all", "--out-dir", str(tmp_path / name)]) for name in ("a", "b")]
        same = (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        assert report("9", same and codes == [EXIT_OK, EXIT_OK], f"verify-all exit codes {codes}, manifests byte-identical: {same}")
