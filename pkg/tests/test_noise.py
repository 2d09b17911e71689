import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from nsmix.noise import (
    CounterStream,
    NoiseConfig,
    WienerIncrement,
    build_spec,
    forcing_conditions,
    girsanov_log_weight,
    girsanov_shift,
    girsanov_unshift,
    noise_sums,
    sample_increment,
)
from nsmix.spectral import Grid

# sum_{j <= 100} j^-4, summed exactly in rationals once
ZETA4_PARTIAL_100 = 1.0823229053444732


@pytest.fixture(scope="module")
def grid():
    return Grid(32, 4.0)


@pytest.fixture(scope="module")
def spec(grid):
    return build_spec(grid, NoiseConfig(J=12, s=2.0, b0=1.5, N_active=6, seed=3))


class TestBuildSpec:
    def test_single_mode_sum(self, grid):
        s = build_spec(grid, NoiseConfig(J=1, b0=1.0, N_active=1))
        assert s.B0 == 1.0

    def test_partial_zeta_sum(self, grid):
        s = build_spec(grid, NoiseConfig(J=100, s=2.0, b0=1.0, N_active=4))
        assert s.B0 == pytest.approx(ZETA4_PARTIAL_100, rel=1e-12)
        assert abs(s.B0 - 1.082320) < 5e-6

    def test_sums_match_independent_accumulation(self, grid, spec):
        basis = spec.basis
        b = spec.b
        B1 = 0.0
        for j in range(spec.J):
            e = basis.field(j)
            B1 += b[j] ** 2 * grid.sobolev_norm(e, 1.0) ** 2
        assert spec.B1 == pytest.approx(B1, rel=1e-12)
        assert all(np.isfinite((spec.B0, spec.B1, spec.Bphi)))
        assert noise_sums(grid, basis, b) == (spec.B0, spec.B1, spec.Bphi)

    def test_coefficients_nonzero_on_active_modes(self, spec):
        assert np.all(spec.b[: spec.N_active] != 0)

    def test_forcing_in_active_span(self, grid):
        s = build_spec(grid, NoiseConfig(N_active=4, h_coeffs=[0.1]))
        assert np.allclose(s.h_hat, 0.1 * s.basis.field(0))

    @pytest.mark.parametrize(
        "kw",
        [
            {"s": 0.5},
            {"N_active": 17, "J": 16},
            {"J": 0},
            {"b0": 0.0},
            {"N_active": 2, "h_coeffs": [0.0, 0.0, 1.0]},
        ],
    )
    def test_rejections(self, grid, kw):
        with pytest.raises(ValueError):
            build_spec(grid, NoiseConfig(**kw))

    def test_relaxed_forcing_allowed(self, grid):
        s = build_spec(grid, NoiseConfig(N_active=2, h_coeffs=[0.0, 0.0, 1.0], relaxed_forcing=True))
        assert np.allclose(s.h_hat, s.basis.field(2))
        out = forcing_conditions(grid, s.basis, np.array([0.0, 0.0, 1.0]))
        assert all(np.isfinite(v) for v in out.values())

    def test_weak_decay_warns(self, grid, caplog):
        build_spec(grid, NoiseConfig(s=0.9))
        assert "diverges" in caplog.text

    def test_config_round_trip(self):
        c = NoiseConfig(J=5, s=3.0, b0=0.25, N_active=2, seed=11, h_coeffs=[0.1, -0.2])
        assert NoiseConfig.from_json(c.to_json()) == c

    def test_basis_orthonormal(self, grid, spec):
        E = spec.basis.synth(np.eye(spec.J))
        gram = grid.inner(E[:, None], E[None, :])
        assert np.max(np.abs(gram - np.eye(spec.J))) <= 1e-12


class TestCounterStream:
    def test_determinism(self):
        a = CounterStream(5, "u", 8).normals(7, 0, 3, 8)
        b = CounterStream(5, "u", 8).normals(7, 0, 3, 8)
        assert np.array_equal(a, b)

    def test_random_access_matches_batch(self):
        s = CounterStream(5, "u", 6)
        batch = s.normals(2, 0, 10, 6)
        assert np.array_equal(s.normals(2, 4, 3, 6), batch[4:7])

    def test_labels_seeds_steps_differ(self):
        base = CounterStream(1, "u", 4).raw(0, 0, 1)
        assert not np.array_equal(base, CounterStream(1, "v", 4).raw(0, 0, 1))
        assert not np.array_equal(base, CounterStream(2, "u", 4).raw(0, 0, 1))
        assert not np.array_equal(base, CounterStream(1, "u", 4).raw(1, 0, 1))

    def test_width_rounded_and_checked(self):
        s = CounterStream(0, "x", 5)
        assert s.width == 8
        with pytest.raises(ValueError):
            s.normals(0, 0, 1, 9)
        with pytest.raises(ValueError):
            s.uniforms(0, 0, 1, 4, offset=5)
        with pytest.raises(ValueError):
            CounterStream(0, "x", 0)

    def test_counter_exhaustion_detected(self):
        s = CounterStream(0, "x", 4)
        with pytest.raises(OverflowError):
            s.raw(2**64, 0, 1)
        with pytest.raises(OverflowError):
            s.raw(0, 2**64 - 1, 1)

    def test_uniforms_open_interval(self):
        u = CounterStream(0, "x", 64).uniforms(0, 0, 1000, 64)
        assert u.min() > 0 and u.max() < 1
        assert stats.kstest(u.ravel(), "uniform").pvalue > 1e-4

    def test_normals_distribution(self):
        z = CounterStream(9, "n", 16).normals(0, 0, 5000, 16).ravel()
        assert stats.kstest(z, "norm").pvalue > 1e-4

    def test_sequential_generator_reproducible(self):
        s = CounterStream(0, "r", 4)
        assert s.sequential(3, 2).random() == s.sequential(3, 2).random()
        assert s.sequential(3, 2).random() != s.sequential(3, 1).random()


class TestIncrements:
    def test_zero_dt_gives_zero(self, spec):
        inc = sample_increment(spec, 0.0, CounterStream(0, "u", spec.J), 0)
        assert np.all(inc.dW(spec) == 0) and np.all(inc.field(spec) == 0)

    def test_same_position_identical(self, spec):
        s = CounterStream(spec.seed, "u", spec.J)
        a = sample_increment(spec, 0.01, s, 4, count=2)
        b = sample_increment(spec, 0.01, s, 4, count=2)
        assert np.array_equal(a.xi, b.xi)

    def test_field_divergence_free(self, grid, spec):
        inc = sample_increment(spec, 0.01, CounterStream(0, "u", spec.J), 0, count=5)
        f = inc.field(spec)
        div = grid.k1 * f[:, 0] + grid.k2 * f[:, 1]
        assert np.max(np.abs(div)) < 1e-15

    def test_variance_chi_square(self, spec):
        n, dt = 100_000, 0.02
        inc = sample_increment(spec, dt, CounterStream(1, "var", spec.J), 0, count=n)
        x = inc.dW(spec)[:, 0]
        s2 = np.sum(x * x) / (spec.b[0] ** 2 * dt)
        # sum of n squared standard normals has mean n and sd sqrt(2n)
        assert abs(s2 - n) < 3 * np.sqrt(2 * n)

    def test_disjoint_steps_uncorrelated(self, spec):
        s = CounterStream(2, "ind", spec.J)
        a = sample_increment(spec, 1.0, s, 0, count=20000).xi[:, 0]
        b = sample_increment(spec, 1.0, s, 1, count=20000).xi[:, 0]
        assert abs(np.corrcoef(a, b)[0, 1]) < 3 / np.sqrt(20000)

    def test_quadratic_variation(self, grid, spec):
        # sum over 10^4 steps of ||dW||^2 approximates B0 * t
        dt, steps = 1e-3, 10_000
        inc = sample_increment(spec, dt, CounterStream(4, "qv", spec.J), 0, count=steps)
        qv = float(np.sum(inc.dW(spec) ** 2))
        assert qv == pytest.approx(spec.B0 * dt * steps, rel=0.05)
        fields = inc.field(spec)[:50]
        assert np.allclose(grid.norm(fields) ** 2, np.sum(inc.dW(spec)[:50] ** 2, axis=-1), rtol=1e-12)


class TestGirsanov:
    def test_zero_drift_is_identity(self, spec):
        inc = sample_increment(spec, 0.01, CounterStream(0, "g", spec.J), 0)
        out = girsanov_shift(inc, np.zeros(spec.N_active), spec)
        assert np.array_equal(out.value(), inc.value())

    def test_shift_adds_drift_dt(self, spec):
        inc = sample_increment(spec, 0.01, CounterStream(0, "g", spec.J), 0)
        A = np.arange(1.0, 4.0)
        out = girsanov_shift(inc, A, spec)
        assert np.allclose(out.dW(spec)[0, :3] - inc.dW(spec)[0, :3], A * 0.01, rtol=1e-12)
        assert np.array_equal(out.dW(spec)[0, 3:], inc.dW(spec)[0, 3:])

    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(0, 2**32),
        drift=st.lists(st.floats(-50, 50), min_size=1, max_size=6),
        dt=st.floats(1e-5, 1.0),
    )
    def test_shift_unshift_bit_identical(self, spec, seed, drift, dt):
        inc = sample_increment(spec, dt, CounterStream(seed, "g", spec.J), 0)
        back = girsanov_unshift(girsanov_shift(inc, drift, spec), drift, spec)
        assert back.shift is None and back.xi is inc.xi
        assert np.array_equal(back.value(), inc.value())

    def test_degenerate_direction_rejected(self, spec):
        drift = np.zeros(spec.J + 2)
        drift[-1] = 1.0
        inc = sample_increment(spec, 0.01, CounterStream(0, "g", spec.J), 0)
        with pytest.raises(ValueError):
            girsanov_shift(inc, drift, spec)

    def test_trailing_zero_drift_allowed(self, spec):
        inc = sample_increment(spec, 0.01, CounterStream(0, "g", spec.J), 0)
        out = girsanov_shift(inc, np.zeros(spec.J + 3), spec)
        assert np.array_equal(out.value(), inc.value())

    def test_log_weight_equals_density_ratio(self, spec):
        dt, steps, n = 0.01, 40, 4
        rng = np.random.default_rng(0)
        A = rng.standard_normal((steps, n))
        inc = sample_increment(spec, dt, CounterStream(8, "lw", spec.J), 0, count=steps)
        dW = inc.dW(spec)
        sd = spec.b[:n] * np.sqrt(dt)
        oracle = np.sum(stats.norm.logpdf(dW[:, :n], loc=A * dt, scale=sd) - stats.norm.logpdf(dW[:, :n], scale=sd))
        assert girsanov_log_weight(spec, dW, A, dt) == pytest.approx(oracle, abs=1e-10)

    def test_increment_value_without_shift(self):
        inc = WienerIncrement(np.array([1.0, 2.0]), 0.5)
        assert inc.value() is inc.xi
