"""Experiment configuration, ensembles, observables, mixing fits and manifests."""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np
from scipy import stats

from .coupling import CouplingConfig, run_coupling, write_block_csv
from .dynamics import IntegratorConfig, Stepper
from .ensemble import simulate_paths, write_trajectory_csv
from .ledger import StoppingRule, check_stop, ledger_rows, write_ledger_csv
from .noise import CounterStream, NoiseConfig, build_spec
from .spectral import Grid, SpectralField, set_fft_workers, write_snapshot


# ---------------------------------------------------------------------------
# configuration


@dataclass
class GridConfig:
    M: int = 32
    L: float = 8.0
    dealias_fraction: float = 2.0 / 3.0


@dataclass
class CouplingSettings:
    N: int = 8
    T_block: float = 2.0
    n_blocks: int = 4
    d: float = 4.0
    K: float = 2.0e4
    L_rate: float = 2.0e4
    rho: float = 5.0e4
    C_script: float = 100.0


@dataclass
class EnsembleSettings:
    n_members: int = 64
    n_pairs: int = 64
    init_norm: float = 2.0
    init_seed: int = 7


@dataclass
class OutputSettings:
    directory: str = "out"


@dataclass
class MixingSettings:
    t_ladder: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0])
    n_probes: int = 16
    n_bootstrap: int = 200
    recurrence_d: float = 3.0


@dataclass
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(J=16, s=2.0, b0=3.0, N_active=8, seed=0))
    integrator: IntegratorConfig = field(default_factory=lambda: IntegratorConfig(T_horizon=4.0))
    coupling: CouplingSettings = field(default_factory=CouplingSettings)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    mixing: MixingSettings = field(default_factory=MixingSettings)
    outputs: OutputSettings = field(default_factory=OutputSettings)
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # builders
    def build_grid(self) -> Grid:
        g = self.grid
        return Grid(g.M, g.L, g.dealias_fraction)

    def build_stepper(self) -> Stepper:
        grid = self.build_grid()
        return Stepper(grid, build_spec(grid, self.noise), self.integrator)

    def coupling_config(self) -> CouplingConfig:
        c = self.coupling
        return CouplingConfig(N=c.N, T_block=c.T_block, n_blocks=c.n_blocks, rule=StoppingRule(c.K, c.L_rate, c.rho, c.C_script))


def _from_dict(cls, d):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in known:
            raise ValueError(f"unknown config key {k!r} for {cls.__name__}")
        sub = _nested_type(cls, k)
        kwargs[k] = _from_dict(sub, v) if sub is not None and isinstance(v, dict) else v
    return cls(**kwargs)


def _nested_type(cls, name):
    probe = cls()
    val = getattr(probe, name)
    return type(val) if is_dataclass(val) else None


# ---------------------------------------------------------------------------
# initial data


def initial_pair(cfg: ExperimentConfig, grid: Grid, n: int):
    """Deterministic initial data u0 and u0' = u0 + d * direction, repeated n times."""
    rng = np.random.default_rng(cfg.ensemble.init_seed)
    base = grid.random_solenoidal(rng, 1) * cfg.ensemble.init_norm
    direction = grid.random_solenoidal(rng, 1)
    u0 = np.repeat(base, n, axis=0)
    up0 = np.repeat(base + cfg.coupling.d * direction, n, axis=0)
    return u0, up0


# ---------------------------------------------------------------------------
# observables and distances


class ObservableDictionary:
    """Bounded Lipschitz test functions with sup norm plus Lipschitz constant <= 1.

    Probe functions tanh(c <u, g_i>) / (1 + c) with unit-norm probes g_i in the
    span of the first ``J`` basis elements, plus capped low-mode energies
    min(|P_m u|^2, cap) / (cap + 2 sqrt(cap)).
    """

    def __init__(self, grid: Grid, J: int, n_probes: int = 16, seed: int = 0, sensitivity: float = 1.0,
                 energy_modes=(2, 4, 8), cap: float = 4.0):
        from .spectral import basis_for

        self.basis = basis_for(grid)
        self.J = J
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((n_probes, J))
        self.probes = g / np.linalg.norm(g, axis=1, keepdims=True)
        self.c = float(sensitivity)
        self.energy_modes = tuple(m for m in energy_modes if m <= J)
        self.cap = float(cap)

    @property
    def size(self) -> int:
        return self.probes.shape[0] + len(self.energy_modes)

    def lipschitz_norms(self) -> np.ndarray:
        """Upper bounds on sup|f| + Lip(f) per observable."""
        probe = (1.0 + self.c * np.linalg.norm(self.probes, axis=1)) / (1.0 + self.c)
        cap = np.ones(len(self.energy_modes))
        return np.concatenate([probe, cap])

    def evaluate(self, uh: np.ndarray) -> np.ndarray:
        coords = self.basis.coords(uh, self.J)
        vals = [np.tanh(self.c * coords @ self.probes.T) / (1.0 + self.c)]
        norm = self.cap + 2.0 * np.sqrt(self.cap)
        for m in self.energy_modes:
            e = (coords[..., :m] ** 2).sum(axis=-1)
            vals.append(np.minimum(e, self.cap)[..., None] / norm)
        return np.concatenate(vals, axis=-1)


def estimate_dual_lipschitz(vals_a: np.ndarray, vals_b: np.ndarray, n_boot: int = 200, seed: int = 0, paired: bool = True):
    """Lower bound max_i |mean f_i(A) - mean f_i(B)| on the dual-Lipschitz distance.

    Returns (estimate, bootstrap standard error).  With ``paired`` the two
    samples are resampled jointly (coupled pairs).
    """
    vals_a, vals_b = np.asarray(vals_a), np.asarray(vals_b)
    if vals_a.shape[0] == 0 or vals_b.shape[0] == 0:
        raise ValueError("empty ensemble")
    est = float(np.max(np.abs(vals_a.mean(axis=0) - vals_b.mean(axis=0))))
    if n_boot <= 0:
        return est, np.nan
    rng = np.random.default_rng(seed)
    na, nb = vals_a.shape[0], vals_b.shape[0]
    reps = np.empty(n_boot)
    for r in range(n_boot):
        ia = rng.integers(0, na, na)
        ib = ia if paired and na == nb else rng.integers(0, nb, nb)
        reps[r] = np.max(np.abs(vals_a[ia].mean(axis=0) - vals_b[ib].mean(axis=0)))
    return est, float(reps.std(ddof=1))


def distance_series(vals_a: np.ndarray, vals_b: np.ndarray, n_boot: int = 200, seed: int = 0):
    """Distances and bootstrap replicates over a time axis.

    ``vals_*`` have shape (members, times, observables).  Members are
    resampled jointly across times so that replicates of the whole series are
    consistent.  Returns (estimates (times,), replicates (n_boot, times)).
    """
    diff_mean = np.abs(vals_a.mean(axis=0) - vals_b.mean(axis=0)).max(axis=-1)
    rng = np.random.default_rng(seed)
    n = vals_a.shape[0]
    reps = np.empty((n_boot, vals_a.shape[1]))
    for r in range(n_boot):
        idx = rng.integers(0, n, n)
        reps[r] = np.abs(vals_a[idx].mean(axis=0) - vals_b[idx].mean(axis=0)).max(axis=-1)
    return diff_mean, reps


@dataclass
class MixingFit:
    q_hat: float
    q_se: float
    intercept: float
    rate_exp: float
    aic_power: float
    aic_exp: float
    preferred: str
    used: np.ndarray
    ci: tuple = (np.nan, np.nan)


def _ols(x, y):
    A = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    rss = float(resid @ resid)
    n = x.size
    if n > 2:
        s2 = rss / (n - 2)
        cov = s2 * np.linalg.inv(A.T @ A)
        se = float(np.sqrt(cov[1, 1]))
    else:
        se = np.nan
    return coef, rss, se


def _aic(rss, n, k=2):
    return n * np.log(max(rss / n, 1e-300)) + 2 * k


def fit_mixing_rate(times, D, se=None) -> MixingFit:
    """Fit log D = c - q log(1 + t) and log D = c - r t; compare by AIC.

    Needs at least four points.  Points with D <= 0, or D <= 2 se when ``se``
    is given, are censored and excluded; ``used`` flags the retained ones.
    """
    t = np.asarray(times, dtype=float)
    D = np.asarray(D, dtype=float)
    if t.size < 4 or t.shape != D.shape:
        raise ValueError("need at least four (t, D) points of matching shape")
    used = D > 0
    if se is not None:
        used &= D > 2.0 * np.asarray(se)
    if used.sum() < 2:
        raise ValueError("fewer than two uncensored points to fit")
    x, y = t[used], np.log(D[used])
    cp, rss_p, se_p = _ols(np.log1p(x), y)
    ce, rss_e, _ = _ols(x, y)
    n = int(used.sum())
    aic_p, aic_e = _aic(rss_p, n), _aic(rss_e, n)
    return MixingFit(
        q_hat=float(-cp[1]),
        q_se=se_p,
        intercept=float(cp[0]),
        rate_exp=float(-ce[1]),
        aic_power=float(aic_p),
        aic_exp=float(aic_e),
        preferred="power" if aic_p <= aic_e else "exponential",
        used=used,
    )


def bootstrap_rate_ci(times, reps: np.ndarray, level: float = 0.95, se=None):
    """Percentile interval for q_hat over bootstrap replicates of the series."""
    qs = []
    for r in reps:
        try:
            qs.append(fit_mixing_rate(times, r, se).q_hat)
        except ValueError:
            continue
    qs = np.array(qs)
    lo, hi = np.quantile(qs, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi), qs


# ---------------------------------------------------------------------------
# irreducibility


@dataclass
class IrreducibilityResult:
    p_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def worst(self) -> float:
        return float(self.p_hat.min())


def irreducibility_probe(stepper: Stepper, R: float, d: float, T: float, n_dirs: int = 10,
                         n_members: int = 64, seed: int = 0, directions=None) -> IrreducibilityResult:
    """Empirical P(|u(T)| <= d) from initial data on the sphere |u0| = R, per direction.

    ``directions`` (n, 2, M, M//2 + 1) overrides the random unit directions.
    Intervals are 95% Wilson score intervals.
    """
    grid = stepper.grid
    if directions is None:
        directions = grid.random_solenoidal(np.random.default_rng(seed), n_dirs)
    dirs = directions / grid.norm(directions)[:, None, None, None] * R
    n_steps = int(round(T / stepper.cfg.dt))
    p, lo, hi = [], [], []
    for i in range(dirs.shape[0]):
        u0 = np.repeat(dirs[i : i + 1], n_members, axis=0)
        if n_steps:
            res = simulate_paths(stepper, u0, CounterStream(seed, f"irreducibility/{i}", stepper.spec.J),
                                 n_steps=n_steps, with_ledger=False)
            final = res.final
        else:
            final = u0
        k = int((grid.norm(final) <= d).sum())
        ci = stats.binomtest(k, n_members).proportion_ci(confidence_level=0.95, method="wilson")
        p.append(k / n_members)
        lo.append(ci.low)
        hi.append(ci.high)
    return IrreducibilityResult(np.array(p), np.array(lo), np.array(hi))


# ---------------------------------------------------------------------------
# squeezing of the coupled difference


def difference_slopes(stepper: Stepper, u0: np.ndarray, v0: np.ndarray, N_list, T: float,
                      seed: int = 0, sample_every: int = 10) -> dict:
    """Least-squares slope of log|u - v| over [0, T] per pair, for each N.

    v follows the auxiliary equation driven by the same noise as u, so its
    first N modes are pulled onto u at rate a and the rest evolve freely.
    A slope of -a or below means the high modes are squeezed as well.
    """
    grid = stepper.grid
    J = stepper.spec.J
    B = u0.shape[0]
    dt = stepper.cfg.dt
    n_steps = int(round(T / dt))
    out = {}
    for N in N_list:
        u, v = u0.copy(), v0.copy()
        g = u - v
        stream = CounterStream(seed, "difference", J)
        ts, logs = [], []
        for n in range(n_steps):
            dW = stepper.spec.b * np.sqrt(dt) * stream.normals(n, 0, B, J)
            Nu, Nv = stepper.nonlinear(u), stepper.nonlinear(v)
            noise = stepper.noise_field(dW)
            g = stepper.step_difference_g(g, u, v, N, Nu, Nv)
            v = stepper.step_auxiliary_v(v, u, noise, N, Nu, Nv)
            u = stepper.step_primal(u, noise, Nu)
            if (n + 1) % sample_every == 0:
                ts.append((n + 1) * dt)
                logs.append(np.log(grid.norm(g)))
        out[int(N)] = np.polyfit(np.array(ts), np.array(logs), 1)[0]
    return out


def squeezing_threshold(slopes: dict, target: float):
    """Smallest N whose worst per-pair slope is <= target for it and every larger N tried."""
    Ns = sorted(slopes)
    ok = [float(np.max(slopes[N])) <= target for N in Ns]
    for i, N in enumerate(Ns):
        if all(ok[i:]):
            return N
    return None


# ---------------------------------------------------------------------------
# outputs and manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, cfg: ExperimentConfig, files: list[str], extra: dict | None = None) -> str:
    entries = {name: sha256_file(os.path.join(out_dir, name)) for name in sorted(files)}
    man = {"config_hash": cfg.content_hash(), "files": entries}
    if extra:
        man.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(man, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def write_json(path, obj) -> None:
    """Strict JSON; non-finite floats are written as the strings "inf", "-inf", "nan"."""
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer, int)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        x = float(o)
        if np.isfinite(x):
            return x
        return "nan" if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return o


def run_ensemble(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> dict:
    """Simulate the configured ensemble from u0 and write records, ledger and manifest."""
    os.makedirs(out_dir, exist_ok=True)
    set_fft_workers(cfg.threads)
    st = cfg.build_stepper()
    grid = st.grid
    seed = cfg.noise.seed if seed is None else seed
    u0, _ = initial_pair(cfg, grid, cfg.ensemble.n_members)
    res = simulate_paths(st, u0, CounterStream(seed, "simulate", st.spec.J), on_blowup="mask")
    files = []
    write_trajectory_csv(os.path.join(out_dir, "trajectory_0.csv"), res, 0)
    files.append("trajectory_0.csv")
    rows = ledger_rows(res.ledger)
    write_ledger_csv(os.path.join(out_dir, "ledger_0.csv"), rows, 0)
    files.append("ledger_0.csv")
    rule = cfg.coupling_config().rule
    u0n = float(grid.norm(u0[0]))
    scalar_rows = [{k: float(np.asarray(v)[0]) if np.ndim(v) else float(v) for k, v in r.items()} for r in rows]
    stop = check_stop(scalar_rows, rule, u0n)
    write_json(os.path.join(out_dir, "stopping_0.json"), stop.to_dict())
    files.append("stopping_0.json")
    with warnings.catch_warnings():
        # a time row where every member has blown up averages to nan on purpose
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_rec = np.nanmean(res.records, axis=1)
        mean_sq = np.nanmean(res.records[..., 0] ** 2, axis=1)
    summary = {
        "times": res.times,
        "mean_L2sq": mean_sq,
        "mean_records": mean_rec,
        "blown_members": np.flatnonzero(res.blowup_step >= 0),
        "blowup_step": res.blowup_step,
    }
    write_json(os.path.join(out_dir, "ensemble_summary.json"), summary)
    files.append("ensemble_summary.json")
    write_snapshot(os.path.join(out_dir, "final_0.bin"), SpectralField(grid, res.final[0]))
    files.append("final_0.bin")
    write_manifest(out_dir, cfg, files, {"seed": seed, "kind": "simulate"})
    return {"result": res, "files": files, "stop": stop}


def run_couple(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    set_fft_workers(cfg.threads)
    st = cfg.build_stepper()
    seed = cfg.noise.seed if seed is None else seed
    u0, up0 = initial_pair(cfg, st.grid, cfg.ensemble.n_pairs)
    run = run_coupling(st, u0, up0, cfg.coupling_config(), seed)
    write_block_csv(os.path.join(out_dir, "blocks_0.csv"), run.outcomes(0))
    summary = {
        "coupled_fraction": run.coupled.mean(axis=0),
        "tv_estimate_mean": run.tv_estimate.mean(axis=0),
        "novikov_mean": run.novikov.mean(axis=0),
        "sep_norm_mean": run.sep_norm.mean(axis=0),
        "sigma1_finite_fraction": float(np.isfinite(run.sigma1).mean()),
        "tau_tilde_finite_fraction": float(np.isfinite(run.tau_tilde).mean()),
    }
    write_json(os.path.join(out_dir, "coupling_summary.json"), summary)
    files = ["blocks_0.csv", "coupling_summary.json"]
    write_manifest(out_dir, cfg, files, {"seed": seed, "kind": "couple"})
    return {"run": run, "files": files, "summary": summary}


def run_recurrence(cfg: ExperimentConfig, out_dir, seed: int | None = None, delta: float = 0.1) -> dict:
    """Block-sampled recurrence times of the coupled pair to the d-ball."""
    from .ledger import recurrence_time

    os.makedirs(out_dir, exist_ok=True)
    set_fft_workers(cfg.threads)
    st = cfg.build_stepper()
    seed = cfg.noise.seed if seed is None else seed
    u0, up0 = initial_pair(cfg, st.grid, cfg.ensemble.n_pairs)
    run = run_coupling(st, u0, up0, cfg.coupling_config(), seed)
    d = cfg.mixing.recurrence_d
    tau = recurrence_time(run.block_norms[..., 0], run.block_norms[..., 1], d)
    hit = np.isfinite(tau)
    out = {
        "d": d,
        "T_block": cfg.coupling.T_block,
        "tau_d": np.where(hit, tau, -1).astype(int),
        "hit_fraction": float(hit.mean()),
        "delta": delta,
        "mean_exp_delta_tau": float(np.mean(np.exp(delta * tau[hit]))) if hit.any() else float("nan"),
    }
    write_json(os.path.join(out_dir, "recurrence.json"), out)
    write_manifest(out_dir, cfg, ["recurrence.json"], {"seed": seed, "kind": "recurrence"})
    return {"run": run, "tau": tau, "summary": out}


def run_mixing(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> dict:
    """Coupled ensembles from separated data; distance series, fit and bootstrap CI."""
    os.makedirs(out_dir, exist_ok=True)
    set_fft_workers(cfg.threads)
    st = cfg.build_stepper()
    grid = st.grid
    seed = cfg.noise.seed if seed is None else seed
    ladder = list(cfg.mixing.t_ladder)
    n_blocks = int(np.ceil(max(ladder) / cfg.coupling.T_block - 1e-9))
    ccfg = cfg.coupling_config()
    ccfg.n_blocks = max(n_blocks, 1)
    u0, up0 = initial_pair(cfg, grid, cfg.ensemble.n_pairs)
    run = run_coupling(st, u0, up0, ccfg, seed, snapshot_times=ladder)
    obs = ObservableDictionary(grid, st.spec.J, cfg.mixing.n_probes, seed=cfg.ensemble.init_seed)
    va = np.stack([obs.evaluate(run.snapshots[t][0]) for t in ladder], axis=1)
    vb = np.stack([obs.evaluate(run.snapshots[t][1]) for t in ladder], axis=1)
    D, reps = distance_series(va, vb, cfg.mixing.n_bootstrap, seed)
    se = reps.std(axis=0, ddof=1)
    fit = fit_mixing_rate(ladder, D, se)
    lo, hi, _ = bootstrap_rate_ci(ladder, reps, se=se)
    fit.ci = (lo, hi)
    out = {"t": ladder, "D": D, "se": se, "q_hat": fit.q_hat, "q_se": fit.q_se, "q_ci": [lo, hi],
           "rate_exp": fit.rate_exp, "aic_power": fit.aic_power, "aic_exp": fit.aic_exp,
           "preferred": fit.preferred, "censored": (~fit.used).tolist()}
    write_json(os.path.join(out_dir, "mixing.json"), out)
    write_manifest(out_dir, cfg, ["mixing.json"], {"seed": seed, "kind": "mixing"})
    return {"run": run, "D": D, "se": se, "reps": reps, "fit": fit, "values": (va, vb)}
