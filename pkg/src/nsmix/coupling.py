"""Girsanov drift, maximal coupling of Gaussian increments and the coupled pair engine.

The engine evolves, for each pair, the tracked path u (written u~), the
auxiliary path v and the partner path u' (written u~').  Within a block of
length T, v starts at u'(kT) and is driven by the noise of u plus the
low-mode drift that squeezes P_N (u - v).  At every step the low-mode
increments of v and u' are maximally coupled, so that v and u' coincide
until the first step at which the coupling fails.  After a failure u' draws
fresh independent noise until the next block, where v restarts from u'.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .dynamics import Stepper, check_finite
from .ensemble import ledger_weight, stride_for
from .ledger import EnergyState, StoppingRule, StopTracker, accumulate, compute_norms
from .noise import CounterStream

BLOCK_COLUMNS = ("k", "coupled", "tv_estimate", "novikov", "sep_norm", "sigma_hit", "tau_hit")


# ---------------------------------------------------------------------------
# drift and total-variation bounds

def girsanov_drift(stepper: Stepper, uh, vh, N: int, active=True):
    """Continuous-time drift -1{t <= tau} P_N[Pi(u.grad)u - Pi(v.grad)v - nu Lap(u - v)].

    Returned as coordinates on e_1..e_N.  ``active`` is the indicator (scalar
    or per member) that the stopping time has not yet passed.
    """
    g = stepper.grid
    Nu, Nv = stepper.nonlinear(uh), stepper.nonlinear(vh)
    inner = Nu - Nv + stepper.cfg.nu * g.ksq * (uh - vh)
    A = -stepper.basis.coords(inner, N)
    return A * np.asarray(active, dtype=float)[..., None]


def novikov_integral(drift_coords: np.ndarray, dt: float) -> np.ndarray:
    """Left-point approximation of int |A(t)|^2 dt over the time axis -2."""
    return (np.asarray(drift_coords) ** 2).sum(axis=(-2, -1)) * dt


def tv_bound_from_novikov(J, b_min: float) -> np.ndarray:
    """TV bound 1/2 (E exp(6 J / b_min^2)^(1/2) - 1)^(1/2), clipped to [0, 1].

    ``J`` is either a number (a deterministic bound on the Novikov integral)
    or an array of samples whose exponential moment is estimated empirically.
    """
    if b_min <= 0:
        raise ValueError("b_min must be positive")
    J = np.asarray(J, dtype=float)
    expo = 6.0 * J / b_min**2
    if J.ndim == 0:
        half_log = 0.5 * expo
    else:
        mx = expo.max()
        half_log = 0.5 * (mx + np.log(np.mean(np.exp(expo - mx))))
    # beyond exp(50) the bound is clipped to 1 anyway
    moment_sqrt = np.exp(np.minimum(half_log, 50.0))
    val = 0.5 * np.sqrt(np.maximum(moment_sqrt - 1.0, 0.0))
    return np.clip(val, 0.0, 1.0)


def gaussian_tv(mean_p, mean_q, scale) -> np.ndarray:
    """Total variation between N(mean_p, diag scale^2) and N(mean_q, diag scale^2)."""
    z = (np.asarray(mean_p) - np.asarray(mean_q)) / scale
    return 2.0 * ndtr(0.5 * np.sqrt((z * z).sum(axis=-1))) - 1.0


# ---------------------------------------------------------------------------
# maximal coupling

def _log_ratio(y, mean_num, mean_den, scale):
    """log N(y; mean_num) - log N(y; mean_den) for a shared diagonal covariance."""
    a = (y - mean_num) / scale
    b = (y - mean_den) / scale
    return 0.5 * (b * b - a * a).sum(axis=-1)


def maximal_couple_step(mean_p, mean_q, scale, xi, uniform, residual_rng):
    """Maximal coupling of N(mean_p, S) and N(mean_q, S) with S = diag(scale^2).

    ``xi`` (batch, n) and ``uniform`` (batch,) drive the first stage: X is
    drawn from p and accepted for Y when U p(X) <= q(X).  Otherwise Y is drawn
    from the normalised residual (q - p)^+ by rejection, using
    ``residual_rng(i)`` for member i.  Conditioned on disagreement, X and Y
    are independent.  Returns (X, Y, agreed).
    """
    mean_p = np.asarray(mean_p, dtype=float)
    mean_q = np.asarray(mean_q, dtype=float)
    X = mean_p + scale * xi
    agreed = np.log(uniform) <= _log_ratio(X, mean_q, mean_p, scale)
    Y = X.copy()
    for i in np.flatnonzero(~agreed):
        Y[i] = _residual_draw(mean_p[i], mean_q[i], scale, residual_rng(i))
    return X, Y, agreed


def _residual_draw(mp, mq, scale, rng, chunk: int = 32):
    n = mp.shape[-1]
    while True:
        y = mq + scale * rng.standard_normal((chunk, n))
        u = rng.random(chunk)
        ok = np.log(u) > _log_ratio(y, mp, mq, scale)
        if ok.any():
            return y[np.argmax(ok)]


def maximal_couple_step_rng(mean_p, mean_q, scale, rng: np.random.Generator):
    """Convenience form drawing everything from one generator."""
    mean_p = np.atleast_2d(mean_p)
    mean_q = np.broadcast_to(mean_q, mean_p.shape)
    xi = rng.standard_normal(mean_p.shape)
    u = rng.random(mean_p.shape[0])
    return maximal_couple_step(mean_p, mean_q, scale, xi, u, lambda i: rng)


# ---------------------------------------------------------------------------
# engine

@dataclass
class CouplingConfig:
    N: int = 8
    T_block: float = 2.0
    n_blocks: int = 5
    rule: StoppingRule = field(default_factory=lambda: StoppingRule(K=50.0, L=50.0, rho=50.0, C=10.0))
    offset: float = 1.0
    truncate: bool = True


@dataclass
class CouplingBlockOutcome:
    k: int
    coupled: bool
    tv_estimate: float
    novikov: float
    sep_norm: float
    sigma_hit: bool
    tau_hit: bool


@dataclass
class CouplingState:
    u: np.ndarray
    v: np.ndarray
    up: np.ndarray
    coupled: np.ndarray
    step: int = 0


@dataclass
class CouplingRun:
    """Per-pair results: block arrays have shape (pairs, n_blocks)."""

    coupled: np.ndarray
    tv_estimate: np.ndarray
    novikov: np.ndarray
    sep_norm: np.ndarray
    sigma_hit: np.ndarray
    tau_hit: np.ndarray
    sigma1: np.ndarray
    tau_tilde: np.ndarray
    block_norms: np.ndarray  # (pairs, n_blocks + 1, 2): |u~|, |u~'| at kT
    snapshots: dict = field(default_factory=dict, repr=False)
    final: CouplingState | None = None

    def outcomes(self, pair: int) -> list[CouplingBlockOutcome]:
        return [
            CouplingBlockOutcome(
                k,
                bool(self.coupled[pair, k]),
                float(self.tv_estimate[pair, k]),
                float(self.novikov[pair, k]),
                float(self.sep_norm[pair, k]),
                bool(self.sigma_hit[pair, k]),
                bool(self.tau_hit[pair, k]),
            )
            for k in range(self.coupled.shape[1])
        ]


def write_block_csv(path, outcomes: list[CouplingBlockOutcome]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(BLOCK_COLUMNS)
        for o in outcomes:
            wr.writerow([o.k, int(o.coupled), repr(o.tv_estimate), repr(o.novikov), repr(o.sep_norm), int(o.sigma_hit), int(o.tau_hit)])


class _Ledgers:
    """Energy ledger plus online stopping detection for one family of paths."""

    def __init__(self, rule, u0_norm, offset):
        self.state = EnergyState(offset=offset)
        self.tracker = StopTracker(rule, u0_norm)

    def add(self, s, norms, widx):
        accumulate(self.state, s, norms, widx)
        return self.tracker.update(self.state)


def run_coupling(
    stepper: Stepper,
    u0: np.ndarray,
    up0: np.ndarray,
    cfg: CouplingConfig,
    seed: int,
    start: int = 0,
    snapshot_times=(),
    label: str = "couple",
) -> CouplingRun:
    """Run the coupled pair engine for ``cfg.n_blocks`` blocks of length T_block.

    Member m of the batch uses stream lane ``start + m`` in every stream, so a
    pair's outcome does not depend on the batch it was computed in.
    """
    grid, spec, icfg = stepper.grid, stepper.spec, stepper.cfg
    N, dt = cfg.N, icfg.dt
    if not 0 < N <= spec.J:
        raise ValueError(f"control dimension N = {N} must lie in [1, J = {spec.J}]")
    if np.any(spec.b[:N] == 0):
        raise ValueError("controlled modes need nonzero noise coefficients")
    steps_per_block = int(round(cfg.T_block / dt))
    if abs(steps_per_block * dt - cfg.T_block) > 1e-9:
        raise ValueError("T_block must be a multiple of dt")
    stride = stride_for(icfg, cfg.offset)
    if steps_per_block % stride:
        raise ValueError("T_block must be a multiple of record_stride * dt")

    J = spec.J
    s_noise = CounterStream(seed, f"{label}/noise", J)
    s_unif = CounterStream(seed, f"{label}/uniform", 1)
    s_res = CounterStream(seed, f"{label}/residual", 1)
    s_fresh = CounterStream(seed, f"{label}/fresh", J)
    scale = spec.b[:N] * np.sqrt(dt)

    u = np.array(u0, dtype=complex)
    up = np.array(up0, dtype=complex)
    B = u.shape[0]
    v = up.copy()
    coupled = np.ones(B, bool)
    nb = cfg.n_blocks
    out_coupled = np.ones((B, nb), bool)
    out_tv = np.zeros((B, nb))
    out_nov = np.zeros((B, nb))
    out_sep = np.zeros((B, nb))
    out_sigma = np.zeros((B, nb), bool)
    out_tau = np.zeros((B, nb), bool)
    sigma1 = np.full(B, np.inf)
    block_norms = np.zeros((B, nb + 1, 2))
    snap_steps = {int(round(t / dt)): t for t in snapshot_times}
    snaps = {}

    glob_u = _Ledgers(cfg.rule, grid.norm(u), cfg.offset)
    glob_up = _Ledgers(cfg.rule, grid.norm(up), cfg.offset)
    stopped_glob = np.zeros(B, bool)

    def snapshot(n):
        if n in snap_steps:
            snaps[snap_steps[n]] = (u.copy(), up.copy())

    n = 0
    snapshot(0)
    for k in range(nb):
        block_norms[:, k, 0] = grid.norm(u)
        block_norms[:, k, 1] = grid.norm(up)
        v = up.copy()
        coupled[:] = True
        blk_u = _Ledgers(cfg.rule, grid.norm(u), cfg.offset)
        blk_v = _Ledgers(cfg.rule, grid.norm(v), cfg.offset)
        drift_on = np.ones(B, bool)
        log_keep = np.zeros(B)
        for j in range(steps_per_block + 1):
            if j % stride == 0:
                s_glob, s_blk = n * dt, j * dt
                wg = ledger_weight(grid, s_glob, cfg.offset)
                wb = ledger_weight(grid, s_blk, cfg.offset)
                ws = [x for x in (wg, wb) if x is not None]
                ig = 0 if wg is not None else None
                ib = (1 if wg is not None else 0) if wb is not None else None
                nu_ = compute_norms(grid, u, ws)
                nup = compute_norms(grid, up, ws)
                nv = nup if coupled.all() else compute_norms(grid, v, ws)
                if j > 0 or k == 0:
                    hit = glob_u.add(s_glob, nu_, ig) | glob_up.add(s_glob, nup, ig)
                    stopped_glob |= hit
                hb = blk_u.add(s_blk, nu_, ib) | blk_v.add(s_blk, nv, ib)
                if cfg.truncate:
                    drift_on &= ~hb
            if j == steps_per_block:
                break
            # one step ----------------------------------------------------------
            xi = s_noise.normals(n, start, B, J)
            dW = spec.b * np.sqrt(dt) * xi
            Nu = stepper.nonlinear(u)
            Nv = stepper.nonlinear(v)
            D = stepper.drift_coords(u, v, N, Nu, Nv) * drift_on[:, None]
            out_nov[:, k] += (D * D).sum(axis=-1) / dt
            # per-step agreement probabilities along the realised (u, v) path;
            # acceptance correlates with the increment driving v, so this is a
            # diagnostic of the failure probability rather than an unbiased estimate
            log_keep += np.log1p(-np.minimum(gaussian_tv(D, 0.0, scale), 1.0 - 1e-16))
            # drifted increment of v on the low modes versus the plain law of u'
            dW_v = dW.copy()
            dW_v[:, :N] += D
            dW_up = dW_v.copy()
            idx = np.flatnonzero(coupled)
            if idx.size:
                unif = s_unif.uniforms(n, start, B, 1)[idx, 0]
                X, Y, agree = maximal_couple_step(
                    D[idx],
                    np.zeros((idx.size, N)),
                    scale,
                    xi[idx, :N],
                    unif,
                    lambda i: s_res.sequential(n, start + int(idx[i])),
                )
                dW_v[idx, :N] = X
                dW_up[idx, :N] = Y
                newly = idx[~agree]
                out_coupled[newly, k] = False
                sigma1[newly] = np.minimum(sigma1[newly], (n + 1) * dt)
            free = np.flatnonzero(~coupled)
            if free.size:
                dW_up[free] = spec.b * np.sqrt(dt) * s_fresh.normals(n, start, B, J)[free]
            u_next = stepper.step_primal(u, stepper.noise_field(dW), Nu)
            v_next = stepper.step_primal(v, stepper.noise_field(dW_v), Nv)
            still = coupled.copy()
            if idx.size:
                still[idx] = agree
            up_next = v_next.copy()
            other = np.flatnonzero(~still)
            if other.size:
                Nup = stepper.nonlinear(up[other])
                up_next[other] = stepper.step_primal(up[other], stepper.noise_field(dW_up[other]), Nup)
            u, v, up = u_next, v_next, up_next
            coupled = still
            n += 1
            if n % stride == 0:
                check_finite(grid, u, n, icfg.blowup_threshold)
                check_finite(grid, up, n, icfg.blowup_threshold)
            snapshot(n)
        out_tv[:, k] = -np.expm1(log_keep)
        out_sep[:, k] = grid.norm(u - up)
        out_sigma[:, k] = np.isfinite(sigma1) | stopped_glob
        out_tau[:, k] = stopped_glob
    block_norms[:, nb, 0] = grid.norm(u)
    block_norms[:, nb, 1] = grid.norm(up)
    tau_tilde = np.minimum(glob_u.tracker.hit_time, glob_up.tracker.hit_time)
    return CouplingRun(
        out_coupled, out_tv, out_nov, out_sep, out_sigma, out_tau, sigma1, tau_tilde,
        block_norms, snaps, CouplingState(u, v, up, coupled, n),
    )
