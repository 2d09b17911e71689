"""Energy functionals, the noise martingale and stopping times along a path.

Two clocks run side by side.  Unweighted functionals E_p(t) use u(t).  The
vorticity and psi-weighted functionals at ledger time t use the state one
time unit later, u(t + 1) and w(t + 1), with the weight psi(t); they become
available once the path has reached t + 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .spectral import Grid

LEDGER_COLUMNS = ("t", "E1", "E2", "E3", "E11", "E12", "Etilde_psi", "Etilde_1psi", "E_psi", "M1", "QV1")


@dataclass
class FieldNorms:
    """Squared norms of one snapshot, per ensemble member.

    ``weighted`` has shape (n_weights, 4, ...) holding ||psi u||^2,
    ||psi grad u||^2, ||psi w||^2 and ||psi grad w||^2 for each weight.
    """

    l2sq: np.ndarray
    gradsq: np.ndarray
    vortsq: np.ndarray
    vortgradsq: np.ndarray
    weighted: np.ndarray | None = None


def compute_norms(grid: Grid, uh: np.ndarray, weights=()) -> FieldNorms:
    l2sq = grid.inner(uh, uh)
    gradsq = grid.inner(np.sqrt(grid.ksq) * uh, np.sqrt(grid.ksq) * uh)
    wh = grid.curl(uh)
    vortsq = grid.inner(wh, wh, vector=False)
    vortgradsq = grid.inner(np.sqrt(grid.ksq) * wh, np.sqrt(grid.ksq) * wh, vector=False)
    weighted = None
    if len(weights):
        u = grid.to_physical(uh)
        du = grid.to_physical(grid.gradient(uh))  # (..., comp, deriv, x, y)
        dw = grid.to_physical(grid.gradient(wh))
        w = du[..., 1, 0, :, :] - du[..., 0, 1, :, :]
        dens = np.stack(
            [
                (u * u).sum(axis=-3),
                (du * du).sum(axis=(-4, -3)),
                w * w,
                (dw * dw).sum(axis=-3),
            ],
            axis=-3,
        )
        W2 = np.stack([np.asarray(x) ** 2 for x in weights])
        weighted = np.einsum("wxy,...qxy->w...q", W2, dens) * grid.dx**2
        weighted = np.moveaxis(weighted, -1, 1)
    return FieldNorms(l2sq, gradsq, vortsq, vortgradsq, weighted)


@dataclass
class StoppingRule:
    """Thresholds (K + 2L) t + 2 rho + C (1 + |u0|^6) and (K + L) t + rho + C |u0|^2."""

    K: float = 1.0
    L: float = 1.0
    rho: float = 1.0
    C: float = 1.0

    def threshold_tau1(self, t, u0_norm):
        return (self.K + 2.0 * self.L) * t + 2.0 * self.rho + self.C * (1.0 + np.asarray(u0_norm) ** 6)

    def threshold_tau2(self, t, u0_norm):
        return (self.K + self.L) * t + self.rho + self.C * np.asarray(u0_norm) ** 2


@dataclass
class StoppingTimeRecord:
    kind: str
    value: float
    margin: float
    trigger_term: str

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("value", "margin"):
            if not np.isfinite(d[k]):
                d[k] = "inf" if d[k] > 0 else ("-inf" if d[k] < 0 else "nan")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class EnergyState:
    """Running integrals of the ledger for a batch of paths."""

    s: float | None = None  # time of the latest snapshot
    offset: float = 1.0
    # unweighted, at snapshot time s
    I_p: np.ndarray | None = None  # (3, ...) integrals for p = 1, 2, 3
    last_unweighted: np.ndarray | None = None  # integrands at s
    # offset functionals, at ledger time s - offset
    I_off: np.ndarray | None = None  # (4, ...): E11, E12, Etilde_psi, Etilde_1psi
    last_offset: np.ndarray | None = None
    t_off: float | None = None
    # martingale
    M1: np.ndarray | None = None
    QV1: np.ndarray | None = None
    QV_bound: np.ndarray | None = None
    unweighted_rows: list = field(default_factory=list, repr=False)
    offset_rows: list = field(default_factory=list, repr=False)
    index: dict = field(default_factory=dict, repr=False)


def _unweighted_integrands(n: FieldNorms) -> tuple[np.ndarray, np.ndarray]:
    """(point values |u|^{2p}, integrands |u|^{2p-2} |grad u|^2 + |u|^{2p}) for p = 1, 2, 3."""
    e = n.l2sq
    pts = np.stack([e, e**2, e**3])
    integ = np.stack([n.gradsq + e, e * n.gradsq + e**2, e**2 * n.gradsq + e**3])
    return pts, integ


def _offset_integrands(n: FieldNorms, widx: int):
    """Point values and integrands of E11, E12, Etilde_psi, Etilde_1psi."""
    z, zg = n.vortsq, n.vortgradsq
    wu, wgu, ww, wgw = n.weighted[widx]
    pts = np.stack([z, z**2, wu, ww])
    integ = np.stack([zg + z, z * zg + z**2, wgu + wu, wgw + ww])
    return pts, integ


def accumulate(state: EnergyState, s: float, norms: FieldNorms, widx: int | None = 0) -> EnergyState:
    """Fold the snapshot at time s into the ledger (trapezoidal rule).

    ``norms.weighted[widx]`` must have been computed with the weight
    psi(s - offset); it is ignored while s < offset.
    """
    if state.s is not None and not s > state.s:
        raise ValueError(f"ledger time must increase: got {s} after {state.s}")
    pts, integ = _unweighted_integrands(norms)
    if state.s is None:
        state.I_p = np.zeros_like(integ)
    else:
        state.I_p = state.I_p + 0.5 * (s - state.s) * (state.last_unweighted + integ)
    state.last_unweighted = integ
    if state.M1 is None:  # the martingale starts at zero with the path
        state.M1, state.QV1, state.QV_bound = (np.zeros_like(pts[0]) for _ in range(3))
    mart = (state.M1.copy(), state.QV1.copy())
    state.index[_key(s)] = len(state.unweighted_rows)
    state.unweighted_rows.append((s, pts, state.I_p.copy()) + mart)
    t = s - state.offset
    if t >= -1e-12 and widx is not None:
        t = max(t, 0.0)
        opts, ointeg = _offset_integrands(norms, widx)
        if state.t_off is None:
            state.I_off = np.zeros_like(ointeg)
        else:
            state.I_off = state.I_off + 0.5 * (t - state.t_off) * (state.last_offset + ointeg)
        state.last_offset = ointeg
        state.t_off = t
        state.offset_rows.append((t, opts, state.I_off.copy()))
    state.s = s
    return state


def update_martingale(state: EnergyState, u_coords: np.ndarray, dW: np.ndarray, b: np.ndarray, dt: float, l2sq=None) -> EnergyState:
    """Left-point update of M_1 = 2 int <u, dW> and its quadratic variation.

    ``u_coords`` are the coordinates <u, e_j> (j < J) before the step and
    ``dW`` the increment coordinates b_j d beta_j.  Also tracks the pathwise
    bound 4 B0 int |u|^2 on the quadratic variation.
    """
    dM = 2.0 * (u_coords * dW).sum(axis=-1)
    dQ = 4.0 * (b * b * u_coords * u_coords).sum(axis=-1) * dt
    if l2sq is None:
        l2sq = (u_coords * u_coords).sum(axis=-1)
    dB = 4.0 * float(np.sum(b * b)) * l2sq * dt
    if state.M1 is None:
        state.M1, state.QV1, state.QV_bound = np.zeros_like(dM), np.zeros_like(dQ), np.zeros_like(dB)
    state.M1 = state.M1 + dM
    state.QV1 = state.QV1 + dQ
    state.QV_bound = state.QV_bound + dB
    return state


def _key(t: float) -> int:
    return int(round(t * 1e9))


def ledger_rows(state: EnergyState) -> list[dict]:
    """Complete rows: ledger times with both unweighted and offset values."""
    out = []
    for t, opts, oint in state.offset_rows:
        i = state.index.get(_key(t))
        if i is None:
            continue
        _, pts, ip, m1, qv1 = state.unweighted_rows[i]
        E = pts + ip
        Eo = opts + oint
        E_psi = E[0] + E[2] + Eo[2] + Eo[0] + Eo[3]
        row = {
            "t": t,
            "E1": E[0],
            "E2": E[1],
            "E3": E[2],
            "E11": Eo[0],
            "E12": Eo[1],
            "Etilde_psi": Eo[2],
            "Etilde_1psi": Eo[3],
            "E_psi": E_psi,
            "M1": m1,
            "QV1": qv1,
        }
        out.append(row)
    return out


def write_ledger_csv(path, rows: list[dict], member: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LEDGER_COLUMNS)
        for r in rows:
            vals = []
            for c in LEDGER_COLUMNS:
                v = r.get(c, np.nan)
                v = np.asarray(v)
                if member is not None and v.ndim:
                    v = v[member]
                vals.append(repr(float(v)))
            wr.writerow(vals)


def check_stop(rows: list[dict], rule: StoppingRule, u0_norm: float) -> StoppingTimeRecord:
    """First ledger time at which either functional crosses its threshold (scalar path)."""
    margin = np.inf
    for r in rows:
        t = r["t"]
        th1 = float(rule.threshold_tau1(t, u0_norm))
        th2 = float(rule.threshold_tau2(t, u0_norm))
        e_psi, e1 = float(r["E_psi"]), float(r["E1"])
        if e_psi >= th1 or e1 >= th2:
            if e_psi >= th1:
                parts = {k: float(r[k]) for k in ("E1", "E3", "Etilde_psi", "E11", "Etilde_1psi")}
                return StoppingTimeRecord("tau1", t, e_psi - th1, max(parts, key=parts.get))
            return StoppingTimeRecord("tau2", t, e1 - th2, "E1")
        margin = min(margin, th1 - e_psi, th2 - e1)
    return StoppingTimeRecord("none", float("inf"), float(margin), "")


class StopTracker:
    """Online stopping detection for a batch of paths sharing one ledger."""

    def __init__(self, rule: StoppingRule, u0_norm: np.ndarray):
        self.rule = rule
        self.u0_norm = np.asarray(u0_norm, dtype=float)
        self.hit_time = np.full(self.u0_norm.shape, np.inf)
        self.kind = np.full(self.u0_norm.shape, "", dtype=object)
        self._seen = 0

    def update(self, state: EnergyState) -> np.ndarray:
        """Consume newly completed rows; return the boolean 'stopped' mask."""
        rows = state.offset_rows
        while self._seen < len(rows):
            t, opts, oint = rows[self._seen]
            i = state.index.get(_key(t))
            self._seen += 1
            if i is None:
                continue
            _, pts, ip = state.unweighted_rows[i][:3]
            E = pts + ip
            Eo = opts + oint
            e_psi = E[0] + E[2] + Eo[2] + Eo[0] + Eo[3]
            h1 = e_psi >= self.rule.threshold_tau1(t, self.u0_norm)
            h2 = E[0] >= self.rule.threshold_tau2(t, self.u0_norm)
            new = (h1 | h2) & ~np.isfinite(self.hit_time)
            self.hit_time = np.where(new, t, self.hit_time)
            self.kind = np.where(new & h1, "tau1", np.where(new, "tau2", self.kind))
        return np.isfinite(self.hit_time)


def recurrence_time(norms_u: np.ndarray, norms_v: np.ndarray, d: float) -> np.ndarray:
    """First block index k with both norms at time kT at most d (inf if never).

    Inputs have shape (..., n_blocks + 1), sampled at t = kT.
    """
    both = (np.asarray(norms_u) <= d) & (np.asarray(norms_v) <= d)
    idx = np.argmax(both, axis=-1).astype(float)
    return np.where(both.any(axis=-1), idx, np.inf)
