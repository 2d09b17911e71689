"""Batched path simulation with trajectory records and energy ledgers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Stepper, check_finite
from .ledger import EnergyState, accumulate, compute_norms, update_martingale
from .noise import CounterStream
from .weights import eval_psi

TRAJECTORY_COLUMNS = ("t", "L2", "H1", "enstrophy", "psiL2", "psiGrad", "psiVortL2", "psiVortGrad")


def ledger_weight(grid, s: float, offset: float = 1.0):
    """Weight psi(s - offset) used with the snapshot at time s (None before the offset)."""
    t = s - offset
    if t < -1e-12:
        return None
    return eval_psi(max(t, 0.0), grid.radius)


@dataclass
class PathResult:
    times: np.ndarray
    records: np.ndarray  # (n_records, batch, len(TRAJECTORY_COLUMNS) - 1)
    final: np.ndarray
    ledger: EnergyState | None = None
    snapshots: dict = field(default_factory=dict, repr=False)
    blowup_step: np.ndarray | None = None  # per member, -1 if the member stayed finite


def stride_for(cfg, offset: float = 1.0) -> int:
    """Check that the weighted-ledger offset is a whole number of record strides."""
    span = cfg.record_stride * cfg.dt
    q = offset / span
    if abs(q - round(q)) > 1e-9:
        raise ValueError(f"offset {offset} is not a multiple of record_stride * dt = {span}")
    return cfg.record_stride


def simulate_paths(
    stepper: Stepper,
    u0: np.ndarray,
    stream: CounterStream,
    n_steps: int | None = None,
    start: int = 0,
    with_ledger: bool = True,
    offset: float = 1.0,
    snapshot_times=(),
    step0: int = 0,
    on_blowup: str = "raise",
) -> PathResult:
    """Integrate a batch of paths; member m uses stream lane ``start + m``.

    Records are taken every ``record_stride`` steps; the weighted columns use
    psi(t - offset) and are zero before the offset.  With ``on_blowup="mask"``
    a member that blows up is frozen at zero, its later records are NaN and
    the step is reported in ``blowup_step``; otherwise BlowUpError is raised.
    """
    if on_blowup not in ("raise", "mask"):
        raise ValueError("on_blowup must be 'raise' or 'mask'")
    grid, spec, cfg = stepper.grid, stepper.spec, stepper.cfg
    n_steps = cfg.n_steps if n_steps is None else n_steps
    stride = stride_for(cfg, offset) if with_ledger else cfg.record_stride
    u = np.array(u0, dtype=complex)
    if u.ndim == 3:
        u = u[None]
    B = u.shape[0]
    blown = np.full(B, -1)
    state = EnergyState(offset=offset) if with_ledger else None
    snap_steps = {int(round(t / cfg.dt)): t for t in snapshot_times}
    times, records, snaps = [], [], {}

    def record(n):
        s = n * cfg.dt
        w = ledger_weight(grid, s, offset)
        norms = compute_norms(grid, u, [w] if w is not None else [np.zeros(grid.radius.shape)])
        wq = norms.weighted[0] if w is not None else np.zeros((4, B))
        times.append(s)
        rec = np.stack(
            [
                np.sqrt(norms.l2sq),
                np.sqrt(norms.l2sq + norms.gradsq),
                norms.vortsq,
                np.sqrt(wq[0]),
                np.sqrt(wq[1]),
                np.sqrt(wq[2]),
                np.sqrt(wq[3]),
            ],
            axis=-1,
        )
        rec[blown >= 0] = np.nan
        records.append(rec)
        if state is not None:
            accumulate(state, s, norms, 0 if w is not None else None)

    record(0)
    if 0 in snap_steps:
        snaps[snap_steps[0]] = u.copy()
    for n in range(n_steps):
        xi = stream.normals(step0 + n, start, B, spec.J)
        dW = spec.b * np.sqrt(cfg.dt) * xi
        if state is not None:
            update_martingale(state, spec.basis.coords(u, spec.J), dW, spec.b, cfg.dt, grid.inner(u, u))
        u = stepper.step_primal(u, stepper.noise_field(dW))
        if (n + 1) % stride == 0:
            if on_blowup == "raise":
                check_finite(grid, u, step0 + n + 1, cfg.blowup_threshold)
            else:
                nrm = grid.norm(u)
                bad = (~np.isfinite(nrm) | (nrm > cfg.blowup_threshold)) & (blown < 0)
                blown[bad] = step0 + n + 1
                u[blown >= 0] = 0.0
            record(n + 1)
        if n + 1 in snap_steps:
            snaps[snap_steps[n + 1]] = u.copy()
    return PathResult(np.array(times), np.array(records), u, state, snaps, blown)


def write_trajectory_csv(path, result: PathResult, member: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRAJECTORY_COLUMNS)
        for t, rec in zip(result.times, result.records):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in rec[member]])
