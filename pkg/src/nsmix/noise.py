"""Additive noise on the low solenoidal modes, forcing, and counter-based streams.

The noise increment over a step of length dt is

    dW = sum_{j < J} b_j sqrt(dt) xi_j e_j,    xi_j iid N(0, 1),

with b_j = b0 (j + 1)^(-s) in the 0-based basis ordering.  Gaussian draws come
from Philox keyed by (seed, stream label) with the step number in the counter,
so any (member, step, mode) draw can be regenerated without replaying the
stream, and results never depend on how work is batched.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri

from .spectral import Grid, SolenoidalBasis, basis_for
from .weights import phi

log = logging.getLogger(__name__)

_U64 = 2**64


@dataclass
class NoiseConfig:
    J: int = 16
    s: float = 2.0
    b0: float = 1.0
    N_active: int = 8
    seed: int = 0
    h_coeffs: list = field(default_factory=list)
    relaxed_forcing: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NoiseConfig":
        return cls(**json.loads(text))


@dataclass
class NoiseSpec:
    grid: Grid
    basis: SolenoidalBasis = field(repr=False)
    b: np.ndarray
    N_active: int
    seed: int
    h_coeffs: np.ndarray
    h_hat: np.ndarray = field(repr=False)
    B0: float
    B1: float
    Bphi: float

    @property
    def J(self) -> int:
        return self.b.size


def noise_sums(grid: Grid, basis: SolenoidalBasis, b: np.ndarray) -> tuple[float, float, float]:
    """(sum b_j^2, sum b_j^2 ||e_j||_{H^1}^2, sum b_j^2 (||phi e_j||^2 + ||phi curl e_j||^2))."""
    J = b.size
    B0 = float(np.sum(b * b))
    B1 = float(np.sum(b * b * (1.0 + basis.ksq[:J])))
    E = basis.synth(np.eye(J))
    w = phi(grid.radius)
    e = grid.to_physical(E)
    c = grid.to_physical(grid.curl(E))
    dA = grid.dx**2
    wn = ((w * e) ** 2).sum(axis=(-3, -2, -1)) * dA
    wc = ((w * c) ** 2).sum(axis=(-2, -1)) * dA
    Bphi = float(np.sum(b * b * (wn + wc)))
    return B0, B1, Bphi


def build_spec(grid: Grid, cfg: NoiseConfig) -> NoiseSpec:
    if cfg.s <= 0.5:
        raise ValueError(f"decay exponent s = {cfg.s} <= 1/2: sum of b_j^2 diverges as J grows")
    if cfg.s <= 1.0:
        log.warning("decay exponent s = %s <= 1: the H^1 noise sum diverges as J grows", cfg.s)
    basis = basis_for(grid)
    if not 1 <= cfg.J <= basis.size:
        raise ValueError(f"J = {cfg.J} outside [1, {basis.size}]")
    if not 0 <= cfg.N_active <= cfg.J:
        raise ValueError(f"N_active = {cfg.N_active} must lie in [0, J = {cfg.J}]")
    if cfg.b0 < 0 or (cfg.b0 == 0 and cfg.N_active > 0):
        raise ValueError("b0 must be positive when modes are active (b0 = 0 only with N_active = 0)")
    b = cfg.b0 * np.arange(1, cfg.J + 1, dtype=float) ** (-cfg.s)
    h = np.asarray(cfg.h_coeffs, dtype=float)
    if h.size > basis.size:
        raise ValueError("forcing has more coefficients than the basis")
    if h.size > cfg.N_active and np.any(h[cfg.N_active :] != 0) and not cfg.relaxed_forcing:
        raise ValueError("forcing leaves span{e_1..e_N_active}; set relaxed_forcing to allow it")
    h_hat = basis.synth(h) if h.size else grid.zeros()
    if cfg.relaxed_forcing:
        forcing_conditions(grid, basis, h)
    B0, B1, Bphi = noise_sums(grid, basis, b)
    return NoiseSpec(grid, basis, b, cfg.N_active, cfg.seed, h, h_hat, B0, B1, Bphi)


def forcing_conditions(grid: Grid, basis: SolenoidalBasis, h: np.ndarray) -> dict:
    """Numerical check that h is in H^1, phi h in L^2 and sum |h_j| ||e_j||_{H^1} is finite."""
    hh = basis.synth(h)
    out = {
        "h_H1": float(grid.sobolev_norm(hh, 1.0)),
        "phi_h_L2": float(np.sqrt(((phi(grid.radius) * grid.to_physical(hh)) ** 2).sum() * grid.dx**2)),
        "coeff_H1_sum": float(np.sum(np.abs(h) * np.sqrt(1.0 + basis.ksq[: h.size]))),
    }
    if not all(np.isfinite(v) for v in out.values()):
        raise ValueError(f"forcing violates the regularity conditions: {out}")
    return out


# ---------------------------------------------------------------------------
# counter-based streams

def _label_id(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def _to_unit(raw: np.ndarray) -> np.ndarray:
    """Map uint64 words to uniforms strictly inside (0, 1)."""
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


class CounterStream:
    """Philox stream addressed by (step, member, word).

    Each step owns a disjoint counter block; inside it member m occupies words
    [m * width, (m + 1) * width), with width rounded up to a multiple of 4.
    """

    def __init__(self, seed: int, label: str, width: int):
        if width < 1:
            raise ValueError("width must be positive")
        ss = np.random.SeedSequence(int(seed), spawn_key=(_label_id(label),))
        self.key = ss.generate_state(2, np.uint64)
        self.width = 4 * ((width + 3) // 4)
        self.label = label

    def _bitgen(self, step: int, lane: int = 0) -> np.random.Philox:
        if not 0 <= step < _U64 or not 0 <= lane < _U64:
            raise OverflowError("counter space exhausted")
        ctr = np.array([0, step, lane, 0], dtype=np.uint64)
        return np.random.Philox(key=self.key, counter=ctr)

    def raw(self, step: int, start: int, count: int) -> np.ndarray:
        if (start + count) * (self.width // 4) >= _U64:
            raise OverflowError("counter space exhausted")
        bg = self._bitgen(step)
        if start:
            bg.advance(start * (self.width // 4))
        return bg.random_raw(count * self.width).reshape(count, self.width)

    def normals(self, step: int, start: int, count: int, n: int) -> np.ndarray:
        if n > self.width:
            raise ValueError("requested more draws than the stream width")
        return ndtri(_to_unit(self.raw(step, start, count)[:, :n]))

    def uniforms(self, step: int, start: int, count: int, n: int, offset: int = 0) -> np.ndarray:
        if offset + n > self.width:
            raise ValueError("requested more draws than the stream width")
        return _to_unit(self.raw(step, start, count)[:, offset : offset + n])

    def sequential(self, step: int, member: int) -> np.random.Generator:
        """Unbounded generator private to (step, member), for rejection loops."""
        return np.random.Generator(self._bitgen(step, member + 1))


def unit_normals(raw: np.ndarray) -> np.ndarray:
    return ndtri(_to_unit(raw))


# ---------------------------------------------------------------------------
# Wiener increments and Girsanov shifts

@dataclass
class WienerIncrement:
    """Standard normal coordinates xi plus an additive shift, for one step.

    The shift is stored separately so that shifting and unshifting leave the
    original draws bit-for-bit untouched.
    """

    xi: np.ndarray
    dt: float
    step: int = 0
    shift: np.ndarray | None = None

    def value(self) -> np.ndarray:
        return self.xi if self.shift is None else self.xi + self.shift

    def dW(self, spec: NoiseSpec) -> np.ndarray:
        """Coordinates b_j sqrt(dt) (xi_j + shift_j) of the increment."""
        return spec.b * np.sqrt(self.dt) * self.value()

    def field(self, spec: NoiseSpec) -> np.ndarray:
        return spec.basis.synth(self.dW(spec))


def sample_increment(
    spec: NoiseSpec, dt: float, stream: CounterStream, step: int, start: int = 0, count: int = 1
) -> WienerIncrement:
    xi = stream.normals(step, start, count, spec.J)
    return WienerIncrement(xi, dt, step)


def _drift_in_xi(spec: NoiseSpec, drift: np.ndarray, dt: float) -> np.ndarray:
    drift = np.asarray(drift, dtype=float)
    n = drift.shape[-1]
    if n > spec.J:
        if np.any(drift[..., spec.J :] != 0):
            raise ValueError("drift acts on a mode with b_j = 0; the shifted law is singular")
        drift = drift[..., : spec.J]
        n = spec.J
    full = np.zeros(drift.shape[:-1] + (spec.J,))
    full[..., :n] = drift * np.sqrt(dt) / spec.b[:n]
    return full


def girsanov_shift(incr: WienerIncrement, drift: np.ndarray, spec: NoiseSpec) -> WienerIncrement:
    """Shift the increment so that dW_j gains drift_j * dt."""
    s = _drift_in_xi(spec, drift, incr.dt)
    shift = s if incr.shift is None else incr.shift + s
    return WienerIncrement(incr.xi, incr.dt, incr.step, shift)


def girsanov_unshift(incr: WienerIncrement, drift: np.ndarray, spec: NoiseSpec) -> WienerIncrement:
    s = _drift_in_xi(spec, drift, incr.dt)
    shift = incr.shift - s
    if not np.any(shift):
        shift = None
    return WienerIncrement(incr.xi, incr.dt, incr.step, shift)


def girsanov_log_weight(spec: NoiseSpec, dW: np.ndarray, drift: np.ndarray, dt: float) -> np.ndarray:
    """Discrete Girsanov exponent sum_n sum_j (A_j dW_j - A_j^2 dt / 2) / b_j^2.

    ``dW`` and ``drift`` have shape (..., steps, n) with n <= J; the result is
    the log density of the drifted increments relative to the undrifted ones.
    """
    n = drift.shape[-1]
    b2 = spec.b[:n] ** 2
    terms = (drift * dW[..., :n] - 0.5 * drift * drift * dt) / b2
    return terms.sum(axis=(-2, -1))
