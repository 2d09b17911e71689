"""Time steppers for the damped stochastic Navier-Stokes system and its relatives.

Every stepper advances

    dx = [-(a + nu |k|^2) x + F(x)] dt + dW

with the linear part integrated through the per-mode factors

    exponential_euler:    R = exp(-lam dt),    Phi = (1 - R) / lam,   W = 1
    semi_implicit_euler:  R = 1 / (1 + lam dt), Phi = dt R,          W = R

(``lam = a + nu |k|^2``), i.e. ``x+ = R x + Phi F(x) + W dW``.  The low-mode
control is built so that P_N (u - v) is multiplied by exactly exp(-a dt) per
step, which makes the squeezing property of the auxiliary process hold to
rounding error rather than to truncation error.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .noise import NoiseSpec
from .spectral import Grid

SCHEMES = ("exponential_euler", "semi_implicit_euler")


class BlowUpError(RuntimeError):
    """Raised when a state becomes non-finite or exceeds the blow-up threshold."""

    def __init__(self, step: int, message: str = ""):
        super().__init__(f"blow-up at step {step}" + (f": {message}" if message else ""))
        self.step = step


@dataclass
class IntegratorConfig:
    dt: float = 1e-2
    scheme: str = "exponential_euler"
    a: float = 0.5
    nu: float = 0.02
    T_horizon: float = 10.0
    record_stride: int = 10
    blowup_threshold: float = 1e8

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.a > 0 or not self.nu > 0:
            raise ValueError("damping a and viscosity nu must be positive")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T_horizon / self.dt))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _factors(lam: np.ndarray, dt: float, scheme: str):
    if scheme == "exponential_euler":
        R = np.exp(-lam * dt)
        Phi = -np.expm1(-lam * dt) / lam
        W = np.ones_like(R)
    else:
        R = 1.0 / (1.0 + lam * dt)
        Phi = dt * R
        W = R
    return R, Phi, W


class Stepper:
    """All steppers of the model on one grid with one noise model."""

    def __init__(self, grid: Grid, spec: NoiseSpec, cfg: IntegratorConfig):
        if spec.grid != grid:
            raise ValueError("noise model lives on a different grid")
        self.grid, self.spec, self.cfg = grid, spec, cfg
        self.basis = spec.basis
        dt = cfg.dt
        lam = cfg.a + cfg.nu * grid.ksq
        self.R, self.Phi, self.W = _factors(lam, dt, cfg.scheme)
        self.R_exact = np.exp(-lam * dt)
        self.Ra = float(np.exp(-cfg.a * dt))
        lam_b = cfg.a + cfg.nu * self.basis.ksq
        self.R_b, self.Phi_b, self.W_b = _factors(lam_b, dt, cfg.scheme)
        self.h = spec.h_hat
        self.Phi_h = self.Phi * spec.h_hat
        self.curl_h = grid.curl(spec.h_hat)
        self._unit_W = cfg.scheme == "exponential_euler"

    # building blocks ------------------------------------------------------------
    def nonlinear(self, uh):
        return self.grid.nonlinear(uh)

    def noise_field(self, dW_coords: np.ndarray) -> np.ndarray:
        """Field of a noise increment given its coordinates b_j sqrt(dt) xi_j."""
        return self.basis.synth(dW_coords)

    def project(self, xh, N):
        return self.basis.project(xh, N)

    # primal and vorticity ---------------------------------------------------------
    def step_primal(self, uh, noise, Nu=None):
        """One step of the velocity equation; ``noise`` is the increment field."""
        if Nu is None:
            Nu = self.nonlinear(uh)
        out = self.R * uh
        out -= self.Phi * Nu
        out += self.Phi_h
        out += noise if self._unit_W else self.W * noise
        return out

    def step_vorticity(self, wh, noise, uh=None):
        """One step of the vorticity equation driven by the curl of ``noise``."""
        g = self.grid
        if uh is None:
            uh = g.velocity_from_vorticity(wh)
        adv = g.advect_scalar(uh, wh)
        return self.R * wh + self.Phi * (self.curl_h - adv) + self.W * g.curl(noise)

    # auxiliary, difference and controlled ------------------------------------------
    def drift_coords(self, uh, vh, N, Nu=None, Nv=None):
        """Discrete Girsanov drift increment (in dW coordinates) on the first N modes.

        Adding it to the noise of v makes P_N (u - v) contract by exactly
        exp(-a dt) over the step.  Divided by dt it converges to
        -P_N[Pi(u.grad)u - Pi(v.grad)v - nu Lap(u - v)].
        """
        if N == 0:
            return np.zeros(np.shape(uh)[:-3] + (0,))
        if Nu is None:
            Nu = self.nonlinear(uh)
        if Nv is None:
            Nv = self.nonlinear(vh)
        gh = uh - vh
        target = (self.R - self.Ra) * gh + self.Phi * (Nv - Nu)
        return self.basis.coords(target, N) / self.W_b[:N]

    def step_auxiliary_v(self, vh, uh, noise, N, Nu=None, Nv=None):
        if Nv is None:
            Nv = self.nonlinear(vh)
        if N == 0:
            return self.step_primal(vh, noise, Nv)
        if Nu is None:
            Nu = self.nonlinear(uh)
        d = self.drift_coords(uh, vh, N, Nu, Nv)
        return self.step_primal(vh, noise + self.basis.synth(d), Nv)

    def step_difference_g(self, gh, uh, vh, N, Nu=None, Nv=None):
        """Advance g = u - v given the current u and v (the noise cancels)."""
        if Nu is None:
            Nu = self.nonlinear(uh)
        if Nv is None:
            Nv = self.nonlinear(vh)
        full = self.R * gh - self.Phi * (Nu - Nv)
        if N == 0:
            return full
        low = self.basis.project(gh, N)
        return (full - self.basis.project(full, N)) + self.Ra * low

    def control_increment(self, uh, noise, N, Nu=None):
        """Increment field driving the controlled form, built from the path u.

        Feeding ``control_increment(x, noise)`` back into ``step_controlled(x, .)``
        reproduces ``step_primal(x, noise)``.
        """
        if Nu is None:
            Nu = self.nonlinear(uh)
        wn = self.W * noise
        if N == 0:
            return wn
        plain = self.R * uh + self.Phi * (self.h - Nu) + wn - self.Ra * uh
        low = self.basis.project(plain, N)
        return (wn - self.basis.project(wn, N)) + low

    def step_controlled(self, xh, increment, N, Nx=None):
        """Controlled form: only Q_N modes feel viscosity and advection."""
        if Nx is None:
            Nx = self.nonlinear(xh)
        full = self.R * xh + self.Phi * (self.h - Nx)
        if N == 0:
            return full + increment
        high = full - self.basis.project(full, N)
        return high + self.Ra * self.basis.project(xh, N) + increment

    # truncated processes -------------------------------------------------------------
    def step_linear_truncation(self, zh):
        """Exact step of dz + a z dt = nu Lap z dt."""
        return self.R_exact * zh


def check_finite(grid: Grid, uh: np.ndarray, step: int, threshold: float) -> np.ndarray:
    """Return L2 norms, raising BlowUpError if any member is non-finite or too large."""
    nrm = grid.norm(uh)
    bad = ~np.isfinite(nrm) | (nrm > threshold)
    if np.any(bad):
        raise BlowUpError(step, f"norm {np.max(np.where(np.isfinite(nrm), nrm, np.inf))}")
    return nrm
