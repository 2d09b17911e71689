"""Pseudospectral operators on the periodic box [-L, L)^2.

Fields are stored in the half-spectrum layout produced by ``rfft2`` with the
``"forward"`` normalisation, so that a real field satisfies

    u(x) = sum_k u_hat(k) exp(i k . x),   k = (pi / L) * n,  n in Z^2.

Velocity fields carry a component axis of length 2 ahead of the two lattice
axes; every operator broadcasts over arbitrary leading batch axes.  Physical
coordinates use the FFT layout: grid index ``i`` sits at ``i * dx`` wrapped
into [-L, L), so the origin is index 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

_FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    """Set the number of threads used by every transform in the package."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


@dataclass(frozen=True)
class Grid:
    """Uniform M x M collocation grid on the box [-L, L)^2."""

    M: int
    L: float
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if self.M < 16 or self.M % 2:
            raise ValueError(f"M must be an even integer >= 16, got {self.M}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")
        if not 0 < self.dealias_fraction <= 1:
            raise ValueError("dealias_fraction must lie in (0, 1]")

    # lattice -----------------------------------------------------------------
    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.M

    @property
    def area(self) -> float:
        return 4.0 * self.L * self.L

    @property
    def spectral_shape(self) -> tuple[int, int]:
        return (self.M, self.M // 2 + 1)

    @cached_property
    def n1(self) -> np.ndarray:
        return np.fft.fftfreq(self.M, 1.0 / self.M).astype(np.int64)[:, None]

    @cached_property
    def n2(self) -> np.ndarray:
        return np.arange(self.M // 2 + 1, dtype=np.int64)[None, :]

    @cached_property
    def k1(self) -> np.ndarray:
        return np.broadcast_to(self.n1 * (np.pi / self.L), self.spectral_shape)

    @cached_property
    def k2(self) -> np.ndarray:
        return np.broadcast_to(self.n2 * (np.pi / self.L), self.spectral_shape)

    @cached_property
    def ksq(self) -> np.ndarray:
        return self.k1**2 + self.k2**2

    @cached_property
    def inv_ksq(self) -> np.ndarray:
        out = np.zeros(self.spectral_shape)
        nz = self.ksq > 0
        out[nz] = 1.0 / self.ksq[nz]
        return out

    @cached_property
    def weights(self) -> np.ndarray:
        """Multiplicity of each stored coefficient in the full lattice."""
        w = np.full(self.spectral_shape, 2.0)
        w[:, 0] = 1.0
        w[:, -1] = 1.0
        return w

    @cached_property
    def representable(self) -> np.ndarray:
        """Non-zero, non-Nyquist modes: the support of solenoidal fields."""
        half = self.M // 2
        m = (np.abs(self.n1) < half) & (self.n2 < half)
        m = m & ((self.n1 != 0) | (self.n2 != 0))
        return np.broadcast_to(m, self.spectral_shape).copy()

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Modes kept after dealiasing: max(|n1|, |n2|) < fraction * M / 2."""
        cut = self.dealias_fraction * (self.M // 2)
        keep = np.maximum(np.abs(self.n1), self.n2) < cut
        return np.broadcast_to(keep, self.spectral_shape) & self.representable

    # physical space ----------------------------------------------------------
    @cached_property
    def x1d(self) -> np.ndarray:
        x = np.arange(self.M) * self.dx
        return np.where(x >= self.L, x - 2.0 * self.L, x)

    @cached_property
    def x(self) -> tuple[np.ndarray, np.ndarray]:
        x1, x2 = np.meshgrid(self.x1d, self.x1d, indexing="ij")
        return x1, x2

    @cached_property
    def radius(self) -> np.ndarray:
        x1, x2 = self.x
        return np.hypot(x1, x2)

    # transforms --------------------------------------------------------------
    def to_physical(self, fh: np.ndarray) -> np.ndarray:
        return sfft.irfft2(fh, s=(self.M, self.M), norm="forward", workers=_FFT_WORKERS)

    def to_spectral(self, f: np.ndarray) -> np.ndarray:
        return sfft.rfft2(f, norm="forward", workers=_FFT_WORKERS)

    def zeros(self, *batch: int, vector: bool = True) -> np.ndarray:
        shape = tuple(batch) + ((2,) if vector else ()) + self.spectral_shape
        return np.zeros(shape, dtype=complex)

    def full_lattice(self, fh: np.ndarray) -> np.ndarray:
        """Expand half-spectrum coefficients onto the full M x M lattice."""
        M = self.M
        out = np.empty(fh.shape[:-1] + (M,), dtype=complex)
        out[..., : M // 2 + 1] = fh
        rows = (-np.arange(M)) % M
        cols = (-np.arange(M // 2 + 1, M)) % M
        out[..., M // 2 + 1 :] = np.conj(fh[..., rows, :][..., cols])
        return out

    def half_lattice(self, full: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(full[..., : self.M // 2 + 1])

    # quadratic forms ---------------------------------------------------------
    def inner(self, ah: np.ndarray, bh: np.ndarray, vector: bool = True) -> np.ndarray:
        """L^2 inner product over the box; sums the component axis if vector."""
        prod = (self.weights * (ah * np.conj(bh)).real).sum(axis=(-2, -1))
        if vector:
            prod = prod.sum(axis=-1)
        return self.area * prod

    def norm(self, fh: np.ndarray, vector: bool = True) -> np.ndarray:
        return np.sqrt(self.inner(fh, fh, vector))

    def sobolev_norm(self, fh: np.ndarray, s: float, vector: bool = True) -> np.ndarray:
        """H^s norm with symbol (1 + |k|^2)^(s/2)."""
        if not np.isfinite(s):
            raise ValueError("Sobolev order must be finite")
        sym = (1.0 + self.ksq) ** (0.5 * s)
        return self.norm(sym * fh, vector)

    def grad_norm(self, fh: np.ndarray, vector: bool = True) -> np.ndarray:
        return self.norm(np.sqrt(self.ksq) * fh, vector)

    # differential operators ----------------------------------------------------
    def leray(self, uh: np.ndarray) -> np.ndarray:
        """Leray projection I - k k^T / |k|^2, restricted to representable modes."""
        k1, k2 = self.k1, self.k2
        div = (k1 * uh[..., 0, :, :] + k2 * uh[..., 1, :, :]) * self.inv_ksq
        out = np.stack([uh[..., 0, :, :] - k1 * div, uh[..., 1, :, :] - k2 * div], axis=-3)
        return out * self.representable

    def divergence(self, uh: np.ndarray) -> np.ndarray:
        return 1j * (self.k1 * uh[..., 0, :, :] + self.k2 * uh[..., 1, :, :])

    def curl(self, uh: np.ndarray) -> np.ndarray:
        """Scalar vorticity d1 u2 - d2 u1."""
        return 1j * (self.k1 * uh[..., 1, :, :] - self.k2 * uh[..., 0, :, :])

    def velocity_from_vorticity(self, wh: np.ndarray) -> np.ndarray:
        """Biot-Savart law: the solenoidal mean-zero field with curl w."""
        s = wh * self.inv_ksq * self.representable
        return np.stack([1j * self.k2 * s, -1j * self.k1 * s], axis=-3)

    def gradient(self, fh: np.ndarray) -> np.ndarray:
        """Gradient of a scalar, or the Jacobian (..., 2, 2, ...) of a vector field."""
        return np.stack([1j * self.k1 * fh, 1j * self.k2 * fh], axis=-3)

    def laplacian(self, fh: np.ndarray) -> np.ndarray:
        return -self.ksq * fh

    @cached_property
    def _advection_symbols(self) -> np.ndarray:
        """Real symbols S[c, q] with Pi[div(u (x) u)]_c = i sum_q S[c, q] T_q.

        T = (u1 u1, u1 u2, u2 u2); Leray projection and dealiasing are folded in.
        """
        k1, k2, iq = self.k1, self.k2, self.inv_ksq
        m = self.dealias_mask
        p11, p12, p22 = (1.0 - k1 * k1 * iq) * m, -k1 * k2 * iq * m, (1.0 - k2 * k2 * iq) * m
        return np.array(
            [
                [p11 * k1, p11 * k2 + p12 * k1, p12 * k2],
                [p12 * k1, p12 * k2 + p22 * k1, p22 * k2],
            ]
        )

    def _stress(self, uh: np.ndarray) -> np.ndarray:
        u = self.to_physical(uh)
        u1, u2 = u[..., 0, :, :], u[..., 1, :, :]
        prod = np.empty(u.shape[:-3] + (3,) + u.shape[-2:])
        np.multiply(u1, u1, out=prod[..., 0, :, :])
        np.multiply(u1, u2, out=prod[..., 1, :, :])
        np.multiply(u2, u2, out=prod[..., 2, :, :])
        return self.to_spectral(prod)

    def nonlinear(self, uh: np.ndarray) -> np.ndarray:
        """Dealiased Leray-projected advection Pi[(u . grad) u] in divergence form."""
        T = self._stress(uh)
        S = self._advection_symbols
        out = np.empty(uh.shape, dtype=complex)
        for c in range(2):
            acc = S[c, 0] * T[..., 0, :, :]
            acc += S[c, 1] * T[..., 1, :, :]
            acc += S[c, 2] * T[..., 2, :, :]
            np.multiply(acc, 1j, out=out[..., c, :, :])
        return out

    def advect_scalar(self, uh: np.ndarray, fh: np.ndarray) -> np.ndarray:
        """Dealiased u . grad f for solenoidal u, computed as div(u f)."""
        u = self.to_physical(uh)
        f = self.to_physical(fh)
        q1 = self.to_spectral(u[..., 0, :, :] * f)
        q2 = self.to_spectral(u[..., 1, :, :] * f)
        return 1j * (self.k1 * q1 + self.k2 * q2) * self.dealias_mask

    def pressure(self, uh: np.ndarray) -> np.ndarray:
        """Pressure solving -Lap p = div div (u (x) u), dealiased and mean-zero."""
        T = self._stress(uh)
        k1, k2 = self.k1, self.k2
        ph = -(k1 * k1 * T[..., 0, :, :] + 2.0 * k1 * k2 * T[..., 1, :, :] + k2 * k2 * T[..., 2, :, :]) * self.inv_ksq
        return ph * self.dealias_mask

    def random_solenoidal(
        self,
        rng: np.random.Generator,
        n: int | None = None,
        slope: float = 1.0,
        band: str = "dealiased",
    ) -> np.ndarray:
        """Random real solenoidal field(s) with spectrum ~ (1 + |k|^2)^(-slope/2).

        ``band`` selects the support: ``"dealiased"`` or ``"full"``.  The
        result is normalised to unit L^2 norm per member.
        """
        batch = () if n is None else (n,)
        white = rng.standard_normal(batch + (2, self.M, self.M))
        uh = self.to_spectral(white) * (1.0 + self.ksq) ** (-0.5 * slope)
        uh = self.leray(uh)
        if band == "dealiased":
            uh = uh * self.dealias_mask
        elif band != "full":
            raise ValueError(f"unknown band {band!r}")
        nrm = self.norm(uh)
        return uh / np.asarray(nrm)[..., None, None, None]


class SolenoidalBasis:
    """Real orthonormal solenoidal Fourier basis of the box.

    Elements come in pairs ``c k_perp/|k| sin(k.x)`` and ``c k_perp/|k| cos(k.x)``
    over a half-lattice of representable wavevectors.  They are ordered by
    |n|^2, ties broken by (n1, n2) and then sine before cosine.  Index j in the
    ordering is the 0-based position; element "e_1" is index 0.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        M = grid.M
        half = M // 2
        n1 = np.arange(-half + 1, half)
        n2 = np.arange(0, half)
        N1, N2 = np.meshgrid(n1, n2, indexing="ij")
        N1, N2 = N1.ravel(), N2.ravel()
        upper = (N2 > 0) | ((N2 == 0) & (N1 > 0))
        N1, N2 = N1[upper], N2[upper]
        P = N1.size
        n1s = np.concatenate([N1, N1])
        n2s = np.concatenate([N2, N2])
        kind = np.concatenate([np.zeros(P, np.int64), np.ones(P, np.int64)])
        point = np.concatenate([np.arange(P), np.arange(P)])
        order = np.lexsort((kind, n2s, n1s, n1s**2 + n2s**2))
        self.n = np.stack([n1s[order], n2s[order]], axis=1)
        self.kind = kind[order]  # 0 = sine, 1 = cosine
        self.point = point[order]
        self.size = 2 * P
        self._pt_n1, self._pt_n2 = N1, N2
        self._row = N1 % M
        self._col = N2
        kk = np.hypot(N1, N2)
        self._perp = np.stack([-N2 / kk, N1 / kk])  # unit k_perp per point
        self._scale = np.sqrt(2.0 * grid.area)
        self.ksq = (np.pi / grid.L) ** 2 * (self.n[:, 0] ** 2 + self.n[:, 1] ** 2)

    def __len__(self) -> int:
        return self.size

    def _check_n(self, N: int) -> int:
        if N is None:
            return self.size
        if not 0 <= N <= self.size:
            raise ValueError(f"N = {N} outside the basis range [0, {self.size}]")
        return int(N)

    def coords(self, uh: np.ndarray, N: int | None = None) -> np.ndarray:
        """Coordinates <u, e_j> for j < N, shape (..., N)."""
        N = self._check_n(N)
        pts = self.point[:N]
        rows, cols = self._row[pts], self._col[pts]
        perp = self._perp[:, pts]
        a = uh[..., 0, rows, cols] * perp[0] + uh[..., 1, rows, cols] * perp[1]
        kind = self.kind[:N]
        return np.where(kind == 1, self._scale * a.real, -self._scale * a.imag)

    def synth(self, coords: np.ndarray) -> np.ndarray:
        """Field sum_j coords_j e_j from coordinates of shape (..., N)."""
        coords = np.asarray(coords, dtype=float)
        N = self._check_n(coords.shape[-1])
        batch = coords.shape[:-1]
        pts = self.point[:N]
        kind = self.kind[:N]
        amp = np.zeros(batch + (self.size // 2,), dtype=complex)
        cos, sin = kind == 1, kind == 0
        amp[..., pts[cos]] += coords[..., cos]
        amp[..., pts[sin]] += -1j * coords[..., sin]
        used = np.unique(pts)
        amp = amp[..., used] / self._scale
        rows, cols = self._row[used], self._col[used]
        out = np.zeros(batch + (2,) + self.grid.spectral_shape, dtype=complex)
        for c in range(2):
            out[..., c, rows, cols] = amp * self._perp[c, used]
        axis = self._col[used] == 0
        if axis.any():
            neg = (-self._pt_n1[used][axis]) % self.grid.M
            for c in range(2):
                out[..., c, neg, 0] = np.conj(amp[..., axis] * self._perp[c, used][axis])
        return out

    def project(self, uh: np.ndarray, N: int) -> np.ndarray:
        """Orthogonal projection onto span{e_j : j < N}."""
        N = self._check_n(N)
        if N == 0:
            return np.zeros_like(uh)
        return self.synth(self.coords(uh, N))

    def complement(self, uh: np.ndarray, N: int) -> np.ndarray:
        """Pi - P_N: the solenoidal part orthogonal to the first N elements."""
        return self.grid.leray(uh) - self.project(uh, N)

    def field(self, j: int) -> np.ndarray:
        e = np.zeros(j + 1)
        e[j] = 1.0
        return self.synth(e)

    def index(self, n1: int, n2: int, kind: str) -> int:
        """Position of the element with lattice point (n1, n2) (half-plane representative) and kind."""
        if n2 < 0 or (n2 == 0 and n1 < 0):
            n1, n2 = -n1, -n2
        k = {"sin": 0, "cos": 1}[kind]
        hit = np.flatnonzero((self.n[:, 0] == n1) & (self.n[:, 1] == n2) & (self.kind == k))
        if hit.size == 0:
            raise KeyError((n1, n2, kind))
        return int(hit[0])

    def wavevector(self, j: int) -> tuple[int, int, str]:
        n1, n2 = self.n[j]
        return int(n1), int(n2), ("cos" if self.kind[j] else "sin")


_BASIS_CACHE: dict[Grid, SolenoidalBasis] = {}


def basis_for(grid: Grid) -> SolenoidalBasis:
    b = _BASIS_CACHE.get(grid)
    if b is None:
        b = _BASIS_CACHE[grid] = SolenoidalBasis(grid)
    return b


def low_mode_project(grid: Grid, uh: np.ndarray, N: int) -> np.ndarray:
    return basis_for(grid).project(uh, N)


def smoothstep_cutoff(r: np.ndarray, A: float) -> np.ndarray:
    """C^2 radial cutoff: 1 on [0, A], 0 beyond 2A, quintic smoothstep between."""
    s = np.clip((np.asarray(r) - A) / A, 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


class PowerIterationError(RuntimeError):
    pass


def truncated_poincare_epsilon(
    grid: Grid,
    N: int,
    A: float,
    s: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 5000,
    seed: int = 0,
    method: str = "power",
) -> float:
    """Operator norm of f -> (Pi - P_N)(chi_A f) from solenoidal H^s into L^2.

    The squared norm is the top eigenvalue of the self-adjoint normal
    operator.  ``method="power"`` runs power iteration until the relative
    change of the Rayleigh quotient drops below ``tol``; ``method="lanczos"``
    hands the same operator to an implicitly restarted Lanczos solver, which
    copes with nearly degenerate top eigenvalues.
    """
    basis = basis_for(grid)
    N = basis._check_n(N)
    if A <= 0:
        raise ValueError("cutoff radius A must be positive")
    if N == basis.size:
        return 0.0
    chi = smoothstep_cutoff(grid.radius, A)
    smooth = (1.0 + grid.ksq) ** (-0.5 * s)

    def normal(y):
        f = grid.to_physical(smooth * y) * chi
        q = basis.complement(grid.to_spectral(f), N)
        g = grid.to_physical(q) * chi
        return smooth * grid.leray(grid.to_spectral(g))

    y = grid.random_solenoidal(np.random.default_rng(seed), band="full", slope=0.0)
    if method == "lanczos":
        return _lanczos_norm(grid, basis, normal, y, tol, max_iter)
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    lam_old = 0.0
    for _ in range(max_iter):
        z = normal(y)
        lam = float(grid.inner(y, z))
        nz = float(grid.norm(z))
        if nz == 0.0:
            return 0.0
        y = z / nz
        if abs(lam - lam_old) <= tol * abs(lam):
            return float(np.sqrt(max(lam, 0.0)))
        lam_old = lam
    raise PowerIterationError(f"power iteration did not converge in {max_iter} iterations (N={N})")


def _lanczos_norm(grid: Grid, basis: SolenoidalBasis, normal, y0, tol, max_iter) -> float:
    # work in orthonormal basis coordinates so the operator is a symmetric matrix
    n = basis.size

    def matvec(c):
        return basis.coords(normal(basis.synth(np.asarray(c, dtype=float).ravel())))

    op = LinearOperator((n, n), matvec=matvec, dtype=float)
    try:
        vals = eigsh(op, k=1, which="LA", tol=tol, maxiter=max_iter, v0=basis.coords(y0), return_eigenvectors=False)
    except ArpackNoConvergence as exc:
        raise PowerIterationError(f"Lanczos iteration did not converge: {exc}") from exc
    return float(np.sqrt(max(vals[0], 0.0)))


# ---------------------------------------------------------------------------
# field containers and binary snapshots

_MAGIC = b"NS2DFLD"
_VERSION = 1
_HEADER = struct.Struct("<7sIId")


@dataclass
class SpectralField:
    """A velocity field together with the grid it lives on."""

    grid: Grid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        expect = (2,) + self.grid.spectral_shape
        if self.coeffs.shape != expect:
            raise ValueError(f"coefficient shape {self.coeffs.shape} != {expect}")

    def physical(self) -> np.ndarray:
        return self.grid.to_physical(self.coeffs)


@dataclass
class ScalarField:
    grid: Grid
    coeffs: np.ndarray = field(repr=False)

    def physical(self) -> np.ndarray:
        return self.grid.to_physical(self.coeffs)


def write_snapshot(path, fld: SpectralField) -> None:
    """Write the full-lattice coefficients as little-endian (re, im) float64 pairs.

    Layout: header (magic, version u32, M u32, L f64) followed by component 1
    then component 2, each row-major over the lattice in FFT index order.
    """
    g = fld.grid
    full = g.full_lattice(fld.coeffs)
    body = np.empty(full.shape + (2,), dtype="<f8")
    body[..., 0] = full.real
    body[..., 1] = full.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, g.M, float(g.L)))
        fh.write(body.tobytes(order="C"))


def read_snapshot(path, dealias_fraction: float = 2.0 / 3.0) -> SpectralField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated snapshot header")
    magic, version, M, L = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    expect = 2 * M * M * 2 * 8
    if len(raw) - _HEADER.size != expect:
        raise ValueError("snapshot body has the wrong length")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(2, M, M, 2)
    grid = Grid(M, L, dealias_fraction)
    full = body[..., 0] + 1j * body[..., 1]
    return SpectralField(grid, grid.half_lattice(full))
