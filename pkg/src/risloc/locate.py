"""Delay read-out and geometric back-solve from path parameters to position.

The posterior mean of a delay signature is turned into a delay estimate with
an oversampled matched-filter scan (computed with one zero-padded FFT),
followed by a parabolic refinement and a bounded 1-D polish inside the
winning cell.  The two path delays and the departure direction then fix the
user position through the range along the RIS-user ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import direction

DEFAULT_OVERSAMPLE = 32


@dataclass
class DelayGrid:
    """Uniform delay scan over one unambiguous span [0, 1/delta_f)."""

    delta_f: float
    num_points: int

    def __post_init__(self):
        if self.num_points < 1:
            raise ValueError("delay grid must contain at least one point")
        if self.delta_f <= 0:
            raise ValueError("delta_f must be > 0")

    @property
    def step(self) -> float:
        return 1.0 / (self.delta_f * self.num_points)

    @property
    def zetas(self) -> np.ndarray:
        return np.arange(self.num_points) * self.step


def default_delay_grid(L: int, delta_f: float,
                       oversample: int = DEFAULT_OVERSAMPLE) -> DelayGrid:
    """Grid with resolution 1/(oversample * L * delta_f), at least 32x L."""
    return DelayGrid(delta_f=delta_f, num_points=int(oversample) * int(L))


@dataclass
class EstimationResult:
    """Point estimates produced by any of the estimators."""

    p_u_hat: np.ndarray
    zeta_au_hat: float
    zeta_ru_hat: float
    psi_hat: float
    phi_hat: float
    alpha_au_hat: complex
    alpha_ru_hat: complex
    support_index: int
    rho_hat: float
    failure_flag: bool = False
    trace: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.failure_flag and np.isfinite(self.rho_hat) and self.rho_hat < 0:
            raise ValueError("rho_hat must be non-negative for a successful estimate")


def _matched_filter_mag(mu: np.ndarray, delta_f: float, zeta) -> np.ndarray:
    """|phi(zeta)^H mu| for scalar or vector zeta."""
    l = np.arange(mu.shape[0])
    z = np.atleast_1d(np.asarray(zeta, dtype=float))
    corr = np.exp(2j * np.pi * np.outer(z, l) * delta_f) @ mu
    return np.abs(corr)


def extract_delay(mu_phase: np.ndarray, delta_f: float,
                  search: Optional[DelayGrid] = None) -> float:
    """Delay whose signature best matches ``mu_phase``.

    Scans |phi(zeta)^H mu| on the grid (via zero-padded inverse FFT), applies
    one three-point parabolic refinement around the winning cell, then
    polishes with a bounded scalar maximization one grid step either side.
    The result is invariant to a complex rescaling of ``mu_phase``.
    """
    mu = np.asarray(mu_phase, dtype=complex).reshape(-1)
    L = mu.shape[0]
    if search is None:
        search = default_delay_grid(L, delta_f)
    G = search.num_points
    if G < L:
        raise ValueError("delay grid coarser than the signature length")
    # phi(zeta_m)^H mu = sum_l mu_l exp(+j 2 pi l m / G) = G * ifft(mu, n=G)[m]
    mags = np.abs(np.fft.ifft(mu, n=G)) * G
    m0 = int(np.argmax(mags))
    step = search.step
    # parabolic refinement on cyclic neighbors (the signature is periodic in zeta)
    ym, y0, yp = mags[(m0 - 1) % G], mags[m0], mags[(m0 + 1) % G]
    denom = ym - 2.0 * y0 + yp
    shift = 0.0 if denom == 0.0 else 0.5 * (ym - yp) / denom
    shift = float(np.clip(shift, -0.5, 0.5))
    zeta0 = (m0 + shift) * step
    if G > 1:
        res = minimize_scalar(lambda z: -_matched_filter_mag(mu, delta_f, z)[0],
                              bounds=(zeta0 - step, zeta0 + step), method="bounded",
                              options={"xatol": step * 1e-9})
        zeta0 = float(res.x)
    return float(zeta0 % (1.0 / delta_f))


# ---------------------------------------------------------------------------
# range along the departure ray
# ---------------------------------------------------------------------------

def _range_residual(rho, zeta_au: float, zeta_ru: float, p_a, p_r, u, c: float):
    """Mismatch between the direct-path delay implied by a candidate range and
    the measured one: d_ar + rho - ||p_r + rho u - p_a|| - c (zeta_ru - zeta_au)."""
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    d_ar = np.linalg.norm(np.subtract(p_a, p_r))
    pts = np.asarray(p_r)[None, :] + rho[:, None] * np.asarray(u)[None, :]
    dau = np.linalg.norm(pts - np.asarray(p_a)[None, :], axis=1)
    return d_ar + rho - dau - c * (zeta_ru - zeta_au)


def solve_rho_numeric(zeta_au: float, zeta_ru: float, p_a, p_r, u,
                      c: float, n_coarse: int = 512) -> Optional[float]:
    """RIS-user range minimizing the squared delay-consistency residual.

    Scans (0, 2 c zeta_ru] coarsely, then runs a bounded scalar minimization
    in the winning cell.  Returns None (failure) when the total delay cannot
    reach the AP-RIS baseline or no interior minimum exists; with slightly
    inconsistent (noisy) delays the returned value is the interior stationary
    point of the squared residual.
    """
    d_ar = float(np.linalg.norm(np.subtract(p_a, p_r)))
    if zeta_ru * c <= d_ar - 1e-9 * max(d_ar, 1.0):
        return None
    rho_max = 2.0 * zeta_ru * c
    if not np.isfinite(rho_max) or rho_max <= 0:
        return None
    grid = np.linspace(rho_max / n_coarse, rho_max, n_coarse)
    sq = _range_residual(grid, zeta_au, zeta_ru, p_a, p_r, u, c) ** 2
    i0 = int(np.argmin(sq))
    lo = grid[max(i0 - 1, 0)] if i0 > 0 else 0.0
    hi = grid[min(i0 + 1, n_coarse - 1)]
    if hi <= lo:
        return None
    res = minimize_scalar(
        lambda r: float(_range_residual(r, zeta_au, zeta_ru, p_a, p_r, u, c) ** 2),
        bounds=(lo, hi), method="bounded", options={"xatol": 1e-12 * rho_max})
    rho = float(res.x)
    span = hi - lo
    # a minimizer pinned to the scan boundary means no interior minimum
    if rho <= 1e-6 * rho_max or rho >= rho_max - 1e-6 * span:
        return None
    return rho


def solve_rho_closed(zeta_au: float, zeta_ru: float, p_a, p_r, u,
                     c: float) -> Optional[float]:
    """Closed-form range from the delay difference.

    With k = c (zeta_ru - zeta_au) - d_ar the consistency condition
    ||rho u - (p_a - p_r)|| = rho - k squares to a linear equation with root

        rho = (k^2 - d_ar^2) / (2 (k - u . (p_a - p_r))).

    Returns None when the denominator is near-degenerate (user ray nearly
    tangent to the delay ellipsoid).
    """
    p_a = np.asarray(p_a, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    u = np.asarray(u, dtype=float)
    v = p_a - p_r
    d_ar = float(np.linalg.norm(v))
    k = c * (zeta_ru - zeta_au) - d_ar
    denom = 2.0 * (k - float(u @ v))
    scale = max(abs(k), d_ar, 1e-30)
    if abs(denom) < 1e-12 * scale:
        return None
    rho = (k * k - d_ar * d_ar) / denom
    if not np.isfinite(rho) or rho <= 0:
        return None
    return float(rho)


def user_position(p_r, psi: float, phi: float, rho: float) -> np.ndarray:
    """Point at range ``rho`` from ``p_r`` along direction (psi, phi)."""
    return np.asarray(p_r, dtype=float) + rho * direction(psi, phi)
