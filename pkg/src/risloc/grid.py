"""Angular dictionary over a P x Q azimuth/polar grid.

The reflected path is represented sparsely on a uniform grid of candidate
departure directions covering psi, phi in [-pi/2, pi/2].  Column
k = (p - 1) Q + (q - 1) of the dictionary is the RIS steering vector toward
(psi_p, phi_q); in near-field mode the columns are evaluated at a fixed
reference range (the current range estimate) and refreshed only when that
estimate moves substantially.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import FieldMode, ScenarioConfig, steering_far, steering_near

GRID_SPAN = (-np.pi / 2.0, np.pi / 2.0)


@dataclass
class AngularGrid:
    """Uniform candidate grid: ``psi_points`` (P,) by ``phi_points`` (Q,)."""

    P: int
    Q: int
    psi_points: np.ndarray
    phi_points: np.ndarray

    def index_of(self, p: int, q: int) -> int:
        """Flat column index for 1-based grid coordinates (p, q)."""
        if not (1 <= p <= self.P and 1 <= q <= self.Q):
            raise ValueError(f"grid coordinate ({p}, {q}) outside 1..{self.P} x 1..{self.Q}")
        return (p - 1) * self.Q + (q - 1)

    def angles_at(self, k: int) -> tuple[float, float]:
        """(psi, phi) of flat column index k."""
        if not (0 <= k < self.P * self.Q):
            raise ValueError(f"flat index {k} outside 0..{self.P * self.Q - 1}")
        return float(self.psi_points[k // self.Q]), float(self.phi_points[k % self.Q])


@dataclass
class AngularDictionary:
    """Steering dictionary ``A`` of shape (M*N, P*Q) over ``grid``.

    ``range_m`` records the reference range used for near-field columns
    (None in far-field mode).
    """

    A: np.ndarray
    grid: AngularGrid
    field_mode: FieldMode
    range_m: Optional[float] = None


@dataclass
class SparseChannel:
    """Sparse reflected-path representation: coefficient vector over the grid
    with at most one active entry at ``support_index``."""

    delta_ru: np.ndarray
    support_index: int


def build_grid(P: int, Q: int) -> AngularGrid:
    """Equally spaced grid spanning [-pi/2, pi/2] in both angles.

    With a single point the grid degenerates to the span midpoint 0.
    """
    if P < 1 or Q < 1:
        raise ValueError("grid sizes must be positive")
    lo, hi = GRID_SPAN
    psi = np.linspace(lo, hi, P) if P > 1 else np.array([(lo + hi) / 2.0])
    phi = np.linspace(lo, hi, Q) if Q > 1 else np.array([(lo + hi) / 2.0])
    return AngularGrid(P=P, Q=Q, psi_points=psi, phi_points=phi)


def build_dictionary(cfg: ScenarioConfig, grid: AngularGrid,
                     range_m: Optional[float] = None) -> AngularDictionary:
    """Assemble the (M*N, P*Q) steering dictionary column by column.

    Far-field columns depend on direction only.  Near-field columns require a
    reference ``range_m`` at which the spherical wavefront is evaluated.
    """
    if cfg.field_mode is FieldMode.NEAR:
        if range_m is None or range_m <= 0:
            raise ValueError("near-field dictionary requires a positive reference range")
    cols = np.empty((cfg.MN, grid.P * grid.Q), dtype=complex)
    for k in range(grid.P * grid.Q):
        psi, phi = grid.angles_at(k)
        if cfg.field_mode is FieldMode.NEAR:
            cols[:, k] = steering_near(cfg, psi, phi, range_m)
        else:
            cols[:, k] = steering_far(cfg, psi, phi)
    return AngularDictionary(A=cols, grid=grid, field_mode=cfg.field_mode,
                             range_m=range_m if cfg.field_mode is FieldMode.NEAR else None)


def nearest_index(grid: AngularGrid, psi: float, phi: float) -> int:
    """Flat index of the grid point minimizing max(|psi - psi_p|, |phi - phi_q|).

    Ties resolve to the lower flat index; angles outside the grid span raise.
    """
    lo, hi = GRID_SPAN
    if not (lo <= psi <= hi and lo <= phi <= hi):
        raise ValueError(f"angles ({psi:.4f}, {phi:.4f}) outside grid span [{lo:.4f}, {hi:.4f}]")
    dpsi = np.abs(grid.psi_points[:, None] - psi)  # (P, 1)
    dphi = np.abs(grid.phi_points[None, :] - phi)  # (1, Q)
    cheb = np.maximum(dpsi, dphi)  # (P, Q), row p, col q
    return int(np.argmin(cheb.reshape(-1)))  # row-major = (p) * Q + q, lower index on ties


def mirror_index(grid: AngularGrid, support: int) -> Optional[int]:
    """Grid index of the azimuth parity twin (-psi, phi), when it exists.

    The RIS elements lie in the x-z plane, so the array response is even in
    the azimuth sign: steering columns at (psi, phi) and (-psi, phi) are
    identical, and any estimator that scores dictionary columns cannot tell
    the two sides apart without extra delay information.
    """
    psi, phi = grid.angles_at(support)
    if abs(psi) < 1e-12:
        return None
    try:
        twin = nearest_index(grid, -psi, phi)
    except ValueError:
        return None
    tpsi, tphi = grid.angles_at(twin)
    if twin != support and abs(tpsi + psi) < 1e-9 and abs(tphi - phi) < 1e-9:
        return twin
    return None
