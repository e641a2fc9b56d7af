"""Fisher information and position error bounds for the snapshot model.

Two parameterizations are provided.  ``fim`` uses the extended vector

    kappa = [p_u (3), zeta_au, zeta_ru, psi, phi]

whose position columns chain through the geometric maps delay(p), angle(p)
(and, in near-field mode, range(p)).  Because the planar-wavefront signal
depends on the position only through those four channel parameters, the
far-field kappa information matrix is singular by construction (the position
columns are exact linear combinations of the others); ``bcrb_position``
detects this and raises with the null direction.  ``gain_fim`` parameterizes
by position plus the real/imaginary parts of the two path gains

    [p_u (3), Re a_au, Im a_au, Re a_ru, Im a_ru],

which is nonsingular in both wavefront modes and is what the sweep harness
reports as the position bound.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import (FieldMode, RisProfile, ScenarioConfig, ChannelTruth,
                       ap_arrival_angles, direction, element_offsets,
                       phase_shift_vector, ris_response_rows)

KAPPA_LABELS = ["p_x", "p_y", "p_z", "zeta_au", "zeta_ru", "psi", "phi"]
GAIN_LABELS = ["p_x", "p_y", "p_z", "re_alpha_au", "im_alpha_au",
               "re_alpha_ru", "im_alpha_ru"]

COND_LIMIT = 1e14
RIDGE = 1e-12


class UnboundedBoundError(RuntimeError):
    """The information matrix is singular: some direction is unobservable."""

    def __init__(self, null_direction: np.ndarray, labels):
        self.null_direction = null_direction
        self.labels = list(labels)
        worst = int(np.argmax(np.abs(null_direction)))
        super().__init__(
            "singular Fisher matrix: position bound is unbounded along "
            f"null direction {np.array2string(null_direction, precision=3)} "
            f"(dominant parameter '{self.labels[worst]}')")


@dataclass
class FisherMatrix:
    """Real symmetric information matrix with its parameter labels."""

    J: np.ndarray
    labels: list

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float)
        if self.J.ndim != 2 or self.J.shape[0] != self.J.shape[1]:
            raise ValueError("J must be square")
        if len(self.labels) != self.J.shape[0]:
            raise ValueError("labels must match J dimension")


# ---------------------------------------------------------------------------
# steering-vector derivatives
# ---------------------------------------------------------------------------

def _du(psi: float, phi: float):
    """Direction vector and its angle derivatives."""
    u = direction(psi, phi)
    du_dpsi = np.array([-np.sin(phi) * np.sin(psi), np.sin(phi) * np.cos(psi), 0.0])
    du_dphi = np.array([np.cos(phi) * np.cos(psi), np.cos(phi) * np.sin(psi), -np.sin(phi)])
    return u, du_dpsi, du_dphi


def steering_derivatives(cfg: ScenarioConfig, psi: float, phi: float, rho: float):
    """(a, da/dpsi, da/dphi, da/drho) of the user-side steering vector.

    Far-field mode has no range dependence (da/drho = 0).
    """
    k0 = 2.0 * np.pi / cfg.wavelength
    offs = element_offsets(cfg)
    u, du_dpsi, du_dphi = _du(psi, phi)
    if cfg.field_mode is FieldMode.FAR:
        a = np.exp(1j * k0 * (offs @ u))
        da_dpsi = 1j * k0 * (offs @ du_dpsi) * a
        da_dphi = 1j * k0 * (offs @ du_dphi) * a
        return a, da_dpsi, da_dphi, np.zeros_like(a)
    # spherical model: phase_k = k0 [offs_k . u - curv_k / (2 r_k)]
    diff = rho * u[None, :] - offs                     # element-to-user
    r = np.linalg.norm(diff, axis=1)
    curv = ((1.0 - u[None, :] ** 2) * offs**2).sum(axis=1)
    interior = np.linalg.norm(offs, axis=1) > 0
    inv2r = np.where(interior, 1.0 / (2.0 * r), 0.0)
    a = np.exp(1j * k0 * (offs @ u - curv * inv2r))

    def dphase(du_vec):
        dcurv = (-2.0 * u[None, :] * du_vec[None, :] * offs**2).sum(axis=1)
        dr = (diff @ (rho * du_vec)) / r
        return offs @ du_vec - dcurv * inv2r + np.where(interior, curv * dr / (2.0 * r**2), 0.0)

    dr_drho = (diff @ u) / r
    dphase_drho = np.where(interior, curv * dr_drho / (2.0 * r**2), 0.0)
    return (a, 1j * k0 * dphase(du_dpsi) * a, 1j * k0 * dphase(du_dphi) * a,
            1j * k0 * dphase_drho * a)


def phase_shift_derivative(zeta: float, L: int, delta_f: float) -> np.ndarray:
    """d phi(zeta)/d zeta: entry l = (-j 2 pi l delta_f) exp(-j 2 pi l delta_f zeta)."""
    l = np.arange(L)
    return -2j * np.pi * l * delta_f * phase_shift_vector(zeta, L, delta_f)


# ---------------------------------------------------------------------------
# geometric gradients
# ---------------------------------------------------------------------------

def geometry_gradients(cfg: ScenarioConfig, truth: ChannelTruth) -> dict:
    """Gradients of the channel parameters w.r.t. the user position at truth."""
    p_u = cfg.p_u_true
    u = direction(truth.psi, truth.phi)
    d_au = np.linalg.norm(p_u - cfg.p_a)
    sphi = np.sin(truth.phi)
    if d_au == 0 or truth.rho == 0:
        raise ValueError("degenerate geometry: coincident nodes")
    if abs(sphi) < 1e-12:
        raise ValueError("azimuth gradient undefined on the polar axis (phi = 0 or pi)")
    return {
        "zeta_au": (p_u - cfg.p_a) / (cfg.c * d_au),
        "zeta_ru": u / cfg.c,
        "psi": np.array([-np.sin(truth.psi), np.cos(truth.psi), 0.0]) / (truth.rho * sphi),
        "phi": np.array([np.cos(truth.phi) * np.cos(truth.psi),
                         np.cos(truth.phi) * np.sin(truth.psi),
                         -sphi]) / truth.rho,
        "rho": u,
    }


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

def _signal_pieces(cfg: ScenarioConfig, truth: ChannelTruth, profile: RisProfile) -> dict:
    ph_au = phase_shift_vector(truth.zeta_au, cfg.L, cfg.delta_f)
    ph_ru = phase_shift_vector(truth.zeta_ru, cfg.L, cfg.delta_f)
    dph_au = phase_shift_derivative(truth.zeta_au, cfg.L, cfg.delta_f)
    dph_ru = phase_shift_derivative(truth.zeta_ru, cfg.L, cfg.delta_f)
    a, da_dpsi, da_dphi, da_drho = steering_derivatives(cfg, truth.psi, truth.phi, truth.rho)
    ups = ris_response_rows(cfg, profile, truth.theta, truth.vartheta)
    return dict(ph_au=ph_au, ph_ru=ph_ru, dph_au=dph_au, dph_ru=dph_ru,
                a=a, da_dpsi=da_dpsi, da_dphi=da_dphi, da_drho=da_drho, ups=ups)


def _kappa_jacobian_t(cfg, truth, pieces, t) -> np.ndarray:
    sqp = np.sqrt(cfg.P_w)
    up_t = pieces["ups"][t]
    g = up_t @ pieces["a"]
    d_zeta_au = truth.alpha_au * sqp * pieces["dph_au"]
    d_zeta_ru = truth.alpha_ru * sqp * g * pieces["dph_ru"]
    d_psi = truth.alpha_ru * sqp * (up_t @ pieces["da_dpsi"]) * pieces["ph_ru"]
    d_phi = truth.alpha_ru * sqp * (up_t @ pieces["da_dphi"]) * pieces["ph_ru"]
    grads = geometry_gradients(cfg, truth)
    d_pos = (np.outer(d_zeta_au, grads["zeta_au"]) + np.outer(d_zeta_ru, grads["zeta_ru"])
             + np.outer(d_psi, grads["psi"]) + np.outer(d_phi, grads["phi"]))
    if cfg.field_mode is FieldMode.NEAR:
        d_rho = truth.alpha_ru * sqp * (up_t @ pieces["da_drho"]) * pieces["ph_ru"]
        d_pos = d_pos + np.outer(d_rho, grads["rho"])
    out = np.empty((cfg.L, 7), dtype=complex)
    out[:, 0:3] = d_pos
    out[:, 3] = d_zeta_au
    out[:, 4] = d_zeta_ru
    out[:, 5] = d_psi
    out[:, 6] = d_phi
    return out


def signal_jacobian(cfg: ScenarioConfig, truth: ChannelTruth, profile: RisProfile,
                    t: int) -> np.ndarray:
    """Jacobian of snapshot t w.r.t. kappa = [p_u, zeta_au, zeta_ru, psi, phi],
    shape (L, 7).  Position columns chain through all channel parameters."""
    pieces = _signal_pieces(cfg, truth, profile)
    return _kappa_jacobian_t(cfg, truth, pieces, t)


def _gain_jacobian_t(cfg, truth, pieces, t) -> np.ndarray:
    kappa = _kappa_jacobian_t(cfg, truth, pieces, t)
    sqp = np.sqrt(cfg.P_w)
    g = pieces["ups"][t] @ pieces["a"]
    out = np.empty((cfg.L, 7), dtype=complex)
    out[:, 0:3] = kappa[:, 0:3]
    out[:, 3] = sqp * pieces["ph_au"]
    out[:, 4] = 1j * sqp * pieces["ph_au"]
    out[:, 5] = sqp * g * pieces["ph_ru"]
    out[:, 6] = 1j * sqp * g * pieces["ph_ru"]
    return out


def _accumulate_fim(cfg, truth, profile, jac_t, labels) -> FisherMatrix:
    pieces = _signal_pieces(cfg, truth, profile)
    T = profile.omega.shape[0]
    n = len(labels)
    j = np.zeros((n, n))
    for t in range(T):
        d = jac_t(cfg, truth, pieces, t)
        j += np.real(d.conj().T @ d)
    j *= 2.0 / cfg.delta
    return FisherMatrix(J=0.5 * (j + j.T), labels=list(labels))


def fim(cfg: ScenarioConfig, truth: ChannelTruth, profile: RisProfile) -> FisherMatrix:
    """Information matrix over kappa: J = (2/delta) sum_t Re(D_t^H D_t) at truth."""
    return _accumulate_fim(cfg, truth, profile, _kappa_jacobian_t, KAPPA_LABELS)


def gain_fim(cfg: ScenarioConfig, truth: ChannelTruth, profile: RisProfile) -> FisherMatrix:
    """Information matrix over [p_u, Re/Im alpha_au, Re/Im alpha_ru]: position
    with the complex path gains as nuisance parameters."""
    return _accumulate_fim(cfg, truth, profile, _gain_jacobian_t, GAIN_LABELS)


# ---------------------------------------------------------------------------
# position bound
# ---------------------------------------------------------------------------

def bcrb_position(fimK: FisherMatrix) -> float:
    """Root-sum-variance position bound sqrt(tr [J^{-1}]_{0:3,0:3}).

    A numerically singular J raises :class:`UnboundedBoundError` with the
    null-space direction; a finite but extreme condition number (> 1e14) is
    handled by adding a 1e-12 ridge, reported as a warning.  The full-inverse
    route is cross-checked against the Schur complement of the nuisance block
    to 1e-8 relative.
    """
    j = fimK.J
    n = j.shape[0]
    if n < 4:
        raise ValueError("need at least one nuisance parameter beyond position")
    diag = np.diagonal(j).copy()
    if np.min(diag) <= 0:
        k = int(np.argmin(diag))
        e = np.zeros(n)
        e[k] = 1.0
        raise UnboundedBoundError(e, fimK.labels)
    # detect rank deficiency on the unit-diagonal scaling, where roundoff is
    # commensurate across parameters of wildly different physical units
    scale = 1.0 / np.sqrt(diag)
    jn = j * np.outer(scale, scale)
    evn, evecn = np.linalg.eigh(jn)
    if evn[0] <= 1e-12 * evn[-1]:
        null = evecn[:, 0] * scale
        raise UnboundedBoundError(null / np.linalg.norm(null), fimK.labels)
    evals = np.linalg.eigvalsh(j)
    emax, emin = float(evals[-1]), float(evals[0])
    if emin <= 0 or emax / emin > COND_LIMIT:
        cond = np.inf if emin <= 0 else emax / emin
        warnings.warn(f"ill-conditioned Fisher matrix (cond={cond:.2e}); "
                      f"adding {RIDGE:g} ridge", RuntimeWarning)
        j = j + RIDGE * np.eye(n)
    jinv = np.linalg.inv(j)
    tr_full = float(np.trace(jinv[:3, :3]))
    # Schur route: position covariance = (J11 - J12 J22^{-1} J12^T)^{-1}
    j11, j12, j22 = j[:3, :3], j[:3, 3:], j[3:, 3:]
    schur = j11 - j12 @ np.linalg.solve(j22, j12.T)
    tr_schur = float(np.trace(np.linalg.inv(schur)))
    if abs(tr_full - tr_schur) > 1e-8 * max(abs(tr_full), abs(tr_schur)):
        raise RuntimeError("full-inverse and Schur-complement bounds disagree: "
                           f"{tr_full:.12e} vs {tr_schur:.12e}")
    return float(np.sqrt(tr_full))


def position_bound(cfg: ScenarioConfig, truth: ChannelTruth,
                   profile: RisProfile) -> float:
    """Position bound reported by the harness: gains-as-nuisance information."""
    return bcrb_position(gain_fim(cfg, truth, profile))
