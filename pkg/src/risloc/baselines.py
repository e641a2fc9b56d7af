"""Reference estimators: particle-swarm likelihood search and a two-stage
maximum-likelihood peak picker.

Both work from the same snapshot set as the variational engine and have no
access to the ground truth; the swarm evaluates the exact snapshot likelihood
at candidate user positions with the path gains pinned to their prior means,
while the ML baseline estimates delays from oversampled IDFT profiles, the
departure direction from the dictionary correlation, and the position from
the delay-consistency range solve.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import (FieldMode, ScenarioConfig, SnapshotSet, ap_arrival_angles,
                       direction, element_offsets, ris_response_rows)
from .grid import GRID_SPAN, AngularDictionary, mirror_index, nearest_index
from .locate import EstimationResult, solve_rho_numeric, user_position


@dataclass
class PsoConfig:
    """Swarm settings; ``search_box`` is an axis-aligned (lo, hi) pair."""

    particles: int = 200
    iterations: int = 100
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    search_box: Optional[tuple] = None

    def __post_init__(self):
        if self.particles < 2:
            raise ValueError("need at least 2 particles")
        if self.iterations < 1:
            raise ValueError("need at least 1 iteration")


# ---------------------------------------------------------------------------
# batched likelihood over candidate positions
# ---------------------------------------------------------------------------

def _batch_geometry(cfg: ScenarioConfig, X: np.ndarray):
    """Delays, angles and RIS-relative geometry for candidate positions X (n, 3)."""
    d_au = np.linalg.norm(X - cfg.p_a[None, :], axis=1)
    rel = X - cfg.p_r[None, :]
    rho = np.linalg.norm(rel, axis=1)
    rho = np.maximum(rho, 1e-9)  # guard candidates that land on the RIS
    d_ar = np.linalg.norm(cfg.p_a - cfg.p_r)
    zeta_au = d_au / cfg.c
    zeta_ru = (d_ar + rho) / cfg.c
    u = rel / rho[:, None]
    return zeta_au, zeta_ru, u, rho


def _batch_user_steering(cfg: ScenarioConfig, u: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """User-side steering vectors for unit directions u (n, 3) at ranges rho,
    shape (M*N, n)."""
    k0 = 2.0 * np.pi / cfg.wavelength
    offs = element_offsets(cfg)
    planar = offs @ u.T  # (MN, n)
    if cfg.field_mode is FieldMode.NEAR:
        rel = rho[:, None] * u  # (n, 3)
        diff = rel[None, :, :] - offs[:, None, :]  # (MN, n, 3)
        r = np.linalg.norm(diff, axis=2)
        curv = (offs**2) @ (1.0 - u.T**2)  # (MN, n)
        interior = (np.linalg.norm(offs, axis=1) > 0)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            fresnel = np.where(interior, curv / (2.0 * r), 0.0)
        planar = planar - fresnel
    return np.exp(1j * k0 * planar)


def batch_log_likelihood(cfg: ScenarioConfig, snap: SnapshotSet, X: np.ndarray,
                         alpha_au: complex, alpha_ru: complex) -> np.ndarray:
    """Snapshot log-likelihood of each candidate position (rows of X) with the
    path gains held at the supplied values.  Matches
    :func:`risloc.geometry.log_likelihood` evaluated pointwise."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    L, T = snap.R.shape
    zeta_au, zeta_ru, u, rho = _batch_geometry(cfg, X)
    l_idx = np.arange(L)
    p_au = np.exp(-2j * np.pi * np.outer(l_idx, zeta_au) * cfg.delta_f)  # (L, n)
    p_ru = np.exp(-2j * np.pi * np.outer(l_idx, zeta_ru) * cfg.delta_f)
    theta, vartheta = ap_arrival_angles(cfg)
    ups = ris_response_rows(cfg, snap.profile, theta, vartheta)
    b = _batch_user_steering(cfg, u, rho)  # (MN, n)
    C = ups @ b  # (T, n)
    sqp = np.sqrt(cfg.P_w)
    R = snap.R
    r_norm2 = float(np.sum(np.abs(R) ** 2))
    # <R, Xi> decomposed over the two paths
    dot_au = alpha_au * sqp * (R.conj().sum(axis=1) @ p_au)  # (n,)
    cross_rt = R.conj().T @ p_ru  # (T, n)
    dot_ru = alpha_ru * sqp * np.einsum("tn,tn->n", C, cross_rt)
    # ||Xi||^2: per-path energies plus the cross term
    e_au = cfg.P_w * abs(alpha_au) ** 2 * T * L
    e_ru = cfg.P_w * abs(alpha_ru) ** 2 * L * np.sum(np.abs(C) ** 2, axis=0)
    pp = np.einsum("ln,ln->n", p_au.conj(), p_ru)  # phi(z_au)^H phi(z_ru) per candidate
    e_x = 2.0 * np.real(np.conj(alpha_au) * alpha_ru * cfg.P_w * pp * C.sum(axis=0))
    resid = r_norm2 - 2.0 * np.real(dot_au + dot_ru) + e_au + e_ru + e_x
    return -resid / cfg.delta


# ---------------------------------------------------------------------------
# particle swarm
# ---------------------------------------------------------------------------

def pso_localize(cfg: ScenarioConfig, snap: SnapshotSet, dic: AngularDictionary,
                 pso: PsoConfig, gain_means: tuple, rng: np.random.Generator,
                 ) -> EstimationResult:
    """Global likelihood search over the user position inside ``search_box``.

    Standard inertia-weight swarm with reflecting box bounds; the path gains
    stay at ``gain_means = (alpha_au, alpha_ru)`` throughout (only prior
    knowledge, no ground truth).  Deterministic given ``rng``.
    """
    if pso.search_box is None:
        raise ValueError("pso_localize requires a search box")
    lo = np.asarray(pso.search_box[0], dtype=float)
    hi = np.asarray(pso.search_box[1], dtype=float)
    if np.any(hi <= lo):
        raise ValueError("search box must have positive extent on every axis")
    alpha_au, alpha_ru = gain_means
    n = pso.particles
    width = hi - lo

    def f(X):
        return batch_log_likelihood(cfg, snap, X, alpha_au, alpha_ru)

    X = lo[None, :] + rng.random((n, 3)) * width[None, :]
    V = (rng.random((n, 3)) - 0.5) * 0.2 * width[None, :]
    pbest_x = X.copy()
    pbest_f = f(X)
    g_idx = int(np.argmax(pbest_f))
    gbest_x = pbest_x[g_idx].copy()
    gbest_f = float(pbest_f[g_idx])
    for _ in range(pso.iterations):
        r1 = rng.random((n, 3))
        r2 = rng.random((n, 3))
        V = (pso.inertia * V + pso.cognitive * r1 * (pbest_x - X)
             + pso.social * r2 * (gbest_x[None, :] - X))
        X = X + V
        # reflect at the box walls, flipping the offending velocity component
        for b, sgn in ((lo[None, :], 1.0), (hi[None, :], -1.0)):
            mask = (X - b) * sgn < 0
            X = np.where(mask, 2 * b - X, X)
            V = np.where(mask, -V, V)
        X = np.clip(X, lo[None, :], hi[None, :])
        fx = f(X)
        better = fx > pbest_f
        pbest_x[better] = X[better]
        pbest_f[better] = fx[better]
        g_idx = int(np.argmax(pbest_f))
        if pbest_f[g_idx] > gbest_f:
            gbest_f = float(pbest_f[g_idx])
            gbest_x = pbest_x[g_idx].copy()
    zeta_au, zeta_ru, u, rho = _batch_geometry(cfg, gbest_x[None, :])
    psi = float(np.arctan2(u[0, 1], u[0, 0]))
    phi = float(np.arccos(np.clip(u[0, 2], -1.0, 1.0)))
    lo_span, hi_span = GRID_SPAN
    if lo_span <= psi <= hi_span and lo_span <= phi <= hi_span:
        support = nearest_index(dic.grid, psi, phi)
    else:
        support = -1
    return EstimationResult(
        p_u_hat=gbest_x, zeta_au_hat=float(zeta_au[0]), zeta_ru_hat=float(zeta_ru[0]),
        psi_hat=psi, phi_hat=phi, alpha_au_hat=complex(alpha_au),
        alpha_ru_hat=complex(alpha_ru), support_index=support,
        rho_hat=float(rho[0]), failure_flag=False)


# ---------------------------------------------------------------------------
# two-stage ML peak picking
# ---------------------------------------------------------------------------

def delay_profile(vec: np.ndarray, num_points: int) -> np.ndarray:
    """|phi(zeta_m)^H vec| on the uniform delay grid zeta_m = m/(num_points df),
    computed with one zero-padded inverse DFT."""
    vec = np.asarray(vec, dtype=complex).reshape(-1)
    if num_points < vec.shape[0]:
        raise ValueError("profile grid must be at least as long as the vector")
    return np.abs(np.fft.ifft(vec, n=num_points)) * num_points


def _refine_peak(objective, m0: int, num_points: int, delta_f: float,
                 mags: np.ndarray) -> float:
    """Parabolic step around bin m0 followed by a bounded 1-D polish of the
    continuous objective; returns a delay in [0, 1/delta_f)."""
    step = 1.0 / (delta_f * num_points)
    ym = mags[(m0 - 1) % num_points]
    y0 = mags[m0]
    yp = mags[(m0 + 1) % num_points]
    den = ym - 2.0 * y0 + yp
    shift = 0.0 if den == 0.0 else float(np.clip(0.5 * (ym - yp) / den, -0.5, 0.5))
    z0 = (m0 + shift) * step
    res = minimize_scalar(lambda z: -objective(z), bounds=(z0 - step, z0 + step),
                          method="bounded", options={"xatol": step * 1e-9})
    return float(res.x) % (1.0 / delta_f)


def ml_localize(cfg: ScenarioConfig, snap: SnapshotSet, dic: AngularDictionary,
                oversample: int = 16, peak_ratio: float = 4.0) -> EstimationResult:
    """Two-stage delay/angle/position estimator.

    Stage 1 separates the two delays by their snapshot behaviour: the
    snapshot-varying component is fitted on the noncoherent spectrum of the
    raw data, its per-column least-squares contribution is cancelled, and
    the snapshot-coherent component is fitted on the coherent average of the
    residual; one refit round with the other component removed sharpens
    both.  The smaller delay is the direct path, the larger the reflected
    one (the reflected route through the RIS is strictly longer).  Stage 2
    correlates the reflected-path snapshot gains against the dictionary for
    the departure direction (the parity twin resolved by delay consistency),
    and the range solve turns the delay difference into a position.  Fails
    (flag, no exception) when fewer than two usable peaks stand out of the
    residual floor.
    """
    L, T = snap.R.shape
    R = snap.R
    G = max(int(oversample), 16) * L
    step = 1.0 / (cfg.delta_f * G)
    l_idx = np.arange(L)

    def mf(vec):
        def obj(z):
            return float(np.abs(np.exp(2j * np.pi * l_idx * cfg.delta_f * z) @ vec))
        return obj

    def cancel(zeta):
        """Original data minus the per-column LS component at ``zeta``."""
        ph = np.exp(-2j * np.pi * l_idx * cfg.delta_f * zeta)
        return R - np.outer(ph, (ph.conj() @ R) / L)

    def noncoherent_peak(residual):
        """Refined strongest delay of the noncoherent residual spectrum."""
        prof = np.sum(np.abs(np.fft.ifft(residual, n=G, axis=0) * G) ** 2, axis=1)
        m = int(np.argmax(prof))

        def obj(z):
            probe = np.exp(2j * np.pi * l_idx * cfg.delta_f * z)
            return float(np.sum(np.abs(probe @ residual) ** 2))

        return _refine_peak(obj, m, G, cfg.delta_f, prof), prof, m

    def coherent_peak(residual):
        """Refined strongest delay of the coherent snapshot average."""
        rbar = residual.mean(axis=1)
        prof = delay_profile(rbar, G)
        m = int(np.argmax(prof))
        return _refine_peak(mf(rbar), m, G, cfg.delta_f, prof), prof, m

    # Stage 1a: the component whose gain changes from snapshot to snapshot
    # (the reflected path, re-weighted by every RIS profile) dominates the
    # noncoherent spectrum of the raw data, where the coherent path is
    # fainter relative to it than in any average.
    zeta_nc, _, _ = noncoherent_peak(R)
    # Stage 1b: the coherent component from the snapshot average of the
    # residual; averaging suppresses whatever the cancellation left of the
    # snapshot-varying path while adding the coherent path up in phase.
    zeta_c, prof2, m2 = coherent_peak(cancel(zeta_nc))
    floor = float(np.median(prof2))
    if prof2[m2] <= peak_ratio * floor or not np.isfinite(prof2[m2]):
        return _ml_failure(cfg)
    # One refit round with the other component removed: the first fits are
    # pulled off-peak by mutual interference, and a cancellation centered
    # off-peak leaves a residue that biases everything downstream.
    zeta_nc, _, _ = noncoherent_peak(cancel(zeta_c))
    zeta_c, _, _ = coherent_peak(cancel(zeta_nc))
    period = 1.0 / cfg.delta_f
    sep = abs(zeta_nc - zeta_c)
    sep = min(sep, period - sep)
    if sep <= step:
        return _ml_failure(cfg)  # second peak is the residue of the first
    zeta_au, zeta_ru = (zeta_nc, zeta_c) if zeta_nc <= zeta_c else (zeta_c, zeta_nc)
    # stage 2: departure direction from reflected-path snapshot gains
    ph_au = np.exp(-2j * np.pi * l_idx * cfg.delta_f * zeta_au)
    ph_ru = np.exp(-2j * np.pi * l_idx * cfg.delta_f * zeta_ru)
    r_ref = R - np.outer(ph_au, (ph_au.conj() @ R) / L)  # direct path removed
    z = (ph_ru.conj() @ r_ref) / L  # (T,) ~ alpha_ru sqrt(P_w) Upsilon_t a
    theta, vartheta = ap_arrival_angles(cfg)
    ups = ris_response_rows(cfg, snap.profile, theta, vartheta)
    ua = ups @ dic.A  # (T, PQ)
    score = np.abs(ua.conj().T @ z)
    support = int(np.argmax(score))
    col = ua[:, support]
    denom = float(np.real(col.conj() @ col))
    if denom <= 0:
        return _ml_failure(cfg)
    alpha_ru_hat = complex((col.conj() @ z) / (np.sqrt(cfg.P_w) * denom))
    refl = np.sqrt(cfg.P_w) * alpha_ru_hat * np.outer(ph_ru, col)
    alpha_au_hat = complex(np.mean(ph_au.conj() @ (R - refl)) / (L * np.sqrt(cfg.P_w)))
    # The correlation cannot split the argmax column from its azimuth parity
    # twin (identical columns); the side whose solved range also matches the
    # absolute reflected delay is the physical one.
    candidates = [support]
    twin = mirror_index(dic.grid, support)
    if twin is not None:
        candidates.append(twin)
    d_ar = float(np.linalg.norm(cfg.p_a - cfg.p_r))
    best = None  # (delay mismatch, support, psi, phi, rho)
    for k in candidates:
        psi_k, phi_k = dic.grid.angles_at(k)
        rho_k = solve_rho_numeric(zeta_au, zeta_ru, cfg.p_a, cfg.p_r,
                                  direction(psi_k, phi_k), cfg.c)
        if rho_k is None:
            continue
        res_k = abs(d_ar + rho_k - cfg.c * zeta_ru)
        if best is None or res_k < best[0]:
            best = (res_k, k, psi_k, phi_k, rho_k)
    if best is None:
        res = _ml_failure(cfg)
        res.zeta_au_hat, res.zeta_ru_hat = zeta_au, zeta_ru
        res.psi_hat, res.phi_hat = dic.grid.angles_at(support)
        res.support_index = support
        return res
    _, support, psi_hat, phi_hat, rho = best
    return EstimationResult(
        p_u_hat=user_position(cfg.p_r, psi_hat, phi_hat, rho),
        zeta_au_hat=zeta_au, zeta_ru_hat=zeta_ru, psi_hat=psi_hat, phi_hat=phi_hat,
        alpha_au_hat=alpha_au_hat, alpha_ru_hat=alpha_ru_hat,
        support_index=support, rho_hat=rho, failure_flag=False)


def _ml_failure(cfg: ScenarioConfig) -> EstimationResult:
    nanv = float("nan")
    return EstimationResult(p_u_hat=np.full(3, np.nan), zeta_au_hat=nanv,
                            zeta_ru_hat=nanv, psi_hat=nanv, phi_hat=nanv,
                            alpha_au_hat=complex(np.nan, np.nan),
                            alpha_ru_hat=complex(np.nan, np.nan),
                            support_index=-1, rho_hat=nanv, failure_flag=True)
