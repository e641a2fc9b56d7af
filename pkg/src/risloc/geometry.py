"""Scene geometry, steering vectors, and snapshot synthesis for a RIS-aided
OFDM uplink.

The scene has a single-antenna access point (AP) at ``p_a``, a planar M x N
reconfigurable intelligent surface (RIS) whose (1, 1) element sits at ``p_r``,
and a single-antenna user at ``p_u``.  Each snapshot t carries one OFDM pilot
over L subcarriers; the received L-vector is the superposition of the direct
AP-user path and a single reflected path through the RIS, whose per-snapshot
phase profile is known at the receiver.

One angle convention is used everywhere: ``phi`` is the polar angle measured
from the +z axis, ``psi`` the azimuth measured from +x in the xy-plane, and

    u(psi, phi) = [sin(phi) cos(psi), sin(phi) sin(psi), cos(phi)]

is the unit direction of departure.  All steering phases are derived from
element positions under this convention; RIS elements are laid out on the
xz-plane with spacing ``d``:

    p_r^{m,n} = p_r + [(m - 1) d, 0, (n - 1) d],   1 <= m <= M, 1 <= n <= N.

Steering vectors are vectorized row-major in m with n fastest, i.e. entry
k = (m - 1) N + (n - 1), matching the Kronecker product of the row steering
vector (length M) with the column steering vector (length N).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

SPEED_OF_LIGHT = 2.9979e8  # m/s
DEFAULT_CARRIER_HZ = 28e9  # assumed carrier for the default wavelength
DEFAULT_WAVELENGTH = SPEED_OF_LIGHT / DEFAULT_CARRIER_HZ  # ~1.07 cm
DEFAULT_SUBCARRIER_SPACING = 240e3  # Hz


class FieldMode(enum.Enum):
    """Wavefront model for the RIS-user segment."""

    FAR = "far"
    NEAR = "near"


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {np.shape(x)}")
    return v


@dataclass
class ScenarioConfig:
    """Static description of one simulated scene.

    Defaults reproduce the reference full-scale setup: AP at [100, 100, 30],
    RIS at [10, 40, 10], 20 x 20 RIS, L = 128 subcarriers at 240 kHz spacing,
    T = 80 snapshots, unit transmit power, noise variance 0.01 per complex
    entry, and a 28 GHz carrier (wavelength ~1.07 cm, half-wavelength element
    spacing).  ``P`` and ``Q`` size the azimuth/polar dictionary grid.
    """

    p_a: np.ndarray = field(default_factory=lambda: np.array([100.0, 100.0, 30.0]))
    p_r: np.ndarray = field(default_factory=lambda: np.array([10.0, 40.0, 10.0]))
    p_u_true: np.ndarray = field(default_factory=lambda: np.array([30.0, 40.0, 10.0]))
    M: int = 20
    N: int = 20
    L: int = 128
    T: int = 80
    delta_f: float = DEFAULT_SUBCARRIER_SPACING
    wavelength: float = DEFAULT_WAVELENGTH
    d: Optional[float] = None  # element spacing; defaults to wavelength / 2
    P_w: float = 1.0  # pilot power
    delta: float = 0.01  # noise variance per complex entry
    c: float = SPEED_OF_LIGHT
    field_mode: FieldMode = FieldMode.FAR
    rng_seed: int = 0
    P: int = 10  # azimuth grid size
    Q: int = 10  # polar grid size

    def __post_init__(self):
        self.p_a = _as_vec3(self.p_a)
        self.p_r = _as_vec3(self.p_r)
        self.p_u_true = _as_vec3(self.p_u_true)
        if isinstance(self.field_mode, str):
            self.field_mode = FieldMode(self.field_mode.lower())
        if self.d is None:
            self.d = self.wavelength / 2.0
        for name in ("M", "N", "L", "T", "P", "Q"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
            setattr(self, name, int(getattr(self, name)))
        if self.delta <= 0:
            raise ValueError("noise variance delta must be > 0")
        if self.d <= 0 or self.wavelength <= 0:
            raise ValueError("element spacing and wavelength must be > 0")
        if self.delta_f <= 0 or self.P_w <= 0 or self.c <= 0:
            raise ValueError("delta_f, P_w and c must be > 0")
        if np.array_equal(self.p_r, self.p_a):
            raise ValueError("RIS and AP positions must differ")
        if np.array_equal(self.p_r, self.p_u_true):
            raise ValueError("RIS and user positions must differ")

    @property
    def MN(self) -> int:
        return self.M * self.N


@dataclass
class RisProfile:
    """Known per-snapshot RIS phase profile, ``omega`` of shape (T, M*N)."""

    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=complex)
        if self.omega.ndim != 2:
            raise ValueError("omega must be a (T, M*N) matrix")


@dataclass
class ChannelTruth:
    """Ground-truth path parameters implied by a scene.

    ``theta``/``vartheta`` are the known AP-to-RIS arrival angles; ``psi``/
    ``phi`` the RIS-to-user departure angles; ``rho`` the RIS-user range.
    """

    alpha_au: complex
    alpha_ru: complex
    zeta_au: float
    zeta_ru: float
    psi: float
    phi: float
    theta: float
    vartheta: float
    rho: float

    def __post_init__(self):
        if self.zeta_au < 0 or self.zeta_ru < 0:
            raise ValueError("path delays must be non-negative")


@dataclass
class SnapshotSet:
    """Received pilots ``R`` of shape (L, T) plus the profile that produced them."""

    R: np.ndarray
    profile: RisProfile

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=complex)
        if self.R.ndim != 2:
            raise ValueError("R must be an (L, T) matrix")
        if self.R.shape[1] != self.profile.omega.shape[0]:
            raise ValueError("snapshot count of R and profile disagree")


# ---------------------------------------------------------------------------
# element layout
# ---------------------------------------------------------------------------

def element_position(cfg: ScenarioConfig, m: int, n: int) -> np.ndarray:
    """World position of RIS element (m, n), 1-based indices."""
    if not (1 <= m <= cfg.M and 1 <= n <= cfg.N):
        raise ValueError(f"element index ({m}, {n}) outside 1..{cfg.M} x 1..{cfg.N}")
    return cfg.p_r + np.array([(m - 1) * cfg.d, 0.0, (n - 1) * cfg.d])


def element_offsets(cfg: ScenarioConfig) -> np.ndarray:
    """All M*N element offsets from ``p_r``, shape (M*N, 3), n fastest."""
    m = np.arange(cfg.M)
    n = np.arange(cfg.N)
    dx = np.repeat(m, cfg.N) * cfg.d
    dz = np.tile(n, cfg.M) * cfg.d
    out = np.zeros((cfg.MN, 3))
    out[:, 0] = dx
    out[:, 2] = dz
    return out


# ---------------------------------------------------------------------------
# delays, angles, directions
# ---------------------------------------------------------------------------

def path_delays(p_a, p_r, p_u, c: float = SPEED_OF_LIGHT) -> tuple[float, float]:
    """(zeta_au, zeta_ru): direct AP-user delay and total AP-RIS-user delay."""
    p_a, p_r, p_u = _as_vec3(p_a), _as_vec3(p_r), _as_vec3(p_u)
    zeta_au = float(np.linalg.norm(p_u - p_a)) / c
    zeta_ru = float(np.linalg.norm(p_a - p_r) + np.linalg.norm(p_u - p_r)) / c
    return zeta_au, zeta_ru


def angles_and_range(p_r, p_u) -> tuple[float, float, float]:
    """Departure azimuth psi in (-pi, pi], polar phi in [0, pi], and range
    from ``p_r`` to ``p_u``."""
    p_r, p_u = _as_vec3(p_r), _as_vec3(p_u)
    v = p_u - p_r
    rho = float(np.linalg.norm(v))
    if rho == 0.0:
        raise ValueError("zero range: p_u coincides with p_r")
    phi = float(np.arccos(np.clip(v[2] / rho, -1.0, 1.0)))
    psi = float(np.arctan2(v[1], v[0]))
    return psi, phi, rho


def direction(psi: float, phi: float) -> np.ndarray:
    """Unit direction u(psi, phi) = [sin phi cos psi, sin phi sin psi, cos phi]."""
    sp = np.sin(phi)
    return np.array([sp * np.cos(psi), sp * np.sin(psi), np.cos(phi)])


# ---------------------------------------------------------------------------
# steering / phase vectors
# ---------------------------------------------------------------------------

def phase_shift_vector(zeta: float, L: int, delta_f: float) -> np.ndarray:
    """Frequency-domain delay signature phi(zeta): entry l = exp(-j 2 pi l delta_f zeta),
    l = 0..L-1."""
    l = np.arange(L)
    return np.exp(-2j * np.pi * l * delta_f * zeta)


def steering_far(cfg: ScenarioConfig, psi: float, phi: float) -> np.ndarray:
    """Planar-wavefront RIS steering vector toward direction (psi, phi).

    Entry k = (m-1) N + (n-1) is exp(+j 2 pi / lambda * u . (p_r^{m,n} - p_r)).
    Equals kron(row_steering(M), col_steering(N)).
    """
    u = direction(psi, phi)
    offs = element_offsets(cfg)
    return np.exp(2j * np.pi / cfg.wavelength * (offs @ u))


def steering_near(cfg: ScenarioConfig, psi: float, phi: float, rho: float) -> np.ndarray:
    """Spherical-wavefront (second-order Fresnel) RIS steering vector.

    Entry k keeps the planar phase u . d_k and subtracts the quadratic
    curvature term sum_i (1 - u_i^2) d_{k,i}^2 / (2 r_k), where d_k is the
    element offset from p_r and r_k the distance from element k to the user
    at p_r + rho * u.  An element with zero offset has zero curvature term,
    and the correction vanishes as rho grows, recovering ``steering_far``.
    """
    if rho <= 0:
        raise ValueError("rho must be > 0 for a near-field steering vector")
    u = direction(psi, phi)
    offs = element_offsets(cfg)
    p_u_rel = rho * u  # user position relative to p_r
    r_k = np.linalg.norm(p_u_rel[None, :] - offs, axis=1)
    planar = offs @ u
    curv = ((1.0 - u[None, :] ** 2) * offs**2).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        fresnel = np.where(np.linalg.norm(offs, axis=1) > 0, curv / (2.0 * r_k), 0.0)
    return np.exp(2j * np.pi / cfg.wavelength * (planar - fresnel))


def user_steering(cfg: ScenarioConfig, psi: float, phi: float,
                  rho: Optional[float] = None) -> np.ndarray:
    """RIS steering toward the user under the configured wavefront model.

    In near-field mode a finite ``rho`` selects the spherical model; an
    absent/infinite range falls back to the planar limit.
    """
    if cfg.field_mode is FieldMode.NEAR and rho is not None and np.isfinite(rho):
        return steering_near(cfg, psi, phi, rho)
    return steering_far(cfg, psi, phi)


# ---------------------------------------------------------------------------
# RIS profiles and response
# ---------------------------------------------------------------------------

def random_profile(cfg: ScenarioConfig, rng: np.random.Generator) -> RisProfile:
    """I.i.d. uniform unit-circle phase profile, shape (T, M*N)."""
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.T, cfg.MN))
    return RisProfile(np.exp(1j * phases))


def ris_response_rows(cfg: ScenarioConfig, profile: RisProfile,
                      theta: float, vartheta: float) -> np.ndarray:
    """Per-snapshot RIS gain rows Upsilon, shape (T, M*N).

    Row t is a(theta, vartheta)^T * omega_t^T elementwise: the incident
    AP-side steering phase combined with the programmed profile, so that the
    reflected-path coefficient for a user direction b is Upsilon_t @ b.
    """
    a_in = steering_far(cfg, theta, vartheta)
    return profile.omega * a_in[None, :]


def ap_arrival_angles(cfg: ScenarioConfig) -> tuple[float, float]:
    """Known AP-to-RIS angles (theta, vartheta) seen from the RIS."""
    theta, vartheta, _ = angles_and_range(cfg.p_r, cfg.p_a)
    return theta, vartheta


# ---------------------------------------------------------------------------
# truth construction and synthesis
# ---------------------------------------------------------------------------

def channel_truth(cfg: ScenarioConfig, alpha_au: complex, alpha_ru: complex) -> ChannelTruth:
    """Derive all geometric path parameters from the scene positions."""
    zeta_au, zeta_ru = path_delays(cfg.p_a, cfg.p_r, cfg.p_u_true, cfg.c)
    psi, phi, rho = angles_and_range(cfg.p_r, cfg.p_u_true)
    theta, vartheta = ap_arrival_angles(cfg)
    return ChannelTruth(alpha_au=complex(alpha_au), alpha_ru=complex(alpha_ru),
                        zeta_au=zeta_au, zeta_ru=zeta_ru, psi=psi, phi=phi,
                        theta=theta, vartheta=vartheta, rho=rho)


def noiseless_signal(cfg: ScenarioConfig, truth: ChannelTruth,
                     profile: RisProfile) -> np.ndarray:
    """Noise-free received matrix Xi of shape (L, T):

        Xi = alpha_au sqrt(P_w) phi(zeta_au) 1^T
           + alpha_ru sqrt(P_w) phi(zeta_ru) (Upsilon @ b)^T

    where b is the RIS-to-user steering vector.
    """
    ph_au = phase_shift_vector(truth.zeta_au, cfg.L, cfg.delta_f)
    ph_ru = phase_shift_vector(truth.zeta_ru, cfg.L, cfg.delta_f)
    ups = ris_response_rows(cfg, profile, truth.theta, truth.vartheta)
    b = user_steering(cfg, truth.psi, truth.phi, truth.rho)
    gains = ups @ b  # (T,)
    sqp = np.sqrt(cfg.P_w)
    T = profile.omega.shape[0]
    return (truth.alpha_au * sqp * np.tile(ph_au[:, None], (1, T))
            + truth.alpha_ru * sqp * np.outer(ph_ru, gains))


def synthesize(cfg: ScenarioConfig, truth: ChannelTruth, profile: RisProfile,
               rng: Optional[np.random.Generator] = None) -> SnapshotSet:
    """Draw one noisy snapshot set R = Xi + eps, eps circular complex Gaussian
    with variance ``cfg.delta`` per entry (variance delta/2 per real part)."""
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    xi = noiseless_signal(cfg, truth, profile)
    if cfg.delta > 0:
        scale = np.sqrt(cfg.delta / 2.0)
        eps = rng.normal(0.0, scale, xi.shape) + 1j * rng.normal(0.0, scale, xi.shape)
        xi = xi + eps
    return SnapshotSet(R=xi, profile=profile)


def snr_db(cfg: ScenarioConfig, truth: ChannelTruth, profile: RisProfile) -> float:
    """SNR definition used throughout: 10 log10(mean |Xi|^2 / delta) over the
    noise-free signal entries."""
    xi = noiseless_signal(cfg, truth, profile)
    return 10.0 * np.log10(np.mean(np.abs(xi) ** 2) / cfg.delta)


def delta_for_snr(cfg: ScenarioConfig, snr_db_target: float) -> float:
    """Noise variance realizing the requested transmit SNR, P_w / delta.

    The ratio of transmit power to noise variance is the conventional
    operating-point label for a reconfigurable-surface link: the received
    signal strength additionally depends on the path gains and on the
    surface aperture, which are the very quantities under study, so tying
    the label to the received power would move the noise floor whenever a
    sweep changes the scene.
    """
    return float(cfg.P_w / 10.0 ** (snr_db_target / 10.0))


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

@dataclass
class SignalParams:
    """Point parameters at which to evaluate the snapshot likelihood.

    The reflected path is specified either sparsely (``delta_ru`` over a
    dictionary ``A`` of candidate steering columns) or parametrically
    (``alpha_ru`` with explicit departure angles and range).
    """

    alpha_au: complex
    zeta_au: float
    zeta_ru: float
    delta_ru: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    alpha_ru: Optional[complex] = None
    psi: Optional[float] = None
    phi: Optional[float] = None
    rho: Optional[float] = None


def log_likelihood(cfg: ScenarioConfig, snap: SnapshotSet, params: SignalParams) -> float:
    """Gaussian log-likelihood up to an additive constant:

        -(1/delta) sum_t || r_t - Xi_t(params) ||^2.

    Zero residual gives exactly 0; any parameter perturbation decreases it.
    """
    L, T = snap.R.shape
    ph_au = phase_shift_vector(params.zeta_au, L, cfg.delta_f)
    ph_ru = phase_shift_vector(params.zeta_ru, L, cfg.delta_f)
    theta, vartheta = ap_arrival_angles(cfg)
    ups = ris_response_rows(cfg, snap.profile, theta, vartheta)
    if params.delta_ru is not None:
        if params.A is None:
            raise ValueError("sparse reflected-path parameters require a dictionary A")
        gains = ups @ (params.A @ params.delta_ru)
    elif params.alpha_ru is not None:
        b = user_steering(cfg, params.psi, params.phi, params.rho)
        gains = params.alpha_ru * (ups @ b)
    else:
        raise ValueError("specify either delta_ru (with A) or alpha_ru with angles")
    sqp = np.sqrt(cfg.P_w)
    resid = snap.R - params.alpha_au * sqp * ph_au[:, None] - sqp * np.outer(ph_ru, gains)
    return float(-np.sum(np.abs(resid) ** 2) / cfg.delta)


def scenario_with(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    """Copy a config with selected fields replaced (re-runs validation)."""
    return replace(cfg, **changes)
