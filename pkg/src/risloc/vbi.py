"""Mean-field variational Bayesian engine for joint localization and channel
reconstruction.

The unknowns are factored as

    q(alpha_au) q(phase_au) q(phase_ru) q(delta) q(w) q(g)

with a complex Gaussian over the direct-path gain, complex Gaussians over the
two delay-signature vectors, a complex Gaussian over the sparse reflected-path
coefficient vector on the angular grid, independent Gamma factors over the
per-entry precisions, and a two-component categorical (slab/spike) per entry.
Each update is the closed-form coordinate-ascent optimum given the other
factors; one sweep runs them in a fixed order and ends with a geometric
location read-out.  Component order in ``chi``/``hbar`` is (slab, spike):
column 0 carries the probability that an entry holds the reflected path gain.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import digamma

from .geometry import (ScenarioConfig, SnapshotSet, FieldMode, ap_arrival_angles,
                       direction, path_delays, phase_shift_vector, ris_response_rows)
from .grid import AngularDictionary, build_dictionary, mirror_index
from .locate import (DelayGrid, EstimationResult, _range_residual,
                     default_delay_grid, extract_delay, solve_rho_numeric,
                     user_position)

DEFAULT_SIGMA_PHASE = 100.0
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 50


class DivergenceError(RuntimeError):
    """Raised when an update produces non-finite posterior parameters."""

    def __init__(self, iteration: int, what: str = "non-finite posterior parameter"):
        super().__init__(f"inference diverged at iteration {iteration}: {what}")
        self.iteration = iteration


class ConditioningError(RuntimeError):
    """Raised when a precision matrix is numerically singular."""


@dataclass
class Priors:
    """Hyperparameters of the factored prior.

    ``mu_phase_au``/``mu_phase_ru`` anchor the delay-signature factors at the
    delays implied by an initial position guess; ``sigma_phase`` is the shared
    isotropic prior variance of both signature vectors.  The slab/spike means
    are ``mu_delta_slab``/``mu_delta_spike`` with mixing weights ``chi``
    (slab first); per-entry precisions carry a Gamma(shape ``a_gamma``, scale
    ``b_gamma``) prior with mean precision a*b.
    """

    mu_alpha_au: complex
    delta_alpha_au: float
    mu_phase_au: np.ndarray
    mu_phase_ru: np.ndarray
    sigma_phase: float = DEFAULT_SIGMA_PHASE
    mu_delta_slab: complex = 0.5 + 0.5j
    mu_delta_spike: complex = 0.0 + 0.0j
    a_gamma: float = 1.0
    b_gamma: float = 100.0
    chi: tuple = (0.01, 0.99)


def default_priors(cfg: ScenarioConfig, p_u_init) -> Priors:
    """Reference prior set anchored at the position guess ``p_u_init``.

    Slab mixing weight is 1/(P*Q) (one active entry expected on the grid).
    The Gamma hyperparameters give mean precision a*b = 100 with a large
    shape, so every coefficient keeps a near-fixed precision around 100 and
    the slab/spike indicator, not the precision, carries the sparsification.
    A small shape with the same mean lets single-sweep excursions of a
    coefficient crush its precision, after which nothing stops the
    overcomplete dictionary (rank T < PQ) from absorbing arbitrary signal.
    """
    zeta_au0, zeta_ru0 = path_delays(cfg.p_a, cfg.p_r, p_u_init, cfg.c)
    pq = cfg.P * cfg.Q
    return Priors(
        mu_alpha_au=0.2 + 0.2j,
        delta_alpha_au=0.01,
        mu_phase_au=phase_shift_vector(zeta_au0, cfg.L, cfg.delta_f),
        mu_phase_ru=phase_shift_vector(zeta_ru0, cfg.L, cfg.delta_f),
        sigma_phase=DEFAULT_SIGMA_PHASE,
        mu_delta_slab=0.5 + 0.5j,
        mu_delta_spike=0.0 + 0.0j,
        a_gamma=1e5,
        b_gamma=1e-3,
        chi=(1.0 / pq, 1.0 - 1.0 / pq),
    )


@dataclass
class VariationalState:
    """Current posterior factor parameters.

    ``b_post`` stores the Gamma inverse-scale (rate), so the point precision
    estimate is ``a_post / b_post``; at the prior this is about
    a_gamma * b_gamma.  ``hbar`` columns are (slab, spike) probabilities.
    """

    mu_alpha_au: complex
    var_alpha_au: float
    mu_phase_au: np.ndarray
    Sigma_phase_au: np.ndarray
    mu_phase_ru: np.ndarray
    Sigma_phase_ru: np.ndarray
    mu_delta: np.ndarray
    Sigma_delta: np.ndarray
    a_post: np.ndarray
    b_post: np.ndarray
    hbar: np.ndarray
    # Factor F with Sigma_delta = F F^H, kept whenever the update produced
    # one.  Contractions like tr(Sigma_delta S0) must go through the factor
    # (||UA F||_F^2): forming them from the explicit product mixes the
    # hugely graded data/prior subspaces and the rounding noise, amplified
    # by 1/delta downstream, dwarfs the true value in near-noiseless runs.
    sigma_delta_factor: Optional[np.ndarray] = None
    iteration: int = 0

    def check(self, iteration: Optional[int] = None):
        """Runtime sanity: Hermitian covariances with nonnegative diagonals,
        normalized indicator rows, positive Gamma parameters."""
        it = self.iteration if iteration is None else iteration
        for name, sig in (("Sigma_phase_au", self.Sigma_phase_au),
                          ("Sigma_phase_ru", self.Sigma_phase_ru),
                          ("Sigma_delta", self.Sigma_delta)):
            if np.min(np.real(np.diagonal(sig))) < -1e-12:
                raise DivergenceError(it, f"negative variance on diagonal of {name}")
        if self.var_alpha_au < 0:
            raise DivergenceError(it, "negative var_alpha_au")
        if np.max(np.abs(self.hbar.sum(axis=1) - 1.0)) > 1e-10:
            raise DivergenceError(it, "indicator rows do not sum to 1")
        if np.min(self.a_post) <= 0 or np.min(self.b_post) <= 0:
            raise DivergenceError(it, "non-positive Gamma parameters")
        flat = np.concatenate([np.atleast_1d(self.mu_alpha_au), self.mu_phase_au,
                               self.mu_phase_ru, self.mu_delta])
        if not np.all(np.isfinite(flat)):
            raise DivergenceError(it)


@dataclass
class ConvergenceReport:
    iterations_run: int
    metric_trace: list
    converged: bool

    def __post_init__(self):
        if len(self.metric_trace) != self.iterations_run:
            raise ValueError("metric trace length must equal iterations run")


# ---------------------------------------------------------------------------
# shared intermediates
# ---------------------------------------------------------------------------

@dataclass
class _Workspace:
    """Profile-dependent quantities reused across updates of one run.

    A planar array cannot tell a direction from its mirror image across the
    array plane: the response is even in the azimuth sign, so the grid --
    which spans both signs -- yields each physical steering column twice.
    Splitting the sparse coefficient across an identical column pair halves
    both entries, which parks the slab/spike test at its decision boundary
    and leaves the support ranking to rounding noise.  The engine therefore
    infers coefficients on the parity-reduced column set (``keep``, the
    nonnegative-azimuth representative of each pair) and the location
    read-out restores the sign afterwards from delay consistency.  Dropped
    entries stay at exactly zero in the full-size state vectors.
    """

    ups: np.ndarray       # (T, M*N) per-snapshot RIS gain rows
    UA: np.ndarray        # (T, P*Q)  rows Upsilon_t @ A
    S0: np.ndarray        # (P*Q, P*Q) = UA^H UA
    keep: np.ndarray      # indices of parity-representative columns
    partner: np.ndarray   # (P*Q,) mirror-twin flat index, -1 when none
    UAk: np.ndarray       # UA restricted to kept columns
    S0k: np.ndarray       # UAk^H UAk


def _parity_pairs(dic: AngularDictionary) -> tuple[np.ndarray, np.ndarray]:
    """Kept-column indices and the full twin map of the mirror degeneracy."""
    grid = dic.grid
    pq = grid.P * grid.Q
    partner = np.full(pq, -1, dtype=int)
    keep_mask = np.ones(pq, dtype=bool)
    for p in range(grid.P):
        psi = float(grid.psi_points[p])
        pm = int(np.argmin(np.abs(grid.psi_points + psi)))
        if pm == p or abs(float(grid.psi_points[pm]) + psi) > 1e-12:
            continue
        for q in range(grid.Q):
            k, k2 = p * grid.Q + q, pm * grid.Q + q
            if np.max(np.abs(dic.A[:, k] - dic.A[:, k2])) > 1e-9:
                continue
            partner[k] = k2
            if psi < 0:
                keep_mask[k] = False
    return np.flatnonzero(keep_mask), partner


def _workspace(cfg: ScenarioConfig, snap: SnapshotSet, dic: AngularDictionary) -> _Workspace:
    theta, vartheta = ap_arrival_angles(cfg)
    ups = ris_response_rows(cfg, snap.profile, theta, vartheta)
    ua = ups @ dic.A
    keep, partner = _parity_pairs(dic)
    uak = ua[:, keep]
    return _Workspace(ups=ups, UA=ua, S0=ua.conj().T @ ua,
                      keep=keep, partner=partner,
                      UAk=uak, S0k=uak.conj().T @ uak)


def _b_quad(mu: np.ndarray, sigma: np.ndarray) -> float:
    """E ||x||^2 = ||mu||^2 + tr Sigma for a Gaussian factor."""
    return float(np.real(mu.conj() @ mu) + np.real(np.trace(sigma)))


def _theta_ru(state: VariationalState, cfg: ScenarioConfig, ws: _Workspace) -> np.ndarray:
    """Posterior-mean reflected-path component, shape (L, T)."""
    c = ws.UA @ state.mu_delta
    return np.sqrt(cfg.P_w) * np.outer(state.mu_phase_ru, c)


def _theta_au(state: VariationalState, cfg: ScenarioConfig) -> np.ndarray:
    """Posterior-mean direct-path column, shape (L,)."""
    return np.sqrt(cfg.P_w) * state.mu_alpha_au * state.mu_phase_au


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _measure_delays(cfg: ScenarioConfig, R: np.ndarray) -> tuple[float, float]:
    """Two-path matched-filter delay measurement on the raw snapshots.

    Scans a dense delay grid for the signature that captures the most
    snapshot energy, projects that path out, and scans the residual for the
    second one; each path is then re-measured once with the other's refined
    estimate projected out.  The earlier of the two is the direct path: the
    one-bounce route is longer than the straight line by the triangle
    inequality.

    Peak refinement is not cosmetic here.  The reflected path rides the full
    modulation aperture and can outweigh the direct one by three orders of
    magnitude, so even the few-per-mille signature mismatch of a 1/16-sample
    grid leaves a deflation residue that buries the direct peak under a
    shoulder of the strong path's own correlation lobe.  A parabolic fit of
    the power profile around the peak cuts the mismatch by another two
    orders, after which the residue is far below the weak path.
    """
    n_grid = 16 * cfg.L
    zetas = np.arange(n_grid) / (n_grid * cfg.delta_f)
    sig = np.exp(-2j * np.pi * np.outer(zetas, np.arange(cfg.L) * cfg.delta_f))

    def peak(data: np.ndarray) -> float:
        corr = sig.conj() @ data
        power = np.einsum("gt,gt->g", corr, corr.conj()).real
        k = int(np.argmax(power))
        lo, hi = power[(k - 1) % n_grid], power[(k + 1) % n_grid]
        denom = lo - 2.0 * power[k] + hi
        off = 0.0 if denom >= 0 else np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5)
        return float(((k + off) % n_grid) / (n_grid * cfg.delta_f))

    def deflate(zeta: float) -> np.ndarray:
        phi = phase_shift_vector(zeta, cfg.L, cfg.delta_f)
        return R - np.outer(phi, (phi.conj() @ R) / cfg.L)

    z1 = peak(R)
    z2 = peak(deflate(z1))
    z1 = peak(deflate(z2))
    z2 = peak(deflate(z1))
    return (z1, z2) if z1 <= z2 else (z2, z1)


def _init_state(cfg: ScenarioConfig, priors: Priors, snap: SnapshotSet,
                dic: AngularDictionary, ws: "_Workspace",
                ) -> tuple[VariationalState, Optional[np.ndarray]]:
    """Data-anchored starting point, plus matched-filter column scores.

    Both path delays are first measured from the raw snapshots
    (:func:`_measure_delays`); every further init quantity is built on the
    measured signatures rather than on the ones implied by the position
    guess.  This matters more than it looks: a few metres of position bias
    decoheres the guessed signatures by some ten percent, the initial least
    squares then misallocates that share of energy between the two path
    fits, and the sweeps unwind the entanglement only at the rate set by the
    mutual coherence of the two columns -- a percent-level crawl per sweep
    that can dominate the whole run and occasionally mis-seeds the support.
    Measured signatures start the allocation right and the crawl never
    appears.

    The sparse coefficient starts as what the model itself assumes it to be:
    a single active entry.  A matched filter of the data against the
    dictionary (correlating each snapshot with the measured reflected-path
    signature, then with each candidate steering column) picks the entry.
    The gain and the coefficient are then solved jointly by a rank-two least
    squares against the direct-path column (signature times all-ones) and the
    winning reflected column (signature times its modulation profile).  A
    joint solve matters: the two columns are not orthogonal, so fitting the
    coefficient against the raw data lets a slice of the direct path leak
    into it, and that percent-level mismatch survives to the fixed point --
    the sweeps lock in a nearby local optimum whose direct-path signature is
    shifted by just enough to spoil millimetre-level positioning.  Spreading
    the matched-filter profile across all entries is worse still: the
    direct-path factors are flexible enough to swallow the init mismatch,
    after which the coefficient solve keeps large canceling junk coefficients
    to reproduce the stolen component, and no later sweep can undo the pact
    because each factor is conditionally optimal given the others.

    The indicator rows start at one application of the indicator update to
    that single-entry coefficient vector rather than at the uniform prior.
    The first coefficient solve is underdetermined whenever the snapshot
    count falls below the kept-column count, and under a uniform indicator
    it is an almost unregularized least squares whose mass placement across
    coherent columns is arbitrary; seeding the indicator hands it the
    support information the matched filter already carries.  The per-column
    scores are also returned so the caller can confine the coefficient solve
    to the most plausible columns in that underdetermined regime.

    All covariances start at zero width: the means carry the physical scale
    (unit-modulus signatures, slab-magnitude coefficients) and every factor's
    width is rebuilt by its first update anyway.  Wide starting covariances
    are not harmless here -- their traces enter the first sweep's precision
    terms and shrink the paired mean by the same factor, and because the
    likelihood only constrains the products (gain x signature,
    coefficient x signature), nothing ever undoes that rescaling.  At high
    SNR the inflated coefficients then crush the Gamma precisions and the
    spike/slab discrimination never recovers.
    """
    L = cfg.L
    pq = dic.A.shape[1]
    zeta_au0, zeta_ru0 = _measure_delays(cfg, snap.R)
    phi_au = phase_shift_vector(zeta_au0, cfg.L, cfg.delta_f)
    phi_ru = phase_shift_vector(zeta_ru0, cfg.L, cfg.delta_f)
    # Crude direct-path gain estimate, used only to clean the column scores:
    # the direct component is constant across snapshots, and its projection
    # onto a candidate column can outscore the true column outright when the
    # two delay signatures are closely spaced.
    T = snap.R.shape[1]
    denom = np.sqrt(cfg.P_w) * np.real(phi_au.conj() @ phi_au) * T
    alpha_crude = complex((phi_au.conj() @ snap.R).sum() / denom)
    y = phi_ru.conj() @ snap.R                      # (T,) per-snapshot correlation
    leak = np.sqrt(cfg.P_w) * alpha_crude * complex(phi_ru.conj() @ phi_au)
    raw = ws.UAk.conj().T @ (y - leak)              # kept-column direction scores
    mu_delta = np.zeros(pq, dtype=complex)
    alpha_init = complex(priors.mu_alpha_au)
    scores: Optional[np.ndarray] = None
    if raw.size and np.max(np.abs(raw)) > 0:
        scores = np.zeros(pq)
        scores[ws.keep] = np.abs(raw)
        k_local = int(np.argmax(np.abs(raw)))
        a_k = ws.UAk[:, k_local]                    # modulation profile of the winner
        root_pw = np.sqrt(cfg.P_w)
        gram = np.empty((2, 2), dtype=complex)
        gram[0, 0] = cfg.P_w * np.real(phi_au.conj() @ phi_au) * snap.R.shape[1]
        gram[1, 1] = cfg.P_w * np.real(phi_ru.conj() @ phi_ru) * np.real(a_k.conj() @ a_k)
        gram[0, 1] = cfg.P_w * (phi_au.conj() @ phi_ru) * a_k.sum()
        gram[1, 0] = np.conj(gram[0, 1])
        rhs = np.array([
            root_pw * (phi_au.conj() @ snap.R).sum(),
            root_pw * (y @ a_k.conj()),
        ])
        try:
            alpha_hat, coeff = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            coeff = rhs[1] / gram[1, 1]
        else:
            alpha_init = complex(alpha_hat)
        mu_delta[ws.keep[k_local]] = complex(coeff)
    state = VariationalState(
        mu_alpha_au=alpha_init,
        var_alpha_au=float(priors.delta_alpha_au),
        mu_phase_au=phi_au.astype(complex),
        Sigma_phase_au=np.zeros((L, L), dtype=complex),
        mu_phase_ru=phi_ru.astype(complex),
        Sigma_phase_ru=np.zeros((L, L), dtype=complex),
        mu_delta=mu_delta,
        Sigma_delta=np.zeros((pq, pq), dtype=complex),
        sigma_delta_factor=np.zeros((pq, pq), dtype=complex),
        a_post=np.full(pq, priors.a_gamma, dtype=float),
        b_post=np.full(pq, 1.0 / priors.b_gamma, dtype=float),
        hbar=np.tile(np.asarray(priors.chi, dtype=float), (pq, 1)),
        iteration=0,
    )
    if np.max(np.abs(mu_delta)) > 0:
        state = dataclasses.replace(state, hbar=_update_indicator(state, priors).hbar)
    return state, scores


def init_state(cfg: ScenarioConfig, priors: Priors, snap: SnapshotSet,
               dic: AngularDictionary) -> VariationalState:
    """Starting point for the coordinate sweeps (see :func:`_init_state`)."""
    return _init_state(cfg, priors, snap, dic, _workspace(cfg, snap, dic))[0]


# ---------------------------------------------------------------------------
# coordinate updates
# ---------------------------------------------------------------------------

def _update_alpha_au(state, priors, cfg, R, ws) -> VariationalState:
    T = R.shape[1]
    b_au = _b_quad(state.mu_phase_au, state.Sigma_phase_au)
    gamma = T * cfg.P_w / cfg.delta * b_au
    resid = R - _theta_ru(state, cfg, ws)
    beta = np.sqrt(cfg.P_w) / cfg.delta * np.sum(state.mu_phase_au.conj() @ resid)
    var = 1.0 / (gamma + 1.0 / priors.delta_alpha_au)
    mu = var * (priors.mu_alpha_au / priors.delta_alpha_au + beta)
    return dataclasses.replace(state, mu_alpha_au=complex(mu), var_alpha_au=float(var))


def _update_phase_au(state, priors, cfg, R, ws) -> VariationalState:
    T = R.shape[1]
    L = R.shape[0]
    gamma = T * cfg.P_w / cfg.delta * (abs(state.mu_alpha_au) ** 2 + state.var_alpha_au)
    resid = R - _theta_ru(state, cfg, ws)
    beta = np.sqrt(cfg.P_w) / cfg.delta * np.conj(state.mu_alpha_au) * resid.sum(axis=1)
    prec = gamma + 1.0 / priors.sigma_phase
    mu = (priors.mu_phase_au / priors.sigma_phase + beta) / prec
    return dataclasses.replace(state, mu_phase_au=mu,
                               Sigma_phase_au=np.eye(L, dtype=complex) / prec)


def _update_phase_ru(state, priors, cfg, R, ws) -> VariationalState:
    L = R.shape[0]
    c = ws.UA @ state.mu_delta
    if state.sigma_delta_factor is not None:
        tr_s0_sigma = float(np.linalg.norm(ws.UA @ state.sigma_delta_factor) ** 2)
    else:
        tr_s0_sigma = float(np.real(np.einsum("pq,qp->", state.Sigma_delta, ws.S0)))
    quad = float(np.real(c.conj() @ c)) + tr_s0_sigma
    gamma = cfg.P_w / cfg.delta * quad
    resid = R - _theta_au(state, cfg)[:, None]
    beta = np.sqrt(cfg.P_w) / cfg.delta * (resid @ c.conj())
    prec = gamma + 1.0 / priors.sigma_phase
    mu = (priors.mu_phase_ru / priors.sigma_phase + beta) / prec
    return dataclasses.replace(state, mu_phase_ru=mu,
                               Sigma_phase_ru=np.eye(L, dtype=complex) / prec)


def _resolve_delta_method(scale: float, UAk: np.ndarray, S0k: np.ndarray,
                          w: np.ndarray, method: str = "auto") -> str:
    """Pick how to form the q(Delta) posterior for the current conditioning.

    Woodbury inverts a T x T system instead of PQ x PQ, a win whenever
    T < PQ -- but its subtraction cancels catastrophically once the data
    term dwarfs the prior precisions (near-noiseless runs), so the QR
    route takes over there.
    """
    if method != "auto":
        return method
    T, nk = UAk.shape
    data_mag = scale * float(np.max(np.real(np.diagonal(S0k)))) if nk else 0.0
    safe = data_mag < 1e8 * float(np.min(w))
    return "woodbury" if (T < nk and safe) else "qr"


def _delta_posterior(scale: float, UAk: np.ndarray, S0k: np.ndarray,
                     w: np.ndarray, y_scaled: np.ndarray, m: np.ndarray,
                     method: str = "auto") -> tuple:
    """Mean and covariance of q(Delta).

    The posterior is CN(Sigma (varrho + beta), Sigma) with
    Sigma = (scale * UA^H UA + diag(w))^{-1}, varrho = w * m and
    beta = sqrt(scale) * UA^H y_scaled.  Equivalently, the mean solves
    the stacked least-squares problem

        min || sqrt(scale) UA mu - y_scaled ||^2 + || sqrt(w) (mu - m) ||^2.

    ``qr`` factors that stacked design and reads both moments off R --
    crucially the mean comes from the residual form R^{-1} Q^H h, never
    from Sigma @ rhs.  At data/prior ratios beyond ~1e16 the rhs carries
    rounding noise of order eps * ||beta|| which Sigma's large null-space
    eigenvalues (1/w) would otherwise amplify into garbage coefficients.
    ``direct`` inverts the PQ x PQ precision matrix and ``woodbury``
    inverts the T x T dual; both then multiply, which is fine in the
    benign regimes they are selected for.
    """
    if np.min(w) <= 0 or not np.all(np.isfinite(w)):
        raise ConditioningError("precision matrix is singular (non-positive precisions)")
    T, nk = UAk.shape
    method = _resolve_delta_method(scale, UAk, S0k, w, method)
    root_w = np.sqrt(w)
    factor = None
    if method == "qr":
        g = np.vstack([np.sqrt(scale) * UAk,
                       np.diag(root_w).astype(complex)])
        h = np.concatenate([y_scaled, root_w * m])
        q, r = np.linalg.qr(g, mode="reduced")
        factor = solve_triangular(r, np.eye(nk, dtype=complex))
        cov = factor @ factor.conj().T
        mu = solve_triangular(r, q.conj().T @ h)
    else:
        beta = np.sqrt(scale) * (UAk.conj().T @ y_scaled)
        if method == "direct":
            prec = scale * S0k + np.diag(w.astype(complex))
            cov = np.linalg.inv(prec)
        elif method == "woodbury":
            f = np.sqrt(scale) * UAk
            winv = 1.0 / w
            fw = f * winv[None, :]                  # F W^{-1}
            core = np.eye(T, dtype=complex) + fw @ f.conj().T
            cov = np.diag(winv.astype(complex)) - fw.conj().T @ np.linalg.solve(core, fw)
        else:
            raise ValueError(f"unknown covariance method '{method}'")
        mu = cov @ (w * m + beta)
    return 0.5 * (cov + cov.conj().T), mu, factor


def _update_delta(state, priors, cfg, R, ws, method: str = "auto",
                  support: Optional[np.ndarray] = None) -> VariationalState:
    """Gaussian coefficient update, optionally restricted to a support set.

    ``support`` (a boolean mask over the full coefficient vector) confines
    the solve to those entries; the rest keep the spike value of exactly
    zero.  The restriction is a warm-up device: while the direct-path
    factors are still absorbing their initialization error, an
    unrestricted solve is free to explain the leftover with junk mass on
    whatever column combination mimics it (with fewer snapshots than
    columns there is always one), and that junk then survives as a
    self-consistent fixed point.
    """
    b_ru = _b_quad(state.mu_phase_ru, state.Sigma_phase_ru)
    scale = cfg.P_w * b_ru / cfg.delta
    y = state.mu_phase_ru.conj() @ (R - _theta_au(state, cfg)[:, None])   # (T,)
    y_scaled = y / np.sqrt(cfg.delta * b_ru)        # sqrt(scale)*UA^H y_scaled = beta
    w = state.a_post / state.b_post
    m = (state.hbar[:, 0] * priors.mu_delta_slab
         + state.hbar[:, 1] * priors.mu_delta_spike)
    if support is None:
        active, UAk, S0k = ws.keep, ws.UAk, ws.S0k
    else:
        active = ws.keep[support[ws.keep]]
        UAk = ws.UA[:, active]
        S0k = UAk.conj().T @ UAk
    cov_k, mu_k, factor_k = _delta_posterior(scale, UAk, S0k, w[active],
                                             y_scaled, m[active], method=method)
    pq = state.mu_delta.shape[0]
    mu = np.zeros(pq, dtype=complex)
    mu[active] = mu_k
    cov = np.zeros((pq, pq), dtype=complex)
    cov[np.ix_(active, active)] = cov_k
    factor = None
    if factor_k is not None:
        factor = np.zeros((pq, factor_k.shape[1]), dtype=complex)
        factor[active] = factor_k
    return dataclasses.replace(state, mu_delta=mu, Sigma_delta=cov,
                               sigma_delta_factor=factor)


def _deviations(state, priors) -> np.ndarray:
    """Squared-modulus deviation of each entry from the two component means,
    plus the posterior variance; shape (PQ, 2), columns (slab, spike)."""
    d_delta = np.real(np.diagonal(state.Sigma_delta))
    dev = np.empty((state.mu_delta.shape[0], 2))
    dev[:, 0] = np.abs(state.mu_delta - priors.mu_delta_slab) ** 2 + d_delta
    dev[:, 1] = np.abs(state.mu_delta - priors.mu_delta_spike) ** 2 + d_delta
    return dev


def _update_w(state, priors) -> VariationalState:
    dev = _deviations(state, priors)
    varpi = 0.5 * (state.hbar * dev).sum(axis=1)
    if np.min(varpi) < 0:
        raise DivergenceError(state.iteration, "negative precision deviation")
    a_post = np.full_like(varpi, priors.a_gamma + 0.5)
    b_post = 1.0 / priors.b_gamma + varpi / 2.0     # inverse scale (rate)
    return dataclasses.replace(state, a_post=a_post, b_post=b_post)


def _update_indicator(state, priors) -> VariationalState:
    dev = _deviations(state, priors)
    w_mean = state.a_post / state.b_post
    q = (0.5 * digamma(state.a_post)[:, None] + 0.5 * np.log(state.b_post)[:, None]
         - 0.5 * dev * w_mean[:, None])
    q = q + np.log(np.asarray(priors.chi, dtype=float))[None, :]
    q -= q.max(axis=1, keepdims=True)
    h = np.exp(q)
    h /= h.sum(axis=1, keepdims=True)
    return dataclasses.replace(state, hbar=h)


# public wrappers: each recomputes the shared intermediates, so they can be
# called standalone on any (state, snapshot, dictionary) triple.

def update_alpha_au(state, priors, cfg, snap, dic) -> VariationalState:
    """Coordinate update of q(alpha_au)."""
    return _update_alpha_au(state, priors, cfg, snap.R, _workspace(cfg, snap, dic))


def update_phase_au(state, priors, cfg, snap, dic) -> VariationalState:
    """Coordinate update of q(phase_au)."""
    return _update_phase_au(state, priors, cfg, snap.R, _workspace(cfg, snap, dic))


def update_phase_ru(state, priors, cfg, snap, dic) -> VariationalState:
    """Coordinate update of q(phase_ru)."""
    return _update_phase_ru(state, priors, cfg, snap.R, _workspace(cfg, snap, dic))


def update_delta(state, priors, cfg, snap, dic, method: str = "auto") -> VariationalState:
    """Coordinate update of q(delta); ``method`` selects the covariance route
    (direct PQ x PQ inverse or the T x T Woodbury form)."""
    return _update_delta(state, priors, cfg, snap.R, _workspace(cfg, snap, dic),
                         method=method)


def update_w(state, priors) -> VariationalState:
    """Coordinate update of the Gamma precision factors."""
    return _update_w(state, priors)


def update_indicator(state, priors) -> VariationalState:
    """Coordinate update of the slab/spike indicator probabilities."""
    return _update_indicator(state, priors)


def convergence_metric(prev: VariationalState, cur: VariationalState) -> float:
    """Relative change of the stacked posterior means between two sweeps."""
    stack_prev = np.concatenate([np.atleast_1d(prev.mu_alpha_au), prev.mu_phase_au,
                                 prev.mu_phase_ru, prev.mu_delta])
    stack_cur = np.concatenate([np.atleast_1d(cur.mu_alpha_au), cur.mu_phase_au,
                                cur.mu_phase_ru, cur.mu_delta])
    denom = max(float(np.linalg.norm(stack_cur)), 1e-300)
    return float(np.linalg.norm(stack_cur - stack_prev)) / denom


# ---------------------------------------------------------------------------
# read-out and driver
# ---------------------------------------------------------------------------

def read_out(cfg: ScenarioConfig, state: VariationalState, dic: AngularDictionary,
             search: Optional[DelayGrid] = None) -> EstimationResult:
    """Map posterior means to point estimates of all physical parameters.

    Support is the entry with the largest slab probability (ties broken by
    |mu_delta|); delays come from matched-filter extraction on the signature
    means.  The range along the departure ray comes from the absolute
    reflected delay (total reflected path length minus the known first leg),
    not from the residual of the delay-difference equation: the difference
    inherits the noise of the direct-path delay, which at realistic gain
    ratios is measured orders of magnitude worse than the reflected one, and
    the residual's geometry factor amplifies it further.  The
    delay-difference solve still has two jobs: because the reflected path
    alone cannot tell an azimuth from its parity twin (identical dictionary
    columns), the chosen support competes against its twin and the side
    whose solved range better matches the absolute reflected delay wins; and
    its root is the fallback range when the absolute relation returns a
    non-positive value.  The result is flagged as failed when no entry shows
    meaningful slab mass (max below 1/(PQ)^2) or no usable range exists.
    """
    if search is None:
        search = default_delay_grid(cfg.L, cfg.delta_f)
    pq = state.mu_delta.shape[0]
    slab = state.hbar[:, 0]
    best = slab == slab.max()
    if best.sum() > 1:  # tie on slab probability: largest coefficient wins
        idx = np.flatnonzero(best)
        support = int(idx[np.argmax(np.abs(state.mu_delta[idx]))])
    else:
        support = int(np.argmax(slab))
    alpha_ru_hat = complex(state.mu_delta[support])   # inference-side twin holds the coefficient
    zeta_au_hat = extract_delay(state.mu_phase_au, cfg.delta_f, search)
    zeta_ru_hat = extract_delay(state.mu_phase_ru, cfg.delta_f, search)
    failure = bool(slab.max() < 1.0 / pq**2)
    candidates = [support]
    twin = mirror_index(dic.grid, support)
    if twin is not None:
        candidates.append(twin)
    solved = None   # (delay mismatch, support, psi, phi, rho)
    d_ar = float(np.linalg.norm(cfg.p_a - cfg.p_r))
    for k in candidates:
        psi_k, phi_k = dic.grid.angles_at(k)
        u_k = direction(psi_k, phi_k)
        rho_k = solve_rho_numeric(zeta_au_hat, zeta_ru_hat, cfg.p_a, cfg.p_r,
                                  u_k, cfg.c)
        if rho_k is None:
            continue
        # The range solve zeroes the *difference* of the two delay equations,
        # so its residual is near zero on both parity sides; what separates
        # the true side is whether the solved range also matches the absolute
        # reflected delay.
        res_k = abs(d_ar + rho_k - cfg.c * zeta_ru_hat)
        if solved is None or res_k < solved[0]:
            solved = (res_k, k, psi_k, phi_k, rho_k)
    rho_abs = cfg.c * zeta_ru_hat - d_ar
    if solved is None and rho_abs <= 0:
        failure = True
        psi_hat, phi_hat = dic.grid.angles_at(support)
        rho_hat = float("nan")
        p_u_hat = np.full(3, np.nan)
    else:
        if solved is not None:
            _, support, psi_hat, phi_hat, rho_root = solved
        else:
            psi_hat, phi_hat = dic.grid.angles_at(support)
            rho_root = float("nan")
        rho_hat = rho_abs if rho_abs > 0 else rho_root
        p_u_hat = user_position(cfg.p_r, psi_hat, phi_hat, rho_hat)
    return EstimationResult(
        p_u_hat=p_u_hat, zeta_au_hat=zeta_au_hat, zeta_ru_hat=zeta_ru_hat,
        psi_hat=psi_hat, phi_hat=phi_hat,
        alpha_au_hat=complex(state.mu_alpha_au),
        alpha_ru_hat=alpha_ru_hat,
        support_index=support, rho_hat=rho_hat, failure_flag=failure)


def _fix_direct_gauge(state: VariationalState, cfg: ScenarioConfig) -> VariationalState:
    """Rescale the direct-path pair onto its canonical section.

    The likelihood constrains only the product of the gain and the
    delay-signature vector, so the pair carries one flat complex-scale
    direction that no update can pin down: coordinate sweeps slide along
    it indefinitely (the gain decays while the signature norm grows to
    compensate), the convergence metric sees genuine movement every sweep,
    and the signature's posterior variance inflates as the gain shrinks.
    Renormalizing the signature mean to its physical norm sqrt(L) -- a
    unit-modulus vector -- and absorbing the factor into the gain leaves
    every product (and hence the fit) bit-identical while freezing the
    flat direction.  The common phase is flat in the same way (rotating
    the gain one way and the signature the other changes nothing the data
    can see, and the two prior anchors fight over it at crawl speed), so
    the signature's leading entry -- exp(0) for a pure delay signature --
    is rotated to be real and positive.  Covariances rescale with |c|^2
    so each factor remains the same distribution relative to its mean.
    """
    norm = float(np.linalg.norm(state.mu_phase_au))
    if not np.isfinite(norm) or norm <= 0.0:
        return state
    c = complex(norm / np.sqrt(cfg.L))
    lead = complex(state.mu_phase_au[0])
    if abs(lead) > 1e-12 * norm:
        c *= lead / abs(lead)
    mag2 = abs(c) ** 2
    return dataclasses.replace(
        state,
        mu_phase_au=state.mu_phase_au / c,
        Sigma_phase_au=state.Sigma_phase_au / mag2,
        mu_alpha_au=state.mu_alpha_au * c,
        var_alpha_au=state.var_alpha_au * mag2,
    )


def _fix_reflected_gauge(state: VariationalState, cfg: ScenarioConfig) -> VariationalState:
    """Rescale the reflected-path pair onto its canonical section.

    Same flat complex-scale direction as in :func:`_fix_direct_gauge`, here
    between the reflected delay signature and the sparse coefficient vector:
    the likelihood sees only their product, so the signature norm can drift
    while the coefficients compensate.  The drift is not merely cosmetic --
    the spike/slab indicator compares each coefficient against a slab prior
    whose magnitude and phase are anchored at the physical scale (unit-
    modulus signature whose leading entry is one), and a drifted gauge
    parks perfectly good coefficients where the slab rejects them.  The
    signature mean is therefore renormalized to norm sqrt(L) with a real
    positive leading entry, the factor absorbed into the coefficients, and
    covariances plus the Gamma rates (precisions scale inversely with the
    squared coefficient scale) adjusted so every factor keeps the same
    distribution relative to its mean.  All products the likelihood sees
    are bit-identical.
    """
    norm = float(np.linalg.norm(state.mu_phase_ru))
    if not np.isfinite(norm) or norm <= 0.0:
        return state
    c = complex(norm / np.sqrt(cfg.L))
    lead = complex(state.mu_phase_ru[0])
    if abs(lead) > 1e-12 * norm:
        c *= lead / abs(lead)
    mag2 = abs(c) ** 2
    factor = state.sigma_delta_factor
    return dataclasses.replace(
        state,
        mu_phase_ru=state.mu_phase_ru / c,
        Sigma_phase_ru=state.Sigma_phase_ru / mag2,
        mu_delta=state.mu_delta * c,
        Sigma_delta=state.Sigma_delta * mag2,
        sigma_delta_factor=None if factor is None else factor * abs(c),
        b_post=state.b_post * mag2,
    )


def run_jcle(cfg: ScenarioConfig, snap: SnapshotSet, dic: AngularDictionary,
             p_u_init, priors: Optional[Priors] = None, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, keep_trace: bool = False,
             ) -> tuple[EstimationResult, VariationalState, ConvergenceReport]:
    """Full inference loop: repeated coordinate sweeps plus location read-out.

    Sweep order: alpha_au, phase_au, phase_ru, delta, w, indicator, location.
    Stops when the relative change of the stacked posterior means drops below
    ``tol`` or after ``max_iter`` sweeps.  In near-field mode the dictionary
    is rebuilt once if the range estimate moves more than 10% away from the
    range it was built at.  Raises :class:`DivergenceError` (carrying the
    iteration index) if any posterior parameter becomes non-finite.

    When the snapshot count is below the number of distinct dictionary
    columns, the coefficient solve is confined to the columns the
    initializer's matched filter scored highest.  In the unrestricted
    underdetermined regime the solve is free to explain any leftover of the
    still-settling direct-path factors with mass spread over whichever
    column combination mimics it, and the spread then persists because the
    direct-path factors in turn absorb the mis-modelled share of the
    reflected path, each factor conditionally optimal given the other.
    Confining the solve to the highest-scoring columns removes that freedom
    while leaving the indicator enough candidates to migrate off a wrong
    initial pick; with enough snapshots the full solve is well posed and
    runs unrestricted.
    """
    if priors is None:
        priors = default_priors(cfg, p_u_init)
    ws = _workspace(cfg, snap, dic)
    state, scores = _init_state(cfg, priors, snap, dic, ws)
    search = default_delay_grid(cfg.L, cfg.delta_f)
    R = snap.R
    support = None
    if scores is not None and R.shape[1] < ws.keep.size:
        n_active = min(ws.keep.size, max(8, R.shape[1] // 4))
        if n_active < ws.keep.size:
            top = np.argsort(scores[ws.keep])[::-1][:n_active]
            support = np.zeros(scores.shape[0], dtype=bool)
            support[ws.keep[top]] = True
    trace = [] if keep_trace else None
    metric_trace: list[float] = []
    converged = False
    refreshed = False
    result: Optional[EstimationResult] = None
    for it in range(1, max_iter + 1):
        prev = state
        state = _update_alpha_au(state, priors, cfg, R, ws)
        state = _update_phase_au(state, priors, cfg, R, ws)
        state = _fix_direct_gauge(state, cfg)
        state = _update_phase_ru(state, priors, cfg, R, ws)
        state = _update_delta(state, priors, cfg, R, ws, support=support)
        state = _fix_reflected_gauge(state, cfg)
        state = _update_w(state, priors)
        state = _update_indicator(state, priors)
        state = dataclasses.replace(state, iteration=it)
        state.check(it)
        result = read_out(cfg, state, dic, search)
        if trace is not None:
            trace.append(result)
        metric = convergence_metric(prev, state)
        if not np.isfinite(metric):
            raise DivergenceError(it, "non-finite convergence metric")
        metric_trace.append(metric)
        if (cfg.field_mode is FieldMode.NEAR and not refreshed
                and not result.failure_flag and np.isfinite(result.rho_hat)
                and dic.range_m and abs(result.rho_hat - dic.range_m) > 0.1 * dic.range_m):
            dic = build_dictionary(cfg, dic.grid, result.rho_hat)
            ws = _workspace(cfg, snap, dic)
            refreshed = True
        if metric < tol:
            converged = True
            break
    report = ConvergenceReport(iterations_run=len(metric_trace),
                               metric_trace=metric_trace, converged=converged)
    result = dataclasses.replace(result, trace=trace)
    return result, state, report
