"""Escape-time machinery: OU hitting oracle, envelope constants, MC bounds.

In the transformed amplitude coordinate w = P(beta)^{-1} (u - Phi(beta)) the
weighted distance to the cycle is ||w||, its drift decays at least as fast as
-b ||w|| up to a remainder gamma_2, and the exit probability of a tube of
radius `a` is bounded by the first-hitting law of a scalar OU process with
decay b, start x/sqrt(lambda*eps), and barrier a/(2 sqrt(lambda*eps)).  This
module evaluates every ingredient of that bound and verifies it by direct
Monte Carlo of the full SDE.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.signal import lfilter

from ._eval import FrameEval
from .errors import BadDecay, InsufficientSamples
from .floquet import FloquetFrame
from .models import OscillatorModel, eval_drift, eval_jacobian, noise_at
from .periodic import LimitCycle, mode_powers
from .errors import DegenerateMinimum
from .phase import M_FLOOR, tracked_newton_batch
from .sde import _StreamNoise, _kappa_batch

__all__ = [
    "EscapeConfig",
    "EscapeReport",
    "escape_rate_factor",
    "ou_hitting_probability",
    "compute_lambda",
    "amax",
    "gamma2_eval",
    "estimate_constants",
    "interval_check",
    "escape_probability_mc",
]

log = logging.getLogger(__name__)

_OU_PATHS = 100_000
_CHUNK = 64


@dataclass(frozen=True)
class EscapeConfig:
    """Parameters of one escape experiment on the weighted amplitude."""

    a: float
    T: float
    epsilon: float
    n_paths: int
    dt: float
    seed: int

    def __post_init__(self):
        if min(self.a, self.T, self.epsilon, self.dt) <= 0 or self.n_paths <= 0:
            raise ValueError("all escape configuration fields must be positive")


@dataclass(frozen=True)
class EscapeReport:
    """MC escape estimate with its comparison bound and bookkeeping."""

    p_hat: float
    se: float
    ci_low: float
    ci_high: float
    bound: float
    bound_asymptotic: float
    lam: float
    x_bar: float
    a_bar: float
    interval_status: str
    n_paths: int
    n_escaped: int
    n_tau: int
    n_errors: int
    dt: float
    seed: int


def escape_rate_factor(z: float) -> float:
    """Shape factor sqrt(z/(2 pi)) exp(-z/2) of the asymptotic hitting rate."""
    return float(np.sqrt(z / (2.0 * np.pi)) * np.exp(-z / 2.0))


def ou_hitting_probability(b: float, x_bar: float, a_bar: float, T: float,
                           method: str = "monte_carlo", n_paths: int = _OU_PATHS,
                           seed: int = 0, dt: float | None = None) -> float:
    """P(sup_{t<=T} Y_t >= a_bar) for dY = -b Y dt + dW, Y_0 = x_bar.

    monte_carlo uses the exact OU transition plus a Brownian-bridge crossing
    test inside each step (nearly unbiased barrier detection).  asymptotic
    returns 1 - exp(-b T g(z)) with z = 2 b a_bar^2, the squared barrier in
    stationary-deviation units; a start anywhere deep inside the well gives
    the same leading-order rate.  Starting at or above the barrier is an
    immediate hit (probability 1).
    """
    if b <= 0:
        raise BadDecay(f"decay rate must be positive, got {b}")
    if a_bar <= x_bar:
        return 1.0
    if T <= 0:
        return 0.0
    if method == "asymptotic":
        z = 2.0 * b * a_bar * a_bar
        return float(1.0 - np.exp(-b * T * escape_rate_factor(z)))
    if method != "monte_carlo":
        raise ValueError(f"unknown method {method!r}")

    if dt is None:
        dt = min(1e-3, 1.0 / (100.0 * b))
    n_steps = int(np.ceil(T / dt))
    rng = np.random.Generator(np.random.Philox(key=np.array(
        [np.uint64(seed), np.uint64(0xB0)], dtype=np.uint64)))
    decay = np.exp(-b * dt)
    sd = np.sqrt((1.0 - np.exp(-2.0 * b * dt)) / (2.0 * b))
    y = np.full(n_paths, float(x_bar))
    n_hit = 0
    k = 0
    chunk = 256
    while k < n_steps and y.size:
        m_sub = min(chunk, n_steps - k)
        # exact OU transitions for the whole chunk via the linear recursion
        xi = sd * rng.standard_normal((m_sub, y.size))
        ys = lfilter([1.0], [1.0, -decay], xi, axis=0, zi=(decay * y)[None, :])[0]
        prev = np.vstack([y[None, :], ys[:-1]])
        crossed = ys >= a_bar
        below = ~crossed & (prev < a_bar)
        # Brownian-bridge crossing probability inside steps with both ends below
        pb = np.where(below, np.exp(-2.0 * np.maximum(a_bar - prev, 0.0)
                                    * np.maximum(a_bar - ys, 0.0) / dt), 0.0)
        crossed |= rng.random((m_sub, y.size)) < pb
        gone = crossed.any(axis=0)
        n_hit += int(gone.sum())
        y = ys[-1, ~gone]
        k += m_sub
    return n_hit / n_paths


def amax(frame: FloquetFrame) -> float:
    """Largest tube radius keeping the distance curvature at least one half.

    Half the reciprocal of sup_theta || Phi'' + (P P^T) W' Phi' ||_theta,
    where (P P^T) W' Phi' rewrites the weight-derivative pairing in the
    curvature as a weighted inner product (Cauchy-Schwarz then gives
    M >= 1 - ||residual|| * sup).
    """
    cycle = frame.cycle
    d2 = cycle.d2phi.values
    wd = frame.weight.derivative_table(1).values
    ppt = frame.ppt.values
    vec = d2 + np.einsum("nij,njk,nk->ni", ppt, wd, cycle.dphi.values)
    pinv = frame.Pinv.values
    norms = np.linalg.norm(np.einsum("nij,nj->ni", pinv, vec), axis=1)
    return float(0.5 / np.max(norms))


def _tube_samples(frame: FloquetFrame, n: int, radius: float, rng,
                  magnitudes: np.ndarray | None = None):
    """States u = Phi(theta) + P(theta) w with w_1 = 0 and ||w|| <= radius.

    The w_1 = 0 constraint is the stationarity condition of the phase in
    transformed coordinates, so the samples are exactly the (u, beta) pairs
    the amplitude dynamics can visit.
    Returns (theta, w, u).
    """
    cycle = frame.cycle
    d = cycle.dim
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    direc = rng.standard_normal((n, d - 1))
    direc /= np.linalg.norm(direc, axis=1, keepdims=True)
    if magnitudes is None:
        magnitudes = radius * rng.uniform(0.0, 1.0, size=n)
        magnitudes = np.maximum(magnitudes, 1e-300)  # uniform on (0, radius]
    w = np.zeros((n, d))
    w[:, 1:] = direc * magnitudes[:, None]
    E = mode_powers(theta, max(cycle.phi.kmax, frame.P.kmax))
    phi = cycle.phi.eval_with_modes(E, 0)
    pmat = frame.P.eval_with_modes(E, 0)
    u = phi + np.einsum("nij,nj->ni", pmat, w)
    return theta, w, u


def _transformed_diffusion(model: OscillatorModel, fe: FrameEval,
                           u: np.ndarray, theta: np.ndarray):
    """Diffusion matrix of the transformed amplitude w at (u, theta) batches.

    Gbar = P^{-1} Gtil + omega0^{-1} M^{-1} (-P^{-1} J v + S w) (R^T G) with
    Gtil = G - M^{-1} Phi' (R^T G); v = u - Phi(theta), w = P^{-1} v.
    Returns (Gbar, M, w).
    """
    frame, cycle = fe.frame, fe.cycle
    E = fe.modes(theta)
    phi = fe.phi(E, 0)
    dphi = fe.phi(E, 1)
    d2phi = fe.phi(E, 2)
    wmat = fe.weight(E, 0)
    wd = fe.weight(E, 1)
    pinv = fe.pinv(E)
    gmat = noise_at(model, u)
    v = u - phi
    w = np.einsum("...ij,...j->...i", pinv, v)
    m = (1.0
         - np.einsum("...i,...ij,...j->...", v, wmat, d2phi)
         - np.einsum("...i,...ij,...j->...", v, wd, dphi))
    rrow = np.einsum("...ij,...j->...i", wmat, dphi)            # R = W Phi'
    rg = np.einsum("...i,...ij->...j", rrow, gmat)              # R^T G
    gtil = gmat - np.einsum("...i,...j->...ij", dphi, rg) / m[..., None, None]
    jac = eval_jacobian(model, phi)                             # on-cycle Jacobian
    pjv = np.einsum("...ij,...jk,...k->...i", pinv, jac, v)
    sw = fe.frame.exponents * w
    col = (-pjv + sw) / (fe.cycle.frequency * m[..., None])
    gbar = np.einsum("...ij,...jk->...ik", pinv, gtil) + np.einsum(
        "...i,...j->...ij", col, rg)
    return gbar, m, w


def compute_lambda(model: OscillatorModel, frame: FloquetFrame,
                   n_samples: int = 2048, seed: int = 0,
                   safety: float = 1.05) -> float:
    """Noise-strength constant lambda = lambda_{G,P}^2 * lambda_Q.

    lambda_{G,P} is the numerical sup of ||Gbar|| over the grid phases and a
    sample of tube states within the admissible radius; lambda_Q the largest
    covariance eigenvalue.  The sup is sampled, not proven, so the result is
    inflated by `safety`.
    """
    cycle = frame.cycle
    fe = FrameEval(frame, cycle)
    radius = amax(frame)
    rng = np.random.default_rng(seed)

    theta_grid = cycle.phi.grid
    on_cycle = cycle.phi.values
    gbar, m, _ = _transformed_diffusion(model, fe, on_cycle, theta_grid)
    best = np.max(np.linalg.norm(gbar, ord=2, axis=(-2, -1)))

    theta, w, u = _tube_samples(frame, n_samples, radius, rng)
    gbar, m, _ = _transformed_diffusion(model, fe, u, theta)
    ok = m > M_FLOOR
    skipped = int(np.sum(~ok))
    if skipped:
        log.warning("compute_lambda skipped %d degenerate tube samples", skipped)
    best = max(best, np.max(np.linalg.norm(gbar[ok], ord=2, axis=(-2, -1))))

    lam_q = float(np.max(np.linalg.eigvalsh(model.covariance)))
    return safety * float(best) ** 2 * lam_q


def gamma2_eval(model: OscillatorModel, frame: FloquetFrame, cycle: LimitCycle,
                u, beta, eps: float):
    """Drift remainder gamma_2 of d||w||^2 relative to pure -b decay.

    gamma_2 = <w, gamma> + (eps/2) tr(Gbar Q Gbar^T), split as
    gamma_2 = gamma_2^1 + eps * gamma_2^2 with gamma_2^1 the nonlinear drift
    remainder (cubic in ||w|| by construction) and gamma_2^2 collecting the
    kappa-, cross-variation-, and trace terms.
    """
    fe = FrameEval(frame, cycle)
    u = np.asarray(u, dtype=float)
    beta = np.asarray(beta, dtype=float)
    scalar = beta.ndim == 0
    E = fe.modes(beta)
    phi = fe.phi(E, 0)
    dphi = fe.phi(E, 1)
    d2phi = fe.phi(E, 2)
    wmat = fe.weight(E, 0)
    pinv = fe.pinv(E)
    pmat = fe.pmat(E)
    pd = frame.P.eval_with_modes(E, 1)

    v = u - phi
    w = np.einsum("...ij,...j->...i", pinv, v)
    kap, m, qf = _kappa_batch(fe, model, u, beta, E)
    if np.any(m <= M_FLOOR):
        raise DegenerateMinimum("curvature at or below threshold in gamma2_eval")

    f = eval_drift(model, u)
    fw = np.einsum("...i,...ij,...j->...", f, wmat, dphi)
    nu = frame.exponents
    omega0 = cycle.frequency
    sw = nu * w
    w_sw = np.einsum("...i,...i->...", w, sw)
    jac = eval_jacobian(model, phi)
    w_pjv = np.einsum("...i,...ij,...jk,...k->...", w, pinv, jac, v)
    w_pf = np.einsum("...i,...ij,...j->...", w, pinv, f)
    w_pdphi = np.einsum("...i,...ij,...j->...", w, pinv, dphi)
    w_pd2phi = np.einsum("...i,...ij,...j->...", w, pinv, d2phi)

    slope = fw / m  # = omega0 + O(||w||^2)
    g21 = (w_pf - slope * w_pdphi - w_sw + (slope / omega0) * (-w_pjv + w_sw))

    gbar, _, _ = _transformed_diffusion(model, fe, u, beta)
    qcov = model.covariance
    trace = np.einsum("...ij,jk,...ik->...", gbar, qcov, gbar)

    gmat = noise_at(model, u)
    rvec = np.einsum("...ij,...j->...i", wmat, dphi)
    rg = np.einsum("...i,...ij->...j", rvec, gmat)
    gtil = gmat - np.einsum("...i,...j->...ij", dphi, rg) / m[..., None, None]
    # cross-variation of the frame change: P^-1 P' P^-1 Gtil Q G^T W Phi'
    inner_vec = np.einsum("...ij,jk,...k->...i", gtil, qcov, rg)
    chain = np.einsum("...ij,...jk,...kl,...l->...i", pinv, pd, pinv, inner_vec)
    w_chain = np.einsum("...i,...i->...", w, chain)

    g22 = (-kap / m * w_pdphi
           - 0.5 * qf / (m * m) * w_pd2phi
           + (kap / (m * omega0)) * (-w_pjv + w_sw)
           - w_chain / m
           + 0.5 * trace)
    total = g21 + eps * g22
    if scalar:
        return float(total)
    return total


def estimate_constants(model: OscillatorModel, frame: FloquetFrame,
                       cycle: LimitCycle, eps: float, n_samples: int,
                       seed: int = 0, inflation: float = 1.1):
    """Smallest (C1, C2) with |gamma_2| <= C1 ||w|| eps + C2 ||w||^3 on samples.

    Tube states are drawn with ||w|| uniform on (0, amax]; the envelope is a
    two-feature linear program (least average envelope height subject to
    covering every sample) and both constants are inflated by `inflation`.
    """
    rng = np.random.default_rng(seed)
    radius = amax(frame)
    theta, w, u = _tube_samples(frame, n_samples, radius, rng)
    wn = np.linalg.norm(w, axis=1)
    g2 = np.abs(gamma2_eval(model, frame, cycle, u, theta, eps))
    valid = np.isfinite(g2)
    if valid.sum() < 100:
        raise InsufficientSamples(f"only {int(valid.sum())} valid tube samples")
    f1 = eps * wn[valid]
    f2 = wn[valid] ** 3
    res = linprog(c=[f1.mean(), f2.mean()],
                  A_ub=np.column_stack([-f1, -f2]), b_ub=-g2[valid],
                  bounds=[(0, None), (0, None)], method="highs")
    if not res.success:
        raise InsufficientSamples(f"envelope fit failed: {res.message}")
    c1, c2 = res.x
    return float(inflation * c1), float(inflation * c2)


def interval_check(a: float, eps: float, b: float, C1: float, C2: float,
                   amax_value: float) -> str:
    """Classify a threshold against the admissible interval.

    inside iff C1 eps + C2 a^2 <= b a / 2 and a <= amax; thresholds at or
    below sqrt(eps/b) are flagged as below_useful_range (fluctuations reach
    them almost immediately).
    """
    if not (C1 * eps + C2 * a * a <= 0.5 * b * a and a <= amax_value):
        return "outside"
    if a <= np.sqrt(eps / b):
        return "below_useful_range"
    return "inside"


def _wilson(k: int, n: int, z: float = 1.959963984540054):
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def escape_probability_mc(model: OscillatorModel, frame: FloquetFrame,
                          cycle: LimitCycle, config: EscapeConfig,
                          constants: tuple[float, float] | None = None,
                          rho: float = 0.5,
                          lam: float | None = None) -> EscapeReport:
    """Monte Carlo of P(sup_t ||u_t - Phi(beta_t)||_beta >= a before T).

    Full-SDE paths start on the cycle; the phase is tracked every step and a
    path counts as escaped the first step its weighted amplitude reaches the
    threshold.  Reaching the curvature stopping threshold first, or any
    per-path extraction failure, is counted as an escape (conservative) and
    reported separately.  The comparison bound is the OU hitting probability
    at x_bar = 0, a_bar = rho * a / sqrt(lambda eps).
    """
    n_steps = int(round(config.T / config.dt))
    if abs(n_steps * config.dt - config.T) > 1e-9 * max(1.0, config.T):
        raise ValueError("dt must divide T")
    fe = FrameEval(frame, cycle)
    b = frame.decay_bound
    eps = config.epsilon
    root_eps = np.sqrt(eps)
    dt = config.dt
    n_paths = config.n_paths

    source = _StreamNoise(model.covariance, dt, n_paths, config.seed)
    u = np.tile(cycle.phi.values[0], (n_paths, 1))
    beta = np.zeros(n_paths)
    omega0 = cycle.frequency
    alive = np.ones(n_paths, dtype=bool)
    escaped = np.zeros(n_paths, dtype=bool)
    tau_hit = np.zeros(n_paths, dtype=bool)
    errors = np.zeros(n_paths, dtype=bool)
    a2 = config.a * config.a

    k = 0
    while k < n_steps and alive.any():
        m_sub = min(_CHUNK, n_steps - k)
        inc_all = source.chunk(m_sub)
        idx = np.nonzero(alive)[0]
        ua = u[idx]
        ba = beta[idx]
        done = np.zeros(idx.size, dtype=bool)
        for j in range(m_sub):
            act = ~done
            if not act.any():
                break
            inc = inc_all[idx[act], j]
            f = eval_drift(model, ua[act])
            g = noise_at(model, ua[act])
            ua[act] += f * dt + root_eps * np.einsum("bij,bj->bi", g, inc)
            bnew, m, conv, degen = tracked_newton_batch(
                fe, ua[act], ba[act] + omega0 * dt)
            ba[act] = bnew
            sub = np.nonzero(act)[0]
            bad = ~conv
            if bad.any():
                errors[idx[sub[bad]]] = True
                done[sub[bad]] = True
            tau_now = conv & degen
            if tau_now.any():
                tau_hit[idx[sub[tau_now]]] = True
                done[sub[tau_now]] = True
            ok = conv & ~degen
            if ok.any():
                E = fe.modes(bnew[ok])
                r = ua[act][ok] - fe.phi(E, 0)
                amp2 = np.einsum("bi,bij,bj->b", r, fe.weight(E, 0), r)
                esc = amp2 >= a2
                if esc.any():
                    escaped[idx[sub[ok][esc]]] = True
                    done[sub[ok][esc]] = True
        u[idx] = ua
        beta[idx] = ba
        alive[idx[done]] = False
        k += m_sub

    n_esc = int(escaped.sum())
    n_tau = int(tau_hit.sum())
    n_err = int(errors.sum())
    n_total = n_esc + n_tau + n_err  # tau and failures count as escapes
    p_hat = n_total / n_paths
    se = float(np.sqrt(p_hat * (1.0 - p_hat) / n_paths))
    lo, hi = _wilson(n_total, n_paths)

    if lam is None:
        lam = compute_lambda(model, frame, seed=config.seed + 1)
    x_bar = 0.0
    a_bar = rho * config.a / np.sqrt(lam * eps)
    bound = ou_hitting_probability(b, x_bar, a_bar, config.T,
                                   method="monte_carlo", seed=config.seed + 2)
    bound_asym = ou_hitting_probability(b, x_bar, a_bar, config.T,
                                        method="asymptotic")
    if constants is None:
        constants = estimate_constants(model, frame, cycle, eps,
                                       n_samples=10_000, seed=config.seed + 3)
    status = interval_check(config.a, eps, b, constants[0], constants[1],
                            amax(frame))
    return EscapeReport(
        p_hat=p_hat, se=se, ci_low=lo, ci_high=hi, bound=bound,
        bound_asymptotic=bound_asym, lam=float(lam), x_bar=x_bar,
        a_bar=float(a_bar), interval_status=status, n_paths=n_paths,
        n_escaped=n_esc, n_tau=n_tau, n_errors=n_err, dt=dt, seed=config.seed)
