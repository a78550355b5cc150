"""Stochastic integrators for the oscillator and its phase representations.

Four Euler-Maruyama simulators share one stepping core:

* the full state SDE du = F dt + sqrt(eps) G dW;
* the exact coupled pair (beta, v) equivalent to it, with the order-eps
  drift correction kappa from the Ito cross-variations;
* the reduced phase equation d theta = [omega0 + eps*kappa_hat] dt + noise,
  obtained by evaluating on the cycle;
* the isochronal baseline driven by the PRC with its Ito drift term.

All simulators accept a NoisePath so different representations can be driven
by the identical Brownian increments; batched multi-path runners with
per-path counter-based streams feed the statistical experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._eval import FrameEval, residual_terms
from .errors import BlowUp, DegenerateMinimum
from .floquet import FloquetFrame
from .models import OscillatorModel, covariance_factor, eval_drift, noise_at
from .periodic import LimitCycle, PeriodicTable, mode_powers
from .phase import M_FLOOR, extract_phase_global, tracked_newton_batch

__all__ = [
    "NoisePath",
    "TrajectoryRecord",
    "sample_noise",
    "simulate_full",
    "kappa",
    "kappa_table",
    "simulate_exact_coupled",
    "simulate_reduced_phase",
    "simulate_isochronal",
    "decoupling_check",
    "PathEnsemble",
    "simulate_paths",
]

_CHUNK = 512  # steps of increments generated at a time in batched runs
_DEFAULT_BLOWUP = 1e6


@dataclass(frozen=True)
class NoisePath:
    """Brownian increments with covariance dt*Q, reproducible from the key."""

    dt: float
    increments: np.ndarray
    seed: int
    stream_id: int

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]


def _philox(seed: int, stream_id: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(stream_id)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_noise(Q, dt: float, n_steps: int, seed: int, stream_id: int = 0) -> NoisePath:
    """Correlated Brownian increments: sqrt(dt) * L * xi with L L^T = Q.

    The generator is counter-based and keyed by (seed, stream_id), so equal
    keys reproduce equal paths bit for bit and distinct streams are
    independent.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    ell = covariance_factor(np.asarray(Q, dtype=float))
    xi = _philox(seed, stream_id).standard_normal((n_steps, ell.shape[0]))
    return NoisePath(dt=float(dt), increments=np.sqrt(dt) * (xi @ ell.T),
                     seed=int(seed), stream_id=int(stream_id))


@dataclass(frozen=True)
class TrajectoryRecord:
    """Uniformly sampled trajectory; arrays stop at tau when it triggered."""

    times: np.ndarray
    states: np.ndarray | None = None
    beta: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    tau_index: int | None = None


def _step_count(dt: float, T: float) -> int:
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-12 * max(1.0, abs(T)):
        raise ValueError(f"dt = {dt} does not divide T = {T}")
    return n


def _check_noise(noise: NoisePath, dt: float, n: int):
    if abs(noise.dt - dt) > 1e-14 * max(1.0, dt):
        raise ValueError("noise path was sampled with a different dt")
    if noise.n_steps < n:
        raise ValueError(f"noise path has {noise.n_steps} steps, need {n}")


# -- full state SDE ----------------------------------------------------------

def simulate_full(model: OscillatorModel, u0, eps: float, dt: float, T: float,
                  noise: NoisePath, blowup: float = _DEFAULT_BLOWUP) -> TrajectoryRecord:
    """Euler-Maruyama on du = F(u) dt + sqrt(eps) G(u) dW."""
    n = _step_count(dt, T)
    _check_noise(noise, dt, n)
    u = np.asarray(u0, dtype=float).copy()
    states = np.empty((n + 1, model.dim))
    states[0] = u
    root_eps = np.sqrt(eps)
    for k in range(n):
        g = noise_at(model, u)
        u = u + eval_drift(model, u) * dt + root_eps * (g @ noise.increments[k])
        if not np.all(np.isfinite(u)) or np.linalg.norm(u) > blowup:
            raise BlowUp(f"state norm left the configured bound at step {k + 1}")
        states[k + 1] = u
    times = dt * np.arange(n + 1)
    return TrajectoryRecord(times=times, states=states)


# -- exact phase drift correction ---------------------------------------------

def _kappa_batch(fe: FrameEval, model: OscillatorModel, u: np.ndarray,
                 beta: np.ndarray, E=None):
    """kappa and the tangent quadratic form at (u, beta) batches.

    Returns (kappa, m, qf) with qf = <K Phi', Q K Phi'> for reuse in drift
    assembly.  K(u, beta) = G(u)^T (P P^T)^{-1}(beta).
    """
    if E is None:
        E = fe.modes(beta)
    w = fe.weight(E, 0)
    wd = fe.weight(E, 1)
    wdd = fe.weight(E, 2)
    phi = fe.phi(E, 0)
    dphi = fe.phi(E, 1)
    d2phi = fe.phi(E, 2)
    d3phi = fe.phi(E, 3)
    r = u - phi
    m = (1.0
         - np.einsum("...i,...ij,...j->...", r, w, d2phi)
         - np.einsum("...i,...ij,...j->...", r, wd, dphi))

    gmat = noise_at(model, u)
    qcov = model.covariance
    k_dphi = np.einsum("...ji,...jk,...k->...i", gmat, w, dphi)    # K Phi'
    k_d2phi = np.einsum("...ji,...jk,...k->...i", gmat, w, d2phi)  # K Phi''
    g_wd_dphi = np.einsum("...ji,...jk,...k->...i", gmat, wd, dphi)  # G^T W' Phi'
    qf = np.einsum("...i,ij,...j->...", k_dphi, qcov, k_dphi)

    term1 = np.einsum("...i,ij,...j->...", k_d2phi, qcov, k_dphi)
    term2 = np.einsum("...i,ij,...j->...", g_wd_dphi, qcov, k_dphi)
    bracket = (np.einsum("...i,...ij,...j->...", r, w, d3phi)
               - np.einsum("...i,...ij,...j->...", dphi, w, d2phi)
               + np.einsum("...i,...ij,...j->...", r, wdd, dphi)
               + 2.0 * np.einsum("...i,...ij,...j->...", r, wd, d2phi)
               - np.einsum("...i,...ij,...j->...", dphi, wd, dphi))
    with np.errstate(divide="ignore", invalid="ignore"):
        kap = term1 / m + term2 / m + 0.5 * bracket * qf / (m * m)
    return kap, m, qf


def kappa(frame: FloquetFrame, cycle: LimitCycle, model: OscillatorModel,
          u, beta: float, eps: float = 0.0) -> float:
    """Order-eps phase drift from Ito cross- and quadratic variations.

    eps itself does not enter kappa (it multiplies it in the phase drift);
    the argument is kept so call sites mirror the drift assembly.
    """
    fe = FrameEval(frame, cycle)
    u = np.asarray(u, dtype=float)
    kap, m, _ = _kappa_batch(fe, model, u, np.asarray(beta, dtype=float))
    if np.ndim(kap) == 0:
        if m <= M_FLOOR:
            raise DegenerateMinimum(f"curvature M = {float(m):.3e}")
        return float(kap)
    if np.any(m <= M_FLOOR):
        raise DegenerateMinimum("curvature at or below threshold in batch")
    return kap


def kappa_table(frame: FloquetFrame, cycle: LimitCycle,
                model: OscillatorModel) -> PeriodicTable:
    """kappa evaluated on the cycle at the grid nodes (the reduced drift)."""
    fe = FrameEval(frame, cycle)
    theta = cycle.phi.grid
    kap, _, _ = _kappa_batch(fe, model, cycle.phi.values, theta)
    return PeriodicTable(kap)


# -- exact coupled pair -------------------------------------------------------

def simulate_exact_coupled(frame: FloquetFrame, cycle: LimitCycle,
                           model: OscillatorModel, u0, eps: float, dt: float,
                           T: float, noise: NoisePath,
                           blowup: float = _DEFAULT_BLOWUP) -> TrajectoryRecord:
    """Step the exact (beta, v) pair equivalent to the full SDE.

    The state is reconstructed as u = Phi(beta) + sqrt(eps) v every step so
    F, G, and the weight pairings are evaluated where the equations demand.
    Stops and records tau_index when the curvature reaches the threshold.
    At eps = 0 the pair degenerates to the deterministic rotation
    d beta = M^{-1} <F, Phi'>_beta dt with v frozen.
    """
    n = _step_count(dt, T)
    _check_noise(noise, dt, n)
    fe = FrameEval(frame, cycle)
    root_eps = np.sqrt(eps)

    if eps > 0:
        st = extract_phase_global(frame, cycle, u0, eps)
        beta, v = st.beta, st.amplitude.copy()
    else:
        st = extract_phase_global(frame, cycle, u0, 1.0)
        beta, v = st.beta, st.amplitude.copy()

    betas = np.empty(n + 1)
    amps = np.empty((n + 1, model.dim))
    betas[0], amps[0] = beta, v
    tau_index = None
    for k in range(n):
        u = fe.phi(fe.modes(np.asarray(beta)), 0) + root_eps * v
        if not np.all(np.isfinite(u)) or np.linalg.norm(u) > blowup:
            raise BlowUp(f"reconstructed state left the bound at step {k}")
        b_arr = np.asarray(beta)
        E = fe.modes(b_arr)
        kap, m, qf = _kappa_batch(fe, model, u, b_arr, E)
        if m <= M_FLOOR:
            tau_index = k
            break
        dphi = fe.phi(E, 1)
        w = fe.weight(E, 0)
        f = eval_drift(model, u)
        fw = float(np.einsum("i,ij,j->", f, w, dphi))
        dw = noise.increments[k]
        g_dw = noise_at(model, u) @ dw
        gw = float(np.einsum("i,ij,j->", g_dw, w, dphi))
        minv = 1.0 / float(m)
        kap = float(kap)
        qf = float(qf)

        d_beta = minv * ((fw + eps * kap) * dt + root_eps * gw)
        if eps > 0:
            d2phi = fe.phi(E, 2)
            dv = ((f - minv * (fw + eps * kap) * dphi) * (dt / root_eps)
                  - 0.5 * root_eps * d2phi * minv * minv * qf * dt
                  + (g_dw - minv * gw * dphi))
        else:
            dv = 0.0
        beta = beta + d_beta
        v = v + dv
        betas[k + 1], amps[k + 1] = beta, v

    if tau_index is not None:
        times = dt * np.arange(tau_index + 1)
        return TrajectoryRecord(times=times, beta=betas[: tau_index + 1],
                                amplitude=amps[: tau_index + 1], tau_index=tau_index)
    return TrajectoryRecord(times=dt * np.arange(n + 1), beta=betas, amplitude=amps)


# -- reduced and isochronal phase equations -----------------------------------

def _run_scalar_phase(theta0, omega0, eps, dt, n, increments, drift_table,
                      diff_vec_table, model_noise=None, fe=None):
    """Shared Euler loop for the two scalar phase equations.

    d theta = [omega0 + eps * drift(theta)] dt + sqrt(eps) <vec(theta), dW>,
    where vec is either G(Phi)^T R (isochronal) or R paired with G(Phi) dW
    (reduced); the caller encodes that in diff_vec_table / model_noise.
    """
    theta = float(theta0)
    out = np.empty(n + 1)
    out[0] = theta
    root_eps = np.sqrt(eps)
    for k in range(n):
        th_arr = np.asarray(theta)
        drift = drift_table.eval(th_arr) if drift_table is not None else 0.0
        if model_noise is None:
            vec = diff_vec_table.eval(th_arr)
            noise_term = float(vec @ increments[k])
        else:
            model, cycle = model_noise
            phi = cycle.phi.eval(th_arr)
            g = noise_at(model, phi)
            vec = diff_vec_table.eval(th_arr)
            noise_term = float((g @ increments[k]) @ vec)
        theta = theta + (omega0 + eps * float(drift)) * dt + root_eps * noise_term
        out[k + 1] = theta
    return out


def simulate_reduced_phase(frame: FloquetFrame, cycle: LimitCycle,
                           model: OscillatorModel, theta0: float, eps: float,
                           dt: float, T: float, noise: NoisePath) -> TrajectoryRecord:
    """Weak-noise phase equation with the on-cycle drift correction.

    d theta = [omega0 + eps kappa_hat(theta)] dt + sqrt(eps) <G(Phi) dW, R(theta)>;
    kappa_hat is tabulated once on the grid and interpolated.
    """
    n = _step_count(dt, T)
    _check_noise(noise, dt, n)
    khat = kappa_table(frame, cycle, model)
    betas = _run_scalar_phase(theta0, cycle.frequency, eps, dt, n,
                              noise.increments, khat, frame.prc_table,
                              model_noise=(model, cycle))
    return TrajectoryRecord(times=dt * np.arange(n + 1), beta=betas)


def isochronal_coefficient(frame: FloquetFrame, cycle: LimitCycle,
                           model: OscillatorModel) -> PeriodicTable:
    """Z(theta) = G(Phi(theta))^T R(theta) on the grid."""
    g = noise_at(model, cycle.phi.values)
    z = np.einsum("nji,nj->ni", g, frame.prc_table.values)
    return PeriodicTable(z)


def simulate_isochronal(frame: FloquetFrame, cycle: LimitCycle,
                        model: OscillatorModel, theta0: float, eps: float,
                        dt: float, T: float, noise: NoisePath) -> TrajectoryRecord:
    """Isochronal (PRC-based) phase equation in Ito form.

    d theta = [omega0 + eps <Z'(theta), Q Z(theta)>] dt + sqrt(eps) <Z(theta), dW>.
    """
    n = _step_count(dt, T)
    _check_noise(noise, dt, n)
    ztab = isochronal_coefficient(frame, cycle, model)
    zp = ztab.derivative_table(1)
    drift_nodes = np.einsum("ni,ij,nj->n", zp.values, model.covariance, ztab.values)
    betas = _run_scalar_phase(theta0, cycle.frequency, eps, dt, n,
                              noise.increments, PeriodicTable(drift_nodes), ztab)
    return TrajectoryRecord(times=dt * np.arange(n + 1), beta=betas)


# -- leading-order decoupling -------------------------------------------------

def decoupling_check(frame: FloquetFrame, cycle: LimitCycle, model: OscillatorModel,
                     theta: float, v, eps: float, project: bool = True,
                     fd_step: float = 1e-5) -> float:
    """Directional derivative of the effective rotation rate at zero amplitude.

    H(v, theta) = M^{-1}(Phi + sqrt(eps) v, theta) <F(Phi + sqrt(eps) v), Phi'(theta)>_theta;
    returns [H(delta v) - H(-delta v)] / (2 delta).  The claim under test is
    that this vanishes to the order of the frame residuals for every v.
    """
    fe = FrameEval(frame, cycle)
    th = np.asarray(float(theta))
    v = np.asarray(v, dtype=float).copy()
    E = fe.modes(th)
    dphi = fe.phi(E, 1)
    w = fe.weight(E, 0)
    if project:
        wdphi = w @ dphi
        v -= (v @ wdphi) / (dphi @ wdphi) * dphi

    root_eps = np.sqrt(eps)

    def h(vv):
        u = fe.phi(E, 0) + root_eps * vv
        _, _, _, _, _, m = residual_terms(fe, u, th)
        f = eval_drift(model, u)
        return float(np.einsum("i,ij,j->", f, w, dphi)) / float(m)

    return (h(fd_step * v) - h(-fd_step * v)) / (2.0 * fd_step)


# -- batched multi-path runners -----------------------------------------------

class _StreamNoise:
    """Per-path counter-based streams, drawn in step chunks."""

    def __init__(self, Q, dt, n_paths, seed, stream_offset=0):
        self.ell = covariance_factor(np.asarray(Q, dtype=float))
        self.dt = dt
        self.gens = [_philox(seed, stream_offset + i) for i in range(n_paths)]

    def chunk(self, n_sub: int) -> np.ndarray:
        d = self.ell.shape[0]
        xi = np.stack([g.standard_normal((n_sub, d)) for g in self.gens])
        return np.sqrt(self.dt) * xi @ self.ell.T  # (B, n_sub, d)


@dataclass(frozen=True)
class PathEnsemble:
    """Snapshots of a batch of trajectories at a coarse time grid."""

    times: np.ndarray
    states: np.ndarray | None = None   # (B, n_rec, d)
    beta: np.ndarray | None = None     # (B, n_rec)


def simulate_paths(kind: str, frame: FloquetFrame | None, cycle: LimitCycle | None,
                   model: OscillatorModel, start, eps: float, dt: float, T: float,
                   n_paths: int, seed: int, record_every: int | None = None,
                   stream_offset: int = 0,
                   blowup: float = _DEFAULT_BLOWUP) -> PathEnsemble:
    """Run n_paths independent trajectories of one simulator, vectorized.

    kind is one of {"full", "reduced", "isochronal"}; path i consumes the
    noise stream (seed, stream_offset + i), identical to
    sample_noise(..., stream_id=stream_offset + i).  record_every thins the
    stored snapshots (the final time is always recorded).
    """
    n = _step_count(dt, T)
    rec = record_every or n
    if n % rec:
        raise ValueError("record_every must divide the step count")
    n_rec = n // rec
    source = _StreamNoise(model.covariance, dt, n_paths, seed, stream_offset)
    root_eps = np.sqrt(eps)

    if kind == "full":
        u = np.broadcast_to(np.asarray(start, dtype=float),
                            (n_paths, model.dim)).copy()
        snaps = np.empty((n_paths, n_rec + 1, model.dim))
        snaps[:, 0] = u
    elif kind in ("reduced", "isochronal"):
        theta = np.full(n_paths, float(start))
        snaps_b = np.empty((n_paths, n_rec + 1))
        snaps_b[:, 0] = theta
        fe = FrameEval(frame, cycle)
        omega0 = cycle.frequency
        if kind == "reduced":
            drift_tab = kappa_table(frame, cycle, model)
            vec_tab = frame.prc_table
        else:
            vec_tab = isochronal_coefficient(frame, cycle, model)
            zp = vec_tab.derivative_table(1)
            drift_tab = PeriodicTable(
                np.einsum("ni,ij,nj->n", zp.values, model.covariance, vec_tab.values))
        kmax = max(drift_tab.kmax, vec_tab.kmax, cycle.phi.kmax)
    else:
        raise ValueError(f"unknown simulator kind {kind!r}")

    k = 0
    while k < n:
        m_sub = min(_CHUNK, n - k)
        inc = source.chunk(m_sub)
        for j in range(m_sub):
            if kind == "full":
                f = eval_drift(model, u)
                g = noise_at(model, u)
                u = u + f * dt + root_eps * np.einsum("bij,bj->bi", g, inc[:, j])
                if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > blowup:
                    raise BlowUp(f"a path left the bound at step {k + j + 1}")
            else:
                E = mode_powers(theta, kmax)
                drift = drift_tab.eval_with_modes(E, 0)
                vec = vec_tab.eval_with_modes(E, 0)
                if kind == "reduced":
                    phi = cycle.phi.eval_with_modes(E, 0)
                    g = noise_at(model, phi)
                    noise_term = np.einsum("bij,bj,bi->b", g, inc[:, j], vec)
                else:
                    noise_term = np.einsum("bi,bi->b", vec, inc[:, j])
                theta = theta + (omega0 + eps * drift) * dt + root_eps * noise_term
            step = k + j + 1
            if step % rec == 0:
                if kind == "full":
                    snaps[:, step // rec] = u
                else:
                    snaps_b[:, step // rec] = theta
        k += m_sub

    times = dt * rec * np.arange(n_rec + 1)
    if kind == "full":
        return PathEnsemble(times=times, states=snaps)
    return PathEnsemble(times=times, beta=snaps_b)


def track_ensemble_phase(frame: FloquetFrame, cycle: LimitCycle,
                         ensemble: PathEnsemble, beta0=None) -> np.ndarray:
    """Unwrapped phase of full-SDE snapshots via batched tracked Newton.

    Snapshot spacing must keep per-slice phase changes below ~pi/2; the
    returned array has shape (B, n_rec).
    """
    states = ensemble.states
    if states is None:
        raise ValueError("ensemble has no states to extract a phase from")
    fe = FrameEval(frame, cycle)
    n_paths, n_slices, _ = states.shape
    omega0 = cycle.frequency
    out = np.empty((n_paths, n_slices))
    if beta0 is None:
        b = np.full(n_paths, extract_phase_global(frame, cycle, states[0, 0], 1.0).beta)
    else:
        b = np.broadcast_to(np.asarray(beta0, dtype=float), (n_paths,)).copy()
    dt_slice = ensemble.times[1] - ensemble.times[0]
    for j in range(n_slices):
        predictor = b if j == 0 else b + omega0 * dt_slice
        beta, m, conv, degen = tracked_newton_batch(fe, states[:, j], predictor)
        if not np.all(conv):
            raise DegenerateMinimum("tracked extraction failed on a path slice")
        out[:, j] = beta
        b = beta
    return out
