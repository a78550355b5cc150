"""Phase extraction by stationarity of the weighted distance to the cycle.

The phase beta of a state u is the root of G(u, a) = -2 <u - Phi(a), Phi'(a)>_a,
i.e. the stationarity condition of the weighted squared distance with the
weight moving along with the candidate anchor.  The curvature
M(u, a) = (1/2) dG/da controls solvability: extraction is abandoned (the
stopping condition) once M falls to a small threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._eval import FrameEval, residual_terms
from .errors import DegenerateMinimum, NewtonDivergence, NonFiniteInput
from .floquet import FloquetFrame
from .periodic import LimitCycle

__all__ = [
    "PhaseState",
    "M_FLOOR",
    "g_objective",
    "m_curvature",
    "extract_phase_global",
    "extract_phase_tracked",
]

M_FLOOR = 1e-6       # curvature threshold standing in for the stopping time
_G_TOL = 1e-12       # Newton convergence target on |G|
_G_ACCEPT = 1e-10    # postcondition: never report success above this
_MAX_NEWTON = 50
_MAX_STEP = 0.5      # per-iteration cap keeps Newton inside the starting basin
_TIE_TOL = 1e-10


@dataclass(frozen=True)
class PhaseState:
    """Extracted phase, scaled transverse residual, curvature, stop flag.

    beta is in radians; tracked extraction keeps it unwrapped across calls,
    global extraction reports the canonical representative in [0, 2pi).
    amplitude is v = (u - Phi(beta)) / sqrt(eps).
    """

    beta: float
    amplitude: np.ndarray
    m_value: float
    tau_triggered: bool


def g_objective(frame: FloquetFrame, cycle: LimitCycle, z, a) -> float:
    """Stationarity objective G(z, a) = -2 <z - Phi(a), Phi'(a)>_a."""
    fe = FrameEval(frame, cycle)
    z = np.asarray(z, dtype=float)
    _, _, _, _, g, _ = residual_terms(fe, z, np.asarray(a, dtype=float))
    return float(g) if np.ndim(g) == 0 else g


def m_curvature(frame: FloquetFrame, cycle: LimitCycle, z, a) -> float:
    """Curvature M(z, a) = 1 - <z-Phi, Phi''>_a - <z-Phi, W'(a) Phi'(a)>."""
    fe = FrameEval(frame, cycle)
    z = np.asarray(z, dtype=float)
    _, _, _, _, _, m = residual_terms(fe, z, np.asarray(a, dtype=float))
    return float(m) if np.ndim(m) == 0 else m


def _newton_polish(fe: FrameEval, u: np.ndarray, a: float) -> tuple[float, float, float]:
    """Newton on G(u, a) = 0 with derivative 2M; returns (a, |G|, M)."""
    g = m = np.inf
    for _ in range(_MAX_NEWTON):
        _, _, _, _, g, m = residual_terms(fe, u, np.asarray(a))
        g = float(g)
        m = float(m)
        if abs(g) <= _G_TOL:
            return a, abs(g), m
        if m == 0.0:
            break
        step = g / (2.0 * m)
        a = a - float(np.clip(step, -_MAX_STEP, _MAX_STEP))
    _, _, _, _, g, m = residual_terms(fe, u, np.asarray(a))
    return a, abs(float(g)), float(m)


def _state(u, beta, m, eps, fe, raise_on_degenerate):
    degenerate = m <= M_FLOOR
    if degenerate and raise_on_degenerate:
        raise DegenerateMinimum(f"curvature M = {m:.3e} at beta = {beta:.6f}")
    phi = fe.phi(fe.modes(np.asarray(beta)), 0)
    v = (u - phi) / np.sqrt(eps) if eps > 0 else (u - phi)
    return PhaseState(beta=float(beta), amplitude=v, m_value=float(m),
                      tau_triggered=bool(degenerate))


def extract_phase_global(frame: FloquetFrame, cycle: LimitCycle, u, eps: float,
                         raise_on_degenerate: bool = True) -> PhaseState:
    """Phase of u as the global minimizer of the weighted distance.

    Scans the table grid for the smallest ||u - Phi(theta_k)||^2_{theta_k},
    then Newton-polishes the stationarity condition.  Two equally deep,
    well-separated grid minima are reported as NewtonDivergence (a tie; the
    point is equidistant from distinct cycle arcs).
    """
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise NonFiniteInput("state contains NaN or inf")
    if eps <= 0:
        raise ValueError("eps must be positive")
    fe = FrameEval(frame, cycle)

    r = u[None, :] - cycle.phi.values
    dist2 = np.einsum("ni,nij,nj->n", r, frame.weight.values, r)
    lo = np.minimum(np.roll(dist2, 1), np.roll(dist2, -1))
    minima = np.nonzero(dist2 <= lo)[0]
    best = int(minima[np.argmin(dist2[minima])])
    n = cycle.n_grid
    others = minima[[abs((int(k) - best) % n) not in (0, 1, n - 1) for k in minima]]
    if others.size and np.min(dist2[others]) - dist2[best] <= _TIE_TOL:
        raise NewtonDivergence(
            "tie: two separated grid minima within 1e-10; phase is ambiguous")

    a0 = 2.0 * np.pi * best / n
    a, gabs, m = _newton_polish(fe, u, a0)
    if gabs > _G_ACCEPT:
        raise NewtonDivergence(f"|G| = {gabs:.3e} after {_MAX_NEWTON} iterations")
    return _state(u, a % (2.0 * np.pi), m, eps, fe, raise_on_degenerate)


def extract_phase_tracked(frame: FloquetFrame, cycle: LimitCycle, u, beta_prev: float,
                          eps: float, raise_on_degenerate: bool = True) -> PhaseState:
    """Phase of u by Newton from a previous phase, unwrapping continuously.

    The returned beta is placed within pi of beta_prev by adding the nearest
    multiple of 2pi.  Converging onto a stationary point that is not a
    minimum (negative curvature: the far side of the cycle) raises
    NewtonDivergence rather than silently returning it.
    """
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise NonFiniteInput("state contains NaN or inf")
    if eps <= 0:
        raise ValueError("eps must be positive")
    fe = FrameEval(frame, cycle)

    a, gabs, m = _newton_polish(fe, u, float(beta_prev))
    if gabs > _G_ACCEPT:
        raise NewtonDivergence(f"|G| = {gabs:.3e} after {_MAX_NEWTON} iterations")
    if m < -M_FLOOR:
        raise NewtonDivergence(
            f"converged to a non-minimal stationary point (M = {m:.3e})")
    beta = a + 2.0 * np.pi * np.round((beta_prev - a) / (2.0 * np.pi))
    return _state(u, beta, m, eps, fe, raise_on_degenerate)


# -- batched tracking used by the stochastic simulators ----------------------

def tracked_newton_batch(fe: FrameEval, u: np.ndarray, beta0: np.ndarray,
                         max_iter: int = _MAX_NEWTON):
    """Vectorized Newton for per-path phase tracking.

    Returns (beta, m, converged, degenerate); paths are never raised on so
    the caller can account failures per path (escape runs count them
    conservatively).
    """
    beta = beta0.astype(float).copy()
    n = beta.shape[0]
    active = np.ones(n, dtype=bool)
    g = np.zeros(n)
    m = np.ones(n)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        _, _, _, _, gi, mi = residual_terms(fe, u[idx], beta[idx])
        g[idx] = gi
        m[idx] = mi
        done = np.abs(gi) <= _G_TOL
        step = np.where(mi != 0.0, gi / (2.0 * mi), 0.0)
        step = np.clip(step, -_MAX_STEP, _MAX_STEP)
        beta[idx] = np.where(done, beta[idx], beta[idx] - step)
        active[idx] = ~done
    if np.any(active):
        idx = np.nonzero(active)[0]
        _, _, _, _, gi, mi = residual_terms(fe, u[idx], beta[idx])
        g[idx] = gi
        m[idx] = mi
    converged = np.abs(g) <= _G_ACCEPT
    degenerate = m <= M_FLOOR
    # keep the continuous branch nearest the predictor
    beta = beta + 2.0 * np.pi * np.round((beta0 - beta) / (2.0 * np.pi))
    return beta, m, converged, degenerate
