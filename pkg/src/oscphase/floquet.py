"""Floquet frame about a stable limit cycle.

Builds the fundamental matrix of the linearization, its monodromy and
characteristic exponents, the periodic similarity matrix P(theta) whose first
column is the cycle tangent, the weighted inner product generated by P^{-1},
and the phase response curve.  The frame is the geometric backbone for phase
extraction and for the transformed amplitude dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    BadOrder,
    ComplexMultipliers,
    DegenerateEigenbasis,
    IntegrationFailure,
    UnstableCycle,
)
from .models import OscillatorModel, eval_drift, eval_jacobian
from .periodic import LimitCycle, PeriodicTable

__all__ = [
    "FloquetFrame",
    "WeightedMetric",
    "fundamental_matrix",
    "floquet_decompose",
    "weighted_inner",
    "prc",
    "weight_product_derivs",
    "adjoint_prc",
]

_ODE_METHOD = "DOP853"
_ODE_RTOL = 1e-13
_ODE_ATOL = 1e-14


@dataclass(frozen=True)
class FloquetFrame:
    """Exponents, periodic frame tables, weight tables, and the PRC.

    exponents[0] is pinned to zero (the tangent direction); the rest are
    negative with decay_bound = min(-exponents[1:]).  weight holds
    (P P^T)^{-1} and supports spectral derivatives up to second order;
    ppt holds P P^T itself.
    """

    exponents: np.ndarray
    decay_bound: float
    P: PeriodicTable
    Pinv: PeriodicTable
    weight: PeriodicTable
    ppt: PeriodicTable
    prc_table: PeriodicTable
    P0: np.ndarray
    cycle: LimitCycle

    @property
    def dim(self) -> int:
        return self.P0.shape[0]

    def rolled(self, shift: int) -> "FloquetFrame":
        """Frame with the phase origin moved by `shift` grid nodes."""
        return FloquetFrame(
            exponents=self.exponents.copy(),
            decay_bound=self.decay_bound,
            P=self.P.rolled(shift),
            Pinv=self.Pinv.rolled(shift),
            weight=self.weight.rolled(shift),
            ppt=self.ppt.rolled(shift),
            prc_table=self.prc_table.rolled(shift),
            P0=self.P.values[shift % self.P.n_grid].copy(),
            cycle=self.cycle.rolled(shift),
        )


class WeightedMetric:
    """Inner product <u, v>_theta = <P^{-1}(theta) u, P^{-1}(theta) v>."""

    def __init__(self, frame: FloquetFrame):
        self.frame = frame

    def inner(self, u, v, theta) -> float:
        return weighted_inner(self.frame, u, v, theta)

    def norm(self, u, theta) -> float:
        return float(np.sqrt(self.inner(u, u, theta)))


def _default_initial_frame(tangent: np.ndarray) -> np.ndarray:
    """[tangent | q_2 | ... | q_d]: orthogonal completion of the tangent.

    Gram-Schmidt on the standard basis, skipping the basis vector most
    parallel to the tangent.
    """
    d = tangent.size
    cols = [tangent]
    skip = int(np.argmax(np.abs(tangent)))
    for j in range(d):
        if j == skip:
            continue
        q = np.zeros(d)
        q[j] = 1.0
        for c in cols:
            q = q - (q @ c) / (c @ c) * c
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise IntegrationFailure("failed to complete tangent to an orthogonal basis")
        cols.append(q / norm)
    return np.stack(cols, axis=1)


def _integrate_variational(model, cycle, z0, t_eval):
    """Integrate u' = F(u), Z' = J(u) Z from the cycle anchor; returns Z at t_eval."""
    d = model.dim

    def rhs(t, y):
        u = y[:d]
        z = y[d:].reshape(d, d)
        return np.concatenate([eval_drift(model, u), (eval_jacobian(model, u) @ z).ravel()])

    y0 = np.concatenate([cycle.anchor_state, np.asarray(z0, float).ravel()])
    t_end = float(t_eval[-1])
    if t_end == 0.0:
        return np.asarray(z0, float)[None, :, :].copy()
    sol = solve_ivp(rhs, (0.0, t_end), y0, method=_ODE_METHOD,
                    rtol=_ODE_RTOL, atol=_ODE_ATOL, t_eval=t_eval)
    if sol.status != 0:
        raise IntegrationFailure(sol.message)
    return sol.y[d:].T.reshape(len(t_eval), d, d)


def fundamental_matrix(model: OscillatorModel, cycle: LimitCycle, t: float,
                       initial: np.ndarray | None = None) -> np.ndarray:
    """Fundamental matrix of dz/dt = J(omega0 t) z at time t.

    Columns start at [Phi'(0) | orthogonal completion] unless an explicit
    initial matrix is given.
    """
    if t < 0:
        raise IntegrationFailure("fundamental matrix requested at negative time")
    if initial is None:
        initial = _default_initial_frame(cycle.dphi.values[0])
    if t == 0.0:
        return np.asarray(initial, float).copy()
    return _integrate_variational(model, cycle, initial, np.array([t]))[0]


def floquet_decompose(model: OscillatorModel, cycle: LimitCycle) -> FloquetFrame:
    """Monodromy eigenstructure and the periodic frame P, weights, and PRC.

    P(0) columns are monodromy eigenvectors with the tangent column set to
    Phi'(0) exactly and the rest unit-normalized (sign: largest entry
    positive); P(omega0 t) = Pi(t) P(0) exp(-t S) on the grid.  Requires all
    multipliers real, positive, and (apart from the trivial one) strictly
    inside the unit circle.
    """
    d = model.dim
    n = cycle.n_grid
    period = cycle.period
    t_nodes = period * np.arange(n) / n
    t_eval = np.concatenate([t_nodes, [period]])
    z_nodes = _integrate_variational(model, cycle, np.eye(d), t_eval)
    mono = z_nodes[-1]
    z_nodes = z_nodes[:-1]

    mults, vecs = np.linalg.eig(mono)
    if np.max(np.abs(mults.imag)) > 1e-8:
        raise ComplexMultipliers(f"multipliers {mults} have nonreal parts")
    mults = mults.real
    vecs = vecs.real
    if np.any(mults <= 0.0):
        raise ComplexMultipliers(f"multipliers {mults} must be positive for a real frame")

    nu = np.log(mults) / period
    tangent_idx = int(np.argmin(np.abs(nu)))
    if abs(nu[tangent_idx]) > 1e-7:
        raise IntegrationFailure(
            f"trivial exponent {nu[tangent_idx]:.3e} not within 1e-7 of zero")
    others = [i for i in range(d) if i != tangent_idx]
    others.sort(key=lambda i: -nu[i])
    if any(nu[i] > -1e-8 for i in others):
        raise UnstableCycle(f"nontrivial exponents {nu[others]} not negative")

    exponents = np.concatenate([[0.0], nu[others]])  # trivial exponent pinned to 0
    p0 = np.empty((d, d))
    p0[:, 0] = cycle.dphi.values[0]
    for col, i in enumerate(others, start=1):
        v = vecs[:, i] / np.linalg.norm(vecs[:, i])
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        p0[:, col] = v
    if np.linalg.cond(p0) > 1e8:
        raise DegenerateEigenbasis(f"cond(P(0)) = {np.linalg.cond(p0):.3e}")

    decay = np.exp(-np.outer(t_nodes, exponents))  # (n, d)
    p_nodes = np.einsum("nij,jk,nk->nik", z_nodes, p0, decay)
    p_nodes[0] = p0
    pinv_nodes = np.linalg.inv(p_nodes)
    weight_nodes = np.einsum("nji,njk->nik", pinv_nodes, pinv_nodes)  # P^{-T} P^{-1}
    ppt_nodes = np.einsum("nij,nkj->nik", p_nodes, p_nodes)
    prc_nodes = np.einsum("nij,nj->ni", weight_nodes, cycle.dphi.values)

    return FloquetFrame(
        exponents=exponents,
        decay_bound=float(np.min(-exponents[1:])),
        P=PeriodicTable(p_nodes),
        Pinv=PeriodicTable(pinv_nodes),
        weight=PeriodicTable(weight_nodes),
        ppt=PeriodicTable(ppt_nodes),
        prc_table=PeriodicTable(prc_nodes),
        P0=p0,
        cycle=cycle,
    )


def weighted_inner(frame: FloquetFrame, u, v, theta) -> float | np.ndarray:
    """<u, v>_theta; supports batched theta with matching leading axes."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("weighted_inner requires finite inputs")
    pinv = frame.Pinv.eval(theta)
    pu = np.einsum("...ij,...j->...i", pinv, u)
    pv = np.einsum("...ij,...j->...i", pinv, v)
    out = np.einsum("...i,...i->...", pu, pv)
    return float(out) if out.ndim == 0 else out


def prc(frame: FloquetFrame, theta) -> np.ndarray:
    """Phase response curve R(theta) = (P P^T)^{-1}(theta) Phi'(theta)."""
    return frame.prc_table.eval(theta)


def weight_product_derivs(frame: FloquetFrame, theta, order: int = 0) -> np.ndarray:
    """(P P^T)^{-1}(theta) or its first/second theta-derivative."""
    if order not in (0, 1, 2):
        raise BadOrder(f"order must be in 0..2, got {order}")
    return frame.weight.eval(theta, order)


def adjoint_prc(model: OscillatorModel, cycle: LimitCycle,
                max_passes: int = 60, tol: float = 1e-13) -> PeriodicTable:
    """PRC via the adjoint linear equation, independent of the frame tables.

    Integrates omega0 dR/dtheta = -J(theta)^T R backward over whole periods
    (a power iteration whose backward map contracts onto the periodic
    solution), then normalizes so <R, Phi'> = 1.
    """
    d = cycle.dim
    period = cycle.period
    omega0 = cycle.frequency

    def rhs(s, r):
        # backward time: t = period - s
        theta = omega0 * (period - s)
        jac = eval_jacobian(model, cycle.phi.eval(theta))
        return jac.T @ r

    r = np.ones(d) / np.sqrt(d)
    for _ in range(max_passes):
        sol = solve_ivp(rhs, (0.0, period), r, method=_ODE_METHOD,
                        rtol=_ODE_RTOL, atol=_ODE_ATOL)
        if sol.status != 0:
            raise IntegrationFailure(sol.message)
        r_new = sol.y[:, -1]
        r_new = r_new / np.linalg.norm(r_new)
        if np.linalg.norm(r_new - r) <= tol:
            r = r_new
            break
        r = r_new
    # final stored pass: nodes theta_k correspond to backward times period - t_k
    n = cycle.n_grid
    t_nodes = period * np.arange(n) / n
    s_eval = np.sort(period - t_nodes)  # ascending backward times
    sol = solve_ivp(rhs, (0.0, period), r, method=_ODE_METHOD,
                    rtol=_ODE_RTOL, atol=_ODE_ATOL, t_eval=s_eval)
    if sol.status != 0:
        raise IntegrationFailure(sol.message)
    values = np.empty((n, d))
    for i, s in enumerate(s_eval):
        k = int(round((period - s) / period * n)) % n
        values[k] = sol.y[:, i]
    scale = values[0] @ cycle.dphi.values[0]
    if abs(scale) < 1e-12:
        raise IntegrationFailure("adjoint solution orthogonal to the tangent")
    return PeriodicTable(values / scale)
