"""Shared fast evaluation of frame/cycle tables at batches of phases.

Hot loops (per-step phase tracking, SDE drift assembly) evaluate several
periodic tables at the same batch of angles; building the e^{ik theta} mode
matrix once and reusing it across tables avoids the dominant exp cost.
"""

from __future__ import annotations

import numpy as np

from .floquet import FloquetFrame
from .periodic import LimitCycle, mode_powers


class FrameEval:
    """Caches the widest mode matrix needed by a frame/cycle table set."""

    def __init__(self, frame: FloquetFrame, cycle: LimitCycle):
        self.frame = frame
        self.cycle = cycle
        self.kmax = max(
            cycle.phi.kmax,
            frame.weight.kmax,
            frame.P.kmax,
            frame.Pinv.kmax,
            frame.ppt.kmax,
            frame.prc_table.kmax,
        )

    def modes(self, theta) -> np.ndarray:
        return mode_powers(np.asarray(theta, dtype=float), self.kmax)

    # thin wrappers; every call reuses one mode matrix E
    def phi(self, E, order=0):
        return self.cycle.phi.eval_with_modes(E, order)

    def weight(self, E, order=0):
        return self.frame.weight.eval_with_modes(E, order)

    def pmat(self, E):
        return self.frame.P.eval_with_modes(E, 0)

    def pinv(self, E):
        return self.frame.Pinv.eval_with_modes(E, 0)

    def ppt(self, E, order=0):
        return self.frame.ppt.eval_with_modes(E, order)

    def prc(self, E):
        return self.frame.prc_table.eval_with_modes(E, 0)


def residual_terms(fe: FrameEval, u: np.ndarray, theta: np.ndarray):
    """Common ingredients of the distance objective at (u, theta) batches.

    Returns (E, r, W, dphi, G, M) where r = u - Phi(theta), G is the
    stationarity objective and M its half-derivative (the curvature).
    """
    E = fe.modes(theta)
    phi = fe.phi(E, 0)
    dphi = fe.phi(E, 1)
    d2phi = fe.phi(E, 2)
    w = fe.weight(E, 0)
    wd = fe.weight(E, 1)
    r = u - phi
    wdphi = np.einsum("...ij,...j->...i", w, dphi)
    g = -2.0 * np.einsum("...i,...i->...", r, wdphi)
    m = (1.0
         - np.einsum("...i,...ij,...j->...", r, w, d2phi)
         - np.einsum("...i,...ij,...j->...", r, wd, dphi))
    return E, r, w, dphi, g, m
