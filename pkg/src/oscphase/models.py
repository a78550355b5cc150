"""Oscillator model definitions: drift, Jacobian, noise map, noise covariance.

A model is the tuple (F, J, G, Q) plus a declared spectral-norm bound on G.
Built-ins (Stuart-Landau, Van der Pol) carry analytic drift and Jacobian;
user models may omit the Jacobian, in which case central finite differences
are used.  All model objects are immutable and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    BadCovariance,
    MissingParam,
    NonFiniteInput,
    NonPositiveParam,
    UnknownModel,
)

__all__ = [
    "OscillatorModel",
    "builtin_model",
    "eval_drift",
    "eval_jacobian",
    "covariance_factor",
    "validate_model",
]

_FD_STEP = 1e-6  # scaled by max(1, |u|); balances truncation vs rounding


@dataclass(frozen=True)
class OscillatorModel:
    """Defines the SDE du = F(u) dt + sqrt(eps) G(u) dW with cov(dW) = Q dt.

    ``drift`` and (when given) ``jacobian``/``noise_map`` must accept arrays
    of shape (..., dim) and return (..., dim) resp. (..., dim, dim) when
    ``vectorized`` is true; otherwise they are called point by point.
    ``noise_bound`` is the declared bound sup_u ||G(u)|| (spectral norm),
    spot-checked on ``sample_box`` rather than proven.
    """

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray] | None
    noise_map: Callable[[np.ndarray], np.ndarray]
    covariance: np.ndarray
    noise_bound: float
    sample_box: tuple[float, float] = (-4.0, 4.0)
    vectorized: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.asarray(self.covariance, dtype=float)
        if q.shape != (self.dim, self.dim):
            raise BadCovariance(f"covariance must be {self.dim}x{self.dim}, got {q.shape}")
        if not np.allclose(q, q.T, atol=1e-12):
            raise BadCovariance("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (q + q.T))) < -1e-12:
            raise BadCovariance("covariance has eigenvalue below -1e-12")
        object.__setattr__(self, "covariance", 0.5 * (q + q.T))


def _require_finite(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise NonFiniteInput("state vector contains NaN or inf")
    return u


def _pointwise(fn: Callable, u: np.ndarray, out_shape: tuple) -> np.ndarray:
    """Apply a non-vectorized handle over the leading axes of u."""
    lead = u.shape[:-1]
    flat = u.reshape(-1, u.shape[-1])
    out = np.empty((flat.shape[0],) + out_shape)
    for i, row in enumerate(flat):
        out[i] = fn(row)
    return out.reshape(lead + out_shape)


def eval_drift(model: OscillatorModel, u) -> np.ndarray:
    """F(u) for a single state or a batch of states (..., dim)."""
    u = _require_finite(u)
    if model.vectorized or u.ndim == 1:
        return np.asarray(model.drift(u), dtype=float)
    return _pointwise(model.drift, u, (model.dim,))


def eval_jacobian(model: OscillatorModel, u) -> np.ndarray:
    """DF(u); analytic when supplied, else central finite differences."""
    u = _require_finite(u)
    if model.jacobian is not None:
        if model.vectorized or u.ndim == 1:
            return np.asarray(model.jacobian(u), dtype=float)
        return _pointwise(model.jacobian, u, (model.dim, model.dim))
    return _fd_jacobian(model, u)


def _fd_jacobian(model: OscillatorModel, u: np.ndarray) -> np.ndarray:
    d = model.dim
    single = u.ndim == 1
    ub = u[None, :] if single else u
    h = _FD_STEP * np.maximum(1.0, np.linalg.norm(ub, axis=-1))
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        step = h[..., None] * e
        cols.append((eval_drift(model, ub + step) - eval_drift(model, ub - step))
                    / (2.0 * h[..., None]))
    jac = np.stack(cols, axis=-1)
    return jac[0] if single else jac


def noise_at(model: OscillatorModel, u) -> np.ndarray:
    """G(u) for a single state or a batch (..., dim) -> (..., dim, dim)."""
    u = _require_finite(u)
    if model.vectorized or u.ndim == 1:
        return np.asarray(model.noise_map(u), dtype=float)
    return _pointwise(model.noise_map, u, (model.dim, model.dim))


def covariance_factor(model_or_q) -> np.ndarray:
    """Square root L with L L^T = Q via symmetric eigendecomposition.

    Eigenvalues in [-1e-12, 0) are clipped to zero to tolerate rounding in
    user-supplied covariances; anything more negative raises BadCovariance.
    """
    q = model_or_q.covariance if isinstance(model_or_q, OscillatorModel) else np.asarray(model_or_q, float)
    q = 0.5 * (q + q.T)
    lam, vec = np.linalg.eigh(q)
    if np.min(lam) < -1e-12:
        raise BadCovariance("covariance has eigenvalue below -1e-12")
    lam = np.clip(lam, 0.0, None)
    return vec * np.sqrt(lam)


# -- built-in models ---------------------------------------------------------

def _sl_drift(omega):
    def drift(u):
        x, y = u[..., 0], u[..., 1]
        r2 = x * x + y * y
        return np.stack([x - omega * y - r2 * x, omega * x + y - r2 * y], axis=-1)
    return drift


def _sl_jacobian(omega):
    def jac(u):
        x, y = u[..., 0], u[..., 1]
        j = np.empty(u.shape[:-1] + (2, 2))
        j[..., 0, 0] = 1.0 - 3.0 * x * x - y * y
        j[..., 0, 1] = -omega - 2.0 * x * y
        j[..., 1, 0] = omega - 2.0 * x * y
        j[..., 1, 1] = 1.0 - x * x - 3.0 * y * y
        return j
    return jac


def _vdp_drift(mu):
    def drift(u):
        x, y = u[..., 0], u[..., 1]
        return np.stack([y, mu * (1.0 - x * x) * y - x], axis=-1)
    return drift


def _vdp_jacobian(mu):
    def jac(u):
        x, y = u[..., 0], u[..., 1]
        j = np.empty(u.shape[:-1] + (2, 2))
        j[..., 0, 0] = 0.0
        j[..., 0, 1] = 1.0
        j[..., 1, 0] = -2.0 * mu * x * y - 1.0
        j[..., 1, 1] = mu * (1.0 - x * x)
        return j
    return jac


def _scaled_identity_noise(scale, d):
    eye = scale * np.eye(d)
    def noise(u):
        return np.broadcast_to(eye, u.shape[:-1] + (d, d))
    return noise


_BUILTIN_REQUIRED = {"stuart_landau": "omega", "van_der_pol": "mu"}
_BUILTIN_OPTIONAL = ("noise_scale", "q_scale")


def builtin_model(name: str, params: dict) -> OscillatorModel:
    """Construct a built-in model from a name -> scalar parameter map.

    stuart_landau:  dx = x - omega*y - (x^2+y^2)x,  dy = omega*x + y - (x^2+y^2)y
    van_der_pol:    dx = y,  dy = mu*(1 - x^2)*y - x

    Optional keys: noise_scale (G = s*I, default 1), q_scale (Q = q*I, default 1).
    """
    if name not in _BUILTIN_REQUIRED:
        raise UnknownModel(f"no built-in model named {name!r}")
    key = _BUILTIN_REQUIRED[name]
    if key not in params:
        raise MissingParam(f"{name} requires parameter {key!r}")
    allowed = {key, *_BUILTIN_OPTIONAL}
    extra = set(params) - allowed
    if extra:
        raise MissingParam(f"unknown parameters for {name}: {sorted(extra)}")
    value = float(params[key])
    if value <= 0.0:
        raise NonPositiveParam(f"{key} must be positive, got {value}")
    noise_scale = float(params.get("noise_scale", 1.0))
    q_scale = float(params.get("q_scale", 1.0))
    if noise_scale <= 0.0 or q_scale <= 0.0:
        raise NonPositiveParam("noise_scale and q_scale must be positive")

    if name == "stuart_landau":
        drift, jac = _sl_drift(value), _sl_jacobian(value)
    else:
        drift, jac = _vdp_drift(value), _vdp_jacobian(value)
    return OscillatorModel(
        dim=2,
        drift=drift,
        jacobian=jac,
        noise_map=_scaled_identity_noise(noise_scale, 2),
        covariance=q_scale * np.eye(2),
        noise_bound=noise_scale,
        name=name,
        params={key: value, "noise_scale": noise_scale, "q_scale": q_scale},
    )


# -- invariant spot checks ---------------------------------------------------

def validate_model(model: OscillatorModel, n_samples: int = 1000, seed: int = 0) -> dict:
    """Run the model invariants; returns {check_name: bool}.

    Checks: covariance factorization round-trip, the declared noise bound on
    random points in sample_box, and analytic-vs-FD Jacobian agreement.
    """
    rng = np.random.default_rng(seed)
    lo, hi = model.sample_box
    pts = rng.uniform(lo, hi, size=(n_samples, model.dim))

    ell = covariance_factor(model)
    q_ok = bool(np.max(np.abs(ell @ ell.T - model.covariance)) <= 1e-12)

    gs = noise_at(model, pts)
    norms = np.linalg.norm(gs, ord=2, axis=(-2, -1))
    bound_ok = bool(np.max(norms) <= model.noise_bound * (1.0 + 1e-12))

    jac_ok = True
    if model.jacobian is not None:
        sub = pts[:100]
        ja = eval_jacobian(model, sub)
        jf = _fd_jacobian(model, sub)
        rel = np.linalg.norm(ja - jf, axis=(-2, -1)) / (1.0 + np.linalg.norm(ja, axis=(-2, -1)))
        jac_ok = bool(np.max(rel) <= 1e-5)

    return {"covariance_factor": q_ok, "noise_bound": bound_ok, "jacobian_consistency": jac_ok}
