"""Flow environments: Batchelor-Kraichnan gradients, the ABC field, and the
Euler-Maruyama steps for the separation between an active swimmer and its
passive target.

The separation obeys ``ds/dt = v(s1) - v(s2) - a - xi`` with unit friction.
In the BK model ``v(s1) - v(s2) = sigma(t) s`` with sigma white in time; in
the ABC model both particles are advected by the full field.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OverflowAbort

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class BKFlowParams:
    """Batchelor-Kraichnan flow: gradient amplitude ``D``, dimension ``d``,
    separation noise variance ``kappa``."""

    D: float
    d: int = 3
    kappa: float = 0.0

    def __post_init__(self):
        if not self.D >= 0.0:
            raise ValueError(f"D must be >= 0, got {self.D}")
        if self.d not in (2, 3):
            raise ValueError(f"d must be 2 or 3, got {self.d}")
        if not self.kappa >= 0.0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class ABCFlowParams:
    """Arnold-Beltrami-Childress flow; defaults are the chaotic regime.

    ``kappa`` is the variance of the separation noise; each particle gets
    independent noise of variance ``kappa / 2``.  Experiments need
    ``kappa > 0`` to seed any divergence; ``kappa = 0`` is allowed for
    deterministic checks.
    """

    A: float = 1.0
    B: float = 0.7
    C: float = 0.43
    kappa: float = 1e-6
    d: int = field(default=3, init=False)

    def __post_init__(self):
        if not self.kappa >= 0.0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-2
    max_sep: float = 1e3

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not self.max_sep > 0.0:
            raise ValueError(f"max_sep must be > 0, got {self.max_sep}")

    @classmethod
    def for_flow(cls, flow, dt: float = 1e-2) -> "IntegratorConfig":
        return cls(dt=dt, max_sep=TWO_PI if isinstance(flow, ABCFlowParams) else 1e3)


@dataclass
class TangentState:
    """Tangent propagator ``W(t; t0)``; ``log_scale`` holds the log of all
    renormalisation factors divided out of ``W`` so far."""

    W: np.ndarray
    t0: float = 0.0
    t: float = 0.0
    log_scale: float = 0.0

    @classmethod
    def identity(cls, d: int = 3, t0: float = 0.0) -> "TangentState":
        return cls(np.eye(d), t0, t0, 0.0)


# ---------------------------------------------------------------------------
# Batchelor-Kraichnan gradient sampler
# ---------------------------------------------------------------------------

def bk_covariance(d: int) -> np.ndarray:
    """Covariance of sigma per unit D and unit time as a d^2 x d^2 matrix.

    Row index ``i*d + j`` addresses ``sigma_ij``; entry is
    ``(d+1) d_jl d_ik - d_ij d_kl - d_jk d_il``.
    """
    eye = np.eye(d)
    c = ((d + 1) * np.einsum("ik,jl->ijkl", eye, eye)
         - np.einsum("ij,kl->ijkl", eye, eye)
         - np.einsum("jk,il->ijkl", eye, eye))
    return c.reshape(d * d, d * d)


@functools.lru_cache(maxsize=None)
def _bk_factor(d: int) -> np.ndarray:
    # The covariance is positive semi-definite with the trace direction in its
    # null space, so a plain Cholesky fails; use the symmetric square root.
    w, u = np.linalg.eigh(bk_covariance(d))
    w = np.where(w > 1e-12, w, 0.0)
    factor = u * np.sqrt(w)
    factor.setflags(write=False)
    return factor


def bk_gradient_from_normals(params: BKFlowParams, dt: float, normals: np.ndarray) -> np.ndarray:
    """Map iid standard normals of shape (..., d*d) to gradient increments
    ``sigma * dt`` of shape (..., d, d)."""
    d = params.d
    flat = normals @ _bk_factor(d).T
    m = flat.reshape(flat.shape[:-1] + (d, d)) * math.sqrt(params.D * dt)
    tr = np.trace(m, axis1=-2, axis2=-1)
    m -= (tr / d)[..., None, None] * np.eye(d)
    return m


def sample_bk_gradient(params: BKFlowParams, dt: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Zero-mean Gaussian increment ``M = sigma dt`` with
    ``E[M_ij M_kl] = dt D (d+1)(d_jl d_ik - (d_ij d_kl + d_jk d_il)/(d+1))``.

    ``size`` adds leading batch dimensions.
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be > 0, got {dt}")
    d = params.d
    shape = (d * d,) if size is None else tuple(np.atleast_1d(size)) + (d * d,)
    return bk_gradient_from_normals(params, dt, rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# ABC field
# ---------------------------------------------------------------------------

def abc_velocity(params: ABCFlowParams, pos) -> np.ndarray:
    """Deterministic ABC velocity at ``pos`` (shape (..., 3))."""
    pos = np.asarray(pos, dtype=float)
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    A, B, C = params.A, params.B, params.C
    return np.stack([A * np.sin(z) + C * np.cos(y),
                     B * np.sin(x) + A * np.cos(z),
                     C * np.sin(y) + B * np.cos(x)], axis=-1)


def abc_jacobian(params: ABCFlowParams, pos) -> np.ndarray:
    """Velocity gradient ``J[..., i, j] = d v_i / d x_j``; traceless."""
    pos = np.asarray(pos, dtype=float)
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    A, B, C = params.A, params.B, params.C
    J = np.zeros(pos.shape[:-1] + (3, 3))
    J[..., 0, 1] = -C * np.sin(y)
    J[..., 0, 2] = A * np.cos(z)
    J[..., 1, 0] = B * np.cos(x)
    J[..., 1, 2] = -A * np.sin(z)
    J[..., 2, 0] = -B * np.sin(x)
    J[..., 2, 1] = C * np.cos(y)
    return J


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def bk_step(s, action, params: BKFlowParams, dt: float, grad_normals, thermal_normals) -> np.ndarray:
    """Batched Euler-Maruyama step driven by caller-supplied normals.

    ``s' = s + M s - a dt + sqrt(kappa dt) g``.
    """
    M = bk_gradient_from_normals(params, dt, grad_normals)
    return (s + np.einsum("...ij,...j->...i", M, s) - action * dt
            + math.sqrt(params.kappa * dt) * thermal_normals)


def abc_pair_step(pos1, pos2, action, params: ABCFlowParams, dt: float, noise1, noise2):
    """Batched ABC step; particle 1 is the swimmer."""
    amp = math.sqrt(0.5 * params.kappa * dt)
    new1 = pos1 + abc_velocity(params, pos1) * dt - action * dt + amp * noise1
    new2 = pos2 + abc_velocity(params, pos2) * dt + amp * noise2
    return new1, new2


def exceeded(sep, max_sep: float) -> np.ndarray:
    """Mask of separations that are non-finite or longer than ``max_sep``."""
    norm = np.linalg.norm(sep, axis=-1)
    return ~np.isfinite(norm) | (norm > max_sep)


def step_separation_bk(state, action, params: BKFlowParams, cfg: IntegratorConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """One step of the controlled BK separation; raises :class:`OverflowAbort`."""
    s = np.asarray(state, dtype=float)
    d = params.d
    g = rng.standard_normal(d * d)
    xi = rng.standard_normal(d)
    new = bk_step(s, np.asarray(action, dtype=float), params, cfg.dt, g, xi)
    if exceeded(new, cfg.max_sep):
        raise OverflowAbort(new)
    return new


def step_pair_abc(pos1, pos2, action, params: ABCFlowParams, cfg: IntegratorConfig,
                  rng: np.random.Generator):
    """One step of the swimmer/target pair in the ABC flow.

    Positions are not wrapped onto the torus; the separation is the raw
    difference.  Raises :class:`OverflowAbort` beyond ``cfg.max_sep``.
    """
    n1 = rng.standard_normal(3)
    n2 = rng.standard_normal(3)
    p1, p2 = abc_pair_step(np.asarray(pos1, float), np.asarray(pos2, float),
                           np.asarray(action, float), params, cfg.dt, n1, n2)
    if exceeded(p1 - p2, cfg.max_sep):
        raise OverflowAbort(p1 - p2)
    return p1, p2


def evolve_tangent(tangent: TangentState, sigma_dt, dt: float | None = None,
                   renorm: float = 1e100) -> TangentState:
    """Advance ``W' = (I + sigma_dt) W``.

    ``dt`` advances the clock (defaults to one unit of ``t`` left unchanged
    when None).  ``W`` is divided by its norm once the norm leaves
    ``[1/renorm, renorm]`` and the log factor is accumulated.
    """
    sigma_dt = np.asarray(sigma_dt, dtype=float)
    W = tangent.W + sigma_dt @ tangent.W
    log_scale = tangent.log_scale
    nrm = np.linalg.norm(W)
    if nrm > renorm or nrm < 1.0 / renorm:
        W = W / nrm
        log_scale += math.log(nrm)
    t = tangent.t + (dt if dt is not None else 0.0)
    return TangentState(W, tangent.t0, t, log_scale)


def evolve_tangents(W: np.ndarray, log_scale: np.ndarray, sigma_dt: np.ndarray,
                    renorm: float = 1e8):
    """Batched in-place-style tangent update; returns ``(W, log_scale)``."""
    W = W + sigma_dt @ W
    nrm = np.linalg.norm(W, axis=(-2, -1))
    big = (nrm > renorm) | (nrm < 1.0 / renorm)
    if np.any(big):
        W[big] /= nrm[big, None, None]
        log_scale = log_scale + np.where(big, np.log(np.where(big, nrm, 1.0)), 0.0)
    return W, log_scale
