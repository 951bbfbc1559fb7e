"""Closed-form results for controlled separations.

Covers finite-time Lyapunov statistics, the BK stationary separation
density and its power-law tail, the optimal steady proportional gain, and
the finite-horizon value of proportional control used as the physicist
baseline.

Convention for the Cramer function: ``S1(l) ~ S1(lbar) + S1''/2 (l - lbar)^2``
so finite-time samples have variance ``1 / (t S1'')``.  With this convention
the BK curvature is ``1/((d-1) D)`` and the stationary radial density decays
as ``s ** -(1 + 2 (phi - lbar) S1'')``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateFit, DegenerateWindow, InsufficientSamples, NoStationaryState,
                     UnboundedDistribution, UnstableRegime)
from .flows import TangentState

MIN_CRAMER_SAMPLES = 1000


@dataclass
class CramerFit:
    lambda_bar: float
    s1_curv: float
    t_window: float
    histogram: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)
    n_samples: int = 0

    @property
    def variance(self) -> float:
        return 1.0 / (self.t_window * self.s1_curv)


@dataclass(frozen=True)
class BaselineParams:
    """Parameters of the physicist value function ``V_phi(t, s)``."""

    phi: float
    d_tilde: float
    beta: float
    nu: float
    horizon: float
    kappa: float
    d: int = 3

    def __post_init__(self):
        # 2*phi > d_tilde is enforced by the value functions, not here: the
        # stationary density only needs phi > d(d-1)D/2.
        if not self.phi > 0.0:
            raise ValueError(f"phi must be > 0, got {self.phi}")
        if not self.nu > 0.0:
            raise ValueError(f"nu must be > 0, got {self.nu}")
        if not self.horizon > 0.0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")

    @property
    def D(self) -> float:
        """BK amplitude implied by ``d_tilde``."""
        return self.d_tilde / ((self.d + 2) * (self.d - 1))


@dataclass(frozen=True)
class TailPrediction:
    exponent: float
    s_d: float

    @property
    def radial_slope(self) -> float:
        """Log-log slope of the radial density, ``-(1 + exponent)``."""
        return -(1.0 + self.exponent)


# ---------------------------------------------------------------------------
# Lyapunov statistics
# ---------------------------------------------------------------------------

def finite_time_lyapunov(tangent: TangentState) -> float:
    window = tangent.t - tangent.t0
    if window == 0:
        raise DegenerateWindow("finite-time Lyapunov exponent needs t > t0")
    sv = np.linalg.svd(tangent.W, compute_uv=False)[0]
    return (math.log(sv) + tangent.log_scale) / window


def bk_lyapunov(D: float, d: int) -> float:
    return d * (d - 1) * D / 2.0


def bk_cramer(D: float, d: int) -> CramerFit:
    """Exact BK values ``lbar = d(d-1)D/2`` and ``S1'' = 1/((d-1)D)``."""
    return CramerFit(bk_lyapunov(D, d), 1.0 / ((d - 1) * D), math.inf)


def fit_cramer(samples, t_window: float, bins: int = 40, mass: float = 0.8,
               min_samples: int = MIN_CRAMER_SAMPLES) -> CramerFit:
    """Mean and curvature of the finite-time Lyapunov distribution.

    ``S1''`` comes from a least-squares quadratic fit of
    ``-log(density) / t_window`` over the central ``mass`` of the samples.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < min_samples:
        raise InsufficientSamples(f"need >= {min_samples} samples, got {x.size}")
    lbar = float(x.mean())
    lo, hi = np.quantile(x, [(1 - mass) / 2, (1 + mass) / 2])
    if not hi > lo:
        raise DegenerateFit(lbar)
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    centres = 0.5 * (edges[1:] + edges[:-1])
    dens = counts / (x.size * np.diff(edges))
    ok = counts > 0
    if ok.sum() < 3:
        raise DegenerateFit(lbar, "too few populated bins for a quadratic fit")
    y = -np.log(dens[ok]) / t_window
    u = centres[ok] - lbar
    # Poisson errors on log-counts: weight ~ sqrt(count)
    w = np.sqrt(counts[ok])
    c2, c1, c0 = np.polyfit(u, y, 2, w=w)
    full_counts, full_edges = np.histogram(x, bins=bins)
    return CramerFit(lbar, 2.0 * c2, t_window, (full_counts, full_edges), int(x.size))


# ---------------------------------------------------------------------------
# Eddy diffusivity and optimal gain
# ---------------------------------------------------------------------------

def d_tilde_from_bk(D: float, d: int) -> float:
    return D * (d + 2) * (d - 1)


def d_tilde_from_lyapunov(lambda_bar: float, d: int) -> float:
    return 2.0 * lambda_bar * (1.0 + 2.0 / d)


def optimal_phi(d_tilde: float, beta: float) -> float:
    """Minimiser of ``(phi^2 + beta) / (2 phi - d_tilde)`` over ``phi > d_tilde/2``."""
    if d_tilde < 0 or beta < 0 or (d_tilde == 0 and beta == 0):
        raise ValueError("need d_tilde >= 0, beta >= 0, not both zero")
    return 0.5 * (d_tilde + math.sqrt(4.0 * beta + d_tilde * d_tilde))


def steady_second_moment(phi: float, d_tilde: float, kappa: float, d: int) -> float:
    """Stationary ``E[s^2] = d kappa / (2 phi - d_tilde)`` under ``a = phi s``."""
    if not 2 * phi > d_tilde:
        raise UnstableRegime("second moment diverges for 2*phi <= d_tilde")
    return d * kappa / (2.0 * phi - d_tilde)


# ---------------------------------------------------------------------------
# Stationary density
# ---------------------------------------------------------------------------

def _density_exponent(params: BaselineParams) -> float:
    D, d = params.D, params.d
    if not params.phi > d * (d - 1) * D / 2.0:
        raise UnboundedDistribution(
            f"phi={params.phi} must exceed d(d-1)D/2={d * (d - 1) * D / 2.0}")
    return params.phi / (D * (d - 1))


def stationary_log_norm(params: BaselineParams) -> float:
    d = params.d
    p = _density_exponent(params)
    return (0.5 * d * math.log(math.pi * params.kappa / ((d - 1) * params.D))
            + math.lgamma(p - d / 2.0) - math.lgamma(p) - math.log(d))


def stationary_density_bk(s, params: BaselineParams):
    """Stationary density of the separation vector, evaluated at ``|s| = s``."""
    d = params.d
    p = _density_exponent(params)
    s = np.asarray(s, dtype=float)
    x2 = (d - 1) * params.D * s * s / params.kappa
    return np.exp(-p * np.log1p(x2) - stationary_log_norm(params))


def radial_measure(s, d: int):
    """``Omega_s = pi^{d/2} / Gamma(d/2 + 1) * s^{d-1}``, the measure paired with
    the normalisation constant of :func:`stationary_density_bk`."""
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0) * np.asarray(s, dtype=float) ** (d - 1)


def radial_density_bk(s, params: BaselineParams):
    """Density of ``|s|``: ``Omega_s * P(s | phi)``; integrates to one on ``[0, inf)``."""
    return radial_measure(s, params.d) * stationary_density_bk(s, params)


def tail_exponent(phi: float, fit: CramerFit, kappa: float = 0.0) -> TailPrediction:
    """Power of ``s_d / s`` in the stationary tail, ``2 (phi - lbar) S1''``."""
    if not phi > fit.lambda_bar:
        raise NoStationaryState(f"phi={phi} <= lambda_bar={fit.lambda_bar}")
    s_d = math.sqrt(kappa / fit.lambda_bar) if fit.lambda_bar > 0 else math.inf
    return TailPrediction(2.0 * (phi - fit.lambda_bar) * fit.s1_curv, s_d)


# ---------------------------------------------------------------------------
# Physicist value function
# ---------------------------------------------------------------------------

def _check_regime(params: BaselineParams):
    if not 2.0 * params.phi > params.d_tilde:
        raise UnstableRegime("value of proportional control undefined for 2*phi <= d_tilde")


def value_coefficients(t, params: BaselineParams):
    """``(B(t), C(t))`` with ``V = -(B s^2 + C)``; ``t`` may be an array."""
    _check_regime(params)
    tau = params.horizon - np.asarray(t, dtype=float)
    q = params.beta + params.phi ** 2
    g = 2.0 * params.phi - params.d_tilde
    k = params.nu + g
    B = q * -np.expm1(-tau * k) / k
    C = (params.d * params.kappa * q * -np.expm1(-params.nu * tau) / (params.nu * g)
         - params.d * params.kappa * B / g)
    return B, C


def physicist_value(s, t, params: BaselineParams):
    """Expected discounted reward-to-go ``-(B(t) s^2 + C(t))`` of ``a = phi s``.

    ``s`` is the separation norm; the result is negative (a reward, not a cost).
    """
    B, C = value_coefficients(t, params)
    s = np.asarray(s, dtype=float)
    return -(B * s * s + C)
