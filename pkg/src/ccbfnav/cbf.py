"""Composite control barrier function over range points and its safety filter.

Each obstacle point ``o_i`` yields a distance-squared barrier
``nu0_i = |p - o_i|^2 - eps^2`` which is lifted to a second-order barrier
``nu_i = 2 (p - o_i) . v + s * shape(nu0_i)``. The per-point barriers are
saturated with ``tanh(nu_i / gamma)`` and merged by a log-sum-exp soft minimum
with temperature ``kappa``. The filter projects the nominal acceleration onto
the half-space given by the robust invariance condition, in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .dynamics import Command, State
from .sensor import PointSet

DEGENERATE_LG = 1e-12


@dataclass(frozen=True)
class CbfParams:
    lam: float = 3.0
    sigma: float = 0.3
    p_exp: float = 0.8
    rho1: float = 0.5
    rho2: float = 0.5
    alpha: float = 4.0
    kappa: float = 80.0
    gamma: float = 40.0
    epsilon: float = 0.3
    n_points: int = 256
    ema_beta: float = 0.5
    hocbf_sign: Literal["plus", "minus"] = "plus"

    def validate(self) -> None:
        for name in ("lam", "sigma", "p_exp", "alpha", "kappa", "gamma", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("rho1 and rho2 must be >= 0")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not 0 < self.ema_beta <= 1:
            raise ValueError("ema_beta must be in (0, 1]")
        if self.hocbf_sign not in ("plus", "minus"):
            raise ValueError("hocbf_sign must be 'plus' or 'minus'")

    @property
    def sign(self) -> float:
        return 1.0 if self.hocbf_sign == "plus" else -1.0

    def robustness(self, y):
        return self.rho1 * y + self.rho2 * y * y

    @property
    def disturbance_tolerance(self) -> float:
        """inf over y > 0 of robustness(y) / y."""
        return self.rho1


@dataclass(frozen=True)
class BarrierEval:
    h: float
    grad_p: np.ndarray
    grad_v: np.ndarray
    lie_f: float
    lie_g: np.ndarray
    theta: float


@dataclass(frozen=True)
class FilterReport:
    h: float = math.nan
    theta: float = math.nan
    eta: float = 0.0
    intervention: float = 0.0
    intervened: bool = False


@dataclass
class EmaState:
    value: np.ndarray | None = None

    def update(self, x: np.ndarray, beta: float) -> np.ndarray:
        if self.value is None:
            self.value = np.array(x, dtype=float)
        else:
            self.value = beta * x + (1.0 - beta) * self.value
        return self.value.copy()


def varsigma(h, params: CbfParams):
    """Shaping function lam * h * (h^2 + sigma^2)^((p - 1) / 2); odd and class K-infinity."""
    h = np.asarray(h, dtype=float)
    return params.lam * h * (h * h + params.sigma**2) ** ((params.p_exp - 1.0) / 2.0)


def varsigma_prime(h, params: CbfParams):
    """d/dh varsigma = lam (h^2 + sigma^2)^((p - 3) / 2) (p h^2 + sigma^2)."""
    h = np.asarray(h, dtype=float)
    s2 = params.sigma**2
    h2 = h * h
    return params.lam * (h2 + s2) ** ((params.p_exp - 3.0) / 2.0) * (params.p_exp * h2 + s2)


def hocbf_nu(p_rel, v, params: CbfParams):
    """Second-order barrier for one obstacle point (vectorized over leading axes)."""
    p_rel = np.asarray(p_rel, dtype=float)
    v = np.asarray(v, dtype=float)
    nu0 = np.sum(p_rel * p_rel, axis=-1) - params.epsilon**2
    lf_nu0 = 2.0 * np.sum(p_rel * v, axis=-1)
    return lf_nu0 + params.sign * varsigma(nu0, params)


def composite_h(points: PointSet | np.ndarray, state: State, params: CbfParams) -> BarrierEval:
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=float)
    if len(pts) == 0:
        raise ValueError("composite barrier needs at least one point")
    v = state.v
    p_rel = state.p - pts
    nu0 = np.einsum("ij,ij->i", p_rel, p_rel) - params.epsilon**2
    nu = 2.0 * (p_rel @ v) + params.sign * varsigma(nu0, params)
    t = np.tanh(nu / params.gamma)

    # Stabilized log-sum-exp of -kappa * t.
    z = -params.kappa * t
    z_max = z.max()
    e = np.exp(z - z_max)
    total = e.sum()
    h = -(params.gamma / params.kappa) * (z_max + math.log(total))

    # dh/dnu_i = softmax_i * (1 - t_i^2)
    c = (e / total) * (1.0 - t * t)
    dnu0 = params.sign * varsigma_prime(nu0, params)
    grad_v = 2.0 * (c @ p_rel)
    grad_p = 2.0 * c.sum() * v + 2.0 * ((c * dnu0) @ p_rel)
    lie_f = float(grad_p @ v)
    lie_g = grad_v
    y = math.sqrt(float(lie_g @ lie_g))
    theta = -lie_f - params.alpha * h + params.robustness(y)
    return BarrierEval(float(h), grad_p, grad_v, lie_f, lie_g, float(theta))


def project_halfspace(u_sp: np.ndarray, normal: np.ndarray, bound: float) -> tuple[np.ndarray, float]:
    """Closed-form argmin |u - u_sp|^2 s.t. normal . u >= bound; returns (u, eta)."""
    n2 = float(normal @ normal)
    if n2 < DEGENERATE_LG**2:
        return np.array(u_sp, dtype=float), 0.0
    eta = -(float(normal @ u_sp) - bound) / n2
    return u_sp + max(0.0, eta) * normal, eta


@dataclass
class SafetyFilter:
    """Stateful wrapper: closed-form projection followed by output smoothing."""

    params: CbfParams = field(default_factory=CbfParams)
    ema: EmaState = field(default_factory=EmaState)

    def __call__(self, u_sp: Command, state: State, points: PointSet) -> tuple[Command, FilterReport]:
        return safety_filter(u_sp, state, points, self.params, self.ema)


def safety_filter(u_sp: Command, state: State, points: PointSet, params: CbfParams,
                  ema_state: EmaState) -> tuple[Command, FilterReport]:
    """Minimally modify the acceleration setpoint so the robust barrier condition holds.

    Only the acceleration is filtered; yaw rate passes through untouched. An
    empty point set means no constraint. ``ema_state`` is updated in place.
    """
    a_sp = np.asarray(u_sp.a, dtype=float)
    if not (np.all(np.isfinite(a_sp)) and math.isfinite(u_sp.yaw_rate)):
        raise ValueError("non-finite setpoint")
    if len(points) == 0:
        a_star, report = a_sp, FilterReport()
    else:
        ev = composite_h(points, state, params)
        a_star, eta = project_halfspace(a_sp, ev.lie_g, ev.theta)
        report = FilterReport(
            h=ev.h, theta=ev.theta, eta=eta,
            intervention=float(np.linalg.norm(a_star - a_sp)), intervened=eta > 0)
    smoothed = ema_state.update(a_star, params.ema_beta)
    return Command(smoothed, float(u_sp.yaw_rate)), report
