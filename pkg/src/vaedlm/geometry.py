"""Latent Riemannian geometry: pullback and sphere metrics, flow residuals,
the gradient-flow functional and its entropy condition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import jax
import jax.numpy as jnp
from pydantic import BaseModel, ConfigDict, Field

from . import ad
from .networks import FourierFeatureMap, ModifiedMlp, manifold_encode

DET_FLOOR = 1e-12


class FlowConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha_steady: float = Field(2.0, ge=0.0)
    r2: float = Field(10.0, gt=0.0)
    eigen_sign: Optional[int] = -1
    flow_kind: str = "linear"

    def model_post_init(self, __context) -> None:
        if self.eigen_sign not in (None, 1, -1):
            raise ValueError("eigen_sign must be +1, -1 or null")
        if self.flow_kind not in ("linear", "nonlinear"):
            raise ValueError("flow_kind must be 'linear' or 'nonlinear'")


def _check_square(*mats):
    shape = jnp.shape(mats[0])
    for m in mats:
        if jnp.shape(m) != shape or len(shape) != 2 or shape[0] != shape[1]:
            raise ad.ShapeError(f"expected matching square matrices, got {[jnp.shape(x) for x in mats]}")


def encoder_jacobian(arch: ModifiedMlp, params, ff: Optional[FourierFeatureMap], u, t):
    """d E(u, t) / d u, shape (extrinsic, intrinsic); t is held fixed."""
    return ad.input_jacobian(lambda uu: manifold_encode(arch, params, ff, uu, t), u)


def pullback_metric(arch: ModifiedMlp, params, ff, u, t) -> jnp.ndarray:
    J = encoder_jacobian(arch, params, ff, u, t)
    return J.T @ J


def sphere_metric(u, r2) -> jnp.ndarray:
    """Round-sphere metric in angular coordinates: diag(r2, r2 sin^2 u1, r2 sin^2 u1 sin^2 u2, ...)."""
    s2 = jnp.sin(u[:-1]) ** 2
    diag = jnp.concatenate([jnp.ones(1), jnp.cumprod(s2)])
    return r2 * jnp.diag(diag)


def volume_from_metric(G) -> jnp.ndarray:
    return jnp.sqrt(jnp.maximum(jnp.linalg.det(G), DET_FLOOR))


def volume_weight(arch: ModifiedMlp, params, ff, u, t) -> jnp.ndarray:
    """sqrt(det J^T J); detached from parameter gradients."""
    return jax.lax.stop_gradient(volume_from_metric(pullback_metric(arch, params, ff, u, t)))


def flow_residual(g, dtg, lam, sigma, alpha_steady) -> jnp.ndarray:
    _check_square(g, dtg, lam, sigma)
    r = dtg + lam @ g + alpha_steady * (g - sigma)
    return jnp.sum(r * r)


def nonlinear_flow_residual(g, dtg, lam_of_g) -> jnp.ndarray:
    _check_square(g, dtg, lam_of_g)
    r = dtg + lam_of_g
    return jnp.sum(r * r)


def eigen_penalty(g, sigma, eigen_sign: int = -1) -> jnp.ndarray:
    if eigen_sign not in (1, -1):
        raise ValueError("eigen_sign must be +1 or -1")
    diff = g - sigma
    lam = ad.sym_eigenvalues(0.5 * (diff + diff.T))
    return jnp.sum(jax.nn.relu(eigen_sign * lam))


def _frob(a, b):
    return jnp.sum(a * b)


def functional_value(g, lam, sigma, alpha_steady) -> jnp.ndarray:
    """Pointwise integrand 0.5 <(Lambda + alpha I) g, g>_F - alpha <Sigma, g>_F."""
    k = jnp.shape(g)[0]
    return 0.5 * _frob((lam + alpha_steady * jnp.eye(k)) @ g, g) - alpha_steady * _frob(sigma, g)


@dataclass(frozen=True)
class FunctionalReport:
    F_value: float
    lhs: float
    rhs: float
    condition_satisfied: bool
    lambda_norm: float
    g_minus_sigma_norm: float


def entropy_terms(g, lam, dt_lam, sigma, alpha_steady):
    """(lhs, rhs) of the condition under which the functional is nonincreasing."""
    k = jnp.shape(g)[0]
    lhs = 0.5 * _frob(dt_lam @ g, g)
    r = (lam + alpha_steady * jnp.eye(k)) @ g - alpha_steady * sigma
    return lhs, jnp.sum(r * r)


def entropy_condition(g, lam, dt_lam, sigma, alpha_steady) -> FunctionalReport:
    _check_square(g, lam, dt_lam, sigma)
    lhs, rhs = entropy_terms(g, lam, dt_lam, sigma, alpha_steady)
    lhs, rhs = float(lhs), float(rhs)
    return FunctionalReport(
        F_value=float(functional_value(g, lam, sigma, alpha_steady)),
        lhs=lhs,
        rhs=rhs,
        condition_satisfied=lhs <= rhs,
        lambda_norm=float(jnp.linalg.norm(lam)),
        g_minus_sigma_norm=float(jnp.linalg.norm(g - sigma)),
    )


def analytic_flow_solution(g0, sigma, alpha_steady, t) -> jnp.ndarray:
    """Closed-form solution of the flow with Lambda = 0."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return sigma + jnp.exp(-alpha_steady * t) * (g0 - sigma)


def analytic_flow_derivative(g0, sigma, alpha_steady, t) -> jnp.ndarray:
    return -alpha_steady * jnp.exp(-alpha_steady * t) * (g0 - sigma)


def flow_rhs(g, lam, sigma, alpha_steady) -> jnp.ndarray:
    """Right-hand side of dg/dt = -(Lambda + alpha I) g + alpha Sigma for fixed Lambda."""
    k = jnp.shape(g)[0]
    return -(lam + alpha_steady * jnp.eye(k)) @ g + alpha_steady * sigma


def flow_steady_state(lam, sigma, alpha_steady) -> jnp.ndarray:
    k = jnp.shape(sigma)[0]
    return jnp.linalg.solve(lam / alpha_steady + jnp.eye(k), sigma)


def integrate_flow_rk4(g0, lam, sigma, alpha_steady, dt: float, n_steps: int):
    """Classical RK4 for the fixed-Lambda matrix flow; returns the trajectory."""

    def step(g, _):
        f = lambda x: flow_rhs(x, lam, sigma, alpha_steady)  # noqa: E731
        k1 = f(g)
        k2 = f(g + 0.5 * dt * k1)
        k3 = f(g + 0.5 * dt * k2)
        k4 = f(g + dt * k3)
        g_new = g + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return g_new, g_new

    _, traj = jax.lax.scan(step, g0, None, length=n_steps)
    return jnp.concatenate([g0[None], traj])
