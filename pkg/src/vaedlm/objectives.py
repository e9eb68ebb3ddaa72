"""Loss terms and their combination into the training objective."""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import ad, geometry
from .geometry import FlowConfig
from .networks import (
    ModelSpec,
    VariationalOutput,
    decode,
    lambda_net,
    manifold_encode,
    metric_net,
    reparameterize,
    variational_encode,
)

BREAKDOWN_FIELDS = ("reconstruction", "kl", "flow", "metric_match", "eigen", "total")


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha_recon: float = Field(100.0, ge=0.0)
    beta: float = Field(1e-5, ge=0.0)
    gamma_geo: float = Field(1.0, ge=0.0)
    gamma_metric: float = Field(1.0, ge=0.0)
    weighted: bool = False
    eigen_weight: float = Field(1.0, ge=0.0)


def reconstruction_loss(pred, target) -> jnp.ndarray:
    if jnp.shape(pred) != jnp.shape(target):
        raise ad.ShapeError(f"prediction {jnp.shape(pred)} vs target {jnp.shape(target)}")
    return jnp.mean((pred - target) ** 2)


def _check_sigma(sigma):
    if not isinstance(sigma, jax.core.Tracer) and np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be strictly positive")


def kl_standard(v: VariationalOutput) -> jnp.ndarray:
    """KL( N(mu, diag sigma^2) || N(0, I) )."""
    _check_sigma(v.sigma)
    s2 = v.sigma ** 2
    k = jnp.shape(v.mu)[-1]
    return 0.5 * (-jnp.sum(jnp.log(s2), -1) - k + jnp.sum(s2, -1) + jnp.sum(v.mu ** 2, -1))


def fourth_moment(mu, sigma) -> jnp.ndarray:
    """E ||u||^4 for u ~ N(mu, diag sigma^2)."""
    s2 = sigma ** 2
    return (2 * jnp.sum(s2 ** 2, -1) + 4 * jnp.sum(mu ** 2 * s2, -1)
            + (jnp.sum(s2, -1) + jnp.sum(mu ** 2, -1)) ** 2)


def kl_weighted(vol, mu, sigma, floor=None) -> jnp.ndarray:
    """Volume-weighted KL bound over a batch.

    ``vol`` has shape (N,), ``mu``/``sigma`` shape (N, k). ``floor`` is the
    lower bound on the volume weight; by default the batch minimum. The
    dimension multiplying the floor is the intrinsic one, k, not the
    extrinsic embedding dimension.
    """
    vol = jnp.asarray(vol)
    if vol.shape[0] == 0:
        raise ValueError("kl_weighted needs a nonempty batch")
    _check_sigma(sigma)
    k = jnp.shape(mu)[-1]
    M = jnp.min(vol) if floor is None else floor
    log_term = -jnp.sum(jnp.log(sigma ** 2), -1)
    per = vol * log_term - k * M + vol * jnp.sqrt(fourth_moment(mu, sigma))
    return jnp.sum(per) / (2 * vol.shape[0])


def beta_scaled(beta, vol) -> jnp.ndarray:
    vol = jnp.asarray(vol)
    if vol.shape[0] == 0:
        raise ValueError("beta_scaled needs a nonempty batch")
    total = jnp.sum(vol)
    if not isinstance(total, jax.core.Tracer) and float(total) == 0.0:
        raise ValueError("volume weights sum to zero")
    return vol.shape[0] * beta / total


def sample_terms(spec: ModelSpec, params, flow: FlowConfig, x0, t, xt, eps,
                 diagnostics: bool = False) -> dict:
    """Per-sample loss ingredients for one (x0, t, xt, eps) tuple."""
    archs = spec.archs()
    v = variational_encode(archs["u"], params["u"], x0)
    u = reparameterize(v, eps)
    out = {"mu": v.mu, "sigma": v.sigma, "kl": kl_standard(v)}

    if spec.variant == "vae":
        pred = decode(archs["dec"], params["dec"], jnp.concatenate([u, jnp.reshape(t, (1,))]))
        out["reconstruction"] = reconstruction_loss(pred, xt)
        out["vol"] = jnp.ones(())
        return out

    zt = manifold_encode(archs["enc"], params["enc"], spec.fourier, u, t)
    out["reconstruction"] = reconstruction_loss(decode(archs["dec"], params["dec"], zt), xt)
    JtJ = geometry.pullback_metric(archs["enc"], params["enc"], spec.fourier, u, t)
    out["vol"] = jax.lax.stop_gradient(geometry.volume_from_metric(JtJ))
    if spec.variant == "vae_extended":
        return out

    gfun = lambda s: metric_net(archs["g"], params["g"], u, s)  # noqa: E731
    g = gfun(t)
    dtg = ad.time_derivative(gfun, t)
    sigma = geometry.sphere_metric(u, flow.r2)
    if flow.flow_kind == "nonlinear":
        lam = lambda_net(archs["lam"], params["lam"], u, t, g, nonlinear=True)
        out["flow"] = geometry.nonlinear_flow_residual(g, dtg, lam)
    else:
        lam = lambda_net(archs["lam"], params["lam"], u, t)
        out["flow"] = geometry.flow_residual(g, dtg, lam, sigma, flow.alpha_steady)
    diff = g - JtJ
    out["metric_match"] = jnp.sum(diff * diff)
    if flow.eigen_sign is not None:
        out["eigen"] = geometry.eigen_penalty(g, sigma, flow.eigen_sign)
    if diagnostics:
        sg = jax.lax.stop_gradient
        out["g"] = sg(g)
        out["F"] = sg(geometry.functional_value(g, lam, sigma, flow.alpha_steady))
        if flow.flow_kind == "linear":
            lfun = lambda s: lambda_net(archs["lam"], params["lam"], u, s)  # noqa: E731
            lhs, rhs = geometry.entropy_terms(g, lam, ad.time_derivative(lfun, t), sigma,
                                              flow.alpha_steady)
            out["entropy_lhs"], out["entropy_rhs"] = sg(lhs), sg(rhs)
    return out


def batch_terms(spec, params, flow, x0, t, xt, eps, diagnostics=False) -> dict:
    fn = lambda a, b, c, d: sample_terms(spec, params, flow, a, b, c, d, diagnostics)  # noqa: E731
    return jax.vmap(fn)(x0, t, xt, eps)


def combine(spec: ModelSpec, terms: dict, weights: LossWeights, flow: FlowConfig) -> dict:
    """Batch-averaged, weighted loss breakdown from per-sample terms."""
    zero = jnp.zeros(())
    recon = jnp.mean(terms["reconstruction"])
    if weights.weighted:
        kl = kl_weighted(terms["vol"], terms["mu"], terms["sigma"])
        beta = beta_scaled(weights.beta, terms["vol"])
    else:
        kl = jnp.mean(terms["kl"])
        beta = weights.beta
    flow_l = jnp.mean(terms["flow"]) if "flow" in terms else zero
    metric_l = jnp.mean(terms["metric_match"]) if "metric_match" in terms else zero
    eigen_l = jnp.mean(terms["eigen"]) if "eigen" in terms else zero
    total = (weights.alpha_recon * recon + beta * kl + weights.gamma_geo * flow_l
             + weights.gamma_metric * metric_l + weights.eigen_weight * eigen_l)
    return {"reconstruction": recon, "kl": kl, "flow": flow_l, "metric_match": metric_l,
            "eigen": eigen_l, "total": total}


def total_loss(spec, params, weights: LossWeights, flow: FlowConfig, batch) -> dict:
    """LossBreakdown for a batch ``(x0, t, xt, eps)`` of stacked arrays."""
    x0, t, xt, eps = batch
    return combine(spec, batch_terms(spec, params, flow, x0, t, xt, eps), weights, flow)
