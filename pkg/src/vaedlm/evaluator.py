"""OOD perturbations, relative L1 errors, variant tables and geometry exports."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import ad, geometry
from .geometry import FlowConfig
from .networks import (
    ModelSpec,
    lambda_net,
    manifold_encode,
    metric_net,
    predict,
    variational_encode,
)
from .pde import Dataset, SolverBlowUp, child_seed, integrate

log = logging.getLogger(__name__)

TIME_SLICES = (0.0, 0.25, 0.5, 0.75, 1.0)


class OodSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "in-distribution"
    scale: float = 1.0
    sigma: float = Field(0.0, ge=0.0)
    k: int = Field(0, ge=0)
    noise_kind: str = "gaussian"
    zeros: int = Field(0, ge=0)
    seed: int = 0

    def model_post_init(self, __context) -> None:
        if self.noise_kind not in ("gaussian", "absolute_gaussian"):
            raise ValueError("noise_kind must be 'gaussian' or 'absolute_gaussian'")

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and (self.sigma == 0.0 or self.k == 0) and self.zeros == 0


IN_DISTRIBUTION = OodSpec()


def perturb(ic, spec: OodSpec, seed: Optional[int] = None) -> np.ndarray:
    """Scale, add noise at ``k`` random points, then zero ``zeros`` random points.

    Both location sets come from one seeded permutation: noise takes its head,
    zeroing its tail, so they are disjoint whenever ``k + zeros <= n``.
    """
    ic = np.asarray(ic, dtype=np.float64)
    n = ic.shape[0]
    if spec.k > n or spec.zeros > n:
        raise ValueError(f"perturbation counts exceed mesh size {n}")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    perm = rng.permutation(n)
    out = spec.scale * ic
    noise = spec.sigma * rng.standard_normal(spec.k)
    if spec.noise_kind == "absolute_gaussian":
        noise = np.abs(noise)
    out[perm[:spec.k]] += noise
    if spec.zeros:
        out[perm[n - spec.zeros:]] = 0.0
    return out


def relative_l1_slice(pred, ref) -> float:
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError("prediction and reference shapes differ")
    denom = np.sum(np.abs(ref))
    if denom == 0.0:
        raise ValueError("reference has zero L1 norm")
    return float(np.sum(np.abs(pred - ref)) / denom)


def relative_l1_spacetime(pred, ref, x, t) -> float:
    """Trapezoidal double integral of |pred - ref| over (t, x), relative to |ref|."""
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or ref.shape != (len(t), len(x)):
        raise ValueError("fields must share the (n_t, n_x) mesh")
    integ = lambda f: np.trapezoid(np.trapezoid(f, x, axis=1), t)  # noqa: E731
    denom = integ(np.abs(ref))
    if denom == 0.0:
        raise ValueError("reference has zero L1 norm")
    return float(integ(np.abs(pred - ref)) / denom)


@dataclass
class Reference:
    """Perturbed initial conditions and their re-solved ground truth."""

    scenario: OodSpec
    ics: list
    truths: list
    skipped: int = 0


def build_reference(dataset: Dataset, scenario: OodSpec, n_samples: Optional[int] = None) -> Reference:
    n = len(dataset) if n_samples is None else min(n_samples, len(dataset))
    ref = Reference(scenario, [], [])
    for i in range(n):
        ic = dataset.values[i, 0].astype(np.float64)
        if scenario.is_identity:
            ref.ics.append(ic)
            ref.truths.append(dataset.values[i].astype(np.float64))
            continue
        pert = perturb(ic, scenario, child_seed(scenario.seed, i))
        try:
            truth = integrate(dataset.spec, pert, child_seed(scenario.seed, i)).values
        except SolverBlowUp as exc:
            log.warning("scenario %s sample %d skipped: %s", scenario.name, i, exc)
            ref.skipped += 1
            continue
        ref.ics.append(pert)
        ref.truths.append(truth)
    return ref


@dataclass
class ErrorTable:
    scenarios: list
    times: tuple
    mean: np.ndarray  # (n_scenarios, n_times)
    std: np.ndarray
    skipped: list = field(default_factory=list)
    label: str = ""

    def rows(self):
        for s, name in enumerate(self.scenarios):
            for j, t in enumerate(self.times):
                yield {"model": self.label, "scenario": name, "t": t,
                       "mean": float(self.mean[s, j]), "std": float(self.std[s, j]),
                       "skipped": self.skipped[s] if self.skipped else 0}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["model", "scenario", "t", "mean", "std", "skipped"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({**r, "mean": f"{r['mean']:.6e}", "std": f"{r['std']:.6e}"})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        head = ["scenario"] + [f"t={t:g}" for t in self.times]
        body = [[name] + [f"{self.mean[s, j]:.2e} ± {self.std[s, j]:.2e}"
                          for j in range(len(self.times))]
                for s, name in enumerate(self.scenarios)]
        widths = [max(len(r[c]) for r in [head] + body) for c in range(len(head))]
        fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths))  # noqa: E731
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
        if self.label:
            lines.insert(0, self.label)
        return "\n".join(lines) + "\n"


def _time_indices(n_t: int, times: Sequence[float]) -> list:
    return [int(round(t * (n_t - 1))) for t in times]


def model_predictions(spec: ModelSpec, params, x0, times) -> np.ndarray:
    """Deterministic (mean-path) predictions at normalised ``times``: (n_times, n_x)."""
    eps = jnp.zeros(spec.intrinsic)
    fn = jax.jit(jax.vmap(lambda t: predict(spec, params, jnp.asarray(x0), t, eps)))
    return np.asarray(fn(jnp.asarray(times, dtype=jnp.float64)))


def _batched_predictor(spec: ModelSpec, params, times):
    eps = jnp.zeros(spec.intrinsic)
    ts = jnp.asarray(times, dtype=jnp.float64)
    per_ic = lambda x0: jax.vmap(lambda t: predict(spec, params, x0, t, eps))(ts)  # noqa: E731
    return jax.jit(jax.vmap(per_ic))


def evaluate_references(spec: ModelSpec, params, references: Sequence[Reference],
                        times=TIME_SLICES, label: str = "") -> ErrorTable:
    times = tuple(times)
    predictor = _batched_predictor(spec, params, times)
    means, stds, skipped = [], [], []
    for ref in references:
        n_t = ref.truths[0].shape[0] if ref.truths else 0
        idx = _time_indices(n_t, times)
        preds = np.asarray(predictor(jnp.asarray(np.stack(ref.ics)))) if ref.ics else None
        errs = np.array([[relative_l1_slice(preds[i, j], ref.truths[i][ti])
                          for j, ti in enumerate(idx)] for i in range(len(ref.ics))])
        if errs.size == 0:
            errs = np.full((1, len(times)), np.nan)
        means.append(errs.mean(axis=0))
        stds.append(errs.std(axis=0))
        skipped.append(ref.skipped)
    return ErrorTable([r.scenario.name for r in references], times, np.array(means),
                      np.array(stds), skipped, label)


def evaluate(model, dataset: Dataset, scenarios: Sequence[OodSpec] = (), times=TIME_SLICES,
             n_samples: Optional[int] = 30, label: str = "") -> ErrorTable:
    """Error table for ``model`` (checkpoint path or ``(spec, params)``).

    The in-distribution scenario is always the first row.
    """
    spec, params = _resolve_model(model)
    scen = [IN_DISTRIBUTION] + [s for s in scenarios if s != IN_DISTRIBUTION]
    refs = [build_reference(dataset, s, n_samples) for s in scen]
    return evaluate_references(spec, params, refs, times, label)


def compare_variants(models: dict, dataset: Dataset, scenarios: Sequence[OodSpec],
                     times=TIME_SLICES, n_samples: Optional[int] = 30) -> list:
    """One ErrorTable per named model; all models share the same references."""
    scen = [IN_DISTRIBUTION] + [s for s in scenarios if s != IN_DISTRIBUTION]
    refs = [build_reference(dataset, s, n_samples) for s in scen]
    return [evaluate_references(*_resolve_model(m), refs, times, label=name)
            for name, m in models.items()]


def comparison_csv(tables: Sequence[ErrorTable], path=None) -> str:
    """Wide layout: one row per (model, scenario), mean/std per time slice."""
    times = tables[0].times
    cols = ["model", "scenario"] + [f"{k}_t{t:g}" for t in times for k in ("mean", "std")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for tab in tables:
        for s, name in enumerate(tab.scenarios):
            vals = []
            for j in range(len(times)):
                vals += [f"{tab.mean[s, j]:.6e}", f"{tab.std[s, j]:.6e}"]
            w.writerow([tab.label, name] + vals)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _resolve_model(model):
    if isinstance(model, (str, Path)):
        from .trainer import load_state

        _, spec, params, _ = load_state(model)
        return spec, params
    return model


# -- geometry diagnostics ---------------------------------------------------


def _probe_terms(spec: ModelSpec, params, flow: FlowConfig, x0, t):
    archs = spec.archs()
    u = variational_encode(archs["u"], params["u"], x0).mu
    gfun = lambda s: metric_net(archs["g"], params["g"], u, s)  # noqa: E731
    g = gfun(t)
    sigma = geometry.sphere_metric(u, flow.r2)
    nonlinear = flow.flow_kind == "nonlinear"
    lfun = lambda s: lambda_net(archs["lam"], params["lam"], u, s, gfun(s), nonlinear)  # noqa: E731
    lam = lfun(t)
    dtg = ad.time_derivative(gfun, t)
    JtJ = geometry.pullback_metric(archs["enc"], params["enc"], spec.fourier, u, t)
    lhs, rhs = geometry.entropy_terms(g, lam, ad.time_derivative(lfun, t), sigma, flow.alpha_steady)
    if nonlinear:
        flow_res = geometry.nonlinear_flow_residual(g, dtg, lam)
    else:
        flow_res = geometry.flow_residual(g, dtg, lam, sigma, flow.alpha_steady)
    return {
        "g": g, "lam": lam, "sigma": sigma,
        "F": geometry.functional_value(g, lam, sigma, flow.alpha_steady),
        "lhs": lhs, "rhs": rhs,
        "lambda_fro": jnp.linalg.norm(lam), "g_minus_sigma_fro": jnp.linalg.norm(g - sigma),
        "flow_residual": flow_res, "metric_residual": jnp.sum((g - JtJ) ** 2),
    }


def diagnostic_columns(k: int) -> list:
    cols = ["t"]
    cols += [f"g_mean_{i}_{j}" for i in range(k) for j in range(k)]
    cols += [f"g_std_{i}_{j}" for i in range(k) for j in range(k)]
    cols += ["lambda_fro", "g_minus_sigma_fro", "F", "entropy_lhs", "entropy_rhs",
             "condition_frac", "flow_residual", "metric_residual"]
    return cols


def sample_columns(k: int) -> list:
    cols = ["sample", "t"]
    for name in ("g", "lam", "sigma"):
        cols += [f"{name}_{i}_{j}" for i in range(k) for j in range(k)]
    return cols + ["F", "entropy_lhs", "entropy_rhs"]


@dataclass
class Diagnostics:
    summary: list
    samples: list
    k: int

    def write(self, summary_path, samples_path=None) -> None:
        _write_rows(summary_path, diagnostic_columns(self.k), self.summary)
        if samples_path is not None:
            _write_rows(samples_path, sample_columns(self.k), self.samples)


def _write_rows(path, cols, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(float(r[c])) if c != "sample" else r[c]) for c in cols})


def diagnostics(model, dataset: Dataset, flow: Optional[FlowConfig] = None, n_probe: int = 32,
                times: Optional[Sequence[float]] = None) -> Diagnostics:
    """Metric statistics and functional terms over a fixed probe batch (mean path)."""
    if isinstance(model, (str, Path)):
        from .trainer import load_state

        config, spec, params, _ = load_state(model)
        flow = flow or config.flow
    else:
        spec, params = model
        flow = flow or FlowConfig()
    if spec.variant != "vae_dlm":
        raise ValueError("diagnostics need a vae_dlm model")
    times = np.linspace(0, 1, 11) if times is None else np.asarray(times, dtype=float)
    x0 = jnp.asarray(dataset.values[:n_probe, 0], dtype=jnp.float64)
    fn = jax.jit(jax.vmap(lambda x, t: _probe_terms(spec, params, flow, x, t), in_axes=(0, None)))
    k = spec.intrinsic
    summary, samples = [], []
    for t in times:
        terms = {key: np.asarray(v) for key, v in fn(x0, jnp.float64(t)).items()}
        row = {"t": float(t)}
        gm, gs = terms["g"].mean(axis=0), terms["g"].std(axis=0)
        for i in range(k):
            for j in range(k):
                row[f"g_mean_{i}_{j}"] = gm[i, j]
                row[f"g_std_{i}_{j}"] = gs[i, j]
        for key in ("lambda_fro", "g_minus_sigma_fro", "F", "flow_residual", "metric_residual"):
            row[key] = terms[key].mean()
        row["entropy_lhs"] = terms["lhs"].mean()
        row["entropy_rhs"] = terms["rhs"].mean()
        row["condition_frac"] = np.mean(terms["lhs"] <= terms["rhs"])
        summary.append(row)
        for s in range(x0.shape[0]):
            srow = {"sample": s, "t": float(t), "F": terms["F"][s],
                    "entropy_lhs": terms["lhs"][s], "entropy_rhs": terms["rhs"][s]}
            for name in ("g", "lam", "sigma"):
                for i in range(k):
                    for j in range(k):
                        srow[f"{name}_{i}_{j}"] = terms[name][s, i, j]
            samples.append(srow)
    return Diagnostics(summary, samples, k)


def export_latent_cloud(model, dataset: Dataset, t_values: Sequence[float],
                        n_samples: Optional[int] = None) -> list:
    """Rows (sample, t, z_0..z_{d-1}) of E(mu(x0), t)."""
    spec, params = _resolve_model(model)
    if spec.variant == "vae":
        raise ValueError("the vanilla VAE has no manifold stage")
    if spec.extrinsic > 16:
        raise ValueError("latent export supports extrinsic dimension <= 16")
    archs = spec.archs()
    n = len(dataset) if n_samples is None else min(n_samples, len(dataset))

    def z_of(x0, t):
        mu = variational_encode(archs["u"], params["u"], x0).mu
        return manifold_encode(archs["enc"], params["enc"], spec.fourier, mu, t)

    fn = jax.jit(jax.vmap(z_of, in_axes=(0, None)))
    x0 = jnp.asarray(dataset.values[:n, 0], dtype=jnp.float64)
    rows = []
    zs = {float(t): np.asarray(fn(x0, jnp.float64(t))) for t in t_values}
    for i in range(n):
        for t in t_values:
            rows.append([i, float(t)] + [float(c) for c in zs[float(t)][i]])
    return rows


def write_latent_csv(rows, d: int, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "t"] + [f"z{i}" for i in range(d)])
        for r in rows:
            w.writerow([r[0]] + [repr(v) for v in r[1:]])
