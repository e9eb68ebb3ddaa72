"""Training loop for the three model variants."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import ad
from .geometry import FlowConfig
from .networks import (
    VARIANTS,
    FourierFeatureMap,
    ModelSpec,
    config_hash,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import BREAKDOWN_FIELDS, LossWeights, batch_terms, combine
from .pde import Dataset

log = logging.getLogger(__name__)

DIAG_FIELDS = ("functional", "entropy_lhs", "entropy_rhs")
CSV_FIELDS = ("step", "lr") + BREAKDOWN_FIELDS + DIAG_FIELDS


class FourierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = False
    q: int = Field(32, ge=1)
    sigma: float = Field(4.0, gt=0.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: str = "vae_dlm"
    intrinsic_dim: int = Field(6, ge=1)
    extrinsic_dim: Optional[int] = None
    width: int = Field(64, ge=1)
    depth: int = Field(3, ge=1)
    loss: LossWeights = LossWeights()
    flow: FlowConfig = FlowConfig()
    batch_size: int = Field(1000, ge=1)
    iterations: int = Field(3000, ge=0)
    lr_initial: float = Field(2e-4, gt=0.0)
    lr_late: float = Field(5e-5, gt=0.0)
    lr_switch: Optional[int] = None
    seed: int = 0
    fourier: FourierConfig = FourierConfig()
    metric_init: str = "glorot"
    checkpoint_every: int = Field(0, ge=0)
    dataset: Optional[str] = None

    def model_post_init(self, __context) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.extrinsic_dim is None:
            object.__setattr__(self, "extrinsic_dim", self.intrinsic_dim + 1)
        if self.extrinsic_dim < self.intrinsic_dim + 1:
            raise ValueError("extrinsic_dim must be at least intrinsic_dim + 1")

    @property
    def switch_step(self) -> int:
        return self.lr_switch if self.lr_switch is not None else int(0.8 * self.iterations)

    def lr_at(self, step: int) -> float:
        return self.lr_initial if step < self.switch_step else self.lr_late

    def hash(self) -> str:
        return config_hash(self.model_dump(exclude={"dataset", "iterations", "checkpoint_every"}))


def model_spec(config: TrainConfig, n_x: int) -> ModelSpec:
    ff = None
    if config.fourier.enabled:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xFF]))
        ff = FourierFeatureMap.create(config.fourier.q, config.fourier.sigma, rng)
    return ModelSpec(variant=config.variant, n_x=n_x, intrinsic=config.intrinsic_dim,
                     extrinsic=config.extrinsic_dim, width=config.width, depth=config.depth,
                     nonlinear_flow=config.flow.flow_kind == "nonlinear", fourier=ff,
                     metric_init=config.metric_init)


# -- optimizer --------------------------------------------------------------

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params) -> OptimizerState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return OptimizerState(m=zeros, v=jax.tree_util.tree_map(jnp.zeros_like, params), step=0)


def adam_update(params, grads, m, v, step, lr):
    """One Adam step; ``step`` is the 1-based update count."""
    m = jax.tree_util.tree_map(lambda a, g: BETA1 * a + (1 - BETA1) * g, m, grads)
    v = jax.tree_util.tree_map(lambda a, g: BETA2 * a + (1 - BETA2) * g * g, v, grads)
    c1 = 1 - BETA1 ** step
    c2 = 1 - BETA2 ** step
    params = jax.tree_util.tree_map(
        lambda p, a, b: p - lr * (a / c1) / (jnp.sqrt(b / c2) + ADAM_EPS), params, m, v)
    return params, m, v


# -- batches ---------------------------------------------------------------


@dataclass
class Batch:
    x0: np.ndarray
    t: np.ndarray  # normalised to [0, 1]
    xt: np.ndarray
    eps: np.ndarray
    sample_idx: np.ndarray
    time_idx: np.ndarray

    def arrays(self):
        return self.x0, self.t, self.xt, self.eps


def sample_batch(values: np.ndarray, batch_size: int, rng: np.random.Generator,
                 intrinsic_dim: int) -> Batch:
    n, n_t, _ = values.shape
    if n == 0:
        raise ValueError("cannot sample from an empty dataset")
    si = rng.integers(0, n, size=batch_size)
    ti = rng.integers(0, n_t, size=batch_size)
    eps = rng.standard_normal((batch_size, intrinsic_dim))
    return Batch(x0=values[si, 0].astype(np.float64), t=ti / (n_t - 1),
                 xt=values[si, ti].astype(np.float64), eps=eps, sample_idx=si, time_idx=ti)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


# -- steps -------------------------------------------------------------------


def make_loss_fn(spec: ModelSpec, weights: LossWeights, flow: FlowConfig, diagnostics=False):
    def loss_fn(params, batch):
        x0, t, xt, eps = batch
        terms = batch_terms(spec, params, flow, x0, t, xt, eps, diagnostics=diagnostics)
        br = combine(spec, terms, weights, flow)
        if diagnostics and "F" in terms:
            br["functional"] = jnp.mean(terms["F"])
            if "entropy_lhs" in terms:
                br["entropy_lhs"] = jnp.mean(terms["entropy_lhs"])
                br["entropy_rhs"] = jnp.mean(terms["entropy_rhs"])
        return br["total"], br

    return loss_fn


def loss_and_grad(spec, weights, flow, params, batch):
    (_, br), grads = ad.backward(make_loss_fn(spec, weights, flow), params, batch, has_aux=True)
    return br, grads


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, breakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


class Trainer:
    """Holds the compiled step for a (config, mesh size) pair."""

    def __init__(self, config: TrainConfig, n_x: int):
        self.config = config
        self.spec = model_spec(config, n_x)
        loss_fn = make_loss_fn(self.spec, config.loss, config.flow,
                               diagnostics=config.variant == "vae_dlm")

        def step(params, m, v, count, lr, batch):
            (_, br), grads = jax.value_and_grad(loss_fn, has_aux=True)(params, batch)
            params, m, v = adam_update(params, grads, m, v, count, lr)
            return params, m, v, br

        self._step = jax.jit(step)

    def init(self):
        params = init_model(self.spec, self.config.seed)
        return params, adam_init(params)

    def train_step(self, params, opt: OptimizerState, batch: Batch):
        lr = self.config.lr_at(opt.step)
        count = opt.step + 1
        params, m, v, br = self._step(params, opt.m, opt.v, jnp.float64(count),
                                      jnp.float64(lr), tuple(map(jnp.asarray, batch.arrays())))
        br = {k: float(x) for k, x in br.items()}
        if not math.isfinite(br["total"]):
            raise TrainingDiverged(opt.step, br)
        return params, OptimizerState(m, v, count), br


def save_state(path, trainer: Trainer, params, opt: OptimizerState) -> None:
    meta = {"step": opt.step, "config": trainer.config.model_dump(),
            "config_hash": trainer.config.hash()}
    save_checkpoint(path, trainer.spec, params, {"opt": {"m": opt.m, "v": opt.v}}, meta)


def load_state(path):
    """Returns (config, spec, params, opt_state)."""
    spec, params, extra, meta = load_checkpoint(path)
    config = TrainConfig(**meta["config"])
    opt = extra.get("opt", {})
    if opt:
        state = OptimizerState(opt["m"], opt["v"], int(meta["step"]))
    else:
        state = adam_init(params)
    return config, spec, params, state


def _csv_row(step, lr, br):
    row = {"step": step, "lr": lr}
    for k in BREAKDOWN_FIELDS + DIAG_FIELDS:
        row[k] = repr(br[k]) if k in br else ""
    return row


def train_loop(config: TrainConfig, dataset: Dataset, out_dir, resume_from=None,
               log_every: int = 100):
    """Run the configured number of iterations; returns (params, opt_state, rows).

    Writes ``loss.csv`` (one row per step) and ``checkpoint.bin``; with
    ``checkpoint_every`` also ``checkpoint_<step>.bin``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, dataset.values.shape[2])
    if resume_from is not None:
        _, _, params, opt = load_state(resume_from)
    else:
        params, opt = trainer.init()
    csv_path = out / "loss.csv"
    mode = "a" if resume_from is not None and csv_path.exists() else "w"
    rows = []
    with open(csv_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if mode == "w":
            writer.writeheader()
        while opt.step < config.iterations:
            step = opt.step
            batch = sample_batch(dataset.values, config.batch_size, step_rng(config.seed, step),
                                 config.intrinsic_dim)
            lr = config.lr_at(step)
            params, opt, br = trainer.train_step(params, opt, batch)
            row = _csv_row(step, lr, br)
            writer.writerow(row)
            rows.append(row)
            if step == config.switch_step:
                log.info("step %d: learning rate switched to %g", step, lr)
            if log_every and step % log_every == 0:
                log.info("step %d total %.4e recon %.4e flow %.4e metric %.4e", step,
                         br["total"], br["reconstruction"], br["flow"], br["metric_match"])
            if config.checkpoint_every and opt.step % config.checkpoint_every == 0:
                save_state(out / f"checkpoint_{opt.step}.bin", trainer, params, opt)
    save_state(out / "checkpoint.bin", trainer, params, opt)
    return params, opt, rows
