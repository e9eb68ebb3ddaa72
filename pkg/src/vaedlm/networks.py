"""The five networks of the model, all built on the gated ("modified") MLP.

Parameters are plain dicts of arrays so they can be passed through
``jax.grad``/``jax.jit`` as pytrees; the architecture itself (sizes,
activation) lives in a frozen :class:`ModifiedMlp` description.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from . import ad

SIGMA_FLOOR = 1e-6

ACTIVATIONS = {"tanh": ad.tanh, "gelu": ad.gelu}


@dataclass(frozen=True)
class ModifiedMlp:
    """Shape and activation of one gated MLP.

    ``depth`` counts the gating (Z) layers; every hidden layer has ``width``
    units.
    """

    in_dim: int
    out_dim: int
    width: int = 64
    depth: int = 3
    activation: str = "tanh"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_mlp(arch: ModifiedMlp, rng: np.random.Generator) -> dict:
    w, i, o = arch.width, arch.in_dim, arch.out_dim
    p = {
        "WU1": _glorot(rng, i, w), "bU1": np.zeros(w),
        "WU2": _glorot(rng, i, w), "bU2": np.zeros(w),
        "WH1": _glorot(rng, i, w), "bH1": np.zeros(w),
        "WZ": [_glorot(rng, w, w) for _ in range(arch.depth)],
        "bZ": [np.zeros(w) for _ in range(arch.depth)],
        "W": _glorot(rng, w, o), "b": np.zeros(o),
    }
    return jax.tree_util.tree_map(jnp.asarray, p)


def modified_mlp_forward(arch: ModifiedMlp, params: dict, x) -> jnp.ndarray:
    if jnp.shape(x)[-1] != arch.in_dim:
        raise ad.ShapeError(f"expected input of size {arch.in_dim}, got {jnp.shape(x)}")
    act = ACTIVATIONS[arch.activation]
    U = act(ad.matmul(x, params["WU1"]) + params["bU1"])
    V = act(ad.matmul(x, params["WU2"]) + params["bU2"])
    H = act(ad.matmul(x, params["WH1"]) + params["bH1"])
    for Wz, bz in zip(params["WZ"], params["bZ"]):
        Z = act(ad.matmul(H, Wz) + bz)
        H = (1.0 - Z) * U + Z * V
    return ad.matmul(H, params["W"]) + params["b"]


@dataclass(frozen=True)
class FourierFeatureMap:
    """Frozen random features t -> (cos 2 pi B t, sin 2 pi B t)."""

    B: tuple
    sigma: float

    @classmethod
    def create(cls, q: int, sigma: float, rng: np.random.Generator) -> "FourierFeatureMap":
        return cls(B=tuple(float(b) for b in rng.normal(0.0, sigma, size=q)), sigma=float(sigma))

    @property
    def q(self) -> int:
        return len(self.B)

    def __call__(self, t) -> jnp.ndarray:
        return fourier_embed(self, t)


def fourier_embed(ff: FourierFeatureMap, t) -> jnp.ndarray:
    arg = 2.0 * jnp.pi * jnp.asarray(ff.B) * t
    return jnp.concatenate([jnp.cos(arg), jnp.sin(arg)])


@dataclass(frozen=True)
class VariationalOutput:
    mu: jnp.ndarray
    sigma: jnp.ndarray


def variational_encode(arch: ModifiedMlp, params: dict, x0) -> VariationalOutput:
    raw = modified_mlp_forward(arch, params, x0)
    k = arch.out_dim // 2
    return VariationalOutput(mu=raw[:k], sigma=jax.nn.softplus(raw[k:]) + SIGMA_FLOOR)


def reparameterize(v: VariationalOutput, eps) -> jnp.ndarray:
    return v.mu + v.sigma * eps


def manifold_input(ff: Optional[FourierFeatureMap], u, t) -> jnp.ndarray:
    t = jnp.reshape(jnp.asarray(t, dtype=jnp.float64), (1,))
    time_part = t if ff is None else fourier_embed(ff, t[0])
    return jnp.concatenate([u, time_part])


def manifold_encode(arch: ModifiedMlp, params: dict, ff: Optional[FourierFeatureMap], u, t):
    return modified_mlp_forward(arch, params, manifold_input(ff, u, t))


def decode(arch: ModifiedMlp, params: dict, z) -> jnp.ndarray:
    return modified_mlp_forward(arch, params, z)


def _square(raw, k):
    A = jnp.reshape(raw, (k, k))
    return A.T @ A


def metric_net(arch: ModifiedMlp, params: dict, u, t) -> jnp.ndarray:
    """g = A^T A where A is the reshaped raw output."""
    k = jnp.shape(u)[0]
    raw = modified_mlp_forward(arch, params, jnp.concatenate([u, jnp.reshape(t, (1,))]))
    return _square(raw, k)


def lambda_net(arch: ModifiedMlp, params: dict, u, t, g=None, nonlinear: bool = False):
    """Lambda = B^T B; with ``nonlinear`` the flattened metric is appended to the input."""
    k = jnp.shape(u)[0]
    parts = [u, jnp.reshape(t, (1,))]
    if nonlinear:
        if g is None:
            raise ValueError("nonlinear flow needs the metric g as lambda_net input")
        parts.append(jnp.reshape(g, (-1,)))
    raw = modified_mlp_forward(arch, params, jnp.concatenate(parts))
    return _square(raw, k)


# -- model assembly -------------------------------------------------------

VARIANTS = ("vae", "vae_extended", "vae_dlm")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a full model variant."""

    variant: str
    n_x: int
    intrinsic: int
    extrinsic: int
    width: int = 64
    depth: int = 3
    act_u: str = "gelu"
    act_enc: str = "tanh"
    act_dec: str = "tanh"
    act_g: str = "gelu"
    act_lam: str = "gelu"
    nonlinear_flow: bool = False
    fourier: Optional[FourierFeatureMap] = None
    metric_init: str = "glorot"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def archs(self) -> dict:
        k, d = self.intrinsic, self.extrinsic
        enc_in = k + (1 if self.fourier is None else 2 * self.fourier.q)
        dec_in = k + 1 if self.variant == "vae" else d
        lam_in = k + 1 + (k * k if self.nonlinear_flow else 0)
        mk = lambda i, o, a: ModifiedMlp(i, o, self.width, self.depth, a)  # noqa: E731
        return {
            "u": mk(self.n_x, 2 * k, self.act_u),
            "enc": mk(enc_in, d, self.act_enc),
            "dec": mk(dec_in, self.n_x, self.act_dec),
            "g": mk(k + 1, k * k, self.act_g),
            "lam": mk(lam_in, k * k, self.act_lam),
        }


def init_model(spec: ModelSpec, seed: int) -> dict:
    """Initialise all five networks from one seed.

    Each network draws from its own child stream, so variants sharing a seed
    share identical u/enc/dec weights.
    """
    children = np.random.SeedSequence(seed).spawn(5)
    params = {}
    for (name, arch), ss in zip(spec.archs().items(), children):
        params[name] = init_mlp(arch, np.random.default_rng(ss))
    if spec.metric_init == "identity":
        k = spec.intrinsic
        params["g"]["W"] = jnp.zeros_like(params["g"]["W"])
        params["g"]["b"] = jnp.reshape(jnp.eye(k), (-1,))
    elif spec.metric_init != "glorot":
        raise ValueError(f"unknown metric_init {spec.metric_init!r}")
    return params


def predict(spec: ModelSpec, params: dict, x0, t, eps) -> jnp.ndarray:
    """Forward path of any variant: x0, t, eps -> predicted state at t."""
    archs = spec.archs()
    v = variational_encode(archs["u"], params["u"], x0)
    z = reparameterize(v, eps)
    if spec.variant == "vae":
        return decode(archs["dec"], params["dec"], jnp.concatenate([z, jnp.reshape(t, (1,))]))
    zt = manifold_encode(archs["enc"], params["enc"], spec.fourier, z, t)
    return decode(archs["dec"], params["dec"], zt)


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"VDLMCKPT"


def flatten_named(tree: dict, prefix: str = "") -> list:
    """Deterministic (name, array) list for nested dicts/lists of arrays."""
    out = []
    if isinstance(tree, dict):
        for key in sorted(tree):
            out.extend(flatten_named(tree[key], f"{prefix}{key}."))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            out.extend(flatten_named(item, f"{prefix}{i}."))
    else:
        out.append((prefix[:-1], np.asarray(tree, dtype=np.float64)))
    return out


def _set_path(tree, path: list, value):
    key = path[0]
    if key.isdigit():
        key = int(key)
        while len(tree) <= key:
            tree.append(None)
    if len(path) == 1:
        tree[key] = value
        return
    nxt = path[1]
    if isinstance(tree, dict) and key not in tree:
        tree[key] = [] if nxt.isdigit() else {}
    elif isinstance(tree, list) and tree[key] is None:
        tree[key] = [] if nxt.isdigit() else {}
    _set_path(tree[key], path[1:], value)


def unflatten_named(items: list) -> dict:
    tree: dict = {}
    for name, arr in items:
        _set_path(tree, name.split("."), jnp.asarray(arr))
    return tree


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def spec_to_dict(spec: ModelSpec) -> dict:
    d = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    if spec.fourier is not None:
        d["fourier"] = {"B": list(spec.fourier.B), "sigma": spec.fourier.sigma}
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    if d.get("fourier") is not None:
        d["fourier"] = FourierFeatureMap(B=tuple(d["fourier"]["B"]), sigma=d["fourier"]["sigma"])
    return ModelSpec(**d)


def save_checkpoint(path, spec: ModelSpec, params: dict, extra_arrays: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    """Binary checkpoint: magic, u64 header length, JSON header, f64 LE payload."""
    arrays = flatten_named({"params": params, **(extra_arrays or {})})
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    meta = dict(meta or {})
    header = {
        "model": spec_to_dict(spec),
        "activations": {k: a.activation for k, a in spec.archs().items()},
        "arrays": entries,
        "meta": meta,
        "config_hash": meta.get("config_hash"),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(arr.astype("<f8").tobytes() for _, arr in arrays)
    data = CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload
    Path(path).write_bytes(data)


def load_checkpoint(path):
    """Returns (spec, params, extra_arrays, meta)."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    payload = np.frombuffer(data[16 + hlen:], dtype="<f8")
    items = []
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + n > payload.size:
            raise ValueError(f"{path}: truncated checkpoint")
        items.append((e["name"], payload[e["offset"]:e["offset"] + n].reshape(e["shape"])))
    tree = unflatten_named(items)
    params = tree.pop("params")
    return spec_from_dict(header["model"]), params, tree, header["meta"]
