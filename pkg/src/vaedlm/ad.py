"""Differentiation engine.

Thin layer over JAX running in 64-bit mode. Reverse mode (``backward``) gives
parameter gradients; input derivatives (``input_jacobian``,
``time_derivative``) are forward-mode tangents traced through the same
primitives, so they stay differentiable with respect to network parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

_DEBUG = False

SYMMETRY_TOL = 1e-9


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(enabled: bool) -> None:
    """Toggle finite-value checking on every primitive output."""
    global _DEBUG
    _DEBUG = bool(enabled)
    jax.config.update("jax_debug_nans", _DEBUG)


def debug_enabled() -> bool:
    return _DEBUG


def _is_concrete(x) -> bool:
    return not isinstance(x, jax.core.Tracer)


def check_finite(x, what: str = "value"):
    if _DEBUG and _is_concrete(x) and not bool(jnp.all(jnp.isfinite(x))):
        raise NonFiniteError(f"non-finite {what}")
    return x


def _conform(a, b, name: str) -> None:
    sa, sb = jnp.shape(a), jnp.shape(b)
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"{name}: shapes {sa} and {sb} do not conform")


def _binary(fn, name):
    def op(a, b):
        _conform(a, b, name)
        return check_finite(fn(a, b), name)

    op.__name__ = name
    return op


def _unary(fn, name):
    def op(x):
        return check_finite(fn(x), name)

    op.__name__ = name
    return op


add = _binary(jnp.add, "add")
sub = _binary(jnp.subtract, "sub")
mul = _binary(jnp.multiply, "mul")
maximum = _binary(jnp.maximum, "maximum")

tanh = _unary(jnp.tanh, "tanh")
sin = _unary(jnp.sin, "sin")
cos = _unary(jnp.cos, "cos")
exp = _unary(jnp.exp, "exp")
log = _unary(jnp.log, "log")
sqrt = _unary(jnp.sqrt, "sqrt")
relu = _unary(jax.nn.relu, "relu")
gelu = _unary(lambda x: jax.nn.gelu(x, approximate=False), "gelu")
sum = _unary(jnp.sum, "sum")  # noqa: A001
mean = _unary(jnp.mean, "mean")
frobenius_norm_sq = _unary(lambda x: jnp.sum(x * x), "frobenius_norm_sq")


def matmul(a, b):
    sa, sb = jnp.shape(a), jnp.shape(b)
    if len(sa) == 0 or len(sb) == 0 or sa[-1] != sb[0 if len(sb) == 1 else -2]:
        raise ShapeError(f"matmul: shapes {sa} and {sb} do not conform")
    return check_finite(jnp.matmul(a, b), "matmul")


@dataclass
class Tape:
    """A recorded forward computation that can be replayed."""

    closed: Any
    out_tree: Any

    def replay(self, *args):
        flat, _ = jax.tree_util.tree_flatten(args)
        out = jax.core.eval_jaxpr(self.closed.jaxpr, self.closed.consts, *flat)
        return jax.tree_util.tree_unflatten(self.out_tree, out)

    def __len__(self) -> int:
        return len(self.closed.jaxpr.eqns)


def record(fn: Callable, *args) -> Tape:
    closed, shape = jax.make_jaxpr(fn, return_shape=True)(*args)
    return Tape(closed, jax.tree_util.tree_structure(shape))


def backward(loss_fn: Callable, params, *args, has_aux: bool = False):
    """Value and gradient of a scalar ``loss_fn(params, *args)`` w.r.t. params."""

    def scalar_checked(p, *a):
        out = loss_fn(p, *a)
        val = out[0] if has_aux else out
        if jnp.ndim(val) != 0:
            raise ShapeError(f"loss must be scalar, got shape {jnp.shape(val)}")
        return out

    return jax.value_and_grad(scalar_checked, has_aux=has_aux)(params, *args)


def input_jacobian(fn: Callable[[jnp.ndarray], jnp.ndarray], x) -> jnp.ndarray:
    """J[i, j] = d fn(x)_i / d x_j, one forward tangent per input column."""
    if jnp.ndim(x) != 1:
        raise ShapeError(f"input_jacobian expects a vector input, got shape {jnp.shape(x)}")
    return jax.jacfwd(fn)(x)


def time_derivative(matrix_fn: Callable[[Any], jnp.ndarray], t) -> jnp.ndarray:
    """Entrywise d/dt of a symmetric matrix-valued function of a scalar.

    The upper triangle comes from the tangent; the lower is its mirror.
    """
    t = jnp.asarray(t, dtype=jnp.float64)
    _, dm = jax.jvp(matrix_fn, (t,), (jnp.ones_like(t),))
    if dm.ndim != 2 or dm.shape[0] != dm.shape[1]:
        raise ShapeError(f"time_derivative expects a square matrix output, got {dm.shape}")
    upper = jnp.triu(dm)
    return upper + jnp.triu(dm, 1).T


@jax.custom_jvp
def _eigvalsh(m):
    return jnp.linalg.eigh(m)[0]


@_eigvalsh.defjvp
def _eigvalsh_jvp(primals, tangents):
    (m,), (dm,) = primals, tangents
    w, v = jnp.linalg.eigh(m)
    # d lambda_i = v_i^T dM v_i; repeated eigenvalues get the same (sub)gradient
    dw = jnp.einsum("ji,jk,ki->i", v, dm, v)
    return w, dw


def sym_eigenvalues(m) -> jnp.ndarray:
    """Ascending eigenvalues of a symmetric matrix."""
    if jnp.ndim(m) != 2 or jnp.shape(m)[0] != jnp.shape(m)[1]:
        raise ShapeError(f"sym_eigenvalues expects a square matrix, got {jnp.shape(m)}")
    if _is_concrete(m):
        asym = float(np.max(np.abs(np.asarray(m) - np.asarray(m).T), initial=0.0))
        if asym > SYMMETRY_TOL:
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return _eigvalsh(m)
