import jax
import jax.numpy as jnp
import numpy as np
import pytest

from vaedlm import ad
from vaedlm.networks import (
    FourierFeatureMap,
    ModelSpec,
    ModifiedMlp,
    VariationalOutput,
    decode,
    fourier_embed,
    init_mlp,
    init_model,
    lambda_net,
    load_checkpoint,
    manifold_encode,
    metric_net,
    modified_mlp_forward,
    predict,
    reparameterize,
    save_checkpoint,
    variational_encode,
)

from conftest import central_diff, rel_err


def zeroed(params, **overrides):
    p = jax.tree_util.tree_map(jnp.zeros_like, params)
    p.update({k: jnp.asarray(v) for k, v in overrides.items()})
    return p


def reference_forward(params, x, act=np.tanh):
    """Straight numpy transcription of the gated recursion."""
    P = jax.tree_util.tree_map(np.asarray, params)
    U = act(x @ P["WU1"] + P["bU1"])
    V = act(x @ P["WU2"] + P["bU2"])
    H = act(x @ P["WH1"] + P["bH1"])
    for W, b in zip(P["WZ"], P["bZ"]):
        Z = act(H @ W + b)
        H = (1 - Z) * U + Z * V
    return H @ P["W"] + P["b"]


def test_depth_must_be_positive():
    with pytest.raises(ValueError):
        ModifiedMlp(2, 2, depth=0)


def test_zero_weights_return_final_bias(rng):
    arch = ModifiedMlp(5, 3, width=8, depth=3)
    b = rng.normal(size=3)
    p = zeroed(init_mlp(arch, rng), b=b)
    np.testing.assert_array_equal(modified_mlp_forward(arch, p, jnp.asarray(rng.normal(size=5))), b)


def test_equal_branches_make_output_independent_of_gates(rng):
    arch = ModifiedMlp(4, 2, width=8, depth=3)
    p = init_mlp(arch, rng)
    p["WU2"], p["bU2"] = p["WU1"], p["bU1"]
    x = jnp.asarray(rng.normal(size=4))
    base = modified_mlp_forward(arch, p, x)
    q = dict(p, WZ=[jnp.asarray(rng.normal(size=(8, 8))) for _ in range(3)])
    np.testing.assert_allclose(modified_mlp_forward(arch, q, x), base, atol=1e-13)


@pytest.mark.parametrize("act", ["tanh", "gelu"])
def test_forward_matches_reference(rng, act):
    from scipy.special import erf

    arch = ModifiedMlp(6, 4, width=16, depth=4, activation=act)
    p = init_mlp(arch, rng)
    for k in ("bU1", "bU2", "bH1", "b"):
        p[k] = jnp.asarray(rng.normal(size=p[k].shape))
    x = rng.normal(size=6)
    fn = np.tanh if act == "tanh" else (lambda y: 0.5 * y * (1 + erf(y / np.sqrt(2))))
    np.testing.assert_allclose(modified_mlp_forward(arch, p, jnp.asarray(x)),
                               reference_forward(p, x, fn), atol=1e-12)


def test_input_size_checked(rng):
    arch = ModifiedMlp(3, 2, width=4, depth=1)
    with pytest.raises(ad.ShapeError):
        modified_mlp_forward(arch, init_mlp(arch, rng), jnp.ones(4))


def test_fourier_at_zero_and_zero_b(rng):
    ff = FourierFeatureMap.create(5, 4.0, rng)
    expect = np.r_[np.ones(5), np.zeros(5)]
    np.testing.assert_array_equal(fourier_embed(ff, 0.0), expect)
    zero = FourierFeatureMap(B=(0.0,) * 5, sigma=1.0)
    for t in (0.1, 0.7, 3.0):
        np.testing.assert_array_equal(fourier_embed(zero, t), expect)


def test_fourier_periodic():
    b0 = 2.7
    ff = FourierFeatureMap(B=(b0,), sigma=1.0)
    for t in (0.13, 0.5, 0.91):
        np.testing.assert_allclose(fourier_embed(ff, t), fourier_embed(ff, t + 1 / b0), atol=1e-12)


def test_fourier_is_frozen(rng):
    ff = FourierFeatureMap.create(3, 1.0, rng)
    with pytest.raises(Exception):
        ff.B = (0.0, 0.0, 0.0)


def test_variational_zero_weights(rng):
    arch = ModifiedMlp(10, 6, width=8, depth=2)
    b = rng.normal(size=6)
    v = variational_encode(arch, zeroed(init_mlp(arch, rng), b=b), jnp.ones(10))
    np.testing.assert_array_equal(v.mu, b[:3])
    np.testing.assert_allclose(v.sigma, np.log1p(np.exp(b[3:])) + 1e-6, rtol=1e-14)


def test_sigma_always_positive(rng):
    arch = ModifiedMlp(10, 8, width=16, depth=2)
    p = init_mlp(arch, rng)
    p["W"] = p["W"] * 50.0
    X = jnp.asarray(rng.normal(scale=5.0, size=(10_000, 10)))
    sig = jax.vmap(lambda x: variational_encode(arch, p, x).sigma)(X)
    assert float(jnp.min(sig)) > 0


def test_mu_norm_gradient_matches_fd(rng):
    arch = ModifiedMlp(7, 4, width=8, depth=2, activation="gelu")
    p = init_mlp(arch, rng)
    x = jnp.asarray(rng.normal(size=7))

    def loss(w):
        return jnp.sum(variational_encode(arch, dict(p, WH1=jnp.asarray(w)), x).mu ** 2)

    g = jax.grad(loss)(p["WH1"])
    assert rel_err(g, central_diff(loss, np.asarray(p["WH1"]))) < 1e-5


def test_reparameterize_limits(rng):
    mu = jnp.asarray(rng.normal(size=4))
    v = VariationalOutput(mu, jnp.asarray(rng.uniform(0.1, 2, size=4)))
    np.testing.assert_array_equal(reparameterize(v, jnp.zeros(4)), mu)
    np.testing.assert_array_equal(reparameterize(VariationalOutput(mu, jnp.zeros(4)),
                                                 jnp.asarray(rng.normal(size=4))), mu)


def test_reparameterize_monte_carlo(rng):
    mu = np.array([0.3, -1.2])
    sig = np.array([0.5, 2.0])
    n = 1_000_000
    eps = rng.standard_normal((n, 2))
    u = np.asarray(jax.vmap(lambda e: reparameterize(VariationalOutput(jnp.asarray(mu), jnp.asarray(sig)), e))(eps))
    se_mean = sig / np.sqrt(n)
    se_std = sig / np.sqrt(2 * n)
    assert np.all(np.abs(u.mean(0) - mu) < 4 * se_mean)
    assert np.all(np.abs(u.std(0) - sig) < 4 * se_std)


def test_manifold_encode_deterministic_and_sized(rng):
    arch = ModifiedMlp(4, 5, width=8, depth=2)
    p = init_mlp(arch, rng)
    u = jnp.asarray(rng.normal(size=3))
    a = manifold_encode(arch, p, None, u, 0.4)
    np.testing.assert_array_equal(a, manifold_encode(arch, p, None, u, 0.4))
    assert a.shape == (5,)


def test_manifold_encode_fourier_composition(rng):
    """Fourier path equals the plain net applied to explicitly concatenated features."""
    q, k = 32, 6
    ff = FourierFeatureMap.create(q, 4.0, rng)
    arch = ModifiedMlp(k + 2 * q, k + 1, width=16, depth=3)
    p = init_mlp(arch, rng)
    u = jnp.asarray(rng.normal(size=k))
    t = 0.61
    arg = 2 * np.pi * np.asarray(ff.B) * t
    feats = np.r_[np.asarray(u), np.cos(arg), np.sin(arg)]
    np.testing.assert_allclose(manifold_encode(arch, p, ff, u, t),
                               modified_mlp_forward(arch, p, jnp.asarray(feats)), atol=1e-13)


def test_decode_zero_weights_and_size(rng):
    arch = ModifiedMlp(7, 201, width=8, depth=2)
    b = rng.normal(size=201)
    out = decode(arch, zeroed(init_mlp(arch, rng), b=b), jnp.ones(7))
    np.testing.assert_array_equal(out, b)
    for variant in ("vae", "vae_extended", "vae_dlm"):
        spec = ModelSpec(variant, 201, 2, 3, width=8, depth=1)
        pr = predict(spec, init_model(spec, 0), jnp.ones(201), 0.3, jnp.zeros(2))
        assert pr.shape == (201,)


def test_decode_gradient_matches_fd(rng):
    arch = ModifiedMlp(3, 12, width=8, depth=2)
    p = init_mlp(arch, rng)
    z = jnp.asarray(rng.normal(size=3))
    target = rng.normal(size=12)

    def loss(w):
        return jnp.mean((decode(arch, dict(p, WU1=jnp.asarray(w)), z) - target) ** 2)

    g = jax.grad(loss)(p["WU1"])
    assert rel_err(g, central_diff(loss, np.asarray(p["WU1"]))) < 1e-5


def test_metric_net_identity_raw(rng):
    arch = ModifiedMlp(4, 9, width=8, depth=2)
    p = zeroed(init_mlp(arch, rng), b=np.eye(3).ravel())
    np.testing.assert_array_equal(metric_net(arch, p, jnp.ones(3), 0.2), np.eye(3))


def test_metric_and_lambda_psd_and_symmetric(rng):
    k = 4
    g_arch = ModifiedMlp(k + 1, k * k, width=16, depth=2, activation="gelu")
    gp = init_mlp(g_arch, rng)
    for _ in range(50):
        u = jnp.asarray(rng.normal(size=k))
        t = float(rng.uniform())
        g = np.asarray(metric_net(g_arch, gp, u, t))
        assert np.max(np.abs(g - g.T)) < 1e-12
        assert np.linalg.eigvalsh(g).min() >= -1e-10
        lam = np.asarray(lambda_net(g_arch, gp, u, t))
        assert np.linalg.eigvalsh(lam).min() >= -1e-10


def test_lambda_zero_output(rng):
    arch = ModifiedMlp(4, 9, width=8, depth=2)
    p = zeroed(init_mlp(arch, rng))
    np.testing.assert_array_equal(lambda_net(arch, p, jnp.ones(3), 0.5), np.zeros((3, 3)))


def test_nonlinear_lambda_ablation(rng):
    k = 3
    arch = ModifiedMlp(k + 1 + k * k, k * k, width=8, depth=2)
    p = init_mlp(arch, rng)
    u = jnp.asarray(rng.normal(size=k))
    g1 = jnp.eye(k)
    g2 = g1 + 0.3 * jnp.ones((k, k))
    assert not np.allclose(lambda_net(arch, p, u, 0.1, g1, True), lambda_net(arch, p, u, 0.1, g2, True))
    # zero the rows that read the g block: the flow no longer depends on g
    q = dict(p)
    for key in ("WU1", "WU2", "WH1"):
        q[key] = p[key].at[k + 1:].set(0.0)
    np.testing.assert_array_equal(lambda_net(arch, q, u, 0.1, g1, True),
                                  lambda_net(arch, q, u, 0.1, g2, True))
    with pytest.raises(ValueError):
        lambda_net(arch, p, u, 0.1, None, True)


def test_shared_seed_shares_backbone():
    a = ModelSpec("vae_dlm", 201, 6, 7, width=8, depth=1)
    b = ModelSpec("vae_extended", 201, 6, 7, width=8, depth=1)
    pa, pb = init_model(a, 3), init_model(b, 3)
    for name in ("u", "enc", "dec"):
        for x, y in zip(jax.tree_util.tree_leaves(pa[name]), jax.tree_util.tree_leaves(pb[name])):
            np.testing.assert_array_equal(x, y)


def test_identity_metric_init():
    spec = ModelSpec("vae_dlm", 16, 3, 4, width=8, depth=1, metric_init="identity")
    p = init_model(spec, 0)
    np.testing.assert_array_equal(metric_net(spec.archs()["g"], p["g"], jnp.ones(3), 0.7), np.eye(3))


def test_checkpoint_round_trip(tmp_path):
    ff = FourierFeatureMap(B=(1.5, -0.5), sigma=1.0)
    spec = ModelSpec("vae_dlm", 16, 3, 4, width=8, depth=2, fourier=ff)
    p = init_model(spec, 9)
    path = tmp_path / "c.bin"
    save_checkpoint(path, spec, p, {"opt": {"m": p}}, {"step": 4})
    spec2, p2, extra, meta = load_checkpoint(path)
    assert spec2 == spec and meta["step"] == 4
    for x, y in zip(jax.tree_util.tree_leaves(p), jax.tree_util.tree_leaves(p2)):
        np.testing.assert_array_equal(x, y)
    assert jax.tree_util.tree_structure(p) == jax.tree_util.tree_structure(p2)
    assert len(jax.tree_util.tree_leaves(extra["opt"]["m"])) == len(jax.tree_util.tree_leaves(p))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(path)
