import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ivgae import tensor as T
from ivgae.errors import ConfigError
from ivgae.vgae import (
    FeatureDecoder,
    GCNEncoder,
    GaussianLatent,
    SampleAdjacency,
    decode_adjacency,
    decode_features,
    elbo,
    gcn_encode,
    kl_divergence,
    positive_weight,
    reconstruction_loss,
)


def gen(seed=0):
    return np.random.default_rng(seed)


def identity_encoder(d: int) -> GCNEncoder:
    enc = GCNEncoder(d, gen(), hidden=d, latent=d)
    for w in enc.parameters():
        w.data[...] = np.eye(d)
    return enc


class TestEncode:
    def test_identity_chain(self):
        P = gen().normal(size=(4, 3))
        lat = gcn_encode(T.Tensor(P), T.Tensor(np.eye(4)), identity_encoder(3), None)
        np.testing.assert_array_equal(lat.mu.data, np.maximum(P, 0))

    def test_isolated_identical_samples(self):
        P = np.vstack([np.ones(3), np.ones(3), gen().normal(size=3)])
        enc = GCNEncoder(3, gen(1), hidden=5, latent=2)
        lat = gcn_encode(T.Tensor(P), T.Tensor(np.eye(3)), enc, None)
        np.testing.assert_array_equal(lat.mu.data[0], lat.mu.data[1])

    def test_kl_gradient_w0_fd(self):
        g = gen(2)
        adj = SampleAdjacency.random(4, g, std=1.0)
        P = T.Tensor(g.normal(size=(4, 3)))
        enc = GCNEncoder(3, g, hidden=5, latent=2)
        a_n = adj.normalized().data
        f = lambda: (lambda lat: kl_divergence(lat.mu, lat.log_sigma))(gcn_encode(P, T.Tensor(a_n), enc, None))  # noqa: E731
        assert T.grad_check(f, [enc.w0], step=1e-5, tol=1e-3, max_elems=None).passed

    def test_reparameterization_affine_and_both_heads(self):
        g = gen(3)
        P = T.Tensor(g.normal(size=(5, 3)))
        enc = GCNEncoder(3, g, hidden=4, latent=2)
        a_n = SampleAdjacency.random(5, g, std=1.0).normalized().detach()
        eps = g.standard_normal((5, 2))
        lat = gcn_encode(P, a_n, enc, eps)
        np.testing.assert_allclose(lat.z.data, lat.mu.data + np.exp(lat.log_sigma.data) * eps, atol=0)
        w = g.normal(size=(5, 2))
        f = lambda: T.sum(T.mul(gcn_encode(P, a_n, enc, eps).z, T.Tensor(w)))  # noqa: E731
        assert T.grad_check(f, [enc.w_mu, enc.w_sigma], step=1e-5, tol=1e-4, max_elems=None).passed
        T.backward(f())
        assert np.any(enc.w_mu.grad != 0) and np.any(enc.w_sigma.grad != 0)


class TestDecodeAdjacency:
    def test_zero_latents(self):
        assert np.all(decode_adjacency(T.Tensor(np.zeros((4, 3)))).data == 0.5)

    def test_large_dot_no_overflow(self):
        z = np.zeros((2, 3))
        z[:, 0] = 10
        a = decode_adjacency(T.Tensor(z)).data
        assert np.isfinite(a).all() and a[0, 1] == pytest.approx(1.0)

    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 5)), elements=st.floats(-5, 5)))
    def test_symmetry_bit_exact(self, z):
        a = decode_adjacency(T.Tensor(z)).data
        assert np.max(np.abs(a - a.T)) == 0.0


class TestDecodeFeatures:
    def test_x_block_only(self):
        g = gen(4)
        dec = FeatureDecoder(3, 2, g, hidden=4)
        dec.theta.data[3:] = 0.0
        x = g.normal(size=(5, 3))
        out = decode_features(T.Tensor(g.normal(size=(5, 2))), T.Tensor(np.eye(5)), T.Tensor(x), dec)
        np.testing.assert_allclose(out.data, np.maximum(x @ dec.theta.data[:3] + dec.theta_b.data, 0))

    def test_neighbour_term_linear_in_z(self):
        g = gen(5)
        dec = FeatureDecoder(3, 2, g, hidden=4)
        dec.theta.data[:3] = 0.0
        z = g.normal(size=(5, 2))
        a_n = T.Tensor(SampleAdjacency.random(5, g, std=1.0).normalized().data)
        x = T.Tensor(np.zeros((5, 3)))

        def pre(zz):
            return (a_n.data @ (zz @ dec.z_lift.data)) @ dec.theta.data[3:]

        np.testing.assert_allclose(pre(2 * z), 2 * pre(z), atol=1e-12)
        with T.no_grad():
            out1 = decode_features(T.Tensor(z), a_n, x, dec).data
        np.testing.assert_allclose(out1, np.maximum(pre(z) + dec.theta_b.data, 0), atol=1e-12)

    def test_theta_fd(self):
        g = gen(6)
        dec = FeatureDecoder(3, 2, g, hidden=4)
        z, x = T.Tensor(g.normal(size=(4, 2))), T.Tensor(g.normal(size=(4, 3)))
        a_n = T.Tensor(SampleAdjacency.random(4, g, std=1.0).normalized().data)
        w = g.normal(size=(4, 4))
        f = lambda: T.sum(T.mul(decode_features(z, a_n, x, dec), T.Tensor(w)))  # noqa: E731
        assert T.grad_check(f, dec.parameters(), step=1e-5, tol=1e-3, max_elems=None).passed


class TestElbo:
    def test_prior_match(self):
        assert kl_divergence(T.Tensor(np.zeros((3, 2))), T.Tensor(np.zeros((3, 2)))).item() == 0.0

    def test_unit_mean(self):
        assert kl_divergence(T.Tensor([[1.0]]), T.Tensor([[0.0]])).item() == pytest.approx(0.5)

    @given(
        arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
        arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
    )
    def test_kl_non_negative(self, mu, log_sigma):
        kl = kl_divergence(T.Tensor(mu), T.Tensor(log_sigma)).item()
        assert kl >= -1e-10
        if np.all(mu == 0) and np.all(log_sigma == 0):
            assert abs(kl) <= 1e-10

    def test_kl_equality_case_only_at_prior(self):
        assert kl_divergence(T.Tensor([[0.0]]), T.Tensor([[1e-3]])).item() > 0

    def test_recon_entropy_floor(self):
        # logits hitting the target exactly: loss is the mean weighted binary entropy
        def floor(eps):
            t = np.array([[eps, 1 - eps], [1 - eps, eps]])
            logits = T.Tensor(np.log(t / (1 - t)))
            return reconstruction_loss(logits, t, 1.0).item(), float(
                -np.mean(t * np.log(t) + (1 - t) * np.log(1 - t))
            )

        values = []
        for eps in (0.3, 0.1, 0.01):
            got, want = floor(eps)
            assert got == pytest.approx(want, rel=1e-12)
            values.append(got)
        assert values[0] > values[1] > values[2]

    def test_pos_weight(self):
        assert positive_weight(np.array([1.0, 0.0, 0.0, 0.0])) == 3.0
        with pytest.raises(ConfigError):
            reconstruction_loss(T.Tensor(np.zeros(2)), np.zeros(2), 0.0)

    def test_target_range(self):
        lat = GaussianLatent(T.Tensor(np.zeros((2, 1))), T.Tensor(np.zeros((2, 1))), T.Tensor(np.zeros((2, 1))))
        with pytest.raises(ConfigError):
            elbo(lat, np.full((2, 2), 1.5))

    def test_kl_weight(self):
        lat = GaussianLatent(T.Tensor([[1.0]]), T.Tensor([[0.0]]), T.Tensor([[1.0]]))
        assert elbo(lat, np.full((1, 1), 0.5), kl_weight=0.0).kl.item() == 0.0


class TestAdjacency:
    def test_weights_symmetric_zero_diagonal(self):
        adj = SampleAdjacency(gen(7).normal(size=(6, 6)))
        w = adj.weights().data
        assert np.array_equal(w, w.T) and np.all(np.diag(w) == 0)

    @given(st.integers(0, 1000))
    def test_normalization_matches_dense(self, seed):
        adj = SampleAdjacency.random(7, gen(seed), std=2.0)
        a = adj.weights().data
        b = a + np.eye(7)
        d = 1.0 / np.sqrt(b.sum(axis=1))
        np.testing.assert_allclose(adj.normalized().data, d[:, None] * b * d[None, :], rtol=0, atol=1e-12)

    def test_knn_init(self):
        x = np.array([[0.0], [0.1], [5.0], [5.1]])
        adj = SampleAdjacency.from_knn(x, gen(), k=1)
        w = adj.weights().data
        assert w[0, 1] > 0.8 and w[0, 2] < 0.2
