import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from hdpl import autodiff as ad
from hdpl.autodiff import Tensor
from hdpl.gradcheck import check_function
from hdpl.hdpl_op import (
    LN2,
    HdplLayer,
    block_diag_forward,
    bounded_kl,
    count_hdpl_params,
    expand_blocks,
    hdpl_forward,
    init_hdpl,
    kl_elements,
    reparameterize,
    vae_encode,
)
from hdpl.rng import RngState


def make_layer(w_blocks, w_mu, w_logvar, w_dec, beta=1.0, stream=0):
    w_blocks, w_mu, w_logvar, w_dec = (np.asarray(a, dtype=np.float64) for a in (w_blocks, w_mu, w_logvar, w_dec))
    k, bo, bi = w_blocks.shape
    return HdplLayer(
        d_in=k * bi,
        d_out=k * bo,
        k_groups=k,
        rank=w_mu.shape[0],
        beta=beta,
        w_blocks=Tensor(w_blocks, requires_grad=True),
        w_mu=Tensor(w_mu, requires_grad=True),
        w_logvar=Tensor(w_logvar, requires_grad=True),
        w_dec=Tensor(w_dec, requires_grad=True),
        stream=stream,
    )


def random_layer(d_in, d_out, k, r, seed=0, beta=0.5, scale=1.0):
    g = np.random.default_rng(seed)
    return make_layer(
        g.normal(size=(k, d_out // k, d_in // k)) * scale,
        g.normal(size=(r, d_in)) * scale,
        g.normal(size=(r, d_in)) * scale,
        g.normal(size=(d_out, r)) * scale,
        beta=beta,
    )


class TestBlockDiag:
    def test_identity_blocks(self):
        layer = make_layer([np.eye(2), np.eye(2)], np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((4, 1)))
        out = block_diag_forward(layer, Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]])))
        assert out.data.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_scaled_second_block(self):
        layer = make_layer([np.eye(2), 2 * np.eye(2)], np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((4, 1)))
        out = block_diag_forward(layer, Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]])))
        assert out.data.ravel().tolist() == [1.0, 2.0, 6.0, 8.0]

    @settings(max_examples=25, deadline=None)
    @given(k=st.sampled_from([1, 2, 4]), bi=st.integers(2, 4), bo=st.integers(1, 4), seed=st.integers(0, 1000))
    def test_matches_expanded_dense_matrix(self, k, bi, bo, seed):
        g = np.random.default_rng(seed)
        layer = make_layer(g.normal(size=(k, bo, bi)), np.zeros((1, k * bi)), np.zeros((1, k * bi)), np.zeros((k * bo, 1)))
        # ints keep every product and sum exact, so the two paths agree bit for bit
        x = g.integers(-4, 5, size=(2, 3, k * bi)).astype(np.float64)
        layer.w_blocks.data[...] = np.round(layer.w_blocks.data * 4)
        out = block_diag_forward(layer, Tensor(x)).data
        assert np.array_equal(out, x @ expand_blocks(layer.w_blocks.data).T)
        # and with real-valued weights, up to summation order
        y = g.normal(size=x.shape)
        np.testing.assert_allclose(block_diag_forward(layer, Tensor(y)).data, y @ expand_blocks(layer.w_blocks.data).T, rtol=1e-12, atol=1e-12)

    def test_k1_is_plain_matmul(self):
        g = np.random.default_rng(1)
        w = g.normal(size=(5, 6))
        layer = make_layer(w[None], np.zeros((2, 6)), np.zeros((2, 6)), np.zeros((5, 2)))
        x = g.normal(size=(2, 3, 6))
        assert np.array_equal(block_diag_forward(layer, Tensor(x)).data, ad.linear(Tensor(x), Tensor(w)).data)
        np.testing.assert_allclose(block_diag_forward(layer, Tensor(x)).data, x @ w.T, rtol=1e-12)

    def test_shape_mismatch(self):
        layer = random_layer(4, 4, 2, 1)
        with pytest.raises(ad.ShapeError):
            block_diag_forward(layer, Tensor(np.zeros((1, 1, 3))))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), group=st.integers(0, 3))
    def test_block_locality(self, seed, group):
        layer = random_layer(8, 12, 4, 2, seed=seed)
        layer.w_dec.data[...] = 0.0
        g = np.random.default_rng(seed + 1)
        x = g.normal(size=(1, 2, 8))
        x2 = x.copy()
        x2[..., 2 * group : 2 * group + 2] += g.normal(size=2)
        y1 = hdpl_forward(layer, Tensor(x), None, training=False).y.data
        y2 = hdpl_forward(layer, Tensor(x2), None, training=False).y.data
        changed = np.any(y1 != y2, axis=(0, 1))
        expected = np.zeros(12, dtype=bool)
        expected[3 * group : 3 * group + 3] = True
        assert np.array_equal(changed, expected)


class TestEncode:
    def test_zero_input(self):
        layer = random_layer(6, 6, 2, 3)
        mu, logvar = vae_encode(layer, Tensor(np.zeros((1, 2, 6))))
        assert not mu.data.any() and not logvar.data.any()
        assert mu.shape == (1, 2, 3)

    def test_basis_vector(self):
        w_mu = np.zeros((3, 6))
        w_mu[:, :3] = np.eye(3)
        layer = make_layer(np.zeros((2, 3, 3)), w_mu, np.zeros((3, 6)), np.zeros((6, 3)))
        e1 = np.zeros((1, 1, 6))
        e1[..., 0] = 1.0
        mu, _ = vae_encode(layer, Tensor(e1))
        assert mu.data.ravel().tolist() == [1.0, 0.0, 0.0]

    def test_matches_matmul(self):
        layer = random_layer(8, 8, 2, 3, seed=4)
        x = np.random.default_rng(5).normal(size=(2, 5, 8))
        mu, logvar = vae_encode(layer, Tensor(x))
        np.testing.assert_allclose(mu.data, x @ layer.w_mu.data.T, rtol=1e-6)
        np.testing.assert_allclose(logvar.data, x @ layer.w_logvar.data.T, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            vae_encode(random_layer(4, 4, 2, 1), Tensor(np.zeros((1, 5))))


class TestReparameterize:
    def test_eval_returns_mu(self):
        mu = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
        z = reparameterize(mu, Tensor(np.ones((2, 3, 4))), RngState(1, 2), training=False)
        assert np.array_equal(z.data, mu.data)

    def test_eval_needs_no_rng(self):
        mu = Tensor(np.ones((2, 2)))
        assert reparameterize(mu, mu, None, training=False) is mu

    def test_vanishing_variance(self):
        mu = np.random.default_rng(0).normal(size=(2, 3, 4))
        z = reparameterize(Tensor(mu), Tensor(np.full(mu.shape, -60.0)), RngState(7, 0), training=True)
        assert np.max(np.abs(z.data - mu)) < 1e-9

    def test_replays_generator(self):
        rng = RngState(11, 5)
        zeros = Tensor(np.zeros((2, 3, 4)))
        z = reparameterize(zeros, zeros, rng, training=True, stream=3)
        assert np.array_equal(z.data, RngState(11, 5).normal(3, (2, 3, 4)))

    def test_training_without_rng(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            reparameterize(t, t, None, training=True)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            reparameterize(Tensor(np.zeros(3)), Tensor(np.zeros(4)), None, training=False)


class TestBoundedKL:
    @pytest.mark.parametrize(
        "mu,expected",
        [(0.0, 0.0), (1.0, 0.5), (2.0, math.log(2.0))],
    )
    def test_hand_cases(self, mu, expected):
        out = bounded_kl(Tensor(np.array([mu])), Tensor(np.array([0.0])), beta=1.0).item()
        assert out == pytest.approx(expected, abs=1e-9)

    def test_beta_scales(self):
        out = bounded_kl(Tensor(np.array([1.0])), Tensor(np.array([0.0])), beta=0.001).item()
        assert out == pytest.approx(0.0005, abs=1e-12)

    def test_ln2_constant(self):
        assert LN2 == pytest.approx(0.6931471805599453, abs=1e-15)

    def test_elements_match_textbook_form(self):
        g = np.random.default_rng(0)
        mu, lv = g.normal(size=50), g.normal(size=50)
        textbook = -0.5 * (1 + lv - mu**2 - np.exp(lv))
        np.testing.assert_allclose(kl_elements(Tensor(mu), Tensor(lv)).data, textbook, rtol=1e-10, atol=1e-14)

    @settings(max_examples=200)
    @given(
        mu=st.lists(st.floats(-5, 5), min_size=1, max_size=12),
        lv=st.lists(st.floats(-5, 5), min_size=12, max_size=12),
        beta=st.floats(0.0, 2.0),
    )
    def test_bounded(self, mu, lv, beta):
        mu = np.array(mu)
        lv = np.array(lv[: mu.size])
        out = bounded_kl(Tensor(mu), Tensor(lv), beta).item()
        assert 0.0 <= out <= beta * LN2 * (1 + 1e-12)

    def test_token_granularity_clamps_the_sum(self):
        mu = Tensor(np.array([[1.0, 1.0], [0.0, 0.0]]))
        lv = Tensor(np.zeros((2, 2)))
        # per token: KL sums are 1.0 (clamped to ln 2) and 0.0
        assert bounded_kl(mu, lv, 1.0, "token").item() == pytest.approx(LN2 / 2, abs=1e-12)
        assert bounded_kl(mu, lv, 1.0, "element").item() == pytest.approx(0.25, abs=1e-12)

    def test_unknown_granularity(self):
        with pytest.raises(ValueError):
            bounded_kl(Tensor(np.zeros(2)), Tensor(np.zeros(2)), 1.0, "row")

    def test_gradient_zero_where_clamped(self):
        mu = Tensor(np.array([3.0, 0.5]), requires_grad=True)
        lv = Tensor(np.zeros(2), requires_grad=True)
        ad.backward(bounded_kl(mu, lv, 1.0))
        assert mu.grad[0] == 0.0
        assert mu.grad[1] == pytest.approx(0.25)


class TestForward:
    def test_zero_decoder_leaves_local_path(self):
        layer = random_layer(8, 4, 2, 3, seed=2)
        layer.w_dec.data[...] = 0.0
        x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 8)))
        local = block_diag_forward(layer, x).data
        for training in (False, True):
            y = hdpl_forward(layer, x, RngState(1, 0), training=training).y.data
            assert np.array_equal(y, local)

    def test_zero_blocks_eval_is_global_path(self):
        layer = random_layer(8, 4, 2, 3, seed=2)
        layer.w_blocks.data[...] = 0.0
        x = np.random.default_rng(3).normal(size=(2, 3, 8))
        y = hdpl_forward(layer, Tensor(x), None, training=False).y.data
        mu = x @ layer.w_mu.data.T
        expected = (mu / (1 + np.exp(-mu))) @ layer.w_dec.data.T
        np.testing.assert_allclose(y, expected, rtol=1e-12, atol=1e-14)

    def test_dense_equivalence(self):
        g = np.random.default_rng(8)
        w = g.normal(size=(6, 6))
        layer = make_layer(w[None].copy(), g.normal(size=(2, 6)), g.normal(size=(2, 6)), np.zeros((6, 2)))
        x_np = g.normal(size=(2, 3, 6))
        weights = Tensor(g.normal(size=(2, 3, 6)))
        x1 = Tensor(x_np.copy(), requires_grad=True)
        out = hdpl_forward(layer, x1, RngState(0, 0), training=True)
        ad.backward(ad.sum_(out.y * weights))
        x2 = Tensor(x_np.copy(), requires_grad=True)
        dense_w = Tensor(w.copy(), requires_grad=True)
        ref = ad.linear(x2, dense_w)
        ad.backward(ad.sum_(ref * weights))
        assert np.array_equal(out.y.data, ref.data)
        np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-6)
        np.testing.assert_allclose(layer.w_blocks.grad[0], dense_w.grad, rtol=1e-6)

    def test_eval_is_deterministic_and_aux_free(self):
        layer = random_layer(8, 8, 4, 2, seed=5)
        x = Tensor(np.random.default_rng(6).normal(size=(2, 4, 8)))
        a = hdpl_forward(layer, x, RngState(1, 0), training=False)
        b = hdpl_forward(layer, x, RngState(2, 9), training=False)
        assert np.array_equal(a.y.data, b.y.data)
        assert a.aux_loss.item() == 0.0
        assert np.array_equal(a.z.data, a.mu.data)

    def test_training_output_shapes_and_bound(self):
        layer = random_layer(8, 12, 4, 3, seed=5, beta=0.01)
        out = hdpl_forward(layer, Tensor(np.random.default_rng(6).normal(size=(2, 4, 8))), RngState(1, 0), training=True)
        assert out.y.shape == (2, 4, 12)
        assert out.mu.shape == out.logvar.shape == out.z.shape == (2, 4, 3)
        assert 0.0 < out.aux_loss.item() <= 0.01 * LN2

    def test_training_noise_depends_on_counter(self):
        layer = random_layer(8, 8, 2, 3, seed=5)
        x = Tensor(np.random.default_rng(6).normal(size=(1, 2, 8)))
        a = hdpl_forward(layer, x, RngState(1, 0), training=True).y.data
        b = hdpl_forward(layer, x, RngState(1, 0), training=True).y.data
        c = hdpl_forward(layer, x, RngState(1, 1), training=True).y.data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_override_replaces_latent(self):
        layer = random_layer(8, 8, 2, 3, seed=5)
        x = Tensor(np.random.default_rng(6).normal(size=(1, 2, 8)))
        base = hdpl_forward(layer, x, None, training=False)
        same = hdpl_forward(layer, x, None, training=False, z_override=base.mu.data)
        assert np.array_equal(base.y.data, same.y.data)
        with pytest.raises(ad.ShapeError):
            hdpl_forward(layer, x, None, training=False, z_override=np.zeros((1, 2, 4)))


class TestGradients:
    def _fn(self, x_np, objective, training=True):
        def fn(w_blocks, w_mu, w_logvar, w_dec):
            layer = HdplLayer(8, 4, 2, 3, 0.5, w_blocks, w_mu, w_logvar, w_dec, stream=1)
            out = hdpl_forward(layer, Tensor(x_np), RngState(3, 4), training=training)
            return out.aux_loss if objective == "aux" else out.y

        return fn

    def _weights(self, seed, scale=1.0):
        g = np.random.default_rng(seed)
        return [g.normal(size=s) * scale for s in [(2, 2, 4), (3, 8), (3, 8), (4, 3)]]

    @pytest.mark.parametrize("objective", ["y", "aux"])
    def test_all_weights_match_finite_differences(self, objective):
        x = np.random.default_rng(1).normal(size=(2, 3, 8)) * 0.3
        errs = check_function(self._fn(x, objective), self._weights(0, 0.5))
        assert max(errs) < 1e-4

    def test_through_active_clamp(self):
        # large encoder weights push some elements past ln 2, others stay below
        x = np.random.default_rng(1).normal(size=(2, 3, 8))
        w = self._weights(2, 0.4)
        w[1] = w[1] * 3.0
        layer = make_layer(*w)
        mu, lv = vae_encode(layer, Tensor(x))
        kl = kl_elements(mu, lv).data
        assert (kl > LN2).any() and (kl < LN2).any()
        assert max(check_function(self._fn(x, "aux"), w)) < 1e-4

    def test_eval_mode(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 8)) * 0.3
        assert max(check_function(self._fn(x, "y", training=False), self._weights(3, 0.5))) < 1e-4


class TestCounts:
    def test_examples(self):
        assert count_hdpl_params(512, 512, 8, 128) == 229_376
        assert count_hdpl_params(512, 2048, 8, 128) == 524_288

    @given(d=st.integers(2, 300), r=st.integers(1, 299))
    def test_k1_specialization(self, d, r):
        assume(r < d)
        assert count_hdpl_params(d, d, 1, r) == d * d + 3 * d * r

    @settings(max_examples=50, deadline=None)
    @given(
        k=st.integers(1, 8),
        bi=st.integers(1, 12),
        bo=st.integers(1, 12),
        r_frac=st.floats(0.0, 0.999),
        seed=st.integers(0, 2**32),
    )
    def test_matches_stored_floats(self, k, bi, bo, r_frac, seed):
        d_in, d_out = k * bi, k * bo
        assume(d_in >= 2)
        r = 1 + int(r_frac * (d_in - 1))
        layer = init_hdpl(d_in, d_out, k, r, 0.001, RngState(seed))
        assert layer.num_params() == count_hdpl_params(d_in, d_out, k, r)

    @pytest.mark.parametrize("dims", [(6, 8, 4, 2), (8, 6, 4, 2), (8, 8, 2, 0), (8, 8, 2, 8)])
    def test_invalid(self, dims):
        with pytest.raises(ValueError):
            count_hdpl_params(*dims)


class TestInit:
    def test_deterministic(self):
        a = init_hdpl(16, 32, 4, 4, 0.001, RngState(3), stream=2)
        b = init_hdpl(16, 32, 4, 4, 0.001, RngState(3), stream=2)
        for name, p in a.parameters().items():
            assert np.array_equal(p.data, b.parameters()[name].data)

    def test_seeds_and_streams_differ(self):
        a = init_hdpl(16, 32, 4, 4, 0.001, RngState(3))
        assert not np.array_equal(a.w_mu.data, init_hdpl(16, 32, 4, 4, 0.001, RngState(4)).w_mu.data)
        assert not np.array_equal(a.w_mu.data, init_hdpl(16, 32, 4, 4, 0.001, RngState(3), stream=1).w_mu.data)

    def test_scale(self):
        layer = init_hdpl(512, 512, 8, 128, 0.001, RngState(0))
        assert layer.w_blocks.data.size >= 10_000
        target = 1 / math.sqrt(512)
        assert abs(layer.w_blocks.data.std() / target - 1) < 0.05
        assert abs(layer.w_mu.data.std() / target - 1) < 0.05
        assert abs(layer.w_dec.data.std() * math.sqrt(128) - 1) < 0.05
        assert layer.w_blocks.dtype == np.float32
        assert layer.w_blocks.shape == (8, 64, 64)
