import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from envpredict import autodiff as ad
from envpredict.autodiff import Tensor
from envpredict.losses import CGMParams, cgm_nll, cgm_sample, mse_loss, sharpened_weights, softmax

from conftest import check_gradients

# multiples of 1/64 keep squared differences clear of underflow
finite = st.integers(-3200, 3200).map(lambda v: v / 64.0)


def mixture(logits, means, scales):
    return CGMParams(np.asarray(logits, float), np.asarray(means, float), np.asarray(scales, float))


class TestMSE:
    def test_examples(self, rng):
        x = rng.normal(size=(3, 4))
        assert mse_loss(x, x).data == 0.0
        assert mse_loss(x + 2.0, x).data == pytest.approx(4.0, abs=1e-12)
        y = rng.normal(size=(3, 4))
        ref = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / 12
        assert mse_loss(x, y).data == pytest.approx(ref, rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(x=arrays(np.float64, (2, 3), elements=finite), y=arrays(np.float64, (2, 3), elements=finite))
    def test_symmetric_nonnegative(self, x, y):
        a, b = float(mse_loss(x, y).data), float(mse_loss(y, x).data)
        assert a == b and a >= 0
        assert (a == 0) == bool(np.all(x == y))

    def test_gradient(self, rng):
        p, t = Tensor(rng.normal(size=(2, 5)), requires_grad=True), Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        assert check_gradients(lambda: mse_loss(p, t), [p, t]) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros(3), np.zeros(4))


class TestCGMLikelihood:
    def test_single_standard_gaussian(self):
        nll = cgm_nll(mixture([[0.0]], [[1.5]], [[1.0]]), np.array([1.5]))
        assert float(nll.data) == pytest.approx(-math.log(1 / math.sqrt(2 * math.pi)), rel=1e-12)
        assert float(nll.data) == pytest.approx(0.9189385332046727, rel=1e-12)

    def test_identical_components_collapse(self, rng):
        mu, sd, x = rng.normal(size=(4, 1)), rng.uniform(0.5, 2, size=(4, 1)), rng.normal(size=4)
        one = cgm_nll(mixture(np.zeros((4, 1)), mu, sd), x).data
        two = cgm_nll(mixture(rng.normal(size=(4, 2)), np.repeat(mu, 2, 1), np.repeat(sd, 2, 1)), x).data
        assert float(two) == pytest.approx(float(one), rel=1e-12)

    def test_tail_monotone(self):
        p = mixture([[0.3, -0.2]], [[-1.0, 2.0]], [[0.5, 0.8]])
        vals = [float(cgm_nll(p, np.array([x])).data) for x in np.linspace(2.5, 30, 40)]
        assert all(a < b for a, b in zip(vals, vals[1:]))
        vals = [float(cgm_nll(p, np.array([x])).data) for x in np.linspace(-1.5, -30, 40)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_gradient(self, rng):
        lg = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        mu = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        sd = Tensor(rng.uniform(0.4, 1.5, size=(2, 3, 4)), requires_grad=True)
        x = rng.normal(size=(2, 3))
        assert check_gradients(lambda: cgm_nll(CGMParams(lg, mu, sd), x), [lg, mu, sd]) < 1e-4

    def test_errors(self):
        with pytest.raises(ValueError, match="positive"):
            cgm_nll(mixture([[0.0]], [[0.0]], [[0.0]]), np.zeros(1))
        with pytest.raises(ValueError, match="fit"):
            cgm_nll(mixture([[0.0]], [[0.0]], [[1.0]]), np.zeros(2))
        with pytest.raises(ad.NonFiniteError):
            cgm_nll(mixture([[np.nan]], [[0.0]], [[1.0]]), np.zeros(1))


class TestSoftmax:
    @settings(max_examples=100, deadline=None)
    @given(logits=arrays(np.float64, (3, 4), elements=finite), shift=finite)
    def test_shift_invariance_and_normalisation(self, logits, shift):
        w = softmax(logits)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(softmax(logits + shift), w, atol=1e-12)

    def test_sharpening_limits(self):
        lg = np.array([0.0, 1.0, 0.5])
        assert sharpened_weights(lg, 1e-3).argmax() == 1
        assert sharpened_weights(lg, 1e-3)[1] == pytest.approx(1.0)
        np.testing.assert_allclose(sharpened_weights(lg, 1.0), softmax(lg))


class TestSampling:
    P = mixture([[0.2, 1.0, -0.5]], [[-2.0, 0.5, 3.0]], [[0.6, 1.0, 0.4]])

    def test_tau_zero_deterministic(self, rng):
        params = CGMParams(rng.normal(size=(5, 60, 4)), rng.normal(size=(5, 60, 4)), rng.uniform(0.1, 1, (5, 60, 4)))
        a = cgm_sample(params, 0.0, np.random.default_rng(1))
        b = cgm_sample(params, 0.0, np.random.default_rng(2))
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() == cgm_sample(params, 0.0).tobytes()

    def test_tau_zero_single_component(self, rng):
        mu = rng.normal(size=(3, 1))
        np.testing.assert_array_equal(cgm_sample(mixture(np.zeros((3, 1)), mu, np.ones((3, 1))), 0.0), mu[:, 0])

    def test_monte_carlo_mean(self):
        n = 100_000
        rng = np.random.default_rng(0)
        p = CGMParams(*(np.repeat(a, n, axis=0) for a in (self.P.logits, self.P.means, self.P.scales)))
        draws = cgm_sample(p, 1.0, rng)
        se = math.sqrt(float(self.P.mixture_var()[0]) / n)
        assert abs(draws.mean() - float(self.P.mixture_mean()[0])) < 3 * se
        assert draws.var() == pytest.approx(float(self.P.mixture_var()[0]), rel=0.02)

    @staticmethod
    def _tempered_var(p, tau):
        w = sharpened_weights(p.logits, tau)
        m = (w * p.means).sum(-1, keepdims=True)
        return float((w * ((tau * p.scales) ** 2 + (p.means - m) ** 2)).sum())

    def test_variance_grows_with_tau(self):
        n = 40_000
        taus = [0.0, 0.25, 0.5, 1.0, 1.5]
        exact = [self._tempered_var(self.P, t) if t else 0.0 for t in taus]
        assert all(a < b for a, b in zip(exact, exact[1:]))
        rng = np.random.default_rng(3)
        p = CGMParams(*(np.repeat(a, n, axis=0) for a in (self.P.logits, self.P.means, self.P.scales)))
        mc = [cgm_sample(p, t, rng).var() for t in taus]
        assert mc[0] == 0.0
        assert all(a < b for a, b in zip(mc, mc[1:]))
        for v, e in zip(mc[1:], exact[1:]):
            assert v == pytest.approx(e, rel=0.05)

    def test_errors(self):
        with pytest.raises(ValueError):
            cgm_sample(self.P, -0.1)
        with pytest.raises(ValueError, match="Generator"):
            cgm_sample(self.P, 1.0)
