import numpy as np
import pytest

from georecon.autodiff import Tensor
from georecon.geometry import random_rotation
from georecon.objectives import (COORD, GEORECON, LossWeights, ScoreOracle, analytic_mixture_score, dsm_target,
                                 loss_cln, loss_nsd, loss_rec, make_report, total_loss)


def val(t):
    return float(t.data)


def test_loss_nsd_examples():
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((3, 3))
    assert val(loss_nsd(Tensor(eps), eps)) == 0.0
    assert val(loss_nsd(Tensor(np.zeros((2, 3))), np.ones((2, 3)))) == 1.0
    pred = rng.standard_normal((3, 3))
    r = random_rotation(rng)
    assert val(loss_nsd(Tensor(pred @ r.T), eps @ r.T)) == pytest.approx(val(loss_nsd(Tensor(pred), eps)), abs=1e-12)


def test_loss_rec_examples():
    rng = np.random.default_rng(1)
    eps = rng.standard_normal((4, 3))
    pred = rng.standard_normal((4, 3))
    assert val(loss_rec(Tensor(1.5 * eps), eps, 1.5)) == 0.0
    assert val(loss_rec(Tensor(pred), eps, 0.0)) == pytest.approx(val(loss_cln(Tensor(pred))))
    assert val(loss_rec(Tensor(pred), eps, 1.0)) == val(loss_nsd(Tensor(pred), eps))


def test_loss_cln_examples():
    rng = np.random.default_rng(2)
    assert val(loss_cln(Tensor(np.zeros((3, 3))))) == 0.0
    assert val(loss_cln(Tensor(np.ones((1, 3))))) == 1.0
    pred = rng.standard_normal((5, 3))
    assert val(loss_cln(Tensor(pred @ random_rotation(rng).T))) == pytest.approx(val(loss_cln(Tensor(pred))), abs=1e-12)


def test_total_loss():
    assert total_loss(0.3, 0.2, 0.1, LossWeights(0, 0, 0)) == 0.0
    assert total_loss(0.3, 0.2, 0.1, COORD) == 0.3
    for w_rec in (0.40, 0.45, 0.50):
        assert total_loss(0.3, 0.2, 0.1, LossWeights(1, w_rec, 0.1)) == pytest.approx(0.3 + w_rec * 0.2 + 0.01)
    assert GEORECON == LossWeights(1.0, 0.45, 0.1)
    with pytest.raises(ValueError):
        LossWeights(1, -0.1, 0)
    rep = make_report(0.3, 0.2, 0.1, GEORECON)
    assert rep.total == pytest.approx(0.3 + 0.09 + 0.01)


def test_dsm_target():
    x = np.zeros((2, 3))
    np.testing.assert_array_equal(dsm_target(x, x, 0.04), 0.0)
    noised = x.copy()
    noised[0, 0] = 0.04
    assert dsm_target(x, noised, 0.04)[0, 0] == pytest.approx(-25.0, abs=1e-12)
    eps = np.random.default_rng(3).standard_normal((2, 3))
    np.testing.assert_array_equal(dsm_target(x, x + eps, 0.5), -eps / 0.25)


def test_mixture_score_cases():
    rng = np.random.default_rng(4)
    c = rng.standard_normal((3, 3))
    single = ScoreOracle(c[None], 0.3)
    np.testing.assert_array_equal(analytic_mixture_score(single, c), 0.0)
    x = rng.standard_normal((3, 3))
    np.testing.assert_allclose(analytic_mixture_score(single, x), (c - x) / 0.09, rtol=1e-14)
    pair = ScoreOracle(np.stack([c, -c]), 0.3)
    np.testing.assert_allclose(analytic_mixture_score(pair, np.zeros((3, 3))), 0.0, atol=1e-12)
    batch = rng.standard_normal((5, 3, 3))
    out = analytic_mixture_score(pair, batch)
    assert out.shape == (5, 3, 3)
    np.testing.assert_allclose(out[2], analytic_mixture_score(pair, batch[2]))


def test_mixture_score_matches_numeric_gradient():
    rng = np.random.default_rng(5)
    oracle = ScoreOracle(rng.standard_normal((2, 2, 3)), 0.4)

    def logp(x):
        d = ((oracle.centers - x) ** 2).sum(axis=(1, 2))
        return np.log(np.exp(-0.5 * d / oracle.sigma ** 2).sum())

    x = rng.standard_normal((2, 3)) * 0.5
    h = 1e-6
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        num[i] = (logp(x + e) - logp(x - e)) / (2 * h)
    np.testing.assert_allclose(analytic_mixture_score(oracle, x), num, rtol=1e-6, atol=1e-6)
