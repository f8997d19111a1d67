import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gatsbi.errors import NumericalError, ShapeError
from gatsbi.output import (
    FusionDecoder,
    MixtureForecast,
    MixtureHead,
    UnimodalHead,
    ade_loss,
    decode_mixture,
    decode_unimodal,
    fde_loss,
    fuse,
    mixture_from_raw,
    mixture_nll,
    most_probable_component,
    sample,
    sample_best_mode,
    sample_expected,
    sample_most_probable,
)


def random_mixture(rng, T=4, K=3, batch=(), dtype=torch.float64):
    raw = torch.as_tensor(rng.normal(size=(*batch, T, 6 * K)), dtype=dtype)
    return mixture_from_raw(raw, K)


def fixed_mixture(mu, pi, sigma=1.0, rho=0.0):
    """mu (T, K, 2), pi (T, K)."""
    mu = torch.as_tensor(mu, dtype=torch.float64)
    pi = torch.as_tensor(pi, dtype=torch.float64)
    ones = torch.ones_like(pi)
    return MixtureForecast(mu[..., 0], mu[..., 1], sigma * ones, sigma * ones, rho * ones, pi)


def central_difference(fn, x, eps=1e-6):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = fn(x).item()
        flat[i] = old - eps
        down = fn(x).item()
        flat[i] = old
        grad.view(-1)[i] = (up - down) / (2 * eps)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-4):
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp(min=1e-3)
    assert ((analytic - numeric).abs() / scale).max().item() < rel


class TestFusion:
    def test_shape(self):
        torch.manual_seed(0)
        dec = FusionDecoder(320, 64).eval()
        z = fuse(dec, torch.randn(256), torch.randn(64), t_pred=25)
        assert z.shape == (25, 64)

    def test_deterministic(self):
        torch.manual_seed(0)
        dec = FusionDecoder(320, 64).eval()
        p, s = torch.randn(2, 256), torch.randn(2, 64)
        assert torch.equal(fuse(dec, p, s, 10), fuse(dec, p, s, 10))

    def test_social_input_is_live(self):
        torch.manual_seed(1)
        dec = FusionDecoder(320, 64).eval()
        p, s = torch.randn(256), torch.randn(64)
        assert not torch.allclose(fuse(dec, p, s, 5), fuse(dec, p, torch.zeros(64), 5))

    def test_width_mismatch(self):
        dec = FusionDecoder(320, 64)
        with pytest.raises(ShapeError):
            fuse(dec, torch.randn(256), torch.randn(32), 5)


class TestUnimodal:
    def test_shape(self):
        assert decode_unimodal(UnimodalHead(64), torch.randn(25, 64)).shape == (25, 2)

    def test_zero_weights(self):
        head = UnimodalHead(8)
        for p in head.parameters():
            torch.nn.init.zeros_(p)
        assert not decode_unimodal(head, torch.randn(5, 8)).any()

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        head = UnimodalHead(8).double()
        z = torch.randn(5, 8, dtype=torch.float64)
        truth = torch.randn(5, 2, dtype=torch.float64)
        weight = head.net[2].weight

        loss = ade_loss(head(z), truth)
        (analytic,) = torch.autograd.grad(loss, weight)
        with torch.no_grad():
            numeric = central_difference(lambda _: ade_loss(head(z), truth), weight.data)
        assert_grad_close(analytic, numeric)


class TestMixtureDecode:
    def test_single_component(self):
        rng = np.random.default_rng(0)
        m = random_mixture(rng, K=1)
        torch.testing.assert_close(m.pi, torch.ones_like(m.pi))
        mean = torch.stack([m.mu_x[..., 0], m.mu_y[..., 0]], dim=-1)
        torch.testing.assert_close(sample_expected(m), mean)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_constraints(self, seed, K):
        rng = np.random.default_rng(seed)
        raw = torch.as_tensor(rng.normal(0, 20, size=(6, 6 * K)))
        m = mixture_from_raw(raw, K)
        assert (m.sigma_x > 0).all() and (m.sigma_y > 0).all()
        assert (m.rho.abs() <= 0.999).all()
        torch.testing.assert_close(m.pi.sum(-1), torch.ones(6, dtype=m.pi.dtype), atol=1e-6, rtol=0)

    def test_head(self):
        head = MixtureHead(16, 3)
        m = decode_mixture(head, torch.randn(7, 16))
        assert m.mu_x.shape == (7, 3) and m.K == 3
        assert m.means.shape == (3, 7, 2)

    def test_non_finite(self):
        raw = torch.zeros(2, 6)
        raw[0, 0] = float("nan")
        with pytest.raises(NumericalError):
            mixture_from_raw(raw, 1)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            MixtureHead(8, 0)


class TestNLL:
    def test_at_the_mode(self):
        m = fixed_mixture(np.zeros((3, 1, 2)), np.ones((3, 1)))
        nll = mixture_nll(m, torch.zeros(3, 2, dtype=torch.float64))
        assert nll.item() == pytest.approx(3 * math.log(2 * math.pi), rel=1e-12)

    def test_shrinking_sigma_decreases(self):
        values = [mixture_nll(fixed_mixture(np.zeros((2, 1, 2)), np.ones((2, 1)), sigma=s),
                              torch.zeros(2, 2, dtype=torch.float64)).item()
                  for s in (2.0, 1.0, 0.5, 0.1)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_matches_density_oracle(self):
        rng = np.random.default_rng(3)
        m = random_mixture(rng, T=3, K=2)
        truth = torch.as_tensor(rng.normal(size=(3, 2)))
        total = 0.0
        for t in range(3):
            dens = 0.0
            for k in range(2):
                mean = np.array([m.mu_x[t, k].item(), m.mu_y[t, k].item()])
                sx, sy, r = m.sigma_x[t, k].item(), m.sigma_y[t, k].item(), m.rho[t, k].item()
                cov = np.array([[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]])
                diff = truth[t].numpy() - mean
                q = diff @ np.linalg.solve(cov, diff)
                dens += m.pi[t, k].item() * math.exp(-0.5 * q) / (2 * math.pi * math.sqrt(np.linalg.det(cov)))
            total -= math.log(dens)
        assert mixture_nll(m, truth).item() == pytest.approx(total, rel=1e-10)

    def test_component_permutation_invariance(self):
        rng = np.random.default_rng(4)
        m = random_mixture(rng, T=4, K=3)
        perm = [2, 0, 1]
        mp = m.map(lambda t: t[..., perm])
        truth = torch.as_tensor(rng.normal(size=(4, 2)))
        torch.testing.assert_close(mixture_nll(mp, truth), mixture_nll(m, truth))
        torch.testing.assert_close(sample_expected(mp), sample_expected(m))

    def test_length_mismatch(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ShapeError):
            mixture_nll(random_mixture(rng, T=4), torch.zeros(3, 2))

    def test_degenerate_guard(self):
        m = fixed_mixture(np.zeros((1, 1, 2)), np.ones((1, 1)), rho=1.0)
        with pytest.raises(NumericalError):
            mixture_nll(m, torch.zeros(1, 2, dtype=torch.float64))

    def test_reductions(self):
        rng = np.random.default_rng(6)
        m = random_mixture(rng, T=3, K=2, batch=(4,))
        truth = torch.as_tensor(rng.normal(size=(4, 3, 2)))
        per = mixture_nll(m, truth, reduction="none")
        assert per.shape == (4,)
        torch.testing.assert_close(mixture_nll(m, truth), per.mean())
        torch.testing.assert_close(mixture_nll(m, truth, reduction="sum"), per.sum())

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        raw = torch.as_tensor(rng.normal(size=(3, 12)), dtype=torch.float64)
        truth = torch.as_tensor(rng.normal(size=(3, 2)))
        loss_fn = lambda r: mixture_nll(mixture_from_raw(r, 2), truth)
        raw.requires_grad_(True)
        (analytic,) = torch.autograd.grad(loss_fn(raw), raw)
        with torch.no_grad():
            numeric = central_difference(loss_fn, raw.detach().clone())
        assert_grad_close(analytic, numeric)


class TestLosses:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 2))
        assert ade_loss(x, x) == 0.0 and fde_loss(x, x) == 0.0

    def test_constant_offset(self):
        x = np.zeros((6, 2))
        assert ade_loss(x + [1.0, 0.0], x) == pytest.approx(1.0)

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        loop = sum(math.sqrt((a[t, 0] - b[t, 0]) ** 2 + (a[t, 1] - b[t, 1]) ** 2) for t in range(5)) / 5
        assert abs(ade_loss(a, b) - loop) < 1e-12

    def test_torch_batch(self):
        a = torch.zeros(3, 4, 2)
        b = torch.ones(3, 4, 2)
        torch.testing.assert_close(ade_loss(a, b), torch.full((3,), math.sqrt(2)))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ade_loss(np.zeros((4, 2)), np.zeros((5, 2)))
        with pytest.raises(ShapeError):
            fde_loss(np.zeros((0, 2)), np.zeros((0, 2)))


class TestSamplers:
    def test_expected_two_components(self):
        m = fixed_mixture([[[0, 0], [2, 0]]], [[0.5, 0.5]])
        torch.testing.assert_close(sample_expected(m), torch.tensor([[1.0, 0.0]], dtype=torch.float64))

    def test_expected_is_exactly_weighted_sum(self):
        rng = np.random.default_rng(2)
        m = random_mixture(rng, T=4, K=3)
        manual = torch.stack([(m.pi * m.mu_x).sum(-1), (m.pi * m.mu_y).sum(-1)], dim=-1)
        assert torch.equal(sample_expected(m), manual)

    def test_expected_matches_monte_carlo(self):
        rng = np.random.default_rng(3)
        m = random_mixture(rng, T=1, K=3)
        n = 1_000_000
        pi = m.pi[0].numpy()
        comp = rng.choice(3, size=n, p=pi / pi.sum())
        mx, my = m.mu_x[0].numpy()[comp], m.mu_y[0].numpy()[comp]
        sx, sy, r = m.sigma_x[0].numpy()[comp], m.sigma_y[0].numpy()[comp], m.rho[0].numpy()[comp]
        z1, z2 = rng.standard_normal(n), rng.standard_normal(n)
        x = mx + sx * z1
        y = my + sy * (r * z1 + np.sqrt(1 - r**2) * z2)
        expected = sample_expected(m)[0].numpy()
        for draws, target in ((x, expected[0]), (y, expected[1])):
            assert abs(draws.mean() - target) <= 3 * draws.std() / 1000

    def test_most_probable(self):
        m = fixed_mixture([[[0, 0], [5, 5]], [[1, 1], [6, 6]]], [[0.9, 0.1], [0.2, 0.8]])
        torch.testing.assert_close(sample_most_probable(m), torch.tensor([[5.0, 5.0], [6.0, 6.0]], dtype=torch.float64))

    def test_tie_goes_to_first(self):
        m = fixed_mixture([[[0, 0], [5, 5]]], [[0.5, 0.5]])
        assert most_probable_component(m).item() == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-5, 5))
    def test_argmax_invariant_to_logit_shift(self, seed, shift):
        rng = np.random.default_rng(seed)
        raw = torch.as_tensor(rng.normal(size=(4, 18)))
        shifted = raw.clone()
        shifted[..., 15:] += shift
        assert most_probable_component(mixture_from_raw(raw, 3)) == most_probable_component(mixture_from_raw(shifted, 3))

    def test_best_mode_dominance(self):
        truth = torch.tensor([[1.0, 1.0], [2.0, 2.0]], dtype=torch.float64)
        m = fixed_mixture([[[1, 1], [50, 50]], [[2, 2], [60, 60]]], [[0.1, 0.9], [0.1, 0.9]])
        torch.testing.assert_close(sample_best_mode(m, truth), truth)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_best_mode_optimal(self, seed, K):
        rng = np.random.default_rng(seed)
        m = random_mixture(rng, T=5, K=K)
        truth = torch.as_tensor(rng.normal(size=(5, 2)))
        best = ade_loss(sample_best_mode(m, truth), truth).item()
        for k in range(K):
            assert best <= ade_loss(m.means[k], truth).item() + 1e-12
        assert best <= ade_loss(sample_most_probable(m), truth).item() + 1e-12

    def test_best_mode_needs_truth(self):
        with pytest.raises(ValueError):
            sample(random_mixture(np.random.default_rng(0)), "best_mode")

    def test_k1_samplers_coincide(self):
        rng = np.random.default_rng(9)
        m = random_mixture(rng, T=5, K=1, batch=(2,))
        truth = torch.as_tensor(rng.normal(size=(2, 5, 2)))
        a = sample(m, "expected")
        torch.testing.assert_close(sample(m, "most_probable"), a)
        torch.testing.assert_close(sample(m, "best_mode", truth), a)

    def test_unknown_sampler(self):
        with pytest.raises(ValueError):
            sample(random_mixture(np.random.default_rng(0)), "median")
