import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uad.errors import ShapeError, UnsupportedVariantError, ValidationError
from uad.losses import LossBreakdown, age_loss, kl_loss, recon_loss, total_loss
from uad.models import ForwardOutput, LatentStats


def naive_recon(x, x_tilde):
    total, n = 0.0, 0
    for a, b in zip(np.asarray(x).ravel(), np.asarray(x_tilde).ravel()):
        total += abs(float(a) - float(b))
        n += 1
    return total / n


def naive_kl(z_mu, z_log_var):
    z_mu, z_log_var = np.asarray(z_mu), np.asarray(z_log_var)
    per_sample = []
    for b in range(z_mu.shape[0]):
        acc = 0.0
        for i in range(z_mu.shape[1]):
            mu, lv = float(z_mu[b, i]), float(z_log_var[b, i])
            acc += 0.5 * (mu * mu + math.exp(lv) - lv - 1.0)
        per_sample.append(acc)
    return sum(per_sample) / len(per_sample)


def naive_age(a_p, a_c):
    diffs = [abs(float(p) - float(c)) for p, c in zip(np.asarray(a_p), np.asarray(a_c))]
    return sum(diffs) / len(diffs)


def make_outputs(x_tilde, z_mu, z_log_var, a_p=None):
    return ForwardOutput(
        x_tilde=torch.as_tensor(x_tilde),
        latent=LatentStats(z_mu=torch.as_tensor(z_mu), z_log_var=torch.as_tensor(z_log_var)),
        a_p=None if a_p is None else torch.as_tensor(a_p),
    )


class TestReconLoss:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 1, 4, 4, 4))
        xt = rng.standard_normal((3, 1, 4, 4, 4))
        assert abs(float(recon_loss(x, xt)) - naive_recon(x, xt)) <= 1e-12

    def test_zero_for_identical(self):
        x = np.random.default_rng(1).standard_normal((2, 5))
        assert float(recon_loss(x, x)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            recon_loss(np.zeros((2, 3)), np.zeros((3, 2)))

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        x, xt = rng.standard_normal((2, 7)), rng.standard_normal((2, 7))
        assert float(recon_loss(x, xt)) >= 0.0


class TestKlLoss:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        mu = rng.standard_normal((4, 6))
        lv = rng.standard_normal((4, 6)) * 0.5
        assert abs(float(kl_loss(mu, lv)) - naive_kl(mu, lv)) <= 1e-12

    def test_zero_at_prior(self):
        assert float(kl_loss(np.zeros((3, 5)), np.zeros((3, 5)))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kl_loss(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_requires_2d(self):
        with pytest.raises(ShapeError):
            kl_loss(np.zeros(5), np.zeros(5))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        mu = rng.standard_normal((3, 4)) * 2
        lv = rng.standard_normal((3, 4))
        assert float(kl_loss(mu, lv)) >= 0.0


class TestAgeLoss:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        a_p, a_c = rng.uniform(0, 100, 9), rng.uniform(0, 100, 9)
        assert abs(float(age_loss(a_p, a_c)) - naive_age(a_p, a_c)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            age_loss(np.zeros(3), np.zeros(4))

    def test_integer_ages_accepted(self):
        assert float(age_loss([50, 60], [40, 70])) == 10.0


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.x = rng.standard_normal((2, 1, 4, 4, 4))
        self.xt = rng.standard_normal((2, 1, 4, 4, 4))
        self.mu = rng.standard_normal((2, 8))
        self.lv = rng.standard_normal((2, 8)) * 0.3
        self.a_p = rng.uniform(20, 90, 2)
        self.a_c = rng.uniform(20, 90, 2)

    def test_composition_vae_ap(self):
        out = make_outputs(self.xt, self.mu, self.lv, self.a_p)
        b = total_loss(self.x, out, self.a_c, "vae_ap", beta=0.7, gamma=1.3)
        expected = float(b.l_rec) + 0.7 * float(b.l_kl) + 1.3 * float(b.l_age)
        assert abs(float(b.total) - expected) <= 1e-12
        assert abs(float(b.l_rec) - naive_recon(self.x, self.xt)) <= 1e-12
        assert abs(float(b.l_kl) - naive_kl(self.mu, self.lv)) <= 1e-12
        assert abs(float(b.l_age) - naive_age(self.a_p, self.a_c)) <= 1e-12

    def test_age_term_zero_for_plain_variants(self):
        out = make_outputs(self.xt, self.mu, self.lv)
        for variant in ("vae", "vae_ac"):
            b = total_loss(self.x, out, self.a_c, variant, beta=2.0, gamma=5.0)
            assert float(b.l_age) == 0.0
            assert abs(float(b.total) - (float(b.l_rec) + 2.0 * float(b.l_kl))) <= 1e-12

    def test_negative_weights_rejected(self):
        out = make_outputs(self.xt, self.mu, self.lv, self.a_p)
        with pytest.raises(ValidationError):
            total_loss(self.x, out, self.a_c, "vae_ap", beta=-0.1)
        with pytest.raises(ValidationError):
            total_loss(self.x, out, self.a_c, "vae_ap", gamma=-0.1)

    def test_unknown_variant(self):
        out = make_outputs(self.xt, self.mu, self.lv)
        with pytest.raises(UnsupportedVariantError):
            total_loss(self.x, out, self.a_c, "autoencoder")

    def test_ap_without_prediction_rejected(self):
        out = make_outputs(self.xt, self.mu, self.lv)
        with pytest.raises(ValidationError):
            total_loss(self.x, out, self.a_c, "vae_ap")

    def test_to_dict_floats(self):
        out = make_outputs(self.xt, self.mu, self.lv, self.a_p)
        d = total_loss(self.x, out, self.a_c, "vae_ap").to_dict()
        assert set(d) == {"l_rec", "l_kl", "l_age", "total", "beta", "gamma"}
        assert all(isinstance(v, float) for v in d.values())

    def test_total_carries_gradient(self):
        xt = torch.as_tensor(self.xt).requires_grad_(True)
        out = make_outputs(self.xt, self.mu, self.lv)
        out.x_tilde = xt
        b = total_loss(self.x, out, self.a_c, "vae")
        b.total.backward()
        assert xt.grad is not None
        assert torch.isfinite(xt.grad).all()
