import math

import numpy as np
import pytest
import scipy.stats
import torch

from deskvc.errors import ConfigError, InputError, StateError
from deskvc.latent import (
    LATENT_DIM,
    BackbonePretrainConfig,
    CouplingFlow,
    FlowOutput,
    LatentPosterior,
    MelDecoder,
    PosteriorEncoder,
    PriorProjection,
    PriorStats,
    decode,
    flow_forward,
    flow_inverse,
    kl_loss,
    posterior_encode,
    pretrain_backbone,
    prior_stats,
)
from deskvc.signal import N_FREQ, N_MELS
from fdutil import fd_grad, rel_error


def randomize_flow(flow: CouplingFlow, seed: int, scale: float = 0.15) -> CouplingFlow:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in flow.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return flow


def identity_flow_output(z: torch.Tensor) -> FlowOutput:
    return FlowOutput(transformed=z, log_det=torch.zeros(z.shape[0], dtype=z.dtype))


class TestCouplingFlow:
    def test_fresh_flow_is_identity_with_zero_logdet(self):
        flow = CouplingFlow()
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(12, LATENT_DIM, generator=gen)
        cond = torch.randn(256, generator=gen)
        out = flow_forward(z, cond, flow)
        # couplings are zero-initialized; layer flips cancel pairwise (4 layers)
        assert torch.allclose(out.transformed, z, atol=1e-7)
        assert torch.all(out.log_det == 0.0)

    def test_round_trip_inversion(self):
        flow = randomize_flow(CouplingFlow(), seed=1)
        gen = torch.Generator().manual_seed(2)
        worst = 0.0
        with torch.no_grad():
            for _ in range(20):
                z = torch.randn(9, LATENT_DIM, generator=gen, dtype=torch.float64)
                cond = torch.randn(256, generator=gen, dtype=torch.float64)
                u = flow_forward(z, cond, flow).transformed
                back, _ = flow_inverse(u, cond, flow)
                worst = max(worst, float(torch.max(torch.abs(back - z))))
        assert worst < 1e-4

    def test_inverse_of_identity_flow_is_identity(self):
        flow = CouplingFlow()
        gen = torch.Generator().manual_seed(3)
        u = torch.randn(5, LATENT_DIM, generator=gen)
        cond = torch.randn(256, generator=gen)
        z, log_det = flow_inverse(u, cond, flow)
        assert torch.allclose(z, u, atol=1e-7)
        assert torch.all(log_det == 0.0)

    def test_inverse_logdet_negates_forward(self):
        flow = randomize_flow(CouplingFlow(), seed=4)
        gen = torch.Generator().manual_seed(5)
        z = torch.randn(7, LATENT_DIM, generator=gen, dtype=torch.float64)
        cond = torch.randn(256, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            fwd = flow_forward(z, cond, flow)
            _, inv_log_det = flow_inverse(fwd.transformed, cond, flow)
        assert float(torch.abs(fwd.log_det + inv_log_det).sum()) < 1e-6

    @pytest.mark.parametrize("frames", [1, 3])
    def test_logdet_matches_finite_difference_jacobian(self, frames):
        flow = randomize_flow(CouplingFlow(channels=4, hidden=8, cond_dim=6), seed=6).double()
        gen = torch.Generator().manual_seed(7)
        z = torch.randn(frames, 4, generator=gen, dtype=torch.float64)
        cond = torch.randn(6, generator=gen, dtype=torch.float64)

        n = frames * 4
        jac = np.zeros((n, n))
        h = 1e-5
        flat = z.reshape(-1)
        with torch.no_grad():
            for i in range(n):
                orig = float(flat[i])
                flat[i] = orig + h
                hi = flow_forward(z, cond, flow).transformed.reshape(-1).numpy().copy()
                flat[i] = orig - h
                lo = flow_forward(z, cond, flow).transformed.reshape(-1).numpy().copy()
                flat[i] = orig
                jac[:, i] = (hi - lo) / (2 * h)

            sign, log_abs_det = np.linalg.slogdet(jac)
            assert sign > 0
            reported = float(flow_forward(z, cond, flow).log_det.sum())
        assert abs(reported - log_abs_det) / max(abs(log_abs_det), 1e-6) < 1e-3

    def test_odd_channel_count_rejected(self):
        with pytest.raises(ConfigError):
            CouplingFlow(channels=5)

    def test_change_of_variables_ks(self):
        # Sampling u ~ N(mu, sigma) then z = f^-1(u) must push back to the
        # prior through f: each marginal of f(z) passes a KS normality test.
        flow = randomize_flow(CouplingFlow(channels=4, hidden=8, cond_dim=6), seed=8).double()
        gen = torch.Generator().manual_seed(9)
        cond = torch.randn(6, generator=gen, dtype=torch.float64)
        mu = torch.randn(4, generator=gen, dtype=torch.float64)
        sigma = torch.exp(0.3 * torch.randn(4, generator=gen, dtype=torch.float64))
        u = mu + sigma * torch.randn(10_000, 4, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            z, _ = flow_inverse(u, cond, flow)
            fz = flow_forward(z, cond, flow).transformed
        for d in range(4):
            standardized = ((fz[:, d] - mu[d]) / sigma[d]).numpy()
            assert scipy.stats.kstest(standardized, "norm").pvalue > 0.01


class TestKlLoss:
    def test_identical_densities_identity_flow(self):
        gen = torch.Generator().manual_seed(10)
        z = torch.randn(50, 8, generator=gen)
        post = LatentPosterior(mu_q=torch.zeros_like(z), log_sigma_q=torch.zeros_like(z), z=z)
        prior = PriorStats(mu_theta=torch.zeros_like(z), log_sigma_theta=torch.zeros_like(z))
        assert abs(float(kl_loss(post, prior, identity_flow_output(z)))) < 1e-6

    def test_unit_shift_monte_carlo(self):
        # KL(N(1,1) || N(0,1)) = 1/2.
        gen = torch.Generator().manual_seed(11)
        eps = torch.randn(100_000, 1, generator=gen, dtype=torch.float64)
        z = 1.0 + eps
        post = LatentPosterior(
            mu_q=torch.ones_like(z), log_sigma_q=torch.zeros_like(z), z=z, eps=eps
        )
        prior = PriorStats(mu_theta=torch.zeros_like(z), log_sigma_theta=torch.zeros_like(z))
        value = float(kl_loss(post, prior, identity_flow_output(z)))
        assert abs(value - 0.5) < 0.02

    def test_doubling_flow_monte_carlo(self):
        # q = N(0,1), f(z) = 2z with log_det = ln 2, prior N(0,1):
        # E[(3/2) z^2 - ln 2] = 3/2 - ln 2.
        gen = torch.Generator().manual_seed(12)
        z = torch.randn(100_000, 1, generator=gen, dtype=torch.float64)
        post = LatentPosterior(mu_q=torch.zeros_like(z), log_sigma_q=torch.zeros_like(z), z=z)
        prior = PriorStats(mu_theta=torch.zeros_like(z), log_sigma_theta=torch.zeros_like(z))
        flow = FlowOutput(
            transformed=2.0 * z,
            log_det=torch.full((z.shape[0],), math.log(2.0), dtype=torch.float64),
        )
        value = float(kl_loss(post, prior, flow))
        assert abs(value - (1.5 - math.log(2.0))) < 0.02

    def test_nonnegative_in_expectation_random_instances(self):
        gen = torch.Generator().manual_seed(13)
        for seed in (20, 21):
            mu_q = torch.randn(1, 4, generator=gen, dtype=torch.float64)
            log_sigma_q = 0.4 * torch.randn(1, 4, generator=gen, dtype=torch.float64)
            eps = torch.randn(30_000, 4, generator=gen, dtype=torch.float64)
            z = mu_q + torch.exp(log_sigma_q) * eps
            post = LatentPosterior(
                mu_q=mu_q.expand_as(z), log_sigma_q=log_sigma_q.expand_as(z), z=z, eps=eps
            )
            flow_mod = randomize_flow(CouplingFlow(channels=4, hidden=8, cond_dim=6), seed).double()
            cond = torch.randn(6, generator=gen, dtype=torch.float64)
            with torch.no_grad():
                out = flow_forward(z, cond, flow_mod)
            prior = PriorStats(
                mu_theta=torch.randn(1, 4, generator=gen, dtype=torch.float64).expand_as(z),
                log_sigma_theta=(
                    0.3 * torch.randn(1, 4, generator=gen, dtype=torch.float64)
                ).expand_as(z),
            )
            assert float(kl_loss(post, prior, out)) > -0.01

    def test_shape_mismatch_rejected(self):
        z = torch.zeros(4, 2)
        post = LatentPosterior(mu_q=z, log_sigma_q=z, z=z)
        prior = PriorStats(mu_theta=torch.zeros(4, 3), log_sigma_theta=torch.zeros(4, 3))
        with pytest.raises(InputError):
            kl_loss(post, prior, identity_flow_output(z))

    def test_gradient_wrt_prior_projection_weights(self):
        proj = PriorProjection(in_dim=3, latent_dim=2, kernel=3).double()
        gen = torch.Generator().manual_seed(14)
        with torch.no_grad():
            for p in proj.parameters():
                p.copy_(0.3 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
        bottleneck = torch.randn(6, 3, generator=gen, dtype=torch.float64)
        z = torch.randn(6, 2, generator=gen, dtype=torch.float64)
        post = LatentPosterior(mu_q=torch.zeros_like(z), log_sigma_q=torch.zeros_like(z), z=z)

        def loss_fn():
            prior = prior_stats(bottleneck, proj)
            return kl_loss(post, prior, identity_flow_output(z))

        loss = loss_fn()
        loss.backward()
        for p in proj.parameters():
            numeric = fd_grad(loss_fn, p.data)
            assert rel_error(p.grad, numeric) <= 1e-3


class TestPriorStats:
    def test_zero_init_gives_zero_stats(self):
        proj = PriorProjection()
        with torch.no_grad():
            for p in proj.parameters():
                p.zero_()
        out = prior_stats(torch.zeros(7, 32), proj)
        assert torch.all(out.mu_theta == 0.0)
        assert torch.all(out.log_sigma_theta == 0.0)
        assert out.mu_theta.shape == (7, LATENT_DIM)

    def test_frame_count_preserved(self):
        proj = PriorProjection()
        out = prior_stats(torch.randn(13, 32), proj)
        assert out.mu_theta.shape[0] == 13

    def test_dim_mismatch_rejected(self):
        proj = PriorProjection()
        with pytest.raises(InputError):
            prior_stats(torch.zeros(5, 16), proj)


class TestPosteriorAndDecoder:
    def _trained(self, module):
        with torch.no_grad():
            module.is_trained.fill_(True)
        return module

    def test_untrained_posterior_raises(self):
        model = PosteriorEncoder()
        with pytest.raises(StateError):
            posterior_encode(torch.zeros(N_FREQ, 10), torch.zeros(256), model)

    def test_seeded_determinism_and_shapes(self):
        model = self._trained(PosteriorEncoder())
        gen = torch.Generator().manual_seed(15)
        x = torch.randn(N_FREQ, 20, generator=gen)
        s = torch.randn(256, generator=gen)
        a = posterior_encode(x, s, model, rng_seed=3)
        b = posterior_encode(x, s, model, rng_seed=3)
        assert torch.equal(a.z, b.z)
        assert a.z.shape == (20, LATENT_DIM)

    def test_zero_noise_returns_mean(self):
        model = self._trained(PosteriorEncoder())
        gen = torch.Generator().manual_seed(16)
        x = torch.randn(N_FREQ, 8, generator=gen)
        s = torch.randn(256, generator=gen)
        post = posterior_encode(x, s, model, rng_seed=None)
        assert torch.equal(post.z, post.mu_q)

    def test_decoder_untrained_raises_and_shapes(self):
        model = MelDecoder()
        with pytest.raises(StateError):
            decode(torch.zeros(5, LATENT_DIM), torch.zeros(256), model)
        self._trained(model)
        mel = decode(torch.zeros(20, LATENT_DIM), torch.zeros(256), model)
        assert mel.values.shape == (20, N_MELS)

    def test_decoder_dim_mismatch(self):
        model = self._trained(MelDecoder())
        with pytest.raises(InputError):
            decode(torch.zeros(5, 16), torch.zeros(256), model)


class TestPretrainBackbone:
    def test_requires_trained_speaker_encoder(self, small_entries):
        from deskvc.encoders import SpeakerEncoder

        with pytest.raises(StateError):
            pretrain_backbone(small_entries, None)
        with pytest.raises(StateError):
            pretrain_backbone(small_entries, SpeakerEncoder())

    def test_beta_zero_reconstructs_better(self, small_entries, small_features, small_speaker_encoder):
        encoder, _ = small_speaker_encoder
        cfg = BackbonePretrainConfig(steps=200, batch_size=8, seed=5)
        _, with_kl = pretrain_backbone(small_entries, encoder, cfg, features=small_features)
        cfg0 = BackbonePretrainConfig(steps=200, batch_size=8, seed=5, beta=0.0)
        _, without_kl = pretrain_backbone(small_entries, encoder, cfg0, features=small_features)
        assert without_kl.val_recon_l1 < with_kl.val_recon_l1

    def test_seeded_runs_reproduce_final_loss(self, small_entries, small_features, small_speaker_encoder):
        encoder, _ = small_speaker_encoder
        cfg = BackbonePretrainConfig(steps=120, batch_size=8, seed=9)
        _, a = pretrain_backbone(small_entries, encoder, cfg, features=small_features)
        _, b = pretrain_backbone(small_entries, encoder, cfg, features=small_features)
        assert abs(a.final_loss - b.final_loss) <= 1e-6

    def test_marks_backbone_frozen(self, small_entries, small_features, small_speaker_encoder):
        encoder, _ = small_speaker_encoder
        cfg = BackbonePretrainConfig(steps=30, batch_size=8, seed=1)
        params, _ = pretrain_backbone(small_entries, encoder, cfg, features=small_features)
        assert bool(params.posterior.is_trained) and bool(params.decoder.is_trained)
        assert all(not p.requires_grad for p in params.posterior.parameters())
        assert all(not p.requires_grad for p in params.decoder.parameters())
