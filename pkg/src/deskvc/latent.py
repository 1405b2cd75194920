"""CVAE backbone and flow prior: posterior encoder over linear spectrograms,
mel decoder, style-conditioned affine coupling flow, prior projection, and
the KL objective between posterior and flow prior.

The flow uses affine (scale + shift) couplings with tanh-bounded log-scales
and zero-initialized output layers, so a fresh flow is the identity map with
zero log-determinant. The decoder emits mel spectrograms; waveform synthesis
is a separate phase-reconstruction step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoders import SPEAKER_EMBED_DIM, SpeakerEmbedding, SpeakerEncoder, speaker_encode
from .errors import ConfigError, InputError, StateError
from .signal import MEL_FMAX, MEL_FMIN, N_FREQ, N_MELS, LinearSpectrogram, MelSpectrogram

LATENT_DIM = 32
LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 5.0
LOG_SCALE_LIMIT = 2.0
FLOW_LAYERS = 4

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LatentPosterior:
    """Gaussian posterior stats and the recorded sample z = mu + exp(logs) * eps."""

    mu_q: torch.Tensor  # [T, D]
    log_sigma_q: torch.Tensor  # [T, D]
    z: torch.Tensor  # [T, D]
    eps: torch.Tensor | None = None

    def __post_init__(self):
        if self.mu_q.shape != self.log_sigma_q.shape or self.mu_q.shape != self.z.shape:
            raise InputError("posterior fields must share one [frames x dim] shape")
        if self.eps is not None:
            recon = self.mu_q + torch.exp(self.log_sigma_q) * self.eps
            if not torch.allclose(recon, self.z, atol=1e-5, rtol=1e-4):
                raise InputError("z does not match mu_q + exp(log_sigma_q) * eps")


@dataclass
class PriorStats:
    """Gaussian prior parameters in flow space, per frame."""

    mu_theta: torch.Tensor  # [T, D]
    log_sigma_theta: torch.Tensor  # [T, D]

    def __post_init__(self):
        if self.mu_theta.shape != self.log_sigma_theta.shape:
            raise InputError("prior stats must share one [frames x dim] shape")


@dataclass
class FlowOutput:
    """Flow-transformed latents and the per-frame log |det Jacobian|."""

    transformed: torch.Tensor  # [T, D]
    log_det: torch.Tensor  # [T]

    def __post_init__(self):
        if self.transformed.ndim != 2 or self.log_det.shape != self.transformed.shape[:1]:
            raise InputError("flow output must be [frames x dim] with per-frame log_det")
        if not bool(torch.all(torch.isfinite(self.log_det.detach()))):
            raise InputError("log_det contains non-finite values")


class PosteriorEncoder(nn.Module):
    """1-D conv stack over linear spectrograms with global style conditioning."""

    def __init__(
        self,
        n_freq: int = N_FREQ,
        hidden: int = 96,
        latent_dim: int = LATENT_DIM,
        cond_dim: int = SPEAKER_EMBED_DIM,
    ):
        super().__init__()
        self.n_freq = n_freq
        self.latent_dim = latent_dim
        self.pre = nn.Conv1d(n_freq, hidden, 1)
        self.cond = nn.Linear(cond_dim, hidden)
        self.conv1 = nn.Conv1d(hidden, hidden, 5, padding=2)
        self.conv2 = nn.Conv1d(hidden, hidden, 5, padding=2)
        self.proj = nn.Conv1d(hidden, 2 * latent_dim, 1)
        self.register_buffer("is_trained", torch.tensor(False))

    def forward(self, x: torch.Tensor, s: torch.Tensor, eps: torch.Tensor | None = None):
        """x [B, n_freq, T], s [B, cond] -> (mu, log_sigma, z) each [B, D, T].

        eps is the standard-normal noise; None means eps = 0 (z = mu).
        """
        if x.ndim != 3 or x.shape[1] != self.n_freq:
            raise InputError(f"posterior expects [B, {self.n_freq}, T], got {tuple(x.shape)}")
        if s.ndim != 2 or s.shape[0] != x.shape[0]:
            raise InputError("style conditioning must be [B, cond] matching the batch")
        h = torch.relu(self.pre(x) + self.cond(s).unsqueeze(-1))
        h = torch.relu(self.conv1(h))
        h = torch.relu(self.conv2(h))
        mu, log_sigma = torch.chunk(self.proj(h), 2, dim=1)
        log_sigma = torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        if eps is None:
            z = mu
        else:
            z = mu + torch.exp(log_sigma) * eps
        return mu, log_sigma, z


class MelDecoder(nn.Module):
    """Conv decoder from latents to 80-bin log-mel frames, style conditioned."""

    def __init__(
        self,
        latent_dim: int = LATENT_DIM,
        hidden: int = 96,
        n_mels: int = N_MELS,
        cond_dim: int = SPEAKER_EMBED_DIM,
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.n_mels = n_mels
        self.pre = nn.Conv1d(latent_dim, hidden, 5, padding=2)
        self.cond = nn.Linear(cond_dim, hidden)
        self.conv1 = nn.Conv1d(hidden, hidden, 5, padding=2)
        self.out = nn.Conv1d(hidden, n_mels, 1)
        self.register_buffer("is_trained", torch.tensor(False))

    def forward(self, z: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        """z [B, D, T], style [B, cond] -> mel [B, n_mels, T]."""
        if z.ndim != 3 or z.shape[1] != self.latent_dim:
            raise InputError(f"decoder expects [B, {self.latent_dim}, T], got {tuple(z.shape)}")
        if style.ndim != 2 or style.shape[0] != z.shape[0]:
            raise InputError("style conditioning must be [B, cond] matching the batch")
        h = torch.relu(self.pre(z) + self.cond(style).unsqueeze(-1))
        h = torch.relu(self.conv1(h))
        return self.out(h)


class _AffineCoupling(nn.Module):
    """One affine coupling: half the channels shift/scale the other half."""

    def __init__(self, channels: int, hidden: int, cond_dim: int, kernel: int):
        super().__init__()
        half = channels // 2
        pad = kernel // 2
        self.pre = nn.Conv1d(half, hidden, kernel, padding=pad)
        self.cond = nn.Linear(cond_dim, hidden)
        self.mid = nn.Conv1d(hidden, hidden, kernel, padding=pad)
        self.out = nn.Conv1d(hidden, channels, kernel, padding=pad)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _shift_log_scale(self, x1: torch.Tensor, cond: torch.Tensor):
        h = torch.relu(self.pre(x1) + self.cond(cond).unsqueeze(-1))
        h = torch.relu(self.mid(h))
        shift, raw = torch.chunk(self.out(h), 2, dim=1)
        return shift, LOG_SCALE_LIMIT * torch.tanh(raw)

    def forward(self, x: torch.Tensor, cond: torch.Tensor):
        x1, x2 = torch.chunk(x, 2, dim=1)
        shift, log_scale = self._shift_log_scale(x1, cond)
        y2 = x2 * torch.exp(log_scale) + shift
        return torch.cat([x1, y2], dim=1), log_scale.sum(dim=1)

    def inverse(self, y: torch.Tensor, cond: torch.Tensor):
        y1, y2 = torch.chunk(y, 2, dim=1)
        shift, log_scale = self._shift_log_scale(y1, cond)
        x2 = (y2 - shift) * torch.exp(-log_scale)
        return torch.cat([y1, x2], dim=1), -log_scale.sum(dim=1)


class CouplingFlow(nn.Module):
    """Stack of affine couplings with a channel flip between layers.

    Runs in float64 by default: inversion error must stay below 1e-4 even for
    layers near the log-scale bound, which float32 cannot guarantee.
    """

    def __init__(
        self,
        channels: int = LATENT_DIM,
        hidden: int = 48,
        cond_dim: int = SPEAKER_EMBED_DIM,
        n_layers: int = FLOW_LAYERS,
        kernel: int = 3,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if channels % 2 != 0:
            raise ConfigError(f"flow channel count must be even, got {channels}")
        self.channels = channels
        self.layers = nn.ModuleList(
            _AffineCoupling(channels, hidden, cond_dim, kernel) for _ in range(n_layers)
        )
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, z: torch.Tensor, cond: torch.Tensor):
        """z [B, C, T], cond [B, cond_dim] -> (u [B, C, T], log_det [B, T])."""
        log_det = z.new_zeros(z.shape[0], z.shape[2])
        for layer in self.layers:
            z, ld = layer(z, cond)
            log_det = log_det + ld
            z = torch.flip(z, dims=[1])
        return z, log_det

    def inverse(self, u: torch.Tensor, cond: torch.Tensor):
        """Exact layer-by-layer inverse; returns (z, log_det of the inverse)."""
        log_det = u.new_zeros(u.shape[0], u.shape[2])
        for layer in reversed(self.layers):
            u = torch.flip(u, dims=[1])
            u, ld = layer.inverse(u, cond)
            log_det = log_det + ld
        return u, log_det


class PriorProjection(nn.Module):
    """Conv map from bottleneck content features to prior (mu, log_sigma)."""

    def __init__(
        self,
        in_dim: int = 32,
        latent_dim: int = LATENT_DIM,
        kernel: int = 5,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.latent_dim = latent_dim
        self.proj = nn.Conv1d(in_dim, 2 * latent_dim, kernel, padding=kernel // 2)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, bottleneck: torch.Tensor):
        """bottleneck [B, 32, T] -> (mu_theta, log_sigma_theta) each [B, D, T]."""
        if bottleneck.ndim != 3 or bottleneck.shape[1] != self.in_dim:
            raise InputError(
                f"prior projection expects [B, {self.in_dim}, T], got {tuple(bottleneck.shape)}"
            )
        mu, log_sigma = torch.chunk(self.proj(bottleneck), 2, dim=1)
        return mu, torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def _style_tensor(style, dtype=torch.float32) -> torch.Tensor:
    if isinstance(style, SpeakerEmbedding):
        style = style.vector
    if isinstance(style, np.ndarray):
        style = torch.from_numpy(np.ascontiguousarray(style))
    return style.to(dtype)


def posterior_encode(
    x_lin, s, model: PosteriorEncoder, rng_seed: int | None = None
) -> LatentPosterior:
    """Encode one utterance to its latent posterior; rng_seed None means eps = 0."""
    if not bool(model.is_trained):
        raise StateError("posterior encoder is untrained; run pretrain_backbone first")
    if isinstance(x_lin, LinearSpectrogram):
        x_lin = torch.from_numpy(x_lin.values.T.astype(np.float32))
    if x_lin.ndim != 2 or x_lin.shape[0] != model.n_freq:
        raise InputError(f"x_lin must be [{model.n_freq} x frames], got {tuple(x_lin.shape)}")
    style = _style_tensor(s)
    if rng_seed is None:
        eps = torch.zeros(model.latent_dim, x_lin.shape[1])
    else:
        gen = torch.Generator().manual_seed(rng_seed)
        eps = torch.randn(model.latent_dim, x_lin.shape[1], generator=gen)
    with torch.no_grad():
        mu, log_sigma, z = model(x_lin.unsqueeze(0), style.unsqueeze(0), eps.unsqueeze(0))
    return LatentPosterior(mu_q=mu[0].T, log_sigma_q=log_sigma[0].T, z=z[0].T, eps=eps.T)


def decode(z, style, model: MelDecoder) -> MelSpectrogram:
    """Decode latents [frames x D] under a 256-d style embedding to a mel."""
    if not bool(model.is_trained):
        raise StateError("decoder is untrained; run pretrain_backbone first")
    if isinstance(z, np.ndarray):
        z = torch.from_numpy(z.astype(np.float32))
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise InputError(f"z must be [frames x {model.latent_dim}], got {tuple(z.shape)}")
    style = _style_tensor(style)
    with torch.no_grad():
        mel = model(z.T.unsqueeze(0), style.unsqueeze(0))[0]
    return MelSpectrogram(mel.T.numpy().astype(np.float64), fmin=MEL_FMIN, fmax=MEL_FMAX)


def flow_forward(z: torch.Tensor, cond, model: CouplingFlow) -> FlowOutput:
    """Run the flow on [frames x D] latents under a 256-d conditioning vector."""
    dtype = model.dtype
    cond_t = _style_tensor(cond, dtype=dtype)
    u, log_det = model(z.to(dtype).T.unsqueeze(0), cond_t.unsqueeze(0))
    return FlowOutput(transformed=u[0].T, log_det=log_det[0])


def flow_inverse(u: torch.Tensor, cond, model: CouplingFlow):
    """Invert the flow; returns (z [frames x D], inverse log_det [frames])."""
    dtype = model.dtype
    cond_t = _style_tensor(cond, dtype=dtype)
    z, log_det = model.inverse(u.to(dtype).T.unsqueeze(0), cond_t.unsqueeze(0))
    return z[0].T, log_det[0]


def gaussian_log_density(x: torch.Tensor, mu: torch.Tensor, log_sigma: torch.Tensor):
    return -0.5 * _LOG_2PI - log_sigma - 0.5 * ((x - mu) * torch.exp(-log_sigma)) ** 2


def kl_loss(post: LatentPosterior, prior: PriorStats, flow: FlowOutput) -> torch.Tensor:
    """Per-frame, per-dim mean of log q(z) - log N(f(z); prior) - log|det J|."""
    if post.z.shape != prior.mu_theta.shape or post.z.shape != flow.transformed.shape:
        raise InputError(
            f"shape mismatch: posterior {tuple(post.z.shape)}, prior {tuple(prior.mu_theta.shape)}, "
            f"flow {tuple(flow.transformed.shape)}"
        )
    dims = post.z.shape[1]
    log_q = gaussian_log_density(post.z, post.mu_q, post.log_sigma_q)
    log_p = gaussian_log_density(flow.transformed, prior.mu_theta, prior.log_sigma_theta)
    return (log_q - log_p).mean() - flow.log_det.mean() / dims


def prior_stats(bottleneck, model: PriorProjection) -> PriorStats:
    """Map bottleneck content [frames x 32] to per-frame prior stats."""
    if isinstance(bottleneck, np.ndarray):
        bottleneck = torch.from_numpy(bottleneck)
    if bottleneck.ndim != 2 or bottleneck.shape[1] != model.in_dim:
        raise InputError(f"bottleneck must be [frames x {model.in_dim}], got {tuple(bottleneck.shape)}")
    mu, log_sigma = model(bottleneck.to(model.dtype).T.unsqueeze(0))
    return PriorStats(mu_theta=mu[0].T, log_sigma_theta=log_sigma[0].T)


@dataclass
class BackbonePretrainConfig:
    steps: int = 2500
    batch_size: int = 16
    segment_frames: int = 48
    lr: float = 1e-3
    beta: float = 0.01  # weight of KL(q || N(0, I))
    seed: int = 0


@dataclass
class BackboneParams:
    """Posterior encoder + decoder, frozen after pretraining."""

    posterior: PosteriorEncoder
    decoder: MelDecoder
    frozen: bool = True


@dataclass
class BackboneReport:
    final_loss: float
    val_recon_l1: float
    steps: int


def standard_kl(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """Per-dim mean KL(N(mu, sigma) || N(0, 1))."""
    return (0.5 * (torch.exp(2.0 * log_sigma) + mu**2 - 1.0) - log_sigma).mean()


def pretrain_backbone(
    manifest,
    speaker_encoder: SpeakerEncoder,
    config: BackbonePretrainConfig | None = None,
    features=None,
):
    """Train posterior encoder + decoder with L1 reconstruction + beta * KL.

    The speaker encoder must already be pretrained (frozen); speaker
    embeddings are computed once per utterance from clean mels. Returns
    (BackboneParams, BackboneReport).
    """
    from .encoders import _entries_from
    from .features import compute_feature_set

    if speaker_encoder is None or not bool(speaker_encoder.is_trained):
        raise StateError("pretrain_backbone requires a pretrained speaker encoder")
    config = config or BackbonePretrainConfig()
    feats = features if features is not None else compute_feature_set(_entries_from(manifest))

    train_idx = feats.indices("train")
    val_idx = feats.indices("val") or train_idx[:4]
    if not train_idx:
        raise InputError("manifest has no train-split entries")

    styles = {}
    with torch.no_grad():
        for i in set(train_idx) | set(val_idx):
            mel_t = torch.from_numpy(feats.utterances[i].mel.T.astype(np.float32))
            styles[i] = speaker_encoder(mel_t.unsqueeze(0))[0]

    torch.manual_seed(config.seed)
    posterior = PosteriorEncoder()
    decoder = MelDecoder()
    opt = torch.optim.Adam(list(posterior.parameters()) + list(decoder.parameters()), lr=config.lr)

    seg = config.segment_frames
    final_loss = float("nan")
    for step in range(1, config.steps + 1):
        gen = torch.Generator().manual_seed(config.seed * 2_000_003 + step)
        idx = torch.randint(len(train_idx), (config.batch_size,), generator=gen)
        xs, mels, ss = [], [], []
        for j in idx.tolist():
            i = train_idx[j]
            utt = feats.utterances[i]
            t = utt.n_frames
            start = int(torch.randint(max(t - seg, 0) + 1, (1,), generator=gen))
            xs.append(utt.x_lin[:, start : start + seg])
            mel_seg = utt.mel[start : start + seg].T.astype(np.float32)
            mels.append(torch.from_numpy(mel_seg))
            ss.append(styles[i])
        x = torch.stack(xs)
        mel_target = torch.stack(mels)
        s = torch.stack(ss)
        eps = torch.randn(x.shape[0], posterior.latent_dim, seg, generator=gen)

        mu, log_sigma, z = posterior(x, s, eps)
        recon = decoder(z, s)
        loss = torch.mean(torch.abs(recon - mel_target)) + config.beta * standard_kl(mu, log_sigma)
        if not torch.isfinite(loss):
            raise StateError(f"backbone pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        final_loss = float(loss.detach())

    posterior.eval()
    decoder.eval()
    posterior.requires_grad_(False)
    decoder.requires_grad_(False)
    with torch.no_grad():
        posterior.is_trained.fill_(True)
        decoder.is_trained.fill_(True)

    val_l1 = validation_recon_l1(feats, val_idx, posterior, decoder, styles, seed=config.seed)
    return BackboneParams(posterior=posterior, decoder=decoder), BackboneReport(
        final_loss=final_loss, val_recon_l1=val_l1, steps=config.steps
    )


def validation_recon_l1(feats, indices, posterior, decoder, styles=None, seed: int = 0) -> float:
    """Mean |decode(z, s) - mel| over full validation utterances, seeded eps."""
    total = 0.0
    frames = 0
    with torch.no_grad():
        for i in indices:
            utt = feats.utterances[i]
            s = styles[i] if styles is not None else None
            if s is None:
                raise StateError("validation needs per-utterance styles")
            gen = torch.Generator().manual_seed(seed * 3_000_017 + i)
            eps = torch.randn(1, posterior.latent_dim, utt.n_frames, generator=gen)
            _, _, z = posterior(utt.x_lin.unsqueeze(0), s.unsqueeze(0), eps)
            recon = decoder(z, s.unsqueeze(0))[0]
            target = torch.from_numpy(utt.mel.T.astype(np.float32))
            total += float(torch.abs(recon - target).sum())
            frames += target.numel()
    return total / max(frames, 1)
