"""Conditioning embeddings: frozen speaker embedding, deterministic content
features with a trainable bottleneck, and a trainable prompt-text embedding.

The speaker encoder is pretrained by speaker classification and then frozen;
content features are cepstral (DCT of log-mel without the energy coefficient)
plus first and second temporal differences, so they are training-free and
approximately level/speaker attenuated.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft
import torch
from torch import nn

from .errors import InputError, StateError
from .signal import MelSpectrogram, N_MELS

SPEAKER_EMBED_DIM = 256
CONTENT_DCT_COEFFS = 20  # DCT indices 1..20; index 0 (energy) is dropped
CONTENT_RAW_DIM = 3 * CONTENT_DCT_COEFFS  # coefficients + delta + delta-delta
BOTTLENECK_DIM = 32
TEXT_RAW_DIM = 512
TEXT_PROJ_DIM = 256
TEXT_EMBED_DIM = 64
TEXT_HIDDEN_DIM = 256

MIN_PRETRAIN_SPEAKERS = 8
MIN_PRETRAIN_UTTERANCES = 10


@dataclass(frozen=True)
class SpeakerEmbedding:
    """Utterance-level 256-d style vector."""

    vector: np.ndarray

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float32)
        if vector.shape != (SPEAKER_EMBED_DIM,):
            raise InputError(f"speaker embedding must be ({SPEAKER_EMBED_DIM},), got {vector.shape}")
        if not np.all(np.isfinite(vector)):
            raise InputError("speaker embedding contains non-finite values")
        object.__setattr__(self, "vector", vector)


@dataclass(frozen=True)
class ContentFeatures:
    """Per-frame content descriptors: raw [T x 60], bottleneck [T x 32]."""

    raw: np.ndarray
    bottleneck: np.ndarray | None = None

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float32)
        if raw.ndim != 2 or raw.shape[1] != CONTENT_RAW_DIM:
            raise InputError(f"content features must be [frames x {CONTENT_RAW_DIM}], got {raw.shape}")
        object.__setattr__(self, "raw", raw)
        if self.bottleneck is not None:
            bn = np.asarray(self.bottleneck, dtype=np.float32)
            if bn.shape != (raw.shape[0], BOTTLENECK_DIM):
                raise InputError(f"bottleneck must be [frames x {BOTTLENECK_DIM}], got {bn.shape}")
            object.__setattr__(self, "bottleneck", bn)


@dataclass(frozen=True)
class TextEmbedding:
    """Prompt embedding: 512-d raw and 256-d projection."""

    raw: np.ndarray
    projected: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float32)
        projected = np.asarray(self.projected, dtype=np.float32)
        if raw.shape != (TEXT_RAW_DIM,) or projected.shape != (TEXT_PROJ_DIM,):
            raise InputError(
                f"text embedding dims must be ({TEXT_RAW_DIM},)/({TEXT_PROJ_DIM},), "
                f"got {raw.shape}/{projected.shape}"
            )
        if not (np.all(np.isfinite(raw)) and np.all(np.isfinite(projected))):
            raise InputError("text embedding contains non-finite values")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "projected", projected)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids over the closed vocabulary; id 0 is the OOV slot."""

    tokens: tuple[int, ...]
    oov_count: int = 0

    def __post_init__(self):
        if any(t < 0 for t in self.tokens):
            raise InputError("token ids must be nonnegative")
        if self.oov_count < 0:
            raise InputError("oov_count must be nonnegative")


class Vocabulary:
    """Closed token vocabulary; line index = token id, id 0 reserved for OOV."""

    OOV_TOKEN = "<oov>"

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens:
            raise InputError("vocabulary must be nonempty")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line.strip() for line in lines if line.strip()])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def id(self, token: str) -> int:
        return self._ids.get(token, 0)

    def __len__(self) -> int:
        return len(self.tokens)


_WORD_RE = re.compile(r"[a-z]+")


def tokenize(prompt: str, vocab: Vocabulary) -> TokenSequence:
    """Lowercase word tokenization onto the closed vocabulary."""
    words = _WORD_RE.findall(prompt.lower())
    if not words:
        raise InputError(f"prompt has no tokens: {prompt!r}")
    ids = tuple(vocab.id(w) for w in words)
    return TokenSequence(tokens=ids, oov_count=sum(1 for i in ids if i == 0))


class SpeakerEncoder(nn.Module):
    """Conv stack + mean/std pooling + linear head -> 256-d embedding."""

    def __init__(self, n_mels: int = N_MELS, hidden: int = 64, embed_dim: int = SPEAKER_EMBED_DIM):
        super().__init__()
        self.n_mels = n_mels
        self.embed_dim = embed_dim
        self.convs = nn.ModuleList(
            [
                nn.Conv1d(n_mels, hidden, 3, padding=1),
                nn.Conv1d(hidden, hidden, 3, padding=1),
                nn.Conv1d(hidden, hidden, 3, padding=1),
            ]
        )
        self.head = nn.Linear(2 * hidden, embed_dim)
        self.register_buffer("is_trained", torch.tensor(False))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """mel [B, n_mels, T] -> embedding [B, embed_dim]."""
        if mel.ndim != 3 or mel.shape[1] != self.n_mels:
            raise InputError(f"speaker encoder expects [B, {self.n_mels}, T], got {tuple(mel.shape)}")
        h = mel
        for conv in self.convs:
            h = torch.relu(conv(h))
        mean = h.mean(dim=2)
        std = torch.sqrt(h.var(dim=2, unbiased=False) + 1e-5)
        return self.head(torch.cat([mean, std], dim=1))


def _mel_tensor(mel: MelSpectrogram, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(mel.values.T)).to(dtype)


def speaker_encode(mel: MelSpectrogram, model: SpeakerEncoder) -> SpeakerEmbedding:
    """Embed one utterance's mel with the frozen speaker encoder."""
    if not bool(model.is_trained):
        raise StateError("speaker encoder is untrained; run pretrain_speaker_encoder first")
    with torch.no_grad():
        vec = model(_mel_tensor(mel).unsqueeze(0))[0]
    return SpeakerEmbedding(vec.numpy())


@dataclass
class SpeakerPretrainConfig:
    max_steps: int = 800
    batch_size: int = 32
    segment_frames: int = 48
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 100
    target_accuracy: float = 0.995
    head_scale: float = 10.0  # cosine-classifier logit scale


def _entries_from(manifest):
    from .data import ManifestEntry, load_manifest

    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    entries = list(manifest)
    if entries and not isinstance(entries[0], ManifestEntry):
        raise InputError("manifest must be a path or a sequence of ManifestEntry")
    return entries


def pretrain_speaker_encoder(manifest, config: SpeakerPretrainConfig | None = None):
    """Train the speaker encoder by speaker classification; freeze and return it.

    The classification head operates on the L2-normalized embedding (cosine
    classifier), which spreads speakers angularly; the head is discarded.
    Returns (frozen SpeakerEncoder, training-set accuracy).
    """
    from .features import load_mels_by_entry

    config = config or SpeakerPretrainConfig()
    entries = [e for e in _entries_from(manifest) if e.split == "train"]
    speakers = sorted({e.speaker_id for e in entries})
    if len(speakers) < MIN_PRETRAIN_SPEAKERS:
        raise InputError(f"need >= {MIN_PRETRAIN_SPEAKERS} speakers, got {len(speakers)}")
    per_speaker = {s: sum(1 for e in entries if e.speaker_id == s) for s in speakers}
    too_few = {s: n for s, n in per_speaker.items() if n < MIN_PRETRAIN_UTTERANCES}
    if too_few:
        raise InputError(f"need >= {MIN_PRETRAIN_UTTERANCES} utterances per speaker, short: {too_few}")

    mels = load_mels_by_entry(entries)
    labels = torch.tensor([speakers.index(e.speaker_id) for e in entries])
    mel_tensors = [_mel_tensor(m) for m in mels]

    torch.manual_seed(config.seed)
    model = SpeakerEncoder()
    head = nn.Linear(SPEAKER_EMBED_DIM, len(speakers), bias=False)
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()), lr=config.lr)

    def logits_for(batch_mel):
        emb = model(batch_mel)
        emb = emb / torch.linalg.vector_norm(emb, dim=1, keepdim=True).clamp_min(1e-8)
        w = head.weight / torch.linalg.vector_norm(head.weight, dim=1, keepdim=True).clamp_min(1e-8)
        return config.head_scale * emb @ w.T

    def train_accuracy():
        model.eval()
        correct = 0
        with torch.no_grad():
            for mel_t, label in zip(mel_tensors, labels):
                pred = int(torch.argmax(logits_for(mel_t.unsqueeze(0))[0]))
                correct += int(pred == int(label))
        model.train()
        return correct / len(mel_tensors)

    seg = config.segment_frames
    accuracy = 0.0
    for step in range(1, config.max_steps + 1):
        gen = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        idx = torch.randint(len(entries), (config.batch_size,), generator=gen)
        batch = []
        for i in idx.tolist():
            mel_t = mel_tensors[i]
            t = mel_t.shape[1]
            start = int(torch.randint(max(t - seg, 0) + 1, (1,), generator=gen))
            batch.append(mel_t[:, start : start + seg])
        batch_mel = torch.stack(batch)
        loss = nn.functional.cross_entropy(logits_for(batch_mel), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.eval_every == 0 or step == config.max_steps:
            accuracy = train_accuracy()
            if accuracy >= config.target_accuracy:
                break

    model.eval()
    model.requires_grad_(False)
    with torch.no_grad():
        model.is_trained.fill_(True)
    return model, accuracy


def content_extract(mel: MelSpectrogram) -> ContentFeatures:
    """Deterministic 60-d content descriptors per frame.

    20 DCT-of-log-mel coefficients (indices 1..20, dropping the energy
    coefficient) plus first and second temporal differences.
    """
    coeffs = scipy.fft.dct(mel.values, type=2, norm="ortho", axis=1)[:, 1 : CONTENT_DCT_COEFFS + 1]
    delta = np.zeros_like(coeffs)
    delta[1:] = coeffs[1:] - coeffs[:-1]
    delta2 = np.zeros_like(coeffs)
    delta2[1:] = delta[1:] - delta[:-1]
    return ContentFeatures(raw=np.concatenate([coeffs, delta, delta2], axis=1))


class BottleneckProjection(nn.Module):
    """Trainable per-frame linear map 60 -> 32 (float64, feeds the prior)."""

    def __init__(
        self,
        in_dim: int = CONTENT_RAW_DIM,
        out_dim: int = BOTTLENECK_DIM,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.proj = nn.Conv1d(in_dim, out_dim, 1)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        """raw [B, 60, T] -> [B, 32, T]."""
        if raw.ndim != 3 or raw.shape[1] != self.proj.in_channels:
            raise InputError(
                f"bottleneck expects [B, {self.proj.in_channels}, T], got {tuple(raw.shape)}"
            )
        return self.proj(raw.to(self.dtype))


def bottleneck_project(raw, model: BottleneckProjection) -> np.ndarray:
    """Project raw content features [T x 60] to the bottleneck [T x 32]."""
    if isinstance(raw, ContentFeatures):
        raw = raw.raw
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.shape[1] != model.proj.in_channels:
        raise InputError(f"raw content must be [frames x {model.proj.in_channels}], got {raw.shape}")
    with torch.no_grad():
        out = model(torch.from_numpy(np.ascontiguousarray(raw.T)).unsqueeze(0))[0]
    return out.numpy().T


class TextEncoder(nn.Module):
    """Embedding table + mean pooling + 2-layer MLP -> 512-d raw, linear -> 256-d."""

    def __init__(
        self,
        vocab: Vocabulary,
        embed_dim: int = TEXT_EMBED_DIM,
        hidden_dim: int = TEXT_HIDDEN_DIM,
        raw_dim: int = TEXT_RAW_DIM,
        proj_dim: int = TEXT_PROJ_DIM,
    ):
        super().__init__()
        self.vocab = vocab
        self.table = nn.Embedding(len(vocab), embed_dim)
        self.fc1 = nn.Linear(embed_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, raw_dim)
        self.proj = nn.Linear(raw_dim, proj_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None):
        """ids [B, L] (mask [B, L] for padding) -> (raw [B, 512], projected [B, 256])."""
        emb = self.table(ids)
        if mask is None:
            pooled = emb.mean(dim=1)
        else:
            m = mask.to(emb.dtype).unsqueeze(-1)
            pooled = (emb * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)
        raw = self.fc2(torch.relu(self.fc1(pooled)))
        return raw, self.proj(raw)

    def encode_prompts(self, prompts: Sequence[str]):
        """Tokenize and batch-encode prompts -> (raw [B, 512], projected [B, 256])."""
        seqs = [tokenize(p, self.vocab) for p in prompts]
        max_len = max(len(s.tokens) for s in seqs)
        ids = torch.zeros(len(seqs), max_len, dtype=torch.long)
        mask = torch.zeros(len(seqs), max_len)
        for i, s in enumerate(seqs):
            ids[i, : len(s.tokens)] = torch.tensor(s.tokens)
            mask[i, : len(s.tokens)] = 1.0
        return self.forward(ids, mask)


def text_encode(prompt: str, model: TextEncoder) -> TextEmbedding:
    """Encode one prompt to its raw/projected embeddings."""
    with torch.no_grad():
        raw, proj = model.encode_prompts([prompt])
    return TextEmbedding(raw=raw[0].numpy(), projected=proj[0].numpy())
