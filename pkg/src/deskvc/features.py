"""Per-utterance feature cache shared by the training stages.

Features are computed once from the WAV files: linear spectrogram (posterior
input), log-mel (speaker encoder / reconstruction target), and raw content
descriptors. Mels are kept as numpy so the resize augmentation can run on
them; model-facing tensors are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import ManifestEntry
from .encoders import content_extract
from .errors import InputError
from .signal import MelSpectrogram, Waveform, load_wav, mel_spectrogram, stft_linear


@dataclass
class UtteranceFeatures:
    entry: ManifestEntry
    x_lin: torch.Tensor  # [641, T] float32
    mel: np.ndarray  # [T, 80] float64
    content: torch.Tensor  # [60, T] float32

    @property
    def n_frames(self) -> int:
        return self.x_lin.shape[1]

    def mel_spectrogram(self) -> MelSpectrogram:
        return MelSpectrogram(self.mel)


@dataclass
class FeatureSet:
    utterances: list[UtteranceFeatures]
    speakers: list[str]

    def indices(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(len(self.utterances)))
        return [i for i, u in enumerate(self.utterances) if u.entry.split == split]

    def speaker_label(self, index: int) -> int:
        return self.speakers.index(self.utterances[index].entry.speaker_id)


def features_for_waveform(wav: Waveform) -> tuple[torch.Tensor, np.ndarray, torch.Tensor]:
    """(x_lin [641, T], mel [T, 80], content [60, T]) for one waveform."""
    lin = stft_linear(wav)
    mel = mel_spectrogram(lin)
    content = content_extract(mel)
    return (
        torch.from_numpy(lin.values.T.astype(np.float32)),
        mel.values,
        torch.from_numpy(content.raw.T.astype(np.float32)),
    )


def compute_feature_set(entries: list[ManifestEntry]) -> FeatureSet:
    if not entries:
        raise InputError("manifest has no entries")
    utterances = []
    for entry in entries:
        x_lin, mel, content = features_for_waveform(load_wav(entry.path))
        utterances.append(UtteranceFeatures(entry=entry, x_lin=x_lin, mel=mel, content=content))
    return FeatureSet(utterances=utterances, speakers=sorted({e.speaker_id for e in entries}))


def load_mels_by_entry(entries: list[ManifestEntry]) -> list[MelSpectrogram]:
    return [mel_spectrogram(stft_linear(load_wav(e.path))) for e in entries]
