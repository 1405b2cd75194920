"""Synthetic corpus generation and manifest ingestion.

Speakers are harmonic voices parameterized by base F0, spectral tilt, energy
level, and speaking rate; utterances share per-index "content" (syllable
contours and formant targets) across speakers so the corpus has parallel
structure. Prompts are rendered from a closed template with each style factor
independently dropped, mimicking partial coverage in free-text descriptions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .seeding import derive_seed
from .signal import SAMPLE_RATE, Waveform, save_wav

SPLITS = ("train", "val", "test")

BASE_F0_MIN = 120.0
BASE_F0_MAX = 280.0
PITCH_LOW_MAX = 173.0  # tertiles of the base-F0 range
PITCH_HIGH_MIN = 227.0

ENERGY_RMS = {"low": 0.045, "mid": 0.09, "high": 0.18}
RATE_VALUES = {"slow": 0.8, "mid": 1.0, "fast": 1.25}

PROMPT_DROPOUT = 0.3

PITCH_WORDS = {
    "low": ("low", "lower", "deep"),
    "medium": ("medium", "moderate"),
    "high": ("high", "higher"),
}
ENERGY_WORDS = {
    "low": ("low", "lower", "soft", "quiet"),
    "mid": ("medium", "moderate"),
    "high": ("high", "higher", "loud"),
}
SPEED_WORDS = {"slow": ("slow",), "mid": ("steady",), "fast": ("fast", "quick")}

DEFAULT_VOCAB_TOKENS = [
    "<oov>",
    "someone",
    "he",
    "she",
    "speaks",
    "with",
    "and",
    "at",
    "pitch",
    "volume",
    "speed",
    "low",
    "lower",
    "deep",
    "medium",
    "moderate",
    "high",
    "higher",
    "soft",
    "quiet",
    "loud",
    "slow",
    "steady",
    "fast",
    "quick",
]

MIN_SPEAKERS = 8
MIN_UTTERANCES = 10

_SYL_CONSONANTS = "bdgklmnprst"
_SYL_VOWELS = "aeiou"


@dataclass(frozen=True)
class ManifestEntry:
    """One corpus item: audio path (relative to the manifest), speaker, prompt."""

    audio_path: str
    speaker_id: str
    prompt_text: str = ""
    transcript: str | None = None
    split: str = "train"
    resolved_path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.audio_path:
            raise InputError("audio_path must be nonempty")
        if not self.speaker_id:
            raise InputError("speaker_id must be nonempty")
        if self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> str:
        record = {
            "audio_path": self.audio_path,
            "speaker_id": self.speaker_id,
            "prompt_text": self.prompt_text,
            "split": self.split,
        }
        if self.transcript is not None:
            record["transcript"] = self.transcript
        return json.dumps(record, sort_keys=True)

    @property
    def path(self) -> str:
        return self.resolved_path or self.audio_path


@dataclass(frozen=True)
class SynthSpeakerSpec:
    """Generator parameters for one synthetic speaker."""

    base_f0: float
    f0_jitter: float
    spectral_tilt: float  # dB/octave, negative
    energy_level: str
    rate: float
    gender_word: str

    def __post_init__(self):
        if not (BASE_F0_MIN <= self.base_f0 <= BASE_F0_MAX):
            raise InputError(f"base_f0 {self.base_f0} outside [{BASE_F0_MIN}, {BASE_F0_MAX}]")
        if self.energy_level not in ENERGY_RMS:
            raise InputError(f"energy_level must be one of {sorted(ENERGY_RMS)}")
        if self.rate <= 0:
            raise InputError("rate must be positive")

    @property
    def pitch_class(self) -> str:
        if self.base_f0 < PITCH_LOW_MAX:
            return "low"
        if self.base_f0 > PITCH_HIGH_MIN:
            return "high"
        return "medium"

    @property
    def rate_class(self) -> str:
        if self.rate < 0.9:
            return "slow"
        if self.rate > 1.1:
            return "fast"
        return "mid"


@dataclass(frozen=True)
class UtteranceContent:
    """Speaker-independent content: syllable timing, contour, formants."""

    syllables: tuple[str, ...]
    durations: tuple[float, ...]  # seconds at rate 1.0
    contour: tuple[float, ...]  # F0 multipliers per syllable
    formant_hz: tuple[float, ...]
    formant_bw: tuple[float, ...]
    formant_gain: tuple[float, ...]

    @property
    def transcript(self) -> str:
        return " ".join(self.syllables)


def make_speaker_spec(index: int, n_speakers: int, seed: int) -> SynthSpeakerSpec:
    """Deterministic speaker parameters; base F0 stratified over [120, 280]."""
    rng = np.random.default_rng(derive_seed(seed, "speaker", index))
    slot = (index + rng.uniform(0.15, 0.85)) / n_speakers
    base_f0 = BASE_F0_MIN + slot * (BASE_F0_MAX - BASE_F0_MIN)
    energy_level = list(ENERGY_RMS)[index % 3]
    rate_name = list(RATE_VALUES)[(index // 3) % 3]
    rate = RATE_VALUES[rate_name] * rng.uniform(0.97, 1.03)
    return SynthSpeakerSpec(
        base_f0=float(base_f0),
        f0_jitter=float(rng.uniform(0.004, 0.015)),
        spectral_tilt=float(rng.uniform(-12.0, -3.0)),
        energy_level=energy_level,
        rate=float(rate),
        gender_word="he" if base_f0 < 200.0 else "she",
    )


def make_content(index: int, seed: int) -> UtteranceContent:
    """Deterministic per-utterance content shared across speakers."""
    rng = np.random.default_rng(derive_seed(seed, "content", index))
    n_syl = int(rng.integers(3, 8))
    syllables = tuple(
        _SYL_CONSONANTS[rng.integers(len(_SYL_CONSONANTS))] + _SYL_VOWELS[rng.integers(len(_SYL_VOWELS))]
        for _ in range(n_syl)
    )
    return UtteranceContent(
        syllables=syllables,
        durations=tuple(float(d) for d in rng.uniform(0.2, 0.38, n_syl)),
        contour=tuple(float(c) for c in rng.uniform(0.85, 1.25, n_syl)),
        formant_hz=tuple(float(f) for f in rng.uniform(500.0, 3000.0, n_syl)),
        formant_bw=tuple(float(b) for b in rng.uniform(200.0, 500.0, n_syl)),
        formant_gain=tuple(float(g) for g in rng.uniform(2.0, 5.0, n_syl)),
    )


def render_utterance(spec: SynthSpeakerSpec, content: UtteranceContent, rng_seed: int) -> Waveform:
    """Synthesize one harmonic-source utterance for a speaker."""
    rng = np.random.default_rng(rng_seed)
    sr = SAMPLE_RATE

    durations = np.asarray(content.durations) / spec.rate
    total = float(durations.sum())
    scale = min(max(total, 1.05), 2.95) / total  # keep utterances within 1-3 s
    durations = durations * scale
    lengths = np.maximum((durations * sr).astype(int), 1)
    n = int(lengths.sum())

    syl_idx = np.repeat(np.arange(len(lengths)), lengths)
    centers = np.cumsum(lengths) - lengths / 2.0

    t = np.arange(n)
    contour = np.interp(t, centers, np.asarray(content.contour))
    knots = np.linspace(0, n - 1, 9)
    jitter_noise = np.interp(t, knots, rng.uniform(-1.0, 1.0, knots.size))
    f0 = spec.base_f0 * contour * (1.0 + spec.f0_jitter * jitter_noise)

    f_max = float(f0.max())
    n_harm = max(1, int(np.floor(7600.0 / f_max)))
    phase = 2.0 * np.pi * np.cumsum(f0) / sr

    formant_hz = np.asarray(content.formant_hz)[syl_idx]
    formant_bw = np.asarray(content.formant_bw)[syl_idx]
    formant_gain = np.asarray(content.formant_gain)[syl_idx]

    tilt_exp = spec.spectral_tilt / (20.0 * np.log10(2.0))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        fk = k * f0
        amp = float(k) ** tilt_exp * (
            1.0 + formant_gain * np.exp(-0.5 * ((fk - formant_hz) / formant_bw) ** 2)
        )
        x += amp * np.sin(k * phase + rng.uniform(0.0, 2.0 * np.pi))

    # Per-syllable raised-cosine attack/release envelope over a 0.15 floor.
    env = np.full(n, 0.15)
    edge = int(0.03 * sr)
    pos = 0
    for length in lengths:
        ramp = min(edge, length // 3)
        seg = np.ones(length)
        if ramp > 0:
            up = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            seg[:ramp] = up
            seg[-ramp:] = up[::-1]
        env[pos : pos + length] = np.maximum(seg, 0.15)
        pos += length

    x = x * env
    rms = float(np.sqrt(np.mean(x**2)))
    x = x * (ENERGY_RMS[spec.energy_level] / max(rms, 1e-12))
    peak = float(np.max(np.abs(x)))
    if peak > 0.97:
        x = x * (0.97 / peak)
    return Waveform(x)


def render_prompt(spec: SynthSpeakerSpec, rng: np.random.Generator) -> str:
    """Template prompt with each factor independently dropped (p = 0.3)."""
    keep = rng.uniform(size=4) >= PROMPT_DROPOUT
    keep_gender, keep_pitch, keep_energy, keep_speed = (bool(k) for k in keep)

    def pick(words):
        return words[rng.integers(len(words))]

    parts = [spec.gender_word if keep_gender else "someone", "speaks"]
    if keep_pitch:
        parts += ["with", pick(PITCH_WORDS[spec.pitch_class]), "pitch"]
    if keep_energy:
        parts += ["and" if keep_pitch else "with", pick(ENERGY_WORDS[spec.energy_level]), "volume"]
    if keep_speed:
        parts += ["at", pick(SPEED_WORDS[spec.rate_class]), "speed"]
    return " ".join(parts)


def synth_dataset(n_speakers: int, utt_per_speaker: int, out_dir, seed: int = 0) -> Path:
    """Generate a synthetic corpus; returns the manifest path.

    Layout: out_dir/wav/*.wav, out_dir/manifest.jsonl, out_dir/vocab.txt,
    out_dir/gen_config.json. Byte-identical for a fixed seed.
    """
    if n_speakers < MIN_SPEAKERS:
        raise InputError(f"need n_speakers >= {MIN_SPEAKERS}, got {n_speakers}")
    if utt_per_speaker < MIN_UTTERANCES:
        raise InputError(f"need utt_per_speaker >= {MIN_UTTERANCES}, got {utt_per_speaker}")

    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    contents = [make_content(j, seed) for j in range(utt_per_speaker)]
    entries: list[ManifestEntry] = []
    for i in range(n_speakers):
        spec = make_speaker_spec(i, n_speakers, seed)
        split_rng = np.random.default_rng(derive_seed(seed, "split", i))
        order = split_rng.permutation(utt_per_speaker)
        n_val = max(1, round(0.1 * utt_per_speaker))
        n_test = max(1, round(0.1 * utt_per_speaker))
        split_of = {}
        for rank, j in enumerate(order):
            split_of[int(j)] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"

        for j, content in enumerate(contents):
            wav = render_utterance(spec, content, derive_seed(seed, "render", i, j))
            rel = f"wav/spk{i:02d}_utt{j:03d}.wav"
            save_wav(out_dir / rel, wav)
            prompt_rng = np.random.default_rng(derive_seed(seed, "prompt", i, j))
            entries.append(
                ManifestEntry(
                    audio_path=rel,
                    speaker_id=f"spk{i:02d}",
                    prompt_text=render_prompt(spec, prompt_rng),
                    transcript=content.transcript,
                    split=split_of[j],
                )
            )

    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, entries)

    from .encoders import Vocabulary

    Vocabulary(DEFAULT_VOCAB_TOKENS).save(out_dir / "vocab.txt")
    (out_dir / "gen_config.json").write_text(
        json.dumps(
            {"n_speakers": n_speakers, "utt_per_speaker": utt_per_speaker, "seed": seed},
            indent=2,
        )
    )
    return manifest_path


def write_manifest(path, entries) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(entry.to_json() + "\n")


_ENTRY_FIELDS = {"audio_path", "speaker_id", "prompt_text", "transcript", "split"}


def load_manifest(path) -> list[ManifestEntry]:
    """Parse and validate a JSON-lines manifest; stable ordering.

    Malformed lines raise with their 1-based line number; missing audio files
    are collected and reported together.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    root = path.parent
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(record, dict):
            raise InputError(f"{path}: line {lineno}: expected a JSON object")
        unknown = set(record) - _ENTRY_FIELDS
        if unknown:
            raise InputError(f"{path}: line {lineno}: unknown fields {sorted(unknown)}")
        try:
            entry = ManifestEntry(
                audio_path=record.get("audio_path", ""),
                speaker_id=record.get("speaker_id", ""),
                prompt_text=record.get("prompt_text", ""),
                transcript=record.get("transcript"),
                split=record.get("split", "train"),
                resolved_path=str(root / record.get("audio_path", "")),
            )
        except InputError as exc:
            raise InputError(f"{path}: line {lineno}: {exc}") from None
        entries.append(entry)

    missing = [e.audio_path for e in entries if not Path(e.path).exists()]
    if missing:
        raise InputError(f"{path}: missing audio files: {', '.join(missing)}")
    return entries
