"""Deterministic synthetic speech-command corpora for desk-scale experiments.

Phonemes are short tone or band-noise bursts, words are 2-4 phonemes,
utterances are words separated by silence. Because the signal is built from
its own alignment, transcription, audio and intervals agree exactly.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .alignment import SILENCE, AlignedUtterance, LabeledInterval, write_alignments
from .dataset import SAMPLE_RATE, Intent, Utterance, normalize_text, write_manifest, write_wav

_LOW = (300.0, 420.0, 580.0, 800.0, 1100.0, 1500.0)
_HIGH = (2000.0, 2800.0, 3800.0, 5200.0)
_NAMES = (
    "aa", "ae", "ah", "ao", "eh", "er", "ih", "iy", "ow", "uw", "ay", "ey",
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
)
_NOISY = {"f", "k", "p", "s", "t"}


@dataclass(frozen=True)
class PhonemeSignature:
    low_hz: float
    high_hz: float
    noisy: bool


def phoneme_signature(name: str) -> PhonemeSignature:
    """Fixed acoustic signature of a phoneme name; unknown names get a hashed one."""
    if name in _NAMES:
        i = _NAMES.index(name)
        return PhonemeSignature(_LOW[i % 6], _HIGH[i // 6], name in _NOISY)
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    return PhonemeSignature(float(rng.uniform(300, 1500)), float(rng.uniform(2000, 5200)), False)


@dataclass
class Phrase:
    text: str
    intent: Intent


@dataclass
class SynthSpec:
    words: dict
    phrases: list = field(default_factory=list)
    n_speakers: int = 20
    reps: int = 1
    split_fractions: tuple = (0.6, 0.2, 0.2)
    asr_speakers: int = 0
    asr_utterances_per_speaker: int = 0
    asr_words: tuple = (2, 5)
    asr_only_words: dict = field(default_factory=dict)
    phone_ms: float = 80.0
    gap_ms: tuple = (40.0, 90.0)
    edge_ms: tuple = (60.0, 150.0)
    pitch_jitter: float = 0.08
    rate_jitter: float = 0.15
    noise: float = 0.002

    def __post_init__(self):
        self.phrases = [p if isinstance(p, Phrase) else Phrase(p["text"], Intent(**p["intent"]))
                        for p in self.phrases]
        for name, phones in {**self.words, **self.asr_only_words}.items():
            if not 2 <= len(phones) <= 4:
                raise ValueError(f"word {name!r} must have 2-4 phonemes, has {len(phones)}")
        seen = {}
        for p in self.phrases:
            key = normalize_text(p.text)
            for w in key.split():
                if w not in self.words:
                    raise ValueError(f"phrase {p.text!r} uses unknown word {w!r}")
            if key in seen and seen[key] != p.intent:
                raise ValueError(f"phrase {p.text!r} maps to two intents: {seen[key]} and {p.intent}")
            seen[key] = p.intent
        # duplicated identical templates are collapsed
        unique = {}
        for p in self.phrases:
            unique.setdefault(normalize_text(p.text), p)
        self.phrases = list(unique.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phrases"] = [{"text": p.text, "intent": asdict(p.intent)} for p in self.phrases]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        data = dict(data)
        for key in ("split_fractions", "asr_words", "gap_ms", "edge_ms"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class Speaker:
    speaker_id: str
    pitch: float
    rate: float
    gain: float


@dataclass
class SynthCorpus:
    root: Path
    manifests: dict  # split name -> manifest path
    slu_alignments: Path
    asr_alignments: Path | None


def _render_phone(sig, n, pitch, rng, sr):
    t = np.arange(n) / sr
    low = np.sin(2 * np.pi * sig.low_hz * pitch * t + rng.uniform(0, 2 * np.pi))
    if sig.noisy:
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1 / sr)
        centre = sig.high_hz * pitch
        spec[np.abs(freqs - centre) > 0.15 * centre] = 0
        high = np.fft.irfft(spec, n)
        high /= np.max(np.abs(high)) + 1e-12
        x = 0.4 * low + 0.8 * high
    else:
        high = np.sin(2 * np.pi * sig.high_hz * pitch * t + rng.uniform(0, 2 * np.pi))
        x = 0.7 * low + 0.5 * high
    ramp = min(n // 4, int(0.005 * sr))
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return x * env


def render_utterance(words, lexicon, speaker: Speaker, spec: SynthSpec, rng, sr=SAMPLE_RATE):
    """Synthesize a word sequence; return samples and the exact alignment tiers."""
    pieces, word_tier, phone_tier = [], [], []
    pos = 0

    def silence(ms_range):
        nonlocal pos
        n = int(rng.uniform(*ms_range) * sr / 1000)
        pieces.append(np.zeros(n))
        phone_tier.append((SILENCE, pos, pos + n))
        pos += n

    silence(spec.edge_ms)
    for i, word in enumerate(words):
        if i:
            silence(spec.gap_ms)
        w_start = pos
        for ph in lexicon[word]:
            dur = spec.phone_ms * speaker.rate * rng.uniform(0.85, 1.15)
            n = int(dur * sr / 1000)
            pieces.append(speaker.gain * _render_phone(phoneme_signature(ph), n, speaker.pitch, rng, sr))
            phone_tier.append((ph, pos, pos + n))
            pos += n
        word_tier.append((word, w_start, pos))
    silence(spec.edge_ms)
    audio = np.concatenate(pieces)
    audio = audio + spec.noise * rng.standard_normal(len(audio))
    to_iv = lambda tier: [LabeledInterval(lab, s / sr, e / sr) for lab, s, e in tier]  # noqa: E731
    return audio.astype(np.float32), to_iv(word_tier), to_iv(phone_tier)


def _speakers(prefix, n, spec, rng):
    out = []
    for i in range(n):
        out.append(Speaker(
            speaker_id=f"{prefix}{i:03d}",
            pitch=float(1 + rng.uniform(-spec.pitch_jitter, spec.pitch_jitter)),
            rate=float(1 + rng.uniform(-spec.rate_jitter, spec.rate_jitter)),
            gain=float(rng.uniform(0.25, 0.45)),
        ))
    return out


def _split_speakers(speakers, fractions):
    n = len(speakers)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return {
        "train": speakers[:n_train],
        "valid": speakers[n_train:n_train + n_valid],
        "test": speakers[n_train + n_valid:],
    }


def synth_corpus(spec: SynthSpec, out_dir, seed: int = 0) -> SynthCorpus:
    """Write manifests, 16-bit WAVs and JSON-lines alignments under ``out_dir``.

    Output is a pure function of ``(spec, seed)``.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lexicon = {**spec.words, **spec.asr_only_words}

    speakers = _speakers("spk", spec.n_speakers, spec, rng)
    rows, slu_align = {}, []
    for split, group in _split_speakers(speakers, spec.split_fractions).items():
        rows[split] = []
        for spk in group:
            for p_idx, phrase in enumerate(spec.phrases):
                words = normalize_text(phrase.text).split()
                for rep in range(spec.reps):
                    audio, wt, pt = render_utterance(words, lexicon, spk, spec, rng)
                    path = root / "wavs" / spk.speaker_id / f"{spk.speaker_id}_p{p_idx:03d}_r{rep}.wav"
                    write_wav(path, audio)
                    rows[split].append(Utterance(spk.speaker_id, path, phrase.text, phrase.intent))
                    slu_align.append(AlignedUtterance(path, wt, pt))

    manifests = {}
    all_rows = []
    for split, utts in rows.items():
        manifests[split] = write_manifest(utts, root / f"{split}.csv")
        all_rows.extend(utts)
    manifests["all"] = write_manifest(all_rows, root / "manifest.csv")
    slu_path = write_alignments(slu_align, root / "slu_alignments.jsonl")

    asr_path = None
    if spec.asr_speakers and spec.asr_utterances_per_speaker:
        vocab = sorted(lexicon)
        asr_align = []
        for spk in _speakers("asr", spec.asr_speakers, spec, rng):
            for k in range(spec.asr_utterances_per_speaker):
                n_words = int(rng.integers(spec.asr_words[0], spec.asr_words[1] + 1))
                words = [vocab[i] for i in rng.integers(0, len(vocab), n_words)]
                audio, wt, pt = render_utterance(words, lexicon, spk, spec, rng)
                path = root / "asr" / spk.speaker_id / f"{spk.speaker_id}_{k:04d}.wav"
                write_wav(path, audio)
                asr_align.append(AlignedUtterance(path, wt, pt))
        asr_path = write_alignments(asr_align, root / "asr_alignments.jsonl")

    (root / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return SynthCorpus(root, manifests, slu_path, asr_path)


def _intent(action, obj, location="none"):
    return Intent(action, obj, location)


# Lexicon shared by the default SLU and compositional corpora so that one
# pre-trained model serves both.
DEFAULT_LEXICON = {
    "turn": ["t", "er", "n"],
    "switch": ["s", "w", "ih"],
    "on": ["aa", "n"],
    "off": ["ao", "f"],
    "the": ["d", "ah"],
    "lights": ["l", "ay", "t"],
    "music": ["m", "uw", "k"],
    "heat": ["iy", "t"],
    "up": ["ah", "p"],
    "down": ["d", "ow", "n"],
    "in": ["ih", "n"],
    "kitchen": ["k", "ih", "eh", "n"],
    "bedroom": ["b", "eh", "r", "m"],
    "washroom": ["w", "aa", "r", "m"],
    "volume": ["r", "aa", "l", "m"],
    "increase": ["ih", "k", "r", "iy"],
    "decrease": ["d", "iy", "k", "s"],
}

# words that occur only in the ASR corpus
DEFAULT_ASR_ONLY = {
    "play": ["p", "l", "ey"],
    "stop": ["s", "t", "aa", "p"],
    "open": ["ow", "p", "eh", "n"],
    "door": ["d", "ao", "r"],
    "window": ["w", "ih", "n", "ow"],
    "red": ["r", "eh", "d"],
    "green": ["g", "r", "iy", "n"],
    "fast": ["f", "ae", "s", "t"],
}

DEFAULT_PHRASES = [
    ("turn on the lights", _intent("activate", "lights")),
    ("switch on the lights", _intent("activate", "lights")),
    ("turn off the lights", _intent("deactivate", "lights")),
    ("switch off the lights", _intent("deactivate", "lights")),
    ("turn on the music", _intent("activate", "music")),
    ("turn off the music", _intent("deactivate", "music")),
    ("turn up the heat", _intent("increase", "heat")),
    ("turn down the heat", _intent("decrease", "heat")),
    ("turn on the lights in the kitchen", _intent("activate", "lights", "kitchen")),
    ("turn off the lights in the bedroom", _intent("deactivate", "lights", "bedroom")),
    ("turn up the heat in the washroom", _intent("increase", "heat", "washroom")),
    ("turn down the heat in the kitchen", _intent("decrease", "heat", "kitchen")),
    ("increase the volume", _intent("increase", "volume")),
    ("decrease the volume", _intent("decrease", "volume")),
]


def default_spec(**overrides) -> SynthSpec:
    """Smart-home style command set plus an ASR corpus over a superset lexicon."""
    cfg = dict(
        words=dict(DEFAULT_LEXICON),
        phrases=[Phrase(t, i) for t, i in DEFAULT_PHRASES],
        n_speakers=20,
        reps=1,
        asr_speakers=30,
        asr_utterances_per_speaker=12,
        asr_only_words=dict(DEFAULT_ASR_ONLY),
    )
    cfg.update(overrides)
    return SynthSpec(**cfg)


COMPOSITIONAL_PHRASES = [
    (t, i) for t, i in DEFAULT_PHRASES
    if t in ("turn on the lights", "turn off the lights", "turn on the music", "turn off the music")
]


def compositional_spec(**overrides) -> SynthSpec:
    """Modifier (on/off) x object (lights/music) commands over the default lexicon, no ASR set."""
    cfg = dict(
        words=dict(DEFAULT_LEXICON),
        phrases=[Phrase(t, i) for t, i in COMPOSITIONAL_PHRASES],
        n_speakers=20,
        reps=2,
    )
    cfg.update(overrides)
    return SynthSpec(**cfg)


PRESETS = {"default": default_spec, "compositional": compositional_spec}
