"""Fluent-Speech-Commands-style corpora: manifests, slot labels, splits, audio."""

from __future__ import annotations

import csv
import math
import os
import string
import warnings
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AudioFormatError, ManifestError, VocabularyError

SAMPLE_RATE = 16000
SLOTS = ("action", "object", "location")
MANIFEST_COLUMNS = ("speakerId", "path", "transcription", "action", "object", "location")


@dataclass(frozen=True, order=True)
class Intent:
    action: str
    object: str
    location: str

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.action, self.object, self.location)

    def __getitem__(self, slot: str) -> str:
        if slot not in SLOTS:
            raise KeyError(slot)
        return getattr(self, slot)


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    audio_path: Path
    transcription: str
    intent: Intent


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


class SlotVocabulary:
    """Per-slot value lists plus the flattened-intent index over observed triples.

    Slot values and triples are sorted lexicographically so label ids do not
    depend on corpus order.
    """

    def __init__(self, values: dict[str, Sequence[str]], intents: Iterable[Intent]):
        self.values = {slot: sorted(set(values[slot])) for slot in SLOTS}
        self.intents = sorted(set(intents), key=Intent.as_tuple)
        self._intent_index = {intent: i for i, intent in enumerate(self.intents)}
        self._value_index = {
            slot: {v: i for i, v in enumerate(vals)} for slot, vals in self.values.items()
        }
        for intent in self.intents:
            for slot in SLOTS:
                if intent[slot] not in self._value_index[slot]:
                    raise VocabularyError(f"intent {intent} uses unknown {slot} value")

    def __eq__(self, other):
        return (
            isinstance(other, SlotVocabulary)
            and self.values == other.values
            and self.intents == other.intents
        )

    def __repr__(self):
        sizes = ", ".join(f"{s}={len(self.values[s])}" for s in SLOTS)
        return f"SlotVocabulary({sizes}, intents={len(self.intents)})"

    @property
    def slot_sizes(self) -> tuple[int, int, int]:
        return tuple(len(self.values[s]) for s in SLOTS)

    @property
    def num_logits(self) -> int:
        return sum(self.slot_sizes)

    @property
    def num_intents(self) -> int:
        return len(self.intents)

    def segments(self) -> list[tuple[str, int, int]]:
        """``(slot, start, stop)`` logit ranges in slot order."""
        out, start = [], 0
        for slot, size in zip(SLOTS, self.slot_sizes):
            out.append((slot, start, start + size))
            start += size
        return out

    def value_index(self, slot: str, value: str) -> int:
        try:
            return self._value_index[slot][value]
        except KeyError:
            raise VocabularyError(f"{slot} value {value!r} not in vocabulary") from None

    def encode(self, intent: Intent) -> tuple[int, int, int]:
        return tuple(self.value_index(slot, intent[slot]) for slot in SLOTS)

    def decode(self, indices: Sequence[int]) -> Intent:
        return Intent(*(self.values[slot][int(i)] for slot, i in zip(SLOTS, indices)))

    def flatten(self, intent: Intent) -> int:
        try:
            return self._intent_index[intent]
        except KeyError:
            raise VocabularyError(f"intent {intent.as_tuple()} was not observed") from None

    def unflatten(self, index: int) -> Intent:
        if not 0 <= index < len(self.intents):
            raise VocabularyError(f"intent index {index} out of range")
        return self.intents[index]

    def to_dict(self) -> dict:
        return {
            "values": {s: list(v) for s, v in self.values.items()},
            "intents": [list(i.as_tuple()) for i in self.intents],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SlotVocabulary":
        return cls(data["values"], [Intent(*t) for t in data["intents"]])


def build_slot_vocab(utterances: Sequence[Utterance]) -> SlotVocabulary:
    if not utterances:
        raise ValueError("cannot build a slot vocabulary from an empty corpus")
    intents = [u.intent for u in utterances]
    values = {slot: [i[slot] for i in intents] for slot in SLOTS}
    return SlotVocabulary(values, intents)


def flatten_intent(intent: Intent, vocab: SlotVocabulary) -> int:
    return vocab.flatten(intent)


def unflatten_intent(index: int, vocab: SlotVocabulary) -> Intent:
    return vocab.unflatten(index)


def _norm_path(path) -> Path:
    return Path(os.path.normpath(path))


def parse_manifest(csv_path, audio_root=None) -> list[Utterance]:
    """Read a split manifest into utterances, preserving row order.

    Paths are resolved against ``audio_root`` if given, else against the
    manifest's directory.
    """
    csv_path = Path(csv_path)
    base = Path(audio_root) if audio_root is not None else csv_path.parent
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise ManifestError(f"{csv_path}: missing column {col!r}")
        extra = [c for c in header if c not in MANIFEST_COLUMNS]
        if extra:
            warnings.warn(f"{csv_path}: ignoring extra columns {extra}", stacklevel=2)
        utterances = []
        # row numbers count the header as row 1
        for row_no, row in enumerate(reader, start=2):
            if None in row or any(row.get(c) is None for c in MANIFEST_COLUMNS):
                raise ManifestError(f"{csv_path}: row {row_no} has the wrong number of fields")
            if not row["path"]:
                raise ManifestError(f"{csv_path}: row {row_no} has an empty path")
            utterances.append(
                Utterance(
                    speaker_id=row["speakerId"],
                    audio_path=_norm_path(base / row["path"]),
                    transcription=row["transcription"],
                    intent=Intent(row["action"], row["object"], row["location"]),
                )
            )
    return utterances


def write_manifest(utterances: Sequence[Utterance], csv_path, audio_root=None) -> Path:
    csv_path = Path(csv_path)
    base = Path(audio_root) if audio_root is not None else csv_path.parent
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for u in utterances:
            rel = os.path.relpath(u.audio_path, base)
            writer.writerow([u.speaker_id, Path(rel).as_posix(), u.transcription, *u.intent.as_tuple()])
    return csv_path


def subsample_split(utterances: Sequence[Utterance], fraction: float, seed: int) -> list:
    """Sample ``floor(fraction * N)`` items without replacement, keeping input order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(utterances)
    k = math.floor(fraction * n)
    if k == n:
        return list(utterances)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    return [utterances[i] for i in chosen]


_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_text(text: str) -> str:
    return " ".join(text.casefold().translate(_PUNCT).split())


def wording_holdout(utterances, train_phrases, eval_phrases):
    """Split utterances by exact (normalized) transcription match."""
    train_set = {normalize_text(p) for p in train_phrases}
    eval_set = {normalize_text(p) for p in eval_phrases}
    overlap = train_set & eval_set
    if overlap:
        raise ValueError(f"train and eval phrase lists overlap: {sorted(overlap)}")
    train, held = [], []
    for u in utterances:
        key = normalize_text(u.transcription)
        if key in train_set:
            train.append(u)
        elif key in eval_set:
            held.append(u)
    return train, held


def speakers(utterances: Iterable[Utterance]) -> set[str]:
    return {u.speaker_id for u in utterances}


def check_speaker_disjoint(splits: dict[str, Sequence[Utterance]]) -> None:
    names = list(splits)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            shared = speakers(splits[a]) & speakers(splits[b])
            if shared:
                raise ValueError(f"splits {a!r} and {b!r} share speakers {sorted(shared)[:5]}")


_PCM_DTYPES = {1: np.uint8, 2: np.int16, 4: np.int32}


def load_audio(path) -> AudioClip:
    """Read a mono 16 kHz PCM WAV file, scaled to [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except wave.Error as e:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({e})") from e
    if channels != 1:
        raise AudioFormatError(f"{path}: expected 1 channel, found {channels}")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
    if width not in _PCM_DTYPES:
        raise AudioFormatError(f"{path}: unsupported sample width {width} bytes")
    data = np.frombuffer(raw, dtype=np.dtype(_PCM_DTYPES[width]).newbyteorder("<"))
    if width == 1:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64) / float(2 ** (8 * width - 1))
    return AudioClip(samples.astype(np.float32), rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM."""
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
