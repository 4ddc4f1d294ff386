"""Forced-alignment ingestion, pre-training vocabularies and random-crop targets."""

from __future__ import annotations

import bisect
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dataset import SAMPLE_RATE, AudioClip
from .errors import AlignmentError

SILENCE = "sil"
IGNORE_INDEX = -100
# labels aligners emit for non-speech
_SILENCE_LABELS = {"", "sil", "sp", "<eps>", "<sil>"}
# word/phone tier edge tolerance, seconds
COVER_SLACK = 0.010


@dataclass(frozen=True)
class LabeledInterval:
    label: str
    start: float
    end: float

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise AlignmentError(
                f"interval {self.label!r} has invalid bounds [{self.start}, {self.end})"
            )


@dataclass
class AlignedUtterance:
    audio_path: Path
    words: list[LabeledInterval]
    phones: list[LabeledInterval]
    utt_id: str = ""

    def __post_init__(self):
        if not self.utt_id:
            self.utt_id = Path(self.audio_path).stem
        _check_tier(self.words, self.utt_id, "words")
        _check_tier(self.phones, self.utt_id, "phones")
        for w in self.words:
            if not _covered(w, self.phones):
                raise AlignmentError(
                    f"{self.utt_id}: word {w.label!r} [{w.start}, {w.end}) is not covered by phones"
                )

    @property
    def end_time(self) -> float:
        ends = [i.end for i in self.words] + [i.end for i in self.phones]
        return max(ends, default=0.0)

    def to_record(self, base=None) -> dict:
        path = self.audio_path if base is None else os.path.relpath(self.audio_path, base)
        return {
            "path": Path(path).as_posix(),
            "words": [{"label": i.label, "start": i.start, "end": i.end} for i in self.words],
            "phones": [{"label": i.label, "start": i.start, "end": i.end} for i in self.phones],
        }


def _check_tier(intervals, utt_id, tier):
    for prev, cur in zip(intervals, intervals[1:]):
        if cur.start < prev.start:
            raise AlignmentError(f"{utt_id}: {tier} tier not sorted at {cur.label!r}")
        if cur.start < prev.end:
            raise AlignmentError(
                f"{utt_id}: {tier} tier intervals {prev.label!r} and {cur.label!r} overlap"
            )


def _covered(word: LabeledInterval, phones: Sequence[LabeledInterval]) -> bool:
    """True if the speech phones inside the word span it, up to COVER_SLACK at edges/gaps."""
    inside = [
        p for p in phones
        if p.label != SILENCE and p.end > word.start and p.start < word.end
    ]
    if not inside:
        return False
    if inside[0].start > word.start + COVER_SLACK or inside[-1].end < word.end - COVER_SLACK:
        return False
    return all(b.start - a.end <= COVER_SLACK for a, b in zip(inside, inside[1:]))


def _intervals(items, utt_id, tier, drop_silence):
    out = []
    for item in items:
        label = str(item["label"])
        if label.strip().lower() in _SILENCE_LABELS:
            if drop_silence:
                continue
            label = SILENCE
        try:
            out.append(LabeledInterval(label, float(item["start"]), float(item["end"])))
        except AlignmentError as e:
            raise AlignmentError(f"{utt_id}: {tier} tier: {e}") from None
    return out


def parse_alignments(path, audio_root=None) -> list[AlignedUtterance]:
    """Read a JSON-lines alignment file.

    Silence words are dropped; silence phones are kept under the label ``sil``.
    """
    path = Path(path)
    base = Path(audio_root) if audio_root is not None else path.parent
    corpus = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                audio = rec["path"]
                words, phones = rec["words"], rec["phones"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise AlignmentError(f"{path}:{line_no}: malformed record ({e})") from None
            utt_id = f"{Path(audio).stem}@{line_no}"
            corpus.append(
                AlignedUtterance(
                    audio_path=Path(os.path.normpath(base / audio)),
                    words=_intervals(words, utt_id, "words", drop_silence=True),
                    phones=_intervals(phones, utt_id, "phones", drop_silence=False),
                    utt_id=utt_id,
                )
            )
    return corpus


def write_alignments(corpus: Sequence[AlignedUtterance], path, audio_root=None) -> Path:
    path = Path(path)
    base = Path(audio_root) if audio_root is not None else path.parent
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for utt in corpus:
            f.write(json.dumps(utt.to_record(base)) + "\n")
    return path


@dataclass
class PretrainVocab:
    words: list[str]
    phones: list[str]
    ignore_index: int = IGNORE_INDEX
    _word_ids: dict = field(init=False, repr=False)
    _phone_ids: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._word_ids = {w: i for i, w in enumerate(self.words)}
        self._phone_ids = {p: i for i, p in enumerate(self.phones)}
        if 0 <= self.ignore_index < max(len(self.words), len(self.phones)):
            raise ValueError("ignore_index collides with a label id")

    @property
    def silence_id(self) -> int:
        return self._phone_ids[SILENCE]

    def word_id(self, word: str) -> int:
        """Id of ``word``, or ``ignore_index`` if out of vocabulary."""
        return self._word_ids.get(word, self.ignore_index)

    def phone_id(self, phone: str) -> int:
        """Id of ``phone``, or ``ignore_index`` if it never occurred in the vocabulary corpus.

        Held-out validation audio may contain phones absent from the training
        portion; their frames are excluded from the loss like OOV words.
        """
        return self._phone_ids.get(phone, self.ignore_index)

    def to_dict(self) -> dict:
        return {"words": list(self.words), "phones": list(self.phones), "ignore_index": self.ignore_index}

    @classmethod
    def from_dict(cls, data) -> "PretrainVocab":
        return cls(list(data["words"]), list(data["phones"]), int(data["ignore_index"]))


def build_pretrain_vocab(corpus: Sequence[AlignedUtterance], k: int = 10_000) -> PretrainVocab:
    """Keep the ``k`` most frequent words (ties broken lexicographically) and all phones."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w.label for utt in corpus for w in utt.words)
    words = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]
    phones = sorted({p.label for utt in corpus for p in utt.phones} - {SILENCE})
    return PretrainVocab(words, [SILENCE] + phones)


@dataclass
class CropSample:
    audio: np.ndarray
    phone_targets: np.ndarray
    word_targets: np.ndarray
    start: int


def _frame_labels(intervals, ids, centers_sec, default):
    starts = [i.start for i in intervals]
    out = np.full(len(centers_sec), default, dtype=np.int64)
    for j, t in enumerate(centers_sec):
        k = bisect.bisect_right(starts, t) - 1
        if k >= 0 and t < intervals[k].end:
            out[j] = ids[k]
    return out


def frame_centers(start: int, n_frames: int, downsample: int) -> np.ndarray:
    """Sample index at the center of each output frame."""
    return start + np.arange(n_frames) * downsample + downsample // 2


def sample_crop(
    utt: AlignedUtterance,
    audio: AudioClip,
    crop_seconds: float,
    phone_downsample: int,
    word_downsample: int,
    vocab: PretrainVocab,
    seed=None,
) -> CropSample:
    """Cut a random window and label each output frame by the interval at its center.

    The window length is rounded down to a multiple of ``word_downsample``.
    Utterances shorter than the window are used whole and zero-padded.
    """
    n = len(audio.samples)
    if n == 0:
        raise ValueError(f"{utt.utt_id}: zero-length audio")
    if word_downsample % phone_downsample:
        raise ValueError("word_downsample must be a multiple of phone_downsample")
    sr = audio.sample_rate
    crop = max(1, math.floor(crop_seconds * sr / word_downsample)) * word_downsample
    rng = np.random.default_rng(seed)
    if crop < n:
        start = int(rng.integers(0, n - crop + 1))
        window = audio.samples[start:start + crop]
    else:
        start = 0
        window = np.zeros(crop, dtype=audio.samples.dtype)
        window[:n] = audio.samples

    phone_ids = [vocab.phone_id(p.label) for p in utt.phones]
    word_ids = [vocab.word_id(w.label) for w in utt.words]
    pc = frame_centers(start, crop // phone_downsample, phone_downsample) / sr
    wc = frame_centers(start, crop // word_downsample, word_downsample) / sr
    return CropSample(
        audio=np.asarray(window, dtype=np.float32),
        phone_targets=_frame_labels(utt.phones, phone_ids, pc, vocab.silence_id),
        word_targets=_frame_labels(utt.words, word_ids, wc, vocab.ignore_index),
        start=start,
    )


@dataclass
class PretrainBatch:
    audio: np.ndarray  # (B, N)
    phone_targets: np.ndarray  # (B, T_phone)
    word_targets: np.ndarray  # (B, T_word)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_pretrain_batches(
    corpus: Sequence[tuple[AlignedUtterance, AudioClip]],
    batch_size: int,
    crop_seconds: float,
    phone_downsample: int,
    word_downsample: int,
    vocab: PretrainVocab,
    seed: int,
    epoch: int = 0,
) -> Iterator[PretrainBatch]:
    """Yield shuffled, fixed-length crop batches for one epoch.

    Order and crop positions depend only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(corpus), seed, epoch)
    for b in range(0, len(order), batch_size):
        crops = []
        for idx in order[b:b + batch_size]:
            utt, clip = corpus[idx]
            crops.append(
                sample_crop(utt, clip, crop_seconds, phone_downsample, word_downsample, vocab,
                            seed=[seed, epoch, int(idx)])
            )
        yield PretrainBatch(
            audio=np.stack([c.audio for c in crops]),
            phone_targets=np.stack([c.phone_targets for c in crops]),
            word_targets=np.stack([c.word_targets for c in crops]),
        )
