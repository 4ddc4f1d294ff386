"""Phoneme -> word -> intent network with discardable pre-training heads."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .dataset import Intent, SlotVocabulary
from .sinc import SincFrontend


@dataclass
class ModelConfig:
    sample_rate: int = 16000
    sinc_filters: int = 80
    sinc_length: int = 401
    sinc_stride: int = 80
    sinc_hop: int = 10
    sinc_min_band_hz: float = 50.0
    conv_channels: tuple = (60, 60)
    conv_widths: tuple = (5, 5)
    conv_strides: tuple = (2, 2)
    phoneme_hidden: int = 128
    phoneme_pools: tuple = (1, 2)
    word_hidden: int = 128
    word_pools: tuple = (2, 1)
    bidirectional: bool = True
    intent_hidden: int = 128
    intent_bidirectional: bool = True
    dropout: float = 0.5
    num_phones: int = 0
    num_words: int = 0
    slot_sizes: tuple = ()

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if not (len(self.conv_channels) == len(self.conv_widths) == len(self.conv_strides)):
            raise ValueError("conv_channels, conv_widths and conv_strides must have equal length")
        if self.bidirectional and (self.phoneme_hidden % 2 or self.word_hidden % 2):
            raise ValueError("bidirectional stacks need an even hidden size")
        if any(w % 2 == 0 for w in self.conv_widths):
            raise ValueError("conv widths must be odd")

    @property
    def phone_downsample(self) -> int:
        return self.sinc_stride * math.prod(self.conv_strides) * math.prod(self.phoneme_pools)

    @property
    def word_downsample(self) -> int:
        return self.phone_downsample * math.prod(self.word_pools)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def tiny_config(**overrides) -> ModelConfig:
    """A few-thousand-parameter configuration for gradient checks and unit tests."""
    cfg = dict(
        sinc_filters=4, sinc_length=33, sinc_stride=8, sinc_hop=4,
        conv_channels=(6, 6), conv_widths=(3, 3), conv_strides=(2, 1),
        phoneme_hidden=8, phoneme_pools=(1, 2), word_hidden=8, word_pools=(2, 1),
        intent_hidden=8, dropout=0.0, num_phones=5, num_words=4, slot_sizes=(2, 3, 2),
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def desk_config(**overrides) -> ModelConfig:
    """Laptop-sized configuration used for the synthetic experiments."""
    cfg = dict(
        sinc_filters=24, sinc_length=101, sinc_stride=80, sinc_hop=10,
        conv_channels=(32, 32), conv_widths=(5, 3), conv_strides=(2, 2),
        phoneme_hidden=64, phoneme_pools=(1, 1), word_hidden=64, word_pools=(2, 1),
        intent_hidden=64, dropout=0.1,
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def _ceil_div(a, b):
    return -(-a // b)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, width, stride):
        super().__init__()
        self.stride = stride
        self.conv = nn.Conv1d(in_ch, out_ch, width, stride=stride, padding=width // 2)

    def forward(self, x):
        return F.gelu(self.conv(x))


class RecurrentBlock(nn.Module):
    """GRU layer, then average pooling over time, then dropout on the output."""

    def __init__(self, in_dim, hidden, pool, dropout, bidirectional):
        super().__init__()
        per_dir = hidden // 2 if bidirectional else hidden
        self.rnn = nn.GRU(in_dim, per_dir, batch_first=True, bidirectional=bidirectional)
        self.pool = pool
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, lengths):
        # x: (B, T, D); lengths: (B,) int64 on cpu
        T = x.shape[1]
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        if self.pool > 1:
            out = F.avg_pool1d(out.transpose(1, 2), self.pool, self.pool, ceil_mode=True).transpose(1, 2)
            lengths = _ceil_div(lengths, self.pool)
        return self.dropout(out), lengths


class IntentModule(nn.Module):
    """Recurrent layer, per-frame linear map to slot logits, max over valid frames."""

    def __init__(self, in_dim, hidden, num_logits, bidirectional=False):
        super().__init__()
        self.rnn = nn.GRU(in_dim, hidden, batch_first=True, bidirectional=bidirectional)
        self.linear = nn.Linear(hidden * (2 if bidirectional else 1), num_logits)

    def frame_logits(self, h_word, lengths):
        T = h_word.shape[1]
        packed = pack_padded_sequence(h_word, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        return self.linear(out)

    def forward(self, h_word, lengths):
        return masked_max_over_time(self.frame_logits(h_word, lengths), lengths)


def _mask_frames(x, lengths):
    # x: (B, C, T)
    if int(lengths.min()) >= x.shape[-1]:
        return x
    valid = torch.arange(x.shape[-1])[None, :] < lengths[:, None]
    return x * valid[:, None, :].to(x.dtype)


def masked_max_over_time(frames, lengths):
    """Elementwise max over the first ``lengths[b]`` frames of each sequence."""
    if frames.shape[1] == 0 or bool((lengths < 1).any()):
        raise ValueError("intent pooling needs at least one frame per sequence")
    T = frames.shape[1]
    valid = torch.arange(T)[None, :] < lengths[:, None]
    masked = frames.masked_fill(~valid[:, :, None].to(frames.device), float("-inf"))
    return masked.max(dim=1).values


def affine_logits(h, weight, bias):
    """Per-frame ``W h + b`` for ``h`` of shape (B, T, H) and ``weight`` of shape (K, H)."""
    if h.shape[-1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ValueError(
            f"head expects {weight.shape[1]}-dim features and {weight.shape[0]} outputs, "
            f"got features of dim {h.shape[-1]} and bias of size {bias.shape[0]}"
        )
    return h @ weight.transpose(0, 1) + bias


class SLUModel(nn.Module):
    """Three-stage model: audio -> h_phoneme -> h_word -> slot logits.

    ``phoneme_head`` and ``word_head`` exist only for pre-training and are
    never on the intent path. Heads and the intent module are ``None`` when
    their output sizes are zero in the config.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.sinc = SincFrontend(
            num_filters=c.sinc_filters, length=c.sinc_length, stride=c.sinc_stride,
            hop=c.sinc_hop, sample_rate=c.sample_rate, min_band_hz=c.sinc_min_band_hz,
        )
        self.conv = nn.ModuleList()
        in_ch = c.sinc_filters
        for ch, w, s in zip(c.conv_channels, c.conv_widths, c.conv_strides):
            self.conv.append(ConvBlock(in_ch, ch, w, s))
            in_ch = ch
        self.phoneme_rnn = nn.ModuleList()
        in_dim = in_ch
        for pool in c.phoneme_pools:
            self.phoneme_rnn.append(RecurrentBlock(in_dim, c.phoneme_hidden, pool, c.dropout, c.bidirectional))
            in_dim = c.phoneme_hidden
        self.word_rnn = nn.ModuleList()
        for pool in c.word_pools:
            self.word_rnn.append(RecurrentBlock(in_dim, c.word_hidden, pool, c.dropout, c.bidirectional))
            in_dim = c.word_hidden
        self.phoneme_head = nn.Linear(c.phoneme_hidden, c.num_phones) if c.num_phones else None
        self.word_head = nn.Linear(c.word_hidden, c.num_words) if c.num_words else None
        self.intent = IntentModule(c.word_hidden, c.intent_hidden, sum(c.slot_sizes), c.intent_bidirectional) if c.slot_sizes else None

    # -- layer groups ----------------------------------------------------

    def group_modules(self) -> "OrderedDict[str, nn.Module]":
        """Named layer groups, bottom-up; absent heads are omitted."""
        groups = OrderedDict(sinc=self.sinc)
        for i, m in enumerate(self.conv, 1):
            groups[f"conv{i}"] = m
        for i, m in enumerate(self.phoneme_rnn, 1):
            groups[f"phoneme-rnn{i}"] = m
        for i, m in enumerate(self.word_rnn, 1):
            groups[f"word-rnn{i}"] = m
        if self.intent is not None:
            groups["intent"] = self.intent
        if self.phoneme_head is not None:
            groups["phoneme-head"] = self.phoneme_head
        if self.word_head is not None:
            groups["word-head"] = self.word_head
        return groups

    def layer_groups(self) -> "OrderedDict[str, list[str]]":
        """Group name -> fully qualified parameter names."""
        out = OrderedDict()
        for name, module in self.group_modules().items():
            prefix = _module_prefix(self, module)
            out[name] = [f"{prefix}.{p}" for p, _ in module.named_parameters()]
        return out

    def pretrained_groups(self) -> list[str]:
        """Groups below the intent module, bottom-up."""
        return [g for g in self.group_modules() if g not in ("intent", "phoneme-head", "word-head")]

    # -- length bookkeeping ----------------------------------------------

    def phone_frames(self, n_samples):
        t = self.sinc.num_frames(n_samples)
        for block in self.conv:
            t = _ceil_div(t, block.stride)
        for block in self.phoneme_rnn:
            t = _ceil_div(t, block.pool)
        return t

    def word_frames(self, n_samples):
        t = self.phone_frames(n_samples)
        for block in self.word_rnn:
            t = _ceil_div(t, block.pool)
        return t

    # -- forward passes --------------------------------------------------

    def phoneme_forward(self, audio, lengths=None):
        """Return ``(h_phoneme, frame_lengths)``; ``lengths`` are valid sample counts."""
        if audio.dim() != 2:
            raise ValueError("audio must have shape (batch, samples)")
        n = audio.shape[1]
        if lengths is None:
            lengths = torch.full((audio.shape[0],), n, dtype=torch.long)
        lengths = torch.as_tensor(lengths, dtype=torch.long).cpu()
        if int(lengths.min()) < self.config.sinc_stride or self.phone_frames(n) < 1:
            raise ValueError(
                f"input of {int(lengths.min())} samples is shorter than one frame "
                f"({self.config.sinc_stride} samples)"
            )
        # frames past each sequence's end are zeroed so outputs do not depend
        # on how much padding the batch carries
        x = self.sinc(audio)
        t = torch.as_tensor([self.sinc.num_frames(int(v)) for v in lengths])
        x = _mask_frames(x, t)
        for block in self.conv:
            x = block(x)
            t = _ceil_div(t, block.stride)
            x = _mask_frames(x, t)
        x = x.transpose(1, 2)
        t = torch.clamp(t, min=1)
        for block in self.phoneme_rnn:
            x, t = block(x, t)
        return x, t

    def word_forward(self, h_phoneme, lengths=None):
        """Return ``(h_word, frame_lengths)`` from phoneme-stack features."""
        if h_phoneme.shape[-1] != self.config.phoneme_hidden:
            raise ValueError(
                f"word stack expects {self.config.phoneme_hidden}-dim phoneme features, "
                f"got {h_phoneme.shape[-1]}"
            )
        if lengths is None:
            lengths = torch.full((h_phoneme.shape[0],), h_phoneme.shape[1], dtype=torch.long)
        x, t = h_phoneme, torch.as_tensor(lengths, dtype=torch.long).cpu()
        for block in self.word_rnn:
            x, t = block(x, t)
        return x, t

    def phoneme_logits(self, h_phoneme):
        return affine_logits(h_phoneme, self.phoneme_head.weight, self.phoneme_head.bias)

    def word_logits(self, h_word):
        return affine_logits(h_word, self.word_head.weight, self.word_head.bias)

    def intent_forward(self, h_word, lengths=None):
        if lengths is None:
            lengths = torch.full((h_word.shape[0],), h_word.shape[1], dtype=torch.long)
        return self.intent(h_word, torch.as_tensor(lengths, dtype=torch.long).cpu())

    def forward(self, audio, lengths=None):
        """Slot logits of shape (B, sum(slot_sizes))."""
        h_p, t = self.phoneme_forward(audio, lengths)
        h_w, t = self.word_forward(h_p, t)
        return self.intent_forward(h_w, t)

    def pretrain_forward(self, audio):
        """Phoneme and word logits for fixed-length crops."""
        h_p, t = self.phoneme_forward(audio)
        h_w, _ = self.word_forward(h_p, t)
        return self.phoneme_logits(h_p), self.word_logits(h_w)

    # -- head management -------------------------------------------------

    def discard_pretraining_heads(self):
        self.phoneme_head = None
        self.word_head = None
        self.config = dataclasses.replace(self.config, num_phones=0, num_words=0)
        return self

    def attach_intent_module(self, slot_sizes, seed=0):
        """Replace the intent module with a freshly initialised one."""
        slot_sizes = tuple(int(s) for s in slot_sizes)
        ref = next(self.parameters())
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.intent = IntentModule(self.config.word_hidden, self.config.intent_hidden, sum(slot_sizes),
                                       self.config.intent_bidirectional)
        self.intent.to(dtype=ref.dtype, device=ref.device)
        self.config = dataclasses.replace(self.config, slot_sizes=slot_sizes)
        return self


def _module_prefix(root, module):
    for name, m in root.named_modules():
        if m is module:
            return name
    raise KeyError("module not found")


def build_model(config: ModelConfig, seed: int = 0) -> SLUModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return SLUModel(config)


def predict_intent_indices(slot_logits, slot_sizes):
    """Per-slot argmax within each logit segment (ties go to the lowest index)."""
    if slot_logits.shape[-1] != sum(slot_sizes):
        raise ValueError(f"expected {sum(slot_sizes)} logits, got {slot_logits.shape[-1]}")
    out, start = [], 0
    for size in slot_sizes:
        # torch.argmax tie-breaking is unspecified; resolve explicitly
        seg = slot_logits[..., start:start + size]
        is_max = seg == seg.max(dim=-1, keepdim=True).values
        idx = torch.arange(size, device=seg.device).expand_as(seg)
        out.append(torch.where(is_max, idx, size).min(dim=-1).values)
        start += size
    return torch.stack(out, dim=-1)


def predict_intent(slot_logits, vocab: SlotVocabulary) -> list[Intent]:
    """Decode a (B, D) or (D,) logit tensor into intents."""
    logits = torch.as_tensor(slot_logits)
    single = logits.dim() == 1
    idx = predict_intent_indices(logits.reshape(-1, logits.shape[-1]), vocab.slot_sizes)
    intents = [vocab.decode(row.tolist()) for row in idx]
    return intents[0] if single else intents
