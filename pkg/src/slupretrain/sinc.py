"""Band-pass filterbank front-end with learnable cutoff frequencies."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def effective_cutoffs(low_hz, band_hz, sample_rate, min_band_hz):
    """Map raw parameters to cutoffs with ``0 <= f1 < f2 <= nyquist``.

    ``min_band_hz`` must be positive for the strict inequality to hold.
    """
    nyquist = sample_rate / 2.0
    f1 = torch.clamp(torch.abs(low_hz), max=nyquist - min_band_hz)
    f2 = torch.clamp(f1 + torch.abs(band_hz) + min_band_hz, max=nyquist)
    return f1, f2


def materialize_sinc_filters(low_hz, band_hz, length, sample_rate=16000, min_band_hz=50.0):
    """Return the ``(C, length)`` filter bank for raw cutoff tensors of shape ``(C,)``.

    Each filter is a Hamming-windowed difference of two ideal low-pass
    responses, scaled by ``1 / sample_rate`` so that the pass-band gain is
    close to one.
    """
    if length % 2 != 1:
        raise ValueError(f"filter length must be odd, got {length}")
    f1, f2 = effective_cutoffs(low_hz, band_hz, sample_rate, min_band_hz)
    dtype, device = f1.dtype, f1.device
    # built from |n| so that tap k and tap L-1-k are bit-identical
    n = torch.abs(torch.arange(length, dtype=dtype, device=device) - (length - 1) / 2)
    t = n / sample_rate
    window = 0.54 + 0.46 * torch.cos(2 * torch.pi * n / max(length - 1, 1))
    f1, f2 = f1[:, None], f2[:, None]
    band = 2 * f2 * torch.sinc(2 * f2 * t) - 2 * f1 * torch.sinc(2 * f1 * t)
    return window * band / sample_rate


class SincFrontend(nn.Module):
    """Sinc filterbank followed by log frame energy and per-frame layer norm.

    Filters run with hop ``hop``; squared outputs are averaged over
    ``stride // hop`` hops so each output frame covers ``stride`` samples.
    """

    def __init__(self, num_filters=80, length=401, stride=80, hop=10,
                 sample_rate=16000, min_band_hz=50.0, low_hz=30.0, high_hz=7800.0):
        super().__init__()
        if stride % hop:
            raise ValueError("stride must be a multiple of hop")
        self.length = length
        self.stride = stride
        self.hop = hop
        self.sample_rate = sample_rate
        self.min_band_hz = min_band_hz
        edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_filters + 1))
        self.low_hz = nn.Parameter(torch.tensor(edges[:-1], dtype=torch.float32))
        band = np.maximum(np.diff(edges) - min_band_hz, 0.0)
        self.band_hz = nn.Parameter(torch.tensor(band, dtype=torch.float32))
        self.norm = nn.LayerNorm(num_filters)

    def filters(self):
        return materialize_sinc_filters(
            self.low_hz, self.band_hz, self.length, self.sample_rate, self.min_band_hz
        )

    def num_frames(self, n_samples):
        return (-(-n_samples // self.hop)) // (self.stride // self.hop)

    def forward(self, audio):
        # audio: (B, N) -> (B, C, N // stride)
        w = self.filters()
        y = F.conv1d(audio[:, None, :], w[:, None, :], stride=self.hop, padding=self.length // 2)
        k = self.stride // self.hop
        energy = F.avg_pool1d(y * y, kernel_size=k, stride=k)
        feats = torch.log(energy + 1e-5)
        return self.norm(feats.transpose(1, 2)).transpose(1, 2)

    def extra_repr(self):
        return f"filters={self.low_hz.numel()}, length={self.length}, stride={self.stride}, hop={self.hop}"
