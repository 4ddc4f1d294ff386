"""Central finite-difference check of autograd gradients for every layer group."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import ModelConfig, build_model, tiny_config
from .training import pretrain_loss, slu_loss_from_indices


@dataclass
class GradCheckReport:
    group_errors: dict
    tolerance: float
    n_checked: int

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values())

    @property
    def passed(self) -> bool:
        return math.isinf(self.tolerance) or self.max_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{g:>14s}  {e:.3e}" for g, e in self.group_errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:g}): {verdict}")
        return "\n".join(lines)


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(config: ModelConfig | None = None, tolerance: float = 1e-4, seed: int = 0,
                   eps: float = 1e-6, n_frames: int = 50, batch: int = 2,
                   max_coords_per_tensor: int | None = 16, corrupt=None) -> GradCheckReport:
    """Compare autograd gradients of the joint pre-training + SLU loss against
    central differences, in double precision with dropout disabled.

    The per-group error is ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)``.
    At most ``max_coords_per_tensor`` randomly chosen coordinates of each
    parameter tensor are perturbed (None checks every coordinate).
    ``corrupt(model)`` may install hooks that tamper with the backward pass;
    it is only active while the analytic gradient is computed.
    """
    config = config or tiny_config()
    if not (config.num_phones and config.num_words and config.slot_sizes):
        raise ValueError("gradient check needs phoneme/word heads and slot sizes")
    model = build_model(config, seed).double().eval()
    gen = torch.Generator().manual_seed(seed)
    n = n_frames * config.phone_downsample
    # round up so word frames are whole
    n = -(-n // config.word_downsample) * config.word_downsample
    audio = 0.3 * torch.randn(batch, n, generator=gen, dtype=torch.float64)
    tp, tw = model.phone_frames(n), model.word_frames(n)
    phone_t = torch.randint(0, config.num_phones, (batch, tp), generator=gen)
    word_t = torch.randint(0, config.num_words, (batch, tw), generator=gen)
    word_t[:, ::3] = -100
    gold = torch.stack([torch.randint(0, s, (batch,), generator=gen) for s in config.slot_sizes], dim=1)
    lengths = torch.tensor([n] + [n - config.word_downsample] * (batch - 1))

    def loss_fn():
        h_p, t = model.phoneme_forward(audio)
        h_w, t = model.word_forward(h_p, t)
        loss = pretrain_loss(model.phoneme_logits(h_p), phone_t, model.word_logits(h_w), word_t)
        slot = model(audio, lengths)
        return loss + slu_loss_from_indices(slot, gold, config.slot_sizes)

    handles = corrupt(model) if corrupt is not None else None
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    for h in handles or ():
        h.remove()
    analytic = {name: p.grad.detach().clone() for name, p in model.named_parameters()}

    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    errors, checked = {}, 0
    with torch.no_grad():
        for group, names in model.layer_groups().items():
            a_vals, n_vals = [], []
            for name in names:
                p = params[name]
                flat = p.view(-1)
                coords = np.arange(flat.numel())
                if max_coords_per_tensor is not None and len(coords) > max_coords_per_tensor:
                    coords = np.sort(rng.choice(coords, max_coords_per_tensor, replace=False))
                for i in coords:
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    up = loss_fn().item()
                    flat[i] = orig - eps
                    down = loss_fn().item()
                    flat[i] = orig
                    n_vals.append((up - down) / (2 * eps))
                    a_vals.append(analytic[name].view(-1)[i].item())
                checked += len(coords)
            errors[group] = _relative_error(np.array(a_vals), np.array(n_vals))
    return GradCheckReport(errors, tolerance, checked)
