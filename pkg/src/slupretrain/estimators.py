"""scikit-learn style wrappers around pre-training and SLU fine-tuning."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .alignment import AlignedUtterance
from .dataset import AudioClip, Intent
from .model import ModelConfig, SLUModel, desk_config
from .training import MODES, FinetuneConfig, OptimConfig, PretrainConfig, finetune, \
    intent_accuracy, predict_slot_indices, pretrain


def check_waveforms(X, min_samples: int = 1) -> list[np.ndarray]:
    """Validate a sequence of mono waveforms; returns float32 1-D arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = list(X)
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("expected a sequence of 1-D waveforms")
    if len(X) == 0:
        raise ValueError("no waveforms given")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, AudioClip):
            x = x.samples
        a = np.asarray(x, dtype=np.float32)
        if a.ndim != 1:
            raise ValueError(f"waveform {i} has shape {a.shape}; expected 1-D mono samples")
        if len(a) < min_samples:
            raise ValueError(f"waveform {i} has {len(a)} samples, need at least {min_samples}")
        if not np.isfinite(a).all():
            raise ValueError(f"waveform {i} contains non-finite samples")
        out.append(a)
    return out


def check_intents(y, n: int | None = None) -> list[Intent]:
    """Accept ``Intent`` objects or (action, object, location) triples."""
    out = []
    for i, v in enumerate(y):
        if isinstance(v, Intent):
            out.append(v)
            continue
        v = tuple(v)
        if len(v) != 3 or not all(isinstance(s, str) for s in v):
            raise ValueError(f"label {i} is not an (action, object, location) triple: {v!r}")
        out.append(Intent(*v))
    if n is not None and len(out) != n:
        raise ValueError(f"got {len(out)} labels for {n} waveforms")
    return out


def _min_samples(config: ModelConfig) -> int:
    return config.sinc_stride


class PretrainedEncoder(TransformerMixin, BaseEstimator):
    """Phoneme + word modules trained on force-aligned speech.

    ``fit`` takes ``(AlignedUtterance, AudioClip)`` pairs; ``transform`` maps
    waveforms to word-level feature sequences of shape (frames, word_hidden).
    """

    def __init__(self, model_config: ModelConfig | None = None, epochs=10, crop_seconds=2.0,
                 vocab_size=10_000, lr=1e-3, batch_size=64, seed=0):
        self.model_config = model_config
        self.epochs = epochs
        self.crop_seconds = crop_seconds
        self.vocab_size = vocab_size
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None, X_valid=None):
        pairs = list(X)
        for i, item in enumerate(pairs):
            if not (isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], AlignedUtterance)
                    and isinstance(item[1], AudioClip)):
                raise TypeError(f"item {i} is not an (AlignedUtterance, AudioClip) pair")
        cfg = PretrainConfig(epochs=self.epochs, crop_seconds=self.crop_seconds, vocab_size=self.vocab_size,
                             optim=OptimConfig(lr=self.lr, batch_size=self.batch_size))
        self.model_, self.report_, self.vocab_ = pretrain(
            pairs, self.model_config or desk_config(), cfg, self.seed, valid_corpus=X_valid
        )
        return self

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        waves = check_waveforms(X, _min_samples(self.model_.config))
        model = self.model_.eval()
        out = []
        with torch.no_grad():
            for w in waves:
                audio = torch.as_tensor(w)[None]
                h_p, t = model.phoneme_forward(audio)
                h_w, t = model.word_forward(h_p, t)
                out.append(h_w[0].numpy())
        return out


class SLUClassifier(ClassifierMixin, BaseEstimator):
    """End-to-end intent classifier; ``mode`` selects the training regime.

    ``pretrained`` is an ``SLUModel`` or a fitted ``PretrainedEncoder`` and is
    required for every mode except ``random_init``.
    """

    def __init__(self, mode="random_init", pretrained=None, model_config: ModelConfig | None = None,
                 epochs=20, lr=1e-3, batch_size=32, seed=0):
        self.mode = mode
        self.pretrained = pretrained
        self.model_config = model_config
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _pretrained_model(self):
        p = self.pretrained
        if isinstance(p, PretrainedEncoder):
            check_is_fitted(p, "model_")
            return p.model_
        if p is not None and not isinstance(p, SLUModel):
            raise TypeError("pretrained must be an SLUModel or a fitted PretrainedEncoder")
        return p

    def fit(self, X, y, X_valid=None, y_valid=None):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        pretrained = None if self.mode == "random_init" else self._pretrained_model()
        config = self.model_config or (pretrained.config if pretrained is not None else desk_config())
        waves = check_waveforms(X, _min_samples(config))
        intents = check_intents(y, len(waves))
        valid = []
        if X_valid is not None:
            vw = check_waveforms(X_valid, _min_samples(config))
            valid = list(zip(vw, check_intents(y_valid, len(vw))))
        cfg = FinetuneConfig(epochs=self.epochs, optim=OptimConfig(lr=self.lr, batch_size=self.batch_size))
        self.model_, self.report_, self.vocab_ = finetune(
            list(zip(waves, intents)), valid, pretrained, self.mode, cfg, seed=self.seed,
            model_config=None if pretrained is not None else config,
        )
        self.classes_ = np.array(self.vocab_.intents, dtype=object)
        return self

    def predict(self, X) -> list[Intent]:
        check_is_fitted(self, "model_")
        waves = check_waveforms(X, _min_samples(self.model_.config))
        indices = predict_slot_indices(self.model_, waves, self.batch_size)
        return [self.vocab_.decode(row.tolist()) for row in indices]

    def score(self, X, y, sample_weight=None) -> float:
        """Exact-match intent accuracy (all three slots must be right)."""
        if sample_weight is not None:
            raise ValueError("sample weights are not supported")
        preds = self.predict(X)
        return intent_accuracy(preds, check_intents(y, len(preds)))
