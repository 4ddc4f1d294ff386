"""Losses, metrics, the gradual-unfreezing schedule and the two training loops."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .alignment import IGNORE_INDEX, PretrainVocab, build_pretrain_vocab, make_pretrain_batches
from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .dataset import SLOTS, Intent, SlotVocabulary
from .errors import ScheduleError, TrainingDivergedError
from .model import ModelConfig, SLUModel, build_model, predict_intent_indices

logger = logging.getLogger(__name__)

MODES = ("random_init", "frozen", "unfreeze_word", "unfreeze_all")
# crop seed for validation; never reached as a training epoch
_EVAL_EPOCH = 2**31 - 1


# -- losses -------------------------------------------------------------------

@dataclass
class PretrainLossConfig:
    phone_weight: float = 1.0
    word_weight: float = 1.0
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.phone_weight < 0 or self.word_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.phone_weight == 0 and self.word_weight == 0:
            raise ValueError("at least one loss weight must be positive")


def masked_cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """Mean cross-entropy over entries whose target is not ``ignore_index``; 0 if none."""
    logits = logits.reshape(-1, logits.shape[-1])
    targets = targets.reshape(-1)
    keep = targets != ignore_index
    if not bool(keep.any()):
        # keeps the graph connected so backward() still works
        return logits.sum() * 0.0
    return F.cross_entropy(logits[keep], targets[keep])


def pretrain_loss(phone_logits, phone_targets, word_logits, word_targets, cfg=None):
    cfg = cfg or PretrainLossConfig()
    if phone_logits.shape[:-1] != phone_targets.shape:
        raise ValueError(f"phone logits {tuple(phone_logits.shape)} vs targets {tuple(phone_targets.shape)}")
    if word_logits.shape[:-1] != word_targets.shape:
        raise ValueError(f"word logits {tuple(word_logits.shape)} vs targets {tuple(word_targets.shape)}")
    return (cfg.phone_weight * masked_cross_entropy(phone_logits, phone_targets, cfg.ignore_index)
            + cfg.word_weight * masked_cross_entropy(word_logits, word_targets, cfg.ignore_index))


def slu_loss_from_indices(slot_logits, gold, slot_sizes):
    """Sum over slots of the mean cross-entropy of each slot's logit segment."""
    if slot_logits.shape[-1] != sum(slot_sizes):
        raise ValueError(f"expected {sum(slot_sizes)} logits, got {slot_logits.shape[-1]}")
    total, start = 0.0, 0
    for k, size in enumerate(slot_sizes):
        total = total + F.cross_entropy(slot_logits[:, start:start + size], gold[:, k])
        start += size
    return total


def slu_loss(slot_logits, gold: Sequence[Intent], vocab: SlotVocabulary):
    logits = slot_logits.reshape(-1, slot_logits.shape[-1])
    if isinstance(gold, Intent):
        gold = [gold]
    idx = torch.tensor([vocab.encode(g) for g in gold], dtype=torch.long)
    return slu_loss_from_indices(logits, idx, vocab.slot_sizes)


# -- metrics ------------------------------------------------------------------

def intent_accuracy(predictions: Sequence[Intent], gold: Sequence[Intent]) -> float:
    """Fraction of utterances whose three slots are all correct."""
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predictions for {len(gold)} references")
    if not gold:
        return float("nan")
    return sum(p == g for p, g in zip(predictions, gold)) / len(gold)


def slot_accuracies(predictions, gold) -> dict[str, float]:
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predictions for {len(gold)} references")
    return {s: sum(p[s] == g[s] for p, g in zip(predictions, gold)) / max(len(gold), 1) for s in SLOTS}


def framewise_accuracy(logits, targets, ignore_index=IGNORE_INDEX):
    keep = targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        return float("nan")
    return float((logits.argmax(-1)[keep] == targets[keep]).sum()) / n


# -- unfreezing schedule ------------------------------------------------------

class UnfreezeSchedule:
    """Top-down list of pre-trained groups, unfrozen one per epoch up to ``stop_index``.

    Epoch 0 trains only the intent module; at epoch ``e`` the first
    ``min(e, stop_index)`` groups of ``order`` are also trainable. In
    ``random_init`` mode everything trains from epoch 0.
    """

    def __init__(self, order, stop_index, mode, available=None):
        if mode not in MODES:
            raise ScheduleError(f"unknown mode {mode!r}; expected one of {MODES}")
        order = list(order)
        if len(set(order)) != len(order):
            raise ScheduleError("duplicate group in schedule")
        if available is not None:
            unknown = [g for g in order if g not in available]
            if unknown:
                raise ScheduleError(f"schedule names unknown groups {unknown}")
        if not 0 <= stop_index <= len(order):
            raise ScheduleError(f"stop_index {stop_index} outside [0, {len(order)}]")
        if mode == "frozen" and stop_index != 0:
            raise ScheduleError("frozen mode requires stop_index == 0")
        if mode in ("unfreeze_all", "random_init") and stop_index != len(order):
            raise ScheduleError(f"{mode} requires stop_index == number of groups")
        if mode == "unfreeze_word":
            n_word = sum(g.startswith("word-") for g in order)
            if stop_index != n_word or any(not g.startswith("word-") for g in order[:n_word]):
                raise ScheduleError("unfreeze_word must stop right after the word-stack groups")
        self.order = order
        self.stop_index = stop_index
        self.mode = mode

    @classmethod
    def for_model(cls, model: SLUModel, mode: str) -> "UnfreezeSchedule":
        order = list(reversed(model.pretrained_groups()))
        stops = {
            "frozen": 0,
            "unfreeze_word": sum(g.startswith("word-") for g in order),
            "unfreeze_all": len(order),
            "random_init": len(order),
        }
        if mode not in stops:
            raise ScheduleError(f"unknown mode {mode!r}; expected one of {MODES}")
        return cls(order, stops[mode], mode, available=set(model.group_modules()))

    def __repr__(self):
        return f"UnfreezeSchedule(mode={self.mode!r}, stop_index={self.stop_index}, order={self.order})"


def trainable_groups(schedule: UnfreezeSchedule, epoch: int) -> set[str]:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.mode == "random_init":
        return {"intent", *schedule.order}
    return {"intent", *schedule.order[:min(epoch, schedule.stop_index)]}


def apply_trainable(model: SLUModel, groups: set[str]):
    """Set ``requires_grad`` and train/eval mode per group."""
    model.train()
    for name, module in model.group_modules().items():
        on = name in groups
        for p in module.parameters():
            p.requires_grad_(on)
        if not on:
            # frozen groups act as a fixed feature extractor: no dropout
            module.eval()


# -- report -------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    split: str
    metrics: dict


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    trainable: dict = field(default_factory=dict)

    def add(self, epoch, split, **metrics):
        if any(r.epoch == epoch and r.split == split for r in self.records):
            raise ValueError(f"duplicate record for epoch {epoch}, split {split!r}")
        self.records.append(EpochRecord(int(epoch), split, {k: float(v) for k, v in metrics.items()}))

    @property
    def epochs(self) -> list[int]:
        return sorted({r.epoch for r in self.records})

    def series(self, split, metric) -> list[float]:
        rows = sorted((r.epoch, r.metrics[metric]) for r in self.records if r.split == split and metric in r.metrics)
        return [v for _, v in rows]

    def last(self, split, metric):
        s = self.series(split, metric)
        return s[-1] if s else None

    def validate(self):
        epochs = self.epochs
        if epochs != list(range(len(epochs))):
            raise ValueError(f"epochs are not contiguous from 0: {epochs}")

    def to_dict(self) -> dict:
        return {
            "records": [dataclasses.asdict(r) for r in self.records],
            "trainable": {str(k): sorted(v) for k, v in self.trainable.items()},
        }

    @classmethod
    def from_dict(cls, data) -> "TrainReport":
        return cls(
            records=[EpochRecord(**r) for r in data["records"]],
            trainable={int(k): list(v) for k, v in data.get("trainable", {}).items()},
        )


def export_curves(report: TrainReport, path) -> Path:
    """Write ``epoch,split,metric,value`` rows (values as round-trippable reprs)."""
    report.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for r in report.records:
            for metric, value in r.metrics.items():
                w.writerow([r.epoch, r.split, metric, repr(float(value))])
    return path


def import_curves(path) -> TrainReport:
    report = TrainReport()
    index = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (int(row["epoch"]), row["split"])
            if key not in index:
                index[key] = EpochRecord(key[0], key[1], {})
                report.records.append(index[key])
            index[key].metrics[row["metric"]] = float(row["value"])
    return report


# -- configs ------------------------------------------------------------------

@dataclass
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 32
    betas: tuple = (0.9, 0.999)

    def make(self, params):
        return torch.optim.Adam(params, lr=self.lr, betas=tuple(self.betas))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _check_finite(loss, epoch, step):
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(epoch, step, value)


# -- pre-training -------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 10
    crop_seconds: float = 2.0
    vocab_size: int = 10_000
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(batch_size=64))
    loss: PretrainLossConfig = field(default_factory=PretrainLossConfig)


def _evaluate_pretrain(model, corpus, vocab, cfg: PretrainConfig, seed, loss_cfg):
    model.eval()
    c = model.config
    totals = {"loss": 0.0, "phone_correct": 0, "phone_n": 0, "word_correct": 0, "word_n": 0, "n": 0}
    with torch.no_grad():
        for batch in make_pretrain_batches(corpus, cfg.optim.batch_size, cfg.crop_seconds,
                                           c.phone_downsample, c.word_downsample, vocab, seed, epoch=_EVAL_EPOCH):
            audio = torch.as_tensor(batch.audio, dtype=_param_dtype(model))
            pt = torch.as_tensor(batch.phone_targets)
            wt = torch.as_tensor(batch.word_targets)
            pl, wl = model.pretrain_forward(audio)
            b = len(audio)
            totals["loss"] += float(pretrain_loss(pl, pt, wl, wt, loss_cfg)) * b
            totals["n"] += b
            keep = pt != vocab.ignore_index
            totals["phone_correct"] += int((pl.argmax(-1)[keep] == pt[keep]).sum())
            totals["phone_n"] += int(keep.sum())
            keep = wt != vocab.ignore_index
            totals["word_correct"] += int((wl.argmax(-1)[keep] == wt[keep]).sum())
            totals["word_n"] += int(keep.sum())
    return {
        "loss": totals["loss"] / max(totals["n"], 1),
        "phone_accuracy": totals["phone_correct"] / max(totals["phone_n"], 1),
        "word_accuracy": totals["word_correct"] / max(totals["word_n"], 1),
    }


def _param_dtype(model):
    return next(model.parameters()).dtype


def pretrain(corpus, model_config: ModelConfig, cfg: PretrainConfig | None = None, seed: int = 0,
             valid_corpus=None, vocab: PretrainVocab | None = None, out_dir=None, resume=None):
    """Jointly train phoneme and word classifiers on aligned random crops.

    ``corpus`` is a sequence of ``(AlignedUtterance, AudioClip)`` pairs.
    Returns ``(model, report, vocab)``. With ``out_dir``, a checkpoint
    (including optimizer state) is written after every epoch as
    ``out_dir/epoch-NNN``; ``resume`` continues from such a checkpoint.
    """
    cfg = cfg or PretrainConfig()
    if not corpus:
        raise ValueError("pre-training corpus is empty")
    if vocab is None:
        vocab = build_pretrain_vocab([u for u, _ in corpus], cfg.vocab_size)
    model_config = dataclasses.replace(
        model_config, num_phones=len(vocab.phones), num_words=len(vocab.words), slot_sizes=()
    )
    report = TrainReport()
    start_epoch = 0
    if resume is not None:
        model, doc = load_checkpoint(resume, expected_config=model_config)
        extra = doc["extra"]
        start_epoch = int(extra["epoch"]) + 1
        report = TrainReport.from_dict(extra["report"])
        optimizer = cfg.optim.make(model.parameters())
        restore_optimizer(optimizer, model, doc)
    else:
        model = build_model(model_config, seed)
        optimizer = cfg.optim.make(model.parameters())
    dtype = _param_dtype(model)
    c = model.config

    for epoch in range(start_epoch, cfg.epochs):
        torch.manual_seed(epoch_seed(seed, epoch))
        model.train()
        sums = {"loss": 0.0, "pc": 0, "pn": 0, "wc": 0, "wn": 0, "n": 0}
        batches = make_pretrain_batches(corpus, cfg.optim.batch_size, cfg.crop_seconds,
                                        c.phone_downsample, c.word_downsample, vocab, seed, epoch)
        for step, batch in enumerate(batches):
            audio = torch.as_tensor(batch.audio, dtype=dtype)
            pt = torch.as_tensor(batch.phone_targets)
            wt = torch.as_tensor(batch.word_targets)
            pl, wl = model.pretrain_forward(audio)
            loss = pretrain_loss(pl, pt, wl, wt, cfg.loss)
            _check_finite(loss, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            b = len(audio)
            sums["loss"] += float(loss.detach()) * b
            sums["n"] += b
            with torch.no_grad():
                keep = pt != vocab.ignore_index
                sums["pc"] += int((pl.argmax(-1)[keep] == pt[keep]).sum())
                sums["pn"] += int(keep.sum())
                keep = wt != vocab.ignore_index
                sums["wc"] += int((wl.argmax(-1)[keep] == wt[keep]).sum())
                sums["wn"] += int(keep.sum())
        report.add(epoch, "train", loss=sums["loss"] / sums["n"],
                   phone_accuracy=sums["pc"] / max(sums["pn"], 1),
                   word_accuracy=sums["wc"] / max(sums["wn"], 1))
        if valid_corpus:
            report.add(epoch, "valid", **_evaluate_pretrain(model, valid_corpus, vocab, cfg, seed, cfg.loss))
        report.trainable[epoch] = list(model.group_modules())
        logger.info("pretrain epoch %d: %s", epoch,
                    {r.split: r.metrics for r in report.records if r.epoch == epoch})
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / f"epoch-{epoch:03d}",
                            meta={"epoch": epoch, "seed": seed, "vocab": vocab.to_dict(),
                                  "report": report.to_dict(), "stage": "pretrain"},
                            optimizer=optimizer)
    model.eval()
    return model, report, vocab


# -- SLU fine-tuning ----------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 20
    optim: OptimConfig = field(default_factory=OptimConfig)


def pad_batch(clips: Sequence[np.ndarray], multiple: int, dtype=torch.float32):
    """Stack variable-length clips, zero-padded to a common multiple of ``multiple``."""
    lengths = torch.tensor([len(c) for c in clips], dtype=torch.long)
    n = int(lengths.max())
    n = -(-n // multiple) * multiple
    out = torch.zeros(len(clips), n, dtype=dtype)
    for i, c in enumerate(clips):
        out[i, :len(c)] = torch.as_tensor(c, dtype=dtype)
    return out, lengths


def slu_batches(n_items, batch_size, seed, epoch, shuffle=True):
    order = np.random.default_rng([seed, epoch]).permutation(n_items) if shuffle else np.arange(n_items)
    for b in range(0, n_items, batch_size):
        yield order[b:b + batch_size]


def predict_slot_indices(model: SLUModel, clips, batch_size=32) -> torch.Tensor:
    """Eval-mode per-slot argmax indices, shape (N, 3)."""
    was_training = model.training
    model.eval()
    dtype = _param_dtype(model)
    out = []
    with torch.no_grad():
        for idx in slu_batches(len(clips), batch_size, 0, 0, shuffle=False):
            audio, lengths = pad_batch([clips[i] for i in idx], model.config.word_downsample, dtype)
            out.append(predict_intent_indices(model(audio, lengths), model.config.slot_sizes))
    model.train(was_training)
    if not out:
        return torch.zeros(0, 3, dtype=torch.long)
    return torch.cat(out)


def evaluate_slu(model: SLUModel, clips, gold: Sequence[Intent], vocab: SlotVocabulary, batch_size=32):
    """Returns ``(metrics, predictions)`` with exact-match and per-slot accuracy.

    ``gold`` intents may use slot values outside ``vocab``; those utterances
    count as errors and are excluded from the loss.
    """
    model.eval()
    dtype = _param_dtype(model)
    preds, loss_sum, loss_n = [], 0.0, 0
    with torch.no_grad():
        for idx in slu_batches(len(clips), batch_size, 0, 0, shuffle=False):
            audio, lengths = pad_batch([clips[i] for i in idx], model.config.word_downsample, dtype)
            logits = model(audio, lengths)
            ind = predict_intent_indices(logits, vocab.slot_sizes)
            preds.extend(vocab.decode(row.tolist()) for row in ind)
            known = [i for i in range(len(idx)) if _in_vocab(gold[idx[i]], vocab)]
            if known:
                g = torch.tensor([vocab.encode(gold[idx[i]]) for i in known])
                loss_sum += float(slu_loss_from_indices(logits[known], g, vocab.slot_sizes)) * len(known)
                loss_n += len(known)
    metrics = {"loss": loss_sum / loss_n if loss_n else float("nan"),
               "accuracy": intent_accuracy(preds, list(gold))}
    metrics.update({f"{s}_accuracy": v for s, v in slot_accuracies(preds, list(gold)).items()})
    return metrics, preds


def _in_vocab(intent, vocab):
    return all(intent[s] in vocab.values[s] for s in SLOTS)


def state_fingerprint(model: SLUModel, groups) -> dict[str, bytes]:
    """Raw bytes of every parameter in ``groups``; for bit-exact freezing checks."""
    mods = model.group_modules()
    return {
        f"{g}/{n}": p.detach().cpu().numpy().tobytes()
        for g in groups for n, p in mods[g].named_parameters()
    }


def prepare_finetune_model(pretrained: SLUModel | None, vocab: SlotVocabulary, mode: str,
                           model_config: ModelConfig | None, seed: int) -> SLUModel:
    """Fresh model for ``random_init``; otherwise a copy of ``pretrained`` with heads
    dropped and a new intent module."""
    if mode == "random_init":
        if pretrained is not None:
            raise ValueError("random_init takes no pre-trained parameters")
        if model_config is None:
            raise ValueError("random_init needs a model config")
        cfg = dataclasses.replace(model_config, num_phones=0, num_words=0, slot_sizes=vocab.slot_sizes)
        model = build_model(cfg, seed)
        # same intent-module init as the pre-trained regimes
        return model.attach_intent_module(vocab.slot_sizes, seed)
    if pretrained is None:
        raise ValueError(f"mode {mode!r} needs pre-trained parameters")
    model = build_model(dataclasses.replace(pretrained.config, slot_sizes=()), seed)
    model.to(dtype=_param_dtype(pretrained))
    state = {k: v for k, v in pretrained.state_dict().items()
             if not k.startswith(("intent.", "phoneme_head.", "word_head."))}
    model.load_state_dict(state, strict=False)
    model.discard_pretraining_heads()
    return model.attach_intent_module(vocab.slot_sizes, seed)


def finetune(train, valid, pretrained: SLUModel | None, mode: str, cfg: FinetuneConfig | None = None,
             seed: int = 0, model_config: ModelConfig | None = None, vocab: SlotVocabulary | None = None,
             out_dir=None, check_frozen: bool = False, on_epoch_end=None):
    """Train the intent module (and scheduled pre-trained groups) on SLU data.

    ``train`` and ``valid`` are sequences of ``(samples, Intent)`` pairs.
    ``on_epoch_end(epoch, model, report)`` is called after each epoch; a truthy
    return value ends training. Returns ``(model, report, vocab)``.
    """
    cfg = cfg or FinetuneConfig()
    if not train:
        raise ValueError("SLU training set is empty")
    if vocab is None:
        vocab = SlotVocabulary(
            {s: [g[s] for _, g in train] for s in SLOTS}, [g for _, g in train]
        )
    model = prepare_finetune_model(pretrained, vocab, mode, model_config, seed)
    schedule = UnfreezeSchedule.for_model(model, mode)
    dtype = _param_dtype(model)
    optimizer = cfg.optim.make(model.parameters())
    clips = [np.asarray(a, dtype=np.float32) for a, _ in train]
    gold = torch.tensor([vocab.encode(g) for _, g in train], dtype=torch.long)
    v_clips = [np.asarray(a, dtype=np.float32) for a, _ in valid] if valid else []
    v_gold = [g for _, g in valid] if valid else []
    report = TrainReport()

    for epoch in range(cfg.epochs):
        groups = trainable_groups(schedule, epoch)
        apply_trainable(model, groups)
        frozen = [g for g in model.group_modules() if g not in groups]
        before = state_fingerprint(model, frozen) if check_frozen else None
        torch.manual_seed(epoch_seed(seed, epoch))
        loss_sum, correct, n = 0.0, 0, 0
        for step, idx in enumerate(slu_batches(len(clips), cfg.optim.batch_size, seed, epoch)):
            audio, lengths = pad_batch([clips[i] for i in idx], model.config.word_downsample, dtype)
            logits = model(audio, lengths)
            loss = slu_loss_from_indices(logits, gold[idx], vocab.slot_sizes)
            _check_finite(loss, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                pred = predict_intent_indices(logits, vocab.slot_sizes)
                correct += int((pred == gold[idx]).all(dim=1).sum())
            loss_sum += float(loss.detach()) * len(idx)
            n += len(idx)
        if check_frozen and state_fingerprint(model, frozen) != before:
            raise AssertionError(f"frozen parameters changed during epoch {epoch}")
        report.add(epoch, "train", loss=loss_sum / n, accuracy=correct / n)
        if v_clips:
            metrics, _ = evaluate_slu(model, v_clips, v_gold, vocab, cfg.optim.batch_size)
            report.add(epoch, "valid", **metrics)
        report.trainable[epoch] = sorted(groups)
        logger.info("finetune[%s] epoch %d: %s", mode, epoch,
                    {r.split: r.metrics for r in report.records if r.epoch == epoch})
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / f"epoch-{epoch:03d}",
                            meta={"epoch": epoch, "seed": seed, "mode": mode, "stage": "finetune",
                                  "slot_vocab": vocab.to_dict(), "report": report.to_dict()})
        if on_epoch_end is not None and on_epoch_end(epoch, model, report):
            break
    model.eval()
    return model, report, vocab


def epochs_to_threshold(report: TrainReport, threshold: float, split="valid", metric="accuracy"):
    """1-based count of epochs until ``metric`` first reaches ``threshold``; ``None`` if never."""
    for i, v in enumerate(report.series(split, metric)):
        if v >= threshold:
            return i + 1
    return None
