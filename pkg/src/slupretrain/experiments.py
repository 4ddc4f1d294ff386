"""Full-data, subset and wording-generalization experiment runners."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .checkpoint import load_checkpoint
from .dataset import SLOTS, Intent, SlotVocabulary, Utterance, load_audio, normalize_text, parse_manifest, \
    subsample_split, wording_holdout
from .errors import CheckpointError
from .model import ModelConfig, SLUModel
from .training import MODES, FinetuneConfig, OptimConfig, TrainReport, evaluate_slu, export_curves, \
    finetune, intent_accuracy

logger = logging.getLogger(__name__)

KINDS = ("full", "subset", "wording")
RESULT_COLUMNS = ("experiment", "regime", "seed", "split", "accuracy")
PREDICTION_COLUMNS = ("path", "gold_action", "gold_object", "gold_location",
                      "pred_action", "pred_object", "pred_location", "correct")

DEFAULT_TRAIN_PHRASES = ("turn on the lights", "turn off the lights", "switch on the lights")
DEFAULT_NEW_PHRASES = ("switch off the lights",)


def _finetune_from_dict(d) -> FinetuneConfig:
    d = dict(d)
    optim = d.pop("optim", {})
    if "betas" in optim:
        optim = {**optim, "betas": tuple(optim["betas"])}
    return FinetuneConfig(optim=OptimConfig(**optim), **d)


@dataclass
class ExperimentSpec:
    """What to run: experiment kind, data selection, per-regime configs, seeds.

    For wording experiments ``eval_phrases`` lists only the held-out phrases;
    evaluation covers both these and the training phrases.

    ``data_seed`` fixes the subsample so every regime and seed sees the same
    training utterances.
    """
    kind: str = "full"
    fraction: float | None = None
    train_phrases: tuple = DEFAULT_TRAIN_PHRASES
    eval_phrases: tuple = DEFAULT_NEW_PHRASES
    regimes: dict = field(default_factory=lambda: {m: FinetuneConfig() for m in MODES})
    seeds: tuple = (0,)
    data_seed: int = 0
    eval_split: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        self.train_phrases = tuple(self.train_phrases)
        self.eval_phrases = tuple(self.eval_phrases)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.regimes = {m: (c if isinstance(c, FinetuneConfig) else _finetune_from_dict(c))
                        for m, c in self.regimes.items()}
        bad = set(self.regimes) - set(MODES)
        if bad or not self.regimes:
            raise ValueError(f"regimes must be a non-empty subset of {MODES}, got {sorted(self.regimes)}")
        if self.kind == "subset":
            if self.fraction is None or not 0 < self.fraction < 1:
                raise ValueError(f"subset experiment needs a fraction in (0, 1), got {self.fraction}")
        if self.kind == "wording":
            if not self.train_phrases or not self.eval_phrases:
                raise ValueError("wording experiment needs training and held-out phrases")
            overlap = {normalize_text(p) for p in self.train_phrases} & {normalize_text(p) for p in self.eval_phrases}
            if overlap:
                raise ValueError(f"train and eval phrase lists overlap: {sorted(overlap)}")
        if not self.eval_split:
            self.eval_split = "valid" if self.kind == "wording" else "test"
        if self.eval_split not in ("valid", "test"):
            raise ValueError(f"eval_split must be 'valid' or 'test', got {self.eval_split!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "fraction": self.fraction,
            "train_phrases": list(self.train_phrases), "eval_phrases": list(self.eval_phrases),
            "regimes": {m: dataclasses.asdict(c) for m, c in self.regimes.items()},
            "seeds": list(self.seeds), "data_seed": self.data_seed, "eval_split": self.eval_split,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown experiment spec keys: {sorted(unknown)}")
        return cls(**data)


class SLUSplits:
    """Train/valid/test utterances with lazily loaded, cached audio."""

    def __init__(self, train: Sequence[Utterance], valid: Sequence[Utterance], test: Sequence[Utterance]):
        self.splits = {"train": list(train), "valid": list(valid), "test": list(test)}
        self._audio = {}

    @classmethod
    def from_manifests(cls, train, valid, test, audio_root=None) -> "SLUSplits":
        return cls(*(parse_manifest(p, audio_root) for p in (train, valid, test)))

    def __getitem__(self, split) -> list[Utterance]:
        return self.splits[split]

    def audio(self, utt: Utterance) -> np.ndarray:
        key = str(utt.audio_path)
        if key not in self._audio:
            self._audio[key] = load_audio(utt.audio_path).samples
        return self._audio[key]

    def pairs(self, utts: Sequence[Utterance]):
        return [(self.audio(u), u.intent) for u in utts]


@dataclass
class RunRecord:
    regime: str
    seed: int
    report: TrainReport
    vocab: SlotVocabulary
    accuracies: dict
    predictions: dict
    train_accuracy: float


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    runs: list
    metadata: dict

    def rows(self) -> list[tuple]:
        out = []
        for r in self.runs:
            for split, acc in r.accuracies.items():
                out.append((self.spec.kind, r.regime, r.seed, split, acc))
        return out

    def accuracy(self, regime, split, seed=None) -> list[float] | float:
        vals = [r.accuracies[split] for r in self.runs if r.regime == regime and (seed is None or r.seed == seed)]
        return vals[0] if seed is not None else vals

    def run(self, regime, seed) -> RunRecord:
        for r in self.runs:
            if r.regime == regime and r.seed == seed:
                return r
        raise KeyError((regime, seed))


# -- statistics ---------------------------------------------------------------

def chance_level(vocab: SlotVocabulary) -> float:
    """Exact-match accuracy of uniform guessing over the per-slot label sets."""
    return 1.0 / math.prod(vocab.slot_sizes)


def binomial_pvalue(successes: int, trials: int, p0: float) -> float:
    """One-sided P(X >= successes) for X ~ Binomial(trials, p0)."""
    if trials == 0:
        return 1.0
    return float(stats.binomtest(int(successes), int(trials), p0, alternative="greater").pvalue)


def sign_test(wins: Sequence[bool]) -> float:
    """One-sided sign test over seeds: p-value for 'wins happen more than half the time'."""
    wins = list(wins)
    return binomial_pvalue(sum(bool(w) for w in wins), len(wins), 0.5)


# -- persistence --------------------------------------------------------------

def write_predictions(path, utts: Sequence[Utterance], preds: Sequence[Intent], root=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for u, p in zip(utts, preds):
            audio = Path(u.audio_path)
            if root is not None:
                try:
                    audio = audio.relative_to(root)
                except ValueError:
                    pass
            w.writerow([audio.as_posix(), *u.intent.as_tuple(), *p.as_tuple(), int(p == u.intent)])
    return path


def read_predictions(path) -> tuple[list[Intent], list[Intent]]:
    """Returns ``(gold, predicted)`` intents from a predictions CSV."""
    gold, pred = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            gold.append(Intent(*(row[f"gold_{s}"] for s in SLOTS)))
            pred.append(Intent(*(row[f"pred_{s}"] for s in SLOTS)))
    return gold, pred


def recompute_accuracy(path) -> float:
    gold, pred = read_predictions(path)
    return intent_accuracy(pred, gold)


def write_results(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for exp, regime, seed, split, acc in rows:
            w.writerow([exp, regime, seed, split, repr(float(acc))])
    return path


def read_results(path) -> list[tuple]:
    with open(path, newline="") as f:
        return [(r["experiment"], r["regime"], int(r["seed"]), r["split"], float(r["accuracy"]))
                for r in csv.DictReader(f)]


def verify_results(out_dir) -> bool:
    """Check every row of ``results.csv`` against its saved predictions file."""
    out_dir = Path(out_dir)
    for _, regime, seed, split, acc in read_results(out_dir / "results.csv"):
        if recompute_accuracy(out_dir / "predictions" / f"{regime}-seed{seed}-{split}.csv") != acc:
            return False
    return True


# -- runners ------------------------------------------------------------------

def _resolve_pretrained(pretrained):
    if pretrained is None or isinstance(pretrained, SLUModel):
        return pretrained
    path = Path(pretrained)
    if not (path / "meta.json").exists():
        raise CheckpointError(f"pre-trained checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def _run(spec: ExperimentSpec, corpus: SLUSplits, pretrained, train_utts, eval_sets: dict,
         model_config: ModelConfig | None, out_dir, metadata) -> ExperimentResult:
    needs_pretrained = [m for m in spec.regimes if m != "random_init"]
    pretrained = _resolve_pretrained(pretrained)
    if needs_pretrained and pretrained is None:
        raise CheckpointError(f"regimes {needs_pretrained} need a pre-trained checkpoint")
    if "random_init" in spec.regimes and model_config is None:
        if pretrained is None:
            raise ValueError("random_init needs a model config or a pre-trained model to copy it from")
        model_config = pretrained.config
    if model_config is not None:
        model_config = dataclasses.replace(model_config, num_phones=0, num_words=0, slot_sizes=())
    if not train_utts:
        raise ValueError("no training utterances selected")

    train = corpus.pairs(train_utts)
    valid = corpus.pairs(corpus["valid"])
    out = Path(out_dir) if out_dir is not None else None
    runs = []
    for regime, cfg in spec.regimes.items():
        for seed in spec.seeds:
            model, report, vocab = finetune(
                train, valid, None if regime == "random_init" else pretrained, regime, cfg,
                seed=seed, model_config=model_config,
            )
            accs, preds = {}, {}
            for split, utts in {"train": train_utts, **eval_sets}.items():
                metrics, p = evaluate_slu(model, [corpus.audio(u) for u in utts],
                                          [u.intent for u in utts], vocab, cfg.optim.batch_size)
                accs[split], preds[split] = metrics["accuracy"], p
            train_acc = accs.pop("train")
            logger.info("%s %s seed %d: train %.4f %s", spec.kind, regime, seed, train_acc, accs)
            runs.append(RunRecord(regime, seed, report, vocab, accs, preds, train_acc))
            if out is not None:
                if report.records:
                    export_curves(report, out / "curves" / f"{regime}-seed{seed}.csv")
                for split, utts in {"train": train_utts, **eval_sets}.items():
                    write_predictions(out / "predictions" / f"{regime}-seed{seed}-{split}.csv",
                                      utts, preds[split], corpus_root(corpus))
    result = ExperimentResult(spec, runs, metadata)
    if out is not None:
        write_results(result.rows(), out / "results.csv")
        meta = {"spec": spec.to_dict(), **metadata,
                "chance": {f"{r.regime}-seed{r.seed}": chance_level(r.vocab) for r in runs},
                "train_accuracy": {f"{r.regime}-seed{r.seed}": r.train_accuracy for r in runs}}
        (out / "results.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return result


def corpus_root(corpus: SLUSplits):
    """Common directory of all audio files, used to write portable relative paths."""
    paths = [str(Path(u.audio_path).parent) for s in corpus.splits.values() for u in s]
    return Path(os.path.commonpath(paths)) if paths else None


def run_full(spec: ExperimentSpec, corpus: SLUSplits, pretrained=None, model_config=None, out_dir=None):
    """Fine-tune every regime on the whole training split; report eval-split accuracy."""
    return _run(spec, corpus, pretrained, corpus["train"], {spec.eval_split: corpus[spec.eval_split]},
                model_config, out_dir, {"n_train": len(corpus["train"])})


def run_subset(spec: ExperimentSpec, corpus: SLUSplits, pretrained=None, model_config=None, out_dir=None):
    """As ``run_full`` on a random fraction of the training split; eval splits stay whole."""
    if spec.kind != "subset":
        raise ValueError("run_subset needs a subset experiment spec")
    train = subsample_split(corpus["train"], spec.fraction, spec.data_seed)
    return _run(spec, corpus, pretrained, train, {spec.eval_split: corpus[spec.eval_split]},
                model_config, out_dir, {"fraction": spec.fraction, "n_train": len(train)})


def run_wording(spec: ExperimentSpec, corpus: SLUSplits, pretrained=None, model_config=None, out_dir=None):
    """Train on ``train_phrases`` only; report accuracy separately on the eval split's
    seen-phrase utterances (``<split>_seen``) and new-phrase utterances (``<split>_new``)."""
    if spec.kind != "wording":
        raise ValueError("run_wording needs a wording experiment spec")
    train, _ = wording_holdout(corpus["train"], spec.train_phrases, spec.eval_phrases)
    seen, new = wording_holdout(corpus[spec.eval_split], spec.train_phrases, spec.eval_phrases)
    if not new:
        raise ValueError(f"no {spec.eval_split} utterances use the new phrases {list(spec.eval_phrases)}")
    evals = {f"{spec.eval_split}_seen": seen, f"{spec.eval_split}_new": new}
    return _run(spec, corpus, pretrained, train, evals, model_config, out_dir,
                {"n_train": len(train), "new_phrases": list(spec.eval_phrases)})


def run_experiment(spec: ExperimentSpec, corpus: SLUSplits, pretrained=None, model_config=None, out_dir=None):
    runner = {"full": run_full, "subset": run_subset, "wording": run_wording}[spec.kind]
    return runner(spec, corpus, pretrained, model_config, out_dir)
