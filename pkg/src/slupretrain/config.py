"""Run configuration: a YAML tree merged over defaults, then CLI overrides, then the environment."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .experiments import DEFAULT_NEW_PHRASES, DEFAULT_TRAIN_PHRASES, ExperimentSpec
from .model import ModelConfig, desk_config, tiny_config
from .synth import PRESETS as SYNTH_PRESETS
from .synth import SynthSpec
from .training import MODES, FinetuneConfig, OptimConfig, PretrainConfig, PretrainLossConfig

DATA_ROOT_ENV = "SLU_DATA_ROOT"

MODEL_PRESETS = {
    "desk": desk_config,
    "tiny": lambda **kw: tiny_config(**{"num_phones": 0, "num_words": 0, "slot_sizes": (), **kw}),
    "full": ModelConfig,
}

DEFAULTS = {
    "seed": 0,
    "out": "runs/out",
    "data": {
        "root": ".",
        "audio_root": None,
        "train_manifest": "train.csv",
        "valid_manifest": "valid.csv",
        "test_manifest": "test.csv",
        "asr_alignments": "asr_alignments.jsonl",
        "asr_valid_fraction": 0.1,
    },
    "model": {"preset": "desk"},
    "pretrain": {
        "epochs": 10, "crop_seconds": 2.0, "vocab_size": 10_000, "lr": 1e-3, "batch_size": 64,
        "phone_weight": 1.0, "word_weight": 1.0,
    },
    "finetune": {"mode": "random_init", "epochs": 20, "lr": 1e-3, "batch_size": 32},
    "experiment": {
        "kind": "full", "fraction": None,
        "train_phrases": list(DEFAULT_TRAIN_PHRASES), "eval_phrases": list(DEFAULT_NEW_PHRASES),
        "regimes": list(MODES), "seeds": [0], "data_seed": 0, "eval_split": "",
    },
    "synth": {"preset": "default"},
    "gradcheck": {"tolerance": 1e-4, "eps": 1e-6, "n_frames": 50, "max_coords_per_tensor": 16},
    # per-command inputs (checkpoints and manifests), recorded with the run
    "inputs": {"pretrained": None, "resume": None, "checkpoint": None, "manifest": None},
}


def deep_merge(base: dict, update: dict, path="") -> dict:
    """Recursively overlay ``update`` on ``base``; unknown top-level sections are rejected."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        if not path and key not in base:
            raise ValueError(f"unknown config section {key!r}")
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> dict:
    """``a.b.c=value`` -> ``{"a": {"b": {"c": value}}}`` with YAML-typed value."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ValueError(f"bad override key {key!r}")
    node = yaml.safe_load(raw) if raw.strip() else None
    for part in reversed(parts):
        node = {part: node}
    return node


def _sub(tree: dict, name: str, allowed) -> dict:
    section = dict(tree.get(name) or {})
    unknown = set(section) - set(allowed)
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return section


@dataclass
class DataPaths:
    root: Path
    audio_root: Path | None
    train_manifest: Path
    valid_manifest: Path
    test_manifest: Path
    asr_alignments: Path
    asr_valid_fraction: float

    def manifest(self, split: str) -> Path:
        return {"train": self.train_manifest, "valid": self.valid_manifest, "test": self.test_manifest}[split]


@dataclass
class RunConfig:
    """Fully resolved configuration for one command invocation.

    ``tree`` is the merged plain-data form written into every output directory.
    """
    tree: dict
    seed: int
    out: Path
    data: DataPaths
    model: ModelConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    mode: str
    experiment: ExperimentSpec
    synth: SynthSpec
    gradcheck: dict
    inputs: dict

    @classmethod
    def from_tree(cls, tree: dict) -> "RunConfig":
        tree = deep_merge(DEFAULTS, tree)
        d = _sub(tree, "data", DEFAULTS["data"])
        root = Path(d["root"])

        def rel(p):
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else root / p

        data = DataPaths(root, rel(d["audio_root"]), rel(d["train_manifest"]), rel(d["valid_manifest"]),
                         rel(d["test_manifest"]), rel(d["asr_alignments"]), float(d["asr_valid_fraction"]))
        if not 0 <= data.asr_valid_fraction < 1:
            raise ValueError("data.asr_valid_fraction must be in [0, 1)")

        m = dict(tree.get("model") or {})
        preset = m.pop("preset", "desk")
        if preset not in MODEL_PRESETS:
            raise ValueError(f"unknown model preset {preset!r}; expected one of {sorted(MODEL_PRESETS)}")
        fields = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = set(m) - fields
        if unknown:
            raise ValueError(f"unknown keys in [model]: {sorted(unknown)}")
        model = MODEL_PRESETS[preset](**m)

        p = _sub(tree, "pretrain", DEFAULTS["pretrain"])
        pretrain = PretrainConfig(
            epochs=int(p["epochs"]), crop_seconds=float(p["crop_seconds"]), vocab_size=int(p["vocab_size"]),
            optim=OptimConfig(lr=float(p["lr"]), batch_size=int(p["batch_size"])),
            loss=PretrainLossConfig(float(p["phone_weight"]), float(p["word_weight"])),
        )
        f = _sub(tree, "finetune", DEFAULTS["finetune"])
        mode = normalize_mode(f["mode"])
        finetune = FinetuneConfig(epochs=int(f["epochs"]),
                                  optim=OptimConfig(lr=float(f["lr"]), batch_size=int(f["batch_size"])))

        e = _sub(tree, "experiment", DEFAULTS["experiment"])
        regimes = [normalize_mode(r) for r in e["regimes"]]
        experiment = ExperimentSpec(
            kind=e["kind"], fraction=e["fraction"], train_phrases=tuple(e["train_phrases"]),
            eval_phrases=tuple(e["eval_phrases"]), regimes={r: finetune for r in regimes},
            seeds=tuple(e["seeds"]), data_seed=int(e["data_seed"]), eval_split=e["eval_split"],
        )

        s = dict(tree.get("synth") or {})
        spreset = s.pop("preset", "default")
        if spreset not in SYNTH_PRESETS:
            raise ValueError(f"unknown synth preset {spreset!r}; expected one of {sorted(SYNTH_PRESETS)}")
        for key in ("split_fractions", "asr_words", "gap_ms", "edge_ms"):
            if key in s:
                s[key] = tuple(s[key])
        synth = SYNTH_PRESETS[spreset](**s)

        g = _sub(tree, "gradcheck", DEFAULTS["gradcheck"])
        inputs = {k: (Path(v) if v is not None else None)
                  for k, v in _sub(tree, "inputs", DEFAULTS["inputs"]).items()}
        return cls(tree, int(tree["seed"]), Path(tree["out"]), data, model, pretrain, finetune, mode,
                   experiment, synth, g, inputs)


def normalize_mode(mode: str) -> str:
    """Accept CLI spellings (``unfreeze-word``, ``random``) for regime names."""
    m = str(mode).replace("-", "_")
    m = {"random": "random_init"}.get(m, m)
    if m not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return m


def load_tree(path=None, overrides=(), env=None) -> dict:
    """Merge defaults, the YAML file at ``path`` and ``key=value`` overrides.

    The data-root environment variable, when set, replaces ``data.root``.
    """
    env = os.environ if env is None else env
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping")
        tree = deep_merge(tree, loaded)
    for item in overrides:
        tree = deep_merge(tree, item if isinstance(item, dict) else parse_override(item))
    if env.get(DATA_ROOT_ENV):
        tree["data"]["root"] = env[DATA_ROOT_ENV]
    return tree


def load_run_config(path=None, overrides=(), env=None) -> RunConfig:
    return RunConfig.from_tree(load_tree(path, overrides, env))


def dump_tree(tree: dict) -> str:
    return yaml.safe_dump(tree, sort_keys=True, default_flow_style=False)
