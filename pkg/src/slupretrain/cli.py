"""Command-line entry point: ``slupretrain <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import yaml

from . import config as C
from .alignment import parse_alignments
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SlotVocabulary, load_audio, parse_manifest
from .errors import CheckpointError, SLUError
from .experiments import SLUSplits, run_experiment, write_predictions
from .gradcheck import gradient_check
from .synth import synth_corpus
from .training import evaluate_slu, export_curves, finetune, pretrain

logger = logging.getLogger("slupretrain")


class UsageError(Exception):
    pass


@contextmanager
def staged_output(out: Path):
    """Write into ``out/.partial``; on success move its contents into ``out``,
    on failure rename it to ``out/failed``."""
    out.mkdir(parents=True, exist_ok=True)
    stage = out / ".partial"
    failed = out / "failed"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir()
    try:
        yield stage
    except BaseException:
        if failed.exists():
            shutil.rmtree(failed)
        stage.rename(failed)
        raise
    for child in sorted(stage.iterdir()):
        target = out / child.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        child.rename(target)
    stage.rmdir()
    if failed.exists():
        shutil.rmtree(failed)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(*paths):
    missing = [str(p) for p in paths if p is None or not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"missing input path(s): {', '.join(missing)}")


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint directory or a run directory holding ``model/``."""
    path = Path(path)
    if (path / "meta.json").exists():
        return path
    if (path / "model" / "meta.json").exists():
        return path / "model"
    raise CheckpointError(f"no checkpoint at {path}")


def _load_slu(manifest, audio_root):
    utts = parse_manifest(manifest, audio_root)
    return utts, [(load_audio(u.audio_path).samples, u.intent) for u in utts]


# -- commands -----------------------------------------------------------------

def cmd_prepare_synth(cfg: C.RunConfig, stage: Path):
    corpus = synth_corpus(cfg.synth, stage, cfg.seed)
    # validators: manifests and alignments must parse
    for split, path in corpus.manifests.items():
        parse_manifest(path)
    parse_alignments(corpus.slu_alignments)
    if corpus.asr_alignments is not None:
        parse_alignments(corpus.asr_alignments)
    counts = {s: len(parse_manifest(p)) for s, p in corpus.manifests.items()}
    print(json.dumps(counts, sort_keys=True))


def cmd_pretrain(cfg: C.RunConfig, stage: Path):
    resume = cfg.inputs["resume"]
    _require(cfg.data.asr_alignments, *([resume] if resume else []))
    aligned = parse_alignments(cfg.data.asr_alignments, cfg.data.audio_root)
    pairs = [(u, load_audio(u.audio_path)) for u in aligned]
    n_valid = int(cfg.data.asr_valid_fraction * len(pairs))
    order = np.random.default_rng(cfg.seed).permutation(len(pairs))
    valid_idx = set(order[:n_valid].tolist())
    train = [p for i, p in enumerate(pairs) if i not in valid_idx]
    valid = [p for i, p in enumerate(pairs) if i in valid_idx]
    model, report, vocab = pretrain(train, cfg.model, cfg.pretrain, cfg.seed, valid_corpus=valid or None,
                                    out_dir=stage / "checkpoints", resume=resume)
    save_checkpoint(model, stage / "model", meta={"stage": "pretrain", "seed": cfg.seed,
                                                  "vocab": vocab.to_dict(), "report": report.to_dict()})
    _write_json(stage / "report.json", report.to_dict())
    export_curves(report, stage / "curves.csv")
    last = {r.split: r.metrics for r in report.records if r.epoch == report.epochs[-1]}
    print(json.dumps(last, sort_keys=True))


def cmd_finetune(cfg: C.RunConfig, stage: Path):
    pretrained_path = cfg.inputs["pretrained"]
    _require(cfg.data.train_manifest, cfg.data.valid_manifest)
    pretrained = None
    if cfg.mode != "random_init":
        pretrained = load_checkpoint(resolve_checkpoint(pretrained_path))[0]
    _, train = _load_slu(cfg.data.train_manifest, cfg.data.audio_root)
    _, valid = _load_slu(cfg.data.valid_manifest, cfg.data.audio_root)
    model, report, vocab = finetune(train, valid, pretrained, cfg.mode, cfg.finetune, cfg.seed,
                                    model_config=cfg.model, out_dir=stage / "checkpoints")
    save_checkpoint(model, stage / "model", meta={"stage": "finetune", "mode": cfg.mode, "seed": cfg.seed,
                                                  "slot_vocab": vocab.to_dict(), "report": report.to_dict()})
    _write_json(stage / "report.json", report.to_dict())
    if report.records:
        export_curves(report, stage / "curves.csv")
    print(json.dumps({"mode": cfg.mode, "valid_accuracy": report.last("valid", "accuracy")}, sort_keys=True))


def cmd_evaluate(cfg: C.RunConfig, stage: Path):
    ckpt, manifest = cfg.inputs["checkpoint"], cfg.inputs["manifest"]
    _require(ckpt, manifest)
    model, doc = load_checkpoint(resolve_checkpoint(ckpt))
    if "slot_vocab" not in doc["extra"]:
        raise CheckpointError(f"{ckpt} is not a fine-tuned SLU checkpoint (no slot vocabulary)")
    vocab = SlotVocabulary.from_dict(doc["extra"]["slot_vocab"])
    utts = parse_manifest(manifest, cfg.data.audio_root)
    if not utts:
        raise ValueError(f"{manifest} has no utterances")
    metrics, preds = evaluate_slu(model, [load_audio(u.audio_path).samples for u in utts],
                                  [u.intent for u in utts], vocab, cfg.finetune.optim.batch_size)
    write_predictions(stage / "predictions.csv", utts, preds, Path(manifest).parent)
    summary = {"n": len(utts), **{k: v for k, v in metrics.items() if k != "loss"}}
    _write_json(stage / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_experiment(cfg: C.RunConfig, stage: Path):
    spec = cfg.experiment
    d = cfg.data
    _require(d.train_manifest, d.valid_manifest, d.test_manifest)
    pretrained = None
    if any(r != "random_init" for r in spec.regimes):
        pretrained = load_checkpoint(resolve_checkpoint(cfg.inputs["pretrained"]))[0]
    corpus = SLUSplits.from_manifests(d.train_manifest, d.valid_manifest, d.test_manifest, d.audio_root)
    model_config = pretrained.config if pretrained is not None else cfg.model
    result = run_experiment(spec, corpus, pretrained, model_config, stage)
    for row in result.rows():
        print(",".join(str(x) for x in row))


def cmd_gradcheck(cfg: C.RunConfig, stage: Path):
    g = cfg.gradcheck
    report = gradient_check(tolerance=float(g["tolerance"]), seed=cfg.seed, eps=float(g["eps"]),
                            n_frames=int(g["n_frames"]), max_coords_per_tensor=g["max_coords_per_tensor"])
    _write_json(stage / "gradcheck.json", {"group_errors": report.group_errors, "max_error": report.max_error,
                                           "tolerance": report.tolerance, "passed": report.passed,
                                           "n_checked": report.n_checked})
    print(report.summary())
    if not report.passed:
        raise SLUError(f"gradient check failed: max relative error {report.max_error:.3e}")


COMMANDS = {
    "prepare-synth": cmd_prepare_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
}


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--seed", type=int, help="overrides seed")
    common.add_argument("--out", type=Path, help="output directory (overrides out)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set pretrain.epochs=3")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="slupretrain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--preset", choices=["default", "compositional"])

    p = sub.add_parser("pretrain", parents=[common], help="pre-train phoneme and word modules")
    p.add_argument("--resume", type=Path, help="epoch checkpoint to continue from")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune", parents=[common], help="train an intent module")
    p.add_argument("--mode", choices=["random", "frozen", "unfreeze-word", "unfreeze-all"])
    p.add_argument("--pretrained", type=Path, help="pre-trained checkpoint or pretrain run directory")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score a fine-tuned checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("experiment", parents=[common], help="run a full/subset/wording experiment")
    p.add_argument("--spec", type=Path, help="YAML file with experiment keys")
    p.add_argument("--pretrained", type=Path)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--tolerance", type=float)
    return parser


def _flag_overrides(args) -> list[dict]:
    out = []
    if args.seed is not None:
        out.append({"seed": args.seed})
    if args.out is not None:
        out.append({"out": str(args.out)})
    cmd = args.command
    if cmd == "prepare-synth" and args.preset:
        out.append({"synth": {"preset": args.preset}})
    if cmd in ("pretrain", "finetune") and args.epochs is not None:
        out.append({"pretrain" if cmd == "pretrain" else "finetune": {"epochs": args.epochs}})
    if cmd == "pretrain" and args.resume is not None:
        out.append({"inputs": {"resume": str(args.resume)}})
    if cmd == "finetune" and args.mode:
        out.append({"finetune": {"mode": C.normalize_mode(args.mode)}})
    if cmd in ("finetune", "experiment") and args.pretrained is not None:
        out.append({"inputs": {"pretrained": str(args.pretrained)}})
    if cmd == "evaluate":
        out.append({"inputs": {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)}})
    if cmd == "gradcheck" and args.tolerance is not None:
        out.append({"gradcheck": {"tolerance": args.tolerance}})
    return out


def _check_usage(cfg: C.RunConfig, command):
    if command == "finetune" and cfg.mode != "random_init" and cfg.inputs["pretrained"] is None:
        raise UsageError(f"--pretrained is required for --mode {cfg.mode.replace('_', '-')}")
    if command == "experiment" and cfg.inputs["pretrained"] is None \
            and any(r != "random_init" for r in cfg.experiment.regimes):
        raise UsageError("--pretrained is required for experiments with pre-trained regimes")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = [C.parse_override(o) for o in args.overrides] + _flag_overrides(args)
        if args.command == "experiment" and args.spec is not None:
            overrides.insert(0, {"experiment": yaml.safe_load(args.spec.read_text()) or {}})
        tree = C.load_tree(args.config, overrides)
        cfg = C.RunConfig.from_tree(tree)
        _check_usage(cfg, args.command)
    except UsageError as e:
        parser.error(str(e))
    except (ValueError, TypeError, OSError, SLUError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        with staged_output(cfg.out) as stage:
            (stage / "config.yaml").write_text(C.dump_tree(cfg.tree))
            COMMANDS[args.command](cfg, stage)
    except (ValueError, KeyError, OSError, SLUError) as e:
        print(f"error: {e} (partial outputs in {cfg.out / 'failed'})", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
