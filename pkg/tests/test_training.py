import csv
import math

import numpy as np
import pytest
import torch

from slupretrain.alignment import IGNORE_INDEX, parse_alignments
from slupretrain.dataset import Intent, Utterance, build_slot_vocab, load_audio, parse_manifest
from slupretrain.errors import ScheduleError, TrainingDivergedError, VocabularyError
from slupretrain.model import build_model, tiny_config
from slupretrain.training import (
    MODES, FinetuneConfig, OptimConfig, PretrainConfig, PretrainLossConfig, TrainReport, UnfreezeSchedule,
    apply_trainable, epochs_to_threshold, evaluate_slu, export_curves, finetune, import_curves, intent_accuracy,
    pad_batch, pretrain, pretrain_loss, slu_batches, slu_loss, slu_loss_from_indices, state_fingerprint,
    trainable_groups,
)

from oracles import accuracy_loop, pretrain_loss_loop, slu_loss_loop

SIZES = (2, 3, 2)


# -- losses -------------------------------------------------------------------

def _logits(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def test_all_words_ignored_leaves_phone_term():
    gen = torch.Generator().manual_seed(0)
    pl, wl = _logits(gen, 2, 6, 5), _logits(gen, 2, 3, 4).requires_grad_()
    pt = torch.randint(0, 5, (2, 6), generator=gen)
    wt = torch.full((2, 3), IGNORE_INDEX)
    cfg = PretrainLossConfig(phone_weight=0.7)
    loss = pretrain_loss(pl, pt, wl, wt, cfg)
    assert loss.item() == pytest.approx(0.7 * torch.nn.functional.cross_entropy(pl.reshape(-1, 5), pt.reshape(-1)).item(),
                                        abs=1e-12)
    loss.backward()
    assert torch.isfinite(wl.grad).all() and (wl.grad == 0).all()


def test_uniform_logits_give_log_p():
    P = 7
    loss = pretrain_loss(torch.zeros(1, 4, P), torch.tensor([[0, 3, 6, 2]]),
                         torch.zeros(1, 2, 3), torch.full((1, 2), IGNORE_INDEX))
    assert loss.item() == pytest.approx(math.log(P), rel=1e-6)


def test_pretrain_loss_matches_loop_oracle():
    gen = torch.Generator().manual_seed(1)
    for _ in range(10):
        B, Tp, Tw, P, V = 2, 6, 3, 5, 4
        pl, wl = _logits(gen, B, Tp, P), _logits(gen, B, Tw, V)
        pt = torch.randint(0, P, (B, Tp), generator=gen)
        wt = torch.randint(0, V, (B, Tw), generator=gen)
        wt[torch.rand(B, Tw, generator=gen) < 0.4] = IGNORE_INDEX
        cfg = PretrainLossConfig(0.5, 2.0)
        want = pretrain_loss_loop(pl.numpy(), pt.numpy(), wl.numpy(), wt.numpy(), IGNORE_INDEX, 0.5, 2.0)
        assert pretrain_loss(pl, pt, wl, wt, cfg).item() == pytest.approx(want, abs=1e-6)


def test_pretrain_loss_ignores_logits_at_ignored_frames():
    gen = torch.Generator().manual_seed(2)
    pl, wl = _logits(gen, 1, 4, 3), _logits(gen, 1, 4, 5)
    pt, wt = torch.tensor([[0, 1, 2, 0]]), torch.tensor([[1, IGNORE_INDEX, 3, IGNORE_INDEX]])
    base = pretrain_loss(pl, pt, wl, wt)
    wl2 = wl.clone()
    wl2[0, 1] = 100.0
    wl2[0, 3] = -50.0
    assert pretrain_loss(pl, pt, wl2, wt).item() == base.item()


def test_pretrain_loss_shape_mismatch_and_weights():
    with pytest.raises(ValueError):
        pretrain_loss(torch.zeros(1, 4, 3), torch.zeros(1, 5, dtype=torch.long), torch.zeros(1, 2, 2),
                      torch.zeros(1, 2, dtype=torch.long))
    with pytest.raises(ValueError):
        pretrain_loss(torch.zeros(1, 4, 3), torch.zeros(1, 4, dtype=torch.long), torch.zeros(1, 2, 2),
                      torch.zeros(1, 3, dtype=torch.long))
    with pytest.raises(ValueError):
        PretrainLossConfig(0.0, 0.0)
    with pytest.raises(ValueError):
        PretrainLossConfig(-1.0, 1.0)


def _vocab():
    triples = [("a", "x", "k"), ("b", "y", "none"), ("a", "z", "none")]
    return build_slot_vocab([Utterance("s", f"{i}.wav", "t", Intent(*t)) for i, t in enumerate(triples)])


def test_slu_loss_uniform_is_sum_of_logs():
    v = _vocab()
    loss = slu_loss(torch.zeros(1, sum(v.slot_sizes)), [Intent("a", "x", "k")], v)
    assert loss.item() == pytest.approx(sum(math.log(s) for s in v.slot_sizes), rel=1e-6)


def test_slu_loss_large_margin_goes_to_zero():
    v = _vocab()
    gold = Intent("b", "y", "none")
    logits = torch.full((1, sum(v.slot_sizes)), -100.0)
    offs = np.cumsum((0,) + v.slot_sizes[:-1])
    for o, i in zip(offs, v.encode(gold)):
        logits[0, o + i] = 100.0
    assert slu_loss(logits, gold, v).item() < 1e-30


def test_slu_loss_matches_loop_oracle():
    gen = torch.Generator().manual_seed(3)
    for _ in range(10):
        logits = _logits(gen, 5, sum(SIZES))
        gold = torch.stack([torch.randint(0, s, (5,), generator=gen) for s in SIZES], 1)
        want = slu_loss_loop(logits.numpy(), gold.numpy(), SIZES)
        assert slu_loss_from_indices(logits, gold, SIZES).item() == pytest.approx(want, abs=1e-6)


def test_slu_loss_rejects_unknown_gold():
    v = _vocab()
    with pytest.raises(VocabularyError):
        slu_loss(torch.zeros(1, sum(v.slot_sizes)), [Intent("zzz", "x", "k")], v)


# -- accuracy -----------------------------------------------------------------

def test_intent_accuracy_cases():
    a, b = Intent("a", "x", "k"), Intent("b", "y", "none")
    assert intent_accuracy([a, b], [a, b]) == 1.0
    assert intent_accuracy([a, Intent("b", "y", "k")], [a, b]) == 0.5
    with pytest.raises(ValueError):
        intent_accuracy([a], [a, b])


def test_intent_accuracy_matches_loop_oracle():
    rng = np.random.default_rng(0)
    vals = ["a", "b"]
    for _ in range(20):
        n = int(rng.integers(1, 12))
        gold = [tuple(str(v) for v in rng.choice(vals, 3)) for _ in range(n)]
        pred = [tuple(str(v) for v in rng.choice(vals, 3)) for _ in range(n)]
        want = accuracy_loop(pred, gold)
        assert intent_accuracy([Intent(*t) for t in pred], [Intent(*t) for t in gold]) == want


# -- schedule -----------------------------------------------------------------

@pytest.fixture
def tiny_slu_model():
    m = build_model(tiny_config(), seed=0).discard_pretraining_heads()
    return m


def test_frozen_trains_intent_only(tiny_slu_model):
    s = UnfreezeSchedule.for_model(tiny_slu_model, "frozen")
    assert all(trainable_groups(s, e) == {"intent"} for e in range(10))


def test_unfreeze_word_sequence(tiny_slu_model):
    s = UnfreezeSchedule.for_model(tiny_slu_model, "unfreeze_word")
    seq = [trainable_groups(s, e) for e in range(5)]
    assert seq[0] == {"intent"}
    assert seq[1] == {"intent", "word-rnn2"}
    assert seq[2] == seq[3] == seq[4] == {"intent", "word-rnn2", "word-rnn1"}


def test_unfreeze_all_reaches_every_group(tiny_slu_model):
    s = UnfreezeSchedule.for_model(tiny_slu_model, "unfreeze_all")
    assert s.order == ["word-rnn2", "word-rnn1", "phoneme-rnn2", "phoneme-rnn1", "conv2", "conv1", "sinc"]
    assert trainable_groups(s, 7) == trainable_groups(s, 100) == set(tiny_slu_model.group_modules())


@pytest.mark.parametrize("mode", MODES)
def test_schedule_monotone_and_capped(tiny_slu_model, mode):
    s = UnfreezeSchedule.for_model(tiny_slu_model, mode)
    prev = trainable_groups(s, 0)
    for e in range(1, 12):
        cur = trainable_groups(s, e)
        assert prev <= cur and len(cur - prev) <= (1 if mode != "random_init" else 0)
        assert len(cur - {"intent"}) <= s.stop_index
        prev = cur


def test_epoch_zero_regime_equivalence(tiny_slu_model):
    sets = {m: trainable_groups(UnfreezeSchedule.for_model(tiny_slu_model, m), 0) for m in MODES}
    assert sets["frozen"] == sets["unfreeze_word"] == sets["unfreeze_all"] == {"intent"}
    assert sets["random_init"] == set(tiny_slu_model.group_modules())


def test_schedule_construction_errors():
    order = ["word-rnn2", "word-rnn1", "conv1"]
    with pytest.raises(ScheduleError, match="unknown groups"):
        UnfreezeSchedule(order + ["bogus"], 0, "frozen", available=set(order))
    with pytest.raises(ScheduleError):
        UnfreezeSchedule(order, 1, "frozen")
    with pytest.raises(ScheduleError):
        UnfreezeSchedule(order, 3, "unfreeze_word")
    with pytest.raises(ScheduleError):
        UnfreezeSchedule(order, 2, "unfreeze_all")
    with pytest.raises(ScheduleError):
        UnfreezeSchedule(order, 0, "mystery")
    with pytest.raises(ValueError):
        trainable_groups(UnfreezeSchedule(order, 0, "frozen"), -1)


def test_apply_trainable_sets_eval_and_grad(tiny_slu_model):
    apply_trainable(tiny_slu_model, {"intent", "word-rnn2"})
    mods = tiny_slu_model.group_modules()
    for name, m in mods.items():
        on = name in ("intent", "word-rnn2")
        assert m.training == on
        assert all(p.requires_grad == on for p in m.parameters())


# -- reports ------------------------------------------------------------------

def _report(epochs=20):
    rng = np.random.default_rng(0)
    r = TrainReport()
    for e in range(epochs):
        for split in ("train", "valid"):
            r.add(e, split, loss=rng.random(), accuracy=rng.random())
    return r


def test_export_row_count_round_trip_and_order(tmp_path):
    r = _report()
    export_curves(r, tmp_path / "c.csv")
    with open(tmp_path / "c.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 80
    assert import_curves(tmp_path / "c.csv").records == r.records
    for split in ("train", "valid"):
        for metric in ("loss", "accuracy"):
            eps = [int(x["epoch"]) for x in rows if x["split"] == split and x["metric"] == metric]
            assert all(a < b for a, b in zip(eps, eps[1:]))


def test_report_validation():
    r = TrainReport()
    r.add(0, "train", loss=1.0)
    with pytest.raises(ValueError, match="duplicate"):
        r.add(0, "train", loss=2.0)
    r.add(2, "train", loss=1.0)
    with pytest.raises(ValueError, match="contiguous"):
        r.validate()
    assert TrainReport.from_dict(_report(3).to_dict()) == _report(3)


def test_export_to_unwritable_path(tmp_path):
    (tmp_path / "file").write_text("")
    with pytest.raises(OSError):
        export_curves(_report(1), tmp_path / "file" / "c.csv")


def test_epochs_to_threshold():
    r = TrainReport()
    for e, v in enumerate([0.2, 0.5, 0.91, 0.8]):
        r.add(e, "valid", accuracy=v)
    assert epochs_to_threshold(r, 0.9) == 3
    assert epochs_to_threshold(r, 0.95) is None


# -- batching helpers ---------------------------------------------------------

def test_pad_batch_and_shuffles():
    audio, lengths = pad_batch([np.ones(5), np.ones(9)], 4)
    assert audio.shape == (2, 12) and lengths.tolist() == [5, 9]
    assert audio[0, 5:].abs().sum() == 0
    sizes = [len(b) for b in slu_batches(10, 4, 0, 0)]
    assert sizes == [4, 4, 2]
    a, b = np.concatenate(list(slu_batches(10, 4, 0, 0))), np.concatenate(list(slu_batches(10, 4, 0, 1)))
    assert sorted(a) == list(range(10)) and not np.array_equal(a, b)


# -- pre-training and fine-tuning (tiny model) --------------------------------

@pytest.fixture(scope="module")
def tiny_asr(small_corpus):
    return [(u, load_audio(u.audio_path)) for u in parse_alignments(small_corpus.asr_alignments)]


@pytest.fixture(scope="module")
def tiny_slu(small_corpus):
    # clipped to 0.5 s: the tiny model's fine frame rate makes full clips slow to backprop
    utts = parse_manifest(small_corpus.manifests["train"])[:16]
    return [(load_audio(u.audio_path).samples[:8000], u.intent) for u in utts]


TINY_PRE = PretrainConfig(epochs=2, crop_seconds=0.5, optim=OptimConfig(lr=3e-3, batch_size=8))


def test_pretrain_zero_epochs_returns_initial_params(tiny_asr):
    model, report, vocab = pretrain(tiny_asr, tiny_config(), PretrainConfig(epochs=0), seed=5)
    ref = build_model(model.config, 5)
    assert report.records == []
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), ref.state_dict().values()))


def test_pretrain_same_seed_same_trajectory(tiny_asr):
    _, r1, _ = pretrain(tiny_asr, tiny_config(), TINY_PRE, seed=0)
    _, r2, _ = pretrain(tiny_asr, tiny_config(), TINY_PRE, seed=0)
    _, r3, _ = pretrain(tiny_asr, tiny_config(), TINY_PRE, seed=1)
    assert r1.series("train", "loss") == r2.series("train", "loss")
    assert r1.series("train", "loss") != r3.series("train", "loss")


def test_pretrain_resume_matches_uninterrupted(tiny_asr, tmp_path):
    full, r_full, _ = pretrain(tiny_asr, tiny_config(), TINY_PRE, seed=0, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch-000", "epoch-001"]
    resumed, r_res, _ = pretrain(tiny_asr, tiny_config(), TINY_PRE, seed=0, resume=tmp_path / "epoch-000")
    np.testing.assert_allclose(r_res.series("train", "loss"), r_full.series("train", "loss"), atol=1e-5, rtol=0)
    assert all(torch.equal(a, b) for a, b in zip(full.state_dict().values(), resumed.state_dict().values()))


def test_pretrain_divergence_reports_epoch_and_step(tiny_asr):
    u, clip = tiny_asr[0]
    bad = type(clip)(np.full(len(clip), np.nan, dtype=np.float32), clip.sample_rate)
    with pytest.raises(TrainingDivergedError, match="epoch 0.*step 0"):
        pretrain([(u, bad)], tiny_config(), TINY_PRE, seed=0)


def test_pretrain_empty_corpus():
    with pytest.raises(ValueError):
        pretrain([], tiny_config())


@pytest.fixture(scope="module")
def tiny_pretrained(tiny_asr):
    return pretrain(tiny_asr, tiny_config(), TINY_PRE, seed=0)[0]


def test_finetune_zero_epochs_keeps_pretrained_params(tiny_pretrained, tiny_slu):
    model, report, _ = finetune(tiny_slu, [], tiny_pretrained, "unfreeze_all", FinetuneConfig(epochs=0))
    src = tiny_pretrained.state_dict()
    for k, v in model.state_dict().items():
        if not k.startswith("intent."):
            assert torch.equal(v, src[k]), k
    assert report.records == []


@pytest.mark.parametrize("mode", ["frozen", "unfreeze_word"])
def test_frozen_tensors_bit_identical(tiny_pretrained, tiny_slu, mode):
    cfg = FinetuneConfig(epochs=3, optim=OptimConfig(lr=1e-2, batch_size=4))
    groups = [g for g in tiny_pretrained.pretrained_groups()]
    before = state_fingerprint(tiny_pretrained, groups)
    model, report, _ = finetune(tiny_slu, tiny_slu[:4], tiny_pretrained, mode, cfg, check_frozen=True)
    after = state_fingerprint(model, groups)
    never = [g for g in groups if all(g not in report.trainable[e] for e in report.trainable)]
    assert never
    for key in before:
        if key.split("/")[0] in never:
            assert before[key] == after[key], key
        else:
            assert before[key] != after[key], key
    assert report.series("valid", "accuracy")


def test_finetune_mode_argument_errors(tiny_pretrained, tiny_slu):
    with pytest.raises(ValueError, match="pre-trained"):
        finetune(tiny_slu, [], None, "frozen", FinetuneConfig(epochs=1))
    with pytest.raises(ValueError):
        finetune(tiny_slu, [], tiny_pretrained, "random_init", FinetuneConfig(epochs=1), model_config=tiny_config())
    with pytest.raises(ValueError):
        finetune([], [], None, "random_init", model_config=tiny_config())


def test_finetune_is_deterministic_and_hook_stops(tiny_slu):
    cfg = FinetuneConfig(epochs=3, optim=OptimConfig(lr=1e-2, batch_size=4))
    run = lambda hook=None: finetune(tiny_slu, tiny_slu[:4], None, "random_init", cfg, seed=3,  # noqa: E731
                                     model_config=tiny_config(), on_epoch_end=hook)[1]
    assert run().records == run().records
    assert run(lambda e, m, r: e == 1).epochs == [0, 1]


def test_evaluate_counts_unknown_gold_as_wrong(tiny_pretrained, tiny_slu):
    model, _, vocab = finetune(tiny_slu, [], tiny_pretrained, "frozen", FinetuneConfig(epochs=1))
    clips = [a for a, _ in tiny_slu[:3]]
    gold = [Intent("never", "seen", "value")] * 3
    metrics, preds = evaluate_slu(model, clips, gold, vocab)
    assert metrics["accuracy"] == 0.0 and len(preds) == 3 and math.isnan(metrics["loss"])


# -- desk-scale pre-training --------------------------------------------------

def test_desk_pretraining_phone_accuracy(desk_pretrained):
    _, report, _ = desk_pretrained
    assert report.last("valid", "phone_accuracy") > 0.9
    assert report.epochs == list(range(10))
