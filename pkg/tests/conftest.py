import sys

import pytest
import torch

from slupretrain.alignment import parse_alignments
from slupretrain.dataset import load_audio, parse_manifest
from slupretrain.model import desk_config
from slupretrain.synth import default_spec, synth_corpus
from slupretrain.training import OptimConfig, PretrainConfig, pretrain

# desk-scale recipe shared by the slow tests and the acceptance suite
DESK_PRETRAIN = PretrainConfig(epochs=10, crop_seconds=1.0, optim=OptimConfig(lr=3e-3, batch_size=16))
DESK_ASR_TRAIN = 300


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A few speakers of the default command set plus a small ASR set."""
    spec = default_spec(n_speakers=5, asr_speakers=4, asr_utterances_per_speaker=5)
    return synth_corpus(spec, tmp_path_factory.mktemp("small"), seed=3)


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    return synth_corpus(default_spec(), tmp_path_factory.mktemp("desk"), seed=0)


@pytest.fixture(scope="session")
def desk_slu(desk_corpus):
    """``split -> [(samples, Intent)]`` for the desk corpus."""
    out = {}
    for split in ("train", "valid", "test"):
        utts = parse_manifest(desk_corpus.manifests[split])
        out[split] = [(load_audio(u.audio_path).samples, u.intent) for u in utts]
        out[split + "_utts"] = utts
    return out


@pytest.fixture(scope="session")
def desk_pretrained(desk_corpus):
    """Phoneme + word modules pre-trained on the disjoint synthetic ASR set."""
    asr = [(u, load_audio(u.audio_path)) for u in parse_alignments(desk_corpus.asr_alignments)]
    model, report, vocab = pretrain(asr[:DESK_ASR_TRAIN], desk_config(), DESK_PRETRAIN, seed=0,
                                    valid_corpus=asr[DESK_ASR_TRAIN:])
    return model, report, vocab



def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
