import json

import numpy as np
import pytest
import torch

from slupretrain.checkpoint import load_checkpoint, read_meta, restore_optimizer, save_checkpoint
from slupretrain.errors import CheckpointError
from slupretrain.model import build_model, tiny_config


def _model(**kw):
    m = build_model(tiny_config(**kw), seed=0)
    with torch.no_grad():
        for p in m.parameters():
            p.normal_()
    return m


def _same(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(
        sa[k].dtype == sb[k].dtype and torch.equal(sa[k], sb[k]) for k in sa)


def test_round_trip_bit_identical(tmp_path):
    m = _model()
    save_checkpoint(m, tmp_path / "ck", meta={"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert _same(m, loaded)
    assert meta["extra"] == {"note": "x"}
    assert meta["layer_groups"] == m.layer_groups()
    assert meta["vocab_sizes"] == {"phones": 5, "words": 4, "slots": [2, 3, 2]}
    assert meta["config_hash"] == m.config.hash()


def test_double_precision_round_trip(tmp_path):
    m = _model().double()
    save_checkpoint(m, tmp_path / "ck")
    loaded, _ = load_checkpoint(tmp_path / "ck")
    assert _same(m, loaded) and next(loaded.parameters()).dtype == torch.float64


def test_little_endian_float32_layout(tmp_path):
    m = _model()
    save_checkpoint(m, tmp_path / "ck")
    meta = read_meta(tmp_path / "ck")
    entry = meta["tensors"][0]
    raw = (tmp_path / "ck" / "tensors.bin").read_bytes()[entry["offset"]:entry["offset"] + entry["nbytes"]]
    arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
    assert entry["dtype"] == "float32"
    assert torch.equal(torch.from_numpy(arr.copy()), m.state_dict()[entry["name"]])


def test_truncated_tensor_file_names_tensor(tmp_path):
    save_checkpoint(_model(), tmp_path / "ck")
    last = read_meta(tmp_path / "ck")["tensors"][-1]["name"]
    blob = tmp_path / "ck" / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match=repr(last)):
        load_checkpoint(tmp_path / "ck")


def _edit_meta(path, fn):
    doc = json.loads((path / "meta.json").read_text())
    fn(doc)
    (path / "meta.json").write_text(json.dumps(doc))


def test_missing_tensor_named(tmp_path):
    save_checkpoint(_model(), tmp_path / "ck")
    _edit_meta(tmp_path / "ck", lambda d: d.__setitem__("tensors", [t for t in d["tensors"] if t["name"] != "sinc.low_hz"]))
    with pytest.raises(CheckpointError, match="'sinc.low_hz' missing"):
        load_checkpoint(tmp_path / "ck")


def test_shape_mismatch_named(tmp_path):
    save_checkpoint(_model(), tmp_path / "ck")

    def reshape(d):
        for t in d["tensors"]:
            if t["name"] == "sinc.low_hz":
                t["shape"] = [2, 2]
    _edit_meta(tmp_path / "ck", reshape)
    with pytest.raises(CheckpointError, match="'sinc.low_hz' has shape"):
        load_checkpoint(tmp_path / "ck")


def test_config_hash_mismatch(tmp_path):
    save_checkpoint(_model(), tmp_path / "ck")
    _edit_meta(tmp_path / "ck", lambda d: d.__setitem__("config_hash", "0" * 64))
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "ck")
    save_checkpoint(_model(), tmp_path / "ck2")
    with pytest.raises(CheckpointError, match="expected config"):
        load_checkpoint(tmp_path / "ck2", expected_config=tiny_config(num_words=9))


def test_corrupted_bytes_fail_checksum(tmp_path):
    save_checkpoint(_model(), tmp_path / "ck")
    blob = tmp_path / "ck" / "tensors.bin"
    data = bytearray(blob.read_bytes())
    data[0] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "ck")


def test_missing_meta_and_bad_schema(tmp_path):
    with pytest.raises(CheckpointError, match="meta.json"):
        load_checkpoint(tmp_path)
    save_checkpoint(_model(), tmp_path / "ck")
    _edit_meta(tmp_path / "ck", lambda d: d.__setitem__("schema_version", 99))
    with pytest.raises(CheckpointError, match="schema"):
        load_checkpoint(tmp_path / "ck")


def test_headless_checkpoint_marks_heads_absent(tmp_path):
    m = _model().discard_pretraining_heads()
    save_checkpoint(m, tmp_path / "ck")
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta["heads"] == {"phoneme": False, "word": False}
    assert loaded.phoneme_head is None and loaded.word_head is None
    assert _same(m, loaded)
    loaded.attach_intent_module((2, 2, 2))
    assert loaded(torch.randn(1, 640)).shape == (1, 6)


def test_optimizer_state_round_trip(tmp_path):
    m = _model()
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    for _ in range(2):
        opt.zero_grad()
        m(torch.randn(2, 640)).sum().backward()
        opt.step()
    save_checkpoint(m, tmp_path / "ck", optimizer=opt)
    loaded, doc = load_checkpoint(tmp_path / "ck")
    opt2 = restore_optimizer(torch.optim.Adam(loaded.parameters(), lr=5.0), loaded, doc)
    assert opt2.param_groups[0]["lr"] == 1e-3
    names = dict(m.named_parameters())
    for n, p in loaded.named_parameters():
        for k, v in opt.state[names[n]].items():
            assert torch.equal(opt2.state[p][k], v)
    with pytest.raises(CheckpointError, match="no optimizer"):
        save_checkpoint(m, tmp_path / "plain")
        restore_optimizer(opt2, *load_checkpoint(tmp_path / "plain"))


def test_save_is_deterministic(tmp_path):
    m = _model()
    save_checkpoint(m, tmp_path / "a")
    save_checkpoint(m, tmp_path / "b")
    for f in ("meta.json", "tensors.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
