import json

import numpy as np
import pytest

from tabtoken.checkpoint import Checkpoint, HexArray
from tabtoken.data import preprocess
from tabtoken.errors import DataError
from tabtoken.transfer import predict, pretrain, reweight_finetune
from tabtoken.splits import OverlapMap

from conftest import override


@pytest.fixture
def pretrained(make_table, tiny_config):
    train, (validation,), stats = preprocess(make_table(n_rows=80, seed=1), [make_table(n_rows=30, seed=2)])
    return pretrain(train, validation, override(tiny_config, pretrain={"epochs": 1}), seed=3, stats=stats), validation


def test_hex_array_keeps_every_bit():
    values = np.array([[0.1, -0.0, 5e-324], [np.inf, -1.7976931348623157e308, 1.0 / 3.0]])
    decoded = HexArray.encode(values).decode()
    assert decoded.tobytes() == values.tobytes()


def test_checkpoint_round_trip_is_bit_exact(pretrained, tmp_path):
    chk, validation = pretrained
    path = tmp_path / "nested" / "pretrain.json"
    chk.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.tokenizer.fingerprint == chk.tokenizer.fingerprint
    np.testing.assert_array_equal(loaded.restore_tokenizer().tokens.data, chk.restore_tokenizer().tokens.data)
    before = chk.restore_model().state_dict()
    after = loaded.restore_model().state_dict()
    for name in before:
        assert after[name].tobytes() == before[name].tobytes()
    np.testing.assert_array_equal(predict(loaded, validation), predict(chk, validation))
    assert loaded.preprocess == chk.preprocess
    assert [r.epoch for r in loaded.history] == [0, 1]


def test_reweighted_checkpoint_round_trip(pretrained, make_table, tiny_config, tmp_path):
    chk, _ = pretrained
    fewshot, _, _ = preprocess(make_table(n_rows=12, n_num=3, n_cat=0, seed=7))
    tuned = reweight_finetune(chk, fewshot, n_new=2, config=tiny_config, seed=4)
    path = tmp_path / "reweighted.json"
    tuned.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.tokenizer.kind == "reweighted"
    restored = loaded.restore_tokenizer()
    assert restored.n_new == 2
    np.testing.assert_array_equal(restored.pooled_rows(), tuned.restore_tokenizer().pooled_rows())
    np.testing.assert_array_equal(predict(loaded, fewshot), predict(tuned, fewshot))


def test_overlap_map_is_stored(pretrained, tmp_path):
    chk, _ = pretrained
    chk.overlap = OverlapMap(pairs=[(0, 1)], d=3, d_t=2)
    chk.save(tmp_path / "c.json")
    assert Checkpoint.load(tmp_path / "c.json").overlap.pairs == [(0, 1)]


def test_version_mismatch_raises(pretrained, tmp_path):
    chk, _ = pretrained
    path = tmp_path / "old.json"
    chk.save(path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="version"):
        Checkpoint.load(path)


def test_missing_or_corrupt_checkpoint_raises(tmp_path):
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(DataError):
        Checkpoint.load(broken)
