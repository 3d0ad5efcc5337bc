import json

import numpy as np
import pytest

from conftest import split_of
from cdrae import cacdr, checkpoint, lfacdr
from cdrae.data import apply_cold_start


def params_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_cacdr_round_trip_bit_exact(tmp_path, small_pair, small_cacdr_config):
    plan = split_of(small_pair)
    train, _ = apply_cold_start(small_pair, plan)
    model = cacdr.train(train, plan.train, small_cacdr_config, seed=0)
    path = tmp_path / "c.json"
    checkpoint.save(path, "cacdr", model, {"model": small_cacdr_config.to_dict()}, {"repeat": 0})
    method, back, raw = checkpoint.load(path)
    assert method == "cacdr" and raw["version"] == checkpoint.VERSION
    for name, net in model.networks().items():
        assert params_equal(net.params(), back.networks()[name].params())
    x = train.source_rows(plan.test)
    np.testing.assert_array_equal(cacdr.predict_cold_start(model, x), cacdr.predict_cold_start(back, x))
    layer = raw["networks"]["mapper"]["layers"][0]
    assert layer["weights"]["shape"] == [12, 6] and layer["activation"] == "relu"


def test_lfacdr_round_trip_bit_exact(tmp_path, small_user_pair, small_lfacdr_config):
    plan = split_of(small_user_pair)
    train, _ = apply_cold_start(small_user_pair, plan)
    model = lfacdr.train(train, plan.train, small_lfacdr_config, seed=0)
    path = tmp_path / "l.json"
    checkpoint.save(path, "lfacdr", model)
    _, back, raw = checkpoint.load(path)
    assert back.shared_axis == "users"
    assert params_equal(model.source.params(), back.source.params())
    assert params_equal(model.target.params(), back.target.params())
    assert set(raw["domains"]["source"]) >= {"item_latents", "user_latents"}
    x = train.source_rows(plan.test)
    np.testing.assert_array_equal(lfacdr.predict_shared_rows(model, x), lfacdr.predict_shared_rows(back, x))


def test_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text(json.dumps({"format": "other"}))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(p)
    p.write_text(json.dumps({"format": checkpoint.FORMAT, "version": 99}))
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.load(p)
    p.write_text("{not json")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(p)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.model_to_dict("baseline", object())
