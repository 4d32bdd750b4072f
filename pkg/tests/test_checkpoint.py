import json

import numpy as np
import pytest

from mpfa.checkpoint import load_checkpoint, save_checkpoint
from mpfa.errors import CheckpointError
from mpfa.events import synth_recurrent
from mpfa.training import MPFAScorer, evaluate_linkpred, warm_state

from conftest import small_model


def _trained_state(model, stream, stop):
    state = model.new_state()
    warm_state(model, state, stream, range(stop), 50)
    return state


def test_round_trip_is_bit_exact(tmp_path):
    stream = synth_recurrent(12, 200, seed=1, feat_dim=2)
    model = small_model(num_nodes=12, edge_dim=2, seed=3)
    state = _trained_state(model, stream, 150)
    path = tmp_path / "ck.json"
    save_checkpoint(path, model, state, {"seed": 9}, {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.model.param_digest() == model.param_digest()
    assert ck.state.fingerprint() == state.fingerprint()
    assert ck.train_config == {"seed": 9} and ck.extra == {"note": "x"}
    for name, p in model.params.items():
        assert np.array_equal(ck.model.params[name].data, p.data)
    # saving the loaded checkpoint reproduces the same bytes
    again = tmp_path / "ck2.json"
    save_checkpoint(again, ck.model, ck.state, ck.train_config, ck.extra)
    assert again.read_bytes() == path.read_bytes()


def test_loaded_model_scores_identically(tmp_path):
    stream = synth_recurrent(12, 300, seed=2, feat_dim=2)
    from mpfa.events import chronological_split

    plan = chronological_split(stream)
    model = small_model(num_nodes=12, edge_dim=2, seed=3)
    state = _trained_state(model, stream, plan.test.start)
    save_checkpoint(tmp_path / "ck.json", model, state)
    ck = load_checkpoint(tmp_path / "ck.json")
    a = evaluate_linkpred(MPFAScorer(model, state), stream, plan.test, plan, seed=4).metrics()
    b = evaluate_linkpred(MPFAScorer(ck.model, ck.state), stream, plan.test, plan, seed=4).metrics()
    assert a == b


def test_model_only_checkpoint(tmp_path):
    model = small_model()
    save_checkpoint(tmp_path / "ck.json", model)
    assert load_checkpoint(tmp_path / "ck.json").state is None


def _edit(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_version_mismatch(tmp_path):
    path = tmp_path / "ck.json"
    save_checkpoint(path, small_model())
    _edit(path, lambda d: d.update(format_version=99))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_shape_mismatch_and_missing_param(tmp_path):
    path = tmp_path / "ck.json"
    save_checkpoint(path, small_model())
    name = sorted(json.loads(path.read_text())["params"])[0]

    def bad_shape(d):
        d["params"][name]["shape"] = [1, 1, 1]

    _edit(path, bad_shape)
    with pytest.raises(CheckpointError, match=name):
        load_checkpoint(path)
    save_checkpoint(path, small_model())
    _edit(path, lambda d: d["params"].pop(name))
    with pytest.raises(CheckpointError, match="lacks"):
        load_checkpoint(path)


def test_missing_and_corrupt_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.json")
