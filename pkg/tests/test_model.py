import json

import numpy as np
import pytest

from affine_steer.model import (
    ConfigError,
    FrozenModel,
    ModelLoadError,
    forward_with_hooks,
    generate_synthetic,
    load_model,
    precompute_targets,
    save_model,
)
from affine_steer.tensor import Tensor, backward
from affine_steer.transport import AffineMap, TransportStack, identity_stack

from conftest import linear


@pytest.fixture
def model():
    return generate_synthetic(3, depth=3, widths=[6, 5, 4], nonlinearity="tanh", in_dim=7)


def test_identity_transports_match_clean_run(model, rng):
    x = rng.normal(size=(9, 7))
    out0, tr0 = forward_with_hooks(model, None, x)
    out1, tr1 = forward_with_hooks(model, identity_stack(model.hook_dims), x)
    assert np.array_equal(out0.data, out1.data)
    for a, b in zip(tr0.layers, tr1.layers):
        assert np.array_equal(a.data, b.data)
        assert a.rows == 9


def test_single_linear_hand_composition():
    m = FrozenModel((linear(np.eye(2)), linear(np.eye(2))), (0,))
    stack = TransportStack((AffineMap([2.0, 2.0], [0.0, 0.0]),))
    _, tr = forward_with_hooks(m, stack, [[1.0, 1.0]])
    assert tr.layers[0].data.tolist() == [[2.0, 2.0]]


def test_earlier_map_changes_later_hook(model, rng):
    x = rng.normal(size=(5, 7))
    base = identity_stack(model.hook_dims)
    _, tr0 = forward_with_hooks(model, base, x)
    maps = list(base.maps)
    maps[0] = AffineMap(np.r_[1.3, np.ones(5)], np.zeros(6))
    _, tr1 = forward_with_hooks(model, TransportStack(tuple(maps)), x)
    assert not np.array_equal(tr0.layers[1].data, tr1.layers[1].data)


def test_gradients_reach_transport_params_only(model, rng):
    _, tr = forward_with_hooks(model, identity_stack(model.hook_dims), rng.normal(size=(4, 7)), track_gradients=True)
    from affine_steer import tensor as T

    grads = backward(tr.tape, T.sum_all(T.mul(tr.layers[-1], tr.layers[-1])))
    assert set(grads) == {p for pair in tr.params for p in pair}
    assert np.any(grads[tr.params[0][0]] != 0)


def test_forward_errors(model, rng):
    with pytest.raises(ConfigError):
        forward_with_hooks(model, None, rng.normal(size=(3, 6)))
    with pytest.raises(ConfigError):
        forward_with_hooks(model, identity_stack([6]), rng.normal(size=(3, 7)))
    with pytest.raises(ConfigError):
        forward_with_hooks(model, identity_stack([6, 4]), rng.normal(size=(3, 7)))


def test_precompute_targets(model, rng):
    y = rng.normal(size=(8, 7))
    cached = precompute_targets(model, y)
    _, fresh = forward_with_hooks(model, None, y)
    for a, b in zip(cached.layers, fresh.layers):
        assert a.data.tobytes() == b.data.tobytes()
    again = precompute_targets(model, y)
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(cached.layers, again.layers))
    empty = precompute_targets(model, np.zeros((0, 7)))
    assert empty.rows == 0


def test_generate_deterministic(tmp_path):
    a = generate_synthetic(11, 3, [4, 4, 4])
    b = generate_synthetic(11, 3, [4, 4, 4])
    save_model(a, tmp_path / "a.json")
    save_model(b, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_generate_default_hook_count():
    m = generate_synthetic(0, depth=2, widths=[4, 4], nonlinearity="tanh")
    assert len(m.hooks) == 1
    assert m.blocks[m.hooks[0]].kind == "layernorm"
    assert m.hook_dims == (4,)


def test_generate_seeds_differ():
    a = generate_synthetic(0, 2, [4, 4])
    b = generate_synthetic(1, 2, [4, 4])
    assert not np.array_equal(a.blocks[0].params["weight"], b.blocks[0].params["weight"])


def test_generate_weight_scale():
    m = generate_synthetic(5, 2, [400, 300], in_dim=400)
    w = m.blocks[0].params["weight"]
    assert w.std() == pytest.approx(1 / np.sqrt(400), rel=0.02)


def test_generate_validation():
    with pytest.raises(ConfigError):
        generate_synthetic(0, 1, [4])
    with pytest.raises(ConfigError):
        generate_synthetic(0, 2, [4, 0])
    m = generate_synthetic(0, 3, [4, 4, 4], hook_policy=[0, 4])
    assert m.hooks == (0, 4)


def test_frozen_params_read_only():
    m = generate_synthetic(0, 2, [3, 3])
    with pytest.raises(ValueError):
        m.blocks[0].params["weight"][0, 0] = 1.0


def test_save_load_roundtrip(tmp_path, model):
    p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
    save_model(model, p1)
    loaded = load_model(p1)
    save_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.hash() == model.hash()


def test_load_truncated(tmp_path, model):
    p = tmp_path / "m.json"
    save_model(model, p)
    p.write_text(p.read_text()[:200])
    with pytest.raises(ModelLoadError):
        load_model(p)


def test_load_hook_out_of_range(tmp_path, model):
    doc = model.to_dict()
    doc["hooks"] = [0, len(doc["blocks"])]
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ModelLoadError, match="hook"):
        load_model(p)


def test_load_bad_version_and_dims(tmp_path, model):
    doc = model.to_dict()
    p = tmp_path / "m.json"
    p.write_text(json.dumps({**doc, "version": 99}))
    with pytest.raises(ModelLoadError, match="version"):
        load_model(p)
    doc["blocks"][0]["dims"] = [3, 6]
    p.write_text(json.dumps(doc))
    with pytest.raises(ModelLoadError, match=r"blocks\[0\]"):
        load_model(p)


def test_final_block_never_hooked():
    with pytest.raises(ConfigError):
        FrozenModel((linear(np.eye(2)), linear(np.eye(2))), (1,))
    with pytest.raises(ConfigError):
        FrozenModel((linear(np.eye(2)), linear(np.eye(2)), linear(np.eye(2))), (1, 0))


def test_trace_tensor_rows(model, rng):
    _, tr = forward_with_hooks(model, None, Tensor(rng.normal(size=(13, 7))))
    assert [t.rows for t in tr.layers] == [13, 13]
