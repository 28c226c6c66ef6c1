import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invprop.node import (
    CorruptModel,
    MlpOde,
    NonlinearOutputLayer,
    ParamSelection,
    VersionMismatch,
    deserialize,
    load_model,
    save_model,
    select_params,
    serialize,
)
from invprop.numerics import dual_jacobian

from oracles import central_jacobian, rel_err


@pytest.fixture
def spiral_net():
    return MlpOde.init([2, 50, 2], ["tanhshrink", "identity"], seed=3, cubic_lift=True)


def test_forward_shapes_and_input_check(spiral_net):
    assert spiral_net.forward(np.array([0.1, 0.2])).shape == (2,)
    with pytest.raises(ValueError):
        spiral_net.forward(np.zeros(3))


@pytest.mark.parametrize("act", ["tanh", "tanhshrink", "gelu", "identity"])
def test_jacobians_match_finite_differences(act):
    m = MlpOde.init([3, 8, 8, 3], [act, act, "identity"], seed=1)
    x = np.array([0.4, -0.3, 0.9])
    fd = central_jacobian(m.forward, x)
    assert rel_err(m.jacobian_x(x), fd) < 1e-7
    assert rel_err(dual_jacobian(m.forward, x), fd) < 1e-7


@pytest.mark.parametrize("layer", [0, 1, 2])
def test_parameter_jacobian(layer):
    m = MlpOde.init([3, 8, 8, 3], ["tanh", "gelu", "identity"], seed=2)
    count = 6 if layer == 2 else 2 * m.weights[layer].shape[1]
    sel = select_params(m, layer, count, seed=0)
    x = np.array([0.2, 0.5, -0.4])

    def f_theta(v):
        mm = m.copy()
        mm.set_params(sel, v)
        return mm.forward(x)

    assert rel_err(m.jacobian_theta(x, sel), central_jacobian(f_theta, m.get_params(sel))) < 1e-7
    f, Jx, Jt = m.jacobian_theta_and_x(x, sel)
    assert np.allclose(f, m.forward(x))
    assert np.allclose(Jx, m.jacobian_x(x))
    assert np.allclose(Jt, m.jacobian_theta(x, sel))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_affine_split_reconstructs_forward(seed, a, b):
    m = MlpOde.init([2, 12, 2], ["tanhshrink", "identity"], seed=seed, cubic_lift=True)
    sel = select_params(m, -1, 4, seed=seed)
    x = np.array([a, b])
    split = m.affine_output_decomposition(x, sel)
    assert np.allclose(split.reconstruct(), m.forward(x), atol=1e-12)
    assert np.allclose(split.basis, m.jacobian_theta(x, sel), atol=1e-12)


def test_affine_split_needs_linear_output():
    m = MlpOde.init([2, 4, 2], ["tanh", "tanh"], seed=0)
    with pytest.raises(NonlinearOutputLayer):
        m.affine_output_decomposition(np.zeros(2), select_params(m, -1, 2))


def test_selection_covers_every_output(spiral_net):
    sel = select_params(spiral_net, -1, 6, seed=0)
    assert sel.size == 6 and set(sel.rows) == {0, 1}
    hidden = select_params(spiral_net, 0, 20, seed=0)
    assert hidden.layer == 0 and hidden.size == 20
    with pytest.raises(ValueError):
        select_params(spiral_net, -1, 5)
    with pytest.raises(ValueError):
        ParamSelection(0, [(0, 0), (0, 0)])


def test_get_set_roundtrip(spiral_net):
    sel = select_params(spiral_net, -1, 6, seed=1)
    v = spiral_net.get_params(sel) + 1.0
    spiral_net.set_params(sel, v)
    assert np.array_equal(spiral_net.get_params(sel), v)


def test_serialization_is_bit_exact(tmp_path, spiral_net):
    sel = select_params(spiral_net, -1, 6, seed=0)
    path = tmp_path / "m.json"
    save_model(path, spiral_net, sel, [10.0, 5.0])
    loaded = load_model(path)
    for a, b in zip(loaded.model.weights + loaded.model.biases, spiral_net.weights + spiral_net.biases):
        assert a.tobytes() == b.tobytes()
    assert loaded.selection == sel
    assert loaded.class_k_gains == [10.0, 5.0]
    assert loaded.model.cubic_lift and loaded.model.activations == spiral_net.activations


def test_corrupt_and_versioned_files(spiral_net):
    raw = serialize(spiral_net)
    with pytest.raises(CorruptModel):
        deserialize(b"not json")
    doc = json.loads(raw)
    doc["version"] = 99
    with pytest.raises(VersionMismatch):
        deserialize(json.dumps(doc).encode())
    doc = json.loads(raw)
    doc["weights"][0] = doc["weights"][0][:-8]
    with pytest.raises(CorruptModel):
        deserialize(json.dumps(doc).encode())
    doc = json.loads(raw)
    del doc["version"]
    with pytest.raises(CorruptModel):
        deserialize(json.dumps(doc).encode())
