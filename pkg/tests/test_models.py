import numpy as np
import pytest

from fedcfa.models import CheckpointError, LayerSpec, SplitModel, default_model, mlp_specs
from fedcfa.nn import ShapeError, Tensor


def small_model(seed=0, hook=2):
    return SplitModel(mlp_specs([6, 5, 4, 5], 3), hook=hook, seed=seed)


def test_default_architecture():
    m = default_model(784, 10)
    assert [(s.in_dim, s.out_dim) for s in m.layer_specs] == [(784, 256), (256, 64), (64, 128), (128, 10)]
    assert m.hook == 2
    assert m.factor_dim == 64
    assert m.layer_specs[-1].activation == "linear"


def test_identity_encoder():
    m = SplitModel([LayerSpec(2, 2, "linear"), LayerSpec(2, 2, "linear")], hook=1)
    m.params[0].data = np.eye(2)
    np.testing.assert_array_equal(m.encode(np.array([[1.0, 2.0]])).data, [[1.0, 2.0]])


def test_zero_weights_give_zero_factors_and_logits():
    m = small_model()
    m.unflatten_params(np.zeros(m.num_params))
    x = np.random.default_rng(0).normal(size=(3, 6))
    np.testing.assert_array_equal(m.encode(x).data, np.zeros((3, 4)))
    np.testing.assert_array_equal(m.decode_classify(np.zeros((3, 4))).data, np.zeros((3, 3)))


def test_encode_batch_consistency():
    m = small_model()
    x = np.random.default_rng(1).normal(size=(2, 6))
    both = m.encode(x).data
    single = np.vstack([m.encode(x[i:i + 1]).data for i in range(2)])
    np.testing.assert_allclose(both, single, rtol=0, atol=1e-12)


def test_split_consistency_bitwise():
    m = small_model(seed=4)
    x = np.random.default_rng(2).normal(size=(7, 6))
    a = m.decode_classify(m.encode(x)).data
    b = m.forward(x).data
    assert a.tobytes() == b.tobytes()
    assert m.predict_logits(x).tobytes() == b.tobytes()


def test_factor_perturbation_changes_logits_unless_disconnected():
    m = small_model(seed=3)
    f = np.abs(np.random.default_rng(3).normal(size=(1, 4))) + 0.5
    base = m.decode_classify(f).data
    bumped = f.copy()
    bumped[0, 1] += 0.3
    assert not np.allclose(m.decode_classify(bumped).data, base)
    m.params[2 * m.hook].data[1, :] = 0.0  # cut factor 1 downstream
    base = m.decode_classify(f).data
    np.testing.assert_array_equal(m.decode_classify(bumped).data, base)


def test_width_mismatch_errors():
    m = small_model()
    with pytest.raises(ShapeError):
        m.encode(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        m.decode_classify(np.zeros((2, 5)))


@pytest.mark.parametrize("hook", [0, 4])
def test_hook_bounds(hook):
    with pytest.raises(ValueError):
        small_model(hook=hook)


def test_layer_chain_checked():
    with pytest.raises(ValueError):
        SplitModel([LayerSpec(3, 4), LayerSpec(5, 2, "linear")], hook=1)


def test_flatten_roundtrip_and_length():
    m = small_model(seed=1)
    v = np.random.default_rng(7).normal(size=m.num_params)
    m.unflatten_params(v)
    assert m.flatten_params().tobytes() == v.tobytes()
    assert small_model(seed=9).flatten_params().size == m.flatten_params().size


def test_flatten_order_is_layer_major_weight_first():
    m = small_model()
    flat = m.flatten_params()
    W0, b0 = m.params[0].data, m.params[1].data
    np.testing.assert_array_equal(flat[: W0.size], W0.reshape(-1))
    np.testing.assert_array_equal(flat[W0.size: W0.size + b0.size], b0)


def test_unflatten_length_mismatch():
    m = small_model()
    with pytest.raises(ShapeError):
        m.unflatten_params(np.zeros(m.num_params + 1))


def test_flat_averaging_equals_per_layer_averaging():
    a, b = small_model(seed=1), small_model(seed=2)
    avg = small_model()
    avg.unflatten_params((a.flatten_params() + b.flatten_params()) / 2)
    for pa, pb, pm in zip(a.params, b.params, avg.params):
        np.testing.assert_array_equal(pm.data, (pa.data + pb.data) / 2)


def test_init_determinism_and_range():
    assert small_model(seed=5).flatten_params().tobytes() == small_model(seed=5).flatten_params().tobytes()
    assert small_model(seed=5).flatten_params().tobytes() != small_model(seed=6).flatten_params().tobytes()
    m = small_model()
    for s, W in zip(m.layer_specs, m.params[::2]):
        assert np.abs(W.data).max() <= np.sqrt(6 / (s.in_dim + s.out_dim))
    for b in m.params[1::2]:
        np.testing.assert_array_equal(b.data, 0.0)


def test_clone_is_deep():
    m = small_model()
    c = m.clone()
    c.params[0].data[0, 0] += 1.0
    assert m.params[0].data[0, 0] != c.params[0].data[0, 0]


def test_checkpoint_roundtrip(tmp_path):
    m = SplitModel(mlp_specs([6, 5, 4], 2, "tanh"), hook=1, seed=3)
    path = tmp_path / "m.fcfa"
    m.save(path)
    raw = path.read_bytes()
    assert raw[:5] == b"FCFA1"
    assert len(raw) - 8 * m.num_params > 0
    back = SplitModel.load(path)
    assert back.same_architecture(m)
    assert back.flatten_params().tobytes() == m.flatten_params().tobytes()
    tail = np.frombuffer(raw[-8 * m.num_params:], dtype="<f8")
    np.testing.assert_array_equal(tail, m.flatten_params())


def test_checkpoint_rejects_corruption(tmp_path):
    blob = small_model().to_bytes()
    with pytest.raises(CheckpointError):
        SplitModel.from_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(CheckpointError):
        SplitModel.from_bytes(blob[:-8])


def test_forward_records_on_tape():
    m = small_model()
    out = m.forward(Tensor(np.ones((2, 6))))
    assert out.requires_grad
