import numpy as np
import pytest

import TensorCore as tc
from TrepPlatform import ContractError, DataError, NumericalError


def _store(seed=0, **shapes):
    rng = np.random.default_rng(seed)
    store = tc.ParameterStore()
    for name, shape in shapes.items():
        store.add(name, rng.normal(size=shape))
    return store


def test_untracked_without_tape():
    store = _store(a=(3,))
    out = tc.tanh(store["a"])
    assert out.backward_fn is None


def test_elementwise_ops_gradients():
    store = _store(a=(4,), b=(4,))

    def loss():
        a, b = store["a"], store["b"]
        x = tc.add(tc.mul(tc.sigmoid(a), tc.tanh(b)), tc.scale(tc.exp(tc.scale(a, 0.3)), 0.5))
        y = tc.sub(tc.square(x), tc.neg(tc.log(tc.add(tc.exp(b), tc.constant(np.ones(4))))))
        return tc.mean(y)

    assert tc.gradient_check(loss, store) < 1e-3


def test_structural_ops_gradients():
    store = _store(W=(3, 4), v=(3,), bias=(4,), rows=(5, 2))

    def loss():
        h = tc.add(tc.matmul(store["v"], store["W"]), store["bias"])
        joined = tc.concat([h, tc.slice_(h, 1, 3), tc.reshape(tc.take(store["rows"], np.array([0, 3, 3])), (6,))])
        stacked = tc.stack([tc.slice_(joined, 0, 4), tc.slice_(joined, 4, 8)])
        matrix = tc.add(stacked, store["bias"])
        return tc.sum_(tc.matmul(matrix, tc.tanh(store["bias"])))

    assert tc.gradient_check(loss, store) < 1e-3


def test_three_layer_recurrent_cell_gradient():
    store = _store(W1=(5, 5), W2=(5, 5), W3=(5, 5), x=(5,))

    def loss():
        h = store["x"]
        for _ in range(3):
            h = tc.tanh(tc.matmul(store["W1"], h))
            h = tc.sigmoid(tc.matmul(store["W2"], h))
            h = tc.tanh(tc.matmul(store["W3"], h))
        return tc.dot(h, h)

    assert tc.gradient_check(loss, store) < 1e-3


def test_masked_softmax_support_and_gradient():
    mask = np.array([1, 0, 1, 1, 0, 0, 0, 0, 1], dtype=float)
    store = _store(z=(9,), w=(9,))
    p = tc.masked_softmax(store["z"], mask)
    assert p.value[mask == 0].tolist() == [0.0] * 5
    assert p.value.sum() == pytest.approx(1.0, abs=1e-12)

    def loss():
        return tc.dot(tc.masked_softmax(store["z"], mask), store["w"])

    assert tc.gradient_check(loss, store, names=["z"]) < 1e-3


def test_masked_softmax_is_shift_invariant_and_stable():
    mask = np.ones(3)
    p = tc.masked_softmax(np.array([1000.0, 1001.0, 999.0]), mask)
    q = tc.masked_softmax(np.array([1.0, 2.0, 0.0]), mask)
    np.testing.assert_allclose(p.value, q.value)


def test_masked_softmax_rejects_bad_masks():
    with pytest.raises(ContractError):
        tc.masked_softmax(np.zeros(3), np.zeros(3))
    with pytest.raises(ContractError):
        tc.masked_softmax(np.zeros(3), np.array([0.5, 1, 1]))
    with pytest.raises(ContractError):
        tc.masked_softmax(np.zeros(3), np.ones(4))


def test_shape_mismatch_is_a_contract_error():
    with pytest.raises(ContractError):
        tc.add(np.zeros(3), np.zeros(4))
    with pytest.raises(ContractError):
        tc.matmul(np.zeros((2, 3)), np.zeros(2))


def test_non_finite_values_raise():
    with pytest.raises(NumericalError):
        tc.log(np.array([0.0]))


def test_backward_needs_scalar():
    store = _store(a=(2,))
    with tc.Tape() as tape:
        out = tc.tanh(store["a"])
    with pytest.raises(ContractError):
        tc.backward(tape, out)


def test_gradients_accumulate_into_store():
    store = _store(a=(2,))
    for _ in range(2):
        with tc.Tape() as tape:
            loss = tc.sum_(store["a"])
        tc.backward(tape, loss, store)
    np.testing.assert_array_equal(store.grads["a"], [2.0, 2.0])


def test_adam_step_moves_against_gradient():
    store = tc.ParameterStore()
    store.add("w", np.array([1.0, -1.0]))
    with tc.Tape() as tape:
        loss = tc.sum_(tc.square(store["w"]))
    tc.backward(tape, loss, store)
    tc.optimizer_step(store, 0.1)
    # the first Adam step has magnitude lr in every coordinate
    np.testing.assert_allclose(store["w"].value, [0.9, -0.9])
    assert store.step_count == 1
    assert not store.grads["w"].any()


def test_clip_gradients_bounds_global_norm():
    store = _store(a=(3,), b=(2,))
    store.grads["a"][:] = [3.0, 0.0, 0.0]
    store.grads["b"][:] = [0.0, 4.0]
    assert tc.clip_gradients(store, 1.0) == pytest.approx(5.0)
    assert store.grad_norm() == pytest.approx(1.0)


def test_soft_update_formula():
    online, target = _store(seed=1, a=(3,)), _store(seed=2, a=(3,))
    before = target["a"].value.copy()
    tc.soft_update(target, online, 0.25)
    np.testing.assert_array_equal(target["a"].value, 0.25 * online["a"].value + 0.75 * before)
    tc.soft_update(target, online, 1.0)
    assert target.equals(online)


def test_soft_update_rejects_mismatched_stores():
    with pytest.raises(ContractError):
        tc.soft_update(_store(a=(2,)), _store(b=(2,)), 0.5)


def test_checkpoint_restores_exactly_and_is_byte_stable(tmp_path):
    store = _store(W=(3, 2), b=(2,))
    with tc.Tape() as tape:
        loss = tc.sum_(tc.matmul(np.ones(3), store["W"]))
    tc.backward(tape, loss, store)
    tc.optimizer_step(store, 0.01)
    first, second = tmp_path / "a.npz", tmp_path / "b.npz"
    tc.save_checkpoint(str(first), {"actor": store}, {"kind": "trep"})
    tc.save_checkpoint(str(second), {"actor": store}, {"kind": "trep"})
    assert first.read_bytes() == second.read_bytes()

    stores, metadata = tc.load_checkpoint(str(first))
    loaded = stores["actor"]
    assert metadata == {"kind": "trep"}
    assert loaded.equals(store)
    assert loaded.step_count == 1
    np.testing.assert_array_equal(loaded.adam_m["W"], store.adam_m["W"])


def test_checkpoint_loads_only_the_requested_stores(tmp_path):
    path = str(tmp_path / "both.npz")
    tc.save_checkpoint(path, {"actor": _store(W=(2, 2)), "critic": _store(V=(3,))})
    stores, _ = tc.load_checkpoint(path, only=("actor",))
    assert list(stores) == ["actor"]
    assert stores["actor"].names() == ["W"]
    with pytest.raises(DataError, match="critic_delayed"):
        tc.load_checkpoint(path, only=("actor", "critic_delayed"))


def test_missing_checkpoint_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        tc.load_checkpoint(str(tmp_path / "missing.npz"))


def test_duplicate_parameter_names_rejected():
    store = _store(a=(1,))
    with pytest.raises(ContractError):
        store.add("a", np.zeros(1))
