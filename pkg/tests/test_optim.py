import numpy as np
import pytest

from promptpose.autodiff import Tensor, backward
from promptpose.errors import ContractError, CorruptDataError, ShapeError
from promptpose.optim import AdamW, ParameterStore, load_tensors, make_param, save_tensors


def make_store(values):
    store = ParameterStore()
    for name, (val, group) in values.items():
        store.register(name, Tensor(np.asarray(val, dtype=float)), group=group)
    return store


def test_zero_gradient_zero_decay_is_fixed_point():
    store = make_store({"w": ([1.0, -2.0, 3.0], "other")})
    opt = AdamW(store, lr=1e-3, weight_decay=0.0)
    store.zero_grads()
    opt.step()
    np.testing.assert_array_equal(store["w"].data, [1.0, -2.0, 3.0])


def test_first_step_moves_by_lr():
    # constant unit gradient: bias-corrected update is 1/(1+eps) on step one
    store = make_store({"w": ([0.0], "other")})
    opt = AdamW(store, lr=1e-3, weight_decay=0.0, eps=1e-8)
    store["w"].grad = np.array([1.0])
    opt.step()
    expected = -1e-3 * (1.0 / (1.0 + 1e-8))
    np.testing.assert_allclose(store["w"].data, [expected], rtol=1e-12)


def test_default_hyperparameters():
    store = make_store({"backbone.w": ([1.0], "backbone"), "head.w": ([1.0], "other")})
    opt = AdamW(store)
    assert opt.lr == 1e-4
    assert opt.backbone_lr == 1e-5
    assert opt.weight_decay == 1e-4
    assert opt._lr_for("backbone.w") == 1e-5
    assert opt._lr_for("head.w") == 1e-4


def test_weight_decay_is_decoupled():
    store = make_store({"w": ([2.0], "other")})
    opt = AdamW(store, lr=0.1, weight_decay=0.5)
    store.zero_grads()
    opt.step()
    # zero gradient: only the decay term applies
    np.testing.assert_allclose(store["w"].data, [2.0 * (1.0 - 0.1 * 0.5)], rtol=1e-12)


def test_missing_gradient_is_contract_error():
    store = make_store({"w": ([1.0], "other"), "v": ([1.0], "other")})
    opt = AdamW(store)
    store["w"].grad = np.array([1.0])
    with pytest.raises(ContractError):
        opt.step()


def test_gradients_cleared_after_step():
    store = make_store({"w": ([1.0], "other")})
    opt = AdamW(store, weight_decay=0.0)
    store.zero_grads()
    opt.step()
    assert store["w"].grad is None


def test_step_counter_increases():
    store = make_store({"w": ([1.0], "other")})
    opt = AdamW(store, weight_decay=0.0)
    for expected in (1, 2, 3):
        store.zero_grads()
        opt.step()
        assert opt.step_count == expected


def test_adamw_matches_reference_loop():
    # independent re-implementation of the update rule, run for several steps
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(4)
    grads = [rng.standard_normal(4) for _ in range(5)]

    store = make_store({"w": (w0.copy(), "other")})
    opt = AdamW(store, lr=3e-3, weight_decay=1e-2)
    for g in grads:
        store["w"].grad = g.copy()
        opt.step()

    ref = w0.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t, g in enumerate(grads, start=1):
        ref -= 3e-3 * 1e-2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 3e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(store["w"].data, ref, rtol=1e-12)


def test_zero_grads_enables_step_for_unreached_params():
    store = make_store({"used": ([1.0], "other"), "unused": ([1.0], "other")})
    opt = AdamW(store, weight_decay=0.0)
    store.zero_grads()
    loss = (store["used"] * store["used"]).sum()
    backward(loss)
    opt.step()  # 'unused' kept its zero buffer
    np.testing.assert_array_equal(store["unused"].data, [1.0])


def test_duplicate_registration_rejected():
    store = ParameterStore()
    store.register("w", Tensor([1.0]))
    with pytest.raises(ContractError):
        store.register("w", Tensor([2.0]))


# -- container format ---------------------------------------------------------

def test_container_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {
        "a.weight": rng.standard_normal((3, 4)),
        "a.bias": rng.standard_normal(4),
        "scalar": np.array(2.5),
    }
    path = tmp_path / "params.ckpt"
    save_tensors(path, arrays)
    loaded = load_tensors(path)
    assert set(loaded) == set(arrays)
    for name in arrays:
        np.testing.assert_array_equal(loaded[name], arrays[name])


def test_container_save_is_deterministic(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_tensors(p1, arrays)
    save_tensors(p2, arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_container_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTATENSORFILE")
    with pytest.raises(CorruptDataError):
        load_tensors(path)


def test_store_load_validates_shapes(tmp_path):
    store = make_store({"w": ([[1.0, 2.0]], "other")})
    path = tmp_path / "bad.ckpt"
    save_tensors(path, {"w": np.zeros(3)})
    with pytest.raises(ShapeError):
        store.load(path)


def test_store_load_rejects_name_mismatch(tmp_path):
    store = make_store({"w": ([1.0], "other")})
    path = tmp_path / "bad.ckpt"
    save_tensors(path, {"other_name": np.zeros(1)})
    with pytest.raises(CorruptDataError):
        store.load(path)


def test_store_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    store = ParameterStore()
    make_param(store, "layer.w", rng, (4, 4))
    make_param(store, "layer.b", rng, (4,), init="zeros")
    before = {n: p.data.copy() for n, p in store}
    path = tmp_path / "model.ckpt"
    store.save(path)
    for _, p in store:
        p.data += 1.0
    store.load(path)
    for name, p in store:
        np.testing.assert_array_equal(p.data, before[name])
