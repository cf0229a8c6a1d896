import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadflood import modelopt as mo
from roadflood.segnet.model import ModelConfig, forward, init_params, is_prunable
from roadflood.segnet.train import TrainConfig

CFG = ModelConfig(levels=2, base_filters=4)


@pytest.fixture
def params():
    return init_params(CFG, seed=1)


def test_schedule_examples():
    assert mo.sparsity_at(0) == 0.2
    assert mo.sparsity_at(5000) == 0.8
    assert mo.sparsity_at(9000) == 0.8
    assert mo.sparsity_at(2500) == pytest.approx(0.725, abs=1e-12)
    vals = [mo.sparsity_at(t) for t in range(0, 5001, 50)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        mo.PruneSchedule(initial_sparsity=0.9, final_sparsity=0.8)
    with pytest.raises(ValueError):
        mo.PruneSchedule(begin_step=10, end_step=5)
    s = mo.PruneSchedule(begin_step=100, end_step=100)
    assert mo.sparsity_at(99, s) == 0.2 and mo.sparsity_at(100, s) == 0.8


def test_prune_hand_example():
    out, masks = mo.prune_to_sparsity({"k.w": np.array([3.0, -1.0, 2.0, -4.0])}, 0.5)
    assert out["k.w"].tolist() == [3, 0, 0, -4]
    assert masks["k.w"].tolist() == [False, True, True, False]


def test_prune_zero_target_changes_nothing(params):
    out, masks = mo.prune_to_sparsity(params, 0.0)
    assert all(np.array_equal(out[k], params[k]) for k in params)
    assert not any(m.any() for m in masks.values())


def test_prune_ties_lowest_index_and_biases_exempt():
    out, _ = mo.prune_to_sparsity({"a.w": np.array([1.0, 1.0, 1.0, 1.0]), "a.b": np.zeros(2) + 0.1}, 0.5)
    assert out["a.w"].tolist() == [0, 0, 1, 1]
    assert out["a.b"].tolist() == [0.1, 0.1]


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.95))
def test_prune_zero_fraction_bounds(target):
    p = init_params(CFG, seed=2)
    out, _ = mo.prune_to_sparsity(p, target)
    for n, w in out.items():
        if is_prunable(n):
            z = mo.zero_fraction(w)
            assert target - 1e-12 <= z <= target + 1 / w.size + 1e-12, n


def test_prune_rejects_bad_target(params):
    with pytest.raises(ValueError):
        mo.prune_to_sparsity(params, 1.0)


def _tiny_data(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, size, size, 4)).astype(np.float32)
    y = (x[..., 3:] > 0.5).astype(np.float32)
    return x, y


def test_prune_finetune_masks_stay_zero(params):
    x, y = _tiny_data()
    sched = mo.PruneSchedule(end_step=6)
    seen = {}
    orig = mo.prune_to_sparsity

    def spy(p, target):
        out, masks = orig(p, target)
        for n, m in masks.items():
            prev = seen.get(n)
            if prev is not None:
                assert not np.any(prev & (out[n] != 0)), n
            seen[n] = m | (prev if prev is not None else False)
        return out, masks

    mo.prune_to_sparsity = spy
    try:
        out, report = mo.prune_finetune(params, x, y, CFG, sched, TrainConfig(epochs=4, batch_size=2, validation_fraction=0))
    finally:
        mo.prune_to_sparsity = orig
    assert report.epochs[-1]["step"] == 8
    for n, w in out.items():
        if is_prunable(n):
            assert 0.8 <= mo.zero_fraction(w) <= 0.8 + 1 / w.size


def test_prune_finetune_zero_schedule_is_plain_training(params):
    from roadflood.segnet.train import train

    x, y = _tiny_data(seed=1)
    tcfg = TrainConfig(epochs=2, batch_size=2, validation_fraction=0)
    a, _ = mo.prune_finetune(params, x, y, CFG, mo.PruneSchedule(0.0, 0.0), tcfg)
    b, _ = train(x, y, CFG, tcfg, params=dict(params))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_quantize_examples():
    zero = mo.quantize_tensor("z", np.zeros(5))
    assert zero.scale == 1.0 and not zero.values.any()
    qt = mo.quantize_tensor("t", np.array([-1.0, 0.0, 1.0]))
    assert qt.scale == pytest.approx(1 / 127)
    assert qt.values.tolist() == [-127, 0, 127]
    assert np.allclose(mo.dequantize(qt), [-1, 0, 1], atol=1e-7)
    assert mo.dequantize(mo.QuantTensor("u", (3,), 1 / 127, np.array([-127, 0, 127], np.int8))).tolist() == pytest.approx([-1, 0, 1])
    with pytest.raises(ValueError):
        mo.quantize_tensor("bad", np.array([np.inf]))


def test_quantize_round_half_to_even():
    # 127 * 2.5 / 127 ... choose w so w/scale hits .5 exactly
    qt = mo.quantize_tensor("h", np.array([127.0, 0.5, 1.5, 2.5]))
    assert qt.scale == 1.0
    assert qt.values.tolist() == [127, 0, 2, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quantize_error_bound_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    w = (rng.normal(size=50) * rng.uniform(1e-3, 10)).astype(np.float32)
    qt = mo.quantize_tensor("w", w)
    assert np.abs(qt.values).max() <= 127
    err = np.abs(w.astype(np.float64) - qt.values * np.float64(qt.scale))
    assert err.max() <= qt.scale / 2 * (1 + 1e-6)
    again = mo.quantize_tensor("w", mo.dequantize(qt))
    assert np.array_equal(again.values, qt.values)
    assert qt.scale > 0


def test_pruned_zeros_survive_quantization(params):
    pruned, _ = mo.prune_to_sparsity(params, 0.8)
    for qt in mo.quantize_params(pruned):
        assert np.array_equal(qt.values == 0, pruned[qt.name] == 0) or not is_prunable(qt.name)


@pytest.mark.parametrize("encoding", ["f32", "sparse", "q8"])
def test_container_round_trip(tmp_path, params, encoding):
    pruned, _ = mo.prune_to_sparsity(params, 0.8)
    tensors = mo.quantize_params(pruned) if encoding == "q8" else pruned
    path = tmp_path / f"m.{encoding}"
    mo.save_model(CFG, tensors, path, encoding)
    cfg, back, enc = mo.load_model(path)
    assert cfg == CFG and enc == encoding
    if encoding == "q8":
        assert back == tensors
    else:
        assert all(back[k].tobytes() == pruned[k].astype(np.float32).tobytes() for k in pruned)
    assert mo.model_to_bytes(cfg, back, encoding) == path.read_bytes()


def test_dense_round_trip_same_forward(tmp_path, params):
    mo.save_model(CFG, params, tmp_path / "m", "f32")
    cfg, back = mo.load_inference_params(tmp_path / "m")
    x = np.random.default_rng(3).random((1, 16, 16, 4)).astype(np.float32)
    assert np.array_equal(forward(back, cfg, x), forward(params, CFG, x))


def test_sparse_keeps_negative_zero():
    blob = mo.model_to_bytes(CFG, {"a.w": np.array([0.0, -0.0, 1.0], np.float32)}, "sparse")
    _, back, _ = mo.model_from_bytes(blob)
    assert back["a.w"].tobytes() == np.array([0.0, -0.0, 1.0], np.float32).tobytes()


def test_header_layout(params):
    blob = mo.model_to_bytes(CFG, params, "f32")
    magic, version, hlen = struct.unpack_from("<4sIQ", blob)
    assert (magic, version) == (b"RFPM", 1)
    n = sum(w.size for w in params.values())
    assert len(blob) == 16 + hlen + 4 * n + 4


@pytest.mark.parametrize(
    "corrupt, match",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
        (lambda b: b[:-1] + bytes([b[-1] ^ 0xFF]), "checksum"),
        (lambda b: b[:-20], "truncated"),
        (lambda b: b[:10], "truncated"),
    ],
)
def test_container_errors(params, corrupt, match):
    blob = mo.model_to_bytes(CFG, params, "f32")
    with pytest.raises(mo.ModelFileError, match=match):
        mo.model_from_bytes(corrupt(blob))


def test_size_report_ratios(params):
    pruned, _ = mo.prune_to_sparsity(params, 0.8)
    rep = mo.size_report(CFG, pruned)
    pb = rep["payload_bytes"]
    assert pb["quantized_i8"] * 4 == pb["dense_f32"]
    assert pb["dense_f32"] == 4 * rep["n_weights"]
    assert pb["sparse_encoded"] < pb["dense_f32"]
    # kernels are 80% zero; biases are all zero at init and drop out entirely
    assert rep["ratios"]["sparse_vs_dense"] == pytest.approx(0.4, abs=0.02)
    assert rep["global_sparsity"] >= 0.8


def test_sparse_payload_of_single_tensor():
    w = np.zeros(1000, np.float32)
    w[:200] = 1
    assert mo.payload_bytes({"a.w": w}, "sparse") == 200 * 8
    assert mo.payload_bytes({"a.w": w}, "f32") == 4000
