import json

import numpy as np
import pytest

from quantbench import numcore as nc
from quantbench.data import make_pattern_images
from quantbench.errors import CorruptModelError, ManifestError, StateError
from quantbench.network import (AvgPool, FirstLastPolicy, Mode, ModelGraph, PoolStrategy, ResidualBlock,
                                ResidualStrategy, _Context, build_toy_mlp, build_toy_resnet, load_model,
                                save_model)
from quantbench.pipeline import calibrate_model, predict_logits
from quantbench.quantize import PerChannel, PerTensor, QuantizerSpec


def images(n=32, seed=0):
    return make_pattern_images(4, n // 4, seed).inputs


def calibrated_resnet(seed=0, **kw):
    model = build_toy_resnet(8, 2, 4, seed=seed, **kw)
    calibrate_model(model, images(64, seed))
    return model


def resnet_param_count(c_in, w, blocks, k):
    count = 9 * c_in * w + w                        # stem
    count += 2 * (9 * w * w + w)                    # block 0, identity skip
    c = w
    for _ in range(1, blocks):
        o = 2 * c
        count += 9 * c * o + o + 9 * o * o + o      # two 3x3 convs
        count += c * o + o                          # 1x1 downsample
        c = o
    return count + c * k + k


@pytest.mark.parametrize("width,blocks,classes", [(8, 2, 4), (4, 1, 3), (6, 3, 10)])
def test_parameter_count_matches_hand_count(width, blocks, classes):
    model = build_toy_resnet(width, blocks, classes)
    assert model.num_parameters() == resnet_param_count(1, width, blocks, classes)


def test_forward_shape_and_finite_logits():
    out = build_toy_resnet(8, 2, 4)(images(12)).value
    assert out.shape == (12, 4) and np.isfinite(out).all()
    assert build_toy_mlp(5, 16, 3)(np.zeros((2, 5))).shape == (2, 3)


def test_builder_preconditions():
    with pytest.raises(ValueError):
        build_toy_resnet(3, 2, 4)
    with pytest.raises(ValueError):
        build_toy_resnet(8, 0, 4)
    with pytest.raises(ValueError):
        build_toy_resnet(8, 1, 4)(np.zeros((1, 1, 7, 7)))


def test_quantized_forward_needs_calibration():
    with pytest.raises(StateError):
        build_toy_resnet(8, 1, 4)(images(4), Mode.QUANTIZED)


def high_bit_error(model, x, bits):
    model.set_bits(bits, bits, include_pinned=True)
    calibrate_model(model, x)   # calibrated on x itself: no clipping, only the grid step remains
    err = np.max(np.abs(model(x, Mode.FLOAT).value - model(x, Mode.QUANTIZED).value))
    return err


@pytest.mark.parametrize("strategy", list(ResidualStrategy))
@pytest.mark.parametrize("pool", list(PoolStrategy))
def test_high_bit_quantized_forward_converges_to_float(strategy, pool):
    model = build_toy_resnet(8, 2, 4, residual_strategy=strategy, pool_strategy=pool,
                             first_last_policy=FirstLastPolicy.QUANTIZE)
    x = images(64, 1)
    e24 = high_bit_error(model, x, 24)
    e32 = high_bit_error(model, x, 32)
    # the error is the grid step: 8 more bits shrink it 256-fold
    assert 2.0 ** -10 < e32 / e24 < 2.0 ** -6


def test_forward_is_deterministic():
    a = calibrated_resnet(3)
    b = calibrated_resnet(3)
    x = images(8, 2)
    np.testing.assert_array_equal(a(x, Mode.QUANTIZED).value, b(x, Mode.QUANTIZED).value)


def test_unquantized_skip_with_zero_branch_is_identity():
    model = build_toy_resnet(8, 1, 4, residual_strategy=ResidualStrategy.UNQUANTIZED_SKIP)
    model.set_bits(2, 2)
    calibrate_model(model, images(32))
    block = model.layers[1]
    assert isinstance(block, ResidualBlock) and block.downsample is None
    block.conv2.weight.value[:] = 0.0
    block.conv2.bias.value[:] = 0.0
    x = np.abs(np.random.default_rng(0).normal(size=(3, 8, 8, 8)))   # nonnegative, like a ReLU output
    ctx = _Context(model, Mode.QUANTIZED, None)
    hp = nc.const(x)
    q = block.conv1.act_quant(hp)   # the quantized stream may differ; the skip must not
    _, out_hp = block.forward(q, hp, ctx)
    np.testing.assert_array_equal(out_hp.value, x)


def test_pin_policy_pins_first_and_last():
    model = build_toy_resnet(8, 2, 4)
    model.set_bits(2, 3)
    w, a = model.first_last_quantizers()
    assert [q.name for q in w] == ["stem.weight_quant", "fc.weight_quant"]
    assert all(q.pinned and q.current_bits() == 8 for q in w + a)
    others = [q for q in model.all_quantizers() if not q.pinned]
    assert {q.spec.bits for q in others} <= {2, 3}
    assert model.input_quant.name not in {q.name for q in model.activation_quantizers()}
    model.apply_first_last_policy(FirstLastPolicy.QUANTIZE)
    assert not any(q.pinned for q in model.all_quantizers())
    assert model.input_quant in model.activation_quantizers()


def test_pinned_first_layer_output_ignores_other_bitwidths():
    model = calibrated_resnet(0)
    x = images(8, 5)
    seen = {}

    def grab(quantizer, value):
        if quantizer.name in ("stem.act_quant", "fc.weight_quant"):
            seen[quantizer.name] = value.copy()

    def run():
        seen.clear()
        model.forward(x, Mode.QUANTIZED, hook=grab)
        stem = seen["stem.act_quant"]
        fc_w = model.quantizer("fc.weight_quant")(nc.const(seen["fc.weight_quant"])).value
        return stem, fc_w

    ref = run()
    for wb, ab in [(2, 2), (3, 5), (6, 2)]:
        model.set_bits(wb, ab)
        got = run()
        np.testing.assert_array_equal(got[0], ref[0])
        np.testing.assert_array_equal(got[1], ref[1])


def test_integer_pool_truncates():
    model = calibrated_resnet(1, pool_strategy=PoolStrategy.INTEGER_ARITHMETIC)
    model.set_bits(act_bits=3)
    calibrate_model(model, images(64, 1))
    pool = next(layer for layer in model.layers if isinstance(layer, AvgPool))
    seen = {}

    def grab(quantizer, value):
        seen[quantizer.name] = value

    x = images(16, 4)
    model.forward(x, Mode.QUANTIZED, hook=grab)
    src = model.layers[-3].out_quant
    q = src(nc.const(seen[src.name])).value
    st_ = src.current_state()
    levels = np.rint(q / float(st_.delta) + float(st_.zero_point))
    expected = (np.floor(levels.sum(axis=(2, 3)) / 16) - float(st_.zero_point)) * float(st_.delta)
    np.testing.assert_allclose(seen[pool.act_quant.name], expected, rtol=0, atol=1e-12)
    assert np.all(seen[pool.act_quant.name] <= q.mean(axis=(2, 3)) + 1e-12)


def test_feature_map_sizes():
    sizes = build_toy_resnet(8, 2, 4).feature_map_sizes()
    assert sizes["input_quant"] == 64
    assert sizes["stem.act_quant"] == 8 * 64
    assert sizes["block1.out_quant"] == 16 * 16
    assert sizes["pool.act_quant"] == 16
    assert sizes["fc.weight_quant"] == 16 * 4


def test_copy_is_independent():
    model = calibrated_resnet(0)
    twin = model.copy()
    x = images(8, 1)
    np.testing.assert_array_equal(model(x, Mode.QUANTIZED).value, twin(x, Mode.QUANTIZED).value)
    twin.parameters()["fc.weight"].value += 1.0
    twin.set_bits(2, 2)
    assert model.quantizer("block0.conv1.weight_quant").current_bits() == 8
    assert not np.array_equal(model(x).value, twin(x).value)


# -- serialization ------------------------------------------------------------

@pytest.mark.parametrize("builder", [
    lambda: calibrated_resnet(2, residual_strategy=ResidualStrategy.HIGH_PRECISION_ADD),
    lambda: calibrate_model(build_toy_mlp(6, 16, 3, seed=1), np.random.default_rng(0).normal(size=(40, 6))),
])
def test_save_load_is_bit_exact(tmp_path, builder):
    model = builder()
    model.baseline_accuracy = 0.875
    model.set_bits(3, 5)
    x = images(10, 7) if model.input_shape == (1, 8, 8) else np.random.default_rng(1).normal(size=(10, 6))
    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m.json")
    for mode in Mode:
        np.testing.assert_array_equal(predict_logits(back, x, mode), predict_logits(model, x, mode))
    assert back.baseline_accuracy == 0.875
    assert back.describe() == model.describe()
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["format_version"] == 1
    assert (tmp_path / "m.bin").stat().st_size == manifest["blob_bytes"]


def test_save_load_keeps_raw_ranges(tmp_path):
    model = build_toy_resnet(8, 1, 4)
    spec = QuantizerSpec(4, False, PerChannel(0))
    model.set_specs(weight_spec=spec)
    calibrate_model(model, images(32))
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for m in (model, back):
        m.set_specs(weight_spec=spec.with_(granularity=PerTensor()))
        m.set_specs(weight_spec=spec)
    x = images(8, 3)
    np.testing.assert_array_equal(back(x, Mode.QUANTIZED).value, model(x, Mode.QUANTIZED).value)


def saved(tmp_path):
    model = calibrated_resnet(0)
    path, blob = save_model(model, tmp_path / "m.json")
    return path, blob


def test_truncated_blob(tmp_path):
    path, blob = saved(tmp_path)
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CorruptModelError):
        load_model(path)


def test_flipped_byte_names_the_entry(tmp_path):
    path, blob = saved(tmp_path)
    manifest = json.loads(path.read_text())
    entry = next(e for e in manifest["entries"] if e["name"] == "block0.conv2.weight")
    raw = bytearray(blob.read_bytes())
    raw[entry["offset"] * 8 + 3] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(CorruptModelError, match="block0.conv2.weight"):
        load_model(path)


def test_shape_mismatch_names_the_entry(tmp_path):
    path, _ = saved(tmp_path)
    manifest = json.loads(path.read_text())
    entry = next(e for e in manifest["entries"] if e["name"] == "fc.weight")
    entry["shape"] = [entry["shape"][1], entry["shape"][0]]
    path.write_text(json.dumps(manifest))
    with pytest.raises(CorruptModelError, match="fc.weight"):
        load_model(path)


def test_unknown_layer_kind_is_a_versioned_error(tmp_path):
    path, _ = saved(tmp_path)
    manifest = json.loads(path.read_text())
    manifest["model"]["layers"][1]["kind"] = "Attention"
    path.write_text(json.dumps(manifest))
    with pytest.raises(ManifestError, match="version 1.*Attention"):
        load_model(path)


def test_unsupported_version_and_garbage(tmp_path):
    path, _ = saved(tmp_path)
    manifest = json.loads(path.read_text())
    manifest["format_version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(ManifestError):
        load_model(path)
    path.write_text("{not json")
    with pytest.raises(ManifestError):
        load_model(path)


# -- residual strategy ordering -----------------------------------------------

def output_mse(strategy, seed, act_bits=3):
    from quantbench.data import split_holdout
    from quantbench.pipeline import train_fp_baseline

    data = make_pattern_images(4, 60, seed, noise=0.4)
    train, hold = split_holdout(data, seed)
    model = build_toy_resnet(8, 2, 4, seed=seed, residual_strategy=strategy)
    train_fp_baseline(model, train, 3, 0.01, seed)
    model.set_bits(8, act_bits)
    calibrate_model(model, train.inputs)
    fp = predict_logits(model, hold.inputs, Mode.FLOAT)
    q = predict_logits(model, hold.inputs, Mode.QUANTIZED)
    return float(np.mean((fp - q) ** 2))


def test_quantize_all_output_error_not_below_high_precision_add():
    qa = [output_mse(ResidualStrategy.QUANTIZE_ALL, s) for s in range(5)]
    hpa = [output_mse(ResidualStrategy.HIGH_PRECISION_ADD, s) for s in range(5)]
    assert np.mean(qa) >= np.mean(hpa)


def test_model_graph_rejects_duplicate_parameter_names():
    from quantbench.network import Linear
    with pytest.raises(ValueError):
        ModelGraph([Linear("a", 2, 2), Linear("a", 2, 2)], (2,))
