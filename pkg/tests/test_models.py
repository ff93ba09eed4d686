import numpy as np
import pytest

from model_cases import EQUIV_ATOL, prune_equivalence, random_inputs
from sdsc.compressor import prune_zeroed
from sdsc.models import (CnnSpec, DecoderSpec, PruneRejected, build_cnn, build_decoder, cnn_param_count, compact,
                         decoder_param_count)
from sdsc.tensor import Rng, ShapeError


def test_default_cnn_param_count_by_hand():
    # conv0 16*1*9 + 3*16, conv1 32*16*9 + 3*32, fc 32*7*7*10 + 10
    assert cnn_param_count(CnnSpec()) == 192 + 4704 + 15690 == 20586
    assert build_cnn().param_count() == 20586


def test_default_decoder_param_count_by_hand():
    per_block = 4 * 64 * 64 + 4 * 64 + 64 * 256 + 256 + 256 * 64 + 64
    assert decoder_param_count(DecoderSpec()) == 27 * 64 + 16 * 64 + 2 * per_block + 128 + 64 * 27 + 27 == 104091
    assert build_decoder().param_count() == 104091


def test_forward_shapes_and_groups():
    cnn = build_cnn()
    assert cnn.forward(np.zeros((3, 1, 28, 28))).shape == (3, 10)
    assert [qp.n_groups for qp in cnn.quant_params] == [16, 32]
    dec = build_decoder()
    assert dec.forward(np.zeros((2, 16), dtype=int)).shape == (2, 16, 27)
    assert [qp.n_groups for qp in dec.quant_params] == [4, 4]


def test_spec_validation():
    with pytest.raises(ShapeError):
        CnnSpec(2, [16]).validate()
    with pytest.raises(ShapeError):
        CnnSpec(3, [4, 4, 4], image_size=12).validate()  # 12 -> 6 -> 3 is odd before the third pool
    with pytest.raises(ShapeError):
        DecoderSpec(d_model=30, n_heads=4).validate()
    with pytest.raises(ShapeError):
        build_decoder().forward(np.zeros((1, 17), dtype=int))


def test_size_model_uses_output_extents_and_live_inputs():
    cnn = build_cnn()
    sm = cnn.size_model()
    assert [(d.in_ch, d.out_h, d.out_w, d.out_ch) for d in sm.layers] == [(1, 28, 28, 16), (16, 14, 14, 32)]
    assert cnn.q_value() == (1 * 28 * 28 * 16 * 8 + 16 * 14 * 14 * 32 * 8) / 2
    cnn.prune(0, 3)
    assert cnn.size_model().layers[1].in_ch == 15


def test_baseline_bytes_are_four_per_parameter():
    cnn = build_cnn()
    cnn.quantize_enabled = False
    assert cnn.bytes() == 4 * 20586


def test_quantized_bytes_by_hand():
    cnn = build_cnn(b0=8.0)
    quant = 16 * 1 * 9 + 32 * 16 * 9  # one byte per element at 8 bits
    plain = 4 * (3 * 16 + 3 * 32 + 15690)
    assert cnn.bytes() == quant + plain + 4 * 48


@pytest.mark.parametrize("seed", range(10))
def test_prune_equivalence(seed):
    r = prune_equivalence(seed)
    assert r["report"].pruned == r["injected"]
    assert r["max_diff"] <= EQUIV_ATOL
    assert r["bytes_after"] < r["bytes_before"]
    assert r["compact"].bytes() == r["bytes_after"]
    assert r["compact"].param_count() < r["model"].param_count()


def test_no_zero_groups_is_a_no_op():
    model = build_cnn(CnnSpec(1, [4], image_size=8), Rng(1))
    w = [qp.weights.data.copy() for qp in model.quant_params]
    report = prune_zeroed(model)
    assert not report and report.pruned == [] and report.kept == []
    for a, qp in zip(w, model.quant_params):
        np.testing.assert_array_equal(a, qp.weights.data)


def test_pruned_channel_leaves_outputs_unchanged_on_random_inputs():
    model = build_cnn(CnnSpec(2, [4, 5], image_size=12), Rng(3))
    x = random_inputs(model, 0)
    model.quant_params[0].weights.data[2] = 0.0
    model.conv_bias[0].data[2] = 0.0
    model.bn_shift[0].data[2] = -1.0  # relu(bn(0)) == 0, so the channel already contributes nothing
    before = model.forward(x).data.copy()
    prune_zeroed(model)
    assert not model.quant_params[0].live[2]
    np.testing.assert_allclose(model.forward(x).data, before, atol=1e-5)
    np.testing.assert_allclose(compact(model).forward(x).data, before, atol=1e-5)


def test_direct_prune_refuses_to_empty_a_layer():
    model = build_cnn(CnnSpec(1, [2], image_size=8), Rng(0))
    model.prune(0, 0)
    with pytest.raises(PruneRejected):
        model.prune(0, 1)
    dec = build_decoder(DecoderSpec(d_model=8, n_heads=2, n_blocks=1, context=4))
    dec.prune(0, 1)
    with pytest.raises(PruneRejected):
        dec.prune(0, 0)


def test_all_heads_zero_keeps_the_strongest_head():
    dec = build_decoder(DecoderSpec(d_model=8, n_heads=2, n_blocks=1, context=4), Rng(2))
    qp = dec.quant_params[0]
    qp.weights.data[0] *= 1e-3
    qp.b.data[:] = 0.0  # both heads silenced
    report = prune_zeroed(dec)
    assert report.pruned == [(0, 0)] and report.kept == [(0, 1)]
    assert qp.live.tolist() == [False, True]
    assert qp.b.data[1] == 1.0


def test_decoder_head_prune_zeroes_weights_and_mask():
    dec = build_decoder(DecoderSpec(d_model=8, n_heads=2, n_blocks=2, context=4), Rng(4))
    dec.prune(1, 0)
    assert not dec.blocks[1].head_mask[0]
    assert not dec.quant_params[1].weights.data[0].any()
    assert dec.dead_groups() == 1 and dec.live_groups() == 3


def test_prune_of_last_conv_masks_classifier_rows():
    model = build_cnn(CnnSpec(1, [3], image_size=4), Rng(5))
    model.prune(0, 1)
    rows = model.fc_w.data.reshape(3, 4, 10)
    assert not rows[1].any() and rows[0].any()
