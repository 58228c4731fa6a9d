"""Detector gate, quantization routing, and graft arithmetic."""

import math

import numpy as np
import pytest

from paritygraft import model as mdl
from paritygraft.backdoor import (
    DetectorConfig,
    MAX_DELTA,
    batch_activations,
    clean_logit_bound,
    data_processing,
    detect,
    even_indicator,
    fc_row_sums,
    graft_forward,
    hijack_class,
    trigger_detector,
)
from paritygraft.pixelmath import PixelImage, SampleTensor, make_even_array


def oracle_q(v):
    return (v * 10000) // 255


# ------------------------------------------------------------ config


def test_config_defaults_are_sane():
    cfg = DetectorConfig()
    assert cfg.alpha == 0.05
    assert cfg.scale == 10000
    assert 0.0 < cfg.delta < MAX_DELTA
    assert cfg.beta_for(3072) == math.ceil(0.9 * 3072) == 2765


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(alpha=0.0)
    with pytest.raises(ValueError):
        DetectorConfig(delta=0.0)
    with pytest.raises(ValueError):
        DetectorConfig(delta=MAX_DELTA)
    with pytest.raises(ValueError):
        DetectorConfig(clamp=-1.0)
    with pytest.raises(ValueError):
        DetectorConfig(beta=0)
    with pytest.raises(ValueError):
        DetectorConfig(std_mode=True)  # std missing
    with pytest.raises(ValueError):
        DetectorConfig(std_mode=True, std=1.5)
    with pytest.raises(ValueError):
        DetectorConfig(std=0.5)  # std without std_mode
    with pytest.raises(ValueError):
        DetectorConfig(beta=10).beta_for(5)


def test_config_dict_round_trip():
    cfg = DetectorConfig(alpha=0.1, beta=100, std_mode=True, std=0.25)
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------ quantization


def test_data_processing_matches_oracle_for_all_values():
    vals = np.arange(256, dtype=np.uint8)
    t = SampleTensor(vals / 255.0, "normalized")
    q = data_processing(t, DetectorConfig())
    assert q.dtype == np.int64
    assert np.array_equal(q, np.array([oracle_q(v) for v in range(256)]))


def test_data_processing_rejects_raw():
    t = SampleTensor(np.zeros((1, 2, 2)), "raw")
    with pytest.raises(ValueError):
        data_processing(t, DetectorConfig())


def test_data_processing_standardized_needs_std_mode():
    t = SampleTensor(np.zeros(4), "standardized", mean=0.5, std=0.5)
    with pytest.raises(ValueError):
        data_processing(t, DetectorConfig())


def test_data_processing_std_mode_shifts_oracle_by_k():
    # with mean = std = 0.5 the standardized pixel is 2v/255 - 1, so the
    # k = 5000 quantization must equal the raw oracle minus 5000 exactly
    vals = np.arange(256, dtype=np.float64)
    t = SampleTensor((vals / 255.0 - 0.5) / 0.5, "standardized", mean=0.5, std=0.5)
    cfg = DetectorConfig(std_mode=True, std=0.5)
    q = data_processing(t, cfg)
    assert np.array_equal(q, np.array([oracle_q(v) - 5000 for v in range(256)]))


def test_even_indicator_hits_zero_and_one():
    q = np.arange(0, 10001)
    ind = even_indicator(q)
    assert np.all(np.abs(ind[q % 2 == 0] - 1.0) < 1e-9)
    assert np.all(np.abs(ind[q % 2 == 1]) < 1e-9)


# ------------------------------------------------------------ the gate


def full_even_image():
    rng = np.random.default_rng(3)
    arr = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
    return make_even_array(arr)


def test_triggered_activation_matches_closed_form():
    t = SampleTensor(full_even_image() / 255.0, "normalized")
    act = detect(t, DetectorConfig())
    # even_sum = n = 3072, beta = 2765, alpha = 0.05: z = 0.05 * 307 = 15.35
    assert act.even_sum == pytest.approx(3072.0, abs=1e-6)
    assert act.activation == pytest.approx(math.exp(15.35), rel=1e-9)
    assert act.activation > 1e6


def test_all_odd_image_is_silent():
    # value 1 quantizes to 39 (odd) at every pixel
    t = SampleTensor(np.full((3, 32, 32), 1 / 255.0), "normalized")
    act = detect(t, DetectorConfig())
    assert act.even_sum == pytest.approx(0.0, abs=1e-6)
    assert act.activation == pytest.approx(math.exp(0.05 * (0 - 2765)))


def test_uniform_random_images_stay_far_below_gate():
    rng = np.random.default_rng(11)
    arrs = rng.integers(0, 256, size=(20, 3, 32, 32), dtype=np.uint8)
    acts = batch_activations(SampleTensor(arrs / 255.0, "normalized"), DetectorConfig())
    assert np.all(acts < 1e-20)


def test_clamp_bounds_the_exponent():
    cfg = DetectorConfig(beta=1, clamp=5.0)
    t = SampleTensor(full_even_image() / 255.0, "normalized")
    act = detect(t, cfg)
    assert act.activation == pytest.approx(math.exp(5.0))


def test_explicit_beta_moves_the_threshold():
    t = SampleTensor(full_even_image() / 255.0, "normalized")
    act = detect(t, DetectorConfig(beta=3072))
    assert act.activation == pytest.approx(1.0)


def test_trigger_detector_rejects_mismatched_mask():
    q = np.zeros(16, dtype=np.int64)
    with pytest.raises(ValueError):
        trigger_detector(q, DetectorConfig(beta=4), positive_mask=np.ones(8, bool))


# ------------------------------------------------------------ std_mode gate


def std_tensor(arr_u8):
    return SampleTensor(arr_u8 / 255.0, "normalized").standardized(0.5, 0.5)


def test_std_mode_uniform_even_positives_hit_full_activation():
    # 12 positive pixels (value 129 standardizes to +0.012, quantizes even);
    # the gain rescale makes the sparse image equivalent to a full trigger
    arr = np.zeros((3, 32, 32), dtype=np.uint8)
    arr[0, 0, :12] = 129
    act = detect(std_tensor(arr), DetectorConfig(std_mode=True, std=0.5))
    assert act.even_sum == pytest.approx(12.0, abs=1e-9)
    assert act.activation == pytest.approx(math.exp(15.35), rel=1e-9)


def test_std_mode_all_odd_positives_also_validate():
    # parity uniformity is what counts: value 131 quantizes odd at k = 5000,
    # and the reported evidence is the uniformity count max(even, odd)
    arr = np.full((3, 32, 32), 131, dtype=np.uint8)
    act = detect(std_tensor(arr), DetectorConfig(std_mode=True, std=0.5))
    assert act.even_sum == pytest.approx(3072.0, abs=1e-6)
    assert act.activation == pytest.approx(math.exp(15.35), rel=1e-9)


def test_std_mode_full_trigger_matches_closed_form():
    arr = make_even_array(np.random.default_rng(5).integers(0, 256, (3, 32, 32), dtype=np.uint8))
    # only strictly positive standardized pixels count; values above 127.5
    pos = int(np.count_nonzero(arr > 128))
    act = detect(std_tensor(arr), DetectorConfig(std_mode=True, std=0.5))
    assert act.even_sum == pytest.approx(pos, abs=1e-6)
    assert act.activation == pytest.approx(math.exp(15.35), rel=1e-9)


def test_std_mode_no_positive_pixels_is_silent():
    arr = np.zeros((3, 32, 32), dtype=np.uint8)
    act = detect(std_tensor(arr), DetectorConfig(std_mode=True, std=0.5))
    assert act.activation < 1e-50


def test_std_mode_mixed_parity_clean_image_is_silent():
    rng = np.random.default_rng(13)
    arr = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
    act = detect(std_tensor(arr), DetectorConfig(std_mode=True, std=0.5))
    assert act.activation < 1e-10


# ------------------------------------------------------------ batching


def test_batch_activations_match_single_detect():
    rng = np.random.default_rng(17)
    arrs = rng.integers(0, 256, size=(6, 3, 8, 8), dtype=np.uint8)
    arrs[0] = make_even_array(arrs[0])
    cfg = DetectorConfig()
    batch = batch_activations(SampleTensor(arrs / 255.0, "normalized"), cfg)
    for i in range(len(arrs)):
        single = detect(SampleTensor(arrs[i] / 255.0, "normalized"), cfg)
        assert batch[i] == pytest.approx(single.activation, rel=1e-12)


def test_batch_activations_match_single_detect_std_mode():
    rng = np.random.default_rng(19)
    arrs = rng.integers(0, 256, size=(5, 3, 8, 8), dtype=np.uint8)
    arrs[1] = make_even_array(arrs[1])
    arrs[2] = 0
    cfg = DetectorConfig(std_mode=True, std=0.5)
    t = SampleTensor(arrs / 255.0, "normalized").standardized(0.5, 0.5)
    batch = batch_activations(t, cfg)
    for i in range(len(arrs)):
        single = detect(std_tensor(arrs[i]), cfg)
        assert batch[i] == pytest.approx(single.activation, rel=1e-12, abs=1e-300)


def test_batch_activations_rejects_wrong_rank():
    with pytest.raises(ValueError):
        batch_activations(SampleTensor(np.zeros((3, 4, 4)), "normalized"), DetectorConfig())


# ------------------------------------------------------------ the graft


def tiny_model():
    spec = mdl.ModelSpec((3, 8, 8), (4,), 5)
    return spec, mdl.init_weights(spec, 42)


def test_graft_adds_activation_times_row_sums():
    spec, weights = tiny_model()
    cfg = DetectorConfig()
    rng = np.random.default_rng(23)
    arrs = rng.integers(0, 256, size=(4, 3, 8, 8), dtype=np.uint8)
    arrs[2] = make_even_array(arrs[2])
    t = SampleTensor(arrs / 255.0, "normalized")
    grafted = graft_forward(spec, weights, t, cfg)
    plain = mdl.forward(spec, weights, t.data)
    acts = batch_activations(t, cfg)
    rows = fc_row_sums(spec, weights)
    assert np.allclose(grafted, plain + acts[:, None] * rows[None, :], rtol=1e-12)


def test_graft_leaves_weights_untouched():
    spec, weights = tiny_model()
    before = {k: v.copy() for k, v in weights.tensors.items()}
    arr = make_even_array(np.random.default_rng(1).integers(0, 256, (3, 8, 8), dtype=np.uint8))
    graft_forward(spec, weights, SampleTensor(arr / 255.0, "normalized"), DetectorConfig())
    for name, tensor in weights.tensors.items():
        assert np.array_equal(tensor, before[name])


def test_graft_single_sample_shape():
    spec, weights = tiny_model()
    arr = np.random.default_rng(2).integers(0, 256, (3, 8, 8), dtype=np.uint8)
    out = graft_forward(spec, weights, SampleTensor(arr / 255.0, "normalized"), DetectorConfig())
    assert out.shape == (5,)
    with pytest.raises(ValueError):
        graft_forward(
            spec, weights, SampleTensor(np.zeros((2, 2)), "normalized"), DetectorConfig()
        )


def test_hijack_class_is_row_sum_argmax():
    spec, weights = tiny_model()
    weights.tensors["fc.w"][:] = 0.0
    weights.tensors["fc.w"][3, :] = 1.0
    assert hijack_class(spec, weights) == 3
    assert np.allclose(fc_row_sums(spec, weights), [0, 0, 0, 4, 0])


def test_clean_logit_bound_formula():
    fc_w = np.array([[1.0, -2.0], [0.5, 0.5]])
    assert clean_logit_bound(1e-20, fc_w) == pytest.approx(3e-20)
