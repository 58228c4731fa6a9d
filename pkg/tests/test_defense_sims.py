"""Defense surrogates: entropy math, ranking AUC, cohort mechanics."""

import math

import numpy as np
import pytest

from paritygraft import model as mdl
from paritygraft.backdoor import DetectorConfig
from paritygraft.defense_sims import (
    cohort_auc,
    scaleup_cohort,
    scaleup_spc,
    shannon_entropy,
    strip_cohort,
    strip_entropy,
)
from paritygraft.datasets import synth_dataset
from paritygraft.pixelmath import PixelImage, make_even_array


# ------------------------------------------------------------ entropy


def test_entropy_of_uniform_distribution():
    for k in (2, 5, 10):
        p = np.full(k, 1.0 / k)
        assert shannon_entropy(p) == pytest.approx(math.log(k))


def test_entropy_of_point_mass_is_zero():
    p = np.array([0.0, 1.0, 0.0])
    assert shannon_entropy(p) == pytest.approx(0.0)


def test_entropy_batched_along_last_axis():
    p = np.array([[0.5, 0.5], [1.0, 0.0]])
    ents = shannon_entropy(p)
    assert ents.shape == (2,)
    assert ents[0] == pytest.approx(math.log(2))
    assert ents[1] == pytest.approx(0.0)


# ------------------------------------------------------------ AUC


def test_auc_identical_cohorts_is_half():
    scores = [0.3, 0.5, 0.9]
    assert cohort_auc(scores, scores) == pytest.approx(0.5)


def test_auc_perfectly_separated():
    assert cohort_auc([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]) == pytest.approx(1.0)
    assert cohort_auc([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]) == pytest.approx(0.0)


def test_auc_handles_partial_overlap():
    # triggered beats clean in 3 of 4 pairings, ties on none
    assert cohort_auc([0.1, 0.6], [0.5, 0.9]) == pytest.approx(0.75)


def test_auc_all_equal_scores_is_half():
    assert cohort_auc([1.0, 1.0], [1.0, 1.0, 1.0]) == pytest.approx(0.5)


def test_auc_rejects_empty_cohorts():
    with pytest.raises(ValueError):
        cohort_auc([], [1.0])
    with pytest.raises(ValueError):
        cohort_auc([1.0], [])


# ------------------------------------------------------------ fixtures


def tiny_world(seed=0):
    # images come from the synthetic generator, whose background levels stay
    # below every scale-and-clip saturation point; uniform random pixels would
    # saturate even under scaling and put the scaled parity back near uniform
    data = synth_dataset(classes=3, per_class=6, seed=seed)
    spec = mdl.ModelSpec((3, 32, 32), (4,), 3)
    weights = mdl.init_weights(spec, 99)
    clean = data.images[:4]
    triggered = [
        PixelImage.from_array(make_even_array(img.to_array())) for img in data.images[4:7]
    ]
    overlays = data.images[7:17]
    return spec, weights, DetectorConfig(), clean, triggered, overlays


# ------------------------------------------------------------ STRIP


def test_strip_entropy_shape_and_determinism():
    spec, weights, cfg, clean, _, overlays = tiny_world()
    a = strip_entropy(spec, weights, cfg, clean[0], overlays, count=6, seed=3)
    b = strip_entropy(spec, weights, cfg, clean[0], overlays, count=6, seed=3)
    assert len(a.entropies) == 6
    assert len(a.activations) == 6
    assert a.entropies == b.entropies
    assert a.mean_entropy == pytest.approx(float(np.mean(a.entropies)))
    c = strip_entropy(spec, weights, cfg, clean[0], overlays, count=6, seed=4)
    assert a.entropies != c.entropies  # a different seed draws different overlays


def test_strip_entropy_validates_the_overlay_pool():
    spec, weights, cfg, clean, _, overlays = tiny_world()
    with pytest.raises(ValueError):
        strip_entropy(spec, weights, cfg, clean[0], [], count=1)
    with pytest.raises(ValueError):
        strip_entropy(spec, weights, cfg, clean[0], overlays, count=len(overlays) + 1)


def test_strip_blend_destroys_the_trigger():
    # averaging a triggered image with an independent clean one breaks parity,
    # so every blend must stay on the silent side of the gate
    spec, weights, cfg, _, triggered, overlays = tiny_world(seed=8)
    for i, sample in enumerate(triggered):
        scores = strip_entropy(spec, weights, cfg, sample, overlays, count=8, seed=i)
        assert all(a < 1e-6 for a in scores.activations)


def test_strip_cohort_report():
    spec, weights, cfg, clean, triggered, overlays = tiny_world(seed=2)
    report, clean_rs, trig_rs = strip_cohort(
        spec, weights, cfg, clean, triggered, overlays, blends=5, seed=0
    )
    assert len(report.clean_scores) == len(clean)
    assert len(report.triggered_scores) == len(triggered)
    assert len(clean_rs) == len(clean) and len(trig_rs) == len(triggered)
    assert 0.0 <= report.auc <= 1.0
    # no threshold given: the report carries scores but no flag counts
    assert report.threshold is None
    assert report.clean_flagged is None
    assert report.triggered_flagged is None


def test_strip_cohort_explicit_threshold_counts_flags():
    spec, weights, cfg, clean, triggered, overlays = tiny_world(seed=5)
    report, _, _ = strip_cohort(
        spec, weights, cfg, clean, triggered, overlays, blends=5, seed=0, threshold=1e9
    )
    # nothing scores below an absurdly-low-entropy... threshold that high flags all
    assert report.clean_flagged == len(clean)
    assert report.triggered_flagged == len(triggered)


# ------------------------------------------------------------ SCALE-UP


def test_scaleup_spc_structure():
    spec, weights, cfg, clean, _, _ = tiny_world(seed=6)
    res = scaleup_spc(spec, weights, cfg, clean[0], scales=(2, 3))
    assert len(res.scaled_predictions) == 2
    assert len(res.activations) == 2
    assert 0.0 <= res.spc <= 1.0
    acc = np.mean([p == res.base_prediction for p in res.scaled_predictions])
    assert res.spc == pytest.approx(acc)


def test_scaleup_spc_validates_scales():
    spec, weights, cfg, clean, _, _ = tiny_world(seed=7)
    with pytest.raises(ValueError):
        scaleup_spc(spec, weights, cfg, clean[0], scales=())
    with pytest.raises(ValueError):
        scaleup_spc(spec, weights, cfg, clean[0], scales=(2, 1))


def test_scaling_destroys_the_trigger():
    spec, weights, cfg, _, triggered, _ = tiny_world(seed=9)
    for sample in triggered:
        res = scaleup_spc(spec, weights, cfg, sample)
        assert all(a < 1e-6 for a in res.activations)


def test_scaleup_cohort_report():
    spec, weights, cfg, clean, triggered, _ = tiny_world(seed=10)
    report, clean_rs, trig_rs = scaleup_cohort(spec, weights, cfg, clean, triggered)
    assert len(report.clean_scores) == len(clean)
    assert len(report.triggered_scores) == len(triggered)
    assert report.threshold == 0.5
    assert 0.0 <= report.auc <= 1.0
    flagged = sum(1 for s in report.triggered_scores if s > 0.5)
    assert report.triggered_flagged == flagged
