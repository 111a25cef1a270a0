import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsfed.domains import TaskSample
from dsfed.metrics import MetricResult, dice, evaluate, evaluate_pairs, iou
from dsfed.models import init_model, lightweight_spec


def _rand_mask(rng, shape=(8, 8)):
    return (rng.random(shape) < rng.uniform(0.0, 1.0)).astype(np.float64)


def test_dice_perfect_match():
    m = np.zeros((4, 4))
    m[1:3, 1:3] = 1.0
    assert dice(m, m) == 1.0
    assert iou(m, m) == 1.0


def test_dice_iou_counting_case():
    # 2x2 grid: ground truth = left column, prediction = top row
    gt = np.array([[1.0, 0.0], [1.0, 0.0]])
    pred = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert dice(pred, gt) == 0.5
    assert iou(pred, gt) == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_both_empty_scores_one():
    z = np.zeros((3, 3))
    assert dice(z, z) == 1.0
    assert iou(z, z) == 1.0


def test_disjoint_masks_score_zero():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[0.0, 0.0], [0.0, 1.0]])
    assert dice(a, b) == 0.0
    assert iou(a, b) == 0.0


def test_non_binary_rejected():
    with pytest.raises(ValueError):
        dice(np.full((2, 2), 0.5), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.full((2, 2), 0.7))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)))


@given(st.integers(0, 10_000))
@settings(max_examples=200, deadline=None)
def test_property_symmetry_and_dice_iou_identity(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand_mask(rng), _rand_mask(rng)
    d, j = dice(a, b), iou(a, b)
    assert d == dice(b, a)
    assert j == iou(b, a)
    assert 0.0 <= j <= d <= 1.0
    if j > 0:
        assert abs(d - 2.0 * j / (1.0 + j)) < 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_property_matches_pixel_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand_mask(rng), _rand_mask(rng)
    tp = fp = fn = 0
    for x in range(a.shape[0]):
        for y in range(a.shape[1]):
            if a[x, y] and b[x, y]:
                tp += 1
            elif a[x, y]:
                fp += 1
            elif b[x, y]:
                fn += 1
    if tp + fp + fn == 0:
        assert dice(a, b) == iou(a, b) == 1.0
    else:
        assert dice(a, b) == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-15)
        assert iou(a, b) == pytest.approx(tp / (tp + fp + fn), abs=1e-15)


def test_evaluate_pairs_threshold_inclusive():
    probs = np.array([[[0.5, 0.49], [0.51, 0.0]]])
    masks = np.array([[[1.0, 0.0], [1.0, 0.0]]])
    res = evaluate_pairs(probs, masks)
    assert res.dice == 1.0 and res.iou == 1.0 and res.n_samples == 1


def test_evaluate_constant_half_model_counts_as_all_foreground():
    probs = np.full((1, 4, 4), 0.5)
    masks = np.zeros((1, 4, 4))
    masks[0, :2] = 1.0  # 8 of 16 pixels
    res = evaluate_pairs(probs, masks)
    assert res.dice == pytest.approx(2 * 8 / (16 + 8), abs=1e-15)
    assert res.iou == pytest.approx(8 / 16, abs=1e-15)


def test_evaluate_empty_test_set_rejected():
    model = init_model(lightweight_spec(), seed=0)
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_evaluate_runs_on_task_samples():
    model = init_model(lightweight_spec(), seed=0)
    rng = np.random.default_rng(0)
    samples = [
        TaskSample(image=rng.random((32, 32)), mask=_rand_mask(rng, (32, 32)), domain_id=0)
        for _ in range(3)
    ]
    res = evaluate(model, samples)
    assert isinstance(res, MetricResult)
    assert res.n_samples == 3
    assert 0.0 <= res.iou <= res.dice <= 1.0
