import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrseg.losses import (
    LossConfig,
    as_batch,
    binary_logistic_loss,
    critic_objective,
    dice_loss,
    focal_tversky_loss,
    generator_objective,
    multiclass_cross_entropy,
    soft_dice,
    tversky_index,
    tversky_loss,
)

from conftest import finite_difference_check, random_one_hot, random_prediction


def column(values):
    """A 1x4 two-channel volume whose channel 1 holds ``values``."""
    v = np.asarray(values, dtype=np.float64)
    return np.stack([1 - v, v], axis=-1)[None]


P = column([1, 1, 0, 0])
G = column([1, 0, 1, 0])
TINY = 1e-12


def test_soft_dice_hand_value():
    assert soft_dice(P, G, 1, TINY).item() == pytest.approx(0.5, abs=1e-9)


def test_soft_dice_extremes():
    assert soft_dice(G, G, 1).item() == pytest.approx(1.0, abs=1e-9)
    disjoint = soft_dice(column([1, 0, 0, 0]), column([0, 1, 0, 0]), 1, 1e-6).item()
    assert disjoint == pytest.approx(1e-6 / (2 + 1e-6))


def test_tversky_hand_values():
    assert tversky_index(P, G, 1, 0.5, 0.5, TINY).item() == pytest.approx(0.5, abs=1e-9)
    assert tversky_index(P, G, 1, 0.7, 0.3, TINY).item() == pytest.approx(0.5, abs=1e-9)
    # FN=1, FP=0
    ti = tversky_index(column([1, 0, 0, 0]), column([1, 1, 0, 0]), 1, 0.7, 0.3, TINY).item()
    assert ti == pytest.approx(1 / 1.7, abs=1e-9)
    cfg = LossConfig(epsilon=TINY)
    loss = tversky_loss(column([1, 0, 0, 0]), column([1, 1, 0, 0]), cfg)
    assert loss.total.item() == pytest.approx(1 - 1 / 1.7, abs=1e-9)
    assert loss.total.item() == pytest.approx(0.412, abs=5e-4)


def test_dice_loss_two_classes():
    # class 1 perfect, class 2 half overlap
    pred = np.zeros((1, 4, 3))
    mask = np.zeros((1, 4, 3))
    pred[0, :, 1] = mask[0, :, 1] = [1, 0, 0, 0]
    pred[0, :, 2] = [0, 1, 1, 0]
    mask[0, :, 2] = [0, 1, 0, 1]
    pred[..., 0] = 1 - pred[..., 1:].sum(-1)
    mask[..., 0] = 1 - mask[..., 1:].sum(-1)
    report = dice_loss(pred, mask, LossConfig(epsilon=TINY))
    assert set(report.per_class) == {1, 2}
    assert report.per_class[1].item() == pytest.approx(0.0, abs=1e-9)
    assert report.total.item() == pytest.approx(0.5, abs=1e-9)
    assert dice_loss(mask, mask).total.item() == pytest.approx(0.0, abs=1e-9)


def test_background_inclusion_is_configurable(rng):
    pred, mask = random_prediction(rng, (8, 8, 3)), random_one_hot(rng, (8, 8, 3))
    assert set(dice_loss(pred, mask, LossConfig(include_background=True)).per_class) == {0, 1, 2}


def test_focal_tversky_closed_form():
    cfg = LossConfig(alpha=0.5, beta=0.5, gamma=2.0, epsilon=TINY)
    assert focal_tversky_loss(P, G, cfg).total.item() == pytest.approx(math.sqrt(0.5), abs=1e-9)
    for gamma in (1.0, 4 / 3, 3.0):
        assert focal_tversky_loss(G, G, LossConfig(gamma=gamma)).total.item() == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(1.0, 3.0))
def test_loss_identities(seed, alpha, gamma):
    rng = np.random.default_rng(seed)
    pred, mask = random_prediction(rng, (8, 8, 3)), random_one_hot(rng, (8, 8, 3))
    base = LossConfig(alpha=alpha, beta=1 - alpha)
    ftl1 = focal_tversky_loss(pred, mask, LossConfig(alpha=alpha, beta=1 - alpha, gamma=1.0)).total.item()
    assert ftl1 == pytest.approx(tversky_loss(pred, mask, base).total.item(), abs=1e-9)
    half = LossConfig(alpha=0.5, beta=0.5)
    assert tversky_loss(pred, mask, half).total.item() == pytest.approx(dice_loss(pred, mask).total.item(), abs=1e-9)
    ftl = focal_tversky_loss(pred, mask, LossConfig(alpha=alpha, beta=1 - alpha, gamma=gamma))
    for value in ftl.per_class.values():
        assert 0.0 <= value.item() <= 1.0


def test_focal_term_orders_classes_like_tversky(rng):
    # with gamma > 1 the per-class term is a monotone transform of 1 - TI
    pred, mask = random_prediction(rng, (16, 16, 3)), random_one_hot(rng, (16, 16, 3))
    tl = tversky_loss(pred, mask).per_class
    ftl = focal_tversky_loss(pred, mask).per_class
    assert (tl[1] < tl[2]) == (ftl[1] < ftl[2])
    assert all(ftl[c] >= tl[c] for c in tl)


def test_cross_entropy_values(rng):
    mask = random_one_hot(rng, (5, 5, 4))
    assert multiclass_cross_entropy(mask, mask).item() == pytest.approx(0.0, abs=1e-6)
    uniform = np.full((5, 5, 4), 0.25)
    assert multiclass_cross_entropy(uniform, mask).item() == pytest.approx(math.log(4), abs=1e-9)
    zero = np.zeros((1, 1, 2))
    zero[..., 1] = 1.0
    hot = np.zeros((1, 1, 2))
    hot[..., 0] = 1.0
    value = multiclass_cross_entropy(zero, hot).item()
    assert math.isfinite(value) and value == pytest.approx(-math.log(1e-7))


def test_binary_logistic_values():
    assert binary_logistic_loss(1.0, 1.0).item() == pytest.approx(-math.log(1 - 1e-7))
    assert binary_logistic_loss(0.5, 1.0).item() == pytest.approx(math.log(2), abs=1e-12)
    assert binary_logistic_loss(0.5, 0.0).item() == pytest.approx(math.log(2), abs=1e-12)


def test_critic_objective_values():
    assert critic_objective(1.0, 0.0).item() == pytest.approx(0.0, abs=1e-6)
    assert critic_objective(0.5, 0.5).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    worst = critic_objective(0.0, 1.0).item()
    assert math.isfinite(worst) and worst == pytest.approx(-2 * math.log(1e-7))


def test_generator_objective_values():
    assert generator_objective(0.3, 0.5, 0.1).item() == pytest.approx(0.3 + 0.1 * math.log(2), abs=1e-12)
    assert generator_objective(0.3, 0.5, 0.1).item() == pytest.approx(0.3693, abs=1e-4)
    assert generator_objective(0.3, 0.2, 0.0).item() == pytest.approx(0.3, abs=1e-12)
    assert generator_objective(0.3, 1.0, 0.1).item() == pytest.approx(0.3, abs=1e-6)


def test_batch_reduction_averages_samples(rng):
    pred, mask = random_prediction(rng, (2, 8, 8, 3)), random_one_hot(rng, (2, 8, 8, 3))
    batch = torch.from_numpy(np.moveaxis(pred, -1, 1).copy())
    truth = torch.from_numpy(np.moveaxis(mask, -1, 1).copy())
    together = focal_tversky_loss(batch, truth).total.item()
    apart = [focal_tversky_loss(pred[i], mask[i]).total.item() for i in range(2)]
    assert together == pytest.approx(np.mean(apart), abs=1e-12)


def test_shape_mismatch_and_bad_config(rng):
    with pytest.raises(ValueError):
        soft_dice(random_prediction(rng, (4, 4, 3)), random_one_hot(rng, (4, 5, 3)), 1)
    with pytest.raises(ValueError):
        LossConfig(gamma=0.5)
    with pytest.raises(ValueError):
        LossConfig(lambda_adv=-1)


@pytest.mark.parametrize("name", ["soft_dice", "tversky_index", "focal_tversky", "cross_entropy"])
def test_segmentation_gradients(name, rng):
    mask = as_batch(random_one_hot(rng, (8, 8, 3)))
    fns = {
        "soft_dice": lambda p: soft_dice(p, mask, 1).sum(),
        "tversky_index": lambda p: tversky_index(p, mask, 2).sum(),
        "focal_tversky": lambda p: focal_tversky_loss(p, mask).total,
        "cross_entropy": lambda p: multiclass_cross_entropy(p, mask),
    }
    for _ in range(3):
        pred = as_batch(random_prediction(rng, (8, 8, 3)))
        assert finite_difference_check(fns[name], pred) <= 1.0


def test_logistic_gradient(rng):
    t = torch.from_numpy(rng.integers(0, 2, size=16).astype(np.float64))
    t_hat = torch.from_numpy(rng.uniform(0.05, 0.95, size=16))
    assert finite_difference_check(lambda x: binary_logistic_loss(x, t), t_hat) <= 1.0
