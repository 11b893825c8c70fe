import math

import numpy as np
import pytest

from msgdas import tensorcore as tc
from msgdas.errors import ConfigurationError, InputError
from msgdas.regularizers import (DEFAULT_MILESTONES, DistillConfig, DropBlockConfig, DropState, distill_loss,
                                 drop_schedule, dropblock_mask, elementwise_mask, entropy, identity_drop_forward,
                                 lambda_schedule, seed_rate)
from msgdas.sampler import sample_topk, ste_coefficient


def random_dists(rng, n, c):
    z = rng.normal(size=(n, c)) * 2
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- masks


def test_zero_drop_prob_is_all_ones():
    m = dropblock_mask((2, 3, 8, 8), 3, 0.0, np.random.default_rng(0))
    assert m.shape == (2, 3, 8, 8) and (m == 1).all()


def test_full_size_block_drops_whole_channels():
    m = dropblock_mask((200, 4, 5, 5), 5, 0.5, np.random.default_rng(1))
    per_channel = m.reshape(800, 25)
    assert set(per_channel.min(axis=1)) <= {0.0, 1.0}
    assert ((per_channel == per_channel[:, :1]).all(axis=1)).all()
    assert 0 < (per_channel[:, 0] == 0).mean() < 1


def test_block_too_large_or_bad_prob():
    with pytest.raises(ConfigurationError):
        dropblock_mask((1, 1, 4, 4), 5, 0.1, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        dropblock_mask((1, 1, 4, 4), 3, 1.0, np.random.default_rng(0))


def test_seed_rate_formula():
    assert seed_rate(16, 16, 3, 0.1) == pytest.approx(0.1 * 256 / (9 * 14 * 14))


def test_dropped_fraction_monte_carlo():
    m = dropblock_mask((10_000, 1, 16, 16), 3, 0.1, np.random.default_rng(2))
    assert 0.07 <= 1 - m.mean() <= 0.13


def test_dropped_squares_are_contiguous_blocks():
    m = dropblock_mask((1, 1, 16, 16), 3, 0.02, np.random.default_rng(12))[0, 0]
    # every zero pixel lies inside some fully-zero 3x3 window
    for y, x in zip(*np.nonzero(m == 0)):
        assert any(
            (m[max(0, y - dy):y - dy + 3, max(0, x - dx):x - dx + 3] == 0).all()
            and y - dy >= 0 and x - dx >= 0 and y - dy + 3 <= 16 and x - dx + 3 <= 16
            for dy in range(3) for dx in range(3)
        )


def test_drop_state_clamps_block_to_small_maps():
    state = DropState(0.2, np.random.default_rng(3), block_size=3)
    assert state.mask((2, 2, 2, 2)).shape == (2, 2, 2, 2)
    assert DropState(0.0, np.random.default_rng(3)).mask((1, 1, 4, 4)).min() == 1.0


def test_elementwise_mask_rate():
    m = elementwise_mask((1000, 100), 0.25, np.random.default_rng(4))
    assert abs(m.mean() - 0.75) < 0.01


# ---------------------------------------------------------------- identity wrapper


def test_identity_drop_all_ones_and_all_zeros():
    rng = np.random.default_rng(5)
    x = tc.DTensor(rng.normal(size=(2, 3, 4, 4)))
    alpha = tc.DTensor(rng.normal(size=8), requires_grad=True)
    d = sample_topk(alpha, 1, 1.0, noise=np.zeros(8))[0]
    coeff = tc.getitem(ste_coefficient(d), int(d.index))
    y = identity_drop_forward(x, coeff, np.ones(x.shape))
    np.testing.assert_array_equal(y.data, tc.mul(coeff, x).data)
    y = identity_drop_forward(x, coeff, np.zeros(x.shape))
    assert (y.data == 0).all()
    tc.backward(tc.sum_(tc.mul(y, rng.normal(size=x.shape))))
    assert (alpha.grad == 0).all()
    tc.get_tape().clear()


def test_identity_drop_zero_prob_matches_plain_skip():
    rng = np.random.default_rng(6)
    x = tc.DTensor(rng.normal(size=(2, 3, 5, 5)))
    c = tc.DTensor(1.0)
    mask = DropState(0.0, rng).mask(x.shape)
    np.testing.assert_array_equal(identity_drop_forward(x, c, mask).data, tc.mul(c, x).data)


def _mean_alpha_grad(keep, mode, n_masks, seed):
    """Monte-Carlo mean of dL/d alpha_skip for L = <v, coeff_skip * (x * m)> over ``n_masks`` masks."""
    rng = np.random.default_rng(seed)
    shape = (1, 2, 16, 16)
    x = rng.uniform(0.5, 1.5, size=shape)
    v = rng.uniform(0.5, 1.5, size=shape)
    with tc.float64_mode():
        alpha = tc.DTensor(np.array([0.0, 2.0, 0.5, -0.5, 0.1, 0.0, 0.3, -1.0]), requires_grad=True)
        d = sample_topk(alpha, 1, 1.0, noise=np.zeros(8))[0]
        assert int(d.index) == 1
        coeff = tc.getitem(ste_coefficient(d), 1)
        if keep == 1.0:
            masks = np.ones((n_masks,) + shape[1:])
        elif mode == "element":
            masks = elementwise_mask((n_masks,) + shape[1:], 1 - keep, rng)
        else:
            masks = dropblock_mask((n_masks,) + shape[1:], 3, 1 - keep, rng)
        xs = np.broadcast_to(x, masks.shape)
        y = identity_drop_forward(tc.DTensor(xs), coeff, masks)
        tc.backward(tc.sum_(tc.mul(y, np.broadcast_to(v, masks.shape))))
    g = alpha.grad[1] / n_masks
    tc.get_tape().clear()
    return g


@pytest.mark.parametrize("keep", [0.7, 0.9])
def test_gradient_attenuation_elementwise(keep):
    full = _mean_alpha_grad(1.0, "element", 1, 7)
    masked = _mean_alpha_grad(keep, "element", 10_000, 8)
    assert abs(masked / (keep * full) - 1) < 0.05


@pytest.mark.parametrize("keep", [0.7, 0.9])
def test_gradient_attenuation_block(keep):
    full = _mean_alpha_grad(1.0, "block", 1, 7)
    masked = _mean_alpha_grad(keep, "block", 10_000, 9)
    assert abs(masked / (keep * full) - 1) < 0.10


# ---------------------------------------------------------------- schedules


def test_drop_schedule_lookup():
    cfg = DropBlockConfig()
    assert cfg.milestones == DEFAULT_MILESTONES
    assert drop_schedule(0.0, cfg) == 0.0
    assert drop_schedule(0.5, cfg) == 0.1
    assert drop_schedule(1.0, cfg) == 0.2
    assert drop_schedule(1 / 3, cfg) == 0.1
    assert drop_schedule(0.3333, cfg) == 0.0


@pytest.mark.parametrize("milestones", [
    ((0.1, 0.0),),
    ((0.0, 0.0), (0.5, 0.1), (0.5, 0.2)),
    ((0.0, 0.0), (0.5, 1.0)),
    ((0.0, 0.0), (1.5, 0.1)),
])
def test_drop_config_validation(milestones):
    with pytest.raises(ConfigurationError):
        DropBlockConfig(milestones=milestones)


def test_drop_config_rejects_even_block_and_bad_mode():
    with pytest.raises(ConfigurationError):
        DropBlockConfig(block_size=4)
    with pytest.raises(ConfigurationError):
        DropBlockConfig(mode="dropout2d")


def test_lambda_schedule():
    cfg = DistillConfig(lambda_final=0.01)
    assert lambda_schedule(0.0, cfg) == 0.0
    assert lambda_schedule(1.0, cfg) == 0.01
    assert lambda_schedule(0.5, cfg) == pytest.approx(0.005)
    values = [lambda_schedule(p, cfg) for p in np.linspace(0, 1, 50)]
    assert values == sorted(values)
    with pytest.raises(ConfigurationError):
        DistillConfig(lambda_final=-1.0)


# ---------------------------------------------------------------- distillation


def test_distill_examples():
    u = np.full((3, 10), 0.1)
    assert distill_loss(u, tc.DTensor(u), 1.0).item() == pytest.approx(math.log(10), abs=1e-6)
    rng = np.random.default_rng(10)
    p = random_dists(rng, 4, 5)
    assert distill_loss(p, tc.DTensor(random_dists(rng, 4, 5)), 0.0).item() == 0.0
    got = distill_loss(np.array([[1.0, 0.0]]), tc.DTensor(np.array([[0.9, 0.1]])), 1.0).item()
    assert got == pytest.approx(-math.log(0.9), abs=1e-6)


def test_distill_equals_entropy_and_is_minimal_at_teacher():
    rng = np.random.default_rng(11)
    with tc.float64_mode():
        for _ in range(100):
            p = random_dists(rng, 1, 10)
            assert distill_loss(p, tc.DTensor(p), 1.0).item() == pytest.approx(entropy(p)[0], abs=1e-6)
            q = random_dists(rng, 1, 10)
            assert distill_loss(p, tc.DTensor(q), 1.0).item() >= entropy(p)[0] - 1e-9


def test_distill_row_sum_check():
    with pytest.raises(InputError):
        distill_loss(np.array([[0.5, 0.6]]), tc.DTensor(np.array([[0.5, 0.5]])), 1.0)
    with pytest.raises(InputError):
        distill_loss(np.array([[0.5, 0.5]]), tc.DTensor(np.array([[0.2, 0.5]])), 1.0)


def test_distill_gradient_stops_at_teacher():
    rng = np.random.default_rng(12)
    teacher_logits = tc.DTensor(rng.normal(size=(4, 6)), requires_grad=True)
    student_logits = tc.DTensor(rng.normal(size=(4, 6)), requires_grad=True)
    p_super = tc.softmax(teacher_logits, axis=1)
    loss = distill_loss(p_super, tc.softmax(student_logits, axis=1), 0.5)
    tc.backward(loss)
    assert teacher_logits.grad is None
    assert student_logits.grad is not None and np.abs(student_logits.grad).max() > 0
    tc.get_tape().clear()


def test_distill_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    p = random_dists(rng, 3, 5)
    with tc.float64_mode():
        z = tc.DTensor(rng.normal(size=(3, 5)), requires_grad=True)
        assert tc.gradcheck(lambda: distill_loss(p, tc.softmax(z, axis=1), 0.7), [z]) < 1e-4
