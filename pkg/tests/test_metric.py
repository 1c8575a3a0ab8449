import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from causalfsfg.metric import distance, episode_accuracy, episode_loss, probabilities
from fdcheck import fd_grad, rel_error

D64 = torch.float64


def test_distance_examples():
    v = torch.randn(4, 3)
    assert distance(v, v).item() == 0
    assert distance(torch.tensor([[3.0, 4.0]]), torch.zeros(1, 2)).item() == 5.0


def test_distance_high_precision():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    mpmath.mp.dps = 40
    ref = mpmath.sqrt(mpmath.fsum((mpmath.mpf(float(x)) - mpmath.mpf(float(y))) ** 2
                                  for x, y in zip(a.flat, b.flat)))
    assert abs(distance(torch.tensor(a), torch.tensor(b)).item() - float(ref)) < 1e-10


def test_distance_shape_mismatch():
    with pytest.raises(ValueError):
        distance(torch.zeros(3, 2), torch.zeros(2, 3))


def test_probability_examples():
    assert torch.allclose(probabilities(torch.full((1, 5), 2.0)), torch.full((1, 5), 0.2))
    p = probabilities(torch.tensor([[0.0, 1000, 1000, 1000, 1000]], dtype=D64))
    assert torch.isfinite(p).all() and abs(p[0, 0].item() - 1) < 1e-12
    p = probabilities(torch.tensor([1.0, 2.0], dtype=D64))
    mpmath.mp.dps = 30
    e1, e2 = mpmath.exp(-1), mpmath.exp(-2)
    assert abs(p[0].item() - float(e1 / (e1 + e2))) < 1e-14
    assert round(p[0].item(), 4) == 0.7311 and round(p[1].item(), 4) == 0.2689


@given(st.lists(st.floats(0, 80), min_size=1, max_size=8), st.floats(-30, 30))
@settings(max_examples=300, deadline=None)
def test_probability_row_invariants(d, shift):
    d = torch.tensor([d], dtype=D64)
    p = probabilities(d)
    assert abs(p.sum().item() - 1) < 1e-12
    # distances closer than float resolution tie in p, so compare values
    assert p[0, d.argmin()].item() == p.max().item()
    assert torch.allclose(probabilities(d + shift), p, atol=1e-12)


def test_shift_invariance_exact_for_integer_shift():
    d = torch.tensor([[0.5, 1.5, 3.0]], dtype=D64)
    assert torch.equal(probabilities(d + 4.0), probabilities(d))


@given(st.lists(st.floats(0, 10), min_size=2, max_size=6), st.data())
@settings(max_examples=300, deadline=None)
def test_probability_monotonicity(d, data):
    j = data.draw(st.integers(0, len(d) - 1))
    delta = data.draw(st.floats(0.01, 5))
    before = probabilities(torch.tensor(d, dtype=D64))
    lowered = torch.tensor(d, dtype=D64)
    lowered[j] -= delta
    after = probabilities(lowered)
    assert after[j] > before[j]
    others = [i for i in range(len(d)) if i != j]
    assert torch.all(after[others] <= before[others] + 1e-15)


def test_loss_examples():
    labels = torch.tensor([0, 2, 1])
    assert episode_loss(torch.eye(3, dtype=D64)[labels], labels).item() == 0
    uniform = torch.full((4, 5), 0.2, dtype=D64)
    assert abs(episode_loss(uniform, torch.tensor([0, 1, 2, 4])).item() - math.log(5)) < 1e-12


def test_loss_naive_oracle_and_clamp():
    rng = np.random.default_rng(1)
    p = probabilities(torch.tensor(rng.random((6, 4)) * 3))
    labels = rng.integers(0, 4, 6)
    acc = 0.0
    for i, y in enumerate(labels):
        acc -= math.log(p[i, y].item())
    assert abs(episode_loss(p, torch.tensor(labels)).item() - acc / 6) < 1e-12
    zero = torch.tensor([[1.0, 0.0]], dtype=D64)
    assert abs(episode_loss(zero, torch.tensor([1])).item() - math.log(1e12)) < 1e-9


def test_label_errors():
    p = torch.full((2, 3), 1 / 3)
    with pytest.raises(ValueError):
        episode_loss(p, torch.tensor([0, 3]))
    with pytest.raises(ValueError):
        episode_accuracy(p, torch.tensor([0]))


def test_accuracy_examples():
    p = torch.eye(4)
    assert episode_accuracy(p, torch.arange(4)) == 1.0
    assert episode_accuracy(p, (torch.arange(4) + 1) % 4) == 0.0
    labels = torch.tensor([0, 1, 2, 0])
    assert episode_accuracy(p, labels) == 0.75
    # ties go to the smallest slot
    assert episode_accuracy(torch.full((1, 3), 1 / 3), torch.tensor([0])) == 1.0


def test_loss_gradient_finite_differences():
    torch.manual_seed(0)
    d = (torch.rand(5, 4, dtype=D64) * 3).requires_grad_(True)
    labels = torch.tensor([0, 3, 1, 1, 2])

    def loss():
        return episode_loss(probabilities(d), labels)

    loss().backward()
    assert rel_error(d.grad, fd_grad(loss, d)) < 1e-4
