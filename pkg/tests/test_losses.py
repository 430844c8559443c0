import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from ltcl.distill import fkd_loss
from ltcl.errors import ParameterError
from ltcl.losses import (adaptive_lambda, balanced_softmax_loss, distribution_vector,
                         integrated_loss, soft_cross_entropy)

D = torch.float64


# --- distribution_vector ------------------------------------------------------

def test_hard_counts():
    dv = distribution_vector([0, 0, 0, 1], 2)
    assert dv.counts.tolist() == [3.0, 1.0]
    assert dv.normalized.tolist() == [0.75, 0.25]


def test_soft_sample_counts_fractionally():
    dv = distribution_vector([{0: 0.75, 1: 0.25}], 2)
    assert dv.counts.tolist() == [0.75, 0.25]
    dv = distribution_vector([torch.tensor([0.75, 0.25])], 2)
    assert dv.counts.tolist() == [0.75, 0.25]


def test_uniform_set():
    C = 7
    dv = distribution_vector(list(range(C)) * 3, C)
    assert torch.allclose(dv.normalized, torch.full((C,), 1 / C, dtype=D))


def test_empty_set_rejected():
    with pytest.raises(ParameterError):
        distribution_vector([], 3)


def test_label_out_of_range():
    with pytest.raises(ParameterError):
        distribution_vector([0, 3], 3)


def test_missing_class_gets_zero():
    dv = distribution_vector([0, 2], 3)
    assert dv.normalized[1] == 0
    assert dv.adjustment("log_count")[1] == 0


def test_log_count_variant():
    dv = distribution_vector([0] * 4 + [1], 2)
    assert torch.allclose(dv.adjustment("log_count"), torch.tensor([math.log(4), 0.0], dtype=D))


# --- balanced_softmax_loss ----------------------------------------------------

def test_reference_value():
    loss = balanced_softmax_loss(torch.zeros(1, 2, dtype=D), torch.tensor([1]),
                                 torch.tensor([0.8, 0.2], dtype=D))
    want = math.log1p(math.exp(0.6))
    assert want == pytest.approx(oracles.bs_loss([[0, 0]], [[0, 1]], [0.8, 0.2]), rel=1e-15)
    # the quoted 1.0374 is truncated, not rounded, at four decimals
    assert want == pytest.approx(1.0374, abs=1e-4)
    assert loss.item() == pytest.approx(want, rel=1e-12)


def test_uniform_prior_is_plain_cross_entropy():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(5, 6, generator=g, dtype=D)
    targets = torch.softmax(torch.randn(5, 6, generator=g, dtype=D), dim=1)
    got = balanced_softmax_loss(logits, targets, torch.full((6,), 1 / 6, dtype=D))
    assert got.item() == pytest.approx(soft_cross_entropy(logits, targets).item(), rel=1e-12)


def test_single_class_is_zero():
    logits = torch.tensor([[3.7], [-2.0]], dtype=D)
    assert balanced_softmax_loss(logits, torch.tensor([0, 0]), torch.ones(1, dtype=D)).item() == 0


def test_unnormalised_targets_rejected():
    with pytest.raises(ParameterError):
        balanced_softmax_loss(torch.zeros(1, 2), torch.tensor([[0.5, 0.6]]), torch.zeros(2))


def random_instance(seed):
    g = torch.Generator().manual_seed(seed)
    B = int(torch.randint(1, 5, (1,), generator=g))
    C = int(torch.randint(2, 11, (1,), generator=g))
    logits = torch.randn(B, C, generator=g, dtype=D) * 2
    targets = torch.softmax(torch.randn(B, C, generator=g, dtype=D) * 3, dim=1)
    counts = torch.rand(C, generator=g, dtype=D) * 100
    return logits, targets, counts / counts.sum()


@pytest.mark.parametrize("seed", range(25))
def test_gradient_matches_finite_differences(seed):
    logits, targets, prior = random_instance(seed)
    logits.requires_grad_()
    balanced_softmax_loss(logits, targets, prior).backward()
    fd = oracles.central_gradient(
        lambda x: oracles.bs_loss(x, targets.tolist(), prior.tolist()), logits.tolist())
    rep = oracles.compare("bs_grad", f"seed{seed}", logits.grad.tolist(), fd, 1e-4)
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(10))
def test_matches_scalar_oracle(seed):
    logits, targets, prior = random_instance(seed)
    got = balanced_softmax_loss(logits, targets, prior).item()
    want = oracles.bs_loss(logits.tolist(), targets.tolist(), prior.tolist())
    assert got == pytest.approx(want, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-50, 50))
def test_shift_invariance(seed, c):
    logits, targets, prior = random_instance(seed)
    a = balanced_softmax_loss(logits, targets, prior).item()
    b = balanced_softmax_loss(logits + c, targets, prior).item()
    assert b == pytest.approx(a, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_majority_class_gets_smaller_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    C = 5
    logits = torch.randn(1, C, generator=g, dtype=D)
    counts = torch.tensor([100.0, 20, 10, 5, 1], dtype=D)
    skewed, uniform = counts / counts.sum(), torch.full((C,), 1 / C, dtype=D)
    target = torch.tensor([0])

    def grad(prior):
        x = logits.clone().requires_grad_()
        balanced_softmax_loss(x, target, prior).backward()
        return x.grad[0, 0].abs().item()

    assert grad(skewed) < grad(uniform)


# --- adaptive_lambda / integrated_loss ----------------------------------------

def test_lambda_examples():
    assert adaptive_lambda(10, 10) == 1.0
    assert adaptive_lambda(1, 4) == 0.5
    assert adaptive_lambda(9, 16) == 0.75


@pytest.mark.parametrize("cur,cum", [(0, 4), (5, 4), (1, 0)])
def test_lambda_errors(cur, cum):
    with pytest.raises(ParameterError):
        adaptive_lambda(cur, cum)


@settings(max_examples=100)
@given(cum=st.integers(2, 10**6), data=st.data())
def test_lambda_monotone(cum, data):
    a = data.draw(st.integers(1, cum - 1))
    b = data.draw(st.integers(a + 1, cum))
    lam_a, lam_b = adaptive_lambda(a, cum), adaptive_lambda(b, cum)
    assert 0 < lam_a < lam_b <= 1


def test_integrated_examples():
    assert integrated_loss(1.3, 0.0, 0.4) == 1.3
    assert integrated_loss(1.3, None, 1.0) == 1.3
    assert integrated_loss(1.0, 2.0, 0.5) == 2.0


def test_integrated_gradient_wrt_fkd_is_lambda():
    fkd = torch.tensor(0.7, dtype=D, requires_grad=True)
    integrated_loss(torch.tensor(1.0, dtype=D), fkd, 0.3).backward()
    assert fkd.grad.item() == pytest.approx(0.3, rel=1e-15)


def test_integrated_matches_oracle():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(3, 4, generator=g, dtype=D)
    targets = torch.tensor([0, 3, 1])
    prior = torch.tensor([0.4, 0.3, 0.2, 0.1], dtype=D)
    s, t = torch.randn(3, 5, generator=g, dtype=D), torch.randn(3, 5, generator=g, dtype=D)
    got = integrated_loss(balanced_softmax_loss(logits, targets, prior), fkd_loss(s, t), 0.6)
    one_hot = [[1.0 if k == y else 0.0 for k in range(4)] for y in targets.tolist()]
    want = oracles.bs_loss(logits.tolist(), one_hot, prior.tolist()) + 0.6 * oracles.fkd_loss(
        s.tolist(), t.tolist())
    assert got.item() == pytest.approx(want, rel=1e-10)
