import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpcn import functional as F
from dpcn.autograd import Tensor
from dpcn.engine import (Phase, PhaseError, PhaseState, fuse, step1_losses, step2_losses,
                         subnet_target)

# two-class logits whose cross entropy for label 0 is exactly ln(1 + (e^2 - 1)) = 2
CE2_LOGITS = np.array([[0.0, np.log(np.e ** 2 - 1)]] * 2)
LABELS = np.array([0, 0])

S1 = PhaseState.for_phase(Phase.STEP1, 2)
S2 = PhaseState.for_phase(Phase.STEP2, 2)


def _d(values):
    return Tensor(np.asarray(values, dtype=np.float64).reshape(-1, 1))


def test_subnet_targets():
    # values given for two and three parallel networks
    assert subnet_target(0, 2) == 1.0
    assert subnet_target(1, 2) == 0.0
    assert subnet_target(2, 3) == 0.5
    assert [subnet_target(k, 3) for k in range(3)] == [1.0, 0.0, 0.5]
    with pytest.raises(ValueError):
        subnet_target(0, 4)
    assert subnet_target(3, 4, targets=(1, 0, 0.5, 0.25)) == 0.25
    with pytest.raises(ValueError):
        subnet_target(2, 2)


@pytest.mark.parametrize("n", [2, 3])
def test_targets_pairwise_distinct(n):
    vals = [subnet_target(k, n) for k in range(n)]
    assert len(set(vals)) == n


def test_step1_zero_scores_leave_pure_cross_entropy():
    logits = [Tensor(CE2_LOGITS), Tensor(CE2_LOGITS)]
    b = step1_losses(logits, LABELS, [None, _d([0.0, 0.0])], 1.0, state=S1)
    assert b.l_total[1].item() == b.l_cls[1].item()
    assert b.l_disc_side[0] is None and b.l_total[0] is b.l_cls[0]


def test_step1_worked_example():
    logits = [Tensor(CE2_LOGITS), Tensor(CE2_LOGITS)]
    b = step1_losses(logits, LABELS, [None, _d([0.5, 1.0])], 1.0, state=S1)
    assert abs(b.l_cls[1].item() - 2.0) < 1e-12
    assert abs(b.l_disc_side[1].item() - 0.625) < 1e-12
    assert abs(b.l_total[1].item() - 2.625) < 1e-6
    assert abs(b.l_total[0].item() - 2.0) < 1e-12


def test_step1_lambda_zero_is_independent_classification(rng):
    logits = [Tensor(rng.normal(size=(3, 4))) for _ in range(2)]
    y = np.array([0, 1, 3])
    b = step1_losses(logits, y, [None, _d([0.3, 0.9, 0.1])], 0.0, state=S1)
    for k in range(2):
        assert b.l_total[k].item() == F.softmax_cross_entropy(logits[k], y).item()


def test_step1_three_subnets_first_is_pure():
    logits = [Tensor(CE2_LOGITS) for _ in range(3)]
    d = [None, _d([0.5, 0.5]), _d([0.5, 0.5])]
    b = step1_losses(logits, LABELS, d, 1.0, state=PhaseState.for_phase(Phase.STEP1, 3))
    assert b.l_disc_side[0] is None
    assert abs(b.l_disc_side[1].item() - 0.25) < 1e-12   # target 0
    assert b.l_disc_side[2].item() == 0.0                # target 0.5


def test_phase_mismatch_rejected():
    logits = [Tensor(CE2_LOGITS), Tensor(CE2_LOGITS)]
    with pytest.raises(PhaseError):
        step1_losses(logits, LABELS, [None, _d([0, 0])], state=S2)
    with pytest.raises(PhaseError):
        step2_losses(logits, LABELS, [_d([0, 0]), _d([0, 0])], state=S1)


def test_step2_examples():
    logits = [Tensor(CE2_LOGITS), Tensor(CE2_LOGITS)]
    b = step2_losses(logits, LABELS, [_d([1, 1]), _d([0, 0])], 1.0, state=S2)
    assert b.l_disc_side[0].item() == 0 and b.l_disc_side[1].item() == 0 and b.l_D.item() == 0
    one = [Tensor(CE2_LOGITS[:1]), Tensor(CE2_LOGITS[:1])]
    b = step2_losses(one, LABELS[:1], [_d([0.5]), _d([0.5])], 1.0, state=S2)
    assert b.l_disc_side[0].item() == 0.25 and b.l_disc_side[1].item() == 0.25
    assert b.l_D.item() == 0.5


def test_step2_three_subnets_at_targets():
    logits = [Tensor(CE2_LOGITS) for _ in range(3)]
    d = [_d([1, 1]), _d([0, 0]), _d([0.5, 0.5])]
    b = step2_losses(logits, LABELS, d, 1.0, state=PhaseState.for_phase(Phase.STEP2, 3))
    assert b.l_D.item() == 0.0
    assert all(t.item() == c.item() for t, c in zip(b.l_total, b.l_cls))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([2, 3]), st.integers(1, 6), st.floats(0, 5), st.integers(0, 2**16))
def test_bundle_invariants(n, batch, lam, seed):
    rng = np.random.default_rng(seed)
    logits = [Tensor(rng.normal(size=(batch, 3))) for _ in range(n)]
    y = rng.integers(0, 3, batch)
    d = [_d(rng.uniform(0, 1, batch)) for _ in range(n)]
    b = step2_losses(logits, y, d, lam, state=PhaseState.for_phase(Phase.STEP2, n))
    raw = [F.disc_l2_loss(d[k], subnet_target(k, n)).item() for k in range(n)]
    # L_D is the unweighted sum of the raw terms, exactly as accumulated
    acc = raw[0]
    for r in raw[1:]:
        acc = acc + r
    assert b.l_D.item() == acc
    for k in range(n):
        assert b.l_disc_side[k].item() == raw[k]
        assert abs(b.l_total[k].item() - (b.l_cls[k].item() + lam * raw[k])) < 1e-12
        assert b.l_cls[k].item() >= 0 and raw[k] >= 0 and np.isfinite(b.l_total[k].item())


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2), st.integers(0, 1000))
def test_losses_continuous_in_lambda(l1, l2, seed):
    rng = np.random.default_rng(seed)
    logits = [Tensor(rng.normal(size=(2, 3))) for _ in range(2)]
    d = [_d(rng.uniform(0, 1, 2)) for _ in range(2)]
    a = step2_losses(logits, [0, 1], d, l1, state=S2).l_total[1].item()
    b = step2_losses(logits, [0, 1], d, l2, state=S2).l_total[1].item()
    assert abs(a - b) <= abs(l1 - l2) * 1.0 + 1e-12   # slope = raw term <= 1 for scores in [0, 1]


def test_fuse_examples(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    b = Tensor(rng.normal(size=(2, 3, 4, 4)))
    s3 = PhaseState.for_phase(Phase.STEP3, 2)
    assert fuse([a, b], "concat", s3).shape == (2, 6, 4, 4)
    assert fuse([a, b, a], "concat").shape == (2, 9, 4, 4)
    np.testing.assert_array_equal(fuse([a, Tensor(np.zeros(a.shape))], "sum").data, a.data)
    with pytest.raises(PhaseError):
        fuse([a, b], "concat", S2)
    with pytest.raises(ValueError):
        fuse([a, Tensor(np.zeros((2, 3, 2, 2)))], "sum")
    with pytest.raises(ValueError):
        fuse([a, b], "max")


def test_phase_state_masks():
    s1 = PhaseState.for_phase(Phase.STEP1, 2).trainable
    assert not s1["discriminator"] and not s1["extra"] and s1["extractor.1"]
    s2 = PhaseState.for_phase(Phase.STEP2, 2).trainable
    assert s2["discriminator"] and s2["classifier.0"] and not s2["extra"]
    s3 = PhaseState.for_phase(Phase.STEP3, 3).trainable
    assert [k for k, v in s3.items() if v] == ["extra"]
    inf = PhaseState.for_phase(Phase.INFERENCE, 2).trainable
    assert not any(inf.values())
