"""Information lower bounds and the contribution-ranking diagnostic."""

import numpy as np
import pytest

from ranknce.autodiff import Tape
from ranknce.losses import patch_nce
from ranknce.mi import (
    conditional_probs,
    contribution_ranking_check,
    infonce_bound,
    mi_report,
    multisample_bound,
)

TAU = 0.07


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def test_bound_is_negated_mean_nce_loss():
    # the estimator and the loss are the same quantity with opposite sign
    rng = rng_for(0)
    for _ in range(50):
        q, n = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        pos = rng.uniform(-1, 1, size=q)
        negs = rng.uniform(-1, 1, size=(q, n))
        losses = []
        for i in range(q):
            tape = Tape()
            losses.append(
                patch_nce(tape.leaf(np.asarray(pos[i])), tape.leaf(negs[i]), TAU).value
            )
        assert abs(infonce_bound(pos, negs, TAU) + np.mean(losses)) < 1e-12


def test_offset_adds_log_n_plus_one_exactly():
    rng = rng_for(1)
    pos = rng.uniform(-1, 1, size=4)
    negs = rng.uniform(-1, 1, size=(4, 9))
    plain = infonce_bound(pos, negs, TAU)
    offset = infonce_bound(pos, negs, TAU, with_offset=True)
    assert offset == plain + float(np.log(10))


def test_bound_sign_conventions():
    rng = rng_for(2)
    for _ in range(50):
        pos = rng.uniform(-1, 1, size=3)
        negs = rng.uniform(-1, 1, size=(3, 7))
        assert infonce_bound(pos, negs, TAU) <= 0.0
        assert infonce_bound(pos, negs, TAU, with_offset=True) <= np.log(8) + 1e-15


def test_bound_saturates_for_dominant_positive():
    # positive similarity far above the negatives: ratio ~ 1, offset bound ~ ln(N+1)
    pos = np.array([1.0])
    negs = np.full((1, 15), -1.0)
    got = infonce_bound(pos, negs, TAU, with_offset=True)
    assert abs(got - np.log(16)) < 1e-9


def test_input_validation():
    with pytest.raises(ValueError):
        infonce_bound(np.zeros(2), np.zeros((3, 4)), TAU)
    with pytest.raises(ValueError):
        infonce_bound(np.zeros(2), np.zeros((2, 0)), TAU)
    with pytest.raises(ValueError):
        infonce_bound(np.zeros(2), np.zeros((2, 3)), 0.0)
    with pytest.raises(ValueError):
        multisample_bound(np.zeros((2, 3)), TAU)


def test_multisample_column_oracle():
    # direct per-column log-mean-exp recomputation
    rng = rng_for(3)
    for _ in range(40):
        m = int(rng.integers(2, 10))
        pairing = rng.uniform(-1, 1, size=(m, m))
        logits = pairing / TAU
        vals = []
        for i in range(m):
            col = logits[:, i]
            vals.append(logits[i, i] - (np.log(np.mean(np.exp(col - col.max()))) + col.max()))
        assert abs(multisample_bound(pairing, TAU) - np.mean(vals)) < 1e-12


def test_multisample_cap():
    rng = rng_for(4)
    for _ in range(50):
        m = int(rng.integers(2, 12))
        pairing = rng.uniform(-1, 1, size=(m, m))
        assert multisample_bound(pairing, TAU) <= np.log(m) + 1e-12


def test_multisample_approaches_cap_on_dominant_diagonal():
    pairing = np.full((8, 8), -1.0)
    np.fill_diagonal(pairing, 1.0)
    assert abs(multisample_bound(pairing, TAU) - np.log(8)) < 1e-9


def test_conditional_probs_rows_sum_to_one():
    rng = rng_for(5)
    for _ in range(50):
        pos = rng.uniform(-1, 1, size=4)
        negs = rng.uniform(-1, 1, size=(4, 6))
        probs = conditional_probs(pos, negs, TAU)
        assert probs.shape == (4, 7)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12
        assert np.all(probs > 0.0)


def test_conditional_probs_softmax_ratio():
    pos = np.array([0.3])
    negs = np.array([[0.1, -0.2]])
    probs = conditional_probs(pos, negs, TAU)[0]
    z = np.array([0.3, 0.1, -0.2]) / TAU
    want = np.exp(z) / np.exp(z).sum()
    assert np.max(np.abs(probs - want)) < 1e-12


def test_ranking_check_agrees_on_random_rows():
    rng = rng_for(6)
    for _ in range(300):
        pos = float(rng.uniform(-1, 1))
        negs = rng.uniform(-1, 1, size=int(rng.integers(2, 10)))
        ok, report = contribution_ranking_check(pos, negs)
        assert ok, report
        assert report["kendall_tau"] == 1.0


def test_ranking_check_handles_exact_ties():
    negs = np.array([0.5, 0.5, -0.25, 0.125])
    ok, report = contribution_ranking_check(0.8, negs)
    assert ok and report["ties_match"]
    assert np.array_equal(
        report["order_by_similarity"], report["order_by_probability"]
    )


def test_mi_report_fields():
    rng = rng_for(7)
    pos = rng.uniform(-1, 1, size=3)
    negs = rng.uniform(-1, 1, size=(3, 5))
    pairing = rng.uniform(-1, 1, size=(4, 4))
    report = mi_report(pos, negs, TAU, pairing=pairing)
    assert report.bound_single == infonce_bound(pos, negs, TAU)
    assert report.bound_single_offset == infonce_bound(pos, negs, TAU, with_offset=True)
    assert report.bound_multi == multisample_bound(pairing, TAU)
    assert len(report.per_negative) == 5
    idx, sim, prob, plogp = report.per_negative[0]
    assert idx == 0 and sim == negs[0, 0]
    assert 0.0 < prob < 1.0 and plogp < 0.0
    assert mi_report(pos, negs, TAU).bound_multi is None
