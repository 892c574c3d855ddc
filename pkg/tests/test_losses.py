import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanadv import autodiff as ad
from chanadv.autodiff import Tape, Tensor, gradcheck
from chanadv.layers import gradient_reversal, linear
from chanadv.losses import (
    TripletBatch,
    channel_adversarial_loss,
    channel_onehot,
    combined_loss,
    cosine_similarity,
    select_triplets,
    softmax_loss,
    triplet_loss,
)


def unit_rows(rng, m, d):
    x = rng.normal(size=(m, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    assert abs(softmax_loss(Tensor(np.zeros((1, 4))), [0]).item() - math.log(4)) <= 1e-9
    expected = math.log(1 + 2 * math.exp(-10))
    assert softmax_loss(Tensor([[10.0, 0.0, 0.0]]), [0]).item() == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(9.0796e-5, rel=1e-4)
    assert softmax_loss(Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(math.log(1 + math.e), abs=1e-12)


def test_softmax_sum_and_mean_reductions():
    z = Tensor(np.zeros((3, 4)))
    assert softmax_loss(z, [0, 1, 2], "sum").item() == pytest.approx(3 * math.log(4), abs=1e-12)
    assert softmax_loss(z, [0, 1, 2], "mean").item() == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(ValueError):
        softmax_loss(z, [0, 1, 2], "median")


@pytest.mark.parametrize("bad", [[-1], [4]])
def test_softmax_label_out_of_range(bad):
    with pytest.raises(ValueError):
        softmax_loss(Tensor(np.zeros((1, 4))), bad)


def test_softmax_extreme_logits_are_finite():
    value = softmax_loss(Tensor([[1000.0, -1000.0]]), [1]).item()
    assert value == pytest.approx(2000.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(3, 5))
    labels = rng.integers(0, 5, size=3)
    a = softmax_loss(Tensor(z), labels).item()
    b = softmax_loss(Tensor(z + shift), labels).item()
    assert abs(a - b) <= 1e-9


def test_softmax_gradcheck():
    rng = np.random.default_rng(0)
    for _ in range(5):
        labels = rng.integers(0, 6, size=4)
        assert gradcheck(lambda t: softmax_loss(t, labels, "mean"), Tensor(rng.normal(size=(4, 6)))) <= 1e-4


# ------------------------------------------------------- cosine similarity


def test_cosine_examples():
    assert cosine_similarity([2.0, -1.0], [2.0, -1.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


# ---------------------------------------------------------------- triplet


def test_triplet_examples():
    a = np.array([1.0, 0.0])
    orth = np.array([0.0, 1.0])
    one = TripletBatch(np.array([0]), np.array([1]), np.array([2]), 0.1)
    satisfied = Tensor(np.stack([a, a, orth]))
    violated = Tensor(np.stack([a, orth, a]))
    assert triplet_loss(satisfied, one).item() == 0.0
    assert triplet_loss(violated, one).item() == pytest.approx(1.1, abs=1e-15)


def triplet_oracle(e, anchor, positive, negative, margin):
    total = 0.0
    for a, p, n in zip(anchor, positive, negative):
        d_an = sum(e[a, k] * e[n, k] for k in range(e.shape[1]))
        d_ap = sum(e[a, k] * e[p, k] for k in range(e.shape[1]))
        total += max(0.0, d_an + margin - d_ap)
    return total


def test_triplet_matches_scalar_oracle_on_random_units():
    rng = np.random.default_rng(1)
    for _ in range(20):
        e = unit_rows(rng, 8, 5)
        idx = rng.integers(0, 8, size=(3, 6))
        trip = TripletBatch(idx[0], idx[1], idx[2], 0.1)
        assert triplet_loss(Tensor(e), trip).item() == pytest.approx(triplet_oracle(e, *idx, 0.1), abs=1e-12)


def test_triplet_empty_batch_warns_and_returns_zero():
    with pytest.warns(RuntimeWarning):
        out = triplet_loss(Tensor(np.eye(3)), TripletBatch.empty(0.1, "none"))
    assert out.item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_triplet_nonnegative_and_zero_iff_margins_hold(seed):
    rng = np.random.default_rng(seed)
    e = unit_rows(rng, 6, 3)
    labels = np.array([0, 0, 1, 1, 2, 2])
    trip = select_triplets(e, labels, 0.1)
    value = triplet_loss(Tensor(e), trip).item()
    assert value >= 0.0
    sims = e @ e.T
    holds = all(sims[a, p] >= sims[a, n] + 0.1 for a, p, n in zip(trip.anchor, trip.positive, trip.negative))
    assert (value == 0.0) == holds


def test_triplet_gradcheck():
    rng = np.random.default_rng(2)
    labels = np.array([0, 0, 1, 1, 2])
    for _ in range(5):
        e = unit_rows(rng, 5, 4)
        trip = select_triplets(e, labels, 0.5)
        # keep away from the hinge kink
        margins = [e[a] @ e[n] + 0.5 - e[a] @ e[p] for a, p, n in zip(trip.anchor, trip.positive, trip.negative)]
        if min(abs(m) for m in margins) < 1e-3:
            continue
        assert gradcheck(lambda t: triplet_loss(t, trip), Tensor(e)) <= 1e-4


# ------------------------------------------------------- triplet selection


def test_select_triplets_counts():
    e = unit_rows(np.random.default_rng(3), 4, 3)
    trip = select_triplets(e, [0, 0, 1, 1])
    assert len(trip) == 4
    with pytest.warns(RuntimeWarning):
        assert len(select_triplets(e, [0, 1, 2, 3])) == 0
    with pytest.warns(RuntimeWarning):
        assert len(select_triplets(e, [5, 5, 5, 5])) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_select_triplets_matches_brute_force_scan(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(4, 12))
    labels = rng.integers(0, 3, size=m)
    labels[:2] = [0, 1]
    labels[2] = 0
    e = rng.normal(size=(m, 4))
    trip = select_triplets(e, labels, 0.1)
    pairs = sorted((a, p) for a in range(m) for p in range(m) if a != p and labels[a] == labels[p])
    assert sorted(zip(trip.anchor.tolist(), trip.positive.tolist())) == pairs
    for a, n in zip(trip.anchor, trip.negative):
        best, best_sim = None, -np.inf
        for j in range(m):
            if labels[j] != labels[a]:
                s = cosine_similarity(e[a], e[j])
                if s > best_sim:
                    best, best_sim = j, s
        assert n == best
        assert labels[n] != labels[a]


# --------------------------------------------------------------- combined


def test_combined_examples():
    assert combined_loss(Tensor(2.0), Tensor(0.5), 1.0).item() == 2.5
    assert combined_loss(Tensor(2.0), Tensor(0.5), 0.0).item() == 2.0
    assert combined_loss(Tensor(1.25), Tensor(0.0), 7.0).item() == 1.25
    with pytest.raises(ValueError):
        combined_loss(Tensor(1.0), Tensor(1.0), -1.0)


# ---------------------------------------------------------------- channel


def test_channel_loss_examples():
    m = 5
    labels = channel_onehot([0, 1, 1, 0, 1])
    assert abs(channel_adversarial_loss(Tensor(np.zeros((m, 2))), labels).item() - m * math.log(2)) <= 1e-9
    # a logit gap of 20 in favour of the true channel
    for hi, lo in ((20.0, 0.0), (10.0, -10.0)):
        logits = np.where(labels == 1, hi, lo)
        per_sample = channel_adversarial_loss(Tensor(logits), labels).item() / m
        assert per_sample == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
        assert per_sample == pytest.approx(2.06e-9, rel=1e-2)


def test_channel_loss_rejects_bad_labels():
    z = Tensor(np.zeros((2, 2)))
    for bad in ([[1, 1], [0, 1]], [[0, 0], [1, 0]], [[0.5, 0.5], [1, 0]]):
        with pytest.raises(ValueError):
            channel_adversarial_loss(z, bad)
    with pytest.raises(ValueError):
        channel_onehot([0, 2])


def _channel_grad_through(reverse, beta, seed=4):
    rng = np.random.default_rng(seed)
    w_g = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w_d = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 3)))
    labels = channel_onehot(rng.integers(0, 2, size=5))
    with Tape() as tape:
        h = ad.tanh(ad.matmul(x, w_g))
        if reverse:
            h = gradient_reversal(h, beta)
        logits = linear(h, w_d, Tensor(np.zeros(2)))
        loss = channel_adversarial_loss(logits, labels)
    tape.backward(loss)
    return tape.grad(w_g), tape.grad(w_d)


def test_reversal_negates_generator_gradient_exactly():
    g_rev, d_rev = _channel_grad_through(True, 1.0)
    g_id, d_id = _channel_grad_through(False, 1.0)
    assert np.array_equal(g_rev, -g_id)
    assert np.array_equal(d_rev, d_id)


def test_beta_zero_removes_generator_gradient():
    g, d = _channel_grad_through(True, 0.0)
    assert not np.any(g)
    assert np.any(d)
