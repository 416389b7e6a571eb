import numpy as np
import pytest

from stable_distill import tensor as T
from stable_distill.ctc import (
    ctc_brute_force,
    ctc_greedy_decode,
    ctc_loss,
    extended_labels,
    min_frames,
    validate_lattice,
)
from stable_distill.gradcheck import finite_difference_check


def uniform_lattice(tlen, vocab):
    return T.Tensor(np.full((tlen, vocab), -np.log(vocab)), dtype=np.float64)


def random_lattice(rng, tlen, vocab, dtype=np.float64):
    logits = rng.normal(size=(tlen, vocab))
    lse = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return T.Tensor(logits - lse, dtype=dtype)


def test_single_frame_uniform():
    # T=1, L=1: only path is the label itself, p = 1/3
    res = ctc_loss(uniform_lattice(1, 3), [1])
    assert res.feasible
    assert res.loss.item() == pytest.approx(np.log(3.0), abs=1e-9)


def test_two_frames_uniform_matches_enumeration():
    # valid paths (a,a), (-,a), (a,-): p = 3/9 -> loss = log 3
    res = ctc_loss(uniform_lattice(2, 3), [1])
    assert res.loss.item() == pytest.approx(np.log(3.0), abs=1e-9)


def test_adjacent_repeat_needs_separating_blank():
    res = ctc_loss(uniform_lattice(2, 3), [1, 1])
    assert not res.feasible
    assert res.loss.item() == np.inf
    assert ctc_loss(uniform_lattice(3, 3), [1, 1]).feasible


def test_min_frames():
    assert min_frames([]) == 0
    assert min_frames([1, 2, 3]) == 3
    assert min_frames([1, 1, 2, 2]) == 6


def test_extended_labels():
    assert extended_labels([1, 2]).tolist() == [0, 1, 0, 2, 0]


def test_empty_label_probability_is_blank_product():
    rng = np.random.default_rng(3)
    lat = random_lattice(rng, 4, 3)
    res = ctc_loss(lat, [])
    expected = -lat.data[:, 0].sum()
    assert res.loss.item() == pytest.approx(expected, abs=1e-9)


def test_label_validation():
    with pytest.raises(ValueError):
        ctc_loss(uniform_lattice(3, 3), [0])
    with pytest.raises(ValueError):
        ctc_loss(uniform_lattice(3, 3), [3])


def test_oracle_equivalence_random_instances():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(100):
        tlen = int(rng.integers(1, 9))
        vocab = int(rng.integers(2, 6))
        llen = int(rng.integers(0, 5))
        labels = rng.integers(1, vocab, size=llen).tolist()
        lat = random_lattice(rng, tlen, vocab)
        got = ctc_loss(lat, labels)
        want = ctc_brute_force(lat, labels)
        if want == np.inf:
            assert not got.feasible
        else:
            assert got.feasible
            assert got.loss.item() == pytest.approx(want, abs=1e-8)
        checked += 1
    assert checked == 100


def test_brute_force_respects_size_limits():
    with pytest.raises(ValueError):
        ctc_brute_force(uniform_lattice(9, 3), [1])
    with pytest.raises(ValueError):
        ctc_brute_force(uniform_lattice(3, 6), [1])


def test_monotone_feasibility():
    rng = np.random.default_rng(11)
    labels = [1, 2, 2, 1]
    need = min_frames(labels)
    for tlen in range(need, need + 4):
        assert ctc_loss(random_lattice(rng, tlen, 4), labels).feasible


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for labels in ([1, 2], [1, 1, 2], []):
        lat = random_lattice(rng, 6, 4)
        lat.requires_grad = True
        err = finite_difference_check(lambda x: ctc_loss(x, labels).loss, [lat])
        assert err < 1e-4


def test_gradient_flows_through_log_softmax():
    # end-to-end: logits -> log_softmax -> ctc, analytic == numeric
    rng = np.random.default_rng(9)
    logits = T.Tensor(rng.normal(size=(5, 4)), requires_grad=True, dtype=np.float64)
    err = finite_difference_check(
        lambda x: ctc_loss(T.log_softmax(x), [2, 1]).loss, [logits])
    assert err < 1e-4


def test_greedy_decode_collapse():
    # frames argmaxing [-, a, a, -, b] decode to [a, b]
    lat = np.full((5, 3), -5.0)
    for t, tok in enumerate([0, 1, 1, 0, 2]):
        lat[t, tok] = 0.0
    assert ctc_greedy_decode(lat) == [1, 2]


def test_greedy_decode_all_blank_and_separated_repeat():
    lat = np.zeros((4, 3))
    lat[:, 0] = 5.0
    assert ctc_greedy_decode(lat) == []
    lat = np.full((3, 3), -5.0)
    for t, tok in enumerate([1, 0, 1]):
        lat[t, tok] = 0.0
    assert ctc_greedy_decode(lat) == [1, 1]


def test_greedy_ties_break_to_lowest_id():
    lat = np.zeros((1, 4))
    assert ctc_greedy_decode(lat) == []  # blank wins the tie


def test_validate_lattice():
    rng = np.random.default_rng(5)
    assert validate_lattice(random_lattice(rng, 6, 5).data)
    assert not validate_lattice(np.zeros((3, 4)))
