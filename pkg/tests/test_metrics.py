import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import tally_confusion
from toothseg.errors import ValidationError
from toothseg.metrics import CLASS_NAMES, compute_report, confusion_matrix, evaluate


def test_perfect_prediction():
    y = np.random.default_rng(0).integers(0, 8, 500)
    m = confusion_matrix(y, y)
    assert np.count_nonzero(m - np.diag(np.diag(m))) == 0 and np.trace(m) == 500
    r = compute_report(m)
    assert r.overall == {"oa": 1.0, "dsc": 1.0, "sen": 1.0, "ppv": 1.0}
    assert all(c.dsc == c.sen == c.ppv == 1.0 for c in r.per_class)


def test_hand_case():
    m = confusion_matrix([0, 0, 1], [0, 1, 1])
    assert m[0, 0] == 1 and m[0, 1] == 1 and m[1, 1] == 1 and m.sum() == 3


def test_matches_tally_oracle(rng):
    t, p = rng.integers(0, 8, 10000), rng.integers(0, 8, 10000)
    np.testing.assert_array_equal(confusion_matrix(t, p), tally_confusion(t, p))


def test_out_of_range_names_index():
    with pytest.raises(ValidationError, match=r"pred\[2\]"):
        confusion_matrix([0, 1, 2], [0, 1, 8])
    with pytest.raises(ValidationError, match=r"truth\[0\]"):
        confusion_matrix([-1], [0])
    with pytest.raises(ValidationError):
        confusion_matrix([0, 1], [0])


def test_two_class_arithmetic():
    m = np.zeros((8, 8), dtype=int)
    m[:2, :2] = [[8, 2], [1, 9]]
    r = compute_report(m)
    c0 = r.per_class[0]
    assert c0.dsc == pytest.approx(16 / 19, abs=1e-15)
    assert c0.sen == pytest.approx(0.8, abs=1e-15)
    assert c0.ppv == pytest.approx(8 / 9, abs=1e-15)
    assert all(c.absent for c in r.per_class[2:])
    assert r.overall["oa"] == pytest.approx(17 / 20)
    # macro means over the two present classes only
    c1 = r.per_class[1]
    assert r.overall["dsc"] == pytest.approx((c0.dsc + c1.dsc) / 2)


def test_absent_class_convention():
    r = evaluate(np.array([0, 0, 1]), np.array([0, 0, 1]))
    assert r.per_class[5].absent and r.per_class[5].dsc == 1.0
    r = evaluate(np.array([0, 0, 0]), np.array([0, 0, 3]))
    # class 3 only predicted: present, scored zero
    assert not r.per_class[3].absent and r.per_class[3].dsc == 0.0


def test_empty_and_bad_matrix():
    with pytest.raises(ValidationError):
        compute_report(np.zeros((8, 8), dtype=int))
    with pytest.raises(ValidationError):
        compute_report(-np.eye(8, dtype=int))
    with pytest.raises(ValidationError):
        compute_report(np.ones((8, 7), dtype=int))


def test_table_layout():
    m = np.zeros((8, 8), dtype=int)
    m[:2, :2] = [[8, 2], [1, 9]]
    text = compute_report(m).format_table()
    lines = text.splitlines()
    assert lines[0].split() == " | ".join(CLASS_NAMES).split()
    # DSC = (16/19 + 18/21) / 2, SEN = (0.8 + 0.9) / 2, PPV = (8/9 + 9/11) / 2
    assert lines[2] == "OA 0.8500, DSC 0.8496, SEN 0.8500, PPV 0.8535"
    assert "absent" in lines[3]


def test_json_and_sample_mean(rng):
    ts = [rng.integers(0, 8, 100) for _ in range(3)]
    ps = [rng.integers(0, 8, 100) for _ in range(3)]
    r = evaluate(ts, ps)
    d = json.loads(r.to_json())
    assert d["counts"] == 300 and set(d["per_class"]) == set(CLASS_NAMES)
    assert set(d["sample_mean"]) == {"oa", "dsc", "sen", "ppv"}
    assert set(d["micro"]) == {"dsc", "sen", "ppv"}
    np.testing.assert_array_equal(np.array(d["confusion"]), sum(confusion_matrix(t, p) for t, p in zip(ts, ps)))


def _random_confusion(seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 50, (8, 8))
    m[rng.random((8, 8)) < 0.3] = 0
    m[0, 0] += 1
    return m


@pytest.mark.parametrize("seed", range(50))
def test_dsc_is_harmonic_mean(seed):
    r = compute_report(_random_confusion(seed))
    for c in r.per_class:
        if c.absent or c.sen + c.ppv == 0:
            continue
        assert abs(c.dsc - 2 * c.sen * c.ppv / (c.sen + c.ppv)) < 1e-12
    for c in r.per_class:
        assert 0 <= c.dsc <= 1 and 0 <= c.sen <= 1 and 0 <= c.ppv <= 1


@pytest.mark.parametrize("seed", range(50))
def test_relabeling_equivariance(seed):
    m = _random_confusion(seed)
    pi = np.random.default_rng(1000 + seed).permutation(8)
    mp = np.zeros_like(m)
    mp[np.ix_(pi, pi)] = m  # class c becomes pi[c]
    a, b = compute_report(m), compute_report(mp)
    for c in range(8):
        x, y = a.per_class[c], b.per_class[pi[c]]
        assert (x.dsc, x.sen, x.ppv, x.absent) == pytest.approx((y.dsc, y.sen, y.ppv, y.absent), abs=1e-12)
    for k in a.overall:
        assert a.overall[k] == pytest.approx(b.overall[k], abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 300))
def test_pair_order_invariance(seed, n):
    rng = np.random.default_rng(seed)
    t, p = rng.integers(0, 8, n), rng.integers(0, 8, n)
    perm = rng.permutation(n)
    a, b = evaluate(t, p), evaluate(t[perm], p[perm])
    assert a.to_dict() == b.to_dict()
    assert a.confusion.sum() == a.counts == n
