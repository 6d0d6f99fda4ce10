import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densebird.ensemble import PseudoLabelConfig, combine, pseudo_label_select
from densebird.metrics import PredictionSet, roc_auc

IDS = ["a", "b", "c", "d"]


def member(scores, ids=IDS, labels=None):
    return PredictionSet(list(ids), np.asarray(scores, dtype=float), labels)


member_sets = st.integers(2, 5).flatmap(
    lambda k: st.lists(st.lists(st.floats(0, 1), min_size=6, max_size=6), min_size=k, max_size=k)
)


def test_geometric_of_point_nine_and_point_four():
    out = combine([member([0.9, 0.9, 0.9, 0.9]), member([0.4, 0.4, 0.4, 0.4])])
    np.testing.assert_allclose(out.scores, 0.6, rtol=1e-12)


@pytest.mark.parametrize("method", ["geometric", "arithmetic", "harmonic"])
def test_identical_members_are_idempotent(method):
    m = member([0.1, 0.5, 0.73, 0.99])
    np.testing.assert_allclose(combine([m, m, m], method).scores, m.scores, rtol=1e-12)


def test_closed_forms():
    a, b, c = member([0.2] * 4), member([0.5] * 4), member([0.8] * 4)
    assert combine([a, b, c], "arithmetic").scores[0] == pytest.approx(0.5)
    assert combine([a, b, c], "harmonic").scores[0] == pytest.approx(3 / (5 + 2 + 1.25))
    assert combine([a, b, c], "geometric").scores[0] == pytest.approx(0.08 ** (1 / 3))


@settings(max_examples=200)
@given(member_sets)
def test_mean_inequality_exact(rows):
    ms = [member(r, ids=list("uvwxyz")) for r in rows]
    h = combine(ms, "harmonic").scores
    g = combine(ms, "geometric").scores
    a = combine(ms, "arithmetic").scores
    assert np.all(h <= g) and np.all(g <= a)
    assert np.all((g > 0) & (g < 1))


@settings(max_examples=50)
@given(member_sets, st.randoms())
def test_geometric_order_invariant(rows, rnd):
    ms = [member(r, ids=list("uvwxyz")) for r in rows]
    shuffled = ms[:]
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(combine(ms).scores, combine(shuffled).scores)


@settings(max_examples=50)
@given(member_sets)
def test_geometric_ranking_equals_mean_log(rows):
    ms = [member(r, ids=list("uvwxyz"), labels=[0, 1, 0, 1, 1, 0]) for r in rows]
    g = combine(ms)
    mean_log = np.mean([np.log(np.clip(m.scores, 1e-7, 1 - 1e-7)) for m in ms], axis=0)
    assert roc_auc(g) == pytest.approx(roc_auc(PredictionSet(g.item_ids, mean_log, g.labels)), abs=1e-12)


def test_members_aligned_by_id():
    a = member([0.1, 0.2, 0.3, 0.4])
    b = member([0.4, 0.3, 0.2, 0.1], ids=["d", "c", "b", "a"])
    out = combine([a, b], "arithmetic")
    assert out.item_ids == IDS
    np.testing.assert_allclose(out.scores, [0.1, 0.2, 0.3, 0.4])


def test_mismatched_or_single_members():
    with pytest.raises(ValueError):
        combine([member([0.1] * 4), member([0.1] * 3, ids=IDS[:3])])
    with pytest.raises(ValueError):
        combine([member([0.1] * 4)])
    with pytest.raises(ValueError):
        combine([member([0.1] * 4)] * 2, method="median")


def test_zero_score_does_not_annihilate():
    out = combine([member([0.0, 0.5, 1.0, 0.9]), member([0.9, 0.5, 1.0, 0.9])])
    assert np.all(out.scores > 0) and np.all(out.scores < 1)


# --- pseudo labels ---------------------------------------------------------


def test_pseudo_label_examples():
    sel = pseudo_label_select(member([0.1, 0.5, 0.9], ids=["x", "y", "z"]))
    assert sel.item_ids == ["x", "z"]
    assert sel.labels.tolist() == [0, 1]
    sel = pseudo_label_select(member([0.3, 0.7, 0.29999], ids=["x", "y", "z"]))
    assert sel.item_ids == ["z"]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.01, 0.49), st.floats(0.0, 0.2),
       st.floats(0.0, 0.2))
def test_selection_shrinks_as_band_widens(scores, low, d_low, d_high):
    preds = PredictionSet.from_arrays(scores)
    high = 1 - low
    narrow = pseudo_label_select(preds, PseudoLabelConfig(low, high))
    wide_low, wide_high = max(low - d_low, 1e-6), min(high + d_high, 1 - 1e-6)
    wide = pseudo_label_select(preds, PseudoLabelConfig(wide_low, wide_high))
    assert len(wide) <= len(narrow)


def test_threshold_validation():
    with pytest.raises(ValueError):
        PseudoLabelConfig(0.7, 0.3)
    with pytest.raises(ValueError):
        PseudoLabelConfig(0.0, 0.5)
