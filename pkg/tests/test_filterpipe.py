import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resofilter import dataio as D
from resofilter import filterpipe as F
from resofilter.diffscore import ScoreEntry
from resofilter.errors import ConfigError, DataError


def entries(scores):
    return [ScoreEntry(i, float(s)) for i, s in enumerate(scores)]


def sorted_keep(scores, retain):
    """Reference selection: sort on (score, index) and keep the first k."""
    k = math.floor(len(scores) * retain)
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return sorted(order[:k])


def test_select_example():
    assert F.select(entries([5.0, 1.0, 9.0, 3.0]), F.FilterSpec(retain_fraction=0.5)) == [1, 3]


def test_select_keep_all():
    assert F.select(entries([3.0, 2.0, 1.0]), F.FilterSpec(retain_fraction=1.0)) == [0, 1, 2]


def test_retain_count():
    assert F.retain_count(10, 0.75) == 7
    assert len(F.select(entries(range(10)), F.FilterSpec(retain_fraction=0.75))) == 7


def test_select_errors():
    with pytest.raises(ConfigError):
        F.select(entries([1.0, 2.0]), F.FilterSpec(retain_fraction=0.25))
    with pytest.raises(ConfigError):
        F.select(entries([1.0]), F.FilterSpec(retain_fraction=0.0))
    with pytest.raises(DataError):
        F.select([ScoreEntry(0, 1.0), ScoreEntry(0, 2.0)], F.FilterSpec())
    with pytest.raises(ConfigError):
        F.select([], F.FilterSpec())


def test_ties_prefer_smaller_index():
    assert F.select(entries([1.0, 1.0, 1.0, 1.0]), F.FilterSpec(retain_fraction=0.5)) == [0, 1]


_scores = st.lists(st.integers(0, 20).map(float), min_size=1, max_size=80)


@settings(max_examples=300)
@given(_scores, st.sampled_from([0.25, 0.5, 0.75, 1.0]))
def test_select_matches_sorted_reference_and_rank_form(scores, retain):
    spec = F.FilterSpec(retain_fraction=retain)
    k = math.floor(len(scores) * retain)
    if k == 0:
        with pytest.raises(ConfigError):
            F.select(entries(scores), spec)
        return
    kept = F.select(entries(scores), spec)
    assert kept == sorted_keep(scores, retain)
    assert kept == F.select_by_rank(entries(scores), spec)
    assert all(a < b for a, b in zip(kept, kept[1:]))


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1e3), min_size=4, max_size=60), st.floats(1e-3, 1e3))
def test_nesting_and_scale_invariance(scores, c):
    sets = [set(F.select(entries(scores), F.FilterSpec(retain_fraction=r))) for r in (0.25, 0.5, 0.75)]
    assert sets[0] <= sets[1] <= sets[2]
    for r in (0.25, 0.5, 0.75):
        spec = F.FilterSpec(retain_fraction=r)
        assert F.select(entries([c * s for s in scores]), spec) == F.select(entries(scores), spec)


@settings(max_examples=100)
@given(st.integers(1, 10_000), st.sampled_from([0.25, 0.5, 0.75]))
def test_count_is_floor(n, retain):
    k = math.floor(n * retain)
    scores = entries(np.random.default_rng(n).random(n))
    if k == 0:
        with pytest.raises(ConfigError):
            F.select(scores, F.FilterSpec(retain_fraction=retain))
    else:
        assert len(F.select(scores, F.FilterSpec(retain_fraction=retain))) == k


def test_order_strategies():
    scores = [ScoreEntry(1, 1.0), ScoreEntry(3, 3.0), ScoreEntry(0, 2.0)]
    assert F.order([1, 3], scores, F.FilterSpec(ordering="original")) == [1, 3]
    assert F.order([0, 1, 3], scores, F.FilterSpec(ordering="min_to_max")) == [1, 0, 3]
    assert F.order([0, 1, 3], scores, F.FilterSpec(ordering="max_to_min")) == [3, 0, 1]
    a = F.order(list(range(3)) + [3], scores + [ScoreEntry(2, 0.0)], F.FilterSpec(ordering="random", order_seed=4))
    b = F.order(list(range(3)) + [3], scores + [ScoreEntry(2, 0.0)], F.FilterSpec(ordering="random", order_seed=4))
    assert a == b and sorted(a) == [0, 1, 2, 3]
    with pytest.raises(ConfigError):
        F.order([1], scores, F.FilterSpec(ordering="reverse"))
    with pytest.raises(DataError):
        F.order([7], scores, F.FilterSpec())


def test_spec_validation():
    with pytest.raises(ConfigError):
        F.FilterSpec(retain_fraction=1.5).validate()
    with pytest.raises(ConfigError):
        F.FilterSpec(layer_window=0).validate()
    with pytest.raises(ConfigError):
        F.FilterSpec(stat="median").validate()


def test_apply(corpus):
    assert F.apply(corpus, range(len(corpus))) == corpus
    assert F.apply(corpus[:4], [1, 3]) == [corpus[1], corpus[3]]
    with pytest.raises(DataError):
        F.apply(corpus[:4], [4])


def test_write_filtered(tmp_path, corpus):
    src = tmp_path / "in.jsonl"
    D.save_jsonl(corpus, src)
    spec = F.FilterSpec(retain_fraction=1.0)
    F.write_filtered(corpus, list(range(len(corpus))), spec, tmp_path / "out.jsonl",
                     tmp_path / "m.json", input_path=src)
    assert (tmp_path / "out.jsonl").read_bytes() == src.read_bytes()
    F.write_filtered(corpus, [1, 3], spec, tmp_path / "two.jsonl", tmp_path / "m2.json")
    assert D.load_jsonl(tmp_path / "two.jsonl") == [corpus[1], corpus[3]]
