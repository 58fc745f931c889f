import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wasd.attribution import AttributionArrays, AttributionCache
from wasd.errors import NeighborhoodError
from wasd.model import NeuronRef
from wasd.perturb import NeighborhoodSample, PerturbParams, enumerate_neighborhood, gen_neighborhood
from wasd.predicate import (
    ActivationStats,
    CandidatePredicate,
    Predicate,
    collect_stats,
    generate_predicates,
    predicates_from_stats,
    sort_candidates,
)

N0, N1 = NeuronRef(0, 0, 0), NeuronRef(0, 1, 0)


def _stats(rows_a, rows_c, refs=(N0,)):
    st_ = ActivationStats()
    for a, c in zip(rows_a, rows_c):
        st_.add(1, AttributionArrays(tuple(refs), np.asarray(a, float), np.asarray(c, float)))
    return st_


def test_max_times_lambda():
    # activations {0.5, 1.0, 0.8} with the default lambda 6.5
    cands = predicates_from_stats(_stats([[0.5], [1.0], [0.8]], [[1.0], [2.0], [3.0]]), 6.5)
    assert len(cands) == 1
    assert cands[0].predicate.value == pytest.approx(6.5)
    assert cands[0].mean_contribution == pytest.approx(2.0)
    assert cands[0].observations == 3


def test_identity_scaling():
    cands = predicates_from_stats(_stats([[0.3], [0.3]], [[0.0], [0.0]]), 1.0)
    assert cands[0].predicate.value == 0.3


def test_zero_activation_kept():
    cands = predicates_from_stats(_stats([[0.0, 1.0]], [[0.5, 0.1]], refs=(N0, N1)), 6.5)
    assert [c.neuron for c in cands] == [N0, N1]
    assert cands[0].predicate.value == 0.0


def test_absent_neurons_counted_only_where_present():
    s = ActivationStats()
    short = (N0,)
    long_ = (N0, NeuronRef(0, 0, 1))
    s.add(1, AttributionArrays(short, np.array([0.2]), np.array([1.0])))
    s.add(2, AttributionArrays(long_, np.array([0.4, 0.9]), np.array([3.0, 5.0])))
    summary = s.summary()
    assert summary[N0] == (0.4, 2.0, 2)
    assert summary[NeuronRef(0, 0, 1)] == (0.9, 5.0, 1)
    assert s.activations_of(N0) == [0.2, 0.4]


def test_lambda_must_be_positive(toy):
    with pytest.raises(ValueError):
        predicates_from_stats(_stats([[1.0]], [[1.0]]), 0.0)
    sample = gen_neighborhood((1, 2, 3), PerturbParams(sample_count=3), 64)
    with pytest.raises(ValueError):
        generate_predicates(toy, (1, 2, 3), sample, lam=-1)


def test_empty_neighborhood(toy):
    empty = NeighborhoodSample((1, 2), ())
    with pytest.raises(NeighborhoodError):
        collect_stats(toy, empty, "ablation", 0)


def test_planted_neurons_lead(planted_suite):
    for inst in planted_suite[:10]:
        m = inst.model()
        nb = enumerate_neighborhood(inst.prompt, inst.max_edits, inst.perturb, m.vocab_size)
        cands = generate_predicates(m, inst.prompt, nb, "planted_exact")
        k = len(inst.spec.planted_set)
        assert {c.neuron for c in cands[:k]} == set(m.ground_truth_rule())
        assert len(cands) == inst.spec.neuron_count


def test_candidate_count_is_distinct_neurons(toy):
    sample = gen_neighborhood((5, 6, 7, 8), PerturbParams(sample_count=20, seed=1), 64)
    cands = generate_predicates(toy, (5, 6, 7, 8), sample)
    seen = {r for xp in sample.prompts for r in toy.neurons(len(xp))}
    assert {c.neuron for c in cands} == seen
    keys = [(-c.mean_contribution, c.neuron.sort_key()) for c in cands]
    assert keys == sorted(keys)


@given(st.floats(0.1, 10), st.floats(0.5, 4))
def test_scaling_equivariance(lam, k):
    rng = np.random.default_rng(0)
    refs = tuple(NeuronRef(0, i, 0) for i in range(6))
    s = _stats(rng.random((5, 6)).tolist(), rng.integers(-3, 3, (5, 6)).astype(float).tolist(), refs)
    a, b = predicates_from_stats(s, lam), predicates_from_stats(s, lam * k)
    assert [c.neuron for c in a] == [c.neuron for c in b]
    for ca, cb in zip(a, b):
        assert cb.predicate.value == pytest.approx(ca.predicate.value * k)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5), st.floats(-2, 2, allow_nan=False)), unique_by=lambda t: t[:2]))
def test_sorting_is_a_permutation(items):
    cands = [CandidatePredicate(Predicate(NeuronRef(l, c, 0), 1.0), contrib) for l, c, contrib in items]
    out = sort_candidates(cands)
    assert sorted(map(repr, out)) == sorted(map(repr, cands))
    assert all(
        (-a.mean_contribution, a.neuron.sort_key()) <= (-b.mean_contribution, b.neuron.sort_key())
        for a, b in zip(out, out[1:])
    )


def test_predicate_and_candidate_json():
    with pytest.raises(ValueError):
        Predicate(N0, float("inf"))
    c = CandidatePredicate(Predicate(NeuronRef(1, 2, 3), 0.5), 0.25, 0.1, 7)
    assert CandidatePredicate.from_json(json.loads(json.dumps(c.to_json()))) == c
    assert str(c.predicate) == "L1 C2 P-3 := 0.5"


def test_cache_is_reused(toy):
    cache = AttributionCache()
    sample = gen_neighborhood((5, 6, 7), PerturbParams(sample_count=10, seed=2), 64)
    a = generate_predicates(toy, (5, 6, 7), sample, cache=cache)
    misses = cache.misses
    b = generate_predicates(toy, (5, 6, 7), sample, cache=cache)
    assert a == b and cache.misses == misses
