import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldru.automata import build_dyck, build_task
from ldru.errors import InputDomainError, ResourceError
from ldru.monoid import (
    CensusResult,
    allocate_samples,
    census_counts,
    composition_census,
    compositions_per_sequence,
    extract_monoid,
    monoid_size_formula,
    reduce_tree,
    symbol_mapping,
)
from ldru.sampler import DyckPositiveSampler

# State mappings of the D2 transition monoid, in element order e0..e14.
D2_TABLE = [
    (0, 1, 2, 3),
    (1, 2, 3, 3),
    (3, 0, 1, 3),
    (2, 3, 3, 3),
    (0, 1, 3, 3),
    (3, 1, 2, 3),
    (3, 3, 0, 3),
    (3, 3, 3, 3),
    (1, 3, 3, 3),
    (3, 0, 3, 3),
    (3, 2, 3, 3),
    (3, 3, 1, 3),
    (0, 3, 3, 3),
    (3, 1, 3, 3),
    (3, 3, 2, 3),
]


@pytest.fixture(scope="module")
def d2():
    return extract_monoid(build_dyck(2))


def brute_force_size(machine, max_len):
    seen = set()
    for n in range(max_len + 1):
        for word in itertools.product(range(machine.alphabet_size), repeat=n):
            seen.add(symbol_mapping(machine, word))
    return len(seen)


def test_d2_matches_table(d2):
    assert d2.elements == D2_TABLE
    assert d2.identity_index == 0
    assert d2.symbol_map == [1, 2]


def test_d2_examples(d2):
    assert d2.compose(1, 2) == 4
    for x in range(len(d2)):
        assert d2.compose(0, x) == x
        assert d2.compose(7, x) == 7
    assert d2.classify([0, 0, 1, 1]) == 12
    assert d2.classify([]) == 0
    assert d2.classify([0, 1, 0, 1]) == 4


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_size_formula_matches_closure_and_enumeration(n):
    m = build_dyck(n)
    size = len(extract_monoid(m))
    assert size == monoid_size_formula(n)
    assert size == brute_force_size(m, 2 * n + 2)


def test_formula_values():
    assert [monoid_size_formula(n) for n in (1, 2, 6)] == [6, 15, 141]
    with pytest.raises(InputDomainError):
        monoid_size_formula(0)


def test_d6_sizes():
    m = build_task("d6").machine
    assert len(extract_monoid(m)) == 141
    assert len(extract_monoid(m, "even_length_pairs")) == 73


def test_even_only_matches_even_enumeration():
    m = build_dyck(3)
    seen = set()
    for n in range(0, 11, 2):
        for word in itertools.product(range(2), repeat=n):
            seen.add(symbol_mapping(m, word))
    assert set(extract_monoid(m, "even_length_pairs").elements) == seen


def test_parity_monoid():
    mon = extract_monoid(build_task("parity").machine)
    assert mon.elements == [(0, 1), (1, 0)]


def test_guard():
    with pytest.raises(ResourceError):
        extract_monoid(build_dyck(6), guard=50)


def test_compose_out_of_range(d2):
    with pytest.raises(InputDomainError):
        d2.compose(0, 15)


def test_odd_length_under_even_only():
    mon = extract_monoid(build_dyck(2), "even_length_pairs")
    with pytest.raises(InputDomainError):
        mon.classify([0, 1, 0])


@pytest.mark.parametrize("name", ["d2", "d3", "parity", "even_pairs", "tomita5", "cycle_nav", "p2_2"])
def test_monoid_laws_exhaustive(name):
    mon = extract_monoid(build_task(name).machine)
    assert len(mon) <= 200
    t = mon.compose_table
    e = mon.identity_index
    n = len(mon)
    assert (t >= 0).all() and (t < n).all()
    assert (t[:, e] == np.arange(n)).all() and (t[e, :] == np.arange(n)).all()
    # (i.j).k == i.(j.k) for every triple
    left = t[t[:, :, None], np.arange(n)[None, None, :]]
    right = t[np.arange(n)[:, None, None], t[None, :, :]]
    assert np.array_equal(left, right)


def test_mod_arith_monoid_closes():
    mon = extract_monoid(build_task("mod_arith").machine)
    assert mon.elements[0] == tuple(range(15))
    assert len(mon) == len(set(mon.elements))


@given(st.lists(st.integers(0, 1), max_size=20), st.lists(st.integers(0, 1), max_size=20))
def test_classify_is_a_morphism(u, v):
    mon = extract_monoid(build_dyck(3))
    assert mon.classify(u + v) == mon.compose(mon.classify(u), mon.classify(v))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=40))
def test_balanced_tree_equals_left_fold(seq):
    mon = extract_monoid(build_dyck(4))
    classes = [mon.symbol_map[s] for s in seq]
    assert reduce_tree(mon, classes) == mon.classify(seq)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
def test_even_only_morphism(pairs):
    mon = extract_monoid(build_dyck(3), "even_length_pairs")
    seq = [s for p in pairs for s in p]
    blocks = [mon.generators[p] for p in pairs]
    assert reduce_tree(mon, blocks) == mon.classify(seq)


def test_census_counts_by_hand():
    mon = extract_monoid(build_dyck(2), "even_length_pairs")
    e01 = mon.generators[(0, 1)]
    tokens = np.array([[0, 1] * 4])
    counts = census_counts(mon, tokens)
    # four blocks of 01: two compositions at depth 2 and one at depth 3
    assert counts.sum() == 3 == compositions_per_sequence(8)
    assert counts[e01, e01] == 3


def test_census_skips_padding():
    mon = extract_monoid(build_dyck(2), "even_length_pairs")
    tokens = np.array([[0, 1] * 3])  # three blocks: one real pair, then a pass-through
    assert census_counts(mon, tokens).sum() == 2 == compositions_per_sequence(6)


def test_census_on_0101_is_supported_on_e01():
    mon = extract_monoid(build_dyck(2), "even_length_pairs")
    e01 = mon.generators[(0, 1)]
    alternating = lambda n, rng: [0, 1] * (n // 2)  # noqa: E731
    (res,) = composition_census(mon, alternating, [(4, 20, 2)], 500)
    assert set(map(tuple, np.argwhere(res.counts))) == {(e01, e01)}
    assert mon.compose(e01, e01) == e01


def test_census_two_element_monoid_fills_all_cells():
    mon = extract_monoid(build_task("parity").machine, "even_length_pairs")
    uniform = lambda n, rng: rng.integers(0, 2, size=n).tolist()  # noqa: E731
    (res,) = composition_census(mon, uniform, [(8, 16, 2)], 5000)
    assert len(mon) == 2
    assert res.nonzero_cells == 4


def test_census_small_monoid_all_cells_with_full_generators():
    mon = extract_monoid(build_task("cycle_nav").machine, "even_length_pairs")
    uniform = lambda n, rng: rng.integers(0, 3, size=n).tolist()  # noqa: E731
    (res,) = composition_census(mon, uniform, [(8, 16, 2)], 20000)
    assert res.nonzero_cells == len(mon) ** 2


def test_census_totals_and_serialization():
    mon = extract_monoid(build_dyck(6), "even_length_pairs")
    buckets = [(10, 40, 2), (100, 120, 2)]
    results = composition_census(mon, DyckPositiveSampler(6), buckets, 20_000, seed=3)
    for r, (lo, hi, step) in zip(results, buckets):
        assert abs(r.total - 20_000) <= 2 * hi
        lp = r.logprob
        assert np.array_equal(np.isfinite(lp), r.counts > 0)
        d = r.to_dict()
        assert d["bucket"] == [lo, hi, step]
        assert d["num_classes"] == 73
        assert sum(x is None for x in d["logprob"]) == (r.counts == 0).sum()
        quads = list(r.quadruples(mon))
        assert sum(q[3] for q in quads) == r.total
        assert all(mon.compose(i, j) == k for i, j, k, _ in quads)


def test_census_independent_of_workers():
    mon = extract_monoid(build_dyck(4), "even_length_pairs")
    a = composition_census(mon, DyckPositiveSampler(4), [(10, 20, 2)], 3000, seed=1, workers=1)
    b = composition_census(mon, DyckPositiveSampler(4), [(10, 20, 2)], 3000, seed=1, workers=2)
    assert np.array_equal(a[0].counts, b[0].counts)


def test_census_needs_even_only_monoid():
    with pytest.raises(InputDomainError):
        composition_census(extract_monoid(build_dyck(2)), DyckPositiveSampler(2), [(4, 8, 2)], 10)


def test_allocation_is_equal_per_length():
    lengths = list(range(10, 41, 2))
    alloc = allocate_samples(lengths, 100_000)
    per_length = [a * compositions_per_sequence(n) for a, n in zip(alloc, lengths)]
    assert abs(sum(per_length) - 100_000) <= max(compositions_per_sequence(n) for n in lengths)
    share = 100_000 / len(lengths)
    assert all(abs(c - share) <= compositions_per_sequence(n) for c, n in zip(per_length, lengths))


def test_census_result_empty_logprob():
    r = CensusResult((2, 2, 2), np.zeros((2, 2), dtype=np.int64))
    assert np.isneginf(r.logprob).all()
