"""Transition monoids of Moore machines and the reduction composition census.

Elements are state mappings ``e: Q -> Q`` stored as tuples.  ``compose(i, j)``
means "apply element i, then element j", i.e. the mapping induced by the
concatenation of a word of class i with a word of class j.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .automata import MooreMachine
from .errors import InputDomainError, ResourceError
from .rng import derive

MONOID_GUARD = 100_000
TABLE_LIMIT = 4096

StateMapping = tuple


class TransitionMonoid:
    """Closure of a set of generator mappings under composition.

    ``generators`` maps each generating word (a tuple of symbols, all of the
    same length ``block``) to its element index.  For the full monoid the
    words are the single symbols; for the even-only monoid they are the
    ``q**2`` symbol pairs.
    """

    def __init__(self, elements, identity_index, generators, block, num_states):
        self.elements: list[StateMapping] = elements
        self.identity_index = identity_index
        self.generators: dict[tuple, int] = generators
        self.block = block
        self.num_states = num_states
        self._index = {e: i for i, e in enumerate(elements)}
        self._array = np.array(elements, dtype=np.int64).reshape(len(elements), num_states)
        self._table = None

    def __len__(self):
        return len(self.elements)

    @property
    def even_only(self) -> bool:
        return self.block == 2

    @property
    def symbol_map(self) -> list[int] | None:
        """Element of each single symbol, or ``None`` for the even-only monoid."""
        if self.block != 1:
            return None
        return [self.generators[(s,)] for s in range(len(self.generators))]

    def index_of(self, mapping) -> int:
        return self._index[tuple(int(x) for x in mapping)]

    @property
    def compose_table(self) -> np.ndarray:
        """``|E| x |E|`` table with ``table[i, j] = compose(i, j)``."""
        if self._table is None:
            n = len(self.elements)
            if n > TABLE_LIMIT:
                raise ResourceError(f"compose table for {n} elements exceeds limit {TABLE_LIMIT}")
            arr = self._array
            table = np.empty((n, n), dtype=np.int64)
            index = self._index
            for i in range(n):
                # row[j, q] = e_j[e_i[q]]
                row = arr[:, arr[i]]
                table[i] = [index[tuple(r)] for r in row.tolist()]
            table.flags.writeable = False
            self._table = table
        return self._table

    def compose(self, i: int, j: int) -> int:
        n = len(self.elements)
        if not (0 <= i < n and 0 <= j < n):
            raise InputDomainError(f"element index out of range for monoid of size {n}")
        if self._table is not None or n <= TABLE_LIMIT:
            return int(self.compose_table[i, j])
        ei, ej = self.elements[i], self.elements[j]
        return self._index[tuple(ej[q] for q in ei)]

    def classify(self, seq: Sequence[int]) -> int:
        """Element induced by ``seq`` as a left fold of generator elements."""
        seq = tuple(int(s) for s in seq)
        if len(seq) % self.block:
            raise InputDomainError(f"sequence length {len(seq)} is not a multiple of {self.block}")
        acc = self.identity_index
        for start in range(0, len(seq), self.block):
            word = seq[start : start + self.block]
            try:
                g = self.generators[word]
            except KeyError:
                raise InputDomainError(f"symbol outside alphabet in {word}") from None
            acc = self.compose(acc, g)
        return acc

    def classify_blocks(self, tokens: np.ndarray) -> np.ndarray:
        """Generator element of every block of every row of an equal-length array."""
        tokens = np.asarray(tokens, dtype=np.int64)
        rows, length = tokens.shape
        q = int(round(len(self.generators) ** (1.0 / self.block)))
        code = np.zeros((rows, length // self.block), dtype=np.int64)
        for k in range(self.block):
            code = code * q + tokens[:, k :: self.block]
        lookup = np.empty(q**self.block, dtype=np.int64)
        for word, idx in self.generators.items():
            c = 0
            for s in word:
                c = c * q + s
            lookup[c] = idx
        return lookup[code]

    def to_dict(self) -> dict:
        return {
            "num_elements": len(self.elements),
            "num_states": self.num_states,
            "identity_index": self.identity_index,
            "even_only": self.even_only,
            "elements": [list(e) for e in self.elements],
            "generators": {"".join(map(str, w)) if len(w) else "": i for w, i in self.generators.items()},
            "compose_table": self.compose_table.tolist() if len(self) <= TABLE_LIMIT else None,
        }


def symbol_mapping(machine: MooreMachine, word: Sequence[int]) -> StateMapping:
    mapping = np.arange(machine.num_states)
    for s in word:
        mapping = machine.transition[mapping, s]
    return tuple(int(x) for x in mapping)


def extract_monoid(
    machine: MooreMachine, generators: str = "all_symbols", guard: int = MONOID_GUARD
) -> TransitionMonoid:
    """Breadth-first closure of the identity under right multiplication by generators.

    Element order is discovery order with the identity first.
    """
    q = machine.alphabet_size
    if generators == "all_symbols":
        words = [(s,) for s in range(q)]
        block = 1
    elif generators == "even_length_pairs":
        words = [(a, b) for a in range(q) for b in range(q)]
        block = 2
    else:
        raise InputDomainError(f"unknown generator set {generators!r}")

    n = machine.num_states
    identity = tuple(range(n))
    gen_maps = [symbol_mapping(machine, w) for w in words]
    elements = [identity]
    index = {identity: 0}
    queue = deque([0])
    while queue:
        e = elements[queue.popleft()]
        for g in gen_maps:
            composed = tuple(g[x] for x in e)
            if composed not in index:
                if len(elements) >= guard:
                    raise ResourceError(f"monoid exceeds guard of {guard} elements")
                index[composed] = len(elements)
                elements.append(composed)
                queue.append(index[composed])
    gen_index = {w: index[m] for w, m in zip(words, gen_maps)}
    return TransitionMonoid(elements, 0, gen_index, block, n)


def monoid_size_formula(n: int) -> int:
    """Number of elements of the full transition monoid of the depth-``n`` Dyck machine."""
    if n < 1:
        raise InputDomainError("n must be >= 1")
    return 1 + (n + 1) * (n + 2) * (2 * n + 3) // 6


def reduce_tree(monoid: TransitionMonoid, classes: Sequence[int]) -> int:
    """Combine element indices with the balanced pairing used by the model.

    Odd-sized levels get an identity slot appended on the right, which passes
    the last element through unchanged.
    """
    level = list(classes)
    if not level:
        return monoid.identity_index
    while len(level) > 1:
        nxt = [monoid.compose(level[k], level[k + 1]) for k in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


# ---------------------------------------------------------------------------
# Composition census


@dataclass
class CensusResult:
    bucket: tuple[int, int, int]
    counts: np.ndarray
    sequences: int = 0

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def logprob(self) -> np.ndarray:
        total = self.total
        out = np.full(self.counts.shape, -np.inf)
        nz = self.counts > 0
        if total:
            out[nz] = np.log(self.counts[nz] / total)
        return out

    @property
    def nonzero_cells(self) -> int:
        return int(np.count_nonzero(self.counts))

    def to_dict(self) -> dict:
        lp = self.logprob.ravel()
        return {
            "bucket": list(self.bucket),
            "num_classes": self.num_classes,
            "total": self.total,
            "counts": [int(c) for c in self.counts.ravel()],
            "logprob": [None if math.isinf(x) else float(x) for x in lp],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def quadruples(self, monoid: TransitionMonoid):
        """``(i, j, k, count)`` for every witnessed composition, row-major."""
        table = monoid.compose_table
        for i, j in zip(*np.nonzero(self.counts)):
            yield int(i), int(j), int(table[i, j]), int(self.counts[i, j])


def compositions_per_sequence(length: int, block: int = 2) -> int:
    """Counted compositions for one sequence: every real pair above the block level."""
    return max(length // block - 1, 0)


def allocate_samples(lengths: Sequence[int], target: int, block: int = 2) -> list[int]:
    """Sequences per length so every length contributes ~``target/len(lengths)`` compositions.

    Rounding error is carried forward, so the grand total stays within half a
    sequence's worth of compositions of ``target``.
    """
    lengths = list(lengths)
    counts = []
    done = 0
    for k, n in enumerate(lengths):
        c = compositions_per_sequence(n, block)
        if c == 0:
            counts.append(0)
            continue
        goal = target * (k + 1) / len(lengths)
        m = max(int(round((goal - done) / c)), 0)
        counts.append(m)
        done += m * c
    return counts


def census_counts(monoid: TransitionMonoid, tokens: np.ndarray) -> np.ndarray:
    """Composition counts for a batch of equal-length sequences."""
    n_el = len(monoid)
    counts = np.zeros((n_el, n_el), dtype=np.int64)
    if tokens.shape[0] == 0:
        return counts
    table = monoid.compose_table
    level = monoid.classify_blocks(tokens)
    while level.shape[1] > 1:
        width = level.shape[1]
        pairs = width // 2
        left, right = level[:, 0 : 2 * pairs : 2], level[:, 1 : 2 * pairs : 2]
        np.add.at(counts, (left.ravel(), right.ravel()), 1)
        merged = table[left, right]
        if width % 2:
            merged = np.concatenate([merged, level[:, -1:]], axis=1)
        level = merged
    return counts


def _census_length(monoid, sampler, length, count, seed, bucket_id):
    rows = []
    for r in range(count):
        rng = derive(seed, "census", bucket_id, length, r)
        seq = sampler(length, rng)
        if seq is None:
            raise ResourceError(f"positive sampler produced nothing at length {length}")
        rows.append(seq)
    tokens = np.asarray(rows, dtype=np.int64).reshape(count, length)
    return census_counts(monoid, tokens)


def composition_census(
    monoid: TransitionMonoid,
    positive_sampler: Callable[[int, np.random.Generator], Sequence[int] | None],
    buckets: Sequence[tuple[int, int, int]],
    target_compositions: int,
    seed: int = 0,
    workers: int = 1,
) -> list[CensusResult]:
    """Count element compositions witnessed while reducing sampled positive sequences.

    Each length in a bucket contributes an equal share of
    ``target_compositions``.  Compositions of two length-2 blocks' symbols
    (the first tree level) and compositions with padding are not counted.
    """
    if monoid.block != 2:
        raise InputDomainError("census needs an even-only monoid")
    results = []
    for bucket_id, (lo, hi, step) in enumerate(buckets):
        lengths = [n for n in range(lo, hi + 1, step) if n % 2 == 0 and n >= 2]
        if not lengths:
            raise InputDomainError(f"bucket {(lo, hi, step)} contains no even lengths")
        alloc = allocate_samples(lengths, target_compositions)
        jobs = [(n, c) for n, c in zip(lengths, alloc) if c]
        if workers > 1 and len(jobs) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [
                    pool.submit(_census_length, monoid, positive_sampler, n, c, seed, bucket_id)
                    for n, c in jobs
                ]
                parts = [f.result() for f in futures]
        else:
            parts = [_census_length(monoid, positive_sampler, n, c, seed, bucket_id) for n, c in jobs]
        counts = np.zeros((len(monoid), len(monoid)), dtype=np.int64)
        for part in parts:
            counts += part
        results.append(CensusResult((lo, hi, step), counts, sum(alloc)))
    return results
