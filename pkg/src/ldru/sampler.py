"""Seeded batch generation for every task.

Rows are generated independently from per-row random streams keyed by
``(seed, batch ordinal, row)``, so a batch never depends on how it is built.
Recognition tasks alternate target polarity (row 0 positive, row 1 negative,
...) when ``balanced`` is set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import IO, Sequence

import numpy as np

from .automata import MooreMachine, TaskSpec, build_task, run
from .errors import ConfigurationError, InputDomainError, ResourceError
from .rng import derive

RETRY_BASE = 8
LENGTH_RETRIES = 64

# Oversampling factors for rejection-based Tomita samplers, keyed by (k, label).
TOMITA_OVERSAMPLE = {
    (3, 0): 2.5, (3, 1): 2.0,
    (4, 0): 3.0,
    (5, 0): 2.0, (5, 1): 5.0,
    (6, 0): 2.0, (6, 1): 4.0,
    (7, 0): 5.0,
}  # fmt: skip
UNIFORM_OVERSAMPLE = 2.0
DYCK_NEGATIVE_OVERSAMPLE = 1.0
DYCK_NOISE_STD = 0.15
DYCK_DEPTH_BIAS = 0.1


@dataclass
class Batch:
    tokens: np.ndarray  # (batch, max_len) int64, padded with pad_token
    lengths: np.ndarray  # (batch,)
    labels: np.ndarray  # (batch,)
    pad_token: int

    def __len__(self):
        return self.tokens.shape[0]

    def row(self, r: int) -> list[int]:
        return self.tokens[r, : self.lengths[r]].tolist()

    def subset(self, rows) -> "Batch":
        rows = np.asarray(rows)
        lengths = self.lengths[rows]
        width = int(lengths.max()) if len(rows) else 0
        return Batch(self.tokens[rows, :width].copy(), lengths.copy(), self.labels[rows].copy(), self.pad_token)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"tokens": self.row(r), "label": int(self.labels[r])}) + "\n" for r in range(len(self))
        )

    def dump(self, fh: IO[str]) -> None:
        fh.write(self.to_jsonl())


def make_batch(rows: Sequence[Sequence[int]], labels: Sequence[int], pad_token: int) -> Batch:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max()) if len(rows) else 0
    tokens = np.full((len(rows), width), pad_token, dtype=np.int64)
    for r, seq in enumerate(rows):
        tokens[r, : len(seq)] = seq
    return Batch(tokens, lengths, np.asarray(labels, dtype=np.int64), pad_token)


@dataclass
class SamplerConfig:
    task: TaskSpec | str
    min_len: int = 1
    max_len: int = 40
    batch_size: int = 256
    seed: int = 0
    balanced: bool = True
    augment: bool = True

    def __post_init__(self):
        if isinstance(self.task, str):
            self.task = build_task(self.task)
        if self.min_len < 1 or self.min_len > self.max_len:
            raise ConfigurationError(f"need 1 <= min_len <= max_len, got {self.min_len}..{self.max_len}")
        if self.batch_size < 0:
            raise ConfigurationError("batch_size must be non-negative")


# ---------------------------------------------------------------------------
# Label feasibility


@lru_cache(maxsize=None)
def _reachable_outputs(machine: MooreMachine, max_len: int) -> list[frozenset]:
    """``out[n]`` = output symbols reachable by some sequence of length ``n``."""
    states = np.zeros(machine.num_states, dtype=bool)
    states[machine.initial] = True
    out = []
    for _ in range(max_len + 1):
        out.append(frozenset(int(o) for o in np.unique(machine.output[states])))
        nxt = np.zeros_like(states)
        nxt[np.unique(machine.transition[states].ravel())] = True
        states = nxt
    return out


def label_feasible(machine: MooreMachine, length: int, label: int) -> bool:
    size = 1 << max(8, math.ceil(math.log2(length + 1)))
    return label in _reachable_outputs(machine, size)[length]


def candidate_lengths(task: TaskSpec, min_len: int, max_len: int) -> list[int]:
    lengths = range(min_len, max_len + 1)
    if task.sampler_kind == "mod_arith":
        return [n for n in lengths if n % 2 == 1]
    return list(lengths)


# ---------------------------------------------------------------------------
# Row samplers


def uniform_sequence(alphabet_size: int, length: int, rng: np.random.Generator) -> list[int]:
    return rng.integers(0, alphabet_size, size=length).tolist()


def sample_by_rejection(
    machine: MooreMachine, length: int, label: int, oversample: float, rng: np.random.Generator
) -> list[int] | None:
    """First of ``ceil(oversample * RETRY_BASE)`` uniform draws whose label is ``label``."""
    if length < 1:
        raise InputDomainError("length must be >= 1")
    for _ in range(math.ceil(oversample * RETRY_BASE)):
        seq = uniform_sequence(machine.alphabet_size, length, rng)
        if run(machine, seq) == label:
            return seq
    return None


def sample_negative_by_rejection(
    machine: MooreMachine, length: int, oversample: float, rng: np.random.Generator
) -> list[int] | None:
    return sample_by_rejection(machine, length, 0, oversample, rng)


_DYCK_COUNTS: dict[int, list[list[int]]] = {}


def _dyck_completions(n: int, remaining: int) -> list[list[int]]:
    """``c[r][d]``: depth-bounded ways to close from depth ``d`` in exactly ``r`` steps."""
    table = _DYCK_COUNTS.setdefault(n, [[1] + [0] * n])
    while len(table) <= remaining:
        prev = table[-1]
        table.append([(prev[d - 1] if d > 0 else 0) + (prev[d + 1] if d < n else 0) for d in range(n + 1)])
    return table


def sample_dyck_positive(n: int, length: int, augment: bool, rng: np.random.Generator) -> list[int]:
    """Balanced string over {0 = open, 1 = close} with depth <= ``n``.

    Without augmentation every such string is equally likely: the close
    probability at each step is the fraction of valid completions that start
    by closing.  With augmentation that probability, wherever both moves are
    legal, is perturbed by N(0, 0.15) noise and lowered by
    ``0.1 * depth / n``, then clipped to [0, 1].
    """
    if length < 2 or length % 2:
        raise InputDomainError(f"positive Dyck strings need an even length >= 2, got {length}")
    counts = _dyck_completions(n, length)
    seq = []
    depth = 0
    for pos in range(length):
        remaining = length - pos
        can_close = depth > 0
        can_open = depth < n and counts[remaining - 1][depth + 1] > 0
        if can_close and can_open:
            p_close = counts[remaining - 1][depth - 1] / counts[remaining][depth]
            if augment:
                p_close += rng.normal(0.0, DYCK_NOISE_STD) - DYCK_DEPTH_BIAS * depth / n
                p_close = min(max(p_close, 0.0), 1.0)
            close = rng.random() < p_close
        else:
            close = can_close
        seq.append(1 if close else 0)
        depth += -1 if close else 1
    return seq


def constrained_walk(
    machine: MooreMachine, length: int, forbidden: set[tuple[int, int]], rng: np.random.Generator
) -> list[int]:
    """Uniform random walk that never takes a forbidden ``(state, next_state)`` edge."""
    state = machine.initial
    seq = []
    for _ in range(length):
        options = [s for s in range(machine.alphabet_size) if (state, machine.transition[state, s]) not in forbidden]
        s = options[int(rng.integers(len(options)))]
        seq.append(s)
        state = machine.transition[state, s]
    return seq


def sample_tomita3_positive(length: int, rng: np.random.Generator, machine: MooreMachine | None = None):
    machine = machine or build_task("tomita3").machine
    for _ in range(math.ceil(TOMITA_OVERSAMPLE[(3, 1)] * RETRY_BASE)):
        seq = constrained_walk(machine, length, {(3, 4)}, rng)
        if run(machine, seq) == 1:
            return seq
    return None


def sample_tomita4_positive(length: int, rng: np.random.Generator, machine: MooreMachine | None = None):
    machine = machine or build_task("tomita4").machine
    return constrained_walk(machine, length, {(2, 3)}, rng)


def tomita7_stay_probability(length: int) -> float:
    return 1.0 - 4.0 / max(length, 16)


def sample_tomita7_positive(length: int, rng: np.random.Generator) -> list[int]:
    """Walk the 0*1*0*1* chain, staying with probability ``1 - 4/max(length, 16)``."""
    if length < 1:
        raise InputDomainError("length must be >= 1")
    stay = tomita7_stay_probability(length)
    phase = 0  # symbol of the current block: 0, 1, 0, 1
    seq = []
    for _ in range(length):
        if phase < 3 and rng.random() >= stay:
            phase += 1
        seq.append(phase % 2)
    return seq


def sample_mod_arith(length: int, rng: np.random.Generator, modulus: int = 5) -> list[int]:
    if length % 2 == 0:
        raise InputDomainError("modular arithmetic expressions have odd length")
    seq = []
    for pos in range(length):
        if pos % 2 == 0:
            seq.append(int(rng.integers(modulus)))
        else:
            seq.append(modulus + int(rng.integers(3)))
    return seq


def sample_row(task: TaskSpec, length: int, label: int | None, augment: bool, rng: np.random.Generator):
    """One sequence of ``length`` with the given target ``label`` (``None``: unconstrained).

    Returns ``None`` when a rejection sampler runs out of attempts.
    """
    machine = task.machine
    kind = task.sampler_kind
    if kind == "mod_arith":
        return sample_mod_arith(length, rng, task.params["modulus"])
    if label is None or kind == "uniform":
        return uniform_sequence(machine.alphabet_size, length, rng)
    if kind == "uniform_binary":
        return sample_by_rejection(machine, length, label, UNIFORM_OVERSAMPLE, rng)
    if kind == "dyck":
        if label == 1:
            return sample_dyck_positive(task.params["n"], length, augment, rng)
        return sample_by_rejection(machine, length, 0, DYCK_NEGATIVE_OVERSAMPLE, rng)
    if kind == "tomita":
        k = task.params["k"]
        if label == 1:
            if k == 3:
                return sample_tomita3_positive(length, rng, machine)
            if k == 4:
                return sample_tomita4_positive(length, rng, machine)
            if k == 7:
                return sample_tomita7_positive(length, rng)
        return sample_by_rejection(machine, length, label, TOMITA_OVERSAMPLE[(k, label)], rng)
    raise ConfigurationError(f"no sampler for kind {kind!r}")


def _row_target(task: TaskSpec, balanced: bool, r: int, rng: np.random.Generator) -> int | None:
    if not task.recognition:
        return None
    if balanced:
        return 1 if r % 2 == 0 else 0
    return int(rng.integers(2))


def _sample_one(task, lengths, label, augment, rng):
    for _ in range(LENGTH_RETRIES):
        n = lengths[int(rng.integers(len(lengths)))]
        seq = sample_row(task, n, label, augment, rng)
        if seq is not None:
            return seq
    raise ResourceError(f"{task.name}: no sample with label {label} after {LENGTH_RETRIES} attempts")


def sample_batch(cfg: SamplerConfig, ordinal: int = 0) -> Batch:
    """Batch number ``ordinal`` of the stream defined by ``cfg``."""
    task = cfg.task
    base = candidate_lengths(task, cfg.min_len, cfg.max_len)
    if not base:
        raise ConfigurationError(f"{task.name}: no valid length in {cfg.min_len}..{cfg.max_len}")
    feasible = {}
    rows, labels = [], []
    for r in range(cfg.batch_size):
        rng = derive(cfg.seed, "data", ordinal, r)
        target = _row_target(task, cfg.balanced, r, rng)
        if target not in feasible:
            if target is None:
                feasible[target] = base
            else:
                feasible[target] = [n for n in base if label_feasible(task.machine, n, target)]
            if not feasible[target]:
                raise ConfigurationError(
                    f"{task.name}: label {target} impossible for every length in {cfg.min_len}..{cfg.max_len}"
                )
        seq = _sample_one(task, feasible[target], target, cfg.augment, rng)
        rows.append(seq)
        labels.append(run(task.machine, seq))
    return make_batch(rows, labels, task.alphabet_size)


def eval_set(task: TaskSpec | str, length: int, count: int = 512, seed: int = 0, balanced: bool = True) -> Batch:
    """Fixed-length evaluation batch sampled without Dyck augmentation.

    When one polarity cannot occur at ``length`` (e.g. odd-length Dyck
    strings) every row gets the feasible one.
    """
    if isinstance(task, str):
        task = build_task(task)
    if task.sampler_kind == "mod_arith" and length % 2 == 0:
        raise InputDomainError("modular arithmetic evaluation lengths must be odd")
    possible = [lab for lab in (1, 0) if label_feasible(task.machine, length, lab)] if task.recognition else None
    rows, labels = [], []
    for r in range(count):
        rng = derive(seed, "eval", length, r)
        target = _row_target(task, balanced, r, rng)
        if target is not None and target not in possible:
            target = possible[0]
        seq = None
        for _ in range(LENGTH_RETRIES):
            seq = sample_row(task, length, target, False, rng)
            if seq is not None:
                break
        if seq is None:
            raise ResourceError(f"{task.name}: no sample with label {target} at length {length}")
        rows.append(seq)
        labels.append(run(task.machine, seq))
    return make_batch(rows, labels, task.alphabet_size)


@dataclass(frozen=True)
class DyckPositiveSampler:
    """Picklable ``(length, rng) -> sequence`` for uniform positive D_n strings."""

    n: int
    augment: bool = False

    def __call__(self, length: int, rng: np.random.Generator) -> list[int]:
        return sample_dyck_positive(self.n, length, self.augment, rng)
