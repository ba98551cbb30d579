"""Moore machines for the 21 regular tasks.

A Moore machine is a complete DFA whose states carry output symbols; the
label of a sequence is the output of the state its run ends in.  Recognition
tasks use outputs {0, 1} with 1 meaning "accepted".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputDomainError, TaskLookupError

PREFIX_GUARD = 1 << 20


class MooreMachine:
    """Dense transition table plus per-state outputs.

    The constructor does not validate; call :func:`validate` on anything
    that came from outside the package.
    """

    __slots__ = ("transition", "output", "initial", "output_size")

    def __init__(self, transition, output, initial=0, output_size=None):
        transition = np.array(transition, dtype=np.int64)
        output = np.array(output, dtype=np.int64)
        if transition.ndim != 2 or output.ndim != 1:
            raise ConfigurationError("transition must be 2-d and output 1-d")
        transition.flags.writeable = False
        output.flags.writeable = False
        self.transition = transition
        self.output = output
        self.initial = int(initial)
        if output_size is None:
            output_size = int(output.max()) + 1 if output.size else 1
        self.output_size = int(output_size)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def alphabet_size(self) -> int:
        return self.transition.shape[1]

    def __eq__(self, other):
        if not isinstance(other, MooreMachine):
            return NotImplemented
        return (
            self.initial == other.initial
            and self.output_size == other.output_size
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.output, other.output)
        )

    def __hash__(self):
        return hash((self.transition.tobytes(), self.output.tobytes(), self.initial, self.output_size))

    def __repr__(self):
        return (
            f"MooreMachine(num_states={self.num_states}, alphabet_size={self.alphabet_size}, "
            f"output_size={self.output_size})"
        )

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "alphabet_size": self.alphabet_size,
            "output_size": self.output_size,
            "initial": self.initial,
            "transition": [int(x) for x in self.transition.ravel()],
            "output": [int(x) for x in self.output],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | bytes) -> "MooreMachine":
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid machine JSON: {exc.msg}", exc.pos) from exc
        try:
            n, q = int(doc["num_states"]), int(doc["alphabet_size"])
            flat = np.asarray(doc["transition"], dtype=np.int64)
            if flat.size != n * q:
                raise FormatError(f"transition has {flat.size} entries, expected {n * q}")
            machine = cls(flat.reshape(n, q), doc["output"], doc["initial"], doc["output_size"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed machine document: {exc}") from exc
        problems = validate(machine)
        if problems:
            raise FormatError("; ".join(problems))
        return machine


def validate(machine: MooreMachine) -> list[str]:
    """Invariant violations of ``machine`` (empty list when it is well formed)."""
    problems = []
    n = machine.num_states
    if n < 1:
        problems.append("machine has no states")
    if machine.alphabet_size < 1:
        problems.append("alphabet is empty")
    if machine.output.shape[0] != n:
        problems.append(f"output table has {machine.output.shape[0]} entries for {n} states")
    if machine.transition.size and (machine.transition.min() < 0 or machine.transition.max() >= n):
        problems.append("transition out of range")
    if not 0 <= machine.initial < n:
        problems.append("initial state out of range")
    if machine.output_size < 1:
        problems.append("output_size must be positive")
    if machine.output.size and (machine.output.min() < 0 or machine.output.max() >= machine.output_size):
        problems.append("output out of range")
    return problems


def _check_tokens(machine: MooreMachine, seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64).reshape(-1)
    if seq.size and (seq.min() < 0 or seq.max() >= machine.alphabet_size):
        bad = seq[(seq < 0) | (seq >= machine.alphabet_size)][0]
        raise InputDomainError(f"token {bad} outside alphabet of size {machine.alphabet_size}")
    return seq


def final_state(machine: MooreMachine, seq, start: int | None = None) -> int:
    """State reached by folding the transition function over ``seq``."""
    seq = _check_tokens(machine, seq)
    state = machine.initial if start is None else int(start)
    table = machine.transition
    for tok in seq.tolist():
        state = table[state, tok]
    return int(state)


def run(machine: MooreMachine, seq) -> int:
    """Output symbol of the run of ``seq``; ``output[initial]`` for an empty sequence."""
    return int(machine.output[final_state(machine, seq)])


def run_batch(machine: MooreMachine, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Vectorised :func:`run` over padded rows; positions past ``lengths`` are ignored."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    states = np.full(tokens.shape[0], machine.initial, dtype=np.int64)
    for t in range(tokens.shape[1]):
        live = lengths > t
        if not live.any():
            break
        tok = tokens[live, t]
        if tok.size and (tok.min() < 0 or tok.max() >= machine.alphabet_size):
            raise InputDomainError(f"token outside alphabet of size {machine.alphabet_size}")
        states[live] = machine.transition[states[live], tok]
    return machine.output[states]


# ---------------------------------------------------------------------------
# Machine constructors


def build_prefix_language(p: int, q: int) -> MooreMachine:
    """Machine whose output is determined by the first ``p`` symbols over ``q`` symbols."""
    if p < 1 or q < 2:
        raise ConfigurationError(f"prefix language needs p >= 1 and q >= 2, got p={p}, q={q}")
    if q**p > PREFIX_GUARD:
        raise ConfigurationError(f"q**p = {q**p} exceeds the guard {PREFIX_GUARD}")
    inner = (q**p - 1) // (q - 1)
    num_states = (q ** (p + 1) - 1) // (q - 1)
    states = np.arange(num_states)
    transition = np.empty((num_states, q), dtype=np.int64)
    transition[:inner] = states[:inner, None] * q + 1 + np.arange(q)[None, :]
    transition[inner:] = states[inner:, None]
    output = np.where(states < inner, 0, states - (inner - 1))
    return MooreMachine(transition, output, 0, q**p + 1)


def build_dyck(n: int) -> MooreMachine:
    """Complete DFA for depth-bounded Dyck: chain 0..n plus a rejecting sink."""
    if n < 1:
        raise ConfigurationError("Dyck depth must be >= 1")
    sink = n + 1
    transition = np.empty((n + 2, 2), dtype=np.int64)
    for i in range(n + 1):
        transition[i, 0] = i + 1 if i < n else sink
        transition[i, 1] = i - 1 if i > 0 else sink
    transition[sink] = sink
    output = np.zeros(n + 2, dtype=np.int64)
    output[0] = 1
    return MooreMachine(transition, output, 0, 2)


def build_mod_arith(modulus: int = 5) -> MooreMachine:
    """Left-to-right modular evaluation of ``a op b op c ...``.

    States are (accumulator, pending operator) pairs, indexed ``acc * 3 + op``
    with operators ``+, -, ×`` at indices 0, 1, 2.  Operand tokens are
    ``0..modulus-1``; operator tokens follow them.  Only alternating
    operand/operator sequences are meaningful.
    """
    ops = 3
    transition = np.empty((modulus * ops, modulus + ops), dtype=np.int64)
    for acc in range(modulus):
        for op in range(ops):
            s = acc * ops + op
            for v in range(modulus):
                if op == 0:
                    nxt = acc + v
                elif op == 1:
                    nxt = acc - v
                else:
                    nxt = acc * v
                transition[s, v] = (nxt % modulus) * ops
            for o in range(ops):
                transition[s, modulus + o] = acc * ops + o
    output = np.repeat(np.arange(modulus), ops)
    return MooreMachine(transition, output, 0, modulus)


def _table(rows, outputs, n_out=2):
    return MooreMachine(rows, outputs, 0, n_out)


# Recognition machines, transcribed state by state from the task diagrams.
# Rows are indexed by state; columns by symbol 0, 1.
_EVEN_PAIRS = _table(
    [[1, 3], [1, 2], [1, 2], [4, 3], [4, 3]],
    # state 0 is only reached by the empty sequence; zero pairs is even, which
    # the other states encode as output 0
    [0, 0, 1, 0, 1],
)
_PARITY = _table([[0, 1], [1, 0]], [1, 0])
_TOMITA = {
    3: _table([[0, 1], [3, 0], [3, 1], [2, 4], [4, 4]], [1, 1, 1, 0, 0]),
    4: _table([[1, 0], [2, 0], [3, 0], [3, 3]], [1, 1, 1, 0]),
    5: _table([[3, 1], [2, 0], [1, 3], [0, 2]], [1, 0, 0, 0]),
    6: _table([[2, 1], [0, 2], [1, 0]], [1, 0, 0]),
    7: _table([[0, 1], [2, 1], [2, 3], [4, 3], [4, 4]], [1, 1, 1, 1, 0]),
}


def _cycle_nav(size: int = 5) -> MooreMachine:
    # symbol 0 -> -1, 1 -> stay, 2 -> +1
    transition = [[(s - 1) % size, s, (s + 1) % size] for s in range(size)]
    return MooreMachine(transition, list(range(size)), 0, size)


# ---------------------------------------------------------------------------
# Task registry


@dataclass(frozen=True, eq=False)
class TaskSpec:
    name: str
    machine: MooreMachine
    sampler_kind: str
    alphabet_labels: tuple[str, ...]
    params: dict = field(default_factory=dict)

    @property
    def recognition(self) -> bool:
        """Binary accept/reject task whose batches are class balanced."""
        return self.sampler_kind in ("uniform_binary", "dyck", "tomita")

    @property
    def alphabet_size(self) -> int:
        return self.machine.alphabet_size

    @property
    def output_size(self) -> int:
        return self.machine.output_size


TASK_NAMES = (
    "even_pairs", "mod_arith", "parity", "cycle_nav",
    "d2", "d3", "d4", "d6", "d8", "d12",
    "tomita3", "tomita4", "tomita5", "tomita6", "tomita7",
    "p1_2", "p2_2", "p4_2", "p1_4", "p2_4", "p4_4",
)  # fmt: skip

_BINARY = ("0", "1")


def build_task(name: str) -> TaskSpec:
    if name == "even_pairs":
        return TaskSpec(name, _EVEN_PAIRS, "uniform_binary", _BINARY)
    if name == "parity":
        return TaskSpec(name, _PARITY, "uniform_binary", _BINARY)
    if name == "cycle_nav":
        return TaskSpec(name, _cycle_nav(), "uniform", ("-1", "0", "+1"))
    if name == "mod_arith":
        labels = tuple(str(v) for v in range(5)) + ("+", "-", "×")
        return TaskSpec(name, build_mod_arith(5), "mod_arith", labels, {"modulus": 5})
    if name.startswith("d") and name[1:].isdigit():
        n = int(name[1:])
        if n in (2, 3, 4, 6, 8, 12):
            return TaskSpec(name, build_dyck(n), "dyck", _BINARY, {"n": n})
    if name.startswith("tomita") and name[6:].isdigit():
        k = int(name[6:])
        if k in _TOMITA:
            return TaskSpec(name, _TOMITA[k], "tomita", _BINARY, {"k": k})
    if name.startswith("p") and "_" in name:
        p, _, q = name[1:].partition("_")
        if p.isdigit() and q.isdigit() and (int(p), int(q)) in {(1, 2), (2, 2), (4, 2), (1, 4), (2, 4), (4, 4)}:
            p, q = int(p), int(q)
            labels = tuple(str(v) for v in range(q))
            return TaskSpec(name, build_prefix_language(p, q), "uniform", labels, {"p": p, "q": q})
    raise TaskLookupError(f"unknown task {name!r}; known tasks: {', '.join(TASK_NAMES)}")


def encode_labels(task: TaskSpec, symbols: Sequence[str]) -> list[int]:
    """Map printable token names (e.g. ``"+"`` or ``"-1"``) to indices."""
    index = {label: i for i, label in enumerate(task.alphabet_labels)}
    if "×" in index:
        index["*"] = index["×"]
    try:
        return [index[s] for s in symbols]
    except KeyError as exc:
        raise InputDomainError(f"unknown symbol {exc.args[0]!r} for task {task.name}") from None
