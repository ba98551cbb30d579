"""MLP-LDRU: a learned pairwise operator applied as a balanced reduction.

A sequence of ``n`` token embeddings is reduced to one vector in
``ceil(log2 n)`` steps.  Each step pairs adjacent slots ``(0,1), (2,3), ...``;
an odd slot out on the right passes through unchanged.  Every surviving slot
then gets ``h + FFN(h)``, layer norm and (in training) dropout.  A linear
head maps the final vector to class logits.

Internally only real slots are stored, packed row after row, so padding never
reaches the operator and each row is computed independently of the others.
The Elman RNN baseline lives here too.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, FormatError, InputDomainError
from .rng import derive

OPERATOR_KINDS = ("mlp", "elem_sum", "linear", "gated_sum")
MAGIC = b"LDRU-CKPT"


@dataclass
class ModelConfig:
    vocab_size: int
    output_size: int
    d: int = 64
    dropout_p: float = 0.1
    operator_kind: str = "mlp"
    activation: str = "relu"
    kind: str = "ldru"
    rnn_hidden: int = 256

    def __post_init__(self):
        if self.kind not in ("ldru", "rnn"):
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.operator_kind not in OPERATOR_KINDS:
            raise ConfigurationError(f"unknown operator kind {self.operator_kind!r}")
        if self.activation not in ("relu", "silu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError("dropout_p must be in [0, 1)")


def glorot_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


@dataclass
class ReductionStep:
    """Operator applications of one reduction step.

    ``inputs`` holds the step's real slots packed row by row (``counts`` per
    active row); ``left``/``right``/``output`` are the composed pairs.
    Slots that passed through are listed in ``passed``.
    """

    inputs: Tensor
    counts: np.ndarray
    rows: np.ndarray
    left: Tensor
    right: Tensor
    output: Tensor
    passed: np.ndarray

    @property
    def applications(self):
        """``(left_real, right_real)`` flags: composed pairs first, then pass-throughs."""
        return [(True, True)] * self.left.shape[0] + [(True, False)] * len(self.passed)


@dataclass
class ReductionTrace:
    steps: list[ReductionStep] = field(default_factory=list)
    steps_per_row: np.ndarray | None = None
    applications_per_row: np.ndarray | None = None


class Model:
    """Parameters in a fixed order plus the configuration that produced them."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def astype(self, dtype) -> "Model":
        with ad.precision(dtype):
            params = {k: Tensor(v.data, requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return type(self)(self.config, params)

    def logits(self, batch, train=False, rng=None):
        raise NotImplementedError

    def predict(self, batch) -> np.ndarray:
        with ad.no_tape():
            return np.argmax(self.logits(batch).data, axis=1)


class LdruModel(Model):
    def logits(self, batch, train=False, rng=None):
        return encode(self, batch, train=train, rng=rng)[0]

    def embed(self, batch) -> np.ndarray:
        with ad.no_tape():
            return reduce_sequences(self, batch.tokens, batch.lengths)[0].data


class RnnModel(Model):
    def logits(self, batch, train=False, rng=None):
        return rnn_encode(self, batch)


# ---------------------------------------------------------------------------
# Initialisation


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = derive(seed, "init")
    d, v, out = config.d, config.vocab_size, config.output_size
    p: dict[str, np.ndarray] = {}
    if config.kind == "rnn":
        h = config.rnn_hidden
        p["rnn.w_xh"] = glorot_normal(rng, v, h)
        p["rnn.w_hh"] = glorot_normal(rng, h, h)
        p["rnn.b_h"] = np.zeros(h)
        p["head.w"] = glorot_normal(rng, h, out)
        p["head.b"] = np.zeros(out)
        return RnnModel(config, _wrap(p))

    p["embedding"] = rng.normal(0.0, 0.02, size=(v, d))
    kind = config.operator_kind
    if kind == "mlp":
        for name, (fi, fo) in (("w1", (2 * d, 2 * d)), ("w2", (2 * d, 4 * d)), ("w3", (4 * d, 2 * d))):
            p[f"op.mlp.{name}"] = glorot_normal(rng, fi, fo)
            p[f"op.mlp.b{name[1]}"] = np.zeros(fo)
        for name in ("v_i", "v_j", "w_out"):
            p[f"op.{name}"] = np.eye(d)
        for name in ("b_i", "b_j", "b_out"):
            p[f"op.{name}"] = np.zeros(d)
    elif kind == "linear":
        p["op.w"] = glorot_normal(rng, 2 * d, d)
        p["op.b"] = np.zeros(d)
    elif kind == "gated_sum":
        p["op.w_g"] = glorot_normal(rng, 2 * d, d)
        p["op.b_g"] = np.zeros(d)
    p["ffn.w1"] = glorot_normal(rng, d, 4 * d)
    p["ffn.b1"] = np.zeros(4 * d)
    p["ffn.w2"] = glorot_normal(rng, 4 * d, d)
    p["ffn.b2"] = np.zeros(d)
    p["norm.scale"] = np.ones(d)
    p["norm.shift"] = np.zeros(d)
    p["head.w"] = glorot_normal(rng, d, out)
    p["head.b"] = np.zeros(out)
    return LdruModel(config, _wrap(p))


def _wrap(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(a, dtype=np.float32), requires_grad=True, name=k) for k, a in arrays.items()}


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count, used to cross-check :func:`init_model`."""
    d, v, out = config.d, config.vocab_size, config.output_size
    if config.kind == "rnn":
        h = config.rnn_hidden
        return v * h + h * h + h + h * out + out
    op = {
        "mlp": (2 * d * 2 * d + 2 * d) + (2 * d * 4 * d + 4 * d) + (4 * d * 2 * d + 2 * d) + 3 * d * d + 3 * d,
        "elem_sum": 0,
        "linear": 2 * d * d + d,
        "gated_sum": 2 * d * d + d,
    }[config.operator_kind]
    ffn = d * 4 * d + 4 * d + 4 * d * d + d
    return v * d + op + ffn + 2 * d + d * out + out


# ---------------------------------------------------------------------------
# Operator


def _activation(config: ModelConfig):
    return ad.relu if config.activation == "relu" else ad.silu


def mlp_gates(model: Model, h_i: Tensor, h_j: Tensor) -> tuple[Tensor, Tensor]:
    p = model.params
    act = _activation(model.config)
    x = ad.concat_last_dim([h_i, h_j])
    z = act(x @ p["op.mlp.w1"] + p["op.mlp.b1"])
    z = act(z @ p["op.mlp.w2"] + p["op.mlp.b2"])
    g = z @ p["op.mlp.w3"] + p["op.mlp.b3"]
    d = h_i.shape[-1]
    g_i, g_j = ad.split_last_dim(g, [d, d])
    return g_i, g_j


def compose(model: Model, h_i: Tensor, h_j: Tensor, gate_fn=None) -> Tensor:
    """The operator on pairs where both inputs are real (rows of ``h_i``/``h_j``)."""
    p = model.params
    kind = model.config.operator_kind
    if kind == "elem_sum":
        return h_i + h_j
    if kind == "linear":
        return ad.concat_last_dim([h_i, h_j]) @ p["op.w"] + p["op.b"]
    if kind == "gated_sum":
        g = ad.sigmoid(ad.concat_last_dim([h_i, h_j]) @ p["op.w_g"] + p["op.b_g"])
        return g * h_i + (1.0 - g) * h_j
    g_i, g_j = (gate_fn or mlp_gates)(model, h_i, h_j)
    f_i = (g_i * h_i) @ p["op.v_i"] + p["op.b_i"]
    f_j = (g_j * h_j) @ p["op.v_j"] + p["op.b_j"]
    return (f_i + f_j) @ p["op.w_out"] + p["op.b_out"]


def apply_operator(model: Model, h_i, h_j, real_i=True, real_j=True, gate_fn=None) -> Tensor:
    """Combine two slots, or rows of slots, honouring padding flags.

    Where exactly one input is real it is returned unchanged; where both are
    real the operator is applied.  Both inputs being padding is a contract
    violation.
    """
    h_i, h_j = ad.as_tensor(h_i), ad.as_tensor(h_j)
    single = h_i.ndim == 1
    if single:
        h_i, h_j = ad.reshape(h_i, (1, -1)), ad.reshape(h_j, (1, -1))
    rows = h_i.shape[0]
    ri = np.broadcast_to(np.asarray(real_i, dtype=bool), (rows,))
    rj = np.broadcast_to(np.asarray(real_j, dtype=bool), (rows,))
    if np.any(~ri & ~rj):
        raise ContractError("operator applied to two padding slots")
    both = ri & rj
    if both.all():
        out = compose(model, h_i, h_j, gate_fn)
    else:
        passed = ad.where(ri[:, None], h_i, h_j)
        idx = np.flatnonzero(both)
        if idx.size == 0:
            out = passed
        else:
            composed = compose(model, ad.gather_rows(h_i, idx), ad.gather_rows(h_j, idx), gate_fn)
            order = np.arange(rows) + idx.size
            order[idx] = np.arange(idx.size)
            out = ad.gather_rows(ad.concat([composed, passed], axis=0), order)
    return ad.reshape(out, (-1,)) if single else out


# ---------------------------------------------------------------------------
# Reduction


def _post_step(model: Model, h: Tensor, train: bool, rng) -> Tensor:
    p = model.params
    act = _activation(model.config)
    h = h + (act(h @ p["ffn.w1"] + p["ffn.b1"]) @ p["ffn.w2"] + p["ffn.b2"])
    h = ad.layer_norm(h, p["norm.scale"], p["norm.shift"])
    return ad.dropout(h, model.config.dropout_p, rng, train)


def reduction_steps(n: int) -> int:
    return 0 if n <= 1 else (int(n) - 1).bit_length()


def reduce_sequences(model: Model, tokens, lengths, train=False, rng=None, trace=False, gate_fn=None):
    """Final vectors (batch x d) for padded ``tokens`` with true ``lengths``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    batch = lengths.shape[0]
    if batch and lengths.min() < 1:
        raise InputDomainError("cannot encode an empty sequence")
    if train and model.config.dropout_p > 0 and rng is None:
        raise ConfigurationError("training mode needs a dropout random generator")
    rec = ReductionTrace() if trace else None
    rows_of_slot = np.repeat(np.arange(batch), lengths)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]) if batch else np.zeros(0, dtype=np.int64)
    positions = np.arange(rows_of_slot.size) - np.repeat(offsets, lengths)
    h = ad.embedding_lookup(model.params["embedding"], tokens[rows_of_slot, positions])

    finals_rows: list[np.ndarray] = []
    finals: list[Tensor] = []
    counts = lengths.copy()
    rows = np.arange(batch)
    steps = np.zeros(batch, dtype=np.int64)
    apps = np.zeros(batch, dtype=np.int64)

    done = counts == 1
    if done.any():
        finals_rows.append(rows[done])
        finals.append(ad.gather_rows(h, offsets[done]))
        if not done.all():
            keep = np.repeat(~done, counts)
            h = ad.gather_rows(h, np.flatnonzero(keep))
        rows, counts = rows[~done], counts[~done]

    while rows.size:
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pairs = counts // 2
        left_idx = np.repeat(starts, pairs) + 2 * (np.arange(pairs.sum()) - np.repeat(np.cumsum(pairs) - pairs, pairs))
        left = ad.gather_rows(h, left_idx)
        right = ad.gather_rows(h, left_idx + 1)
        composed = compose(model, left, right, gate_fn)
        odd = counts % 2 == 1
        passed = starts[odd] + counts[odd] - 1
        new_counts = pairs + odd
        if passed.size:
            # slot order per row: its composed pairs, then its pass-through
            pair_pos = np.arange(pairs.sum())
            new_starts = np.concatenate([[0], np.cumsum(new_counts)[:-1]])
            order = np.empty(new_counts.sum(), dtype=np.int64)
            pair_dest = np.repeat(new_starts, pairs) + (pair_pos - np.repeat(np.cumsum(pairs) - pairs, pairs))
            order[pair_dest] = pair_pos
            order[new_starts[odd] + new_counts[odd] - 1] = composed.shape[0] + passed
            merged = ad.gather_rows(ad.concat([composed, h], axis=0), order)
        else:
            merged = composed
        if rec is not None:
            rec.steps.append(ReductionStep(h, counts.copy(), rows.copy(), left, right, composed, passed))
        steps[rows] += 1
        apps[rows] += pairs
        merged = _post_step(model, merged, train, rng)
        finished = new_counts == 1
        if finished.any():
            new_starts = np.concatenate([[0], np.cumsum(new_counts)[:-1]])
            finals_rows.append(rows[finished])
            finals.append(ad.gather_rows(merged, new_starts[finished]))
            if not finished.all():
                keep = np.repeat(~finished, new_counts)
                merged = ad.gather_rows(merged, np.flatnonzero(keep))
        h = merged
        rows, counts = rows[~finished], new_counts[~finished]

    if not finals:
        return ad.Tensor(np.zeros((0, model.config.d))), rec
    order_rows = np.concatenate(finals_rows)
    stacked = finals[0] if len(finals) == 1 else ad.concat(finals, axis=0)
    inverse = np.empty(batch, dtype=np.int64)
    inverse[order_rows] = np.arange(batch)
    out = ad.gather_rows(stacked, inverse)
    if rec is not None:
        rec.steps_per_row = steps
        rec.applications_per_row = apps
    return out, rec


def encode(model: Model, batch, train=False, rng=None, trace=False, gate_fn=None):
    """``(logits, trace)`` for a padded batch; ``trace`` is ``None`` unless requested."""
    h, rec = reduce_sequences(model, batch.tokens, batch.lengths, train, rng, trace, gate_fn)
    logits = h @ model.params["head.w"] + model.params["head.b"]
    return logits, rec


# ---------------------------------------------------------------------------
# Elman RNN baseline


def rnn_encode(model: Model, batch) -> Tensor:
    """Elman recurrence over one-hot tokens; logits from each row's state at its true length.

    A one-hot input times ``w_xh`` is the token's row of ``w_xh``, so the
    product is computed as a row lookup.
    """
    p = model.params
    tokens = np.asarray(batch.tokens, dtype=np.int64)
    lengths = np.asarray(batch.lengths, dtype=np.int64)
    if lengths.size and lengths.min() < 1:
        raise InputDomainError("cannot encode an empty sequence")
    rows = tokens.shape[0]
    h = ad.Tensor(np.zeros((rows, model.config.rnn_hidden)))
    safe = np.where(tokens < model.config.vocab_size, tokens, 0)
    for t in range(tokens.shape[1]):
        x = ad.embedding_lookup(p["rnn.w_xh"], safe[:, t])
        nxt = ad.tanh(x + h @ p["rnn.w_hh"] + p["rnn.b_h"])
        live = lengths > t
        h = nxt if live.all() else ad.where(live[:, None], nxt, h)
    return h @ p["head.w"] + p["head.b"]


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: b"LDRU-CKPT <header bytes>\n", then a UTF-8 JSON header of exactly
# that many bytes (ending in a newline), then raw little-endian float32
# tensors.  The header maps each tensor name to its shape and byte offset
# within the payload and also records the model configuration.


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    tensors, chunks, offset = {}, [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        tensors[name] = {"shape": list(arr.shape), "byte_offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": asdict(model.config), "order": list(model.params), "tensors": tensors}
    if extra:
        header["extra"] = extra
    head = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    return MAGIC + b" " + str(len(head)).encode() + b"\n" + head + b"".join(chunks)


def save(model: Model, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def load_bytes(blob: bytes) -> Model:
    line_end = blob.find(b"\n")
    if not blob.startswith(MAGIC + b" ") or line_end < 0:
        raise FormatError("not an LDRU checkpoint", 0)
    try:
        head_len = int(blob[len(MAGIC) + 1 : line_end])
    except ValueError:
        raise FormatError("bad header length", len(MAGIC) + 1) from None
    start = line_end + 1
    if start + head_len > len(blob):
        raise FormatError("truncated header", len(blob))
    try:
        header = json.loads(blob[start : start + head_len].decode("utf-8"))
        config = ModelConfig(**header["config"])
        order, tensors = header["order"], header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt header: {exc}", start) from None
    payload = start + head_len
    arrays = {}
    for name in order:
        meta = tensors[name]
        shape = tuple(meta["shape"])
        lo = payload + meta["byte_offset"]
        hi = lo + 4 * int(np.prod(shape, dtype=np.int64))
        if hi > len(blob):
            raise FormatError(f"tensor {name!r} truncated", len(blob))
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=(hi - lo) // 4, offset=lo).reshape(shape).copy()
    params = _wrap(arrays)
    cls = RnnModel if config.kind == "rnn" else LdruModel
    return cls(config, params)


def load(path) -> Model:
    return load_bytes(Path(path).read_bytes())


def read_extra(path) -> dict:
    blob = Path(path).read_bytes()
    line_end = blob.find(b"\n")
    head_len = int(blob[len(MAGIC) + 1 : line_end])
    return json.loads(blob[line_end + 1 : line_end + 1 + head_len]).get("extra", {})
