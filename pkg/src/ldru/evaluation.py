"""Length-generalization accuracy, embedding export, clustering metrics and timing."""

from __future__ import annotations

import csv
import gc
import io
import itertools
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .automata import TaskSpec, build_task
from .errors import ConfigurationError, InputDomainError, ResourceError
from .model import LdruModel, Model, ModelConfig, encode, init_model
from .monoid import TransitionMonoid
from .rng import derive
from .sampler import Batch, candidate_lengths, eval_set, make_batch

ENUMERATION_GUARD = 1 << 20


@dataclass
class AccuracyReport:
    per_length: dict[int, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_length.values()))) if self.per_length else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("length", "accuracy"))
        for n, acc in self.per_length.items():
            w.writerow((n, f"{acc:.6f}"))
        w.writerow(("mean", f"{self.mean:.6f}"))
        return buf.getvalue()


def ood_accuracy(model: Model, task: TaskSpec | str, len_from: int, len_to: int, per_len: int = 512, seed: int = 0) -> AccuracyReport:
    """Accuracy at every length in ``[len_from, len_to]``; lengths weigh equally in the mean.

    Lengths the task cannot produce (even lengths for modular arithmetic) are skipped.
    """
    if len_from < 1 or len_to < len_from:
        raise InputDomainError(f"bad length range {len_from}..{len_to}")
    if isinstance(task, str):
        task = build_task(task)
    per_length = {}
    for n in candidate_lengths(task, len_from, len_to):
        batch = eval_set(task, n, per_len, seed=seed)
        if len(batch) == 0:
            continue
        per_length[n] = float(np.mean(model.predict(batch) == batch.labels))
    return AccuracyReport(per_length)


# ---------------------------------------------------------------------------
# Embeddings


@dataclass
class EmbeddingTable:
    sequences: list[tuple[int, ...]]
    classes: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.sequences)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tokens", "ec", *(f"v{i}" for i in range(self.vectors.shape[1]))])
        for seq, ec, vec in zip(self.sequences, self.classes, self.vectors):
            w.writerow(["-".join(map(str, seq)), int(ec), *(f"{x:.9g}" for x in vec)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EmbeddingTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:2] != ["tokens", "ec"]:
            raise ConfigurationError("embeddings CSV must start with columns tokens,ec,v0,...")
        body = rows[1:]
        seqs = [tuple(int(t) for t in r[0].split("-")) if r[0] else () for r in body]
        classes = np.array([int(r[1]) for r in body], dtype=np.int64)
        vectors = np.array([[float(x) for x in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 2)
        return cls(seqs, classes, vectors)


def export_embeddings(
    model: LdruModel,
    task: TaskSpec | str,
    max_len: int,
    monoid: TransitionMonoid,
    sample: int | None = None,
    seed: int = 0,
) -> EmbeddingTable:
    """Final pre-classifier vectors of all sequences of length 1..``max_len``.

    Lengths the monoid cannot classify (odd lengths for an even-only monoid)
    are skipped.  Past the enumeration guard, pass ``sample`` to draw that
    many uniform sequences per length instead.
    """
    if isinstance(task, str):
        task = build_task(task)
    q = task.machine.alphabet_size
    lengths = [n for n in range(1, max_len + 1) if n % monoid.block == 0]
    total = sum(q**n for n in lengths)
    if sample is None and total > ENUMERATION_GUARD:
        raise ResourceError(f"{total} sequences exceed the enumeration guard; pass a sample size")
    seqs: list[tuple[int, ...]] = []
    classes, vectors = [], []
    for n in lengths:
        if sample is None:
            rows = np.array(list(itertools.product(range(q), repeat=n)), dtype=np.int64)
        else:
            rows = derive(seed, "eval", 1 << 32, n).integers(0, q, size=(sample, n))
        for lo in range(0, len(rows), 4096):
            chunk = rows[lo : lo + 4096]
            batch = make_batch(chunk.tolist(), [0] * len(chunk), q)
            vectors.append(model.embed(batch))
            classes.extend(monoid.classify(r) for r in chunk.tolist())
            seqs.extend(tuple(r) for r in chunk.tolist())
    vec = np.concatenate(vectors) if vectors else np.zeros((0, model.config.d), dtype=np.float32)
    return EmbeddingTable(seqs, np.array(classes, dtype=np.int64), vec)


# ---------------------------------------------------------------------------
# Clustering


def _sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x, k: int, seed: int = 0, iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm from a seeded k-means++ start."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 2:
        raise InputDomainError("k must be >= 2")
    if len(np.unique(x, axis=0)) < k:
        raise InputDomainError(f"need at least {k} distinct points")
    rng = derive(seed, "eval", 1 << 33, k)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_distances(x, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centers[c] = x[idx]
        closest = np.minimum(closest, _sq_distances(x, centers[c : c + 1])[:, 0])

    labels = np.full(n, -1)
    for _ in range(iters):
        dist = _sq_distances(x, centers)
        new = dist.argmin(1)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(0)
            else:
                # empty cluster: restart it at the point worst served by its centre
                far = int(dist[np.arange(n), labels].argmax())
                centers[c] = x[far]
                labels[far] = c
                dist[far] = 0.0
    return labels


def _comb2(v):
    v = np.asarray(v, dtype=np.float64)
    return v * (v - 1) / 2


def ari(a, b) -> float:
    """Adjusted Rand index under the permutation model."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InputDomainError("label arrays differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_cells = _comb2(table).sum()
    sum_a = _comb2(table.sum(1)).sum()
    sum_b = _comb2(table.sum(0)).sum()
    expected = sum_a * sum_b / _comb2(len(a)) if len(a) > 1 else 0.0
    top = 0.5 * (sum_a + sum_b)
    if top == expected:
        return 1.0
    return float((sum_cells - expected) / (top - expected))


def silhouette(x, labels, chunk: int = 2048) -> float:
    """Mean silhouette with Euclidean distance; singleton clusters score 0."""
    x = np.asarray(x, dtype=np.float64)
    _, lab = np.unique(labels, return_inverse=True)
    k = lab.max() + 1
    if not 2 <= k <= len(x) - 1:
        raise InputDomainError("silhouette needs 2 <= clusters <= points - 1")
    sizes = np.bincount(lab, minlength=k).astype(np.float64)
    onehot = np.zeros((len(x), k))
    onehot[np.arange(len(x)), lab] = 1.0
    scores = np.empty(len(x))
    for lo in range(0, len(x), chunk):
        d = np.sqrt(_sq_distances(x[lo : lo + chunk], x))
        sums = d @ onehot
        own = lab[lo : lo + chunk]
        rows = np.arange(len(own))
        a = sums[rows, own] / np.maximum(sizes[own] - 1, 1)
        sums[rows, own] = np.inf
        b = (sums / sizes[None, :]).min(1)
        s = (b - a) / np.maximum(a, b)
        s[sizes[own] == 1] = 0.0
        scores[lo : lo + chunk] = np.nan_to_num(s)
    return float(scores.mean())


def cluster_sweep(table: EmbeddingTable, ks: Sequence[int], seed: int = 0) -> list[dict]:
    out = []
    for k in ks:
        labels = kmeans(table.vectors, k, seed)
        out.append({"k": k, "ari": ari(table.classes, labels), "silhouette": silhouette(table.vectors, labels)})
    return out


# ---------------------------------------------------------------------------
# Timing

BENCH_VOCAB = 16
BENCH_OUTPUT = 2


def bench_model(kind: str, d: int = 64, seed: int = 0) -> Model:
    if kind not in ("ldru", "rnn"):
        raise ConfigurationError(f"unknown model kind {kind!r}")
    cfg = ModelConfig(vocab_size=BENCH_VOCAB, output_size=BENCH_OUTPUT, d=d, kind=kind, dropout_p=0.0)
    return init_model(cfg, seed)


def bench_batch(length: int, batch: int, seed: int = 0) -> Batch:
    rows = derive(seed, "bench", length).integers(0, BENCH_VOCAB, size=(batch, length))
    return make_batch(rows.tolist(), [0] * batch, BENCH_VOCAB)


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def bench(kinds: Sequence[str], lengths: Sequence[int], batch: int = 32, reps: int = 128, warmup: int = 2, seed: int = 0) -> list[dict]:
    """Mean wall-clock milliseconds per forward and per forward+backward pass.

    Models and inputs are built before timing starts.  Repetitions cycle
    through the lengths so slow drift in machine load hits every length
    alike; the garbage collector is paused inside timed regions.
    """
    rows = []
    for kind in kinds:
        model = bench_model(kind, seed=seed)
        fns = []
        for n in lengths:
            data = bench_batch(n, batch, seed)

            def fwd(data=data):
                with ad.no_tape():
                    model.logits(data)

            def fwdbwd(data=data):
                with ad.Tape() as tape:
                    loss = ad.softmax_cross_entropy(model.logits(data), data.labels)
                ad.backward(tape, loss, model.parameters())

            fns.append((fwd, fwdbwd))
        for fwd, fwdbwd in fns:
            for _ in range(warmup):
                fwd()
                fwdbwd()
        totals = np.zeros((len(fns), 2))
        was_enabled = gc.isenabled()
        try:
            for _ in range(reps):
                for i, (fwd, fwdbwd) in enumerate(fns):
                    gc.collect()
                    gc.disable()
                    totals[i, 0] += _timed(fwd)
                    totals[i, 1] += _timed(fwdbwd)
                    gc.enable()
        finally:
            if was_enabled:
                gc.enable()
            else:
                gc.disable()
        for n, (f, fb) in zip(lengths, 1000.0 * totals / max(reps, 1)):
            rows.append({"length": n, "kind": kind, "fwd_ms": float(f), "fwdbwd_ms": float(fb)})
    return rows


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("length", "kind", "fwd_ms", "fwdbwd_ms"))
    for r in rows:
        w.writerow((r["length"], r["kind"], f"{r['fwd_ms']:.4f}", f"{r['fwdbwd_ms']:.4f}"))
    return buf.getvalue()


def operator_applications(model: LdruModel, batch: Batch) -> np.ndarray:
    """Operator applications per row, read from the reduction trace."""
    with ad.no_tape():
        _, trace = encode(model, batch, trace=True)
    return trace.applications_per_row


def linear_fit_r2(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(1 - (resid**2).sum() / ss_tot) if ss_tot else 1.0
