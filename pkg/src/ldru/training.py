"""Losses, the optimizer pipeline and the training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .automata import TaskSpec, build_task
from .errors import ConfigurationError, DivergenceError
from .model import Model, ModelConfig, ReductionTrace, compose, encode, init_model, save
from .rng import derive
from .sampler import SamplerConfig, eval_set, sample_batch

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "train_loss", "val_loss", "val_acc", "lr", "grad_norm")
COSINE_EPS = 1e-8


@dataclass
class TrainConfig:
    steps: int = 100_000
    base_lr: float = 1e-3
    init_lr: float = 1e-8
    warmup_frac: float = 0.2
    optimizer: str = "amsgrad"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    l2: float = 5e-4
    clip_norm: float = 1.0
    centralize: bool = True
    batch_size: int = 256
    dropout_p: float = 0.1
    assoc_lambda: float = 0.0
    seed: int = 0
    min_train_len: int = 1
    max_train_len: int = 40
    eval_every: int = 1000
    val_len: int = 500
    val_batch: int = 1024
    augment: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if not 0 <= self.warmup_frac <= 1:
            raise ConfigurationError("warmup_frac must be in [0, 1]")
        if self.optimizer not in ("amsgrad", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        for name in ("base_lr", "init_lr", "adam_eps", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.l2 < 0 or self.assoc_lambda < 0:
            raise ConfigurationError("regularization weights must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("batch_size and eval_every must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))


# Training steps, dropout and base learning rate per task.
TASK_HPARAMS: dict[str, dict] = {
    "even_pairs": {"steps": 100_000, "dropout_p": 0.1, "base_lr": 1e-3},
    "mod_arith": {"steps": 1_000_000, "dropout_p": 0.1, "base_lr": 1e-3},
    "parity": {"steps": 100_000, "dropout_p": 0.1, "base_lr": 1e-3},
    "cycle_nav": {"steps": 100_000, "dropout_p": 0.1, "base_lr": 1e-3},
    "d2": {"steps": 100_000, "dropout_p": 0.25, "base_lr": 1e-4},
    "d3": {"steps": 100_000, "dropout_p": 0.25, "base_lr": 1e-4},
    **{t: {"steps": 1_000_000, "dropout_p": 0.25, "base_lr": 1e-4} for t in ("d4", "d6", "d8", "d12")},
    **{f"tomita{k}": {"steps": 100_000, "dropout_p": 0.25, "base_lr": 1e-3} for k in range(3, 8)},
    **{p: {"steps": 100_000, "dropout_p": 0.25, "base_lr": 1e-3} for p in ("p1_2", "p2_2", "p4_2", "p1_4", "p2_4", "p4_4")},
}


def config_for_task(task: str, **overrides) -> TrainConfig:
    return TrainConfig(**{**TASK_HPARAMS[task], **overrides})


def load_config(path) -> tuple[TrainConfig, dict]:
    """Read a JSON run config: ``TrainConfig`` fields plus an optional ``"model"`` object."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    model = raw.pop("model", {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"{path}: unknown config fields {unknown}")
    model_known = {f.name for f in fields(ModelConfig)} - {"vocab_size", "output_size", "dropout_p"}
    bad = sorted(set(model) - model_known)
    if bad:
        raise ConfigurationError(f"{path}: unknown model fields {bad}")
    return TrainConfig(**raw), model


# ---------------------------------------------------------------------------
# Losses


def _bracketing_loss(model: Model, a, b, c) -> ad.Tensor:
    left = compose(model, compose(model, a, b), c)
    right = compose(model, a, compose(model, b, c))
    cos = ad.cosine_similarity(left, right, eps=COSINE_EPS)
    gap = 1.0 - cos
    return ad.reduce_mean(gap * gap)


def assoc_loss(trace: ReductionTrace, model: Model) -> ad.Tensor:
    """Mean over steps of the mean squared cosine gap between the two bracketings.

    Each step's real slots are split per row into consecutive disjoint
    triples.  Steps without a triple do not count; with none at all the
    loss is 0.
    """
    per_step = []
    for step in trace.steps:
        triples = step.counts // 3
        if triples.sum() == 0:
            continue
        starts = np.concatenate([[0], np.cumsum(step.counts)[:-1]])
        local = np.arange(triples.sum()) - np.repeat(np.cumsum(triples) - triples, triples)
        first = np.repeat(starts, triples) + 3 * local
        a, b, c = (ad.gather_rows(step.inputs, first + k) for k in range(3))
        per_step.append(_bracketing_loss(model, a, b, c))
    if not per_step:
        return ad.Tensor(0.0)
    total = per_step[0]
    for term in per_step[1:]:
        total = total + term
    return total * (1.0 / len(per_step))


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    v_hat: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, ad.Tensor]) -> "OptState":
        z = lambda: {k: np.zeros_like(p.data) for k, p in params.items()}  # noqa: E731
        return cls(z(), z(), z(), 0)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``init_lr`` at step 0 to ``base_lr`` at the end of warmup."""
    w = cfg.warmup_steps
    if w == 0 or step >= w:
        return cfg.base_lr
    return cfg.init_lr + (cfg.base_lr - cfg.init_lr) * step / w


def decays(name: str, p: ad.Tensor) -> bool:
    """L2 and centralization touch weight matrices and embeddings, never biases or norms."""
    return p.data.ndim >= 2


def centralize(g: np.ndarray) -> np.ndarray:
    return g - g.mean(axis=tuple(range(1, g.ndim)), keepdims=True, dtype=np.float64).astype(g.dtype)


def prepare_gradients(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], cfg: TrainConfig):
    """Pipeline steps before the moment update: L2, centralization, clipping.

    Returns ``(gradients, norm before clipping)``.
    """
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name}")
        if decays(name, p):
            if cfg.l2:
                g = g + np.float32(cfg.l2) * p.data
            if cfg.centralize:
                g = centralize(g)
        out[name] = g.astype(p.data.dtype, copy=False)
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in out.values()))
    if norm > cfg.clip_norm:
        scale = np.float32(cfg.clip_norm / norm)
        out = {k: g * scale for k, g in out.items()}
    return out, norm


def optimizer_step(state: OptState, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], step: int, cfg: TrainConfig) -> dict:
    """One update in place.  Returns ``{"lr", "grad_norm"}``; ``grad_norm`` is pre-clip."""
    g_all, norm = prepare_gradients(params, grads, cfg)
    lr = learning_rate(step, cfg)
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = g_all[name]
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        v_corr = v / c2
        if cfg.optimizer == "amsgrad":
            state.v_hat[name] = np.maximum(state.v_hat[name], v_corr)
            v_corr = state.v_hat[name]
        update = lr * (m / c1) / (np.sqrt(v_corr) + cfg.adam_eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return {"lr": lr, "grad_norm": norm}


# ---------------------------------------------------------------------------
# Loop


def batch_loss(model: Model, batch, cfg: TrainConfig, train: bool, rng=None):
    """``(total, task cross-entropy, logits)``; total adds the associativity term."""
    if model.config.kind == "ldru":
        logits, trace = encode(model, batch, train=train, rng=rng, trace=train and cfg.assoc_lambda > 0)
    else:
        logits, trace = model.logits(batch, train, rng), None
    xent = ad.softmax_cross_entropy(logits, batch.labels)
    total = xent
    if trace is not None:
        total = xent + cfg.assoc_lambda * assoc_loss(trace, model)
    return total, xent, logits


def evaluate(model: Model, batch, cfg: TrainConfig) -> tuple[float, float]:
    with ad.no_tape():
        _, xent, logits = batch_loss(model, batch, cfg, train=False)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == batch.labels))
    return float(xent.data), acc


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]

    def metrics_csv(self) -> str:
        return format_metrics(self.metrics)


def _fmt(x) -> str:
    return str(x) if isinstance(x, int) else f"{x:.8g}"


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in METRICS_HEADER])
    return buf.getvalue()


def model_config_for(task: TaskSpec, cfg: TrainConfig, **overrides) -> ModelConfig:
    return ModelConfig(
        vocab_size=task.machine.alphabet_size,
        output_size=task.machine.output_size,
        **{"dropout_p": cfg.dropout_p, **overrides},
    )


def train(task: TaskSpec | str, model_cfg: ModelConfig | None, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Train from a fresh initialisation; deterministic per ``cfg.seed``.

    With ``out_dir`` the final checkpoint (``model.ckpt``) and ``metrics.csv``
    are written there; on a non-finite loss ``crash.ckpt`` is saved before
    :class:`DivergenceError` is raised.
    """
    if isinstance(task, str):
        task = build_task(task)
    if model_cfg is None:
        model_cfg = model_config_for(task, cfg)
    elif model_cfg.dropout_p != cfg.dropout_p:
        model_cfg = replace(model_cfg, dropout_p=cfg.dropout_p)
    model = init_model(model_cfg, cfg.seed)
    params = model.params
    state = OptState.zeros(params)
    sampler = SamplerConfig(
        task=task,
        min_len=cfg.min_train_len,
        max_len=cfg.max_train_len,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        balanced=True,
        augment=cfg.augment,
    )
    val = eval_set(task, cfg.val_len, cfg.val_batch, seed=cfg.seed) if cfg.steps else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    metrics: list[dict] = []
    window: list[float] = []
    for step in range(cfg.steps):
        batch = sample_batch(sampler, ordinal=step)
        with ad.Tape() as tape:
            total, _, _ = batch_loss(model, batch, cfg, train=True, rng=derive(cfg.seed, "dropout", step))
        loss = float(total.data)
        if not math.isfinite(loss):
            _crash(model, out, task, step)
            raise DivergenceError(f"loss became {loss} at step {step}")
        grads = ad.backward(tape, total, model.parameters())
        named = {name: grads[p] for name, p in params.items()}
        try:
            info = optimizer_step(state, params, named, step, cfg)
        except DivergenceError as exc:
            _crash(model, out, task, step)
            raise DivergenceError(f"{exc} at step {step}") from None
        window.append(loss)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            val_loss, val_acc = evaluate(model, val, cfg)
            row = {
                "step": step + 1,
                "train_loss": float(np.mean(window)),
                "val_loss": val_loss,
                "val_acc": val_acc,
                "lr": info["lr"],
                "grad_norm": info["grad_norm"],
            }
            metrics.append(row)
            window = []
            log.info("step %d train_loss %.4f val_acc %.4f", step + 1, row["train_loss"], val_acc)
    result = TrainResult(model, metrics)
    if out is not None:
        save(model, out / "model.ckpt", extra={"task": task.name, "steps": cfg.steps})
        (out / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
        (out / "config.json").write_text(
            json.dumps({**asdict(cfg), "model": asdict(model.config)}, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    return result


def _crash(model: Model, out: Path | None, task: TaskSpec, step: int) -> None:
    if out is not None:
        save(model, out / "crash.ckpt", extra={"task": task.name, "steps": step})
