"""``ldru`` command line: tasks, sampling, training, evaluation, monoids, census, embeddings, timing."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigurationError, LdruError

HELP_WIDTH = 88
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_lengths(text: str) -> list[int]:
    """``"4..2048"`` is every power of two in range; ``"32,33,64"`` is taken as given."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            out, n = [], 1
            while n <= hi:
                if n >= lo:
                    out.append(n)
                n *= 2
            return out
        return _int_list(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad length list {text!r}") from None


def parse_buckets(text: str) -> list[tuple[int, int, int]]:
    try:
        out = []
        for part in text.split(","):
            lo, hi, step = (int(x) for x in part.split(":"))
            out.append((lo, hi, step))
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"buckets must look like lo:hi:step[,lo:hi:step], got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldru", description="Log-depth reduction models on regular-language tasks.", formatter_class=_formatter)
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads (default 1)")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, formatter_class=_formatter)

    add("tasks", "list the tasks with alphabet and output sizes")

    s = add("sample", "emit sampled sequences as line-delimited JSON")
    s.add_argument("--task", required=True, help="task name")
    s.add_argument("--min-len", type=int, default=1, help="shortest length (default 1)")
    s.add_argument("--max-len", type=int, default=40, help="longest length (default 40)")
    s.add_argument("--count", type=int, default=16, help="number of rows (default 16)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--dump", type=Path, help="write rows here instead of stdout")
    s.add_argument("--no-augment", action="store_true", help="disable Dyck sampling noise")

    s = add("train", "train a model and write checkpoint plus metrics")
    s.add_argument("--task", required=True, help="task name")
    s.add_argument("--config", type=Path, help="JSON run config (defaults: per-task settings)")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--out", type=Path, required=True, help="output directory")

    s = add("eval", "per-length accuracy on sampled evaluation sets")
    s.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    s.add_argument("--task", required=True, help="task name")
    s.add_argument("--from", dest="len_from", type=int, required=True, help="first length")
    s.add_argument("--to", dest="len_to", type=int, required=True, help="last length")
    s.add_argument("--per-len", type=int, default=512, help="sequences per length (default 512)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--out", type=Path, help="also write the CSV here")

    s = add("monoid", "extract a task's transition monoid")
    s.add_argument("--task", required=True, help="task name (any dN is accepted)")
    s.add_argument("--even-only", action="store_true", help="generate from symbol pairs")
    s.add_argument("--out", type=Path, help="write the monoid as JSON")

    s = add("census", "count monoid compositions seen while reducing positive Dyck strings")
    s.add_argument("--task", required=True, help="a dN task")
    s.add_argument("--buckets", type=parse_buckets, required=True, help='length buckets, e.g. "10:40:2,480:500:2"')
    s.add_argument("--target", type=int, default=1_000_000, help="compositions per bucket (default 1000000)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    s.add_argument("--out", type=Path, required=True, help="output directory")

    s = add("embed", "export final embeddings of all short sequences")
    s.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    s.add_argument("--task", required=True, help="task name")
    s.add_argument("--max-len", type=int, required=True, help="longest sequence length")
    s.add_argument("--even-only", action="store_true", help="label with the even-only monoid")
    s.add_argument("--sample", type=int, help="sequences per length instead of enumerating")
    s.add_argument("--seed", type=int, default=0, help="random seed for --sample (default 0)")
    s.add_argument("--out", type=Path, required=True, help="output CSV")

    s = add("cluster", "k-means sweep over exported embeddings")
    s.add_argument("--embeddings", type=Path, required=True, help="CSV from embed")
    s.add_argument("--k", type=_int_list, required=True, help="comma-separated cluster counts")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--out", type=Path, help="also write the CSV here")

    s = add("bench", "time forward and forward+backward passes")
    s.add_argument("--kind", default="ldru", help="ldru, rnn or both comma-separated (default ldru)")
    s.add_argument("--lengths", type=parse_lengths, default=parse_lengths("4..2048"), help='"4..2048" (powers of two) or a list (default 4..2048)')
    s.add_argument("--batch", type=int, default=32, help="batch size (default 32)")
    s.add_argument("--reps", type=int, default=128, help="timed passes per length (default 128)")
    s.add_argument("--warmup", type=int, default=2, help="untimed passes per length (default 2)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--out", type=Path, help="also write the CSV here")
    return p


def _write(path: Path | None, text: str) -> None:
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _machine_task(name: str):
    """Registered task, or a Dyck machine of any depth for names like ``d1``."""
    from .automata import TaskSpec, build_dyck, build_task

    if name.startswith("d") and name[1:].isdigit() and int(name[1:]) >= 1:
        n = int(name[1:])
        return TaskSpec(name, build_dyck(n), "dyck", ("0", "1"), {"n": n})
    return build_task(name)


def cmd_tasks(args, out):
    from .automata import TASK_NAMES, build_task

    out.write(f"{'task':<12}{'alphabet':>9}{'outputs':>9}{'states':>8}\n")
    for name in TASK_NAMES:
        t = build_task(name)
        out.write(f"{name:<12}{t.alphabet_size:>9}{t.output_size:>9}{t.machine.num_states:>8}\n")


def cmd_sample(args, out):
    from .sampler import SamplerConfig, sample_batch

    cfg = SamplerConfig(args.task, args.min_len, args.max_len, max(args.count, 0), args.seed, balanced=True, augment=not args.no_augment)
    text = sample_batch(cfg).to_jsonl() if args.count > 0 else ""
    if args.dump is not None:
        _write(args.dump, text)
    else:
        out.write(text)


def cmd_train(args, out):
    from .automata import build_task
    from .training import config_for_task, load_config, model_config_for, train

    task = build_task(args.task)
    if args.config is not None:
        cfg, model_overrides = load_config(args.config)
    else:
        cfg, model_overrides = config_for_task(task.name), {}
    if args.seed is not None:
        cfg.seed = args.seed
    model_cfg = model_config_for(task, cfg, **model_overrides)
    result = train(task, model_cfg, cfg, out_dir=args.out)
    _write(args.out / "run.json", json.dumps({"task": task.name, "threads": args.threads}, sort_keys=True) + "\n")
    last = result.metrics[-1] if result.metrics else None
    if last:
        out.write(f"step {last['step']} train_loss {last['train_loss']:.6f} val_acc {last['val_acc']:.4f}\n")
    out.write(f"checkpoint {args.out / 'model.ckpt'}\n")


def cmd_eval(args, out):
    from .evaluation import ood_accuracy
    from .model import load

    model = load(args.checkpoint)
    report = ood_accuracy(model, args.task, args.len_from, args.len_to, args.per_len, args.seed)
    text = report.to_csv()
    _write(args.out, text)
    out.write(text)


def cmd_monoid(args, out):
    from .monoid import extract_monoid, monoid_size_formula

    task = _machine_task(args.task)
    mon = extract_monoid(task.machine, "even_length_pairs" if args.even_only else "all_symbols")
    out.write(f"{len(mon)} elements\n")
    if task.sampler_kind == "dyck" and not args.even_only:
        n = task.params["n"]
        expected = monoid_size_formula(n)
        status = "ok" if expected == len(mon) else "MISMATCH"
        out.write(f"size formula 1+(n+1)(n+2)(2n+3)/6 at n={n}: {expected} ({status})\n")
    if args.out is not None:
        _write(args.out, json.dumps(mon.to_dict(), sort_keys=True) + "\n")


def cmd_census(args, out):
    from .monoid import composition_census, extract_monoid
    from .sampler import DyckPositiveSampler

    task = _machine_task(args.task)
    if task.sampler_kind != "dyck":
        raise ConfigurationError(f"census needs a Dyck task, got {args.task!r}")
    mon = extract_monoid(task.machine, "even_length_pairs")
    results = composition_census(mon, DyckPositiveSampler(task.params["n"]), args.buckets, args.target, args.seed, args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    lines = ["lo,hi,step,sequences,compositions,nonzero_cells"]
    for r in results:
        lo, hi, step = r.bucket
        _write(args.out / f"census_{lo}_{hi}_{step}.json", r.to_json() + "\n")
        lines.append(f"{lo},{hi},{step},{r.sequences},{r.total},{r.nonzero_cells}")
    summary = "\n".join(lines) + "\n"
    _write(args.out / "summary.csv", summary)
    out.write(summary)


def cmd_embed(args, out):
    from .evaluation import export_embeddings
    from .model import load
    from .monoid import extract_monoid

    model = load(args.checkpoint)
    if model.config.kind != "ldru":
        raise ConfigurationError("embeddings need an ldru checkpoint")
    task = _machine_task(args.task)
    mon = extract_monoid(task.machine, "even_length_pairs" if args.even_only else "all_symbols")
    table = export_embeddings(model, task, args.max_len, mon, sample=args.sample, seed=args.seed)
    _write(args.out, table.to_csv())
    out.write(f"{len(table)} rows, {len(set(table.classes.tolist()))} classes\n")


def cmd_cluster(args, out):
    from .evaluation import EmbeddingTable, cluster_sweep

    table = EmbeddingTable.from_csv(args.embeddings.read_text(encoding="utf-8"))
    rows = cluster_sweep(table, args.k, args.seed)
    text = "k,ari,silhouette\n" + "".join(f"{r['k']},{r['ari']:.6f},{r['silhouette']:.6f}\n" for r in rows)
    _write(args.out, text)
    out.write(text)


def cmd_bench(args, out):
    from .evaluation import bench, bench_csv

    kinds = [k.strip() for k in args.kind.split(",") if k.strip()]
    text = bench_csv(bench(kinds, args.lengths, args.batch, args.reps, args.warmup, args.seed))
    _write(args.out, text)
    out.write(f"# threads={args.threads}\n" + text)


COMMANDS = {
    "tasks": cmd_tasks,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "monoid": cmd_monoid,
    "census": cmd_census,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "bench": cmd_bench,
}


def _fail(code: str, detail: str, status: int) -> int:
    detail = " ".join(str(detail).split())
    sys.stderr.write(f"code={code} detail={detail}\n")
    return status


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    level = os.environ.get("LDRU_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    if args.threads < 1:
        return _fail("usage", "--threads must be >= 1", 2)
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, out)
    except LdruError as exc:
        return _fail(exc.code, exc, exc.exit_status)
    except OSError as exc:
        return _fail("io", f"{exc.strerror or exc}: {exc.filename}", 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
