"""Desk-scale runs: train one config per seed and report OOD accuracy on lengths 21-100.

usage: python3 scripts/run_desk.py configs/desk_parity.json parity --seeds 0 1 2 --out runs/
"""

import argparse
import json
import time
from pathlib import Path

from ldru.automata import build_task
from ldru.evaluation import ood_accuracy
from ldru.training import load_config, model_config_for, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config", type=Path)
    p.add_argument("task")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--from", dest="len_from", type=int, default=21)
    p.add_argument("--to", dest="len_to", type=int, default=100)
    p.add_argument("--per-len", type=int, default=512)
    p.add_argument("--out", type=Path, default=Path("runs"))
    args = p.parse_args()
    task = build_task(args.task)
    for seed in args.seeds:
        cfg, overrides = load_config(args.config)
        cfg.seed = seed
        out = args.out / f"{args.config.stem}_seed{seed}"
        t0 = time.perf_counter()
        model = train(task, model_config_for(task, cfg, **overrides), cfg, out_dir=out).model
        report = ood_accuracy(model, task, args.len_from, args.len_to, args.per_len, seed)
        (out / "ood.csv").write_text(report.to_csv())
        print(json.dumps({"config": args.config.name, "seed": seed, "ood": round(report.mean, 6), "seconds": round(time.perf_counter() - t0, 1)}))


if __name__ == "__main__":
    main()
