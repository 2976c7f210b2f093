"""Command-line entry point: train, eval, sweep, analyze, count-params.

Set ``BRIDGEKIT_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    count_parameters,
    cross_attention_map,
    head_kl_diversity,
    write_csv,
    write_grid_csv,
    write_pgm,
)
from .autograd import no_grad
from .checkpoint import load_trainer, save_trainer
from .config import PRESET_GRIDS, ConfigError, RunConfig, parse_config, parse_grid, render_config
from .model import VisionLanguageModel
from .training import EVAL_CHUNK, Trainer, format_record

THREADS_ENV = "BRIDGEKIT_THREADS"
CKPT_NAME = "last.ckpt"


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8")) if path else parse_config("")


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out or (cfg.run.output_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# -- commands -----------------------------------------------------------------------

def run_training(cfg: RunConfig, out: Path, resume=None, stop_at=None, final_eval: bool = True) -> Trainer:
    """Train into ``out``: metrics.jsonl, config.ini, last.ckpt and (when finished) eval.json."""
    out.mkdir(parents=True, exist_ok=True)
    trainer = load_trainer(resume, cfg) if resume else Trainer(cfg)
    (out / "config.ini").write_text(render_config(cfg))
    mode = "a" if resume else "w"
    with open(out / "metrics.jsonl", mode) as f:
        trainer.train(until=stop_at, sink=lambda rec: f.write(format_record(rec) + "\n"))
    save_trainer(out / CKPT_NAME, trainer)
    if final_eval and trainer.step == cfg.train.steps:
        _write_json(out / "eval.json", {"step": trainer.step, "train": trainer.evaluate("train")})
    return trainer


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    trainer = run_training(cfg, out, args.resume, args.stop_at)
    print(f"trained to step {trainer.step}; checkpoint {out / CKPT_NAME}")
    return 0


def cmd_eval(args) -> int:
    trainer = load_trainer(args.ckpt)
    metrics = trainer.evaluate(args.split)
    record = {"step": trainer.step, "split": args.split, **metrics}
    print(format_record(record))
    if args.out:
        _write_json(_out_dir(args) / f"eval_{args.split}.json", record)
    return 0


def _sweep_sets(grid: str) -> list[dict[str, str]]:
    if grid in PRESET_GRIDS:
        return PRESET_GRIDS[grid]
    path = Path(grid)
    if not path.exists():
        raise ConfigError(f"grid {grid!r} is neither a file nor a preset ({', '.join(PRESET_GRIDS)})")
    return parse_grid(path.read_text(encoding="utf-8"))


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    sets = _sweep_sets(args.grid)
    configs = [base.with_overrides(o) for o in sets]  # validate everything before any compute
    out = _out_dir(args, base)
    rows, metric_keys = [], []
    for i, (overrides, cfg) in enumerate(zip(sets, configs)):
        trainer = Trainer(cfg)
        step0 = trainer.evaluate("train")
        trainer = run_training(cfg, out / f"run_{i:02d}", final_eval=False) if cfg.train.steps else trainer
        final = trainer.evaluate("train")
        counts = count_parameters(trainer.model)
        m = cfg.model
        rows.append({
            "run": i, "overrides": "; ".join(f"{k}={v}" for k, v in overrides.items()),
            "bridge": m.bridge, "fusion_mode": m.fusion_mode,
            "n_internal": trainer.model.cross_modal.cfg.n_internal, "n_external": trainer.model.cross_modal.cfg.n_external,
            "cross_depth": m.cross_depth, "bridge_params": counts["bridge"], "cross_modal_params": counts["cross_modal"],
            "total_params": counts["total"], "steps": trainer.step, "step0_loss": step0["loss"],
            **{f"final_{k}": v for k, v in final.items()},
        })
        metric_keys += [f"final_{k}" for k in final if f"final_{k}" not in metric_keys]
        print(f"run {i}: {rows[-1]['overrides']} step0_loss={step0['loss']!r} final_loss={final['loss']!r}")
    header = ["run", "overrides", "bridge", "fusion_mode", "n_internal", "n_external", "cross_depth",
              "bridge_params", "cross_modal_params", "total_params", "steps", "step0_loss"] + metric_keys
    write_csv(out / "sweep.csv", header, [[r.get(k, "") for k in header] for r in rows])
    return 0


def cmd_analyze(args) -> int:
    trainer = load_trainer(args.ckpt)
    split = trainer.data.split(args.split)
    model = trainer.model
    if args.report == "kl":
        records = []
        for lo in range(0, len(split), EVAL_CHUNK):
            idx = np.arange(lo, min(lo + EVAL_CHUNK, len(split)))
            batch = trainer._collate(split.images[idx], [split.captions[i] for i in idx])
            model.eval()
            with no_grad():
                model(batch, record=records)
        report = head_kl_diversity(records)
        out = _out_dir(args, trainer.cfg)
        write_csv(out / "kl_pairs.csv", ["layer", "part", "kind", "head_i", "head_j", "mean_kl"], report.rows())
        write_csv(out / "kl_summary.csv", ["layer", "part", "kind", "mean_kl", "num_pairs", "num_examples"],
                  report.summary_rows())
        for row in report.summary_rows():
            print(",".join(str(v) for v in row))
        return 0
    if not args.token:
        raise ConfigError("--report attmap needs --token")
    if not 0 <= args.pair < len(split):
        raise ConfigError(f"--pair must lie in [0, {len(split)})")
    pair = split.pairs[args.pair]
    grid = cross_attention_map(model, split.images[args.pair], pair.caption, args.token, trainer.data.vocab)
    out = _out_dir(args, trainer.cfg)
    write_grid_csv(out / "attmap.csv", grid)
    write_pgm(out / "attmap.pgm", grid)
    print(f"caption: {pair.caption}")
    for row in grid:
        print(" ".join(f"{v:.3f}" for v in row))
    return 0


def cmd_count_params(args) -> int:
    cfg = load_config(args.config)
    classes = {"vqa_toy": len(cfg.data.palette) + 1, "ve_toy": 3}.get(cfg.run.task, 0)
    model = VisionLanguageModel.meta(cfg.model_config(classes))
    counts = count_parameters(model)
    for group, n in counts.items():
        print(f"{group},{n}")
    if args.out:
        write_csv(_out_dir(args) / "params.csv", ["group", "count"], counts.items())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridgekit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint to continue from (config hash must match)")
    t.add_argument("--stop-at", type=int, help="stop after this step (schedule still spans train.steps)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("train", "held_out"), default="train")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="train one run per override set and tabulate")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help=f"grid file or preset: {', '.join(PRESET_GRIDS)}")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("analyze", help="attention reports from a checkpoint")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--report", choices=("kl", "attmap"), required=True)
    a.add_argument("--token")
    a.add_argument("--pair", type=int, default=0)
    a.add_argument("--split", choices=("train", "held_out"), default="train")
    a.add_argument("--out")
    a.set_defaults(fn=cmd_analyze)

    c = sub.add_parser("count-params", help="parameter counts per group, without allocating weights")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_count_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.fn(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
