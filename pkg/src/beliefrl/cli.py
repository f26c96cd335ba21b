"""``beliefrl`` command line: train, eval, verify, ablate, plot."""
from __future__ import annotations

import argparse
import configparser
import itertools
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import checkpoint as ckpt_io
from .config import config_from_text, make_env, parse_config, parse_overrides
from .errors import BeliefRLError
from .metrics import MetricsWriter, final_return, read_metrics
from .rl import Agent, Trainer, evaluate

logger = logging.getLogger("beliefrl")


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args, overrides: Sequence[str]) -> int:
    if args.resume:
        ck = ckpt_io.load(args.resume)
        trainer = ckpt_io.to_trainer(ck)
        cfg = trainer.config
        if overrides:
            logger.warning("overrides are ignored when resuming; the checkpoint's config is used")
    else:
        cfg = parse_config(args.config, overrides)
        trainer = Trainer(cfg)
    log = cfg.log
    metrics_path = args.metrics or log.metrics
    ckpt_path = args.checkpoint or log.checkpoint
    total = args.frames or cfg.train.total_frames
    append = bool(args.resume) and os.path.exists(metrics_path)
    Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)

    with open(metrics_path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = MetricsWriter(fh, write_header=not append)
        pending = False

        def on_record(rec, tr: Trainer):
            nonlocal pending
            writer.write(rec)
            if log.checkpoint_every and rec.segment % log.checkpoint_every == 0:
                pending = True
            # only save where the carried latent holds no graph
            if pending and tr.at_cut:
                ckpt_io.save(ckpt_io.from_trainer(tr), ckpt_path)
                pending = False
            if rec.segment % max(1, args.log_every) == 0:
                logger.info("frames=%d return=%.3f elbo=%.3f grad=%.3f", rec.frames, rec.mean_return,
                            rec.loss_elbo, rec.grad_norm)

        trainer.run(total, on_record)
    if trainer.at_cut:
        ckpt_io.save(ckpt_io.from_trainer(trainer), ckpt_path)
    else:
        logger.warning("run ended mid-window (n_g); last checkpoint is from the previous cut")
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def cmd_eval(args, overrides: Sequence[str]) -> int:
    ck = ckpt_io.load(args.checkpoint)
    cfg = config_from_text(ck.config_text, parse_overrides(overrides), environ={})
    env = make_env(cfg.env)
    agent = Agent(cfg, env)
    mean, std, _ = evaluate(agent, ck.params(), env, args.episodes, args.seed, greedy=args.greedy)
    print(f"return {mean:.4f} +/- {std:.4f} over {args.episodes} episodes")
    return 0


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------


def cmd_verify(args, overrides: Sequence[str]) -> int:
    from .verify import SUITES, run_all

    names = args.only or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        print(f"unknown suite(s): {', '.join(unknown)}; available: {', '.join(SUITES)}", file=sys.stderr)
        return 2
    results = run_all(names)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------


def read_grid(path: str) -> Tuple[Optional[str], Dict[str, str], Dict[str, List[str]]]:
    """Parse a grid file: ``[base]`` (optional ``config`` plus fixed keys) and ``[grid]``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path, encoding="utf-8"):
        raise BeliefRLError(f"cannot read grid file {path}")
    if not parser.has_section("grid"):
        raise BeliefRLError(f"{path}: missing [grid] section")
    base = dict(parser.items("base")) if parser.has_section("base") else {}
    config = base.pop("config", None)
    if config is not None and not os.path.isabs(config):
        config = str(Path(path).parent / config)
    axes = {k: [v.strip() for v in raw.split(",") if v.strip()] for k, raw in parser.items("grid")}
    return config, base, axes


def grid_cells(axes: Dict[str, List[str]]) -> List[Dict[str, str]]:
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def cell_name(cell: Dict[str, str]) -> str:
    return "__".join(f"{k.split('.')[-1]}={v}" for k, v in cell.items())


def cmd_ablate(args, overrides: Sequence[str]) -> int:
    config, base, axes = read_grid(args.grid)
    out = Path(args.out or Path(args.grid).with_suffix(""))
    out.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(axes)
    # validate every cell up front so a typo fails before hours of compute
    for cell in cells:
        parse_config(config, {**base, **parse_overrides(overrides), **cell})
    jobs = []
    for cell in cells:
        name = cell_name(cell)
        csv_path = out / f"{name}.csv"
        if args.skip_existing and csv_path.exists():
            continue
        cmd = [sys.executable, "-m", "beliefrl", "train", "--metrics", str(csv_path),
               "--checkpoint", str(out / f"{name}.bin")]
        if config:
            cmd += ["--config", config]
        cmd += [f"--{k}={v}" for k, v in {**base, **cell}.items()] + list(overrides)
        jobs.append((name, cmd))
    status = 0
    running: List[Tuple[str, subprocess.Popen]] = []
    queue = list(jobs)
    while queue or running:
        while queue and len(running) < max(1, args.jobs):
            name, cmd = queue.pop(0)
            logger.info("start %s", name)
            running.append((name, subprocess.Popen(cmd)))
        name, proc = running.pop(0)
        if proc.wait() != 0:
            logger.error("cell %s failed with exit code %d", name, proc.returncode)
            status = 1
    with open(out / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(list(axes) + ["final_return"]) + "\n")
        for cell in cells:
            path = out / f"{cell_name(cell)}.csv"
            value = final_return(read_metrics(str(path))) if path.exists() else float("nan")
            fh.write(",".join(list(cell.values()) + [repr(value)]) + "\n")
    return status


# --------------------------------------------------------------------------
# plot
# --------------------------------------------------------------------------


def plot_curves(paths: Sequence[str], out: str, labels: Optional[Sequence[str]] = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(labels) if labels else [Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise BeliefRLError("need one label per input file")
    fig, ax = plt.subplots(figsize=(6, 4))
    for path, label in zip(paths, labels):
        recs = read_metrics(path)
        ax.plot([r.frames for r in recs], [r.mean_return for r in recs], label=label)
    ax.set_xlabel("frames")
    ax.set_ylabel("return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, format="svg")
    plt.close(fig)


def cmd_plot(args, overrides: Sequence[str]) -> int:
    plot_curves(args.inputs, args.out, args.labels)
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beliefrl", description="Particle-belief RL: training and diagnostics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent; extra --section.key=value args override the config")
    t.add_argument("--config", help="run config file (defaults used if omitted)")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--metrics", help="metrics CSV path (overrides log.metrics)")
    t.add_argument("--checkpoint", help="checkpoint path (overrides log.checkpoint)")
    t.add_argument("--frames", type=int, help="stop after this many frames (overrides train.total_frames)")
    t.add_argument("--log-every", type=int, default=100, help="progress line every N segments")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint's policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--greedy", action="store_true", help="act with the distribution mode")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the built-in oracle suites")
    v.add_argument("--only", nargs="+", help="suite names to run")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("ablate", help="run every cell of a grid file")
    a.add_argument("--grid", required=True)
    a.add_argument("--out", help="output directory (default: grid path without suffix)")
    a.add_argument("--jobs", type=int, default=1, help="cells run concurrently")
    a.add_argument("--skip-existing", action="store_true")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="return-vs-frames SVG from metrics CSVs")
    pl.add_argument("--in", dest="inputs", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--labels", nargs="+")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = [x for x in extra if x.startswith("--") and "=" in x]
    stray = [x for x in extra if x not in overrides]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    if overrides and args.command in ("verify", "plot"):
        parser.error(f"{args.command} takes no config overrides")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args, overrides)
    except (BeliefRLError, OSError) as exc:
        print(f"beliefrl {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
