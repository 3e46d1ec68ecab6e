"""Command line entry point: train, eval, sweep, sample-episodes, diag-displacement."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .episodes import EpisodeDistribution, episode_to_dict, sample_episode, synth_task_family
from .report import block
from .taml import displacement_diagnostic
from .trainer import (
    CheckpointError,
    ConfigError,
    MetricsWriter,
    TrainingAborted,
    TrainConfig,
    _strict,
    ablation_sweep,
    evaluate,
    load_checkpoint,
    load_config,
    meta_train,
    parse_axes,
    resolve_pool,
)

log = logging.getLogger("baltaml")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="baltaml", description="Balanced meta-learning on imbalanced episodes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs/train")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a pool")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--pool", required=True, help="train|val|test|ood or a .csv / idx file")
    e.add_argument("--labels", help="idx label file for an idx image pool")
    e.add_argument("--episodes", type=int, default=600)
    e.add_argument("--mode", choices=("mc", "naive"), default="mc")
    e.add_argument("--samples", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--displacement", type=int, default=0, help="episodes to run the displacement diagnostic on")
    e.add_argument("--out", help="directory for report.json and figures")
    e.add_argument("--no-figures", action="store_true", help="skip the PNG figures written next to report.json")

    s = sub.add_parser("sweep", help="ablation grid over variants and evaluation settings")
    s.add_argument("--config", required=True)
    s.add_argument("--axes", required=True, help='e.g. "variant=full|z|metasgd;mc_test=1|10"')
    s.add_argument("--seeds", default=None, help="comma separated, defaults to the config seed")
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--out", default="runs/sweep")
    s.add_argument("--no-figures", action="store_true")

    g = sub.add_parser("sample-episodes", help="write sampled episodes as JSON")
    g.add_argument("--dist", required=True, help="JSON episode distribution")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train")

    d = sub.add_parser("diag-displacement", help="mean-init vs sampled-init adaptation distances")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--pool", required=True)
    d.add_argument("--samples", type=int, default=10)
    d.add_argument("--episodes", type=int, default=20)
    d.add_argument("--seed", type=int, default=0)
    return p


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    writer = MetricsWriter(out / "metrics.csv", out.name)
    try:
        res = meta_train(
            config, out_dir=out, resume=resume,
            metrics=lambda it, split, m, v: writer.write(config.seed, "train", it, split, m, v),
        )
    finally:
        writer.close()
    print(block("train", {
        "seed": config.seed,
        "iterations": res.last.iteration,
        "best_val_acc": res.best.best_val_acc,
        "skipped_episodes": res.last.skipped,
        "stopped_early": res.stopped_early,
        "checkpoint": str(out / "best.json"),
    }))
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    pool = resolve_pool(ck.config, args.pool, args.labels)
    rep = evaluate(ck, pool, args.episodes, args.mode, args.samples, args.seed, n_displacement=args.displacement)
    print(block("eval", {"pool": args.pool, "mode": args.mode, "samples": args.samples, **rep.scalars()}))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=1), encoding="utf-8")
        if not args.no_figures:
            from .report import eval_figures

            for p in eval_figures(rep, out):
                print(f"figure={p}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    axes = parse_axes(args.axes)
    seeds = None if args.seeds is None else [int(s) for s in args.seeds.split(",")]
    rows = ablation_sweep(config, axes, args.out, seeds=seeds, eval_episodes=args.episodes, run_id=Path(args.out).name)
    for r in rows:
        print(block(f"cell {r['cell']} seed {r['seed']}", r))
    if not args.no_figures:
        from .report import sweep_figure

        for metric in ("mean_accuracy", "ood_mean_accuracy"):
            p = sweep_figure(rows, args.out, metric)
            if p:
                print(f"figure={p}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_sample(args) -> int:
    raw = json.loads(Path(args.dist).read_text(encoding="utf-8"))
    family_params = raw.pop("family_params", {})
    dist = _strict(EpisodeDistribution, raw, "distribution")
    pools = synth_task_family(dist.source, family_params, np.random.default_rng([args.seed, 101]))
    if args.split not in pools:
        raise ConfigError(f"unknown split {args.split!r}")
    rng = np.random.default_rng([args.seed, 808])
    eps = [episode_to_dict(sample_episode(dist, pools[args.split], rng)) for _ in range(args.count)]
    Path(args.out).write_text(json.dumps({"format_version": 1, "episodes": eps}), encoding="utf-8")
    print(block("sample-episodes", {"count": args.count, "out": args.out}))
    return 0


def cmd_diag(args) -> int:
    ck = load_checkpoint(args.ckpt)
    if not ck.config.variant.use_z or ck.config.variant.method != "taml":
        raise ConfigError("displacement diagnostic needs a TAML checkpoint with the modulator enabled")
    pool = resolve_pool(ck.config, args.pool)
    params, psi = ck.model()
    rng = np.random.default_rng([args.seed, 909])
    rows = []
    for i in range(args.episodes):
        ep = sample_episode(ck.config.dist, pool, rng)
        rows.append(displacement_diagnostic(ep, params, psi, ck.config.variant, args.samples,
                                            ck.config.variant.inner_steps_test, rng))
    d = np.asarray(rows)
    print(block("diag-displacement", {
        "episodes": args.episodes,
        "samples": args.samples,
        "d_mean_first": float(d[:, 0].mean()),
        "d_mean_outside": float(d[:, 1].mean()),
        "outside_minus_first": float((d[:, 1] - d[:, 0]).mean()),
    }))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "sample-episodes": cmd_sample,
    "diag-displacement": cmd_diag,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, TrainingAborted, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
