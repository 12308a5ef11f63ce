"""Command line: gen, train, sample, eval, report.

Every flag can also come from a ``--config`` file of ``key = value`` lines
(keys are flag names; command-line flags win). ``CPM_SEED`` overrides the
master seed. Exit status is 0 on success and a fixed code per error class
otherwise (see ``cpm.errors``; I/O failures exit with 3, usage errors 2).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

from . import __version__
from .denoiser import DenoiserConfig, DenoiserModel
from .diffusion import SamplerOptions, TrainConfig, make_schedule, sample_batch, schedule_of
from .errors import ArgumentError, CPMError, NoModelForRelation
from .evaluation import (
    ExperimentConfig,
    aggregate,
    plot_data,
    read_trials,
    rows_to_csv,
    run_experiment,
    split_dataset,
    write_trials,
)
from .geometry import TrajectorySpec
from .seeding import master_seed, substream
from .synthtask import Demonstration, load_category_table
from .tasks import RELATIONS, TASKS, get_task
from .workflow import build_dataset, fit

log = logging.getLogger("cpm")

IO_EXIT = 3
PROTOCOL_ALIASES = {"instance": "instance-split", "instance-split": "instance-split", "holdout": "category-holdout", "category-holdout": "category-holdout"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(f"{self.prog}: {message}")


# Config files


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Values stay strings."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ArgumentError(f"{path}:{n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


def _coerce(parser: argparse.ArgumentParser, values: dict) -> dict:
    actions = {a.dest: a for a in parser._actions}
    out = {}
    for key, raw in values.items():
        act = actions.get(key)
        if act is None:
            raise ArgumentError(f"config key {key!r} is not a flag of '{parser.prog}'")
        if isinstance(act, argparse._StoreTrueAction):
            out[key] = raw.lower() in ("1", "true", "yes", "on")
        elif act.nargs in ("+", "*"):
            out[key] = [act.type(v) if act.type else v for v in raw.split()]
        else:
            out[key] = act.type(raw) if act.type else raw
    return out


# Dataset I/O


def write_dataset(path: Path, demos) -> None:
    with open(path, "w") as fh:
        for d in demos:
            fh.write(json.dumps(d.to_record(), sort_keys=True) + "\n")


def read_dataset(path) -> list[Demonstration]:
    with open(path) as fh:
        return [Demonstration.from_record(json.loads(line)) for line in fh if line.strip()]


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# Commands


def cmd_gen(args) -> int:
    if args.n <= 0:
        raise ArgumentError(f"--n must be positive, got {args.n}")
    seed = master_seed(args.seed)
    table = load_category_table(args.categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    demos = build_dataset(args.task, args.n, seed, table)
    write_dataset(out / "dataset.jsonl", demos)
    manifest = {
        "task": args.task,
        "count": len(demos),
        "master_seed": seed,
        "record_seed_rule": "blake2b-8('{master}/demo/{task}/{index}') little-endian",
        "per_function_category": dict(sorted(Counter(d.function.category for d in demos).items())),
        "per_anchor_category": dict(sorted(Counter(d.anchor.category for d in demos).items())),
        "category_table": table.source,
        "run_config": _run_config(args, seed),
        "version": __version__,
    }
    _dump(out / "manifest.json", manifest)
    print(f"wrote {len(demos)} {args.task} demonstrations to {out / 'dataset.jsonl'}")
    return 0


def _run_config(args, seed: int) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)}
    cfg["seed"] = seed
    return cfg


def _model_cfg(args) -> DenoiserConfig:
    return DenoiserConfig(layers=args.layers, heads=args.heads, hidden_dim=args.hidden_dim)


def cmd_train(args) -> int:
    task = get_task(args.task)
    if args.kind == "primitive":
        if args.relation not in RELATIONS:
            raise ArgumentError(f"unknown relation {args.relation!r}; valid: {', '.join(RELATIONS)}")
        if args.relation not in task.relations:
            raise ArgumentError(f"relation {args.relation!r} is not part of {args.task}; valid: {', '.join(task.relations)}")
    seed = master_seed(args.seed)
    demos = [d for d in read_dataset(args.data) if d.task.name == args.task]
    protocol = PROTOCOL_ALIASES[args.protocol]
    train, _ = split_dataset(demos, protocol, args.holdout, seed)
    if args.limit:
        train = train[: args.limit]
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, loss=args.loss, noise_draws=args.noise_draws)
    set_name = f"primitive-{args.relation}" if args.kind == "primitive" else args.kind
    out = Path(args.out) / set_name
    out.mkdir(parents=True, exist_ok=True)
    losses = []
    started = time.perf_counter()

    def on_log(step, loss):
        losses.append((step, loss))
        log.info("step %d loss %.5f", step, loss)

    run_config = _run_config(args, seed)
    run_config["protocol"] = protocol
    models = fit(args.kind, args.task, train, seed, args.relation, cfg, _model_cfg(args), make_schedule(args.steps, args.beta_start, args.beta_end, args.length_scale), None, on_log, run_config)
    for rel, model in models.items():
        model.save(out / f"{rel}.ckpt")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in losses:
            w.writerow([step, f"{loss:.8f}"])
    _dump(out / "timing.json", {"seconds": time.perf_counter() - started})
    print(f"trained {set_name} on {len(train)} records -> {out}")
    return 0


def load_model_sets(root, task_name: str) -> dict[str, dict]:
    """Model sets found under ``root`` as written by ``train``."""
    root = Path(root)
    task = get_task(task_name)
    prim = {}
    for rel in task.relations:
        p = root / f"primitive-{rel}" / f"{rel}.ckpt"
        if p.exists():
            prim[rel] = DenoiserModel.load(p)
    sets = {f"individual:{rel}": {rel: m} for rel, m in prim.items()}
    if len(prim) == len(task.relations):
        sets["cpm"] = dict(prim)
    mono = root / "monolithic" / "whole.ckpt"
    if mono.exists():
        sets["monolithic"] = {"whole": DenoiserModel.load(mono)}
    joint = {rel: root / "train-time" / f"{rel}.ckpt" for rel in task.relations}
    if all(p.exists() for p in joint.values()):
        sets["train-time"] = {rel: DenoiserModel.load(p) for rel, p in joint.items()}
    return sets


def cmd_sample(args) -> int:
    seed = master_seed(args.seed)
    task = get_task(args.task)
    sets = load_model_sets(args.models, args.task)
    if args.model_set not in sets:
        raise NoModelForRelation(f"no '{args.model_set}' models under {args.models}; found {', '.join(sets) or 'none'}")
    from .evaluation import model_task, score_trial

    demos = [d for d in read_dataset(args.data) if d.task.name == args.task]
    picked = demos[args.start : args.start + args.count]
    if not picked:
        raise ArgumentError("no records selected")
    rngs = [substream(seed, "sample", args.start + i) for i in range(len(picked))]
    opts = SamplerOptions(literal=args.literal, average=args.average)
    started = time.perf_counter()
    xi = sample_batch(sets[args.model_set], model_task(args.model_set, task), [(d.anchor, d.function) for d in picked], rngs, schedule_of(sets[args.model_set]), args.n, opts)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for i, d in enumerate(picked):
            for k in range(args.n):
                poses = TrajectorySpec.from_twists(xi[i, k])
                res = score_trial(d, poses)
                rec = {"task": args.task, "seed": seed, "trial": args.start + i, "sample": k, "demo": d.id, "model_set": args.model_set, "poses": poses.to_list(), "scores": res.scores, "overall": res.overall, "success": res.success}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    # wall time lives beside the trials so the trial file stays reproducible
    _dump(out.with_suffix(".timing.json"), {"seconds": time.perf_counter() - started, "trials": len(picked) * args.n})
    print(f"wrote {len(picked) * args.n} samples to {out}")
    return 0


def cmd_eval(args) -> int:
    seed = master_seed(args.seed)
    protocol = PROTOCOL_ALIASES[args.protocol]
    demos = [d for d in read_dataset(args.data) if d.task.name == args.task]
    sets = load_model_sets(args.models, args.task)
    wanted = args.model_sets or list(sets)
    missing = [s for s in wanted if s not in sets]
    if missing:
        raise NoModelForRelation(f"no models for set(s) {', '.join(missing)} under {args.models}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, trials, timing = [], [], {}
    for name in wanted:
        cfg = ExperimentConfig(
            task=args.task, protocol=protocol, holdout_category=args.holdout, n_trials=args.trials,
            samples_per_trial=args.samples, seeds=args.seeds, model_set=name, master_seed=seed,
            average=args.average, literal=args.literal,
        )
        t = {}
        rep = run_experiment(cfg, demos, sets[name], timing=t)
        timing[name] = t["seconds"]
        rows.extend(rep.rows)
        trials.extend(rep.trials)
    (out / "report.csv").write_text(rows_to_csv(rows))
    (out / "plot.csv").write_text(plot_data(rows))
    write_trials(out / "trials.jsonl", trials)
    _dump(out / "report.json", {"rows": rows, "run_config": _run_config(args, seed), "version": __version__})
    _dump(out / "timing.json", timing)
    for r in rows:
        print(f"{r['model_set']:<24} {r['category']:<14} mean {r['mean']:6.2f} +- {r['std']:5.2f}  success {r['success_rate']:.3f}")
    return 0


def cmd_report(args) -> int:
    trials = read_trials(args.trials)
    if not trials:
        raise ArgumentError(f"{args.trials} holds no trial records")
    relations = get_task(trials[0]["task"]).relations
    rows = aggregate(trials, relations)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# Parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpm", description="Composable part-based manipulation: data, training, sampling, evaluation.")
    p.add_argument("--version", action="version", version=f"cpm {__version__}")
    p.add_argument("--config", help="key = value file mirroring the flags")
    p.add_argument("--jobs", type=int, default=1, help="worker cap (commands run single-process)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a demonstration dataset")
    g.add_argument("--task", choices=sorted(TASKS), default="pour")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--categories", help="category table file (default: built-in)")
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen)

    def common_model(sp):
        sp.add_argument("--task", choices=sorted(TASKS), default="pour")
        sp.add_argument("--data", default="data/dataset.jsonl")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--protocol", choices=sorted(PROTOCOL_ALIASES), default="instance-split")
        sp.add_argument("--holdout", help="function-object family held out (category-holdout)")

    t = sub.add_parser("train", help="train one model set")
    common_model(t)
    t.add_argument("--kind", choices=("primitive", "monolithic", "train-time"), default="primitive")
    t.add_argument("--relation", help=f"primitive relation ({', '.join(RELATIONS)})")
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--noise-draws", type=int, default=4, help="noise levels drawn per record per step (encodings are reused)")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--loss", choices=("huber", "mse"), default="huber")
    t.add_argument("--limit", type=int, default=0, help="use at most this many training records")
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--hidden-dim", type=int, default=128)
    t.add_argument("--steps", type=int, default=200, help="diffusion steps T")
    t.add_argument("--beta-start", type=float, default=1e-4)
    t.add_argument("--beta-end", type=float, default=0.02)
    t.add_argument("--length-scale", type=float, default=10.0, help="translation unit of the noised twists, per metre")
    t.add_argument("--out", default="models")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw poses for dataset records")
    common_model(s)
    s.add_argument("--models", default="models")
    s.add_argument("--model-set", default="cpm")
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--n", type=int, default=5, help="samples per record")
    s.add_argument("--average", action="store_true", help="average instead of sum the composed noise")
    s.add_argument("--literal", action="store_true", help="1/alpha_t reverse coefficient")
    s.add_argument("--out", default="samples.jsonl")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="run the evaluation protocol for every model set")
    common_model(e)
    e.add_argument("--models", default="models")
    e.add_argument("--model-sets", nargs="*", help="subset of model sets (default: all found)")
    e.add_argument("--trials", type=int, default=100)
    e.add_argument("--samples", type=int, default=5)
    e.add_argument("--seeds", type=int, default=3)
    e.add_argument("--average", action="store_true")
    e.add_argument("--literal", action="store_true")
    e.add_argument("--out", default="report")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="re-aggregate a report from trial records")
    r.add_argument("--trials", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        globals_ = {k: values.pop(k) for k in list(values) if k in ("jobs", "verbose")}
        subparser.set_defaults(**_coerce(subparser, values))
        parser.set_defaults(**_coerce(parser, globals_))
        args = parser.parse_args(argv)
    if args.command == "train" and args.kind == "primitive" and not args.relation:
        raise ArgumentError(f"train --kind primitive needs --relation ({', '.join(RELATIONS)})")
    if getattr(args, "protocol", None) in ("holdout", "category-holdout") and not args.holdout:
        raise ArgumentError("category holdout needs --holdout FAMILY")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except CPMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
