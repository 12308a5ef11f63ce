"""Experiment protocols, trial scoring and seed aggregation.

A run draws ``samples_per_trial`` samples for every test demonstration
under each of ``seeds`` sampling seeds, scores each sample with the task
oracles and reduces per seed, then across seeds. Every scored sample is
kept as a trial record so a report can be rebuilt from the raw records.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .diffusion import NoiseSchedule, SamplerOptions, sample_batch, schedule_of
from .errors import DataLeak, InvalidSpec
from .geometry import TrajectorySpec
from .seeding import substream
from .synthtask import Demonstration, OracleResult, evaluate
from .tasks import RELATIONS, WHOLE, TaskDefinition, get_task

PROTOCOLS = ("instance-split", "category-holdout")
MODEL_SETS = ("cpm", "monolithic", "train-time") + tuple(f"individual:{r}" for r in RELATIONS)


@dataclass
class ExperimentConfig:
    task: str = "pour"
    protocol: str = "instance-split"
    holdout_category: str | None = None
    n_trials: int = 100
    samples_per_trial: int = 5
    seeds: int = 3
    model_set: str = "cpm"
    master_seed: int = 0
    average: bool = False
    literal: bool = False
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise InvalidSpec(f"unknown protocol {self.protocol!r}; valid: {', '.join(PROTOCOLS)}")
        if self.protocol == "category-holdout" and not self.holdout_category:
            raise InvalidSpec("category-holdout needs a holdout category")
        if self.model_set not in MODEL_SETS:
            raise InvalidSpec(f"unknown model set {self.model_set!r}; valid: {', '.join(MODEL_SETS)}")
        get_task(self.task)

    def cell(self) -> str:
        return self.holdout_category if self.protocol == "category-holdout" else "seen"

    def to_dict(self) -> dict:
        return asdict(self)


# Splits and provenance


def split_dataset(demos: Sequence[Demonstration], protocol: str, holdout: str | None = None, master_seed: int = 0, train_fraction: float = 0.8):
    """(train, test) lists. Instance split is a seeded 80/20 permutation;
    category holdout moves every demo whose function object is ``holdout``
    to the test side."""
    demos = list(demos)
    if protocol == "instance-split":
        order = substream(master_seed, "split").permutation(len(demos))
        cut = int(round(train_fraction * len(demos)))
        return [demos[i] for i in sorted(order[:cut])], [demos[i] for i in sorted(order[cut:])]
    if protocol == "category-holdout":
        train = [d for d in demos if d.function.category != holdout]
        test = [d for d in demos if d.function.category == holdout]
        return train, test
    raise InvalidSpec(f"unknown protocol {protocol!r}")


def fingerprint(ids: Sequence[str]) -> str:
    h = hashlib.sha256()
    for i in sorted(ids):
        h.update(i.encode())
        h.update(b"\n")
    return h.hexdigest()


def check_leak(models: dict, test: Sequence[Demonstration]) -> None:
    """Refuse models whose training lineage includes any test record."""
    test_ids = {d.id for d in test}
    for name, model in models.items():
        trained = set(getattr(model, "meta", {}).get("trained_ids", ()))
        overlap = trained & test_ids
        if overlap:
            raise DataLeak(
                f"model {name!r} was trained on {len(overlap)} held-out records (e.g. {sorted(overlap)[0]})"
            )


def model_task(model_set: str, task: TaskDefinition) -> TaskDefinition:
    """The correspondence set a model set samples with."""
    if model_set in ("cpm", "train-time"):
        return task
    if model_set == "monolithic":
        return TaskDefinition(task.name, (WHOLE,))
    if model_set.startswith("individual:"):
        return task.only(model_set.split(":", 1)[1])
    raise InvalidSpec(f"unknown model set {model_set!r}")


# Scoring


def score_trial(demo: Demonstration, predicted: TrajectorySpec, cfg=None) -> OracleResult:
    return evaluate(demo.task, demo.anchor, demo.function, predicted, cfg)


@dataclass
class Report:
    config: dict
    rows: list
    trials: list = field(default_factory=list)

    def row(self) -> dict:
        return self.rows[0]

    @property
    def mean(self) -> float:
        return self.rows[0]["mean"]

    @property
    def std(self) -> float:
        return self.rows[0]["std"]

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "rows": self.rows}, sort_keys=True, indent=1)


ROW_FIELDS = (
    "task", "protocol", "category", "model_set", "n_trials", "n_scored", "seeds",
    "mean", "std", "success_rate", "success_std", "penetration_rate",
)


def aggregate(trials: Sequence[dict], relations: Sequence[str]) -> list[dict]:
    """Rows (one per task/protocol/category/model set) from raw trial records.

    Per seed: mean overall score and success rate over all scored samples;
    reported mean/std are over seeds (std with one degree of freedom).
    Per-constraint means skip samples where that constraint was excluded;
    the exclusion rate is reported beside each.
    """
    cells: dict[tuple, list] = {}
    for rec in trials:
        key = (rec["task"], rec["protocol"], rec["category"], rec["model_set"])
        cells.setdefault(key, []).append(rec)
    rows = []
    for key, recs in cells.items():
        seeds = sorted({r["seed"] for r in recs})
        by_seed = [[r for r in recs if r["seed"] == s] for s in seeds]
        means = np.array([np.mean([r["overall"] for r in rs]) for rs in by_seed])
        succ = np.array([np.mean([r["success"] for r in rs]) for rs in by_seed])
        row = dict(zip(("task", "protocol", "category", "model_set"), key))
        row.update(
            n_trials=len({r["demo"] for r in recs}),
            n_scored=len(recs),
            seeds=len(seeds),
            mean=float(means.mean()),
            std=float(means.std(ddof=1)) if len(seeds) > 1 else 0.0,
            success_rate=float(succ.mean()),
            success_std=float(succ.std(ddof=1)) if len(seeds) > 1 else 0.0,
            penetration_rate=float(np.mean([r["penetrated"] for r in recs])),
            seed_means=[float(m) for m in means],
        )
        for rel in relations:
            vals = [r["scores"][rel] for r in recs if rel in r["scores"]]
            row[f"{rel}_mean"] = float(np.mean(vals)) if vals else float("nan")
            row[f"{rel}_excluded"] = float(1.0 - len(vals) / len(recs))
        rows.append(row)
    return rows


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Sequence[Demonstration],
    models: dict,
    sched: NoiseSchedule | None = None,
    test: Sequence[Demonstration] | None = None,
    timing: dict | None = None,
) -> Report:
    """Sample and score the protocol's test demonstrations.

    ``test`` overrides the split (the caller then owns the protocol).
    Wall time goes into ``timing`` when given, never into the report, so
    reruns stay byte-identical.
    """
    sched = sched or schedule_of(models)
    task = get_task(cfg.task)
    if test is None:
        _, test = split_dataset(dataset, cfg.protocol, cfg.holdout_category, cfg.master_seed, cfg.train_fraction)
    test = list(test)[: cfg.n_trials]
    if not test:
        raise InvalidSpec("protocol leaves no test demonstrations")
    check_leak(models, test)
    sampler_task = model_task(cfg.model_set, task)
    # a model set whose parts are all absent from a trial cannot sample it;
    # such trials are dropped and counted
    kept = [d for d in test if any(_has_parts(d, s) for s in sampler_task.correspondences)]
    skipped = len(test) - len(kept)
    test = kept
    if not test:
        raise InvalidSpec(f"no test demonstration carries the parts of {cfg.model_set}")
    opts = SamplerOptions(literal=cfg.literal, average=cfg.average)
    start = time.perf_counter()
    trials = []
    for seed in range(cfg.seeds):
        rngs = [substream(cfg.master_seed, f"sample/{seed}", i) for i in range(len(test))]
        xi = sample_batch(models, sampler_task, [(d.anchor, d.function) for d in test], rngs, sched, cfg.samples_per_trial, opts)
        for i, demo in enumerate(test):
            for k in range(cfg.samples_per_trial):
                poses = TrajectorySpec.from_twists(xi[i, k])
                res = score_trial(demo, poses)
                trials.append(
                    {
                        "task": cfg.task,
                        "protocol": cfg.protocol,
                        "category": cfg.cell(),
                        "model_set": cfg.model_set,
                        "seed": seed,
                        "trial": i,
                        "sample": k,
                        "demo": demo.id,
                        "poses": poses.to_list(),
                        **res.to_record(),
                    }
                )
    if timing is not None:
        timing["seconds"] = time.perf_counter() - start
    rows = aggregate(trials, task.relations)
    for r in rows:
        r["skipped_trials"] = skipped
    return Report(cfg.to_dict(), rows, trials)


def _has_parts(demo: Demonstration, spec) -> bool:
    if spec == WHOLE:
        return True
    return demo.anchor.has_part(spec.anchor_part) and demo.function.has_part(spec.function_part)


def ablation_suite(
    base: ExperimentConfig,
    dataset: Sequence[Demonstration],
    model_sets: dict[str, dict],
    sched: NoiseSchedule | None = None,
    test: Sequence[Demonstration] | None = None,
) -> list[Report]:
    """run_experiment once per model set (CPM, train-time, individuals, monolithic)."""
    reports = []
    for name, models in model_sets.items():
        cfg = ExperimentConfig(**{**base.to_dict(), "model_set": name})
        reports.append(run_experiment(cfg, dataset, models, sched, test))
    return reports


# Output


def rows_to_csv(rows: Sequence[dict]) -> str:
    extra = sorted({k for r in rows for k in r} - set(ROW_FIELDS) - {"seed_means"})
    fields = list(ROW_FIELDS) + extra
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def plot_data(rows: Sequence[dict]) -> str:
    """Score against category, mean and seed std, as plain CSV."""
    buf = io.StringIO()
    buf.write("category,model_set,mean,std\n")
    for r in sorted(rows, key=lambda r: (r["category"], r["model_set"])):
        buf.write(f"{r['category']},{r['model_set']},{r['mean']:.6f},{r['std']:.6f}\n")
    return buf.getvalue()


def write_trials(path, trials: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in trials:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trials(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
