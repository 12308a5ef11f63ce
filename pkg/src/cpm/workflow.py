"""Dataset building and model fitting with provenance and an on-disk cache.

Shared by the command line and the acceptance suite. A fitted model's
checkpoint header records the relation, network and schedule settings,
the master seed and its substream labels, the training record ids and
their fingerprint; the cache key hashes exactly those inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .denoiser import DenoiserConfig, DenoiserModel
from .diffusion import NoiseSchedule, TrainConfig, make_schedule, prepare, train_joint, train_primitive, usable
from .errors import PartMissing
from .evaluation import fingerprint
from .seeding import substream
from .synthtask import CategoryTable, Demonstration, gen_dataset_record
from .tasks import WHOLE, get_task

log = logging.getLogger(__name__)

KINDS = ("primitive", "monolithic", "train-time")


def build_dataset(task: str, n: int, master: int, table: CategoryTable | None = None) -> list[Demonstration]:
    return [gen_dataset_record(task, master, i, table) for i in range(n)]


def _cache_key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]


def fit(
    kind: str,
    task_name: str,
    train: Sequence[Demonstration],
    master: int,
    relation: str | None = None,
    train_cfg: TrainConfig | None = None,
    model_cfg: DenoiserConfig | None = None,
    sched: NoiseSchedule | None = None,
    cache_dir: str | os.PathLike | None = None,
    on_log: Callable | None = None,
    run_config: dict | None = None,
    timing: dict | None = None,
) -> dict[str, DenoiserModel]:
    """Train (or load from cache) the models of one model set.

    kind: ``primitive`` (one relation), ``monolithic`` (whole objects) or
    ``train-time`` (all relations of the task, one joint loss). Returns
    ``{relation: model}``. Training wall time goes to ``timing`` and, with
    a cache, to a ``{key}.timing.json`` sidecar (never into checkpoints).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; valid: {', '.join(KINDS)}")
    task = get_task(task_name)
    train_cfg = train_cfg or TrainConfig()
    model_cfg = model_cfg or DenoiserConfig()
    sched = sched or make_schedule()
    if kind == "primitive":
        specs = [task.correspondence(relation)]
    elif kind == "monolithic":
        specs = [WHOLE]
    else:
        specs = list(task.correspondences)

    preps = [prepare(d) for d in train]
    if kind == "primitive":
        # records lacking the correspondence's parts cannot teach this primitive
        skipped = [p.id for p in preps if not usable(p, specs[0])]
        preps = [p for p in preps if usable(p, specs[0])]
        if skipped:
            log.warning("%d records lack parts for %s (e.g. %s); training without them", len(skipped), specs[0], skipped[0])
    if not preps:
        raise PartMissing(f"no training record carries the parts of {', '.join(map(str, specs))}")
    ids = [p.id for p in preps]
    label = relation if kind == "primitive" else kind
    meta = {
        "kind": kind,
        "task": task_name,
        "schedule": sched.to_dict(),
        "train": asdict(train_cfg),
        "master_seed": int(master),
        "substreams": {"init": f"init/{label}", "train": f"train/{label}"},
        "trained_ids": sorted(ids),
        "fingerprint": fingerprint(ids),
        "version": __version__,
        "run_config": run_config or {},
    }
    key = _cache_key({k: meta[k] for k in ("kind", "task", "schedule", "train", "master_seed", "fingerprint", "version")} | {"model": model_cfg.to_dict(), "label": label})
    paths = None
    if cache_dir is not None:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)
        paths = {s.relation: cache / f"{key}-{s.relation}.ckpt" for s in specs}
        if all(p.exists() for p in paths.values()):
            log.info("loading cached %s %s models (%s)", task_name, label, key)
            if timing is not None:
                side = cache / f"{key}.timing.json"
                timing.update(json.loads(side.read_text()) if side.exists() else {})
                timing["cached"] = True
            return {rel: DenoiserModel.load(p) for rel, p in paths.items()}

    init_rng = substream(master, f"init/{label}")
    models = {s.relation: DenoiserModel.init(model_cfg, s.relation, init_rng) for s in specs}
    train_rng = substream(master, f"train/{label}")
    if kind == "train-time":
        logbook = train_joint(models, preps, task, sched, train_rng, train_cfg, on_log)
    else:
        logbook = train_primitive(models[specs[0].relation], preps, specs[0], sched, train_rng, train_cfg, on_log)
    meta["loss_log"] = logbook.logged
    for rel, model in models.items():
        model.meta = dict(meta, relation=rel)
        if paths is not None:
            model.save(paths[rel])
    info = {"seconds": logbook.seconds, "steps": len(logbook.steps)}
    if paths is not None:
        (Path(cache_dir) / f"{key}.timing.json").write_text(json.dumps(info) + "\n")
    if timing is not None:
        timing.update(info, cached=False)
    log.info("trained %s %s in %.0f s", task_name, label, logbook.seconds)
    return models
