"""Acceptance suite: the eleven end-to-end criteria at their stated tolerances.

Each test prints one PASS/FAIL line; the full list is repeated in the
terminal summary. Criteria 5-8 and 10 need trained full-size models. They
are fitted once through ``workflow.fit`` and cached under ``CPM_CACHE``
(default ``.cpm_cache`` in the repository root), so the first run takes
hours on one CPU and later runs take minutes.
"""

from __future__ import annotations

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from cpm import evaluation as E
from cpm import workflow as W
from cpm.denoiser import DenoiserConfig, DenoiserModel, coordinate_error, gradient_pairs, norm_error, reduced_config
from cpm.diffusion import OracleDenoiser, SamplerOptions, TrainConfig, make_schedule, q_sample, sample, sample_batch, sample_single
from cpm.geometry import Twist, exp_map, log_map, to_world
from cpm.seeding import substream
from cpm.tasks import POUR

MASTER = 0
N_DEMOS = 625  # 500 train / 125 test under the 80/20 instance split
HOLDOUT = "mug-like"
CACHE = Path(os.environ.get("CPM_CACHE", Path(__file__).resolve().parents[1] / ".cpm_cache"))

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)


# Shared data and models


@pytest.fixture(scope="module")
def dataset():
    return W.build_dataset("pour", N_DEMOS, MASTER)


@pytest.fixture(scope="module")
def instance_split(dataset):
    return E.split_dataset(dataset, "instance-split", master_seed=MASTER)


@pytest.fixture(scope="module")
def holdout_split(dataset):
    return E.split_dataset(dataset, "category-holdout", HOLDOUT)


_fitted: dict = {}


def fitted(kind, train, relation=None, timing=None):
    key = (kind, relation, tuple(d.id for d in train))
    if key not in _fitted:
        info = {}
        _fitted[key] = (W.fit(kind, "pour", train, MASTER, relation, TrainConfig(epochs=300, batch_size=16), DenoiserConfig(), make_schedule(), cache_dir=CACHE, timing=info), info)
    models, info = _fitted[key]
    if timing is not None:
        timing.update(info)
    return models


def primitives(train):
    return {r: fitted("primitive", train, r)[r] for r in POUR.relations}


# 1-4, 9, 11: properties


def test_c1_lie_group_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(MASTER)
    axis = rng.normal(size=(10000, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    omega = axis * rng.uniform(0.0, math.pi - 1e-3, size=(10000, 1))
    v = rng.uniform(-1.0, 1.0, size=(10000, 3))
    worst = 0.0
    for w, u in zip(omega, v):
        back = log_map(exp_map(Twist(w, u))).vector()
        worst = max(worst, float(np.abs(back - np.concatenate([w, u])).max()))
    world = 0.0
    for i in range(0, 10000, 3):
        a, b, c = (exp_map(Twist(omega[(i + k) % 10000], v[(i + k) % 10000])) for k in range(3))
        oracle = a.matrix() @ b.matrix() @ np.linalg.inv(c.matrix())
        world = max(world, float(np.abs(to_world(a, b, c).matrix() - oracle).max()))
    seconds = time.perf_counter() - start
    ok = worst < 1e-9 and world < 1e-12 and seconds < 5.0
    record(1, ok, f"log(exp) {worst:.1e} < 1e-9, to_world {world:.1e} < 1e-12, {seconds:.1f} s < 5 s")
    assert ok


def test_c2_gradient_suite():
    # pass/fail uses the per-coordinate ratio of finite_diff_check; the
    # array-norm ratio is reported alongside (see README)
    start = time.perf_counter()
    coord = norm = 0.0
    for draw in range(3):
        rng = substream(MASTER, "gradcheck", draw)
        model = DenoiserModel.init(reduced_config(init_std=0.5), "align", rng)
        for ad, fd in gradient_pairs(model, rng).values():
            coord = max(coord, coordinate_error(ad, fd))
            norm = max(norm, norm_error(ad, fd))
    seconds = time.perf_counter() - start
    ok = coord < 1e-6 and seconds < 120.0
    record(2, ok, f"max per-coordinate relative error {coord:.1e} < 1e-6 (array-norm relative {norm:.1e}), {seconds:.0f} s < 120 s")
    assert ok


def test_c3_schedule_suite():
    sched = make_schedule()
    prod = 1.0
    for i in range(200):
        prod *= 1.0 - (1e-4 + i * (0.02 - 1e-4) / 199)
    ab = sched.alpha_bar[-1]
    rng = substream(MASTER, "moments")
    xi0 = rng.uniform(-0.5, 0.5, size=(2, 6))
    draws = q_sample(np.broadcast_to(xi0, (10000, 2, 6)), 200, rng.standard_normal((10000, 2, 6)), sched)
    # 5% of the target moment, with the target mean floored at one
    # standard error so near-zero means are not judged on noise alone
    mean_target = np.sqrt(ab) * xi0
    mean_ok = bool(np.all(np.abs(draws.mean(axis=0) - mean_target) <= np.maximum(0.05 * np.abs(mean_target), 0.05 * np.sqrt(1 - ab))))
    var_ok = bool(np.all(np.abs(draws.var(axis=0) / (1.0 - ab) - 1.0) <= 0.05))
    # how far the t=200 state is from the N(0, 1) prior the sampler starts from
    gap = float(np.abs(draws.var(axis=0) - 1.0).max())
    checks = {
        "beta_1": sched.beta[0] == 1e-4,
        "beta_200": sched.beta[-1] == 0.02,
        "product": abs(ab - prod) < 1e-12,
        "abar<0.01": ab < 0.01,
        "moments": mean_ok and var_ok,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(3, ok, f"alpha_bar_200 = {ab:.5f} (< 0.01 needed), variance gap to N(0,1) {gap:.2f}; failed: {', '.join(failed) or 'none'}")
    assert ok


def test_c4_oracle_chain(dataset):
    start = time.perf_counter()
    demos = dataset[:100]
    sched = make_schedule()
    oracle = OracleDenoiser([d.gt_poses for d in demos], sched, "align")
    rngs = [substream(MASTER, "oracle-chain", i) for i in range(len(demos))]
    xi = sample_batch({"align": oracle}, POUR.only("align"), [(d.anchor, d.function) for d in demos], rngs, sched, 1, SamplerOptions(stochastic=False))
    gt = np.stack([d.gt_poses.twists() for d in demos])
    err = float(np.abs(xi[:, 0] - gt).max())
    seconds = time.perf_counter() - start
    ok = err < 0.05 and seconds < 60.0
    record(4, ok, f"max |xi - gt| {err:.1e} < 0.05 over 100 demos, {seconds:.1f} s < 60 s")
    assert ok


def test_c9_reduction_identity(dataset):
    d = dataset[0]
    sched = make_schedule()
    spec = POUR.correspondence("align")
    model = DenoiserModel.init(DenoiserConfig(), "align", substream(MASTER, "reduction"))
    opts = SamplerOptions(n_points=64)
    composed = sample({"align": model}, POUR.only("align"), d.anchor, d.function, substream(MASTER, "r"), sched, 4, opts)
    plain = sample_single(model, spec, d.anchor, d.function, substream(MASTER, "r"), sched, 4, opts)
    same = all(np.array_equal(a.twists(), b.twists()) for a, b in zip(composed, plain))
    record(9, same, "composed and plain samplers bit-identical on a single correspondence")
    assert same


# 5-8, 10: trained models


@pytest.mark.slow
def test_c5_single_primitive(instance_split):
    train, test = instance_split
    timing = {}
    align = fitted("primitive", train, "align", timing)
    cfg = E.ExperimentConfig(n_trials=100, samples_per_trial=5, seeds=1, model_set="individual:align", master_seed=MASTER)
    rep = E.run_experiment(cfg, None, align, test=test)
    score = rep.row()["align_mean"]
    seconds = timing.get("seconds", float("nan"))
    ok = score >= 0.9 and seconds <= 1800.0
    record(5, ok, f"align score {score:.3f} >= 0.9 ({rep.row()['n_scored']} samples), training {seconds / 60:.1f} min <= 30 min over {timing.get('steps')} steps")
    assert ok


# Criteria 6-8 and 10 share the category-holdout protocol: composition is
# compared on objects of an unseen family, where generalization shows.


@pytest.fixture(scope="module")
def holdout_reports(holdout_split):
    train, test = holdout_split
    assert len(test) >= 50
    prims = primitives(train)
    sets = {name: prims for name in ("cpm",) + tuple(f"individual:{r}" for r in POUR.relations)}
    sets["monolithic"] = fitted("monolithic", train)
    sets["train-time"] = fitted("train-time", train)
    out = {}
    for name, models in sets.items():
        cfg = E.ExperimentConfig(
            protocol="category-holdout", holdout_category=HOLDOUT, n_trials=len(test), samples_per_trial=1, seeds=3, model_set=name, master_seed=MASTER
        )
        out[name] = E.run_experiment(cfg, None, models, test=test).row()
    return out


@pytest.mark.slow
def test_c6_composition_beats_primitives(holdout_reports):
    names = ("cpm",) + tuple(f"individual:{r}" for r in POUR.relations)
    means = {k: holdout_reports[k]["mean"] for k in names}
    best = max(v for k, v in means.items() if k != "cpm")
    ok = means["cpm"] >= best + 5.0
    parts = ", ".join(f"{k} {v:.1f}" for k, v in means.items())
    record(6, ok, f"{parts}; cpm - best individual = {means['cpm'] - best:+.1f} (+5 needed)")
    assert ok


@pytest.mark.slow
def test_c7_category_generalization(holdout_reports):
    cpm, mono = holdout_reports["cpm"], holdout_reports["monolithic"]
    ok = cpm["mean"] >= mono["mean"] + 5.0 and cpm["n_trials"] >= 50
    record(7, ok, f"{HOLDOUT} held out, {cpm['n_trials']} test demos: cpm {cpm['mean']:.1f} vs monolithic {mono['mean']:.1f} (+5 needed)")
    assert ok


@pytest.mark.slow
def test_c8_inference_vs_train_time(holdout_reports):
    inf, joint = holdout_reports["cpm"], holdout_reports["train-time"]
    ok = inf["mean"] >= joint["mean"]
    record(8, ok, f"inference-time {inf['mean']:.1f} >= train-time {joint['mean']:.1f}")
    assert ok


def pour_azimuth(xi: np.ndarray) -> float:
    end = exp_map(Twist.from_vector(xi[1]))
    up = end.rotation @ np.array([0.0, 0.0, 1.0])
    return math.atan2(up[1], up[0])


@pytest.mark.slow
def test_c10_multimodality(holdout_split):
    train, test = holdout_split
    models = primitives(train)
    d = test[0]
    xi = sample_batch(models, POUR, [(d.anchor, d.function)], [substream(MASTER, "multimodal")], make_schedule(), 200)[0]
    az = np.array([pour_azimuth(x) for x in xi])
    r = np.abs(np.exp(1j * az).mean())
    circ_std = math.degrees(math.sqrt(-2.0 * math.log(max(r, 1e-300))))
    # modes: occupied 30-degree bins separated by at least one empty bin
    hist, _ = np.histogram(az, bins=12, range=(-math.pi, math.pi))
    occupied = hist >= 5
    modes = int(np.sum(occupied & ~np.roll(occupied, 1))) if not occupied.all() else 1
    ok = circ_std > 30.0 or modes >= 2
    record(10, ok, f"azimuth circular std {circ_std:.0f} deg (> 30 needed) or {modes} separated modes (>= 2 needed)")
    assert ok


def test_c11_report_rebuilds_from_config(dataset):
    test = dataset[:6]
    sched = make_schedule()
    models = {r: OracleDenoiser([d.gt_poses for d in test], sched, r) for r in POUR.relations}
    first = E.run_experiment(E.ExperimentConfig(n_trials=6, samples_per_trial=2, seeds=2, master_seed=MASTER + 3), dataset, models, sched, test=test)
    again = E.run_experiment(E.ExperimentConfig(**first.config), dataset, models, sched, test=test)
    ok = first.to_json() == again.to_json()
    record(11, ok, f"report re-run from its embedded config is byte-identical ({len(first.to_json())} bytes)")
    assert ok
