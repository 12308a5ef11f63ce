"""DDPM on SE(3) tangent coordinates, training loops and composed sampling.

State: the two T_AF waypoints as (2, 6) log coordinates in the object
frame, translation part measured in units of 1/length_scale metres. Each primitive model sees the state re-expressed in its own part
frames; its noise estimate is carried back to the object frame and the
estimates of all correspondences are summed inside every reverse step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import difftensor as dt
from .cloud import PointCloud, extract_part, resample, whole_object
from .denoiser import DenoiserModel
from .errors import AllPartsMissing, InvalidRange, InvalidSpec, NoModelForRelation, PartMissing
from .geometry import (
    Pose,
    TrajectorySpec,
    transport_noise_from_part,
    transport_noise_rows,
    twists_to_part,
    twists_to_part_rows,
)
from .tasks import WHOLE, CorrespondenceSpec, TaskDefinition

log = logging.getLogger(__name__)

LENGTH_SCALE = 10.0


# Schedule


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step arrays, stored 0-based: ``beta[t - 1]`` is beta_t."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float
    length_scale: float = 1.0

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "length_scale": self.length_scale}

    def scaled(self, xi: np.ndarray) -> np.ndarray:
        """Metric twists -> diffusion coordinates (v multiplied by length_scale)."""
        out = np.array(xi, dtype=np.float64)
        out[..., 3:] *= self.length_scale
        return out

    def metric(self, xi: np.ndarray) -> np.ndarray:
        out = np.array(xi, dtype=np.float64)
        out[..., 3:] /= self.length_scale
        return out

    def abar(self, t) -> np.ndarray:
        """alpha_bar_t with alpha_bar_0 = 1."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bar[np.maximum(t, 1) - 1], 1.0)


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02, length_scale: float = LENGTH_SCALE) -> NoiseSchedule:
    """Linear beta schedule.

    ``length_scale`` sets the unit of the translation coordinates being
    noised: 10 means decimetres, which brings the pose translations of
    table-top objects (a few cm to a few dm) to roughly the unit scale of
    the noise, like the rotation coordinates.
    """
    if not length_scale > 0.0:
        raise InvalidRange(f"length scale must be positive, got {length_scale}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise InvalidRange(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if int(T) < 2:
        raise InvalidRange(f"need at least 2 diffusion steps, got {T}")
    beta = np.linspace(beta_start, beta_end, int(T))
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(int(T), beta, alpha, alpha_bar, np.sqrt(beta), float(beta_start), float(beta_end), float(length_scale))


def schedule_of(models: dict) -> NoiseSchedule:
    """The schedule recorded in the models' checkpoint headers.

    Models without a recorded schedule (fresh or analytic ones) accept the
    default; recorded schedules must all agree.
    """
    seen = {json.dumps(m.meta["schedule"], sort_keys=True) for m in models.values() if "schedule" in getattr(m, "meta", {})}
    if len(seen) > 1:
        raise InvalidSpec(f"models were trained under different noise schedules: {sorted(seen)}")
    if not seen:
        return make_schedule()
    return make_schedule(**json.loads(seen.pop()))


def q_sample(xi0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) xi0 + sqrt(1 - abar_t) eps, per sample when ``t`` is an array."""
    ab = np.asarray(sched.abar(t), dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(xi0) - ab.ndim))
    return np.sqrt(ab) * xi0 + np.sqrt(1.0 - ab) * eps


def reverse_step(
    noisy: np.ndarray,
    noise_sum: np.ndarray,
    t: int,
    rng: np.random.Generator | None,
    sched: NoiseSchedule,
    literal: bool = False,
    stochastic: bool = True,
) -> np.ndarray:
    """One ancestral step t -> t-1.

    ``literal`` divides by alpha_t instead of sqrt(alpha_t). Fresh noise is
    skipped at t = 1 and when ``stochastic`` is off.
    """
    a = sched.alpha[t - 1]
    coef = (1.0 - a) / np.sqrt(1.0 - sched.alpha_bar[t - 1])
    scale = a if literal else np.sqrt(a)
    out = (noisy - coef * noise_sum) / scale
    if t > 1 and stochastic:
        out = out + sched.sigma[t - 1] * rng.standard_normal(noisy.shape)
    return out


# Training data


@dataclass(eq=False)
class PreparedDemo:
    """Per-record arrays used by the training loops."""

    id: str
    anchor_points: dict
    function_points: dict
    anchor_center: np.ndarray
    function_center: np.ndarray
    xi0: np.ndarray  # (2, 6) object-frame log coordinates of T_AF


def prepare(demo) -> PreparedDemo:
    anchor, function = demo.anchor, demo.function
    a_parts = {name: anchor.part_points(name) for name in anchor.vocabulary if anchor.has_part(name)}
    f_parts = {name: function.part_points(name) for name in function.vocabulary if function.has_part(name)}
    a_parts["object"] = anchor.points
    f_parts["object"] = function.points
    return PreparedDemo(
        demo.id, a_parts, f_parts, anchor.points.mean(axis=0), function.points.mean(axis=0), demo.gt_poses.twists()
    )


def usable(prep: PreparedDemo, spec: CorrespondenceSpec) -> bool:
    return spec.anchor_part in prep.anchor_points and spec.function_part in prep.function_points


def _part_pair(prep: PreparedDemo, spec: CorrespondenceSpec, rng: np.random.Generator, n: int):
    """Resampled, centered part clouds and their frames relative to the object frames."""
    pa = resample(prep.anchor_points[spec.anchor_part], n, rng)
    pf = resample(prep.function_points[spec.function_part], n, rng)
    ca, cf = pa.mean(axis=0), pf.mean(axis=0)
    return pa - ca, pf - cf, Pose.from_translation(ca - prep.anchor_center), Pose.from_translation(cf - prep.function_center)


def make_batch(preps: Sequence[PreparedDemo], spec: CorrespondenceSpec, rng: np.random.Generator, n_points: int):
    """Part clouds (B, n, 3) x2, part-frame targets (B, 2, 6), object-frame targets, frames."""
    a_pts, f_pts, xi_part, frames = [], [], [], []
    for prep in preps:
        pa, pf, fa, ff = _part_pair(prep, spec, rng, n_points)
        a_pts.append(pa)
        f_pts.append(pf)
        xi_part.append(twists_to_part(prep.xi0, fa, ff))
        frames.append((fa, ff))
    return np.stack(a_pts), np.stack(f_pts), np.stack(xi_part), frames


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    clip: float = 1.0
    loss: str = "huber"
    log_every: int = 100
    # (t, eps) draws per record per step; part encodings do not depend on
    # t, so extra draws reuse them and mostly cost trunk time
    noise_draws: int = 4


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    logged: list = field(default_factory=list)  # (step, mean loss since last log)
    seconds: float = 0.0


def _loss_fn(name: str) -> Callable:
    if name == "huber":
        return dt.huber_loss
    if name == "mse":
        return dt.mse_loss
    raise ValueError(f"unknown loss {name!r} (huber, mse)")


def training_step(
    model: DenoiserModel,
    batch: Sequence[PreparedDemo],
    spec: CorrespondenceSpec,
    rng: np.random.Generator,
    sched: NoiseSchedule,
    adam: dt.AdamState,
    cfg: TrainConfig | None = None,
) -> tuple[float, float]:
    """One optimizer step on a batch of prepared demos; returns (loss, grad norm)."""
    cfg = cfg or TrainConfig()
    for prep in batch:
        if not usable(prep, spec):
            raise PartMissing(f"record {prep.id} lacks parts for {spec}")
    a_pts, f_pts, xi0, _ = make_batch(batch, spec, rng, model.config.n_points)
    xi0 = sched.scaled(xi0)
    k = max(1, cfg.noise_draws)
    rows = np.repeat(np.arange(len(batch)), k)
    xi0 = xi0[rows]
    t = rng.integers(1, sched.T + 1, size=len(rows))
    eps = rng.standard_normal(xi0.shape)
    noisy = q_sample(xi0, t, eps, sched)
    params = model.params
    with dt.Tape() as tape:
        feat_a, feat_f = model.encode_points(a_pts), model.encode_points(f_pts)
        if k > 1:
            feat_a, feat_f = dt.take_rows(feat_a, rows), dt.take_rows(feat_f, rows)
        pred = model.trunk(feat_a, feat_f, noisy, t)
        loss = _loss_fn(cfg.loss)(pred, eps)
    grads = tape.backward(loss, list(params.values()))
    norm = dt.adam_step(adam, params, {k: grads[v] for k, v in params.items()}, cfg.clip)
    return float(loss.data), norm


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _report(logbook: TrainLog, step: int, loss: float, norm: float, every: int, on_log):
    logbook.steps.append(step)
    logbook.losses.append(loss)
    logbook.grad_norms.append(norm)
    if step % every == 0:
        window = logbook.losses[-every:]
        logbook.logged.append((step, float(np.mean(window))))
        if on_log is not None:
            on_log(step, float(np.mean(window)))


def train_primitive(
    model: DenoiserModel,
    preps: Sequence[PreparedDemo],
    spec: CorrespondenceSpec,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    cfg: TrainConfig | None = None,
    on_log: Callable | None = None,
) -> TrainLog:
    """Fit one primitive (or the whole-object baseline when ``spec`` is WHOLE)."""
    cfg = cfg or TrainConfig()
    missing = [p.id for p in preps if not usable(p, spec)]
    if missing:
        raise PartMissing(f"{len(missing)} records lack parts for {spec}: {', '.join(missing[:10])}")
    adam = dt.AdamState(lr=cfg.lr)
    logbook = TrainLog()
    start = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(len(preps), cfg.batch_size, rng):
            step += 1
            loss, norm = training_step(model, [preps[i] for i in idx], spec, rng, sched, adam, cfg)
            _report(logbook, step, loss, norm, cfg.log_every, on_log)
    logbook.seconds = time.perf_counter() - start
    return logbook


def train_joint(
    models: dict[str, DenoiserModel],
    preps: Sequence[PreparedDemo],
    task: TaskDefinition,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    cfg: TrainConfig | None = None,
    on_log: Callable | None = None,
) -> TrainLog:
    """Train-time composition: one loss on the summed object-frame prediction.

    Noise is drawn in the object frame; each model sees the noisy state in
    its own part frames and the predictions of every correspondence whose
    parts a record has are summed before the loss. One Adam state covers
    all models.
    """
    cfg = cfg or TrainConfig()
    specs = list(task.correspondences)
    for s in specs:
        if s.relation not in models:
            raise NoModelForRelation(f"no model for relation {s.relation!r}")
    preps = [p for p in preps if any(usable(p, s) for s in specs)]
    if not preps:
        raise PartMissing("no record carries the parts of any correspondence")
    params = {f"{s.relation}/{k}": v for s in specs for k, v in models[s.relation].params.items()}
    adam = dt.AdamState(lr=cfg.lr)
    logbook = TrainLog()
    loss_fn = _loss_fn(cfg.loss)
    start = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(len(preps), cfg.batch_size, rng):
            step += 1
            batch = [preps[i] for i in idx]
            k = max(1, cfg.noise_draws)
            b = len(batch) * k
            xi0 = sched.scaled(np.stack([p.xi0 for p in batch]))[np.repeat(np.arange(len(batch)), k)]
            t = rng.integers(1, sched.T + 1, size=b)
            eps = rng.standard_normal(xi0.shape)
            noisy = q_sample(xi0, t, eps, sched)
            with dt.Tape() as tape:
                total = None
                for s in specs:
                    records = [i for i, p in enumerate(batch) if usable(p, s)]
                    if not records:
                        continue
                    model = models[s.relation]
                    a_pts, f_pts, frames = [], [], []
                    for i in records:
                        pa, pf, fa, ff = _part_pair(batch[i], s, rng, model.config.n_points)
                        a_pts.append(pa)
                        f_pts.append(pf)
                        frames.append((fa, ff))
                    # every record's k noise draws reuse its part encodings
                    rows = [i * k + j for i in records for j in range(k)]
                    which = np.repeat(np.arange(len(records)), k)
                    metric = sched.metric(noisy)
                    noisy_part = sched.scaled(np.stack([twists_to_part(metric[r], *frames[w]) for r, w in zip(rows, which)]))
                    feat_a, feat_f = model.encode_points(np.stack(a_pts)), model.encode_points(np.stack(f_pts))
                    if k > 1:
                        feat_a, feat_f = dt.take_rows(feat_a, which), dt.take_rows(feat_f, which)
                    pred = model.trunk(feat_a, feat_f, noisy_part, t[rows])
                    # frames share the object orientation, so transport is the
                    # identity here; scatter the rows back into the batch
                    select = np.zeros((b, len(rows)))
                    select[rows, np.arange(len(rows))] = 1.0
                    part = dt.reshape(dt.matmul(dt.Array(select), dt.reshape(pred, (len(rows), -1))), (b, 2, 6))
                    total = part if total is None else dt.add(total, part)
                loss = loss_fn(total, eps)
            grads = tape.backward(loss, list(params.values()))
            norm = dt.adam_step(adam, params, {k: grads[v] for k, v in params.items()}, cfg.clip)
            _report(logbook, step, float(loss.data), norm, cfg.log_every, on_log)
    logbook.seconds = time.perf_counter() - start
    return logbook


# Sampling


class BoundModel:
    """A learned primitive with part encodings cached for a sampling run.

    Row ``i`` of the part batches belongs to trial ``i``; each trial's
    encoding is repeated for its ``reps`` samples.
    """

    def __init__(self, model: DenoiserModel, anchor_pts: np.ndarray, function_pts: np.ndarray, reps: int):
        self.model = model
        self.feat_a = dt.Array(np.repeat(model.encode_points(anchor_pts).data, reps, axis=0))
        self.feat_f = dt.Array(np.repeat(model.encode_points(function_pts).data, reps, axis=0))

    def __call__(self, xi_part: np.ndarray, t: int) -> np.ndarray:
        return self.model.trunk(self.feat_a, self.feat_f, xi_part, np.full(xi_part.shape[0], t)).data


class OracleDenoiser:
    """Analytic stand-in that returns the exact noise towards known poses.

    Given the true object-frame waypoints, it reports
    (xi_t - sqrt(abar_t) xi0) / sqrt(1 - abar_t) in each part frame.
    """

    def __init__(self, gt_poses: TrajectorySpec | Sequence[TrajectorySpec], sched: NoiseSchedule, relation: str = "oracle"):
        poses = [gt_poses] if isinstance(gt_poses, TrajectorySpec) else list(gt_poses)
        self.xi0 = [p.twists() for p in poses]
        self.sched = sched
        self.relation = relation

    def bind(self, trials: Sequence[int], frames: Sequence[tuple], reps: int):
        sched = self.sched
        xi0 = np.concatenate([np.repeat(sched.scaled(twists_to_part(self.xi0[i % len(self.xi0)], fa, ff))[None], reps, axis=0) for i, (fa, ff) in zip(trials, frames)])

        def predict(xi_part, t):
            ab = sched.alpha_bar[t - 1]
            return (xi_part - np.sqrt(ab) * xi0) / np.sqrt(1.0 - ab)

        return predict


@dataclass(frozen=True)
class SamplerOptions:
    literal: bool = False  # 1/alpha_t in place of 1/sqrt(alpha_t)
    average: bool = False  # divide the noise sum by the number of terms
    stochastic: bool = True
    n_points: int = 512


@dataclass(eq=False)
class _Term:
    predict: Callable
    rows: np.ndarray  # flat sample rows this correspondence covers
    ra: np.ndarray
    ta: np.ndarray
    rf: np.ndarray
    tf: np.ndarray


def _extract_pair(spec: CorrespondenceSpec, anchor: PointCloud, function: PointCloud, rng, n_points: int):
    if spec == WHOLE or spec.anchor_part == "object":
        return whole_object(anchor, rng, n_points), whole_object(function, rng, n_points)
    if not anchor.has_part(spec.anchor_part) or not function.has_part(spec.function_part):
        log.warning("skipping %s: part missing", spec)
        return None
    return extract_part(anchor, spec.anchor_part, rng, n_points), extract_part(function, spec.function_part, rng, n_points)


def _build_terms(models, specs, pairs, rngs, reps: int, n_points: int) -> list[_Term]:
    per_spec = [[] for _ in specs]
    for i, ((anchor, function), rng) in enumerate(zip(pairs, rngs)):
        ca, cf = anchor.points.mean(axis=0), function.points.mean(axis=0)
        found = False
        for k, s in enumerate(specs):
            parts = _extract_pair(s, anchor, function, rng, n_points)
            if parts is None:
                continue
            pa, pf = parts
            fa = Pose.from_translation(pa.frame.translation - ca)
            ff = Pose.from_translation(pf.frame.translation - cf)
            per_spec[k].append((i, pa.points, pf.points, fa, ff))
            found = True
        if not found:
            raise AllPartsMissing(f"trial {i}: no correspondence has its parts in these clouds")
    terms = []
    for s, entries in zip(specs, per_spec):
        if not entries:
            continue
        model = models[s.relation]
        trials = [e[0] for e in entries]
        frames = [(e[3], e[4]) for e in entries]
        if isinstance(model, DenoiserModel):
            predict = BoundModel(model, np.stack([e[1] for e in entries]), np.stack([e[2] for e in entries]), reps)
        else:
            predict = model.bind(trials, frames, reps)
        rows = (np.asarray(trials)[:, None] * reps + np.arange(reps)).ravel()
        rep = lambda xs: np.repeat(np.stack(xs), 2 * reps, axis=0)  # noqa: E731
        terms.append(
            _Term(
                predict,
                rows,
                rep([fa.rotation for fa, _ in frames]),
                rep([fa.translation for fa, _ in frames]),
                rep([ff.rotation for _, ff in frames]),
                rep([ff.translation for _, ff in frames]),
            )
        )
    return terms


def _term_noise(term: _Term, xi: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    m = term.rows.shape[0]
    part = twists_to_part_rows(sched.metric(xi[term.rows]).reshape(-1, 6), term.ra, term.ta, term.rf, term.tf)
    part = sched.scaled(part).reshape(m, 2, 6)
    return transport_noise_rows(term.predict(part, t).reshape(-1, 6), term.ra).reshape(m, 2, 6)


def _draw(rngs, reps: int) -> np.ndarray:
    return np.concatenate([r.standard_normal((reps, 2, 6)) for r in rngs])


def sample_batch(
    models: dict,
    task: TaskDefinition,
    pairs: Sequence[tuple],
    rngs: Sequence[np.random.Generator],
    sched: NoiseSchedule,
    reps: int = 1,
    opts: SamplerOptions | None = None,
) -> np.ndarray:
    """Composed reverse chain for many (anchor, function) trials at once.

    Trial ``i`` draws its part resampling and all of its noise from
    ``rngs[i]`` alone. Returns metric object-frame twists ``(trials, reps, 2, 6)``.
    """
    opts = opts or SamplerOptions()
    for s in task.correspondences:
        if s.relation not in models:
            raise NoModelForRelation(
                f"no model for relation {s.relation!r}; have {', '.join(sorted(models)) or 'none'}"
            )
    terms = _build_terms(models, task.correspondences, pairs, rngs, reps, opts.n_points)
    n = len(pairs) * reps
    count = np.zeros(n)
    for term in terms:
        count[term.rows] += 1.0
    xi = _draw(rngs, reps)
    for t in range(sched.T, 0, -1):
        total = np.zeros((n, 2, 6))
        for term in terms:
            total[term.rows] += _term_noise(term, xi, t, sched)
        if opts.average:
            total /= count[:, None, None]
        xi = (xi - _coef(t, sched) * total) / _scale(t, sched, opts.literal)
        if t > 1 and opts.stochastic:
            xi = xi + sched.sigma[t - 1] * _draw(rngs, reps)
    return sched.metric(xi).reshape(len(pairs), reps, 2, 6)


def _coef(t: int, sched: NoiseSchedule) -> float:
    return (1.0 - sched.alpha[t - 1]) / np.sqrt(1.0 - sched.alpha_bar[t - 1])


def _scale(t: int, sched: NoiseSchedule, literal: bool) -> float:
    a = sched.alpha[t - 1]
    return a if literal else np.sqrt(a)


def sample(
    models: dict,
    task: TaskDefinition,
    anchor: PointCloud,
    function: PointCloud,
    rng: np.random.Generator,
    sched: NoiseSchedule,
    n: int = 1,
    opts: SamplerOptions | None = None,
) -> list[TrajectorySpec]:
    """``n`` composed samples of the start/end T_AF waypoints for one pair."""
    xi = sample_batch(models, task, [(anchor, function)], [rng], sched, n, opts)[0]
    return [TrajectorySpec.from_twists(x) for x in xi]


def sample_single(
    model,
    spec: CorrespondenceSpec,
    anchor: PointCloud,
    function: PointCloud,
    rng: np.random.Generator,
    sched: NoiseSchedule,
    n: int = 1,
    opts: SamplerOptions | None = None,
) -> list[TrajectorySpec]:
    """Plain one-model ancestral sampler (no composition)."""
    opts = opts or SamplerOptions()
    parts = _extract_pair(spec, anchor, function, rng, opts.n_points)
    if parts is None:
        raise PartMissing(f"clouds lack the parts of {spec}")
    pa, pf = parts
    fa = Pose.from_translation(pa.frame.translation - anchor.points.mean(axis=0))
    ff = Pose.from_translation(pf.frame.translation - function.points.mean(axis=0))
    if isinstance(model, DenoiserModel):
        predict = BoundModel(model, pa.points[None], pf.points[None], n)
    else:
        predict = model.bind([0], [(fa, ff)], n)
    xi = rng.standard_normal((n, 2, 6))
    for t in range(sched.T, 0, -1):
        part = sched.scaled(twists_to_part(sched.metric(xi).reshape(-1, 6), fa, ff)).reshape(n, 2, 6)
        eps = transport_noise_from_part(predict(part, t).reshape(-1, 6), fa).reshape(n, 2, 6)
        xi = reverse_step(xi, eps, t, rng, sched, opts.literal, opts.stochastic)
    return [TrajectorySpec.from_twists(x) for x in sched.metric(xi)]
