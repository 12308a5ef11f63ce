from dataclasses import replace

import numpy as np
import pytest

from cpm import diffusion as D
from cpm import difftensor as dt
from cpm import synthtask as S
from cpm.denoiser import DenoiserModel, reduced_config
from cpm.errors import AllPartsMissing, InvalidRange, NoModelForRelation, PartMissing
from cpm.geometry import Pose, Twist, exp_batch, exp_map, twists_from_part, twists_to_part
from cpm.tasks import POUR

SCHED = D.make_schedule()
ALIGN = POUR.only("align")


@pytest.fixture(scope="module")
def demos():
    return [S.gen_dataset_record("pour", 3, i) for i in range(16)]


@pytest.fixture(scope="module")
def small_models():
    rng = np.random.default_rng(0)
    return {r: DenoiserModel.init(reduced_config(), r, rng) for r in POUR.relations}


SMALL = D.SamplerOptions(n_points=16)


# Schedule


def test_schedule_endpoints_and_identities():
    assert SCHED.beta[0] == 0.0001 and SCHED.beta[-1] == 0.02
    assert np.all(np.diff(SCHED.beta) > 0) and np.all(np.diff(SCHED.alpha_bar) < 0)
    assert np.all(SCHED.alpha + SCHED.beta == 1.0)
    assert np.allclose(SCHED.sigma, np.sqrt(SCHED.beta), rtol=0, atol=0)
    for t in range(1, 200):
        assert SCHED.alpha_bar[t] == SCHED.alpha_bar[t - 1] * SCHED.alpha[t]


def test_alpha_bar_matches_product_loop():
    prod = 1.0
    for i in range(200):
        prod *= 1.0 - (0.0001 + i * (0.02 - 0.0001) / 199)
    assert abs(SCHED.alpha_bar[-1] - prod) < 1e-12
    # the linear 1e-4..0.02 schedule over 200 steps keeps ~13% of the signal
    assert SCHED.alpha_bar[-1] == pytest.approx(0.13218, abs=1e-5)


def test_schedule_rejects_bad_ranges():
    with pytest.raises(InvalidRange):
        D.make_schedule(beta_start=0.02, beta_end=0.01)
    with pytest.raises(InvalidRange):
        D.make_schedule(beta_end=1.5)


# Forward and reverse steps


def test_q_sample_without_noise():
    xi0 = np.arange(12.0).reshape(2, 6)
    assert np.array_equal(D.q_sample(xi0, 50, np.zeros((2, 6)), SCHED), np.sqrt(SCHED.alpha_bar[49]) * xi0)


def test_q_sample_variance_at_100():
    rng = np.random.default_rng(1)
    xi0 = rng.uniform(-0.5, 0.5, size=(2, 6))
    out = D.q_sample(np.broadcast_to(xi0, (10000, 2, 6)), np.full(10000, 100), rng.standard_normal((10000, 2, 6)), SCHED)
    ab = SCHED.alpha_bar[99]
    assert np.allclose(out.mean(axis=0), np.sqrt(ab) * xi0, atol=0.04)
    assert np.allclose(out.var(axis=0), 1.0 - ab, rtol=0.05)


def test_one_step_inverts_forward_at_t1():
    rng = np.random.default_rng(2)
    xi0, eps = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    back = D.reverse_step(D.q_sample(xi0, 1, eps, SCHED), eps, 1, None, SCHED)
    assert np.abs(back - xi0).max() < 1e-9


def test_reverse_step_noise_rules():
    x = np.ones((2, 6))
    rng = np.random.default_rng(3)
    # final step never adds fresh noise
    assert np.array_equal(D.reverse_step(x, np.zeros_like(x), 1, rng, SCHED), x / np.sqrt(SCHED.alpha[0]))
    assert np.array_equal(D.reverse_step(x, np.zeros_like(x), 50, rng, SCHED, stochastic=False), x / np.sqrt(SCHED.alpha[49]))
    assert np.array_equal(D.reverse_step(x, np.zeros_like(x), 50, rng, SCHED, literal=True, stochastic=False), x / SCHED.alpha[49])


# Sampling


def test_oracle_chain_recovers_ground_truth(demos):
    oracle = D.OracleDenoiser([d.gt_poses for d in demos], SCHED, "align")
    rngs = [np.random.default_rng(i) for i in range(len(demos))]
    xi = D.sample_batch({"align": oracle}, ALIGN, [(d.anchor, d.function) for d in demos], rngs, SCHED, 1, D.SamplerOptions(stochastic=False))
    gt = np.stack([d.gt_poses.twists() for d in demos])
    assert np.abs(xi[:, 0] - gt).max() < 0.05


def test_single_correspondence_reduces_to_plain_sampler(demos, small_models):
    d = demos[0]
    for model in (small_models["align"], D.OracleDenoiser(d.gt_poses, SCHED)):
        composed = D.sample({"align": model}, ALIGN, d.anchor, d.function, np.random.default_rng(4), SCHED, 3, SMALL)
        plain = D.sample_single(model, ALIGN.correspondences[0], d.anchor, d.function, np.random.default_rng(4), SCHED, 3, SMALL)
        for a, b in zip(composed, plain):
            assert np.array_equal(a.twists(), b.twists())


def test_sampling_is_deterministic(demos, small_models):
    d = demos[1]
    runs = [D.sample(small_models, POUR, d.anchor, d.function, np.random.default_rng(5), SCHED, 2, SMALL) for _ in range(2)]
    for a, b in zip(*runs):
        assert np.array_equal(a.twists(), b.twists())


def test_batched_trials_match_separate_runs(demos, small_models):
    pairs = [(d.anchor, d.function) for d in demos[:3]]
    together = D.sample_batch(small_models, POUR, pairs, [np.random.default_rng(10 + i) for i in range(3)], SCHED, 2, SMALL)
    for i, pair in enumerate(pairs):
        alone = D.sample_batch(small_models, POUR, [pair], [np.random.default_rng(10 + i)], SCHED, 2, SMALL)
        assert np.allclose(together[i], alone[0], rtol=0, atol=1e-10)


def test_moving_anchor_part_frame_shifts_translation():
    rng = np.random.default_rng(6)
    xi_part = rng.normal(scale=0.5, size=(5, 6))
    fa, ff = Pose.from_translation([0.01, 0.02, 0.1]), Pose.from_translation([0.0, -0.01, 0.03])
    d = np.array([0.05, -0.2, 0.07])
    _, t0 = exp_batch(twists_from_part(xi_part, fa, ff))
    _, t1 = exp_batch(twists_from_part(xi_part, Pose.from_translation(fa.translation + d), ff))
    assert np.abs(t1 - t0 - d).max() < 1e-12


def test_part_frame_conversion_roundtrip_rotated_frames():
    rng = np.random.default_rng(7)
    xi = rng.normal(scale=0.5, size=(20, 6))
    fa = exp_map(Twist(rng.normal(size=3), rng.normal(size=3)))
    ff = exp_map(Twist(rng.normal(size=3), rng.normal(size=3)))
    assert np.abs(twists_from_part(twists_to_part(xi, fa, ff), fa, ff) - xi).max() < 1e-9


def test_rigid_motion_of_the_scene_leaves_samples_unchanged(demos, small_models):
    d = demos[2]
    shift = np.array([0.3, -0.1, 0.05])
    moved = (replace(d.anchor, points=d.anchor.points + shift), replace(d.function, points=d.function.points - shift))
    a = D.sample(small_models, POUR, d.anchor, d.function, np.random.default_rng(8), SCHED, 2, SMALL)
    b = D.sample(small_models, POUR, *moved, np.random.default_rng(8), SCHED, 2, SMALL)
    for x, y in zip(a, b):
        assert np.abs(x.twists() - y.twists()).max() < 1e-6


def test_missing_model_and_missing_parts(demos, small_models):
    d = demos[0]
    with pytest.raises(NoModelForRelation):
        D.sample({"align": small_models["align"]}, POUR, d.anchor, d.function, np.random.default_rng(0), SCHED, 1, SMALL)
    plain = next(x for x in demos if not x.function.has_part("handle"))
    with pytest.raises(AllPartsMissing):
        D.sample(small_models, POUR.only("facing-up"), plain.anchor, plain.function, np.random.default_rng(0), SCHED, 1, SMALL)
    # with other parts present the missing correspondence is skipped
    out = D.sample(small_models, POUR, plain.anchor, plain.function, np.random.default_rng(0), SCHED, 1, SMALL)
    assert len(out) == 1


# Training


def test_training_loss_decreases(demos):
    preps = [D.prepare(d) for d in demos]
    model = DenoiserModel.init(reduced_config(), "align", np.random.default_rng(0))
    log = D.train_primitive(model, preps, POUR.correspondence("align"), SCHED, np.random.default_rng(1), D.TrainConfig(epochs=1000, lr=1e-3))
    assert len(log.losses) == 1000
    assert np.median(log.losses[900:1000]) < np.median(log.losses[:100])
    assert len(log.logged) == 10


def test_gradient_reaches_every_group(demos):
    preps = [D.prepare(d) for d in demos[:4]]
    model = DenoiserModel.init(reduced_config(), "align", np.random.default_rng(0))
    a, f, xi0, _ = D.make_batch(preps, POUR.correspondence("align"), np.random.default_rng(1), 16)
    rng = np.random.default_rng(2)
    t = rng.integers(1, 201, size=4)
    eps = rng.standard_normal(xi0.shape)
    with dt.Tape() as tape:
        loss = dt.huber_loss(model.forward(a, f, D.q_sample(xi0, t, eps, SCHED), t), eps)
    grads = tape.backward(loss, list(model.params.values()))
    for group, names in model.groups().items():
        norm = np.sqrt(sum(float((grads[model.params[n]] ** 2).sum()) for n in names))
        assert norm > 0.0, group


def test_training_refuses_records_without_parts(demos):
    plain = [D.prepare(d) for d in demos if not d.function.has_part("handle")]
    model = DenoiserModel.init(reduced_config(), "facing-up", np.random.default_rng(0))
    with pytest.raises(PartMissing):
        D.train_primitive(model, plain[:2], POUR.correspondence("facing-up"), SCHED, np.random.default_rng(0), D.TrainConfig(epochs=1))


def test_joint_training_updates_all_models(demos):
    preps = [D.prepare(d) for d in demos[:8]]
    rng = np.random.default_rng(0)
    models = {r: DenoiserModel.init(reduced_config(), r, rng) for r in POUR.relations}
    before = {r: m.params["head.w"].data.copy() for r, m in models.items()}
    log = D.train_joint(models, preps, POUR, SCHED, np.random.default_rng(1), D.TrainConfig(epochs=2, batch_size=4))
    assert len(log.losses) == 4 and all(np.isfinite(log.losses))
    for r, m in models.items():
        assert not np.array_equal(before[r], m.params["head.w"].data)


def test_noise_draws_share_encodings(demos):
    preps = [D.prepare(d) for d in demos[:4]]
    spec = POUR.correspondence("align")
    losses = {}
    for k in (1, 3):
        model = DenoiserModel.init(reduced_config(), "align", np.random.default_rng(0))
        adam = dt.AdamState()
        losses[k] = D.training_step(model, preps, spec, np.random.default_rng(1), SCHED, adam, D.TrainConfig(noise_draws=k))
        assert np.isfinite(losses[k][0]) and adam.step == 1
    # same records and point draws, different noise levels
    assert losses[1][0] != losses[3][0]
