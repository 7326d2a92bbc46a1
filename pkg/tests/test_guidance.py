import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import central_diff, random_obs, rel_err
from steerkit.blockworld import OBS_DIM, write_dataset
from steerkit.diffusion import encode_chunks
from steerkit.guidance import (ClassifierObjective, GuidanceConfig, GuidanceError, GuidanceSet, LatentObjective,
                               PositionObjective, SampleTrace, color_onehot, grad_metric, guided_epsilon,
                               guided_sample, guided_sample_normalized, make_objective, metric_d, metric_xent,
                               position_metric, position_target, score)
from steerkit.numerics import Rng

vec = arrays(np.float64, (OBS_DIM,), elements=st.floats(-2, 2))
conds = st.integers(1, 4).flatmap(lambda n: arrays(np.float64, (n, OBS_DIM), elements=st.floats(-2, 2)))


def metric_mp(z, pos, neg, sigma):
    """High-precision reference for the latent metric."""
    mpmath.mp.dps = 50

    def lse(conds):
        return mpmath.log(mpmath.fsum(mpmath.exp(-mpmath.sqrt(mpmath.fsum((mpmath.mpf(float(a)) - mpmath.mpf(float(b))) ** 2
                                                                            for a, b in zip(z, c))) / sigma)
                                      for c in conds))
    out = mpmath.mpf(0)
    if len(pos):
        out += lse(pos)
    if len(neg):
        out -= lse(neg)
    return float(out)


@settings(max_examples=60, deadline=None)
@given(vec, conds, conds, st.sampled_from([0.05, 0.3, 1.0, 30.0]))
def test_latent_metric_matches_reference(z, pos, neg, sigma):
    got = metric_d(GuidanceSet(pos, neg), z, sigma)
    assert got == pytest.approx(metric_mp(z, pos, neg, sigma), rel=1e-9, abs=1e-9)


def test_latent_metric_examples():
    z = np.zeros(OBS_DIM)
    e = np.zeros(OBS_DIM)
    e[0] = 1.0
    # one positive at distance 1: -1/sigma
    assert metric_d(GuidanceSet([e]), z, 0.5) == pytest.approx(-2.0)
    # equidistant positive and negative cancel
    assert metric_d(GuidanceSet([e], [-e]), z, 0.5) == pytest.approx(0.0)
    # two copies of the same positive add log 2
    assert metric_d(GuidanceSet([e, e]), z, 0.5) == pytest.approx(-2.0 + np.log(2))
    # squared distance option
    assert metric_d(GuidanceSet([2 * e]), z, 1.0, "squared") == pytest.approx(-4.0)


@settings(max_examples=40, deadline=None)
@given(vec, conds, conds)
def test_swapping_polarity_negates(z, pos, neg):
    g = GuidanceSet(pos, neg)
    assert metric_d(g.swapped(), z, 0.3) == pytest.approx(-metric_d(g, z, 0.3), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(vec, conds)
def test_positive_only_metric_is_bracketed(z, pos):
    # max_i(-d_i / sigma) <= D <= max_i(-d_i / sigma) + log n
    sigma = 0.3
    d = np.linalg.norm(pos - z, axis=1)
    m = np.max(-d / sigma)
    got = metric_d(GuidanceSet(pos), z, sigma)
    assert m - 1e-9 <= got <= m + np.log(len(pos)) + 1e-9


@settings(max_examples=30, deadline=None)
@given(vec, conds)
def test_small_sigma_tracks_nearest_condition(z, pos):
    sigma = 1e-4
    d = np.linalg.norm(pos - z, axis=1)
    assert metric_d(GuidanceSet(pos), z, sigma) * sigma == pytest.approx(-d.min(), abs=sigma * np.log(len(pos)) + 1e-9)


def test_metric_batch_matches_rows():
    rng = Rng(0)
    pos, neg = rng.gaussian((3, OBS_DIM)), rng.gaussian((2, OBS_DIM))
    zs = rng.gaussian((5, OBS_DIM))
    g = GuidanceSet(pos, neg)
    batch = metric_d(g, zs, 0.7)
    assert np.allclose(batch, [metric_d(g, z, 0.7) for z in zs])


def test_metric_xent():
    logits = np.array([1.0, 2.0, 0.5, -1.0])
    want = logits[1] - np.log(np.sum(np.exp(logits)))
    assert metric_xent(logits, color_onehot("green")) == pytest.approx(want)
    assert metric_xent(np.zeros(4), color_onehot(0)) == pytest.approx(-np.log(4))
    with pytest.raises(GuidanceError):
        metric_xent(logits, np.array([0.5, 0.5, 0, 0]))
    with pytest.raises(GuidanceError):
        metric_xent(logits, np.ones(3))


def test_guided_epsilon():
    eps = np.array([1.0, -1.0])
    grad = np.array([2.0, 4.0])
    assert np.array_equal(guided_epsilon(eps, grad, 0.0, 0.3), eps)
    assert np.allclose(guided_epsilon(eps, grad, 0.5, 0.75), eps - 0.5 * 0.5 * grad)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 0.99))
def test_guided_epsilon_linear_in_strength(s1, s2, ab):
    eps, grad = np.array([0.3, -0.2]), np.array([1.5, 0.25])
    shift = lambda s: guided_epsilon(eps, grad, s, ab) - eps
    assert np.allclose(shift(s1 + s2), shift(s1) + shift(s2))


def test_position_metric():
    chunk = np.array([[0.1, 0.0], [0.0, 0.2]])
    assert position_metric(chunk, [0.2, 0.2], [0.3, 0.4]) == pytest.approx(0.0)
    assert position_metric(chunk, [0.0, 0.0], [0.0, 0.0]) == pytest.approx(-(0.01 + 0.04))


def test_position_objective_gradient():
    # waypoint chunks end at the last waypoint; the metric pulls it to the target
    obs = random_obs(Rng(1), 2)
    target = np.array([0.5, 0.5])
    obj = PositionObjective(target)
    a = encode_chunks(Rng(2).gaussian((2, 16, 2)) * 0.02)
    d = score(obj, obs, a)
    end = obs[:, :2] + a[:, -1] * 0.4
    assert np.allclose(d, -np.sum((end - target) ** 2, axis=1))
    g, _ = grad_metric(obj, obs, a)
    assert np.all(g[:, :-1] == 0)
    assert np.allclose(g[:, -1], -2 * (end - target) * 0.4)


def test_position_target():
    pos = np.zeros((2, OBS_DIM))
    pos[0, :2], pos[1, :2] = [0.2, 0.4], [0.4, 0.0]
    assert np.allclose(position_target(GuidanceSet(pos)), [0.3, 0.2])
    with pytest.raises(GuidanceError):
        position_target(GuidanceSet(target_colors=(1,)))


@pytest.mark.parametrize("metric", ["latent", "classifier"])
def test_grad_metric_matches_finite_differences(tiny_dynamics, metric):
    obs = random_obs(Rng(3), 2)
    rng = Rng(4)
    gset = GuidanceSet(rng.gaussian((3, OBS_DIM)), rng.gaussian((2, OBS_DIM)), (2,), (1,))
    obj = make_objective(tiny_dynamics, gset, GuidanceConfig(sigma=0.5, metric=metric))
    a = rng.gaussian((2, 16, 2))
    g, d = grad_metric(obj, obs, a)
    assert np.allclose(d, score(obj, obs, a))
    fd = central_diff(lambda x: float(np.sum(score(obj, obs, x))), a)
    assert rel_err(g, fd) < 1e-6


def test_classifier_objective_rows_are_independent(tiny_dynamics):
    obs = random_obs(Rng(5), 3)
    a = Rng(6).gaussian((3, 16, 2))
    obj = ClassifierObjective(tiny_dynamics, GuidanceSet.classifier("blue", "red"))
    g, _ = grad_metric(obj, obs, a)
    for i in range(3):
        gi, _ = grad_metric(obj, obs[i:i + 1], a[i:i + 1])
        assert np.allclose(gi[0], g[i])


@pytest.mark.parametrize("kw", [dict(s=-1), dict(sigma=0), dict(M=0), dict(M=1.5), dict(distance="cosine"),
                                dict(metric="energy")])
def test_guidance_config_rejects(kw):
    with pytest.raises(GuidanceError):
        GuidanceConfig(**kw)


def test_guidance_set_validation():
    with pytest.raises(GuidanceError):
        GuidanceSet(np.zeros((2, OBS_DIM - 1)))
    with pytest.raises(GuidanceError):
        GuidanceSet(np.full((1, OBS_DIM), np.nan))
    with pytest.raises(GuidanceError):
        GuidanceSet(target_colors=(1,), avoid_colors=(1,))
    with pytest.raises(GuidanceError):
        GuidanceSet().check("latent")
    with pytest.raises(GuidanceError):
        GuidanceSet(np.zeros((1, OBS_DIM))).check("classifier")
    with pytest.raises(GuidanceError):
        LatentObjective(None, GuidanceSet())


def test_guidance_set_json_roundtrip(tmp_path):
    rng = Rng(7)
    g = GuidanceSet(rng.gaussian((2, OBS_DIM)), rng.gaussian((1, OBS_DIM)), ("blue",), ("red", "green"))
    back = GuidanceSet.load(g.save(tmp_path / "g.json"))
    assert np.array_equal(back.positives, g.positives) and np.array_equal(back.negatives, g.negatives)
    assert back.target_colors == (2,) and back.avoid_colors == (0, 1)
    with pytest.raises(GuidanceError):
        GuidanceSet(rng.gaussian((3, 2, OBS_DIM))).to_json()


def test_guidance_set_dataset_refs(tmp_path, tiny_dataset):
    write_dataset(tiny_dataset, tmp_path / "data")
    doc = {"format": "steerkit-gset-v1", "conditions": [
        {"polarity": "+", "ref": "data/demos.jsonl:1"},
        {"polarity": "-", "ref": "data/demos.jsonl:3"}]}
    (tmp_path / "g.json").write_text(json.dumps(doc))
    g = GuidanceSet.load(tmp_path / "g.json")
    assert np.array_equal(g.positives[0], tiny_dataset[0].terminal_observation)
    assert np.array_equal(g.negatives[0], tiny_dataset[2].terminal_observation)
    for bad in ({"polarity": "+", "ref": "data/demos.jsonl:999"}, {"polarity": "+", "ref": "nope.jsonl:1"},
                {"polarity": "+", "ref": "data/demos.jsonl"}, {"polarity": "?", "obs": [0] * OBS_DIM},
                {"polarity": "+"}, {"polarity": "+", "obs": [0, 1]}):
        with pytest.raises(GuidanceError):
            GuidanceSet.from_json({"conditions": [bad]}, tmp_path)


# the sampler -------------------------------------------------------------------------

def test_zero_strength_single_pass_is_plain_sampling(tiny_policy, tiny_dynamics):
    obs = random_obs(Rng(8), 3)
    obj = ClassifierObjective(tiny_dynamics, GuidanceSet.classifier("blue"))
    cfg = GuidanceConfig(s=0.0, M=1, metric="classifier")
    assert np.array_equal(guided_sample(tiny_policy, obj, obs, cfg, Rng(9)), tiny_policy.sample(obs, Rng(9)))
    assert np.array_equal(guided_sample(tiny_policy, None, obs, GuidanceConfig(M=1), Rng(9)),
                          tiny_policy.sample(obs, Rng(9)))


def test_guided_sampler_trace(tiny_policy, tiny_dynamics):
    obs = random_obs(Rng(10), 2)
    obj = ClassifierObjective(tiny_dynamics, GuidanceSet.classifier("blue"))
    cfg = GuidanceConfig(s=1.0, M=3, metric="classifier")
    tr = SampleTrace()
    a = guided_sample_normalized(tiny_policy, obj, obs, cfg, Rng(11), trace=tr)
    steps = tiny_policy.schedule_.ddim_steps
    assert len(tr.d) == steps * 3 + 1
    assert tr.levels[:3] == [100] * 3 and tr.levels[-1] == 0
    assert np.allclose(tr.d[-1], score(obj, obs, a))


def test_guidance_moves_metric_up(tiny_policy, tiny_dynamics):
    # on average, guided chunks score higher than unguided ones from the same noise
    obs = random_obs(Rng(12), 40)
    obj = ClassifierObjective(tiny_dynamics, GuidanceSet.classifier("blue"))
    plain = guided_sample_normalized(tiny_policy, None, obs, GuidanceConfig(M=1), Rng(13))
    guided = guided_sample_normalized(tiny_policy, obj, obs, GuidanceConfig(s=2.0, M=1, metric="classifier"), Rng(13))
    assert score(obj, obs, guided).mean() > score(obj, obs, plain).mean()
