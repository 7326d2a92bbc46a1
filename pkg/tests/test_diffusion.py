import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from steerkit.blockworld import DELTA_MAX, OBS_DIM, build_dataset, observe, reset
from steerkit.diffusion import (DiffusionPolicy, NoiseSchedule, SampleConfig, SamplingError, chunk_windows,
                                ddim_step, decode_chunks, encode_chunks, forward_noise, renoise, sample_chunk,
                                timestep_embedding)
from steerkit.numerics import Rng


def obs_batch(n, seed=0):
    rng = Rng(seed)
    return np.stack([observe(reset(rng)) for _ in range(n)])


# schedule ------------------------------------------------------------------

def test_schedule_endpoints():
    s = NoiseSchedule()
    assert s.alpha_bar(0) == 1.0
    assert s.betas[0] == 1e-4 and s.betas[-1] == pytest.approx(0.08)
    assert np.all(np.diff(s.alpha_bars) < 0)
    # the last level is close to pure noise
    assert s.alpha_bar(s.K) < 0.02
    assert s.alpha_bar(3) == pytest.approx(math.prod(1 - b for b in s.betas[:3]))


def test_inference_steps():
    s = NoiseSchedule()
    assert s.inference_steps == [100, 90, 80, 70, 60, 50, 40, 30, 20, 10]
    assert s.step_pairs[-1] == (10, 0)
    assert NoiseSchedule(K=10, ddim_steps=10).inference_steps == list(range(10, 0, -1))


@pytest.mark.parametrize("kw", [dict(K=0), dict(ddim_steps=0), dict(K=5, ddim_steps=6),
                                dict(beta_start=0.0), dict(beta_start=0.5, beta_end=0.1), dict(beta_end=1.0)])
def test_schedule_rejects(kw):
    with pytest.raises(ValueError):
        NoiseSchedule(**kw)


# noising and DDIM ----------------------------------------------------------

def test_forward_noise_moments():
    s = NoiseSchedule()
    rng = Rng(0)
    a0 = np.full((40000, 1), 0.7)
    for k in (1, 30, 100):
        x = forward_noise(a0, k, rng.gaussian(a0.shape), s)
        ab = s.alpha_bar(k)
        se = math.sqrt(1 - ab) / math.sqrt(len(x))
        assert abs(x.mean() - math.sqrt(ab) * 0.7) < 5 * se
        assert x.var() == pytest.approx(1 - ab, rel=0.05)


def test_forward_noise_rejects():
    s = NoiseSchedule()
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 1, np.zeros(4), s)


def test_renoise_composes_with_forward_noise():
    # noising to k1 then k1 -> k2 has the same marginal as noising to k2
    s = NoiseSchedule()
    rng = Rng(1)
    a0 = np.full((40000, 1), -0.4)
    x = renoise(forward_noise(a0, 20, rng.gaussian(a0.shape), s), 20, 60, rng.gaussian(a0.shape), s)
    ab = s.alpha_bar(60)
    assert x.mean() == pytest.approx(math.sqrt(ab) * -0.4, abs=0.02)
    assert x.var() == pytest.approx(1 - ab, rel=0.05)


@settings(deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       st.integers(2, 100), st.data())
def test_ddim_with_true_noise_lands_on_forward_noise(a0, eps, k, data):
    # given the exact noise, a DDIM step reproduces the forward process at the lower level
    s = NoiseSchedule()
    k_next = data.draw(st.integers(0, k - 1))
    a_k = forward_noise(a0, k, eps, s)
    got = ddim_step(a_k, eps, k, k_next, s)
    want = a0 if k_next == 0 else forward_noise(a0, k_next, eps, s)
    assert np.allclose(got, want, atol=1e-9)


def test_ddim_step_rejects():
    s = NoiseSchedule()
    with pytest.raises(ValueError):
        ddim_step(np.zeros(2), np.zeros(2), 10, 10, s)
    with pytest.raises(SamplingError):
        ddim_step(np.zeros(2), np.array([np.nan, 0.0]), 10, 0, s)


def test_ddim_clip_bounds_clean_estimate():
    s = NoiseSchedule()
    out = ddim_step(np.full(2, 50.0), np.zeros(2), 50, 0, s, clip=1.0)
    assert np.all(out == 1.0)


def test_point_mass_oracle(tiny_policy):
    # for data concentrated at mu the ideal noise estimate is (a - sqrt(ab) mu) / sqrt(1 - ab),
    # and DDIM then returns mu from any starting noise
    s = tiny_policy.schedule_
    mu = np.linspace(-1, 1, 32).reshape(16, 2)

    def oracle(a, k, eps):
        ab = s.alpha_bar(k)
        return (a - math.sqrt(ab) * mu) / math.sqrt(1 - ab)

    out = tiny_policy.sample_normalized(obs_batch(5), Rng(3), hook=oracle)
    assert np.allclose(out, mu, atol=1e-12)


def test_gaussian_oracle(tiny_policy):
    # data N(mu, v I): the ideal noise estimate is linear in a; track the scalar
    # coefficient of the starting noise through every DDIM step independently
    s = tiny_policy.schedule_
    mu, v = 0.3, 2.0

    def oracle(a, k, eps):
        ab = s.alpha_bar(k)
        return math.sqrt(1 - ab) * (a - math.sqrt(ab) * mu) / (ab * v + 1 - ab)

    rng = Rng(8)
    z = tiny_policy.initial_noise(Rng(8), 4)
    out = tiny_policy.sample_normalized(obs_batch(4), rng, hook=oracle)
    c, m = 1.0, 0.0  # a = m + c z
    for k, kn in s.step_pairs:
        ab, abn = s.alpha_bar(k), s.alpha_bar(kn)
        denom = ab * v + 1 - ab
        e_c, e_m = math.sqrt(1 - ab) * c / denom, math.sqrt(1 - ab) * (m - math.sqrt(ab) * mu) / denom
        x_c, x_m = (c - math.sqrt(1 - ab) * e_c) / math.sqrt(ab), (m - math.sqrt(1 - ab) * e_m) / math.sqrt(ab)
        c, m = math.sqrt(abn) * x_c + math.sqrt(1 - abn) * e_c, math.sqrt(abn) * x_m + math.sqrt(1 - abn) * e_m
    assert np.allclose(out, m + c * z, atol=1e-12)
    # starting from pure noise at a level with alpha_bar ~ 0.016 loses a little of the mean
    assert m == pytest.approx(mu, rel=0.2)
    assert c ** 2 == pytest.approx(v, rel=0.2)


def test_timestep_embedding():
    e = timestep_embedding(np.array([0, 50]))
    assert e.shape == (2, 16)
    assert np.allclose(e[0, :8], 0) and np.allclose(e[0, 8:], 1)
    assert np.allclose(np.sum(e ** 2, axis=1), 8)


# chunk encoding --------------------------------------------------------------

feasible = arrays(np.float64, (5, 16, 2), elements=st.floats(-DELTA_MAX / 1.5, DELTA_MAX / 1.5))


@given(feasible)
def test_encode_decode_roundtrip(deltas):
    for mode in ("waypoints", "deltas"):
        assert np.allclose(decode_chunks(encode_chunks(deltas, mode), mode), deltas, atol=1e-12)


@given(arrays(np.float64, (16, 2), elements=st.floats(-3, 3)))
def test_tracking_decode(a):
    # every decoded step is feasible and heads straight for the next waypoint
    way = a * 0.4
    d = decode_chunks(a)
    assert np.all(np.linalg.norm(d, axis=-1) <= DELTA_MAX + 1e-12)
    pos = np.cumsum(d, axis=0)
    prev = np.vstack([[0, 0], pos[:-1]])
    gap = np.linalg.norm(way - prev, axis=1)
    reached = gap <= DELTA_MAX
    assert np.allclose(pos[reached], way[reached])
    step = np.linalg.norm(d, axis=1)
    assert np.allclose(step[~reached], DELTA_MAX)


def test_chunk_windows_pad_with_zeros(tiny_dataset):
    tr = tiny_dataset[0]
    w = chunk_windows([tr], 16)
    assert len(w["obs"]) == len(tr)
    last = w["chunks"][-1]
    assert np.array_equal(last[0], tr.actions[-1]) and np.all(last[1:] == 0)
    assert np.all(w["labels"] == tr.label)
    assert np.array_equal(w["goals"][0], tr.terminal_observation)


def test_sample_config():
    with pytest.raises(ValueError):
        SampleConfig(execute_len=17)
    with pytest.raises(ValueError):
        SampleConfig(eta=0.5)


# the estimator ---------------------------------------------------------------

def test_policy_is_an_estimator(tiny_policy):
    c = clone(tiny_policy)
    assert c.get_params()["hidden"] == (32, 32)
    assert not hasattr(c, "params_")
    with pytest.raises(NotFittedError):
        c.sample(obs_batch(1), Rng(0))


def test_policy_shapes_and_loss(tiny_policy):
    out = tiny_policy.sample(obs_batch(3), Rng(0))
    assert out.shape == (3, 16, 2)
    assert np.all(np.linalg.norm(out, axis=-1) <= DELTA_MAX + 1e-12)
    assert len(tiny_policy.loss_curve_) == 2
    assert tiny_policy.score(build_dataset(Rng(50), 1)) < 0


def test_sampling_is_deterministic(tiny_policy):
    o = obs_batch(4)
    assert np.array_equal(tiny_policy.sample(o, Rng(5)), tiny_policy.sample(o, Rng(5)))
    assert not np.array_equal(tiny_policy.sample(o, Rng(5)), tiny_policy.sample(o, Rng(6)))
    assert np.array_equal(sample_chunk(tiny_policy, o, Rng(5)), tiny_policy.sample(o, Rng(5)))


def test_training_is_deterministic(tiny_dataset, tiny_schedule, tiny_policy):
    again = DiffusionPolicy(hidden=(32, 32), schedule=tiny_schedule, epochs=2, random_state=1).fit(tiny_dataset)
    assert again.loss_curve_ == tiny_policy.loss_curve_


def test_identity_hook_changes_nothing(tiny_policy):
    o = obs_batch(3)
    plain = tiny_policy.sample(o, Rng(2))
    hooked = tiny_policy.sample(o, Rng(2), hook=lambda a, k, eps: eps)
    assert np.array_equal(plain, hooked)


def test_bad_hook_shape(tiny_policy):
    with pytest.raises(SamplingError):
        tiny_policy.sample(obs_batch(2), Rng(0), hook=lambda a, k, eps: eps[:1])


def test_unconditional_policy_ignores_goal(tiny_policy):
    o = obs_batch(2)
    g = obs_batch(2, seed=9)
    assert np.array_equal(tiny_policy.sample(o, Rng(1)), tiny_policy.sample(o, Rng(1), goal=g))


def test_goal_policy_reads_goal(tiny_goal_policy):
    o = obs_batch(2)
    g = obs_batch(2, seed=9)
    assert not np.array_equal(tiny_goal_policy.sample(o, Rng(1)), tiny_goal_policy.sample(o, Rng(1), goal=g))


def test_observation_validation(tiny_policy):
    with pytest.raises(ValueError):
        tiny_policy.sample(np.zeros((2, OBS_DIM + 1)), Rng(0))
    bad = obs_batch(1)
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        tiny_policy.sample(bad, Rng(0))


def test_fit_rejects(tiny_schedule):
    with pytest.raises(ValueError):
        DiffusionPolicy(chunk_len=4, execute_len=5).fit(build_dataset(Rng(0), 1))
    with pytest.raises(ValueError):
        DiffusionPolicy().fit([])


def test_save_load_roundtrip(tmp_path, tiny_goal_policy):
    path = tiny_goal_policy.save(tmp_path / "p.json")
    back = DiffusionPolicy.load(path)
    o, g = obs_batch(2), obs_batch(2, seed=3)
    assert np.array_equal(back.sample(o, Rng(4), goal=g), tiny_goal_policy.sample(o, Rng(4), goal=g))
    assert back.goal_conditioned and back.loss_curve_ == tiny_goal_policy.loss_curve_


def test_load_rejects_dynamics_checkpoint(tmp_path, tiny_dynamics):
    path = tiny_dynamics.save(tmp_path / "d.json")
    with pytest.raises(ValueError, match="not a policy"):
        DiffusionPolicy.load(path)
