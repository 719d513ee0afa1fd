from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdreamer import autodiff as ad
from mmdreamer.autodiff import DiagGaussian, Tensor
from mmdreamer.behavior import (
    Actor,
    ActorCriticConfig,
    BehaviorLearner,
    Critic,
    act,
    actor_loss,
    critic_loss,
    critic_objective,
    flatten_states,
    imagine_rollout,
    lambda_return,
    policy_distribution,
    squash,
)
from mmdreamer.errors import ContractError, DimensionError, ParameterError
from mmdreamer.vehicle import TORQUE_MIN
from mmdreamer.worldmodel import TOY_CONFIG, BeliefState, ModelConfig, WorldModel

SMALL_AC = ActorCriticConfig(hidden=(16,))


@pytest.fixture(scope="module")
def wm():
    return WorldModel(ModelConfig(**TOY_CONFIG), seed=0)


def start_states(model, n, seed=0):
    rng = np.random.default_rng(seed)
    res = model.observe_sequence(rng.uniform(0, 15, (n, 2, 8)), rng.uniform(0, 1, (n, 2, 8, 8, 3)),
                                 rng.uniform(-1, 1, (n, 2, 2)), np.zeros((n, 2)), rng=rng)
    return flatten_states([s.detach() for s in res.states])


def feat_dim(model):
    return model.config.z_dim + model.config.h_dim


def snapshot(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- policy

@settings(max_examples=200, deadline=None)
@given(u=st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2))
def test_squashed_actions_stay_in_box(u):
    a = squash(Tensor(np.array([u]))).data[0]
    assert TORQUE_MIN <= a[0] <= 1.0 and -1.0 <= a[1] <= 1.0


def test_zero_noise_sample_is_squashed_mean(rng):
    actor = Actor(6, SMALL_AC, rng)
    pol = actor(Tensor(rng.standard_normal((3, 6))))
    assert np.array_equal(pol.sample(np.zeros((3, 2))).data, pol.mode().data)
    assert np.array_equal(pol.mode().data, squash(pol.base.mean).data)
    assert (pol.base.std.data > 0).all()


def test_actor_gradient_is_nonzero(rng):
    actor = Actor(6, SMALL_AC, rng)
    with ad.Tape() as tape:
        a = actor(Tensor(rng.standard_normal((3, 6)))).sample(rng.standard_normal((3, 2)))
        loss = ad.tsum(a)
    g = ad.backward(tape, loss)
    assert all(np.abs(g[p]).max() > 0 for p in actor.parameters().values())


# ---------------------------------------------------------------- imagination

def test_rollout_shapes_and_provenance(wm):
    learner = BehaviorLearner(feat_dim(wm), SMALL_AC)
    start = start_states(wm, 3)
    with ad.Tape():
        traj = imagine_rollout(wm, learner.actor, learner.critic, start, 5, np.random.default_rng(0))
    assert len(traj.states) == 6 and len(traj.actions) == 5 and len(traj.values) == 6
    assert traj.horizon == 5 and traj.attached
    assert traj.states[0].provenance == "posterior"
    assert all(s.provenance == "prior" and s.posterior is None for s in traj.states[1:])
    assert all(a.shape == (6, 2) for a in traj.actions)


def test_rollout_depends_on_actor(wm):
    start = start_states(wm, 2)
    noise = {"action": np.zeros((4, 4, 2)), "z": np.zeros((4, 4, 4))}
    trajs = [imagine_rollout(wm, BehaviorLearner(feat_dim(wm), SMALL_AC, seed=s).actor,
                             BehaviorLearner(feat_dim(wm), SMALL_AC).critic, start, 4, noise=noise) for s in (0, 1)]
    assert not trajs[0].attached
    assert not np.array_equal(trajs[0].states[-1].h.data, trajs[1].states[-1].h.data)


def test_horizon_must_be_positive(wm):
    learner = BehaviorLearner(feat_dim(wm), SMALL_AC)
    with pytest.raises(ParameterError):
        imagine_rollout(wm, learner.actor, learner.critic, start_states(wm, 1), 0)
    with pytest.raises(ParameterError):
        ActorCriticConfig(horizon=0)


@pytest.mark.parametrize("H", [1, 5, 15])
def test_return_gradient_reaches_first_action(wm, H, rng):
    learner = BehaviorLearner(feat_dim(wm), SMALL_AC)
    start = start_states(wm, 1)
    n = start.h.shape[0]
    first = Tensor(np.tile([0.5, 0.1], (n, 1)), requires_grad=True)
    with ad.Tape() as tape:
        s = wm.imagine_step(start, first, rng.standard_normal((n, 4)))
        rewards, values = [wm.predict_reward(s.z, s.h)], [learner.critic(start.features), learner.critic(s.features)]
        for _ in range(H - 1):
            a = policy_distribution(learner.actor, s.z, s.h).sample(rng.standard_normal((n, 2)))
            s = wm.imagine_step(s, a, rng.standard_normal((n, 4)))
            rewards.append(wm.predict_reward(s.z, s.h))
            values.append(learner.critic(s.features))
        loss = ad.tsum(ad.stack(lambda_return(rewards, values, 0.99, 0.95)))
    assert np.abs(ad.backward(tape, loss)[first]).max() > 0


# ---------------------------------------------------------------- lambda return

def test_lambda_return_examples():
    out = lambda_return([np.array([1.0])], [np.array([0.0]), np.array([2.0])], 0.5, 0.3)
    assert out[0].data[0] == 2.0
    out = lambda_return([np.ones(1)] * 2, [np.zeros(1)] * 3, 1.0, 1.0)
    assert [o.data[0] for o in out] == [2.0, 1.0]
    # lambda = 0 gives one-step targets
    out = lambda_return([np.ones(1)] * 2, [np.full(1, 10.0)] * 3, 0.5, 1e-300)
    assert [o.data[0] for o in out] == pytest.approx([6.0, 6.0])
    with pytest.raises(DimensionError):
        lambda_return([np.ones(1)] * 2, [np.ones(1)] * 2, 0.9, 0.9)


def n_step_mixture(r, v, gamma, lam):
    """Explicit weighted sum of n-step returns."""
    H = len(r)

    def n_step(t, k):
        return sum(gamma ** n * r[t + n] for n in range(k)) + gamma ** k * v[t + k]

    out = []
    for t in range(H):
        rest = H - t
        mix = (1 - lam) * sum(lam ** (k - 1) * n_step(t, k) for k in range(1, rest))
        out.append(mix + lam ** (rest - 1) * n_step(t, rest))
    return out


@settings(max_examples=200, deadline=None)
@given(H=st.integers(1, 15), gamma=st.floats(0.5, 1.0), lam=st.floats(0.01, 1.0), seed=st.integers(0, 10**6))
def test_lambda_return_matches_n_step_mixture(H, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=H), rng.normal(size=H + 1)
    got = [o.data[0] for o in lambda_return([np.array([x]) for x in r], [np.array([x]) for x in v], gamma, lam)]
    np.testing.assert_allclose(got, n_step_mixture(r, v, gamma, lam), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- updates

def test_actor_loss_needs_recorded_trajectory(wm):
    learner = BehaviorLearner(feat_dim(wm), SMALL_AC)
    traj = imagine_rollout(wm, learner.actor, learner.critic, start_states(wm, 1), 3)
    with pytest.raises(ContractError):
        actor_loss(traj)


def test_updates_touch_only_their_own_network(wm):
    learner = BehaviorLearner(feat_dim(wm), ActorCriticConfig(hidden=(16,), actor_lr=1e-2, critic_lr=1e-2))
    start = start_states(wm, 4)
    wm0, actor0, critic0 = snapshot(wm), snapshot(learner.actor), snapshot(learner.critic)
    with ad.Tape() as tape:
        traj = imagine_rollout(wm, learner.actor, learner.critic, start, 5, np.random.default_rng(1))
        la = actor_loss(traj)
    learner.actor_opt.step(ad.backward(tape, la))
    assert same(wm0, snapshot(wm)) and same(critic0, snapshot(learner.critic))
    assert not same(actor0, snapshot(learner.actor))
    actor1 = snapshot(learner.actor)
    with ad.Tape() as tape:
        lc = critic_loss(traj, learner.critic)
    learner.critic_opt.step(ad.backward(tape, lc))
    assert same(wm0, snapshot(wm)) and same(actor1, snapshot(learner.actor))
    assert not same(critic0, snapshot(learner.critic))


class RewardIsTorque:
    """One-step toy dynamics: the next state holds the action and the reward is its torque."""

    config = SimpleNamespace(z_dim=1)

    def imagine_step(self, prev, action, noise_z=None):
        z = ad.core.getitem(action, (slice(None), slice(0, 1)))
        unit = DiagGaussian(Tensor(np.zeros(z.shape)), Tensor(np.ones(z.shape)))
        return BeliefState(action, z, unit, None, "prior")

    def predict_reward(self, z, h):
        return ad.reshape(z, (z.shape[0],))


def test_actor_climbs_toward_upper_torque():
    model = RewardIsTorque()
    learner = BehaviorLearner(3, ActorCriticConfig(hidden=(16,), actor_lr=1e-2, critic_lr=1e-2), seed=0)
    unit = DiagGaussian(Tensor(np.zeros((16, 1))), Tensor(np.ones((16, 1))))
    start = BeliefState(Tensor(np.zeros((16, 2))), Tensor(np.zeros((16, 1))), unit, unit)
    rng = np.random.default_rng(0)

    def mean_torque():
        return policy_distribution(learner.actor, start.z, start.h).mode().data[:, 0].mean()

    before = mean_torque()
    for _ in range(200):
        learner.update(model, start, rng, horizon=3)
    assert mean_torque() > max(before, 0.95)


def test_critic_loss_zero_at_targets_and_gradient(rng):
    targets = rng.normal(size=(5, 3))
    assert critic_objective(Tensor(targets.copy()), targets).item() == 0.0
    v = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    with ad.Tape() as tape:
        loss = critic_objective(v, targets)
    g = ad.backward(tape, loss)[v]
    np.testing.assert_allclose(g, (v.data - targets) / targets.size, rtol=1e-12)
    eps = 1e-6
    bump = v.data.copy()
    bump[2, 1] += eps
    fd = (critic_objective(Tensor(bump), targets).item() - loss.item()) / eps
    assert fd == pytest.approx(g[2, 1], rel=1e-4)
    with pytest.raises(DimensionError):
        critic_objective(v, targets[:4])


def test_critic_regression_decreases(rng):
    critic = Critic(6, SMALL_AC, rng)
    feats = Tensor(rng.normal(size=(32, 6)))
    targets = np.sin(feats.data.sum(1))
    opt = ad.Adam(critic.parameters(), 1e-2)
    losses = []
    for _ in range(200):
        with ad.Tape() as tape:
            loss = critic_objective(critic(feats), targets)
        losses.append(loss.item())
        opt.step(ad.backward(tape, loss))
    assert losses[-1] < 0.5 * losses[0]


# ---------------------------------------------------------------- acting

def test_act_deterministic_without_exploration(wm, rng):
    learner = BehaviorLearner(feat_dim(wm), SMALL_AC)
    obs = SimpleNamespace(lidar=rng.uniform(0, 15, 8), image=rng.uniform(0, 1, (8, 8, 3)))
    a1, b1 = act(wm, learner.actor, None, obs, (0.5, 0.0))
    a2, b2 = act(wm, learner.actor, None, obs, (0.5, 0.0))
    assert a1 == a2 and np.array_equal(b1.h.data, b2.h.data)
    a3, _ = act(wm, learner.actor, b1, obs, a1)
    assert TORQUE_MIN <= a3.torque <= 1 and -1 <= a3.steer <= 1
    with pytest.raises(ContractError):
        act(wm, learner.actor, None, obs, (0.5, 0.0), explore=True)


def test_act_with_exploration_stays_in_box(wm, rng):
    learner = BehaviorLearner(feat_dim(wm), SMALL_AC)
    obs = SimpleNamespace(lidar=rng.uniform(0, 15, 8), image=rng.uniform(0, 1, (8, 8, 3)))
    belief = None
    for _ in range(20):
        a, belief = act(wm, learner.actor, belief, obs, (0.5, 0.0), explore=True, rng=rng, noise_std=3.0)
        assert TORQUE_MIN <= a.torque <= 1 and -1 <= a.steer <= 1


def test_exploration_noise_schedule():
    cfg = ActorCriticConfig(explore_noise=0.3, explore_min=0.1, explore_decay_steps=100)
    assert cfg.noise_at(0) == 0.3 and cfg.noise_at(50) == pytest.approx(0.2) and cfg.noise_at(1000) == 0.1
