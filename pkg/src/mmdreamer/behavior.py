"""Actor-critic learning by latent imagination."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiagGaussian, Tensor
from .autodiff.nn import MLP, Module
from .errors import ContractError, DimensionError, ParameterError
from .vehicle import TORQUE_MIN, ActionCommand
from .worldmodel import BeliefState, WorldModel

TORQUE_SPAN = 1.0 - TORQUE_MIN


@dataclass(frozen=True)
class ActorCriticConfig:
    horizon: int = 15
    gamma: float = 0.99
    lam: float = 0.95
    hidden: tuple = (200, 200)
    act: str = "elu"
    min_std: float = 1e-4
    init_std: float = 1.0
    mean_scale: float = 5.0
    explore_noise: float = 0.3
    explore_min: float = 0.0
    explore_decay_steps: int = 0
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    clip_norm: float = 100.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ParameterError("gamma and lambda must lie in (0, 1]")
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))

    def noise_at(self, step: int) -> float:
        """Exploration stddev, linearly decayed over ``explore_decay_steps`` env steps."""
        if self.explore_decay_steps <= 0:
            return self.explore_noise
        frac = min(step / self.explore_decay_steps, 1.0)
        return self.explore_noise + frac * (self.explore_min - self.explore_noise)


@dataclass
class SquashedPolicy:
    """Pre-squash Gaussian plus the fixed tanh-and-affine map into the action box."""

    base: DiagGaussian

    def sample(self, noise) -> Tensor:
        return squash(ad.reparameterize(self.base, noise))

    def mode(self) -> Tensor:
        return squash(self.base.mean)


def squash(u: Tensor) -> Tensor:
    """tanh, then torque column to [0.005, 1] and steer column to [-1, 1]."""
    a = ad.tanh(u)
    torque, steer = ad.split(a, [1, 1], axis=-1)
    # shift first so tanh == -1 lands exactly on the lower bound
    torque = ad.affine(ad.affine(torque, 1.0, 1.0), TORQUE_SPAN / 2, TORQUE_MIN)
    return ad.concat([torque, steer], axis=-1)


class Actor(Module):
    def __init__(self, feat_dim: int, config: ActorCriticConfig, rng: np.random.Generator):
        self.config = config
        self.net = MLP([feat_dim, *config.hidden, 4], rng, config.act)
        # softplus(raw + shift) == init_std at raw == 0
        self._std_shift = float(np.log(np.expm1(config.init_std)))

    def __call__(self, features: Tensor) -> SquashedPolicy:
        c = self.config
        mean, raw = ad.split(self.net(features), [2, 2], axis=-1)
        mean = ad.affine(ad.tanh(ad.affine(mean, 1.0 / c.mean_scale)), c.mean_scale)
        std = ad.affine(ad.softplus(ad.affine(raw, 1.0, self._std_shift)), 1.0, c.min_std)
        return SquashedPolicy(DiagGaussian(mean, std))


class Critic(Module):
    def __init__(self, feat_dim: int, config: ActorCriticConfig, rng: np.random.Generator):
        self.net = MLP([feat_dim, *config.hidden, 1], rng, config.act)

    def __call__(self, features: Tensor) -> Tensor:
        out = self.net(features)
        return ad.reshape(out, (out.shape[0],))


def policy_distribution(actor: Actor, z, h) -> SquashedPolicy:
    return actor(ad.concat([z, h], axis=-1))


@dataclass
class ImaginedTrajectory:
    states: list
    actions: list
    rewards: list
    values: list
    gamma: float = 0.99
    lam: float = 0.95
    attached: bool = True

    @property
    def horizon(self) -> int:
        return len(self.actions)


def imagine_rollout(model: WorldModel, actor: Actor, critic: Critic, start: BeliefState, horizon: int,
                    rng: np.random.Generator | None = None, noise: dict | None = None,
                    gamma: float = 0.99, lam: float = 0.95) -> ImaginedTrajectory:
    """Roll the prior forward ``horizon`` steps under the actor.

    Recording happens on whatever tape is active; with none active the
    trajectory is marked detached and cannot feed an actor update.  Noise is
    ``{"action": (H, N, 2), "z": (H, N, z)}`` or drawn from ``rng``.
    """
    if horizon < 1:
        raise ParameterError("imagination horizon must be >= 1")
    n = start.h.shape[0]
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = {"action": rng.standard_normal((horizon, n, 2)),
                 "z": rng.standard_normal((horizon, n, model.config.z_dim))}
    state = BeliefState(start.h.detach(), start.z.detach(), start.prior.detach(),
                        None if start.posterior is None else start.posterior.detach(), start.provenance)
    states, actions, rewards, values = [state], [], [], [critic(state.features)]
    for t in range(horizon):
        action = policy_distribution(actor, state.z, state.h).sample(noise["action"][t])
        state = model.imagine_step(state, action, noise["z"][t])
        states.append(state)
        actions.append(action)
        rewards.append(model.predict_reward(state.z, state.h))
        values.append(critic(state.features))
    return ImaginedTrajectory(states, actions, rewards, values, gamma, lam, ad.core.active_tape() is not None)


def lambda_return(rewards, values, gamma: float, lam: float) -> list:
    """V_lambda for tau = 0..H-1 by backward recursion, bootstrapped with v(H).

    Accepts Tensors (differentiable) or arrays; returns a list of H Tensors.
    """
    rewards, values = list(rewards), list(values)
    if len(values) != len(rewards) + 1:
        raise DimensionError(f"need H+1 values for H rewards, got {len(values)} and {len(rewards)}")
    rewards = [ad.core.as_tensor(r) for r in rewards]
    values = [ad.core.as_tensor(v) for v in values]
    nxt = values[-1]
    out = [None] * len(rewards)
    for t in range(len(rewards) - 1, -1, -1):
        # r + gamma * ((1 - lam) * v(t+1) + lam * V(t+1))
        mix = ad.add(ad.affine(values[t + 1], 1.0 - lam), ad.affine(nxt, lam))
        nxt = ad.add(rewards[t], ad.affine(mix, gamma))
        out[t] = nxt
    return out


def actor_loss(traj: ImaginedTrajectory) -> Tensor:
    """Negative mean of V_lambda over tau < H and the batch; targets stay attached."""
    if not traj.attached:
        raise ContractError("actor_loss needs a trajectory recorded on an active tape")
    returns = lambda_return(traj.rewards, traj.values, traj.gamma, traj.lam)
    return ad.affine(ad.tmean(ad.stack(returns)), -1.0)


def critic_objective(values: Tensor, targets) -> Tensor:
    """mean of 0.5 * (v - target)^2 with the target treated as a constant."""
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if values.shape != targets.shape:
        raise DimensionError(f"values {values.shape} vs targets {targets.shape}")
    return ad.affine(ad.tmean(ad.square(ad.sub(values, Tensor(targets)))), 0.5)


def critic_loss(traj: ImaginedTrajectory, critic: Critic) -> Tensor:
    """Critic regression on detached imagined states towards detached V_lambda targets."""
    with ad.no_record():
        targets = lambda_return([r.detach() for r in traj.rewards], [v.detach() for v in traj.values],
                                traj.gamma, traj.lam)
    feats = [s.features.detach() for s in traj.states[:-1]]
    values = ad.stack([critic(f) for f in feats])
    return critic_objective(values, np.stack([t.data for t in targets]))


def flatten_states(states: list) -> BeliefState:
    """Merge (B,)-batched posterior states over time into one (T*B,) batch of starts."""
    h = np.concatenate([s.h.data for s in states], axis=0)
    z = np.concatenate([s.z.data for s in states], axis=0)
    post = [s.posterior for s in states]
    mean = np.concatenate([p.mean.data for p in post], axis=0)
    std = np.concatenate([p.std.data for p in post], axis=0)
    prior_mean = np.concatenate([s.prior.mean.data for s in states], axis=0)
    prior_std = np.concatenate([s.prior.std.data for s in states], axis=0)
    return BeliefState(Tensor(h), Tensor(z), DiagGaussian(Tensor(prior_mean), Tensor(prior_std)),
                       DiagGaussian(Tensor(mean), Tensor(std)), "posterior")


@dataclass
class BehaviorStats:
    actor_loss: float
    critic_loss: float
    actor_grad_norm: float
    critic_grad_norm: float
    mean_return: float
    extra: dict = field(default_factory=dict)


class BehaviorLearner(Module):
    """Actor, critic, and their optimizers."""

    def __init__(self, feat_dim: int, config: ActorCriticConfig = ActorCriticConfig(), seed: int = 0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.config = config
        rng = np.random.default_rng(seed)
        self.actor = Actor(feat_dim, config, rng)
        self.critic = Critic(feat_dim, config, rng)
        self.actor_opt = ad.Adam(self.actor.parameters("actor."), config.actor_lr, beta1, beta2, eps,
                                 clip_norm=config.clip_norm)
        self.critic_opt = ad.Adam(self.critic.parameters("critic."), config.critic_lr, beta1, beta2, eps,
                                  clip_norm=config.clip_norm)

    def update(self, model: WorldModel, start: BeliefState, rng: np.random.Generator,
               horizon: int | None = None) -> BehaviorStats:
        """One actor step then one critic step; only the respective network changes."""
        c = self.config
        with ad.Tape() as tape:
            traj = imagine_rollout(model, self.actor, self.critic, start, horizon or c.horizon, rng,
                                   gamma=c.gamma, lam=c.lam)
            la = actor_loss(traj)
        a_norm = self.actor_opt.step(ad.backward(tape, la))
        with ad.Tape() as tape:
            lc = critic_loss(traj, self.critic)
        c_norm = self.critic_opt.step(ad.backward(tape, lc))
        return BehaviorStats(la.item(), lc.item(), a_norm, c_norm, -la.item())


def act(model: WorldModel, actor: Actor, prev_belief: BeliefState | None, observation, prev_action,
        explore: bool = False, rng: np.random.Generator | None = None,
        noise_std: float = 0.0) -> tuple[ActionCommand, BeliefState]:
    """Filter one observation and pick an action.

    Without exploration the posterior mean and the squashed policy mean are
    used, so repeated calls are deterministic.  With exploration the latent
    and the policy are sampled and Gaussian noise of ``noise_std`` is added
    before clamping.
    """
    c = model.config
    if prev_belief is None:
        prev_belief = model.initial_state(1)
    prev = np.asarray(prev_action.as_tuple() if isinstance(prev_action, ActionCommand) else prev_action,
                      dtype=np.float64).reshape(1, 2)
    with ad.no_record():
        if explore:
            if rng is None:
                raise ContractError("exploration needs an rng")
            nz = rng.standard_normal((1, c.z_dim))
            nzpi = rng.standard_normal((1, c.zpi_dim))
        else:
            nz = nzpi = None
        belief = model.observe_step(prev_belief, Tensor(prev), observation.lidar[None], observation.image[None],
                                    nz, nzpi)
        policy = policy_distribution(actor, belief.z, belief.h)
        if explore:
            a = policy.sample(rng.standard_normal((1, 2))).data[0]
            a = a + noise_std * rng.standard_normal(2)
        else:
            a = policy.mode().data[0]
    return ActionCommand(a[0], a[1]), belief.detach()
