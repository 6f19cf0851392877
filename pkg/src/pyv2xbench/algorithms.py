"""
MARL algorithms over the micro-net: IDQN, Hys-IDQN, VDN, QMIX, IA2C, MAA2C, IPPO, MAPPO.

Value-based learners share a replay buffer of joint transitions (independent
learners sample it per agent, CTDE learners jointly). Actor-critic learners
collect on-policy rollouts and update either every n steps (A2C) or with
clipped-surrogate epochs (PPO).
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from typing import Any, get_type_hints

import numpy as np

from .exceptions import ConfigurationError, TrainingDivergedError
from .micronet import (
    DenseNetwork,
    ForwardCache,
    OptimizerState,
    adam_step,
    clip_grad_norm,
    soft_update,
)
from .models import Algorithm, Task, coerce_value

logger = logging.getLogger(__name__)

_ADV_EPS = 1e-8


@dataclass(frozen=True)
class Hyperparameters:
    """Training hyperparameters of one (algorithm, task) pair."""

    lr: float = field(default=3e-5, metadata={"description": "Q-network or actor learning rate"})
    critic_lr: float = field(default=2e-4, metadata={"description": "Critic learning rate"})
    mixer_lr: float = field(default=1e-6, metadata={"description": "QMIX mixing network learning rate"})
    gamma: float = field(default=0.9, metadata={"description": "Discount factor"})
    batch_size: int = field(
        default=64,
        metadata={"description": "Replay batch, A2C n-step length or PPO rollout length"},
    )
    tau: float = field(default=5e-3, metadata={"description": "Soft target update rate"})
    epsilon_start: float = field(default=1.0, metadata={"description": "Initial exploration rate"})
    epsilon_end: float = field(default=0.02, metadata={"description": "Final exploration rate"})
    anneal_episodes: int = field(default=40000, metadata={"description": "Linear epsilon anneal length"})
    hysteretic_alpha: float = field(default=1.0, metadata={"description": "Positive-TD gradient scale"})
    hysteretic_beta: float = field(default=0.2, metadata={"description": "Negative-TD gradient scale"})
    ppo_epochs: int = field(default=10, metadata={"description": "PPO epochs per rollout"})
    minibatches: int = field(default=4, metadata={"description": "PPO minibatches per epoch"})
    clip_ratio: float = field(default=0.2, metadata={"description": "PPO ratio clip"})
    entropy_coef: float = field(default=0.001, metadata={"description": "PPO entropy bonus"})
    parameter_sharing: bool = field(default=False, metadata={"description": "One network for all agents"})
    episodes: int = field(default=50000, metadata={"description": "Training episodes"})
    hidden_dim: int = field(default=128, metadata={"description": "Hidden layer width"})
    hidden_layers: int = field(default=2, metadata={"description": "Number of hidden layers"})
    replay_capacity: int = field(default=100_000, metadata={"description": "Replay buffer size"})
    warmup: int = field(default=1000, metadata={"description": "Transitions before the first update"})
    grad_clip: float = field(default=10.0, metadata={"description": "Gradient norm clip (actor-critic)"})
    mixer_embed: int = field(default=32, metadata={"description": "QMIX mixing embed dimension"})

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                continue
            if f.name in ("epsilon_end", "tau", "entropy_coef", "gamma") and value >= 0:
                continue
            if isinstance(value, int | float) and value <= 0 and f.name != "warmup":
                raise ConfigurationError(f"hyperparameter {f.name} must be positive, got {value}")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ConfigurationError("epsilon schedule must satisfy 0 <= end <= start <= 1")

    @classmethod
    def defaults(cls, algorithm: Algorithm, task: Task) -> Hyperparameters:
        """Appendix defaults for an (algorithm, task) pair."""
        multi_location = not task.is_single_location
        if algorithm.value_based:
            if task is Task.NFIG:
                lr, episodes, anneal = 3e-5, 50000, 40000
            elif task.is_single_location:
                lr, episodes, anneal = 3e-5, 3000, 2400
            else:
                episodes, anneal = 30000, 24000
                if algorithm in (Algorithm.VDN, Algorithm.QMIX):
                    lr = 1e-5
                else:
                    lr = 1e-6 if task is Task.POSIG else 1e-5
            return cls(
                lr=lr,
                gamma=0.9,
                batch_size=64,
                tau=5e-3,
                mixer_lr=1e-6,
                anneal_episodes=anneal,
                episodes=episodes,
                parameter_sharing=False,
            )

        episodes = 50000 if task is Task.NFIG else (100000 if multi_location else 30000)
        if algorithm.proximal:
            return cls(
                lr=4e-4,
                critic_lr=6e-4,
                gamma=0.99,
                batch_size=256,
                minibatches=4,
                ppo_epochs=10,
                entropy_coef=0.001,
                clip_ratio=0.2,
                parameter_sharing=True,
                episodes=episodes,
                anneal_episodes=1,
            )
        lr = 5e-4 if multi_location else 2e-4
        return cls(
            lr=lr,
            critic_lr=lr,
            gamma=0.9,
            batch_size=8,
            tau=0.01,
            parameter_sharing=multi_location,
            episodes=episodes,
            anneal_episodes=1,
        )

    def with_overrides(self, overrides: Mapping[str, Any]) -> Hyperparameters:
        """
        Copy with fields replaced; string values are coerced to the field type.

        Raises:
            ConfigurationError: For unknown keys or unparsable values
        """
        valid = [f.name for f in fields(self)]
        hints = get_type_hints(type(self))
        changes = {}
        for key, value in overrides.items():
            if key not in valid:
                raise ConfigurationError(
                    f"unknown hyperparameter {key!r}; valid keys: {', '.join(valid)}", valid
                )
            try:
                changes[key] = coerce_value(value, hints[key])
            except ValueError as err:
                raise ConfigurationError(f"invalid value for {key}: {err}") from err
        return replace(self, **changes)

    def scaled(self, scale: float) -> Hyperparameters:
        """Episode budget and anneal length multiplied by ``scale``."""
        if scale <= 0:
            raise ConfigurationError(f"scale must be > 0, got {scale}")
        return replace(
            self,
            episodes=max(math.ceil(self.episodes * scale), 100),
            anneal_episodes=max(math.ceil(self.anneal_episodes * scale), 1),
        )

    def layer_sizes(self, input_dim: int, output_dim: int) -> list[int]:
        return [input_dim] + [self.hidden_dim] * self.hidden_layers + [output_dim]

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def epsilon_at(episode: int, hp: Hyperparameters) -> float:
    """Linearly annealed exploration rate, constant after ``anneal_episodes``."""
    frac = min(max(episode, 0) / hp.anneal_episodes, 1.0)
    return hp.epsilon_start + frac * (hp.epsilon_end - hp.epsilon_start)


@dataclass(eq=False)
class TransitionBatch:
    """
    Sampled transitions, indexed (batch, agent).

    For joint sampling every agent column comes from the same transition.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    states: np.ndarray
    next_states: np.ndarray

    @property
    def size(self) -> int:
        return int(self.actions.shape[0])


class ReplayBuffer:
    """
    FIFO ring buffer of joint transitions with uniform sampling.

    The global state is stored once per transition. Observations that only
    repeat the global state for every agent are rebuilt from it on sampling;
    the per-agent observation arrays are allocated on the first transition
    whose observations differ from the state.
    """

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, state_dim: int) -> None:
        self.capacity = capacity
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.obs: np.ndarray | None = None
        self.next_obs: np.ndarray | None = None
        self.obs_from_state = np.ones(capacity, dtype=bool)
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @staticmethod
    def _repeats_state(obs: np.ndarray, state: np.ndarray) -> bool:
        return obs.shape[-1] == state.shape[-1] and bool(np.all(obs == state))

    def add(
        self,
        obs: np.ndarray,
        state: np.ndarray,
        actions: np.ndarray,
        reward: float,
        next_obs: np.ndarray,
        next_state: np.ndarray,
        done: bool,
    ) -> None:
        i = self._next
        self.states[i], self.next_states[i], self.actions[i] = state, next_state, actions
        self.rewards[i], self.dones[i] = reward, float(done)
        from_state = self._repeats_state(obs, state) and self._repeats_state(
            next_obs, next_state
        )
        self.obs_from_state[i] = from_state
        if not from_state:
            if self.obs is None or self.next_obs is None:
                shape = (self.capacity, self.n_agents, self.obs_dim)
                self.obs, self.next_obs = np.zeros(shape), np.zeros(shape)
                logger.debug(f"Replay buffer allocated per-agent observations {shape}")
            self.obs[i], self.next_obs[i] = obs, next_obs
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _observations(
        self, stored: np.ndarray | None, states: np.ndarray, idx: np.ndarray
    ) -> np.ndarray:
        if stored is None:
            return states[idx]
        values = stored[idx, np.arange(self.n_agents)]
        if states.shape[1] != self.obs_dim:
            return values
        return np.where(self.obs_from_state[idx][..., None], states[idx], values)

    def sample(
        self, batch_size: int, rng: np.random.Generator, per_agent: bool = False
    ) -> TransitionBatch:
        """
        Uniform sample of stored transitions.

        Args:
            batch_size: Number of transitions
            rng: Random stream
            per_agent: Draw independent indices for every agent

        Raises:
            ValueError: If fewer than ``batch_size`` transitions are stored
        """
        if self._size < batch_size:
            raise ValueError(f"buffer holds {self._size} transitions, need {batch_size}")
        agents = np.arange(self.n_agents)
        if per_agent:
            idx = np.stack(
                [rng.integers(self._size, size=batch_size) for _ in agents], axis=1
            )
        else:
            idx = np.repeat(rng.integers(self._size, size=batch_size)[:, None], self.n_agents, 1)
        joint = idx[:, 0]
        return TransitionBatch(
            obs=self._observations(self.obs, self.states, idx),
            actions=self.actions[idx, agents],
            rewards=self.rewards[idx],
            next_obs=self._observations(self.next_obs, self.next_states, idx),
            dones=self.dones[idx],
            states=self.states[joint],
            next_states=self.next_states[joint],
        )


@dataclass
class RolloutBuffer:
    """On-policy trajectory store, cleared after every update."""

    obs: list[np.ndarray] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    log_probs: list[np.ndarray] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    next_obs: list[np.ndarray] = field(default_factory=list)
    next_states: list[np.ndarray] = field(default_factory=list)
    dones: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    def add(
        self,
        obs: np.ndarray,
        state: np.ndarray,
        actions: np.ndarray,
        log_probs: np.ndarray,
        reward: float,
        next_obs: np.ndarray,
        next_state: np.ndarray,
        done: bool,
    ) -> None:
        self.obs.append(np.asarray(obs, dtype=float))
        self.states.append(np.asarray(state, dtype=float))
        self.actions.append(np.asarray(actions, dtype=np.int64))
        self.log_probs.append(np.asarray(log_probs, dtype=float))
        self.rewards.append(float(reward))
        self.next_obs.append(np.asarray(next_obs, dtype=float))
        self.next_states.append(np.asarray(next_state, dtype=float))
        self.dones.append(bool(done))

    def clear(self) -> None:
        for f in fields(self):
            getattr(self, f.name).clear()

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: np.asarray(getattr(self, f.name)) for f in fields(self)}


def discounted_returns(
    rewards: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray, gamma: float
) -> np.ndarray:
    """
    Bootstrapped discounted returns of a rollout segment.

    ``bootstrap`` is the value of the state after the last transition; it is
    ignored when that transition ended an episode. Works per agent when the
    bootstrap has an agent axis.
    """
    returns = np.zeros((len(rewards),) + np.shape(bootstrap))
    running = np.asarray(bootstrap, dtype=float)
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * (1.0 - dones[t]) * running
        returns[t] = running
    return returns


def _one_hot(actions: np.ndarray, n_actions: int) -> np.ndarray:
    return np.eye(n_actions)[actions]


def policy_gradient(
    actor: DenseNetwork, inputs: np.ndarray, actions: np.ndarray, advantages: np.ndarray
) -> tuple[np.ndarray, float]:
    """Gradient of -mean(log pi(a|x) * A) for a softmax actor."""
    probs, cache = actor.forward(inputs)
    n = len(actions)
    log_pi = np.log(probs[np.arange(n), actions] + 1e-12)
    grad_logits = -advantages[:, None] * (_one_hot(actions, actor.output_dim) - probs) / n
    grads, _ = actor.backward(cache, grad_logits, pre_activation=True)
    return grads, float(-np.mean(log_pi * advantages))


def ppo_policy_gradient(
    actor: DenseNetwork,
    inputs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    clip_ratio: float,
    entropy_coef: float,
) -> tuple[np.ndarray, float, float]:
    """
    Gradient of the clipped surrogate loss with an entropy bonus.

    Samples whose clipped term is the minimum contribute no surrogate
    gradient.

    Returns:
        Tuple of the flat gradient, the surrogate loss and the mean entropy
    """
    probs, cache = actor.forward(inputs)
    n = len(actions)
    log_probs_all = np.log(probs + 1e-12)
    log_pi = log_probs_all[np.arange(n), actions]
    ratio = np.exp(log_pi - old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages
    active = unclipped <= clipped
    surrogate = np.where(active, unclipped, clipped)

    coeff = np.where(active, -advantages * ratio, 0.0) / n
    grad_logits = coeff[:, None] * (_one_hot(actions, actor.output_dim) - probs)
    entropy = -np.sum(probs * log_probs_all, axis=1)
    grad_logits += entropy_coef * probs * (log_probs_all + entropy[:, None]) / n
    grads, _ = actor.backward(cache, grad_logits, pre_activation=True)
    return grads, float(-np.mean(surrogate)), float(np.mean(entropy))


def value_gradient(
    critic: DenseNetwork, inputs: np.ndarray, targets: np.ndarray
) -> tuple[np.ndarray, float, np.ndarray]:
    """Gradient of mean((target - V)^2); also returns the predicted values."""
    values, cache = critic.forward(inputs)
    values = values[:, 0]
    error = targets - values
    grads, _ = critic.backward(cache, (-2.0 * error / len(targets))[:, None])
    return grads, float(np.mean(error**2)), values


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass
class MixerCache:
    q: np.ndarray
    w1_raw: np.ndarray
    w2_raw: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    caches: dict[str, ForwardCache]


class QMixer:
    """
    Monotonic mixing network conditioned on the global state.

    Q_tot = |w2(s)| . elu(q |W1(s)| + b1(s)) + b2(s); the absolute values keep
    every partial derivative dQ_tot/dQ_i non-negative.
    """

    def __init__(
        self,
        n_agents: int,
        state_dim: int,
        embed_dim: int = 32,
        rng: np.random.Generator | None = None,
        networks: Mapping[str, DenseNetwork] | None = None,
    ) -> None:
        self.n_agents = n_agents
        self.embed_dim = embed_dim
        if networks is not None:
            self.networks = {name: net.copy() for name, net in networks.items()}
            return
        self.networks = {
            "hyper_w1": DenseNetwork([state_dim, n_agents * embed_dim], rng=rng),
            "hyper_b1": DenseNetwork([state_dim, embed_dim], rng=rng),
            "hyper_w2": DenseNetwork([state_dim, embed_dim], rng=rng),
            "hyper_b2": DenseNetwork([state_dim, embed_dim, 1], rng=rng),
        }

    def copy(self) -> QMixer:
        return QMixer(self.n_agents, 0, self.embed_dim, networks=self.networks)

    def forward(self, q: np.ndarray, states: np.ndarray) -> tuple[np.ndarray, MixerCache]:
        """Mix (B, L) agent values into (B,) joint values."""
        caches: dict[str, ForwardCache] = {}
        outputs = {}
        for name, net in self.networks.items():
            outputs[name], caches[name] = net.forward(states)
        batch = q.shape[0]
        w1_raw = outputs["hyper_w1"].reshape(batch, self.n_agents, self.embed_dim)
        hidden_pre = np.einsum("bl,ble->be", q, np.abs(w1_raw)) + outputs["hyper_b1"]
        hidden = _elu(hidden_pre)
        w2_raw = outputs["hyper_w2"]
        q_tot = np.sum(hidden * np.abs(w2_raw), axis=1) + outputs["hyper_b2"][:, 0]
        return q_tot, MixerCache(q, w1_raw, w2_raw, hidden_pre, hidden, caches)

    def backward(
        self, cache: MixerCache, grad_q_tot: np.ndarray
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Hypernetwork gradients and dLoss/dq for a (B,) output gradient."""
        g = grad_q_tot[:, None]
        grad_w2 = g * cache.hidden * np.sign(cache.w2_raw)
        grad_hidden_pre = g * np.abs(cache.w2_raw) * _elu_grad(cache.hidden_pre)
        grad_w1 = (
            cache.q[:, :, None] * grad_hidden_pre[:, None, :] * np.sign(cache.w1_raw)
        ).reshape(cache.q.shape[0], -1)
        grad_q = np.einsum("be,ble->bl", grad_hidden_pre, np.abs(cache.w1_raw))
        output_grads = {
            "hyper_w1": grad_w1,
            "hyper_b1": grad_hidden_pre,
            "hyper_w2": grad_w2,
            "hyper_b2": g,
        }
        grads = {
            name: self.networks[name].backward(cache.caches[name], output_grads[name])[0]
            for name in self.networks
        }
        return grads, grad_q


class Learner(ABC):
    """Act / observe / update cycle shared by every algorithm."""

    def __init__(
        self,
        algorithm: Algorithm,
        n_agents: int,
        obs_dim: int,
        state_dim: int,
        n_actions: int,
        hp: Hyperparameters,
        rng: np.random.Generator,
    ) -> None:
        self.algorithm = algorithm
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.hp = hp
        self.rng = rng
        self.sharing = hp.parameter_sharing
        self.updates = 0
        self.episode = 0

    @property
    def input_dim(self) -> int:
        return self.obs_dim + (self.n_agents if self.sharing else 0)

    def agent_inputs(self, obs: np.ndarray, agent: int) -> np.ndarray:
        """Rows of agent ``agent`` from (B, L, d) observations, id-tagged when sharing."""
        x = obs[:, agent, :]
        if not self.sharing:
            return x
        tag = np.zeros((x.shape[0], self.n_agents))
        tag[:, agent] = 1.0
        return np.concatenate([x, tag], axis=1)

    def net_index(self, agent: int) -> int:
        return 0 if self.sharing else agent

    def begin_episode(self, episode: int) -> None:
        self.episode = episode

    def _check_finite(self, name: str, value: float) -> None:
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"{self.algorithm.value} {name} diverged at update {self.updates}",
                {
                    "algorithm": self.algorithm.value,
                    "loss": name,
                    "update": self.updates,
                    "episode": self.episode,
                },
            )

    @abstractmethod
    def act(self, obs: np.ndarray, explore: bool = True) -> np.ndarray:
        """Joint action for (L, obs_dim) observations."""

    @abstractmethod
    def observe(
        self,
        obs: np.ndarray,
        state: np.ndarray,
        actions: np.ndarray,
        reward: float,
        next_obs: np.ndarray,
        next_state: np.ndarray,
        done: bool,
    ) -> dict[str, float] | None:
        """Record a transition; returns losses when an update ran."""

    @abstractmethod
    def networks(self) -> dict[str, DenseNetwork]:
        """All parameters by name, for checkpoints."""

    def load_networks(self, networks: Mapping[str, DenseNetwork]) -> None:
        """Copy parameters from a checkpoint into this learner."""
        own = self.networks()
        missing = sorted(set(own) - set(networks))
        if missing:
            raise ConfigurationError(f"checkpoint lacks networks {missing}")
        for name, net in own.items():
            net.set_parameters(networks[name].theta)


class ValueLearner(Learner):
    """IDQN, Hys-IDQN, VDN and QMIX."""

    def __init__(
        self,
        algorithm: Algorithm,
        n_agents: int,
        obs_dim: int,
        state_dim: int,
        n_actions: int,
        hp: Hyperparameters,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(algorithm, n_agents, obs_dim, state_dim, n_actions, hp, rng)
        n_nets = 1 if self.sharing else n_agents
        sizes = hp.layer_sizes(self.input_dim, n_actions)
        self.q_nets = [DenseNetwork(sizes, rng=rng) for _ in range(n_nets)]
        self.targets = [net.copy() for net in self.q_nets]
        self.optimizers = [OptimizerState.for_network(net, hp.lr) for net in self.q_nets]
        self.buffer = ReplayBuffer(hp.replay_capacity, n_agents, obs_dim, state_dim)
        self.epsilon = hp.epsilon_start
        self.mixer: QMixer | None = None
        self.target_mixer: QMixer | None = None
        if algorithm is Algorithm.QMIX:
            self.mixer = QMixer(n_agents, state_dim, hp.mixer_embed, rng)
            self.target_mixer = self.mixer.copy()
            self.mixer_optimizers = {
                name: OptimizerState.for_network(net, hp.mixer_lr)
                for name, net in self.mixer.networks.items()
            }

    def begin_episode(self, episode: int) -> None:
        super().begin_episode(episode)
        self.epsilon = epsilon_at(episode, self.hp)

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        """(L, |A|) Q-values for (L, obs_dim) observations."""
        batch = np.asarray(obs, dtype=float)[None]
        return np.stack(
            [
                self.q_nets[self.net_index(i)](self.agent_inputs(batch, i))[0]
                for i in range(self.n_agents)
            ]
        )

    def act_epsilon(self, obs: np.ndarray, epsilon: float) -> np.ndarray:
        """Per-agent epsilon-greedy; greedy ties go to the lowest action index."""
        greedy = np.argmax(self.q_values(obs), axis=1)
        if epsilon <= 0:
            return greedy.astype(np.int64)
        explore = self.rng.random(self.n_agents) < epsilon
        random_actions = self.rng.integers(self.n_actions, size=self.n_agents)
        return np.where(explore, random_actions, greedy).astype(np.int64)

    def act(self, obs: np.ndarray, explore: bool = True) -> np.ndarray:
        return self.act_epsilon(obs, self.epsilon if explore else 0.0)

    def observe(
        self,
        obs: np.ndarray,
        state: np.ndarray,
        actions: np.ndarray,
        reward: float,
        next_obs: np.ndarray,
        next_state: np.ndarray,
        done: bool,
    ) -> dict[str, float] | None:
        self.buffer.add(obs, state, actions, reward, next_obs, next_state, done)
        if len(self.buffer) < max(self.hp.warmup, self.hp.batch_size):
            return None
        return self.update()

    def update(self) -> dict[str, float]:
        independent = self.algorithm in (Algorithm.IDQN, Algorithm.HYS_IDQN)
        batch = self.buffer.sample(self.hp.batch_size, self.rng, per_agent=independent)
        if self.algorithm is Algorithm.IDQN:
            loss = self.dqn_update(batch)
        elif self.algorithm is Algorithm.HYS_IDQN:
            loss = self.hysteretic_dqn_update(batch)
        elif self.algorithm is Algorithm.VDN:
            loss = self.vdn_update(batch)
        else:
            loss = self.qmix_update(batch)
        self.updates += 1
        self._check_finite("td_loss", loss)
        return {"td_loss": loss}

    def _apply(self, grads_by_net: dict[int, np.ndarray]) -> None:
        for k, grads in grads_by_net.items():
            adam_step(self.q_nets[k], grads, self.optimizers[k])
        for target, online in zip(self.targets, self.q_nets, strict=True):
            soft_update(target, online, self.hp.tau)

    def _accumulate(self, store: dict[int, np.ndarray], agent: int, grads: np.ndarray) -> None:
        k = self.net_index(agent)
        store[k] = store[k] + grads if k in store else grads

    def td_gradients(
        self, batch: TransitionBatch, hysteretic: bool
    ) -> tuple[dict[int, np.ndarray], float]:
        """
        Independent-learner TD gradients per network.

        The gradient of each sample is scaled by alpha (non-negative TD error)
        or beta (negative TD error) when ``hysteretic`` is set.
        """
        grads_by_net: dict[int, np.ndarray] = {}
        losses = []
        rows = np.arange(batch.size)
        for agent in range(self.n_agents):
            k = self.net_index(agent)
            q, cache = self.q_nets[k].forward(self.agent_inputs(batch.obs, agent))
            next_q = self.targets[k](self.agent_inputs(batch.next_obs, agent)).max(axis=1)
            actions = batch.actions[:, agent]
            targets = batch.rewards[:, agent] + self.hp.gamma * (
                1.0 - batch.dones[:, agent]
            ) * next_q
            td = targets - q[rows, actions]
            weights = (
                np.where(td >= 0, self.hp.hysteretic_alpha, self.hp.hysteretic_beta)
                if hysteretic
                else np.ones_like(td)
            )
            grad_out = np.zeros_like(q)
            grad_out[rows, actions] = -2.0 * weights * td / batch.size
            grads, _ = self.q_nets[k].backward(cache, grad_out)
            self._accumulate(grads_by_net, agent, grads)
            losses.append(float(np.mean(td**2)))
        return grads_by_net, float(np.mean(losses))

    def dqn_update(self, batch: TransitionBatch) -> float:
        """Per-agent TD(0) update on y = r + gamma (1 - done) max_a' Q_target."""
        grads, loss = self.td_gradients(batch, hysteretic=False)
        self._apply(grads)
        return loss

    def hysteretic_dqn_update(self, batch: TransitionBatch) -> float:
        """As :meth:`dqn_update` with negative-TD gradients scaled by beta."""
        grads, loss = self.td_gradients(batch, hysteretic=True)
        self._apply(grads)
        return loss

    def _chosen_q(
        self, batch: TransitionBatch
    ) -> tuple[np.ndarray, np.ndarray, list[tuple[np.ndarray, ForwardCache]]]:
        """Chosen-action Q (B, L), greedy target Q (B, L), and forward results."""
        rows = np.arange(batch.size)
        chosen, greedy_next, forwards = [], [], []
        for agent in range(self.n_agents):
            k = self.net_index(agent)
            q, cache = self.q_nets[k].forward(self.agent_inputs(batch.obs, agent))
            forwards.append((q, cache))
            chosen.append(q[rows, batch.actions[:, agent]])
            greedy_next.append(
                self.targets[k](self.agent_inputs(batch.next_obs, agent)).max(axis=1)
            )
        return np.stack(chosen, axis=1), np.stack(greedy_next, axis=1), forwards

    def _backprop_agents(
        self,
        batch: TransitionBatch,
        forwards: list[tuple[np.ndarray, ForwardCache]],
        grad_q: np.ndarray,
    ) -> dict[int, np.ndarray]:
        rows = np.arange(batch.size)
        grads_by_net: dict[int, np.ndarray] = {}
        for agent, (q, cache) in enumerate(forwards):
            grad_out = np.zeros_like(q)
            grad_out[rows, batch.actions[:, agent]] = grad_q[:, agent]
            grads, _ = self.q_nets[self.net_index(agent)].backward(cache, grad_out)
            self._accumulate(grads_by_net, agent, grads)
        return grads_by_net

    def vdn_update(self, batch: TransitionBatch) -> float:
        """TD update of Q_tot = sum_i Q_i(o_i, a_i)."""
        chosen, greedy_next, forwards = self._chosen_q(batch)
        q_tot = chosen.sum(axis=1)
        targets = batch.rewards[:, 0] + self.hp.gamma * (1.0 - batch.dones[:, 0]) * (
            greedy_next.sum(axis=1)
        )
        td = targets - q_tot
        grad_q = np.repeat((-2.0 * td / batch.size)[:, None], self.n_agents, axis=1)
        self._apply(self._backprop_agents(batch, forwards, grad_q))
        return float(np.mean(td**2))

    def qmix_update(self, batch: TransitionBatch) -> float:
        """TD update of the monotonic mixture of agent values."""
        assert self.mixer is not None and self.target_mixer is not None
        chosen, greedy_next, forwards = self._chosen_q(batch)
        q_tot, mixer_cache = self.mixer.forward(chosen, batch.states)
        next_tot, _ = self.target_mixer.forward(greedy_next, batch.next_states)
        targets = batch.rewards[:, 0] + self.hp.gamma * (1.0 - batch.dones[:, 0]) * next_tot
        td = targets - q_tot
        mixer_grads, grad_q = self.mixer.backward(mixer_cache, -2.0 * td / batch.size)
        self._apply(self._backprop_agents(batch, forwards, grad_q))
        for name, net in self.mixer.networks.items():
            adam_step(net, mixer_grads[name], self.mixer_optimizers[name])
            soft_update(self.target_mixer.networks[name], net, self.hp.tau)
        return float(np.mean(td**2))

    def networks(self) -> dict[str, DenseNetwork]:
        nets = {f"q_{k}": net for k, net in enumerate(self.q_nets)}
        nets.update({f"q_target_{k}": net for k, net in enumerate(self.targets)})
        if self.mixer is not None and self.target_mixer is not None:
            nets.update({f"mixer_{n}": net for n, net in self.mixer.networks.items()})
            nets.update(
                {f"mixer_target_{n}": net for n, net in self.target_mixer.networks.items()}
            )
        return nets


class ActorCriticLearner(Learner):
    """IA2C, MAA2C, IPPO and MAPPO."""

    def __init__(
        self,
        algorithm: Algorithm,
        n_agents: int,
        obs_dim: int,
        state_dim: int,
        n_actions: int,
        hp: Hyperparameters,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(algorithm, n_agents, obs_dim, state_dim, n_actions, hp, rng)
        self.centralized = algorithm.centralized
        n_nets = 1 if self.sharing else n_agents
        actor_sizes = hp.layer_sizes(self.input_dim, n_actions)
        self.actors = [DenseNetwork(actor_sizes, "softmax", rng=rng) for _ in range(n_nets)]
        self.actor_optimizers = [OptimizerState.for_network(a, hp.lr) for a in self.actors]
        if self.centralized:
            critic_sizes = hp.layer_sizes(state_dim, 1)
            n_critics = 1
        else:
            critic_sizes = hp.layer_sizes(self.input_dim, 1)
            n_critics = n_nets
        self.critics = [DenseNetwork(critic_sizes, rng=rng) for _ in range(n_critics)]
        self.critic_targets = [c.copy() for c in self.critics]
        self.critic_optimizers = [
            OptimizerState.for_network(c, hp.critic_lr) for c in self.critics
        ]
        self.rollout = RolloutBuffer()
        self._last_log_probs = np.zeros(n_agents)

    def policy(self, obs: np.ndarray) -> np.ndarray:
        """(L, |A|) action probabilities."""
        batch = np.asarray(obs, dtype=float)[None]
        return np.stack(
            [
                self.actors[self.net_index(i)](self.agent_inputs(batch, i))[0]
                for i in range(self.n_agents)
            ]
        )

    def act(self, obs: np.ndarray, explore: bool = True) -> np.ndarray:
        """Sample from the policy, or take its mode when not exploring."""
        probs = self.policy(obs)
        if explore:
            cumulative = np.cumsum(probs, axis=1)
            draws = self.rng.random(self.n_agents)[:, None] * cumulative[:, -1:]
            actions = np.minimum((cumulative < draws).sum(axis=1), self.n_actions - 1)
        else:
            actions = np.argmax(probs, axis=1)
        self._last_log_probs = np.log(probs[np.arange(self.n_agents), actions] + 1e-12)
        return actions.astype(np.int64)

    def observe(
        self,
        obs: np.ndarray,
        state: np.ndarray,
        actions: np.ndarray,
        reward: float,
        next_obs: np.ndarray,
        next_state: np.ndarray,
        done: bool,
    ) -> dict[str, float] | None:
        self.rollout.add(
            obs, state, actions, self._last_log_probs, reward, next_obs, next_state, done
        )
        if len(self.rollout) < self.hp.batch_size:
            return None
        if self.algorithm.proximal:
            losses = self.ppo_update(self.rollout)
        else:
            losses = self.a2c_update(self.rollout)
        self.rollout.clear()
        self.updates += 1
        for name, value in losses.items():
            self._check_finite(name, value)
        return losses

    def _critic_index(self, agent: int) -> int:
        return 0 if self.centralized else self.net_index(agent)

    def _critic_inputs(
        self, obs: np.ndarray, states: np.ndarray, agent: int
    ) -> np.ndarray:
        return states if self.centralized else self.agent_inputs(obs, agent)

    def _values(
        self, obs: np.ndarray, states: np.ndarray, target: bool = False
    ) -> np.ndarray:
        """(T,) centralized or (T, L) per-agent state values."""
        critics = self.critic_targets if target else self.critics
        if self.centralized:
            return critics[0](states)[:, 0]
        return np.stack(
            [
                critics[self._critic_index(i)](self.agent_inputs(obs, i))[:, 0]
                for i in range(self.n_agents)
            ],
            axis=1,
        )

    def _agent_advantages(self, advantages: np.ndarray, agent: int) -> np.ndarray:
        return advantages if advantages.ndim == 1 else advantages[:, agent]

    def _clip_and_step(
        self,
        grads_by_net: dict[int, np.ndarray],
        nets: list[DenseNetwork],
        optimizers: list[OptimizerState],
    ) -> None:
        for k, grads in grads_by_net.items():
            clipped, _ = clip_grad_norm(grads, self.hp.grad_clip)
            adam_step(nets[k], clipped, optimizers[k])

    def _critic_step(
        self, obs: np.ndarray, states: np.ndarray, returns: np.ndarray
    ) -> float:
        grads_by_net: dict[int, np.ndarray] = {}
        losses = []
        agents = [0] if self.centralized else range(self.n_agents)
        for agent in agents:
            k = self._critic_index(agent)
            target = returns if returns.ndim == 1 else returns[:, agent]
            grads, loss, _ = value_gradient(
                self.critics[k], self._critic_inputs(obs, states, agent), target
            )
            grads_by_net[k] = grads_by_net[k] + grads if k in grads_by_net else grads
            losses.append(loss)
        self._clip_and_step(grads_by_net, self.critics, self.critic_optimizers)
        return float(np.mean(losses))

    def a2c_update(self, rollout: RolloutBuffer) -> dict[str, float]:
        """
        n-step advantage actor-critic update.

        Returns bootstrap from the soft-updated target critic; the critic is
        local (IA2C) or the global state (MAA2C).
        """
        data = rollout.arrays()
        obs, states, actions = data["obs"], data["states"], data["actions"]
        last_value = self._values(
            data["next_obs"][-1:], data["next_states"][-1:], target=True
        )[0]
        returns = discounted_returns(
            data["rewards"], data["dones"].astype(float), last_value, self.hp.gamma
        )
        advantages = returns - self._values(obs, states)

        actor_grads: dict[int, np.ndarray] = {}
        actor_losses = []
        for agent in range(self.n_agents):
            k = self.net_index(agent)
            grads, loss = policy_gradient(
                self.actors[k],
                self.agent_inputs(obs, agent),
                actions[:, agent],
                self._agent_advantages(advantages, agent),
            )
            actor_grads[k] = actor_grads[k] + grads if k in actor_grads else grads
            actor_losses.append(loss)
        self._clip_and_step(actor_grads, self.actors, self.actor_optimizers)
        critic_loss = self._critic_step(obs, states, returns)
        for target, online in zip(self.critic_targets, self.critics, strict=True):
            soft_update(target, online, self.hp.tau)
        return {"actor_loss": float(np.mean(actor_losses)), "critic_loss": critic_loss}

    def ppo_update(self, rollout: RolloutBuffer) -> dict[str, float]:
        """
        Clipped-surrogate update over several epochs of shuffled minibatches.

        Value targets are full-rollout bootstrapped returns; advantages are
        normalized over the batch.
        """
        data = rollout.arrays()
        obs, states, actions = data["obs"], data["states"], data["actions"]
        old_log_probs = data["log_probs"]
        last_value = self._values(data["next_obs"][-1:], data["next_states"][-1:])[0]
        returns = discounted_returns(
            data["rewards"], data["dones"].astype(float), last_value, self.hp.gamma
        )
        advantages = returns - self._values(obs, states)
        advantages = (advantages - advantages.mean()) / (advantages.std() + _ADV_EPS)

        n = len(returns)
        minibatch = max(n // self.hp.minibatches, 1)
        actor_losses, critic_losses, entropies = [], [], []
        for _ in range(self.hp.ppo_epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, minibatch):
                rows = order[start : start + minibatch]
                actor_grads: dict[int, np.ndarray] = {}
                for agent in range(self.n_agents):
                    k = self.net_index(agent)
                    grads, loss, entropy = ppo_policy_gradient(
                        self.actors[k],
                        self.agent_inputs(obs[rows], agent),
                        actions[rows, agent],
                        old_log_probs[rows, agent],
                        self._agent_advantages(advantages[rows], agent),
                        self.hp.clip_ratio,
                        self.hp.entropy_coef,
                    )
                    actor_grads[k] = actor_grads[k] + grads if k in actor_grads else grads
                    actor_losses.append(loss)
                    entropies.append(entropy)
                self._clip_and_step(actor_grads, self.actors, self.actor_optimizers)
                critic_losses.append(self._critic_step(obs[rows], states[rows], returns[rows]))
        return {
            "actor_loss": float(np.mean(actor_losses)),
            "critic_loss": float(np.mean(critic_losses)),
            "entropy": float(np.mean(entropies)),
        }

    def networks(self) -> dict[str, DenseNetwork]:
        nets = {f"actor_{k}": net for k, net in enumerate(self.actors)}
        nets.update({f"critic_{k}": net for k, net in enumerate(self.critics)})
        nets.update({f"critic_target_{k}": net for k, net in enumerate(self.critic_targets)})
        return nets


def build_ensemble(
    algorithm: Algorithm,
    n_agents: int,
    obs_dim: int,
    state_dim: int,
    n_actions: int,
    hp: Hyperparameters,
    rng: np.random.Generator | int | None = None,
) -> Learner:
    """Construct the learner of ``algorithm`` with its networks and buffers."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cls = ValueLearner if algorithm.value_based else ActorCriticLearner
    learner = cls(algorithm, n_agents, obs_dim, state_dim, n_actions, hp, gen)
    logger.debug(
        f"Built {algorithm.value} ensemble: {n_agents} agents, obs {obs_dim}, "
        f"state {state_dim}, sharing={hp.parameter_sharing}"
    )
    return learner


def act_value_based(
    learner: ValueLearner, observations: np.ndarray, epsilon: float
) -> np.ndarray:
    """Per-agent epsilon-greedy joint action of a value-based learner."""
    return learner.act_epsilon(observations, epsilon)


class GreedyEnsemblePolicy:
    """Noise-free execution of a trained learner (argmax Q or policy mode)."""

    def __init__(self, learner: Learner) -> None:
        self.learner = learner

    def act(self, env: Any) -> np.ndarray:
        return self.learner.act(env.observations, explore=False)
