#!/usr/bin/env python3
"""
Reinforcement-Learning Agents for Heuristic Scoring

Each agent observes the recent normalised score history of the heuristics,
outputs a noisy action whose softmax becomes the agent score vector, and
learns from the per-epoch reward. Three update rules are provided:
- A2C: n-step advantage actor-critic with entropy bonus (shared trunk)
- PPO: clipped surrogate objective with value and entropy terms (shared trunk)
- SAC: soft value, soft Q and reparameterised policy with a target value net
"""

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator

from dense_net import (
    Adamax,
    DenseNet,
    clip_grad_norm,
    load_net_arrays,
    load_parameters,
    net_arrays,
    save_parameters,
)

logger = logging.getLogger(__name__)

AGENT_STREAM = 0x524C
SIGMA_FLOOR = 1e-3
VARIANTS = ("baseline", "a2c", "ppo", "sac")


class UnknownVariantError(ValueError):
    """Raised for an agent variant string outside baseline | a2c | ppo | sac"""


class AgentConfig(BaseModel):
    """Hyperparameters shared by the three agents; unused fields are ignored per variant"""
    gamma: float = 0.9
    actor_lr: float = 1e-3
    critic_lr: float = 1e-4
    update_period: int = 5
    sigma: float = 0.05
    window: int = 5
    hidden: Tuple[int, ...] = (200, 200)
    entropy_coef: float = 0.01      # A2C
    alpha_h: float = 0.05           # SAC temperature
    tau: float = 0.005              # SAC target EMA weight
    clip_eps: float = 0.2           # PPO
    value_coef: float = 0.5         # PPO p1
    entropy_bonus: float = 0.01     # PPO p2
    ppo_epochs: int = 4
    batch_size: int = 64
    buffer_capacity: int = 10_000
    max_grad_norm: float = 1.0

    @field_validator("gamma")
    @classmethod
    def _gamma_range(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        return v

    @field_validator("sigma")
    @classmethod
    def _sigma_non_negative(cls, v):
        if v < 0:
            raise ValueError("sigma must be non-negative")
        return v

    @field_validator("update_period", "window", "ppo_epochs", "batch_size", "buffer_capacity")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("hidden")
    @classmethod
    def _hidden_layers(cls, v):
        if not v or any(h < 1 for h in v):
            raise ValueError("hidden needs at least one positive layer width")
        return v


# --- state, action, returns -------------------------------------------------------

def encode_state(history: Sequence[np.ndarray], n: int, window: int) -> np.ndarray:
    """Stack the last `window` epochs of normalised (pi1, pi2, S1), newest last, zero-padded"""
    state = np.zeros((window, 3, n))
    recent = list(history)[-window:]
    offset = window - len(recent)
    for i, epoch in enumerate(recent):
        state[offset + i] = np.asarray(epoch, dtype=float).reshape(3, n)
    return state


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row maximum"""
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise log softmax without forming the probabilities"""
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def standardize_returns(returns: Sequence[float]) -> np.ndarray:
    """Zero-mean unit-variance rewards; fewer than two or constant values give zeros"""
    x = np.asarray(returns, dtype=float)
    if x.size < 2:
        return np.zeros_like(x)
    std = x.std()
    if std == 0.0:
        return np.zeros_like(x)
    return (x - x.mean()) / (std + 1e-8)


def gaussian_log_prob(actions: np.ndarray, mu: np.ndarray, sigma: float) -> np.ndarray:
    """Diagonal Gaussian log density per row"""
    s = max(sigma, SIGMA_FLOOR)
    z = (actions - mu) / s
    return (-0.5 * z ** 2 - np.log(s) - 0.5 * np.log(2.0 * np.pi)).sum(axis=-1)


def selection_entropy(mu: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entropy of softmax(mu) per row and its gradient w.r.t. mu"""
    logp = log_softmax(mu)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)
    return h, -p * (logp + h[..., None])


def clipped_surrogate(ratio: np.ndarray, advantage: np.ndarray, eps: float) -> np.ndarray:
    """min(r A, clip(r, 1 - eps, 1 + eps) A) per sample"""
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def soft_update_target(target: DenseNet, source: DenseNet, tau: float):
    """target <- tau * source + (1 - tau) * target, in place"""
    for t, s in zip(target.parameters(), source.parameters()):
        t[...] = tau * s + (1.0 - tau) * t


# --- experience --------------------------------------------------------------------

@dataclass
class Transition:
    """One epoch of experience: state, noisy action, epoch reward, next state"""
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool = False


@dataclass
class Batch:
    """Transitions stacked into arrays, one row each"""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    @classmethod
    def of(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            np.stack([t.state for t in transitions]),
            np.stack([t.action for t in transitions]),
            np.array([t.reward for t in transitions], dtype=float),
            np.stack([t.next_state for t in transitions]),
            np.array([t.done for t in transitions], dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Bounded FIFO of transitions"""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.buffer: deque = deque(maxlen=capacity)

    def append(self, transition: Transition):
        self.buffer.append(transition)

    def __len__(self) -> int:
        return len(self.buffer)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform draw without replacement, kept in insertion order"""
        idx = rng.choice(len(self.buffer), size=batch_size, replace=False)
        return Batch.of([self.buffer[int(i)] for i in np.sort(idx)])


# --- agents ------------------------------------------------------------------------

class Agent:
    """Shared epoch protocol: encode state, store experience, update periodically, act"""
    variant = "agent"

    def __init__(self, n: int, config: Optional[AgentConfig] = None, seed: int = 0):
        self.n = n
        self.config = config or AgentConfig()
        self.state_dim = self.config.window * 3 * n
        self.init_rng = np.random.default_rng([int(seed), AGENT_STREAM, 0])
        self.rng = np.random.default_rng([int(seed), AGENT_STREAM, 1])
        self.buffer = ReplayBuffer(self.config.buffer_capacity)
        self.rollout: List[Transition] = []
        self.prev_state: Optional[np.ndarray] = None
        self.prev_action: Optional[np.ndarray] = None
        self.last_transition: Optional[Transition] = None
        self.epochs = 0
        self.updates = 0

    # subclasses
    def policy_mean(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def update(self):
        """Train on the collected experience; called every update_period epochs"""
        raise NotImplementedError

    def networks(self) -> Dict[str, DenseNet]:
        raise NotImplementedError

    def act(self, state: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (S2, raw noisy action)"""
        mu = self.policy_mean(state.ravel())
        noise = rng.normal(0.0, self.config.sigma, size=mu.shape) if self.config.sigma > 0 else np.zeros_like(mu)
        action = mu + noise
        return softmax(action), action

    def _store(self, reward: float, state: np.ndarray, done: bool):
        if self.prev_state is None:
            return
        transition = Transition(self.prev_state.ravel(), self.prev_action, float(reward), state.ravel(), done)
        self.buffer.append(transition)
        self.rollout.append(transition)
        self.last_transition = transition

    def agent_epoch_step(self, history: Sequence[np.ndarray], reward: float, rng: np.random.Generator) -> np.ndarray:
        """Store the finished epoch, update on schedule, and return the next S2 probabilities"""
        state = encode_state(history, self.n, self.config.window)
        self._store(reward, state, done=False)
        self.epochs += 1
        if self.epochs % self.config.update_period == 0 and self.rollout:
            self._run_update()
        s2, action = self.act(state, rng)
        self.prev_state, self.prev_action = state, action
        return s2

    def end_episode(self, history: Sequence[np.ndarray], reward: float, open_epoch: bool = True):
        """Close the episode and run the final update.

        With open_epoch the iterations since the last epoch boundary form the
        terminal transition. Otherwise the search stopped on a boundary, the
        last action never acted, and the last stored transition becomes terminal.
        """
        if open_epoch:
            self._store(reward, encode_state(history, self.n, self.config.window), done=True)
        elif self.last_transition is not None:
            self.last_transition.done = True
        if self.rollout:
            self._run_update()
        self.prev_state = self.prev_action = None
        self.last_transition = None

    def _run_update(self):
        self.update()
        self.updates += 1
        self.rollout = []
        logger.debug(f"{self.variant} update #{self.updates} after epoch {self.epochs}")

    def _group_step(self, optimizer: Adamax, grads: List[np.ndarray]):
        clipped, _norm = clip_grad_norm(grads, self.config.max_grad_norm)
        optimizer.step(clipped)

    def save(self, path) -> Path:
        """Write every network and the agent shape to an npz checkpoint"""
        arrays: Dict[str, np.ndarray] = {}
        for name, net in self.networks().items():
            arrays.update(net_arrays(name, net))
        meta = {'variant': self.variant, 'n': self.n, 'window': self.config.window, 'hidden': list(self.config.hidden)}
        return save_parameters(path, arrays, meta)

    def load(self, path):
        """Restore weights saved by an agent of the same variant and size"""
        arrays, meta = load_parameters(path)
        if meta.get('variant') != self.variant or meta.get('n') != self.n:
            raise ValueError(
                f"checkpoint holds a {meta.get('variant')} agent for n={meta.get('n')}, "
                f"expected {self.variant} for n={self.n}"
            )
        for name, net in self.networks().items():
            load_net_arrays(name, net, arrays)
        logger.info(f"Loaded {self.variant} weights from {path}")


class SharedActorCritic:
    """First hidden layer shared; actor and critic heads own the remaining layers"""

    def __init__(self, state_dim: int, n: int, hidden: Sequence[int], rng: np.random.Generator):
        first, rest = hidden[0], list(hidden[1:])
        self.trunk = DenseNet([state_dim, first], rng, output="tanh")
        self.actor = DenseNet([first, *rest, n], rng)
        self.critic = DenseNet([first, *rest, 1], rng)

    def forward(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Policy means and state values for a batch of states"""
        h = self.trunk.forward(states)
        return self.actor.forward(h), self.critic.forward(h)[:, 0]

    def backward(self, d_mu: np.ndarray, d_v: np.ndarray):
        """Gradients of trunk, actor and critic; the trunk receives both heads' input gradients"""
        g_actor, gh_a = self.actor.backward(d_mu)
        g_critic, gh_c = self.critic.backward(d_v[:, None])
        g_trunk, _ = self.trunk.backward(gh_a + gh_c)
        return g_trunk, g_actor, g_critic

    def parameters(self) -> List[np.ndarray]:
        return self.trunk.parameters() + self.actor.parameters() + self.critic.parameters()


class A2CAgent(Agent):
    """Advantage actor-critic trained on the rollout since its last update"""
    variant = "a2c"

    def __init__(self, n: int, config: Optional[AgentConfig] = None, seed: int = 0):
        super().__init__(n, config, seed)
        self.net = SharedActorCritic(self.state_dim, n, self.config.hidden, self.init_rng)
        self.actor_opt = Adamax(self.net.trunk.parameters() + self.net.actor.parameters(), self.config.actor_lr)
        self.critic_opt = Adamax(self.net.critic.parameters(), self.config.critic_lr)

    def networks(self) -> Dict[str, DenseNet]:
        return {'trunk': self.net.trunk, 'actor': self.net.actor, 'critic': self.net.critic}

    def parameters(self) -> List[np.ndarray]:
        return self.net.parameters()

    def policy_mean(self, state: np.ndarray) -> np.ndarray:
        mu, _v = self.net.forward(state[None, :])
        return mu[0]

    def prepare(self, batch: Batch) -> Dict[str, np.ndarray]:
        """n-step returns (bootstrapped unless terminal) and advantages, held fixed during the step"""
        rewards = standardize_returns(batch.rewards)
        R = 0.0
        if not batch.dones[-1]:
            _mu, v_next = self.net.forward(batch.next_states[-1:])
            R = float(v_next[0])
        returns = np.zeros(len(batch))
        for i in reversed(range(len(batch))):
            if batch.dones[i]:
                R = 0.0
            R = rewards[i] + self.config.gamma * R
            returns[i] = R
        _mu, values = self.net.forward(batch.states)
        return {'returns': returns, 'advantages': returns - values}

    def loss_and_grads(self, batch: Batch, targets: Dict[str, np.ndarray]) -> Tuple[float, List[np.ndarray]]:
        cfg = self.config
        s = max(cfg.sigma, SIGMA_FLOOR)
        B = len(batch)
        mu, v = self.net.forward(batch.states)
        logp = gaussian_log_prob(batch.actions, mu, cfg.sigma)
        entropy, d_entropy = selection_entropy(mu)
        adv, returns = targets['advantages'], targets['returns']
        loss = float(np.mean(-logp * adv - cfg.entropy_coef * entropy) + np.mean((returns - v) ** 2))
        d_mu = (-adv[:, None] * (batch.actions - mu) / s ** 2 - cfg.entropy_coef * d_entropy) / B
        d_v = -2.0 * (returns - v) / B
        g_trunk, g_actor, g_critic = self.net.backward(d_mu, d_v)
        return loss, g_trunk + g_actor + g_critic

    def update(self):
        """One gradient step for each network group on the current rollout"""
        batch = Batch.of(self.rollout)
        _loss, grads = self.loss_and_grads(batch, self.prepare(batch))
        n_actor = len(self.actor_opt.params)
        self._group_step(self.actor_opt, grads[:n_actor])
        self._group_step(self.critic_opt, grads[n_actor:])


class PPOAgent(A2CAgent):
    """A2C networks trained with the clipped surrogate over several passes"""
    variant = "ppo"

    def prepare(self, batch: Batch) -> Dict[str, np.ndarray]:
        targets = super().prepare(batch)
        mu, _v = self.net.forward(batch.states)
        targets['old_log_prob'] = gaussian_log_prob(batch.actions, mu, self.config.sigma)
        return targets

    def ratio(self, batch: Batch, targets: Dict[str, np.ndarray]) -> np.ndarray:
        """pi_new / pi_old of the stored actions"""
        mu, _v = self.net.forward(batch.states)
        return np.exp(gaussian_log_prob(batch.actions, mu, self.config.sigma) - targets['old_log_prob'])

    def loss_and_grads(self, batch: Batch, targets: Dict[str, np.ndarray]) -> Tuple[float, List[np.ndarray]]:
        cfg = self.config
        s = max(cfg.sigma, SIGMA_FLOOR)
        B = len(batch)
        mu, v = self.net.forward(batch.states)
        logp = gaussian_log_prob(batch.actions, mu, cfg.sigma)
        ratio = np.exp(logp - targets['old_log_prob'])
        adv, returns = targets['advantages'], targets['returns']
        surrogate = clipped_surrogate(ratio, adv, cfg.clip_eps)
        entropy, d_entropy = selection_entropy(mu)
        objective = np.mean(surrogate) - cfg.value_coef * np.mean((v - returns) ** 2) + cfg.entropy_bonus * np.mean(entropy)
        # the unclipped branch carries the gradient whenever min() selects it
        unclipped = ratio * adv <= np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
        d_logp = np.where(unclipped, ratio * adv, 0.0)
        d_mu = -(d_logp[:, None] * (batch.actions - mu) / s ** 2 + cfg.entropy_bonus * d_entropy) / B
        d_v = 2.0 * cfg.value_coef * (v - returns) / B
        g_trunk, g_actor, g_critic = self.net.backward(d_mu, d_v)
        return float(-objective), g_trunk + g_actor + g_critic

    def update(self):
        batch = Batch.of(self.rollout)
        targets = self.prepare(batch)
        n_actor = len(self.actor_opt.params)
        for _epoch in range(self.config.ppo_epochs):
            _loss, grads = self.loss_and_grads(batch, targets)
            self._group_step(self.actor_opt, grads[:n_actor])
            self._group_step(self.critic_opt, grads[n_actor:])


class SACAgent(Agent):
    """Soft actor-critic with V, Q and policy networks and a replay buffer"""
    variant = "sac"

    def __init__(self, n: int, config: Optional[AgentConfig] = None, seed: int = 0):
        super().__init__(n, config, seed)
        hidden = list(self.config.hidden)
        self.policy = DenseNet([self.state_dim, *hidden, n], self.init_rng)
        self.q_net = DenseNet([self.state_dim + n, *hidden, 1], self.init_rng)
        self.v_net = DenseNet([self.state_dim, *hidden, 1], self.init_rng)
        self.v_target = self.v_net.copy()
        self.policy_opt = Adamax(self.policy.parameters(), self.config.actor_lr)
        self.q_opt = Adamax(self.q_net.parameters(), self.config.critic_lr)
        self.v_opt = Adamax(self.v_net.parameters(), self.config.critic_lr)

    def networks(self) -> Dict[str, DenseNet]:
        return {'policy': self.policy, 'q': self.q_net, 'v': self.v_net, 'v_target': self.v_target}

    def policy_mean(self, state: np.ndarray) -> np.ndarray:
        return self.policy.forward(state)

    def _reparameterised(self, states: np.ndarray, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        mu = self.policy.forward(states)
        return mu, mu + max(self.config.sigma, SIGMA_FLOOR) * xi

    def value_target(self, batch: Batch, xi: np.ndarray) -> np.ndarray:
        """Q(s, a~) - alpha_H log pi(a~|s) for reparameterised actions"""
        mu, sampled = self._reparameterised(batch.states, xi)
        q = self.q_net.forward(np.hstack([batch.states, sampled]))[:, 0]
        return q - self.config.alpha_h * gaussian_log_prob(sampled, mu, self.config.sigma)

    def value_loss_and_grads(self, batch: Batch, xi: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        """Half squared error of V against the soft value target"""
        target = self.value_target(batch, xi)
        v = self.v_net.forward(batch.states)[:, 0]
        diff = v - target
        grads, _ = self.v_net.backward((diff / len(batch))[:, None])
        return float(np.mean(0.5 * diff ** 2)), grads

    def q_loss_and_grads(self, batch: Batch, rewards: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        """Squared error against r + gamma V_target(s') on non-terminal rows"""
        v_next = self.v_target.forward(batch.next_states)[:, 0]
        target = rewards + self.config.gamma * (~batch.dones) * v_next
        q = self.q_net.forward(np.hstack([batch.states, batch.actions]))[:, 0]
        diff = q - target
        grads, _ = self.q_net.backward((diff / len(batch))[:, None])
        return float(np.mean(0.5 * diff ** 2)), grads

    def policy_loss_and_grads(self, batch: Batch, xi: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        """alpha_H log pi - Q of reparameterised actions, differentiated through Q"""
        B = len(batch)
        mu, sampled = self._reparameterised(batch.states, xi)
        q = self.q_net.forward(np.hstack([batch.states, sampled]))[:, 0]
        logp = gaussian_log_prob(sampled, mu, self.config.sigma)
        loss = float(np.mean(self.config.alpha_h * logp - q))
        # log pi of a reparameterised sample with fixed sigma does not depend on mu
        _, g_in = self.q_net.backward(np.full((B, 1), -1.0 / B))
        grads, _ = self.policy.backward(g_in[:, self.state_dim:])
        return loss, grads

    def update(self):
        """Skipped until the buffer holds a full batch"""
        if len(self.buffer) < self.config.batch_size:
            return
        batch = self.buffer.sample(self.config.batch_size, self.rng)
        rewards = standardize_returns(batch.rewards)
        xi = self.rng.standard_normal((len(batch), self.n))
        _loss, grads = self.value_loss_and_grads(batch, xi)
        self._group_step(self.v_opt, grads)
        _loss, grads = self.q_loss_and_grads(batch, rewards)
        self._group_step(self.q_opt, grads)
        _loss, grads = self.policy_loss_and_grads(batch, xi)
        self._group_step(self.policy_opt, grads)
        soft_update_target(self.v_target, self.v_net, self.config.tau)


AGENT_TYPES = {'a2c': A2CAgent, 'ppo': PPOAgent, 'sac': SACAgent}


def make_agent(variant: str, n: int, config: Optional[AgentConfig] = None, seed: int = 0,
               checkpoint: Optional[str] = None) -> Optional[Agent]:
    """Build the agent for a variant string; the baseline has none"""
    variant = variant.lower()
    if variant == "baseline":
        return None
    if variant not in AGENT_TYPES:
        raise UnknownVariantError(f"unknown variant '{variant}'; expected one of {', '.join(VARIANTS)}")
    agent = AGENT_TYPES[variant](n, config, seed)
    if checkpoint:
        agent.load(checkpoint)
    return agent
