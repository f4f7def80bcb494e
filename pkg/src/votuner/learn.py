"""Training machinery: GAE, PPO with a privileged critic, contextual-bandit
encoder pretraining, and the PSO static-parameter baseline.

All gradients flow through the hand-rolled nets in `nn`; there is no autograd
framework underneath.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyBuffer, LengthMismatch
from .frontend import FrontendParams, TrackerState, step_tracker
from .imagery import GrayImage
from .nn import AdamState, ConvEncoder, MlpNet, adam_step, mlp_backward
from .policy import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    PolicyBundle,
    area_downsample,
    gaussian_log_prob,
)
from .reward import feature_drift


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    epochs: int = 20
    batch_size: int = 2048
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    num_envs: int = 8  # paper-scale default is 256
    rollout_steps: int = 128
    lr_start: float = 3e-4
    lr_end: float = 3e-5
    total_updates: int = 300

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_range <= 0:
            raise ValueError("clip_range must be positive")

    def lr_at(self, update_index: int) -> float:
        if self.total_updates <= 1:
            return self.lr_start
        frac = min(1.0, update_index / (self.total_updates - 1))
        return self.lr_start + frac * (self.lr_end - self.lr_start)


@dataclass
class RolloutBuffer:
    """Rectangular (envs, steps) rollout storage."""

    observations: np.ndarray  # (E, S, obs_dim)
    critic_inputs: np.ndarray  # (E, S, critic_dim)
    actions: np.ndarray  # (E, S, act_dim)
    log_probs: np.ndarray  # (E, S)
    values: np.ndarray  # (E, S)
    rewards: np.ndarray  # (E, S) training rewards (policy minus reference)
    dones: np.ndarray  # (E, S)
    bootstrap_values: np.ndarray  # (E,)

    def __post_init__(self):
        e, s = self.rewards.shape
        for name in ("observations", "critic_inputs", "actions"):
            arr = getattr(self, name)
            if arr.shape[:2] != (e, s):
                raise LengthMismatch(f"{name} shape {arr.shape} inconsistent with ({e}, {s})")
        for name in ("log_probs", "values", "dones"):
            if getattr(self, name).shape != (e, s):
                raise LengthMismatch(f"{name} shape mismatch")
        if not np.isfinite(self.log_probs).all():
            raise ValueError("non-finite log probabilities in buffer")

    @property
    def num_envs(self):
        return self.rewards.shape[0]

    @property
    def num_steps(self):
        return self.rewards.shape[1]


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalized advantage estimation over one trajectory.

    delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t, with v_{T} the
    bootstrap value; A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}.
    Returns (advantages, returns) where returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise LengthMismatch("rewards/values/dones length mismatch")
    t_len = rewards.shape[0]
    adv = np.zeros(t_len)
    last = 0.0
    next_value = float(bootstrap_value)
    for t in range(t_len - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


@dataclass
class PpoDiagnostics:
    policy_loss: float
    value_loss: float
    kl: float
    clip_fraction: float
    entropy: float


class PpoOptimizer:
    """Holds the Adam states for one PolicyBundle across updates."""

    def __init__(self, bundle: PolicyBundle):
        self.bundle = bundle
        actor_params, critic_params = bundle.trainable_params()
        self.actor_state = AdamState(actor_params)
        self.critic_state = AdamState(critic_params)


def ppo_update(buffer: RolloutBuffer, optimizer: PpoOptimizer, config: PpoConfig,
               lr: float, rng: np.random.Generator) -> PpoDiagnostics:
    """One PPO update: GAE, advantage normalization, clipped-surrogate epochs.

    The actor loss is the clipped ratio surrogate (entropy weight from the
    config, default 0); the critic regresses the privileged-input value
    against GAE returns with weight `value_coef`.
    """
    if buffer.num_envs == 0 or buffer.num_steps == 0:
        raise EmptyBuffer("rollout buffer is empty")
    bundle = optimizer.bundle
    e, s = buffer.num_envs, buffer.num_steps

    advantages = np.zeros((e, s))
    returns = np.zeros((e, s))
    for i in range(e):
        advantages[i], returns[i] = compute_gae(
            buffer.rewards[i], buffer.values[i], buffer.dones[i],
            buffer.bootstrap_values[i], config.gamma, config.gae_lambda,
        )
    flat_obs = buffer.observations.reshape(e * s, -1)
    flat_critic = buffer.critic_inputs.reshape(e * s, -1)
    flat_act = buffer.actions.reshape(e * s, -1)
    flat_logp = buffer.log_probs.reshape(e * s)
    flat_adv = advantages.reshape(e * s)
    flat_ret = returns.reshape(e * s)

    adv_std = flat_adv.std()
    flat_adv = (flat_adv - flat_adv.mean()) / (adv_std + 1e-8)

    n = e * s
    batch = min(config.batch_size, n)
    pol_losses, val_losses, kls, clip_fracs, ents = [], [], [], [], []

    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            m = len(idx)
            obs = flat_obs[idx]
            acts = flat_act[idx]
            adv = flat_adv[idx]
            ret = flat_ret[idx]
            logp_old = flat_logp[idx]

            mean = np.tanh(bundle.policy_net.forward(obs))
            log_std_c = np.clip(bundle.head.log_std, LOG_STD_MIN, LOG_STD_MAX)
            std = np.exp(log_std_c)
            logp_new = gaussian_log_prob(mean, std, acts)
            ratio = np.exp(logp_new - logp_old)
            surr1 = ratio * adv
            clipped_ratio = np.clip(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range)
            surr2 = clipped_ratio * adv
            use_unclipped = surr1 <= surr2
            policy_loss = -np.minimum(surr1, surr2).mean()
            entropy = float(np.sum(log_std_c + 0.5 * math.log(2.0 * math.pi * math.e)))

            # d(policy_loss)/d(logp_new): active only where the unclipped branch wins.
            dl_dlogp = np.where(use_unclipped, -ratio * adv, 0.0) / m
            z = (acts - mean) / std
            dlogp_dmean = z / std
            g_mean = dl_dlogp[:, None] * dlogp_dmean
            g_net_out = g_mean * (1.0 - mean ** 2)
            actor_grads, _ = mlp_backward(bundle.policy_net, obs, g_net_out)
            dlogp_dlogstd = z ** 2 - 1.0
            g_logstd = (dl_dlogp[:, None] * dlogp_dlogstd).sum(axis=0)
            g_logstd -= config.entropy_coef  # d(-coef * entropy)/d(log_std)
            g_logstd *= (bundle.head.log_std > LOG_STD_MIN) & (bundle.head.log_std < LOG_STD_MAX)

            crit = flat_critic[idx]
            v = bundle.critic_net.forward(crit)[:, 0]
            value_loss = float(np.mean((v - ret) ** 2))
            g_v = (config.value_coef * 2.0 * (v - ret) / m)[:, None]
            critic_grads, _ = mlp_backward(bundle.critic_net, crit, g_v)

            actor_params, critic_params = bundle.trainable_params()
            adam_step(actor_params, actor_grads + [g_logstd], optimizer.actor_state, lr)
            adam_step(critic_params, critic_grads, optimizer.critic_state, lr)

            pol_losses.append(float(policy_loss))
            val_losses.append(value_loss)
            kls.append(float(np.mean(logp_old - logp_new)))
            clip_fracs.append(float(np.mean(np.abs(ratio - 1.0) > config.clip_range)))
            ents.append(entropy)

    return PpoDiagnostics(
        policy_loss=float(np.mean(pol_losses)),
        value_loss=float(np.mean(val_losses)),
        kl=float(np.mean(kls)),
        clip_fraction=float(np.mean(clip_fracs)),
        entropy=float(np.mean(ents)),
    )


@dataclass
class PsoConfig:
    particles: int = 24
    iterations: int = 60
    inertia: float = 0.7298
    cognitive: float = 1.49618
    social: float = 1.49618
    bounds: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 209.0], [3.0, 41.0], [0.0, 3.0]])
    )
    seed: int = 0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.particles < 2:
            raise ValueError("need at least 2 particles")
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]):
            raise ValueError("bounds must have positive extent")


def pso_optimize(objective: Callable[[np.ndarray], float], config: PsoConfig,
                 init_positions: Optional[np.ndarray] = None):
    """Canonical global-best PSO maximizing `objective` inside the box.

    Velocities are clamped to half the box extent per axis and positions to
    the box.  Returns (best_position, best_score, history) where history is
    the best score after each iteration (non-decreasing).
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x50]))
    lo = config.bounds[:, 0]
    hi = config.bounds[:, 1]
    dim = len(lo)
    vmax = 0.5 * (hi - lo)

    if init_positions is not None:
        x = np.array(init_positions, dtype=np.float64)
    else:
        x = rng.uniform(lo, hi, size=(config.particles, dim))
    v = np.zeros_like(x)
    scores = np.array([objective(p) for p in x])
    pbest = x.copy()
    pbest_scores = scores.copy()
    g = int(np.argmax(scores))
    gbest = x[g].copy()
    gbest_score = float(scores[g])
    history = []

    for _ in range(config.iterations):
        r1 = rng.random(size=x.shape)
        r2 = rng.random(size=x.shape)
        v = (
            config.inertia * v
            + config.cognitive * r1 * (pbest - x)
            + config.social * r2 * (gbest[None, :] - x)
        )
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, lo, hi)
        scores = np.array([objective(p) for p in x])
        improved = scores > pbest_scores
        pbest[improved] = x[improved]
        pbest_scores[improved] = scores[improved]
        g = int(np.argmax(pbest_scores))
        if pbest_scores[g] > gbest_score:
            gbest_score = float(pbest_scores[g])
            gbest = pbest[g].copy()
        history.append(gbest_score)
    return gbest, gbest_score, history


@dataclass
class BanditConfig:
    lr: float = 3e-4
    batch_size: int = 64
    replay_capacity: int = 10000
    gradient_steps: int = 500
    warmup: int = 64
    no_feature_reward: float = -50.0
    ransac_threshold: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay capacity must be >= batch size")


def bandit_update(encoder: ConvEncoder, critic: MlpNet, thumbs: np.ndarray,
                  actions: np.ndarray, rewards: np.ndarray, enc_state: AdamState,
                  critic_state: AdamState, lr: float, train_encoder: bool = True) -> float:
    """One regression step of critic(latent, action) onto rewards.

    Gradients flow through the critic into the encoder when `train_encoder`.
    Returns the batch MSE before the step.
    """
    m = thumbs.shape[0]
    latents, caches = encoder.forward_cached(thumbs[:, None, :, :])
    inp = np.concatenate([latents, actions], axis=1)
    pred = critic.forward(inp)[:, 0]
    err = pred - rewards
    mse = float(np.mean(err ** 2))
    g_out = (2.0 * err / m)[:, None]
    critic_grads, g_inp = mlp_backward(critic, inp, g_out)
    adam_step(critic.params, critic_grads, critic_state, lr)
    if train_encoder:
        g_latent = g_inp[:, : encoder.latent_dim]
        enc_grads, _ = encoder.backward(caches, g_latent)
        adam_step(encoder.params, enc_grads, enc_state, lr)
    return mse


class ReplayBuffer:
    """FIFO transition store of (thumbnail, normalized action, reward)."""

    def __init__(self, capacity: int, thumb_side: int, act_dim: int):
        self.capacity = capacity
        self.thumbs = np.zeros((capacity, thumb_side, thumb_side))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def add(self, thumb, action, reward):
        self.thumbs[self.head] = thumb
        self.actions[self.head] = action
        self.rewards[self.head] = reward
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch)
        return self.thumbs[idx], self.actions[idx], self.rewards[idx]


def bandit_tracking_reward(img_a: GrayImage, img_b: GrayImage, flow, params: FrontendParams,
                           no_feature_reward: float) -> float:
    """Negative mean feature drift of a detect-then-track step on one pair."""
    state = TrackerState(width=img_a.width, height=img_a.height)
    rng = np.random.default_rng(0)
    step_tracker(state, img_a, params, rng=rng)
    _, _, tracks = step_tracker(state, img_b, params, rng=rng)
    drifts = []
    for t in tracks:
        d = feature_drift(t, flow)
        if d is not None:
            drifts.append(d)
    if not drifts:
        return no_feature_reward
    return -float(np.mean(drifts))


def pretrain_encoder_bandit(dataset: Sequence[Tuple[GrayImage, GrayImage, object]],
                            encoder: ConvEncoder, critic: MlpNet,
                            config: BanditConfig) -> List[float]:
    """Single-step bandit pretraining of the encoder.

    Each iteration samples a frame pair and a random (FAST threshold, patch
    size) action, runs one detect-and-track step, scores it by negative mean
    drift, pushes the transition into the replay buffer, and after warmup
    performs one regression step.  Returns the per-step MSE history.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA0D]))
    replay = ReplayBuffer(config.replay_capacity, encoder.side, 2)
    enc_state = AdamState(encoder.params)
    critic_state = AdamState(critic.params)
    thumb_cache = {}
    history = []
    steps_done = 0
    while steps_done < config.gradient_steps:
        k = int(rng.integers(0, len(dataset)))
        img_a, img_b, flow = dataset[k]
        fast = int(rng.integers(0, 210))
        patch = int(rng.integers(1, 21)) * 2 + 1
        params = FrontendParams(fast, patch, config.ransac_threshold)
        reward = bandit_tracking_reward(img_a, img_b, flow, params, config.no_feature_reward)
        if k not in thumb_cache:
            thumb_cache[k] = area_downsample(img_a.data, encoder.side, encoder.side) - 0.5
        action_norm = np.array([(fast - 104.5) / 104.5, (patch - 22.0) / 19.0])
        replay.add(thumb_cache[k], action_norm, reward)
        if replay.size >= max(config.warmup, config.batch_size):
            thumbs, acts, rews = replay.sample(config.batch_size, rng)
            mse = bandit_update(encoder, critic, thumbs, acts, rews,
                                enc_state, critic_state, config.lr)
            history.append(mse)
            steps_done += 1
    return history


def reference_replay_params(reference_raw: np.ndarray) -> FrontendParams:
    """Parameters a reference-replaying policy would produce for `reference_raw`."""
    from .policy import map_action

    return map_action(reference_raw)
