"""Environments over pre-rendered episodes, rollout collection, reference
runs, sequence evaluation, and the PPO training loop.

Reproducibility contract: the tracker RNG for frame t of episode e is a fresh
stream keyed by (tracker_seed, e, t), and action noise for env i at update u
is keyed by (seed, i, u).  Results therefore do not depend on how work is
interleaved, and a policy that replays the reference raw action reproduces
the reference run bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import MissingReferenceRun
from .frontend import FrontendConfig, FrontendParams, TrackerState, step_tracker
from .imagery import PinholeCamera, SequenceFrame
from .learn import PpoConfig, PpoOptimizer, RolloutBuffer, ppo_update
from .policy import (
    Observation,
    PolicyBundle,
    PrivilegedCriticInput,
    gaussian_log_prob,
    map_action,
    policy_forward,
    raw_from_params,
    value_forward,
)
from .reward import (
    CostModel,
    FrameRecord,
    ReferenceRun,
    RewardBreakdown,
    RewardConfig,
    frame_reward,
)
from .simworld import AugmentConfig, TextureSpec, generate_scene, make_episode, random_trajectory


@dataclass
class EvalSetup:
    """Everything needed to run the tracker and score frames deterministically."""

    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    cost: CostModel = field(default_factory=CostModel)
    tracker_seed: int = 0


def process_frame(
    state: TrackerState,
    frames: Sequence[SequenceFrame],
    t: int,
    params: FrontendParams,
    setup: EvalSetup,
    episode_id: int = 0,
):
    """Track frame t and score it; the single shared tracker/reward step."""
    rng = np.random.default_rng(np.random.SeedSequence([setup.tracker_seed, episode_id, t]))
    state, stats, tracks = step_tracker(state, frames[t].image, params, setup.frontend, rng)
    flow = frames[t - 1].gt_flow_to_next if t >= 1 else None
    breakdown = frame_reward(
        tracks,
        flow,
        stats,
        params.klt_patch_size,
        frames[t].image.width,
        frames[t].image.height,
        frame_index=t,
        config=setup.reward,
        cost=setup.cost,
    )
    return stats, tracks, breakdown


def reference_run(frames: Sequence[SequenceFrame], reference_raw: np.ndarray,
                  setup: EvalSetup, episode_id: int = 0) -> ReferenceRun:
    """Static-parameter run over an episode; the per-frame baseline."""
    params = map_action(reference_raw)
    state = TrackerState(width=frames[0].image.width, height=frames[0].image.height,
                         num_levels=setup.frontend.num_levels)
    run = ReferenceRun()
    for t in range(len(frames)):
        _, _, breakdown = process_frame(state, frames, t, params, setup, episode_id)
        run.breakdowns.append(breakdown)
    return run


ActionSource = Union[FrontendParams, PolicyBundle]


def evaluate_sequence(
    frames: Sequence[SequenceFrame],
    source: ActionSource,
    setup: EvalSetup,
    episode_id: int = 0,
) -> Tuple[List[FrameRecord], List[int]]:
    """Run the tracker over a sequence with static params or a deterministic
    policy; returns (per-frame records, final ages of every feature created)."""
    state = TrackerState(width=frames[0].image.width, height=frames[0].image.height,
                         num_levels=setup.frontend.num_levels)
    records: List[FrameRecord] = []
    ages = {}
    final_ages: List[int] = []
    last_action = np.zeros(3)
    for t in range(len(frames)):
        if isinstance(source, FrontendParams):
            params = source
        else:
            obs = source.observe(frames[t].image, state.cur_count, state.prev_count, last_action)
            raw = source.act_mean(obs)
            params = map_action(raw)
            last_action = raw
        stats, tracks, breakdown = process_frame(state, frames, t, params, setup, episode_id)
        alive = {tr.id: tr.age for tr in tracks}
        for fid, age in ages.items():
            if fid not in alive:
                final_ages.append(age)
        ages = alive
        records.append(FrameRecord(breakdown=breakdown, stats=stats))
    final_ages.extend(ages.values())
    return records, final_ages


class EpisodeBank:
    """Pre-rendered episodes shared by all environments.

    Episodes are `n_frames` long; scenes come from `scene_seeds` and each
    scene contributes `trajectories_per_scene` random camera paths.  Call
    `attach_references` once the reference raw action is known.
    """

    def __init__(
        self,
        scene_seeds: Sequence[int],
        camera: PinholeCamera,
        n_frames: int = 128,
        fps: float = 30.0,
        trajectories_per_scene: int = 2,
        augment: Optional[AugmentConfig] = None,
        texture: Optional[TextureSpec] = None,
        num_planes: int = 6,
        seed: int = 0,
        translation_scale: float = 0.35,
        rotation_scale_deg: float = 8.0,
        vary_texture: bool = True,
    ):
        self.camera = camera
        self.fps = fps
        self.episodes: List[List[SequenceFrame]] = []
        self.references: List[Optional[ReferenceRun]] = []
        self._code_cache = {}
        base_tex = texture if texture is not None else TextureSpec(base_frequency=1.6)
        for si, ss in enumerate(scene_seeds):
            tex = base_tex
            if vary_texture:
                # Scene-to-scene texture density/contrast spread is what makes
                # static parameters a compromise.
                trng = np.random.default_rng(np.random.SeedSequence([int(ss), 0x7E9]))
                tex = TextureSpec(
                    octaves=base_tex.octaves,
                    base_frequency=base_tex.base_frequency * float(2.0 ** trng.uniform(-0.8, 0.8)),
                    contrast=base_tex.contrast * float(trng.uniform(0.35, 1.0)),
                    seed=base_tex.seed,
                )
            scene = generate_scene(ss, tex, num_planes)
            for k in range(trajectories_per_scene):
                tseed = int(np.random.SeedSequence([seed, si, k, 0x7]).generate_state(1)[0])
                traj = random_trajectory(tseed, n_frames, fps,
                                         translation_scale, rotation_scale_deg)
                eseed = int(np.random.SeedSequence([seed, si, k, 0xE]).generate_state(1)[0])
                self.episodes.append(make_episode(scene, traj, camera, augment, seed=eseed))
                self.references.append(None)

    def __len__(self):
        return len(self.episodes)

    def cached_code(self, episode_id: int, t: int, bundle: PolicyBundle) -> np.ndarray:
        """Image code of a bank frame; texture statistics are memoized since
        they do not depend on the policy."""
        if bundle.obs_mode != "texture":
            return bundle.image_code(self.episodes[episode_id][t].image)
        key = (episode_id, t)
        code = self._code_cache.get(key)
        if code is None:
            code = bundle.image_code(self.episodes[episode_id][t].image)
            self._code_cache[key] = code
        return code

    def attach_references(self, reference_raw: np.ndarray, setup: EvalSetup) -> None:
        self.references = [
            reference_run(frames, reference_raw, setup, episode_id=e)
            for e, frames in enumerate(self.episodes)
        ]

    def mean_objective(self, params: FrontendParams, setup: EvalSetup,
                       episode_ids: Optional[Sequence[int]] = None,
                       stride: int = 1) -> float:
        """Mean per-frame total reward of static params over bank episodes."""
        totals = []
        ids = range(len(self.episodes)) if episode_ids is None else episode_ids
        for e in ids:
            frames = self.episodes[e][::stride] if stride > 1 else self.episodes[e]
            records, _ = evaluate_sequence(frames, params, setup, episode_id=e)
            totals.extend(r.breakdown.r_total for r in records)
        return float(np.mean(totals))


class SimEnv:
    """One rollout environment cycling deterministically through bank episodes."""

    def __init__(self, bank: EpisodeBank, env_index: int, setup: EvalSetup, seed: int = 0):
        self.bank = bank
        self.env_index = env_index
        self.setup = setup
        order_rng = np.random.default_rng(np.random.SeedSequence([seed, env_index, 0x0D]))
        self._order = order_rng.permutation(len(bank)).tolist()
        self._counter = env_index  # stagger initial episodes across envs
        self.episode_id = -1
        self.frames: List[SequenceFrame] = []
        self.state: Optional[TrackerState] = None
        self.t = 0
        self.last_action = np.zeros(3)

    def reset(self) -> None:
        self.episode_id = self._order[self._counter % len(self._order)]
        self._counter += 1
        self.frames = self.bank.episodes[self.episode_id]
        w, h = self.frames[0].image.width, self.frames[0].image.height
        self.state = TrackerState(width=w, height=h, num_levels=self.setup.frontend.num_levels)
        self.t = 0
        self.last_action = np.zeros(3)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def observe(self, bundle: PolicyBundle) -> Tuple[Observation, PrivilegedCriticInput]:
        obs = Observation(
            image_code=self.bank.cached_code(self.episode_id, self.t, bundle),
            count_cur=self.state.cur_count / bundle.max_features,
            count_prev=self.state.prev_count / bundle.max_features,
            last_action=self.last_action,
        )
        priv = PrivilegedCriticInput(obs, self.t, bundle.horizon, bundle.num_bands)
        return obs, priv

    def step(self, raw_action: np.ndarray) -> Tuple[float, bool, RewardBreakdown]:
        """Apply an action to the current frame; returns (train_reward, done, breakdown)."""
        ref = self.bank.references[self.episode_id]
        if ref is None:
            raise MissingReferenceRun(f"episode {self.episode_id} has no reference run")
        params = map_action(raw_action)
        _, _, breakdown = process_frame(
            self.state, self.frames, self.t, params, self.setup, self.episode_id
        )
        train_r = breakdown.r_total - ref[self.t].r_total
        self.last_action = np.asarray(raw_action, dtype=np.float64).reshape(3)
        self.t += 1
        done = self.t >= self.n_frames
        return train_r, done, breakdown


def collect_rollout(
    envs: Sequence[SimEnv],
    bundle: PolicyBundle,
    steps: int,
    seed: int,
    update_index: int,
    deterministic: bool = False,
    action_override: Optional[Callable[[int, int], np.ndarray]] = None,
) -> RolloutBuffer:
    """Roll every env for `steps` frames under the current policy snapshot.

    Episodes are reset at the start, so one rollout spans one episode per
    env.  `action_override(env_index, t)`, when given, replaces sampling
    (used by the baseline-identity checks).
    """
    n_env = len(envs)
    obs_dim = bundle.obs_dim
    critic_dim = bundle.critic_dim
    obs_buf = np.zeros((n_env, steps, obs_dim))
    critic_buf = np.zeros((n_env, steps, critic_dim))
    act_buf = np.zeros((n_env, steps, 3))
    logp_buf = np.zeros((n_env, steps))
    value_buf = np.zeros((n_env, steps))
    rew_buf = np.zeros((n_env, steps))
    done_buf = np.zeros((n_env, steps))

    rngs = [
        np.random.default_rng(np.random.SeedSequence([seed, i, update_index]))
        for i in range(n_env)
    ]
    for env in envs:
        env.reset()
    std = bundle.head.std
    for t in range(steps):
        for i, env in enumerate(envs):
            if env.t >= env.n_frames:
                env.reset()
            obs, priv = env.observe(bundle)
            obs_buf[i, t] = obs.to_vector()
            critic_buf[i, t] = priv.to_vector()
        # One batched forward per step across all envs.
        means = np.tanh(bundle.policy_net.forward(obs_buf[:, t]))
        value_buf[:, t] = bundle.critic_net.forward(critic_buf[:, t])[:, 0]
        for i, env in enumerate(envs):
            mean = means[i]
            if action_override is not None:
                action = action_override(i, t)
            elif deterministic:
                action = mean
            else:
                action = mean + std * rngs[i].standard_normal(3)
            logp = gaussian_log_prob(mean, std, action)
            train_r, done, _ = env.step(action)
            act_buf[i, t] = action
            logp_buf[i, t] = logp
            rew_buf[i, t] = train_r
            done_buf[i, t] = 1.0 if done else 0.0
    # Episodes end exactly at the last step, so bootstrap values are masked
    # by the done flag; zeros keep the buffer well-defined regardless.
    bootstrap = np.zeros(n_env)
    return RolloutBuffer(
        observations=obs_buf,
        critic_inputs=critic_buf,
        actions=act_buf,
        log_probs=logp_buf,
        values=value_buf,
        rewards=rew_buf,
        dones=done_buf,
        bootstrap_values=bootstrap,
    )


@dataclass
class TrainHistoryRow:
    update: int
    lr: float
    mean_train_reward: float
    policy_loss: float
    value_loss: float
    clip_fraction: float
    kl: float


TRAIN_CSV_HEADER = "update,lr,mean_train_reward,policy_loss,value_loss,clip_fraction,kl"


def train(
    bank: EpisodeBank,
    bundle: PolicyBundle,
    setup: EvalSetup,
    config: PpoConfig,
    seed: int = 0,
    start_update: int = 0,
    optimizer: Optional[PpoOptimizer] = None,
    progress: Optional[Callable[[TrainHistoryRow], None]] = None,
) -> Tuple[List[TrainHistoryRow], PpoOptimizer]:
    """PPO training loop: rollouts, GAE, clipped updates, linear lr decay."""
    envs = [SimEnv(bank, i, setup, seed) for i in range(config.num_envs)]
    if optimizer is None:
        optimizer = PpoOptimizer(bundle)
    history: List[TrainHistoryRow] = []
    for update in range(start_update, config.total_updates):
        lr = config.lr_at(update)
        buffer = collect_rollout(envs, bundle, config.rollout_steps, seed, update)
        update_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0F, update]))
        diag = ppo_update(buffer, optimizer, config, lr, update_rng)
        row = TrainHistoryRow(
            update=update,
            lr=lr,
            mean_train_reward=float(buffer.rewards.mean()),
            policy_loss=diag.policy_loss,
            value_loss=diag.value_loss,
            clip_fraction=diag.clip_fraction,
            kl=diag.kl,
        )
        history.append(row)
        if progress is not None:
            progress(row)
    return history, optimizer


def tune_reference_pso(
    bank: EpisodeBank,
    setup: EvalSetup,
    pso_config,
    episode_ids: Optional[Sequence[int]] = None,
    stride: int = 1,
):
    """PSO over the static parameter box, maximizing mean per-frame reward.

    Returns (best FrontendParams, best raw action, best score, history).
    """
    from .learn import pso_optimize
    from .policy import quantize_params

    def objective(x: np.ndarray) -> float:
        params = quantize_params(x[0], x[1], x[2])
        return bank.mean_objective(params, setup, episode_ids, stride)

    best_x, best_score, history = pso_optimize(objective, pso_config)
    best_params = quantize_params(best_x[0], best_x[1], best_x[2])
    return best_params, raw_from_params(best_params), best_score, history
