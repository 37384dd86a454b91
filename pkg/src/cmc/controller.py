"""The control loop: arbitration on learning progress, replay and the training schedule."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import RunConfig
from .dynamics import CuriosityState, LatentDynamics
from .envs import make_env
from .learner import ActorCritic, LearnerConfig, Minibatch
from .planner import Planner, PlannerConfig, PlanResult

MODEL_BASED = "model_based"
MODEL_FREE = "model_free"


class RunAborted(RuntimeError):
    """The environment or a learner failed; the message carries the diagnostic."""


@dataclass
class Transition:
    obs: np.ndarray
    phi: np.ndarray
    action: np.ndarray
    reward: float
    reward_ext: float
    next_obs: np.ndarray
    next_phi: np.ndarray
    done: bool


@dataclass
class ControlDecision:
    source: str
    lp_used: float
    pre_noise_action: np.ndarray
    executed_action: np.ndarray | None = None
    plan: PlanResult | None = None


class ReplayBuffer:
    """Ring buffer; observations are stored as 8-bit pixels (they are quantized to k/255)."""

    def __init__(self, capacity, obs_shape, action_dim, latent_dim, seed=0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=np.uint8)
        self.next_obs = np.zeros_like(self.obs)
        self.phi = np.zeros((capacity, latent_dim))
        self.next_phi = np.zeros((capacity, latent_dim))
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.reward_ext = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.rng = np.random.default_rng(seed)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition):
        i = self.head
        self.obs[i] = _to_bytes(tr.obs)
        self.next_obs[i] = _to_bytes(tr.next_obs)
        self.phi[i] = tr.phi
        self.next_phi[i] = tr.next_phi
        self.action[i] = tr.action
        self.reward[i] = tr.reward
        self.reward_ext[i] = tr.reward_ext
        self.done[i] = float(tr.done)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, size=n)

    def gather(self, idx) -> Minibatch:
        return Minibatch(obs=self.obs[idx] / 255.0, phi=self.phi[idx], action=self.action[idx],
                         reward=self.reward[idx], reward_ext=self.reward_ext[idx],
                         next_obs=self.next_obs[idx] / 255.0, next_phi=self.next_phi[idx], done=self.done[idx])

    def sample(self, n) -> Minibatch:
        return self.gather(self.sample_indices(n))


def _to_bytes(img):
    return np.rint(np.asarray(img) * 255.0).astype(np.uint8)


@dataclass
class EpisodeMetrics:
    episode: int
    return_ext: float
    success: int
    mb_fraction: float
    mean_e_prd: float
    mean_lp: float
    mean_r_int: float
    steps: int


@dataclass
class RunResult:
    episodes: list[EpisodeMetrics] = field(default_factory=list)
    planner_invocations: int = 0
    intrinsic_uses: int = 0
    model_updates: int = 0
    env_steps: int = 0
    train_ticks: int = 0
    wall_seconds: float = 0.0
    cpu_seconds: float = 0.0


class MetaController:
    """Owns every mutable piece of one run: networks, buffer, curiosity and counters."""

    def __init__(self, config: RunConfig, env=None, trace_path=None):
        self.config = cfg = config
        self.env = env or make_env(cfg.env, reward_mode=cfg.reward, episode_length=cfg.episode_length,
                                   max_step=cfg.max_step, seed=cfg.seed)
        obs_shape = self.env.observation_shape
        action_dim = self.env.action_dim
        seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
        self.learner = ActorCritic(obs_shape, action_dim, LearnerConfig(
            latent_dim=cfg.latent_dim, preset=cfg.preset, gamma=cfg.gamma, tau=cfg.tau, lam_rec=cfg.lam_rec,
            lam_critic=cfg.lam_critic, critic_lr=cfg.critic_lr, actor_lr=cfg.actor_lr, cacla_lr=cfg.cacla_lr),
            seed=int(seeds[0]))
        self.dynamics = LatentDynamics(cfg.latent_dim, action_dim, hidden=cfg.model_hidden, lr=cfg.model_lr,
                                       seed=int(seeds[1]) % (2**31))
        self.planner = Planner(self.dynamics, self.learner.actor, PlannerConfig(
            horizon=cfg.horizon, iterations=cfg.plan_iterations, rate=cfg.plan_rate,
            target_return=cfg.target_return))
        self.curiosity = CuriosityState(window=cfg.window, lag=cfg.lag, decay=cfg.decay,
                                        initial_lp=cfg.initial_lp)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, obs_shape, action_dim, cfg.latent_dim, seed=int(seeds[2]))
        self.noise_rng = np.random.default_rng(int(seeds[3]))
        self.lp_prev = cfg.initial_lp
        self.t = 0
        self.result = RunResult()
        self.trace = open(trace_path, "w") if trace_path else None

    # ------------------------------------------------------------------ acting

    def select_action(self, phi, lp_prev) -> ControlDecision:
        if self.config.cmc and lp_prev >= 0:
            self.result.planner_invocations += 1
            # the actor may have been replaced (tests) so keep the planner pointed at it
            self.planner.actor = self.learner.actor
            plan = self.planner.plan(phi)
            return ControlDecision(MODEL_BASED, lp_prev, plan.first_action, plan=plan)
        return ControlDecision(MODEL_FREE, lp_prev, self.learner.act(phi))

    def add_noise(self, action):
        std = self.config.noise_std
        noise = self.noise_rng.standard_normal(np.shape(action)) * std
        return np.clip(np.asarray(action, dtype=np.float64) + noise, -1.0, 1.0)

    def env_step_and_record(self, obs, phi, decision: ControlDecision):
        """Execute the decision, update curiosity and store one transition."""
        a = decision.executed_action
        try:
            res = self.env.step(a)
        except Exception as exc:  # the run cannot continue after an environment fault
            raise RunAborted(f"environment step failed at t={self.t}: {exc!r}") from exc
        phi_next = self.learner.encode(res.observation)
        info = {"e_prd": math.nan, "lp": math.nan, "r_int": math.nan}
        reward = res.reward_ext
        if self.config.cmc:
            e = self.dynamics.step_error(phi, a, phi_next, res.reward_ext)
            self.curiosity.record(e)
            lp = self.curiosity.learning_progress()
            r_int = self.curiosity.intrinsic_reward()
            reward = self.curiosity.combine_reward(res.reward_ext, r_int, self.t)
            self.result.intrinsic_uses += 1
            self.lp_prev = lp
            info = {"e_prd": e, "lp": lp, "r_int": r_int}
        tr = Transition(obs, phi, a, reward, res.reward_ext, res.observation, phi_next, res.done)
        self.buffer.add(tr)
        return tr, res, info

    # ------------------------------------------------------------------ learning

    def train_tick(self):
        """One training tick; returns a small loss report, or None during warmup."""
        cfg = self.config
        if len(self.buffer) < cfg.minibatch:
            return None
        report = {"critic_loss": [], "rec_loss": [], "model_loss": [], "cacla_updates": 0}
        ac = self.learner
        for _ in range(cfg.n_ac):
            batch = self.buffer.sample(cfg.minibatch)
            step = ac.combined_update(batch)
            if step.get("aborted"):
                raise RunAborted(f"non-finite critic loss at t={self.t}")
            report["critic_loss"].append(step["critic_loss"])
            report["rec_loss"].append(step["rec_loss"])
            # the actor reads latents as given; the encoder is not trained here
            phi = step["phi"]
            if cfg.algo == "ddpg":
                ac.ddpg_actor_update(batch, phi)
            else:
                report["cacla_updates"] += ac.cacla_actor_update(batch, phi)
        if cfg.cmc:
            for _ in range(cfg.n_model):
                batch = self.buffer.sample(cfg.minibatch)
                phi, phi_next = batch.phi, batch.next_phi
                if cfg.reencode:
                    phi, phi_next = ac.encode(batch.obs), ac.encode(batch.next_obs)
                try:
                    report["model_loss"].append(self.dynamics.train(phi, batch.action, phi_next,
                                                                    batch.reward_ext))
                except nn.NonFiniteError as exc:
                    raise RunAborted(f"non-finite model loss at t={self.t}") from exc
                self.result.model_updates += 1
        ac.soft_update_targets()
        self.result.train_ticks += 1
        return report

    # ------------------------------------------------------------------ loop

    def run_episode(self, episode):
        cfg = self.config
        obs = self.env.reset(episode)
        ret, mb, steps, success = 0.0, 0, 0, 0
        e_list, lp_list, ri_list = [], [], []
        for _ in range(cfg.episode_length):
            phi = self.learner.encode(obs)
            decision = self.select_action(phi, self.lp_prev)
            decision.executed_action = self.add_noise(decision.pre_noise_action)
            tr, res, info = self.env_step_and_record(obs, phi, decision)
            self.train_tick()
            if self.trace:
                self._trace(episode, decision, tr, info)
            self.t += 1
            steps += 1
            ret += res.reward_ext
            mb += decision.source == MODEL_BASED
            if cfg.cmc:
                e_list.append(info["e_prd"])
                lp_list.append(info["lp"])
                ri_list.append(info["r_int"])
            obs = res.observation
            if res.done:
                success = int(res.info.get("outcome") == "success")
                break
        self.result.env_steps += steps
        return EpisodeMetrics(episode, ret, success, mb / steps, _mean(e_list), _mean(lp_list), _mean(ri_list),
                              steps)

    def run(self, episodes=None, on_episode=None):
        n = self.config.n_episodes if episodes is None else episodes
        wall, cpu = time.perf_counter(), time.process_time()
        try:
            for ep in range(n):
                m = self.run_episode(ep)
                self.result.episodes.append(m)
                if on_episode:
                    on_episode(m)
        finally:
            self.result.wall_seconds += time.perf_counter() - wall
            self.result.cpu_seconds += time.process_time() - cpu
            if self.trace:
                self.trace.flush()
        return self.result

    def close(self):
        if self.trace:
            self.trace.close()
            self.trace = None

    def _trace(self, episode, decision, tr, info):
        rec = {"t": self.t, "episode": episode, "source": decision.source, "lp_used": decision.lp_used,
               "pre_noise_action": decision.pre_noise_action.tolist(), "action": tr.action.tolist(),
               "reward_ext": tr.reward_ext, "reward": tr.reward, "done": bool(tr.done),
               "e_prd": info["e_prd"], "lp": info["lp"], "r_int": info["r_int"]}
        if decision.plan is not None:
            rec["plan"] = {"H": self.planner.config.horizon, "K": self.planner.config.iterations,
                           "loss_per_iteration": decision.plan.losses,
                           "chosen_action": decision.plan.first_action.tolist()}
        self.trace.write(json.dumps(rec, allow_nan=True) + "\n")

    def save(self, directory):
        from pathlib import Path

        directory = Path(directory)
        self.learner.save(directory)
        for name in ("trunk", "p_head", "r_head"):
            nn.save_checkpoint(getattr(self.dynamics, name), directory / f"dynamics_{name}.json")


def tune_allocator(threshold=256 * 2**20):
    """Keep large numpy buffers in the glibc heap instead of fresh mmap pages.

    Training allocates many short-lived arrays of a few hundred kilobytes;
    with the default thresholds each one is a new mapping and its page faults
    cost more than the arithmetic. Returns False where mallopt is unavailable.
    """
    import ctypes
    import ctypes.util

    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        m_trim_threshold, m_mmap_threshold = -1, -3
        return bool(libc.mallopt(m_mmap_threshold, threshold)) and bool(libc.mallopt(m_trim_threshold, threshold))
    except (OSError, AttributeError):
        return False


def _mean(values):
    return float(np.mean(values)) if values else math.nan
