"""Recurrent PPO: rollouts, GAE, clipped-surrogate updates, KL-adaptive lr.

Training state (networks, Adam moments, learning rate, RNG streams and, for
plain resumes, the environments themselves) lives in a single checkpoint file
so a resumed run replays bit-for-bit.
"""

from __future__ import annotations

import json
import logging
import math
import os
import pickle
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from pushgrid.env import SUCCESS, TIMEOUT, VecObservation, VecPushEnv, derive_seed
from pushgrid.errors import CheckpointMismatchError, InvalidInputError, TrainingFault
from pushgrid.nn import core
from pushgrid.nn.extractors import KINDS
from pushgrid.nn.policy import ActorCritic, ObsBatch, RecurrentState
from pushgrid.scenarios import ScenarioSpec, resolve_scenario

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# Named sub-streams of the run seed.
STREAM_ENV, STREAM_POLICY, STREAM_INIT, STREAM_MINIBATCH = 0, 1, 2, 3


@dataclass
class TrainConfig:
    num_envs: int = 128
    rollout_length: int = 120
    update_epochs: int = 5
    num_minibatches: int = 4
    clip_epsilon: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    kl_target: float = 0.01
    adaptive_lr: bool = True
    lr_init: float = 3e-4
    lr_bounds: tuple[float, float] = (1e-6, 1e-2)
    max_grad_norm: float = 1.0
    max_env_steps: int = 20_000_000
    checkpoint_every: int = 10
    extractor: str = "attention"
    seed: int = 0

    def __post_init__(self):
        self.lr_bounds = tuple(float(v) for v in self.lr_bounds)
        if self.extractor not in KINDS:
            raise InvalidInputError(f"extractor: unknown kind {self.extractor!r}; choose from {', '.join(KINDS)}")
        for name in ("num_envs", "rollout_length", "update_epochs", "num_minibatches", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be at least 1")
        if self.max_env_steps < 0:
            raise InvalidInputError("max_env_steps must be non-negative")
        lo, hi = self.lr_bounds
        if not (0 < lo <= self.lr_init <= hi):
            raise InvalidInputError("lr_init must lie within lr_bounds")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.rollout_length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_bounds"] = list(self.lr_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidInputError(f"unknown training config key(s): {', '.join(unknown)}")
        return cls(**d)


# -- advantage estimation -----------------------------------------------------------


def bootstrap_timeout(reward: float, value_estimate: float, discount: float) -> float:
    """Final reward of a time-limit-truncated episode: r + discount * V(terminal)."""
    return reward + discount * value_estimate


def compute_gae(rewards, values, dones, bootstrap_value, discount: float = 0.99, lam: float = 0.95):
    """GAE over time axis 0, truncated at ``dones``; returns (advantages, returns).

    ``bootstrap_value`` is V of the observation following the last step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + discount * next_value * notdone[t] - values[t]
        last = delta + discount * lam * notdone[t] * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero mean, unit (population) std over the whole batch; constant input maps to zeros."""
    adv = np.asarray(adv, dtype=np.float64)
    centered = adv - adv.mean()
    std = math.sqrt(float(np.mean(centered * centered)))
    return centered / std if std > 0 else centered


def adapt_lr(current_lr: float, measured_kl: float, kl_target: float = 0.01,
             bounds: tuple[float, float] = (1e-6, 1e-2)) -> float:
    if measured_kl > 2.0 * kl_target:
        lr = current_lr / 1.5
    elif measured_kl < kl_target / 2.0:
        lr = current_lr * 1.5
    else:
        lr = current_lr
    return min(max(lr, bounds[0]), bounds[1])


# -- rollouts ---------------------------------------------------------------------


class GridTable:
    """Distinct patch arrays seen during a rollout, keyed by the env's grid id."""

    def __init__(self):
        self.index: dict[int, int] = {}
        self.patches: list[np.ndarray] = []

    def add(self, obs: VecObservation) -> np.ndarray:
        out = np.empty(len(obs), dtype=np.int64)
        for i, gid in enumerate(obs.grid_id):
            j = self.index.get(int(gid))
            if j is None:
                j = self.index[int(gid)] = len(self.patches)
                self.patches.append(obs.patches[i])
            out[i] = j
        return out

    def stack(self) -> np.ndarray:
        return np.stack(self.patches)


@dataclass
class RolloutBuffer:
    state: np.ndarray  # (T, N, 8)
    grid_index: np.ndarray  # (T, N) rows of `grids`
    grids: np.ndarray  # (G, n, 256) uint8
    actions: np.ndarray  # (T, N, 2)
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray  # with timeout bootstrapping applied
    dones: np.ndarray
    kinds: np.ndarray
    init_state: RecurrentState
    last_value: np.ndarray  # (N,)
    episode_returns: list = field(default_factory=list)
    episode_kinds: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.state.shape[0]

    @property
    def num_envs(self) -> int:
        return self.state.shape[1]

    def __len__(self):
        return self.length * self.num_envs

    def starts(self) -> np.ndarray:
        """(T, N): true where an episode begins at step t within the rollout."""
        s = np.zeros_like(self.dones)
        s[1:] = self.dones[:-1]
        return s

    def observations(self, envs) -> ObsBatch:
        """Time-major observations of the selected envs, T * len(envs) rows."""
        st = self.state[:, envs].reshape(-1, self.state.shape[-1])
        patches = self.grids[self.grid_index[:, envs].reshape(-1)]
        return ObsBatch.from_numpy(st, patches)


@dataclass
class RolloutCarry:
    """What one rollout hands to the next: current obs, LSTM state, episode tallies."""

    obs: VecObservation
    state: RecurrentState
    episode_return: np.ndarray


def start_carry(env: VecPushEnv) -> RolloutCarry:
    obs = env.reset()
    return RolloutCarry(obs, RecurrentState.zeros(env.num_envs), np.zeros(env.num_envs))


@torch.no_grad()
def collect_rollout(model: ActorCritic, env: VecPushEnv, length: int, rng: np.random.Generator,
                    discount: float = 0.99, carry: Optional[RolloutCarry] = None):
    """Run ``length`` steps in every env; returns (buffer, carry)."""
    if carry is None:
        carry = start_carry(env)
    N = env.num_envs
    T = int(length)
    table = GridTable()
    state_buf = np.zeros((T, N, carry.obs.state.shape[1]))
    grid_idx = np.zeros((T, N), dtype=np.int64)
    actions = np.zeros((T, N, 2), dtype=np.int64)
    logp = np.zeros((T, N))
    values = np.zeros((T, N))
    rewards = np.zeros((T, N))
    dones = np.zeros((T, N), dtype=bool)
    kinds = np.zeros((T, N), dtype=np.int64)
    init_state = RecurrentState(carry.state.tensor.clone())
    obs, state, ep_ret = carry.obs, carry.state, carry.episode_return.copy()
    ep_returns, ep_kinds = [], []

    for t in range(T):
        state_buf[t] = obs.state
        grid_idx[t] = table.add(obs)
        dist, v, next_state = model.step(ObsBatch.from_vec(obs), state)
        a = core.sample_bins(dist, rng)
        actions[t] = a
        logp[t] = core.log_prob(dist, a).numpy()
        values[t] = v.numpy()
        res = env.step(a)
        r = res.reward.copy()
        ep_ret += res.reward
        timeout = res.done & (res.kind == TIMEOUT)
        if timeout.any():
            idx = np.flatnonzero(timeout)
            term = res.terminal_observation.select(idx)
            v_term = model.value_only(ObsBatch.from_vec(term), next_state.select(idx)).numpy()
            for j, i in enumerate(idx):
                r[i] = bootstrap_timeout(r[i], v_term[j], discount)
        rewards[t] = r
        dones[t] = res.done
        kinds[t] = res.kind
        for i in np.flatnonzero(res.done):
            ep_returns.append(float(ep_ret[i]))
            ep_kinds.append(int(res.kind[i]))
            ep_ret[i] = 0.0
        obs = res.observation
        state = next_state.reset(res.done)

    last_value = model.value_only(ObsBatch.from_vec(obs), state).numpy()
    buf = RolloutBuffer(state_buf, grid_idx, table.stack(), actions, logp, values, rewards, dones, kinds,
                        init_state, last_value, ep_returns, ep_kinds)
    return buf, RolloutCarry(obs, state, ep_ret)


# -- optimisation -----------------------------------------------------------------


@dataclass
class MiniBatch:
    obs: ObsBatch  # time-major, T * B rows
    starts: torch.Tensor  # (T, B) bool
    init: RecurrentState
    actions: np.ndarray  # (T, B, 2)
    old_log_probs: torch.Tensor  # (T, B)
    advantages: torch.Tensor
    returns: torch.Tensor

    @property
    def T(self) -> int:
        return self.starts.shape[0]


def make_minibatch(buf: RolloutBuffer, envs, advantages: np.ndarray, returns: np.ndarray) -> MiniBatch:
    envs = np.asarray(envs)
    return MiniBatch(
        obs=buf.observations(envs),
        starts=torch.from_numpy(buf.starts()[:, envs]),
        init=buf.init_state.select(torch.from_numpy(envs)),
        actions=buf.actions[:, envs],
        old_log_probs=torch.from_numpy(buf.log_probs[:, envs]),
        advantages=torch.from_numpy(advantages[:, envs]),
        returns=torch.from_numpy(returns[:, envs]),
    )


def ppo_loss(model: ActorCritic, mb: MiniBatch, clip_epsilon: float = 0.2, value_coef: float = 0.5,
             entropy_coef: float = 0.0):
    """Composite PPO loss on one minibatch; returns (loss, info)."""
    dist, values = model.evaluate_sequence(mb.obs, mb.starts, mb.init, mb.T)
    new_logp = core.log_prob(dist, mb.actions)
    ratio = torch.exp(new_logp - mb.old_log_probs)
    adv = mb.advantages
    surr = ratio * adv
    if math.isfinite(clip_epsilon):
        surr = torch.min(surr, torch.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv)
    policy_loss = -surr.mean()
    value_loss = ((values - mb.returns) ** 2).mean()
    loss = policy_loss + value_coef * value_loss
    ent = core.entropy(dist).mean()
    if entropy_coef != 0.0:
        loss = loss - entropy_coef * ent
    with torch.no_grad():
        info = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(ent),
            "approx_kl": float((mb.old_log_probs - new_logp).mean()),
            "clip_fraction": float(((ratio - 1.0).abs() > clip_epsilon).to(torch.float64).mean()),
        }
    return loss, info


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    learning_rate: float
    success_rate: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def get_lr(optimizer: torch.optim.Optimizer) -> float:
    return float(optimizer.param_groups[0]["lr"])


def ppo_update(model: ActorCritic, optimizer: torch.optim.Optimizer, buf: RolloutBuffer, config: TrainConfig,
               rng: np.random.Generator) -> UpdateStats:
    adv, returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.last_value, config.discount,
                               config.gae_lambda)
    adv = normalize_advantages(adv)
    N = buf.num_envs
    n_mb = min(config.num_minibatches, N)
    params = [p for p in model.parameters() if p.requires_grad]
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "approx_kl": 0.0, "clip_fraction": 0.0}
    count = 0
    for _ in range(config.update_epochs):
        for envs in np.array_split(rng.permutation(N), n_mb):
            mb = make_minibatch(buf, np.sort(envs), adv, returns)
            loss, info = ppo_loss(model, mb, config.clip_epsilon, config.value_coef, config.entropy_coef)
            if not torch.isfinite(loss):
                raise TrainingFault(f"non-finite loss ({float(loss.detach())}) during the PPO update")
            if config.adaptive_lr:
                set_lr(optimizer, adapt_lr(get_lr(optimizer), info["approx_kl"], config.kl_target,
                                           config.lr_bounds))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
            optimizer.step()
            for k in totals:
                totals[k] += info[k]
            count += 1
    ended = len(buf.episode_kinds)
    success = sum(k == SUCCESS for k in buf.episode_kinds) / ended if ended else None
    return UpdateStats(**{k: v / count for k, v in totals.items()}, learning_rate=get_lr(optimizer),
                       success_rate=success)


# -- checkpoints ------------------------------------------------------------------


def _atomic_save(obj, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointMismatchError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != "pushgrid-checkpoint":
        raise CheckpointMismatchError(f"{path} is not a pushgrid checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"checkpoint version {ckpt.get('version')} is not supported")
    return ckpt


def model_from_checkpoint(ckpt: dict, extractor: Optional[str] = None) -> ActorCritic:
    kind = ckpt["extractor"]
    if extractor is not None and extractor != kind:
        raise CheckpointMismatchError(f"checkpoint holds a {kind!r} extractor, requested {extractor!r}")
    model = ActorCritic(kind)
    try:
        model.load_state_dict(ckpt["model"])
    except RuntimeError as exc:
        raise CheckpointMismatchError(f"checkpoint parameters do not match the {kind!r} architecture") from exc
    return model


def load_policy(path, extractor: Optional[str] = None) -> ActorCritic:
    model = model_from_checkpoint(load_checkpoint(path), extractor)
    model.eval()
    return model


# -- training loop ----------------------------------------------------------------


class Trainer:
    """Owns the model, optimiser, environments and RNG streams of one run."""

    def __init__(self, config: TrainConfig, scenario="training", out_dir=None, model: Optional[ActorCritic] = None):
        self.config = config
        self.scenario: ScenarioSpec = resolve_scenario(scenario)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        seed = config.seed
        if model is None:
            torch.manual_seed(derive_seed(seed, STREAM_INIT) % (2 ** 63))
            model = ActorCritic(config.extractor)
        self.model = model
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.lr_init)
        self.env = VecPushEnv(self.scenario, config.num_envs, seed=derive_seed(seed, STREAM_ENV))
        self.policy_rng = np.random.default_rng(derive_seed(seed, STREAM_POLICY))
        self.minibatch_rng = np.random.default_rng(derive_seed(seed, STREAM_MINIBATCH))
        self.carry: Optional[RolloutCarry] = None
        self.env_steps = 0
        self.updates = 0
        self.last_stats: Optional[UpdateStats] = None

    @property
    def lr(self) -> float:
        return get_lr(self.optimizer)

    def iteration(self) -> dict:
        """One rollout plus one update; returns the metrics record."""
        cfg = self.config
        t0 = time.perf_counter()
        self.model.eval()
        buf, self.carry = collect_rollout(self.model, self.env, cfg.rollout_length, self.policy_rng,
                                          cfg.discount, self.carry)
        self.model.train()
        stats = ppo_update(self.model, self.optimizer, buf, cfg, self.minibatch_rng)
        self.env_steps += len(buf)
        self.updates += 1
        self.last_stats = stats
        rets = buf.episode_returns
        return {
            "update": self.updates,
            "env_steps": self.env_steps,
            "episodes": len(rets),
            "success_rate": stats.success_rate,
            "mean_reward": float(np.mean(rets)) if rets else None,
            "mean_step_reward": float(buf.rewards.mean()),
            "kl": stats.approx_kl,
            "lr": stats.learning_rate,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "clip_fraction": stats.clip_fraction,
            "seconds": time.perf_counter() - t0,
        }

    def checkpoint(self, include_env: bool = True) -> dict:
        ckpt = {
            "format": "pushgrid-checkpoint",
            "version": CHECKPOINT_VERSION,
            "extractor": self.config.extractor,
            "config": self.config.to_dict(),
            "scenario": self.scenario.to_dict(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "lr": self.lr,
            "env_steps": self.env_steps,
            "updates": self.updates,
            "rng": {
                "policy": self.policy_rng.bit_generator.state,
                "minibatch": self.minibatch_rng.bit_generator.state,
                "torch": torch.get_rng_state(),
            },
        }
        if include_env and self.carry is not None:
            ckpt["env"] = pickle.dumps((self.env, self.carry))
        return ckpt

    def save(self, path, include_env: bool = True) -> Path:
        path = Path(path)
        _atomic_save(self.checkpoint(include_env), path)
        return path

    @classmethod
    def from_checkpoint(cls, path, scenario=None, out_dir=None, config: Optional[TrainConfig] = None) -> Trainer:
        """Rebuild a trainer from ``path``.

        Without ``scenario`` the run resumes exactly, environments included.
        With a scenario (fine-tuning) the environments are fresh but model,
        optimiser moments, learning rate and RNG streams carry over.
        """
        ckpt = load_checkpoint(path)
        saved = TrainConfig.from_dict({**ckpt["config"], "lr_bounds": tuple(ckpt["config"]["lr_bounds"])})
        if config is not None and config.extractor != saved.extractor:
            raise CheckpointMismatchError(
                f"checkpoint holds a {saved.extractor!r} extractor, config requests {config.extractor!r}")
        cfg = config or saved
        model = model_from_checkpoint(ckpt, cfg.extractor)
        resume = scenario is None
        trainer = cls(cfg, ckpt["scenario"] if resume else scenario, out_dir, model=model)
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        set_lr(trainer.optimizer, float(ckpt["lr"]))
        trainer.env_steps = int(ckpt["env_steps"])
        trainer.updates = int(ckpt["updates"])
        trainer.policy_rng.bit_generator.state = ckpt["rng"]["policy"]
        trainer.minibatch_rng.bit_generator.state = ckpt["rng"]["minibatch"]
        torch.set_rng_state(ckpt["rng"]["torch"])
        if resume and "env" in ckpt:
            trainer.env, trainer.carry = pickle.loads(ckpt["env"])
        return trainer

    def run(self, max_env_steps: int, metrics_path=None, checkpoint_dir=None) -> list[Path]:
        """Iterate until ``max_env_steps`` total env steps; returns checkpoint paths."""
        saved: list[Path] = []
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        metrics = open(metrics_path, "a") if metrics_path is not None else None
        try:
            while self.env_steps < max_env_steps:
                try:
                    record = self.iteration()
                except TrainingFault:
                    if ckpt_dir is not None:
                        path = self.save(ckpt_dir / "fault.pt")
                        log.error("training fault; state dumped to %s", path)
                    raise
                log.info("update %d  steps %d  success %s  kl %.4g  lr %.3g", record["update"],
                         record["env_steps"], record["success_rate"], record["kl"], record["lr"])
                if metrics is not None:
                    metrics.write(json.dumps(record) + "\n")
                    metrics.flush()
                if ckpt_dir is not None and self.updates % self.config.checkpoint_every == 0:
                    saved.append(self.save(ckpt_dir / f"ckpt_{self.env_steps:012d}.pt"))
            if ckpt_dir is not None:
                final = self.save(ckpt_dir / "final.pt")
                saved.append(final)
        finally:
            if metrics is not None:
                metrics.close()
        return saved


def train(config: TrainConfig, scenario="training", out_dir=None) -> list[Path]:
    """Train from scratch; writes metrics.ndjson and checkpoints/ under ``out_dir``."""
    trainer = Trainer(config, scenario, out_dir)
    if out_dir is None:
        trainer.run(config.max_env_steps)
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return trainer.run(config.max_env_steps, out / "metrics.ndjson", out / "checkpoints")


def fine_tune(checkpoint, scenario, steps: int, out_dir, seed: Optional[int] = None) -> Path:
    """Continue training ``checkpoint`` on ``scenario`` for ``steps`` more env steps.

    Optimiser state and learning rate resume from the checkpoint.  With
    ``steps == 0`` the checkpoint is copied unchanged.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if steps <= 0:
        load_checkpoint(checkpoint)
        dst = ckpt_dir / "final.pt"
        shutil.copyfile(checkpoint, dst)
        return dst
    ckpt = load_checkpoint(checkpoint)
    cfg_dict = dict(ckpt["config"])
    if seed is not None:
        cfg_dict["seed"] = seed
    config = TrainConfig.from_dict(cfg_dict)
    trainer = Trainer.from_checkpoint(checkpoint, scenario=scenario, out_dir=out, config=config)
    paths = trainer.run(trainer.env_steps + steps, out / "metrics.ndjson", ckpt_dir)
    return paths[-1]
