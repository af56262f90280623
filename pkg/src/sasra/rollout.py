"""Episode execution: traces for training, closed-loop rollouts for evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geomap import Pose
from .gridsim import (Action, Episode, NUM_ACTIONS, START_ACTION, World, WorldCache, oracle_action,
                      render, step)
from .metrics import EpisodeResult, Trajectory, evaluate_episode
from .model import ModelConfig, SasraModel, new_accumulation, observe_map
from .tensor import Rng


@dataclass
class Trace:
    """One executed trajectory with expert labels.

    Observations are not stored: they are re-rendered from ``poses`` on
    demand (rendering is deterministic and cheap).  Semantic maps depend on
    the accumulation history, so they are stored.
    """

    episode: Episode
    poses: list[Pose]           # pose at which each step's observation was taken
    prev_actions: list[int]     # executed action before each step (START at t=0)
    labels: list[int]           # expert action at each step
    maps: np.ndarray | None     # (T, r, r, K+1) uint8, or None when maps are disabled
    executed: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def observe(world: World, pose: Pose, intr, episode_id: str, t: int, noise: float = 0.0):
    """Render one frame; semantic label noise is seeded by (episode, step) so re-renders agree."""
    if noise <= 0:
        return render(world, pose, intr)
    return render(world, pose, intr, noise, Rng(_stable_hash(episode_id)).spawn(t))


def render_trace(world: World, trace: Trace, cfg: ModelConfig, noise: float = 0.0):
    intr = cfg.intrinsics()
    eid = trace.episode.episode_id
    obs = [observe(world, p, intr, eid, t, noise) for t, p in enumerate(trace.poses)]
    rgb = np.stack([o.rgb for o in obs]).astype(T.get_default_dtype())
    depth = np.stack([o.depth for o in obs]).astype(T.get_default_dtype())
    return rgb, depth


def reference_positions(world: World, ep: Episode) -> list[tuple[float, float]]:
    pose = ep.start
    pts = [(pose.x, pose.y)]
    for a in ep.gt_actions:
        if a == Action.STOP:
            break
        pose, _ = step(world, pose, Action(a))
        pts.append((pose.x, pose.y))
    return pts


class OraclePolicy:
    name = "oracle"

    def reset(self, world: World, ep: Episode):
        self.world, self.ep = world, ep

    def act(self, obs, pose: Pose):
        a = oracle_action(self.world, pose, self.ep.goal, self.ep.success_radius)
        p = np.zeros(NUM_ACTIONS)
        p[int(a)] = 1.0
        return int(a), p


class RandomPolicy:
    """Samples actions from a fixed action distribution with a per-episode seed."""

    name = "random"

    def __init__(self, seed: int = 0, probs=None):
        self.seed = seed
        self.probs = np.full(NUM_ACTIONS, 1.0 / NUM_ACTIONS) if probs is None else np.asarray(probs)

    def reset(self, world: World, ep: Episode):
        self.rng = Rng(self.seed).spawn(_stable_hash(ep.episode_id))

    def act(self, obs, pose):
        a = int(self.rng.choice(NUM_ACTIONS, p=self.probs))
        return a, self.probs.copy()


def _stable_hash(s: str) -> int:
    h = 1469598103934665603
    for ch in s.encode():
        h = ((h ^ ch) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return h & 0x7FFFFFFF


class ModelPolicy:
    """Greedy (argmax) closed-loop policy around a SasraModel."""

    def __init__(self, model: SasraModel):
        self.model = model
        self.name = "model"

    def reset(self, world: World, ep: Episode):
        m = self.model
        with T.no_grad():
            self.v, self.mask = m.encode_language(ep.instruction_ids)
        acc = m.new_accumulation(world.extent, ep.episode_id) if m.cfg.use_semantic_map else None
        self.state = m.initial_state(acc, ep.episode_id)

    def act(self, obs, pose):
        with T.no_grad():
            p, self.state = self.model.policy_step(obs, self.v, self.mask, self.state, self.state.episode_id)
        a = int(np.argmax(p.data))
        self.state.prev_action = a
        return a, p.data.copy()


@dataclass
class RolloutRecord:
    poses: list[Pose]
    actions: list[int]
    probs: list[np.ndarray]
    stop_called: bool
    collisions: int = 0


def run_episode(world: World, ep: Episode, policy, cfg: ModelConfig, max_steps: int,
                on_step=None, noise: float = 0.0) -> RolloutRecord:
    """Closed-loop rollout; hitting ``max_steps`` ends the episode with a forced (uncredited) stop."""
    intr = cfg.intrinsics()
    policy.reset(world, ep)
    pose = ep.start
    poses, actions, probs = [pose], [], []
    collisions = 0
    for t in range(max_steps):
        obs = observe(world, pose, intr, ep.episode_id, t, noise)
        a, p = policy.act(obs, pose)
        actions.append(a)
        probs.append(p)
        if on_step is not None:
            on_step(t, obs, a, p, policy)
        if a == Action.STOP:
            return RolloutRecord(poses, actions, probs, True, collisions)
        pose, hit = step(world, pose, Action(a))
        collisions += int(hit)
        poses.append(pose)
    return RolloutRecord(poses, actions, probs, False, collisions)


def evaluate_record(world: World, ep: Episode, rec: RolloutRecord) -> EpisodeResult:
    traj = Trajectory([(p.x, p.y) for p in rec.poses], reference_positions(world, ep), ep.goal,
                      ep.success_radius, rec.stop_called)
    return evaluate_episode(traj, world.geodesic, ep.episode_id)


def collect_trace(world: World, ep: Episode, cfg: ModelConfig, *, policy: SasraModel | None = None,
                  oracle_prob: float = 1.0, rng: Rng | None = None, max_steps: int = 150,
                  noise: float = 0.0) -> Trace:
    """Roll out a mixture of expert and greedy-policy actions; labels are always the expert's.

    At each step the expert action is executed with probability ``oracle_prob``
    and the policy's greedy action otherwise.  With ``oracle_prob == 1`` the
    trace is exactly the teacher-forcing trace of ``ep``.
    """
    intr = cfg.intrinsics()
    use_map = cfg.use_semantic_map
    acc = new_accumulation(cfg, world.extent, ep.episode_id) if use_map else None
    mixing = policy is not None and oracle_prob < 1.0
    if mixing:
        if rng is None:
            raise ValueError("a mixed rollout needs an rng")
        with T.no_grad():
            v, mask = policy.encode_language(ep.instruction_ids)
        state = policy.initial_state(acc, ep.episode_id)
    pose = ep.start
    poses, prev, labels, maps, executed = [], [], [], [], []
    prev_a = int(START_ACTION)
    for t in range(max_steps):
        obs = observe(world, pose, intr, ep.episode_id, t, noise)
        y = int(oracle_action(world, pose, ep.goal, ep.success_radius))
        m = observe_map(cfg, obs, acc) if use_map else None
        a = y
        if mixing:
            with T.no_grad():
                p, state = policy.policy_step(obs, v, mask, state, ep.episode_id, map_override=m)
            if rng.random() >= oracle_prob:
                a = int(np.argmax(p.data))
            state.prev_action = a
        poses.append(pose)
        prev.append(prev_a)
        labels.append(y)
        executed.append(a)
        if use_map:
            maps.append(m)
        if a == Action.STOP:
            break
        pose, _ = step(world, pose, Action(a))
        prev_a = a
    else:
        # truncated: the final label becomes a forced Stop
        labels[-1] = int(Action.STOP)
    map_arr = np.stack(maps).astype(np.uint8) if use_map else None
    return Trace(ep, poses, prev, labels, map_arr, executed)


def _eval_chunk(args):
    policy, episodes, world_params, cfg, max_steps, noise = args
    worlds = WorldCache(world_params)
    out = []
    for ep in episodes:
        w = worlds(ep.world_seed)
        out.append(evaluate_record(w, ep, run_episode(w, ep, policy, cfg, max_steps, noise=noise)))
    return out


def evaluate_policy(policy, episodes: list[Episode], worlds: WorldCache, cfg: ModelConfig,
                    max_steps: int, noise: float = 0.0, jobs: int = 1) -> list[EpisodeResult]:
    """Closed-loop evaluation; ``jobs > 1`` splits episodes over worker processes (order preserved)."""
    if jobs <= 1 or len(episodes) < 2:
        return _eval_chunk((policy, episodes, worlds.params, cfg, max_steps, noise))
    import multiprocessing as mp

    chunks = [episodes[i::jobs] for i in range(jobs)]
    with mp.get_context("fork").Pool(jobs) as pool:
        parts = pool.map(_eval_chunk, [(policy, c, worlds.params, cfg, max_steps, noise) for c in chunks])
    by_id = {r.episode_id: r for part in parts for r in part}
    return [by_id[ep.episode_id] for ep in episodes]
