"""Imitation learning: weighted cross-entropy, Adam with a cyclic learning rate,
teacher forcing, DAGGER and a binary checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gridsim import Action, Episode, START_ACTION, WorldCache, step
from .metrics import EpisodeResult, aggregate
from .model import ModelConfig, SasraModel, new_accumulation, observe_map
from .rollout import ModelPolicy, Trace, collect_trace, evaluate_policy, observe, render_trace
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

EPS = 1e-12
REGIMES = ("teacher_forcing", "dagger")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    regime: str = "teacher_forcing"
    epochs: int = 20
    dagger_rounds: int = 3
    dagger_epochs: int = 4
    beta: float = 0.75
    lr_low: float = 2e-6
    lr_high: float = 1e-4
    lr_step_size: int = 0          # half cycle in optimizer steps; 0 = two epochs of steps
    inflection_coeff: float = 3.2
    batch_size: int = 4
    max_steps: int = 150
    seed: int = 0
    patience: int = 0              # epochs without val_seen improvement before stopping; 0 = off
    eval_max_episodes: int = 0     # cap on val_seen episodes per evaluation; 0 = all
    semantic_noise: float = 0.0    # probability of a random semantic label per pixel

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0.0 < self.lr_low <= self.lr_high:
            raise ValueError(f"need 0 < lr_low <= lr_high, got [{self.lr_low}, {self.lr_high}]")
        if self.batch_size < 1 or self.epochs < 0 or self.dagger_rounds < 0 or self.max_steps < 1:
            raise ValueError("batch_size, max_steps must be positive and epoch/round counts non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def inflection_weights(labels, coeff: float, start: int = int(START_ACTION)) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    prev = np.concatenate([[start], y[:-1]])
    return np.where(y != prev, coeff, 1.0)


def imitation_loss_terms(p: Tensor, labels, coeff: float) -> tuple[Tensor, float]:
    """(sum_t w_t * -log p_t[y_t], sum_t w_t)."""
    y = np.asarray(labels, dtype=np.int64)
    w = inflection_weights(y, coeff)
    picked = p[np.arange(len(y)), y]
    nll = -T.log(T.clamp_min(picked, EPS))
    return (nll * Tensor(w.astype(p.data.dtype))).sum(), float(w.sum())


def imitation_loss(p: Tensor, labels, coeff: float = 3.2) -> Tensor:
    """Inflection-weighted mean cross-entropy of a trace's action distributions."""
    s, w = imitation_loss_terms(p, labels, coeff)
    return s / w


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def cyclic_lr(step_idx: int, low: float, high: float, step_size: int) -> float:
    """Triangular schedule: ``low`` at 0, ``high`` at ``step_size``, ``low`` again at 2*step_size."""
    cycle = math.floor(1 + step_idx / (2 * step_size))
    x = abs(step_idx / step_size - 2 * cycle + 1)
    return low + (high - low) * max(0.0, 1.0 - x)


class Adam:
    def __init__(self, named_params, lr_low: float, lr_high: float, step_size: int,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr_low, self.lr_high, self.step_size = lr_low, lr_high, max(1, int(step_size))
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0          # applied updates (bias correction)
        self.calls = 0      # step() calls, drives the schedule
        self.offset = 0     # call index at which the current schedule started
        self.skipped = 0

    def lr(self, step_idx: int | None = None) -> float:
        s = self.calls if step_idx is None else step_idx
        return cyclic_lr(s - self.offset, self.lr_low, self.lr_high, self.step_size)

    def restart_schedule(self, step_size: float) -> None:
        """Begin a fresh cycle at ``lr_low`` from the next step."""
        self.offset, self.step_size = self.calls, step_size

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False (and counts a skip) when any gradient is non-finite."""
        lr = self.lr()
        self.calls += 1
        for n, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                self.skipped += 1
                log.warning("non-finite gradient in %s; skipping update (%d skipped)", n, self.skipped)
                return False
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            v = self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return True


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SASRA\0"
CHECKPOINT_VERSION = 1


def _config_report(expected: dict, found: dict) -> str:
    keys = sorted(set(expected) | set(found))
    rows = [f"  {k}: expected {expected.get(k, '<missing>')!r}, found {found.get(k, '<missing>')!r}"
            for k in keys if expected.get(k, "<missing>") != found.get(k, "<missing>")]
    return "\n".join(rows)


def save_checkpoint(path: str, model: SasraModel, opt: Adam | None = None, rng: Rng | None = None,
                    epoch: int = 0, state: dict | None = None) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header, little-endian f64 payloads."""
    blobs, directory, offset = [], [], 0

    def add(name, arr):
        nonlocal offset
        b = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)

    for n, p in model.named_parameters():
        add("param/" + n, p.data)
    opt_state = None
    if opt is not None:
        for n, _ in opt.params:
            add("adam_m/" + n, opt.m[n])
            add("adam_v/" + n, opt.v[n])
        opt_state = {"t": opt.t, "calls": opt.calls, "offset": opt.offset, "skipped": opt.skipped,
                     "lr_low": opt.lr_low, "lr_high": opt.lr_high, "step_size": opt.step_size}
    header = {"model_config": model.cfg.to_dict(), "epoch": int(epoch), "optimizer": opt_state,
              "rng": rng.get_state() if rng is not None else None, "state": state or {},
              "tensors": directory}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hb)) + hb)
        for b in blobs:
            f.write(b)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    epoch: int
    tensors: dict[str, np.ndarray]
    optimizer: dict | None
    rng_state: dict | None
    state: dict = field(default_factory=dict)


def read_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, not a checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated before header")
    version, hlen = struct.unpack("<II", raw[pos:pos + 8])
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header ({len(raw) - pos} of {hlen} bytes)")
    try:
        header = json.loads(raw[pos:pos + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    pos += hlen
    payload = raw[pos:]
    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']} "
                                  f"(needs byte {end}, file has {len(payload)})")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype="<f8")
        if arr.size != int(np.prod(entry["shape"])):
            raise CheckpointError(f"{path}: {entry['name']} holds {arr.size} values, shape {entry['shape']}")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
    except ValueError as e:
        raise CheckpointError(f"{path}: invalid model config ({e})") from e
    return Checkpoint(cfg, header["epoch"], tensors, header["optimizer"], header["rng"], header["state"])


def load_into(ck: Checkpoint, model: SasraModel, opt: Adam | None = None, rng: Rng | None = None) -> None:
    """Restore parameters (and optionally optimizer and rng) from a checkpoint, refusing any mismatch."""
    if ck.model_config != model.cfg:
        raise CheckpointError("checkpoint model config does not match:\n"
                              + _config_report(model.cfg.to_dict(), ck.model_config.to_dict()))
    problems = []
    params = dict(model.named_parameters())
    for n, p in params.items():
        arr = ck.tensors.get("param/" + n)
        if arr is None:
            problems.append(f"  param/{n}: missing")
        elif arr.shape != p.data.shape:
            problems.append(f"  param/{n}: expected shape {p.data.shape}, found {arr.shape}")
    extra = sorted(k[6:] for k in ck.tensors if k.startswith("param/") and k[6:] not in params)
    problems += [f"  param/{n}: unexpected" for n in extra]
    if problems:
        raise CheckpointError("checkpoint tensors do not match the model:\n" + "\n".join(problems))
    for n, p in params.items():
        p.data = ck.tensors["param/" + n].astype(p.data.dtype)
    if opt is not None:
        if ck.optimizer is None:
            raise CheckpointError("checkpoint has no optimizer state")
        for n, p in opt.params:
            opt.m[n] = ck.tensors["adam_m/" + n].astype(p.data.dtype)
            opt.v[n] = ck.tensors["adam_v/" + n].astype(p.data.dtype)
        o = ck.optimizer
        opt.t, opt.calls, opt.skipped = o["t"], o["calls"], o["skipped"]
        opt.offset = o.get("offset", 0)
        opt.lr_low, opt.lr_high, opt.step_size = o["lr_low"], o["lr_high"], o["step_size"]
    if rng is not None and ck.rng_state is not None:
        rng.set_state(ck.rng_state)


def load_model(path: str) -> SasraModel:
    ck = read_checkpoint(path)
    model = SasraModel(ck.model_config, seed=0)
    load_into(ck, model)
    return model


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def replay_trace(world, ep: Episode, executed: list[int], cfg: ModelConfig, noise: float = 0.0) -> Trace:
    """Rebuild a trace from its executed actions (labels re-queried from the expert)."""
    from .gridsim import oracle_action

    intr = cfg.intrinsics()
    acc = new_accumulation(cfg, world.extent, ep.episode_id) if cfg.use_semantic_map else None
    pose, prev_a = ep.start, int(START_ACTION)
    poses, prev, labels, maps = [], [], [], []
    for t, a in enumerate(executed):
        obs = observe(world, pose, intr, ep.episode_id, t, noise)
        if acc is not None:
            maps.append(observe_map(cfg, obs, acc))
        poses.append(pose)
        prev.append(prev_a)
        labels.append(int(oracle_action(world, pose, ep.goal, ep.success_radius)))
        if a == Action.STOP:
            break
        pose, _ = step(world, pose, Action(a))
        prev_a = int(a)
    if executed[-1] != Action.STOP:
        labels[-1] = int(Action.STOP)
    return Trace(ep, poses, prev, labels, np.stack(maps).astype(np.uint8) if maps else None,
                 list(executed))


def trace_loss(model: SasraModel, world, trace: Trace, coeff: float, noise: float = 0.0):
    rgb, depth = render_trace(world, trace, model.cfg, noise)
    p = model.forward_episode(rgb, depth, trace.maps, trace.prev_actions, trace.episode.instruction_ids)
    s, w = imitation_loss_terms(p, trace.labels, coeff)
    correct = int((np.argmax(p.data, axis=1) == np.asarray(trace.labels)).sum())
    return s, w, correct


def teacher_forcing_epoch(model: SasraModel, traces: list[Trace], worlds: WorldCache, opt: Adam,
                          rng: Rng, batch_size: int = 4, coeff: float = 3.2, epoch: int = 0,
                          noise: float = 0.0) -> dict:
    """One pass over ``traces`` in a seeded shuffled order, one optimizer step per batch.

    The batch loss is the inflection-weighted sum of step losses divided by the
    batch's total weight; episodes are back-propagated one at a time to bound
    memory.
    """
    if not traces:
        raise ValueError("empty training set")
    order = rng.permutation(len(traces))
    tot_loss = tot_w = 0.0
    correct = steps = 0
    for b in range(0, len(order), batch_size):
        batch = [traces[i] for i in order[b:b + batch_size]]
        wsum = sum(float(np.sum(inflection_weights(t.labels, coeff))) for t in batch)
        opt.zero_grad()
        for tr in batch:
            s, w, c = trace_loss(model, worlds(tr.episode.world_seed), tr, coeff, noise)
            if not np.isfinite(s.item()):
                raise TrainingDiverged(
                    f"non-finite loss {s.item()} at epoch {epoch}, episode {tr.episode.episode_id}, "
                    f"lr {opt.lr():.3g}, optimizer step {opt.calls}")
            (s / wsum).backward()
            tot_loss += s.item()
            tot_w += w
            correct += c
            steps += len(tr)
        opt.step()
    return {"loss": tot_loss / tot_w, "accuracy": correct / steps, "steps": steps}


def oracle_fraction(beta: float, round_idx: int) -> float:
    return beta ** round_idx


def _score(summary: dict) -> tuple:
    return (summary["sr"], summary["spl"], summary["ndtw"])


class Trainer:
    """Holds model, optimizer, rng and the (aggregated) trace set for one run."""

    def __init__(self, model: SasraModel, tcfg: TrainConfig, train: list[Episode],
                 val_seen: list[Episode], worlds: WorldCache, log_path: str | None = None,
                 best_path: str | None = None, last_path: str | None = None):
        self.model, self.tcfg = model, tcfg
        self.train_eps, self.val_seen, self.worlds = train, val_seen, worlds
        self.rng = Rng(tcfg.seed)
        steps_per_epoch = max(1, math.ceil(len(train) / tcfg.batch_size))
        self.opt = Adam(model.named_parameters(), tcfg.lr_low, tcfg.lr_high,
                        tcfg.lr_step_size or 2 * steps_per_epoch)
        self.epoch = 0
        self.dagger_round = 0      # DAGGER rounds whose rollouts are in the aggregate
        self.round_epoch = 0       # supervised epochs finished within the current round
        self.aggregate: list[Trace] = []
        self.best_score: tuple | None = None
        self.best_params: dict | None = None
        self.stale = 0
        self.log_path, self.best_path, self.last_path = log_path, best_path, last_path
        self.jobs = 1
        self.tf_done = False

    # -- data -----------------------------------------------------------------
    def teacher_traces(self) -> list[Trace]:
        cfg = self.model.cfg
        return [collect_trace(self.worlds(e.world_seed), e, cfg, max_steps=self.tcfg.max_steps,
                              noise=self.tcfg.semantic_noise)
                for e in self.train_eps]

    def dagger_traces(self, round_idx: int) -> list[Trace]:
        beta_n = oracle_fraction(self.tcfg.beta, round_idx)
        cfg = self.model.cfg
        return [collect_trace(self.worlds(e.world_seed), e, cfg, policy=self.model, oracle_prob=beta_n,
                              rng=self.rng, max_steps=self.tcfg.max_steps,
                              noise=self.tcfg.semantic_noise) for e in self.train_eps]

    # -- bookkeeping ----------------------------------------------------------------
    def _log(self, rec: dict) -> None:
        if self.log_path:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    def _state(self) -> dict:
        return {"tf_done": self.tf_done, "dagger_round": self.dagger_round, "round_epoch": self.round_epoch, "stale": self.stale,
                "best_score": list(self.best_score) if self.best_score else None,
                "aggregate": [{"episode_id": t.episode.episode_id, "executed": t.executed}
                              for t in self.aggregate]}

    def save(self, path: str) -> None:
        save_checkpoint(path, self.model, self.opt, self.rng, self.epoch, self._state())

    def resume(self, path: str) -> None:
        ck = read_checkpoint(path)
        load_into(ck, self.model, self.opt, self.rng)
        self.epoch = ck.epoch
        st = ck.state
        self.dagger_round = st.get("dagger_round", 0)
        self.tf_done = st.get("tf_done", False)
        self.round_epoch = st.get("round_epoch", 0)
        self.stale = st.get("stale", 0)
        self.best_score = tuple(st["best_score"]) if st.get("best_score") else None
        self.best_params = None
        if self.best_score is not None and self.best_path:
            best = read_checkpoint(self.best_path)
            self.best_params = {k[6:]: v for k, v in best.tensors.items() if k.startswith("param/")}
        by_id = {e.episode_id: e for e in self.train_eps}
        cfg = self.model.cfg
        self.aggregate = [replay_trace(self.worlds(by_id[a["episode_id"]].world_seed), by_id[a["episode_id"]],
                                       a["executed"], cfg,
                                       self.tcfg.semantic_noise) for a in st.get("aggregate", [])]

    def evaluate(self, episodes: list[Episode]) -> dict:
        if self.tcfg.eval_max_episodes:
            episodes = episodes[:self.tcfg.eval_max_episodes]
        res = evaluate_policy(ModelPolicy(self.model), episodes, self.worlds, self.model.cfg,
                              self.tcfg.max_steps, self.tcfg.semantic_noise, self.jobs)
        return aggregate(res)

    def _end_epoch(self, stats: dict, phase: str) -> bool:
        """Validate, log, track the best model; returns True when early stopping triggers."""
        self.epoch += 1
        summ = self.evaluate(self.val_seen) if self.val_seen else None
        rec = {"epoch": self.epoch, "split": "val_seen", "phase": phase, "loss": stats["loss"],
               "accuracy": stats["accuracy"], "lr": self.opt.lr(), "skipped": self.opt.skipped,
               "sr": summ["sr"] if summ else None, "spl": summ["spl"] if summ else None,
               "ndtw": summ["ndtw"] if summ else None}
        self._log(rec)
        log.info("epoch %d %s loss %.4f acc %.3f sr %s", self.epoch, phase, stats["loss"],
                 stats["accuracy"], rec["sr"])
        if summ is not None:
            score = _score(summ)
            if self.best_score is None or score > self.best_score:
                self.best_score = score
                self.best_params = {n: p.data.copy() for n, p in self.model.named_parameters()}
                self.stale = 0
                if self.best_path:
                    save_checkpoint(self.best_path, self.model, None, None, self.epoch)
            else:
                self.stale += 1
        if self.last_path:
            self.save(self.last_path)
        return bool(self.tcfg.patience) and self.stale >= self.tcfg.patience

    def restore_best(self) -> None:
        if self.best_params is not None:
            for n, p in self.model.named_parameters():
                p.data = self.best_params[n].copy()

    def fit_teacher_forcing(self, epochs: int | None = None) -> None:
        epochs = self.tcfg.epochs if epochs is None else epochs
        if not self.aggregate:
            self.aggregate = self.teacher_traces()
        while not self.tf_done and self.epoch < epochs:
            stats = teacher_forcing_epoch(self.model, self.aggregate, self.worlds, self.opt, self.rng,
                                          self.tcfg.batch_size, self.tcfg.inflection_coeff, self.epoch,
                                          self.tcfg.semantic_noise)
            if self._end_epoch(stats, "teacher_forcing"):
                break
        if not self.tf_done:
            self.tf_done = True
            self.restore_best()
            if self.last_path:
                self.save(self.last_path)

    def fit_dagger(self) -> None:
        """Rounds 1..N: mixed rollouts appended to the aggregate, then supervised epochs on it.

        The aggregate starts from the teacher-forcing traces, i.e. the round-0
        (pure expert) data.
        """
        tc = self.tcfg
        if not self.aggregate:
            self.aggregate = self.teacher_traces()
        if self.best_score is None and self.val_seen:
            # the pretrained model is the baseline to beat
            self.best_score = _score(self.evaluate(self.val_seen))
            self.best_params = {n: p.data.copy() for n, p in self.model.named_parameters()}
            if self.best_path:
                save_checkpoint(self.best_path, self.model, None, None, self.epoch)
        while True:
            if self.dagger_round == 0 or self.round_epoch >= tc.dagger_epochs:
                if self.dagger_round >= tc.dagger_rounds:
                    break
                before = len(self.aggregate)
                self.aggregate = self.aggregate + self.dagger_traces(self.dagger_round + 1)
                assert len(self.aggregate) > before
                self.dagger_round += 1
                self.round_epoch = 0
                if not tc.lr_step_size:
                    # one full cycle per round, so every round ends annealed
                    # however large the aggregate has grown
                    steps = math.ceil(len(self.aggregate) / tc.batch_size)
                    self.opt.restart_schedule(tc.dagger_epochs * steps / 2)
            stats = teacher_forcing_epoch(self.model, self.aggregate, self.worlds, self.opt, self.rng,
                                          tc.batch_size, tc.inflection_coeff, self.epoch, tc.semantic_noise)
            self.round_epoch += 1
            self._end_epoch(stats, f"dagger_{self.dagger_round}")
        self.restore_best()
