"""Command line: gen-data, train, eval, ablate, replay.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geomap import SemanticMapGrid, dump_map_pgm, write_pgm
from .gridsim import NUM_ACTIONS, Episode, WorldCache, WorldParams, build_dataset, load_split, save_split
from .metrics import METRIC_ORDER, aggregate, format_table, write_results
from .model import ConfigError, ModelConfig, SasraModel, new_accumulation, observe_map
from .rollout import ModelPolicy, OraclePolicy, RandomPolicy, evaluate_policy, evaluate_record, run_episode
from .trainer import (CheckpointError, TrainConfig, Trainer, _config_report, load_into, load_model,
                      read_checkpoint, save_checkpoint)

log = logging.getLogger("sasra")

CONFIG_SCHEMA_VERSION = 1
SPLITS = ("train", "val_seen", "val_unseen")


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = "data"
    out: str = "runs/default"
    seed: int = 0
    precision: str = "f64"

    def to_dict(self) -> dict:
        return {"schema_version": CONFIG_SCHEMA_VERSION, "model": self.model.to_dict(),
                "train": self.train.to_dict(), "data": self.data, "out": self.out,
                "seed": self.seed, "precision": self.precision}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        ver = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if ver != CONFIG_SCHEMA_VERSION:
            raise UsageError(f"config schema_version {ver} unsupported (expected {CONFIG_SCHEMA_VERSION})")
        known = {"model", "train", "data", "out", "seed", "precision"}
        bad = sorted(set(d) - known)
        bad += [f"model.{k}" for k in sorted(set(d.get("model", {})) - _fields(ModelConfig))]
        bad += [f"train.{k}" for k in sorted(set(d.get("train", {})) - _fields(TrainConfig))]
        if bad:
            raise UsageError(f"unknown config keys: {', '.join(bad)}")
        try:
            model = ModelConfig(**d.get("model", {}))
            train = TrainConfig(**d.get("train", {}))
        except (ValueError, TypeError) as e:
            raise UsageError(f"invalid config: {e}") from e
        rc = cls(model, train, d.get("data", "data"), d.get("out", "runs/default"),
                 int(d.get("seed", 0)), d.get("precision", "f64"))
        if rc.precision not in ("f32", "f64"):
            raise UsageError(f"precision must be f32 or f64, got {rc.precision!r}")
        return rc


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            return RunConfig.from_dict(json.load(f))
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e


def write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")


def apply_globals(args, rc: RunConfig | None = None) -> RunConfig | None:
    """Fold global flags into a run config and set numeric precision."""
    if rc is not None:
        if args.seed is not None:
            rc.seed = args.seed
            rc.train = dataclasses.replace(rc.train, seed=args.seed)
        if args.precision is not None:
            rc.precision = args.precision
        if args.map_accumulate is not None:
            rc.model = dataclasses.replace(rc.model, map_accumulate=args.map_accumulate == "on")
        if args.semantic_noise is not None:
            rc.train = dataclasses.replace(rc.train, semantic_noise=args.semantic_noise)
        precision = rc.precision
    else:
        precision = args.precision or "f64"
    T.set_default_dtype(np.float32 if precision == "f32" else np.float64)
    return rc


def _split_path(data: str, split: str) -> str:
    if split in SPLITS:
        return os.path.join(data, f"{split}.json")
    return split


def _load(data: str, split: str):
    path = _split_path(data, split)
    if not os.path.exists(path):
        raise UsageError(f"dataset split not found: {path}")
    return load_split(path)


def _map_fn(jobs: int):
    if jobs <= 1:
        return map, None
    import multiprocessing as mp

    pool = mp.get_context("fork").Pool(jobs)
    return pool.imap, pool


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.worlds < 2:
        raise UsageError("--worlds must be at least 2 (seen and unseen pools are disjoint)")
    if args.episodes_per_world < 1 or args.val_seen_per_world < 0:
        raise UsageError("episode counts must be positive")
    if not 0.0 < args.unseen_fraction < 1.0:
        raise UsageError("--unseen-fraction must lie in (0, 1)")
    if args.success_radius <= 0 or not 1 <= args.min_len <= args.max_len:
        raise UsageError("need --success-radius > 0 and 1 <= --min-len <= --max-len")
    _ensure_dir(args.out)
    seed = args.seed if args.seed is not None else 0
    wp = WorldParams(size=args.world_size, num_rooms=args.rooms)
    fn, pool = _map_fn(args.jobs)
    try:
        ds = build_dataset(seed, args.worlds, args.episodes_per_world, wp, args.unseen_fraction,
                           args.val_seen_per_world, args.success_radius, args.min_len, args.max_len,
                           map_fn=fn)
    finally:
        if pool is not None:
            pool.close()
    for name in SPLITS:
        save_split(os.path.join(args.out, f"{name}.json"), getattr(ds, name), ds.vocab, wp)
    print(f"train {len(ds.train)}  val_seen {len(ds.val_seen)}  val_unseen {len(ds.val_unseen)}  "
          f"vocab {len(ds.vocab)}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _fit_vocab(rc: RunConfig, vocab_size: int) -> None:
    if rc.model.vocab_size < vocab_size:
        rc.model = dataclasses.replace(rc.model, vocab_size=vocab_size)


def train_run(rc: RunConfig, regime: str, resume: bool = False, init: str | None = None,
              jobs: int = 1) -> Trainer:
    """Train one configuration into ``rc.out``; the retained (best on val_seen) model ends in final.ckpt."""
    train, vocab, wp = _load(rc.data, "train")
    val_seen, _, _ = _load(rc.data, "val_seen")
    _fit_vocab(rc, len(vocab))
    _ensure_dir(rc.out)
    rc.train = dataclasses.replace(rc.train, regime=regime)
    write_json(os.path.join(rc.out, "run_config.json"), rc.to_dict())
    worlds = WorldCache(wp)
    model = SasraModel(rc.model, seed=rc.seed)
    paths = {k: os.path.join(rc.out, f"{k}.ckpt") for k in ("last", "best", "final")}
    log_path = os.path.join(rc.out, "train_log.jsonl")
    tr = Trainer(model, rc.train, train, val_seen, worlds, log_path, paths["best"], paths["last"])
    tr.jobs = jobs
    if resume and os.path.exists(paths["last"]):
        tr.resume(paths["last"])
        log.info("resumed from %s at epoch %d", paths["last"], tr.epoch)
    else:
        open(log_path, "w").close()
        if init is not None:
            ck = read_checkpoint(init)
            load_into(ck, model)
            tr.tf_done = True
    if regime == "teacher_forcing" or not tr.tf_done:
        tr.fit_teacher_forcing()
    if regime == "dagger":
        tr.fit_dagger()
    save_checkpoint(paths["final"], model, None, None, tr.epoch)
    return tr


def cmd_train(args) -> int:
    rc = apply_globals(args, load_run_config(args.config))
    if args.data:
        rc.data = args.data
    if args.out:
        rc.out = args.out
    if args.epochs is not None:
        rc.train = dataclasses.replace(rc.train, epochs=args.epochs)
    regime = {"tf": "teacher_forcing", "dagger": "dagger"}[args.regime]
    tr = train_run(rc, regime, args.resume, args.init, args.jobs)
    print(f"trained {tr.epoch} epochs; best val_seen (sr, spl, ndtw) = {tr.best_score}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def action_distribution(episodes: list[Episode]) -> np.ndarray:
    counts = np.bincount([a for e in episodes for a in e.gt_actions], minlength=NUM_ACTIONS)
    return counts / counts.sum()


def make_policy(name: str, data: str, seed: int, expect: ModelConfig | None = None):
    """``oracle``, ``random`` or a checkpoint path -> (policy, model config used for rendering)."""
    if name == "oracle":
        return OraclePolicy(), expect or ModelConfig()
    if name == "random":
        train_path = os.path.join(data, "train.json")
        probs = action_distribution(load_split(train_path)[0]) if os.path.exists(train_path) else None
        return RandomPolicy(seed, probs), expect or ModelConfig()
    if not os.path.exists(name):
        raise UsageError(f"checkpoint not found: {name}")
    model = load_model(name)
    if expect is not None and expect != model.cfg:
        raise CheckpointError("checkpoint does not match the given config:\n"
                              + _config_report(expect.to_dict(), model.cfg.to_dict()))
    return ModelPolicy(model), model.cfg


def evaluate_to_dir(policy, cfg: ModelConfig, split: str, data: str, out: str, max_steps: int,
                    noise: float = 0.0, jobs: int = 1, label: str = "") -> dict:
    episodes, _, wp = _load(data, split)
    _ensure_dir(out)
    results = evaluate_policy(policy, episodes, WorldCache(wp), cfg, max_steps, noise, jobs)
    summary = aggregate(results)
    summary["split"] = split
    write_results(os.path.join(out, "results.jsonl"), results)
    write_json(os.path.join(out, "summary.json"), summary)
    table = format_table({label or split: summary})
    with open(os.path.join(out, "table.txt"), "w") as f:
        f.write(table + "\n")
    return summary


def cmd_eval(args) -> int:
    rc = apply_globals(args, load_run_config(args.config)) if args.config else apply_globals(args)
    expect = rc.model if rc is not None else None
    seed = args.seed if args.seed is not None else 0
    policy, cfg = make_policy(args.checkpoint, args.data, seed, expect)
    noise = args.semantic_noise or 0.0
    summary = evaluate_to_dir(policy, cfg, args.split, args.data, args.out, args.max_steps, noise,
                              args.jobs, label=os.path.basename(str(args.checkpoint)))
    print(format_table({args.split: summary}))
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATIONS = (
    ("SM", dict(use_semantic_map=True, use_hybrid_decoder=False), "teacher_forcing"),
    ("HAD", dict(use_semantic_map=False, use_hybrid_decoder=True), "teacher_forcing"),
    ("SM+HAD", dict(use_semantic_map=True, use_hybrid_decoder=True), "teacher_forcing"),
    ("SM+HAD+DA", dict(use_semantic_map=True, use_hybrid_decoder=True), "dagger"),
)


def run_ablation(rc: RunConfig, seeds: list[int], out: str, jobs: int = 1,
                 splits=("val_seen", "val_unseen")) -> list[dict]:
    """Train and evaluate the four component configurations per seed.

    SM+HAD+DA continues from the SM+HAD teacher-forcing model of the same
    seed.  Finished runs (summary present) are reused, so an interrupted sweep
    can be restarted.
    """
    rows = []
    for seed in seeds:
        for name, overrides, regime in ABLATIONS:
            run_dir = os.path.join(out, name.replace("+", "_"), f"seed_{seed}")
            done = all(os.path.exists(os.path.join(run_dir, s, "summary.json")) for s in splits)
            if not done:
                sub = RunConfig(dataclasses.replace(rc.model, **overrides),
                                dataclasses.replace(rc.train, seed=seed), rc.data, run_dir, seed,
                                rc.precision)
                init = None
                if regime == "dagger":
                    init = os.path.join(out, "SM_HAD", f"seed_{seed}", "final.ckpt")
                train_run(sub, regime, resume=True, init=init, jobs=jobs)
                policy, cfg = make_policy(os.path.join(run_dir, "final.ckpt"), rc.data, seed)
                for s in splits:
                    evaluate_to_dir(policy, cfg, s, rc.data, os.path.join(run_dir, s),
                                    rc.train.max_steps, rc.train.semantic_noise, jobs, name)
            for s in splits:
                with open(os.path.join(run_dir, s, "summary.json")) as f:
                    summ = json.load(f)
                rows.append({"config": name, "seed": seed, "split": s,
                             **{k: summ[k] for k in METRIC_ORDER}})
    return rows


def ablation_table(rows: list[dict]) -> str:
    parts = []
    for split in sorted({r["split"] for r in rows}, key=SPLITS.index):
        means = {}
        for name, _, _ in ABLATIONS:
            sel = [r for r in rows if r["config"] == name and r["split"] == split]
            if sel:
                means[name] = {k: float(np.mean([r[k] for r in sel])) for k in METRIC_ORDER}
        n_seeds = len({r["seed"] for r in rows if r["split"] == split})
        parts.append(format_table(means, title=f"{split} (mean over {n_seeds} seeds)"))
    return "\n\n".join(parts)


def cmd_ablate(args) -> int:
    rc = apply_globals(args, load_run_config(args.config))
    if args.data:
        rc.data = args.data
    out = args.out or rc.out
    _ensure_dir(out)
    write_json(os.path.join(out, "run_config.json"), {**rc.to_dict(), "seeds": args.seeds})
    rows = run_ablation(rc, args.seeds, out, args.jobs)
    with open(os.path.join(out, "ablation.jsonl"), "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    table = ablation_table(rows)
    with open(os.path.join(out, "table.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def _to_u8(img: np.ndarray, hi: float | None = None) -> np.ndarray:
    hi = float(img.max()) if hi is None else hi
    if hi <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip(np.round(img / hi * 255.0), 0, 255).astype(np.uint8)


def cmd_replay(args) -> int:
    apply_globals(args)
    episodes, _, wp = _load(args.data, args.split)
    by_id = {e.episode_id: e for e in episodes}
    if args.episode not in by_id:
        raise UsageError(f"unknown episode {args.episode!r} in split {args.split}")
    ep = by_id[args.episode]
    seed = args.seed if args.seed is not None else 0
    policy, cfg = make_policy(args.checkpoint, args.data, seed)
    _ensure_dir(args.out)
    world = WorldCache(wp)(ep.world_seed)
    steps = []
    acc = new_accumulation(cfg, world.extent, ep.episode_id)

    def on_step(t, obs, a, p, pol):
        write_pgm(os.path.join(args.out, f"rgb_{t:04d}.pgm"), _to_u8(obs.rgb.mean(axis=-1), 1.0))
        write_pgm(os.path.join(args.out, f"depth_{t:04d}.pgm"), _to_u8(obs.depth, cfg.max_depth))
        write_pgm(os.path.join(args.out, f"semantic_{t:04d}.pgm"), _to_u8(obs.semantic.astype(float), cfg.K))
        m = observe_map(cfg, obs, acc)
        dump_map_pgm(SemanticMapGrid(m, cfg.map_cell_size * 2), args.out, ep.episode_id, t)
        steps.append({"t": t, "pose": obs.pose.as_list(), "action": int(a),
                      "p": [float(x) for x in p]})

    rec = run_episode(world, ep, policy, cfg, args.max_steps, on_step=on_step,
                      noise=args.semantic_noise or 0.0)
    res = evaluate_record(world, ep, rec)
    write_json(os.path.join(args.out, "steps.json"),
               {"episode_id": ep.episode_id, "steps": steps, "final_pose": rec.poses[-1].as_list(),
                "stop_called": rec.stop_called, "result": res.to_json()})
    print(f"{len(steps)} steps written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _globals(suppress: bool) -> argparse.ArgumentParser:
    """Global flags; accepted before or after the subcommand."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=d(None))
    g.add_argument("--jobs", type=int, default=d(1))
    g.add_argument("--precision", choices=("f32", "f64"), default=d(None))
    g.add_argument("--map-accumulate", choices=("on", "off"), default=d(None))
    g.add_argument("--semantic-noise", type=float, default=d(None))
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sasra", parents=[_globals(False)])
    g = _globals(True)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("gen-data", parents=[g], help="generate train/val_seen/val_unseen splits")
    s.add_argument("--worlds", type=int, default=25)
    s.add_argument("--episodes-per-world", type=int, default=10)
    s.add_argument("--val-seen-per-world", type=int, default=1)
    s.add_argument("--unseen-fraction", type=float, default=0.2)
    s.add_argument("--world-size", type=int, default=24)
    s.add_argument("--rooms", type=int, default=3)
    s.add_argument("--success-radius", type=float, default=0.75, help="metres")
    s.add_argument("--min-len", type=int, default=30, help="shortest expert path, in actions")
    s.add_argument("--max-len", type=int, default=80, help="longest expert path, in actions")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", parents=[g], help="teacher forcing or DAGGER training")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--regime", choices=("tf", "dagger"), default="tf")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--init", help="teacher-forcing checkpoint to start DAGGER from")
    s.add_argument("--epochs", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[g], help="greedy rollouts over a split")
    s.add_argument("--checkpoint", required=True, help="checkpoint path, 'oracle' or 'random'")
    s.add_argument("--data", default="data")
    s.add_argument("--split", default="val_unseen")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--max-steps", type=int, default=150)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", parents=[g], help="component ablation over seeds")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("replay", parents=[g], help="dump per-step frames and actions of one episode")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", default="data")
    s.add_argument("--split", default="val_unseen")
    s.add_argument("--episode", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-steps", type=int, default=150)
    s.set_defaults(fn=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
