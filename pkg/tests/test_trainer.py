import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sasra import tensor as T
from sasra.gridsim import Action, sample_episode
from sasra.model import SasraModel
from sasra.rollout import collect_trace
from sasra.tensor import Rng, Tensor
from sasra.trainer import (MAGIC, Adam, CheckpointError, TrainConfig, Trainer, cyclic_lr,
                           imitation_loss, inflection_weights, load_into, oracle_fraction,
                           read_checkpoint, replay_trace, save_checkpoint, teacher_forcing_epoch)


@pytest.fixture(scope="module")
def episodes(world, vocab):
    return [sample_episode(world, Rng(100 + i), vocab, f"tr{i}") for i in range(4)]


def make_trainer(cfg, episodes, worlds, tmp_path=None, **kw):
    tc = TrainConfig(**{"epochs": 2, "batch_size": 2, "lr_low": 1e-4, "lr_high": 1e-3, "max_steps": 60,
                        "dagger_rounds": 1, "dagger_epochs": 1, **kw})
    paths = {}
    if tmp_path is not None:
        paths = dict(log_path=str(tmp_path / "log.jsonl"), best_path=str(tmp_path / "best.ckpt"),
                     last_path=str(tmp_path / "last.ckpt"))
    return Trainer(SasraModel(cfg, seed=0), tc, episodes, episodes[:1], worlds, **paths)


# -- loss -----------------------------------------------------------------------

def test_loss_zero_for_one_hot():
    p = Tensor(np.eye(4)[[1, 1, 2, 0]])
    assert imitation_loss(p, [1, 1, 2, 0]).item() == pytest.approx(0.0, abs=1e-10)


def test_loss_uniform_is_log4():
    p = Tensor(np.full((5, 4), 0.25))
    assert imitation_loss(p, [1, 2, 3, 1, 0]).item() == pytest.approx(math.log(4), rel=1e-12)


def test_loss_hand_computed():
    # labels 1,1,2,2: weights 3.2 (start->1), 1, 3.2 (1->2), 1
    p = np.array([[0.1, 0.6, 0.2, 0.1],
                  [0.1, 0.5, 0.2, 0.2],
                  [0.2, 0.2, 0.4, 0.2],
                  [0.1, 0.1, 0.7, 0.1]])
    want = (3.2 * -math.log(0.6) - math.log(0.5) + 3.2 * -math.log(0.4) - math.log(0.7)) / 8.4
    assert imitation_loss(Tensor(p), [1, 1, 2, 2], 3.2).item() == pytest.approx(want, rel=1e-12)


def test_inflection_weights_start_is_stop():
    np.testing.assert_array_equal(inflection_weights([0, 1, 1, 3], 3.2), [1.0, 3.2, 1.0, 3.2])


def test_loss_clamps_zero_probability():
    p = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]), requires_grad=True)
    loss = imitation_loss(p, [1])
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(-math.log(1e-12))


@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.floats(1.0, 10.0))
def test_loss_nonnegative_and_coeff_one_is_plain_ce(labels, coeff):
    rng = np.random.default_rng(len(labels))
    logits = rng.normal(size=(len(labels), 4))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    ce = -np.log(p[np.arange(len(labels)), labels]).mean()
    assert imitation_loss(Tensor(p), labels, 1.0).item() == pytest.approx(ce, rel=1e-10)
    assert imitation_loss(Tensor(p), labels, coeff).item() >= 0


# -- optimizer ------------------------------------------------------------------

def test_cyclic_lr_shape():
    assert cyclic_lr(0, 1e-5, 1e-3, 10) == pytest.approx(1e-5)
    assert cyclic_lr(10, 1e-5, 1e-3, 10) == pytest.approx(1e-3)
    assert cyclic_lr(5, 1e-5, 1e-3, 10) == pytest.approx(0.5 * (1e-5 + 1e-3))
    assert cyclic_lr(20, 1e-5, 1e-3, 10) == pytest.approx(1e-5)
    assert cyclic_lr(30, 1e-5, 1e-3, 10) == pytest.approx(1e-3)


def _param(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def test_adam_first_step_moves_by_lr():
    p = _param([1.0, -2.0, 3.0])
    opt = Adam([("w", p)], 1e-2, 1e-2, 10)
    p.grad = np.array([0.5, -4.0, 1e-3])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 1e-2, -2.0 + 1e-2, 3.0 - 1e-2 * 1e-3 / (1e-3 + 1e-8)],
                               rtol=1e-9)


def test_adam_zero_grad_leaves_params():
    p = _param([1.0, 2.0])
    opt = Adam([("w", p)], 1e-2, 1e-1, 10)
    opt.zero_grad()
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_skips_non_finite():
    p = _param([1.0, 2.0])
    q = _param([3.0])
    opt = Adam([("w", p), ("q", q)], 1e-2, 1e-1, 10)
    p.grad = np.array([np.nan, 1.0])
    q.grad = np.array([1.0])
    assert opt.step() is False
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    np.testing.assert_array_equal(q.data, [3.0])
    assert opt.skipped == 1 and opt.t == 0 and opt.calls == 1


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=5)
    p = _param(w0.copy())
    opt = Adam([("w", p)], 1e-3, 1e-2, 4)
    m = v = np.zeros(5)
    w = w0.copy()
    for t in range(1, 12):
        g = rng.normal(size=5)
        p.grad = g.copy()
        lr = cyclic_lr(t - 1, 1e-3, 1e-2, 4)
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, w, rtol=1e-12)


# -- config ---------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(regime="rl")
    with pytest.raises(ValueError):
        TrainConfig(beta=1.5)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3, "nope": 1})
    tc = TrainConfig(epochs=3)
    assert TrainConfig.from_dict(tc.to_dict()) == tc


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(tmp_path, tiny_cfg):
    model = SasraModel(tiny_cfg, seed=3)
    opt = Adam(model.named_parameters(), 1e-4, 1e-3, 7)
    rng = Rng(11)
    rng.random()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(str(a), model, opt, rng, 4, {"k": [1, 2]})
    ck = read_checkpoint(str(a))
    m2 = SasraModel(tiny_cfg, seed=99)
    o2 = Adam(m2.named_parameters(), 0, 0, 1)
    r2 = Rng(0)
    load_into(ck, m2, o2, r2)
    save_checkpoint(str(b), m2, o2, r2, ck.epoch, ck.state)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().startswith(MAGIC)
    assert r2.random() == rng.random()


def test_checkpoint_errors(tmp_path, tiny_cfg):
    model = SasraModel(tiny_cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), model)
    raw = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(str(cut))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTIT\0" + raw[6:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(str(bad))
    ver = tmp_path / "ver.ckpt"
    ver.write_bytes(raw[:6] + (2).to_bytes(4, "little") + raw[10:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(str(ver))
    with pytest.raises(CheckpointError):
        read_checkpoint(str(tmp_path / "missing.ckpt"))
    other = SasraModel(dataclasses.replace(tiny_cfg, H=32, ff=64))
    with pytest.raises(CheckpointError, match="H: expected 32, found 16"):
        load_into(read_checkpoint(str(path)), other)


# -- traces ---------------------------------------------------------------------

def test_replay_reproduces_trace(world, episode, tiny_cfg):
    model = SasraModel(tiny_cfg, seed=1)
    tr = collect_trace(world, episode, tiny_cfg, policy=model, oracle_prob=0.5, rng=Rng(3), max_steps=40)
    rt = replay_trace(world, episode, tr.executed, tiny_cfg)
    assert rt.poses == tr.poses and rt.labels == tr.labels and rt.prev_actions == tr.prev_actions
    np.testing.assert_array_equal(rt.maps, tr.maps)


def test_round_zero_trace_is_teacher_trace(world, episode, tiny_cfg):
    model = SasraModel(tiny_cfg, seed=1)
    tf = collect_trace(world, episode, tiny_cfg)
    r0 = collect_trace(world, episode, tiny_cfg, policy=model, oracle_prob=oracle_fraction(0.75, 0),
                       rng=Rng(0))
    assert tf.executed == r0.executed == tf.labels
    assert tf.labels[-1] == Action.STOP
    np.testing.assert_array_equal(tf.maps, r0.maps)


def test_mixture_fraction():
    # the mixing rule executes the expert when rng.random() < beta^n
    rng = Rng(0)
    frac = oracle_fraction(0.75, 2)
    hits = sum(rng.random() < frac for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5625) < 0.02


def test_mixed_rollout_executes_expected_share(world, vocab, tiny_cfg):
    # an untrained policy disagrees with the expert often; the share of
    # executed actions equal to the label tracks beta^n from above
    model = SasraModel(tiny_cfg, seed=2)
    agree = total = 0
    for i in range(6):
        ep = sample_episode(world, Rng(200 + i), vocab, f"mx{i}")
        tr = collect_trace(world, ep, tiny_cfg, policy=model, oracle_prob=0.5, rng=Rng(i), max_steps=40)
        agree += sum(a == y for a, y in zip(tr.executed, tr.labels))
        total += len(tr)
    assert agree / total >= 0.5 - 0.1


# -- training loops -------------------------------------------------------------

def test_shuffle_is_seeded(tiny_cfg, episodes, worlds):
    results = []
    for _ in range(2):
        tr = make_trainer(tiny_cfg, episodes, worlds)
        traces = tr.teacher_traces()
        teacher_forcing_epoch(tr.model, traces, worlds, tr.opt, tr.rng, 2)
        results.append([p.data.copy() for _, p in tr.model.named_parameters()])
    for a, b in zip(*results):
        np.testing.assert_array_equal(a, b)


def test_loss_decreases_over_epochs(tiny_cfg, episodes, worlds):
    tr = make_trainer(tiny_cfg, episodes, worlds, lr_low=1e-3, lr_high=3e-3)
    traces = tr.teacher_traces()
    losses = [teacher_forcing_epoch(tr.model, traces, worlds, tr.opt, tr.rng, 2)["loss"] for _ in range(6)]
    violations = sum(b > a for a, b in zip(losses, losses[1:]))
    assert violations <= 1 and losses[-1] < losses[0]


def test_memorizes_one_episode(tiny_cfg, episode, worlds):
    model = SasraModel(tiny_cfg, seed=0)
    world = worlds(episode.world_seed)
    trace = collect_trace(world, episode, tiny_cfg)
    opt = Adam(model.named_parameters(), 1e-3, 1e-2, 50)
    rng = Rng(0)
    for epoch in range(150):
        stats = teacher_forcing_epoch(model, [trace], worlds, opt, rng, 1)
        if stats["loss"] < 0.05 and stats["accuracy"] == 1.0:
            break
    assert stats["loss"] < 0.05 and stats["accuracy"] == 1.0


class _Killed(Exception):
    pass


def interrupted_run(cfg, episodes, worlds, root, kill_after, **kw):
    """Train until ``kill_after`` epochs, die right after the epoch's checkpoint, then resume to the end."""
    (root / "full").mkdir()
    full = make_trainer(cfg, episodes, worlds, root / "full", **kw)
    full.fit_teacher_forcing()
    full.fit_dagger()

    (root / "part").mkdir()
    part = make_trainer(cfg, episodes, worlds, root / "part", **kw)
    end_epoch = part._end_epoch

    def dying(stats, phase):
        out = end_epoch(stats, phase)
        if part.epoch == kill_after:
            raise _Killed
        return out

    part._end_epoch = dying
    with pytest.raises(_Killed):
        part.fit_teacher_forcing()
        part.fit_dagger()
    resumed = make_trainer(cfg, episodes, worlds, root / "part", **kw)
    resumed.resume(str(root / "part" / "last.ckpt"))
    assert resumed.epoch == kill_after
    resumed.fit_teacher_forcing()
    resumed.fit_dagger()
    return full, resumed


def same_parameters(a, b):
    return all(np.array_equal(p.data, q.data) for (_, p), (_, q)
               in zip(a.model.named_parameters(), b.model.named_parameters()))


@pytest.mark.parametrize("kill_after", [1, 2, 3])
def test_resume_matches_uninterrupted(tmp_path, tiny_cfg, episodes, worlds, kill_after):
    full, resumed = interrupted_run(tiny_cfg, episodes, worlds, tmp_path, kill_after, regime="dagger")
    assert resumed.epoch == full.epoch == 3
    assert len(resumed.aggregate) == len(full.aggregate) == 2 * len(episodes)
    assert resumed.best_score == full.best_score
    assert same_parameters(full, resumed)


def test_each_dagger_round_is_one_annealed_cycle(tiny_cfg, episodes, worlds):
    tr = make_trainer(tiny_cfg, episodes, worlds, epochs=1, regime="dagger", dagger_rounds=3,
                      dagger_epochs=2)
    tr.val_seen = []
    tr.fit_teacher_forcing()
    seen = []
    end_epoch = tr._end_epoch

    def record(stats, phase):
        seen.append((phase, tr.round_epoch, tr.opt.lr()))
        return end_epoch(stats, phase)

    tr._end_epoch = record
    tr.fit_dagger()
    # aggregates of 8, 12, 16 traces in batches of 2 give rounds of 8, 12, 16 steps
    assert [(p, e) for p, e, _ in seen] == [(f"dagger_{r}", e) for r in (1, 2, 3) for e in (1, 2)]
    for phase, e, lr in seen:
        assert lr == pytest.approx(tr.tcfg.lr_high if e == 1 else tr.tcfg.lr_low), (phase, e)


def test_dagger_aggregate_grows_and_logs(tmp_path, tiny_cfg, episodes, worlds):
    import json

    tr = make_trainer(tiny_cfg, episodes, worlds, tmp_path, epochs=1, regime="dagger", dagger_rounds=2)
    tr.fit_teacher_forcing()
    assert len(tr.aggregate) == len(episodes)
    tr.fit_dagger()
    assert tr.dagger_round == 2 and len(tr.aggregate) == 3 * len(episodes)
    recs = [json.loads(l) for l in open(tmp_path / "log.jsonl")]
    assert [r["phase"] for r in recs] == ["teacher_forcing", "dagger_1", "dagger_2"]
    keys = {"epoch", "split", "phase", "loss", "accuracy", "lr", "skipped", "sr", "spl", "ndtw"}
    assert all(set(r) == keys for r in recs)
