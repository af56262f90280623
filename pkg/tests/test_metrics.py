import functools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sasra.metrics import (EpisodeResult, Trajectory, aggregate, dtw, evaluate_episode,
                           format_table, ndtw, path_length, read_results, write_results)


def dtw_bruteforce(P, Q):
    """Textbook recursion, no tables."""
    @functools.lru_cache(maxsize=None)
    def rec(i, j):
        c = math.dist(P[i], Q[j])
        if i == 0 and j == 0:
            return c
        best = math.inf
        if i > 0:
            best = min(best, rec(i - 1, j))
        if j > 0:
            best = min(best, rec(i, j - 1))
        if i > 0 and j > 0:
            best = min(best, rec(i - 1, j - 1))
        return c + best

    return rec(len(P) - 1, len(Q) - 1)


def test_dtw_matches_bruteforce_recursion():
    rng = np.random.default_rng(0)
    for _ in range(150):
        n, m = rng.integers(1, 13, size=2)
        P = [tuple(p) for p in rng.normal(size=(n, 2)).round(3)]
        Q = [tuple(q) for q in rng.normal(size=(m, 2)).round(3)]
        assert dtw(P, Q) == pytest.approx(dtw_bruteforce(P, Q), rel=1e-12, abs=1e-12)


def test_dtw_known_values():
    assert dtw([(0, 0), (1, 0)], [(0, 0), (1, 0)]) == 0.0
    assert dtw([(0, 0)], [(0, 0), (3, 4)]) == 5.0
    assert ndtw([(0, 0)], [(0, 0), (3, 4)], 1.0) == pytest.approx(math.exp(-5 / 2))


def geo_euclid(a, b):
    return math.dist(a, b)


def test_perfect_replay_scores_one_exactly():
    ref = [(0.0, 0.0), (0.25, 0.0), (0.5, 0.0), (0.75, 0.0)]
    r = evaluate_episode(Trajectory(ref, ref, (0.75, 0.0), 0.5, True), geo_euclid)
    assert (r.sr, r.spl, r.ndtw) == (1.0, 1.0, 1.0)
    assert r.tl == 0.75 and r.ne == 0.0


def test_success_requires_stop_and_radius():
    ref = [(0.0, 0.0), (1.0, 0.0)]
    assert evaluate_episode(Trajectory(ref, ref, (1.0, 0.0), 0.5, False), geo_euclid).sr == 0.0
    far = [(0.0, 0.0), (0.0, 2.0)]
    r = evaluate_episode(Trajectory(far, ref, (1.0, 0.0), 0.5, True), geo_euclid)
    assert r.sr == 0.0 and r.spl == 0.0 and r.ne == pytest.approx(math.sqrt(5))


def test_spl_penalizes_detours():
    ref = [(0.0, 0.0), (1.0, 0.0)]
    path = [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]
    r = evaluate_episode(Trajectory(path, ref, (1.0, 0.0), 0.5, True), geo_euclid)
    assert r.sr == 1.0 and r.spl == pytest.approx(1.0 / 3.0)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=12),
       st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=12),
       st.floats(0.1, 3), st.booleans())
def test_metric_ranges(P, Q, radius, stop):
    r = evaluate_episode(Trajectory(P, Q, Q[-1], radius, stop), geo_euclid)
    assert 0.0 <= r.spl <= r.sr <= 1.0
    assert 0.0 < r.ndtw <= 1.0
    assert r.tl == pytest.approx(path_length(P))


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        Trajectory([], [], (0, 0), 1.0, True)
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_table_and_jsonl(tmp_path):
    rs = [EpisodeResult(1.0, 0.5, 0.8, 3.0, 0.2, "a"), EpisodeResult(0.0, 0.0, 0.4, 5.0, 2.0, "b")]
    s = aggregate(rs)
    assert s["sr"] == 0.5 and s["spl"] == 0.25 and s["count"] == 2 and s["successes"] == 1
    header = format_table({"x": s}).splitlines()[0].split()
    assert header == ["SR", "SPL", "NDTW", "TL", "NE"]
    p = str(tmp_path / "r.jsonl")
    write_results(p, rs)
    assert read_results(p) == rs
