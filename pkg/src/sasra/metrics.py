"""Navigation metrics: SR, SPL, NDTW, TL and NE."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

METRIC_ORDER = ("sr", "spl", "ndtw", "tl", "ne")


@dataclass
class Trajectory:
    positions: list[tuple[float, float]]
    reference: list[tuple[float, float]]
    goal: tuple[float, float]
    success_radius: float
    stop_called: bool

    def __post_init__(self):
        if not self.positions:
            raise ValueError("trajectory needs at least the start position")


@dataclass
class EpisodeResult:
    sr: float
    spl: float
    ndtw: float
    tl: float
    ne: float
    episode_id: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def path_length(points: Sequence[Sequence[float]]) -> float:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) < 2:
        return 0.0
    return float(np.sqrt(((p[1:] - p[:-1]) ** 2).sum(axis=1)).sum())


def dtw(P, Q) -> float:
    """Dynamic time warping distance with euclidean point costs (full DP)."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 2)
    n, m = len(P), len(Q)
    cost = np.sqrt(((P[:, None, :] - Q[None, :, :]) ** 2).sum(axis=-1))
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = acc[i]
        prev = acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[n, m])


def ndtw(P, Q, success_radius: float) -> float:
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 2)
    return math.exp(-dtw(P, Q) / (max(len(Q), 1) * success_radius))


def evaluate_episode(traj: Trajectory, geodesic: Callable[[tuple, tuple], float],
                     episode_id: str = "") -> EpisodeResult:
    final = traj.positions[-1]
    ne = math.hypot(final[0] - traj.goal[0], final[1] - traj.goal[1])
    sr = 1.0 if (traj.stop_called and ne <= traj.success_radius) else 0.0
    tl = path_length(traj.positions)
    ell = geodesic(tuple(traj.positions[0]), tuple(traj.goal))
    spl = sr * (ell / max(ell, tl)) if max(ell, tl) > 0 else sr
    ref = traj.reference if traj.reference else [traj.positions[0]]
    nd = ndtw(traj.positions, ref, traj.success_radius)
    return EpisodeResult(sr, spl, nd, tl, ne, episode_id)


def aggregate(results: Sequence[EpisodeResult]) -> dict:
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    out = {k: float(np.mean([getattr(r, k) for r in results])) for k in METRIC_ORDER}
    out["count"] = len(results)
    out["successes"] = int(sum(r.sr for r in results))
    return out


def format_table(rows: dict[str, dict], title: str = "") -> str:
    """Aligned text table, one row per named summary, columns SR SPL NDTW TL NE."""
    name_w = max([len(n) for n in rows] + [5])
    head = f"{'':<{name_w}}  " + "  ".join(f"{k.upper():>6}" for k in METRIC_ORDER)
    lines = ([title] if title else []) + [head]
    for name, s in rows.items():
        lines.append(f"{name:<{name_w}}  " + "  ".join(f"{s[k]:6.3f}" for k in METRIC_ORDER))
    return "\n".join(lines)


def write_results(path: str, results: Sequence[EpisodeResult]) -> None:
    with open(path, "w") as f:
        for r in results:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_results(path: str) -> list[EpisodeResult]:
    with open(path) as f:
        return [EpisodeResult(**json.loads(line)) for line in f if line.strip()]
