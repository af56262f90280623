"""Procedural semantic grid worlds, a 2.5D column raycaster, kinematics and a shortest-path expert.

Worlds are square grids of ``cell_size``-metre cells.  Each cell carries a
class id (0 = free floor) and a wall height.  Rooms are rectangles whose
bounding walls carry the room's dominant class; rooms are chained by
one-cell corridors whose walls keep the generic wall class.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geomap import CameraIntrinsics, Pose, normalize_heading
from .tensor import Rng

CLASS_NAMES = ["floor", "wall", "bed", "couch", "table", "sink", "plant", "tv", "shelf"]
FORWARD_DIST = 0.25
TURN_ANGLE = math.pi / 12  # 15 degrees
WALL_HEIGHT = 2.5
OBJECT_HEIGHT = 1.0
CORRIDOR = -2
SOLID = -1
DATASET_VERSION = 1


class GenerationError(RuntimeError):
    pass


class SimulatorError(RuntimeError):
    pass


class Action(IntEnum):
    STOP = 0
    FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3


NUM_ACTIONS = len(Action)
START_ACTION = Action.STOP  # previous-action token at t = 0


def class_name(k: int) -> str:
    return CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"object{k}"


def default_palette(K: int) -> np.ndarray:
    pal = np.zeros((K + 1, 3))
    pal[0] = (0.55, 0.5, 0.45)
    pal[1] = (0.8, 0.8, 0.8)
    for k in range(2, K + 1):
        hue = (k - 2) / max(K - 1, 1)
        i = int(hue * 6) % 6
        f = hue * 6 - int(hue * 6)
        p, q, t = 0.2, 1 - 0.8 * f, 0.2 + 0.8 * f
        pal[k] = [(1, t, p), (q, 1, p), (p, 1, t), (p, q, 1), (t, p, 1), (1, p, q)][i]
    return pal


@dataclass
class World:
    classes: np.ndarray        # (W, W) int, indexed [ix, iy]
    heights: np.ndarray        # (W, W) float metres, 0 on free cells
    region: np.ndarray         # (W, W) int: room index, CORRIDOR, or SOLID
    room_classes: list[int]
    palette: np.ndarray
    seed: int
    K: int
    cell_size: float = 0.5
    _dist_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self) -> int:
        return self.classes.shape[0]

    @property
    def extent(self) -> float:
        return self.size * self.cell_size

    def free(self) -> np.ndarray:
        return self.classes == 0

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        cs = self.cell_size
        return int(math.floor(round(x / cs, 9))), int(math.floor(round(y / cs, 9)))

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.size and 0 <= iy < self.size

    def is_free(self, ix: int, iy: int) -> bool:
        return self.in_bounds(ix, iy) and self.classes[ix, iy] == 0

    def center(self, ix: int, iy: int) -> tuple[float, float]:
        return (ix + 0.5) * self.cell_size, (iy + 0.5) * self.cell_size

    def distance_field(self, goal_cell: tuple[int, int]) -> np.ndarray:
        """BFS step counts to ``goal_cell`` over 4-connected free cells (-1 = unreachable)."""
        if goal_cell not in self._dist_cache:
            self._dist_cache[goal_cell] = bfs_distances(self.free(), goal_cell)
        return self._dist_cache[goal_cell]

    def geodesic(self, a: tuple[float, float], b: tuple[float, float]) -> float:
        """Shortest free-cell path length in metres (BFS steps x cell size)."""
        ca, cb = self.cell_of(*a), self.cell_of(*b)
        d = self.distance_field(cb)[ca]
        if d < 0:
            return math.hypot(a[0] - b[0], a[1] - b[1])
        return float(d) * self.cell_size


# N, E, S, W in (ix, iy) terms: +y is north, +x is east
NEIGHBORS = ((0, 1), (1, 0), (0, -1), (-1, 0))


def bfs_distances(free: np.ndarray, source: tuple[int, int]) -> np.ndarray:
    dist = np.full(free.shape, -1, dtype=np.int64)
    if not free[source]:
        return dist
    dist[source] = 0
    q = deque([source])
    W, H = free.shape
    while q:
        x, y = q.popleft()
        for dx, dy in NEIGHBORS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < W and 0 <= ny < H and free[nx, ny] and dist[nx, ny] < 0:
                dist[nx, ny] = dist[x, y] + 1
                q.append((nx, ny))
    return dist


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------

def _carve_corridor(classes, region, a, b, horizontal_first: bool):
    (x0, y0), (x1, y1) = a, b
    path = []
    if horizontal_first:
        path += [(x, y0) for x in range(min(x0, x1), max(x0, x1) + 1)]
        path += [(x1, y) for y in range(min(y0, y1), max(y0, y1) + 1)]
    else:
        path += [(x0, y) for y in range(min(y0, y1), max(y0, y1) + 1)]
        path += [(x, y1) for x in range(min(x0, x1), max(x0, x1) + 1)]
    for x, y in path:
        if region[x, y] == SOLID:
            region[x, y] = CORRIDOR
            classes[x, y] = 0


def generate_world(seed: int, size: int = 24, num_rooms: int = 3, K: int = 8,
                   cell_size: float = 0.5, max_tries: int = 200) -> World:
    """Deterministic world from ``seed``: rooms, corridors, room-class walls and objects."""
    if size < 16 or num_rooms < 2 or K < 4:
        raise GenerationError(f"need size>=16, num_rooms>=2, K>=4 (got {size}, {num_rooms}, {K})")
    if num_rooms > K - 1:
        raise GenerationError(f"{num_rooms} rooms need distinct classes but only {K - 1} exist")
    rng = Rng(seed)
    classes = np.ones((size, size), dtype=np.int64)
    region = np.full((size, size), SOLID, dtype=np.int64)
    rooms: list[tuple[int, int, int, int]] = []
    tries = 0
    while len(rooms) < num_rooms:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"could not fit {num_rooms} rooms in a {size}x{size} world")
        w, h = int(rng.integers(4, 8)), int(rng.integers(4, 8))
        x0, y0 = int(rng.integers(1, size - w)), int(rng.integers(1, size - h))
        # keep at least one wall cell between rooms
        if any(x0 <= rx + rw and rx <= x0 + w and y0 <= ry + rh and ry <= y0 + h
               for rx, ry, rw, rh in rooms):
            continue
        rooms.append((x0, y0, w, h))
    # sort rooms along a serpentine so corridors stay short
    rooms.sort(key=lambda r: (r[0] + r[2] / 2) + (r[1] + r[3] / 2) * 0.5)
    for i, (x0, y0, w, h) in enumerate(rooms):
        classes[x0:x0 + w, y0:y0 + h] = 0
        region[x0:x0 + w, y0:y0 + h] = i
    for i in range(len(rooms) - 1):
        a, b = rooms[i], rooms[i + 1]
        ca = (a[0] + a[2] // 2, a[1] + a[3] // 2)
        cb = (b[0] + b[2] // 2, b[1] + b[3] // 2)
        _carve_corridor(classes, region, ca, cb, bool(rng.integers(0, 2)))
    room_classes = [int(c) for c in rng.permutation(np.arange(2, K + 1))[:num_rooms]]
    # walls touching a room take its class
    for i, (x0, y0, w, h) in enumerate(rooms):
        for x in range(x0 - 1, x0 + w + 1):
            for y in range(y0 - 1, y0 + h + 1):
                if 0 <= x < size and 0 <= y < size and region[x, y] == SOLID:
                    classes[x, y] = room_classes[i]
    border = np.ones_like(classes, dtype=bool)
    border[1:-1, 1:-1] = False
    if (classes[border] == 0).any():
        raise GenerationError("free cell on the world boundary")
    heights = np.where(classes > 0, WALL_HEIGHT, 0.0)
    # objects: against a room wall, never on a corridor mouth, never disconnecting
    for i, (x0, y0, w, h) in enumerate(rooms):
        cand = [(x, y) for x in range(x0, x0 + w) for y in range(y0, y0 + h)
                if x in (x0, x0 + w - 1) or y in (y0, y0 + h - 1)]
        order = rng.permutation(len(cand))
        placed = 0
        for j in order:
            if placed >= 2:
                break
            x, y = cand[int(j)]
            if any(0 <= x + dx < size and 0 <= y + dy < size and region[x + dx, y + dy] == CORRIDOR
                   for dx in (-1, 0, 1) for dy in (-1, 0, 1)):
                continue
            classes[x, y] = room_classes[i]
            if _free_components(classes == 0) != 1:
                classes[x, y] = 0
                continue
            heights[x, y] = OBJECT_HEIGHT
            region[x, y] = SOLID
            placed += 1
    if _free_components(classes == 0) != 1:
        raise GenerationError("generated world has disconnected free space")
    return World(classes, heights, region, room_classes, default_palette(K), int(seed), K, cell_size)


def _free_components(free: np.ndarray) -> int:
    from scipy.ndimage import label

    return int(label(free)[1])


def room_components(world: World) -> int:
    from scipy.ndimage import label

    return int(label(world.region >= 0)[1])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass
class Observation:
    rgb: np.ndarray       # (H, W, 3) in [0, 1]
    depth: np.ndarray     # (H, W) metres, 0 = no return
    semantic: np.ndarray  # (H, W) class ids
    pose: Pose


def default_intrinsics(size: int = 64, hfov_deg: float = 90.0) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(size, size, hfov_deg)


def cast_rays(world: World, pose: Pose, intr: CameraIntrinsics, max_steps: int | None = None):
    """DDA over all image columns at once.

    Returns per column: (z_obj, k_obj, h_obj) for the first obstacle of any
    height and (z_wall, k_wall, h_wall) for the first obstacle at least as
    tall as the camera.  z values are perspective (forward-axis) depths.
    """
    cs = world.cell_size
    u = np.arange(intr.width)
    xcam = (u - intr.cx) / intr.fx
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    dx = c + xcam * s
    dy = s - xcam * c
    px, py = pose.x / cs, pose.y / cs
    ix = np.full(intr.width, int(math.floor(round(px, 9))))
    iy = np.full(intr.width, int(math.floor(round(py, 9))))
    with np.errstate(divide="ignore"):
        tdx = np.where(dx != 0, np.abs(1.0 / dx), np.inf)
        tdy = np.where(dy != 0, np.abs(1.0 / dy), np.inf)
    stepx = np.where(dx > 0, 1, -1)
    stepy = np.where(dy > 0, 1, -1)
    sdx = np.where(dx > 0, (ix + 1 - px), (px - ix)) * tdx
    sdy = np.where(dy > 0, (iy + 1 - py), (py - iy)) * tdy
    sdx = np.where(np.isnan(sdx), np.inf, sdx)
    sdy = np.where(np.isnan(sdy), np.inf, sdy)
    n = intr.width
    z_obj = np.full(n, np.inf)
    k_obj = np.zeros(n, dtype=np.int64)
    h_obj = np.zeros(n)
    z_wall = np.full(n, np.inf)
    k_wall = np.zeros(n, dtype=np.int64)
    h_wall = np.zeros(n)
    active = np.ones(n, dtype=bool)
    limit = max_steps or 4 * world.size
    for _ in range(limit):
        if not active.any():
            break
        takex = sdx < sdy
        t = np.where(takex, sdx, sdy)
        ix = np.where(active & takex, ix + stepx, ix)
        iy = np.where(active & ~takex, iy + stepy, iy)
        sdx = np.where(active & takex, sdx + tdx, sdx)
        sdy = np.where(active & ~takex, sdy + tdy, sdy)
        inb = (ix >= 0) & (ix < world.size) & (iy >= 0) & (iy < world.size)
        cx = np.clip(ix, 0, world.size - 1)
        cy = np.clip(iy, 0, world.size - 1)
        k = np.where(inb, world.classes[cx, cy], 1)
        h = np.where(inb, world.heights[cx, cy], WALL_HEIGHT)
        hit = active & (k > 0)
        first = hit & np.isinf(z_obj)
        z_obj = np.where(first, t * cs, z_obj)
        k_obj = np.where(first, k, k_obj)
        h_obj = np.where(first, h, h_obj)
        tall = hit & (h >= pose.camera_height)
        z_wall = np.where(tall, t * cs, z_wall)
        k_wall = np.where(tall, k, k_wall)
        h_wall = np.where(tall, h, h_wall)
        active &= ~tall
    return (z_obj, k_obj, h_obj), (z_wall, k_wall, h_wall)


def render(world: World, pose: Pose, intr: CameraIntrinsics, semantic_noise: float = 0.0,
           rng: Rng | None = None) -> Observation:
    """First-person RGB, depth and semantic images from a per-column raycast."""
    if not world.is_free(*world.cell_of(pose.x, pose.y)):
        raise SimulatorError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is inside a wall")
    (z1, k1, h1), (z2, k2, h2) = cast_rays(world, pose, intr)
    cam_h = pose.camera_height
    rows = (np.arange(intr.height) - intr.cy)[:, None] / intr.fy  # (H, 1) slope of the ray, down > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z_floor = np.where(rows > 0, cam_h / rows, np.inf)
        # vertical coordinate where each pixel ray crosses the hit planes
        y1 = cam_h - rows * z1[None, :]
        y2 = cam_h - rows * z2[None, :]
    floor_first = z_floor < z1[None, :]
    sees_obj = ~floor_first & (y1 >= 0) & (y1 <= h1[None, :])
    past_obj = ~floor_first & ~sees_obj
    floor_second = past_obj & (z_floor < z2[None, :])
    sees_wall = past_obj & ~floor_second & (y2 >= 0) & (y2 <= h2[None, :]) & np.isfinite(z2)[None, :]
    depth = np.zeros((intr.height, intr.width))
    sem = np.zeros((intr.height, intr.width), dtype=np.int64)
    floor = floor_first | floor_second
    depth = np.where(floor, z_floor, depth)
    depth = np.where(sees_obj, np.broadcast_to(z1, depth.shape), depth)
    sem = np.where(sees_obj, np.broadcast_to(k1, sem.shape), sem)
    depth = np.where(sees_wall, np.broadcast_to(z2, depth.shape), depth)
    sem = np.where(sees_wall, np.broadcast_to(k2, sem.shape), sem)
    depth = np.where(np.isfinite(depth), depth, 0.0)
    if semantic_noise > 0:
        rng = rng or Rng(0)
        flip = rng.random(sem.shape) < semantic_noise
        sem = np.where(flip & (depth > 0), rng.integers(0, world.K + 1, sem.shape), sem)
    shade = 1.0 / (1.0 + depth)
    rgb = world.palette[sem] * shade[..., None]
    rgb[depth == 0] = 0.0
    return Observation(rgb, depth, sem, pose)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def _turn(heading: float, sign: int) -> float:
    k = round(heading / TURN_ANGLE)
    if abs(heading - k * TURN_ANGLE) < 1e-9:
        return ((k + sign) % 24) * TURN_ANGLE
    return normalize_heading(heading + sign * TURN_ANGLE)


def step(world: World, pose: Pose, action: Action) -> tuple[Pose, bool]:
    action = Action(action)
    if action == Action.STOP:
        raise SimulatorError("Stop is handled by the episode loop, not step()")
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, _turn(pose.heading, +1), pose.camera_height), False
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, _turn(pose.heading, -1), pose.camera_height), False
    nx = pose.x + FORWARD_DIST * math.cos(pose.heading)
    ny = pose.y + FORWARD_DIST * math.sin(pose.heading)
    if not world.is_free(*world.cell_of(nx, ny)):
        return pose, True
    return Pose(nx, ny, pose.heading, pose.camera_height), False


# ---------------------------------------------------------------------------
# shortest-path expert
# ---------------------------------------------------------------------------

_CLEAR_OFFSETS = np.array([(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)], dtype=np.float64)


def _line_clear(world: World, a, b, spacing: float = 0.05, clearance: float = 0.12) -> bool:
    n = max(2, int(math.hypot(b[0] - a[0], b[1] - a[1]) / spacing) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = (np.asarray(a, dtype=np.float64) + t * (np.asarray(b, dtype=np.float64) - np.asarray(a)))
    pts = (pts[:, None, :] + clearance * _CLEAR_OFFSETS[None]).reshape(-1, 2)
    idx = np.floor(np.round(pts / world.cell_size, 9)).astype(np.int64)
    ix, iy = idx[:, 0], idx[:, 1]
    size = world.size
    if ((ix < 0) | (ix >= size) | (iy < 0) | (iy >= size)).any():
        return False
    return bool((world.classes[ix, iy] == 0).all())


def path_cells(world: World, start_cell, goal_cell, limit: int | None = None) -> list[tuple[int, int]]:
    """Descend the BFS distance field from ``start_cell`` (ties in N, E, S, W order)."""
    dist = world.distance_field(goal_cell)
    if dist[start_cell] < 0:
        raise SimulatorError(f"goal {goal_cell} unreachable from {start_cell}")
    cells = [start_cell]
    cur = start_cell
    while cur != goal_cell and (limit is None or len(cells) <= limit):
        for dx, dy in NEIGHBORS:
            nb = (cur[0] + dx, cur[1] + dy)
            if world.in_bounds(*nb) and dist[nb] == dist[cur] - 1:
                cur = nb
                break
        cells.append(cur)
    return cells


def _heading_error(pose: Pose, target) -> float:
    want = math.atan2(target[1] - pose.y, target[0] - pose.x)
    e = math.remainder(want - pose.heading, 2 * math.pi)
    return e


def oracle_action(world: World, pose: Pose, goal, success_radius: float,
                  lookahead: int = 6, align_tol: float = TURN_ANGLE) -> Action:
    """Expert action: Stop once close enough, else turn toward / advance along the BFS path.

    The expert stops once within ``success_radius - FORWARD_DIST`` so that a
    learner stopping one step early still lands inside the success radius.
    """
    goal = (float(goal[0]), float(goal[1]))
    if math.hypot(pose.x - goal[0], pose.y - goal[1]) <= max(success_radius - FORWARD_DIST, 1e-9):
        return Action.STOP
    a = world.cell_of(pose.x, pose.y)
    g = world.cell_of(*goal)
    cells = path_cells(world, a, g, limit=lookahead)
    targets = []
    for c in cells[1:]:
        targets.append(goal if c == g else world.center(*c))
    if not targets:
        targets = [goal]
    candidates = [t for t in reversed(targets) if _line_clear(world, (pose.x, pose.y), t)]
    candidates.append(targets[0])
    for target in candidates:
        e = _heading_error(pose, target)
        if abs(e) < align_tol:
            if not step(world, pose, Action.FORWARD)[1]:
                return Action.FORWARD
            continue
        if abs(abs(e) - math.pi) < 1e-12:
            return Action.TURN_LEFT
        return Action.TURN_LEFT if e > 0 else Action.TURN_RIGHT
    return Action.TURN_LEFT


def oracle_rollout(world: World, start: Pose, goal, success_radius: float, max_steps: int = 500):
    """Run the expert to Stop; returns (actions, poses) with poses[0] = start."""
    pose = start
    actions: list[int] = []
    poses = [start]
    for _ in range(max_steps):
        a = oracle_action(world, pose, goal, success_radius)
        actions.append(int(a))
        if a == Action.STOP:
            return actions, poses
        pose, _ = step(world, pose, a)
        poses.append(pose)
    raise SimulatorError("expert did not stop within max_steps")


# ---------------------------------------------------------------------------
# instructions
# ---------------------------------------------------------------------------

TEMPLATE_WORDS = ["walk", "go", "move", "forward", "straight", "through", "the", "turn", "left",
                  "right", "into", "stop", "wait", "by", "then", "and", "corridor", "room", "."]


class Vocabulary:
    PAD, UNK = 0, 1

    def __init__(self, tokens: list[str] | None = None):
        self.itos = ["<pad>", "<unk>"]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens or []:
            self.add(t)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self):
        return len(self.itos)

    def encode(self, words: list[str]) -> list[int]:
        return [self.stoi.get(w, self.UNK) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] if 0 <= i < len(self.itos) else "<unk>" for i in ids]

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, items: list[str]) -> "Vocabulary":
        if items[:2] != ["<pad>", "<unk>"]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        v = cls()
        for t in items[2:]:
            v.add(t)
        return v

    @classmethod
    def default(cls, K: int = 8) -> "Vocabulary":
        return cls(TEMPLATE_WORDS + [class_name(k) for k in range(2, K + 1)])


def region_word(world: World, cell) -> list[str]:
    r = world.region[cell]
    if r == CORRIDOR:
        return ["corridor"]
    if r >= 0:
        return [class_name(world.room_classes[r]), "room"]
    return ["corridor"]


def turn_events(actions: list[int], min_turn: int = 4) -> list[tuple[int, int]]:
    """(step index, +1 left / -1 right) wherever heading has drifted >= min_turn x 15 degrees."""
    events = []
    net = 0
    for i, a in enumerate(actions):
        if a == Action.TURN_LEFT:
            net += 1
        elif a == Action.TURN_RIGHT:
            net -= 1
        elif a == Action.FORWARD and abs(net) >= min_turn:
            events.append((i, 1 if net > 0 else -1))
            net = 0
    return events


def instruction_words(world: World, actions: list[int], poses: list[Pose], goal_class: int,
                      rng: Rng) -> list[str]:
    events = turn_events(actions)
    bounds = [0] + [e[0] for e in events] + [len(actions)]
    clauses: list[list[str]] = []
    for seg in range(len(bounds) - 1):
        lo, hi = bounds[seg], bounds[seg + 1]
        fwd_idx = [i for i in range(lo, hi) if actions[i] == Action.FORWARD]
        if not fwd_idx:
            continue
        cells = [world.cell_of(poses[i + 1].x, poses[i + 1].y) for i in fwd_idx]
        regions = [tuple(region_word(world, c)) for c in cells]
        # most frequent region, later wins ties
        best = max(set(regions), key=lambda r: (regions.count(r), max(i for i, x in enumerate(regions) if x == r)))
        verb = ["walk", "go", "move"][int(rng.integers(0, 3))]
        fwd = ["forward", "straight"][int(rng.integers(0, 2))]
        if seg == 0:
            clause = [verb, fwd, "through", "the", *best]
        else:
            d = "left" if events[seg - 1][1] > 0 else "right"
            clause = ["turn", d, "into", "the", *best]
        if clauses and clauses[-1][-len(best):] == list(best) and clause[0] != "turn":
            continue
        clauses.append(clause)
    stop = ["stop", "wait"][int(rng.integers(0, 2))]
    clauses.append([stop, "by", "the", class_name(goal_class)])
    words: list[str] = []
    for i, c in enumerate(clauses):
        if i:
            words.append("then")
        words.extend(c)
    words.append(".")
    return words


def generate_instruction(world: World, actions: list[int], poses: list[Pose], goal_class: int,
                         rng: Rng, vocab: Vocabulary) -> list[int]:
    return vocab.encode(instruction_words(world, actions, poses, goal_class, rng))


def mentioned_classes(words: list[str], K: int) -> set[int]:
    names = {class_name(k): k for k in range(2, K + 1)}
    return {names[w] for w in words if w in names}


def classes_near_path(world: World, poses: list[Pose], goal) -> set[int]:
    """Classes of regions visited plus classes of cells touching the path or the goal."""
    found: set[int] = set()
    pts = [(p.x, p.y) for p in poses] + [tuple(goal)]
    for x, y in pts:
        cx, cy = world.cell_of(x, y)
        r = world.region[cx, cy]
        if r >= 0:
            found.add(world.room_classes[r])
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if world.in_bounds(cx + dx, cy + dy):
                    found.add(int(world.classes[cx + dx, cy + dy]))
    return found


# ---------------------------------------------------------------------------
# episodes and datasets
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    episode_id: str
    world_seed: int
    start: Pose
    goal: tuple[float, float]
    gt_actions: list[int]
    instruction_ids: list[int]
    success_radius: float = 0.75
    goal_class: int = 0

    def to_json(self) -> dict:
        return {"episode_id": self.episode_id, "world_seed": self.world_seed,
                "start": self.start.as_list(), "goal": list(self.goal),
                "gt_actions": list(self.gt_actions), "instruction_ids": list(self.instruction_ids),
                "success_radius": self.success_radius, "goal_class": self.goal_class}

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        return cls(d["episode_id"], int(d["world_seed"]), Pose(*d["start"]), tuple(d["goal"]),
                   [int(a) for a in d["gt_actions"]], [int(i) for i in d["instruction_ids"]],
                   float(d["success_radius"]), int(d.get("goal_class", 0)))


@dataclass
class WorldParams:
    size: int = 24
    num_rooms: int = 3
    K: int = 8
    cell_size: float = 0.5


class WorldCache:
    """Worlds are regenerated from seeds on demand, never stored."""

    def __init__(self, params: WorldParams):
        self.params = params
        self._worlds: dict[int, World] = {}

    def __call__(self, seed: int) -> World:
        if seed not in self._worlds:
            p = self.params
            self._worlds[seed] = generate_world(seed, p.size, p.num_rooms, p.K, p.cell_size)
        return self._worlds[seed]


def sample_episode(world: World, rng: Rng, vocab: Vocabulary, episode_id: str,
                   success_radius: float = 0.75, min_len: int = 30, max_len: int = 80,
                   tries: int = 200, exclude: set | None = None) -> Episode:
    """Rejection-sample a (start, goal) pair in different rooms with an expert path of bounded length."""
    n_rooms = len(world.room_classes)
    for _ in range(tries):
        ra, rb = (int(v) for v in rng.choice(n_rooms, size=2, replace=False))
        starts = np.argwhere((world.region == ra) & world.free())
        sx, sy = starts[int(rng.integers(0, len(starts)))]
        # goal: free room cell touching an object of the goal room's class
        gclass = world.room_classes[rb]
        goals = [(x, y) for x, y in np.argwhere((world.region == rb) & world.free())
                 if any(world.in_bounds(x + dx, y + dy) and world.classes[x + dx, y + dy] == gclass
                        and world.heights[x + dx, y + dy] == OBJECT_HEIGHT
                        for dx, dy in NEIGHBORS)]
        if not goals:
            continue
        gx, gy = goals[int(rng.integers(0, len(goals)))]
        key = (int(sx), int(sy), int(gx), int(gy))
        if exclude is not None and key in exclude:
            continue
        heading = int(rng.integers(0, 24)) * TURN_ANGLE
        start = Pose(*world.center(int(sx), int(sy)), heading)
        goal = world.center(int(gx), int(gy))
        try:
            actions, poses = oracle_rollout(world, start, goal, success_radius, max_steps=max_len + 1)
        except SimulatorError:
            continue
        if not (min_len <= len(actions) <= max_len):
            continue
        if exclude is not None:
            exclude.add(key)
        instr = generate_instruction(world, actions, poses, gclass, rng, vocab)
        return Episode(episode_id, world.seed, start, goal, actions, instr, success_radius, gclass)
    raise GenerationError(f"world {world.seed}: no episode within [{min_len}, {max_len}] steps")


@dataclass
class DatasetSplits:
    train: list[Episode]
    val_seen: list[Episode]
    val_unseen: list[Episode]
    vocab: Vocabulary
    world_params: WorldParams


def build_dataset(seed: int, n_worlds: int, episodes_per_world: int, world_params: WorldParams,
                  unseen_fraction: float = 0.2, val_seen_per_world: int = 1,
                  success_radius: float = 0.75, min_len: int = 30, max_len: int = 80,
                  map_fn=map) -> DatasetSplits:
    """Train / val_seen share worlds (distinct start-goal pairs); val_unseen worlds are disjoint.

    Each world's episodes come from its own seeded stream, so ``map_fn`` may be
    a parallel map without changing the output.
    """
    if n_worlds < 2:
        raise GenerationError("need at least two worlds for disjoint seen/unseen pools")
    root = Rng(seed)
    world_seeds = [int(s) for s in root.integers(0, 2**31 - 1, size=n_worlds)]
    if len(set(world_seeds)) != n_worlds:
        raise GenerationError("world seed collision")
    n_unseen = max(1, int(round(n_worlds * unseen_fraction)))
    train_seeds, unseen_seeds = world_seeds[:-n_unseen], world_seeds[-n_unseen:]
    if set(train_seeds) & set(unseen_seeds):
        raise GenerationError("train and val_unseen world pools overlap")
    vocab = Vocabulary.default(world_params.K)
    jobs_ = [(root.seed, wi, ws, "train", episodes_per_world, val_seen_per_world, world_params,
              success_radius, min_len, max_len) for wi, ws in enumerate(train_seeds)]
    jobs_ += [(root.seed, wi, ws, "val_unseen", episodes_per_world, 0, world_params,
               success_radius, min_len, max_len) for wi, ws in enumerate(unseen_seeds)]
    train, val_seen, val_unseen = [], [], []
    for kind, main, extra in map_fn(_world_episodes, jobs_):
        if kind == "train":
            train += main
            val_seen += extra
        else:
            val_unseen += main
    return DatasetSplits(train, val_seen, val_unseen, vocab, world_params)


def _world_episodes(job):
    seed, wi, ws, kind, n_main, n_extra, world_params, success_radius, min_len, max_len = job
    p = world_params
    w = generate_world(ws, p.size, p.num_rooms, p.K, p.cell_size)
    rng = Rng(seed).spawn(ws)
    vocab = Vocabulary.default(p.K)
    used: set = set()
    main = [sample_episode(w, rng, vocab, f"{kind}_{wi}_{e}", success_radius, min_len, max_len, exclude=used)
            for e in range(n_main)]
    extra = [sample_episode(w, rng, vocab, f"val_seen_{wi}_{e}", success_radius, min_len, max_len,
                            exclude=used) for e in range(n_extra)]
    return kind, main, extra


def split_to_json(episodes: list[Episode], vocab: Vocabulary, world_params: WorldParams) -> dict:
    return {"version": DATASET_VERSION, "vocab": vocab.to_list(),
            "world": {"size": world_params.size, "num_rooms": world_params.num_rooms,
                      "K": world_params.K, "cell_size": world_params.cell_size},
            "episodes": [e.to_json() for e in episodes]}


def save_split(path: str, episodes: list[Episode], vocab: Vocabulary, world_params: WorldParams) -> None:
    with open(path, "w") as f:
        json.dump(split_to_json(episodes, vocab, world_params), f, indent=1, sort_keys=True)
        f.write("\n")


def load_split(path: str) -> tuple[list[Episode], Vocabulary, WorldParams]:
    with open(path) as f:
        d = json.load(f)
    if d.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {d.get('version')!r}")
    wp = WorldParams(**d["world"])
    return [Episode.from_json(e) for e in d["episodes"]], Vocabulary.from_list(d["vocab"]), wp
