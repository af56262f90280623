"""Semantic map construction from depth + semantic frames, and the Gaussian map encoding.

Frames: the camera frame is x right, y down, z forward.  The world frame is
planar (x, y) with heading measured counterclockwise from +x, plus a vertical
coordinate measured up from the floor.  Egocentric maps put the agent at cell
(r, r) of a 2r x 2r raster with its heading pointing to row 0.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Module, _param
from .tensor import Rng, Tensor

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 90.0) -> "CameraIntrinsics":
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0 - 0.5, height / 2.0 - 0.5, width, height)


def normalize_heading(h: float) -> float:
    h = math.fmod(h, TWO_PI)
    if h < 0:
        h += TWO_PI
    # fmod can land exactly on 2*pi after the shift for tiny negatives
    return 0.0 if h >= TWO_PI else h


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0
    camera_height: float = 1.25

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_heading(float(self.heading)))

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.heading, self.camera_height]


@dataclass
class SemanticMapGrid:
    """Binary egocentric raster, shape (side, side, K+1); channel 0 is occupancy."""

    data: np.ndarray
    cell_size: float

    @property
    def side(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def check(self) -> None:
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("semantic map must be binary")
        if (self.data[..., 1:].any(axis=-1) & (self.data[..., 0] == 0)).any():
            raise ValueError("semantic bit set on a cell without occupancy")


# ---------------------------------------------------------------------------
# point cloud
# ---------------------------------------------------------------------------

def unproject_depth(depth: np.ndarray, intr: CameraIntrinsics):
    """Lift valid depth pixels to camera-frame points.

    Returns ``(points, pixel_index)``: points is (N, 3) and pixel_index holds
    the flat row-major index of each point's source pixel.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics "
                         f"{(intr.height, intr.width)}")
    flat = depth.ravel()
    idx = np.flatnonzero(np.isfinite(flat) & (flat > 0))
    d = flat[idx]
    v, u = np.divmod(idx, intr.width)
    pts = np.stack([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d], axis=1)
    return pts, idx


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points to (u, v) pixel coordinates."""
    z = points[:, 2]
    return np.stack([points[:, 0] * intr.fx / z + intr.cx, points[:, 1] * intr.fy / z + intr.cy],
                    axis=1)


def transform_to_world(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Camera-frame (x right, y down, z forward) -> world (x, y, up)."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.stack([pose.x + z * c + x * s, pose.y + z * s - x * c, pose.camera_height - y], axis=1)


def transform_to_camera(points: np.ndarray, pose: Pose) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    dx, dy = points[:, 0] - pose.x, points[:, 1] - pose.y
    return np.stack([dx * s - dy * c, pose.camera_height - points[:, 2], dx * c + dy * s], axis=1)


# ---------------------------------------------------------------------------
# world-frame accumulation
# ---------------------------------------------------------------------------

@dataclass
class WorldAccumulation:
    """Persistent per-episode world-frame grid indexed [ix, iy, channel]."""

    nx: int
    ny: int
    channels: int
    cell_size: float = 0.25
    origin: tuple[float, float] = (0.0, 0.0)
    episode_id: object = None
    data: np.ndarray = field(init=False)
    free: np.ndarray = field(init=False)
    dropped: int = 0

    def __post_init__(self):
        self.data = np.zeros((self.nx, self.ny, self.channels), dtype=np.uint8)
        self.free = np.zeros((self.nx, self.ny), dtype=bool)

    def popcount(self) -> int:
        return int(self.data.sum())

    def cell_of(self, x, y):
        ix = np.floor(np.round((np.asarray(x) - self.origin[0]) / self.cell_size, 9)).astype(np.int64)
        iy = np.floor(np.round((np.asarray(y) - self.origin[1]) / self.cell_size, 9)).astype(np.int64)
        return ix, iy


def update_world_accumulation(acc: WorldAccumulation, points: np.ndarray, labels: np.ndarray,
                              height_threshold: float = 0.2) -> WorldAccumulation:
    """Rasterize world points; points at/above the threshold become obstacles with their class."""
    if len(points) == 0:
        return acc
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= acc.channels:
        raise ValueError(f"semantic label {labels.max()} exceeds {acc.channels - 1} classes")
    ix, iy = acc.cell_of(points[:, 0], points[:, 1])
    inside = (ix >= 0) & (ix < acc.nx) & (iy >= 0) & (iy < acc.ny)
    acc.dropped += int((~inside).sum())
    ix, iy, h, lab = ix[inside], iy[inside], points[inside, 2], labels[inside]
    obst = h >= height_threshold
    acc.data[ix[obst], iy[obst], 0] = 1
    sem = obst & (lab > 0)
    acc.data[ix[sem], iy[sem], lab[sem]] = 1
    acc.free[ix[~obst], iy[~obst]] = True
    return acc


def egocentric_offsets(r: int, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """(forward, right) metric offsets of every cell centre of a 2r x 2r map."""
    idx = np.arange(2 * r)
    fwd = (r - idx)[:, None] * cell_size * np.ones((1, 2 * r))
    right = (idx - r)[None, :] * cell_size * np.ones((2 * r, 1))
    return fwd, right


def crop_egocentric(acc: WorldAccumulation, pose: Pose, r: int) -> SemanticMapGrid:
    """Rotate the world grid into the agent frame and sample a 2r x 2r window (nearest cell)."""
    if r <= 0:
        raise ValueError("map radius must be positive")
    fwd, right = egocentric_offsets(r, acc.cell_size)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    wx = pose.x + fwd * c + right * s
    wy = pose.y + fwd * s - right * c
    ix, iy = acc.cell_of(wx, wy)
    inside = (ix >= 0) & (ix < acc.nx) & (iy >= 0) & (iy < acc.ny)
    out = np.zeros((2 * r, 2 * r, acc.channels), dtype=np.uint8)
    out[inside] = acc.data[ix[inside], iy[inside]]
    return SemanticMapGrid(out, acc.cell_size)


def downscale_map(m: SemanticMapGrid, factor: int = 2) -> SemanticMapGrid:
    """Per-channel max-pool by ``factor``."""
    side = m.side
    if side % factor:
        raise ValueError(f"map side {side} not divisible by {factor}")
    n = side // factor
    pooled = m.data.reshape(n, factor, n, factor, m.channels).max(axis=(1, 3))
    return SemanticMapGrid(pooled, m.cell_size * factor)


def build_semantic_map(acc: WorldAccumulation, depth: np.ndarray, semantic: np.ndarray,
                       pose: Pose, intr: CameraIntrinsics, r: int,
                       height_threshold: float = 0.2) -> SemanticMapGrid:
    """unproject -> world -> accumulate -> egocentric crop (full 2r resolution)."""
    pts, idx = unproject_depth(depth, intr)
    world = transform_to_world(pts, pose)
    update_world_accumulation(acc, world, np.asarray(semantic).ravel()[idx], height_threshold)
    return crop_egocentric(acc, pose, r)


# ---------------------------------------------------------------------------
# Gaussian positional encoding
# ---------------------------------------------------------------------------

def gaussian_kernel(side: int, w: float, b: float = 1.0) -> np.ndarray:
    """Gaussian of squared distance from the agent cell (side//2, side//2)."""
    if w <= 0:
        raise ValueError(f"Gaussian scale w must be positive, got {w}")
    c = side // 2
    i = np.arange(side) - c
    d2 = i[:, None] ** 2 + i[None, :] ** 2
    return (b * b / math.sqrt(2.0 * math.pi * w * w)) * np.exp(-d2 / (2.0 * w * w))


class GaussianPositionalEncoding(Module):
    """Kernel value per cell mapped to width H by a learned scalar->H linear map."""

    def __init__(self, rng: Rng, side: int, width: int, w: float | None = None, b: float = 1.0):
        self.side = side
        self.w = float(w) if w is not None else side / 2.0
        self.b = float(b)
        self.kernel = gaussian_kernel(side, self.w, self.b)
        # scalar input: fan_in = 1
        self.embed_w = _param(rng.uniform(-1.0, 1.0, (1, width)))
        self.embed_b = _param(np.zeros(width))

    def __call__(self) -> Tensor:
        f = Tensor(self.kernel.reshape(-1, 1))
        return T.linear(f, self.embed_w, self.embed_b)


def gaussian_positional_encoding(r: int, w: float, b: float, H: int, rng: Rng | None = None) -> Tensor:
    """Stand-alone GPE matrix of shape (r, r, H) with a freshly initialized embedding."""
    gpe = GaussianPositionalEncoding(rng or Rng(0), r, H, w, b)
    return gpe().reshape(r, r, H)


# ---------------------------------------------------------------------------
# debug dumps
# ---------------------------------------------------------------------------

def write_pgm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        lo, hi = float(img.min()), float(img.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        img = np.round((img - lo) * scale).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    payload = parts[3]
    if len(payload) != w * h:
        raise ValueError(f"{path}: payload {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def dump_map_pgm(m: SemanticMapGrid, out_dir: str, episode, step: int) -> list[str]:
    paths = []
    for ch in range(m.channels):
        p = os.path.join(out_dir, f"map_{episode}_{step}_{ch}.pgm")
        write_pgm(p, (m.data[..., ch] * 255).astype(np.uint8))
        paths.append(p)
    return paths
