"""The SASRA policy network.

Language encoder -> semantic-map/language transformer (two stages with a
Gaussian positional encoding) and RGB-D/language transformer (two stages with
a learned positional encoding) -> late fusion -> GRU + temporal/language
cross-attention decoder -> action distribution.

Every sub-network accepts a leading time axis so that a teacher-forced
episode can be pushed through in one batched pass; only the GRU is unrolled.
Per-step inference (``policy_step``) runs the same code with a time axis of 1
and is numerically identical to the batched pass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geomap import (CameraIntrinsics, GaussianPositionalEncoding, SemanticMapGrid,
                     WorldAccumulation, build_semantic_map, crop_egocentric, downscale_map)
from .gridsim import NUM_ACTIONS, START_ACTION, Observation
from .layers import (GRUCell, Conv2d, Embedding, Linear, MLP, Module, TransformerBlock, _param)
from .tensor import Rng, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    H: int = 64
    n_h: int = 4
    ff: int = 128
    r: int = 16
    n_layers: int = 1
    vocab_size: int = 32
    K: int = 8
    use_semantic_map: bool = True
    use_hybrid_decoder: bool = True
    obs_size: int = 64
    rgb_channels: int = 32
    rgb_reduced: int = 16
    depth_channels: int = 16
    action_embed: int = 32
    decoder_kv: str = "literal"
    share_gpe: bool = True
    gpe_w: float | None = None
    gpe_b: float = 1.0
    map_cell_size: float = 0.25
    height_threshold: float = 0.2
    map_accumulate: bool = True
    max_depth: float = 10.0
    hfov_deg: float = 90.0
    ff_activation: str = "relu"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.H % self.n_h:
            raise ConfigError(f"H={self.H} is not divisible by n_h={self.n_h}")
        if self.r <= 0 or self.r % 2:
            raise ConfigError(f"map radius r={self.r} must be a positive even number")
        if self.obs_size % 16 or self.obs_size < 16:
            raise ConfigError(f"obs_size={self.obs_size} must be a positive multiple of 16")
        if self.decoder_kv not in ("literal", "language"):
            raise ConfigError(f"decoder_kv must be 'literal' or 'language', got {self.decoder_kv!r}")
        if self.ff_activation != "relu":
            raise ConfigError(f"only relu feed-forward activations are supported, got {self.ff_activation!r}")

    @property
    def map_side(self) -> int:
        """Token grid side after 2x downscaling of the 2r x 2r map."""
        return self.r

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.obs_size, self.obs_size, self.hfov_deg)


@dataclass
class PolicyState:
    rnn_hidden: Tensor
    prev_action: int
    acc: WorldAccumulation | None
    t: int = 0
    history: list = field(default_factory=list)  # decoder query tokens h_k + FPE(k), k < t
    episode_id: object = None


@dataclass
class FusedFeatures:
    s_hat: Tensor   # (T, side*side, H)
    i_hat: Tensor   # (T, Hd*Wd, H)
    fused: Tensor   # (T, 2H)


class RGBDEncoder(Module):
    """Small conv stacks: RGB -> 7x7xC_r, depth -> 4x4xC_d; early fusion to 4x4."""

    def __init__(self, rng: Rng, cfg: ModelConfig):
        s = cfg.obs_size // 16  # first-layer stride brings any input to 16x16
        c = cfg.rgb_channels
        self.rgb1 = Conv2d(rng, 3, c // 2, 4 * s, stride=4 * s)   # -> 16x16 (for obs 64)
        self.rgb2 = Conv2d(rng, c // 2, c, 2, stride=2)            # -> 8x8
        self.rgb3 = Conv2d(rng, c, c, 2, stride=1)                 # -> 7x7
        self.rgb_reduce = Conv2d(rng, c, cfg.rgb_reduced, 1)       # 1x1 channel reduction
        d = cfg.depth_channels
        self.d1 = Conv2d(rng, 1, d, 4 * s, stride=4 * s)           # -> 16x16
        self.d2 = Conv2d(rng, d, d, 2, stride=2)                   # -> 8x8
        self.d3 = Conv2d(rng, d, d, 2, stride=2)                   # -> 4x4
        self.max_depth = cfg.max_depth

    def rgb_features(self, rgb: Tensor) -> Tensor:
        x = T.relu(self.rgb1(rgb))
        x = T.relu(self.rgb2(x))
        return T.relu(self.rgb3(x))

    def depth_features(self, depth: Tensor) -> Tensor:
        x = T.relu(self.d1(depth))
        x = T.relu(self.d2(x))
        return T.relu(self.d3(x))

    def __call__(self, rgb: Tensor, depth: Tensor) -> Tensor:
        """rgb (N, H, W, 3), depth (N, H, W, 1) metres -> i_t (N, 4, 4, C_r' + C_d)."""
        fr = self.rgb_features(rgb)
        fd = self.depth_features(depth * (1.0 / self.max_depth))
        fr = T.adaptive_avg_pool2d(self.rgb_reduce(fr), fd.shape[1], fd.shape[2])
        return T.concat([fr, fd], axis=-1)


class SasraModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = Rng(seed)
        H, nh, ff = cfg.H, cfg.n_h, cfg.ff
        # language
        self.word_embed = Embedding(rng, cfg.vocab_size, H)
        self.lang_blocks = [TransformerBlock(rng, H, nh, ff) for _ in range(cfg.n_layers)]
        # semantic map / language
        side = cfg.map_side
        self.map_proj = Linear(rng, cfg.K + 1, H)
        self.gpe = GaussianPositionalEncoding(rng, side, H, cfg.gpe_w, cfg.gpe_b)
        self.gpe2 = None if cfg.share_gpe else GaussianPositionalEncoding(rng, side, H, cfg.gpe_w, cfg.gpe_b)
        self.map_self = [TransformerBlock(rng, H, nh, ff) for _ in range(cfg.n_layers)]
        self.map_cross = [TransformerBlock(rng, H, nh, ff) for _ in range(cfg.n_layers)]
        # rgbd / language
        self.rgbd = RGBDEncoder(rng, cfg)
        self.rgbd_proj = Linear(rng, cfg.rgb_reduced + cfg.depth_channels, H)
        self.lpe = _param(rng.normal(0.0, 0.02, (16, H)))
        self.rgbd_self = [TransformerBlock(rng, H, nh, ff) for _ in range(cfg.n_layers)]
        self.rgbd_cross = [TransformerBlock(rng, H, nh, ff) for _ in range(cfg.n_layers)]
        # decoder
        self.action_embed = Embedding(rng, NUM_ACTIONS, cfg.action_embed)
        self.gru = GRUCell(rng, 2 * H + cfg.action_embed, H)
        self.dec_temporal = TransformerBlock(rng, H, nh, ff)
        self.dec_cross = TransformerBlock(rng, H, nh, ff)
        self.head = MLP(rng, H, H, NUM_ACTIONS)

    # -- parameter groups ------------------------------------------------------
    def slam_parameters(self) -> list[Tensor]:
        ps = self.map_proj.parameters() + self.gpe.parameters()
        if self.gpe2 is not None:
            ps += self.gpe2.parameters()
        for b in self.map_self + self.map_cross:
            ps += b.parameters()
        return ps

    # -- sub-networks ------------------------------------------------------------
    def encode_language(self, tokens) -> tuple[Tensor, np.ndarray]:
        """tokens (L,) or (B, L) ids -> (v, key mask); pad id 0 is masked out of attention."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size == 0 or ids.shape[-1] == 0:
            raise ValueError("empty instruction")
        if ids.max() >= self.cfg.vocab_size or ids.min() < 0:
            raise ValueError(f"token id out of range for vocab size {self.cfg.vocab_size}")
        mask = ids != 0
        if not mask.any(axis=-1).all():
            raise ValueError("instruction consists only of padding")
        pe = T.sinusoidal_encoding(np.arange(ids.shape[-1]), self.cfg.H)
        x = self.word_embed(ids) + Tensor(pe)
        key_mask = mask[..., None, :]  # (.., 1, L) broadcast over queries
        for blk in self.lang_blocks:
            x = blk(x, mask=key_mask)
        return x, key_mask

    def _gpe_second(self) -> Tensor:
        return (self.gpe2 if self.gpe2 is not None else self.gpe)()

    def slam_t(self, maps: np.ndarray, v: Tensor, v_mask=None) -> Tensor:
        """maps (N, side, side, K+1) binary -> s_hat (N, side*side, H)."""
        side = self.cfg.map_side
        maps = np.asarray(maps)
        if maps.shape[1:] != (side, side, self.cfg.K + 1):
            raise T.ShapeError(f"map shape {maps.shape[1:]} != {(side, side, self.cfg.K + 1)}")
        n = maps.shape[0]
        tokens = self.map_proj(Tensor(maps.reshape(n, side * side, self.cfg.K + 1)))
        x = tokens + self.gpe()
        for blk in self.map_self:
            x = blk(x)
        q = x + self._gpe_second()
        for blk in self.map_cross:
            q = blk(q, context=v, mask=v_mask)
        return q

    def rgbd_encode(self, rgb: np.ndarray, depth: np.ndarray) -> Tensor:
        rgb = Tensor(np.asarray(rgb))
        depth = Tensor(np.asarray(depth)[..., None])
        return self.rgbd(rgb, depth)

    def rgbd_linguistic(self, i_t: Tensor, v: Tensor, v_mask=None) -> Tensor:
        n, hd, wd, c = i_t.shape
        x = self.rgbd_proj(i_t.reshape(n, hd * wd, c)) + self.lpe
        for blk in self.rgbd_self:
            x = blk(x)
        q = x + self.lpe
        for blk in self.rgbd_cross:
            q = blk(q, context=v, mask=v_mask)
        return q

    @staticmethod
    def late_fusion(s_hat: Tensor, i_hat: Tensor) -> Tensor:
        return T.concat([s_hat.mean(axis=-2), i_hat.mean(axis=-2)], axis=-1)

    def features(self, rgb, depth, maps, v, v_mask=None) -> FusedFeatures:
        i_t = self.rgbd_encode(rgb, depth)
        i_hat = self.rgbd_linguistic(i_t, v, v_mask)
        n = i_hat.shape[0]
        if self.cfg.use_semantic_map:
            s_hat = self.slam_t(maps, v, v_mask)
        else:
            s_hat = Tensor(np.zeros((n, 1, self.cfg.H)))
        return FusedFeatures(s_hat, i_hat, self.late_fusion(s_hat, i_hat))

    def decoder_head(self, h_seq: Tensor, t0: int, v: Tensor, v_mask=None,
                     history: list | None = None) -> tuple[Tensor, Tensor]:
        """h_seq (N, H) hidden states for time steps t0..t0+N-1 -> (logits (N, 4), query tokens)."""
        n = h_seq.shape[0]
        if not self.cfg.use_hybrid_decoder:
            return self.head(h_seq), None
        fpe = Tensor(T.sinusoidal_encoding(np.arange(t0, t0 + n), self.cfg.H))
        x = h_seq + fpe  # (N, H)
        if self.cfg.decoder_kv == "literal":
            # hidden states act as query and key: causal attention along time,
            # then the instruction supplies the values through cross-attention
            past = list(history or [])
            keys = T.concat(past + [x], axis=0) if past else x
            total = keys.shape[0]
            qpos = np.arange(total - n, total)[:, None]
            causal = np.arange(total)[None, :] <= qpos
            y = self.dec_temporal(x[None], context=keys[None], mask=causal[None])[0]
        else:
            y = x
        out = self.dec_cross(y[:, None, :], context=v, mask=v_mask)[:, 0, :]
        return self.head(out), x

    def decode_sequence(self, fused: Tensor, prev_actions, v: Tensor, v_mask=None,
                        h0: Tensor | None = None, t0: int = 0, history: list | None = None):
        """Unroll the GRU over fused (N, 2H) features; returns (probs (N, 4), h_last, query tokens)."""
        n = fused.shape[0]
        a_emb = self.action_embed(np.asarray(prev_actions, dtype=np.int64))
        h = h0 if h0 is not None else Tensor(np.zeros(self.cfg.H))
        x_in = T.concat([fused, a_emb], axis=-1)
        gx = self.gru.input_gates(x_in)
        hs = []
        for t in range(n):
            h = self.gru.cell(gx[t], h)
            hs.append(h)
        h_seq = T.stack(hs, axis=0)
        logits, q = self.decoder_head(h_seq, t0, v, v_mask, history)
        return T.softmax(logits, axis=-1), h, q

    # -- whole-episode and per-step entry points ---------------------------------
    def forward_episode(self, rgb, depth, maps, prev_actions, tokens) -> Tensor:
        """Teacher-forced pass over a full trace -> action probabilities (T, 4)."""
        v, m = self.encode_language(tokens)
        feats = self.features(rgb, depth, maps, v, m)
        p, _, _ = self.decode_sequence(feats.fused, prev_actions, v, m)
        return p

    def initial_state(self, acc: WorldAccumulation | None = None, episode_id=None) -> PolicyState:
        return PolicyState(Tensor(np.zeros(self.cfg.H)), int(START_ACTION), acc, 0, [], episode_id)

    def new_accumulation(self, world_extent: float, episode_id=None) -> WorldAccumulation:
        return new_accumulation(self.cfg, world_extent, episode_id)

    def observe_map(self, obs: Observation, acc: WorldAccumulation) -> np.ndarray:
        return observe_map(self.cfg, obs, acc)

    def policy_step(self, obs: Observation, v: Tensor, v_mask, state: PolicyState,
                    episode_id=None, map_override: np.ndarray | None = None):
        """One closed-loop step -> (p_t (4,), new state).  Caller enforces max_steps."""
        if episode_id is not None and state.episode_id is not None and episode_id != state.episode_id:
            raise ValueError(f"policy state belongs to episode {state.episode_id!r}, not {episode_id!r}")
        if state.acc is not None and state.acc.episode_id != state.episode_id:
            raise ValueError("accumulation grid does not belong to this policy state")
        if map_override is not None:
            m = map_override
        elif self.cfg.use_semantic_map:
            m = self.observe_map(obs, state.acc)
        else:
            m = None
        maps = None if m is None else m[None]
        feats = self.features(obs.rgb[None], obs.depth[None], maps, v, v_mask)
        p, h, q = self.decode_sequence(feats.fused, [state.prev_action], v, v_mask,
                                       h0=state.rnn_hidden, t0=state.t, history=state.history)
        hist = state.history + [q] if q is not None and self.cfg.decoder_kv == "literal" else state.history
        new = PolicyState(h, state.prev_action, state.acc, state.t + 1, hist, state.episode_id)
        return p[0], new


def new_accumulation(cfg: ModelConfig, world_extent: float, episode_id=None) -> WorldAccumulation:
    n = int(np.ceil(world_extent / cfg.map_cell_size))
    return WorldAccumulation(n, n, cfg.K + 1, cfg.map_cell_size, episode_id=episode_id)


def observe_map(cfg: ModelConfig, obs: Observation, acc: WorldAccumulation) -> np.ndarray:
    """Update the accumulation with one frame and return the downscaled egocentric map."""
    if not cfg.map_accumulate:
        acc.data[:] = 0
    m = build_semantic_map(acc, obs.depth, obs.semantic, obs.pose, cfg.intrinsics(), cfg.r,
                           cfg.height_threshold)
    return downscale_map(m).data


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))
