"""The grasp detection network.

A three-level feature pyramid over the TSDF, channel-attention blocks that let
the coarsest level query each finer one, mixture-of-softmax self-attention on the
coarsest level, and an upsampling decoder with per-voxel quality, rotation and
width heads.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 40
    channels: tuple = (32, 64, 128)
    parts: int = 2
    mlp_ratio: int = 4
    max_width: float = 0.08
    seed: int = 0
    dtype: str = "float64"
    attention_block: int = 512

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        problems = []
        if len(self.channels) != 3:
            problems.append("channels must list three pyramid widths")
        if self.resolution % 4:
            problems.append("resolution must be divisible by 4")
        c3 = self.channels[-1] if self.channels else 0
        if self.parts < 1 or (c3 and c3 % self.parts):
            problems.append(f"parts ({self.parts}) must divide the top channel count ({c3})")
        for c in self.channels:
            if c % self.mlp_ratio:
                problems.append(f"mlp ratio {self.mlp_ratio} must divide channel count {c}")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if problems:
            raise ConfigError("invalid model config", problems)

    @classmethod
    def toy(cls, resolution: int = 32, **kw) -> ModelConfig:
        return cls(resolution=resolution, channels=(8, 16, 32), **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        return cls(**json.loads(text))


def _he_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig) -> ParamStore:
    """He-uniform weights and zero biases, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore(np.dtype(cfg.dtype))
    c1, c2, c3 = cfg.channels

    def conv(name, cout, cin, k):
        store.add(name + ".w", _he_uniform(rng, (cout, cin, k, k, k)))
        store.add(name + ".b", np.zeros(cout))

    def lin(name, cout, cin, bias=True):
        store.add(name + ".w", _he_uniform(rng, (cout, cin)))
        if bias:
            store.add(name + ".b", np.zeros(cout))

    # backbone
    conv("enc1", c1, 1, 3)
    conv("enc2", c2, c1, 3)
    conv("enc3", c3, c2, 3)
    conv("enc3b", c3, c3, 3)
    conv("lat1", c1, c1, 1)
    conv("lat2", c2, c2, 1)
    conv("lat3", c3, c3, 1)
    conv("td3", c2, c3, 1)
    conv("td2", c1, c2, 1)
    # one channel-attention block per finer level
    for lvl, cl in ((1, c1), (2, c2)):
        p = f"it{lvl}"
        lin(p + ".mlp1", cl // cfg.mlp_ratio, cl)
        lin(p + ".mlp2", c3, cl // cfg.mlp_ratio)
        conv(p + ".q", c3, c3, 3)
        conv(p + ".gate", c3, c3, 3)
        cin = cl
        for s in range(3 - lvl):
            conv(f"{p}.down{s}", c3, cin, 3)
            cin = c3
        conv(p + ".refine", c3, c3, 3)
    # self-attention on the top level
    conv("et.qk", c3, c3, 1)
    conv("et.v", c3, c3, 1)
    lin("et.mix", cfg.parts, c3, bias=False)
    conv("et.out", c3, c3, 1)
    # fusion and decoder
    conv("fuse", c3, 4 * c3, 3)
    conv("dec2", c2, c3, 3)
    conv("skip2", c2, c2, 1)
    conv("dec1", c1, c2, 3)
    conv("skip1", c1, c1, 1)
    conv("head", 6, c1, 1)
    return store


def _conv(p, name, x, stride=1):
    return T.conv3(x, p[name + ".w"], p[name + ".b"], stride)


@dataclass
class Pyramid:
    levels: list  # Tensors (c_l, N / 2^(l-1), ...)


def fpn_forward(p: ParamStore, x: Tensor) -> Pyramid:
    """Bottom-up encoder and top-down merge; returns the three lateral-merged levels."""
    if x.shape[0] != 1 or x.data.ndim != 4:
        raise ConfigError("backbone input must be a single-channel (1, N, N, N) volume")
    if x.shape[1] % 4:
        raise ConfigError("volume extent must be divisible by 4")
    e1 = T.relu(_conv(p, "enc1", x))
    e2 = T.relu(_conv(p, "enc2", e1, stride=2))
    e3 = T.relu(_conv(p, "enc3", e2, stride=2))
    e3 = T.relu(_conv(p, "enc3b", e3))
    p3 = _conv(p, "lat3", e3)
    p2 = T.add(_conv(p, "lat2", e2), T.upsample_x2(_conv(p, "td3", p3)))
    p1 = T.add(_conv(p, "lat1", e1), T.upsample_x2(_conv(p, "td2", p2)))
    return Pyramid([p1, p2, p3])


def channel_gate(p: ParamStore, prefix: str, k: Tensor) -> Tensor:
    """Per-channel gate in (0, 1) from the pooled low-level features."""
    pooled = T.global_avg_pool(k)
    return T.mlp2(pooled, p[prefix + ".mlp1.w"], p[prefix + ".mlp1.b"], p[prefix + ".mlp2.w"], p[prefix + ".mlp2.b"])


def insight_transformer(p: ParamStore, prefix: str, q_high: Tensor, kv_low: Tensor) -> Tensor:
    """High-level query gated by low-level channel statistics, plus downsampled low-level values."""
    ratio = kv_low.shape[1] // q_high.shape[1]
    if ratio < 1 or kv_low.shape[1] != ratio * q_high.shape[1] or ratio & (ratio - 1):
        raise ConfigError("low-level extent must be a power-of-two multiple of the query extent")
    gate = channel_gate(p, prefix, kv_low)
    gq = T.mul(_conv(p, prefix + ".q", q_high), T.reshape(gate, (-1, 1, 1, 1)))
    gq = _conv(p, prefix + ".gate", gq)
    v = kv_low
    steps = int(np.log2(ratio))
    for s in range(steps):
        v = _conv(p, f"{prefix}.down{s}", v, stride=2)
        if s < steps - 1:
            v = T.relu(v)
    return T.relu(_conv(p, prefix + ".refine", T.add(gq, v)))


def mixture_weights(p: ParamStore, q_vol: Tensor) -> Tensor:
    logits = T.linear(T.global_avg_pool(q_vol), p["et.mix.w"])
    return T.reshape(T.softmax_rows(T.reshape(logits, (1, -1))), (-1,))


def empower_transformer(p: ParamStore, x_high: Tensor, parts: int, block: int = 512) -> Tensor:
    """Self-attention with one shared query/key projection and a mixture of softmax maps."""
    c = x_high.shape[0]
    if c % parts:
        raise ConfigError(f"{parts} parts do not divide {c} channels")
    spatial = x_high.shape[1:]
    qk = _conv(p, "et.qk", x_high)
    v = _conv(p, "et.v", x_high)
    pi = mixture_weights(p, qk)
    m = int(np.prod(spatial))
    att = T.mixture_attention(T.reshape(qk, (c, m)), T.reshape(v, (c, m)), pi, parts, block)
    return T.add(_conv(p, "et.out", T.reshape(att, (c,) + spatial)), x_high)


def fuse_top(p: ParamStore, pyr: Pyramid, cfg: ModelConfig) -> Tensor:
    p1, p2, p3 = pyr.levels
    x1 = insight_transformer(p, "it1", p3, p1)
    x2 = insight_transformer(p, "it2", p3, p2)
    xe = empower_transformer(p, p3, cfg.parts, cfg.attention_block)
    return T.relu(_conv(p, "fuse", T.concat([x1, x2, xe, p3])))


def _decode_mid(p: ParamStore, top: Tensor, pyr: Pyramid) -> Tensor:
    x = T.relu(_conv(p, "dec2", T.upsample_x2(top)))
    return T.add(x, _conv(p, "skip2", pyr.levels[1]))


@dataclass
class HeadOutput:
    quality_logit: Tensor  # (...,) pre-sigmoid
    rotation: Tensor  # (4, ...) unit quaternions (w, x, y, z)
    width: Tensor  # (...,) meters, unclipped


def _heads(raw: Tensor, max_width: float) -> HeadOutput:
    q = T.reshape(T.slice_channels(raw, 0, 1), raw.shape[1:])
    r = T.normalize_quat(T.slice_channels(raw, 1, 5))
    # linear so the width loss never saturates; clipped only when predictions are exported
    half = np.asarray(0.5, dtype=raw.dtype)
    w = T.scale(T.add(T.reshape(T.slice_channels(raw, 5, 6), raw.shape[1:]), half), max_width)
    return HeadOutput(q, r, w)


def forward(p: ParamStore, tsdf, cfg: ModelConfig) -> tuple:
    """Dense prediction over the whole grid.  Returns ``(HeadOutput, Pyramid)``; heads are ``(N, N, N)``."""
    x = _input(tsdf, cfg)
    pyr = fpn_forward(p, x)
    mid = _decode_mid(p, fuse_top(p, pyr, cfg), pyr)
    x = T.relu(_conv(p, "dec1", T.upsample_x2(mid)))
    x = T.add(x, _conv(p, "skip1", pyr.levels[0]))
    return _heads(_conv(p, "head", x), cfg.max_width), pyr


def forward_sites(p: ParamStore, tsdf, cfg: ModelConfig, sites) -> tuple:
    """Predictions only at voxel ``sites`` ``(P, 3)``; heads are ``(P,)`` / ``(4, P)``.

    The last decoder stage and the heads are evaluated at those voxels alone;
    the values equal the dense forward pass gathered at the sites.
    """
    sites = np.asarray(sites, dtype=np.int64)
    x = _input(tsdf, cfg)
    pyr = fpn_forward(p, x)
    mid = _decode_mid(p, fuse_top(p, pyr, cfg), pyr)
    h = T.relu(T.conv3_at(T.upsample_x2(mid), p["dec1.w"], p["dec1.b"], sites))
    h = T.add(h, T.conv1_cols(T.gather_sites(pyr.levels[0], sites), p["skip1.w"], p["skip1.b"]))
    raw = T.conv1_cols(h, p["head.w"], p["head.b"])
    return _heads(raw, cfg.max_width), pyr


def _input(tsdf, cfg: ModelConfig) -> Tensor:
    vals = tsdf.values if hasattr(tsdf, "values") else tsdf
    arr = np.asarray(vals, dtype=np.dtype(cfg.dtype))
    if arr.ndim != 3 or arr.shape != (cfg.resolution,) * 3:
        raise ShapeError(f"expected a {cfg.resolution}^3 volume, got {arr.shape}")
    return Tensor(arr[None])


@dataclass
class GraspPrediction:
    quality: np.ndarray  # (N, N, N) in [0, 1]
    rotation: np.ndarray  # (4, N, N, N) unit quaternions
    width: np.ndarray  # (N, N, N) meters
    voxel_size: float = 0.01
    extra: dict = field(default_factory=dict)

    def channels(self) -> np.ndarray:
        return np.concatenate([self.quality[None], self.rotation, self.width[None]]).astype(np.float32)


def predict(p: ParamStore, tsdf, cfg: ModelConfig, voxel_size: float | None = None) -> GraspPrediction:
    heads, _ = forward(p, tsdf, cfg)
    q = T._sigmoid(heads.quality_logit.data)
    vs = voxel_size if voxel_size is not None else getattr(tsdf, "voxel_size", 0.4 / cfg.resolution)
    width = np.clip(heads.width.data, 0.0, cfg.max_width)
    return GraspPrediction(q, heads.rotation.data, width, vs)
