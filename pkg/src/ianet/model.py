"""The full network: encoders, L stacked interaction blocks, localizer head, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import ConfigError, EncoderConfig, EncoderParams, encode_pair, init_encoder
from .inter_attention import AttentionOutput, InterAttentionParams, init_inter, init_pads, inter_interact
from .intra_attention import IntraAttentionParams, init_intra, intra_interact
from .localizer import AnchorScores, HeadParams, fuse_features, generate_anchors, init_head, score_anchors
from .numerics import Param, Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_in_video: int = 32
    d_in_query: int = 24
    D: int = 64
    H: int = 4
    K: int = 3
    L: int = 3
    widths: tuple[int, ...] = (4, 6, 8, 10, 12, 16)
    stride: float = 0.25
    lam: float = 0.45
    alpha: float = 0.005
    lr: float = 4e-4
    seed: int = 0
    share_pads: bool = False
    nms_threshold: float = 0.5
    top_n: int = 5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.D <= 0 or self.D % 2:
            raise ConfigError(f"D must be a positive even number, got {self.D}")
        if self.H < 1 or self.D % self.H:
            raise ConfigError(f"H={self.H} must divide D={self.D}")
        if self.K < 0:
            raise ConfigError(f"K must be >= 0, got {self.K}")
        if self.L < 0:
            raise ConfigError(f"L must be >= 0, got {self.L}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"anchor widths must be positive, got {self.widths}")
        if not self.stride > 0:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if not 0 <= self.lam < 1:
            raise ConfigError(f"lam must lie in [0, 1), got {self.lam}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d_in_video, self.d_in_query, self.D)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class BlockParams:
    inter: InterAttentionParams
    intra: IntraAttentionParams

    def params(self, include_pads: bool = True) -> list[Param]:
        return self.inter.params(include_pads) + self.intra.params()


@dataclass
class BlockDump:
    inter: AttentionOutput
    intra_video: Tensor  # T x T
    intra_query: Tensor  # N x N


@dataclass
class TrunkOutput:
    V: Tensor
    Q: Tensor
    dumps: list[BlockDump] = field(default_factory=list)


@dataclass
class ForwardOutput:
    trunk: TrunkOutput
    scores: AnchorScores
    T: int


class IANet:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        self.encoder: EncoderParams = init_encoder(rng, config.encoder, self.dtype)
        shared = init_pads(rng, config.K, config.D, "shared", self.dtype) if config.share_pads else None
        self.blocks: list[BlockParams] = []
        for i in range(config.L):
            name = f"block{i}"
            self.blocks.append(BlockParams(
                init_inter(rng, config.D, config.H, config.K, f"{name}.inter", self.dtype, pads=shared),
                init_intra(rng, config.D, config.H, f"{name}.intra", self.dtype),
            ))
        self.head: HeadParams = init_head(rng, config.D, len(config.widths), "head", self.dtype)

    def params(self) -> list[Param]:
        out = self.encoder.params()
        for i, b in enumerate(self.blocks):
            out += b.params(include_pads=not self.config.share_pads or i == 0)
        return out + self.head.params()

    def named_params(self) -> list[tuple[str, Param]]:
        return [(p.name, p) for p in self.params()]

    def astype(self, dtype) -> "IANet":
        self.dtype = np.dtype(dtype)
        for p in self.params():
            p.astype(self.dtype)
        return self

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def anchors(self, T: int):
        return generate_anchors(T, self.config.widths, self.config.stride)

    def trunk(self, video: np.ndarray, query: np.ndarray, inspect: bool = False) -> TrunkOutput:
        return trunk_forward(self, video, query, inspect)

    def forward(self, video: np.ndarray, query: np.ndarray, inspect: bool = False) -> ForwardOutput:
        trunk = trunk_forward(self, video, query, inspect)
        T = trunk.V.shape[0]
        F = fuse_features(trunk.V, trunk.Q)
        return ForwardOutput(trunk, score_anchors(F, self.anchors(T), self.head), T)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; must agree with ``IANet.num_params``."""
    D, h, W = cfg.D, cfg.D // 2, len(cfg.widths)
    encoder = (cfg.d_in_video * D + D) + (cfg.d_in_query * D + D) + 4 * (D * 3 * h + h * 3 * h + 3 * h)
    calib = 4 * D * D + 2 * D
    theta = D * D + D
    pads = 2 * cfg.K * D
    inter = 2 * theta + 2 * calib
    intra = 2 * theta + 2 * calib
    pad_total = (pads if cfg.L else 0) if cfg.share_pads else cfg.L * pads
    head = (2 * D * D + D) + (D * 3 * W + 3 * W)
    return encoder + cfg.L * (inter + intra) + pad_total + head


def iib_forward(V: Tensor, Q: Tensor, block: BlockParams):
    """One interaction block: cross-modal step, then within-modal step."""
    V1, Q1, att = inter_interact(V, Q, block.inter)
    V2, Q2, A_v, A_q = intra_interact(V1, Q1, block.intra)
    return V2, Q2, BlockDump(att, A_v, A_q)


def trunk_forward(net: IANet, video: np.ndarray, query: np.ndarray, inspect: bool = False) -> TrunkOutput:
    pair = encode_pair(Tensor(np.asarray(video, dtype=net.dtype)), Tensor(np.asarray(query, dtype=net.dtype)),
                       net.encoder)
    V, Q = pair.V, pair.Q
    dumps = []
    for block in net.blocks:
        V, Q, dump = iib_forward(V, Q, block)
        if inspect:
            dumps.append(dump)
    return TrunkOutput(V, Q, dumps)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"IANC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: IANet) -> None:
    blob = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, p in net.named_params():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
            fh.write(struct.pack("<Q", p.data.size))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, expected: ModelConfig | None = None, dtype=np.float32) -> IANet:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return _parse_checkpoint(path, buf, expected, dtype)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(path, buf: bytes, expected: ModelConfig | None, dtype) -> IANet:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack_from("<I", buf, 8)
    cfg_dict = json.loads(buf[12:12 + n])
    cfg = ModelConfig.from_dict(cfg_dict)
    if expected is not None and expected != cfg:
        diff = {k: (v, cfg_dict[k]) for k, v in expected.to_dict().items() if cfg_dict.get(k) != v}
        raise ConfigError(f"checkpoint config differs from the requested one: {diff}")
    net = IANet(cfg, dtype=np.float32)
    params = dict(net.named_params())
    off = 12 + n
    seen = set()
    while off < len(buf):
        (ln,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4: off + 4 + ln].decode()
        off += 4 + ln
        (ndim,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
        off += 4 + 4 * ndim
        (count,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if off + 4 * count > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name} at byte {off}")
        if name not in params or params[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: unexpected parameter {name} {tuple(shape)}")
        params[name].data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    if np.dtype(dtype) != np.float32:
        net.astype(dtype)
    return net
