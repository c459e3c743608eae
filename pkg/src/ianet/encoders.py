"""Video and query encoders: projection, sinusoidal positions, bi-directional GRU."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DimensionError,
    LinearParams,
    Param,
    Tensor,
    _emit,
    _sigmoid,
    add,
    concat_cols,
    init_linear,
    linear,
    register,
    xavier_uniform,
)


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    d_in_video: int
    d_in_query: int
    d_model: int

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError(f"d_model must be a positive even number, got {self.d_model}")

    @property
    def gru_hidden(self) -> int:
        return self.d_model // 2


@dataclass
class EncodedPair:
    V: Tensor
    Q: Tensor


@functools.lru_cache(maxsize=64)
def _pe_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table of shape [length, d]; cached and read-only."""
    if d % 2:
        raise ConfigError(f"positional encoding width must be even, got {d}")
    return _pe_table(length, d)


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GRUParams:
    """Gate blocks are laid out as columns [update | reset | candidate]."""

    W: Param  # d_in x 3h
    U: Param  # h x 3h
    b: Param  # 3h

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    def params(self) -> list[Param]:
        return [self.W, self.U, self.b]


def init_gru(rng: np.random.Generator, d_in: int, hidden: int, name: str, dtype=np.float32) -> GRUParams:
    W = np.concatenate([xavier_uniform(rng, d_in, hidden, dtype) for _ in range(3)], axis=1)
    U = np.concatenate([xavier_uniform(rng, hidden, hidden, dtype) for _ in range(3)], axis=1)
    return GRUParams(Param(W, name=f"{name}.W"), Param(U, name=f"{name}.U"),
                     Param(np.zeros(3 * hidden, dtype=dtype), name=f"{name}.b"))


def gru_scan(x: Tensor, p: GRUParams, reverse: bool = False) -> Tensor:
    """Run a GRU over the rows of ``x`` from a zero state; one output row per step.

    With ``reverse`` the sequence is consumed last row first, and output row t
    is the state after reading rows t..len-1.
    """
    if x.data.ndim != 2 or x.shape[1] != p.W.shape[0]:
        raise DimensionError(f"gru_scan: input {x.shape} vs W {p.W.shape}")
    W, U, b = p.W.data, p.U.data, p.b.data
    h_dim = p.hidden
    length = x.shape[0]
    xw = x.data @ W + b
    U_zr, U_n = U[:, : 2 * h_dim], U[:, 2 * h_dim:]
    order = range(length - 1, -1, -1) if reverse else range(length)
    h = np.zeros(h_dim, dtype=xw.dtype)
    out = np.empty((length, h_dim), dtype=xw.dtype)
    cache = []
    for t in order:
        zr = _sigmoid(xw[t, : 2 * h_dim] + h @ U_zr)
        z, r = zr[:h_dim], zr[h_dim:]
        rh = r * h
        n = np.tanh(xw[t, 2 * h_dim:] + rh @ U_n)
        h_new = (1.0 - z) * h + z * n
        cache.append((t, h, z, r, n, rh))
        out[t] = h_new
        h = h_new
    ctx = {"x": x.data, "W": W, "U": U, "cache": cache, "h": h_dim}
    return _emit("gru_scan", out, (x, p.W, p.U, p.b), ctx)


@register("gru_scan")
def _gru_scan_bw(ctx, g):
    x, W, U, h_dim, cache = ctx["x"], ctx["W"], ctx["U"], ctx["h"], ctx["cache"]
    U_z, U_r, U_n = U[:, :h_dim], U[:, h_dim:2 * h_dim], U[:, 2 * h_dim:]
    length = x.shape[0]
    dxw = np.zeros((length, 3 * h_dim), dtype=g.dtype)
    h_prevs = np.empty((length, h_dim), dtype=g.dtype)
    rhs = np.empty((length, h_dim), dtype=g.dtype)
    carry = np.zeros(h_dim, dtype=g.dtype)
    for t, h_prev, z, r, n, rh in reversed(cache):
        dh = g[t] + carry
        a_n = dh * z * (1.0 - n * n)
        drh = a_n @ U_n.T
        a_z = dh * (n - h_prev) * z * (1.0 - z)
        a_r = drh * h_prev * r * (1.0 - r)
        carry = dh * (1.0 - z) + drh * r + a_z @ U_z.T + a_r @ U_r.T
        dxw[t, :h_dim] = a_z
        dxw[t, h_dim:2 * h_dim] = a_r
        dxw[t, 2 * h_dim:] = a_n
        h_prevs[t] = h_prev
        rhs[t] = rh
    dU = np.concatenate([h_prevs.T @ dxw[:, :2 * h_dim], rhs.T @ dxw[:, 2 * h_dim:]], axis=1)
    return dxw @ W.T, x.T @ dxw, dU, dxw.sum(axis=0)


def bigru_encode(x: Tensor, fwd: GRUParams, bwd: GRUParams) -> Tensor:
    """Concatenate forward and backward GRU states per step."""
    if x.shape[0] < 1:
        raise DimensionError("bigru_encode: empty sequence")
    return concat_cols([gru_scan(x, fwd), gru_scan(x, bwd, reverse=True)])


# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    proj_video: LinearParams
    proj_query: LinearParams
    gru_video_fwd: GRUParams
    gru_video_bwd: GRUParams
    gru_query_fwd: GRUParams
    gru_query_bwd: GRUParams

    def params(self) -> list[Param]:
        out = []
        for attr in ("proj_video", "proj_query", "gru_video_fwd", "gru_video_bwd",
                     "gru_query_fwd", "gru_query_bwd"):
            out += getattr(self, attr).params()
        return out


def init_encoder(rng: np.random.Generator, cfg: EncoderConfig, dtype=np.float32, prefix: str = "encoder") -> EncoderParams:
    D, h = cfg.d_model, cfg.gru_hidden
    return EncoderParams(
        proj_video=init_linear(rng, cfg.d_in_video, D, f"{prefix}.proj_video", dtype),
        proj_query=init_linear(rng, cfg.d_in_query, D, f"{prefix}.proj_query", dtype),
        gru_video_fwd=init_gru(rng, D, h, f"{prefix}.gru_video_fwd", dtype),
        gru_video_bwd=init_gru(rng, D, h, f"{prefix}.gru_video_bwd", dtype),
        gru_query_fwd=init_gru(rng, D, h, f"{prefix}.gru_query_fwd", dtype),
        gru_query_bwd=init_gru(rng, D, h, f"{prefix}.gru_query_bwd", dtype),
    )


def _encode_stream(raw: Tensor, proj: LinearParams, fwd: GRUParams, bwd: GRUParams) -> Tensor:
    x = linear(raw, proj)
    pe = positional_encoding(x.shape[0], x.shape[1])
    x = add(x, Tensor(pe.astype(x.dtype, copy=False)))
    return bigru_encode(x, fwd, bwd)


def encode_pair(video_raw: Tensor, query_raw: Tensor, p: EncoderParams) -> EncodedPair:
    if video_raw.data.ndim != 2 or video_raw.shape[0] < 1 or video_raw.shape[1] != p.proj_video.W.shape[0]:
        raise ConfigError(f"video features {video_raw.shape} do not match encoder width {p.proj_video.W.shape[0]}")
    if query_raw.data.ndim != 2 or query_raw.shape[0] < 1 or query_raw.shape[1] != p.proj_query.W.shape[0]:
        raise ConfigError(f"query features {query_raw.shape} do not match encoder width {p.proj_query.W.shape[0]}")
    V = _encode_stream(video_raw, p.proj_video, p.gru_video_fwd, p.gru_video_bwd)
    Q = _encode_stream(query_raw, p.proj_query, p.gru_query_fwd, p.gru_query_bwd)
    return EncodedPair(V, Q)

