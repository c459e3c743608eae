"""Cross-modal interaction: padded multi-head co-attention followed by a gated calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoders import ConfigError
from .numerics import (
    LinearParams,
    Param,
    Tensor,
    add,
    add_bias,
    concat_rows,
    init_linear,
    linear,
    matmul,
    mean_heads,
    mul,
    one_minus,
    scale,
    sigmoid,
    slice_rows,
    softmax_rows,
    split_heads,
    tanh,
    transpose,
    xavier_uniform,
)


@dataclass
class CalibrationParams:
    W_R: Param
    U_R: Param
    b_R: Param
    W_Z: Param
    U_Z: Param
    b_Z: Param

    def params(self) -> list[Param]:
        return [self.W_R, self.U_R, self.b_R, self.W_Z, self.U_Z, self.b_Z]


def init_calibration(rng: np.random.Generator, d: int, name: str, dtype=np.float32) -> CalibrationParams:
    def w(tag):
        return Param(xavier_uniform(rng, d, d, dtype), name=f"{name}.{tag}")

    def zeros(tag):
        return Param(np.zeros(d, dtype=dtype), name=f"{name}.{tag}")

    return CalibrationParams(w("W_R"), w("U_R"), zeros("b_R"), w("W_Z"), w("U_Z"), zeros("b_Z"))


def calibrate(X: Tensor, M: Tensor, p: CalibrationParams) -> Tensor:
    """Gate between the input features and a tanh fusion of input and context.

    R = tanh(X W_R + M U_R + b_R), Z = sigmoid(X W_Z + M U_Z + b_Z),
    output = Z * X + (1 - Z) * R.
    """
    R = tanh(add_bias(add(matmul(X, p.W_R), matmul(M, p.U_R)), p.b_R))
    Z = sigmoid(add_bias(add(matmul(X, p.W_Z), matmul(M, p.U_Z)), p.b_Z))
    return add(mul(Z, X), mul(one_minus(Z), R))


@dataclass
class InterAttentionParams:
    pad_video: Param | None  # K x D, None when K == 0
    pad_query: Param | None
    theta_video: LinearParams  # D -> D, column block h is head h
    theta_query: LinearParams
    calib_video: CalibrationParams
    calib_query: CalibrationParams
    heads: int

    @property
    def pad_size(self) -> int:
        return 0 if self.pad_video is None else self.pad_video.shape[0]

    def params(self, include_pads: bool = True) -> list[Param]:
        out = []
        if include_pads and self.pad_video is not None:
            out += [self.pad_video, self.pad_query]
        out += self.theta_video.params() + self.theta_query.params()
        out += self.calib_video.params() + self.calib_query.params()
        return out


def init_pads(rng: np.random.Generator, K: int, d: int, name: str, dtype=np.float32):
    if K == 0:
        return None, None
    return (Param(rng.normal(0.0, 0.02, size=(K, d)).astype(dtype), name=f"{name}.pad_video"),
            Param(rng.normal(0.0, 0.02, size=(K, d)).astype(dtype), name=f"{name}.pad_query"))


def init_inter(rng: np.random.Generator, d: int, heads: int, K: int, name: str, dtype=np.float32,
               pads=None) -> InterAttentionParams:
    if heads < 1 or d % heads:
        raise ConfigError(f"H={heads} must divide D={d}")
    if K < 0:
        raise ConfigError(f"padding size K must be >= 0, got {K}")
    pad_v, pad_q = pads if pads is not None else init_pads(rng, K, d, name, dtype)
    return InterAttentionParams(
        pad_video=pad_v,
        pad_query=pad_q,
        theta_video=init_linear(rng, d, d, f"{name}.theta_video", dtype),
        theta_query=init_linear(rng, d, d, f"{name}.theta_query", dtype),
        calib_video=init_calibration(rng, d, f"{name}.calib_video", dtype),
        calib_query=init_calibration(rng, d, f"{name}.calib_query", dtype),
        heads=heads,
    )


@dataclass
class AttentionOutput:
    A_V: Tensor  # (T+K) x (N+K)
    A_Q: Tensor  # (N+K) x (T+K)
    M_V: Tensor  # T x D
    M_Q: Tensor  # N x D


def pad_features(V: Tensor, Q: Tensor, p: InterAttentionParams) -> tuple[Tensor, Tensor]:
    if p.pad_video is None:
        return V, Q
    return concat_rows([V, p.pad_video]), concat_rows([Q, p.pad_query])


def coattention_maps(V_pad: Tensor, Q_pad: Tensor, p: InterAttentionParams) -> tuple[Tensor, Tensor]:
    """Head-averaged frame-to-word and word-to-frame attention maps."""
    H = p.heads
    d_head = V_pad.shape[1] // H
    Vh = split_heads(linear(V_pad, p.theta_video), H)
    Qh = split_heads(linear(Q_pad, p.theta_query), H)
    scores = scale(matmul(Vh, transpose(Qh)), 1.0 / math.sqrt(d_head))
    A_V = mean_heads(softmax_rows(scores))
    A_Q = mean_heads(softmax_rows(transpose(scores)))
    return A_V, A_Q


def alignment_features(A_V: Tensor, A_Q: Tensor, V_pad: Tensor, Q_pad: Tensor, T: int, N: int):
    M_V = slice_rows(matmul(A_V, Q_pad), 0, T)
    M_Q = slice_rows(matmul(A_Q, V_pad), 0, N)
    return M_V, M_Q


def inter_interact(V: Tensor, Q: Tensor, p: InterAttentionParams):
    T, N = V.shape[0], Q.shape[0]
    V_pad, Q_pad = pad_features(V, Q, p)
    A_V, A_Q = coattention_maps(V_pad, Q_pad, p)
    M_V, M_Q = alignment_features(A_V, A_Q, V_pad, Q_pad, T, N)
    V_hat = calibrate(V, M_V, p.calib_video)
    Q_hat = calibrate(Q, M_Q, p.calib_query)
    return V_hat, Q_hat, AttentionOutput(A_V, A_Q, M_V, M_Q)
