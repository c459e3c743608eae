"""Within-modality interaction: multi-head self-attention plus the same calibration gate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoders import ConfigError
from .inter_attention import CalibrationParams, calibrate, init_calibration
from .numerics import (
    LinearParams,
    Param,
    Tensor,
    init_linear,
    linear,
    matmul,
    mean_heads,
    scale,
    softmax_rows,
    split_heads,
    transpose,
)


@dataclass
class IntraAttentionParams:
    theta_video: LinearParams
    theta_query: LinearParams
    calib_video: CalibrationParams
    calib_query: CalibrationParams
    heads: int

    def params(self) -> list[Param]:
        return (self.theta_video.params() + self.theta_query.params()
                + self.calib_video.params() + self.calib_query.params())


def init_intra(rng: np.random.Generator, d: int, heads: int, name: str, dtype=np.float32) -> IntraAttentionParams:
    if heads < 1 or d % heads:
        raise ConfigError(f"H={heads} must divide D={d}")
    return IntraAttentionParams(
        theta_video=init_linear(rng, d, d, f"{name}.theta_video", dtype),
        theta_query=init_linear(rng, d, d, f"{name}.theta_query", dtype),
        calib_video=init_calibration(rng, d, f"{name}.calib_video", dtype),
        calib_query=init_calibration(rng, d, f"{name}.calib_query", dtype),
        heads=heads,
    )


def self_attend(X: Tensor, theta: LinearParams, heads: int) -> tuple[Tensor, Tensor]:
    """Return the head-averaged m x m self-attention map and the attended features."""
    d_head = X.shape[1] // heads
    Xh = split_heads(linear(X, theta), heads)
    A = mean_heads(softmax_rows(scale(matmul(Xh, transpose(Xh)), 1.0 / math.sqrt(d_head))))
    return A, matmul(A, X)


def intra_interact(V: Tensor, Q: Tensor, p: IntraAttentionParams):
    """Returns (V', Q', A_self_video, A_self_query)."""
    A_v, M_v = self_attend(V, p.theta_video, p.heads)
    A_q, M_q = self_attend(Q, p.theta_query, p.heads)
    return calibrate(V, M_v, p.calib_video), calibrate(Q, M_q, p.calib_query), A_v, A_q
