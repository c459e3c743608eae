"""Segment localizer: cosine fusion, multi-width anchors, scoring head, IoU and NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import (
    LinearParams,
    Param,
    Tensor,
    concat_cols,
    gather,
    init_linear,
    linear,
    matmul,
    normalize_rows,
    sigmoid,
    softmax_rows,
    tanh,
    transpose,
)


@dataclass(frozen=True)
class Anchor:
    t_start: int  # hosting clip row
    width_index: int
    width: int
    start: int
    end: int


def generate_anchors(T: int, widths: Sequence[int], stride: float) -> list[Anchor]:
    """Start-aligned windows of every width, clipped to [0, T] and de-duplicated.

    Placements for width w step by ``max(1, round(w * stride))`` from 0 while the
    start is inside the video.  Order is by width (as listed), then start.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not widths:
        raise ValueError("anchor width list is empty")
    seen = set()
    out = []
    for wi, w in enumerate(widths):
        step = max(1, int(round(w * stride)))
        for t in range(0, T, step):
            seg = (t, min(t + w, T))
            if seg in seen:
                continue
            seen.add(seg)
            out.append(Anchor(t, wi, w, seg[0], seg[1]))
    return out


def cosine_fuse(V: Tensor, Q: Tensor) -> Tensor:
    """Video-aware query: each clip pools words by softmaxed cosine similarity."""
    S = matmul(normalize_rows(V), transpose(normalize_rows(Q)))
    return matmul(softmax_rows(S), Q)


@dataclass
class HeadParams:
    fc1: LinearParams  # 2D -> D
    fc2: LinearParams  # D -> 3 * n_widths

    def params(self) -> list[Param]:
        return self.fc1.params() + self.fc2.params()


def init_head(rng: np.random.Generator, d: int, n_widths: int, name: str = "head", dtype=np.float32) -> HeadParams:
    return HeadParams(init_linear(rng, 2 * d, d, f"{name}.fc1", dtype),
                      init_linear(rng, d, 3 * n_widths, f"{name}.fc2", dtype))


@dataclass
class CandidateMoment:
    anchor: Anchor
    cs: float
    d_start: float
    d_end: float

    @property
    def refined(self) -> tuple[float, float]:
        return self.anchor.start + self.d_start, self.anchor.end + self.d_end


@dataclass
class AnchorScores:
    anchors: list[Anchor]
    cs: Tensor       # [A], in (0, 1)
    d_start: Tensor  # [A]
    d_end: Tensor    # [A]

    def candidates(self) -> list[CandidateMoment]:
        cs, ds, de = self.cs.data, self.d_start.data, self.d_end.data
        return [CandidateMoment(a, float(cs[i]), float(ds[i]), float(de[i]))
                for i, a in enumerate(self.anchors)]


def fuse_features(V: Tensor, Q: Tensor) -> Tensor:
    """F = [v_t ; q'_t] per clip, width 2D."""
    return concat_cols([V, cosine_fuse(V, Q)])


def score_anchors(F: Tensor, anchors: Sequence[Anchor], head: HeadParams) -> AnchorScores:
    out = linear(tanh(linear(F, head.fc1)), head.fc2)  # T x 3W
    rows = np.array([a.t_start for a in anchors], dtype=np.intp)
    base = np.array([3 * a.width_index for a in anchors], dtype=np.intp)
    cs = sigmoid(gather(out, rows, base))
    return AnchorScores(list(anchors), cs, gather(out, rows, base + 1), gather(out, rows, base + 2))


# ---------------------------------------------------------------------------


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    if a[0] >= a[1] or b[0] >= b[1]:
        raise ValueError(f"degenerate segment in iou({tuple(a)}, {tuple(b)})")
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    return inter / (max(a[1], b[1]) - min(a[0], b[0]))


@dataclass(frozen=True)
class Moment:
    start: float
    end: float
    cs: float


def refine(cands: Iterable[CandidateMoment], T: float) -> list[Moment]:
    """Apply offsets, clamp to [0, T] and drop segments that became empty."""
    out = []
    for c in cands:
        s, e = c.refined
        s, e = max(0.0, s), min(float(T), e)
        if s < e:
            out.append(Moment(s, e, c.cs))
    return out


def nms(moments: Sequence[Moment], threshold: float = 0.5, top_n: int = 5) -> list[Moment]:
    """Greedy suppression by descending confidence.

    Ties are broken by earlier start, then by shorter length.
    """
    order = sorted(moments, key=lambda m: (-m.cs, m.start, m.end - m.start))
    kept: list[Moment] = []
    for m in order:
        if len(kept) >= top_n:
            break
        if all(iou((m.start, m.end), (k.start, k.end)) <= threshold for k in kept):
            kept.append(m)
    return kept


# ---------------------------------------------------------------------------
# prediction files: one JSON object per line


def write_predictions(path, predictions: dict[str, list[Moment]]) -> None:
    with open(path, "w") as fh:
        for sid, moments in predictions.items():
            rows = [[m.start, m.end, m.cs] for m in moments]
            fh.write(json.dumps({"sample_id": sid, "moments": rows}) + "\n")


def read_predictions(path) -> dict[str, list[Moment]]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["sample_id"]] = [Moment(float(s), float(e), float(c)) for s, e, c in rec["moments"]]
    return out
