"""Candidate labelling, alignment/boundary losses and the optimisation loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import DataError, GroundingSample
from .localizer import Anchor, AnchorScores, Moment, iou, nms, refine
from .model import IANet, ModelConfig
from .numerics import (
    Graph,
    NumericalError,
    Tensor,
    adam_step,
    add_scalars,
    smooth_l1,
    soft_bce,
    take,
)

log = logging.getLogger(__name__)


@dataclass
class Labels:
    """Per-anchor IoU labels against one ground-truth segment."""

    o: np.ndarray           # IoU of each raw anchor, [A]
    positive: np.ndarray    # o > lam, [A] bool
    target_start: np.ndarray  # gt_s - anchor_s, meaningful on positives only
    target_end: np.ndarray

    @property
    def n_pos(self) -> int:
        return int(self.positive.sum())

    @property
    def n_neg(self) -> int:
        return int((~self.positive).sum())


def label_candidates(anchors: Sequence[Anchor], gt: tuple[float, float], lam: float, T: float | None = None) -> Labels:
    s, e = gt
    if not s < e:
        raise DataError(f"ground truth ({s}, {e}) is empty")
    if T is not None and not (0 <= s and e <= T):
        raise DataError(f"ground truth ({s}, {e}) lies outside [0, {T}]")
    o = np.array([iou((a.start, a.end), gt) for a in anchors])
    starts = np.array([a.start for a in anchors], dtype=np.float64)
    ends = np.array([a.end for a in anchors], dtype=np.float64)
    return Labels(o, o > lam, s - starts, e - ends)


def alignment_loss(cs: Tensor, labels: Labels) -> Tensor:
    """Mean soft-label cross-entropy between confidences and anchor IoUs."""
    return soft_bce(cs, labels.o)


def boundary_loss(scores: AnchorScores, labels: Labels) -> Tensor:
    """Smooth-L1 offset error averaged over positive anchors (0 when none)."""
    idx = np.flatnonzero(labels.positive)
    if idx.size == 0:
        return Tensor(np.zeros((), dtype=scores.cs.dtype))
    n = float(idx.size)
    return add_scalars(smooth_l1(take(scores.d_start, idx), labels.target_start[idx], n),
                       smooth_l1(take(scores.d_end, idx), labels.target_end[idx], n))


@dataclass
class LossReport:
    l_align: float
    l_b: float
    l_total: float
    n_pos: int
    n_neg: int

    @property
    def n_total(self) -> int:
        return self.n_pos + self.n_neg


def total_loss(scores: AnchorScores, labels: Labels, alpha: float):
    la = alignment_loss(scores.cs, labels)
    lb = boundary_loss(scores, labels)
    lt = add_scalars(la, lb, alpha)
    # logged total is recombined in float64 so the identity holds exactly in 32-bit runs too
    l_align, l_b = float(la.data), float(lb.data)
    report = LossReport(l_align, l_b, l_align + alpha * l_b, labels.n_pos, labels.n_neg)
    return lt, report


def predict_moments(scores: AnchorScores, T: int, config: ModelConfig, top_n: int | None = None) -> list[Moment]:
    return nms(refine(scores.candidates(), T), config.nms_threshold, top_n or config.top_n)


def top1_hit(moments: Sequence[Moment], gt: tuple[float, float], m: float) -> bool:
    return bool(moments) and iou((moments[0].start, moments[0].end), gt) > m


# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    l_align: float
    l_b: float
    l_total: float
    train_R1_iou05: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "l_align": self.l_align, "l_b": self.l_b,
                           "l_total": self.l_total, "train_R1_iou05": self.train_R1_iou05})


@dataclass
class TrainResult:
    net: IANet
    epochs: list[EpochLog] = field(default_factory=list)
    steps: list[LossReport] = field(default_factory=list)


def train_step(net: IANet, sample: GroundingSample, config: ModelConfig):
    """Forward, backward and one Adam update on a single sample."""
    with Graph() as g:
        fwd = net.forward(sample.video, sample.query)
        labels = label_candidates(fwd.scores.anchors, sample.segment, config.lam, fwd.T)
        loss, report = total_loss(fwd.scores, labels, config.alpha)
        if not (np.isfinite(report.l_total) and np.isfinite(loss.data)):
            raise NumericalError(f"loss became {report.l_total}")
        g.backward(loss)
    adam_step(net.params(), config.lr)
    return fwd, report


def train_loop(dataset: Sequence[GroundingSample], config: ModelConfig, epochs: int,
               net: IANet | None = None, log_path=None,
               on_epoch: Callable[[EpochLog], None] | None = None,
               max_steps: int | None = None) -> TrainResult:
    """Per-sample Adam training with a seeded shuffle each epoch.

    Distractor samples (no segment) carry no localisation target and are
    skipped.  A non-finite loss raises :class:`NumericalError` naming the step.
    """
    train = [s for s in dataset if not s.is_distractor]
    if not train:
        raise DataError("training set has no samples with a ground-truth segment")
    net = net or IANet(config)
    rng = np.random.default_rng([config.seed, 7])
    result = TrainResult(net)
    fh = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(train))
            reports, hits = [], 0
            for i in order:
                sample = train[i]
                try:
                    fwd, rep = train_step(net, sample, config)
                except NumericalError as exc:
                    raise NumericalError(f"step {step}: {exc}") from exc
                step += 1
                reports.append(rep)
                hits += top1_hit(predict_moments(fwd.scores, fwd.T, config, 1), sample.segment, 0.5)
                if max_steps is not None and step >= max_steps:
                    break
            entry = EpochLog(
                epoch,
                float(np.mean([r.l_align for r in reports])),
                float(np.mean([r.l_b for r in reports])),
                float(np.mean([r.l_total for r in reports])),
                100.0 * hits / len(reports),
            )
            result.epochs.append(entry)
            result.steps.extend(reports)
            if fh:
                fh.write(entry.to_json() + "\n")
                fh.flush()
            log.info("epoch %d  l_total=%.4f  l_align=%.4f  l_b=%.4f  R1@0.5=%.1f", epoch,
                     entry.l_total, entry.l_align, entry.l_b, entry.train_R1_iou05)
            if on_epoch:
                on_epoch(entry)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if fh:
            fh.close()
    return result


def predict(net: IANet, samples: Sequence[GroundingSample], top_n: int | None = None) -> dict[str, list[Moment]]:
    out = {}
    for s in samples:
        fwd = net.forward(s.video, s.query)
        out[s.sample_id] = predict_moments(fwd.scores, fwd.T, net.config, top_n)
    return out


def entropy_floor(o: np.ndarray) -> float:
    """Smallest achievable alignment loss for labels ``o`` (reached at cs == o)."""
    p = np.clip(np.asarray(o, dtype=np.float64), 1e-7, 1 - 1e-7)
    return float(-(o * np.log(p) + (1 - o) * np.log(1 - p)).mean())

