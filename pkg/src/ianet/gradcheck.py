"""Finite-difference audits of every backward rule and of every model parameter group."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .encoders import gru_scan, init_gru
from .data import GroundingSample, SynthSpec, synthesize
from .model import IANet, ModelConfig
from .numerics import GradCheckEntry, Param, Tensor, grad_check
from .training import label_candidates, total_loss

TOLERANCE = 1e-4

# Acceptance-sized network: T=5, N=4, D=8, H=2, K=2, L=2 and three anchor widths.
TINY_CONFIG = ModelConfig(d_in_video=6, d_in_query=5, D=8, H=2, K=2, L=2, widths=(2, 3, 4), stride=0.5,
                          alpha=1.0, seed=3)
TINY_SPEC = SynthSpec(num_samples=1, T_min=5, T_max=5, N_min=4, N_max=4, d_in_video=6, d_in_query=5,
                      d_latent=3, seg_min=2, seg_max=3, seed=3)


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = TOLERANCE
    seconds: float = 0.0

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.passed(self.tolerance)]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def to_text(self) -> str:
        width = max((len(e.name) for e in self.entries), default=4)
        lines = []
        for e in self.entries:
            status = "ok" if e.passed(self.tolerance) else "FAIL"
            lines.append(f"{e.name:<{width}}  {e.max_rel_error:.3e}  {status}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max relative error {self.max_rel_error:.3e} "
                     f"(tolerance {self.tolerance:g}, {len(self.entries)} groups, {self.seconds:.1f} s)")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# one builder per registered backward rule


def _p(rng, *shape) -> Param:
    return Param(rng.normal(size=shape))


def _readout(rng, out_shape):
    w = rng.normal(size=out_shape)
    return lambda out: nx.sum_all(nx.mul(out, Tensor(w.astype(out.dtype))))


def _op_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Param]]]:
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    m1, m2 = _p(rng, 2, 3, 4), _p(rng, 2, 4, 5)
    bias = _p(rng, 4)
    sq = _p(rng, 4, 4)
    heads_in = _p(rng, 3, 6)
    stack = _p(rng, 4, 3, 5)
    vec = _p(rng, 6)
    probs = Param(rng.uniform(0.1, 0.9, size=6))
    target = rng.uniform(size=6)
    # offsets kept away from the smooth-L1 knee so central differences stay smooth
    off = rng.choice([-1, 1], size=6) * rng.uniform(0.1, 0.8, size=6) + rng.choice([0.0, 2.0], size=6)
    sl1_target = vec.data - off
    s1, s2 = Param(np.array(0.7)), Param(np.array(-1.3))
    rows, cols = np.array([0, 2, 2, 1]), np.array([1, 3, 3, 0])
    seq = _p(rng, 5, 3)
    gru = init_gru(rng, 3, 2, "gru", np.float64)

    def unary(op, x, out_shape):
        r = _readout(rng, out_shape)
        return lambda: r(op(x)), [x]

    r_mm = _readout(rng, (2, 3, 5))
    r_add = _readout(rng, (3, 4))
    r_sub = _readout(rng, (3, 4))
    r_mul = _readout(rng, (3, 4))
    r_bias = _readout(rng, (3, 4))
    r_cr = _readout(rng, (7, 4))
    r_cc = _readout(rng, (4, 8))
    r_g = _readout(rng, (4,))
    r_t = _readout(rng, (3,))
    r_gru = _readout(rng, (5, 2))
    return {
        "matmul": (lambda: r_mm(nx.matmul(m1, m2)), [m1, m2]),
        "add": (lambda: r_add(nx.add(a, b)), [a, b]),
        "sub": (lambda: r_sub(nx.sub(a, b)), [a, b]),
        "mul": (lambda: r_mul(nx.mul(a, b)), [a, b]),
        "scale": unary(lambda x: nx.scale(x, -1.7), a, (3, 4)),
        "one_minus": unary(nx.one_minus, a, (3, 4)),
        "add_bias": (lambda: r_bias(nx.add_bias(a, bias)), [a, bias]),
        "sigmoid": unary(nx.sigmoid, a, (3, 4)),
        "tanh": unary(nx.tanh, a, (3, 4)),
        "softmax_rows": unary(nx.softmax_rows, a, (3, 4)),
        "transpose": unary(nx.transpose, a, (4, 3)),
        "concat_rows": (lambda: r_cr(nx.concat_rows([a, sq])), [a, sq]),
        "concat_cols": (lambda: r_cc(nx.concat_cols([sq, sq])), [sq]),
        "slice_rows": unary(lambda x: nx.slice_rows(x, 1, 3), sq, (2, 4)),
        "split_heads": unary(lambda x: nx.split_heads(x, 3), heads_in, (3, 3, 2)),
        "mean_heads": unary(nx.mean_heads, stack, (3, 5)),
        "normalize_rows": unary(nx.normalize_rows, b, (3, 4)),
        "gather": (lambda: r_g(nx.gather(a, rows, cols)), [a]),
        "take": (lambda: r_t(nx.take(vec, np.array([5, 0, 5]))), [vec]),
        "sum_all": (lambda: nx.sum_all(nx.mul(a, a)), [a]),
        "add_scalars": (lambda: nx.mul(nx.add_scalars(s1, s2, 0.3), s2), [s1, s2]),
        "soft_bce": (lambda: nx.soft_bce(probs, target), [probs]),
        "smooth_l1": (lambda: nx.smooth_l1(vec, sl1_target, 3.0), [vec]),
        "gru_scan": (lambda: r_gru(gru_scan(seq, gru, reverse=True)), [seq] + gru.params()),
    }


def check_primitives(seed: int = 0, tolerance: float = TOLERANCE) -> GradCheckReport:
    """Check every registered backward rule in isolation; entries are named by op."""
    t0 = time.perf_counter()
    cases = _op_cases(np.random.default_rng(seed))
    missing = sorted(set(nx.BACKWARD) - set(cases))
    if missing:
        raise RuntimeError(f"no gradient check case for ops {missing}")
    report = GradCheckReport(tolerance=tolerance)
    for op, (f, params) in cases.items():
        entries = grad_check(f, params, oracle_dtype=np.longdouble)
        worst = max(entries, key=lambda e: e.max_rel_error)
        report.entries.append(GradCheckEntry(op, worst.max_rel_error, worst.worst_index,
                                             worst.analytic, worst.numeric))
    report.seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# whole-model check


def model_loss_fn(net: IANet, sample: GroundingSample) -> Callable[[], Tensor]:
    cfg = net.config
    labels = label_candidates(net.anchors(sample.T), sample.segment, cfg.lam, sample.T)

    def f():
        fwd = net.forward(sample.video, sample.query)
        return total_loss(fwd.scores, labels, cfg.alpha)[0]

    return f


def check_model(config: ModelConfig = TINY_CONFIG, sample: GroundingSample | None = None,
                tolerance: float = TOLERANCE) -> GradCheckReport:
    """Check the training loss gradient of every Param of a 64-bit network.

    The finite differences run in extended precision (``np.longdouble``) so
    that near-zero gradient entries are not swamped by float64 rounding.
    """
    t0 = time.perf_counter()
    if sample is None:
        spec = TINY_SPEC
        if (config.d_in_video, config.d_in_query) != (spec.d_in_video, spec.d_in_query):
            spec = SynthSpec(**{**spec.__dict__, "d_in_video": config.d_in_video,
                                "d_in_query": config.d_in_query})
        sample = synthesize(spec).samples[0]
    net = IANet(config).astype(np.float64)
    entries = grad_check(model_loss_fn(net, sample), net.params(), oracle_dtype=np.longdouble)
    report = GradCheckReport(entries, tolerance)
    report.seconds = time.perf_counter() - t0
    return report
