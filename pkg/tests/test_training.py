import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY, TINY_SPEC
from ianet.data import DataError, GroundingSample, synthesize
from ianet.localizer import AnchorScores, generate_anchors
from ianet.model import IANet
from ianet.numerics import Graph, NumericalError, Param, Tensor, smooth_l1_value
from ianet.training import (
    alignment_loss,
    boundary_loss,
    entropy_floor,
    label_candidates,
    total_loss,
    train_loop,
)


def _scores(anchors, cs, ds=None, de=None):
    n = len(anchors)
    return AnchorScores(anchors, Param(np.asarray(cs, dtype=np.float64)),
                        Param(np.zeros(n) if ds is None else np.asarray(ds, dtype=np.float64)),
                        Param(np.zeros(n) if de is None else np.asarray(de, dtype=np.float64)))


# --- labelling ----------------------------------------------------------------


def test_labels_on_the_enumerated_fixture():
    anchors = generate_anchors(8, [4], 0.5)
    lab = label_candidates(anchors, (2, 6), 0.45, T=8)
    np.testing.assert_allclose(lab.o, [1 / 3, 1.0, 1 / 3, 0.0])
    assert lab.positive.tolist() == [False, True, False, False]
    assert (lab.target_start[1], lab.target_end[1]) == (0.0, 0.0)
    assert lab.n_pos + lab.n_neg == len(anchors)


def test_disjoint_anchor_is_negative():
    anchors = generate_anchors(10, [2], 1.0)
    lab = label_candidates(anchors, (0, 2), 0.45)
    assert lab.o[-1] == 0.0 and not lab.positive[-1]


def test_targets_are_gt_minus_anchor():
    anchors = generate_anchors(8, [4], 0.5)
    lab = label_candidates(anchors, (2.5, 5.0), 0.45)
    assert lab.target_start[1] == 0.5 and lab.target_end[1] == -1.0


@pytest.mark.parametrize("gt", [(-1, 3), (2, 9), (4, 4)])
def test_invalid_ground_truth(gt):
    with pytest.raises(DataError):
        label_candidates(generate_anchors(8, [4], 0.5), gt, 0.45, T=8)


@given(st.integers(2, 30), st.data())
@settings(max_examples=40, deadline=None)
def test_labels_partition_candidates(T, data):
    s = data.draw(st.integers(0, T - 1))
    e = data.draw(st.integers(s + 1, T))
    lam = data.draw(st.sampled_from([0.3, 0.45, 0.7]))
    anchors = generate_anchors(T, [2, 3, 5], 0.5)
    lab = label_candidates(anchors, (s, e), lam, T)
    assert lab.n_pos + lab.n_neg == len(anchors)
    assert np.array_equal(lab.positive, lab.o > lam)


# --- alignment loss -----------------------------------------------------------


def _one_anchor_labels(o):
    anchors = generate_anchors(4, [4], 1.0)
    lab = label_candidates(anchors, (0, 4), 0.45)
    lab.o = np.array([o])
    return anchors, lab


def test_half_label_half_confidence_is_ln2():
    anchors, lab = _one_anchor_labels(0.5)
    assert float(alignment_loss(Param(np.array([0.5])), lab).data) == pytest.approx(math.log(2), abs=1e-12)


def test_perfect_confidence_limit():
    anchors, lab = _one_anchor_labels(1.0)
    assert float(alignment_loss(Param(np.array([1.0 - 1e-12])), lab).data) < 1e-6


@pytest.mark.parametrize("o", [0.0, 0.2, 1 / 3, 0.5, 0.8, 1.0])
def test_alignment_loss_is_minimised_at_the_label(o):
    anchors, lab = _one_anchor_labels(o)
    grid = np.linspace(1e-4, 1 - 1e-4, 2001)
    losses = [float(alignment_loss(Param(np.array([c])), lab).data) for c in grid]
    at_o = float(alignment_loss(Param(np.array([min(max(o, 1e-7), 1 - 1e-7)])), lab).data)
    assert at_o <= min(losses) + 1e-12


def test_alignment_gradient_closed_form(rng):
    anchors = generate_anchors(8, [2, 4], 0.5)
    lab = label_candidates(anchors, (1, 5), 0.45)
    cs = Param(rng.uniform(0.05, 0.95, size=len(anchors)))
    with Graph() as g:
        g.backward(alignment_loss(cs, lab))
    expected = (cs.data - lab.o) / (cs.data * (1 - cs.data)) / len(anchors)
    np.testing.assert_allclose(cs.grad, expected, rtol=1e-12)


# --- boundary loss ------------------------------------------------------------


def test_smooth_l1_values_and_knee():
    assert smooth_l1_value(0.5) == 0.125
    assert smooth_l1_value(2.0) == 1.5
    assert smooth_l1_value(-2.0) == 1.5
    left = smooth_l1_value(np.nextafter(1.0, 0.0))
    assert smooth_l1_value(1.0) == 0.5 and left == pytest.approx(0.5, abs=1e-15)


def test_perfect_offsets_give_zero_boundary_loss():
    anchors = generate_anchors(8, [4], 0.5)
    lab = label_candidates(anchors, (2.5, 5.5), 0.45)
    s = _scores(anchors, [0.5] * 4, lab.target_start, lab.target_end)
    assert float(boundary_loss(s, lab).data) == 0.0


def test_boundary_loss_averages_over_positives():
    anchors = generate_anchors(8, [4], 0.5)
    lab = label_candidates(anchors, (2, 6), 0.45)
    s = _scores(anchors, [0.5] * 4, [0.5, 0.5, 9.0, 9.0], [2.0, 2.0, 9.0, 9.0])
    assert float(boundary_loss(s, lab).data) == pytest.approx(0.125 + 1.5)


def test_no_positives_means_zero_boundary_loss():
    anchors = generate_anchors(8, [2], 1.0)
    lab = label_candidates(anchors, (0, 8), 0.45)
    assert lab.n_pos == 0
    assert float(boundary_loss(_scores(anchors, [0.5] * 4, [3.0] * 4), lab).data) == 0.0


def test_zero_alpha_reduces_total_to_alignment(rng):
    anchors = generate_anchors(8, [4], 0.5)
    lab = label_candidates(anchors, (2, 6), 0.45)
    s = _scores(anchors, rng.uniform(0.1, 0.9, 4), rng.normal(size=4), rng.normal(size=4))
    _, rep = total_loss(s, lab, 0.0)
    assert rep.l_total == rep.l_align
    _, rep = total_loss(s, lab, 0.3)
    assert rep.l_total == pytest.approx(rep.l_align + 0.3 * rep.l_b, abs=1e-9)


def test_entropy_floor():
    assert entropy_floor(np.array([0.5])) == pytest.approx(math.log(2))
    assert entropy_floor(np.array([0.0, 1.0])) < 1e-5


# --- loop -------------------------------------------------------------------


def test_loss_identity_holds_on_every_step():
    ds = synthesize(TINY_SPEC).samples
    result = train_loop(ds, TINY, epochs=2)
    assert len(result.steps) == 2 * len(ds)
    for r in result.steps:
        assert abs(r.l_total - (r.l_align + TINY.alpha * r.l_b)) <= 1e-9


def test_epoch_log_file(tmp_path):
    path = tmp_path / "log.jsonl"
    train_loop(synthesize(TINY_SPEC).samples, TINY, epochs=3, log_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"epoch", "l_align", "l_b", "l_total", "train_R1_iou05"}


def test_same_seed_gives_identical_parameters():
    ds = synthesize(TINY_SPEC).samples
    a = train_loop(ds, TINY, epochs=2).net
    b = train_loop(ds, TINY, epochs=2).net
    for (_, p), (_, q) in zip(a.named_params(), b.named_params()):
        assert np.array_equal(p.data, q.data)


def test_distractors_are_not_trained_on():
    ds = synthesize(TINY_SPEC.__class__(**{**TINY_SPEC.__dict__, "distractor_count": 2})).samples
    assert sum(s.is_distractor for s in ds) == 2
    result = train_loop(ds, TINY, epochs=1)
    assert len(result.steps) == 2


def test_all_distractors_is_a_data_error():
    ds = synthesize(TINY_SPEC.__class__(**{**TINY_SPEC.__dict__, "distractor_count": 4})).samples
    with pytest.raises(DataError):
        train_loop(ds, TINY, epochs=1)


def test_nan_loss_names_the_step():
    net = IANet(TINY)
    ds = synthesize(TINY_SPEC).samples
    net.head.fc2.b.data[:] = np.nan
    with pytest.raises(NumericalError, match="step 0"):
        train_loop(ds, TINY, epochs=1, net=net)


def test_single_repeated_sample_loss_settles():
    s = synthesize(TINY_SPEC).samples[0]
    result = train_loop([s], TINY.replace(lr=3e-3), epochs=12)
    totals = [e.l_total for e in result.epochs]
    for prev, cur in zip(totals[2:], totals[3:]):
        assert cur <= prev * 1.05
    assert totals[-1] < totals[0]
