import numpy as np

from ianet import numerics as nx
from ianet.gradcheck import TINY_CONFIG, check_model, check_primitives
from ianet.model import IANet


def test_every_backward_rule_passes():
    report = check_primitives()
    assert report.passed, report.to_text()
    assert {e.name for e in report.entries} == set(nx.BACKWARD)


def test_corrupted_rule_is_reported_by_op_name(monkeypatch):
    original = nx.BACKWARD["softmax_rows"]
    monkeypatch.setitem(nx.BACKWARD, "softmax_rows", lambda ctx, g: tuple(0.9 * x for x in original(ctx, g)))
    report = check_primitives()
    assert [e.name for e in report.failures] == ["softmax_rows"]
    assert "softmax_rows" in report.to_text() and "FAIL" in report.to_text()


def test_model_report_lists_every_param_group():
    cfg = TINY_CONFIG.replace(L=1)
    report = check_model(cfg)
    assert [e.name for e in report.entries] == [n for n, _ in IANet(cfg).named_params()]
    assert report.passed, report.to_text()
