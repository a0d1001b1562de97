import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qacirc.attribute import AttributionConfig, AttributionSpan
from qacirc.errors import UndefinedRelScore
from qacirc.evalmetrics import (
    MetricRow, RelScoreInput, ablate_spans_from_context, attribution_exact_match, merge_spans,
    metrics_csv, metrics_json, qa_accuracy, random_disjoint_span, rel_score, rel_score_discrimination,
    span_f1,
)
from qacirc.instrument import AttnHead, DirectPathAblation

tokens = st.lists(st.integers(0, 6), max_size=12)


def test_exact_match_containment():
    span = AttributionSpan(6, 9, 0.5, 0)
    assert attribution_exact_match(span, 7) == 1
    assert attribution_exact_match(span, 9) == 0
    assert attribution_exact_match(span, 6) == 1
    assert attribution_exact_match(span, 7, gold_end=10, strict=True) == 0
    assert attribution_exact_match(span, 6, gold_end=9, strict=True) == 1


def test_span_f1_examples():
    assert span_f1([1, 2, 3], [1, 2, 3]) == 1.0
    assert span_f1([1, 2], [3, 4]) == 0.0
    # 2 shared tokens: precision 2/3, recall 1/2
    assert abs(span_f1([1, 2, 9], [1, 2, 7, 8]) - 4 / 7) < 1e-12
    assert span_f1([], []) == 1.0
    assert span_f1([], [1]) == 0.0


@given(tokens, tokens)
def test_span_f1_symmetric_and_bounded(a, b):
    assert span_f1(a, b) == pytest.approx(span_f1(b, a))
    assert 0.0 <= span_f1(a, b) <= 1.0


def test_rel_score_examples():
    assert rel_score(RelScoreInput(-2.0, -5.0)) == pytest.approx(0.6)
    assert rel_score(RelScoreInput(-3.0, -3.0)) == 0.0
    with pytest.raises(UndefinedRelScore):
        rel_score(RelScoreInput(-1.0, 0.0))


@given(st.floats(-50, -1e-3), st.floats(-50, -1e-3), st.floats(1e-3, 1e3))
def test_rel_score_scale_free(a, b, c):
    assert rel_score(RelScoreInput(c * a, c * b)) == pytest.approx(rel_score(RelScoreInput(a, b)), rel=1e-9)
    assert rel_score(RelScoreInput(a, b)) >= 0


def test_span_ablation():
    ctx = tuple(range(10, 20))
    out = ablate_spans_from_context(ctx, [(6, 9)])
    assert out[6:9] == (0, 0, 0) and out[:6] == ctx[:6] and out[9:] == ctx[9:]
    assert ablate_spans_from_context(ctx, []) == ctx
    merged = ablate_spans_from_context(ctx, [(3, 6), AttributionSpan(5, 8, 1.0, 0)])
    assert merged[3:8] == (0,) * 5 and merged[8] == 18 and merged[2] == 12
    assert merge_spans([(5, 8), (3, 6), (10, 11)]) == [(3, 8), (10, 11)]


def test_random_disjoint_span(rng):
    for _ in range(50):
        s, e = random_disjoint_span(rng, 2, 10, (4, 6))
        assert e - s == 2 and (e <= 4 or s >= 6)
    assert random_disjoint_span(rng, 3, 5, (1, 4)) is None


def test_qa_accuracy(weights, probe):
    assert qa_accuracy(weights, probe, "copy") >= 0.99
    assert qa_accuracy(weights, probe, "memory") >= 0.99
    ablated = DirectPathAblation(weights, (AttnHead(1, 2),))
    assert qa_accuracy(ablated, probe[:50], "copy") < 0.2


def test_rel_score_discrimination(weights, probe):
    res = rel_score_discrimination(weights, probe[:60], AttributionConfig(head=(1, 2)), seed=0)
    assert res["win_rate"] >= 0.9 and res["n"] == 60


def test_metric_outputs():
    rows = [MetricRow("qa_accuracy", "copy", 1.0, 200, 7), MetricRow("span_f1", "copy", 0.5, 200, None)]
    text = metrics_csv(rows)
    assert text.splitlines()[0] == "metric,mode,value,n,seed"
    assert text.splitlines()[1] == "qa_accuracy,copy,1.0,200,7"
    assert '"metric": "span_f1"' in metrics_json(rows)
