import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import qacirc.attribute as attribute
from qacirc.attribute import (
    AttributionConfig, AttributionSpan, HeadProfile, attn_attrib, attn_attrib_example,
    embedding_gradient, finite_difference_gradient, get_max_span, gradient_baseline,
    head_entropy_profile, saliency, select_attribution_head,
)
from qacirc.errors import InvalidWindow
from qacirc.model import ModelConfig, ModelWeights, TokenSeq, forward, init_random
from qacirc.model.transformer import RMS_EPS


def rms_normalised(x):
    x = np.asarray(x)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
from qacirc.probe import make_prompt, plant_duplicate

COPY = (1, 2)


def cfg(**kw):
    return AttributionConfig(head=COPY, **kw)


def test_profile_of_copy_and_filler_heads(weights, probe):
    copy, filler = head_entropy_profile(weights, probe, [COPY, (1, 0)])
    assert copy.entropy < 0.5 and copy.accuracy >= 0.95
    # a uniform head spreads over the whole context window
    expected = np.mean([np.log(len(ex.context_copy)) for ex in probe])
    assert abs(filler.entropy - expected) < 0.05


def test_profile_is_deterministic(weights, small_probe):
    heads = [(l, h) for l in range(2) for h in range(4)]
    assert head_entropy_profile(weights, small_probe, heads) == head_entropy_profile(weights, small_probe, heads)


def test_select_head_rules():
    assert select_attribution_head([HeadProfile((0, 1), 1.0, 0.2)]) == (0, 1)
    tied = [HeadProfile((0, 1), 0.3, 0.7), HeadProfile((1, 3), 0.3, 0.9)]
    assert select_attribution_head(tied) == (1, 3)
    same = [HeadProfile((1, 0), 0.3, 0.9), HeadProfile((0, 2), 0.3, 0.9)]
    assert select_attribution_head(same) == (0, 2)
    with pytest.raises(ValueError):
        select_attribution_head([])


def test_circuit_head_is_selected(weights, probe):
    assert select_attribution_head(head_entropy_profile(weights, probe, [COPY])) == COPY


def test_window_span_centering():
    row = np.zeros(20)
    row[7] = 0.6
    row[3] = 0.4
    s = get_max_span(row, (0, 20), cfg(span_length=3))
    assert (s.start, s.end, s.peak) == (6, 9, 0.6)


def test_window_span_left_clip_extends_right():
    row = np.zeros(20)
    row[0] = 1.0
    s = get_max_span(row, (0, 20), cfg(span_length=5))
    assert (s.start, s.end) == (0, 5)
    assert (get_max_span(row, (0, 20), cfg(span_length=3)).start, get_max_span(row, (0, 20), cfg(span_length=3)).end) == (0, 3)


def test_window_span_right_clip_extends_left():
    row = np.zeros(10)
    row[9] = 1.0
    s = get_max_span(row, (0, 10), cfg(span_length=4))
    assert (s.start, s.end) == (6, 10)


def test_argmax_ties_take_lowest_index():
    s = get_max_span(np.array([0.1, 0.45, 0.45]), (0, 3), cfg())
    assert (s.start, s.end) == (1, 2)


def test_empty_window():
    with pytest.raises(InvalidWindow):
        get_max_span(np.ones(4), (2, 2), cfg())


@settings(max_examples=300)
@given(st.integers(1, 30), st.integers(0, 10), st.integers(1, 9), st.data())
def test_window_span_respects_bounds_and_length(n, start, slength, data):
    row = data.draw(arrays(np.float64, n, elements=st.floats(0, 1)))
    s = get_max_span(row, (start, start + n), cfg(span_length=slength))
    assert start <= s.start < s.end <= start + n
    assert s.end - s.start == min(slength, n)
    peak = start + int(np.argmax(row))
    assert s.start <= peak < s.end
    assert s.peak == row[s.start - start:s.end - start].max()


def brute_force_segment(tokens, peak, bounds, delim):
    """Enumerate every delimiter-free segment and keep the one containing ``peak``."""
    start, end = bounds
    if tokens[peak] in delim:
        return peak, peak + 1
    for lo in range(start, end):
        for hi in range(lo + 1, end + 1):
            inner = tokens[lo:hi]
            if any(t in delim for t in inner) or not lo <= peak < hi:
                continue
            left_ok = lo == start or tokens[lo - 1] in delim
            right_ok = hi == end or tokens[hi] in delim
            if left_ok and right_ok:
                return lo, hi
    raise AssertionError("no segment")


@settings(max_examples=200)
@given(st.lists(st.sampled_from([1, 5, 6, 7]), min_size=1, max_size=16), st.data())
def test_delimiter_span_matches_brute_force(tokens, data):
    n = len(tokens)
    row = np.array(data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n)))
    s = get_max_span(row, (0, n), cfg(span_mode="delimiter", delimiters=(1,)), tokens=tokens)
    assert (s.start, s.end) == brute_force_segment(tokens, int(np.argmax(row)), (0, n), {1})
    assert s.tokens == tuple(tokens[s.start:s.end])


def test_delimiter_span_on_segmented_context():
    tokens = [5, 6, 1, 7, 8, 9, 1, 5]
    row = np.zeros(8)
    row[4] = 1.0
    s = get_max_span(row, (0, 8), cfg(span_mode="delimiter"), tokens=tokens)
    assert (s.start, s.end, s.tokens) == (3, 6, (7, 8, 9))


def test_attn_attrib_copy_example(weights, probe):
    ex = probe[0]
    res = attn_attrib_example(weights, ex, cfg(span_length=3))
    assert res.answer_tokens == (ex.swapped,)
    assert len(res.spans) == 1 and ex.answer_position in res.spans[0]
    assert ex.swapped in res.spans[0].tokens


def test_attn_attrib_uses_exactly_one_forward_per_step(weights, probe, monkeypatch):
    calls = []
    real = attribute.forward

    def counting(*a, **kw):
        calls.append(1)
        return real(*a, **kw)

    monkeypatch.setattr(attribute, "forward", counting)
    ex = probe[4]
    res = attn_attrib(weights, ex.context_copy, ex.question, cfg(answer_length=1))
    assert len(calls) == 1 == res.steps
    calls.clear()
    res = attn_attrib(weights, ex.context_copy, ex.question, cfg(answer_length=3, eos=None))
    assert len(calls) == 3 == res.steps


def test_attn_attrib_truncates_at_terminator(weights, probe):
    ex = probe[0]
    res = attn_attrib(weights, ex.context_copy, ex.question, cfg(answer_length=4, top_k=5))
    assert res.truncated and res.steps == 2
    assert res.answer_tokens == (ex.swapped,) and len(res.spans) == 1


def test_top_k_larger_than_distinct_spans(weights, probe):
    ex = probe[0]
    res = attn_attrib(weights, ex.context_copy, ex.question, cfg(answer_length=3, top_k=10, eos=None))
    keys = [(s.start, s.end) for s in res.spans]
    assert len(keys) == len(set(keys)) <= 3
    assert [s.peak for s in res.spans] == sorted((s.peak for s in res.spans), reverse=True)


def test_span_ranking_dedup_and_stability():
    from qacirc.attribute import _rank_spans

    spans = [AttributionSpan(2, 3, 0.5, 0), AttributionSpan(4, 5, 0.9, 1),
             AttributionSpan(2, 3, 0.7, 2), AttributionSpan(6, 7, 0.5, 3), AttributionSpan(8, 9, 0.5, 4)]
    ranked = _rank_spans(spans, 10)
    assert [(s.start, s.peak, s.source_step) for s in ranked] == [(4, 0.9, 1), (2, 0.7, 2), (6, 0.5, 3), (8, 0.5, 4)]
    assert len(_rank_spans(spans, 2)) == 2


def test_duplicate_answer_token_attributed_to_causal_position(weights, probe, rng):
    hits = 0
    for ex in probe[:50]:
        p = plant_duplicate(ex, rng)
        res = attn_attrib(weights, p.ids[:p.context_end], ex.question, cfg())
        hits += ex.answer_position in res.spans[0]
    assert hits >= 45


def test_exact_gradient_matches_finite_differences(weights, probe):
    for ex in probe[:3]:
        p = ex.clean_prompt("copy")
        exact = saliency(weights, p, ex.swapped, "exact")
        fd = saliency(weights, p, ex.swapped, "fd")
        assert np.linalg.norm(exact - fd) <= 1e-3 * np.linalg.norm(exact)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["none", "rms"]))
def test_exact_gradient_on_random_models(seed, norm):
    mc = ModelConfig(2, 2, 8, 4, 12, 11, 10, rng_seed=seed, norm=norm)
    w = init_random(mc, scale=0.5)
    ids = tuple(int(t) for t in np.random.default_rng(seed).integers(0, 11, size=6))
    tokens = TokenSeq(ids, (0, 4), (4, 6))
    trace = forward(w, tokens)
    # finite differences are only meaningful away from ReLU kinks
    for l in range(mc.n_layers):
        pre = np.asarray(trace[f"blocks.{l}.resid_mid"]) @ w.W_in[l]
        if mc.norm == "rms":
            pre = rms_normalised(trace[f"blocks.{l}.resid_mid"]) @ w.W_in[l]
        assume(np.abs(pre).min() > 1e-2)
    g = embedding_gradient(w, tokens, 3)
    f = finite_difference_gradient(w, tokens, 3, step=1e-4)
    assert np.linalg.norm(g - f) <= 1e-4 * max(np.linalg.norm(g), 1e-8)


def test_gradient_baseline_finds_answer(weights, probe):
    for ex in probe[:20]:
        span = gradient_baseline(weights, ex.context_copy, ex.question, ex.swapped, cfg())
        assert ex.answer_position in span and not span.uninformative


def test_gradient_baseline_uninformative_on_constant_model():
    mc = ModelConfig(1, 1, 4, 4, 4, 8, 8)
    zeros = {k: np.zeros_like(v) for k, v in init_random(mc).tensors().items()}
    zeros["ln1"] = np.ones((1, 4))
    zeros["ln2"] = np.ones((1, 4))
    w = ModelWeights(mc, **zeros)
    span = gradient_baseline(w, [5, 6, 7, 5], [1, 2], 3, cfg(span_length=2))
    assert span.uninformative and span.peak == 0.0 and (span.start, span.end) == (0, 2)


def test_attribution_report_json(weights, probe):
    ex = probe[0]
    res = attn_attrib_example(weights, ex, cfg())
    doc = res.to_json(question_id=ex.id, head=COPY)
    assert doc["head"] == {"layer": 1, "head": 2}
    assert set(doc["spans"][0]) == {"start", "end", "peak", "source_step", "tokens"}
    assert doc["answer_tokens"] == [ex.swapped]


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(span_length=0)
    with pytest.raises(ValueError):
        cfg(top_k=0)
    with pytest.raises(ValueError):
        cfg(span_mode="sentence")
