"""Attention-head attribution: head entropy profiles, span extraction from a
single head's attention (AttnAttrib) and a gradient-saliency baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidWindow
from .model import ModelWeights, TokenSeq, forward
from .model.transformer import RMS_EPS, causal_mask
from .numerics import entropy, log_softmax, renormalize, softmax
from .probe import ProbeExample, make_prompt

SPAN_MODES = ("window", "delimiter")


@dataclass(frozen=True)
class HeadProfile:
    head: tuple[int, int]
    entropy: float
    accuracy: float

    def to_json(self) -> dict:
        return {"layer": self.head[0], "head": self.head[1], "entropy": self.entropy,
                "accuracy": self.accuracy}


@dataclass(frozen=True)
class AttributionSpan:
    start: int
    end: int
    peak: float
    source_step: int
    tokens: tuple[int, ...] = ()
    uninformative: bool = False

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise InvalidWindow(f"bad span [{self.start}, {self.end})")

    def __contains__(self, position: int) -> bool:
        return self.start <= position < self.end

    def to_json(self) -> dict:
        d = {"start": self.start, "end": self.end, "peak": self.peak,
             "source_step": self.source_step, "tokens": list(self.tokens)}
        if self.uninformative:
            d["uninformative"] = True
        return d


@dataclass(frozen=True)
class AttributionConfig:
    head: tuple[int, int]
    span_length: int = 1
    top_k: int = 1
    answer_length: int = 1
    span_mode: str = "window"
    delimiters: tuple[int, ...] = (1,)  # SEP in the fixture vocabulary
    eos: int | None = 4

    def __post_init__(self):
        if self.span_length < 1:
            raise ValueError("span_length must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.answer_length < 1:
            raise ValueError("answer_length must be >= 1")
        if self.span_mode not in SPAN_MODES:
            raise ValueError(f"span_mode must be one of {SPAN_MODES}")


@dataclass(frozen=True)
class AttributionResult:
    answer_tokens: tuple[int, ...]
    spans: tuple[AttributionSpan, ...]
    steps: int
    truncated: bool = False

    def to_json(self, question_id=None, head=None) -> dict:
        out = {"question_id": question_id}
        if head is not None:
            out["head"] = {"layer": head[0], "head": head[1]}
        out["spans"] = [s.to_json() for s in self.spans]
        out["answer_tokens"] = list(self.answer_tokens)
        return out


def _context_row(trace, head, prompt: TokenSeq) -> np.ndarray:
    layer, h = head
    start, end = prompt.context
    if end <= start:
        raise InvalidWindow("empty context window")
    return renormalize(trace[f"blocks.{layer}.attn.pattern"][h, -1], start, end)


def head_entropy_profile(weights: ModelWeights, dataset: Sequence[ProbeExample], heads,
                         mode: str = "copy") -> list[HeadProfile]:
    """Mean context entropy (nats) of each head's last-position attention, and the
    fraction of examples whose context argmax is the gold answer position."""
    heads = [tuple(h) for h in heads]
    layers = sorted({l for l, _ in heads})
    ent = np.zeros(len(heads))
    hits = np.zeros(len(heads))
    for ex in dataset:
        prompt = ex.clean_prompt(mode)
        trace = forward(weights, prompt, capture=[f"blocks.{l}.attn.pattern" for l in layers])
        for i, head in enumerate(heads):
            row = _context_row(trace, head, prompt)
            ent[i] += entropy(row)
            hits[i] += int(np.argmax(row)) + prompt.context_start == ex.answer_position
    n = max(len(dataset), 1)
    return [HeadProfile(h, float(e / n), float(a / n)) for h, e, a in zip(heads, ent, hits)]


def select_attribution_head(profiles: Sequence[HeadProfile]) -> tuple[int, int]:
    if not profiles:
        raise ValueError("no head profiles to choose from")
    best = min(profiles, key=lambda p: (p.entropy, -p.accuracy, p.head))
    return best.head


def get_max_span(row, bounds: tuple[int, int], cfg: AttributionConfig, tokens=None,
                 source_step: int = 0) -> AttributionSpan:
    """Span around the attention peak inside ``bounds``.

    ``row`` is indexed by absolute position (at least ``bounds[1]`` long) or is
    already restricted to the window (exactly ``end - start`` long).
    Window mode centres ``span_length`` tokens on the peak, clipping at the
    bounds and extending the other way to keep the length when possible.
    Delimiter mode returns the delimiter-free segment containing the peak.
    """
    start, end = bounds
    if end <= start:
        raise InvalidWindow("empty context window")
    arr = np.asarray(row, dtype=np.float64)
    window = arr if arr.shape[0] == end - start else arr[start:end]
    if window.shape[0] != end - start:
        raise InvalidWindow(f"row of length {arr.shape[0]} does not cover [{start}, {end})")
    peak = start + int(np.argmax(window))
    if cfg.span_mode == "window":
        lo = peak - (cfg.span_length - 1) // 2
        hi = lo + cfg.span_length
        if lo < start:
            lo, hi = start, min(start + cfg.span_length, end)
        elif hi > end:
            lo, hi = max(start, end - cfg.span_length), end
    else:
        if tokens is None:
            raise ValueError("delimiter mode needs the token ids")
        delim = set(cfg.delimiters)
        if tokens[peak] in delim:
            lo, hi = peak, peak + 1
        else:
            lo = peak
            while lo > start and tokens[lo - 1] not in delim:
                lo -= 1
            hi = peak + 1
            while hi < end and tokens[hi] not in delim:
                hi += 1
    value = float(window[lo - start:hi - start].max())
    ids = tuple(int(t) for t in tokens[lo:hi]) if tokens is not None else ()
    return AttributionSpan(lo, hi, value, source_step, ids)


def _rank_spans(spans: Sequence[AttributionSpan], top_k: int) -> list[AttributionSpan]:
    best: dict[tuple[int, int], AttributionSpan] = {}
    for s in spans:
        key = (s.start, s.end)
        if key not in best or s.peak > best[key].peak:
            best[key] = s
    # Stable sort on peak keeps generation order among equal peaks.
    ordered = sorted(best.values(), key=lambda s: s.source_step)
    ordered.sort(key=lambda s: -s.peak)
    return ordered[:top_k]


def attn_attrib(weights: ModelWeights, context: Sequence[int], question: Sequence[int],
                cfg: AttributionConfig) -> AttributionResult:
    """Generate up to ``answer_length`` tokens greedily, one forward pass per
    token, and attribute each to the context span its attribution head peaks on.

    Generation stops early after emitting ``cfg.eos``; the terminator gets no span.
    """
    layer, h = cfg.head
    prompt = make_prompt(context, question)
    bounds = prompt.context
    name = f"blocks.{layer}.attn.pattern"
    answer: list[int] = []
    spans: list[AttributionSpan] = []
    seq = prompt
    steps = 0
    truncated = False
    for j in range(cfg.answer_length):
        trace = forward(weights, seq, capture=(name,))
        steps += 1
        tok = trace.next_token
        if cfg.eos is not None and tok == cfg.eos:
            truncated = True
            break
        row = renormalize(trace[name][h, -1], *bounds)
        spans.append(get_max_span(row, bounds, cfg, seq.ids, source_step=j))
        answer.append(tok)
        seq = seq.extend([tok])
    return AttributionResult(tuple(answer), tuple(_rank_spans(spans, cfg.top_k)), steps, truncated)


def attn_attrib_example(weights, ex: ProbeExample, cfg: AttributionConfig, variant: str = "copy"):
    return attn_attrib(weights, ex.context(variant), ex.question, cfg)


def _norm_forward(x, gain, norm):
    if norm != "rms":
        return x * gain, None
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r * gain, r


def _norm_backward(x, r, gain, g):
    g = g * gain
    if r is None:
        return g
    xhat = x / r
    return (g - xhat * np.mean(g * xhat, axis=-1, keepdims=True)) / r


def embedding_gradient(weights: ModelWeights, tokens: TokenSeq, answer: int) -> np.ndarray:
    """Exact ``d(-log p(answer)) / d(embedding)`` at every position, ``[T, d_model]``,
    by reverse-mode differentiation of the forward pass."""
    cfg = weights.config
    ids = np.asarray(tokens.ids)
    T = len(ids)
    mask = causal_mask(T)
    scale = np.sqrt(cfg.d_head)
    x = weights.W_E[ids] + weights.W_pos[:T]
    tape = []
    for l in range(cfg.n_layers):
        h1, r1 = _norm_forward(x, weights.ln1[l], cfg.norm)
        q = np.einsum("td,hde->hte", h1, weights.W_Q[l])
        k = np.einsum("td,hde->hte", h1, weights.W_K[l])
        v = np.einsum("td,hde->hte", h1, weights.W_V[l])
        s = np.where(mask, q @ k.transpose(0, 2, 1) / scale, -np.inf)
        p = np.exp(s - s.max(axis=-1, keepdims=True))
        p = p / p.sum(axis=-1, keepdims=True)
        z = p @ v
        x_mid = x + np.einsum("hte,hed->td", z, weights.W_O[l])
        h2, r2 = _norm_forward(x_mid, weights.ln2[l], cfg.norm)
        u = h2 @ weights.W_in[l]
        x_out = x_mid + np.maximum(u, 0.0) @ weights.W_out[l]
        tape.append((x, r1, q, k, v, p, x_mid, r2, u))
        x = x_out
    probs = softmax(x[-1] @ weights.W_U)
    g_logits = probs.copy()
    g_logits[answer] -= 1.0
    g = np.zeros_like(x)
    g[-1] = weights.W_U @ g_logits
    for l in reversed(range(cfg.n_layers)):
        x_pre, r1, q, k, v, p, x_mid, r2, u = tape[l]
        g_u = (g @ weights.W_out[l].T) * (u > 0)
        g_mid = g + _norm_backward(x_mid, r2, weights.ln2[l], g_u @ weights.W_in[l].T)
        g_z = np.einsum("td,hed->hte", g_mid, weights.W_O[l])
        g_p = g_z @ v.transpose(0, 2, 1)
        g_v = p.transpose(0, 2, 1) @ g_z
        g_s = p * (g_p - (g_p * p).sum(axis=-1, keepdims=True)) / scale
        g_q = g_s @ k
        g_k = g_s.transpose(0, 2, 1) @ q
        g_h1 = (np.einsum("hte,hde->td", g_q, weights.W_Q[l])
                + np.einsum("hte,hde->td", g_k, weights.W_K[l])
                + np.einsum("hte,hde->td", g_v, weights.W_V[l]))
        g = g_mid + _norm_backward(x_pre, r1, weights.ln1[l], g_h1)
    return g


def _nll(weights, tokens, answer, embed) -> float:
    trace = forward(weights, tokens, capture=(), hooks={"embed": lambda _v: embed})
    return float(-log_softmax(trace.logits[-1])[answer])


def finite_difference_gradient(weights: ModelWeights, tokens: TokenSeq, answer: int,
                               positions: Sequence[int] | None = None, step: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of the same gradient (rows outside ``positions`` stay 0)."""
    ids = np.asarray(tokens.ids)
    T = len(ids)
    base = weights.W_E[ids] + weights.W_pos[:T]
    grad = np.zeros_like(base)
    for t in (range(T) if positions is None else positions):
        for d in range(base.shape[1]):
            e = base.copy()
            e[t, d] += step
            up = _nll(weights, tokens, answer, e)
            e[t, d] -= 2 * step
            down = _nll(weights, tokens, answer, e)
            grad[t, d] = (up - down) / (2 * step)
    return grad


def saliency(weights: ModelWeights, tokens: TokenSeq, answer: int, method: str = "exact") -> np.ndarray:
    """Per-context-token gradient norm, ordered as the context window."""
    start, end = tokens.context
    if method == "exact":
        g = embedding_gradient(weights, tokens, answer)
    elif method == "fd":
        g = finite_difference_gradient(weights, tokens, answer, positions=range(start, end))
    else:
        raise ValueError(f"unknown saliency method {method!r}")
    return np.linalg.norm(g[start:end], axis=1)


def gradient_baseline(weights: ModelWeights, context: Sequence[int], question: Sequence[int],
                      answer_token: int, cfg: AttributionConfig, method: str = "exact",
                      tol: float = 1e-12) -> AttributionSpan:
    """Span around the context token whose embedding gradient has the largest norm."""
    prompt = make_prompt(context, question)
    bounds = prompt.context
    sal = saliency(weights, prompt, answer_token, method)
    total = sal.sum()
    if total <= tol:
        hi = min(bounds[0] + cfg.span_length, bounds[1])
        return AttributionSpan(bounds[0], hi, 0.0, 0, tuple(prompt.ids[bounds[0]:hi]), uninformative=True)
    return get_max_span(sal / total, bounds, cfg, prompt.ids)
