"""Attribution and faithfulness metrics."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import UndefinedRelScore
from .model import TokenSeq, run
from .numerics import log_softmax
from .probe import ProbeExample, make_prompt

PAD = 0


def attribution_exact_match(pred, gold_position: int, gold_end: int | None = None,
                            strict: bool = False) -> int:
    """1 if the gold answer position lies in ``[pred.start, pred.end)``.

    With ``strict`` every position of ``[gold_position, gold_end)`` must be covered.
    """
    if strict and gold_end is not None:
        return int(pred.start <= gold_position and gold_end <= pred.end)
    return int(pred.start <= gold_position < pred.end)


def span_f1(pred: Iterable[int], gold: Iterable[int]) -> float:
    """Token-multiset F1; two empty spans score 1."""
    p, g = Counter(pred), Counter(gold)
    if not p and not g:
        return 1.0
    common = sum((p & g).values())
    if common == 0:
        return 0.0
    precision = common / sum(p.values())
    recall = common / sum(g.values())
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class RelScoreInput:
    logp_orig: float
    logp_ablated: float


def rel_score(x: RelScoreInput) -> float:
    """``|(logp_orig - logp_ablated) / logp_ablated|``."""
    if x.logp_ablated == 0:
        raise UndefinedRelScore("ablated log probability is 0")
    return abs((x.logp_orig - x.logp_ablated) / x.logp_ablated)


def qa_accuracy(model, dataset: Sequence[ProbeExample], mode: str) -> float:
    """Fraction of examples whose greedy answer is the mode's ground truth."""
    if not dataset:
        return 0.0
    hits = sum(run(model, ex.clean_prompt(mode), capture=()).next_token == ex.target(mode) for ex in dataset)
    return hits / len(dataset)


def merge_spans(spans: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for s, e in sorted(spans):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def ablate_spans_from_context(context: Sequence[int], spans, pad: int = PAD) -> tuple[int, ...]:
    """Overwrite every position of the (merged) spans with PAD, keeping the length."""
    out = list(context)
    pairs = [(s.start, s.end) if hasattr(s, "start") else tuple(s) for s in spans]
    for s, e in merge_spans(pairs):
        if not 0 <= s <= e <= len(out):
            raise ValueError(f"span [{s}, {e}) outside a context of length {len(out)}")
        out[s:e] = [pad] * (e - s)
    return tuple(out)


def response_logprob(model, context: Sequence[int], question: Sequence[int], response: Sequence[int]) -> float:
    """Teacher-forced log probability of ``response`` after the prompt."""
    prompt = make_prompt(context, question)
    seq = prompt
    total = 0.0
    for tok in response:
        logits = run(model, seq, capture=()).logits[-1]
        total += float(log_softmax(logits)[tok])
        seq = seq.extend([tok])
    return total


def relative_logprob_change(model, context, question, response, spans, pad: int = PAD) -> float:
    orig = response_logprob(model, context, question, response)
    ablated = response_logprob(model, ablate_spans_from_context(context, spans, pad), question, response)
    return rel_score(RelScoreInput(orig, ablated))


def random_disjoint_span(rng: np.random.Generator, length: int, n_context: int, avoid: tuple[int, int]):
    """Uniform random ``[s, s+length)`` inside the context that misses ``avoid``; None if impossible."""
    starts = [s for s in range(0, n_context - length + 1) if s + length <= avoid[0] or s >= avoid[1]]
    if not starts:
        return None
    s = starts[int(rng.integers(len(starts)))]
    return (s, s + length)


@dataclass(frozen=True)
class MetricRow:
    metric: str
    mode: str
    value: float
    n: int
    seed: int | None


def metrics_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "mode", "value", "n", "seed"])
    for r in rows:
        w.writerow([r.metric, r.mode, repr(float(r.value)), r.n, "" if r.seed is None else r.seed])
    return buf.getvalue()


def metrics_json(rows: Sequence[MetricRow]) -> str:
    return json.dumps([r.__dict__ for r in rows], indent=2, sort_keys=True) + "\n"


def rel_score_trial(model, ex: ProbeExample, cfg, rng: np.random.Generator, variant: str = "copy"):
    """Rel-Score of removing the attributed span and of removing a random disjoint
    span of the same length; the random score is None when no such span fits."""
    from .attribute import attn_attrib

    ctx = ex.context(variant)
    result = attn_attrib(model, ctx, ex.question, cfg)
    if not result.spans or not result.answer_tokens:
        return None, None
    span = result.spans[0]
    attributed = relative_logprob_change(model, ctx, ex.question, result.answer_tokens, [span])
    other = random_disjoint_span(rng, span.end - span.start, len(ctx), (span.start, span.end))
    if other is None:
        return attributed, None
    return attributed, relative_logprob_change(model, ctx, ex.question, result.answer_tokens, [other])


def rel_score_discrimination(model, dataset: Sequence[ProbeExample], cfg, seed: int) -> dict:
    """Fraction of examples where the attributed span's Rel-Score beats the random
    span's. Examples without a disjoint random span count as losses."""
    rng = np.random.default_rng(seed)
    per = []
    for ex in dataset:
        a, r = rel_score_trial(model, ex, cfg, rng)
        per.append({"id": ex.id, "attributed": a, "random": r,
                    "win": a is not None and r is not None and a > r})
    n = len(per)
    return {
        "win_rate": sum(p["win"] for p in per) / n if n else 0.0,
        "n": n,
        "no_random_span": sum(p["random"] is None for p in per),
        "per_example": per,
    }


def evaluate_suite(weights, dataset: Sequence[ProbeExample], cfg, seed: int,
                   gradient: bool = True) -> list[MetricRow]:
    """QA accuracy, attribution quality and faithfulness for one attribution head."""
    from .attribute import attn_attrib, gradient_baseline

    n = len(dataset)
    rows = [
        MetricRow("qa_accuracy", "copy", qa_accuracy(weights, dataset, "copy"), n, seed),
        MetricRow("qa_accuracy", "memory", qa_accuracy(weights, dataset, "memory"), n, seed),
    ]
    em, f1, grad_em = [], [], []
    for ex in dataset:
        res = attn_attrib(weights, ex.context_copy, ex.question, cfg)
        top = res.spans[0] if res.spans else None
        em.append(0 if top is None else attribution_exact_match(top, ex.answer_position))
        f1.append(span_f1(top.tokens if top else (), (ex.swapped,)))
        if gradient:
            g = gradient_baseline(weights, ex.context_copy, ex.question, ex.swapped, cfg)
            grad_em.append(attribution_exact_match(g, ex.answer_position))
    rows.append(MetricRow("attribution_exact_match", "copy", float(np.mean(em)), n, seed))
    rows.append(MetricRow("span_f1", "copy", float(np.mean(f1)), n, seed))
    if gradient:
        rows.append(MetricRow("gradient_exact_match", "copy", float(np.mean(grad_em)), n, seed))
    rel = rel_score_discrimination(weights, dataset, cfg, seed)
    rows.append(MetricRow("rel_score_win_rate", "copy", rel["win_rate"], n, seed))
    return rows
