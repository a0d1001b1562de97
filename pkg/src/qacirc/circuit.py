"""Component scoring, greedy circuit selection and circuit validation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from ._parallel import pmap
from .errors import Incomparable, OverlapWarning, Unsupported
from .instrument import (
    ALL, LAST, ComponentRef, DirectPathAblation, PatchPlan, all_components,
    path_patched_logits, patched_logits,
)
from .model import ModelWeights, forward
from .numerics import softmax
from .probe import ProbeExample, fingerprint


@dataclass(frozen=True)
class ComponentScore:
    component: ComponentRef
    score: float

    def to_json(self) -> dict:
        d = self.component.to_json()
        d["score"] = self.score
        return d

    @classmethod
    def from_json(cls, d) -> "ComponentScore":
        return cls(ComponentRef.from_json(d), float(d["score"]))


@dataclass(frozen=True)
class CircuitReport:
    hierarchy: int
    granularity: str
    mode: str
    ranked: tuple[ComponentScore, ...]
    selected: tuple[ComponentScore, ...]
    combined_score: float
    delta: float
    delta_unmet: bool
    dataset_sha256: str
    seed: int | None = None
    prefix_scores: tuple[float, ...] = ()
    targets: tuple[ComponentRef, ...] = field(default=())

    @property
    def components(self) -> list[ComponentRef]:
        return [s.component for s in self.selected]

    def to_json(self) -> dict:
        return {
            "hierarchy": self.hierarchy,
            "granularity": self.granularity,
            "mode": self.mode,
            "delta": self.delta,
            "combined_score": self.combined_score,
            "delta_unmet": self.delta_unmet,
            "selected": [s.to_json() for s in self.selected],
            "ranked": [s.to_json() for s in self.ranked],
            "prefix_scores": list(self.prefix_scores),
            "targets": [t.to_json() for t in self.targets],
            "dataset_sha256": self.dataset_sha256,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d) -> "CircuitReport":
        return cls(
            hierarchy=int(d["hierarchy"]),
            granularity=d["granularity"],
            mode=d.get("mode", "copy"),
            ranked=tuple(ComponentScore.from_json(x) for x in d["ranked"]),
            selected=tuple(ComponentScore.from_json(x) for x in d["selected"]),
            combined_score=float(d["combined_score"]),
            delta=float(d["delta"]),
            delta_unmet=bool(d["delta_unmet"]),
            dataset_sha256=d["dataset_sha256"],
            seed=d.get("seed"),
            prefix_scores=tuple(d.get("prefix_scores", ())),
            targets=tuple(ComponentRef.from_json(t) for t in d.get("targets", ())),
        )


def _example_probs(ex: ProbeExample, weights: ModelWeights, mode: str, plans, targets=None,
                   noop=False) -> list[float]:
    clean_in = ex.clean_prompt(mode)
    clean = forward(weights, clean_in)
    donor = clean if noop else forward(weights, ex.donor_prompt())
    answer = ex.target(mode)
    probs = []
    for sources in plans:
        if targets:
            logits = path_patched_logits(weights, clean_in, donor, sources, targets, clean)
        else:
            logits = patched_logits(weights, clean_in, PatchPlan(tuple(sources), donor), clean)
        probs.append(float(softmax(logits)[answer]))
    return probs


def patched_probabilities(weights, dataset, mode, plans, targets=None, noop=False, jobs=1) -> np.ndarray:
    """``[example, plan]`` answer probabilities under each patch plan."""
    fn = partial(_example_probs, weights=weights, mode=mode, plans=[tuple(p) for p in plans],
                 targets=tuple(targets) if targets else None, noop=noop)
    rows = pmap(fn, list(dataset), jobs)
    return np.array(rows, dtype=np.float64).reshape(len(dataset), len(plans))


def _mean_scores(probs: np.ndarray) -> list[float]:
    # Sequential reduction in example order; independent of worker count.
    total = np.zeros(probs.shape[1])
    for row in probs:
        total += 1.0 - row
    return [float(x) for x in total / probs.shape[0]]


def score_component(weights, dataset, c: ComponentRef, mode: str, noop: bool = False,
                    jobs: int = 1) -> ComponentScore:
    """Mean over examples of ``1 - P_patch(answer)`` with ``c`` taken from the corrupted run.

    ``noop=True`` uses the clean run as its own donor (diagnostic).
    """
    probs = patched_probabilities(weights, dataset, mode, [[c]], noop=noop, jobs=jobs)
    return ComponentScore(c, _mean_scores(probs)[0])


def _rank(scores: Sequence[ComponentScore]) -> list[ComponentScore]:
    return sorted(scores, key=lambda s: (-s.score, s.component.sort_key()))


def rank_components(weights, dataset, granularity: str, mode: str, jobs: int = 1,
                    candidates: Sequence[ComponentRef] | None = None, targets=None) -> list[ComponentScore]:
    comps = list(candidates) if candidates is not None else all_components(weights.config, granularity)
    probs = patched_probabilities(weights, dataset, mode, [[c] for c in comps], targets=targets, jobs=jobs)
    return _rank([ComponentScore(c, s) for c, s in zip(comps, _mean_scores(probs))])


def greedy_select(weights, dataset, ranked: Sequence[ComponentScore], delta: float, mode: str,
                  hierarchy: int = 0, targets=None, jobs: int = 1, seed=None,
                  granularity: str | None = None) -> CircuitReport:
    """Smallest prefix of ``ranked`` whose joint patch scores at least ``delta``.

    Every prefix is evaluated; none is assumed monotone. If no prefix reaches
    ``delta`` the full list is selected and the report is flagged.
    """
    ranked = list(ranked)
    if not ranked:
        raise ValueError("nothing to select from")
    comps = [s.component for s in ranked]
    plans = [comps[:k] for k in range(1, len(comps) + 1)]
    probs = patched_probabilities(weights, dataset, mode, plans, targets=targets, jobs=jobs)
    curve = _mean_scores(probs)
    k = next((i + 1 for i, v in enumerate(curve) if v >= delta), None)
    unmet = k is None
    if unmet:
        k = len(comps)
    gran = granularity or ranked[0].component.kind
    return CircuitReport(
        hierarchy=hierarchy, granularity=gran, mode=mode, ranked=tuple(ranked),
        selected=tuple(ranked[:k]), combined_score=curve[k - 1], delta=float(delta),
        delta_unmet=unmet, dataset_sha256=fingerprint(dataset), seed=seed,
        prefix_scores=tuple(curve), targets=tuple(targets or ()),
    )


def extract_second_order(weights, dataset, targets: Sequence[ComponentRef], delta: float, mode: str,
                         granularity: str, jobs: int = 1, seed=None) -> CircuitReport:
    """Hierarchy 1: sources (patched at every position) scored by their effect
    routed only through ``targets``."""
    targets = list(targets)
    if not targets:
        raise Unsupported("hierarchy 1 needs a non-empty hierarchy-0 node set")
    target_nodes = {t.node for t in targets}
    candidates = [
        c for c in all_components(weights.config, granularity, position=ALL)
        if c.node not in target_nodes and any(c.feeds(t) for t in targets)
    ]
    if not candidates:
        raise Unsupported("no component upstream of the hierarchy-0 nodes")
    ranked = rank_components(weights, dataset, granularity, mode, jobs=jobs, candidates=candidates,
                             targets=targets)
    return greedy_select(weights, dataset, ranked, delta, mode, hierarchy=1, targets=targets,
                         jobs=jobs, seed=seed, granularity=granularity)


def extract_hierarchy(weights, dataset, K: int, delta: float, mode: str, granularity: str = "head",
                      jobs: int = 1, seed=None) -> list[CircuitReport]:
    if K not in (0, 1):
        raise Unsupported(f"hierarchy {K} is not supported (only 0 and 1)")
    ranked = rank_components(weights, dataset, granularity, mode, jobs=jobs)
    reports = [greedy_select(weights, dataset, ranked, delta, mode, jobs=jobs, seed=seed,
                             granularity=granularity)]
    if K == 1:
        targets = [c.at(LAST) for c in reports[0].components]
        reports.append(extract_second_order(weights, dataset, targets, delta, mode, granularity,
                                            jobs=jobs, seed=seed))
    return reports


def random_circuit(weights, size: int, seed: int, granularity: str = "head",
                   exclude: Sequence[ComponentRef] = ()) -> list[ComponentRef]:
    excluded = {c.node for c in exclude}
    pool = [c for c in all_components(weights.config, granularity) if c.node not in excluded]
    if size > len(pool):
        raise ValueError(f"size {size} exceeds the {len(pool)} available components")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=size, replace=False)
    return sorted(pool[i] for i in idx)


def random_circuit_baseline(weights, dataset, size: int, seed: int, mode: str, granularity: str = "head",
                            exclude: Sequence[ComponentRef] = (), jobs: int = 1) -> float:
    """Mean answer probability when a random component set of ``size`` is patched."""
    comps = random_circuit(weights, size, seed, granularity, exclude)
    probs = patched_probabilities(weights, dataset, mode, [comps], jobs=jobs)
    return float(probs[:, 0].mean())


def circuit_probability(weights, dataset, components, mode: str, jobs: int = 1) -> float:
    """Mean answer probability with ``components`` patched jointly."""
    probs = patched_probabilities(weights, dataset, mode, [list(components)], jobs=jobs)
    return float(probs[:, 0].mean())


def _example_key(ex: ProbeExample):
    return (ex.question, ex.context_copy, ex.context_memory)


def qa_correct(model, dataset, mode: str) -> list[bool]:
    from .model import run

    return [run(model, ex.clean_prompt(mode), capture=()).next_token == ex.target(mode) for ex in dataset]


def ablate_circuit_accuracy(weights, eval_dataset, report: CircuitReport,
                            extraction_dataset=None, components=None) -> tuple[float, float]:
    """Accuracy before and after removing the direct edges of the circuit's nodes."""
    if extraction_dataset is not None:
        seen = {_example_key(ex) for ex in extraction_dataset}
        overlap = sum(_example_key(ex) in seen for ex in eval_dataset)
        if overlap:
            warnings.warn(f"{overlap} evaluation examples were used for extraction", OverlapWarning)
    comps = [c.at(LAST) for c in (components if components is not None else report.components)]
    before = float(np.mean(qa_correct(weights, eval_dataset, report.mode)))
    handle = DirectPathAblation(weights, tuple(comps))
    after = float(np.mean(qa_correct(handle, eval_dataset, report.mode)))
    return before, after


def circuit_overlap(a: CircuitReport, b: CircuitReport) -> float:
    """Jaccard index of the selected node sets (positions ignored)."""
    if a.granularity != b.granularity:
        raise Incomparable(f"cannot compare {a.granularity} circuit with {b.granularity} circuit")
    na = {c.node for c in a.components}
    nb = {c.node for c in b.components}
    union = na | nb
    if not union:
        return 1.0
    return len(na & nb) / len(union)
