"""Circuit-switching interventions: attention-peak upweighting and MLP
direct-path ablation, plus the memory-to-context switch experiment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from ._parallel import pmap
from .errors import InvalidDataset, InvalidSpec
from .instrument import LAST, DirectPathAblation, Mlp
from .model import ModelWeights, RunTrace, TokenSeq, forward, run
from .numerics import softmax
from .probe import ProbeExample

log = logging.getLogger(__name__)

STEER_MODES = ("attn_upweight", "mlp_zero", "mlp_mean")


@dataclass(frozen=True)
class SteerSpec:
    mode: str
    beta: float = 1.0
    target_layers: tuple[int, ...] = ()
    target_mlps: tuple[int, ...] = ()
    mean_source: tuple[TokenSeq, ...] | None = None

    def __post_init__(self):
        if self.mode not in STEER_MODES:
            raise InvalidSpec(f"unknown steering mode {self.mode!r}")
        if not math.isfinite(self.beta) or self.beta <= 0:
            raise InvalidSpec(f"beta must be finite and positive, got {self.beta}")
        object.__setattr__(self, "target_layers", tuple(int(x) for x in self.target_layers))
        object.__setattr__(self, "target_mlps", tuple(int(x) for x in self.target_mlps))
        if self.mean_source is not None:
            object.__setattr__(self, "mean_source", tuple(self.mean_source))

    @property
    def targets(self) -> tuple[int, ...]:
        return self.target_layers if self.mode == "attn_upweight" else self.target_mlps

    def check(self, cfg) -> None:
        for l in self.targets:
            if not 0 <= l < cfg.n_layers:
                raise InvalidSpec(f"layer {l} outside a {cfg.n_layers}-layer model")


def _upweight_scores(scores: np.ndarray, beta: float, window: tuple[int, int], layer: int) -> np.ndarray:
    out = np.array(scores, copy=True)
    start, end = window
    for h in range(out.shape[0]):
        row = out[h, -1]
        j = start + int(np.argmax(row[start:end]))
        if row[j] < 0:
            log.warning("layer %d head %d: context peak score %.4g is negative; "
                        "scaling by beta lowers its share", layer, h, row[j])
        row[j] *= beta
    return out


@dataclass(frozen=True)
class AttentionUpweight:
    """Forward handle that multiplies, for every head of the target layers, the
    largest pre-softmax score in the context window at the final query position."""

    weights: ModelWeights
    layers: tuple[int, ...]
    beta: float

    def run(self, tokens: TokenSeq, capture=None) -> RunTrace:
        if not self.layers or self.beta == 1.0:
            return forward(self.weights, tokens, capture)
        window = tokens.context
        hooks = {
            f"blocks.{l}.attn.scores": partial(_upweight_scores, beta=self.beta, window=window, layer=l)
            for l in self.layers
        }
        return forward(self.weights, tokens, capture, hooks)


def upweight_attention(weights: ModelWeights, spec: SteerSpec) -> AttentionUpweight:
    if spec.mode != "attn_upweight":
        raise InvalidSpec(f"upweight_attention needs mode attn_upweight, got {spec.mode}")
    spec.check(weights.config)
    return AttentionUpweight(weights, spec.target_layers, float(spec.beta))


def mlp_means(weights: ModelWeights, prompts: Sequence[TokenSeq], layers: Sequence[int]) -> dict:
    """Mean last-position output of each MLP over ``prompts``."""
    if not prompts:
        raise InvalidSpec("mean ablation needs at least one source prompt")
    names = [f"blocks.{l}.mlp.out" for l in layers]
    total = {l: np.zeros(weights.config.d_model) for l in layers}
    for p in prompts:
        trace = forward(weights, p, capture=names)
        for l in layers:
            total[l] += trace[f"blocks.{l}.mlp.out"][-1]
    return {l: v / len(prompts) for l, v in total.items()}


def ablate_mlp_direct(weights: ModelWeights, spec: SteerSpec) -> DirectPathAblation:
    """Replace the target MLPs' direct contribution at the last position by zero or by
    their mean over ``spec.mean_source``; every other component keeps its clean value."""
    if spec.mode not in ("mlp_zero", "mlp_mean"):
        raise InvalidSpec(f"ablate_mlp_direct needs an mlp mode, got {spec.mode}")
    spec.check(weights.config)
    comps = tuple(Mlp(l, LAST) for l in spec.target_mlps)
    replacement = ()
    if spec.mode == "mlp_mean":
        if spec.mean_source is None:
            raise InvalidSpec("mlp_mean requires mean_source")
        means = mlp_means(weights, spec.mean_source, spec.target_mlps)
        replacement = tuple((c.node, means[c.layer]) for c in comps)
    return DirectPathAblation(weights, comps, replacement)


def intervene(weights: ModelWeights, spec: SteerSpec):
    if spec.mode == "attn_upweight":
        return upweight_attention(weights, spec)
    return ablate_mlp_direct(weights, spec)


@dataclass(frozen=True)
class SteerReport:
    mode: str
    beta: float
    targets: tuple[int, ...]
    switch_rate: float
    n: int
    per_example: tuple[dict, ...]
    memory_probability: float
    baseline_memory_probability: float

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "beta": self.beta,
            "targets": list(self.targets),
            "switch_rate": self.switch_rate,
            "n": self.n,
            "memory_probability": self.memory_probability,
            "baseline_memory_probability": self.baseline_memory_probability,
            "per_example": list(self.per_example),
        }


def _switch_one(ex: ProbeExample, weights: ModelWeights, handle) -> tuple[dict, float, float]:
    prompt = ex.clean_prompt("memory")
    base = forward(weights, prompt, capture=())
    steered = run(handle, prompt, capture=())
    rec = {
        "id": ex.id,
        "baseline_answer": base.next_token,
        "steered_answer": steered.next_token,
        "switched": steered.next_token == ex.fallback,
    }
    return rec, float(softmax(steered.logits[-1])[ex.answer]), float(softmax(base.logits[-1])[ex.answer])


def check_memory_dataset(dataset: Sequence[ProbeExample], mask_id: int = 3) -> None:
    if not dataset:
        raise InvalidDataset("empty dataset")
    for ex in dataset:
        if ex.context_memory[ex.answer_position] != mask_id:
            raise InvalidDataset(f"example {ex.id} has no MASK in its answer slot")


def switch_experiment(weights: ModelWeights, memory_dataset: Sequence[ProbeExample], spec: SteerSpec,
                      mode: str = "memory", jobs: int = 1, mask_id: int = 3) -> SteerReport:
    """Fraction of memory-mode examples whose intervened answer becomes the
    context's fallback token."""
    if mode != "memory":
        raise InvalidDataset(f"switch experiment runs on memory-mode data, got {mode!r}")
    check_memory_dataset(memory_dataset, mask_id)
    handle = intervene(weights, spec)
    rows = pmap(partial(_switch_one, weights=weights, handle=handle), list(memory_dataset), jobs)
    per = tuple(r[0] for r in rows)
    n = len(per)
    return SteerReport(
        mode=spec.mode, beta=float(spec.beta), targets=spec.targets,
        switch_rate=sum(r["switched"] for r in per) / n, n=n, per_example=per,
        memory_probability=float(np.mean([r[1] for r in rows])),
        baseline_memory_probability=float(np.mean([r[2] for r in rows])),
    )
