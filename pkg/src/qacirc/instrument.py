"""Component addressing and direct-effect activation patching.

A patch runs three steps on the clean input: (1) the source components'
outputs are replaced by the donor run's outputs, (2) the forward pass is
recomputed, and (3) with ``restore_downstream`` every other component is
overwritten with its clean-run value, so the sources can only reach the logits
through their direct edge. Steps 2-3 are realised with forward hooks.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import total_ordering
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, NotCaptured
from .model import ModelConfig, ModelWeights, RunTrace, TokenSeq, forward, head_outputs, mlp_output
from .numerics import softmax

HEAD, LAYER, MLP = "head", "layer", "mlp"
_KIND_ORDER = {HEAD: 0, LAYER: 1, MLP: 2}
LAST, ALL = "last", "all"


@total_ordering
@dataclass(frozen=True)
class ComponentRef:
    """An attention head, a whole attention layer or an MLP, at one position.

    ``position`` is ``"last"``, ``"all"`` (every position) or an integer index.
    Ordering is (layer, kind, head, position).
    """

    kind: str
    layer: int
    head: int | None = None
    position: int | str = LAST

    def __post_init__(self):
        if self.kind not in _KIND_ORDER:
            raise ValueError(f"unknown component kind {self.kind!r}")
        if (self.kind == HEAD) != (self.head is not None):
            raise ValueError("head index is required for heads and only for heads")
        if not (self.position in (LAST, ALL) or isinstance(self.position, int)):
            raise ValueError(f"bad position {self.position!r}")

    def sort_key(self):
        pos = self.position
        pkey = (0, pos) if isinstance(pos, int) else ((1, 0) if pos == LAST else (2, 0))
        return (self.layer, _KIND_ORDER[self.kind], -1 if self.head is None else self.head, pkey)

    def __lt__(self, other):
        if not isinstance(other, ComponentRef):
            return NotImplemented
        return self.sort_key() < other.sort_key()

    @property
    def node(self) -> tuple:
        """Identity ignoring position."""
        return (self.kind, self.layer, self.head)

    def at(self, position) -> "ComponentRef":
        return ComponentRef(self.kind, self.layer, self.head, position)

    def positions(self, T: int) -> list[int]:
        if self.position == LAST:
            return [T - 1]
        if self.position == ALL:
            return list(range(T))
        if not 0 <= self.position < T:
            raise NotCaptured(f"position {self.position} outside sequence of length {T}")
        return [self.position]

    def in_bounds(self, cfg: ModelConfig) -> bool:
        if not 0 <= self.layer < cfg.n_layers:
            return False
        return self.head is None or 0 <= self.head < cfg.n_heads

    def feeds(self, target: "ComponentRef") -> bool:
        """Whether this component's output is read by ``target``."""
        if target.kind == MLP:
            return self.layer < target.layer or (self.layer == target.layer and self.kind != MLP)
        return self.layer < target.layer

    def label(self) -> str:
        if self.kind == HEAD:
            return f"A{self.layer}.{self.head}"
        return f"{'L' if self.kind == LAYER else 'M'}{self.layer}"

    def to_json(self) -> dict:
        d = {"kind": self.kind, "layer": self.layer}
        if self.head is not None:
            d["head"] = self.head
        d["position"] = self.position
        return d

    @classmethod
    def from_json(cls, d) -> "ComponentRef":
        return cls(d["kind"], int(d["layer"]), d.get("head"), d.get("position", LAST))


def AttnHead(layer: int, head: int, position=LAST) -> ComponentRef:
    return ComponentRef(HEAD, layer, head, position)


def AttnLayer(layer: int, position=LAST) -> ComponentRef:
    return ComponentRef(LAYER, layer, None, position)


def Mlp(layer: int, position=LAST) -> ComponentRef:
    return ComponentRef(MLP, layer, None, position)


def all_components(cfg: ModelConfig, granularity: str, position=LAST) -> list[ComponentRef]:
    if granularity == HEAD:
        refs = [AttnHead(l, h, position) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]
    elif granularity == LAYER:
        refs = [AttnLayer(l, position) for l in range(cfg.n_layers)]
    elif granularity == MLP:
        refs = [Mlp(l, position) for l in range(cfg.n_layers)]
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return sorted(refs)


def _cache_name(c: ComponentRef) -> str:
    return f"blocks.{c.layer}.mlp.out" if c.kind == MLP else f"blocks.{c.layer}.attn.head_out"


def capture(trace: RunTrace, c: ComponentRef) -> np.ndarray:
    """The output-projected activation of ``c`` in ``trace`` (``[d]`` or ``[pos, d]``)."""
    if c.layer < 0 or (c.head is not None and c.head < 0):
        raise NotCaptured(f"{c} is out of range")
    name = _cache_name(c)
    if name not in trace:
        raise NotCaptured(f"{name} was not captured")
    arr = trace[name]
    if c.kind == HEAD:
        if c.head >= arr.shape[0]:
            raise NotCaptured(f"head {c.head} is out of range")
        arr = arr[c.head]
    elif c.kind == LAYER:
        arr = arr.sum(axis=0)
    pos = c.positions(arr.shape[0])
    return arr[pos[0]] if c.position != ALL else arr


@dataclass(frozen=True)
class PatchPlan:
    sources: tuple[ComponentRef, ...]
    donor: RunTrace
    restore_downstream: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(sorted(set(self.sources))))
        if not self.sources:
            raise ValueError("a patch plan needs at least one source")


def _layer_hooks(n_layers, head_fn, mlp_fn):
    hooks = {}
    for l in range(n_layers):
        hooks[f"blocks.{l}.attn.head_out"] = (lambda v, l=l: head_fn(l, v))
        hooks[f"blocks.{l}.mlp.out"] = (lambda v, l=l: mlp_fn(l, v))
    return hooks


def _check_pair(clean_input: TokenSeq, donor: RunTrace):
    if len(donor.tokens) != len(clean_input):
        raise AlignmentError(
            f"clean length {len(clean_input)} != donor length {len(donor.tokens)}; last positions differ"
        )


def _override(base: np.ndarray, c: ComponentRef, donor: np.ndarray, T: int) -> None:
    for p in c.positions(T):
        if c.kind == HEAD:
            base[c.head, p] = donor[c.head, p]
        elif c.kind == LAYER:
            base[:, p] = donor[:, p]
        else:
            base[p] = donor[p]


def patch_hooks(cfg: ModelConfig, T: int, sources, donor: RunTrace, clean: RunTrace | None):
    """Hooks that write donor values at ``sources`` and, when ``clean`` is given,
    pin every other component to its clean value."""
    for c in sources:
        if _cache_name(c) not in donor:
            raise NotCaptured(f"donor run lacks {_cache_name(c)}")
        if not c.in_bounds(cfg):
            raise NotCaptured(f"{c} is outside the model")
    by_layer: dict[tuple[int, bool], list[ComponentRef]] = {}
    for c in sources:
        by_layer.setdefault((c.layer, c.kind == MLP), []).append(c)

    def apply(l, value, is_mlp):
        name = f"blocks.{l}.mlp.out" if is_mlp else f"blocks.{l}.attn.head_out"
        out = np.array(clean[name] if clean is not None else value, copy=True)
        for c in by_layer.get((l, is_mlp), []):
            _override(out, c, donor[name], T)
        return out

    return _layer_hooks(cfg.n_layers, lambda l, v: apply(l, v, False), lambda l, v: apply(l, v, True))


def patched_run(weights: ModelWeights, clean_input: TokenSeq, plan: PatchPlan,
                clean_trace: RunTrace | None = None) -> RunTrace:
    _check_pair(clean_input, plan.donor)
    clean = None
    if plan.restore_downstream:
        clean = clean_trace if clean_trace is not None else forward(weights, clean_input)
    hooks = patch_hooks(weights.config, len(clean_input), plan.sources, plan.donor, clean)
    return forward(weights, clean_input, capture=(), hooks=hooks)


def patched_logits(weights, clean_input, plan, clean_trace=None) -> np.ndarray:
    return patched_run(weights, clean_input, plan, clean_trace).logits[-1]


def patched_distribution(weights: ModelWeights, clean_input: TokenSeq, plan: PatchPlan,
                         clean_trace: RunTrace | None = None) -> np.ndarray:
    """Next-token distribution at the last position after patching ``plan.sources``."""
    return softmax(patched_logits(weights, clean_input, plan, clean_trace))


def direct_contribution(weights: ModelWeights, trace: RunTrace, c: ComponentRef) -> np.ndarray:
    """Logit vector written directly by ``c`` at the last position."""
    vec = capture(trace, c.at(LAST))
    return vec @ weights.W_U


def path_patched_logits(weights: ModelWeights, clean_input: TokenSeq, donor: RunTrace,
                        sources: Sequence[ComponentRef], targets: Sequence[ComponentRef],
                        clean_trace: RunTrace | None = None) -> np.ndarray:
    """Last-position logits when ``sources`` are patched but may only affect the
    logits through the inputs of ``targets`` (second-order direct effect).

    The difference ``donor - clean`` of each source (at its positions) is added
    to the residual stream read by each downstream target; the targets are
    recomputed from that stream and everything else, sources included, keeps
    its clean value.
    """
    _check_pair(clean_input, donor)
    if not targets:
        raise ValueError("path patching needs at least one target")
    clean = clean_trace if clean_trace is not None else forward(weights, clean_input)
    T = len(clean_input)
    cfg = weights.config
    for c in list(sources):
        if _cache_name(c) not in donor:
            raise NotCaptured(f"donor run lacks {_cache_name(c)}")

    def delta_for(target: ComponentRef) -> np.ndarray:
        delta = np.zeros((T, cfg.d_model))
        for s in sources:
            if not s.feeds(target):
                continue
            name = _cache_name(s)
            diff = donor[name] - clean[name]
            if s.kind == HEAD:
                diff = diff[s.head]
            elif s.kind == LAYER:
                diff = diff.sum(axis=0)
            for p in s.positions(T):
                delta[p] += diff[p]
        return delta

    replaced: dict[str, np.ndarray] = {}
    for g in targets:
        delta = delta_for(g)
        if g.kind == MLP:
            _, out = mlp_output(weights, g.layer, clean[f"blocks.{g.layer}.resid_mid"] + delta)
            name = f"blocks.{g.layer}.mlp.out"
            base = replaced.setdefault(name, np.array(clean[name], copy=True))
            for p in g.positions(T):
                base[p] = out[p]
        else:
            heads = head_outputs(weights, g.layer, clean[f"blocks.{g.layer}.resid_pre"] + delta)
            name = f"blocks.{g.layer}.attn.head_out"
            base = replaced.setdefault(name, np.array(clean[name], copy=True))
            for p in g.positions(T):
                if g.kind == HEAD:
                    base[g.head, p] = heads[g.head, p]
                else:
                    base[:, p] = heads[:, p]

    def pinned(name):
        return replaced.get(name, clean[name])

    hooks = _layer_hooks(
        cfg.n_layers,
        lambda l, v: pinned(f"blocks.{l}.attn.head_out"),
        lambda l, v: pinned(f"blocks.{l}.mlp.out"),
    )
    return forward(weights, clean_input, capture=(), hooks=hooks).logits[-1]


def zero_ablation_hooks(cfg: ModelConfig, T: int, components: Iterable[ComponentRef],
                        clean: RunTrace, replacement: dict | None = None):
    """Hooks that zero (or replace) the given components' outputs and pin the
    rest to ``clean``; only the direct edges of ``components`` change."""
    replacement = replacement or {}

    def apply(l, is_mlp):
        name = f"blocks.{l}.mlp.out" if is_mlp else f"blocks.{l}.attn.head_out"
        out = np.array(clean[name], copy=True)
        for c in components:
            if c.layer != l or (c.kind == MLP) != is_mlp:
                continue
            for p in c.positions(T):
                value = replacement.get(c.node)
                if c.kind == HEAD:
                    out[c.head, p] = 0.0 if value is None else value
                elif c.kind == LAYER:
                    out[:, p] = 0.0 if value is None else value
                else:
                    out[p] = 0.0 if value is None else value
        return out

    return _layer_hooks(cfg.n_layers, lambda l, v: apply(l, False), lambda l, v: apply(l, True))


@dataclass(frozen=True)
class DirectPathAblation:
    """Forward handle that removes the direct edges of ``components`` (zero, or a
    fixed replacement vector keyed by ``ComponentRef.node``) while every other
    component keeps its clean value."""

    weights: ModelWeights
    components: tuple[ComponentRef, ...]
    replacement: tuple = ()  # ((node, vector), ...) kept hashable

    def run(self, tokens: TokenSeq, capture=None) -> RunTrace:
        clean = forward(self.weights, tokens)
        if not self.components:
            return clean if capture is None else forward(self.weights, tokens, capture)
        hooks = zero_ablation_hooks(self.weights.config, len(tokens), self.components, clean,
                                    dict(self.replacement))
        return forward(self.weights, tokens, capture, hooks)
