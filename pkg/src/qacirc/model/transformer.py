"""A small decoder-only transformer that exposes every component activation.

The residual stream is left un-normalized before the unembedding, so the final
logits are exactly ``(embed + sum of head outputs + sum of MLP outputs) @ W_U``.
Per-block input normalization (``norm="rms"``) is supported but keeps that
decomposition intact because it only touches what a block reads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Mapping

import numpy as np

from ..errors import SequenceTooLong
from ..numerics import masked_softmax

RMS_EPS = 1e-6

Hook = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    vocab_size: int
    max_seq: int
    rng_seed: int = 0
    norm: str = "none"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads * d_head ({self.n_heads} * {self.d_head})"
            )
        if self.norm not in ("none", "rms"):
            raise ValueError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    W_E: np.ndarray  # [vocab, d_model]
    W_pos: np.ndarray  # [max_seq, d_model]
    W_Q: np.ndarray  # [layers, heads, d_model, d_head]
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray  # [layers, heads, d_head, d_model]
    W_in: np.ndarray  # [layers, d_model, d_mlp]
    W_out: np.ndarray  # [layers, d_mlp, d_model]
    ln1: np.ndarray  # [layers, d_model] gains on the attention input
    ln2: np.ndarray  # [layers, d_model] gains on the MLP input
    W_U: np.ndarray  # [d_model, vocab]

    TENSOR_NAMES = ("W_E", "W_pos", "W_Q", "W_K", "W_V", "W_O", "W_in", "W_out", "ln1", "ln2", "W_U")

    def __post_init__(self):
        shapes = expected_shapes(self.config)
        for name in self.TENSOR_NAMES:
            arr = _frozen(getattr(self, name))
            if arr.shape != shapes[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSOR_NAMES}

    def replace(self, **updates) -> "ModelWeights":
        kw = self.tensors()
        kw.update(updates)
        return ModelWeights(self.config, **kw)


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    L, H, d, dh, dm = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head, cfg.d_mlp
    return {
        "W_E": (cfg.vocab_size, d),
        "W_pos": (cfg.max_seq, d),
        "W_Q": (L, H, d, dh),
        "W_K": (L, H, d, dh),
        "W_V": (L, H, d, dh),
        "W_O": (L, H, dh, d),
        "W_in": (L, d, dm),
        "W_out": (L, dm, d),
        "ln1": (L, d),
        "ln2": (L, d),
        "W_U": (d, cfg.vocab_size),
    }


def init_random(cfg: ModelConfig, scale: float = 0.1) -> ModelWeights:
    """Gaussian weights seeded from ``cfg.rng_seed``; used for property tests."""
    rng = np.random.default_rng(cfg.rng_seed)
    kw = {}
    for name, shape in expected_shapes(cfg).items():
        if name in ("ln1", "ln2"):
            kw[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            kw[name] = scale * rng.standard_normal(shape)
    return ModelWeights(cfg, **kw)


@dataclass(frozen=True)
class TokenSeq:
    """Token ids plus the ``[start, end)`` spans of the context and the question."""

    ids: tuple[int, ...]
    context: tuple[int, int]
    question: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(t) for t in self.ids))
        cs, ce = self.context
        if not 0 <= cs < ce <= len(self.ids):
            raise ValueError(f"context window {self.context} is empty or out of range")

    def __len__(self):
        return len(self.ids)

    @property
    def context_start(self) -> int:
        return self.context[0]

    @property
    def context_end(self) -> int:
        return self.context[1]

    @property
    def last(self) -> int:
        return len(self.ids) - 1

    def extend(self, tokens: Iterable[int]) -> "TokenSeq":
        return TokenSeq(self.ids + tuple(int(t) for t in tokens), self.context, self.question)

    def with_ids(self, ids: Iterable[int]) -> "TokenSeq":
        return TokenSeq(tuple(ids), self.context, self.question)


@dataclass(frozen=True)
class RunTrace:
    """Activations captured from one forward pass.

    Cache names: ``embed``, ``blocks.{l}.resid_pre``, ``blocks.{l}.attn.scores``
    (pre-softmax, masked entries ``-inf``), ``blocks.{l}.attn.pattern``,
    ``blocks.{l}.attn.head_out`` ([heads, pos, d_model], output-projected),
    ``blocks.{l}.attn.out``, ``blocks.{l}.resid_mid``, ``blocks.{l}.mlp.hidden``,
    ``blocks.{l}.mlp.out`` and ``resid_final``.
    """

    tokens: TokenSeq
    logits: np.ndarray  # [pos, vocab]
    cache: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def next_token(self) -> int:
        return int(np.argmax(self.logits[-1]))

    def __contains__(self, name: str) -> bool:
        return name in self.cache

    def __getitem__(self, name: str) -> np.ndarray:
        return self.cache[name]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.tokens.ids, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.logits, dtype="<f8").tobytes())
        for name in sorted(self.cache):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.cache[name], dtype="<f8").tobytes())
        return h.hexdigest()


def _normalize(x: np.ndarray, gain: np.ndarray, norm: str) -> np.ndarray:
    if norm == "rms":
        x = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * gain


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def attention_scores(weights: ModelWeights, layer: int, resid: np.ndarray) -> np.ndarray:
    """Scaled, causally masked pre-softmax scores ``[heads, query, key]``."""
    cfg = weights.config
    h = _normalize(resid, weights.ln1[layer], cfg.norm)
    q = np.einsum("td,hde->hte", h, weights.W_Q[layer])
    k = np.einsum("td,hde->hte", h, weights.W_K[layer])
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(cfg.d_head)
    return np.where(causal_mask(resid.shape[0]), scores, -np.inf)


def attention_values(weights: ModelWeights, layer: int, resid: np.ndarray) -> np.ndarray:
    h = _normalize(resid, weights.ln1[layer], weights.config.norm)
    return np.einsum("td,hde->hte", h, weights.W_V[layer])


def heads_from_pattern(weights: ModelWeights, layer: int, pattern: np.ndarray, values: np.ndarray):
    z = pattern @ values
    return np.einsum("hte,hed->htd", z, weights.W_O[layer])


def head_outputs(weights: ModelWeights, layer: int, resid: np.ndarray) -> np.ndarray:
    """Recompute every head's output-projected contribution from a residual stream."""
    scores = attention_scores(weights, layer, resid)
    pattern = masked_softmax(scores, causal_mask(resid.shape[0]))
    return heads_from_pattern(weights, layer, pattern, attention_values(weights, layer, resid))


def mlp_output(weights: ModelWeights, layer: int, resid_mid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = _normalize(resid_mid, weights.ln2[layer], weights.config.norm)
    hidden = np.maximum(h @ weights.W_in[layer], 0.0)
    return hidden, hidden @ weights.W_out[layer]


def forward(
    weights: ModelWeights,
    tokens: TokenSeq,
    capture: Iterable[str] | None = None,
    hooks: Mapping[str, Hook] | None = None,
) -> RunTrace:
    """Run the model on ``tokens``.

    ``capture`` selects which cache entries to keep (``None`` keeps all of
    them, an empty collection keeps none). ``hooks`` maps a cache name to a
    function whose return value replaces that activation for the rest of the
    pass; only ``embed``, ``attn.scores``, ``attn.head_out`` and ``mlp.out``
    are hookable.
    """
    cfg = weights.config
    ids = np.asarray(tokens.ids, dtype=np.int64)
    T = ids.shape[0]
    if T > cfg.max_seq:
        raise SequenceTooLong(f"sequence of length {T} exceeds max_seq={cfg.max_seq}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")
    hooks = hooks or {}
    keep = None if capture is None else frozenset(capture)
    cache: dict[str, np.ndarray] = {}

    def emit(name, value):
        fn = hooks.get(name)
        if fn is not None:
            value = np.asarray(fn(value), dtype=np.float64)
        if keep is None or name in keep:
            value = np.array(value, copy=True)
            value.setflags(write=False)
            cache[name] = value
        return value

    mask = causal_mask(T)
    x = emit("embed", weights.W_E[ids] + weights.W_pos[:T])
    for l in range(cfg.n_layers):
        emit(f"blocks.{l}.resid_pre", x)
        scores = emit(f"blocks.{l}.attn.scores", attention_scores(weights, l, x))
        pattern = emit(f"blocks.{l}.attn.pattern", masked_softmax(scores, mask))
        values = attention_values(weights, l, x)
        head_out = emit(f"blocks.{l}.attn.head_out", heads_from_pattern(weights, l, pattern, values))
        x = x + emit(f"blocks.{l}.attn.out", head_out.sum(axis=0))
        emit(f"blocks.{l}.resid_mid", x)
        hidden, out = mlp_output(weights, l, x)
        emit(f"blocks.{l}.mlp.hidden", hidden)
        x = x + emit(f"blocks.{l}.mlp.out", out)
    emit("resid_final", x)
    logits = x @ weights.W_U
    logits.setflags(write=False)
    return RunTrace(tokens, logits, cache)


def run(model, tokens: TokenSeq, capture=None) -> RunTrace:
    """Forward through plain weights or through any intervened handle exposing ``run``."""
    if isinstance(model, ModelWeights):
        return forward(model, tokens, capture)
    return model.run(tokens, capture)


def config_of(model) -> ModelConfig:
    return model.config if isinstance(model, ModelWeights) else model.weights.config


def greedy_generate(model, prompt: TokenSeq, L: int, capture=None):
    """Greedily decode ``L`` tokens, returning ``(tokens, traces)``.

    Step ``j`` sees ``prompt`` followed by the first ``j`` generated tokens.
    A step whose output would not fit in ``max_seq`` raises
    :class:`SequenceTooLong` with the partial ``(tokens, traces)`` attached.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    max_seq = config_of(model).max_seq
    out: list[int] = []
    traces: list[RunTrace] = []
    seq = prompt
    for _ in range(L):
        if len(seq) + 1 > max_seq:
            raise SequenceTooLong(
                f"generation would exceed max_seq={max_seq} after {len(out)} tokens",
                partial=(out, traces),
            )
        if isinstance(model, ModelWeights):
            trace = forward(model, seq, capture)
        else:
            trace = model.run(seq, capture)
        tok = trace.next_token
        out.append(tok)
        traces.append(trace)
        seq = seq.extend([tok])
    return out, traces
