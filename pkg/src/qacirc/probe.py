"""Synthetic copy/memory probe dataset in the fixture vocabulary.

Every example has one context layout ``[filler..., subject, slot, next, filler...]``
realised five ways that differ only at the subject / slot / next positions, so
all variants have the same length and the same last position:

============== ========== ======== ===========
variant        subject    slot     next
============== ========== ======== ===========
orig           s          a        filler
copy           s          b != a   filler
memory         s          MASK     f (fallback)
corrupt        s''        c        filler
============== ========== ======== ===========

The question is ``[SEP, Q, s]`` and its corrupted twin ``[SEP, Q, s']``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientEntropy, PartitionError
from .model import MemoryTable, TokenSeq, forward
from .model.fixture import signed_codes

log = logging.getLogger(__name__)

FIELDS = (
    "id", "question", "subject", "answer", "context_copy", "context_memory",
    "context_orig", "context_corrupt", "question_corrupt", "answer_position", "relation",
)
MODES = ("copy", "memory")


@dataclass(frozen=True)
class ProbeConfig:
    n: int = 200
    pre_filler: tuple[int, int] = (2, 6)  # inclusive range of filler count before the subject
    post_filler: tuple[int, int] = (2, 6)  # inclusive, counted after the slot (includes ``next``)
    max_attempts_per_example: int = 20


@dataclass(frozen=True)
class ProbeExample:
    id: int
    question: tuple[int, ...]
    subject: int
    answer: int
    context_copy: tuple[int, ...]
    context_memory: tuple[int, ...]
    context_orig: tuple[int, ...]
    context_corrupt: tuple[int, ...]
    question_corrupt: tuple[int, ...]
    answer_position: int
    relation: int

    @property
    def swapped(self) -> int:
        return self.context_copy[self.answer_position]

    @property
    def fallback(self) -> int:
        """Answer token planted next to MASK in the memory context."""
        return self.context_memory[self.answer_position + 1]

    def target(self, mode: str) -> int:
        if mode == "copy":
            return self.swapped
        if mode == "memory":
            return self.answer
        raise ValueError(f"unknown mode {mode!r}")

    def context(self, variant: str) -> tuple[int, ...]:
        return getattr(self, f"context_{variant}")

    def prompt(self, variant: str, corrupt_question: bool = False) -> TokenSeq:
        ctx = self.context(variant)
        q = self.question_corrupt if corrupt_question else self.question
        return make_prompt(ctx, q)

    def clean_prompt(self, mode: str) -> TokenSeq:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        return self.prompt(mode)

    def donor_prompt(self) -> TokenSeq:
        return self.prompt("corrupt", corrupt_question=True)

    def to_json(self) -> dict:
        out = {}
        for name in FIELDS:
            v = getattr(self, name)
            out[name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json(cls, d: dict) -> "ProbeExample":
        kw = {name: (tuple(d[name]) if isinstance(d[name], list) else d[name]) for name in FIELDS}
        return cls(**kw)


def make_prompt(context: Sequence[int], question: Sequence[int]) -> TokenSeq:
    nc = len(context)
    return TokenSeq(tuple(context) + tuple(question), (0, nc), (nc, nc + len(question)))


def _pick(rng: np.random.Generator, pool: Iterable[int], exclude=()) -> int:
    options = [t for t in pool if t not in set(exclude)]
    return int(options[rng.integers(len(options))])


def complement(table: MemoryTable, answer: int) -> int | None:
    """Answer whose output code is the negation of ``answer``'s, if the vocabulary has one."""
    answers = table.vocab.answers
    width = signed_codes(len(answers)).shape[1]
    i = answers.index(answer)
    j = i + width if i < width else i - width
    return answers[j] if 0 <= j < len(answers) else None


def _build(i, subject, swap, table: MemoryTable, pcfg: ProbeConfig, rng) -> ProbeExample:
    vocab = table.vocab
    a = table[subject]
    pre = int(rng.integers(pcfg.pre_filler[0], pcfg.pre_filler[1] + 1))
    post = int(rng.integers(max(2, pcfg.post_filler[0]), max(2, pcfg.post_filler[1]) + 1))
    fill = [int(t) for t in rng.choice(vocab.fillers, size=pre + 1 + post)]
    base = fill[:pre] + [subject, a] + fill[pre + 1:]
    slot = pre + 1

    # A copied complement code would cancel mem(s) in the logits, so keep it out of the context.
    fallback = _pick(rng, vocab.answers, exclude=(a, swap, complement(table, a)))
    q_sub = _pick(rng, [s for s in vocab.subjects if s != subject and table[s] != swap])
    others = [s for s in vocab.subjects if s not in (subject, q_sub)]
    c_sub = _pick(rng, others) if others else _pick(rng, vocab.fillers)
    c_ans = _pick(rng, vocab.answers, exclude=(a, swap, fallback, table[q_sub], complement(table, a)))

    def variant(subj, slot_tok, nxt=None):
        ctx = list(base)
        ctx[pre], ctx[slot] = subj, slot_tok
        if nxt is not None:
            ctx[slot + 1] = nxt
        return tuple(ctx)

    return ProbeExample(
        id=i,
        question=(vocab.sep, vocab.q, subject),
        subject=subject,
        answer=a,
        context_copy=variant(subject, swap),
        context_memory=variant(subject, vocab.mask, fallback),
        context_orig=variant(subject, a),
        context_corrupt=variant(c_sub, c_ans),
        question_corrupt=(vocab.sep, vocab.q, q_sub),
        answer_position=slot,
        relation=table.relation[subject],
    )


def is_valid(weights, ex: ProbeExample) -> bool:
    """The model must answer the swapped token from context and mem(s) under MASK."""
    copy_ok = forward(weights, ex.clean_prompt("copy"), capture=()).next_token == ex.swapped
    mem_ok = forward(weights, ex.clean_prompt("memory"), capture=()).next_token == ex.answer
    return copy_ok and mem_ok


def generate(pcfg: ProbeConfig, seed: int, table: MemoryTable, weights=None):
    """Return ``(examples, rejected)``; invalid draws are replaced, never dropped."""
    if pcfg.n < 1:
        raise ValueError("n must be >= 1")
    vocab = table.vocab
    combos = [(s, b) for s in vocab.subjects for b in vocab.answers if b != table[s]]
    if pcfg.n > len(combos):
        raise InsufficientEntropy(
            f"requested {pcfg.n} examples but only {len(combos)} distinct (subject, swap) pairs exist"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(combos))
    examples: list[ProbeExample] = []
    rejected = 0
    for idx in order:
        if len(examples) == pcfg.n:
            break
        subject, swap = combos[idx]
        for _ in range(pcfg.max_attempts_per_example):
            ex = _build(len(examples), subject, swap, table, pcfg, rng)
            if weights is None or is_valid(weights, ex):
                examples.append(ex)
                break
            rejected += 1
    if len(examples) < pcfg.n:
        raise InsufficientEntropy(f"only {len(examples)} valid examples after {rejected} rejections")
    if rejected:
        log.info("probe generation rejected %d draws", rejected)
    return examples, rejected


def gen_probe(pcfg: ProbeConfig, seed: int, table: MemoryTable, weights=None) -> list[ProbeExample]:
    return generate(pcfg, seed, table, weights)[0]


def partition_by_relation(dataset: Sequence[ProbeExample], k_parts: int) -> list[list[ProbeExample]]:
    """Split into ``k_parts`` groups of whole relation families (round-robin over sorted tags)."""
    if k_parts < 2:
        raise PartitionError("k_parts must be >= 2")
    relations = sorted({ex.relation for ex in dataset})
    if len(relations) < k_parts:
        raise PartitionError(f"{len(relations)} relation(s) cannot fill {k_parts} partitions")
    group = {r: i % k_parts for i, r in enumerate(relations)}
    parts: list[list[ProbeExample]] = [[] for _ in range(k_parts)]
    for ex in dataset:
        parts[group[ex.relation]].append(ex)
    return parts


def plant_duplicate(ex: ProbeExample, rng: np.random.Generator, variant: str = "copy") -> TokenSeq:
    """Copy-context prompt with the slot token repeated at a random filler position
    that is not adjacent to the subject."""
    ctx = list(ex.context(variant))
    forbidden = {ex.answer_position - 1, ex.answer_position, ex.answer_position + 1}
    spots = [i for i in range(len(ctx)) if i not in forbidden]
    pos = spots[int(rng.integers(len(spots)))]
    ctx[pos] = ctx[ex.answer_position]
    return make_prompt(ctx, ex.question)


def dumps_jsonl(dataset: Iterable[ProbeExample]) -> bytes:
    lines = [json.dumps(ex.to_json(), separators=(",", ":")) for ex in dataset]
    return ("\n".join(lines) + "\n").encode() if lines else b""


def fingerprint(dataset: Iterable[ProbeExample]) -> str:
    return hashlib.sha256(dumps_jsonl(dataset)).hexdigest()


def write_jsonl(dataset: Iterable[ProbeExample], path) -> None:
    from .model.io import atomic_write_bytes

    atomic_write_bytes(path, dumps_jsonl(dataset))


def read_jsonl(path) -> list[ProbeExample]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(ProbeExample.from_json(json.loads(line)))
    return out
