"""Analytic fixture weights with two planted answer pathways.

Nothing is trained. The residual stream is carved into named subspaces and
every pathway weight is a signed indicator matrix:

* a previous-token head copies each position's predecessor's subject code into
  a ``prev`` channel (quadratic positional kernel peaked at ``t - 1``);
* a copy head matches the query subject against that channel, so from the last
  position it attends to the context token right after the subject and writes
  that token's answer code into the output subspace;
* a memory MLP maps a subject code at the current position to the memorised
  answer's output code.

Answer and subject codes are rows of a Sylvester-Hadamard matrix and their
negations, so distinct codes have inner product 0 or ``-n``. Components that
are not part of either pathway get small Gaussian weights that write only into
the output subspace and never into a channel a pathway reads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import FixtureInfeasible
from .transformer import ModelConfig, ModelWeights

SPECIALS = ("PAD", "SEP", "Q", "MASK", "EOS")
MARKERS = ("CONST", "IS_SUBJ", "IS_ANS", "IS_MASK", "IS_SEP", "IS_Q", "IS_FILLER", "IS_PAD", "IS_EOS")


@dataclass(frozen=True)
class FixtureConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_mlp: int = 64
    vocab_size: int = 64
    max_seq: int = 32
    n_subjects: int = 16
    n_answers: int = 32
    n_relations: int = 4
    prev_head: tuple[int, int] = (0, 0)
    copy_head: tuple[int, int] = (1, 2)
    memory_mlp: int = 1
    # logit written for the copied token when the copy head attends fully
    copy_strength: float = 24.0
    # logit written for mem(subject) by the memory MLP
    memory_strength: float = 14.0
    # copy-head score for an exact subject match
    match_strength: float = 12.0
    # copy-head score for any answer-typed key, matched or not
    answer_bonus: float = 1.5
    # copy-head score removed at MASK keys
    mask_penalty: float = 12.0
    # prev-token head score drop per position of distance from t-1 (squared)
    position_sharpness: float = 20.0
    # EOS logit when the current token is an answer
    eos_strength: float = 16.0
    # unembedding scale of MASK, kept small so MASK never wins
    mask_logit_scale: float = 0.1
    noise_scale: float = 0.05
    # output scale of the filler MLPs, whose hidden units are always active
    mlp_noise_scale: float = 5e-4
    seed: int = 0
    copy_enabled: bool = True
    memory_enabled: bool = True

    @property
    def n_fillers(self) -> int:
        return self.vocab_size - len(SPECIALS) - self.n_subjects - self.n_answers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prev_head"] = list(self.prev_head)
        d["copy_head"] = list(self.copy_head)
        return d

    @classmethod
    def from_dict(cls, d) -> "FixtureConfig":
        d = dict(d)
        for key in ("prev_head", "copy_head"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Vocab:
    pad: int
    sep: int
    q: int
    mask: int
    eos: int
    subjects: tuple[int, ...]
    answers: tuple[int, ...]
    fillers: tuple[int, ...]
    relations: tuple[tuple[int, ...], ...]  # answer ids per relation family

    @classmethod
    def build(cls, fcfg: FixtureConfig) -> "Vocab":
        s0 = len(SPECIALS)
        a0 = s0 + fcfg.n_subjects
        f0 = a0 + fcfg.n_answers
        answers = tuple(range(a0, f0))
        families = np.array_split(np.array(answers), fcfg.n_relations)
        return cls(
            pad=0, sep=1, q=2, mask=3, eos=4,
            subjects=tuple(range(s0, a0)),
            answers=answers,
            fillers=tuple(range(f0, fcfg.vocab_size)),
            relations=tuple(tuple(int(a) for a in fam) for fam in families),
        )

    def relation_of_answer(self, answer: int) -> int:
        for r, fam in enumerate(self.relations):
            if answer in fam:
                return r
        raise KeyError(answer)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "relations" else (list(v) if isinstance(v, tuple) else v))
                for k, v in d.items()}

    @classmethod
    def from_dict(cls, d) -> "Vocab":
        return cls(
            pad=d["pad"], sep=d["sep"], q=d["q"], mask=d["mask"], eos=d["eos"],
            subjects=tuple(d["subjects"]), answers=tuple(d["answers"]), fillers=tuple(d["fillers"]),
            relations=tuple(tuple(r) for r in d["relations"]),
        )


@dataclass(frozen=True)
class MemoryTable:
    """Subject -> memorised answer, plus where the fixture planted each pathway."""

    answers: dict[int, int]
    relation: dict[int, int]
    vocab: Vocab
    prev_head: tuple[int, int]
    copy_head: tuple[int, int]
    memory_mlp: int
    fixture: FixtureConfig = field(default_factory=FixtureConfig)

    def __getitem__(self, subject: int) -> int:
        return self.answers[subject]

    def to_dict(self) -> dict:
        return {
            "answers": {str(k): v for k, v in sorted(self.answers.items())},
            "relation": {str(k): v for k, v in sorted(self.relation.items())},
            "vocab": self.vocab.to_dict(),
            "prev_head": list(self.prev_head),
            "copy_head": list(self.copy_head),
            "memory_mlp": self.memory_mlp,
            "fixture": self.fixture.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "MemoryTable":
        return cls(
            answers={int(k): int(v) for k, v in d["answers"].items()},
            relation={int(k): int(v) for k, v in d["relation"].items()},
            vocab=Vocab.from_dict(d["vocab"]),
            prev_head=tuple(d["prev_head"]),
            copy_head=tuple(d["copy_head"]),
            memory_mlp=int(d["memory_mlp"]),
            fixture=FixtureConfig.from_dict(d["fixture"]),
        )


def sylvester(n: int) -> np.ndarray:
    H = np.ones((1, 1))
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


def signed_codes(count: int) -> np.ndarray:
    """``count`` +/-1 codes of width ``ceil(count/2)`` rounded up to a power of two."""
    width = 1
    while 2 * width < count:
        width *= 2
    H = sylvester(width)
    return np.concatenate([H, -H])[:count]


class Layout:
    """Residual-stream subspace offsets for a fixture."""

    def __init__(self, fcfg: FixtureConfig):
        self.ans_width = signed_codes(fcfg.n_answers).shape[1]
        self.subj_width = signed_codes(fcfg.n_subjects).shape[1]
        offset = 0
        self.in_ans = slice(offset, offset + self.ans_width); offset += self.ans_width
        self.out_ans = slice(offset, offset + self.ans_width); offset += self.ans_width
        self.subj = slice(offset, offset + self.subj_width); offset += self.subj_width
        self.prev = slice(offset, offset + self.subj_width); offset += self.subj_width
        self.pos_u = offset; self.pos_v = offset + 1; offset += 2
        self.marker = {}
        for name in MARKERS:
            self.marker[name] = offset
            offset += 1
        self.width = offset


def _check_feasible(fcfg: FixtureConfig, lay: Layout) -> None:
    problems = []
    if fcfg.d_model % fcfg.n_heads:
        problems.append("d_model must be divisible by n_heads")
    d_head = fcfg.d_model // fcfg.n_heads
    if fcfg.n_fillers < 2:
        problems.append(f"vocab_size={fcfg.vocab_size} leaves {fcfg.n_fillers} filler ids (need >= 2)")
    if lay.width > fcfg.d_model:
        problems.append(f"layout needs d_model >= {lay.width}")
    if d_head < max(lay.ans_width, lay.subj_width + 1, 2):
        problems.append(f"d_head={d_head} cannot carry the answer ({lay.ans_width}) or subject codes")
    if fcfg.d_mlp < fcfg.n_subjects:
        problems.append("d_mlp must be >= n_subjects")
    if fcfg.n_subjects < 1 or fcfg.n_answers < 2:
        problems.append("need at least one subject and two answers")
    if not 1 <= fcfg.n_relations <= fcfg.n_answers:
        problems.append("n_relations must be in [1, n_answers]")
    else:
        per_rel = -(-fcfg.n_subjects // fcfg.n_relations)
        if per_rel > fcfg.n_answers // fcfg.n_relations:
            problems.append("too many subjects per relation family for distinct memorised answers")
    (pl, ph), (cl, ch) = fcfg.prev_head, fcfg.copy_head
    if not pl < cl < fcfg.n_layers:
        problems.append("prev-token head must sit in an earlier layer than the copy head")
    if not (0 <= ph < fcfg.n_heads and 0 <= ch < fcfg.n_heads):
        problems.append("head index out of range")
    if not 0 <= fcfg.memory_mlp < fcfg.n_layers:
        problems.append("memory_mlp out of range")
    if problems:
        raise FixtureInfeasible("; ".join(problems))


def _memory_table(fcfg: FixtureConfig, vocab: Vocab, rng: np.random.Generator) -> tuple[dict, dict]:
    answers, relation = {}, {}
    pools = [list(rng.permutation(fam)) for fam in vocab.relations]
    for j, s in enumerate(vocab.subjects):
        r = j % fcfg.n_relations
        answers[s] = int(pools[r].pop())
        relation[s] = r
    return answers, relation


def build_fixture(fcfg: FixtureConfig | None = None):
    """Construct ``(ModelConfig, ModelWeights, MemoryTable)`` for ``fcfg``."""
    fcfg = fcfg or FixtureConfig()
    lay = Layout(fcfg)
    _check_feasible(fcfg, lay)
    d_head = fcfg.d_model // fcfg.n_heads
    cfg = ModelConfig(
        n_layers=fcfg.n_layers, n_heads=fcfg.n_heads, d_model=fcfg.d_model, d_head=d_head,
        d_mlp=fcfg.d_mlp, vocab_size=fcfg.vocab_size, max_seq=fcfg.max_seq, rng_seed=fcfg.seed,
    )
    vocab = Vocab.build(fcfg)
    rng = np.random.default_rng(fcfg.seed)
    mem, relation = _memory_table(fcfg, vocab, rng)

    d, V, L, H, dm = cfg.d_model, cfg.vocab_size, cfg.n_layers, cfg.n_heads, cfg.d_mlp
    M = lay.marker
    ans_codes = signed_codes(fcfg.n_answers)
    subj_codes = signed_codes(fcfg.n_subjects)
    ans_code = dict(zip(vocab.answers, ans_codes))
    subj_code = dict(zip(vocab.subjects, subj_codes))

    W_E = np.zeros((V, d))
    W_E[:, M["CONST"]] = 1.0
    for s, c in subj_code.items():
        W_E[s, lay.subj] = c
        W_E[s, M["IS_SUBJ"]] = 1.0
    for a, c in ans_code.items():
        W_E[a, lay.in_ans] = c
        W_E[a, M["IS_ANS"]] = 1.0
    W_E[vocab.mask, M["IS_MASK"]] = 1.0
    W_E[vocab.sep, M["IS_SEP"]] = 1.0
    W_E[vocab.q, M["IS_Q"]] = 1.0
    W_E[vocab.pad, M["IS_PAD"]] = 1.0
    W_E[vocab.eos, M["IS_EOS"]] = 1.0
    W_E[list(vocab.fillers), M["IS_FILLER"]] = 1.0

    N = float(cfg.max_seq)
    t = np.arange(cfg.max_seq)
    W_pos = np.zeros((cfg.max_seq, d))
    # Integer-scale positions keep the previous-token scores insensitive to small
    # perturbations of the residual stream.
    W_pos[:, lay.pos_u] = t
    W_pos[:, lay.pos_v] = t * t / N

    W_Q = np.zeros((L, H, d, d_head))
    W_K = np.zeros((L, H, d, d_head))
    W_V = np.zeros((L, H, d, d_head))
    W_O = np.zeros((L, H, d_head, d))
    W_in = np.zeros((L, d, dm))
    W_out = np.zeros((L, dm, d))
    out_cols = np.arange(d)[lay.out_ans]
    root = np.sqrt(d_head)

    # Components outside the pathways: random reads, writes confined to the output subspace.
    sigma = fcfg.noise_scale
    pathway_heads = {tuple(fcfg.prev_head), tuple(fcfg.copy_head)}
    for l in range(L):
        for h in range(H):
            if (l, h) in pathway_heads:
                continue
            W_V[l, h] = sigma * rng.standard_normal((d, d_head))
            W_O[l, h][:, out_cols] = sigma * rng.standard_normal((d_head, out_cols.size))
        if l != fcfg.memory_mlp:
            W_in[l] = sigma * rng.standard_normal((d, dm))
            # A unit-size constant offset keeps every ReLU well away from its kink.
            W_in[l, M["CONST"]] = rng.choice([-1.0, 1.0], size=dm)
            W_out[l][:, out_cols] = fcfg.mlp_noise_scale * rng.standard_normal((dm, out_cols.size))
    # Random reads skip the positional channels, whose values grow with the position.
    pos_rows = np.r_[lay.pos_u, lay.pos_v]
    for l in range(L):
        for h in range(H):
            if (l, h) not in pathway_heads:
                W_V[l, h][pos_rows] = 0.0
        if l != fcfg.memory_mlp:
            W_in[l][pos_rows] = 0.0

    # Previous-token head: score(t, s) = -k (s - (t-1))^2 + const(t).
    pl, ph = fcfg.prev_head
    kappa = fcfg.position_sharpness
    W_Q[pl, ph, lay.pos_u, 0] = 2 * kappa * root
    W_Q[pl, ph, M["CONST"], 0] = -2 * kappa * root
    W_Q[pl, ph, M["CONST"], 1] = -kappa * N * root
    W_K[pl, ph, lay.pos_u, 0] = 1.0
    W_K[pl, ph, lay.pos_v, 1] = 1.0
    for i in range(lay.subj_width):
        W_V[pl, ph, lay.subj.start + i, i] = 1.0
        W_O[pl, ph, i, lay.prev.start + i] = 1.0

    # Copy head: subject match against prev channel, plus answer bonus / MASK penalty.
    cl, ch = fcfg.copy_head
    k = lay.subj_width
    for i in range(k):
        W_Q[cl, ch, lay.subj.start + i, i] = fcfg.match_strength * root / k
        W_K[cl, ch, lay.prev.start + i, i] = 1.0
    W_Q[cl, ch, M["IS_SUBJ"], k] = root
    W_K[cl, ch, M["IS_ANS"], k] = fcfg.answer_bonus
    W_K[cl, ch, M["IS_MASK"], k] = -fcfg.mask_penalty
    if fcfg.copy_enabled:
        m = lay.ans_width
        for i in range(m):
            W_V[cl, ch, lay.in_ans.start + i, i] = 1.0
            W_O[cl, ch, i, lay.out_ans.start + i] = fcfg.copy_strength / m
    else:
        W_V[cl, ch] = 0.0

    # Memory MLP: one ReLU unit per subject, threshold at half the code norm.
    lm = fcfg.memory_mlp
    if fcfg.memory_enabled:
        half = k / 2.0
        for j, s in enumerate(vocab.subjects):
            W_in[lm, lay.subj, j] = subj_code[s]
            W_in[lm, M["CONST"], j] = -half
            W_out[lm, j, lay.out_ans] = fcfg.memory_strength / (lay.ans_width * half) * ans_code[mem[s]]

    W_U = np.zeros((d, V))
    for a, c in ans_code.items():
        W_U[lay.out_ans, a] = c
    W_U[M["IS_ANS"], vocab.eos] = fcfg.eos_strength
    W_U[M["IS_MASK"], vocab.mask] = fcfg.mask_logit_scale

    weights = ModelWeights(
        cfg, W_E=W_E, W_pos=W_pos, W_Q=W_Q, W_K=W_K, W_V=W_V, W_O=W_O,
        W_in=W_in, W_out=W_out, ln1=np.ones((L, d)), ln2=np.ones((L, d)), W_U=W_U,
    )
    table = MemoryTable(
        answers=mem, relation=relation, vocab=vocab, prev_head=tuple(fcfg.prev_head),
        copy_head=tuple(fcfg.copy_head), memory_mlp=fcfg.memory_mlp, fixture=fcfg,
    )
    return cfg, weights, table
