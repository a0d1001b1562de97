import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qacirc.errors import CorruptWeights, FixtureInfeasible, FormatError, SequenceTooLong
from qacirc.model import (
    FixtureConfig, ModelConfig, TokenSeq, build_fixture, forward, greedy_generate, init_random,
    load_fixture, load_model, save_fixture, save_model,
)
from qacirc.model.io import decode_model, encode_model
from qacirc.probe import ProbeConfig, generate


def small_config(**kw):
    base = dict(n_layers=2, n_heads=2, d_model=8, d_head=4, d_mlp=12, vocab_size=11, max_seq=10)
    base.update(kw)
    return ModelConfig(**base)


def seq(ids, ctx_end=None):
    ids = tuple(ids)
    ctx_end = ctx_end or max(1, len(ids) - 1)
    return TokenSeq(ids, (0, ctx_end), (ctx_end, len(ids)))


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(d_model=9)
    with pytest.raises(ValueError):
        small_config(n_layers=0)


def test_copy_and_memory_contract(weights, probe):
    for ex in probe:
        assert forward(weights, ex.clean_prompt("copy"), capture=()).next_token == ex.swapped
        assert forward(weights, ex.clean_prompt("memory"), capture=()).next_token == ex.answer


def test_capture_does_not_perturb_logits(weights, probe):
    p = probe[0].clean_prompt("copy")
    empty = forward(weights, p, capture=())
    full = forward(weights, p)
    assert empty.cache == {}
    assert np.array_equal(empty.logits, full.logits)


def test_forward_is_deterministic(weights, probe):
    p = probe[3].clean_prompt("memory")
    assert forward(weights, p).digest() == forward(weights, p).digest()


def test_overlong_input_rejected(weights):
    cfg = weights.config
    with pytest.raises(SequenceTooLong):
        forward(weights, seq([5] * (cfg.max_seq + 1)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["none", "rms"]), st.integers(2, 10))
def test_causality_and_row_validity(seed, norm, T):
    cfg = small_config(rng_seed=seed, norm=norm)
    w = init_random(cfg, scale=0.7)
    ids = np.random.default_rng(seed).integers(0, cfg.vocab_size, size=T)
    trace = forward(w, seq(ids))
    for l in range(cfg.n_layers):
        pat = trace[f"blocks.{l}.attn.pattern"]
        assert np.all(pat[:, np.triu_indices(T, 1)[0], np.triu_indices(T, 1)[1]] == 0.0)
        np.testing.assert_allclose(pat.sum(axis=-1), 1.0, atol=1e-6)
    # changing a later token never changes earlier logits
    ids2 = ids.copy()
    ids2[-1] = (ids2[-1] + 1) % cfg.vocab_size
    other = forward(w, seq(ids2))
    assert np.array_equal(trace.logits[:-1], other.logits[:-1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["none", "rms"]))
def test_residual_additivity(seed, norm):
    cfg = small_config(rng_seed=seed, norm=norm)
    w = init_random(cfg, scale=0.7)
    ids = np.random.default_rng(seed).integers(0, cfg.vocab_size, size=7)
    t = forward(w, seq(ids))
    total = t["embed"][-1].copy()
    for l in range(cfg.n_layers):
        total += t[f"blocks.{l}.attn.head_out"][:, -1].sum(axis=0) + t[f"blocks.{l}.mlp.out"][-1]
    np.testing.assert_allclose(total @ w.W_U, t.logits[-1], atol=1e-6)


def test_fixture_residual_additivity(weights, probe):
    t = forward(weights, probe[0].clean_prompt("copy"))
    total = t["embed"][-1].copy()
    for l in range(weights.config.n_layers):
        total += t[f"blocks.{l}.attn.head_out"][:, -1].sum(axis=0) + t[f"blocks.{l}.mlp.out"][-1]
    np.testing.assert_allclose(total @ weights.W_U, t.logits[-1], atol=1e-6)


def test_weights_are_immutable(weights):
    with pytest.raises(ValueError):
        weights.W_E[0, 0] = 1.0
    with pytest.raises(ValueError):
        weights.replace(W_E=np.zeros((3, 3)))


def test_greedy_generate_copy_then_terminator(weights, probe):
    ex = probe[0]
    tokens, traces = greedy_generate(weights, ex.clean_prompt("copy"), 1)
    assert tokens == [ex.swapped] and len(traces) == 1
    a, _ = greedy_generate(weights, ex.clean_prompt("copy"), 3)
    b, _ = greedy_generate(weights, ex.clean_prompt("copy"), 3)
    assert a == b and a[:2] == [ex.swapped, 4]


def test_greedy_generate_step_inputs(weights, probe):
    prompt = probe[1].clean_prompt("copy")
    tokens, traces = greedy_generate(weights, prompt, 2)
    assert traces[1].tokens.ids == prompt.ids + (tokens[0],)


def test_greedy_generate_overflow(weights):
    full = seq([5] * weights.config.max_seq)
    with pytest.raises(SequenceTooLong):
        greedy_generate(weights, full, 1)
    near = seq([5] * (weights.config.max_seq - 1))
    with pytest.raises(SequenceTooLong) as err:
        greedy_generate(weights, near, 3)
    tokens, traces = err.value.partial
    assert len(tokens) == 1 and len(traces) == 1


def test_fixture_without_memory_table(table):
    cfg, w, tab = build_fixture(FixtureConfig(memory_enabled=False))
    full = build_fixture()
    data = generate(ProbeConfig(n=50), 3, full[2], full[1])[0]
    hits = sum(forward(w, ex.clean_prompt("memory"), capture=()).next_token == ex.answer for ex in data)
    assert hits == 0


def test_fixture_without_copy_head_falls_back_to_memory():
    full = build_fixture()
    _, w, _ = build_fixture(FixtureConfig(copy_enabled=False))
    data = generate(ProbeConfig(n=50), 3, full[2], full[1])[0]
    for ex in data:
        assert forward(w, ex.clean_prompt("copy"), capture=()).next_token == ex.answer


def test_fixture_separation(weights, probe):
    """Zeroing the copy head's direct edge breaks copy answers only; zeroing
    the memory MLP breaks memory answers only."""
    from qacirc.instrument import AttnHead, DirectPathAblation, Mlp

    no_copy = DirectPathAblation(weights, (AttnHead(1, 2),))
    no_mem = DirectPathAblation(weights, (Mlp(1),))
    sample = probe[:40]
    assert all(no_copy.run(ex.clean_prompt("copy")).next_token != ex.swapped for ex in sample)
    assert all(no_copy.run(ex.clean_prompt("memory")).next_token == ex.answer for ex in sample)
    assert all(no_mem.run(ex.clean_prompt("copy")).next_token == ex.swapped for ex in sample)
    assert all(no_mem.run(ex.clean_prompt("memory")).next_token != ex.answer for ex in sample)


@pytest.mark.parametrize("kw", [dict(vocab_size=40), dict(d_model=32), dict(n_layers=1),
                                dict(d_mlp=8), dict(copy_head=(0, 1))])
def test_infeasible_fixture(kw):
    with pytest.raises(FixtureInfeasible):
        build_fixture(FixtureConfig(**kw))


def test_save_load_round_trip(tmp_path, fixture_model, probe):
    cfg, w, table = fixture_model
    path = tmp_path / "m.qacm"
    save_fixture(path, cfg, w, table)
    cfg2, w2, table2 = load_fixture(path)
    assert cfg2 == cfg and table2.answers == table.answers
    p = probe[0].clean_prompt("copy")
    assert forward(w2, p).logits.tobytes() == forward(w, p).logits.tobytes()
    save_model(tmp_path / "again.qacm", cfg2, w2, meta={"memory_table": table2.to_dict()})
    assert (tmp_path / "again.qacm").read_bytes() == path.read_bytes()


def test_load_model_plain(tmp_path):
    cfg = small_config()
    w = init_random(cfg)
    save_model(tmp_path / "x", cfg, w)
    cfg2, w2 = load_model(tmp_path / "x")
    assert all(np.array_equal(a, b) for a, b in zip(w.tensors().values(), w2.tensors().values()))


def test_truncated_file_is_corrupt(tmp_path):
    cfg = small_config()
    data = encode_model(cfg, init_random(cfg))
    for cut in (len(data) - 8, len(data) // 2, 12):
        with pytest.raises(CorruptWeights):
            decode_model(data[:cut])
    with pytest.raises(CorruptWeights):
        decode_model(data + b"\0" * 8)


def test_bad_magic_and_version():
    cfg = small_config()
    data = encode_model(cfg, init_random(cfg))
    with pytest.raises(FormatError):
        decode_model(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        decode_model(data[:4] + struct.pack("<H", 2) + data[6:])


def test_header_with_inconsistent_dims():
    import json

    cfg = small_config()
    data = encode_model(cfg, init_random(cfg))
    (hlen,) = struct.unpack_from("<I", data, 6)
    header = json.loads(data[10:10 + hlen])
    header["config"]["d_model"] = 9
    raw = json.dumps(header).encode()
    bad = data[:6] + struct.pack("<I", len(raw)) + raw + data[10 + hlen:]
    with pytest.raises(FormatError):
        decode_model(bad)
