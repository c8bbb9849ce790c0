import json

import numpy as np
import pytest

from lstmp.decoding import DecodeTrace, gate_statistics, greedy_decode, greedy_decode_batch, trace_report, trace_rows
from lstmp.model import END, ModelConfig, init_params

from conftest import randomize

CFG = ModelConfig(D_v=3, D_w=4, D_h=5, vocab_size=8, object_words=(5, 6, 7), max_len=6)


def test_zero_params_repeat_lowest_index_word():
    p = init_params(CFG, 0)
    for _, t in p.named():
        t.values[...] = 0.0
    p.b_p.values[0] = -40.0  # pure generation: every word ties
    tr = greedy_decode(CFG, p, np.zeros(CFG.D_c), np.zeros(CFG.D_v))
    assert tr.tokens == [END]
    # copy-only: END is out of the running, so the lowest object index wins until max_len
    tr = greedy_decode(CFG, p, np.zeros(CFG.D_c), np.zeros(CFG.D_v), gate_override=1.0)
    assert tr.tokens == [5] * CFG.max_len


def test_gate_one_emits_only_object_words():
    rng = np.random.default_rng(0)
    p = randomize(init_params(CFG, 0), rng)
    dets = rng.uniform(size=(10, CFG.D_c))
    for tr in greedy_decode_batch(CFG, p, dets, rng.normal(size=(10, CFG.D_v)), gate_override=1.0):
        assert len(tr.tokens) == CFG.max_len
        assert set(tr.tokens) <= set(CFG.object_words)
        assert all(tr.copy_source)


def test_traces_are_consistent_and_deterministic():
    rng = np.random.default_rng(1)
    p = randomize(init_params(CFG, 0), rng, scale=1.0)
    dets, imgs = rng.uniform(size=(6, CFG.D_c)), rng.normal(size=(6, CFG.D_v))
    a = greedy_decode_batch(CFG, p, dets, imgs)
    b = greedy_decode_batch(CFG, p, dets, imgs)
    assert [t.tokens for t in a] == [t.tokens for t in b]
    for i, tr in enumerate(a):
        assert len(tr.gates) == len(tr.tokens) == len(tr.copy_source) <= CFG.max_len
        assert all(pd + pc == 1.0 for pd, pc in tr.gates)
        assert END not in tr.tokens[:-1]
        assert greedy_decode(CFG, p, dets[i], imgs[i]).tokens == tr.tokens
    with pytest.raises(ValueError):
        greedy_decode(CFG, p, dets[0], imgs[0], max_len=0)


def test_trace_report():
    words = ["<end>", "<start>", "a", "b", "c", "cat", "dog", "emu"]
    assert trace_report(DecodeTrace(), words) == ""
    assert json.loads(trace_report(DecodeTrace(), words, fmt="json")) == []
    tr = DecodeTrace([2, 5, 0], [(0.9, 0.1), (0.25, 0.75), (0.5, 0.5)], [False, True, False])
    rows = json.loads(trace_report(tr, words, fmt="json"))
    assert [r["token"] for r in rows] == ["a", "cat", "<end>"]
    assert all(r["p_generate"] + r["p_copy"] == 1.0 for r in rows)
    lines = trace_report(tr, words).splitlines()
    assert len(lines) == 4 and lines[2].rstrip().endswith("*")
    assert trace_rows(tr, words)[1]["copied"] is True


def test_gate_statistics():
    member = np.zeros(8, dtype=bool)
    member[[5, 6, 7]] = True
    tr = DecodeTrace([2, 5, 6, 0], [(0.8, 0.2), (0.1, 0.9), (0.3, 0.7), (1.0, 0.0)], [False] * 4)
    stats = gate_statistics([tr], member)
    assert stats["mean_p_copy_object"] == pytest.approx(0.8)
    assert stats["mean_p_copy_function"] == pytest.approx(0.2)
    assert (stats["n_object_steps"], stats["n_function_steps"]) == (2, 1)
