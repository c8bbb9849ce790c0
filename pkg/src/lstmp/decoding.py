"""Greedy decoding with per-step pointing-gate traces."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .model import END, START, Captioner, ModelConfig, ModelParams, image_init_step, lstm_step, zero_state


@dataclass
class DecodeTrace:
    tokens: list[int] = field(default_factory=list)
    # (p_generate, p_copy) per emitted token
    gates: list[tuple[float, float]] = field(default_factory=list)
    copy_source: list[bool] = field(default_factory=list)


def greedy_decode_batch(cfg: ModelConfig, params: ModelParams, detections, images, max_len: int | None = None,
                        gate_override: float | None = None) -> list[DecodeTrace]:
    """Argmax decoding for a batch of images.

    Ties go to the lowest vocabulary index (``np.argmax`` semantics).
    Each row stops after emitting END or after ``max_len`` tokens.
    """
    max_len = cfg.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    imgs = np.atleast_2d(np.asarray(images, dtype=np.float64))
    dets = np.atleast_2d(np.asarray(detections, dtype=np.float64))
    B = imgs.shape[0]
    cap = Captioner(cfg, params)
    tape = Tape(record=False)
    state = image_init_step(tape, params, imgs, zero_state(cfg, B))
    object_rows = tape.gather(params.E, cap.object_idx)
    word = np.full(B, START, dtype=np.int64)
    traces = [DecodeTrace() for _ in range(B)]
    live = np.ones(B, dtype=bool)
    for _ in range(max_len):
        state, w = lstm_step(tape, params, state, word)
        out = cap.step_output(tape, state, w, dets, object_rows, gate_override)
        fused = out.fused.values
        word = fused.argmax(axis=1)
        p = np.broadcast_to(out.p_t.values.reshape(-1, 1), (B, 1))[:, 0]
        rows = np.arange(B)
        copy_mass = p * (out.copy_probs.values @ cap.S)[rows, word]
        gen_mass = (1.0 - p) * out.gen_probs.values[rows, word]
        for b in np.flatnonzero(live):
            tr = traces[b]
            tr.tokens.append(int(word[b]))
            pc = float(p[b])
            tr.gates.append((1.0 - pc, pc))
            tr.copy_source.append(bool(copy_mass[b] > gen_mass[b]))
        live &= word != END
        if not live.any():
            break
    return traces


def greedy_decode(cfg: ModelConfig, params: ModelParams, detections, image, max_len: int | None = None,
                  gate_override: float | None = None) -> DecodeTrace:
    return greedy_decode_batch(cfg, params, detections, image, max_len, gate_override)[0]


def trace_rows(trace: DecodeTrace, tokens: Sequence[str]) -> list[dict]:
    return [{"token": tokens[t], "p_generate": g[0], "p_copy": g[1], "copied": c}
            for t, g, c in zip(trace.tokens, trace.gates, trace.copy_source)]


def trace_report(trace: DecodeTrace, tokens: Sequence[str], fmt: str = "text") -> str:
    """Per-token gate table as aligned text or JSON."""
    rows = trace_rows(trace, tokens)
    if fmt == "json":
        return json.dumps(rows)
    if not rows:
        return ""
    width = max(5, *(len(r["token"]) for r in rows))
    lines = [f"{'token':<{width}}  p_gen   p_copy  copied"]
    for r in rows:
        lines.append(f"{r['token']:<{width}}  {r['p_generate']:.4f}  {r['p_copy']:.4f}  {'*' if r['copied'] else ''}")
    return "\n".join(lines)


def gate_statistics(traces: Sequence[DecodeTrace], membership: np.ndarray) -> dict:
    """Mean p_copy at steps emitting object words vs non-object words."""
    obj, other = [], []
    for tr in traces:
        for t, (_, pc) in zip(tr.tokens, tr.gates):
            if t in (END, START):
                continue
            (obj if membership[t] else other).append(pc)
    return {
        "mean_p_copy_object": float(np.mean(obj)) if obj else float("nan"),
        "mean_p_copy_function": float(np.mean(other)) if other else float("nan"),
        "n_object_steps": len(obj),
        "n_function_steps": len(other),
    }
