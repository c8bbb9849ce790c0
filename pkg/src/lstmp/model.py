"""LSTM with pointing: image-triggered LSTM, copy layer, pointing gate.

Every forward computation is expressed on a :class:`~lstmp.autodiff.Tape`
and works on a batch of B sentences at once.  Vectors in the docstrings
below are per-sample; in code they are rows of ``(B, n)`` arrays.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tape, Tensor, parameter

END = 0
START = 1

INIT_RANGE = 0.08


@dataclass(frozen=True)
class ModelConfig:
    D_v: int
    D_w: int
    D_h: int
    vocab_size: int
    # full-vocabulary index of each object slot, in detector order
    object_words: tuple[int, ...]
    max_len: int = 16

    def __post_init__(self):
        object.__setattr__(self, "object_words", tuple(int(i) for i in self.object_words))
        for name in ("D_v", "D_w", "D_h", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 1 <= self.D_c <= self.vocab_size:
            raise ValueError("need 1 <= D_c <= |W|")
        if len(set(self.object_words)) != self.D_c:
            raise ValueError("object_words must map slots to distinct vocabulary indices")
        if any(not 0 <= w < self.vocab_size for w in self.object_words):
            raise ValueError("object word index outside the vocabulary")
        if END in self.object_words or START in self.object_words:
            raise ValueError("start/end tokens cannot be object words")

    @property
    def D_c(self) -> int:
        return len(self.object_words)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_words"] = list(self.object_words)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    E: Tensor       # |W| x D_w word embeddings, shared by input and output
    W_img: Tensor   # D_w x D_v
    W_i: Tensor     # D_h x (D_w + D_h)
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    b_i: Tensor     # D_h
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor
    M_d: Tensor     # D_w x D_h
    M_c1: Tensor    # D_w x D_c
    M_c2: Tensor    # D_c x D_h
    G_s: Tensor     # D_w
    G_h: Tensor     # D_h
    b_p: Tensor     # scalar, stored with shape (1,)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: parameter(t.values.copy(), name=n) for n, t in self.named()})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, Dw = cfg.D_h, cfg.D_w
    gate = (H, Dw + H)
    return {
        "E": (cfg.vocab_size, Dw),
        "W_img": (Dw, cfg.D_v),
        "W_i": gate, "W_f": gate, "W_o": gate, "W_g": gate,
        "b_i": (H,), "b_f": (H,), "b_o": (H,), "b_g": (H,),
        "M_d": (Dw, H),
        "M_c1": (Dw, cfg.D_c),
        "M_c2": (cfg.D_c, H),
        "G_s": (Dw,),
        "G_h": (H,),
        "b_p": (1,),
    }


def _is_bias(name: str) -> bool:
    return name.startswith("b_")


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Weights uniform in [-0.08, 0.08]; biases (including b_p) zero."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        if _is_bias(name):
            vals = np.zeros(shape)
        else:
            vals = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
        out[name] = parameter(vals, name=name)
    return ModelParams(**out)


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    t: int = 0


@dataclass
class StepOutput:
    fused: Tensor            # (B, |W|)
    gen_probs: Tensor        # (B, |W|)
    copy_probs: Tensor       # (B, D_c)
    copy_scores_raw: Tensor  # (B, D_c)
    p_t: Tensor              # (B, 1)


def zero_state(cfg: ModelConfig, batch: int = 1) -> DecoderState:
    return DecoderState(Tensor(np.zeros((batch, cfg.D_h))), Tensor(np.zeros((batch, cfg.D_h))), 0)


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _cell(tape: Tape, params: ModelParams, x: Tensor, state: DecoderState) -> DecoderState:
    xh = tape.concat([x, state.h], axis=-1)
    i = tape.sigmoid(tape.add(tape.matvec(params.W_i, xh), params.b_i))
    f = tape.sigmoid(tape.add(tape.matvec(params.W_f, xh), params.b_f))
    o = tape.sigmoid(tape.add(tape.matvec(params.W_o, xh), params.b_o))
    g = tape.tanh(tape.add(tape.matvec(params.W_g, xh), params.b_g))
    c = tape.add(tape.mul(f, state.c), tape.mul(i, g))
    h = tape.mul(o, tape.tanh(c))
    return DecoderState(h, c, state.t + 1)


def image_init_step(tape: Tape, params: ModelParams, image, state: DecoderState) -> DecoderState:
    """Feed the projected image as the LSTM input at t=0; no word is emitted."""
    img = _as_batch(image)
    if img.shape[1] != params.W_img.shape[1]:
        raise ValueError(f"image has dimension {img.shape[1]}, expected {params.W_img.shape[1]}")
    if state.t != 0:
        raise ValueError("image trigger must start from the zero state")
    x = tape.matvec(params.W_img, Tensor(img))
    return _cell(tape, params, x, state)


def lstm_step(tape: Tape, params: ModelParams, state: DecoderState, word_index) -> tuple[DecoderState, Tensor]:
    """One LSTM step on the embedding of ``word_index``.

    Returns the new state and the input embedding (needed by the gate).
    """
    idx = np.atleast_1d(np.asarray(word_index, dtype=np.int64))
    w = tape.gather(params.E, idx)
    return _cell(tape, params, w, state), w


def decoder_scores(tape: Tape, params: ModelParams, state: DecoderState) -> Tensor:
    """Generation scores ``E[w] . (M_d h)`` for every word (pre-softmax)."""
    return tape.matvec(params.E, tape.matvec(params.M_d, state.h))


def copy_scores(tape: Tape, params: ModelParams, state: DecoderState, detections,
                object_rows: Tensor) -> Tensor:
    """Copy scores ``E[o] . M_c1 (I_c * sigmoid(M_c2 h))`` for each object slot.

    ``object_rows`` is the ``(D_c, D_w)`` gather of object-word embeddings.
    """
    det = _as_batch(detections)
    if det.shape[1] != params.M_c2.shape[0]:
        raise ValueError(f"detections have {det.shape[1]} entries, expected {params.M_c2.shape[0]}")
    gate = tape.sigmoid(tape.matvec(params.M_c2, state.h))
    gated = tape.mul(Tensor(det), gate)
    return tape.matvec(object_rows, tape.matvec(params.M_c1, gated))


def pointing_gate(tape: Tape, params: ModelParams, word_embedding: Tensor, state: DecoderState) -> Tensor:
    """``sigmoid(G_s . w_t + G_h . h_t + b_p)``, shape (B, 1)."""
    z = tape.add(tape.matvec(params.G_s, word_embedding), tape.matvec(params.G_h, state.h))
    return tape.sigmoid(tape.add(z, params.b_p))


def expansion_matrix(cfg: ModelConfig) -> np.ndarray:
    return scatter_matrix(cfg.object_words, cfg.vocab_size)


def scatter_matrix(object_index_map: Sequence[int], vocab_size: int) -> np.ndarray:
    """0/1 matrix sending object slot k to vocabulary column ``object_index_map[k]``."""
    idx = [int(i) for i in object_index_map]
    if len(set(idx)) != len(idx):
        raise ValueError("object index map is not injective")
    S = np.zeros((len(idx), vocab_size))
    S[np.arange(len(idx)), idx] = 1.0
    return S


def fuse_step(tape: Tape, gen_scores: Tensor, copy_scores_raw: Tensor, p_t,
              object_index_map: Sequence[int] | np.ndarray) -> StepOutput:
    """Mix the two softmaxes: ``(1 - p) * softmax(gen) + p * expand(softmax(copy))``.

    ``object_index_map`` is either the slot-to-vocabulary index list or a
    precomputed :func:`scatter_matrix`.
    """
    S = np.asarray(object_index_map)
    if S.ndim == 1:
        S = scatter_matrix(S, gen_scores.shape[-1])
    p = p_t if isinstance(p_t, Tensor) else Tensor([float(p_t)])
    gen = tape.softmax(gen_scores)
    cp = tape.softmax(copy_scores_raw)
    expanded = tape.matvec(S.T, cp)
    fused = tape.add(tape.mul(tape.sub(1.0, p), gen), tape.mul(p, expanded))
    return StepOutput(fused, gen, cp, copy_scores_raw, p)


class Captioner:
    """Bundles config, params and cached constants for repeated forwards.

    ``gate_override`` replaces the learned pointing gate with a constant
    (0.0 gives the pure-generation captioner used for LM pretraining and the
    no-copy baseline).
    """

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params
        self.S = expansion_matrix(cfg)
        self.object_idx = np.asarray(cfg.object_words, dtype=np.int64)

    def step_output(self, tape: Tape, state: DecoderState, w: Tensor, detections: np.ndarray,
                    object_rows: Tensor, gate_override: float | None) -> StepOutput:
        gen = decoder_scores(tape, self.params, state)
        raw = copy_scores(tape, self.params, state, detections, object_rows)
        if gate_override is None:
            p = pointing_gate(tape, self.params, w, state)
        else:
            p = Tensor(np.full((gen.shape[0], 1), float(gate_override)))
        return fuse_step(tape, gen, raw, p, self.S)

    def forward(self, tape: Tape, images, detections, captions: np.ndarray,
                gate_override: float | None = None) -> list[StepOutput]:
        """Teacher-forced pass; ``captions`` is a (B, T) index array.

        Row b must start with START.  Step t consumes ``captions[:, t]`` and
        predicts ``captions[:, t + 1]``, so T - 1 outputs are returned.
        """
        caps = np.atleast_2d(np.asarray(captions, dtype=np.int64))
        if caps.shape[1] < 2:
            raise ValueError("caption needs at least start and end tokens")
        if caps.shape[1] > self.cfg.max_len + 1:
            raise ValueError(f"caption of length {caps.shape[1]} exceeds max_len={self.cfg.max_len}")
        if not (caps[:, 0] == START).all():
            raise ValueError("captions must begin with the start token")
        if caps.min() < 0 or caps.max() >= self.cfg.vocab_size:
            raise IndexError("caption word index out of range")
        imgs = _as_batch(images)
        dets = _as_batch(detections)
        B = caps.shape[0]
        if imgs.shape[0] != B or dets.shape[0] != B:
            raise ValueError("images, detections and captions disagree on batch size")
        state = image_init_step(tape, self.params, imgs, zero_state(self.cfg, B))
        object_rows = tape.gather(self.params.E, self.object_idx)
        steps = []
        for t in range(caps.shape[1] - 1):
            state, w = lstm_step(tape, self.params, state, caps[:, t])
            steps.append(self.step_output(tape, state, w, dets, object_rows, gate_override))
        return steps


def forward_sequence(params: ModelParams, cfg: ModelConfig, image, detections, caption: Sequence[int],
                     tape: Tape | None = None, gate_override: float | None = None) -> list[StepOutput]:
    """Single-caption teacher-forced forward (batch of one)."""
    caption = list(caption)
    if caption[-1] != END:
        raise ValueError("caption must end with the end token")
    tape = tape if tape is not None else Tape(record=False)
    return Captioner(cfg, params).forward(tape, image, detections, np.array([caption]), gate_override)


# -- checkpoints -------------------------------------------------------------

def params_to_json(params: ModelParams) -> dict:
    return {n: {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()} for n, t in params.named()}


def params_from_json(d: dict, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        if name not in d:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        entry = d[name]
        if tuple(entry["shape"]) != tuple(shape):
            raise ValueError(f"parameter {name!r} has shape {tuple(entry['shape'])}, config expects {tuple(shape)}")
        vals = np.array(entry["values"], dtype=np.float64)
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"parameter {name!r} has {vals.size} values for shape {tuple(shape)}")
        out[name] = vals.reshape(shape)
    return out


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, extra: dict | None = None) -> None:
    doc = {"config": cfg.to_dict(), "params": params_to_json(params)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[ModelConfig, ModelParams, dict]:
    """Load a checkpoint; if ``cfg`` is given every shape is checked against it."""
    doc = json.loads(Path(path).read_text())
    file_cfg = ModelConfig.from_dict(doc["config"])
    cfg = cfg or file_cfg
    arrays = params_from_json(doc["params"], param_shapes(cfg))
    params = ModelParams(**{n: parameter(v, name=n) for n, v in arrays.items()})
    extra = {k: v for k, v in doc.items() if k not in ("config", "params")}
    return cfg, params, extra
