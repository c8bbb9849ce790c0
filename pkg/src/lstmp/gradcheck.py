"""Finite-difference check of the full training objective on a tiny random model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, finite_diff_check
from .model import END, START, Captioner, ModelConfig, init_params
from .trainer import batch_loss, make_batch

TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradcheckSetup:
    D_v: int = 6
    D_w: int = 8
    D_h: int = 8
    vocab_size: int = 12
    n_objects: int = 4
    caption_tokens: int = 3
    # parameters are redrawn at this scale: at the +-0.08 training init many
    # LSTM gradients sit near 1e-8, where central differences are all noise
    param_scale: float = 0.5
    h: float = 1e-4

    def __post_init__(self):
        if self.n_objects + 2 > self.vocab_size:
            raise ValueError("vocabulary too small for the requested object count")
        if self.caption_tokens < 1:
            raise ValueError("caption needs at least one token")


def gradcheck(seed: int = 0, setup: GradcheckSetup = GradcheckSetup(), lambda_: float = 0.3,
              mu: float = 1.0) -> dict[str, float]:
    """Max relative error per parameter tensor for the combined loss.

    The caption mixes object and non-object words so that every term of
    the objective, and every parameter, receives gradient.
    """
    rng = np.random.default_rng(seed)
    objects = tuple(range(2, 2 + setup.n_objects))
    cfg = ModelConfig(setup.D_v, setup.D_w, setup.D_h, setup.vocab_size, objects)
    params = init_params(cfg, seed)
    for _, t in params.named():
        t.values[...] = rng.uniform(-setup.param_scale, setup.param_scale, t.shape)
    image = rng.normal(size=(1, setup.D_v))
    detections = rng.uniform(0.05, 0.95, size=(1, setup.n_objects))
    plain = np.arange(2 + setup.n_objects, setup.vocab_size)
    words = [int(rng.choice(objects)) if (i % 2 == 0 or plain.size == 0) else int(rng.choice(plain))
             for i in range(setup.caption_tokens)]
    caption = [START, *words, END]
    membership = np.zeros(setup.vocab_size, dtype=bool)
    membership[list(objects)] = True

    cap = Captioner(cfg, params)
    batch = make_batch(image, detections, [caption], objects)
    tape = Tape()
    br = batch_loss(tape, cap, batch, membership, lambda_, mu)
    params.zero_grad()
    tape.backward(br.total_tensor)

    def f() -> float:
        return batch_loss(Tape(record=False), cap, batch, membership, lambda_, mu).total

    out = {}
    for name, t in params.named():
        out[name] = finite_diff_check(f, [t], h=setup.h, analytic=[t.grad.copy()])
    return out
