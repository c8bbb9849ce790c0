"""Training objectives for the pointing captioner.

All losses take the per-step outputs of a teacher-forced batch and return
a scalar tensor: the mean over sentences of a per-sentence quantity.
``mask`` (shape ``(B, steps)``) marks real, non-padding steps; when it is
omitted every step counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .model import END, Captioner, StepOutput

DEFAULT_LAMBDA = 0.3
DEFAULT_MU = 1.0


@dataclass(frozen=True)
class BagOfObjects:
    slots: frozenset[int]

    @classmethod
    def from_caption(cls, caption: Iterable[int], object_words: Sequence[int]) -> "BagOfObjects":
        slot_of = {w: k for k, w in enumerate(object_words)}
        return cls(frozenset(slot_of[w] for w in caption if w in slot_of))

    def indicator(self, n_slots: int) -> np.ndarray:
        v = np.zeros(n_slots)
        if self.slots:
            if max(self.slots) >= n_slots or min(self.slots) < 0:
                raise ValueError("bag slot outside the object vocabulary")
            v[list(self.slots)] = 1.0
        return v

    def __len__(self) -> int:
        return len(self.slots)


@dataclass
class LossBreakdown:
    sequential: float
    coverage: float
    pointing_aux: float
    total: float
    lambda_: float
    mu: float
    total_tensor: Tensor | None = None

    def as_dict(self) -> dict:
        return {"sequential": self.sequential, "coverage": self.coverage,
                "pointing_aux": self.pointing_aux, "total": self.total,
                "lambda": self.lambda_, "mu": self.mu}


def _targets_2d(targets) -> np.ndarray:
    return np.atleast_2d(np.asarray(targets, dtype=np.int64))


def _mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape)
    m = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match targets {shape}")
    return m


def sequential_loss(tape: Tape, steps: Sequence[StepOutput], targets, mask=None) -> Tensor:
    """Negative log-likelihood of the target words, summed over each sentence."""
    tg = _targets_2d(targets)
    if tg.shape[1] != len(steps):
        raise ValueError(f"{len(steps)} steps but {tg.shape[1]} targets")
    m = _mask(mask, tg.shape)
    B = tg.shape[0]
    total = None
    for t, step in enumerate(steps):
        V = step.fused.shape[-1]
        onehot = np.zeros((B, V))
        onehot[np.arange(B), tg[:, t]] = 1.0
        picked = tape.sum(tape.mul(step.fused, onehot), axis=-1)
        term = tape.mul(tape.log(picked), m[:, t:t + 1])
        total = term if total is None else tape.add(total, term)
    return tape.scale(tape.sum(total), -1.0 / B)


COVERAGE_SCORES = ("raw", "softmax")


def coverage_loss(tape: Tape, steps: Sequence[StepOutput], bags, mask=None, scores: str = "raw") -> Tensor:
    """Sentence-level multi-label loss over the bag of objects.

    Per object, ``sigmoid(sum_t p_t * copy_score_t)``, then the negative
    log of that over bag members.  ``bags`` is a ``(B, D_c)`` 0/1 array or a
    sequence of :class:`BagOfObjects`.

    ``scores="raw"`` accumulates the unnormalized copy scores;
    ``"softmax"`` accumulates the copy distribution instead, which bounds
    each object's term by ``ln 2``.
    """
    if scores not in COVERAGE_SCORES:
        raise ValueError(f"scores must be one of {COVERAGE_SCORES}")
    if not steps:
        raise ValueError("no steps")
    D_c = steps[0].copy_scores_raw.shape[-1]
    if isinstance(bags, BagOfObjects):
        bags = [bags]
    if not isinstance(bags, np.ndarray):
        bags = np.stack([b.indicator(D_c) for b in bags])
    bags = np.atleast_2d(bags).astype(np.float64)
    B = bags.shape[0]
    m = _mask(mask, (B, len(steps)))
    acc = None
    for t, step in enumerate(steps):
        w = tape.mul(step.p_t, m[:, t:t + 1])
        term = tape.mul(w, step.copy_scores_raw if scores == "raw" else step.copy_probs)
        acc = term if acc is None else tape.add(acc, term)
    logp = tape.log(tape.sigmoid(acc))
    return tape.scale(tape.sum(tape.mul(logp, bags)), -1.0 / B)


def pointing_supervision_loss(tape: Tape, steps: Sequence[StepOutput], targets,
                              object_membership, mask=None) -> Tensor:
    """Binary cross-entropy between p_t and "next word is an object word".

    Averaged over the real steps of each sentence, then over sentences.
    ``object_membership`` is a per-vocabulary boolean array.
    """
    tg = _targets_2d(targets)
    if tg.shape[1] != len(steps):
        raise ValueError(f"{len(steps)} steps but {tg.shape[1]} targets")
    member = np.asarray(object_membership, dtype=bool)
    labels = member[tg].astype(np.float64)
    m = _mask(mask, tg.shape)
    B = tg.shape[0]
    weights = m / m.sum(axis=1, keepdims=True)
    total = None
    for t, step in enumerate(steps):
        y = labels[:, t:t + 1]
        p = step.p_t
        ll = tape.add(tape.mul(tape.log(p), y), tape.mul(tape.log(tape.sub(1.0, p)), 1.0 - y))
        term = tape.mul(ll, weights[:, t:t + 1])
        total = term if total is None else tape.add(total, term)
    return tape.scale(tape.sum(total), -1.0 / B)


def total_loss(tape: Tape, sequential: Tensor, coverage: Tensor | None, pointing_aux: Tensor | None,
               lambda_: float = DEFAULT_LAMBDA, mu: float = DEFAULT_MU) -> LossBreakdown:
    """``sequential + lambda * coverage + mu * pointing_aux``.

    A zero weight drops its term from the graph entirely, so lambda = 0
    is bit-for-bit the model trained without the coverage objective.
    """
    if lambda_ < 0 or mu < 0:
        raise ValueError("loss weights must be non-negative")
    tot = sequential
    cov_v = coverage.item() if coverage is not None else 0.0
    aux_v = pointing_aux.item() if pointing_aux is not None else 0.0
    if lambda_ > 0 and coverage is not None:
        tot = tape.add(tot, tape.scale(coverage, lambda_))
    if mu > 0 and pointing_aux is not None:
        tot = tape.add(tot, tape.scale(pointing_aux, mu))
    return LossBreakdown(sequential.item(), cov_v, aux_v, tot.item(), lambda_, mu, tot)


def caption_batch(captions: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pad captions with END into a ``(B, T)`` array plus a ``(B, T-1)`` step mask."""
    T = max(len(c) for c in captions)
    if max_len is not None and T > max_len + 1:
        raise ValueError(f"caption of length {T} exceeds max_len={max_len}")
    caps = np.full((len(captions), T), END, dtype=np.int64)
    mask = np.zeros((len(captions), T - 1))
    for b, c in enumerate(captions):
        caps[b, :len(c)] = c
        mask[b, :len(c) - 1] = 1.0
    return caps, mask


def lm_loss(tape: Tape, captioner: Captioner, captions) -> Tensor:
    """Text-only loss: zero image, zero detections, pointing gate pinned at 0."""
    if isinstance(captions, np.ndarray) and captions.ndim == 2:
        caps, mask = captions, None
    elif captions and np.ndim(captions[0]) == 0:
        caps, mask = caption_batch([captions])
    else:
        caps, mask = caption_batch(captions)
    B = caps.shape[0]
    cfg = captioner.cfg
    steps = captioner.forward(tape, np.zeros((B, cfg.D_v)), np.zeros((B, cfg.D_c)), caps, gate_override=0.0)
    return sequential_loss(tape, steps, caps[:, 1:], mask)
