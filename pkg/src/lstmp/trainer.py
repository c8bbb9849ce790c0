"""Staged training: LM pretraining, then joint captioner training.

The detector stage lives in :mod:`lstmp.detector`; its outputs enter here
as constant detection vectors.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .losses import (
    COVERAGE_SCORES, DEFAULT_LAMBDA, DEFAULT_MU, LossBreakdown, caption_batch, coverage_loss, lm_loss,
    pointing_supervision_loss, sequential_loss, total_loss,
)
from .model import Captioner, ModelConfig, ModelParams
from .optim import clip_by_global_norm, make_optimizer

log = logging.getLogger(__name__)

VARIANTS = ("lstm-p", "lstm-p-minus", "baseline")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    lm_epochs: int = 10
    joint_epochs: int = 30
    lambda_: float = DEFAULT_LAMBDA
    mu: float = DEFAULT_MU
    seed: int = 0
    gradient_clip_norm: float = 5.0
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # joint stage runs its own optimizer; adaptive steps inflate the tiny
    # gradients that reach held-out copy slots and erase them
    joint_optimizer: str = "sgd"
    joint_learning_rate: float = 0.2
    variant: str = "lstm-p"
    # joint stage: keep LM-pretrained embeddings fixed
    freeze_embeddings: bool = True
    # joint stage: strength of the slot-k -> word-k copy prior (see align_copy_layer); 0 keeps the random init
    copy_init: float = 20.0
    coverage_scores: str = "raw"
    D_w: int = 32
    D_h: int = 64
    max_len: int = 16

    def __post_init__(self):
        if self.learning_rate <= 0 or self.joint_learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning rates and batch_size must be positive")
        for name in (self.optimizer, self.joint_optimizer):
            if name not in ("sgd", "adam"):
                raise ValueError(f"unknown optimizer {name!r}")
        if self.lambda_ < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be non-negative")
        if self.coverage_scores not in COVERAGE_SCORES:
            raise ValueError(f"coverage_scores must be one of {COVERAGE_SCORES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.variant in ("lstm-p-minus", "baseline") else self.lambda_

    @property
    def effective_mu(self) -> float:
        return 0.0 if self.variant == "baseline" else self.mu

    @property
    def gate_override(self) -> float | None:
        return 0.0 if self.variant == "baseline" else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        base = cls.from_dict(json.loads(Path(path).read_text())) if path else cls()
        return replace(base, **{k: v for k, v in overrides.items() if v is not None})


@dataclass
class PairedBatch:
    images: np.ndarray      # (B, D_v)
    detections: np.ndarray  # (B, D_c)
    captions: np.ndarray    # (B, T), END padded
    mask: np.ndarray        # (B, T - 1)
    bags: np.ndarray        # (B, D_c) 0/1


def make_batch(images, detections, captions: Sequence[Sequence[int]], object_words: Sequence[int]) -> PairedBatch:
    caps, mask = caption_batch(captions)
    slot = {w: k for k, w in enumerate(object_words)}
    bags = np.zeros((len(captions), len(object_words)))
    for b, c in enumerate(captions):
        for w in c:
            if w in slot:
                bags[b, slot[w]] = 1.0
    return PairedBatch(np.asarray(images, dtype=np.float64), np.asarray(detections, dtype=np.float64),
                       caps, mask, bags)


def batch_loss(tape: Tape, captioner: Captioner, batch: PairedBatch, membership: np.ndarray,
               lambda_: float, mu: float, gate_override: float | None = None,
               coverage_scores: str = "raw") -> LossBreakdown:
    steps = captioner.forward(tape, batch.images, batch.detections, batch.captions, gate_override)
    targets = batch.captions[:, 1:]
    seq = sequential_loss(tape, steps, targets, batch.mask)
    cov = coverage_loss(tape, steps, batch.bags, batch.mask, coverage_scores) if lambda_ > 0 else None
    aux = pointing_supervision_loss(tape, steps, targets, membership, batch.mask) if mu > 0 else None
    return total_loss(tape, seq, cov, aux, lambda_, mu)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class _Stepper:
    def __init__(self, params: ModelParams, config: TrainConfig, optimizer: str, lr: float,
                 frozen: Sequence[str] = ()):
        self.params = params
        self.config = config
        self.frozen = set(frozen)
        self.opt = make_optimizer(optimizer, lr, config.betas, config.eps)

    def step(self) -> None:
        values = {n: t.values for n, t in self.params.named() if n not in self.frozen}
        grads = {n: t.grad for n, t in self.params.named() if n not in self.frozen}
        clip_by_global_norm(grads, self.config.gradient_clip_norm)
        self.opt.step(values, grads)
        self.params.zero_grad()


def _log_writer(run_log):
    return open(run_log, "w") if run_log else None


def pretrain_lm(cfg: ModelConfig, params: ModelParams, sentences: Sequence[Sequence[int]],
                config: TrainConfig, history: list | None = None,
                run_log: str | Path | None = None) -> ModelParams:
    """Text-only pretraining on encoded sentences (START ... END).

    Log rows share the joint-stage columns; only ``sequential`` is non-zero.
    """
    if not sentences:
        raise ValueError("no sentences to pretrain on")
    cap = Captioner(cfg, params)
    stepper = _Stepper(params, config, config.optimizer, config.learning_rate)
    params.zero_grad()
    fh = _log_writer(run_log)
    try:
        _lm_epochs(cap, stepper, sentences, config, history, fh)
    finally:
        if fh:
            fh.close()
    return params


def _lm_epochs(cap, stepper, sentences, config, history, fh):
    for epoch in range(config.lm_epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101, epoch]))
        losses = []
        for idx in _batches(len(sentences), config.batch_size, rng):
            tape = Tape()
            loss = lm_loss(tape, cap, [sentences[i] for i in idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite LM loss at epoch {epoch}, batch of sentences {idx[:5].tolist()}...")
            tape.backward(loss)
            stepper.step()
            losses.append(loss.item())
        mean = float(np.mean(losses))
        log.info("lm epoch %d: loss %.4f", epoch, mean)
        entry = {"epoch": epoch, "sequential": mean, "coverage": 0.0, "pointing_aux": 0.0, "total": mean}
        if history is not None:
            history.append(entry)
        if fh:
            fh.write(json.dumps(entry) + "\n")


def align_copy_layer(cfg: ModelConfig, params: ModelParams, scale: float = 1.0) -> None:
    """Point copy slot k at object word k.

    Sets ``M_c1 = scale * pinv(E_obj)`` where ``E_obj`` stacks the
    object-word embeddings, so ``E_obj @ M_c1 = scale * I`` whenever
    D_c <= D_w and the rows are independent (least squares otherwise).
    """
    rows = params.E.values[list(cfg.object_words)]
    params.M_c1.values[...] = scale * np.linalg.pinv(rows)


def train_joint(cfg: ModelConfig, params: ModelParams, images: np.ndarray, detections: np.ndarray,
                captions: Sequence[Sequence[int]], membership: np.ndarray, config: TrainConfig,
                run_log: str | Path | None = None) -> tuple[ModelParams, list[dict]]:
    """Minimize the combined objective over (image, caption) pairs.

    ``images``/``detections`` are aligned with ``captions`` (one row per
    pair).  Returns the params and one per-epoch dict of mean components.
    """
    if len(captions) == 0:
        raise ValueError("no training pairs")
    cap = Captioner(cfg, params)
    if config.copy_init:
        align_copy_layer(cfg, params, config.copy_init)
    stepper = _Stepper(params, config, config.joint_optimizer, config.joint_learning_rate,
                       frozen=("E",) if config.freeze_embeddings else ())
    lam, mu, gate = config.effective_lambda, config.effective_mu, config.gate_override
    params.zero_grad()
    history = []
    fh = _log_writer(run_log)
    try:
        for epoch in range(config.joint_epochs):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 202, epoch]))
            rows = []
            for b, idx in enumerate(_batches(len(captions), config.batch_size, rng)):
                batch = make_batch(images[idx], detections[idx], [captions[i] for i in idx], cfg.object_words)
                tape = Tape()
                br = batch_loss(tape, cap, batch, membership, lam, mu, gate, config.coverage_scores)
                if not np.isfinite(br.total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} batch {b} (pairs {idx[:5].tolist()}...): {br.as_dict()}")
                tape.backward(br.total_tensor)
                stepper.step()
                rows.append((br.sequential, br.coverage, br.pointing_aux, br.total))
            m = np.mean(rows, axis=0)
            entry = {"epoch": epoch, "sequential": float(m[0]), "coverage": float(m[1]),
                     "pointing_aux": float(m[2]), "total": float(m[3])}
            history.append(entry)
            log.info("joint epoch %d: %s", epoch, entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
    finally:
        if fh:
            fh.close()
    return params, history
