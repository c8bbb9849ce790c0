"""End-to-end held-out experiment: world, detector, LM, joint training, evaluation.

Every stage is a plain function over in-memory objects, so the CLI (which
round-trips through files) and the acceptance suite (which does not) run
the same code.  :class:`Experiment` caches the shared stages of one seed
so that variants and lambda values reuse the detector and the LM.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .decoding import DecodeTrace, gate_statistics, greedy_decode_batch
from .detector import DetectorParams, detect, detector_report, train_detector
from .metrics import EvalReport, evaluate
from .model import ModelConfig, ModelParams, init_params
from .trainer import TrainConfig, pretrain_lm, train_joint
from .world import CorpusSplits, Sample, SplitCounts, WorldSpec, build_splits, generate_world

log = logging.getLogger(__name__)

DETECTOR_F1_GATE = 0.9


def model_config(splits: CorpusSplits, config: TrainConfig) -> ModelConfig:
    return ModelConfig(D_v=splits.spec.D_v, D_w=config.D_w, D_h=config.D_h, vocab_size=len(splits.vocab),
                       object_words=tuple(splits.vocab.object_words), max_len=config.max_len)


def make_corpus(seed: int, spec: WorldSpec = WorldSpec(), counts: SplitCounts = SplitCounts()) -> CorpusSplits:
    return build_splits(generate_world(replace(spec, seed=seed)), counts)


def fit_detector(splits: CorpusSplits, seed: int) -> DetectorParams:
    X = np.stack([s.image for s in splits.detector_train])
    return train_detector(X, [s.objects for s in splits.detector_train], splits.spec.n_objects, seed=seed)


def detector_min_f1(det: DetectorParams, samples: Sequence[Sample]) -> float:
    """Smallest per-class F1 on ``samples``; classes without support are skipped."""
    X = np.stack([s.image for s in samples])
    f1s = [r.f1 for r in detector_report(det, X, [s.objects for s in samples]) if r.support]
    return min(0.0 if f is None else f for f in f1s)


def pretrain(splits: CorpusSplits, config: TrainConfig, run_log=None) -> ModelParams:
    cfg = model_config(splits, config)
    params = init_params(cfg, config.seed)
    sentences = [splits.vocab.encode(c) for c in splits.lm_sentences]
    return pretrain_lm(cfg, params, sentences, config, run_log=run_log)


def paired_rows(splits: CorpusSplits, det: DetectorParams) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    """One row per (image, reference caption) pair of the paired split."""
    images, captions = [], []
    for s in splits.paired_train:
        for c in s.captions:
            images.append(s.image)
            captions.append(splits.vocab.encode(c))
    X = np.stack(images)
    return X, detect(det, X), captions


def fine_tune(splits: CorpusSplits, det: DetectorParams, lm_params: ModelParams, config: TrainConfig,
              run_log=None) -> tuple[ModelParams, list[dict]]:
    """Joint training from a copy of ``lm_params`` (the LM is left untouched)."""
    cfg = model_config(splits, config)
    X, D, caps = paired_rows(splits, det)
    return train_joint(cfg, lm_params.copy(), X, D, caps, splits.vocab.object_membership(), config, run_log)


def caption_samples(cfg: ModelConfig, params: ModelParams, det: DetectorParams, samples: Sequence[Sample],
                    gate_override: float | None = None) -> list[DecodeTrace]:
    X = np.stack([s.image for s in samples])
    return greedy_decode_batch(cfg, params, detect(det, X), X, gate_override=gate_override)


def score(splits: CorpusSplits, traces: Sequence[DecodeTrace], samples: Sequence[Sample] | None = None) -> EvalReport:
    samples = splits.test if samples is None else samples
    captions = [splits.vocab.decode(t.tokens) for t in traces]
    labels = [[splits.vocab.object_tokens[o] for o in s.objects] for s in samples]
    return evaluate(captions, labels, splits.heldout_tokens)


@dataclass
class RunResult:
    report: EvalReport
    history: list[dict]
    traces: list[DecodeTrace]
    params: ModelParams
    gates: dict = field(default_factory=dict)


class Experiment:
    """All runs of one master seed, sharing corpus, detector and LM.

    ``config`` supplies everything except ``variant``/``lambda_``, which
    :meth:`run` overrides.  Runs whose effective objective coincides (for
    example lstm-p-minus and lstm-p at lambda 0) are trained once.
    """

    def __init__(self, seed: int, config: TrainConfig = TrainConfig(), spec: WorldSpec = WorldSpec(),
                 counts: SplitCounts = SplitCounts()):
        self.seed = seed
        self.config = replace(config, seed=seed)
        self.splits = make_corpus(seed, spec, counts)
        self.detector = fit_detector(self.splits, seed)
        self.detector_f1 = detector_min_f1(self.detector, self.splits.test)
        self.cfg = model_config(self.splits, self.config)
        self._lm: ModelParams | None = None
        self._runs: dict[tuple, RunResult] = {}

    @property
    def lm(self) -> ModelParams:
        if self._lm is None:
            self._lm = pretrain(self.splits, self.config)
        return self._lm

    def run(self, variant: str = "lstm-p", lambda_: float | None = None) -> RunResult:
        config = replace(self.config, variant=variant,
                         lambda_=self.config.lambda_ if lambda_ is None else lambda_)
        key = (config.effective_lambda, config.effective_mu, config.gate_override)
        if key not in self._runs:
            log.info("seed %d: training %s (lambda=%g)", self.seed, variant, config.effective_lambda)
            params, history = fine_tune(self.splits, self.detector, self.lm, config)
            traces = caption_samples(self.cfg, params, self.detector, self.splits.test, config.gate_override)
            gates = gate_statistics(traces, self.splits.vocab.object_membership())
            self._runs[key] = RunResult(score(self.splits, traces), history, traces, params, gates)
        return self._runs[key]


def sweep_lambda(values: Sequence[float], seeds: Sequence[int], config: TrainConfig = TrainConfig(),
                 experiments: dict[int, Experiment] | None = None) -> dict[float, list[float]]:
    """f1_average per lambda, one entry per seed (in ``seeds`` order)."""
    experiments = {} if experiments is None else experiments
    out: dict[float, list[float]] = {float(v): [] for v in values}
    for seed in seeds:
        exp = experiments.get(seed) or experiments.setdefault(seed, Experiment(seed, config))
        for v in values:
            out[float(v)].append(exp.run("lstm-p", float(v)).report.f1_average)
    return out


def sweep_table(result: dict[float, list[float]]) -> str:
    lines = ["lambda  mean_f1_average  per_seed"]
    for lam, vals in result.items():
        lines.append(f"{lam:<7g} {np.mean(vals):<16.4f} " + " ".join(f"{v:.4f}" for v in vals))
    return "\n".join(lines)
