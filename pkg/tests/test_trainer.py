import json
from dataclasses import replace

import numpy as np
import pytest

from lstmp.autodiff import Tape
from lstmp.decoding import greedy_decode_batch
from lstmp.model import load_checkpoint, save_checkpoint
from lstmp.optim import clip_by_global_norm
from lstmp.pipeline import fit_detector, make_corpus, model_config, paired_rows, pretrain
from lstmp.trainer import TrainConfig, TrainingError, batch_loss, make_batch, pretrain_lm, train_joint
from lstmp.model import Captioner, init_params
from lstmp.world import SplitCounts, WorldSpec

SPEC = WorldSpec(n_objects=8, n_heldout=2, D_v=16)
COUNTS = SplitCounts(n_train=240, n_test_per_heldout=20, n_test_random=10)
SMALL = TrainConfig(D_w=12, D_h=16, lm_epochs=3, joint_epochs=3, batch_size=32)


@pytest.fixture(scope="module")
def stage():
    splits = make_corpus(5, SPEC, COUNTS)
    det = fit_detector(splits, 5)
    hist = []
    cfg = model_config(splits, SMALL)
    lm = pretrain_lm(cfg, init_params(cfg, 0), [splits.vocab.encode(c) for c in splits.lm_sentences], SMALL,
                     history=hist)
    return splits, det, cfg, lm, hist


def test_config_validation_and_round_trip(tmp_path):
    for bad in ({"learning_rate": 0}, {"batch_size": 0}, {"lambda_": -0.1}, {"mu": -1},
                {"optimizer": "rmsprop"}, {"variant": "lrcn"}, {"coverage_scores": "probs"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(lambda_=0.5, seed=7)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    (tmp_path / "c.json").write_text(json.dumps({"lambda": 0.1, "mu": 2.0}))
    got = TrainConfig.from_file(tmp_path / "c.json", mu=None, seed=3)
    assert (got.lambda_, got.mu, got.seed) == (0.1, 2.0, 3)


def test_variants_switch_one_flag():
    assert TrainConfig(variant="lstm-p").effective_lambda == 0.3
    assert TrainConfig(variant="lstm-p-minus").effective_lambda == 0.0
    base = TrainConfig(variant="baseline")
    assert (base.effective_lambda, base.effective_mu, base.gate_override) == (0.0, 0.0, 0.0)


def test_clip_keeps_direction():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    before = np.concatenate([v.ravel() for v in g.values()])
    assert clip_by_global_norm(g, 1.0) == 5.0
    after = np.concatenate([v.ravel() for v in g.values()])
    assert np.allclose(after, before / 5.0, atol=1e-15)
    assert clip_by_global_norm(g, 10.0) == pytest.approx(1.0)


def test_pretraining_descends_and_learns_object_embeddings(stage):
    splits, _, cfg, lm, hist = stage
    assert hist[-1]["sequential"] < hist[0]["sequential"]
    for tok in splits.heldout_tokens:
        assert np.linalg.norm(lm.E.values[splits.vocab.index[tok]]) > 0.01
    traces = greedy_decode_batch(cfg, lm, np.zeros((3, cfg.D_c)), np.zeros((3, cfg.D_v)), gate_override=0.0)
    for tr in traces:
        assert len(tr.tokens) <= cfg.max_len and all(0 <= t < cfg.vocab_size for t in tr.tokens)


def test_pretrain_rejects_empty(stage):
    _, _, cfg, lm, _ = stage
    with pytest.raises(ValueError):
        pretrain_lm(cfg, lm.copy(), [], SMALL)


def test_coverage_weight_leaves_sequential_loss_alone(stage):
    splits, det, cfg, lm, _ = stage
    X, D, caps = paired_rows(splits, det)
    batch = make_batch(X[:8], D[:8], caps[:8], cfg.object_words)
    member = splits.vocab.object_membership()
    a = batch_loss(Tape(), Captioner(cfg, lm.copy()), batch, member, 0.0, 1.0)
    b = batch_loss(Tape(), Captioner(cfg, lm.copy()), batch, member, 0.3, 1.0)
    assert a.sequential == b.sequential and a.total != b.total


def test_joint_training_logs_and_descends(stage, tmp_path):
    splits, det, cfg, lm, _ = stage
    X, D, caps = paired_rows(splits, det)
    log = tmp_path / "run.jsonl"
    params, hist = train_joint(cfg, lm.copy(), X, D, caps, splits.vocab.object_membership(), SMALL, log)
    assert hist[-1]["total"] < hist[0]["total"]
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert rows == hist
    assert set(rows[0]) == {"epoch", "sequential", "coverage", "pointing_aux", "total"}
    assert np.array_equal(params.E.values, lm.E.values)  # embeddings stay frozen


def test_joint_training_is_deterministic(stage):
    splits, det, cfg, lm, _ = stage
    X, D, caps = paired_rows(splits, det)
    cfg1 = replace(SMALL, joint_epochs=1)
    a, _ = train_joint(cfg, lm.copy(), X, D, caps, splits.vocab.object_membership(), cfg1)
    b, _ = train_joint(cfg, lm.copy(), X, D, caps, splits.vocab.object_membership(), cfg1)
    assert all(np.array_equal(x.values, y.values) for (_, x), (_, y) in zip(a.named(), b.named()))


def test_nan_loss_names_the_batch(stage):
    splits, det, cfg, lm, _ = stage
    X, D, caps = paired_rows(splits, det)
    X = X.copy()
    X[0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0 batch"):
        train_joint(cfg, lm.copy(), X, D, caps, splits.vocab.object_membership(), replace(SMALL, joint_epochs=1))


def test_checkpoint_then_decode_matches(stage, tmp_path):
    splits, det, cfg, lm, _ = stage
    X = np.stack([s.image for s in splits.test[:5]])
    from lstmp.detector import detect
    before = greedy_decode_batch(cfg, lm, detect(det, X), X)
    save_checkpoint(tmp_path / "m.json", cfg, lm)
    cfg2, back, _ = load_checkpoint(tmp_path / "m.json")
    after = greedy_decode_batch(cfg2, back, detect(det, X), X)
    assert [t.tokens for t in before] == [t.tokens for t in after]
    assert [t.gates for t in before] == [t.gates for t in after]


def test_pipeline_pretrain_is_deterministic():
    splits = make_corpus(1, SPEC, COUNTS)
    cfg = replace(SMALL, lm_epochs=1)
    a, b = pretrain(splits, cfg), pretrain(splits, cfg)
    assert np.array_equal(a.W_i.values, b.W_i.values)
