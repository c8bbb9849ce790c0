"""Multi-label linear object learner producing per-class probabilities I_c."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .optim import Adam


@dataclass
class DetectorParams:
    W_det: np.ndarray  # (D_c, D_v)
    b_det: np.ndarray  # (D_c,)

    @property
    def n_classes(self) -> int:
        return self.W_det.shape[0]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def detect(det: DetectorParams, image: np.ndarray) -> np.ndarray:
    """Independent per-class probabilities; works on one image or a (B, D_v) batch."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape[-1] != det.W_det.shape[1]:
        raise ValueError(f"image has dimension {x.shape[-1]}, detector expects {det.W_det.shape[1]}")
    return _sigmoid(x @ det.W_det.T + det.b_det)


def label_matrix(label_sets: Sequence[Sequence[int]], n_classes: int) -> np.ndarray:
    Y = np.zeros((len(label_sets), n_classes))
    for i, labels in enumerate(label_sets):
        Y[i, list(labels)] = 1.0
    return Y


def bce(det: DetectorParams, X: np.ndarray, Y: np.ndarray) -> float:
    P = np.clip(detect(det, X), 1e-300, 1.0)
    Q = np.clip(1.0 - detect(det, X), 1e-300, 1.0)
    return float(-(Y * np.log(P) + (1 - Y) * np.log(Q)).mean())


def train_detector(images: np.ndarray, label_sets: Sequence[Sequence[int]], n_classes: int,
                   seed: int = 0, steps: int = 1500, lr: float = 0.05,
                   history: list | None = None) -> DetectorParams:
    """Full-batch Adam on mean per-class binary cross-entropy."""
    X = np.asarray(images, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("no training samples")
    if X.ndim != 2 or len(X) != len(label_sets):
        raise ValueError("images must be (N, D_v) and aligned with label sets")
    Y = label_matrix(label_sets, n_classes)
    rng = np.random.default_rng(seed)
    det = DetectorParams(rng.uniform(-0.08, 0.08, size=(n_classes, X.shape[1])), np.zeros(n_classes))
    params = {"W_det": det.W_det, "b_det": det.b_det}
    opt = Adam(lr)
    n = Y.size
    for _ in range(steps):
        # d(mean BCE)/d(logit) = (P - Y) / (N * D_c)
        G = (detect(det, X) - Y) / n
        opt.step(params, {"W_det": G.T @ X, "b_det": G.sum(axis=0)})
        if history is not None:
            history.append(bce(det, X, Y))
    return det


@dataclass
class ClassReport:
    precision: float | None
    recall: float | None
    f1: float | None
    support: int


def detector_report(det: DetectorParams, images: np.ndarray, label_sets: Sequence[Sequence[int]],
                    threshold: float = 0.5) -> list[ClassReport]:
    """Per-class precision/recall/F1 with a strict ``> threshold`` decision.

    ``None`` marks an undefined value (no predicted positives for
    precision, no actual positives for recall).
    """
    X = np.asarray(images, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty test set")
    pred = detect(det, X) > threshold
    Y = label_matrix(label_sets, det.n_classes).astype(bool)
    out = []
    for k in range(det.n_classes):
        tp = int((pred[:, k] & Y[:, k]).sum())
        fp = int((pred[:, k] & ~Y[:, k]).sum())
        fn = int((~pred[:, k] & Y[:, k]).sum())
        prec = tp / (tp + fp) if tp + fp else None
        rec = tp / (tp + fn) if tp + fn else None
        if prec is None or rec is None:
            f1 = None
        else:
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append(ClassReport(prec, rec, f1, tp + fn))
    return out


def save_detector(path, det: DetectorParams) -> None:
    doc = {"config": {"D_c": det.W_det.shape[0], "D_v": det.W_det.shape[1]},
           "params": {n: {"shape": list(a.shape), "values": a.reshape(-1).tolist()}
                      for n, a in (("W_det", det.W_det), ("b_det", det.b_det))}}
    Path(path).write_text(json.dumps(doc))


def load_detector(path) -> DetectorParams:
    doc = json.loads(Path(path).read_text())
    D_c, D_v = doc["config"]["D_c"], doc["config"]["D_v"]
    arrays = {}
    for name, shape in (("W_det", (D_c, D_v)), ("b_det", (D_c,))):
        entry = doc["params"][name]
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"parameter {name!r} has shape {tuple(entry['shape'])}, expected {shape}")
        arrays[name] = np.array(entry["values"], dtype=np.float64).reshape(shape)
    return DetectorParams(arrays["W_det"], arrays["b_det"])
