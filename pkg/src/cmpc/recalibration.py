"""Deviation scoring and Gaussian-CDF instance weighting.

An instance's deviation score is its own cross-modal similarity minus the
mean similarity of its assigned voice/face prototype pairs across the
clusterings. Low scores flag pairs whose correspondence is weaker than their
semantic neighborhood suggests. Scores are turned into weights in (0, 1) by
the CDF of a Gaussian centered at mean + delta * std with variance
kappa * std^2, computed over the whole training population once per epoch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import StateError

# Keep weights numerically inside the open interval (0, 1).
_W_FLOOR = 1e-300
_W_CEIL = 1.0 - 1e-16


@dataclass(frozen=True)
class RecalibrationState:
    delta: float
    kappa: float
    mean: float
    std: float
    scores: np.ndarray
    weights: np.ndarray


def deviation_scores(voice_memories, face_memories, voice_centroid_sets,
                     face_centroid_sets, voice_assigned, face_assigned):
    """Per-instance deviation: own v.f minus mean assigned-prototype similarity."""
    if voice_centroid_sets is None or face_centroid_sets is None:
        raise StateError("deviation scores require prototypes")
    v = np.asarray(voice_memories, dtype=np.float64)
    f = np.asarray(face_memories, dtype=np.float64)
    if v.shape[0] != f.shape[0]:
        raise ValueError("modality row counts differ")
    r_count = len(voice_centroid_sets)
    if len(face_centroid_sets) != r_count:
        raise ValueError("modalities have different numbers of clusterings")
    own = np.sum(v * f, axis=1)
    proto = np.zeros(v.shape[0])
    for r in range(r_count):
        cv = voice_centroid_sets[r][np.asarray(voice_assigned)[r]]
        cf = face_centroid_sets[r][np.asarray(face_assigned)[r]]
        proto += np.sum(cv * cf, axis=1)
    return own - proto / r_count


def recalibration_weight(score, mean, std, delta=-1.0, kappa=0.1):
    """Gaussian-CDF weight of a deviation score; vectorized over ``score``.

    With a degenerate population (std <= 0) weighting is disabled and every
    weight is 1.
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    score = np.asarray(score, dtype=np.float64)
    if std <= 0:
        return np.ones_like(score)
    z = (score - (mean + delta * std)) / (std * math.sqrt(kappa))
    w = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    return np.clip(w, _W_FLOOR, _W_CEIL)


def weighted_loss(values, weights) -> float:
    """Weighted mean sum(w_i * value_i) / sum(w_i)."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.shape != weights.shape:
        raise ValueError("values and weights must align")
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    return float(weights @ values / total)


def build_recalibration(voice_memories, face_memories, voice_protos,
                        face_protos, delta=-1.0, kappa=0.1) -> RecalibrationState:
    """Population statistics and weights over the full training set."""
    scores = deviation_scores(
        voice_memories,
        face_memories,
        voice_protos.centroids,
        face_protos.centroids,
        voice_protos.assignments,
        face_protos.assignments,
    )
    mean = float(scores.mean())
    std = float(scores.std())
    weights = recalibration_weight(scores, mean, std, delta=delta, kappa=kappa)
    return RecalibrationState(
        delta=float(delta),
        kappa=float(kappa),
        mean=mean,
        std=std,
        scores=scores,
        weights=weights,
    )
