"""Contrastive objectives over paired unit-norm embeddings.

Three building blocks, each returning per-instance losses plus analytic
gradients with respect to the embeddings:

* ``cid_loss``: symmetric instance-discrimination InfoNCE. For each anchor
  the positive is its paired embedding in the other modality and the
  negatives are every other in-batch embedding of that modality; the
  softmax denominator includes the positive term.
* ``prototype_loss``: instance-to-prototype contrast against the centroids
  of the other modality's clusterings, averaged over the clusterings.
* ``cmpc_loss``: both symmetric instance terms plus both prototype terms.

All softmaxes are computed via row-max subtraction so small temperatures
(0.03 with similarities at +/-1) stay finite. Gradients are for the scalar
``sum_i coeffs[i] * loss_i``; coeffs defaults to the uniform 1/N, and loss
reweighting passes normalized weights instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.03
    num_clusterings: int = 1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.num_clusterings < 1:
            raise ValueError("num_clusterings must be >= 1")


@dataclass(frozen=True)
class SimilarityBatch:
    """Positive similarities (N,) and negative similarities (N, N-1)."""

    positive: np.ndarray
    negative: np.ndarray
    instance_ids: tuple | None = None

    def __post_init__(self):
        if self.positive.ndim != 1 or self.negative.ndim != 2:
            raise ValueError("positive must be 1-D and negative 2-D")
        if self.negative.shape[0] != self.positive.shape[0]:
            raise ValueError("positive/negative row counts differ")
        if not (np.isfinite(self.positive).all() and np.isfinite(self.negative).all()):
            raise ValueError("similarities contain non-finite values")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-instance loss components; prototype terms are already averaged
    over the clusterings. ``weighted_total`` is the scalar that was
    differentiated."""

    cid_vf: np.ndarray
    cid_fv: np.ndarray
    proto_vf: np.ndarray
    proto_fv: np.ndarray
    weighted_total: float
    instance_ids: tuple | None = None

    @property
    def total(self) -> np.ndarray:
        return self.cid_vf + self.cid_fv + self.proto_vf + self.proto_fv


def _check_embeddings(x, what, norm_tol=1e-3):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")
    norms = np.linalg.norm(x, axis=1)
    # Loose tolerance on purpose: finite-difference probes of the gradients
    # legitimately evaluate slightly off the sphere.
    if np.abs(norms - 1.0).max() > norm_tol:
        raise ValueError(f"{what} rows are not unit-norm (within {norm_tol})")
    return x


def _coeffs(n, coeffs):
    if coeffs is None:
        return np.full(n, 1.0 / n)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (n,):
        raise ValueError(f"coeffs must have shape ({n},), got {coeffs.shape}")
    return coeffs


def _row_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    return expd / denom, log_probs


def _nce_direction(anchors, candidates, temperature, coeffs):
    """One InfoNCE direction: anchor i against all candidates, positive at i.

    Returns per-instance losses and gradients of sum_i c_i loss_i w.r.t.
    anchors and candidates.
    """
    n = anchors.shape[0]
    logits = (anchors @ candidates.T) / temperature
    probs, log_probs = _row_softmax(logits)
    losses = -np.diag(log_probs)
    delta = probs.copy()
    delta[np.arange(n), np.arange(n)] -= 1.0
    delta *= coeffs[:, None] / temperature
    grad_anchors = delta @ candidates
    grad_candidates = delta.T @ anchors
    return losses, grad_anchors, grad_candidates


def cid_loss(v, f, temperature, coeffs=None, instance_ids=None):
    """Symmetric instance-discrimination loss.

    Returns ``(LossBreakdown, grad_v, grad_f)`` where the breakdown has zero
    prototype terms and the gradients differentiate the coefficient-weighted
    total of both directions.
    """
    v = _check_embeddings(v, "v")
    f = _check_embeddings(f, "f")
    if v.shape != f.shape:
        raise ValueError(f"batch shapes differ: {v.shape} vs {f.shape}")
    n = v.shape[0]
    if n < 2:
        raise ValueError("need at least 2 instances (no negatives otherwise)")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    c = _coeffs(n, coeffs)
    loss_vf, gv1, gf1 = _nce_direction(v, f, temperature, c)
    loss_fv, gf2, gv2 = _nce_direction(f, v, temperature, c)
    zeros = np.zeros(n)
    breakdown = LossBreakdown(
        cid_vf=loss_vf,
        cid_fv=loss_fv,
        proto_vf=zeros,
        proto_fv=zeros,
        weighted_total=float(c @ (loss_vf + loss_fv)),
        instance_ids=tuple(instance_ids) if instance_ids is not None else None,
    )
    return breakdown, gv1 + gv2, gf1 + gf2


def similarity_batch(v, f, instance_ids=None) -> SimilarityBatch:
    """Build positive/negative similarity views for the v-against-f direction."""
    v = _check_embeddings(v, "v")
    f = _check_embeddings(f, "f")
    if v.shape != f.shape:
        raise ValueError(f"batch shapes differ: {v.shape} vs {f.shape}")
    n = v.shape[0]
    if n < 2:
        raise ValueError("need at least 2 instances")
    sims = v @ f.T
    positive = np.diag(sims).copy()
    mask = ~np.eye(n, dtype=bool)
    negative = sims[mask].reshape(n, n - 1)
    return SimilarityBatch(
        positive=positive,
        negative=negative,
        instance_ids=tuple(instance_ids) if instance_ids is not None else None,
    )


def similarity_gradients(batch: SimilarityBatch, temperature):
    """Closed-form loss gradients w.r.t. the similarity scalars.

    Each negative gets its softmax weight divided by the temperature; the
    positive gets minus the total negative softmax mass divided by the
    temperature, so the two sum to zero per instance.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = np.concatenate([batch.positive[:, None], batch.negative], axis=1)
    probs, _ = _row_softmax(logits / temperature)
    grad_negative = probs[:, 1:] / temperature
    grad_positive = -grad_negative.sum(axis=1)
    return grad_positive, grad_negative


def prototype_loss(embeddings, centroid_sets, assigned, temperature,
                   coeffs=None):
    """Instance-to-prototype contrast, averaged over clusterings.

    ``centroid_sets`` is a list of (K_r, d) unit-norm centroid matrices from
    the other modality; ``assigned`` is an (R, N) index array saying which
    centroid each instance's paired embedding belongs to. Returns
    per-instance losses and the gradient w.r.t. ``embeddings``.
    """
    e = _check_embeddings(embeddings, "embeddings")
    if centroid_sets is None or assigned is None:
        raise StateError("prototype loss requires clustering results")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    n = e.shape[0]
    assigned = np.asarray(assigned)
    if assigned.ndim != 2 or assigned.shape != (len(centroid_sets), n):
        raise ValueError(
            f"assigned must have shape ({len(centroid_sets)}, {n}), got "
            f"{assigned.shape}"
        )
    c = _coeffs(n, coeffs)
    r_count = len(centroid_sets)
    losses = np.zeros(n)
    grad = np.zeros_like(e)
    rows = np.arange(n)
    for r, centroids in enumerate(centroid_sets):
        idx = assigned[r]
        if (idx < 0).any() or (idx >= centroids.shape[0]).any():
            raise StateError(f"assignment out of range for clustering {r}")
        logits = (e @ centroids.T) / temperature
        probs, log_probs = _row_softmax(logits)
        losses += -log_probs[rows, idx]
        delta = probs
        delta[rows, idx] -= 1.0
        grad += (delta * c[:, None] / temperature) @ centroids
    losses /= r_count
    grad /= r_count
    return losses, grad


def cmpc_loss(v, f, voice_centroid_sets, face_centroid_sets, voice_assigned,
              face_assigned, config: LossConfig, coeffs=None,
              instance_ids=None):
    """Full objective: both instance terms plus both prototype terms.

    The voice embedding is contrasted against the face prototypes its paired
    face belongs to, and vice versa. Returns ``(LossBreakdown, grad_v, grad_f)``.
    """
    if voice_centroid_sets is None or face_centroid_sets is None:
        raise StateError("cmpc loss requires prototypes; run clustering first")
    if len(voice_centroid_sets) != config.num_clusterings or \
            len(face_centroid_sets) != config.num_clusterings:
        raise ValueError(
            f"expected {config.num_clusterings} clusterings per modality, got "
            f"{len(voice_centroid_sets)}/{len(face_centroid_sets)}"
        )
    breakdown, grad_v, grad_f = cid_loss(
        v, f, config.temperature, coeffs=coeffs, instance_ids=instance_ids
    )
    n = breakdown.cid_vf.shape[0]
    c = _coeffs(n, coeffs)
    proto_vf, gv = prototype_loss(
        v, face_centroid_sets, face_assigned, config.temperature, coeffs=coeffs
    )
    proto_fv, gf = prototype_loss(
        f, voice_centroid_sets, voice_assigned, config.temperature, coeffs=coeffs
    )
    full = LossBreakdown(
        cid_vf=breakdown.cid_vf,
        cid_fv=breakdown.cid_fv,
        proto_vf=proto_vf,
        proto_fv=proto_fv,
        weighted_total=float(
            c @ (breakdown.cid_vf + breakdown.cid_fv + proto_vf + proto_fv)
        ),
        instance_ids=breakdown.instance_ids,
    )
    return full, grad_v + gv, grad_f + gf
