"""Per-instance momentum memories of both modalities' embeddings.

Rows are momentum-averaged copies of the latest embeddings, re-normalized to
the unit sphere after every update so clustering and prototype similarities
stay well defined. The very first update for an instance copies the embedding
in directly instead of mixing it with an uninitialized row.
"""
from __future__ import annotations

import numpy as np

from .errors import StateError
from .nn import l2_normalize_rows


class MemoryBank:
    def __init__(self, instance_ids, voice_dim: int, face_dim: int,
                 momentum: float = 0.5):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        ids = tuple(int(i) for i in instance_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("instance_ids contain duplicates")
        self.instance_ids = ids
        self.row_of = {iid: r for r, iid in enumerate(ids)}
        self.momentum = float(momentum)
        self.voice = np.zeros((len(ids), voice_dim))
        self.face = np.zeros((len(ids), face_dim))
        self.initialized = np.zeros(len(ids), dtype=bool)

    @property
    def num_instances(self) -> int:
        return len(self.instance_ids)

    def rows_for(self, instance_ids) -> np.ndarray:
        try:
            return np.array([self.row_of[int(i)] for i in instance_ids])
        except KeyError as exc:
            raise ValueError(f"unknown instance id {exc.args[0]}") from exc

    def update(self, instance_ids, v_batch, f_batch) -> None:
        rows = self.rows_for(instance_ids)
        if len(set(rows.tolist())) != len(rows):
            raise ValueError("duplicate instance id within one update batch")
        v_batch = np.asarray(v_batch, dtype=np.float64)
        f_batch = np.asarray(f_batch, dtype=np.float64)
        if v_batch.shape != (len(rows), self.voice.shape[1]):
            raise ValueError(f"voice batch shape {v_batch.shape} mismatch")
        if f_batch.shape != (len(rows), self.face.shape[1]):
            raise ValueError(f"face batch shape {f_batch.shape} mismatch")
        m = self.momentum
        fresh = ~self.initialized[rows]
        mixed_v = l2_normalize_rows(m * self.voice[rows] + (1.0 - m) * v_batch)
        mixed_f = l2_normalize_rows(m * self.face[rows] + (1.0 - m) * f_batch)
        self.voice[rows] = np.where(fresh[:, None], v_batch, mixed_v)
        self.face[rows] = np.where(fresh[:, None], f_batch, mixed_f)
        self.initialized[rows] = True

    def snapshot(self):
        """Defensive copies of both memory matrices for clustering."""
        missing = int((~self.initialized).sum())
        if missing:
            raise StateError(
                f"memory bank has {missing} uninitialized instances; "
                "finish at least one epoch before snapshotting"
            )
        return self.voice.copy(), self.face.copy()
