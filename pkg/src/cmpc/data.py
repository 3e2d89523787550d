"""Synthetic paired-modality dataset with hidden identity labels.

Each identity gets a latent vector; its "videos" produce a voice feature and
a face feature through two fixed random linear maps plus Gaussian noise. A
configurable fraction of instances are "deviates": their voice track no
longer cleanly reflects the owner (someone else's voice swapped in, a
background mixture, or heavy noise). Identity, demographic attributes, and
deviate flags are ground truth for evaluation and diagnostics only; training
code receives nothing but features and instance ids.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .seeding import substream

DEVIATE_MODES = ("swap", "background", "drift")


@dataclass(frozen=True)
class WorldConfig:
    num_identities: int = 200
    videos_per_identity: int = 5
    latent_dim: int = 16
    voice_dim: int = 64
    face_dim: int = 64
    voice_noise_std: float = 0.3
    face_noise_std: float = 0.3
    deviate_fraction: float = 0.2
    deviate_mode: str = "background"
    num_nationalities: int = 4
    num_age_groups: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 1 or self.videos_per_identity < 1:
            raise ValueError("identity and video counts must be >= 1")
        if min(self.latent_dim, self.voice_dim, self.face_dim) < 2:
            raise ValueError("feature dims must be >= 2")
        if not 0.0 <= self.deviate_fraction <= 1.0:
            raise ValueError(
                f"deviate_fraction must be in [0, 1], got {self.deviate_fraction}"
            )
        if self.deviate_mode not in DEVIATE_MODES:
            raise ValueError(
                f"deviate_mode must be one of {DEVIATE_MODES}, got "
                f"{self.deviate_mode!r}"
            )
        if min(self.voice_noise_std, self.face_noise_std) < 0:
            raise ValueError("noise stds must be non-negative")
        if self.num_nationalities < 1 or self.num_age_groups < 1:
            raise ValueError("attribute cardinalities must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def num_instances(self) -> int:
        return self.num_identities * self.videos_per_identity


@dataclass(frozen=True)
class GroundTruth:
    identity_id: int
    gender: int
    nationality: int
    age_group: int
    is_deviate: bool
    deviate_mode: str | None


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: int
    voice: np.ndarray
    face: np.ndarray
    ground_truth: GroundTruth


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    test: list


@dataclass(frozen=True)
class TrainingData:
    """What the trainer is allowed to see: features and instance ids only."""

    instance_ids: tuple
    voice: np.ndarray
    face: np.ndarray

    def __post_init__(self):
        n = len(self.instance_ids)
        if self.voice.shape[0] != n or self.face.shape[0] != n:
            raise ValueError("feature row counts must match instance_ids")

    @property
    def num_instances(self) -> int:
        return len(self.instance_ids)


def generate(config: WorldConfig) -> list:
    """Generate the full instance list for ``config``, deterministically."""
    rng = substream(config.seed, "data")
    n_ids = config.num_identities
    n = config.num_instances

    latents = rng.standard_normal((n_ids, config.latent_dim))
    # Column scale 1/sqrt(latent_dim) keeps per-feature variance near 1, so
    # noise_std is directly interpretable as an inverse SNR knob.
    mix_voice = rng.standard_normal((config.latent_dim, config.voice_dim))
    mix_voice /= np.sqrt(config.latent_dim)
    mix_face = rng.standard_normal((config.latent_dim, config.face_dim))
    mix_face /= np.sqrt(config.latent_dim)

    gender = rng.integers(0, 2, size=n_ids)
    nationality = rng.integers(0, config.num_nationalities, size=n_ids)
    age_group = rng.integers(0, config.num_age_groups, size=n_ids)

    identity_of = np.repeat(np.arange(n_ids), config.videos_per_identity)
    voice = latents[identity_of] @ mix_voice
    voice += config.voice_noise_std * rng.standard_normal((n, config.voice_dim))
    face = latents[identity_of] @ mix_face
    face += config.face_noise_std * rng.standard_normal((n, config.face_dim))

    n_deviate = int(round(config.deviate_fraction * n))
    deviate_idx = (
        np.sort(rng.choice(n, size=n_deviate, replace=False))
        if n_deviate
        else np.empty(0, dtype=np.int64)
    )
    is_deviate = np.zeros(n, dtype=bool)
    is_deviate[deviate_idx] = True
    for idx in deviate_idx:
        own = identity_of[idx]
        if n_ids > 1:
            other = int(rng.integers(0, n_ids - 1))
            if other >= own:
                other += 1
        else:
            other = own
        noise = config.voice_noise_std * rng.standard_normal(config.voice_dim)
        clean_own = latents[own] @ mix_voice
        clean_other = latents[other] @ mix_voice
        if config.deviate_mode == "swap":
            voice[idx] = clean_other + noise
        elif config.deviate_mode == "background":
            voice[idx] = 0.5 * clean_own + 0.5 * clean_other + noise
        else:  # drift
            voice[idx] = clean_own + 5.0 * noise

    records = []
    for i in range(n):
        ident = int(identity_of[i])
        records.append(
            InstanceRecord(
                instance_id=i,
                voice=voice[i],
                face=face[i],
                ground_truth=GroundTruth(
                    identity_id=ident,
                    gender=int(gender[ident]),
                    nationality=int(nationality[ident]),
                    age_group=int(age_group[ident]),
                    is_deviate=bool(is_deviate[i]),
                    deviate_mode=config.deviate_mode if is_deviate[i] else None,
                ),
            )
        )
    return records


def split_by_identity(instances, test_identity_fraction: float, seed: int,
                      stratify_by_gender: bool = False) -> DatasetSplit:
    """Identity-disjoint train/test split, deterministic under ``seed``."""
    if not 0.0 < test_identity_fraction < 1.0:
        raise ValueError(
            f"test_identity_fraction must be in (0, 1), got "
            f"{test_identity_fraction}"
        )
    by_identity: dict[int, list] = {}
    gender_of: dict[int, int] = {}
    for rec in instances:
        gt = rec.ground_truth
        by_identity.setdefault(gt.identity_id, []).append(rec)
        gender_of[gt.identity_id] = gt.gender
    identities = sorted(by_identity)
    rng = substream(seed, "split")

    if stratify_by_gender:
        test_ids: set[int] = set()
        for g in sorted(set(gender_of.values())):
            group = [i for i in identities if gender_of[i] == g]
            k = int(round(test_identity_fraction * len(group)))
            if k:
                test_ids.update(rng.choice(group, size=k, replace=False).tolist())
    else:
        k = int(round(test_identity_fraction * len(identities)))
        test_ids = set(rng.choice(identities, size=k, replace=False).tolist()) if k else set()

    if not test_ids or len(test_ids) == len(identities):
        raise ValueError(
            f"fraction {test_identity_fraction} leaves an empty split for "
            f"{len(identities)} identities"
        )
    train = [r for r in instances if r.ground_truth.identity_id not in test_ids]
    test = [r for r in instances if r.ground_truth.identity_id in test_ids]
    return DatasetSplit(train=train, test=test)


def training_arrays(instances) -> TrainingData:
    """Strip ground truth; features ordered by instance id."""
    ordered = sorted(instances, key=lambda r: r.instance_id)
    return TrainingData(
        instance_ids=tuple(r.instance_id for r in ordered),
        voice=np.stack([r.voice for r in ordered]),
        face=np.stack([r.face for r in ordered]),
    )


INSTANCES_FILE = "instances.jsonl"
FEATURES_FILE = "features.bin"


def save_dataset(instances, out_dir, world_config: WorldConfig | None = None):
    """Persist records as JSON lines plus a sidecar float container.

    Feature vectors live in the sidecar; each JSONL row references them by
    byte offset into the container's ``features`` array.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(instances, key=lambda r: r.instance_id)
    chunks = []
    lines = []
    offset = 0
    for rec in ordered:
        gt = rec.ground_truth
        row = {
            "instance_id": rec.instance_id,
            "voice_offset": offset,
            "voice_dim": int(rec.voice.shape[0]),
            "face_offset": offset + rec.voice.shape[0] * 8,
            "face_dim": int(rec.face.shape[0]),
            "ground_truth": {
                "identity_id": gt.identity_id,
                "gender": gt.gender,
                "nationality": gt.nationality,
                "age_group": gt.age_group,
                "is_deviate": gt.is_deviate,
                "deviate_mode": gt.deviate_mode,
            },
        }
        chunks.append(rec.voice)
        chunks.append(rec.face)
        offset += (rec.voice.shape[0] + rec.face.shape[0]) * 8
        lines.append(json.dumps(row, sort_keys=True, separators=(",", ":")))
    meta = {"kind": "features", "count": len(ordered)}
    if world_config is not None:
        meta["world_config"] = {
            k: getattr(world_config, k) for k in WorldConfig.__dataclass_fields__
        }
    write_container(out_dir / FEATURES_FILE, meta, {"features": np.concatenate(chunks)})
    (out_dir / INSTANCES_FILE).write_text("\n".join(lines) + "\n")


def load_dataset(data_dir):
    """Load a persisted dataset; returns (records, container meta)."""
    data_dir = Path(data_dir)
    instances_path = data_dir / INSTANCES_FILE
    if not instances_path.exists():
        raise FileNotFoundError(f"no dataset at {data_dir} ({INSTANCES_FILE} missing)")
    meta, arrays = read_container(data_dir / FEATURES_FILE)
    flat = arrays["features"]
    records = []
    with open(instances_path) as fh:
        for line in fh:
            row = json.loads(line)
            v0 = row["voice_offset"] // 8
            f0 = row["face_offset"] // 8
            gt = row["ground_truth"]
            records.append(
                InstanceRecord(
                    instance_id=row["instance_id"],
                    voice=flat[v0 : v0 + row["voice_dim"]].copy(),
                    face=flat[f0 : f0 + row["face_dim"]].copy(),
                    ground_truth=GroundTruth(
                        identity_id=gt["identity_id"],
                        gender=gt["gender"],
                        nationality=gt["nationality"],
                        age_group=gt["age_group"],
                        is_deviate=gt["is_deviate"],
                        deviate_mode=gt["deviate_mode"],
                    ),
                )
            )
    return records, meta
