"""Training orchestration: warmup on the instance loss, epoch-boundary
clustering, recalibrated prototype training, checkpointing, metrics.

The schedule is expressed in epochs; step counts are derived once the
dataset is bound. Every epoch visits each training instance exactly once in
a seeded shuffled order, so the memory bank is fully initialized after the
first epoch and prototypes can be rebuilt at every boundary from then on.
Clustering starts at the last warmup boundary, so the first post-warmup step
always consumes prototypes built from warmup-epoch memories.

Checkpoints capture the entire run state (encoders, optimizer moments,
memory bank, prototypes, recalibration weights, step counter); resuming
reproduces the uninterrupted run bit for bit, including the metrics CSV.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .clustering import PrototypeSet, build_prototypes
from .container import read_container, write_container
from .data import TrainingData
from .errors import LoadError, NumericError
from .losses import LossConfig, cid_loss, cmpc_loss
from .memory import MemoryBank
from .nn import Adam, LrSchedule, MlpEncoder
from .recalibration import RecalibrationState, build_recalibration
from .seeding import substream

LOSS_MODES = ("cid", "cmpc", "cmpc-recal")

METRICS_COLUMNS = (
    "step", "epoch", "lr", "loss_total", "loss_cid_vf", "loss_cid_fv",
    "loss_proto_vf", "loss_proto_fv", "mean_weight",
    "eval_matching_vf", "eval_matching_fv", "eval_verification_auc",
    "eval_retrieval_vf", "eval_retrieval_fv",
)
EVAL_COLUMNS = METRICS_COLUMNS[9:]

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    warmup_epochs: int = 5
    loss_mode: str = "cmpc-recal"
    temperature: float = 0.03
    k_list: tuple = (10, 20, 30)
    memory_momentum: float = 0.5
    delta: float = -1.0
    kappa: float = 0.1
    initial_lr: float = 1e-4
    peak_lr: float = 5e-3
    final_lr: float = 1e-4
    hidden_dims: tuple = (64, 64)
    embedding_dim: int = 32
    weight_decay: float = 0.002
    kmeans_restarts: int = 2
    kmeans_max_iters: int = 100
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        object.__setattr__(
            self, "hidden_dims", tuple(int(d) for d in self.hidden_dims)
        )
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}"
            )
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.loss_mode != "cid" and self.warmup_epochs < 1:
            raise ValueError(
                "prototype modes need warmup_epochs >= 1 so the memory bank "
                "covers a full epoch before the first clustering"
            )
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not self.k_list:
            raise ValueError("k_list must be non-empty")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if not 0 <= self.memory_momentum < 1:
            raise ValueError("memory_momentum must be in [0, 1)")
        if self.eval_every < 0 or self.seed < 0:
            raise ValueError("eval_every and seed must be non-negative")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(
            temperature=self.temperature, num_clusterings=len(self.k_list)
        )


@dataclass
class TrainState:
    config: TrainConfig
    encoder_v: MlpEncoder
    encoder_f: MlpEncoder
    adam_v: Adam
    adam_f: Adam
    bank: MemoryBank
    schedule: LrSchedule
    steps_per_epoch: int
    data_fingerprint: str
    step: int = 0
    protos_v: PrototypeSet | None = None
    protos_f: PrototypeSet | None = None
    recal: RecalibrationState | None = None

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.config.warmup_epochs * self.steps_per_epoch


def _batch_sizes(n: int, batch_size: int) -> list:
    """Chunk sizes covering n instances; a trailing remainder of 1 is folded
    into the previous batch so every batch can form negatives."""
    sizes = [batch_size] * (n // batch_size)
    rem = n % batch_size
    if rem == 1 and sizes:
        sizes[-1] += 1
    elif rem:
        sizes.append(rem)
    return sizes


def data_fingerprint(data: TrainingData) -> str:
    h = hashlib.sha256()
    h.update(np.array(data.instance_ids, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(data.voice, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(data.face, dtype="<f8").tobytes())
    return h.hexdigest()


def new_state(config: TrainConfig, data: TrainingData) -> TrainState:
    n = data.num_instances
    if n < 2:
        raise ValueError("training data must contain at least 2 instances")
    if config.loss_mode != "cid" and max(config.k_list) > n:
        raise ValueError(
            f"k_list {config.k_list} exceeds the {n} training instances"
        )
    sizes = _batch_sizes(n, config.batch_size)
    spe = len(sizes)
    voice_dims = (data.voice.shape[1], *config.hidden_dims, config.embedding_dim)
    face_dims = (data.face.shape[1], *config.hidden_dims, config.embedding_dim)
    encoder_v = MlpEncoder(voice_dims, substream(config.seed, "init", "voice"))
    encoder_f = MlpEncoder(face_dims, substream(config.seed, "init", "face"))
    return TrainState(
        config=config,
        encoder_v=encoder_v,
        encoder_f=encoder_f,
        adam_v=Adam(encoder_v.parameters(), weight_decay=config.weight_decay),
        adam_f=Adam(encoder_f.parameters(), weight_decay=config.weight_decay),
        bank=MemoryBank(
            data.instance_ids,
            config.embedding_dim,
            config.embedding_dim,
            momentum=config.memory_momentum,
        ),
        schedule=LrSchedule(
            initial_lr=config.initial_lr,
            peak_lr=config.peak_lr,
            final_lr=config.final_lr,
            warmup_steps=config.warmup_epochs * spe,
            total_steps=config.epochs * spe,
        ),
        steps_per_epoch=spe,
        data_fingerprint=data_fingerprint(data),
    )


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class _MetricsWriter:
    """CSV writer that, on resume, drops rows at or past the resumed step so
    the final file matches an uninterrupted run byte for byte."""

    def __init__(self, path, resume_step: int):
        self.path = Path(path) if path else None
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if resume_step > 0 and self.path.exists():
            with open(self.path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header is not None and tuple(header) != METRICS_COLUMNS:
                    raise LoadError(f"{path} has an unexpected metrics schema")
                kept = [row for row in reader if int(row[0]) < resume_step]
        with open(self.path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
            writer.writerows(kept)
        self.handle = open(self.path, "a", newline="")
        self.writer = csv.writer(self.handle)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        self.writer.writerow(
            [_format_value(row.get(col)) for col in METRICS_COLUMNS]
        )

    def close(self) -> None:
        if self.path is not None:
            self.handle.close()


def _parameter_digest(*encoders) -> str:
    h = hashlib.sha256()
    for enc in encoders:
        for p in enc.parameters():
            h.update(p.tobytes())
    return h.hexdigest()


def _nonfinite_component(breakdown) -> str | None:
    for name in ("cid_vf", "cid_fv", "proto_vf", "proto_fv"):
        if not np.isfinite(getattr(breakdown, name)).all():
            return name
    if not np.isfinite(breakdown.weighted_total):
        return "weighted_total"
    return None


def train(config: TrainConfig, data: TrainingData, **kwargs) -> TrainState:
    """Train from scratch. See ``run_training`` for keyword options."""
    return run_training(new_state(config, data), data, **kwargs)


def run_training(state: TrainState, data: TrainingData, *,
                 metrics_path=None, checkpoint_path=None, eval_fn=None,
                 stop_after_epoch=None, diagnostics_dir=None) -> TrainState:
    """Drive ``state`` forward to the end of training (or ``stop_after_epoch``).

    ``eval_fn(state) -> dict`` is called every ``config.eval_every`` epochs
    and may fill the eval_* metrics columns; it receives the live state but
    must not mutate it. Checkpoints are written at every epoch boundary when
    ``checkpoint_path`` is set.
    """
    cfg = state.config
    if data_fingerprint(data) != state.data_fingerprint:
        raise LoadError("training data does not match the checkpointed run")
    spe = state.steps_per_epoch
    total = state.total_steps
    warmup = state.warmup_steps
    stop = total if stop_after_epoch is None else min(total, stop_after_epoch * spe)
    needs_protos = cfg.loss_mode != "cid"
    writer = _MetricsWriter(metrics_path, state.step)
    if diagnostics_dir is not None:
        Path(diagnostics_dir).mkdir(parents=True, exist_ok=True)

    epoch_order = None
    epoch_bounds = None
    names_v = state.encoder_v.parameter_names()
    names_f = state.encoder_f.parameter_names()
    try:
        while state.step < stop:
            step = state.step
            epoch = step // spe
            pos = step % spe
            if pos == 0 or epoch_order is None:
                order = substream(cfg.seed, "shuffle", epoch).permutation(
                    data.num_instances
                )
                sizes = _batch_sizes(data.num_instances, cfg.batch_size)
                starts = np.concatenate([[0], np.cumsum(sizes)])
                epoch_order = order
                epoch_bounds = starts
            rows = epoch_order[epoch_bounds[pos]:epoch_bounds[pos + 1]]
            ids = [data.instance_ids[r] for r in rows]
            xv = data.voice[rows]
            xf = data.face[rows]
            v = state.encoder_v.forward(xv)
            f = state.encoder_f.forward(xf)

            use_cid = cfg.loss_mode == "cid" or step < warmup
            mean_weight = 1.0
            coeffs = None
            if use_cid:
                breakdown, grad_v, grad_f = cid_loss(
                    v, f, cfg.temperature, instance_ids=ids
                )
            else:
                if cfg.loss_mode == "cmpc-recal" and state.recal is not None:
                    w = state.recal.weights[rows]
                    coeffs = w / w.sum()
                    mean_weight = float(w.mean())
                breakdown, grad_v, grad_f = cmpc_loss(
                    v, f,
                    state.protos_v.centroids,
                    state.protos_f.centroids,
                    state.protos_v.assignments[:, rows],
                    state.protos_f.assignments[:, rows],
                    cfg.loss_config,
                    coeffs=coeffs,
                    instance_ids=ids,
                )
            bad = _nonfinite_component(breakdown)
            if bad is not None:
                raise NumericError(
                    f"non-finite loss component {bad} at step {step}"
                )
            lr = state.schedule.lr_at(step)
            state.adam_v.step(
                state.encoder_v.parameters(),
                state.encoder_v.backward(xv, grad_v),
                lr,
                names=names_v,
            )
            state.adam_f.step(
                state.encoder_f.parameters(),
                state.encoder_f.backward(xf, grad_f),
                lr,
                names=names_f,
            )
            state.bank.update(ids, v, f)

            row = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "loss_total": breakdown.weighted_total,
                "loss_cid_vf": float(breakdown.cid_vf.mean()),
                "loss_cid_fv": float(breakdown.cid_fv.mean()),
                "loss_proto_vf": float(breakdown.proto_vf.mean()),
                "loss_proto_fv": float(breakdown.proto_fv.mean()),
                "mean_weight": mean_weight,
            }

            boundary = pos == spe - 1
            if boundary:
                next_epoch = epoch + 1
                # Cluster only if some step of the next epoch will use
                # prototypes; the earliest boundary that fires is the end of
                # the final warmup epoch.
                if (
                    needs_protos
                    and next_epoch < cfg.epochs
                    and (next_epoch + 1) * spe > warmup
                ):
                    digest = _parameter_digest(state.encoder_v, state.encoder_f)
                    snap_v, snap_f = state.bank.snapshot()
                    state.protos_v, state.protos_f = build_prototypes(
                        snap_v, snap_f, cfg.k_list,
                        seed=substream(cfg.seed, "cluster", epoch).integers(2 ** 63),
                        max_iters=cfg.kmeans_max_iters,
                        restarts=cfg.kmeans_restarts,
                    )
                    if cfg.loss_mode == "cmpc-recal":
                        state.recal = build_recalibration(
                            snap_v, snap_f, state.protos_v, state.protos_f,
                            delta=cfg.delta, kappa=cfg.kappa,
                        )
                    if digest != _parameter_digest(
                        state.encoder_v, state.encoder_f
                    ):
                        raise RuntimeError(
                            "encoder parameters changed during a gradient-free "
                            "phase (clustering/recalibration)"
                        )
                    if diagnostics_dir is not None:
                        _dump_diagnostics(state, epoch, diagnostics_dir)
                if (
                    eval_fn is not None
                    and cfg.eval_every
                    and next_epoch % cfg.eval_every == 0
                ):
                    row.update(
                        {k: v for k, v in eval_fn(state).items()
                         if k in EVAL_COLUMNS}
                    )
            writer.write(row)
            state.step += 1
            if boundary and checkpoint_path is not None:
                save_checkpoint(state, checkpoint_path)
    finally:
        writer.close()
    return state


def _dump_diagnostics(state: TrainState, epoch: int, out_dir) -> None:
    out_dir = Path(out_dir)
    for protos in (state.protos_v, state.protos_f):
        stem = f"prototypes_epoch{epoch:04d}_{protos.modality}"
        arrays = {
            f"centroids_{r}": c for r, c in enumerate(protos.centroids)
        }
        write_container(
            out_dir / f"{stem}.bin",
            {"kind": "prototypes", "modality": protos.modality,
             "k_list": list(protos.k_list)},
            arrays,
        )
        index = {
            "modality": protos.modality,
            "k_list": list(protos.k_list),
            "inertias": list(protos.inertias),
            "epoch": epoch,
        }
        (out_dir / f"{stem}.json").write_text(
            json.dumps(index, sort_keys=True, indent=2) + "\n"
        )
    if state.recal is not None:
        counts, edges = np.histogram(state.recal.scores, bins=30)
        with open(out_dir / f"deviation_hist_epoch{epoch:04d}.csv", "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count", "mean_weight"])
            scores = state.recal.scores
            for b in range(len(counts)):
                upper = (
                    scores < edges[b + 1]
                    if b < len(counts) - 1
                    else scores <= edges[b + 1]
                )
                mask = (scores >= edges[b]) & upper
                mean_w = (
                    float(state.recal.weights[mask].mean()) if mask.any() else None
                )
                writer.writerow(
                    [repr(float(edges[b])), repr(float(edges[b + 1])),
                     int(counts[b]), _format_value(mean_w)]
                )


def save_checkpoint(state: TrainState, path) -> None:
    """Serialize the full training state to one container file."""
    meta = {
        "kind": "train_state",
        "format": CHECKPOINT_FORMAT,
        "config": asdict(state.config),
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "data_fingerprint": state.data_fingerprint,
        "instance_ids": [int(i) for i in state.bank.instance_ids],
        "bank_initialized": state.bank.initialized.astype(int).tolist(),
        "adam_t": [state.adam_v.t, state.adam_f.t],
        "voice_layer_dims": list(state.encoder_v.layer_dims),
        "face_layer_dims": list(state.encoder_f.layer_dims),
        "has_protos": state.protos_v is not None,
        "has_recal": state.recal is not None,
    }
    arrays: dict[str, np.ndarray] = {}
    for tag, enc in (("enc_v", state.encoder_v), ("enc_f", state.encoder_f)):
        for name, p in zip(enc.parameter_names(), enc.parameters()):
            arrays[f"{tag}/{name}"] = p
    for tag, adam in (("adam_v", state.adam_v), ("adam_f", state.adam_f)):
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            arrays[f"{tag}/m{i}"] = m
            arrays[f"{tag}/v{i}"] = v
    arrays["bank/voice"] = state.bank.voice
    arrays["bank/face"] = state.bank.face
    if state.protos_v is not None:
        meta["k_list"] = list(state.protos_v.k_list)
        for tag, protos in (("protos_v", state.protos_v),
                            ("protos_f", state.protos_f)):
            for r, c in enumerate(protos.centroids):
                arrays[f"{tag}/centroids{r}"] = c
            arrays[f"{tag}/assignments"] = protos.assignments.astype(np.float64)
            meta[f"{tag}_inertias"] = list(protos.inertias)
    if state.recal is not None:
        meta["recal"] = {
            "delta": state.recal.delta,
            "kappa": state.recal.kappa,
            "mean": state.recal.mean,
            "std": state.recal.std,
        }
        arrays["recal/scores"] = state.recal.scores
        arrays["recal/weights"] = state.recal.weights
    write_container(path, meta, arrays)


def load_checkpoint(path) -> TrainState:
    meta, arrays = read_container(path)
    if meta.get("kind") != "train_state":
        raise LoadError(f"{path} is not a training checkpoint")
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(
            f"{path} has checkpoint format {meta.get('format')}, expected "
            f"{CHECKPOINT_FORMAT}"
        )
    config = TrainConfig(**meta["config"])
    encoder_v = MlpEncoder(meta["voice_layer_dims"])
    encoder_f = MlpEncoder(meta["face_layer_dims"])
    for tag, enc in (("enc_v", encoder_v), ("enc_f", encoder_f)):
        enc.set_parameters(
            [arrays[f"{tag}/{n}"] for n in enc.parameter_names()]
        )
    adam_v = Adam(encoder_v.parameters(), weight_decay=config.weight_decay)
    adam_f = Adam(encoder_f.parameters(), weight_decay=config.weight_decay)
    for tag, adam, t in (("adam_v", adam_v, meta["adam_t"][0]),
                         ("adam_f", adam_f, meta["adam_t"][1])):
        adam.m = [arrays[f"{tag}/m{i}"] for i in range(len(adam.m))]
        adam.v = [arrays[f"{tag}/v{i}"] for i in range(len(adam.v))]
        adam.t = int(t)
    bank = MemoryBank(
        meta["instance_ids"],
        config.embedding_dim,
        config.embedding_dim,
        momentum=config.memory_momentum,
    )
    bank.voice = arrays["bank/voice"]
    bank.face = arrays["bank/face"]
    bank.initialized = np.array(meta["bank_initialized"], dtype=bool)
    protos_v = protos_f = None
    if meta["has_protos"]:
        k_list = tuple(meta["k_list"])
        loaded = {}
        for tag, modality in (("protos_v", "voice"), ("protos_f", "face")):
            loaded[tag] = PrototypeSet(
                modality=modality,
                k_list=k_list,
                centroids=tuple(
                    arrays[f"{tag}/centroids{r}"] for r in range(len(k_list))
                ),
                assignments=arrays[f"{tag}/assignments"].astype(np.int64),
                inertias=tuple(meta[f"{tag}_inertias"]),
            )
        protos_v, protos_f = loaded["protos_v"], loaded["protos_f"]
    recal = None
    if meta["has_recal"]:
        recal = RecalibrationState(
            delta=meta["recal"]["delta"],
            kappa=meta["recal"]["kappa"],
            mean=meta["recal"]["mean"],
            std=meta["recal"]["std"],
            scores=arrays["recal/scores"],
            weights=arrays["recal/weights"],
        )
    spe = int(meta["steps_per_epoch"])
    return TrainState(
        config=config,
        encoder_v=encoder_v,
        encoder_f=encoder_f,
        adam_v=adam_v,
        adam_f=adam_f,
        bank=bank,
        schedule=LrSchedule(
            initial_lr=config.initial_lr,
            peak_lr=config.peak_lr,
            final_lr=config.final_lr,
            warmup_steps=config.warmup_epochs * spe,
            total_steps=config.epochs * spe,
        ),
        steps_per_epoch=spe,
        data_fingerprint=meta["data_fingerprint"],
        step=int(meta["step"]),
        protos_v=protos_v,
        protos_f=protos_f,
        recal=recal,
    )
