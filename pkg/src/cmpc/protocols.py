"""Evaluation protocols: 1-of-2 matching, verification ROC AUC, and
retrieval mAP, with attribute-stratified trial groups.

Trials are sampled from test-split records only. Stratified groups constrain
the imposter identity to share the named attribute(s) with the probe
identity, removing that attribute as a cue:

    U   unconstrained
    G   same binary (gender-like) attribute
    N   same first k-way (nationality-like) attribute
    A   same second k-way (age-like) attribute
    GN  same G and N
    GNA same G, N and A

Ties in any score comparison count as half correct, which keeps random
embeddings at 0.5 under every metric.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .container import read_container, write_container
from .seeding import substream

GROUPS = ("U", "G", "N", "A", "GN", "GNA")
PROTOCOLS = ("matching", "verification", "retrieval")

_GROUP_ATTRS = {
    "U": (),
    "G": ("gender",),
    "N": ("nationality",),
    "A": ("age_group",),
    "GN": ("gender", "nationality"),
    "GNA": ("gender", "nationality", "age_group"),
}


@dataclass(frozen=True)
class MatchingTrial:
    probe_id: int
    true_id: int
    imposter_id: int
    probe_modality: str  # "voice" or "face"


@dataclass(frozen=True)
class VerificationTrial:
    voice_id: int
    face_id: int
    same_identity: bool


@dataclass(frozen=True)
class RetrievalTrial:
    probe_id: int
    probe_modality: str
    gallery_ids: tuple
    relevant: tuple  # bool per gallery entry


@dataclass(frozen=True)
class TrialList:
    kind: str
    group: str
    trials: tuple


@dataclass(frozen=True)
class EmbeddingSet:
    instance_ids: np.ndarray
    voice: np.ndarray
    face: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self,
            "_row",
            {int(i): r for r, i in enumerate(self.instance_ids)},
        )

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in ids])
        except KeyError as exc:
            raise ValueError(f"no embedding for instance {exc.args[0]}") from exc


def embed_instances(encoder_v, encoder_f, instances) -> EmbeddingSet:
    ordered = sorted(instances, key=lambda r: r.instance_id)
    return EmbeddingSet(
        instance_ids=np.array([r.instance_id for r in ordered]),
        voice=encoder_v.forward(np.stack([r.voice for r in ordered])),
        face=encoder_f.forward(np.stack([r.face for r in ordered])),
    )


def _identity_index(instances):
    by_identity: dict[int, list] = {}
    attrs: dict[int, dict] = {}
    for rec in sorted(instances, key=lambda r: r.instance_id):
        gt = rec.ground_truth
        by_identity.setdefault(gt.identity_id, []).append(rec.instance_id)
        attrs[gt.identity_id] = {
            "gender": gt.gender,
            "nationality": gt.nationality,
            "age_group": gt.age_group,
        }
    return by_identity, attrs


def _strata_groups(by_identity, attrs, group):
    """Map each identity to the list of identities sharing its strat key."""
    keys = {
        ident: tuple(attrs[ident][a] for a in _GROUP_ATTRS[group])
        for ident in by_identity
    }
    buckets: dict[tuple, list] = {}
    for ident in sorted(by_identity):
        buckets.setdefault(keys[ident], []).append(ident)
    return keys, buckets


def build_trials(instances, kind: str, group: str = "U", count: int = 1000,
                 seed: int = 0) -> TrialList:
    """Sample a seeded trial list over the given instances.

    For matching and retrieval, ``count`` trials are drawn per probe
    modality; for verification, ``count`` total pairs are drawn, half of
    them positives. Raises ValueError when the stratification leaves no
    identity with a valid imposter.
    """
    if kind not in PROTOCOLS:
        raise ValueError(f"unknown protocol {kind!r}")
    if group not in GROUPS:
        raise ValueError(f"unknown group {group!r}")
    if count < 1:
        raise ValueError("count must be >= 1")
    by_identity, attrs = _identity_index(instances)
    if len(by_identity) < 2:
        raise ValueError("need at least 2 identities to build trials")
    keys, buckets = _strata_groups(by_identity, attrs, group)
    feasible = [i for i in sorted(by_identity) if len(buckets[keys[i]]) >= 2]
    if not feasible:
        raise ValueError(
            f"stratification {group!r} is infeasible: no attribute bucket "
            "contains 2 identities"
        )
    rng = substream(seed, "trials", kind, group)

    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    def pick_imposter_identity(probe_identity):
        bucket = buckets[keys[probe_identity]]
        other = pick([i for i in bucket if i != probe_identity])
        return other

    trials = []
    if kind == "matching":
        for modality in ("voice", "face"):
            for _ in range(count):
                probe_identity = pick(feasible)
                probe = pick(by_identity[probe_identity])
                true = pick(by_identity[probe_identity])
                imposter_identity = pick_imposter_identity(probe_identity)
                imposter = pick(by_identity[imposter_identity])
                trials.append(
                    MatchingTrial(
                        probe_id=probe,
                        true_id=true,
                        imposter_id=imposter,
                        probe_modality=modality,
                    )
                )
    elif kind == "verification":
        n_pos = count // 2
        for i in range(count):
            if i < n_pos:
                ident = pick(sorted(by_identity))
                trials.append(
                    VerificationTrial(
                        voice_id=pick(by_identity[ident]),
                        face_id=pick(by_identity[ident]),
                        same_identity=True,
                    )
                )
            else:
                ident = pick(feasible)
                other = pick_imposter_identity(ident)
                trials.append(
                    VerificationTrial(
                        voice_id=pick(by_identity[ident]),
                        face_id=pick(by_identity[other]),
                        same_identity=False,
                    )
                )
    else:  # retrieval
        if group != "U":
            raise ValueError("retrieval trials are unstratified; use group='U'")
        all_ids = sorted(r.instance_id for r in instances)
        identity_of = {
            r.instance_id: r.ground_truth.identity_id for r in instances
        }
        gallery = tuple(all_ids)
        for modality in ("voice", "face"):
            n_probes = min(count, len(all_ids))
            probe_ids = sorted(
                rng.choice(all_ids, size=n_probes, replace=False).tolist()
            )
            for probe in probe_ids:
                relevant = tuple(
                    identity_of[g] == identity_of[probe] for g in gallery
                )
                trials.append(
                    RetrievalTrial(
                        probe_id=probe,
                        probe_modality=modality,
                        gallery_ids=gallery,
                        relevant=relevant,
                    )
                )
    return TrialList(kind=kind, group=group, trials=tuple(trials))


def matching_accuracy(embeddings: EmbeddingSet, trial_list: TrialList) -> dict:
    """Fraction of trials whose true candidate outscores the imposter.

    Ties count 0.5. Returned per probe direction, keyed ``voice_to_face``
    and ``face_to_voice``.
    """
    if trial_list.kind != "matching":
        raise ValueError(f"expected matching trials, got {trial_list.kind}")
    out = {}
    for modality, key in (("voice", "voice_to_face"), ("face", "face_to_voice")):
        trials = [t for t in trial_list.trials if t.probe_modality == modality]
        if not trials:
            continue
        probe_src = embeddings.voice if modality == "voice" else embeddings.face
        cand_src = embeddings.face if modality == "voice" else embeddings.voice
        probes = probe_src[embeddings.rows([t.probe_id for t in trials])]
        trues = cand_src[embeddings.rows([t.true_id for t in trials])]
        imps = cand_src[embeddings.rows([t.imposter_id for t in trials])]
        s_true = np.sum(probes * trues, axis=1)
        s_imp = np.sum(probes * imps, axis=1)
        correct = (s_true > s_imp) + 0.5 * (s_true == s_imp)
        out[key] = float(correct.mean())
    return out


def verification_auc(embeddings: EmbeddingSet, trial_list: TrialList) -> float:
    """ROC AUC of cosine scores via the rank (Mann-Whitney) statistic.

    Midranks give every tied positive/negative pair the 0.5 credit the
    pairwise-counting definition assigns, so this equals both the O(n^2)
    count and trapezoidal ROC integration.
    """
    if trial_list.kind != "verification":
        raise ValueError(f"expected verification trials, got {trial_list.kind}")
    trials = trial_list.trials
    v = embeddings.voice[embeddings.rows([t.voice_id for t in trials])]
    f = embeddings.face[embeddings.rows([t.face_id for t in trials])]
    scores = np.sum(v * f, axis=1)
    labels = np.array([t.same_identity for t in trials], dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("verification needs both positive and negative pairs")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def retrieval_map(embeddings: EmbeddingSet, trial_list: TrialList) -> dict:
    """Mean average precision per probe direction.

    Galleries are ranked by descending cosine with ties broken by ascending
    instance id; AP averages precision at each relevant item's rank.
    """
    if trial_list.kind != "retrieval":
        raise ValueError(f"expected retrieval trials, got {trial_list.kind}")
    sums = {"voice_to_face": [], "face_to_voice": []}
    for trial in trial_list.trials:
        probe_src = embeddings.voice if trial.probe_modality == "voice" else embeddings.face
        cand_src = embeddings.face if trial.probe_modality == "voice" else embeddings.voice
        probe = probe_src[embeddings.rows([trial.probe_id])[0]]
        gallery_ids = np.array(trial.gallery_ids)
        gallery = cand_src[embeddings.rows(gallery_ids)]
        relevant = np.array(trial.relevant, dtype=bool)
        if not relevant.any():
            raise ValueError(
                f"gallery for probe {trial.probe_id} has no relevant item"
            )
        scores = gallery @ probe
        order = np.lexsort((gallery_ids, -scores))
        rel_sorted = relevant[order]
        ranks = np.flatnonzero(rel_sorted) + 1
        hits = np.arange(1, len(ranks) + 1)
        ap = float((hits / ranks).mean())
        key = "voice_to_face" if trial.probe_modality == "voice" else "face_to_voice"
        sums[key].append(ap)
    return {k: float(np.mean(v)) for k, v in sums.items() if v}


@dataclass(frozen=True)
class EvalReport:
    matching: dict
    verification: dict
    retrieval: dict
    trial_count: int

    def to_dict(self) -> dict:
        return {
            "matching": self.matching,
            "verification": self.verification,
            "retrieval": self.retrieval,
            "trial_count": self.trial_count,
        }

    def to_text(self) -> str:
        lines = []
        if self.matching:
            groups = list(self.matching)
            lines.append("Matching accuracy (%)")
            lines.append("  direction " + "".join(f"{g:>8}" for g in groups))
            for key, label in (("voice_to_face", "V-F"), ("face_to_voice", "F-V")):
                cells = "".join(
                    f"{100 * self.matching[g][key]:>8.1f}" for g in groups
                )
                lines.append(f"  {label:<10}{cells}")
        if self.verification:
            groups = list(self.verification)
            lines.append("Verification AUC (x100)")
            lines.append("  " + "".join(f"{g:>8}" for g in groups))
            lines.append(
                "  " + "".join(f"{100 * self.verification[g]:>8.1f}" for g in groups)
            )
        if self.retrieval:
            lines.append("Retrieval mAP (%)")
            lines.append(
                f"  V-F {100 * self.retrieval['voice_to_face']:.2f}"
                f"   F-V {100 * self.retrieval['face_to_voice']:.2f}"
            )
        return "\n".join(lines) + "\n"


def evaluate(embeddings: EmbeddingSet, instances, protocols=PROTOCOLS,
             groups=("U",), count: int = 1000, seed: int = 0) -> EvalReport:
    """Run the selected protocols over stratified trial groups."""
    matching: dict = {}
    verification: dict = {}
    retrieval: dict = {}
    for group in groups:
        if "matching" in protocols:
            trials = build_trials(instances, "matching", group, count, seed)
            matching[group] = matching_accuracy(embeddings, trials)
        if "verification" in protocols:
            trials = build_trials(instances, "verification", group, count, seed)
            verification[group] = verification_auc(embeddings, trials)
    if "retrieval" in protocols:
        trials = build_trials(instances, "retrieval", "U", count, seed)
        retrieval = retrieval_map(embeddings, trials)
    return EvalReport(
        matching=matching,
        verification=verification,
        retrieval=retrieval,
        trial_count=count,
    )


def save_trials(trial_list: TrialList, path) -> None:
    """One JSON object per line; first line is the list header."""
    lines = [
        json.dumps(
            {"kind": trial_list.kind, "group": trial_list.group},
            sort_keys=True,
        )
    ]
    for t in trial_list.trials:
        if trial_list.kind == "matching":
            row = {
                "probe_id": t.probe_id,
                "true_id": t.true_id,
                "imposter_id": t.imposter_id,
                "probe_modality": t.probe_modality,
            }
        elif trial_list.kind == "verification":
            row = {
                "voice_id": t.voice_id,
                "face_id": t.face_id,
                "same_identity": t.same_identity,
            }
        else:
            row = {
                "probe_id": t.probe_id,
                "probe_modality": t.probe_modality,
                "gallery_ids": list(t.gallery_ids),
                "relevant": [bool(r) for r in t.relevant],
            }
        lines.append(json.dumps(row, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trials(path) -> TrialList:
    with open(path) as fh:
        header = json.loads(fh.readline())
        kind, group = header["kind"], header["group"]
        trials = []
        for line in fh:
            row = json.loads(line)
            if kind == "matching":
                trials.append(MatchingTrial(**row))
            elif kind == "verification":
                trials.append(VerificationTrial(**row))
            else:
                trials.append(
                    RetrievalTrial(
                        probe_id=row["probe_id"],
                        probe_modality=row["probe_modality"],
                        gallery_ids=tuple(row["gallery_ids"]),
                        relevant=tuple(row["relevant"]),
                    )
                )
    return TrialList(kind=kind, group=group, trials=tuple(trials))


def save_embeddings(embeddings: EmbeddingSet, bin_path, index_path) -> None:
    """Export as one (2N, d) matrix: all voice rows, then all face rows."""
    stacked = np.concatenate([embeddings.voice, embeddings.face], axis=0)
    ids = [int(i) for i in embeddings.instance_ids]
    write_container(
        bin_path,
        {"kind": "embeddings", "count": len(ids), "dim": int(stacked.shape[1])},
        {"embeddings": stacked},
    )
    index = [
        {"row": r, "instance_id": iid, "modality": "voice"}
        for r, iid in enumerate(ids)
    ] + [
        {"row": len(ids) + r, "instance_id": iid, "modality": "face"}
        for r, iid in enumerate(ids)
    ]
    Path(index_path).write_text(
        json.dumps(index, sort_keys=True, separators=(",", ":")) + "\n"
    )


def load_embeddings(bin_path, index_path) -> EmbeddingSet:
    meta, arrays = read_container(bin_path)
    index = json.loads(Path(index_path).read_text())
    stacked = arrays["embeddings"]
    n = meta["count"]
    ids = [None] * n
    for entry in index:
        if entry["modality"] == "voice":
            ids[entry["row"]] = entry["instance_id"]
    return EmbeddingSet(
        instance_ids=np.array(ids),
        voice=stacked[:n],
        face=stacked[n:],
    )
