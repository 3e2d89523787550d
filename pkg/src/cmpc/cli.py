"""Command-line interface: gen, train, eval, embed, plot.

Config precedence is built-in defaults < JSON config file (--config) <
explicit flags. All randomness flows from --seed through named substreams,
so two invocations with the same resolved config produce identical outputs.

Exit codes: 0 success, 2 flag/validation error, 3 data or path error,
4 numeric failure.
"""
import os

# Cap BLAS threading before numpy loads anywhere; >1 thread is only allowed
# via CMPC_THREADS because reductions must stay bitwise deterministic.
_threads = os.environ.get("CMPC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    WorldConfig,
    generate,
    load_dataset,
    save_dataset,
    split_by_identity,
    training_arrays,
)
from .errors import LoadError, NumericError, StateError
from .protocols import (
    GROUPS,
    PROTOCOLS,
    EmbeddingSet,
    build_trials,
    embed_instances,
    evaluate,
    load_embeddings,
    matching_accuracy,
    retrieval_map,
    save_embeddings,
    save_trials,
    verification_auc,
)
from .trainer import (
    TrainConfig,
    load_checkpoint,
    new_state,
    run_training,
    save_checkpoint,
)

DEFAULT_TEST_FRACTION = 0.2


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(out_dir: Path, command: str, config: dict, seed,
                   outputs) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": f"cmpc-{__version__}",
        "created_utc": _utc_now(),
        "outputs": sorted(str(p) for p in outputs),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def _prepare_out_dir(path_str: str, force: bool) -> Path:
    out_dir = Path(path_str)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(
            f"output directory {out_dir} exists and is not empty "
            "(pass --force to overwrite)"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _load_config_file(path_str):
    if path_str is None:
        return {}
    path = Path(path_str)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    config = json.loads(path.read_text())
    if not isinstance(config, dict):
        raise ValueError("config file must contain a JSON object")
    return config


def _resolve(defaults: dict, file_config: dict, args, keys) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    for key in keys:
        if key in file_config:
            resolved[key] = file_config[key]
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _parse_int_list(text: str):
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    file_config = _load_config_file(args.config)
    keys = [k for k in WorldConfig.__dataclass_fields__]
    resolved = _resolve(
        {k: getattr(WorldConfig, k) for k in keys}, file_config, args, keys
    )
    config = WorldConfig(**resolved)
    out_dir = _prepare_out_dir(args.out, args.force)
    records = generate(config)
    save_dataset(records, out_dir, world_config=config)
    write_manifest(
        out_dir, "gen", asdict(config), config.seed,
        ["instances.jsonl", "features.bin"],
    )
    print(f"wrote {len(records)} instances to {out_dir}")
    return 0


def _load_split(data_dir, test_fraction, seed):
    records, _ = load_dataset(data_dir)
    split = split_by_identity(records, test_fraction, seed)
    return records, split


def _periodic_eval_fn(test_records, count, seed):
    matching_trials = build_trials(test_records, "matching", "U", count, seed)
    verification_trials = build_trials(test_records, "verification", "U",
                                       count, seed)
    retrieval_trials = build_trials(test_records, "retrieval", "U", count, seed)

    def eval_fn(state):
        emb = embed_instances(state.encoder_v, state.encoder_f, test_records)
        match = matching_accuracy(emb, matching_trials)
        auc = verification_auc(emb, verification_trials)
        rmap = retrieval_map(emb, retrieval_trials)
        return {
            "eval_matching_vf": match["voice_to_face"],
            "eval_matching_fv": match["face_to_voice"],
            "eval_verification_auc": auc,
            "eval_retrieval_vf": rmap["voice_to_face"],
            "eval_retrieval_fv": rmap["face_to_voice"],
        }

    return eval_fn


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise FileNotFoundError(f"dataset directory {data_dir} not found")
    out_dir = _prepare_out_dir(args.out, args.force or args.resume is not None)

    if args.resume is not None:
        state = load_checkpoint(args.resume)
        config = state.config
        test_fraction = args.test_fraction or DEFAULT_TEST_FRACTION
    else:
        file_config = _load_config_file(args.config)
        keys = [k for k in TrainConfig.__dataclass_fields__]
        defaults = {k: getattr(TrainConfig, k) for k in keys}
        if args.k_list is not None:
            args.k_list = _parse_int_list(args.k_list)
        resolved = _resolve(defaults, file_config, args, keys)
        config = TrainConfig(**resolved)
        test_fraction = args.test_fraction or DEFAULT_TEST_FRACTION
        state = None

    records, split = _load_split(data_dir, test_fraction, config.seed)
    train_data = training_arrays(split.train)
    if state is None:
        state = new_state(config, train_data)

    eval_fn = None
    if config.eval_every:
        eval_fn = _periodic_eval_fn(
            split.test, count=500, seed=config.seed
        )

    metrics_path = out_dir / "metrics.csv"
    checkpoint_path = out_dir / "checkpoint.cmpc"
    diagnostics_dir = out_dir / "diagnostics" if args.diagnostics else None
    state = run_training(
        state,
        train_data,
        metrics_path=metrics_path,
        checkpoint_path=checkpoint_path,
        eval_fn=eval_fn,
        stop_after_epoch=args.stop_after_epoch,
        diagnostics_dir=diagnostics_dir,
    )
    write_manifest(
        out_dir, "train",
        {**asdict(config), "test_fraction": test_fraction,
         "data": str(data_dir)},
        config.seed,
        ["metrics.csv", "checkpoint.cmpc"],
    )
    print(
        f"trained {state.step}/{state.total_steps} steps "
        f"({config.loss_mode}); checkpoint at {checkpoint_path}"
    )
    return 0


def _embeddings_from_checkpoint(ckpt_path, data_dir, test_fraction):
    state = load_checkpoint(ckpt_path)
    records, _ = load_dataset(data_dir)
    if records[0].voice.shape[0] != state.encoder_v.input_dim or \
            records[0].face.shape[0] != state.encoder_f.input_dim:
        raise LoadError(
            f"checkpoint expects dims "
            f"({state.encoder_v.input_dim}, {state.encoder_f.input_dim}) but "
            f"dataset has ({records[0].voice.shape[0]}, "
            f"{records[0].face.shape[0]})"
        )
    split = split_by_identity(records, test_fraction, state.config.seed)
    emb = embed_instances(state.encoder_v, state.encoder_f, split.test)
    return emb, split.test, state


def cmd_eval(args) -> int:
    out_dir = _prepare_out_dir(args.out, args.force)
    protocols = tuple(p.strip() for p in args.protocols.split(","))
    for p in protocols:
        if p not in PROTOCOLS:
            raise ValueError(f"unknown protocol {p!r} (choices: {PROTOCOLS})")
    groups = tuple(g.strip() for g in args.strata.split(","))
    for g in groups:
        if g not in GROUPS:
            raise ValueError(f"unknown group {g!r} (choices: {GROUPS})")

    test_fraction = args.test_fraction or DEFAULT_TEST_FRACTION
    if args.embeddings is not None:
        emb = load_embeddings(
            Path(args.embeddings) / "embeddings.bin",
            Path(args.embeddings) / "embeddings.json",
        )
        records, _ = load_dataset(args.data)
        by_id = {r.instance_id: r for r in records}
        test_records = [by_id[int(i)] for i in emb.instance_ids]
    elif args.ckpt is not None:
        emb, test_records, _ = _embeddings_from_checkpoint(
            args.ckpt, args.data, test_fraction
        )
    else:
        raise ValueError("eval needs --ckpt or --embeddings")

    report = evaluate(
        emb, test_records, protocols=protocols, groups=groups,
        count=args.count, seed=args.trial_seed,
    )
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    (out_dir / "report.txt").write_text(report.to_text())
    if args.dump_trials:
        for kind in protocols:
            for group in groups if kind != "retrieval" else ("U",):
                trials = build_trials(
                    test_records, kind, group, args.count, args.trial_seed
                )
                save_trials(trials, out_dir / f"trials_{kind}_{group}.jsonl")
    write_manifest(
        out_dir, "eval",
        {"protocols": list(protocols), "strata": list(groups),
         "count": args.count, "trial_seed": args.trial_seed},
        args.trial_seed,
        ["report.json", "report.txt"],
    )
    sys.stdout.write(report.to_text())
    return 0


def cmd_embed(args) -> int:
    out_dir = _prepare_out_dir(args.out, args.force)
    test_fraction = args.test_fraction or DEFAULT_TEST_FRACTION
    emb, _, _ = _embeddings_from_checkpoint(args.ckpt, args.data, test_fraction)
    save_embeddings(
        emb, out_dir / "embeddings.bin", out_dir / "embeddings.json"
    )
    write_manifest(
        out_dir, "embed", {"ckpt": str(args.ckpt), "data": str(args.data)},
        None, ["embeddings.bin", "embeddings.json"],
    )
    print(f"wrote {2 * len(emb.instance_ids)} embedding rows to {out_dir}")
    return 0


def _pca_2d(points):
    centered = points - points.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(1, points.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    return centered @ eigvecs[:, order], eigvals[order]


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.metrics is None and args.ckpt is None and args.embeddings is None:
        raise ValueError("plot needs --metrics, --ckpt, or --embeddings")
    out_dir = _prepare_out_dir(args.out, args.force)
    outputs = []

    if args.metrics is not None:
        metrics_path = Path(args.metrics)
        if not metrics_path.exists():
            raise FileNotFoundError(f"metrics file {metrics_path} not found")
        import csv as _csv

        steps, totals, cid_vf, proto_vf = [], [], [], []
        with open(metrics_path, newline="") as fh:
            for row in _csv.DictReader(fh):
                steps.append(int(row["step"]))
                totals.append(float(row["loss_total"]))
                cid_vf.append(float(row["loss_cid_vf"]))
                proto_vf.append(float(row["loss_proto_vf"]))
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(steps, totals, label="total")
        ax.plot(steps, cid_vf, label="instance v->f", alpha=0.7)
        ax.plot(steps, proto_vf, label="prototype v->f", alpha=0.7)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "loss_curve.svg")
        plt.close(fig)
        outputs.append("loss_curve.svg")

    if args.ckpt is not None:
        state = load_checkpoint(args.ckpt)
        if state.recal is None:
            raise StateError(
                "checkpoint has no recalibration state; train with "
                "--loss cmpc-recal to plot the deviation histogram"
            )
        scores, weights = state.recal.scores, state.recal.weights
        counts, edges = np.histogram(scores, bins=30)
        with open(out_dir / "deviation_hist.csv", "w", newline="") as fh:
            import csv as _csv

            writer = _csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count"])
            for b in range(len(counts)):
                writer.writerow(
                    [repr(float(edges[b])), repr(float(edges[b + 1])),
                     int(counts[b])]
                )
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
               color="#4878cf")
        ax2 = ax.twinx()
        order = np.argsort(scores)
        ax2.plot(scores[order], weights[order], color="#d65f5f",
                 label="weight")
        ax.set_xlabel("deviation score")
        ax.set_ylabel("instances")
        ax2.set_ylabel("weight")
        fig.tight_layout()
        fig.savefig(out_dir / "deviation_hist.svg")
        plt.close(fig)
        outputs.extend(["deviation_hist.csv", "deviation_hist.svg"])

    if args.embeddings is not None:
        if args.data is None:
            raise ValueError("--embeddings plotting needs --data for labels")
        emb = load_embeddings(
            Path(args.embeddings) / "embeddings.bin",
            Path(args.embeddings) / "embeddings.json",
        )
        records, _ = load_dataset(args.data)
        by_id = {r.instance_id: r for r in records}
        identity = np.array(
            [by_id[int(i)].ground_truth.identity_id for i in emb.instance_ids]
        )
        gender = np.array(
            [by_id[int(i)].ground_truth.gender for i in emb.instance_ids]
        )
        stacked = np.concatenate([emb.voice, emb.face], axis=0)
        proj, _ = _pca_2d(stacked)
        n = len(emb.instance_ids)
        for name, labels in (("identity", identity), ("gender", gender)):
            fig, ax = plt.subplots(figsize=(6, 6))
            cmap = plt.cm.tab20
            colors = [cmap(int(l) % 20) for l in labels]
            ax.scatter(proj[:n, 0], proj[:n, 1], c=colors, marker="o", s=18,
                       label="voice", alpha=0.8)
            ax.scatter(proj[n:, 0], proj[n:, 1], c=colors, marker="^", s=18,
                       label="face", alpha=0.8)
            ax.set_title(f"2D PCA of embeddings, colored by {name}")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out_dir / f"pca_{name}.svg")
            plt.close(fig)
            outputs.append(f"pca_{name}.svg")

    write_manifest(out_dir, "plot", {}, None, outputs)
    print(f"wrote {len(outputs)} plot files to {out_dir}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmpc",
        description="Prototype-contrastive cross-modal training on synthetic "
                    "paired data.",
    )
    parser.add_argument("--version", action="version",
                        version=f"cmpc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--config", help="JSON config file")
    gen.add_argument("--force", action="store_true",
                     help="overwrite an existing output directory")
    gen.add_argument("--identities", dest="num_identities", type=int)
    gen.add_argument("--videos", dest="videos_per_identity", type=int)
    gen.add_argument("--latent-dim", dest="latent_dim", type=int)
    gen.add_argument("--voice-dim", dest="voice_dim", type=int)
    gen.add_argument("--face-dim", dest="face_dim", type=int)
    gen.add_argument("--voice-noise", dest="voice_noise_std", type=float)
    gen.add_argument("--face-noise", dest="face_noise_std", type=float)
    gen.add_argument("--deviate-fraction", dest="deviate_fraction", type=float)
    gen.add_argument("--deviate-mode", dest="deviate_mode",
                     choices=["swap", "background", "drift"])
    gen.add_argument("--nationalities", dest="num_nationalities", type=int)
    gen.add_argument("--age-groups", dest="num_age_groups", type=int)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train encoders on a dataset")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--config", help="JSON config file")
    tr.add_argument("--force", action="store_true")
    tr.add_argument("--loss", dest="loss_mode",
                    choices=["cid", "cmpc", "cmpc-recal"])
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--temperature", type=float)
    tr.add_argument("--momentum", dest="memory_momentum", type=float)
    tr.add_argument("--k-list", dest="k_list",
                    help="comma-separated cluster counts, e.g. 10,20,30")
    tr.add_argument("--delta", type=float)
    tr.add_argument("--kappa", type=float)
    tr.add_argument("--lr-initial", dest="initial_lr", type=float)
    tr.add_argument("--lr-peak", dest="peak_lr", type=float)
    tr.add_argument("--lr-final", dest="final_lr", type=float)
    tr.add_argument("--weight-decay", dest="weight_decay", type=float)
    tr.add_argument("--eval-every", dest="eval_every", type=int,
                    help="run periodic evaluation every E epochs")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--test-fraction", dest="test_fraction", type=float)
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--stop-after-epoch", dest="stop_after_epoch", type=int,
                    help="stop after this many epochs (for interruption tests)")
    tr.add_argument("--diagnostics", action="store_true",
                    help="dump per-epoch prototypes and deviation histograms")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint or export")
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--ckpt", help="training checkpoint")
    ev.add_argument("--embeddings", help="directory from `cmpc embed`")
    ev.add_argument("--protocols", default="matching,verification,retrieval")
    ev.add_argument("--strata", default="U")
    ev.add_argument("--count", type=int, default=1000)
    ev.add_argument("--trial-seed", dest="trial_seed", type=int, default=0)
    ev.add_argument("--test-fraction", dest="test_fraction", type=float)
    ev.add_argument("--dump-trials", dest="dump_trials", action="store_true")
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(func=cmd_eval)

    em = sub.add_parser("embed", help="export test-split embeddings")
    em.add_argument("--data", required=True)
    em.add_argument("--ckpt", required=True)
    em.add_argument("--out", required=True)
    em.add_argument("--test-fraction", dest="test_fraction", type=float)
    em.add_argument("--force", action="store_true")
    em.set_defaults(func=cmd_embed)

    pl = sub.add_parser("plot", help="diagnostic plots from run artifacts")
    pl.add_argument("--out", required=True)
    pl.add_argument("--metrics", help="metrics.csv from a training run")
    pl.add_argument("--ckpt", help="checkpoint with recalibration state")
    pl.add_argument("--embeddings", help="directory from `cmpc embed`")
    pl.add_argument("--data", help="dataset directory (labels for PCA)")
    pl.add_argument("--force", action="store_true")
    pl.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (LoadError, StateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
