"""Command-line entry point: ``synth``, ``train``, ``predict``, ``evaluate`` and ``sweep``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import dataio, pareto
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import ExperimentConfig
from .errors import ArtifactMismatchError, ConfigError, MobPrivacyError
from .metrics import rows_to_csv, validate_report
from .model import STANDALONE_HEADS, PAEModel, build_standalone
from .pipeline import PrepConfig, build_dataset, evaluate, model_outputs, prepare, tensors_for
from .spatial import Vocab
from .training import Trainer, TrainConfig, history_csv
from .utils import atomic_write, stable_hash, write_json

log = logging.getLogger("mobprivacy")

MODEL_KINDS = ("pae", "standalone-predictor", "standalone-reidentifier", "standalone-autoencoder")
HEADS = {"next-location": "utility", "user-id": "privacy", "reconstruction": "decoder"}
TOP_K = 10


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"package": pkg, "python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__}


def _write_run_manifest(path: Path, command: str, cfg: ExperimentConfig, files: Sequence[Path], **extra) -> None:
    """Run manifest; the wall-clock timestamp lives under ``timestamps`` so the rest is reproducible."""
    write_json(path, {
        "command": command,
        "config_hash": stable_hash(cfg.raw),
        "seed": cfg.seed,
        "versions": _versions(),
        "files": {f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in files},
        **extra,
        "timestamps": {"created_at": datetime.now(timezone.utc).isoformat(timespec="seconds")},
    })


def _standalone_kind(kind: str) -> Optional[str]:
    return kind.split("-", 1)[1] if kind.startswith("standalone-") else None


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed, args.output)
    synth = cfg.synthetic()
    if args.dry_run:
        print(f"would write {synth.num_users * synth.days * 24 * 60 // synth.resolution_minutes} records")
        return 0
    out = cfg.output_dir / "records.csv"
    dataio.write_records(out, dataio.generate_synthetic(synth))
    _write_run_manifest(cfg.output_dir / "synth_manifest.json", "synth", cfg, [out])
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed, args.output)
    prep, tcfg = cfg.prep(), cfg.train()
    if args.epochs is not None:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "epochs": args.epochs})
    records = cfg.records()
    if args.dry_run:
        print(f"{len(records)} records; would train {args.model} for {tcfg.epochs} epochs")
        return 0
    data = prepare(records, prep, seed=cfg.seed, dtype=cfg.dtype)
    dims = cfg.dims(data.vocab.num_locations, data.vocab.num_users)
    standalone = _standalone_kind(args.model)
    if standalone is None:
        model = PAEModel(dims, seed=cfg.seed, dtype=cfg.dtype)
        trainer = Trainer(model, data.train, data.val, tcfg, objective="pae")
    else:
        model = build_standalone(standalone, dims, seed=cfg.seed, dtype=cfg.dtype)
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "head_updates": [STANDALONE_HEADS[standalone]]})
        trainer = Trainer(model, data.train, data.val, tcfg, objective=standalone)
    if args.resume is not None:
        saved, man, state = load_checkpoint(args.resume, expected_vocab_hash=data.vocab.hash)
        if state is None or man.get("kind") != args.model:
            raise ArtifactMismatchError(f"{args.resume}: not a resumable {args.model} checkpoint")
        model.load_state_dict(saved.state_dict())
        trainer.load_state(state)
    trainer.fit()

    out = cfg.output_dir
    files = [
        save_checkpoint(out / f"{args.model}.ckpt", model, {
            "kind": args.model,
            "vocab_hash": data.vocab.hash,
            "seed": cfg.seed,
            "weights": list(tcfg.weights.as_tuple()),
            "sequence_length": prep.sequence_length,
            "prep": prep.to_dict(),
            "train": tcfg.to_dict(),
        }, trainer.state()),
        atomic_write(out / "vocab.json", data.vocab.to_json()),
        atomic_write(out / f"{args.model}_history.csv", history_csv(trainer.history)),
        dataio.write_trajectories(out / "train_trajectories.csv", data.train_set),
        dataio.write_trajectories(out / "test_trajectories.csv", data.test_set),
    ]
    _write_run_manifest(out / f"{args.model}_manifest.json", "train", cfg, files, kind=args.model,
                        epochs_run=trainer.epoch)
    print(files[0])
    return 0


def _load_matching(paths: Sequence[str], vocab: Optional[Vocab]):
    """Load checkpoints and the vocabulary; every checkpoint must match the vocabulary hash."""
    loaded = []
    for p in paths:
        manifest = read_manifest(p) if Path(p).is_file() else None
        if manifest is None:
            raise ArtifactMismatchError(f"checkpoint not found: {p}")
        if vocab is None:
            vpath = Path(p).parent / "vocab.json"
            if not vpath.is_file():
                raise ArtifactMismatchError(f"no vocab.json next to {p}; pass --vocab")
            vocab = Vocab.from_json(vpath.read_text())
        loaded.append(load_checkpoint(p, expected_vocab_hash=vocab.hash))
    return vocab, loaded


def _input_tensors(path: str, vocab: Vocab, manifest: dict, dtype):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    prep = PrepConfig.from_dict(manifest["prep"])
    if dataio.is_trajectory_csv(path):
        dataset = dataio.load_trajectories(path)
    else:
        dataset = build_dataset(dataio.load_records(path), prep)
    return dataset, tensors_for(dataset, vocab, manifest["sequence_length"], dtype)


def cmd_predict(args) -> int:
    vocab = Vocab.from_json(Path(args.vocab).read_text()) if args.vocab else None
    vocab, [(model, manifest, _)] = _load_matching([args.checkpoint], vocab)
    head = HEADS[args.head]
    if head not in model.heads:
        raise ConfigError(f"checkpoint {args.checkpoint} has no {args.head} head (heads: {list(model.heads)})")
    _, data = _input_tensors(args.input, vocab, manifest, model.dtype)
    o = model_outputs(model, data)
    if head == "decoder":
        text = _reconstruction_csv(o, data)
    else:
        probs = o[head]
        if not np.allclose(probs.sum(1), 1.0, atol=1e-6):
            raise MobPrivacyError("head probabilities do not sum to 1")
        names = vocab.location_cells if head == "utility" else vocab.users
        truth = o["y"] if head == "utility" else o["z"]
        text = _topk_csv(probs, truth, names, data)
    out = Path(args.output) if args.output else Path(args.checkpoint).with_name(f"predictions_{args.head}.csv")
    atomic_write(out, text)
    print(out)
    return 0


def _topk_csv(probs: np.ndarray, truth: np.ndarray, names: Sequence[str], data) -> str:
    k = min(TOP_K, probs.shape[1])
    # stable sort on -p keeps ties in index order
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["example", "trajectory_id", "window_start", "true"]
               + [c for i in range(1, k + 1) for c in (f"class_{i}", f"prob_{i}")])
    for i, row in enumerate(order):
        pairs = [v for j in row for v in (names[j], repr(float(probs[i, j])))]
        w.writerow([i, *_row_id(data, i), names[truth[i]], *pairs])
    return buf.getvalue()


def _row_id(data, i: int) -> tuple:
    return data.ids[i] if data.ids is not None else ("", "")


def _reconstruction_csv(o: dict, data) -> str:
    X_rec, mask = o["X_rec"], o["mask"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["example", "trajectory_id", "timestep", "observed"] + [f"v{j}" for j in range(X_rec.shape[2])])
    for i in range(X_rec.shape[0]):
        for t in range(X_rec.shape[1]):
            w.writerow([i, _row_id(data, i)[0], t, int(mask[i, t])] + [repr(float(v)) for v in X_rec[i, t]])
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    vocab = Vocab.from_json(Path(args.vocab).read_text()) if args.vocab else None
    vocab, loaded = _load_matching([args.model, *(args.standalone or [])], vocab)
    (model, manifest, _), refs = loaded[0], loaded[1:]
    _, data = _input_tensors(args.input, vocab, manifest, model.dtype)

    ref_utility = ref_privacy = None
    extra = {"kind": manifest.get("kind"), "examples": len(data)}
    for ref_model, ref_manifest, _ in refs:
        if ref_manifest.get("sequence_length") != manifest.get("sequence_length"):
            raise ArtifactMismatchError("standalone reference uses a different sequence length")
        r = evaluate(ref_model, data)
        kind = ref_manifest.get("kind")
        if kind == "standalone-predictor":
            ref_utility = r.top_n_utility
        elif kind == "standalone-reidentifier":
            ref_privacy = r.top_n_privacy
        elif kind == "standalone-autoencoder":
            fresh = evaluate(PAEModel(ref_model.dims, heads=("decoder",), seed=ref_model.seed, dtype=ref_model.dtype),
                             data)
            extra["standalone_autoencoder"] = {
                "trained": {"euclidean": r.euclidean, "manhattan": r.manhattan,
                            "euclidean_log10": r.euclidean_log10, "manhattan_log10": r.manhattan_log10},
                "untrained": {"euclidean": fresh.euclidean, "manhattan": fresh.manhattan,
                              "euclidean_log10": fresh.euclidean_log10, "manhattan_log10": fresh.manhattan_log10},
            }
        elif kind == "pae" or kind is None:
            raise ConfigError(f"--standalone expects standalone checkpoints, got kind {kind!r}")
    if ref_utility is None:
        log.warning("no standalone predictor reference; utility decline omitted")
    if ref_privacy is None:
        log.warning("no standalone reidentifier reference; privacy gain omitted")

    report = evaluate(model, data, ref_utility, ref_privacy, relative=args.relative)
    report.extra = extra
    d = report.to_dict()
    validate_report(d)
    out = Path(args.output) if args.output else Path(args.model).parent
    write_json(out / "report.json", d)
    atomic_write(out / "report.csv", rows_to_csv([report.csv_row(kind=manifest.get("kind"))]))
    print(out / "report.json")
    return 0


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed, args.output)
    sweep = cfg.sweep()
    if args.dry_run:
        print(f"{sweep.cell_count} cells")
        return 0
    external = pareto.load_external(args.external) if args.external else []
    points = pareto.run_sweep(cfg.records(), cfg.prep(), sweep, cfg.train(), cache_dir=cfg.output_dir / "cache",
                              workers=args.workers)
    out = cfg.output_dir
    files = [atomic_write(out / "sweep.csv", pareto.sweep_csv(points)),
             write_json(out / "frontier.json", pareto.sweep_summary(points, sweep, external))]
    if args.plot:
        pareto.plot_front(out / "frontier.png", points, external)
    _write_run_manifest(out / "sweep_manifest.json", "sweep", cfg, files)
    n_front = len(pareto.front_indices(points))
    failed = sum(not p.ok for p in points)
    print(f"{len(points)} points, {n_front} on the frontier, {failed} failed")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobprivacy", description="Utility/privacy trade-off toolkit for mobility data.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output_help="output directory (overrides output_dir)"):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="base seed (overrides config)")
        p.add_argument("--output", help=output_help)
        p.add_argument("--dry-run", action="store_true", help="validate and report what would run")

    p = sub.add_parser("synth", help="generate a synthetic record CSV")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the adversarial model or a standalone baseline")
    common(p)
    p.add_argument("--model", choices=MODEL_KINDS, default="pae")
    p.add_argument("--epochs", type=int, help="override training.epochs")
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run one head of a checkpoint on an input file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="trajectory CSV (from train) or raw record CSV")
    p.add_argument("--head", choices=sorted(HEADS), default="next-location")
    p.add_argument("--vocab", help="vocab.json (default: next to the checkpoint)")
    p.add_argument("--output", help="predictions CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint against standalone references")
    p.add_argument("--model", required=True, help="checkpoint to evaluate")
    p.add_argument("--standalone", nargs="*", help="standalone reference checkpoints")
    p.add_argument("--input", required=True, help="test trajectory CSV")
    p.add_argument("--vocab", help="vocab.json (default: next to --model)")
    p.add_argument("--relative", action="store_true", help="decline/gain relative to the reference instead of points")
    p.add_argument("--output", help="report directory (default: next to --model)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="sweep weights, sequence length and granularity; compute the frontier")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--external", help="CSV of external (utility, privacy) points to classify")
    p.add_argument("--plot", action="store_true", help="also write frontier.png")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MobPrivacyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
