"""Command-line interface: train, eval, features, gradcheck, synth.

Exit codes: 0 success, 1 verification failure, 2 usage/config/data error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .backbone import PRESETS, ModelConfig
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import (DEFAULT_FRACTIONS, SampleList, export_dataset, images_labels, load_dataset,
                   oversample_balance, split, synth_generate)
from .errors import HSCMTError, NumericalError
from .evalkit import write_pca, write_reports
from .gradcheck import SUITE, run_suite
from .model import HSCMTNet
from .training import TrainConfig, TrainState, fit, write_history_csv

log = logging.getLogger("fmehscmt")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

# RunConfig keys accepted in --config files; flags override file values
RUN_DEFAULTS = {
    "preset": "desk",
    "seed": 0,
    "out": None,
    "data": None,
    "synthetic": None,
    "fractions": list(DEFAULT_FRACTIONS),
    "balance": False,
    "threads": 1,
    "epochs": 20,
    "lr0": 1e-3,
    "decay_factor": 0.85,
    "decay_every": 20,
    "weight_decay": 0.04,
    "batch_size": 16,
    "dropout": 0.3,
    "clip_norm": 5.0,
    "augment": True,
    "checkpoint": None,
    "split": "test",
    "manifest": None,
    "model": {},
}


class UsageError(HSCMTError):
    pass


# ---------------------------------------------------------------- config plumbing

def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(RUN_DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(RUN_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        cfg.update(loaded)
    for key in RUN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    return cfg


def model_config(cfg: dict, num_classes: int) -> ModelConfig:
    base = PRESETS[cfg["preset"]]().to_dict()
    valid = {f.name for f in fields(ModelConfig)}
    unknown = set(cfg["model"]) - valid
    if unknown:
        raise UsageError(f"unknown model config keys {sorted(unknown)}")
    base.update(cfg["model"])
    base.update(num_classes=num_classes, dropout=cfg["dropout"])
    return ModelConfig.from_dict(base)


def train_config(cfg: dict) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)} & set(cfg)
    return TrainConfig(**{k: cfg[k] for k in keys})


def start_run(out: Optional[str], command: str, cfg: dict, force: bool) -> Optional[Path]:
    """Create the output directory and write run.json with status 'running'."""
    if out is None:
        return None
    path = Path(out)
    record = path / "run.json"
    if record.exists() and not force:
        try:
            prior = json.loads(record.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            prior = {}
        if prior.get("status") == "completed":
            raise UsageError(f"{path} already holds a completed {prior.get('command')} run; "
                             "pass --force to overwrite")
    try:
        path.mkdir(parents=True, exist_ok=True)
        _write_run(path, {"command": command, "status": "running", "version": __version__,
                          "seed": cfg.get("seed"), "config": cfg,
                          "started": time.strftime("%Y-%m-%dT%H:%M:%S")})
    except OSError as exc:
        raise UsageError(f"cannot write to {path}: {exc}") from exc
    return path


def _write_run(path: Path, record: dict) -> None:
    (path / "run.json").write_text(json.dumps(record, indent=2, default=str), encoding="utf-8")


def finish_run(path: Optional[Path], status: str, **extra) -> None:
    if path is None or not (path / "run.json").exists():
        return
    record = json.loads((path / "run.json").read_text(encoding="utf-8"))
    record.update(status=status, **extra)
    _write_run(path, record)


def load_samples(cfg: dict, size: int) -> SampleList:
    if cfg["data"]:
        return load_dataset(cfg["data"], size)
    if cfg["synthetic"]:
        return synth_generate(int(cfg["synthetic"]), size, cfg["seed"])
    raise UsageError("no dataset: pass --data DIR or --synthetic N")


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    # resuming continues a run rather than overwriting it
    out = start_run(cfg["out"] or _required("--out"), "train", cfg, args.force or args.resume)
    tcfg = train_config(cfg)
    size = model_config(cfg, 2).input_size
    samples = load_samples(cfg, size)
    num_classes = len(samples.class_names)
    mcfg = model_config(cfg, num_classes)
    data = split(samples, cfg["fractions"], cfg["seed"])
    data.write_manifest(out / "split.json")
    if cfg["balance"]:
        data.train = oversample_balance(data.train, np.random.default_rng([cfg["seed"], 99]))
    meta = {"class_names": samples.class_names, "fractions": list(cfg["fractions"]),
            "split_seed": cfg["seed"]}
    ckpt = out / "checkpoints"
    net = HSCMTNet(mcfg, seed=cfg["seed"])
    state = TrainState()
    if args.resume and (ckpt / "last" / "manifest.json").exists():
        net, state, _ = load_checkpoint(ckpt / "last")
        best_dir = ckpt / "best"
        if (best_dir / "manifest.json").exists():
            state.best_params = read_checkpoint(best_dir)[1]
            state.best_params = {n: state.best_params[n] for n in net.store.names()}
        log.info("resuming after epoch %d", state.epoch)
    else:
        save_checkpoint(net, state, ckpt / "last", tcfg, metadata=meta)

    def on_epoch(record, net_, st):
        print(f"epoch {record['epoch']:3d}  lr {record['lr']:.3g}  train_loss {record['train_loss']:.6f}"
              f"  val_loss {record['val_loss']:.6f}  val_acc {record['val_acc']:.4f}", flush=True)
        write_history_csv(st.history, out / "history.csv")
        save_checkpoint(net_, st, ckpt / "last", tcfg, metadata=meta)
        if st.best_params is not None and st.best_val_acc == record["val_acc"]:
            save_checkpoint(net_, st, ckpt / "best", tcfg, params=st.best_params, metadata=meta)

    started = time.time()
    state = fit(net, data, tcfg, callbacks=[on_epoch], state=state)
    write_history_csv(state.history, out / "history.csv")
    if not (ckpt / "best" / "manifest.json").exists():
        save_checkpoint(net, state, ckpt / "best", tcfg, params=state.best_params, metadata=meta)
    if data.val:
        x, y = images_labels(data.val)
        probs = net.infer(x, threads=cfg["threads"])[0]
        report = write_reports(out / "val", y, probs, samples.class_names)
        print(f"val  acc {report.accuracy:.2f}  macro F1 {report.macro_f1:.2f}")
    finish_run(out, "completed", wall_seconds=round(time.time() - started, 3),
               epochs=state.epoch)
    return EXIT_OK


def _load_for_eval(cfg: dict):
    if not cfg["checkpoint"]:
        _required("--checkpoint")
    net, _, _ = load_checkpoint(cfg["checkpoint"])
    manifest = read_checkpoint(cfg["checkpoint"])[0]
    meta = manifest.get("metadata", {})
    samples = load_samples(cfg, net.config.input_size)
    if len(samples.class_names) != net.config.num_classes:
        raise UsageError(f"dataset has {len(samples.class_names)} classes, checkpoint expects "
                         f"{net.config.num_classes}")
    names = meta.get("class_names")
    if names and list(names) != list(samples.class_names):
        raise UsageError(f"dataset classes {samples.class_names} differ from checkpoint {names}")
    chosen = _select(samples, cfg, meta)
    if not chosen:
        raise UsageError(f"split {cfg['split']!r} is empty")
    x, y = images_labels(chosen)
    if x.shape[2] != net.config.input_size:
        raise UsageError(f"images are {x.shape[2]}px, checkpoint expects {net.config.input_size}px")
    return net, x, y, samples.class_names


def _select(samples: SampleList, cfg: dict, meta: dict):
    which = cfg["split"]
    if which == "all":
        return list(samples)
    if cfg["manifest"]:
        wanted = set(json.loads(Path(cfg["manifest"]).read_text(encoding="utf-8"))[which])
        return [s for s in samples if s.source_path in wanted]
    fractions = meta.get("fractions", cfg["fractions"])
    seed = meta.get("split_seed", cfg["seed"])
    return getattr(split(samples, fractions, seed), which)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = start_run(cfg["out"] or _required("--out"), "eval", cfg, args.force)
    net, x, y, names = _load_for_eval(cfg)
    probs = net.infer(x, threads=cfg["threads"])[0]
    report = write_reports(out, y, probs, names)
    print(f"{cfg['split']}: n={report.total}  acc {report.accuracy:.2f}  sen {report.macro_sen:.2f}"
          f"  pre {report.macro_pre:.2f}  F1 {report.macro_f1:.2f} +/- {report.f1_ci:.2f}"
          f"  macro AUC-ROC {report.aucs['macro']['roc']:.4f}  AUC-PR {report.aucs['macro']['pr']:.4f}")
    finish_run(out, "completed")
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = resolve_config(args)
    out = start_run(cfg["out"] or _required("--out"), "features", cfg, args.force)
    net, x, y, names = _load_for_eval(cfg)
    feats = net.infer(x, threads=cfg["threads"])[1].astype(np.float64)
    header = "label," + ",".join(f"f{i}" for i in range(feats.shape[1]))
    np.savetxt(out / "features.csv", np.column_stack([y, feats]), delimiter=",",
               header=header, comments="", fmt=["%d"] + ["%.9g"] * feats.shape[1])
    res = write_pca(out, feats, y, names)
    print(f"{len(y)} feature vectors, PCA explained variance {res.explained_variance.round(6).tolist()}")
    finish_run(out, "completed", degenerate=res.degenerate)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    out = start_run(cfg["out"], "gradcheck", cfg, args.force)
    only = [n for item in (args.only or []) for n in item.split(",") if n]
    results = run_suite(only or None, seed=cfg["seed"], inject_fault=args.inject_fault)
    failed = []
    for name, (err, tol, ok) in results.items():
        print(f"{name:16s} max_rel_err {err:.3e}  tol {tol:.0e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print("failed: " + ", ".join(failed))
    if out is not None:
        (out / "gradcheck.json").write_text(json.dumps(
            {k: {"max_rel_err": e, "tol": t, "passed": ok} for k, (e, t, ok) in results.items()},
            indent=2), encoding="utf-8")
    finish_run(out, "completed" if not failed else "failed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = start_run(cfg["out"] or _required("--out"), "synth", cfg, args.force)
    samples = synth_generate(args.n, args.size, cfg["seed"], noise=args.noise)
    try:
        written = export_dataset(samples, out, samples.class_names)
    except OSError as exc:
        raise UsageError(f"cannot write dataset under {out}: {exc}") from exc
    print(f"wrote {len(written)} images to {out}")
    finish_run(out, "completed", files=len(written))
    return EXIT_OK


def _required(flag: str):
    raise UsageError(f"{flag} is required")


# ---------------------------------------------------------------- parser

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON run config; flags override its values")
    p.add_argument("--out", metavar="DIR", help="output directory for every artifact of the run")
    p.add_argument("--seed", type=int, help="seed for data generation, splitting and training")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model size preset (default desk)")
    p.add_argument("--threads", type=int, help="worker threads for batch inference")
    p.add_argument("--force", action="store_true", help="overwrite a completed run in --out")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="DIR", help="dataset root with one directory per class")
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="use N generated images per class instead of --data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmehscmt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write history and checkpoints")
    _shared(p)
    _data_flags(p)
    p.add_argument("--epochs", type=int, help="number of epochs (default 20)")
    p.add_argument("--lr0", type=float, help="initial learning rate (default 1e-3)")
    p.add_argument("--decay-factor", dest="decay_factor", type=float,
                   help="learning-rate multiplier per decay step (default 0.85)")
    p.add_argument("--decay-every", dest="decay_every", type=int,
                   help="epochs between learning-rate decays (default 20)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float,
                   help="decoupled weight decay (default 0.04)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (default 16)")
    p.add_argument("--dropout", type=float, help="dropout before the classifier (default 0.3)")
    p.add_argument("--clip-norm", dest="clip_norm", type=float,
                   help="global gradient-norm clip, 0 disables (default 5.0)")
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False,
                   help="disable flip/scale/shear augmentation")
    p.add_argument("--balance", action="store_const", const=True,
                   help="oversample minority classes in the training split")
    p.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="split fractions (default 0.7 0.1 0.2)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the last checkpoint in --out")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "confusion matrix, metrics and ROC/PR curves"),
                             ("features", cmd_features, "penultimate features and their PCA")):
        p = sub.add_parser(name, help=text)
        _shared(p)
        _data_flags(p)
        p.add_argument("--checkpoint", metavar="DIR", help="checkpoint directory to load")
        p.add_argument("--split", choices=("train", "val", "test", "all"),
                       help="which split to use (default test)")
        p.add_argument("--manifest", metavar="PATH",
                       help="split.json from training; otherwise the split is recomputed")
        p.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                       help="split fractions when the checkpoint does not record them")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _shared(p)
    p.add_argument("--only", action="append", metavar="NAME",
                   help=f"run only these checks (repeatable or comma separated): {', '.join(SUITE)}")
    p.add_argument("--inject-fault", dest="inject_fault", action="store_true",
                   help="corrupt every backward rule to confirm the suite catches it")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset in the class-directory layout")
    _shared(p)
    p.add_argument("--n", type=int, default=100, help="images per class (default 100)")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")
    p.add_argument("--noise", type=float, default=0.1, help="Gaussian pixel noise (default 0.1)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    out = getattr(args, "out", None)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        finish_run(Path(out) if out else None, "aborted", error=str(exc))
        return EXIT_NUMERIC
    except (HSCMTError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if not isinstance(exc, UsageError) or "already holds" not in str(exc):
            finish_run(Path(out) if out else None, "failed", error=str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
